#include "flipfl/experiment.hpp"

#include "flipfl/checkpoint.hpp"
#include "flipfl/errors.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace flipfl {

namespace attack {
NLOHMANN_JSON_SERIALIZE_ENUM(Criterion, {{Criterion::directional, "directional"},
                                         {Criterion::directionless, "directionless"}})
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AttackConfig, criterion, s_conv, s_dense, lambda, alpha, trigger_iters,
                                                trigger_lr, trigger_batch_size, validation_batch_size, local_steps,
                                                local_lr, gamma)
}  // namespace attack

namespace robust {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(BulyanConfig, assumed_f)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RobustLRConfig, beta, server_lr)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DeepSightConfig, num_random_inputs, eps_bias, eps_conv, eps_prob,
                                                eps_final, min_pts, tau, flag_mad_k)
}  // namespace robust

namespace refine {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DistillConfig, steps, lr, temperature)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(FedMVConfig, prune_fraction, prune_largest, erase_period, erase_z)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CRFLConfig, rho, sigma_train, sigma_test, votes)
}  // namespace refine

namespace exp {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DatasetConfig, num_classes, train_per_class, test_per_class,
                                                server_per_class, channels, height, width, noise_sd)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, conv_filters, kernel, hidden)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TriggerConfig, size, target, fill, margin)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DefenseSettings, kind, bulyan, robust_lr, deepsight, feddf, fedrad,
                                                fedmv, crfl)

// The attack object is flat: kind, trigger and the attack parameters side by side.
void to_json(nlohmann::json& j, const AttackSettings& a) {
    j = a.params;
    j["kind"] = a.kind;
    j["trigger"] = a.trigger;
}

void from_json(const nlohmann::json& j, AttackSettings& a) {
    a = AttackSettings{};
    a.kind = j.value("kind", a.kind);
    if (j.contains("trigger")) a.trigger = j.at("trigger").get<TriggerConfig>();
    nlohmann::json params = j;
    params.erase("kind");
    params.erase("trigger");
    a.params = params.get<attack::AttackConfig>();
}

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ExperimentConfig, seed, dataset, model, num_clients, num_malicious,
                                                clients_per_round, h, rounds, local_lr, local_steps, batch_size,
                                                guarantee_attacker, fedavg_divisor, attack, defense, checkpoints,
                                                output_dir, run_name, save_triggers)

namespace {

const std::vector<std::string> kAttacks{"none", "f3ba", "f3ba_trigopt", "baseline_rescale", "train_only"};
const std::vector<std::string> kDefenses{"fedavg", "feddf", "fedrad", "fedmv", "bulyan", "robust_lr", "deepsight", "crfl"};

bool one_of(const std::string& v, const std::vector<std::string>& options) {
    return std::find(options.begin(), options.end(), v) != options.end();
}

// Every key of `given` must exist in `reference` (recursively for objects).
void reject_unknown_keys(const nlohmann::json& given, const nlohmann::json& reference, const std::string& prefix) {
    if (!given.is_object() || !reference.is_object()) return;
    for (const auto& [key, value] : given.items()) {
        if (!reference.contains(key)) throw ConfigError("unknown config key '" + prefix + key + "'");
        reject_unknown_keys(value, reference.at(key), prefix + key + ".");
    }
}

std::string fmt(Real v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::string join_ids(const std::vector<int>& ids) {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) out += (i ? ";" : "") + std::to_string(ids[i]);
    return out;
}

}  // namespace

void ExperimentConfig::validate() const {
    if (num_clients < 1) throw ConfigError("num_clients must be >= 1");
    if (num_malicious < 0 || num_malicious > num_clients) throw ConfigError("num_malicious must lie in [0, num_clients]");
    if (clients_per_round < 1 || clients_per_round > num_clients)
        throw ConfigError("clients_per_round must lie in [1, num_clients]");
    if (!(h > 0)) throw ConfigError("h must be > 0");
    if (rounds < 0) throw ConfigError("rounds must be >= 0");
    if (local_lr < 0 || local_steps < 0 || batch_size < 1) throw ConfigError("invalid local training settings");
    if (fedavg_divisor != "participating" && fedavg_divisor != "total")
        throw ConfigError("fedavg_divisor must be 'participating' or 'total'");
    if (!one_of(attack.kind, kAttacks)) throw ConfigError("unknown attack '" + attack.kind + "'");
    if (!one_of(defense.kind, kDefenses)) throw ConfigError("unknown defense '" + defense.kind + "'");
    const auto& d = dataset;
    if (d.num_classes < 2 || d.train_per_class < 1 || d.test_per_class < 1 || d.server_per_class < 0)
        throw ConfigError("invalid dataset sizes");
    if (d.channels < 1 || d.height < 1 || d.width < 1) throw ConfigError("invalid image dims");
    if (model.conv_filters < 1 || model.kernel < 1 || model.kernel > std::min(d.height, d.width) || model.hidden < 0)
        throw ConfigError("invalid model config");
    if (attack.trigger.size < 1 || attack.trigger.size > std::min(d.height, d.width))
        throw ConfigError("trigger size must fit the image");
    if (attack.trigger.target < 0 || attack.trigger.target >= d.num_classes)
        throw ConfigError("trigger target must be a valid class");
    if (attack.kind != "none") attack.params.validate();
    for (int c : checkpoints)
        if (c < 1) throw ConfigError("checkpoints must be >= 1");
    if ((defense.kind == "feddf" || defense.kind == "fedrad") && d.server_per_class < 1)
        throw ConfigError("distillation defenses need server_per_class >= 1");
}

nlohmann::json to_json(const ExperimentConfig& cfg) {
    nlohmann::json j = cfg;
    return j;
}

ExperimentConfig config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    reject_unknown_keys(j, to_json(ExperimentConfig{}), "");
    ExperimentConfig cfg;
    try {
        cfg = j.get<ExperimentConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad config value: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return config_from_json(j);
}

void set_path(nlohmann::json& j, const std::string& dotted_key, nlohmann::json value) {
    if (dotted_key.empty()) throw ConfigError("empty config key");
    nlohmann::json* node = &j;
    std::size_t start = 0;
    for (;;) {
        const auto dot = dotted_key.find('.', start);
        const std::string part = dotted_key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw ConfigError("malformed config key '" + dotted_key + "'");
        if (dot == std::string::npos) {
            (*node)[part] = std::move(value);
            return;
        }
        node = &(*node)[part];
        start = dot + 1;
    }
}

void apply_override(nlohmann::json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' must look like key=value");
    const std::string key = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    set_path(j, key, std::move(value));
}

nn::Architecture build_architecture(const ExperimentConfig& cfg) {
    const auto& d = cfg.dataset;
    const auto& m = cfg.model;
    nn::Architecture arch;
    arch.push_back(nn::LayerSpec::conv2d(d.channels, d.height, d.width, m.conv_filters, m.kernel, m.kernel,
                                         nn::Activation::relu));
    Index width = arch.back().output_size();
    if (m.hidden > 0) {
        arch.push_back(nn::LayerSpec::dense(width, m.hidden, nn::Activation::relu));
        width = m.hidden;
    }
    arch.push_back(nn::LayerSpec::dense(width, d.num_classes, nn::Activation::identity));
    nn::validate(arch);
    return arch;
}

data::Trigger build_trigger(const ExperimentConfig& cfg) {
    const auto& d = cfg.dataset;
    const auto& t = cfg.attack.trigger;
    return data::Trigger::corner_square({d.channels, d.height, d.width}, t.size, t.target, t.fill, t.margin);
}

fl::Federation build_federation(const ExperimentConfig& cfg) {
    cfg.validate();
    const auto& d = cfg.dataset;
    const data::ImageDims dims{d.channels, d.height, d.width};
    const int per_class = d.train_per_class + d.test_per_class + d.server_per_class;
    const data::Dataset pool = data::gen_blobs_dataset(d.num_classes, per_class, dims, d.noise_sd, cfg.seed);

    const Index n_test = static_cast<Index>(d.num_classes) * d.test_per_class;
    const Index n_server = static_cast<Index>(d.num_classes) * d.server_per_class;
    std::vector<Index> test_idx, server_idx, train_idx;
    for (Index i = 0; i < pool.size(); ++i) {
        if (i < n_test) test_idx.push_back(i);
        else if (i < n_test + n_server) server_idx.push_back(i);
        else train_idx.push_back(i);
    }

    fl::Federation fed;
    fed.arch = build_architecture(cfg);
    fed.test_set = data::subset(pool, test_idx);
    fed.server_data = data::subset(pool, server_idx);
    const data::Dataset train = data::subset(pool, train_idx);
    const auto partition = data::dirichlet_partition(train, cfg.num_clients, cfg.h, cfg.seed);
    for (int i = 0; i < cfg.num_clients; ++i) {
        fl::ClientData c;
        c.id = i;
        c.data = data::subset(train, partition.assignments[static_cast<std::size_t>(i)]);
        c.malicious = i < cfg.num_malicious;
        fed.clients.push_back(std::move(c));
    }
    fed.default_trigger = build_trigger(cfg);
    fed.round.clients_per_round = cfg.clients_per_round;
    fed.round.local_steps = cfg.local_steps;
    fed.round.local_lr = cfg.local_lr;
    fed.round.batch_size = cfg.batch_size;
    fed.round.seed = cfg.seed;
    fed.round.guarantee_attacker = cfg.guarantee_attacker;
    fed.round.divisor = cfg.fedavg_divisor == "total" ? fl::FedAvgDivisor::total : fl::FedAvgDivisor::participating;
    return fed;
}

std::unique_ptr<fl::Aggregator> make_aggregator(const DefenseSettings& d) {
    if (d.kind == "fedavg") return std::make_unique<fl::FedAvgAggregator>();
    if (d.kind == "feddf") return std::make_unique<refine::FedDFAggregator>(d.feddf);
    if (d.kind == "fedrad") return std::make_unique<refine::FedRADAggregator>(d.fedrad);
    if (d.kind == "fedmv") return std::make_unique<refine::FedMVAggregator>(d.fedmv);
    if (d.kind == "bulyan") return std::make_unique<robust::BulyanAggregator>(d.bulyan);
    if (d.kind == "robust_lr") return std::make_unique<robust::RobustLRAggregator>(d.robust_lr);
    if (d.kind == "deepsight") return std::make_unique<robust::DeepSightAggregator>(d.deepsight);
    if (d.kind == "crfl") return std::make_unique<refine::CRFLAggregator>(d.crfl);
    throw ConfigError("unknown defense '" + d.kind + "'");
}

std::unique_ptr<fl::Adversary> make_adversary(const AttackSettings& a, const data::Trigger& trigger) {
    if (a.kind == "none") return nullptr;
    attack::AttackConfig p = a.params;
    if (a.kind == "baseline_rescale") return std::make_unique<attack::RescaleAttacker>(p, trigger);
    p.enable_flip = a.kind != "train_only";
    p.enable_trigger_opt = a.kind == "f3ba_trigopt";
    if (a.kind == "f3ba" || a.kind == "f3ba_trigopt" || a.kind == "train_only")
        return std::make_unique<attack::FocusedFlipAttacker>(p, trigger);
    throw ConfigError("unknown attack '" + a.kind + "'");
}

Real RunResult::mean_diagnostic(const std::string& key) const {
    Real sum = 0;
    int n = 0;
    for (const auto& m : history) {
        auto it = m.diagnostics.find(key);
        if (it == m.diagnostics.end()) continue;
        sum += std::stod(it->second);
        ++n;
    }
    if (n == 0) throw ConfigError("no round reported diagnostic '" + key + "'");
    return sum / n;
}

std::vector<std::string> csv_columns(const fl::Aggregator& aggregator) {
    std::vector<std::string> cols{"round", "acc", "asr", "malicious_sampled", "sampled"};
    for (auto& c : aggregator.diagnostic_columns()) cols.push_back(c);
    return cols;
}

RunResult run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    const fl::Federation fed = build_federation(cfg);
    auto aggregator = make_aggregator(cfg.defense);
    auto adversary = make_adversary(cfg.attack, fed.default_trigger);
    auto* flip_attacker = dynamic_cast<attack::FocusedFlipAttacker*>(adversary.get());

    RunResult result;
    result.arch = fed.arch;
    const auto columns = csv_columns(*aggregator);
    {
        std::ostringstream head;
        head << "# config " << to_json(cfg).dump() << '\n';
        for (std::size_t i = 0; i < columns.size(); ++i) head << (i ? "," : "") << columns[i];
        head << '\n';
        result.csv = head.str();
        result.diag_csv = "round,key,value\n";
    }

    const bool to_disk = !cfg.output_dir.empty();
    const std::filesystem::path dir(cfg.output_dir);
    std::ofstream csv_file, diag_file;
    if (to_disk) {
        std::filesystem::create_directories(dir);
        csv_file.open(dir / (cfg.run_name + ".csv"), std::ios::binary);
        diag_file.open(dir / (cfg.run_name + ".diag.csv"), std::ios::binary);
        if (!csv_file || !diag_file) throw ConfigError("cannot write metrics under " + dir.string());
        csv_file << result.csv << std::flush;
        diag_file << result.diag_csv << std::flush;
    }

    Rng init_rng = make_stream(cfg.seed, StreamPurpose::model_init);
    fl::GlobalState state;
    state.current = nn::init_model(fed.arch, init_rng);
    state.previous = state.current;

    std::size_t logged_triggers = 0;
    for (int r = 0; r < cfg.rounds; ++r) {
        try {
            state = fl::run_round(state, fed, adversary.get(), *aggregator);
        } catch (const std::exception& e) {
            throw std::runtime_error("experiment '" + cfg.run_name + "' failed in round " + std::to_string(r + 1) +
                                     ": " + e.what());
        }
        const fl::RoundMetrics& m = state.history.back();
        std::ostringstream row;
        row << m.round << ',' << fmt(m.acc) << ',' << fmt(m.asr) << ',' << m.malicious_sampled << ','
            << join_ids(m.sampled);
        for (std::size_t c = 5; c < columns.size(); ++c) {
            auto it = m.diagnostics.find(columns[c]);
            row << ',' << (it == m.diagnostics.end() ? "" : csv_escape(it->second));
        }
        row << '\n';
        std::ostringstream diag;
        for (const auto& [k, v] : m.diagnostics) diag << m.round << ',' << k << ',' << csv_escape(v) << '\n';
        result.csv += row.str();
        result.diag_csv += diag.str();
        if (to_disk) {
            csv_file << row.str() << std::flush;
            diag_file << diag.str() << std::flush;
            if (flip_attacker != nullptr && cfg.save_triggers) {
                const auto& log = flip_attacker->trigger_log();
                for (; logged_triggers < log.size(); ++logged_triggers) {
                    const auto& rec = log[logged_triggers];
                    save_array_file(dir / "triggers" /
                                        ("round" + std::to_string(rec.round + 1) + "_client" +
                                         std::to_string(rec.client_id) + ".trigger"),
                                    data::make_trigger_file(rec.trigger, {{"round", rec.round + 1},
                                                                          {"client_id", rec.client_id}}));
                }
            }
        }
    }

    result.history = state.history;
    result.final_model = state.current;

    nlohmann::json summary;
    summary["run_name"] = cfg.run_name;
    summary["rounds"] = cfg.rounds;
    summary["final_acc"] = result.final_acc();
    summary["final_asr"] = result.final_asr();
    nlohmann::json cps = nlohmann::json::object();
    for (int c : cfg.checkpoints)
        if (c <= static_cast<int>(result.history.size()))
            cps[std::to_string(c)] = {{"acc", result.history[static_cast<std::size_t>(c - 1)].acc},
                                      {"asr", result.history[static_cast<std::size_t>(c - 1)].asr}};
    summary["checkpoints"] = cps;
    summary["config"] = to_json(cfg);
    result.summary = summary;

    if (to_disk) {
        std::ofstream js(dir / (cfg.run_name + ".summary.json"), std::ios::binary);
        js << summary.dump(2) << '\n';
        save_checkpoint(dir / (cfg.run_name + ".model"), state.current, fed.arch,
                        {{"round", state.round}, {"run_name", cfg.run_name}});
        if (adversary) {
            save_array_file(dir / (cfg.run_name + ".eval_trigger"),
                            data::make_trigger_file(adversary->evaluation_trigger(), {{"round", state.round}}));
        }
    }
    return result;
}

std::string AblationTable::to_csv() const {
    std::ostringstream os;
    os << "round";
    for (const auto& v : variants) os << ',' << v;
    os << '\n';
    for (std::size_t c = 0; c < checkpoints.size(); ++c) {
        os << checkpoints[c];
        for (Real a : asr[c]) os << ',' << fmt(a);
        os << '\n';
    }
    return os.str();
}

AblationTable ablation_suite(const ExperimentConfig& base) {
    AblationTable t;
    const std::vector<std::string> kinds{"train_only", "f3ba", "f3ba_trigopt"};
    for (int c : base.checkpoints)
        if (c <= base.rounds) t.checkpoints.push_back(c);
    if (t.checkpoints.empty() || t.checkpoints.back() != base.rounds) t.checkpoints.push_back(base.rounds);
    t.asr.assign(t.checkpoints.size(), std::vector<Real>(kinds.size(), 0.0));
    for (std::size_t v = 0; v < kinds.size(); ++v) {
        ExperimentConfig cfg = base;
        cfg.attack.kind = kinds[v];
        cfg.run_name = base.run_name + "_" + kinds[v];
        t.runs.push_back(run_experiment(cfg));
        for (std::size_t c = 0; c < t.checkpoints.size(); ++c)
            t.asr[c][v] = t.runs.back().history.at(static_cast<std::size_t>(t.checkpoints[c] - 1)).asr;
    }
    return t;
}

std::vector<SweepPoint> sweep(const ExperimentConfig& base, const std::string& dotted_key,
                              const std::vector<nlohmann::json>& values) {
    std::vector<SweepPoint> out;
    const nlohmann::json base_json = to_json(base);
    for (std::size_t i = 0; i < values.size(); ++i) {
        nlohmann::json j = base_json;
        set_path(j, dotted_key, values[i]);
        j["run_name"] = base.run_name + "_" + std::to_string(i);
        const RunResult r = run_experiment(config_from_json(j));
        out.push_back({values[i], r.final_acc(), r.final_asr()});
    }
    return out;
}

std::string sweep_to_csv(const std::string& key, const std::vector<SweepPoint>& points) {
    std::ostringstream os;
    os << csv_escape(key) << ",final_acc,final_asr\n";
    for (const auto& p : points) os << csv_escape(p.value.dump()) << ',' << fmt(p.final_acc) << ',' << fmt(p.final_asr) << '\n';
    return os.str();
}

}  // namespace exp
}  // namespace flipfl
