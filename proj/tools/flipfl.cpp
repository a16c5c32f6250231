// Command-line front end: run one experiment, the ablation suite, or a sweep.

#include "flipfl/errors.hpp"
#include "flipfl/experiment.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

using namespace flipfl;

namespace {

struct Common {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_dir;
};

void add_common(CLI::App* app, Common& c) {
    app->add_option("-c,--config", c.config_path, "JSON experiment config (defaults when omitted)");
    app->add_option("-s,--set", c.overrides, "Override a config key, e.g. --set defense.kind=bulyan")
        ->take_all()
        ->allow_extra_args(false);
    app->add_option("-o,--out", c.out_dir, "Output directory (overrides output_dir)");
}

exp::ExperimentConfig resolve(const Common& c) {
    nlohmann::json j = c.config_path.empty() ? exp::to_json(exp::ExperimentConfig{})
                                             : exp::to_json(exp::load_config(c.config_path));
    for (const auto& o : c.overrides) exp::apply_override(j, o);
    if (!c.out_dir.empty()) j["output_dir"] = c.out_dir;
    return exp::config_from_json(j);
}

void write_file(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ConfigError("cannot write " + path.string());
    os << text;
}

std::vector<nlohmann::json> parse_values(const std::string& list) {
    std::vector<nlohmann::json> out;
    std::size_t start = 0;
    while (start <= list.size()) {
        const auto comma = list.find(',', start);
        const std::string item = list.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
        if (item.empty()) throw ConfigError("empty entry in --values");
        nlohmann::json v = nlohmann::json::parse(item, nullptr, false);
        out.push_back(v.is_discarded() ? nlohmann::json(item) : v);
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated backdoor simulator"};
    app.require_subcommand(1);

    Common run_opts, ablate_opts, sweep_opts, print_opts;
    auto* run = app.add_subcommand("run", "Run one experiment");
    add_common(run, run_opts);
    auto* ablate = app.add_subcommand("ablate", "Train / train+flip / train+flip+trigopt with shared seeds");
    add_common(ablate, ablate_opts);
    auto* sw = app.add_subcommand("sweep", "One run per value of a config key");
    add_common(sw, sweep_opts);
    std::string sweep_key, sweep_values;
    sw->add_option("-k,--key", sweep_key, "Dotted config key, e.g. defense.crfl.sigma_train")->required();
    sw->add_option("-v,--values", sweep_values, "Comma-separated JSON values")->required();
    auto* print = app.add_subcommand("print-config", "Print the resolved config as JSON");
    add_common(print, print_opts);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run) {
            const auto cfg = resolve(run_opts);
            const auto r = exp::run_experiment(cfg);
            if (cfg.output_dir.empty()) std::cout << r.csv;
            std::cout << r.summary.dump(2) << '\n';
        } else if (*ablate) {
            const auto cfg = resolve(ablate_opts);
            const auto table = exp::ablation_suite(cfg);
            const std::string csv = table.to_csv();
            if (!cfg.output_dir.empty()) write_file(std::filesystem::path(cfg.output_dir) / "ablation.csv", csv);
            std::cout << csv;
        } else if (*sw) {
            const auto cfg = resolve(sweep_opts);
            const auto points = exp::sweep(cfg, sweep_key, parse_values(sweep_values));
            const std::string csv = exp::sweep_to_csv(sweep_key, points);
            if (!cfg.output_dir.empty()) write_file(std::filesystem::path(cfg.output_dir) / "sweep.csv", csv);
            std::cout << csv;
        } else if (*print) {
            std::cout << exp::to_json(resolve(print_opts)).dump(2) << '\n';
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
