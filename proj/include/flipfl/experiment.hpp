#pragma once

// Experiment runner: JSON config, federation construction, the round loop
// with incremental CSV output, and the ablation / sweep suites.

#include "flipfl/attack.hpp"
#include "flipfl/federation.hpp"
#include "flipfl/refine.hpp"
#include "flipfl/robust.hpp"

#include <json.hpp>

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace flipfl::exp {

struct DatasetConfig {
    int num_classes = 4;
    int train_per_class = 250;
    int test_per_class = 100;
    /// Unlabeled server-side samples per class (distillation defenses).
    int server_per_class = 25;
    Index channels = 1;
    Index height = 10;
    Index width = 10;
    Real noise_sd = 0.5;
};

struct ModelConfig {
    int conv_filters = 4;
    int kernel = 3;
    int hidden = 32;
};

struct TriggerConfig {
    int size = 3;
    int target = 0;
    Real fill = 1.0;
    int margin = 0;
};

struct AttackSettings {
    /// none | f3ba | f3ba_trigopt | baseline_rescale | train_only
    std::string kind = "none";
    attack::AttackConfig params;
    TriggerConfig trigger;
};

struct DefenseSettings {
    /// fedavg | feddf | fedrad | fedmv | bulyan | robust_lr | deepsight | crfl
    std::string kind = "fedavg";
    robust::BulyanConfig bulyan;
    robust::RobustLRConfig robust_lr;
    robust::DeepSightConfig deepsight;
    refine::DistillConfig feddf;
    refine::DistillConfig fedrad;
    refine::FedMVConfig fedmv;
    refine::CRFLConfig crfl;
};

struct ExperimentConfig {
    std::uint64_t seed = 1;
    DatasetConfig dataset;
    ModelConfig model;
    int num_clients = 20;
    int num_malicious = 4;
    int clients_per_round = 10;
    Real h = 1.0;
    int rounds = 50;
    Real local_lr = 0.05;
    int local_steps = 10;
    int batch_size = 16;
    bool guarantee_attacker = false;
    /// participating | total
    std::string fedavg_divisor = "participating";
    AttackSettings attack;
    DefenseSettings defense;
    /// Rounds reported in the summary and ablation tables.
    std::vector<int> checkpoints{10, 25, 50};
    /// Empty: keep everything in memory.
    std::string output_dir;
    std::string run_name = "run";
    bool save_triggers = true;

    void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& cfg);
/// Starts from the defaults and overrides every key present. Unknown keys
/// are rejected so typos do not silently fall back to defaults.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

/// `dotted.key=value`; the value is parsed as JSON when possible, otherwise
/// taken as a string.
void apply_override(nlohmann::json& j, const std::string& assignment);
void set_path(nlohmann::json& j, const std::string& dotted_key, nlohmann::json value);

nn::Architecture build_architecture(const ExperimentConfig& cfg);
data::Trigger build_trigger(const ExperimentConfig& cfg);
/// Dataset, Dirichlet partition (malicious ids are 0 .. num_malicious-1),
/// test and server splits.
fl::Federation build_federation(const ExperimentConfig& cfg);

std::unique_ptr<fl::Aggregator> make_aggregator(const DefenseSettings& d);
/// Null for kind "none".
std::unique_ptr<fl::Adversary> make_adversary(const AttackSettings& a, const data::Trigger& trigger);

struct RunResult {
    std::vector<fl::RoundMetrics> history;
    nn::ModelParams final_model;
    nn::Architecture arch;
    /// Byte-exact CSV content (also written to disk when output_dir is set).
    std::string csv;
    std::string diag_csv;
    nlohmann::json summary;

    Real final_acc() const { return history.empty() ? 0.0 : history.back().acc; }
    Real final_asr() const { return history.empty() ? 0.0 : history.back().asr; }
    /// Mean of a numeric per-round diagnostic over rounds that report it.
    Real mean_diagnostic(const std::string& key) const;
};

/// Columns of the main CSV; a function of the defense only.
std::vector<std::string> csv_columns(const fl::Aggregator& aggregator);

RunResult run_experiment(const ExperimentConfig& cfg);

struct AblationTable {
    std::vector<std::string> variants{"train", "train+flip", "train+flip+trigopt"};
    std::vector<int> checkpoints;
    /// asr[c][v]: ASR of variant v at checkpoint c.
    std::vector<std::vector<Real>> asr;
    std::vector<RunResult> runs;

    std::string to_csv() const;
};

/// The three attack variants with every other setting (and seed) shared.
AblationTable ablation_suite(const ExperimentConfig& base);

struct SweepPoint {
    nlohmann::json value;
    Real final_acc = 0.0;
    Real final_asr = 0.0;
};

/// One run per value of `dotted_key`.
std::vector<SweepPoint> sweep(const ExperimentConfig& base, const std::string& dotted_key,
                              const std::vector<nlohmann::json>& values);
std::string sweep_to_csv(const std::string& key, const std::vector<SweepPoint>& points);

}  // namespace flipfl::exp
