#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "rtt/transfer.hpp"

namespace rtt {

/// Invalid or unresolvable experiment configuration. Raised before any work starts.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class TransferMode { linear, finetune };
std::string to_string(TransferMode m);
TransferMode transfer_mode_from_string(const std::string& s);

struct PruningPlan {
  PruneScheme scheme = PruneScheme::omp;
  Granularity granularity = Granularity::element;
  Scope scope = Scope::global;
  Locus locus = Locus::upstream;  // IMP only; LMP is always downstream
  std::vector<double> sparsities;
  double imp_rate = 0.2;
  std::size_t imp_round_epochs = 2;
  bool lmp_random_init = false;
  double lmp_head_lr_scale = 1.0;
  std::optional<TrainConfig> train;  // IMP / LMP schedule; defaults to the transfer schedule

  /// "omp-element", "imp_adversarial-element-upstream", "lmp-element", ...
  std::string label() const;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::string model = "micro";

  // Data: the synthetic pair, or manifests with "train"/"test" splits.
  GeneratorConfig generator;
  ShiftConfig shift;
  std::vector<double> shift_magnitudes{0.75};
  std::size_t ood_size = 500;
  std::string source_manifest;
  std::string target_manifest;

  std::vector<PretrainScheme> pretrain_schemes{PretrainScheme::natural, PretrainScheme::adversarial};
  TrainConfig pretrain_train;
  AdvConfig attack;
  std::size_t adv_warmup_epochs = 3;
  double smoothing_sigma = 0.25;

  std::vector<PruningPlan> pruning;
  std::vector<TransferMode> modes{TransferMode::linear, TransferMode::finetune};
  TrainConfig finetune_train;
  TrainConfig linear_train;

  bool eval_adversarial = true;
  std::optional<AdvConfig> eval_attack;  // defaults to `attack`
  std::size_t adv_limit = 0;
  std::size_t n_bins = 15;
  bool compute_fid = true;

  std::vector<std::uint64_t> seeds{0};
  std::string cache_dir;  // empty: <out>/cache

  /// Throws ConfigError on any invalid or unresolvable field.
  void validate() const;
  bool synthetic() const { return source_manifest.empty(); }
};

nlohmann::json to_json(const ExperimentConfig& c);
/// Unknown keys are rejected so that typos fail loudly.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// One (pretrain scheme, pruning plan, sparsity, mode, seed, shift) combination.
struct CellKey {
  PretrainScheme pretrain = PretrainScheme::natural;
  std::size_t plan = 0;
  double sparsity = 0.0;
  TransferMode mode = TransferMode::linear;
  std::uint64_t seed = 0;
  std::optional<double> shift;  // empty when the target comes from a manifest
};

struct CellResult {
  CellKey key;
  std::string plan_label;
  std::string status = "ok";  // "ok" or "error"
  std::string error;
  std::optional<MetricsReport> metrics;
  double realized_sparsity = 0.0;
  double train_accuracy = 0.0;
  std::string artifact;  // cell hash
};

struct FidRecord {
  std::uint64_t seed = 0;
  std::optional<double> shift;
  std::optional<double> fid;
  std::string extractor;  // pretraining scheme of the feature network
  std::string error;
};

struct Report {
  nlohmann::json config;
  std::string config_hash;
  std::vector<CellResult> cells;
  std::vector<FidRecord> fid;
  nlohmann::json provenance;
};

nlohmann::json to_json(const Report& r);
Report report_from_json(const nlohmann::json& j);

struct RunStats {
  std::size_t cells_total = 0;
  std::size_t cells_computed = 0;
  std::size_t cells_cached = 0;
  std::size_t cells_failed = 0;
  std::uint64_t training_steps = 0;
};

struct RunOptions {
  std::filesystem::path out;
  bool resume = true;  // reuse cached artifacts
  std::size_t jobs = 1;
  bool quiet = false;
};

class ExportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Stage helpers shared by run_experiment and the single-stage CLI commands

struct ExperimentData {
  Dataset source_train, source_test, target_train, target_test;
  Dataset ood;  // empty when ood_size is 0
  std::string source_key, target_key;  // content keys used for caching
};

/// Data for one seed (and shift magnitude in synthetic mode).
ExperimentData experiment_data(const ExperimentConfig& cfg, std::uint64_t seed, std::optional<double> shift);

NetworkSpec experiment_spec(const ExperimentConfig& cfg, const Dataset& source);
PretrainOptions pretrain_options(const ExperimentConfig& cfg, PretrainScheme scheme);
TrainConfig pretrain_train_config(const ExperimentConfig& cfg, std::uint64_t seed);
Checkpoint run_pretrain(const ExperimentConfig& cfg, PretrainScheme scheme, const Dataset& source, std::uint64_t seed);

/// IMP rounds used to reach every sparsity of the plan: the geometric schedule below the
/// largest target merged with the targets themselves.
std::vector<double> imp_schedule(const PruningPlan& plan);

/// One ticket per requested sparsity, in order. Sparsity 0 yields the dense ticket.
std::vector<Ticket> draw_tickets(const ExperimentConfig& cfg, const PruningPlan& plan, const Checkpoint& ckpt,
                                 const std::vector<double>& sparsities, const ExperimentData& data,
                                 std::uint64_t seed);

EvalOptions experiment_eval_options(const ExperimentConfig& cfg, const Dataset* ood, std::uint64_t seed);
TransferResult run_transfer(const ExperimentConfig& cfg, TransferMode mode, const Ticket& ticket,
                            const ExperimentData& data, std::uint64_t seed);

/// pretrain -> prune -> transfer -> evaluate over the full cross-product. Writes
/// report.json, resolved_config.json and run_log.jsonl under options.out.
Report run_experiment(const ExperimentConfig& cfg, const RunOptions& options, RunStats* stats = nullptr);

/// Canonical serialization used for the report file (sorted keys, fixed formatting).
std::string serialize_report(const Report& r);

/// Writes curve_<mode>_<metric>[_s<shift>].csv and winners.csv. Returns the file paths.
std::vector<std::filesystem::path> sparsity_sweep_export(const Report& report, const std::filesystem::path& dir);

}  // namespace rtt
