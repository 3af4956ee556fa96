#include "rtt/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "rtt/hashing.hpp"
#include "rtt/training.hpp"

namespace rtt {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";
constexpr int kReportFormat = 1;

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return k == a; })) {
      throw ConfigError(where + ": unknown key '" + k + "'");
    }
  }
}

template <typename F>
auto config_field(const std::string& where, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

std::string hash_json(const json& j) { return sha256_hex(j.dump()); }

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> number_or_empty(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

std::string fmt_shift(double s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", s);
  return buf;
}

std::string now_iso() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Runs fn(i) for i in [0, n) on up to `jobs` threads.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < jobs; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

std::string temp_name(const fs::path& path) {
  static std::atomic<std::uint64_t> counter{0};
  return path.string() + ".tmp" + std::to_string(counter++);
}

void write_text(const fs::path& path, const std::string& text) {
  const auto tmp = temp_name(path);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out << text;
    if (!out) throw std::runtime_error("write failed for " + tmp);
  }
  fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json plan_to_json(const PruningPlan& p) {
  json j = {{"scheme", to_string(p.scheme)},
            {"granularity", to_string(p.granularity)},
            {"scope", to_string(p.scope)},
            {"locus", to_string(p.locus)},
            {"sparsities", p.sparsities}};
  if (p.scheme == PruneScheme::imp_natural || p.scheme == PruneScheme::imp_adversarial) {
    j["imp_rate"] = p.imp_rate;
    j["imp_round_epochs"] = p.imp_round_epochs;
  }
  if (p.scheme == PruneScheme::lmp) {
    j["lmp_random_init"] = p.lmp_random_init;
    j["lmp_head_lr_scale"] = p.lmp_head_lr_scale;
  }
  if (p.train) j["train"] = to_json(*p.train);
  return j;
}

PruningPlan plan_from_json(const json& j, const TrainConfig& defaults, const std::string& where) {
  check_keys(j,
             {"scheme", "granularity", "scope", "locus", "sparsities", "imp_rate", "imp_round_epochs", "lmp_random_init",
              "lmp_head_lr_scale", "train"},
             where);
  return config_field(where, [&] {
    PruningPlan p;
    p.scheme = prune_scheme_from_string(j.at("scheme").get<std::string>());
    p.granularity = granularity_from_string(j.value("granularity", std::string("element")));
    p.scope = scope_from_string(j.value("scope", std::string(p.scheme == PruneScheme::lmp ? "per_layer" : "global")));
    p.locus = locus_from_string(j.value("locus", std::string(p.scheme == PruneScheme::lmp ? "downstream" : "upstream")));
    p.sparsities = j.at("sparsities").get<std::vector<double>>();
    p.imp_rate = j.value("imp_rate", p.imp_rate);
    p.imp_round_epochs = j.value("imp_round_epochs", p.imp_round_epochs);
    p.lmp_random_init = j.value("lmp_random_init", p.lmp_random_init);
    p.lmp_head_lr_scale = j.value("lmp_head_lr_scale", p.lmp_head_lr_scale);
    if (j.contains("train")) p.train = train_config_from_json(j.at("train"), defaults);
    return p;
  });
}

bool is_imp(PruneScheme s) { return s == PruneScheme::imp_natural || s == PruneScheme::imp_adversarial; }

TrainConfig plan_train(const ExperimentConfig& cfg, const PruningPlan& plan) {
  return plan.train ? *plan.train : cfg.finetune_train;
}

void validate_train(const TrainConfig& t, const std::string& where) {
  config_field(where, [&] {
    t.validate();
    return 0;
  });
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

std::string to_string(TransferMode m) { return m == TransferMode::linear ? "linear" : "finetune"; }

TransferMode transfer_mode_from_string(const std::string& s) {
  if (s == "linear") return TransferMode::linear;
  if (s == "finetune") return TransferMode::finetune;
  throw std::invalid_argument("unknown transfer mode '" + s + "'");
}

std::string PruningPlan::label() const {
  std::string l = to_string(scheme) + "-" + to_string(granularity);
  if (scope == Scope::per_layer && scheme != PruneScheme::lmp) l += "-per_layer";
  if (is_imp(scheme) || scheme == PruneScheme::lmp) l += "-" + to_string(locus);
  return l;
}

void ExperimentConfig::validate() const {
  if (name.empty()) throw ConfigError("name must not be empty");
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw ConfigError("seeds must be distinct");
  }
  if (source_manifest.empty() != target_manifest.empty()) {
    throw ConfigError("source_manifest and target_manifest must be given together");
  }
  if (synthetic()) {
    if (shift_magnitudes.empty()) throw ConfigError("shift_magnitudes must not be empty");
    for (double s : shift_magnitudes) {
      if (!(s >= 0.0 && s <= 1.0)) throw ConfigError("shift magnitude " + fmt_shift(s) + " outside [0, 1]");
    }
    if (generator.classes < 2) throw ConfigError("generator needs at least two classes");
    if (generator.train_size == 0 || generator.test_size == 0) throw ConfigError("generator splits must be nonempty");
    config_field("model", [&] { return spec_by_id(model, generator.classes, generator.image); });
  } else {
    for (const auto& m : {source_manifest, target_manifest}) {
      if (!fs::exists(m)) throw ConfigError("dataset manifest '" + m + "' does not exist");
    }
    config_field("model", [&] { return spec_by_id(model, generator.classes, generator.image); });
  }
  if (pretrain_schemes.empty()) throw ConfigError("pretrain schemes must not be empty");
  if (std::set<PretrainScheme>(pretrain_schemes.begin(), pretrain_schemes.end()).size() != pretrain_schemes.size()) {
    throw ConfigError("pretrain schemes must be distinct");
  }
  validate_train(pretrain_train, "pretrain.train");
  validate_train(finetune_train, "transfer.finetune");
  validate_train(linear_train, "transfer.linear");
  config_field("pretrain.attack", [&] {
    attack.validate();
    if (eval_attack) eval_attack->validate();
    return 0;
  });
  if (!(smoothing_sigma >= 0.0)) throw ConfigError("pretrain.sigma must be >= 0");
  if (pruning.empty()) throw ConfigError("pruning plans must not be empty");
  for (std::size_t i = 0; i < pruning.size(); ++i) {
    const auto& p = pruning[i];
    const std::string where = "pruning[" + std::to_string(i) + "]";
    if (p.sparsities.empty()) throw ConfigError(where + ": sparsity grid must not be empty");
    for (double s : p.sparsities) {
      if (!(s >= 0.0 && s < 1.0)) throw ConfigError(where + ": sparsity " + fmt_shift(s) + " outside [0, 1)");
    }
    if (is_imp(p.scheme) && !(p.imp_rate > 0.0 && p.imp_rate < 1.0)) {
      throw ConfigError(where + ": imp_rate must lie in (0, 1)");
    }
    if (p.scheme == PruneScheme::omp && p.locus != Locus::upstream) {
      throw ConfigError(where + ": OMP is data-free and only defined upstream");
    }
    if (p.scheme == PruneScheme::lmp && (p.granularity != Granularity::element || p.scope != Scope::per_layer)) {
      throw ConfigError(where + ": LMP learns per-layer element masks");
    }
    if (p.scheme == PruneScheme::lmp && !(p.lmp_head_lr_scale > 0.0)) {
      throw ConfigError(where + ": lmp_head_lr_scale must be > 0");
    }
    if (p.train) validate_train(*p.train, where + ".train");
  }
  if (modes.empty()) throw ConfigError("transfer modes must not be empty");
  if (std::set<TransferMode>(modes.begin(), modes.end()).size() != modes.size()) {
    throw ConfigError("transfer modes must be distinct");
  }
  if (n_bins == 0) throw ConfigError("eval.n_bins must be >= 1");
}

json to_json(const ExperimentConfig& c) {
  json schemes = json::array();
  for (auto s : c.pretrain_schemes) schemes.push_back(to_string(s));
  json plans = json::array();
  for (const auto& p : c.pruning) plans.push_back(plan_to_json(p));
  json modes = json::array();
  for (auto m : c.modes) modes.push_back(to_string(m));
  json data = {{"ood_size", c.ood_size}};
  if (c.synthetic()) {
    data["generator"] = to_json(c.generator);
    data["shift"] = to_json(c.shift);
    data["shift_magnitudes"] = c.shift_magnitudes;
  } else {
    data["source_manifest"] = c.source_manifest;
    data["target_manifest"] = c.target_manifest;
    data["generator"] = to_json(c.generator);
  }
  json eval = {{"adversarial", c.eval_adversarial}, {"adv_limit", c.adv_limit}, {"n_bins", c.n_bins}, {"fid", c.compute_fid}};
  if (c.eval_attack) eval["attack"] = to_json(*c.eval_attack);
  return {{"name", c.name},
          {"model", c.model},
          {"data", std::move(data)},
          {"pretrain",
           {{"schemes", std::move(schemes)},
            {"train", to_json(c.pretrain_train)},
            {"attack", to_json(c.attack)},
            {"warmup_epochs", c.adv_warmup_epochs},
            {"sigma", c.smoothing_sigma}}},
          {"pruning", std::move(plans)},
          {"transfer", {{"modes", std::move(modes)}, {"finetune", to_json(c.finetune_train)}, {"linear", to_json(c.linear_train)}}},
          {"eval", std::move(eval)},
          {"seeds", c.seeds},
          {"cache_dir", c.cache_dir}};
}

ExperimentConfig experiment_config_from_json(const json& j) {
  check_keys(j, {"name", "model", "data", "pretrain", "pruning", "transfer", "eval", "seeds", "cache_dir"}, "config");
  ExperimentConfig c;
  c.name = j.value("name", c.name);
  c.model = j.value("model", c.model);
  if (j.contains("data")) {
    const auto& d = j.at("data");
    check_keys(d, {"generator", "shift", "shift_magnitudes", "ood_size", "source_manifest", "target_manifest"}, "data");
    config_field("data", [&] {
      if (d.contains("generator")) c.generator = generator_config_from_json(d.at("generator"));
      if (d.contains("shift")) c.shift = shift_config_from_json(d.at("shift"));
      c.shift_magnitudes = d.value("shift_magnitudes", c.shift_magnitudes);
      c.ood_size = d.value("ood_size", c.ood_size);
      c.source_manifest = d.value("source_manifest", c.source_manifest);
      c.target_manifest = d.value("target_manifest", c.target_manifest);
      return 0;
    });
  }
  if (j.contains("pretrain")) {
    const auto& p = j.at("pretrain");
    check_keys(p, {"schemes", "train", "attack", "warmup_epochs", "sigma"}, "pretrain");
    config_field("pretrain", [&] {
      if (p.contains("schemes")) {
        c.pretrain_schemes.clear();
        for (const auto& s : p.at("schemes")) c.pretrain_schemes.push_back(pretrain_scheme_from_string(s.get<std::string>()));
      }
      if (p.contains("train")) c.pretrain_train = train_config_from_json(p.at("train"));
      if (p.contains("attack")) c.attack = adv_config_from_json(p.at("attack"));
      c.adv_warmup_epochs = p.value("warmup_epochs", c.adv_warmup_epochs);
      c.smoothing_sigma = p.value("sigma", c.smoothing_sigma);
      return 0;
    });
  }
  if (j.contains("transfer")) {
    const auto& t = j.at("transfer");
    check_keys(t, {"modes", "finetune", "linear"}, "transfer");
    config_field("transfer", [&] {
      if (t.contains("modes")) {
        c.modes.clear();
        for (const auto& m : t.at("modes")) c.modes.push_back(transfer_mode_from_string(m.get<std::string>()));
      }
      if (t.contains("finetune")) c.finetune_train = train_config_from_json(t.at("finetune"));
      if (t.contains("linear")) c.linear_train = train_config_from_json(t.at("linear"));
      return 0;
    });
  }
  if (j.contains("pruning")) {
    const auto& arr = j.at("pruning");
    if (!arr.is_array()) throw ConfigError("pruning: expected a list of plans");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      c.pruning.push_back(plan_from_json(arr[i], c.finetune_train, "pruning[" + std::to_string(i) + "]"));
    }
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    check_keys(e, {"adversarial", "attack", "adv_limit", "n_bins", "fid"}, "eval");
    config_field("eval", [&] {
      c.eval_adversarial = e.value("adversarial", c.eval_adversarial);
      if (e.contains("attack")) c.eval_attack = adv_config_from_json(e.at("attack"));
      c.adv_limit = e.value("adv_limit", c.adv_limit);
      c.n_bins = e.value("n_bins", c.n_bins);
      c.compute_fid = e.value("fid", c.compute_fid);
      return 0;
    });
  }
  if (j.contains("seeds")) c.seeds = config_field("seeds", [&] { return j.at("seeds").get<std::vector<std::uint64_t>>(); });
  c.cache_dir = j.value("cache_dir", c.cache_dir);
  return c;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const std::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  auto c = experiment_config_from_json(j);
  const auto base = path.parent_path();
  auto resolve = [&](std::string& p) {
    if (!p.empty() && fs::path(p).is_relative()) p = (base / p).lexically_normal().string();
  };
  resolve(c.source_manifest);
  resolve(c.target_manifest);
  resolve(c.cache_dir);
  return c;
}

// ---------------------------------------------------------------------------
// Stages

ExperimentData experiment_data(const ExperimentConfig& cfg, std::uint64_t seed, std::optional<double> shift) {
  ExperimentData d;
  if (cfg.synthetic()) {
    if (!shift) throw ConfigError("synthetic data needs a shift magnitude");
    GeneratorConfig g = cfg.generator;
    g.seed = derive_seed(cfg.generator.seed, seed);
    ShiftConfig sh = cfg.shift;
    sh.magnitude = *shift;
    sh.seed = derive_seed(g.seed, "target");
    auto pair = make_shifted_pair(g, sh);
    d.source_train = std::move(pair.source_train);
    d.source_test = std::move(pair.source_test);
    d.target_train = std::move(pair.target_train);
    d.target_test = std::move(pair.target_test);
    d.source_key = hash_json({{"source", to_json(g)}});
    d.target_key = hash_json({{"source", to_json(g)}, {"shift", to_json(sh)}});
    if (cfg.ood_size > 0) d.ood = make_ood_set(g, cfg.ood_size, derive_seed(seed, "ood"));
  } else {
    auto src = load_dataset_splits(cfg.source_manifest);
    auto tgt = load_dataset_splits(cfg.target_manifest);
    for (const auto* m : {&src, &tgt}) {
      if (!m->count("train") || !m->count("test")) throw DatasetError("manifests need 'train' and 'test' splits");
    }
    d.source_train = std::move(src.at("train"));
    d.source_test = std::move(src.at("test"));
    d.target_train = std::move(tgt.at("train"));
    d.target_test = std::move(tgt.at("test"));
    d.source_key = sha256_file(cfg.source_manifest);
    d.target_key = sha256_file(cfg.target_manifest);
    if (cfg.ood_size > 0) {
      GeneratorConfig g = cfg.generator;
      g.classes = d.target_test.classes;
      g.image = d.target_test.image_shape();
      d.ood = make_ood_set(g, cfg.ood_size, derive_seed(seed, "ood"));
    }
  }
  return d;
}

NetworkSpec experiment_spec(const ExperimentConfig& cfg, const Dataset& source) {
  return spec_by_id(cfg.model, source.classes, source.image_shape());
}

PretrainOptions pretrain_options(const ExperimentConfig& cfg, PretrainScheme scheme) {
  PretrainOptions o;
  o.scheme = scheme;
  o.adv = cfg.attack;
  o.warmup_epochs = scheme == PretrainScheme::adversarial ? cfg.adv_warmup_epochs : 0;
  o.sigma = cfg.smoothing_sigma;
  return o;
}

TrainConfig pretrain_train_config(const ExperimentConfig& cfg, std::uint64_t seed) {
  TrainConfig t = cfg.pretrain_train;
  t.seed = derive_seed(seed, "pretrain");
  return t;
}

Checkpoint run_pretrain(const ExperimentConfig& cfg, PretrainScheme scheme, const Dataset& source, std::uint64_t seed) {
  auto ckpt = pretrain(experiment_spec(cfg, source), source, pretrain_options(cfg, scheme), pretrain_train_config(cfg, seed));
  ckpt.meta.seed = seed;
  return ckpt;
}

std::vector<double> imp_schedule(const PruningPlan& plan) {
  std::vector<double> targets;
  for (double s : plan.sparsities) {
    if (s > 0.0) targets.push_back(s);
  }
  if (targets.empty()) return {};
  const double top = *std::max_element(targets.begin(), targets.end());
  std::vector<double> schedule = targets;
  for (double keep = 1.0 - plan.imp_rate; 1.0 - keep < top - 1e-12; keep *= 1.0 - plan.imp_rate) {
    schedule.push_back(1.0 - keep);
  }
  std::sort(schedule.begin(), schedule.end());
  schedule.erase(std::unique(schedule.begin(), schedule.end(), [](double a, double b) { return std::abs(a - b) < 1e-9; }),
                 schedule.end());
  return schedule;
}

std::vector<Ticket> draw_tickets(const ExperimentConfig& cfg, const PruningPlan& plan, const Checkpoint& ckpt,
                                 const std::vector<double>& sparsities, const ExperimentData& data, std::uint64_t seed) {
  const Dataset& task = plan.locus == Locus::upstream ? data.source_train : data.target_train;
  TrainConfig train = plan_train(cfg, plan);
  train.seed = derive_seed(seed, "ticket");

  auto dense = [&](double s) {
    Ticket t{ckpt.network, MaskSet::ones(ckpt.network.layout()), {}};
    t.info.pretraining = ckpt.meta.pretraining_scheme;
    t.info.scheme = plan.scheme;
    t.info.granularity = plan.granularity;
    t.info.scope = plan.scope;
    t.info.locus = plan.locus;
    t.info.target_sparsity = s;
    t.info.sparsity = 0.0;
    return t;
  };

  std::vector<Ticket> out;
  if (is_imp(plan.scheme)) {
    const auto schedule = imp_schedule(plan);
    std::vector<Ticket> rounds;
    if (!schedule.empty()) {
      ImpConfig ic;
      ic.schedule = schedule;
      ic.round_epochs = plan.imp_round_epochs;
      ic.granularity = plan.granularity;
      ic.scope = plan.scope;
      ic.locus = plan.locus;
      const auto objective = plan.scheme == PruneScheme::imp_adversarial
                                 ? Objective::adversarial(cfg.attack, std::min(cfg.adv_warmup_epochs, plan.imp_round_epochs))
                                 : Objective::natural();
      rounds = imp(ckpt, task, objective, ic, train);
    }
    for (double s : sparsities) {
      if (s == 0.0) {
        out.push_back(dense(s));
        continue;
      }
      const auto it = std::find_if(schedule.begin(), schedule.end(), [&](double v) { return std::abs(v - s) < 1e-9; });
      auto t = rounds.at(static_cast<std::size_t>(it - schedule.begin()));
      t.info.target_sparsity = s;
      out.push_back(std::move(t));
    }
    return out;
  }
  for (double s : sparsities) {
    if (s == 0.0) {
      out.push_back(dense(s));
    } else if (plan.scheme == PruneScheme::omp) {
      out.push_back(omp(ckpt, s, plan.granularity, plan.scope));
    } else {
      LmpConfig lc;
      lc.sparsity = s;
      lc.random_init = plan.lmp_random_init;
      lc.head_lr_scale = plan.lmp_head_lr_scale;
      lc.locus = plan.locus;
      auto t = lmp(ckpt, task, lc, train);
      // the learned head belongs to the pruning task; transfer starts from theta_pre
      t.network = ckpt.network;
      out.push_back(std::move(t));
    }
  }
  return out;
}

EvalOptions experiment_eval_options(const ExperimentConfig& cfg, const Dataset* ood, std::uint64_t seed) {
  EvalOptions e;
  e.adversarial = cfg.eval_adversarial;
  e.attack = cfg.eval_attack ? *cfg.eval_attack : cfg.attack;
  e.adv_limit = cfg.adv_limit;
  e.ood = ood && ood->size() > 0 ? ood : nullptr;
  e.n_bins = cfg.n_bins;
  e.seed = derive_seed(seed, "eval");
  return e;
}

TransferResult run_transfer(const ExperimentConfig& cfg, TransferMode mode, const Ticket& ticket,
                            const ExperimentData& data, std::uint64_t seed) {
  const auto eval = experiment_eval_options(cfg, &data.ood, seed);
  TrainConfig train = mode == TransferMode::linear ? cfg.linear_train : cfg.finetune_train;
  train.seed = derive_seed(seed, "transfer");
  return mode == TransferMode::linear ? linear_eval(ticket, data.target_train, data.target_test, train, eval)
                                      : finetune_whole(ticket, data.target_train, data.target_test, train, eval);
}

// ---------------------------------------------------------------------------
// Report

namespace {

json cell_payload(const CellResult& c) {
  return {{"status", c.status},
          {"error", c.error},
          {"metrics", c.metrics ? to_json(*c.metrics) : json(nullptr)},
          {"realized_sparsity", c.realized_sparsity},
          {"train_accuracy", c.train_accuracy}};
}

void apply_payload(CellResult& c, const json& j) {
  c.status = j.at("status").get<std::string>();
  c.error = j.value("error", std::string());
  if (!j.at("metrics").is_null()) c.metrics = metrics_report_from_json(j.at("metrics"));
  c.realized_sparsity = j.at("realized_sparsity").get<double>();
  c.train_accuracy = j.at("train_accuracy").get<double>();
}

json cell_to_json(const CellResult& c) {
  json j = cell_payload(c);
  j["pretrain"] = to_string(c.key.pretrain);
  j["plan"] = c.plan_label;
  j["plan_index"] = c.key.plan;
  j["sparsity"] = c.key.sparsity;
  j["mode"] = to_string(c.key.mode);
  j["seed"] = c.key.seed;
  j["shift"] = optional_number(c.key.shift);
  j["artifact"] = c.artifact;
  return j;
}

CellResult cell_from_json(const json& j) {
  CellResult c;
  apply_payload(c, j);
  c.key.pretrain = pretrain_scheme_from_string(j.at("pretrain").get<std::string>());
  c.plan_label = j.at("plan").get<std::string>();
  c.key.plan = j.at("plan_index").get<std::size_t>();
  c.key.sparsity = j.at("sparsity").get<double>();
  c.key.mode = transfer_mode_from_string(j.at("mode").get<std::string>());
  c.key.seed = j.at("seed").get<std::uint64_t>();
  c.key.shift = number_or_empty(j, "shift");
  c.artifact = j.value("artifact", std::string());
  return c;
}

}  // namespace

json to_json(const Report& r) {
  json cells = json::array();
  for (const auto& c : r.cells) cells.push_back(cell_to_json(c));
  json fid = json::array();
  for (const auto& f : r.fid) {
    fid.push_back({{"seed", f.seed},
                   {"shift", optional_number(f.shift)},
                   {"fid", optional_number(f.fid)},
                   {"extractor", f.extractor},
                   {"error", f.error}});
  }
  return {{"format", "rtt-report"},
          {"format_version", kReportFormat},
          {"config", r.config},
          {"config_hash", r.config_hash},
          {"cells", std::move(cells)},
          {"fid", std::move(fid)},
          {"provenance", r.provenance}};
}

Report report_from_json(const json& j) {
  if (j.value("format", std::string()) != "rtt-report") throw std::invalid_argument("not an rtt report");
  Report r;
  r.config = j.at("config");
  r.config_hash = j.at("config_hash").get<std::string>();
  for (const auto& c : j.at("cells")) r.cells.push_back(cell_from_json(c));
  for (const auto& f : j.at("fid")) {
    r.fid.push_back({f.at("seed").get<std::uint64_t>(), number_or_empty(f, "shift"), number_or_empty(f, "fid"),
                     f.value("extractor", std::string()), f.value("error", std::string())});
  }
  r.provenance = j.value("provenance", json::object());
  return r;
}

std::string serialize_report(const Report& r) { return to_json(r).dump(2) + "\n"; }

// ---------------------------------------------------------------------------
// Orchestration

namespace {

struct RunLog {
  std::mutex mu;
  std::ofstream out;
  bool quiet = true;

  void event(const json& e) {
    std::lock_guard lock(mu);
    json rec = e;
    rec["time"] = now_iso();
    out << rec.dump() << '\n';
    out.flush();
    if (!quiet) std::cerr << e.dump() << '\n';
  }
};

struct PretrainJob {
  std::size_t seed_idx, scheme_idx;
  std::string key;
  fs::path path;
  std::string error;
};

struct TicketJob {
  std::size_t seed_idx, shift_idx, scheme_idx, plan_idx;
  std::vector<double> sparsities;
  std::string key;
  std::vector<std::string> keys;  // per sparsity
  std::vector<fs::path> paths;
  std::string error;
};

}  // namespace

Report run_experiment(const ExperimentConfig& cfg_in, const RunOptions& options, RunStats* stats_out) {
  ExperimentConfig cfg = cfg_in;
  cfg.validate();
  if (options.out.empty()) throw ConfigError("output directory is required");

  fs::create_directories(options.out);
  const fs::path cache = cfg.cache_dir.empty() ? options.out / "cache" : fs::path(cfg.cache_dir);
  for (const char* sub : {"pretrain", "tickets", "cells", "fid"}) fs::create_directories(cache / sub);

  json cfg_json = to_json(cfg);
  cfg_json.erase("cache_dir");
  write_text(options.out / "resolved_config.json", to_json(cfg).dump(2) + "\n");

  RunLog log;
  log.out.open(options.out / "run_log.jsonl", std::ios::app);
  log.quiet = options.quiet;

  Report report;
  report.config = cfg_json;
  report.config_hash = hash_json(cfg_json);
  report.provenance = {{"library", "rtt"},
                       {"version", kVersion},
                       {"report_format", kReportFormat},
                       {"checkpoint_format", kFormatVersion},
                       {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                     std::to_string(EIGEN_MINOR_VERSION)},
                       {"compiler", __VERSION__}};

  RunStats stats;
  const std::uint64_t steps_before = training_steps_executed();
  log.event({{"event", "run_start"}, {"config_hash", report.config_hash}, {"out", options.out.string()}});

  // Data
  std::vector<std::optional<double>> shifts;
  if (cfg.synthetic()) {
    for (double s : cfg.shift_magnitudes) shifts.emplace_back(s);
  } else {
    shifts.emplace_back(std::nullopt);
  }
  const std::size_t n_seeds = cfg.seeds.size(), n_shifts = shifts.size();
  std::vector<ExperimentData> data(n_seeds * n_shifts);
  std::vector<std::string> data_error(n_seeds * n_shifts);
  auto data_at = [&](std::size_t k, std::size_t s) -> ExperimentData& { return data[k * n_shifts + s]; };
  for (std::size_t k = 0; k < n_seeds; ++k) {
    for (std::size_t s = 0; s < n_shifts; ++s) {
      try {
        data_at(k, s) = experiment_data(cfg, cfg.seeds[k], shifts[s]);
      } catch (const ConfigError&) {
        throw;
      } catch (const std::exception& e) {
        data_error[k * n_shifts + s] = std::string("data: ") + e.what();
      }
    }
  }

  // Pretraining: one checkpoint per (seed, scheme); the source does not depend on the shift.
  std::vector<PretrainJob> pre;
  for (std::size_t k = 0; k < n_seeds; ++k) {
    for (std::size_t p = 0; p < cfg.pretrain_schemes.size(); ++p) {
      PretrainJob job{k, p, {}, {}, data_error[k * n_shifts]};
      if (job.error.empty()) {
        const auto& d = data_at(k, 0);
        job.key = hash_json({{"stage", "pretrain"},
                             {"spec", experiment_spec(cfg, d.source_train)},
                             {"source", d.source_key},
                             {"options", to_json(pretrain_options(cfg, cfg.pretrain_schemes[p]))},
                             {"train", to_json(pretrain_train_config(cfg, cfg.seeds[k]))}});
        job.path = cache / "pretrain" / (job.key + ".ckpt");
      }
      pre.push_back(std::move(job));
    }
  }
  parallel_for(pre.size(), options.jobs, [&](std::size_t i) {
    auto& job = pre[i];
    if (!job.error.empty()) return;
    const auto seed = cfg.seeds[job.seed_idx];
    const auto scheme = cfg.pretrain_schemes[job.scheme_idx];
    if (options.resume && fs::exists(job.path)) {
      log.event({{"event", "pretrain"}, {"seed", seed}, {"scheme", to_string(scheme)}, {"status", "cached"}});
      return;
    }
    const auto t0 = std::chrono::steady_clock::now();
    try {
      auto ckpt = run_pretrain(cfg, scheme, data_at(job.seed_idx, 0).source_train, seed);
      const auto tmp = temp_name(job.path);
      save_checkpoint(ckpt, tmp);
      fs::rename(tmp, job.path);
      log.event({{"event", "pretrain"},
                 {"seed", seed},
                 {"scheme", to_string(scheme)},
                 {"status", "done"},
                 {"seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()}});
    } catch (const std::exception& e) {
      job.error = std::string("pretrain: ") + e.what();
      log.event({{"event", "pretrain"}, {"seed", seed}, {"scheme", to_string(scheme)}, {"status", "error"}, {"error", job.error}});
    }
  });
  auto pre_at = [&](std::size_t k, std::size_t p) -> PretrainJob& { return pre[k * cfg.pretrain_schemes.size() + p]; };

  // Tickets: one job per (seed, shift, scheme, plan); OMP/LMP also split per sparsity.
  std::vector<TicketJob> tickets;
  for (std::size_t k = 0; k < n_seeds; ++k) {
    for (std::size_t s = 0; s < n_shifts; ++s) {
      for (std::size_t p = 0; p < cfg.pretrain_schemes.size(); ++p) {
        for (std::size_t l = 0; l < cfg.pruning.size(); ++l) {
          const auto& plan = cfg.pruning[l];
          // upstream tickets do not depend on the target; draw them once per seed
          const bool needs_target = plan.locus == Locus::downstream;
          if (!needs_target && s > 0) continue;
          std::vector<std::vector<double>> groups;
          if (is_imp(plan.scheme)) {
            groups.push_back(plan.sparsities);
          } else {
            for (double v : plan.sparsities) groups.push_back({v});
          }
          for (auto& g : groups) {
            TicketJob job{k, s, p, l, g, {}, {}, {}, {}};
            const auto& up = pre_at(k, p);
            job.error = !data_error[k * n_shifts + s].empty() ? data_error[k * n_shifts + s] : up.error;
            if (job.error.empty()) {
              const auto& d = data_at(k, s);
              TrainConfig train = plan_train(cfg, plan);
              train.seed = derive_seed(cfg.seeds[k], "ticket");
              json key = {{"stage", "ticket"}, {"checkpoint", up.key}, {"plan", plan_to_json(plan)}, {"sparsities", g}};
              key["plan"].erase("sparsities");
              if (plan.scheme != PruneScheme::omp) {
                key["task"] = needs_target ? d.target_key : d.source_key;
                key["train"] = to_json(train);
                if (plan.scheme == PruneScheme::imp_adversarial) {
                  key["attack"] = to_json(cfg.attack);
                  key["warmup_epochs"] = std::min(cfg.adv_warmup_epochs, plan.imp_round_epochs);
                }
                if (is_imp(plan.scheme)) key["schedule"] = imp_schedule(plan);
              }
              job.key = hash_json(key);
              for (double v : g) {
                if (v == 0.0) {
                  job.keys.push_back(hash_json({{"stage", "ticket"}, {"checkpoint", up.key}, {"dense", true}}));
                } else {
                  job.keys.push_back(g.size() == 1 ? job.key : hash_json({{"job", job.key}, {"sparsity", v}}));
                }
                job.paths.push_back(cache / "tickets" / (job.keys.back() + ".mask"));
              }
            }
            tickets.push_back(std::move(job));
          }
        }
      }
    }
  }
  parallel_for(tickets.size(), options.jobs, [&](std::size_t i) {
    auto& job = tickets[i];
    if (!job.error.empty()) return;
    const auto& plan = cfg.pruning[job.plan_idx];
    const auto seed = cfg.seeds[job.seed_idx];
    json ev = {{"event", "ticket"},
               {"seed", seed},
               {"scheme", to_string(cfg.pretrain_schemes[job.scheme_idx])},
               {"plan", plan.label()},
               {"sparsities", job.sparsities}};
    if (options.resume && std::all_of(job.paths.begin(), job.paths.end(), [](const fs::path& p) { return fs::exists(p); })) {
      ev["status"] = "cached";
      log.event(ev);
      return;
    }
    const auto t0 = std::chrono::steady_clock::now();
    try {
      const auto ckpt = load_checkpoint(pre_at(job.seed_idx, job.scheme_idx).path);
      const auto drawn = draw_tickets(cfg, plan, ckpt, job.sparsities, data_at(job.seed_idx, job.shift_idx), seed);
      for (std::size_t t = 0; t < drawn.size(); ++t) {
        const auto tmp = temp_name(job.paths[t]);
        save_ticket_mask(drawn[t], tmp);
        fs::rename(tmp, job.paths[t]);
      }
      ev["status"] = "done";
      ev["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    } catch (const std::exception& e) {
      job.error = std::string("prune: ") + e.what();
      ev["status"] = "error";
      ev["error"] = job.error;
    }
    log.event(ev);
  });

  // Cells
  struct CellJob {
    CellResult result;
    std::size_t seed_idx, shift_idx, scheme_idx;
    const TicketJob* ticket;
    std::size_t ticket_slot;
    fs::path path;
    bool cached = false;
  };
  std::vector<CellJob> cells;
  for (std::size_t k = 0; k < n_seeds; ++k) {
    for (std::size_t s = 0; s < n_shifts; ++s) {
      for (std::size_t p = 0; p < cfg.pretrain_schemes.size(); ++p) {
        for (std::size_t l = 0; l < cfg.pruning.size(); ++l) {
          const auto& plan = cfg.pruning[l];
          for (double v : plan.sparsities) {
            const TicketJob* tj = nullptr;
            std::size_t slot = 0;
            const std::size_t ticket_shift = plan.locus == Locus::downstream ? s : 0;
            for (const auto& t : tickets) {
              if (t.seed_idx != k || t.shift_idx != ticket_shift || t.scheme_idx != p || t.plan_idx != l) continue;
              const auto it = std::find(t.sparsities.begin(), t.sparsities.end(), v);
              if (it != t.sparsities.end()) {
                tj = &t;
                slot = static_cast<std::size_t>(it - t.sparsities.begin());
                break;
              }
            }
            for (auto mode : cfg.modes) {
              CellJob job{{}, k, s, p, tj, slot, {}, false};
              auto& r = job.result;
              r.key = {cfg.pretrain_schemes[p], l, v, mode, cfg.seeds[k], shifts[s]};
              r.plan_label = plan.label();
              const std::string upstream_error = !data_error[k * n_shifts + s].empty() ? data_error[k * n_shifts + s] : tj->error;
              if (!upstream_error.empty()) {
                r.status = "error";
                r.error = upstream_error;
              } else {
                TrainConfig train = mode == TransferMode::linear ? cfg.linear_train : cfg.finetune_train;
                train.seed = derive_seed(cfg.seeds[k], "transfer");
                const auto eval = experiment_eval_options(cfg, nullptr, cfg.seeds[k]);
                json key = {{"stage", "transfer"},
                            {"ticket", tj->keys[slot]},
                            {"target", data_at(k, s).target_key},
                            {"mode", to_string(mode)},
                            {"train", to_json(train)},
                            {"eval",
                             {{"adversarial", eval.adversarial},
                              {"attack", to_json(eval.attack)},
                              {"adv_limit", eval.adv_limit},
                              {"ood_size", cfg.ood_size},
                              {"n_bins", eval.n_bins},
                              {"seed", eval.seed}}}};
                r.artifact = hash_json(key);
                job.path = cache / "cells" / (r.artifact + ".json");
              }
              cells.push_back(std::move(job));
            }
          }
        }
      }
    }
  }
  stats.cells_total = cells.size();
  std::mutex stats_mu;
  parallel_for(cells.size(), options.jobs, [&](std::size_t i) {
    auto& job = cells[i];
    auto& r = job.result;
    if (r.status == "error") return;
    json ev = {{"event", "cell"},
               {"seed", r.key.seed},
               {"shift", optional_number(r.key.shift)},
               {"pretrain", to_string(r.key.pretrain)},
               {"plan", r.plan_label},
               {"sparsity", r.key.sparsity},
               {"mode", to_string(r.key.mode)},
               {"artifact", r.artifact}};
    if (options.resume && fs::exists(job.path)) {
      try {
        apply_payload(r, json::parse(read_text(job.path)));
        job.cached = true;
        ev["status"] = "cached";
        log.event(ev);
        return;
      } catch (const std::exception&) {
        // unreadable cache entry: recompute
      }
    }
    const auto t0 = std::chrono::steady_clock::now();
    try {
      const auto ckpt = load_checkpoint(pre_at(job.seed_idx, job.scheme_idx).path);
      nlohmann::json meta;
      auto mask = load_masks(job.ticket->paths[job.ticket_slot], &meta);
      Ticket ticket{ckpt.network, std::move(mask), ticket_info_from_json(meta.at("ticket"))};
      auto res = run_transfer(cfg, r.key.mode, ticket, data_at(job.seed_idx, job.shift_idx), r.key.seed);
      r.metrics = res.report;
      r.realized_sparsity = ticket.mask.sparsity();
      r.train_accuracy = res.train_accuracy;
      write_text(job.path, cell_payload(r).dump(2) + "\n");
      ev["status"] = "done";
      ev["accuracy"] = res.report.accuracy;
      ev["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    } catch (const std::exception& e) {
      r.status = "error";
      r.error = std::string("transfer: ") + e.what();
      ev["status"] = "error";
      ev["error"] = r.error;
    }
    log.event(ev);
  });
  for (auto& job : cells) {
    if (job.result.status == "error") {
      ++stats.cells_failed;
    } else if (job.cached) {
      ++stats.cells_cached;
    } else {
      ++stats.cells_computed;
    }
    report.cells.push_back(std::move(job.result));
  }

  // FID of every (seed, shift) pair, with the natural checkpoint as the feature extractor
  // (the first configured scheme when natural pretraining is not part of the run).
  if (cfg.compute_fid) {
    std::size_t ex = 0;
    for (std::size_t p = 0; p < cfg.pretrain_schemes.size(); ++p) {
      if (cfg.pretrain_schemes[p] == PretrainScheme::natural) {
        ex = p;
        break;
      }
    }
    report.fid.resize(n_seeds * n_shifts);
    parallel_for(report.fid.size(), options.jobs, [&](std::size_t i) {
      const std::size_t k = i / n_shifts, s = i % n_shifts;
      auto& f = report.fid[i];
      f.seed = cfg.seeds[k];
      f.shift = shifts[s];
      f.extractor = to_string(cfg.pretrain_schemes[ex]);
      const auto& up = pre_at(k, ex);
      f.error = !data_error[i].empty() ? data_error[i] : up.error;
      if (!f.error.empty()) return;
      const auto& d = data_at(k, s);
      const auto key = hash_json({{"stage", "fid"}, {"checkpoint", up.key}, {"source", d.source_key}, {"target", d.target_key}});
      const auto path = cache / "fid" / (key + ".json");
      if (options.resume && fs::exists(path)) {
        try {
          f.fid = json::parse(read_text(path)).at("fid").get<double>();
          return;
        } catch (const std::exception&) {
        }
      }
      try {
        const auto ckpt = load_checkpoint(up.path);
        f.fid = frechet_distance(gaussian_stats(ckpt.network, d.source_test), gaussian_stats(ckpt.network, d.target_test));
        write_text(path, json{{"fid", *f.fid}}.dump() + "\n");
      } catch (const std::exception& e) {
        f.error = std::string("fid: ") + e.what();
      }
    });
  }

  write_text(options.out / "report.json", serialize_report(report));
  stats.training_steps = training_steps_executed() - steps_before;
  log.event({{"event", "run_end"},
             {"cells", stats.cells_total},
             {"computed", stats.cells_computed},
             {"cached", stats.cells_cached},
             {"failed", stats.cells_failed},
             {"training_steps", stats.training_steps}});
  if (stats_out) *stats_out = stats;
  return report;
}

// ---------------------------------------------------------------------------
// Export

std::vector<fs::path> sparsity_sweep_export(const Report& report, const fs::path& dir) {
  std::vector<const CellResult*> ok;
  for (const auto& c : report.cells) {
    if (c.status == "ok" && c.metrics) ok.push_back(&c);
  }
  if (ok.empty()) throw ExportError("report has no completed cells to export");
  fs::create_directories(dir);

  std::set<std::optional<double>> shift_set;
  for (const auto* c : ok) shift_set.insert(c->key.shift);
  const bool suffix = shift_set.size() > 1;

  using Getter = std::function<std::optional<double>(const MetricsReport&)>;
  const std::vector<std::pair<std::string, Getter>> metrics = {
      {"accuracy", [](const MetricsReport& m) { return std::optional<double>(m.accuracy); }},
      {"adv_accuracy", [](const MetricsReport& m) { return m.adv_accuracy; }},
      {"ece", [](const MetricsReport& m) { return std::optional<double>(m.ece); }},
      {"nll", [](const MetricsReport& m) { return std::optional<double>(m.nll); }},
      {"roc_auc", [](const MetricsReport& m) { return m.roc_auc; }},
  };

  // shortest representation that reads back to the same double
  auto num = [](double v) {
    char buf[40];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
  };
  struct Agg {
    double sum = 0.0, lo = 0.0, hi = 0.0;
    std::size_t n = 0;
    void add(double v) {
      lo = n ? std::min(lo, v) : v;
      hi = n ? std::max(hi, v) : v;
      sum += v;
      ++n;
    }
    double mean() const { return sum / static_cast<double>(n); }
  };

  std::vector<fs::path> written;
  std::set<TransferMode> modes;
  for (const auto* c : ok) modes.insert(c->key.mode);
  for (auto mode : modes) {
    for (const auto& shift : shift_set) {
      for (const auto& [metric, get] : metrics) {
        // series -> sparsity -> aggregate over seeds
        std::map<std::string, std::map<double, Agg>> series;
        std::set<double> grid;
        for (const auto* c : ok) {
          if (c->key.mode != mode || c->key.shift != shift) continue;
          const auto v = get(*c->metrics);
          if (!v) continue;
          series[to_string(c->key.pretrain) + "/" + c->plan_label][c->key.sparsity].add(*v);
          grid.insert(c->key.sparsity);
        }
        if (series.empty()) continue;
        std::string name = "curve_" + to_string(mode) + "_" + metric;
        if (suffix && shift) name += "_s" + fmt_shift(*shift);
        const auto path = dir / (name + ".csv");
        std::ostringstream out;
        out << "sparsity";
        for (const auto& [label, _] : series) out << ',' << label << "_mean," << label << "_min," << label << "_max";
        out << '\n';
        for (double s : grid) {
          out << num(s);
          for (const auto& [label, by_sp] : series) {
            const auto it = by_sp.find(s);
            if (it == by_sp.end()) {
              out << ",,,";
            } else {
              out << ',' << num(it->second.mean()) << ',' << num(it->second.lo) << ',' << num(it->second.hi);
            }
          }
          out << '\n';
        }
        write_text(path, out.str());
        written.push_back(path);
      }
    }
  }

  // Winner per (mode, shift, plan, sparsity, robust scheme) by mean accuracy over seeds.
  std::map<std::tuple<TransferMode, std::optional<double>, std::string, double, PretrainScheme>, Agg> acc;
  for (const auto* c : ok) acc[{c->key.mode, c->key.shift, c->plan_label, c->key.sparsity, c->key.pretrain}].add(c->metrics->accuracy);
  std::ostringstream w;
  w << "mode,shift,plan,sparsity,robust_scheme,robust_mean,natural_mean,winner\n";
  for (const auto& [k, nat] : acc) {
    const auto& [mode, shift, plan, sp, scheme] = k;
    if (scheme != PretrainScheme::natural) continue;
    for (auto robust : {PretrainScheme::adversarial, PretrainScheme::random_smoothing}) {
      const auto it = acc.find({mode, shift, plan, sp, robust});
      if (it == acc.end()) continue;
      const double r = it->second.mean(), n = nat.mean();
      const char* winner = std::abs(r - n) <= 1e-12 ? "Match" : (r > n ? "Robust" : "Natural");
      w << to_string(mode) << ',' << (shift ? num(*shift) : std::string()) << ',' << plan << ',' << num(sp) << ','
        << to_string(robust) << ',' << num(r) << ',' << num(n) << ',' << winner << '\n';
    }
  }
  write_text(dir / "winners.csv", w.str());
  written.push_back(dir / "winners.csv");
  return written;
}

}  // namespace rtt
