// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.
//
// Criteria 1-5 re-run the property suites (linked into this binary) through doctest
// filters. Criteria 6-10 run the experiment harness on the synthetic shift pair.
//
// usage: rtt_acceptance <work dir> [--only 1,2,...]

#define DOCTEST_CONFIG_IMPLEMENT
#include "doctest.h"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "rtt/experiment.hpp"
#include "rtt/training.hpp"

using namespace rtt;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

// Runs the selected test cases; passes only when at least one ran and none failed.
Outcome run_suite(const std::vector<std::pair<const char*, const char*>>& filters) {
  doctest::Context ctx;
  for (const auto& [opt, value] : filters) ctx.setOption(opt, value);
  ctx.setOption("no-version", true);
  std::ostringstream out;
  ctx.setCout(&out);
  const int rc = ctx.run();
  const std::string text = out.str();
  std::smatch m;
  static const std::regex summary(R"(test cases:\s*(\d+)\s*\|\s*(\d+) passed\s*\|\s*(\d+) failed)");
  static const std::regex asserts(R"(assertions:\s*(\d+))");
  std::size_t cases = 0, passed = 0, failed = 0, checks = 0;
  if (std::regex_search(text, m, summary)) {
    cases = std::stoul(m[1]);
    passed = std::stoul(m[2]);
    failed = std::stoul(m[3]);
  }
  if (std::regex_search(text, m, asserts)) checks = std::stoul(m[1]);
  if (rc != 0 || failed > 0) std::cerr << text;
  Outcome o;
  o.pass = rc == 0 && failed == 0 && cases > 0 && passed == cases;
  o.detail = std::to_string(passed) + "/" + std::to_string(cases) + " cases, " + std::to_string(checks) + " checks";
  return o;
}

// Pilot-tuned desk-scale settings: 10-class 16x16 pair, micro network.
ExperimentConfig base_config(const fs::path& cache) {
  ExperimentConfig c;
  c.name = "acceptance";
  c.model = "micro";
  c.generator.classes = 10;
  c.generator.image = {3, 16, 16};
  c.generator.train_size = 2000;
  c.generator.test_size = 500;
  c.generator.texture_amplitude = 0.03;
  c.generator.shape_label_noise = 0.3;
  c.shift.train_size = 1000;
  c.shift.test_size = 500;
  c.ood_size = 200;

  c.pretrain_train.epochs = 12;
  c.pretrain_train.batch_size = 64;
  c.pretrain_train.base_lr = 0.05;
  c.pretrain_train.decay_epochs = {8};
  c.pretrain_train.grad_clip = 2.0;
  c.attack.epsilon = 8.0 / 255.0;
  c.attack.steps = 3;
  c.attack.step_size = 2.5 * c.attack.epsilon / 3.0;
  c.adv_warmup_epochs = 3;

  PruningPlan omp;
  omp.sparsities = {0.5, 0.7};
  c.pruning = {omp};

  c.finetune_train = c.pretrain_train;
  c.finetune_train.epochs = 10;
  c.finetune_train.decay_epochs = {7};
  c.finetune_train.base_lr = 0.01;
  c.linear_train = c.finetune_train;
  c.linear_train.base_lr = 0.05;

  c.adv_limit = 200;
  c.cache_dir = cache.string();
  return c;
}

struct Run {
  Report report;
  RunStats stats;
  double cpu = 0.0;
  std::string bytes;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Run run(const ExperimentConfig& cfg, const fs::path& out, bool resume = true) {
  RunOptions opt;
  opt.out = out;
  opt.resume = resume;
  opt.quiet = true;
  Run r;
  const double t0 = cpu_seconds();
  r.report = run_experiment(cfg, opt, &r.stats);
  r.cpu = cpu_seconds() - t0;
  r.bytes = slurp(out / "report.json");
  return r;
}

const CellResult* find_cell(const Report& r, PretrainScheme scheme, double sparsity, TransferMode mode, std::uint64_t seed,
                            double shift) {
  for (const auto& c : r.cells) {
    if (c.key.pretrain == scheme && c.key.sparsity == sparsity && c.key.mode == mode && c.key.seed == seed &&
        c.key.shift && std::abs(*c.key.shift - shift) < 1e-12 && c.status == "ok" && c.metrics) {
      return &c;
    }
  }
  return nullptr;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// Counts seeds where robust > natural for `metric` at one sparsity; missing cells count as losses.
std::size_t robust_wins(const Report& r, TransferMode mode, double sparsity, double shift,
                        const std::vector<std::uint64_t>& seeds, bool adversarial_metric, std::string* detail) {
  std::size_t wins = 0;
  for (auto seed : seeds) {
    const auto* n = find_cell(r, PretrainScheme::natural, sparsity, mode, seed, shift);
    const auto* a = find_cell(r, PretrainScheme::adversarial, sparsity, mode, seed, shift);
    if (!n || !a) {
      *detail += " seed" + std::to_string(seed) + ":missing";
      continue;
    }
    const double nv = adversarial_metric ? n->metrics->adv_accuracy.value_or(-1.0) : n->metrics->accuracy;
    const double av = adversarial_metric ? a->metrics->adv_accuracy.value_or(-1.0) : a->metrics->accuracy;
    wins += av > nv ? 1 : 0;
    *detail += fmt(" %+.3f", av - nv);
  }
  return wins;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  if (argc < 2) {
    std::cerr << "usage: rtt_acceptance <work dir> [--only 1,2,...]\n";
    return 2;
  }
  const fs::path work = argv[1];
  std::set<int> only;
  for (int i = 2; i + 1 < argc; ++i) {
    if (std::string(argv[i]) == "--only") {
      std::stringstream ss(argv[i + 1]);
      std::string tok;
      while (std::getline(ss, tok, ',')) only.insert(std::stoi(tok));
    }
  }
  auto wanted = [&](int k) { return only.empty() || only.count(k) > 0; };

  std::error_code ec;
  fs::remove_all(work, ec);
  fs::create_directories(work);
  const fs::path cache = work / "cache";

  std::map<int, std::pair<std::string, Outcome>> results;
  auto report = [&](int k, const std::string& name, Outcome o) {
    std::printf("[%s] %2d %s: %s\n", o.pass ? "PASS" : "FAIL", k, name.c_str(), o.detail.c_str());
    std::fflush(stdout);
    results[k] = {name, o};
  };

  if (wanted(1)) {
    const double t0 = cpu_seconds();
    auto o = run_suite({{"sf", "*test_autodiff.cpp"}});
    const double cpu = cpu_seconds() - t0;
    o.detail += fmt(", %.1f s CPU (limit 120)", cpu);
    o.pass = o.pass && cpu < 120.0;
    report(1, "autodiff gradient checks", o);
  }
  if (wanted(2)) {
    report(2, "PGD contract",
           run_suite({{"tc", "linear loss recovers*,delta stays inside*,zero-init best-so-far*,eps = 0*"}}));
  }
  if (wanted(3)) {
    report(3, "pruning exactness", run_suite({{"sf", "*test_pruning.cpp"}, {"tce", "straight-through*"}}));
  }
  if (wanted(4)) report(4, "straight-through estimator", run_suite({{"tc", "straight-through*"}}));
  if (wanted(5)) report(5, "metric oracles", run_suite({{"sf", "*test_metrics.cpp"}}));

  const std::vector<std::uint64_t> five{0, 1, 2, 3, 4}, three{0, 1, 2};

  // 6: FID over the shift grid with the natural source network as the feature extractor.
  if (wanted(6)) {
    Outcome o;
    try {
      auto cfg = base_config(cache);
      cfg.pretrain_schemes = {PretrainScheme::natural};
      cfg.shift_magnitudes = {0.0, 0.25, 0.5, 0.75, 1.0};
      cfg.pruning[0].sparsities = {0.0};
      cfg.modes = {TransferMode::linear};
      cfg.eval_adversarial = false;
      cfg.seeds = three;
      const auto r = run(cfg, work / "fid");
      std::vector<double> med;
      bool complete = true;
      for (double s : cfg.shift_magnitudes) {
        std::vector<double> v;
        for (const auto& f : r.report.fid) {
          if (f.shift && std::abs(*f.shift - s) < 1e-12 && f.fid) v.push_back(*f.fid);
        }
        complete = complete && v.size() == three.size();
        med.push_back(v.empty() ? 0.0 : median(v));
      }
      bool monotone = complete;
      for (std::size_t i = 1; i < med.size(); ++i) monotone = monotone && med[i] >= med[i - 1];
      o.pass = monotone && r.cpu < 300.0;
      o.detail = "median FID";
      for (double m : med) o.detail += fmt(" %.3f", m);
      o.detail += fmt(", %.0f s CPU (limit 300)", r.cpu);
    } catch (const std::exception& e) {
      o.detail = std::string("error: ") + e.what();
    }
    report(6, "FID non-decreasing in shift", o);
  }

  // 7, 8, 10: the main comparison at s = 0.75.
  std::optional<Run> main_run;
  if (wanted(7) || wanted(8) || wanted(10)) {
    try {
      auto cfg = base_config(cache);
      cfg.shift_magnitudes = {0.75};
      cfg.seeds = five;
      main_run = run(cfg, work / "main");
    } catch (const std::exception& e) {
      std::cerr << "main run failed: " << e.what() << '\n';
    }
  }
  if (wanted(7)) {
    Outcome o;
    if (main_run) {
      bool ok = true;
      for (double sp : {0.5, 0.7}) {
        std::string d;
        const auto lin = robust_wins(main_run->report, TransferMode::linear, sp, 0.75, five, false, &d);
        std::string e;
        const auto ft = robust_wins(main_run->report, TransferMode::finetune, sp, 0.75, five, false, &e);
        ok = ok && lin >= 4 && ft >= 3;
        o.detail += fmt("s=%.1f", sp) + " linear " + std::to_string(lin) + "/5 [" + d.substr(1) + "] finetune " +
                    std::to_string(ft) + "/5 [" + e.substr(1) + "]; ";
      }
      o.detail += fmt("%.0f s CPU (target 1800)", main_run->cpu);
      o.pass = ok && main_run->stats.cells_failed == 0;
    } else {
      o.detail = "main run did not complete";
    }
    report(7, "robust tickets transfer better (s=0.75)", o);
  }
  if (wanted(8)) {
    Outcome o;
    if (main_run) {
      bool ok = true;
      for (double sp : {0.5, 0.7}) {
        std::string d;
        const auto w = robust_wins(main_run->report, TransferMode::finetune, sp, 0.75, five, true, &d);
        ok = ok && w >= 4;
        if (!o.detail.empty()) o.detail += "; ";
        o.detail += fmt("s=%.1f", sp) + " " + std::to_string(w) + "/5 [" + d.substr(1) + "]";
      }
      o.pass = ok;
    } else {
      o.detail = "main run did not complete";
    }
    report(8, "finetuned adversarial accuracy ordering", o);
  }

  // 9: the robust-minus-natural linear gap at s = 1.0 vs s = 0.25.
  if (wanted(9)) {
    Outcome o;
    try {
      auto cfg = base_config(cache);
      cfg.shift_magnitudes = {0.25, 1.0};
      cfg.modes = {TransferMode::linear};
      cfg.seeds = three;
      const auto r = run(cfg, work / "shift");
      std::map<double, double> gap;
      bool complete = true;
      for (double s : {0.25, 1.0}) {
        std::vector<double> per_seed;
        for (auto seed : three) {
          double sum = 0.0;
          for (double sp : {0.5, 0.7}) {
            const auto* n = find_cell(r.report, PretrainScheme::natural, sp, TransferMode::linear, seed, s);
            const auto* a = find_cell(r.report, PretrainScheme::adversarial, sp, TransferMode::linear, seed, s);
            if (!n || !a) {
              complete = false;
              continue;
            }
            sum += a->metrics->accuracy - n->metrics->accuracy;
          }
          per_seed.push_back(sum / 2.0);
        }
        gap[s] = median(per_seed);
      }
      o.pass = complete && gap[1.0] > gap[0.25];
      o.detail = fmt("median gap s=0.25 %+.3f", gap[0.25]) + fmt(", s=1.0 %+.3f", gap[1.0]);
    } catch (const std::exception& e) {
      o.detail = std::string("error: ") + e.what();
    }
    report(9, "robust advantage grows with shift", o);
  }

  // 10: same config and seed give the same bytes; a rerun trains nothing.
  if (wanted(10)) {
    Outcome o;
    try {
      auto small = base_config(work / "det-cache-a");
      small.generator.train_size = 256;
      small.generator.test_size = 128;
      small.shift.train_size = 128;
      small.shift.test_size = 128;
      small.ood_size = 64;
      small.pretrain_train.epochs = 2;
      small.pretrain_train.decay_epochs = {1};
      small.adv_warmup_epochs = 1;
      small.finetune_train.epochs = 2;
      small.finetune_train.decay_epochs = {1};
      small.linear_train = small.finetune_train;
      small.adv_limit = 64;
      small.seeds = {7};
      const auto a = run(small, work / "det-a", false);
      small.cache_dir = (work / "det-cache-b").string();
      const auto b = run(small, work / "det-b", false);
      const bool same = a.bytes == b.bytes && !a.bytes.empty();
      o.detail = std::string("fresh reruns ") + (same ? "byte-identical" : "DIFFER");
      bool resumed = true;
      if (main_run) {
        auto cfg = base_config(cache);
        cfg.shift_magnitudes = {0.75};
        cfg.seeds = five;
        const auto again = run(cfg, work / "main");
        resumed = again.stats.training_steps == 0 && again.bytes == main_run->bytes;
        o.detail += "; main rerun " + std::to_string(again.stats.training_steps) + " training steps, report " +
                    (again.bytes == main_run->bytes ? "identical" : "DIFFERS");
      }
      const auto c = run(small, work / "det-b");
      resumed = resumed && c.stats.training_steps == 0 && c.bytes == b.bytes;
      o.detail += "; small rerun " + std::to_string(c.stats.training_steps) + " training steps";
      o.pass = same && resumed;
    } catch (const std::exception& e) {
      o.detail = std::string("error: ") + e.what();
    }
    report(10, "determinism and resume", o);
  }

  std::size_t failed = 0;
  for (const auto& [k, r] : results) failed += r.second.pass ? 0 : 1;
  std::printf("%zu/%zu criteria passed\n", results.size() - failed, results.size());
  return failed == 0 ? 0 : 1;
}
