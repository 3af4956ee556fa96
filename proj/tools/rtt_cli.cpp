// rtt: command-line front end for pretraining, ticket drawing, transfer and sweeps.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "rtt/experiment.hpp"
#include "rtt/hashing.hpp"
#include "rtt/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_json(const std::string& path, const json& j) {
  if (path.empty() || path == "-") {
    std::cout << j.dump(2) << '\n';
    return;
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(2) << '\n';
}

std::optional<double> shift_arg(const rtt::ExperimentConfig& cfg, double shift) {
  if (!cfg.synthetic()) return std::nullopt;
  return shift;
}

rtt::Ticket load_ticket(const std::string& ckpt_path, const std::string& mask_path) {
  auto ckpt = rtt::load_checkpoint(ckpt_path);
  if (mask_path.empty()) {
    rtt::Ticket t{ckpt.network, rtt::MaskSet::ones(ckpt.network.layout()), {}};
    t.info.pretraining = ckpt.meta.pretraining_scheme;
    return t;
  }
  json meta;
  auto mask = rtt::load_masks(mask_path, &meta);
  mask.validate(ckpt.network.layout());
  rtt::TicketInfo info;
  if (meta.contains("ticket")) info = rtt::ticket_info_from_json(meta.at("ticket"));
  return rtt::Ticket{ckpt.network, std::move(mask), info};
}

}  // namespace

int main(int argc, char** argv) {
  rtt::tune_allocator();
  CLI::App app{"rtt: sparse ticket transfer experiments"};
  app.require_subcommand(1);

  std::string config_path, out, ckpt_path, mask_path, scheme = "natural", mode = "finetune";
  std::uint64_t seed = 0;
  double shift = 0.75, sparsity = 0.5;
  std::size_t plan = 0, jobs = 1;
  std::vector<std::uint64_t> seeds;
  bool resume = false, quiet = false;

  auto* make_data = app.add_subcommand("make-data", "Write the source/target datasets of one seed as manifests");
  make_data->add_option("--config", config_path, "Experiment config")->required()->check(CLI::ExistingFile);
  make_data->add_option("--seed", seed, "Run seed");
  make_data->add_option("--shift", shift, "Shift magnitude in [0, 1]");
  make_data->add_option("--out", out, "Output directory")->required();

  auto* pre = app.add_subcommand("pretrain", "Pretrain one dense checkpoint on the source task");
  pre->add_option("--config", config_path, "Experiment config")->required()->check(CLI::ExistingFile);
  pre->add_option("--scheme", scheme, "natural | adversarial | random_smoothing");
  pre->add_option("--seed", seed, "Run seed");
  pre->add_option("--out", out, "Checkpoint path")->required();

  auto* prune = app.add_subcommand("prune", "Draw a ticket from a checkpoint with one pruning plan");
  prune->add_option("--config", config_path, "Experiment config")->required()->check(CLI::ExistingFile);
  prune->add_option("--ckpt", ckpt_path, "Pretrained checkpoint")->required()->check(CLI::ExistingFile);
  prune->add_option("--plan", plan, "Index into the config's pruning list");
  prune->add_option("--sparsity", sparsity, "Target sparsity in [0, 1)");
  prune->add_option("--seed", seed, "Run seed");
  prune->add_option("--shift", shift, "Shift magnitude (downstream pruning)");
  prune->add_option("--out", out, "Mask path")->required();

  auto* transfer = app.add_subcommand("transfer", "Transfer a ticket to the target task and evaluate it");
  transfer->add_option("--config", config_path, "Experiment config")->required()->check(CLI::ExistingFile);
  transfer->add_option("--ckpt", ckpt_path, "Pretrained checkpoint")->required()->check(CLI::ExistingFile);
  transfer->add_option("--mask", mask_path, "Ticket mask (dense when omitted)")->check(CLI::ExistingFile);
  transfer->add_option("--mode", mode, "linear | finetune");
  transfer->add_option("--seed", seed, "Run seed");
  transfer->add_option("--shift", shift, "Shift magnitude");
  transfer->add_option("--out", out, "Metrics JSON (stdout when omitted)");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint (optionally masked) on the source test split");
  eval->add_option("--config", config_path, "Experiment config")->required()->check(CLI::ExistingFile);
  eval->add_option("--ckpt", ckpt_path, "Checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--mask", mask_path, "Mask")->check(CLI::ExistingFile);
  eval->add_option("--seed", seed, "Run seed");
  eval->add_option("--out", out, "Metrics JSON (stdout when omitted)");

  std::string manifest_a, manifest_b, split = "test";
  auto* fid = app.add_subcommand("fid", "Frechet distance between two datasets under a checkpoint's features");
  fid->add_option("--ckpt", ckpt_path, "Feature extractor checkpoint")->required()->check(CLI::ExistingFile);
  fid->add_option("--a", manifest_a, "First dataset manifest")->required()->check(CLI::ExistingFile);
  fid->add_option("--b", manifest_b, "Second dataset manifest")->required()->check(CLI::ExistingFile);
  fid->add_option("--split", split, "Split to use from both manifests");

  auto* run = app.add_subcommand("run", "Full pipeline over the config's cross-product");
  run->add_option("--config", config_path, "Experiment config")->required()->check(CLI::ExistingFile);
  run->add_option("--out", out, "Output directory")->required();
  run->add_option("--seeds", seeds, "Override the seed list, e.g. 0,1,2")->delimiter(',');
  run->add_flag("--resume", resume, "Reuse cached artifacts");
  run->add_option("--jobs", jobs, "Parallel workers per stage")->check(CLI::PositiveNumber);
  run->add_flag("--quiet", quiet, "No progress on stderr");

  std::string report_path;
  auto* exp = app.add_subcommand("export", "Sparsity-sweep CSV curves and the winner table from a report");
  exp->add_option("--report", report_path, "report.json")->required()->check(CLI::ExistingFile);
  exp->add_option("--out", out, "Output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*exp) {
      std::ifstream in(report_path);
      const auto report = rtt::report_from_json(json::parse(in));
      for (const auto& p : rtt::sparsity_sweep_export(report, out)) std::cout << p.string() << '\n';
      return 0;
    }
    if (*fid) {
      const auto ckpt = rtt::load_checkpoint(ckpt_path);
      const auto a = rtt::load_dataset(manifest_a, split);
      const auto b = rtt::load_dataset(manifest_b, split);
      const double d = rtt::frechet_distance(rtt::gaussian_stats(ckpt.network, a), rtt::gaussian_stats(ckpt.network, b));
      std::printf("%.17g\n", d);
      return 0;
    }

    auto cfg = rtt::load_experiment_config(config_path);
    if (*run) {
      if (!seeds.empty()) cfg.seeds = seeds;
      rtt::RunOptions opt;
      opt.out = out;
      opt.resume = resume;
      opt.jobs = jobs;
      opt.quiet = quiet;
      rtt::RunStats stats;
      const auto report = rtt::run_experiment(cfg, opt, &stats);
      std::size_t fid_failed = 0;
      for (const auto& f : report.fid) fid_failed += f.error.empty() ? 0 : 1;
      std::printf("cells %zu computed %zu cached %zu failed %zu training_steps %llu\n", stats.cells_total,
                  stats.cells_computed, stats.cells_cached, stats.cells_failed,
                  static_cast<unsigned long long>(stats.training_steps));
      return stats.cells_failed == 0 && fid_failed == 0 ? 0 : 1;
    }

    cfg.validate();
    const auto data = rtt::experiment_data(cfg, seed, shift_arg(cfg, shift));
    if (*make_data) {
      rtt::save_dataset({data.source_train, data.source_test}, fs::path(out) / "source");
      rtt::save_dataset({data.target_train, data.target_test}, fs::path(out) / "target");
      std::cout << (fs::path(out) / "source" / "manifest.json").string() << '\n'
                << (fs::path(out) / "target" / "manifest.json").string() << '\n';
      return 0;
    }
    if (*pre) {
      const auto ckpt = rtt::run_pretrain(cfg, rtt::pretrain_scheme_from_string(scheme), data.source_train, seed);
      rtt::save_checkpoint(ckpt, out);
      std::printf("source test accuracy %.4f\n", rtt::accuracy(ckpt.network, nullptr, data.source_test));
      return 0;
    }
    if (*prune) {
      if (plan >= cfg.pruning.size()) throw rtt::ConfigError("--plan " + std::to_string(plan) + " is out of range");
      auto p = cfg.pruning[plan];
      p.sparsities = {sparsity};
      const auto ckpt = rtt::load_checkpoint(ckpt_path);
      const auto tickets = rtt::draw_tickets(cfg, p, ckpt, {sparsity}, data, seed);
      rtt::save_ticket_mask(tickets.front(), out);
      std::printf("realized sparsity %.6f\n", tickets.front().mask.sparsity());
      return 0;
    }
    if (*transfer) {
      const auto ticket = load_ticket(ckpt_path, mask_path);
      const auto res = rtt::run_transfer(cfg, rtt::transfer_mode_from_string(mode), ticket, data, seed);
      write_json(out, {{"metrics", rtt::to_json(res.report)}, {"train_accuracy", res.train_accuracy}});
      return 0;
    }
    if (*eval) {
      const auto ticket = load_ticket(ckpt_path, mask_path);
      const auto opt = rtt::experiment_eval_options(cfg, &data.ood, seed);
      const auto report = rtt::evaluate(ticket.network, &ticket.mask, data.source_test, opt);
      write_json(out, rtt::to_json(report));
      return 0;
    }
  } catch (const rtt::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
