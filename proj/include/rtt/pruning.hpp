#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "rtt/checkpoint.hpp"
#include "rtt/fit.hpp"

namespace rtt {

enum class Granularity { element, row, kernel, channel };
enum class PruneScheme { omp, imp_natural, imp_adversarial, lmp };
enum class Locus { upstream, downstream };
enum class Scope { global, per_layer };

std::string to_string(Granularity g);
std::string to_string(PruneScheme s);
std::string to_string(Locus l);
std::string to_string(Scope s);
Granularity granularity_from_string(const std::string& s);
PruneScheme prune_scheme_from_string(const std::string& s);
Locus locus_from_string(const std::string& s);
Scope scope_from_string(const std::string& s);

/// Granularity not defined for a layer (kernel and channel groups need a conv weight).
class GroupingError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class PruningConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Partition of one weight tensor into groups.
///   element: every weight
///   row:     a kernel row (f, c, i, :) of a conv, an output row (o, :) of a linear layer
///   kernel:  a k x k kernel (f, c, :, :)
///   channel: an output filter (f, :, :, :)
struct GroupScores {
  std::vector<double> scores;        // mean |w| per group
  std::vector<std::size_t> group_of; // group index of every element
  std::vector<std::size_t> sizes;    // elements per group
};

GroupScores group_scores(const Tensor<float>& weights, ParamKind kind, Granularity g);

struct TicketInfo {
  PretrainScheme pretraining = PretrainScheme::natural;
  PruneScheme scheme = PruneScheme::omp;
  Granularity granularity = Granularity::element;
  Scope scope = Scope::global;
  Locus locus = Locus::upstream;
  double target_sparsity = 0.0;
  double sparsity = 0.0;  // realized
  std::size_t round = 0;  // IMP round, 0 otherwise
  nlohmann::json provenance = nlohmann::json::object();
};

nlohmann::json to_json(const TicketInfo& t);
TicketInfo ticket_info_from_json(const nlohmann::json& j);

/// (theta_pre, m). The network keeps the pretrained weights unmasked.
struct Ticket {
  Network<float> network;
  MaskSet mask;
  TicketInfo info;
};

/// Writes the mask file with the ticket metadata embedded in its header.
void save_ticket_mask(const Ticket& t, const std::filesystem::path& path);

/// One-shot magnitude pruning mask: removes the lowest-scoring groups until the zeroed
/// fraction reaches the target. Ties go to the earlier layer, then the lower group index.
MaskSet omp_mask(const Network<float>& net, double sparsity, Granularity g, Scope scope = Scope::global);

Ticket omp(const Checkpoint& ckpt, double sparsity, Granularity g, Scope scope = Scope::global);

struct ImpConfig {
  std::vector<double> schedule;  // increasing cumulative sparsities
  std::size_t round_epochs = 10;
  Granularity granularity = Granularity::element;
  Scope scope = Scope::global;
  Locus locus = Locus::upstream;

  /// Cumulative sparsities 1 - (1 - rate)^k for k = 1..rounds.
  static std::vector<double> geometric_schedule(double rate, std::size_t rounds);
};

/// Iterative pruning. Each round rewinds to theta_pre under the current mask, trains
/// `round_epochs` epochs on `task` (clean or minimax objective, masked weights frozen),
/// then prunes the trained weights to the round's cumulative sparsity. Previously pruned
/// groups stay pruned. One ticket per round.
std::vector<Ticket> imp(const Checkpoint& ckpt, const Dataset& task, const Objective& objective, const ImpConfig& cfg,
                        const TrainConfig& train_cfg);

/// Per-layer score tensors and keep counts for learned masks.
struct MaskScores {
  std::vector<std::string> names;
  std::vector<Tensor<float>> scores;
  std::vector<std::size_t> keep;
};

/// Per-layer top-k binarization of the scores (ties to the lower index).
MaskSet topk_binarize(const MaskScores& s);

struct LmpConfig {
  double sparsity = 0.5;   // uniform per-layer target
  bool random_init = false; // scores ~ U(0, 1) instead of |theta_pre|
  double head_lr_scale = 1.0;
  Locus locus = Locus::downstream;
};

/// Keep counts size - ceil(sparsity * size) for every prunable layer.
std::vector<std::size_t> uniform_keep_plan(const NetworkLayout& layout, double sparsity);

/// Called after every optimizer step with the current binarized mask.
using LmpObserver = std::function<void(std::size_t step, const MaskSet& mask)>;

/// Learns a mask over frozen theta_pre on the downstream task. The classifier head is
/// replaced and trained jointly with the scores; the backbone is never modified.
Ticket lmp(const Checkpoint& ckpt, const Dataset& task, const LmpConfig& cfg, const TrainConfig& train_cfg,
           const LmpObserver& observer = {});

}  // namespace rtt
