#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "rtt/adversarial.hpp"
#include "rtt/data.hpp"

namespace rtt {

class MetricsError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Argmax per row; ties go to the lowest class index.
template <typename T>
std::vector<std::uint32_t> argmax_rows(const Tensor<T>& logits);

/// Logits of the masked network over a dataset, in batches.
Tensor<float> predict_logits(const Network<float>& net, const MaskSet* masks, const Tensor<float>& images,
                             std::size_t batch = 256);

double accuracy(const Network<float>& net, const MaskSet* masks, const Dataset& ds, std::size_t batch = 256);

/// Accuracy on x + delta with delta from pgd_attack, batch by batch. `limit` > 0 uses
/// only the first `limit` samples.
double adversarial_accuracy(const Network<float>& net, const MaskSet* masks, const Dataset& ds,
                            const AdvConfig& cfg, std::mt19937_64& rng, std::size_t batch = 128,
                            std::size_t limit = 0);

struct Calibration {
  double ece = 0.0;
  double nll = 0.0;
  /// Per-bin sample count, accuracy and mean confidence.
  std::vector<std::size_t> bin_count;
  std::vector<double> bin_accuracy;
  std::vector<double> bin_confidence;
};

/// probs[N x C], rows summing to 1 within 1e-6. Equal-width bins on the max probability;
/// the prediction is the argmax (lowest index on ties).
Calibration calibration(const Tensor<double>& probs, std::span<const std::uint32_t> labels, std::size_t n_bins = 15);

/// Mann-Whitney AUC with in-distribution as the positive class; ties count one half.
double roc_auc(std::span<const double> id_scores, std::span<const double> ood_scores);

/// Max softmax probability per row.
std::vector<double> max_softmax(const Tensor<float>& logits);

struct FIDStats {
  Eigen::VectorXd mu;
  Eigen::MatrixXd sigma;
  std::size_t n = 0;
  std::string feature_layer;
  /// True when n is smaller than the feature dimension.
  bool undersampled = false;
};

/// Sample mean and unbiased covariance of rows of features[N x D].
FIDStats gaussian_stats(const Tensor<double>& features, std::string feature_layer = "penultimate");
FIDStats gaussian_stats(const Network<float>& extractor, const Dataset& ds, std::size_t batch = 256);

/// |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2).
double frechet_distance(const FIDStats& a, const FIDStats& b, double psd_tolerance = 1e-8);

struct MetricsReport {
  std::size_t n_samples = 0;
  double accuracy = 0.0;
  std::optional<double> adv_accuracy;
  double ece = 0.0;
  double nll = 0.0;
  std::optional<double> roc_auc;
  std::optional<AdvConfig> attack;
  std::string ood_set;
  std::size_t adv_samples = 0;
};

nlohmann::json to_json(const MetricsReport& r);
MetricsReport metrics_report_from_json(const nlohmann::json& j);

struct EvalOptions {
  bool adversarial = true;
  AdvConfig attack;
  std::size_t adv_limit = 0;  // 0 = whole test set
  const Dataset* ood = nullptr;
  std::size_t n_bins = 15;
  std::size_t batch = 256;
  std::uint64_t seed = 0;
};

/// Every transfer metric for one model on one test set.
MetricsReport evaluate(const Network<float>& net, const MaskSet* masks, const Dataset& test, const EvalOptions& opt);

}  // namespace rtt
