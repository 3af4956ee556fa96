#include "rtt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rtt/hashing.hpp"

namespace rtt {

template <typename T>
std::vector<std::uint32_t> argmax_rows(const Tensor<T>& logits) {
  if (logits.rank() != 2) throw DimensionError("argmax_rows expects [N x C], got " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<std::uint32_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = logits.data() + i * c;
    out[i] = static_cast<std::uint32_t>(std::max_element(row, row + c) - row);
  }
  return out;
}

template std::vector<std::uint32_t> argmax_rows(const Tensor<float>&);
template std::vector<std::uint32_t> argmax_rows(const Tensor<double>&);

namespace {

std::vector<std::size_t> range_indices(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return idx;
}

void require_nonempty(const Dataset& ds, const char* what) {
  if (ds.size() == 0) throw MetricsError(std::string(what) + ": empty dataset");
}

}  // namespace

Tensor<float> predict_logits(const Network<float>& net, const MaskSet* masks, const Tensor<float>& images,
                             std::size_t batch) {
  if (images.rank() != 4) throw DimensionError("predict_logits expects [N,C,H,W]");
  const std::size_t n = images.dim(0);
  const std::size_t per = images.size() / n;
  const std::size_t c = net.classes();
  Tensor<float> out(Shape{n, c});
  for (std::size_t b = 0; b < n; b += batch) {
    const std::size_t e = std::min(n, b + batch);
    Tensor<float> x(Shape{e - b, images.dim(1), images.dim(2), images.dim(3)});
    std::copy_n(images.data() + b * per, (e - b) * per, x.data());
    const auto logits = forward_masked(net, masks, x);
    std::copy_n(logits.data(), logits.size(), out.data() + b * c);
  }
  return out;
}

double accuracy(const Network<float>& net, const MaskSet* masks, const Dataset& ds, std::size_t batch) {
  require_nonempty(ds, "accuracy");
  const auto pred = argmax_rows(predict_logits(net, masks, ds.images, batch));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == ds.labels[i];
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

double adversarial_accuracy(const Network<float>& net, const MaskSet* masks, const Dataset& ds,
                            const AdvConfig& cfg, std::mt19937_64& rng, std::size_t batch, std::size_t limit) {
  require_nonempty(ds, "adversarial_accuracy");
  const std::size_t n = limit ? std::min(limit, ds.size()) : ds.size();
  std::size_t correct = 0;
  for (std::size_t b = 0; b < n; b += batch) {
    const auto idx = range_indices(b, std::min(n, b + batch));
    auto x = ds.gather_images(idx);
    const auto y = ds.gather_labels(idx);
    const auto p = pgd_attack(net, masks, x, y, cfg, rng);
    const auto clean = argmax_rows(forward_masked(net, masks, x));
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += p.delta[i];
    const auto pred = argmax_rows(forward_masked(net, masks, x));
    // delta = 0 is one of the attack's candidates, so a clean mistake counts as a success.
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == y[i] && clean[i] == y[i];
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

Calibration calibration(const Tensor<double>& probs, std::span<const std::uint32_t> labels, std::size_t n_bins) {
  if (probs.rank() != 2 || probs.dim(0) != labels.size()) throw MetricsError("calibration: probs/labels shape mismatch");
  if (labels.empty()) throw MetricsError("calibration: no samples");
  if (n_bins == 0) throw MetricsError("calibration: need at least one bin");
  const std::size_t n = probs.dim(0), c = probs.dim(1);
  Calibration out;
  out.bin_count.assign(n_bins, 0);
  out.bin_accuracy.assign(n_bins, 0.0);
  out.bin_confidence.assign(n_bins, 0.0);
  double nll = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = probs.data() + i * c;
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      if (!(row[j] >= 0.0 && row[j] <= 1.0)) throw MetricsError("calibration: row " + std::to_string(i) + " has an entry outside [0,1]");
      total += row[j];
    }
    if (std::abs(total - 1.0) > 1e-6) throw MetricsError("calibration: row " + std::to_string(i) + " sums to " + std::to_string(total));
    if (labels[i] >= c) throw MetricsError("calibration: label out of range");
    const auto pred = static_cast<std::size_t>(std::max_element(row, row + c) - row);
    const double conf = row[pred];
    const std::size_t bin = std::min(n_bins - 1, static_cast<std::size_t>(conf * static_cast<double>(n_bins)));
    out.bin_count[bin] += 1;
    out.bin_accuracy[bin] += pred == labels[i] ? 1.0 : 0.0;
    out.bin_confidence[bin] += conf;
    nll -= std::log(std::max(row[labels[i]], 1e-12));
  }
  for (std::size_t b = 0; b < n_bins; ++b) {
    if (out.bin_count[b] == 0) continue;
    const double cnt = static_cast<double>(out.bin_count[b]);
    out.bin_accuracy[b] /= cnt;
    out.bin_confidence[b] /= cnt;
    out.ece += cnt / static_cast<double>(n) * std::abs(out.bin_accuracy[b] - out.bin_confidence[b]);
  }
  out.nll = nll / static_cast<double>(n);
  return out;
}

double roc_auc(std::span<const double> id_scores, std::span<const double> ood_scores) {
  if (id_scores.empty() || ood_scores.empty()) throw MetricsError("roc_auc: both score sets must be nonempty");
  struct Item {
    double score;
    bool positive;
  };
  std::vector<Item> all;
  all.reserve(id_scores.size() + ood_scores.size());
  for (double s : id_scores) all.push_back({s, true});
  for (double s : ood_scores) all.push_back({s, false});
  std::sort(all.begin(), all.end(), [](const Item& a, const Item& b) { return a.score < b.score; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].score == all[i].score) ++j;
    const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k) {
      if (all[k].positive) rank_sum += mid_rank;
    }
    i = j;
  }
  const double n1 = static_cast<double>(id_scores.size());
  const double n2 = static_cast<double>(ood_scores.size());
  return (rank_sum - n1 * (n1 + 1.0) / 2.0) / (n1 * n2);
}

std::vector<double> max_softmax(const Tensor<float>& logits) {
  const auto p = softmax_rows(logits);
  const std::size_t n = p.dim(0), c = p.dim(1);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = *std::max_element(p.data() + i * c, p.data() + (i + 1) * c);
  return out;
}

FIDStats gaussian_stats(const Tensor<double>& features, std::string feature_layer) {
  if (features.rank() != 2) throw MetricsError("gaussian_stats expects [N x D] features");
  const std::size_t n = features.dim(0), d = features.dim(1);
  if (n < 2) throw MetricsError("gaussian_stats: need at least 2 samples, got " + std::to_string(n));
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> x(features.data(),
                                                                                              static_cast<Eigen::Index>(n),
                                                                                              static_cast<Eigen::Index>(d));
  // Shifted by the first row so constant columns give an exact mean and zero covariance.
  const Eigen::RowVectorXd origin = x.row(0);
  const Eigen::MatrixXd shifted = x.rowwise() - origin;
  const Eigen::RowVectorXd mean_shift = shifted.colwise().sum() / static_cast<double>(n);
  const Eigen::MatrixXd centered = shifted.rowwise() - mean_shift;
  FIDStats s;
  s.mu = (origin + mean_shift).transpose();
  s.sigma = (centered.transpose() * centered) / static_cast<double>(n - 1);
  s.sigma = 0.5 * (s.sigma + s.sigma.transpose());
  s.n = n;
  s.feature_layer = std::move(feature_layer);
  s.undersampled = n < d;
  return s;
}

FIDStats gaussian_stats(const Network<float>& extractor, const Dataset& ds, std::size_t batch) {
  require_nonempty(ds, "gaussian_stats");
  const std::size_t n = ds.size();
  const std::size_t dim = extractor.layout().feature_dim;
  Tensor<double> feats(Shape{n, dim});
  for (std::size_t b = 0; b < n; b += batch) {
    const auto idx = range_indices(b, std::min(n, b + batch));
    const auto f = extract_features(extractor, nullptr, ds.gather_images(idx));
    for (std::size_t i = 0; i < f.size(); ++i) feats[b * dim + i] = f[i];
  }
  return gaussian_stats(feats, "penultimate");
}

namespace {

Eigen::VectorXd checked_eigenvalues(const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>& es, double tol,
                                    const char* what) {
  if (es.info() != Eigen::Success) throw MetricsError(std::string("frechet_distance: eigendecomposition failed for ") + what);
  Eigen::VectorXd ev = es.eigenvalues();
  const double scale = std::max(1.0, ev.maxCoeff());
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev[i] < -tol * scale) {
      throw MetricsError(std::string("frechet_distance: ") + what + " is not positive semidefinite (eigenvalue " +
                         std::to_string(ev[i]) + ")");
    }
    ev[i] = std::max(ev[i], 0.0);
  }
  return ev;
}

}  // namespace

double frechet_distance(const FIDStats& a, const FIDStats& b, double psd_tolerance) {
  if (a.mu.size() != b.mu.size() || a.sigma.rows() != b.sigma.rows() || a.sigma.rows() != a.mu.size() ||
      b.sigma.cols() != b.mu.size()) {
    throw MetricsError("frechet_distance: dimension mismatch (" + std::to_string(a.mu.size()) + " vs " +
                       std::to_string(b.mu.size()) + ")");
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(a.sigma);
  const Eigen::VectorXd la = checked_eigenvalues(ea, psd_tolerance, "sigma_a");
  checked_eigenvalues(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(b.sigma, Eigen::EigenvaluesOnly), psd_tolerance,
                      "sigma_b");
  const Eigen::MatrixXd sqrt_a = ea.eigenvectors() * la.cwiseSqrt().asDiagonal() * ea.eigenvectors().transpose();
  Eigen::MatrixXd m = sqrt_a * b.sigma * sqrt_a;
  m = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> em(m, Eigen::EigenvaluesOnly);
  const Eigen::VectorXd lm = checked_eigenvalues(em, psd_tolerance, "the covariance product");
  const double tr_sqrt = lm.cwiseSqrt().sum();
  const double fid = (a.mu - b.mu).squaredNorm() + a.sigma.trace() + b.sigma.trace() - 2.0 * tr_sqrt;
  return std::max(0.0, fid);
}

nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j = {{"n_samples", r.n_samples}, {"accuracy", r.accuracy}, {"ece", r.ece}, {"nll", r.nll}};
  j["adv_accuracy"] = r.adv_accuracy ? nlohmann::json(*r.adv_accuracy) : nlohmann::json("skipped");
  j["roc_auc"] = r.roc_auc ? nlohmann::json(*r.roc_auc) : nlohmann::json("skipped");
  j["attack"] = r.attack ? to_json(*r.attack) : nlohmann::json(nullptr);
  j["adv_samples"] = r.adv_samples;
  j["ood_set"] = r.ood_set;
  return j;
}

MetricsReport metrics_report_from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.n_samples = j.at("n_samples").get<std::size_t>();
  r.accuracy = j.at("accuracy").get<double>();
  r.ece = j.at("ece").get<double>();
  r.nll = j.at("nll").get<double>();
  if (j.at("adv_accuracy").is_number()) r.adv_accuracy = j.at("adv_accuracy").get<double>();
  if (j.at("roc_auc").is_number()) r.roc_auc = j.at("roc_auc").get<double>();
  if (j.contains("attack") && !j.at("attack").is_null()) r.attack = adv_config_from_json(j.at("attack"));
  r.adv_samples = j.value("adv_samples", std::size_t{0});
  r.ood_set = j.value("ood_set", std::string());
  return r;
}

MetricsReport evaluate(const Network<float>& net, const MaskSet* masks, const Dataset& test, const EvalOptions& opt) {
  require_nonempty(test, "evaluate");
  MetricsReport r;
  r.n_samples = test.size();
  const auto logits = predict_logits(net, masks, test.images, opt.batch);
  const auto pred = argmax_rows(logits);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == test.labels[i];
  r.accuracy = static_cast<double>(correct) / static_cast<double>(pred.size());
  const auto cal = calibration(softmax_rows(logits), test.labels, opt.n_bins);
  r.ece = cal.ece;
  r.nll = cal.nll;
  if (opt.adversarial) {
    std::mt19937_64 rng(derive_seed(opt.seed, "eval-attack"));
    r.adv_accuracy = adversarial_accuracy(net, masks, test, opt.attack, rng, 128, opt.adv_limit);
    r.attack = opt.attack;
    r.adv_samples = opt.adv_limit ? std::min(opt.adv_limit, test.size()) : test.size();
  }
  if (opt.ood) {
    const auto id = max_softmax(logits);
    const auto ood = max_softmax(predict_logits(net, masks, opt.ood->images, opt.batch));
    r.roc_auc = roc_auc(id, ood);
    r.ood_set = opt.ood->name;
  }
  return r;
}

}  // namespace rtt
