#include "rtt/adversarial.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace rtt {

void AdvConfig::validate() const {
  if (!(epsilon >= 0.0)) throw std::invalid_argument("AdvConfig: epsilon must be >= 0");
  if (steps < 1) throw std::invalid_argument("AdvConfig: steps must be >= 1");
  if (!(step_size > 0.0)) throw std::invalid_argument("AdvConfig: step_size must be > 0");
  if (!(upper > lower)) throw std::invalid_argument("AdvConfig: empty input range");
}

nlohmann::json to_json(const AdvConfig& c) {
  return {{"epsilon", c.epsilon},
          {"steps", c.steps},
          {"step_size", c.step_size},
          {"init", c.init == AdvConfig::Init::zero ? "zero" : "random"},
          {"track_best", c.track_best},
          {"lower", c.lower},
          {"upper", c.upper}};
}

AdvConfig adv_config_from_json(const nlohmann::json& j) {
  AdvConfig c;
  c.epsilon = j.value("epsilon", c.epsilon);
  c.steps = j.value("steps", c.steps);
  c.step_size = j.value("step_size", c.step_size);
  const auto init = j.value("init", std::string("zero"));
  if (init == "zero") {
    c.init = AdvConfig::Init::zero;
  } else if (init == "random") {
    c.init = AdvConfig::Init::random;
  } else {
    throw std::invalid_argument("AdvConfig: unknown init '" + init + "'");
  }
  c.track_best = j.value("track_best", c.track_best);
  c.lower = j.value("lower", c.lower);
  c.upper = j.value("upper", c.upper);
  c.validate();
  return c;
}

double Perturbation::mean_loss() const {
  if (loss.empty()) return 0.0;
  double s = 0.0;
  for (double v : loss) s += v;
  return s / static_cast<double>(loss.size());
}

double Perturbation::linf() const {
  double m = 0.0;
  for (float v : delta.values()) m = std::max(m, static_cast<double>(std::abs(v)));
  return m;
}

namespace {

// Projects onto the eps-ball, then pulls x + delta back into the valid range. Entries
// that need no clipping are left untouched so the bound holds exactly in float.
void project(Tensor<float>& delta, const Tensor<float>& x, float eps, float lo, float hi) {
  for (std::size_t i = 0; i < delta.size(); ++i) {
    float d = std::clamp(delta[i], -eps, eps);
    if (x[i] + d > hi) d = hi - x[i];
    if (x[i] + d < lo) d = lo - x[i];
    delta[i] = d;
  }
}

Tensor<float> add_delta(const Tensor<float>& x, const Tensor<float>& delta) {
  Tensor<float> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + delta[i];
  return out;
}

}  // namespace

Perturbation pgd_maximize(const LossGradFn& f, const Tensor<float>& x, const AdvConfig& cfg, std::mt19937_64& rng,
                          const Tensor<float>* init_delta, const PgdObserver& observer) {
  cfg.validate();
  if (x.rank() < 1) throw DimensionError("pgd: input must have a batch dimension");
  Perturbation p;
  p.delta = Tensor<float>(x.shape());
  if (cfg.epsilon == 0.0) return p;

  const auto eps = static_cast<float>(cfg.epsilon);
  const auto lo = static_cast<float>(cfg.lower);
  const auto hi = static_cast<float>(cfg.upper);
  const auto alpha = static_cast<float>(cfg.step_size);
  const std::size_t n = x.dim(0);
  const std::size_t per = x.size() / n;

  bool starts_at_zero = true;
  if (init_delta) {
    if (init_delta->shape() != x.shape()) throw DimensionError("pgd: initial delta shape " + shape_str(init_delta->shape()));
    p.delta = *init_delta;
    starts_at_zero = false;
  } else if (cfg.init == AdvConfig::Init::random) {
    std::uniform_real_distribution<float> u(-eps, eps);
    for (auto& v : p.delta.values()) v = u(rng);
    starts_at_zero = false;
  }
  project(p.delta, x, eps, lo, hi);

  Tensor<float> best = p.delta;
  std::vector<double> best_loss(n, -std::numeric_limits<double>::infinity());
  for (std::size_t step = 0;; ++step) {
    auto lg = f(add_delta(x, p.delta));
    if (lg.loss.size() != n || lg.grad.shape() != x.shape()) throw DimensionError("pgd: loss function returned bad shapes");
    if (step == 0 && starts_at_zero) p.clean_loss = lg.loss;
    for (std::size_t i = 0; i < n; ++i) {
      if (!cfg.track_best || lg.loss[i] > best_loss[i]) {
        best_loss[i] = lg.loss[i];
        std::copy_n(p.delta.data() + i * per, per, best.data() + i * per);
      }
    }
    if (step == cfg.steps) break;
    for (std::size_t k = 0; k < x.size(); ++k) {
      const float g = lg.grad[k];
      p.delta[k] += g > 0.0f ? alpha : (g < 0.0f ? -alpha : 0.0f);
    }
    project(p.delta, x, eps, lo, hi);
    for (float v : p.delta.values()) {
      if (std::abs(v) > eps) throw ContractError("pgd: projection left |delta| > epsilon");
    }
    if (observer) observer(step + 1, p.delta);
  }
  p.delta = std::move(best);
  p.loss = std::move(best_loss);
  return p;
}

Perturbation pgd_attack(const Network<float>& net, const MaskSet* masks, const Tensor<float>& x,
                        std::span<const std::uint32_t> labels, const AdvConfig& cfg, std::mt19937_64& rng,
                        const Tensor<float>* init_delta, const PgdObserver& observer) {
  if (x.rank() != 4 || x.dim(0) != labels.size()) throw DimensionError("pgd_attack: batch/label count mismatch");
  auto f = [&](const Tensor<float>& input) {
    Tape<float> tape;
    auto bound = bind_params(tape, net, masks, GradMode::none);
    auto xin = tape.variable(input);
    auto out = forward(net, bound, xin);
    auto loss = softmax_cross_entropy(out.logits, labels);
    tape.backward(loss);
    LossAndGrad r;
    for (float v : cross_entropy_per_sample(out.logits.value(), labels)) r.loss.push_back(v);
    r.grad = tape.grad(xin);
    return r;
  };
  return pgd_maximize(f, x, cfg, rng, init_delta, observer);
}

Tensor<float> gaussian_augment(const Tensor<float>& x, double sigma, std::mt19937_64& rng, double lower,
                               double upper) {
  if (!(sigma >= 0.0)) throw std::invalid_argument("gaussian_augment: sigma must be >= 0");
  if (sigma == 0.0) return x;
  std::normal_distribution<double> noise(0.0, sigma);
  Tensor<float> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = static_cast<float>(std::clamp(static_cast<double>(x[i]) + noise(rng), lower, upper));
  }
  return out;
}

StepResult adversarial_train_step(Network<float>& net, const MaskSet* masks, const Tensor<float>& x,
                                  std::span<const std::uint32_t> labels, const AdvConfig& cfg, Sgd& opt, double lr,
                                  std::mt19937_64& rng, std::size_t step_index) {
  cfg.validate();
  if (cfg.epsilon == 0.0) return train_step(net, masks, x, labels, opt, lr, GradMode::all, step_index);
  const auto p = pgd_attack(net, masks, x, labels, cfg, rng);
  return train_step(net, masks, add_delta(x, p.delta), labels, opt, lr, GradMode::all, step_index);
}

}  // namespace rtt
