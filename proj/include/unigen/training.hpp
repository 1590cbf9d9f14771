// Flow-matching objective, condition-balanced batching, AdamW and the guided
// Euler sampler.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <thread>
#include <vector>

#include "unigen/datagen.hpp"
#include "unigen/weavenet.hpp"

namespace unigen {

// ---------------------------------------------------------------------------
// Noise path

inline void check_sigma(double sigma) {
  if (!(sigma >= 0.0 && sigma <= 1.0)) throw std::invalid_argument("mix_noise: sigma " + std::to_string(sigma) + " outside [0,1]");
}

/// sigma * N + (1 - sigma) * x, elementwise.
inline Tensor mix_noise(const Tensor& x, const Tensor& N, double sigma) {
  check_sigma(sigma);
  require_same_shape("mix_noise", x, N);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = sigma * N[i] + (1.0 - sigma) * x[i];
  return out;
}

inline Image mix_noise(const Image& x, const Image& N, double sigma) {
  check_sigma(sigma);
  if (!x.same_shape(N)) throw ShapeError("mix_noise: " + x.shape_str() + " vs " + N.shape_str());
  Image out = x;
  for (std::size_t i = 0; i < x.size(); ++i) out.pixels[i] = sigma * N.pixels[i] + (1.0 - sigma) * x.pixels[i];
  return out;
}

/// Standard-normal image drawn in storage order.
inline Image noise_image(int height, int width, Rng& rng) {
  Image n(height, width);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (double& v : n.pixels) v = dist(rng);
  return n;
}

inline double sample_sigma(SigmaSampling mode, Rng& rng) {
  if (mode == SigmaSampling::logit_normal) {
    const double z = std::normal_distribution<double>(0.0, 1.0)(rng);
    return 1.0 / (1.0 + std::exp(-z));
  }
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

// ---------------------------------------------------------------------------
// Objective

/// One training pair as the model sees it: the condition may already be
/// zeroed and the prompt replaced by the null prompt.
struct FlowExample {
  const Image& target;
  const Image& condition;
  int type_id = 0;
  std::span<const int> prompt;
};

inline const std::vector<int>& null_prompt() {
  static const std::vector<int> p{vocab::null_token};
  return p;
}

/// MSE between the predicted velocity and v* = N - x, in per-patch pixel layout.
inline Var fm_loss_graph(const Ctx& ctx, const Model& model, const FlowExample& ex, const Image& noise, double sigma) {
  const Image mixed = mix_noise(ex.target, noise, sigma);
  Image v_star = noise;
  for (std::size_t i = 0; i < v_star.size(); ++i) v_star.pixels[i] -= ex.target.pixels[i];
  const ModelInput in{mixed, ex.condition, ex.type_id, ex.prompt, sigma};
  return mse(model.forward(ctx, in), flatten_patches(v_star, model.config().patch));
}

struct LossResult {
  double loss = 0.0;
  GradientRecord grads;
};

inline LossResult fm_loss(const Model& model, const FlowExample& ex, const Image& noise, double sigma, bool with_grad = true) {
  Graph g(with_grad);
  Ctx ctx{g, model.params()};
  Var l = fm_loss_graph(ctx, model, ex, noise, sigma);
  LossResult r;
  r.loss = l.value()[0];
  if (!std::isfinite(r.loss)) throw NonFiniteError("fm_loss: non-finite loss at sigma " + std::to_string(sigma));
  if (with_grad) {
    g.backward(l);
    r.grads = g.param_grads();
  }
  return r;
}

/// Draws the noise from `rng` and evaluates the loss.
inline LossResult fm_loss(const Model& model, const FlowExample& ex, double sigma, Rng& rng, bool with_grad = true) {
  const Image noise = noise_image(ex.target.height, ex.target.width, rng);
  return fm_loss(model, ex, noise, sigma, with_grad);
}

// ---------------------------------------------------------------------------
// Batching

/// Batches whose members have pairwise-distinct condition types. Each epoch
/// visits every sample once: per-type queues are shuffled, then each batch
/// takes the head of the `batch` types with the most samples left (ties
/// broken at random). Batch size 1 degenerates to a plain shuffle.
class BalancedSampler {
 public:
  BalancedSampler(std::vector<int> type_of, std::size_t batch, std::uint64_t seed)
      : type_of_(std::move(type_of)), batch_(batch), seed_(seed) {
    if (type_of_.empty()) throw std::invalid_argument("balanced_batches: empty dataset");
    if (batch_ < 1) throw std::invalid_argument("balanced_batches: batch size must be >= 1");
    const int max_type = *std::max_element(type_of_.begin(), type_of_.end());
    if (*std::min_element(type_of_.begin(), type_of_.end()) < 0) throw std::invalid_argument("balanced_batches: negative type id");
    queues_.resize(std::size_t(max_type) + 1);
    std::size_t present = 0;
    {
      std::vector<bool> seen(queues_.size(), false);
      for (int t : type_of_)
        if (!seen[std::size_t(t)]) seen[std::size_t(t)] = true, ++present;
    }
    if (batch_ > present)
      throw std::invalid_argument("balanced_batches: batch size " + std::to_string(batch_) + " exceeds the number of condition types (" +
                                  std::to_string(present) + "); a batch cannot repeat a type");
  }

  static BalancedSampler for_dataset(const Dataset& ds, std::size_t batch, std::uint64_t seed) {
    std::vector<int> types;
    for (const auto& s : ds.samples) types.push_back(s.type_id);
    return BalancedSampler(std::move(types), batch, seed);
  }

  /// Sample indices of the next batch.
  std::vector<std::size_t> next() {
    if (remaining_ == 0) refill();
    std::vector<std::size_t> out;
    if (batch_ == 1) {
      out.push_back(flat_[flat_.size() - remaining_]);
      --remaining_;
      return out;
    }
    std::vector<std::pair<std::size_t, std::uint64_t>> order;  // (type, tie key)
    for (std::size_t t = 0; t < queues_.size(); ++t)
      if (head_[t] < queues_[t].size()) order.push_back({t, rng_()});
    std::sort(order.begin(), order.end(), [&](const auto& a, const auto& b) {
      const std::size_t ra = queues_[a.first].size() - head_[a.first], rb = queues_[b.first].size() - head_[b.first];
      return ra != rb ? ra > rb : a.second < b.second;
    });
    const std::size_t n = std::min(batch_, order.size());
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t t = order[i].first;
      out.push_back(queues_[t][head_[t]++]);
    }
    remaining_ -= n;
    return out;
  }

  /// Epochs started so far.
  std::size_t epoch() const noexcept { return epoch_; }
  std::size_t batch_size() const noexcept { return batch_; }

 private:
  void refill() {
    rng_.seed(derive_seed(seed_, {epoch_}));
    ++epoch_;
    remaining_ = type_of_.size();
    if (batch_ == 1) {
      flat_.resize(type_of_.size());
      std::iota(flat_.begin(), flat_.end(), std::size_t{0});
      std::shuffle(flat_.begin(), flat_.end(), rng_);
      return;
    }
    for (auto& q : queues_) q.clear();
    for (std::size_t i = 0; i < type_of_.size(); ++i) queues_[std::size_t(type_of_[i])].push_back(i);
    for (auto& q : queues_) std::shuffle(q.begin(), q.end(), rng_);
    head_.assign(queues_.size(), 0);
  }

  std::vector<int> type_of_;
  std::size_t batch_;
  std::uint64_t seed_;
  Rng rng_;
  std::size_t epoch_ = 0;
  std::size_t remaining_ = 0;
  std::vector<std::vector<std::size_t>> queues_;
  std::vector<std::size_t> head_;
  std::vector<std::size_t> flat_;
};

// ---------------------------------------------------------------------------
// Optimizer

/// Linear warmup to `base`, then constant.
inline double warmup_lr(double base, int warmup, int step) {
  if (warmup <= 0) return base;
  return base * std::min(1.0, double(step) / double(warmup));
}

/// Adam moments with decoupled weight decay. Parameters without a gradient
/// this step are treated as having a zero gradient.
class AdamW {
 public:
  struct Settings {
    double lr = 1e-3;
    int warmup = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double weight_decay = 0.01;
  };

  explicit AdamW(Settings s) : s_(s) {}
  explicit AdamW(const RunConfig& c) : s_{c.lr, c.warmup, c.beta1, c.beta2, c.adam_eps, c.weight_decay} {}

  double lr_at(int step) const { return warmup_lr(s_.lr, s_.warmup, step); }

  /// `step` counts from 1.
  void step(ParamStore& ps, const GradientRecord& grads, int step) {
    if (step < 1) throw std::invalid_argument("optimize_step: step must be >= 1");
    if (m_.size() != ps.count()) {
      m_.clear();
      v_.clear();
      for (ParamId id : ps.ids()) {
        m_.emplace_back(ps.value(id).shape());
        v_.emplace_back(ps.value(id).shape());
      }
    }
    const double lr = lr_at(step);
    const double c1 = 1.0 - std::pow(s_.beta1, step), c2 = 1.0 - std::pow(s_.beta2, step);
    for (ParamId id : ps.ids()) {
      Tensor& p = ps.value(id);
      Tensor& m = m_[id.index];
      Tensor& v = v_[id.index];
      const Tensor* g = grads.find(id);
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g ? (*g)[i] : 0.0;
        m[i] = s_.beta1 * m[i] + (1.0 - s_.beta1) * gi;
        v[i] = s_.beta2 * v[i] + (1.0 - s_.beta2) * gi * gi;
        p[i] -= lr * ((m[i] / c1) / (std::sqrt(v[i] / c2) + s_.eps) + s_.weight_decay * p[i]);
      }
    }
  }

 private:
  Settings s_;
  std::vector<Tensor> m_, v_;
};

// ---------------------------------------------------------------------------
// Training loop

struct LossRow {
  int step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct ValRow {
  int step = 0;
  double loss = 0.0;
};

struct TrainLog {
  std::vector<LossRow> loss;
  std::vector<ValRow> val;

  /// Validation loss recorded at `step`, if any.
  std::optional<double> val_at(int step) const {
    for (const auto& r : val)
      if (r.step == step) return r.loss;
    return std::nullopt;
  }
};

struct TrainOptions {
  const Dataset* validation = nullptr;  // generated from the config seed when null
  std::function<void(const LossRow&)> on_step;
  std::function<void(const ValRow&)> on_val;
};

/// Condition fed to the model; all-zero for condition-free control runs.
inline const Image& model_condition(const RunConfig& cfg, const Image& condition, Image& scratch) {
  if (!cfg.zero_condition) return condition;
  scratch = Image(condition.height, condition.width, condition.channels);
  return scratch;
}

/// Held-out corpus drawn from the scene generator with a seed disjoint from
/// the training corpus streams.
inline Dataset validation_corpus(const RunConfig& cfg, int n_types, int n_samples) {
  Dataset ds{cfg.image_height, cfg.image_width, n_types, {}};
  const std::uint64_t seed = derive_seed(cfg.seed, {0x76616c});
  for (int i = 0; i < n_samples; ++i) ds.samples.push_back(make_sample(seed, std::size_t(i), n_types, cfg.image_height, cfg.image_width));
  return ds;
}

/// Mean loss over the set with fixed noise levels sigma_k = (k + 0.5) / K and
/// fixed noise, so successive evaluations are comparable.
inline double validation_loss(const Model& model, const Dataset& val, std::uint64_t seed) {
  if (val.samples.empty()) return 0.0;
  const RunConfig& cfg = model.config();
  const std::size_t K = val.samples.size();
  double total = 0.0;
  Image scratch;
  for (std::size_t k = 0; k < K; ++k) {
    const auto& s = val.samples[k];
    Rng rng(derive_seed(seed, {k}));
    const Image noise = noise_image(s.target.height, s.target.width, rng);
    const FlowExample ex{s.target, model_condition(cfg, s.condition, scratch), s.type_id, s.prompt_ids};
    total += fm_loss(model, ex, noise, (double(k) + 0.5) / double(K), false).loss;
  }
  return total / double(K);
}

/// Runs cfg.steps optimizer steps. Each sample of a step draws sigma, prompt
/// dropout and noise from its own stream derived from (seed, step, slot), and
/// per-sample gradients are reduced in slot order, so the run does not
/// depend on the thread count.
inline TrainLog train(Model& model, const Dataset& data, const TrainOptions& opt = {}) {
  const RunConfig& cfg = model.config();
  if (data.samples.empty()) throw std::invalid_argument("train: empty dataset");
  if (data.height != cfg.image_height || data.width != cfg.image_width)
    throw ShapeError("train: dataset images are " + std::to_string(data.height) + "x" + std::to_string(data.width) + ", model expects " +
                     std::to_string(cfg.image_height) + "x" + std::to_string(cfg.image_width));
  if (data.n_types > cfg.n_types)
    throw std::invalid_argument("train: dataset has " + std::to_string(data.n_types) + " condition types, model has " + std::to_string(cfg.n_types));

  Dataset generated_val;
  const Dataset* val = opt.validation;
  if (!val && cfg.val_samples > 0) {
    generated_val = validation_corpus(cfg, data.n_types, cfg.val_samples);
    val = &generated_val;
  }
  const std::uint64_t val_seed = derive_seed(cfg.seed, {0x76616c, 1});

  BalancedSampler sampler = BalancedSampler::for_dataset(data, std::size_t(std::min(cfg.batch, data.n_types)), derive_seed(cfg.seed, {0}));
  AdamW adam(cfg);
  TrainLog log;

  auto run_val = [&](int step) {
    if (!val) return;
    ValRow r{step, validation_loss(model, *val, val_seed)};
    log.val.push_back(r);
    if (opt.on_val) opt.on_val(r);
  };

  for (int step = 1; step <= cfg.steps; ++step) {
    const std::vector<std::size_t> batch = sampler.next();
    std::vector<LossResult> results(batch.size());
    auto work = [&](std::size_t slot) {
      const auto& s = data.samples[batch[slot]];
      Rng rng(derive_seed(cfg.seed, {1, std::uint64_t(step), slot}));
      const double sigma = sample_sigma(cfg.sigma_sampling, rng);
      const bool drop = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < cfg.prompt_dropout;
      Image scratch;
      const FlowExample ex{s.target, model_condition(cfg, s.condition, scratch), s.type_id,
                           drop ? std::span<const int>(null_prompt()) : std::span<const int>(s.prompt_ids)};
      results[slot] = fm_loss(model, ex, sigma, rng, true);
    };
    const std::size_t nthreads = std::min<std::size_t>(std::size_t(cfg.threads), batch.size());
    if (nthreads <= 1) {
      for (std::size_t i = 0; i < batch.size(); ++i) work(i);
    } else {
      std::vector<std::jthread> pool;
      std::vector<std::exception_ptr> errors(nthreads);
      for (std::size_t t = 0; t < nthreads; ++t)
        pool.emplace_back([&, t] {
          try {
            for (std::size_t i = t; i < batch.size(); i += nthreads) work(i);
          } catch (...) {
            errors[t] = std::current_exception();
          }
        });
      pool.clear();
      for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    }

    GradientRecord grads;
    double loss = 0.0;
    for (const auto& r : results) {
      grads.merge(r.grads);
      loss += r.loss;
    }
    grads.scale(1.0 / double(batch.size()));
    loss /= double(batch.size());
    adam.step(model.params(), grads, step);
    if (!model.params().all_finite()) throw NonFiniteError("train: parameters became non-finite at step " + std::to_string(step));

    LossRow row{step, loss, adam.lr_at(step)};
    log.loss.push_back(row);
    if (opt.on_step) opt.on_step(row);
    if (step % cfg.val_every == 0 || step == cfg.steps) run_val(step);
  }
  return log;
}

/// CSV `step,loss,lr` with round-trip precision.
inline std::string loss_csv(const TrainLog& log) {
  std::string out = "step,loss,lr\n";
  for (const auto& r : log.loss) out += std::to_string(r.step) + "," + detail::fmt_double(r.loss) + "," + detail::fmt_double(r.lr) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Sampling

/// Euler integration from sigma = 1 down to 0 in `steps` uniform steps,
/// x <- x + (sigma_next - sigma) * v(x, sigma). Not clamped.
template <class VelocityFn>
Image euler_integrate(Image x, int steps, VelocityFn&& velocity) {
  if (steps < 1) throw std::invalid_argument("sample_image: steps must be >= 1");
  for (int k = 0; k < steps; ++k) {
    const double sigma = 1.0 - double(k) / double(steps);
    const double next = 1.0 - double(k + 1) / double(steps);
    const Image v = velocity(static_cast<const Image&>(x), sigma);
    if (!v.same_shape(x)) throw ShapeError("sample_image: velocity " + v.shape_str() + " for state " + x.shape_str());
    for (std::size_t i = 0; i < x.size(); ++i) x.pixels[i] += (next - sigma) * v.pixels[i];
  }
  return x;
}

/// v_null + g (v_cond - v_null); the null prompt is token 0.
inline Image guided_velocity(const Model& model, const Image& x, const Image& condition, int type_id, std::span<const int> prompt, double t,
                             double guidance) {
  const Image v_cond = guidance == 0.0 ? Image{} : model.predict({x, condition, type_id, prompt, t});
  if (guidance == 1.0) return v_cond;
  Image v = model.predict({x, condition, type_id, null_prompt(), t});
  if (guidance == 0.0) return v;
  for (std::size_t i = 0; i < v.size(); ++i) v.pixels[i] += guidance * (v_cond.pixels[i] - v.pixels[i]);
  return v;
}

/// Starts from seeded noise, integrates the guided velocity and clamps to [0,1].
inline Image sample_image(const Model& model, const Image& condition, int type_id, std::span<const int> prompt, int steps, double guidance,
                          std::uint64_t seed) {
  if (!(guidance >= 0.0)) throw std::invalid_argument("sample_image: guidance must be >= 0");
  if (!model.params().all_finite()) throw NonFiniteError("sample_image: model has non-finite weights");
  const RunConfig& cfg = model.config();
  Rng rng(seed);
  Image scratch;
  const Image& cond = model_condition(cfg, condition, scratch);
  Image x = euler_integrate(noise_image(cfg.image_height, cfg.image_width, rng), steps,
                            [&](const Image& xs, double sigma) { return guided_velocity(model, xs, cond, type_id, prompt, sigma, guidance); });
  x.clamp01();
  return x;
}

}  // namespace unigen
