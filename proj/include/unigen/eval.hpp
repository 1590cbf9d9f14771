// Evaluation reports: per-type image metrics, parameter/latency complexity
// and ablation sweeps.
#pragma once

#include <chrono>
#include <cstdio>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "unigen/metrics.hpp"
#include "unigen/training.hpp"

namespace unigen {

// ---------------------------------------------------------------------------
// Zero-init identity

/// Random model input: Gaussian noisy image, uniform condition image, random
/// type, random prompt of 1-8 tokens and t in [0,1].
struct RandomInput {
  Image noisy, condition;
  int type_id = 0;
  std::vector<int> prompt;
  double t = 0.0;

  ModelInput view() const { return {noisy, condition, type_id, prompt, t}; }
};

inline RandomInput random_input(const RunConfig& cfg, Rng& rng) {
  RandomInput r;
  r.noisy = noise_image(cfg.image_height, cfg.image_width, rng);
  r.condition = Image(cfg.image_height, cfg.image_width);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (double& v : r.condition.pixels) v = u(rng);
  r.type_id = std::uniform_int_distribution<int>(0, cfg.n_types - 1)(rng);
  const int len = std::uniform_int_distribution<int>(1, 8)(rng);
  for (int i = 0; i < len; ++i) r.prompt.push_back(std::uniform_int_distribution<int>(0, cfg.vocab - 1)(rng));
  r.t = u(rng);
  return r;
}

/// Largest |full - base_only| over `n` random inputs.
inline double zero_init_identity_error(const Model& model, int n, std::uint64_t seed) {
  Rng rng(seed);
  double worst = 0.0;
  for (int i = 0; i < n; ++i) {
    const RandomInput in = random_input(model.config(), rng);
    Graph g(false);
    Ctx ctx{g, model.params()};
    const Tensor full = model.forward(ctx, in.view(), ForwardMode::full).value();
    const Tensor base = model.forward(ctx, in.view(), ForwardMode::base_only).value();
    worst = std::max(worst, max_abs_diff(full, base));
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Metric report

inline std::string condition_name(int type_id) {
  static const ConditionRegistry reg = ConditionRegistry::standard();
  if (type_id >= 0 && std::size_t(type_id) < reg.slots()) return reg.name(type_id);
  return "type" + std::to_string(type_id);
}

struct MetricRow {
  std::size_t index = 0;  // sample index in the dataset
  int type_id = 0;
  double ssim = 0.0, psnr = 0.0, mse = 0.0;
};

struct TypeSummary {
  int type_id = 0;
  std::size_t count = 0;
  double ssim = 0.0, psnr = 0.0, mse = 0.0;
};

struct MetricReport {
  std::vector<MetricRow> rows;
  std::vector<TypeSummary> per_type;
  std::string config_hash;
  double seconds_per_image = 0.0;

  std::size_t count() const noexcept { return rows.size(); }

  double mean_ssim(int type_id) const {
    for (const auto& s : per_type)
      if (s.type_id == type_id) return s.ssim;
    throw std::out_of_range("no samples of type " + std::to_string(type_id) + " in report");
  }
};

struct EvalOptions {
  int steps = 28;
  double guidance = 3.5;
  std::vector<int> types;  // empty: every type in the dataset
};

inline EvalOptions eval_options(const RunConfig& cfg) { return {cfg.sample_steps, cfg.guidance, {}}; }

/// Generates one image for each of the first `n_per_type` samples of every
/// requested type (dataset order) and scores it against the target. Sample i
/// uses seed derive_seed(seed, {i}), so rows do not depend on evaluation order.
inline MetricReport evaluate(const Model& model, const Dataset& data, int n_per_type, std::uint64_t seed, const EvalOptions& opt) {
  if (n_per_type < 0) throw std::invalid_argument("evaluate: n must be >= 0");
  const RunConfig& cfg = model.config();
  if (data.height != cfg.image_height || data.width != cfg.image_width || data.n_types > cfg.n_types)
    throw std::invalid_argument("evaluate: dataset (" + std::to_string(data.height) + "x" + std::to_string(data.width) + ", " +
                                std::to_string(data.n_types) + " types) does not fit the checkpoint config " + hex64(cfg.arch_hash()));
  std::vector<int> types = opt.types;
  if (types.empty())
    for (int t = 0; t < data.n_types; ++t) types.push_back(t);

  MetricReport rep;
  rep.config_hash = hex64(cfg.arch_hash());
  std::map<int, int> taken;
  std::vector<std::size_t> picked;
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const int t = data.samples[i].type_id;
    if (std::find(types.begin(), types.end(), t) == types.end() || taken[t] >= n_per_type) continue;
    ++taken[t];
    picked.push_back(i);
  }
  for (int t : types)
    if (taken[t] < n_per_type)
      throw std::invalid_argument("evaluate: dataset has " + std::to_string(taken[t]) + " samples of type " + condition_name(t) + ", " +
                                  std::to_string(n_per_type) + " requested");

  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t i : picked) {
    const auto& s = data.samples[i];
    const Image out = sample_image(model, s.condition, s.type_id, s.prompt_ids, opt.steps, opt.guidance, derive_seed(seed, {i}));
    rep.rows.push_back({i, s.type_id, ssim(out, s.target), psnr(out, s.target), mse(out, s.target)});
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  rep.seconds_per_image = picked.empty() ? 0.0 : secs / double(picked.size());

  for (int t : types) {
    TypeSummary s{t, 0, 0.0, 0.0, 0.0};
    for (const auto& r : rep.rows)
      if (r.type_id == t) ++s.count, s.ssim += r.ssim, s.psnr += r.psnr, s.mse += r.mse;
    if (s.count == 0) continue;
    s.ssim /= double(s.count);
    s.psnr /= double(s.count);
    s.mse /= double(s.count);
    rep.per_type.push_back(s);
  }
  return rep;
}

/// Per-sample rows. Timing is kept out so the file is reproducible.
inline std::string metric_csv(const MetricReport& rep) {
  std::string out = "index,type_id,type,ssim,psnr,mse\n";
  for (const auto& r : rep.rows)
    out += std::to_string(r.index) + "," + std::to_string(r.type_id) + "," + condition_name(r.type_id) + "," + detail::fmt_double(r.ssim) + "," +
           detail::fmt_double(r.psnr) + "," + detail::fmt_double(r.mse) + "\n";
  return out;
}

inline std::string metric_summary_csv(const MetricReport& rep) {
  std::string out = "type_id,type,count,ssim,psnr,mse,config_hash,seconds_per_image,ssim_window\n";
  for (const auto& s : rep.per_type)
    out += std::to_string(s.type_id) + "," + condition_name(s.type_id) + "," + std::to_string(s.count) + "," + detail::fmt_double(s.ssim) + "," +
           detail::fmt_double(s.psnr) + "," + detail::fmt_double(s.mse) + "," + rep.config_hash + "," + detail::fmt_double(rep.seconds_per_image) + "," +
           std::to_string(kSsim.window) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Complexity

struct ComplexityRow {
  std::string arch;
  int conditions = 0;
  std::size_t params = 0;
  double seconds = 0.0;  // mean per-image inference time
};

struct ComplexityReport {
  std::vector<ComplexityRow> rows;
  double weavenet_ratio = 0.0;    // params at the largest / smallest condition count
  double controlnet_ratio = 0.0;
  bool trend_holds = false;       // weavenet_ratio <= 1.10 and controlnet_ratio >= 2.0
};

/// Reference values from the full-scale models: parameters in billions for
/// 3 and 12 conditions.
struct ScalingReference {
  double controlnet_3 = 6.03, controlnet_12 = 17.38;
  double unigen_3 = 4.1, unigen_12 = 4.69;
};
inline constexpr ScalingReference kScalingReference{};

inline constexpr double kMaxWeaveScaling = 1.10;
inline constexpr double kMinControlNetScaling = 2.0;

/// Parameter counts of both architectures at each condition count, plus the
/// mean wall-clock time of sample_image over `runs` runs after `warmup` runs.
/// A ControlNet-style model serving C types holds C branches; one image uses
/// the branch of its own condition, so it is timed with a single branch.
inline ComplexityReport complexity(const RunConfig& base, const std::vector<int>& condition_counts, int runs = 20, int warmup = 3) {
  if (condition_counts.empty()) throw std::invalid_argument("complexity: no condition counts");
  ComplexityReport rep;
  for (Arch arch : {Arch::weavenet, Arch::controlnet}) {
    for (int c : condition_counts) {
      RunConfig cfg = base;
      cfg.arch = arch;
      cfg.n_types = arch == Arch::weavenet ? c : base.n_types;
      ComplexityRow row{to_string(arch), c, count_params_for_conditions(cfg, c), 0.0};
      if (runs > 0) {
        const Model model(cfg);
        Rng rng(derive_seed(cfg.init_seed, {7}));
        const RandomInput in = random_input(cfg, rng);
        for (int i = 0; i < warmup; ++i) sample_image(model, in.condition, in.type_id, in.prompt, cfg.sample_steps, cfg.guidance, std::uint64_t(i));
        const auto t0 = std::chrono::steady_clock::now();
        for (int i = 0; i < runs; ++i) sample_image(model, in.condition, in.type_id, in.prompt, cfg.sample_steps, cfg.guidance, std::uint64_t(i));
        row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / double(runs);
      }
      rep.rows.push_back(row);
    }
  }
  auto ratio = [&](const std::string& arch) {
    std::size_t lo = 0, hi = 0;
    int cmin = std::numeric_limits<int>::max(), cmax = std::numeric_limits<int>::min();
    for (const auto& r : rep.rows) {
      if (r.arch != arch) continue;
      if (r.conditions < cmin) cmin = r.conditions, lo = r.params;
      if (r.conditions > cmax) cmax = r.conditions, hi = r.params;
    }
    return double(hi) / double(lo);
  };
  rep.weavenet_ratio = ratio("weavenet");
  rep.controlnet_ratio = ratio("controlnet");
  rep.trend_holds = rep.weavenet_ratio <= kMaxWeaveScaling && rep.controlnet_ratio >= kMinControlNetScaling;
  return rep;
}

inline std::string complexity_csv(const ComplexityReport& rep) {
  std::string out = "arch,conditions,params,seconds_per_image\n";
  for (const auto& r : rep.rows)
    out += r.arch + "," + std::to_string(r.conditions) + "," + std::to_string(r.params) + "," + detail::fmt_double(r.seconds) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Ablation

enum class AblationKind { experts, layers };

struct AblationRow {
  int value = 0;
  bool ok = false;
  double identity_error = 0.0;  // zero-init check before training
  double final_loss = 0.0;      // validation loss after the last step
  double ssim = 0.0;            // mean over the evaluation split
  std::size_t params = 0;
  std::string error;
};

struct AblationSettings {
  int eval_per_type = 2;
  int identity_inputs = 8;
};

/// Variant config: the expert count, or the control depth. For the layer
/// sweep every variant uses a base stack deep enough for the largest value,
/// so only the control depth changes.
inline RunConfig ablation_variant(const RunConfig& base, AblationKind kind, int value, const std::vector<int>& values) {
  RunConfig c = base;
  if (kind == AblationKind::experts) {
    c.experts = value;
  } else {
    c.base_layers = std::max(base.base_layers, *std::max_element(values.begin(), values.end()));
    c.ctrl_layers = value;
  }
  c.validate();
  return c;
}

/// Trains each variant with the same seed and budget and evaluates it. A
/// variant that throws is reported as failed and the sweep goes on.
inline std::vector<AblationRow> ablate(AblationKind kind, const std::vector<int>& values, const RunConfig& base, const Dataset& train_data,
                                       const Dataset& eval_data, const AblationSettings& settings = {},
                                       const std::function<void(const AblationRow&)>& on_row = {}) {
  if (values.empty()) throw std::invalid_argument("ablate: no values");
  std::vector<AblationRow> rows;
  for (int v : values) {
    AblationRow row;
    row.value = v;
    try {
      const RunConfig cfg = ablation_variant(base, kind, v, values);
      Model model(cfg);
      row.params = model.params().scalar_count();
      row.identity_error = zero_init_identity_error(model, settings.identity_inputs, derive_seed(cfg.seed, {0x1d}));
      if (row.identity_error != 0.0) throw std::runtime_error("zero-init identity violated: " + detail::fmt_double(row.identity_error));
      const TrainLog log = train(model, train_data);
      row.final_loss = log.val.empty() ? log.loss.back().loss : log.val.back().loss;
      row.ssim = 0.0;
      const MetricReport rep = evaluate(model, eval_data, settings.eval_per_type, cfg.sample_seed, eval_options(cfg));
      for (const auto& r : rep.rows) row.ssim += r.ssim;
      if (!rep.rows.empty()) row.ssim /= double(rep.rows.size());
      row.ok = true;
    } catch (const std::exception& e) {
      row.ok = false;
      row.error = e.what();
    }
    rows.push_back(row);
    if (on_row) on_row(row);
  }
  return rows;
}

inline std::string ablation_csv(AblationKind kind, const std::vector<AblationRow>& rows) {
  auto clean = [](std::string s) {
    for (char& ch : s)
      if (ch == ',' || ch == '\n' || ch == '"') ch = ' ';
    return s;
  };
  std::string out = std::string(kind == AblationKind::experts ? "experts" : "ctrl_layers") + ",status,identity_error,final_loss,ssim,params,error\n";
  for (const auto& r : rows)
    out += std::to_string(r.value) + "," + (r.ok ? "ok" : "failed") + "," + detail::fmt_double(r.identity_error) + "," + detail::fmt_double(r.final_loss) +
           "," + detail::fmt_double(r.ssim) + "," + std::to_string(r.params) + "," + clean(r.error) + "\n";
  return out;
}

}  // namespace unigen
