// Transformer backbone, interleaved control branch and the parallel
// ControlNet-style baseline.
#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "unigen/comoe.hpp"
#include "unigen/config.hpp"

namespace unigen {

/// Adaptive-norm transformer block: joint attention of image tokens over
/// [image; prompt] keys, then a feed-forward layer. Both sub-layers are gated
/// by vectors projected from a conditioning embedding; the gate projections
/// start at zero, so a fresh block is the identity map.
struct DiTBlock {
  Linear mod, gate, q, k, v, o, fc1, fc2;
  std::size_t heads = 1;

  static DiTBlock make(ParamStore& ps, const std::string& name, std::size_t d, std::size_t heads, std::size_t mlp_ratio, Rng& rng) {
    DiTBlock b;
    b.heads = heads;
    b.mod = Linear::make(ps, name + ".mod", d, 4 * d, rng, Init::scaled, 0.02);
    b.gate = Linear::make(ps, name + ".gate", d, 2 * d, rng, Init::zero);
    b.q = Linear::make(ps, name + ".q", d, d, rng);
    b.k = Linear::make(ps, name + ".k", d, d, rng);
    b.v = Linear::make(ps, name + ".v", d, d, rng);
    b.o = Linear::make(ps, name + ".o", d, d, rng);
    b.fc1 = Linear::make(ps, name + ".fc1", d, mlp_ratio * d, rng);
    b.fc2 = Linear::make(ps, name + ".fc2", mlp_ratio * d, d, rng);
    return b;
  }

  /// New parameters under `name` holding bitwise copies of `src`'s values.
  static DiTBlock copy_of(ParamStore& ps, const std::string& name, const DiTBlock& src) {
    auto dup = [&](const Linear& l, const std::string& suffix) {
      Linear c = l;
      c.w = ps.add(name + suffix + ".w", ps.value(l.w));
      c.b = ps.add(name + suffix + ".b", ps.value(l.b));
      return c;
    };
    DiTBlock b;
    b.heads = src.heads;
    b.mod = dup(src.mod, ".mod");
    b.gate = dup(src.gate, ".gate");
    b.q = dup(src.q, ".q");
    b.k = dup(src.k, ".k");
    b.v = dup(src.v, ".v");
    b.o = dup(src.o, ".o");
    b.fc1 = dup(src.fc1, ".fc1");
    b.fc2 = dup(src.fc2, ".fc2");
    return b;
  }

  std::vector<const Linear*> layers() const { return {&mod, &gate, &q, &k, &v, &o, &fc1, &fc2}; }

  /// x: [n x d] image tokens, prompt: [L x d], cond: [1 x d]. Rotary encoding
  /// is applied to image queries and keys only.
  Var operator()(const Ctx& ctx, Var x, Var prompt, Var cond, const std::shared_ptr<const RopeTable>& rope_table) const {
    if (x.cols() != prompt.cols() || cond.cols() != x.cols())
      throw ShapeError("dit_block: shape mismatch " + shape_str(x.value().shape()) + " / " + shape_str(prompt.value().shape()) + " / " +
                       shape_str(cond.value().shape()));
    Var s = silu(cond);
    auto m = chunk_cols(mod(ctx, s), 4);
    auto g = chunk_cols(gate(ctx, s), 2);

    Var h = modulate(layer_norm(x), m[0], m[1]);
    Var p = layer_norm(prompt);
    Var qi = rope(q(ctx, h), rope_table);
    Var keys = concat_rows({rope(k(ctx, h), rope_table), k(ctx, p)});
    Var vals = concat_rows({v(ctx, h), v(ctx, p)});
    x = add(x, mul_row(o(ctx, attention(qi, keys, vals, heads)), g[0]));

    Var h2 = modulate(layer_norm(x), m[2], m[3]);
    return add(x, mul_row(fc2(ctx, gelu(fc1(ctx, h2))), g[1]));
  }

  static constexpr std::size_t count(std::size_t d, std::size_t mlp_ratio) {
    return Linear::count(d, 4 * d) + Linear::count(d, 2 * d) + 4 * Linear::count(d, d) + Linear::count(d, mlp_ratio * d) +
           Linear::count(mlp_ratio * d, d);
  }
};

/// Final adaptive norm and projection from tokens to per-patch pixel values.
struct OutputHead {
  Linear mod, out;

  static OutputHead make(ParamStore& ps, std::size_t d, std::size_t patch_dim, Rng& rng) {
    return {Linear::make(ps, "head.mod", d, 2 * d, rng, Init::scaled, 0.02), Linear::make(ps, "head.out", d, patch_dim, rng)};
  }

  Var operator()(const Ctx& ctx, Var x, Var cond) const {
    auto m = chunk_cols(mod(ctx, silu(cond)), 2);
    return out(ctx, modulate(layer_norm(x), m[0], m[1]));
  }

  static constexpr std::size_t count(std::size_t d, std::size_t patch_dim) { return Linear::count(d, 2 * d) + Linear::count(d, patch_dim); }
};

enum class ForwardMode { full, base_only };

/// Everything the denoiser reads for one sample.
struct ModelInput {
  const Image& noisy;
  const Image& condition;
  int type_id = 0;
  std::span<const int> prompt;
  double t = 0.0;  // noise level in [0, 1]
};

/// The denoiser. Depending on `arch` the control path is the interleaved
/// weave stack with its condition-modulated experts, or a ControlNet-style
/// parallel branch. Control blocks start as copies of the base blocks and
/// reach the base stream through projections that start at zero.
class Model {
 public:
  explicit Model(const RunConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t d = std::size_t(cfg_.d_model), H = std::size_t(cfg_.heads), R = std::size_t(cfg_.mlp_ratio);
    patch_ = PatchEmbed(cfg_.patch, cfg_.channels(), cfg_.d_model, cfg_.patch_seed);
    auto grid = raster_grid(cfg_.image_height / cfg_.patch, cfg_.image_width / cfg_.patch);
    rope_ = std::make_shared<const RopeTable>(grid, d, cfg_.rope_base);

    // Base components draw from their own stream so both architectures share
    // an identical backbone for the same seed.
    Rng base_rng(derive_seed(cfg_.init_seed, {0}));
    prompt_ = PromptTable::make(ps_, std::size_t(cfg_.vocab), d, base_rng);
    temb_ = TimestepEmbedder::make(ps_, "temb", d, base_rng);
    for (int i = 0; i < cfg_.base_layers; ++i) base_.push_back(DiTBlock::make(ps_, "base." + std::to_string(i), d, H, R, base_rng));
    head_ = OutputHead::make(ps_, d, std::size_t(cfg_.patch_dim()), base_rng);

    Rng ctrl_rng(derive_seed(cfg_.init_seed, {1}));
    const std::string branch = cfg_.arch == Arch::weavenet ? "weave." : "control.";
    for (int i = 0; i < cfg_.ctrl_layers; ++i) {
      ctrl_.push_back(DiTBlock::copy_of(ps_, branch + std::to_string(i), base_[std::size_t(i)]));
      zero_proj_.push_back(Linear::make(ps_, "zero_proj." + std::to_string(i), d, d, ctrl_rng, Init::zero));
    }
    if (cfg_.arch == Arch::weavenet) {
      cond_ = ConditionTable::make(ps_, std::size_t(cfg_.n_types), d, ctrl_rng);
      comoe_ = CoMoE::make(ps_, "comoe", d, std::size_t(cfg_.experts), H, cfg_.rope_base, ctrl_rng);
    }
  }

  const RunConfig& config() const noexcept { return cfg_; }
  ParamStore& params() noexcept { return ps_; }
  const ParamStore& params() const noexcept { return ps_; }
  const PatchEmbed& patch_embed() const noexcept { return patch_; }
  const std::shared_ptr<const RopeTable>& rope_table() const noexcept { return rope_; }
  const std::vector<DiTBlock>& base_blocks() const noexcept { return base_; }
  const std::vector<DiTBlock>& control_blocks() const noexcept { return ctrl_; }
  const std::vector<Linear>& zero_projections() const noexcept { return zero_proj_; }
  const CoMoE& comoe() const noexcept { return comoe_; }
  const PromptTable& prompt_table() const noexcept { return prompt_; }
  const ConditionTable& condition_table() const noexcept { return cond_; }
  const TimestepEmbedder& timestep_embedder() const noexcept { return temb_; }
  const OutputHead& head() const noexcept { return head_; }

  /// Predicted velocity as per-patch pixel values, [tokens x patch_dim].
  Var forward(const Ctx& ctx, const ModelInput& in, ForwardMode mode = ForwardMode::full) const {
    check_image(in.noisy, "noisy input");
    check_image(in.condition, "condition");
    Var Fn = ctx.constant(patch_.patchify(in.noisy, TokenKind::noisy).tokens);
    Var Fc = ctx.constant(patch_.patchify(in.condition, TokenKind::condition).tokens);
    PromptContext prompt = prompt_.embed(ctx, in.prompt);
    Var c_p = temb_(ctx, in.t, prompt.E_p);

    if (mode == ForwardMode::base_only) {
      for (const auto& b : base_) Fn = b(ctx, Fn, prompt.F_p, c_p, rope_);
    } else if (cfg_.arch == Arch::weavenet) {
      Fn = weave_forward(ctx, Fn, Fc, prompt, in.type_id, in.t, c_p);
    } else {
      Fn = controlnet_forward(ctx, Fn, Fc, prompt, c_p);
    }
    return head_(ctx, Fn, c_p);
  }

  /// Forward without recording; returns the velocity as an image.
  Image predict(const ModelInput& in, ForwardMode mode = ForwardMode::full) const {
    Graph g(false);
    Ctx ctx{g, ps_};
    return unpatchify(forward(ctx, in, mode).value(), cfg_.image_height, cfg_.image_width, cfg_.patch, cfg_.channels());
  }

 private:
  void check_image(const Image& img, const char* what) const {
    if (img.height != cfg_.image_height || img.width != cfg_.image_width || img.channels != cfg_.channels())
      throw ShapeError(std::string(what) + ": image " + img.shape_str() + " does not match model [" + std::to_string(cfg_.image_height) + "x" +
                       std::to_string(cfg_.image_width) + "x3]");
  }

  Var inject(const Ctx& ctx, Var Fn, std::size_t layer, Var h) const {
    Var z = zero_proj_[layer](ctx, h);
    if (cfg_.cond_scale != 1.0) z = scale(z, cfg_.cond_scale);
    return add(Fn, z);
  }

  Var weave_forward(const Ctx& ctx, Var Fn, Var Fc, const PromptContext& prompt, int type_id, double t, Var c_p) const {
    ConditionContext cond = cond_.embed(ctx, type_id);
    Var c_c = temb_(ctx, t, cond.E_c);
    for (std::size_t i = 0; i < base_.size(); ++i) {
      Fn = base_[i](ctx, Fn, prompt.F_p, c_p, rope_);
      if (i >= ctrl_.size()) continue;
      Var h;
      if (i == 0) {
        CoMoEOutput m = comoe_(ctx, Fn, Fc, rope_, prompt, cond, t);
        h = ctrl_[0](ctx, add(m.Fn_hat, m.Fc_hat), prompt.F_p, c_c, rope_);
      } else {
        h = ctrl_[i](ctx, Fn, prompt.F_p, c_c, rope_);
      }
      Fn = inject(ctx, Fn, i, h);
    }
    return Fn;
  }

  Var controlnet_forward(const Ctx& ctx, Var Fn, Var Fc, const PromptContext& prompt, Var c_p) const {
    Var h = add(Fn, Fc);
    for (std::size_t i = 0; i < base_.size(); ++i) {
      Fn = base_[i](ctx, Fn, prompt.F_p, c_p, rope_);
      if (i >= ctrl_.size()) continue;
      h = ctrl_[i](ctx, h, prompt.F_p, c_p, rope_);
      Fn = inject(ctx, Fn, i, h);
    }
    return Fn;
  }

  RunConfig cfg_;
  ParamStore ps_;
  PatchEmbed patch_;
  std::shared_ptr<const RopeTable> rope_;
  PromptTable prompt_;
  ConditionTable cond_;
  TimestepEmbedder temb_;
  std::vector<DiTBlock> base_;
  std::vector<DiTBlock> ctrl_;
  std::vector<Linear> zero_proj_;
  CoMoE comoe_;
  OutputHead head_;
};

// ---------------------------------------------------------------------------
// Parameter counts

/// Parameters shared by every architecture: prompt table, timestep embedder,
/// base blocks and output head.
inline std::size_t count_backbone_params(const RunConfig& c) {
  const std::size_t d = std::size_t(c.d_model);
  return std::size_t(c.vocab) * d + TimestepEmbedder::count(d) + std::size_t(c.base_layers) * DiTBlock::count(d, std::size_t(c.mlp_ratio)) +
         OutputHead::count(d, std::size_t(c.patch_dim()));
}

/// One control branch: its blocks plus their zero projections.
inline std::size_t count_branch_params(const RunConfig& c) {
  const std::size_t d = std::size_t(c.d_model);
  return std::size_t(c.ctrl_layers) * (DiTBlock::count(d, std::size_t(c.mlp_ratio)) + Linear::count(d, d));
}

/// Trainable parameters of the model built from `c`.
inline std::size_t count_params(const RunConfig& c) {
  const std::size_t d = std::size_t(c.d_model);
  std::size_t n = count_backbone_params(c) + count_branch_params(c);
  if (c.arch == Arch::weavenet) n += std::size_t(c.n_types) * d + CoMoE::count(d, std::size_t(c.experts));
  return n;
}

/// Parameters needed to serve `n_conditions` condition types. The weave model
/// only grows its condition-embedding table; the ControlNet baseline trains
/// one branch per condition type.
inline std::size_t count_params_for_conditions(RunConfig c, int n_conditions) {
  if (c.arch == Arch::weavenet) {
    c.n_types = n_conditions;
    return count_params(c);
  }
  return count_backbone_params(c) + std::size_t(n_conditions) * count_branch_params(c);
}

}  // namespace unigen
