// Condition-modulated experts.
//
// Tokens are routed by argmax over a linear score of (F_n + F_c). Each expert
// rescales its condition tokens channel-wise by a vector derived from the
// condition-type embedding, then gates its noisy tokens with a per-token
// vector computed from the modulated condition tokens. Results are put back
// in the original token order and added to the output of a shared expert,
// which runs adaptive-norm attention between noisy, condition and prompt
// tokens.
#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "unigen/embeddings.hpp"

namespace unigen {

struct ExpertAssignment {
  Tensor scores;                                  // [n x E]
  std::vector<std::size_t> index;                 // chosen expert per token
  std::vector<std::vector<std::size_t>> groups;   // member tokens per expert, original order

  std::size_t tokens() const noexcept { return index.size(); }
  std::size_t experts() const noexcept { return groups.size(); }
};

/// Argmax per row; ties go to the lowest expert index.
inline ExpertAssignment assign_from_scores(Tensor scores) {
  ExpertAssignment a;
  const std::size_t n = scores.rows(), e = scores.cols();
  if (e == 0) throw ShapeError("route_tokens: no experts");
  a.groups.resize(e);
  a.index.resize(n);
  for (std::size_t t = 0; t < n; ++t) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < e; ++k)
      if (scores.at(t, k) > scores.at(t, best)) best = k;
    a.index[t] = best;
    a.groups[best].push_back(t);
  }
  a.scores = std::move(scores);
  return a;
}

/// S_e = (F_n + F_c) W_r + b_r, then argmax routing.
inline ExpertAssignment route_tokens(const Tensor& Fn, const Tensor& Fc, const Tensor& W_r, const Tensor& b_r) {
  if (Fn.shape() != Fc.shape())
    throw ShapeError("route_tokens: token mismatch " + shape_str(Fn.shape()) + " vs " + shape_str(Fc.shape()));
  if (W_r.rows() != Fn.cols() || b_r.cols() != W_r.cols())
    throw ShapeError("route_tokens: router " + shape_str(W_r.shape()) + " incompatible with tokens " + shape_str(Fn.shape()));
  Tensor sum = Fn;
  for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += Fc[i];
  Tensor scores = Tensor::zeros(Fn.rows(), W_r.cols());
  as_mat(scores).noalias() = as_mat(sum) * as_mat(W_r);
  for (std::size_t t = 0; t < scores.rows(); ++t)
    for (std::size_t k = 0; k < scores.cols(); ++k) scores.at(t, k) += b_r[k];
  return assign_from_scores(std::move(scores));
}

/// Tokens per expert, for load reporting.
inline std::vector<std::size_t> load_statistics(const ExpertAssignment& a) {
  std::vector<std::size_t> out;
  for (const auto& g : a.groups) out.push_back(g.size());
  return out;
}

inline void check_assignment(const ExpertAssignment& a, std::size_t n_tokens) {
  if (a.tokens() != n_tokens)
    throw ShapeError("assignment covers " + std::to_string(a.tokens()) + " tokens, input has " + std::to_string(n_tokens));
}

/// One block per expert holding that expert's tokens in original order.
inline std::vector<Tensor> gather_groups(const Tensor& tokens, const ExpertAssignment& a) {
  check_assignment(a, tokens.rows());
  const std::size_t d = tokens.cols();
  std::vector<Tensor> blocks;
  for (const auto& g : a.groups) {
    Tensor b = Tensor::zeros(g.size(), d);
    for (std::size_t i = 0; i < g.size(); ++i) std::copy_n(tokens.data() + g[i] * d, d, b.data() + i * d);
    blocks.push_back(std::move(b));
  }
  return blocks;
}

/// Writes each expert's processed rows back to their original positions in
/// `out`, which supplies the output shape.
inline Tensor reverse_scatter(const std::vector<Tensor>& blocks, Tensor out, const ExpertAssignment& a) {
  check_assignment(a, out.rows());
  if (blocks.size() != a.experts())
    throw ShapeError("reverse_scatter: " + std::to_string(blocks.size()) + " blocks for " + std::to_string(a.experts()) + " experts");
  const std::size_t d = out.cols();
  for (std::size_t e = 0; e < blocks.size(); ++e) {
    const auto& g = a.groups[e];
    if (blocks[e].rows() != g.size() || (!g.empty() && blocks[e].cols() != d))
      throw ShapeError("reverse_scatter: expert " + std::to_string(e) + " block " + shape_str(blocks[e].shape()) + " for " +
                       std::to_string(g.size()) + " tokens of width " + std::to_string(d));
    for (std::size_t i = 0; i < g.size(); ++i) std::copy_n(blocks[e].data() + i * d, d, out.data() + g[i] * d);
  }
  return out;
}

/// Graph form of gather_groups; empty groups yield no block.
inline std::vector<std::optional<Var>> gather_groups(Var tokens, const ExpertAssignment& a) {
  check_assignment(a, tokens.rows());
  std::vector<std::optional<Var>> out;
  for (const auto& g : a.groups) out.push_back(g.empty() ? std::nullopt : std::optional<Var>(gather_rows(tokens, g)));
  return out;
}

/// Graph form of reverse_scatter: concatenate blocks in expert order and
/// apply the inverse permutation.
inline Var reverse_scatter(const std::vector<std::optional<Var>>& blocks, const ExpertAssignment& a) {
  std::vector<Var> parts;
  std::vector<std::size_t> position(a.tokens());
  std::size_t row = 0;
  for (std::size_t e = 0; e < blocks.size(); ++e) {
    const auto& g = a.groups[e];
    if (g.empty()) continue;
    if (!blocks[e] || blocks[e]->rows() != g.size()) throw ShapeError("reverse_scatter: block size mismatch for expert " + std::to_string(e));
    parts.push_back(*blocks[e]);
    for (std::size_t t : g) position[t] = row++;
  }
  return gather_rows(concat_rows(parts), std::move(position));
}

/// Per-expert weights. Every entry starts i.i.d. Normal(0, 0.1^2).
struct ModulatedExpert {
  ParamId lw_c, lb_c, lw_h, lb_h;

  static ModulatedExpert make(ParamStore& ps, const std::string& name, std::size_t d, Rng& rng) {
    return {ps.add(name + ".lw_c", normal_tensor({d, d}, 0.1, rng)), ps.add(name + ".lb_c", normal_tensor({1, d}, 0.1, rng)),
            ps.add(name + ".lw_h", normal_tensor({d, d}, 0.1, rng)), ps.add(name + ".lb_h", normal_tensor({1, d}, 0.1, rng))};
  }

  /// F_c' = (E_c LW_c) * F_c + LB_c;  F_n' = (F_c' LW_h) * F_n + LB_h.
  std::pair<Var, Var> operator()(const Ctx& ctx, Var Fn_block, Var Fc_block, Var E_c) const {
    if (Fn_block.cols() != Fc_block.cols() || E_c.cols() != Fc_block.cols())
      throw ShapeError("modulated_expert: width mismatch " + shape_str(Fn_block.value().shape()) + " / " + shape_str(Fc_block.value().shape()) +
                       " / " + shape_str(E_c.value().shape()));
    Var channel_scale = matmul(E_c, ctx.p(lw_c));
    Var Fc_mod = add_row(mul_row(Fc_block, channel_scale), ctx.p(lb_c));
    Var token_gate = matmul(Fc_mod, ctx.p(lw_h));
    Var Fn_mod = add_row(mul(token_gate, Fn_block), ctx.p(lb_h));
    return {Fn_mod, Fc_mod};
  }

  static constexpr std::size_t count(std::size_t d) { return 2 * d * d + 2 * d; }
};

/// Adaptive-norm attention producing a gated update. Query and key/value
/// sides are layer-normalized and shifted/scaled by vectors projected from a
/// conditioning embedding; the output is multiplied channel-wise by a gate
/// projected from the same embedding. Gates start at zero.
struct MMAttention {
  Linear mod, gate, q, k, v, o;
  std::size_t heads = 1;

  static MMAttention make(ParamStore& ps, const std::string& name, std::size_t d, std::size_t heads, Rng& rng) {
    MMAttention m;
    m.heads = heads;
    m.mod = Linear::make(ps, name + ".mod", d, 4 * d, rng, Init::scaled, 0.02);
    m.gate = Linear::make(ps, name + ".gate", d, d, rng, Init::zero);
    m.q = Linear::make(ps, name + ".q", d, d, rng);
    m.k = Linear::make(ps, name + ".k", d, d, rng);
    m.v = Linear::make(ps, name + ".v", d, d, rng);
    m.o = Linear::make(ps, name + ".o", d, d, rng);
    return m;
  }

  Var operator()(const Ctx& ctx, Var xq, Var xkv, Var cond) const {
    Var s = silu(cond);
    auto m = chunk_cols(mod(ctx, s), 4);
    Var g = gate(ctx, s);
    Var hq = modulate(layer_norm(xq), m[0], m[1]);
    Var hkv = modulate(layer_norm(xkv), m[2], m[3]);
    Var a = attention(q(ctx, hq), k(ctx, hkv), v(ctx, hkv), heads);
    return mul_row(o(ctx, a), g);
  }

  static constexpr std::size_t count(std::size_t d) { return Linear::count(d, 4 * d) + 5 * Linear::count(d, d); }
};

struct SharedExpertOutput {
  Var S_n, S_c;  // first-stage outputs
  Var S_n2, S_c2;  // final outputs after the prompt stage and residual sums
};

/// Two-stage shared expert. Stage one lets noisy and condition tokens attend
/// to each other under T_n = emb(t, E_c), then refines the condition side with
/// self-attention. Stage two lets the concatenated tokens attend to the prompt
/// under T_n' = emb(t, E_p), runs joint self-attention, and adds stage one.
struct SharedExpert {
  TimestepEmbedder temb;
  MMAttention noisy_to_cond, cond_to_noisy, cond_self, joint_prompt, joint_self;

  static SharedExpert make(ParamStore& ps, const std::string& name, std::size_t d, std::size_t heads, Rng& rng) {
    SharedExpert s;
    s.temb = TimestepEmbedder::make(ps, name + ".temb", d, rng);
    s.noisy_to_cond = MMAttention::make(ps, name + ".noisy_to_cond", d, heads, rng);
    s.cond_to_noisy = MMAttention::make(ps, name + ".cond_to_noisy", d, heads, rng);
    s.cond_self = MMAttention::make(ps, name + ".cond_self", d, heads, rng);
    s.joint_prompt = MMAttention::make(ps, name + ".joint_prompt", d, heads, rng);
    s.joint_self = MMAttention::make(ps, name + ".joint_self", d, heads, rng);
    return s;
  }

  /// Fn_rope / Fc_rope are already position-encoded.
  SharedExpertOutput operator()(const Ctx& ctx, Var Fn_rope, Var Fc_rope, const PromptContext& prompt, const ConditionContext& cond,
                                double t) const {
    if (prompt.F_p.rows() == 0) throw std::invalid_argument("shared_expert: empty prompt");
    SharedExpertOutput out;
    Var T_n = temb(ctx, t, cond.E_c);
    out.S_n = noisy_to_cond(ctx, Fn_rope, Fc_rope, T_n);
    Var S_c = cond_to_noisy(ctx, Fc_rope, Fn_rope, T_n);
    out.S_c = add(S_c, cond_self(ctx, S_c, S_c, T_n));

    Var T_p = temb(ctx, t, prompt.E_p);
    const std::size_t n = Fn_rope.rows();
    Var joint = concat_rows({Fn_rope, Fc_rope});
    Var S = joint_prompt(ctx, joint, prompt.F_p, T_p);
    S = add(S, joint_self(ctx, S, S, T_p));
    out.S_n2 = add(slice_rows(S, 0, n), out.S_n);
    out.S_c2 = add(slice_rows(S, n, S.rows()), out.S_c);
    return out;
  }

  static constexpr std::size_t count(std::size_t d) { return TimestepEmbedder::count(d) + 5 * MMAttention::count(d); }
};

struct CoMoEOutput {
  Var Fn_hat, Fc_hat;
  ExpertAssignment assignment;
};

struct CoMoE {
  Linear router;
  std::vector<ModulatedExpert> experts;
  SharedExpert shared;
  double rope_base = 10000.0;

  static CoMoE make(ParamStore& ps, const std::string& name, std::size_t d, std::size_t n_experts, std::size_t heads, double rope_base, Rng& rng) {
    CoMoE c;
    c.rope_base = rope_base;
    c.router = Linear::make(ps, name + ".router", d, n_experts, rng);
    for (std::size_t e = 0; e < n_experts; ++e) c.experts.push_back(ModulatedExpert::make(ps, name + ".expert" + std::to_string(e), d, rng));
    c.shared = SharedExpert::make(ps, name + ".shared", d, heads, rng);
    return c;
  }

  ExpertAssignment route(const Ctx& ctx, Var Fn, Var Fc) const {
    return route_tokens(Fn.value(), Fc.value(), ctx.ps.value(router.w), ctx.ps.value(router.b));
  }

  /// F_hat_n = Reverse(expert F_n') + S_n';  F_hat_c = Reverse(expert F_c') + S_c'.
  /// Routing reads the un-rotated tokens; experts and the shared expert see
  /// rotated ones, each token keeping the position it was created at.
  CoMoEOutput operator()(const Ctx& ctx, Var Fn, Var Fc, std::shared_ptr<const RopeTable> rope_table, const PromptContext& prompt,
                         const ConditionContext& cond, double t) const {
    CoMoEOutput out;
    out.assignment = route(ctx, Fn, Fc);
    Var Fn_rope = rope(Fn, rope_table);
    Var Fc_rope = rope(Fc, rope_table);
    auto n_blocks = gather_groups(Fn_rope, out.assignment);
    auto c_blocks = gather_groups(Fc_rope, out.assignment);
    std::vector<std::optional<Var>> n_out(experts.size()), c_out(experts.size());
    for (std::size_t e = 0; e < experts.size(); ++e) {
      if (!n_blocks[e]) continue;
      auto [fn, fc] = experts[e](ctx, *n_blocks[e], *c_blocks[e], cond.E_c);
      n_out[e] = fn;
      c_out[e] = fc;
    }
    Var Fn_experts = reverse_scatter(n_out, out.assignment);
    Var Fc_experts = reverse_scatter(c_out, out.assignment);
    SharedExpertOutput s = shared(ctx, Fn_rope, Fc_rope, prompt, cond, t);
    out.Fn_hat = add(Fn_experts, s.S_n2);
    out.Fc_hat = add(Fc_experts, s.S_c2);
    return out;
  }

  static constexpr std::size_t count(std::size_t d, std::size_t n_experts) {
    return Linear::count(d, n_experts) + n_experts * ModulatedExpert::count(d) + SharedExpert::count(d);
  }
};

}  // namespace unigen
