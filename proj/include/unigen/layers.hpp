// Building blocks shared by the embedding, expert and transformer modules.
#pragma once

#include <cmath>
#include <string>

#include "unigen/autodiff.hpp"
#include "unigen/rng.hpp"

namespace unigen {

/// Binds a graph to the parameter store it reads weights from.
struct Ctx {
  Graph& g;
  const ParamStore& ps;

  Var p(ParamId id) const { return g.param(ps, id); }
  Var constant(Tensor t) const { return g.constant(std::move(t)); }
};

enum class Init { scaled, zero };

/// y = x W + b with W: [in x out], b: [1 x out].
struct Linear {
  ParamId w, b;
  std::size_t in = 0, out = 0;

  static Linear make(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng, Init init = Init::scaled,
                     double stddev = -1.0) {
    Linear l;
    l.in = in;
    l.out = out;
    if (stddev < 0.0) stddev = 1.0 / std::sqrt(double(in));
    l.w = ps.add(name + ".w", init == Init::zero ? Tensor({in, out}) : normal_tensor({in, out}, stddev, rng));
    l.b = ps.add(name + ".b", Tensor({1, out}));
    return l;
  }

  Var operator()(const Ctx& ctx, Var x) const { return add_row(matmul(x, ctx.p(w)), ctx.p(b)); }

  static constexpr std::size_t count(std::size_t in, std::size_t out) { return in * out + out; }
};

/// Adaptive-norm modulation: x * (1 + scale) + shift, per channel.
inline Var modulate(Var x, Var shift, Var scale) {
  Graph& g = *x.graph;
  Tensor one({1, scale.cols()}, 1.0);
  return add_row(mul_row(x, add(scale, g.constant(std::move(one)))), shift);
}

/// Splits a [1 x k*d] row into k consecutive [1 x d] chunks.
inline std::vector<Var> chunk_cols(Var v, std::size_t k) {
  const std::size_t d = v.cols() / k;
  std::vector<Var> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(slice_cols(v, i * d, (i + 1) * d));
  return out;
}

}  // namespace unigen
