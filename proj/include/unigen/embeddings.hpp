// Patch tokens, 2D rotary position encoding and the prompt / condition /
// timestep embeddings consumed by the expert and transformer modules.
#pragma once

#include <cmath>
#include <compare>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "unigen/image.hpp"
#include "unigen/layers.hpp"

namespace unigen {

struct GridPos {
  int row = 0;
  int col = 0;
  auto operator<=>(const GridPos&) const = default;
};

enum class TokenKind { noisy, condition };

/// Latent tokens with the patch-grid position each one came from.
struct TokenBatch {
  Tensor tokens;  // [n x d_model]
  std::vector<GridPos> grid;
  TokenKind kind = TokenKind::noisy;

  std::size_t size() const noexcept { return grid.size(); }
};

inline std::vector<GridPos> raster_grid(int rows, int cols) {
  std::vector<GridPos> g;
  g.reserve(std::size_t(rows) * std::size_t(cols));
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) g.push_back({r, c});
  return g;
}

/// One row per patch in raster order; each row lists the patch pixels
/// row-major with channels innermost, i.e. p*p*c values.
inline Tensor flatten_patches(const Image& img, int p) {
  if (p <= 0 || img.height % p != 0 || img.width % p != 0)
    throw std::invalid_argument("patchify: image " + img.shape_str() + " not divisible by patch size " + std::to_string(p));
  const int gh = img.height / p, gw = img.width / p, c = img.channels;
  const std::size_t pd = std::size_t(p * p * c);
  Tensor out = Tensor::zeros(std::size_t(gh * gw), pd);
  for (int pr = 0; pr < gh; ++pr)
    for (int pc = 0; pc < gw; ++pc) {
      double* row = out.data() + std::size_t(pr * gw + pc) * pd;
      std::size_t k = 0;
      for (int dy = 0; dy < p; ++dy)
        for (int dx = 0; dx < p; ++dx)
          for (int ch = 0; ch < c; ++ch) row[k++] = img.at(pr * p + dy, pc * p + dx, ch);
    }
  return out;
}

/// Inverse of flatten_patches.
inline Image unpatchify(const Tensor& patches, int height, int width, int p, int channels = 3) {
  const int gh = height / p, gw = width / p;
  const std::size_t pd = std::size_t(p * p * channels);
  if (patches.rows() != std::size_t(gh * gw) || patches.cols() != pd)
    throw ShapeError("unpatchify: got " + shape_str(patches.shape()) + ", expected [" + std::to_string(gh * gw) + "x" + std::to_string(pd) + "]");
  Image img(height, width, channels);
  for (int pr = 0; pr < gh; ++pr)
    for (int pc = 0; pc < gw; ++pc) {
      const double* row = patches.data() + std::size_t(pr * gw + pc) * pd;
      std::size_t k = 0;
      for (int dy = 0; dy < p; ++dy)
        for (int dx = 0; dx < p; ++dx)
          for (int ch = 0; ch < channels; ++ch) img.at(pr * p + dy, pc * p + dx, ch) = row[k++];
    }
  return img;
}

/// Fixed, seeded linear map from patch pixels to d_model-wide tokens. It
/// stands in for a frozen image autoencoder and is never trained.
class PatchEmbed {
 public:
  PatchEmbed() = default;
  PatchEmbed(int patch, int channels, int d_model, std::uint64_t seed) : patch_(patch), channels_(channels) {
    Rng rng(seed);
    const std::size_t pd = std::size_t(patch * patch * channels);
    proj_ = normal_tensor({pd, std::size_t(d_model)}, 1.0 / std::sqrt(double(pd)), rng);
  }

  int patch() const noexcept { return patch_; }
  const Tensor& projection() const noexcept { return proj_; }

  TokenBatch patchify(const Image& img, TokenKind kind = TokenKind::noisy) const {
    if (img.channels != channels_) throw std::invalid_argument("patchify: expected " + std::to_string(channels_) + " channels");
    Tensor flat = flatten_patches(img, patch_);
    TokenBatch tb;
    tb.tokens = Tensor::zeros(flat.rows(), proj_.cols());
    as_mat(tb.tokens).noalias() = as_mat(flat) * as_mat(proj_);
    tb.grid = raster_grid(img.height / patch_, img.width / patch_);
    tb.kind = kind;
    return tb;
  }

 private:
  int patch_ = 1;
  int channels_ = 3;
  Tensor proj_;
};

// ---------------------------------------------------------------------------
// 2D axial rotary encoding. The first half of the channels rotates with the
// row index, the second half with the column index. Within each half, pair j
// (channels 2j, 2j+1) turns by pos * base^(-2j / half).

class RopeTable {
 public:
  RopeTable(std::span<const GridPos> grid, std::size_t d, double base) : n_(grid.size()), d_(d) {
    if (d % 4 != 0) throw ShapeError("rope: width " + std::to_string(d) + " must be divisible by 4");
    const std::size_t half = d / 2, pairs = half / 2;
    cos_.resize(n_ * 2 * pairs);
    sin_.resize(n_ * 2 * pairs);
    for (std::size_t t = 0; t < n_; ++t)
      for (std::size_t axis = 0; axis < 2; ++axis) {
        const double pos = axis == 0 ? grid[t].row : grid[t].col;
        for (std::size_t j = 0; j < pairs; ++j) {
          const double theta = std::pow(base, -2.0 * double(j) / double(half));
          const std::size_t k = t * 2 * pairs + axis * pairs + j;
          cos_[k] = std::cos(pos * theta);
          sin_[k] = std::sin(pos * theta);
        }
      }
  }

  std::size_t tokens() const noexcept { return n_; }
  std::size_t width() const noexcept { return d_; }

  /// Rotates rows of x in place; `sign` = -1 applies the inverse rotation.
  void rotate(Tensor& x, double sign) const {
    if (x.rows() != n_ || x.cols() != d_)
      throw ShapeError("rope: shape mismatch " + shape_str(x.shape()) + " vs table [" + std::to_string(n_) + "x" + std::to_string(d_) + "]");
    const std::size_t pairs = d_ / 4;
    for (std::size_t t = 0; t < n_; ++t) {
      double* row = x.data() + t * d_;
      for (std::size_t p = 0; p < 2 * pairs; ++p) {
        const std::size_t k = t * 2 * pairs + p;
        const double c = cos_[k], s = sign * sin_[k];
        const double a = row[2 * p], b = row[2 * p + 1];
        row[2 * p] = a * c - b * s;
        row[2 * p + 1] = a * s + b * c;
      }
    }
  }

 private:
  std::size_t n_, d_;
  std::vector<double> cos_, sin_;
};

inline Var rope(Var x, std::shared_ptr<const RopeTable> table) {
  Tensor out = x.value();
  table->rotate(out, 1.0);
  return x.graph->emit("rope", std::move(out), {x}, [x = x.id, table](Graph& g, std::size_t self) {
    Tensor* dx = g.grad_sink(x);
    if (!dx) return;
    Tensor d = g.grad_of(self);
    table->rotate(d, -1.0);
    for (std::size_t i = 0; i < d.size(); ++i) (*dx)[i] += d[i];
  });
}

inline TokenBatch rope_apply(const TokenBatch& tb, double base = 10000.0) {
  RopeTable table(tb.grid, tb.tokens.cols(), base);
  TokenBatch out = tb;
  table.rotate(out.tokens, 1.0);
  return out;
}

// ---------------------------------------------------------------------------
// Timestep embedding

/// [cos(s f_0) .. cos(s f_{h-1}), sin(s f_0) .. sin(s f_{h-1})] with s = 1000 t
/// and f_j = 10000^(-j/h), h = dim/2.
inline Tensor sinusoidal_embedding(double t, std::size_t dim) {
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("timestep " + std::to_string(t) + " outside [0,1]");
  const std::size_t half = dim / 2;
  Tensor out({1, dim});
  const double s = 1000.0 * t;
  for (std::size_t j = 0; j < half; ++j) {
    const double f = std::exp(-std::log(10000.0) * double(j) / double(half));
    out[j] = std::cos(s * f);
    out[half + j] = std::sin(s * f);
  }
  return out;
}

/// MLP(sinusoidal(t)) + Linear(pooled).
struct TimestepEmbedder {
  Linear fc1, fc2, pooled;
  std::size_t d = 0;

  static TimestepEmbedder make(ParamStore& ps, const std::string& name, std::size_t d, Rng& rng) {
    TimestepEmbedder e;
    e.d = d;
    e.fc1 = Linear::make(ps, name + ".fc1", d, d, rng);
    e.fc2 = Linear::make(ps, name + ".fc2", d, d, rng);
    e.pooled = Linear::make(ps, name + ".pooled", d, d, rng);
    return e;
  }

  Var operator()(const Ctx& ctx, double t, Var pooled_vec) const {
    Var s = ctx.constant(sinusoidal_embedding(t, d));
    Var h = fc2(ctx, silu(fc1(ctx, s)));
    return add(h, pooled(ctx, pooled_vec));
  }

  static constexpr std::size_t count(std::size_t d) { return 3 * Linear::count(d, d); }
};

// ---------------------------------------------------------------------------
// Prompt and condition-type embeddings

struct PromptContext {
  Var F_p;  // [L x d] prompt token features
  Var E_p;  // [1 x d] pooled prompt embedding
};

struct ConditionContext {
  int type_id = 0;
  Var E_c;  // [1 x d] pooled condition-type embedding
};

/// Trainable table over the synthetic vocabulary. Token 0 is the null prompt.
struct PromptTable {
  ParamId table;
  std::size_t vocab = 0, d = 0;

  static PromptTable make(ParamStore& ps, std::size_t vocab, std::size_t d, Rng& rng) {
    return {ps.add("prompt.table", normal_tensor({vocab, d}, 1.0, rng)), vocab, d};
  }

  PromptContext embed(const Ctx& ctx, std::span<const int> ids) const {
    if (ids.empty()) throw std::invalid_argument("embed_prompt: empty prompt");
    std::vector<std::size_t> idx;
    for (int id : ids) {
      if (id < 0 || std::size_t(id) >= vocab) throw std::out_of_range("embed_prompt: token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab));
      idx.push_back(std::size_t(id));
    }
    Var rows = gather_rows(ctx.p(table), std::move(idx));
    return {rows, mean_rows(rows)};
  }
};

/// One row per condition type; a type's name is a single token, so its
/// pooled embedding is that row.
struct ConditionTable {
  ParamId table;
  std::size_t n_types = 0, d = 0;

  static ConditionTable make(ParamStore& ps, std::size_t n_types, std::size_t d, Rng& rng) {
    return {ps.add("condition.table", normal_tensor({n_types, d}, 1.0, rng)), n_types, d};
  }

  ConditionContext embed(const Ctx& ctx, int type_id) const {
    if (type_id < 0 || std::size_t(type_id) >= n_types)
      throw std::out_of_range("embed_condition: type id " + std::to_string(type_id) + " outside [0," + std::to_string(n_types) + ")");
    return {type_id, mean_rows(gather_rows(ctx.p(table), {std::size_t(type_id)}))};
  }
};

}  // namespace unigen
