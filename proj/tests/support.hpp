// Shared generators and reference implementations for the test suites.
#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "unigen/unigen.hpp"

namespace unigen::testing {

inline Tensor random_tensor(std::size_t r, std::size_t c, Rng& rng, double stddev = 1.0) { return normal_tensor({r, c}, stddev, rng); }

inline Image random_image(int h, int w, Rng& rng) {
  Image im(h, w);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (double& v : im.pixels) v = u(rng);
  return im;
}

/// Overwrites every parameter, zero-initialized gates and projections
/// included, with N(0, stddev^2) draws.
inline void randomize(ParamStore& ps, Rng& rng, double stddev = 0.3) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (ParamId id : ps.ids())
    for (double& v : ps.value(id).values()) v = dist(rng);
}

/// Tiny config for exhaustive checks: 8x8 images, patch 2 -> 16 tokens.
inline RunConfig tiny_config(Arch arch = Arch::weavenet, int d = 16, int layers = 2) {
  RunConfig c;
  c.arch = arch;
  c.d_model = d;
  c.base_layers = layers;
  c.ctrl_layers = layers;
  c.experts = 3;
  c.image_height = 8;
  c.image_width = 8;
  c.vocab = 32;
  c.val_samples = 0;
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Plain-loop references

inline Tensor ref_matmul(const Tensor& a, const Tensor& b) {
  Tensor c({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a.at(i, k) * b.at(k, j);
      c.at(i, j) = s;
    }
  return c;
}

inline Tensor ref_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
  const std::size_t n = q.rows(), m = k.rows(), d = q.cols(), dh = d / heads;
  Tensor out({n, d});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> s(m);
      double mx = -INFINITY;
      for (std::size_t j = 0; j < m; ++j) {
        double dotp = 0.0;
        for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) dotp += q.at(i, c) * k.at(j, c);
        s[j] = dotp / std::sqrt(double(dh));
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (double& x : s) z += (x = std::exp(x - mx));
      for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j < m; ++j) acc += s[j] / z * v.at(j, c);
        out.at(i, c) = acc;
      }
    }
  return out;
}

inline Tensor ref_layer_norm(const Tensor& x) {
  Tensor out(x.shape());
  const std::size_t d = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double mu = 0.0, var = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += x.at(r, c) / double(d);
    for (std::size_t c = 0; c < d; ++c) var += (x.at(r, c) - mu) * (x.at(r, c) - mu) / double(d);
    for (std::size_t c = 0; c < d; ++c) out.at(r, c) = (x.at(r, c) - mu) / std::sqrt(var + 1e-6);
  }
  return out;
}

inline Tensor ref_linear(const ParamStore& ps, const Linear& l, const Tensor& x) {
  Tensor y = ref_matmul(x, ps.value(l.w));
  for (std::size_t r = 0; r < y.rows(); ++r)
    for (std::size_t c = 0; c < y.cols(); ++c) y.at(r, c) += ps.value(l.b)[c];
  return y;
}

inline double ref_silu(double x) { return x / (1.0 + std::exp(-x)); }
inline double ref_gelu(double x) { return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x))); }

// Two-pass window statistics, one window at a time.
inline double ref_ssim(const Image& a, const Image& b, int w = 8) {
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double total = 0.0;
  int count = 0;
  for (int c = 0; c < a.channels; ++c)
    for (int y0 = 0; y0 + w <= a.height; ++y0)
      for (int x0 = 0; x0 + w <= a.width; ++x0) {
        double ma = 0.0, mb = 0.0;
        for (int y = y0; y < y0 + w; ++y)
          for (int x = x0; x < x0 + w; ++x) ma += a.at(y, x, c), mb += b.at(y, x, c);
        ma /= w * w;
        mb /= w * w;
        double va = 0.0, vb = 0.0, cov = 0.0;
        for (int y = y0; y < y0 + w; ++y)
          for (int x = x0; x < x0 + w; ++x) {
            const double da = a.at(y, x, c) - ma, db = b.at(y, x, c) - mb;
            va += da * da, vb += db * db, cov += da * db;
          }
        va /= w * w, vb /= w * w, cov /= w * w;
        total += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++count;
      }
  return total / count;
}

// Random assignment straight from an index vector, independent of scoring.
inline ExpertAssignment random_assignment(std::size_t n, std::size_t e, Rng& rng) {
  ExpertAssignment a;
  a.groups.resize(e);
  a.scores = Tensor({n, e});
  std::uniform_int_distribution<std::size_t> pick(0, e - 1);
  for (std::size_t t = 0; t < n; ++t) {
    a.index.push_back(pick(rng));
    a.groups[a.index.back()].push_back(t);
  }
  return a;
}

}  // namespace unigen::testing
