// Image similarity metrics.
#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "unigen/image.hpp"
#include "unigen/tensor.hpp"

namespace unigen {

struct SsimSettings {
  int window = 8;
  double c1 = 0.01 * 0.01;
  double c2 = 0.03 * 0.03;
};
inline constexpr SsimSettings kSsim{};

namespace detail {

inline void require_comparable(const char* op, const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

/// SSIM of one window from its raw moments. The expression is symmetric in
/// (a, b), and for a == b the numerator and denominator coincide.
inline double ssim_from_moments(double mu_a, double mu_b, double var_a, double var_b, double cov) {
  const double num = (2.0 * mu_a * mu_b + kSsim.c1) * (2.0 * cov + kSsim.c2);
  const double den = (mu_a * mu_a + mu_b * mu_b + kSsim.c1) * (var_a + var_b + kSsim.c2);
  return num / den;
}

}  // namespace detail

/// Mean SSIM over every w x w window (stride 1) and channel, with population
/// statistics inside each window. Window sums come from summed-area tables.
inline double ssim(const Image& a, const Image& b) {
  detail::require_comparable("ssim", a, b);
  const int w = kSsim.window, H = a.height, W = a.width;
  if (H < w || W < w) throw ShapeError("ssim: image " + a.shape_str() + " smaller than the " + std::to_string(w) + "x" + std::to_string(w) + " window");
  const std::size_t sw = std::size_t(W + 1);
  std::vector<double> sa, sb, saa, sbb, sab;
  auto table = [&](std::vector<double>& s, int c, auto f) {
    s.assign(std::size_t(H + 1) * sw, 0.0);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        s[std::size_t(y + 1) * sw + std::size_t(x + 1)] =
            f(a.at(y, x, c), b.at(y, x, c)) + s[std::size_t(y) * sw + std::size_t(x + 1)] + s[std::size_t(y + 1) * sw + std::size_t(x)] -
            s[std::size_t(y) * sw + std::size_t(x)];
  };
  auto box = [&](const std::vector<double>& s, int y, int x) {
    return s[std::size_t(y + w) * sw + std::size_t(x + w)] - s[std::size_t(y) * sw + std::size_t(x + w)] - s[std::size_t(y + w) * sw + std::size_t(x)] +
           s[std::size_t(y) * sw + std::size_t(x)];
  };
  const double n = double(w * w);
  double total = 0.0;
  for (int c = 0; c < a.channels; ++c) {
    table(sa, c, [](double p, double) { return p; });
    table(sb, c, [](double, double q) { return q; });
    table(saa, c, [](double p, double) { return p * p; });
    table(sbb, c, [](double, double q) { return q * q; });
    table(sab, c, [](double p, double q) { return p * q; });
    for (int y = 0; y + w <= H; ++y)
      for (int x = 0; x + w <= W; ++x) {
        const double mu_a = box(sa, y, x) / n, mu_b = box(sb, y, x) / n;
        const double var_a = box(saa, y, x) / n - mu_a * mu_a;
        const double var_b = box(sbb, y, x) / n - mu_b * mu_b;
        const double cov = box(sab, y, x) / n - mu_a * mu_b;
        total += detail::ssim_from_moments(mu_a, mu_b, var_a, var_b, cov);
      }
  }
  return total / double(a.channels * (H - w + 1) * (W - w + 1));
}

inline double mse(const Image& a, const Image& b) {
  detail::require_comparable("mse", a, b);
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a.pixels[i] - b.pixels[i]) * (a.pixels[i] - b.pixels[i]);
  return s / double(a.size());
}

/// 10 log10(1 / MSE) for unit peak; +inf for identical images.
inline double psnr(const Image& a, const Image& b) {
  const double m = mse(a, b);
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / m);
}

}  // namespace unigen
