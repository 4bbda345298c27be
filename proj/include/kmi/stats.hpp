#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace kmi {

inline double mean(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v;
  return x.empty() ? 0.0 : s / static_cast<double>(x.size());
}

// Population standard deviation (denominator n).
inline double sd_pop(std::span<const double> x) {
  if (x.empty()) return 0.0;
  double m = mean(x), s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return std::sqrt(s / static_cast<double>(x.size()));
}

// Sample variance (denominator n-1).
inline double var_sample(std::span<const double> x) {
  if (x.size() < 2) return 0.0;
  double m = mean(x), s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return s / static_cast<double>(x.size() - 1);
}

inline double sd_sample(std::span<const double> x) {
  return std::sqrt(var_sample(x));
}

inline double correlation(std::span<const double> x, std::span<const double> y) {
  const std::size_t n = x.size();
  double mx = mean(x), my = mean(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

// Survival function of the Kolmogorov distribution, P(D > d), via the
// alternating series; good to ~1e-10 for d > 0.2.
inline double kolmogorov_sf(double d) {
  if (d <= 0.0) return 1.0;
  double sum = 0.0;
  for (int k = 1; k <= 100; ++k) {
    double term = std::exp(-2.0 * k * k * d * d);
    sum += (k % 2 == 1 ? term : -term);
    if (term < 1e-12) break;
  }
  return std::clamp(2.0 * sum, 0.0, 1.0);
}

// One-sample KS test against U(0,1); returns asymptotic p-value.
inline double ks_uniform_pvalue(std::vector<double> p) {
  const std::size_t n = p.size();
  if (n == 0) return 1.0;
  std::sort(p.begin(), p.end());
  double d = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double lo = p[i] - static_cast<double>(i) / n;
    double hi = static_cast<double>(i + 1) / n - p[i];
    d = std::max({d, lo, hi});
  }
  double dn = d * std::sqrt(static_cast<double>(n));
  // Stephens' small-sample adjustment.
  dn = dn + 0.12 * d + 0.11 * d / std::sqrt(static_cast<double>(n));
  return kolmogorov_sf(dn);
}

inline double median(std::vector<double> x) {
  if (x.empty()) return 0.0;
  std::size_t mid = x.size() / 2;
  std::nth_element(x.begin(), x.begin() + mid, x.end());
  double hi = x[mid];
  if (x.size() % 2 == 1) return hi;
  std::nth_element(x.begin(), x.begin() + mid - 1, x.end());
  return 0.5 * (x[mid - 1] + hi);
}

}  // namespace kmi
