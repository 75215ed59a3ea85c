#pragma once

// Reference implementations written from the definitions, shared by the
// unit tests and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "setcon/datasets.hpp"
#include "setcon/tensor.hpp"

namespace oracle {

using setcon::Tensor;
using setcon::data::Rgb;

// Reference generator written from the rules alone: walls fold a step back
// on itself, later z-ranks paint over earlier ones, ids are 1-based.
struct OracleObject {
  int r, c, dr, dc;
  Rgb color;
};

inline Rgb hsv_full(double h) {
  auto channel = [h](double n) {
    const double k = std::fmod(n + h * 6.0, 6.0);
    const double v = 1.0 - std::max(0.0, std::min({k, 4.0 - k, 1.0}));
    return static_cast<std::uint8_t>(std::lround(v * 255.0));
  };
  return Rgb{channel(5), channel(3), channel(1)};
}

struct OracleSequence {
  std::vector<float> frames;
  std::vector<std::uint8_t> masks;
};

inline OracleSequence oracle_gridworld(std::uint64_t seed, std::size_t colors_n, std::size_t objects_n) {
  std::mt19937_64 rng(seed);
  std::vector<int> pool(100);
  std::iota(pool.begin(), pool.end(), 0);
  for (std::size_t i = 0; i < objects_n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, 99);
    std::swap(pool[i], pool[pick(rng)]);
  }
  const double offset = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  std::vector<std::size_t> order(colors_n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  static const int kDr[4] = {-1, 1, 0, 0};
  static const int kDc[4] = {0, 0, -1, 1};
  std::vector<OracleObject> objs;
  for (std::size_t i = 0; i < objects_n; ++i) {
    const int s = pool[i];
    const int dir = s % 4;
    const double hue = std::fmod(offset + double(order[i % colors_n]) / double(colors_n), 1.0);
    objs.push_back({s / 20, (s / 4) % 5, kDr[dir], kDc[dir], hsv_full(hue)});
  }

  OracleSequence out;
  out.frames.assign(8 * 25 * 3, 0.0f);
  out.masks.assign(8 * 25, 0);
  auto unit = [](std::uint8_t c) { return float(double(c) * 2.0 / 255.0 - 1.0); };
  for (int t = 0; t < 8; ++t) {
    if (t > 0)
      for (auto& o : objs) {
        const bool r_out = o.r + o.dr < 0 || o.r + o.dr > 4;
        const bool c_out = o.c + o.dc < 0 || o.c + o.dc > 4;
        if (r_out) o.dr = -o.dr;
        if (c_out) o.dc = -o.dc;
        o.r += o.dr;
        o.c += o.dc;
      }
    std::vector<std::size_t> z(objects_n);
    std::iota(z.begin(), z.end(), 0);
    std::shuffle(z.begin(), z.end(), rng);
    std::vector<int> rank(objects_n);
    for (std::size_t k = 0; k < objects_n; ++k) rank[z[k]] = int(k);
    for (int p = 0; p < 25; ++p) {
      int top = -1;
      for (std::size_t i = 0; i < objects_n; ++i)
        if (objs[i].r * 5 + objs[i].c == p && (top < 0 || rank[i] > rank[top])) top = int(i);
      const Rgb col = top < 0 ? Rgb{} : objs[top].color;
      out.frames[(t * 25 + p) * 3 + 0] = unit(col.r);
      out.frames[(t * 25 + p) * 3 + 1] = unit(col.g);
      out.frames[(t * 25 + p) * 3 + 2] = unit(col.b);
      out.masks[t * 25 + p] = std::uint8_t(top + 1);
    }
  }
  return out;
}

inline long double dot(const Tensor<double>& a, std::size_t i, const Tensor<double>& b, std::size_t j) {
  long double s = 0;
  for (std::size_t d = 0; d < a.cols(); ++d) s += (long double)a.at(i, d) * b.at(j, d);
  return s;
}

// Direct enumeration: for each anchor p(b, t) sum exp over every z_s and z_p.
inline double brute_setcon(const Tensor<double>& zs, const Tensor<double>& zp, std::size_t B, std::size_t T, double tau,
                    bool exclude_self) {
  const std::size_t P = T - 2;
  long double total = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 2; t < T; ++t) {
      const std::size_t a = b * P + (t - 2);
      long double denom = 0;
      for (std::size_t j = 0; j < B * T; ++j) denom += std::exp(dot(zp, a, zs, j) / tau);
      for (std::size_t j = 0; j < B * P; ++j)
        if (!(exclude_self && j == a)) denom += std::exp(dot(zp, a, zp, j) / tau);
      const long double pos = std::exp(dot(zp, a, zs, b * T + t) / tau);
      total += -std::log(pos / denom);
    }
  return double(total / (B * P));
}

// Per slot index k, the same enumeration restricted to slots with index k.
inline double brute_slotwise(const Tensor<double>& s, const Tensor<double>& p, std::size_t B, std::size_t T, std::size_t K,
                      double tau) {
  const std::size_t P = T - 2;
  long double total = 0;
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 2; t < T; ++t) {
        const std::size_t a = (b * P + t - 2) * K + k;
        long double denom = 0;
        for (std::size_t j = 0; j < B * T; ++j) denom += std::exp(dot(p, a, s, j * K + k) / tau);
        for (std::size_t j = 0; j < B * P; ++j) denom += std::exp(dot(p, a, p, j * K + k) / tau);
        const long double pos = std::exp(dot(p, a, s, (b * T + t) * K + k) / tau);
        total += -std::log(pos / denom);
      }
  return double(total / (K * B * P));
}

// Hubert-Arabie ARI from the four pair counts, enumerating all item pairs.
inline double pair_count_ari(const std::vector<int>& a, const std::vector<int>& b) {
  double n11 = 0, n10 = 0, n01 = 0, n00 = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = i + 1; j < a.size(); ++j) {
      const bool sa = a[i] == a[j], sb = b[i] == b[j];
      if (sa && sb) ++n11;
      else if (sa) ++n10;
      else if (sb) ++n01;
      else ++n00;
    }
  const double den = (n00 + n01) * (n01 + n11) + (n00 + n10) * (n10 + n11);
  if (den == 0) return 1.0;
  return 2.0 * (n00 * n11 - n01 * n10) / den;
}

}  // namespace oracle
