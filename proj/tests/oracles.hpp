// SPDX-License-Identifier: Apache-2.0
#pragma once

// Reference computations used as oracles by the tests. They are written
// straight from the math and share no code paths with the library beyond the
// parameter layout.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ofad/netcore.hpp"

#if defined(__SIZEOF_FLOAT128__)
#include <quadmath.h>
#define OFAD_ORACLE_QUAD 1
#endif

namespace oracle {

// Elementary functions for every working precision the oracles use.
namespace m {
using std::cos;
using std::exp;
using std::log;
using std::pow;
using std::sin;
using std::sqrt;
using std::tanh;
#if OFAD_ORACLE_QUAD
using quad = __float128;
inline quad exp(quad x) { return expq(x); }
inline quad log(quad x) { return logq(x); }
inline quad sin(quad x) { return sinq(x); }
inline quad cos(quad x) { return cosq(x); }
inline quad sqrt(quad x) { return sqrtq(x); }
inline quad tanh(quad x) { return tanhq(x); }
inline quad pow(quad x, quad y) { return powq(x, y); }
#endif
}  // namespace m

inline const ofad::TensorSlot& slot(const ofad::ParamLayout& layout, const std::string& name) {
  for (const auto& t : layout.tensors()) {
    if (t.name == name) return t;
  }
  throw std::runtime_error("no tensor " + name);
}

template <typename T>
T act(ofad::Activation a, T x) {
  switch (a) {
    case ofad::Activation::silu: return x / (T(1) + m::exp(-x));
    case ofad::Activation::tanh: return m::tanh(x);
    case ofad::Activation::relu: return x > T(0) ? x : T(0);
  }
  return x;
}

// y = W x + b over a row-major rows x cols tensor.
template <typename T, typename P>
std::vector<T> affine(const P& p, const ofad::TensorSlot& w, const ofad::TensorSlot* b, const std::vector<T>& x) {
  std::vector<T> y(static_cast<std::size_t>(w.rows), T(0));
  for (int r = 0; r < w.rows; ++r) {
    T acc = 0;
    for (int c = 0; c < w.cols; ++c) acc += T(p[w.offset + static_cast<std::size_t>(r * w.cols + c)]) * x[static_cast<std::size_t>(c)];
    if (b) acc += T(p[b->offset + static_cast<std::size_t>(r)]);
    y[static_cast<std::size_t>(r)] = acc;
  }
  return y;
}

/// Score with removed channels handled by zeroing their activations over the
/// full width, rather than by skipping them. T sets the working precision.
/// When `signs` is set, appends whether each live activation input is positive.
template <typename T = double, typename P>
std::vector<T> score_t(const ofad::NetworkSpec& spec, const P& p, const ofad::ChannelMask& mask,
                       const std::vector<T>& x, T sigma, std::vector<bool>* signs = nullptr) {
  auto record = [&](T v) {
    if (signs) signs->push_back(v > T(0));
  };
  const ofad::ParamLayout layout(spec);
  std::vector<T> feat;
  const T cin = T(1) / m::sqrt(sigma * sigma + T(1));
  for (T v : x) feat.push_back(cin * v);
  const int half = spec.time_embed_dim / 2;
  const T c = m::log(sigma) / T(4);
  for (int k = 0; k < half; ++k) {
    const T f = half > 1 ? T(0.5) * m::pow(T(64), T(k) / T(half - 1)) : T(1);
    feat.push_back(m::sin(f * c));
    feat.push_back(m::cos(f * c));
  }
  if (spec.time_embed_dim % 2 == 1) feat.push_back(c);

  auto h = affine<T>(p, slot(layout, "stem.weight"), &slot(layout, "stem.bias"), feat);
  for (auto& v : h) {
    record(v);
    v = act<T>(spec.activation, v);
  }
  int l = 0;
  for (std::size_t b = 0; b < spec.blocks.size(); ++b) {
    for (int k = 0; k < spec.blocks[b].num_layers; ++k, ++l) {
      const std::string pre = "blocks." + std::to_string(b) + ".layers." + std::to_string(k);
      auto z = affine<T>(p, slot(layout, pre + ".in.weight"), &slot(layout, pre + ".in.bias"), h);
      std::vector<T> gate(z.size(), T(0));
      for (int ch : mask.kept[static_cast<std::size_t>(l)]) gate[static_cast<std::size_t>(ch)] = T(1);
      for (std::size_t i = 0; i < z.size(); ++i) {
        if (gate[i] != T(0)) record(z[i]);
        z[i] = act<T>(spec.activation, z[i]) * gate[i];
      }
      auto y = affine<T>(p, slot(layout, pre + ".out.weight"), &slot(layout, pre + ".out.bias"), z);
      for (std::size_t i = 0; i < y.size(); ++i) {
        record(y[i]);
        y[i] = act<T>(spec.activation, y[i]) + (y.size() == h.size() ? h[i] : T(0));
      }
      h = std::move(y);
    }
  }
  auto out = affine<T>(p, slot(layout, "head.weight"), nullptr, h);
  for (auto& v : out) v /= sigma;
  return out;
}

inline std::vector<double> score(const ofad::NetworkSpec& spec, const std::vector<double>& p,
                                 const ofad::ChannelMask& mask, const std::vector<double>& x, double sigma) {
  return score_t<double>(spec, p, mask, x, sigma);
}

/// Mean DSM loss sigma^2 ||s(x0 + sigma eps) + eps / sigma||^2 in precision T.
template <typename T, typename P>
T dsm_loss(const ofad::NetworkSpec& spec, const P& p, const ofad::ChannelMask& mask, const ofad::DsmBatch& b,
           std::vector<bool>* signs = nullptr) {
  T total = 0;
  for (std::size_t n = 0; n < b.size(); ++n) {
    const T sigma = b.sigma[n];
    std::vector<T> xt;
    for (int k = 0; k < b.dim; ++k) xt.push_back(T(b.x0_row(n)[k]) + sigma * T(b.eps_row(n)[k]));
    const auto s = score_t<T>(spec, p, mask, xt, sigma, signs);
    T acc = 0;
    for (int k = 0; k < b.dim; ++k) {
      const T r = s[k] + T(b.eps_row(n)[k]) / sigma;
      acc += r * r;
    }
    total += sigma * sigma * acc;
  }
  return total / T(b.size());
}

/// Central finite difference of `f` with respect to p[i].
template <typename F, typename T>
T central_difference(F&& f, std::vector<T>& p, std::size_t i, T h) {
  const T keep = p[i];
  p[i] = keep + h;
  const T up = f(p);
  p[i] = keep - h;
  const T down = f(p);
  p[i] = keep;
  return (up - down) / (T(2) * h);
}

/// ceil(num / den) for non-negative integers.
inline long long ceil_div(long long num, long long den) { return (num + den - 1) / den; }

}  // namespace oracle
