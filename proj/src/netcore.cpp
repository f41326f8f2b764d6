// SPDX-License-Identifier: Apache-2.0
#include "ofad/netcore.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ofad/errors.hpp"
#include "ofad/rng.hpp"

namespace ofad {

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::silu: return "silu";
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
  }
  return "silu";
}

Activation parse_activation(std::string_view name) {
  if (name == "silu") return Activation::silu;
  if (name == "tanh") return Activation::tanh;
  if (name == "relu") return Activation::relu;
  throw ValidationError("activation: unknown nonlinearity '" + std::string(name) + "'");
}

void NetworkSpec::validate() const {
  if (input_dim < 1) throw ValidationError("input_dim must be >= 1");
  if (time_embed_dim < 1) throw ValidationError("time_embed_dim must be >= 1");
  if (blocks.empty()) throw ValidationError("blocks must be non-empty");
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const auto& blk = blocks[b];
    const std::string where = "blocks[" + std::to_string(b) + "]";
    if (blk.num_layers < 1) throw ValidationError(where + ".num_layers must be >= 1");
    if (blk.width < 2) throw ValidationError(where + ".width must be >= 2");
    if (!blk.channels.empty()) {
      if (static_cast<int>(blk.channels.size()) != blk.num_layers) {
        throw ValidationError(where + ".channels must list one count per layer");
      }
      for (int c : blk.channels) {
        if (c < 1 || c > blk.width) throw ValidationError(where + ".channels entries must lie in [1, width]");
      }
    }
  }
}

int NetworkSpec::num_layers() const {
  int n = 0;
  for (const auto& b : blocks) n += b.num_layers;
  return n;
}

NetworkSpec default_spec() {
  NetworkSpec s;
  s.input_dim = 2;
  s.time_embed_dim = 16;
  s.blocks = {BlockSpec{3, 16, {}}, BlockSpec{3, 16, {}}};
  s.activation = Activation::silu;
  return s;
}

nlohmann::json spec_to_json(const NetworkSpec& spec) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : spec.blocks) {
    nlohmann::json jb = {{"layers", b.num_layers}, {"width", b.width}};
    if (!b.channels.empty()) jb["channels"] = b.channels;
    blocks.push_back(jb);
  }
  return {{"input_dim", spec.input_dim},
          {"time_embed_dim", spec.time_embed_dim},
          {"activation", std::string(to_string(spec.activation))},
          {"blocks", blocks}};
}

namespace {

void reject_unknown(const nlohmann::json& j, std::initializer_list<std::string_view> known, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
      throw ValidationError(where + ": unknown key '" + it.key() + "'");
    }
  }
}

}  // namespace

NetworkSpec spec_from_json(const nlohmann::json& j) {
  reject_unknown(j, {"input_dim", "time_embed_dim", "activation", "blocks"}, "network");
  NetworkSpec s;
  s.blocks.clear();
  try {
    s.input_dim = j.value("input_dim", s.input_dim);
    s.time_embed_dim = j.value("time_embed_dim", s.time_embed_dim);
    if (j.contains("activation")) s.activation = parse_activation(j.at("activation").get<std::string>());
    if (j.contains("blocks")) {
      for (const auto& jb : j.at("blocks")) {
        reject_unknown(jb, {"layers", "width", "channels"}, "network.blocks[]");
        BlockSpec b;
        b.num_layers = jb.at("layers").get<int>();
        b.width = jb.at("width").get<int>();
        if (jb.contains("channels")) b.channels = jb.at("channels").get<std::vector<int>>();
        s.blocks.push_back(std::move(b));
      }
    } else {
      s.blocks = default_spec().blocks;
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("network: ") + e.what());
  }
  s.validate();
  return s;
}

ParamLayout::ParamLayout(const NetworkSpec& spec) {
  spec.validate();
  auto add = [this](std::string name, int rows, int cols) {
    tensors_.push_back(TensorSlot{std::move(name), size_, rows, cols});
    size_ += tensors_.back().size();
    return tensors_.size() - 1;
  };
  const int w0 = spec.blocks.front().width;
  add("stem.weight", w0, spec.in_features());
  add("stem.bias", w0, 1);
  int stream = w0;
  for (std::size_t b = 0; b < spec.blocks.size(); ++b) {
    const auto& blk = spec.blocks[b];
    for (int k = 0; k < blk.num_layers; ++k) {
      LayerSlots ls;
      ls.info = LayerInfo{static_cast<int>(b), k, blk.layer_channels(k), stream, blk.width};
      const std::string prefix = "blocks." + std::to_string(b) + ".layers." + std::to_string(k);
      ls.in_w = add(prefix + ".in.weight", ls.info.channels, ls.info.stream_in);
      ls.in_b = add(prefix + ".in.bias", ls.info.channels, 1);
      ls.out_w = add(prefix + ".out.weight", ls.info.stream_out, ls.info.channels);
      ls.out_b = add(prefix + ".out.bias", ls.info.stream_out, 1);
      layers_.push_back(ls);
      stream = blk.width;
    }
  }
  add("head.weight", spec.input_dim, stream);
}

ChannelMask ChannelMask::full(const NetworkSpec& spec) {
  ChannelMask m;
  for (const auto& blk : spec.blocks) {
    for (int k = 0; k < blk.num_layers; ++k) {
      std::vector<int> idx(static_cast<std::size_t>(blk.layer_channels(k)));
      for (std::size_t c = 0; c < idx.size(); ++c) idx[c] = static_cast<int>(c);
      m.kept.push_back(std::move(idx));
    }
  }
  return m;
}

void ChannelMask::validate(const NetworkSpec& spec) const {
  if (static_cast<int>(kept.size()) != spec.num_layers()) {
    throw ValidationError("mask lists " + std::to_string(kept.size()) + " layers, spec has " +
                          std::to_string(spec.num_layers()));
  }
  std::size_t l = 0;
  for (const auto& blk : spec.blocks) {
    for (int k = 0; k < blk.num_layers; ++k, ++l) {
      const auto& idx = kept[l];
      const int width = blk.layer_channels(k);
      if (idx.empty()) throw ValidationError("mask layer " + std::to_string(l) + " keeps no channels");
      for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= width) {
          throw ValidationError("mask layer " + std::to_string(l) + " index out of range");
        }
        if (i > 0 && idx[i] <= idx[i - 1]) {
          throw ValidationError("mask layer " + std::to_string(l) + " indices not strictly increasing");
        }
      }
    }
  }
}

bool ChannelMask::is_full(const NetworkSpec& spec) const { return *this == full(spec); }

bool ChannelMask::subset_of(const ChannelMask& other) const {
  if (kept.size() != other.kept.size()) return false;
  for (std::size_t l = 0; l < kept.size(); ++l) {
    if (!std::includes(other.kept[l].begin(), other.kept[l].end(), kept[l].begin(), kept[l].end())) return false;
  }
  return true;
}

std::vector<std::uint8_t> param_mask(const ParamLayout& layout, const ChannelMask& mask) {
  std::vector<std::uint8_t> pm(layout.size(), 1);
  for (std::size_t l = 0; l < layout.layers().size(); ++l) {
    const auto& ls = layout.layers()[l];
    const auto& in_w = layout.tensor(ls.in_w);
    const auto& in_b = layout.tensor(ls.in_b);
    const auto& out_w = layout.tensor(ls.out_w);
    std::vector<std::uint8_t> keep(static_cast<std::size_t>(ls.info.channels), 0);
    for (int c : mask.kept[l]) keep[static_cast<std::size_t>(c)] = 1;
    for (int c = 0; c < ls.info.channels; ++c) {
      if (keep[static_cast<std::size_t>(c)]) continue;
      for (int j = 0; j < in_w.cols; ++j) pm[in_w.offset + static_cast<std::size_t>(c * in_w.cols + j)] = 0;
      pm[in_b.offset + static_cast<std::size_t>(c)] = 0;
      for (int i = 0; i < out_w.rows; ++i) pm[out_w.offset + static_cast<std::size_t>(i * out_w.cols + c)] = 0;
    }
  }
  return pm;
}

ScoreNetwork::ScoreNetwork(NetworkSpec spec)
    : spec_(std::move(spec)), layout_(spec_), weights_(layout_.size(), 0.0), ema_(layout_.size(), 0.0) {}

ScoreNetwork build_network(const NetworkSpec& spec, std::uint64_t seed) {
  ScoreNetwork net(spec);
  Rng rng(seed);
  auto& w = net.weights();
  for (const auto& t : net.layout().tensors()) {
    if (t.cols == 1 && t.name.ends_with(".bias")) continue;
    const double bound = 1.0 / std::sqrt(static_cast<double>(t.cols));
    for (std::size_t i = 0; i < t.size(); ++i) w[t.offset + i] = rng.uniform(-bound, bound);
  }
  net.ema_weights() = w;
  return net;
}

double input_scale(double sigma) { return 1.0 / std::sqrt(sigma * sigma + 1.0); }

void time_embedding(double sigma, std::span<double> out) {
  const double c = std::log(sigma) / 4.0;
  const std::size_t half = out.size() / 2;
  const double lo = std::log(0.5);
  const double hi = std::log(32.0);
  for (std::size_t k = 0; k < half; ++k) {
    const double f = half > 1 ? std::exp(lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(half - 1))
                              : 1.0;
    out[2 * k] = std::sin(f * c);
    out[2 * k + 1] = std::cos(f * c);
  }
  if (out.size() % 2 == 1) out[out.size() - 1] = c;
}

namespace {

inline double activate(Activation a, double x) {
  switch (a) {
    case Activation::silu: return x / (1.0 + std::exp(-x));
    case Activation::tanh: return std::tanh(x);
    case Activation::relu: return x > 0.0 ? x : 0.0;
  }
  return x;
}

// Derivative given the pre-activation x and the activation value y.
inline double activate_grad(Activation a, double x, double y) {
  switch (a) {
    case Activation::silu: {
      const double s = 1.0 / (1.0 + std::exp(-x));
      return s + y * (1.0 - s);
    }
    case Activation::tanh: return 1.0 - y * y;
    case Activation::relu: return x > 0.0 ? 1.0 : 0.0;
  }
  return 1.0;
}

struct LayerTrace {
  std::vector<double> u, z, v, a, h;  // u,z over kept channels only; h = a + skip
};

struct Trace {
  std::vector<double> feat, stem_pre, stem_h;
  std::vector<LayerTrace> layers;
  std::vector<double> out;  // head output before the 1/sigma scaling
};

void run_forward(const NetworkSpec& spec, const ParamLayout& layout, const double* p, const ChannelMask& mask,
                 std::span<const double> x, double sigma, Trace& tr) {
  const auto act = spec.activation;
  const int d = spec.input_dim;
  tr.feat.resize(static_cast<std::size_t>(spec.in_features()));
  const double cin = input_scale(sigma);
  for (int i = 0; i < d; ++i) tr.feat[static_cast<std::size_t>(i)] = cin * x[static_cast<std::size_t>(i)];
  time_embedding(sigma, std::span<double>(tr.feat).subspan(static_cast<std::size_t>(d)));

  const auto& sw = layout.stem_w();
  const auto& sb = layout.stem_b();
  tr.stem_pre.resize(static_cast<std::size_t>(sw.rows));
  tr.stem_h.resize(static_cast<std::size_t>(sw.rows));
  for (int r = 0; r < sw.rows; ++r) {
    const double* row = p + sw.offset + static_cast<std::size_t>(r * sw.cols);
    double acc = 0.0;
    for (int j = 0; j < sw.cols; ++j) acc += row[j] * tr.feat[static_cast<std::size_t>(j)];
    acc += p[sb.offset + static_cast<std::size_t>(r)];
    tr.stem_pre[static_cast<std::size_t>(r)] = acc;
    tr.stem_h[static_cast<std::size_t>(r)] = activate(act, acc);
  }

  tr.layers.resize(layout.layers().size());
  const std::vector<double>* h = &tr.stem_h;
  for (std::size_t l = 0; l < layout.layers().size(); ++l) {
    const auto& ls = layout.layers()[l];
    const auto& in_w = layout.tensor(ls.in_w);
    const auto& in_b = layout.tensor(ls.in_b);
    const auto& out_w = layout.tensor(ls.out_w);
    const auto& out_b = layout.tensor(ls.out_b);
    const auto& kept = mask.kept[l];
    auto& lt = tr.layers[l];
    lt.u.resize(kept.size());
    lt.z.resize(kept.size());
    for (std::size_t k = 0; k < kept.size(); ++k) {
      const int c = kept[k];
      const double* row = p + in_w.offset + static_cast<std::size_t>(c * in_w.cols);
      double acc = 0.0;
      for (int j = 0; j < in_w.cols; ++j) acc += row[j] * (*h)[static_cast<std::size_t>(j)];
      acc += p[in_b.offset + static_cast<std::size_t>(c)];
      lt.u[k] = acc;
      lt.z[k] = activate(act, acc);
    }
    const bool skip = ls.info.stream_in == ls.info.stream_out;
    lt.v.resize(static_cast<std::size_t>(out_w.rows));
    lt.a.resize(static_cast<std::size_t>(out_w.rows));
    lt.h.resize(static_cast<std::size_t>(out_w.rows));
    for (int i = 0; i < out_w.rows; ++i) {
      const double* row = p + out_w.offset + static_cast<std::size_t>(i * out_w.cols);
      double acc = 0.0;
      for (std::size_t k = 0; k < kept.size(); ++k) acc += row[kept[k]] * lt.z[k];
      acc += p[out_b.offset + static_cast<std::size_t>(i)];
      const auto si = static_cast<std::size_t>(i);
      lt.v[si] = acc;
      lt.a[si] = activate(act, acc);
      lt.h[si] = skip ? lt.a[si] + (*h)[si] : lt.a[si];
    }
    h = &lt.h;
  }

  const auto& hw = layout.head_w();
  tr.out.resize(static_cast<std::size_t>(hw.rows));
  for (int r = 0; r < hw.rows; ++r) {
    const double* row = p + hw.offset + static_cast<std::size_t>(r * hw.cols);
    double acc = 0.0;
    for (int j = 0; j < hw.cols; ++j) acc += row[j] * (*h)[static_cast<std::size_t>(j)];
    tr.out[static_cast<std::size_t>(r)] = acc;
  }
}

// Accumulates into `g` the gradient of sum_k dout[k] * out[k].
void run_backward(const NetworkSpec& spec, const ParamLayout& layout, const double* p, const ChannelMask& mask,
                  const Trace& tr, std::span<const double> dout, double* g, std::vector<double>& dh,
                  std::vector<double>& dprev) {
  const auto act = spec.activation;
  const std::size_t nl = layout.layers().size();
  const std::vector<double>& h_last = nl > 0 ? tr.layers.back().h : tr.stem_h;

  const auto& hw = layout.head_w();
  dh.assign(static_cast<std::size_t>(hw.cols), 0.0);
  for (int r = 0; r < hw.rows; ++r) {
    const double go = dout[static_cast<std::size_t>(r)];
    const double* row = p + hw.offset + static_cast<std::size_t>(r * hw.cols);
    double* grow = g + hw.offset + static_cast<std::size_t>(r * hw.cols);
    for (int j = 0; j < hw.cols; ++j) {
      grow[j] += go * h_last[static_cast<std::size_t>(j)];
      dh[static_cast<std::size_t>(j)] += row[j] * go;
    }
  }

  std::vector<double> du, dskip;
  for (std::size_t li = nl; li-- > 0;) {
    const auto& ls = layout.layers()[li];
    const auto& in_w = layout.tensor(ls.in_w);
    const auto& in_b = layout.tensor(ls.in_b);
    const auto& out_w = layout.tensor(ls.out_w);
    const auto& out_b = layout.tensor(ls.out_b);
    const auto& kept = mask.kept[li];
    const auto& lt = tr.layers[li];
    const std::vector<double>& h_in = li > 0 ? tr.layers[li - 1].h : tr.stem_h;

    const bool skip = ls.info.stream_in == ls.info.stream_out;
    if (skip) dskip = dh;
    // dh currently holds dL/dh (layer output); convert to dL/dv in place.
    for (std::size_t i = 0; i < dh.size(); ++i) dh[i] *= activate_grad(act, lt.v[i], lt.a[i]);
    du.assign(kept.size(), 0.0);
    for (int i = 0; i < out_w.rows; ++i) {
      const double dv = dh[static_cast<std::size_t>(i)];
      g[out_b.offset + static_cast<std::size_t>(i)] += dv;
      const double* row = p + out_w.offset + static_cast<std::size_t>(i * out_w.cols);
      double* grow = g + out_w.offset + static_cast<std::size_t>(i * out_w.cols);
      for (std::size_t k = 0; k < kept.size(); ++k) {
        grow[kept[k]] += dv * lt.z[k];
        du[k] += row[kept[k]] * dv;
      }
    }
    dprev.assign(static_cast<std::size_t>(in_w.cols), 0.0);
    for (std::size_t k = 0; k < kept.size(); ++k) {
      const int c = kept[k];
      const double duk = du[k] * activate_grad(act, lt.u[k], lt.z[k]);
      g[in_b.offset + static_cast<std::size_t>(c)] += duk;
      const double* row = p + in_w.offset + static_cast<std::size_t>(c * in_w.cols);
      double* grow = g + in_w.offset + static_cast<std::size_t>(c * in_w.cols);
      for (int j = 0; j < in_w.cols; ++j) {
        grow[j] += duk * h_in[static_cast<std::size_t>(j)];
        dprev[static_cast<std::size_t>(j)] += row[j] * duk;
      }
    }
    if (skip) {
      for (std::size_t j = 0; j < dprev.size(); ++j) dprev[j] += dskip[j];
    }
    std::swap(dh, dprev);
  }

  const auto& sw = layout.stem_w();
  const auto& sb = layout.stem_b();
  for (int r = 0; r < sw.rows; ++r) {
    const double da = dh[static_cast<std::size_t>(r)] *
                      activate_grad(act, tr.stem_pre[static_cast<std::size_t>(r)], tr.stem_h[static_cast<std::size_t>(r)]);
    g[sb.offset + static_cast<std::size_t>(r)] += da;
    double* grow = g + sw.offset + static_cast<std::size_t>(r * sw.cols);
    for (int j = 0; j < sw.cols; ++j) grow[j] += da * tr.feat[static_cast<std::size_t>(j)];
  }
}

void check_sigma(double sigma) {
  if (!(sigma > 0.0)) throw DomainError("noise level sigma must be > 0");
}

}  // namespace

void forward_into(const NetworkSpec& spec, const ParamLayout& layout, std::span<const double> params,
                  const ChannelMask& mask, std::span<const double> x, double sigma, std::span<double> out) {
  check_sigma(sigma);
  if (x.size() != static_cast<std::size_t>(spec.input_dim) || out.size() != x.size()) {
    throw ValidationError("input dimension does not match spec.input_dim");
  }
  thread_local Trace tr;
  run_forward(spec, layout, params.data(), mask, x, sigma, tr);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = tr.out[i] / sigma;
}

std::vector<double> forward(const ScoreNetwork& net, const ChannelMask& mask, std::span<const double> x, double sigma,
                            WeightSet set) {
  mask.validate(net.spec());
  std::vector<double> out(static_cast<std::size_t>(net.spec().input_dim));
  forward_into(net.spec(), net.layout(), net.params(set), mask, x, sigma, out);
  return out;
}

double dsm_loss(std::span<const double> score, std::span<const double> eps, double sigma) {
  double acc = 0.0;
  for (std::size_t k = 0; k < score.size(); ++k) {
    const double diff = score[k] + eps[k] / sigma;
    acc += diff * diff;
  }
  return dsm_weight(sigma) * acc;
}

namespace {

void check_batch(const NetworkSpec& spec, const DsmBatch& batch) {
  if (batch.size() == 0) throw ValidationError("batch must be non-empty");
  if (batch.dim != spec.input_dim || batch.x0.size() != batch.size() * static_cast<std::size_t>(batch.dim) ||
      batch.eps.size() != batch.x0.size()) {
    throw ValidationError("batch shape does not match spec.input_dim");
  }
  for (std::size_t n = 0; n < batch.size(); ++n) {
    if (!(batch.sigma[n] > 0.0)) throw DomainError("batch sigma must be > 0");
  }
}

}  // namespace

LossGrad loss_and_gradients(const ScoreNetwork& net, const ChannelMask& mask, const DsmBatch& batch, WeightSet set) {
  const auto& spec = net.spec();
  const auto& layout = net.layout();
  mask.validate(spec);
  check_batch(spec, batch);
  const double* p = net.params(set).data();

  LossGrad res;
  res.grads.assign(layout.size(), 0.0);
  Trace tr;
  std::vector<double> xt(static_cast<std::size_t>(batch.dim)), dout(static_cast<std::size_t>(batch.dim));
  std::vector<double> dh, dprev, score(static_cast<std::size_t>(batch.dim));
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const double sigma = batch.sigma[n];
    auto x0 = batch.x0_row(n);
    auto eps = batch.eps_row(n);
    for (int k = 0; k < batch.dim; ++k) xt[static_cast<std::size_t>(k)] = x0[static_cast<std::size_t>(k)] + sigma * eps[static_cast<std::size_t>(k)];
    run_forward(spec, layout, p, mask, xt, sigma, tr);
    for (std::size_t k = 0; k < score.size(); ++k) score[k] = tr.out[k] / sigma;
    const double ln = dsm_loss(score, eps, sigma);
    if (!std::isfinite(ln)) throw NumericError("non-finite DSM loss", static_cast<std::ptrdiff_t>(n));
    res.loss += ln * inv_n;
    const double lam = dsm_weight(sigma);
    for (std::size_t k = 0; k < score.size(); ++k) {
      dout[k] = 2.0 * lam * (score[k] + eps[k] / sigma) / sigma * inv_n;
    }
    run_backward(spec, layout, p, mask, tr, dout, res.grads.data(), dh, dprev);
  }
  return res;
}

double loss_only(const NetworkSpec& spec, const ParamLayout& layout, std::span<const double> params,
                 const ChannelMask& mask, const DsmBatch& batch) {
  check_batch(spec, batch);
  Trace tr;
  std::vector<double> xt(static_cast<std::size_t>(batch.dim)), score(static_cast<std::size_t>(batch.dim));
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  double loss = 0.0;
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const double sigma = batch.sigma[n];
    auto x0 = batch.x0_row(n);
    auto eps = batch.eps_row(n);
    for (int k = 0; k < batch.dim; ++k) xt[static_cast<std::size_t>(k)] = x0[static_cast<std::size_t>(k)] + sigma * eps[static_cast<std::size_t>(k)];
    run_forward(spec, layout, params.data(), mask, xt, sigma, tr);
    for (std::size_t k = 0; k < score.size(); ++k) score[k] = tr.out[k] / sigma;
    const double ln = dsm_loss(score, eps, sigma);
    if (!std::isfinite(ln)) throw NumericError("non-finite DSM loss", static_cast<std::ptrdiff_t>(n));
    loss += ln * inv_n;
  }
  return loss;
}

OptimizerState OptimizerState::for_network(const ScoreNetwork& net, AdamConfig config) {
  OptimizerState s;
  s.m.assign(net.layout().size(), 0.0);
  s.v.assign(net.layout().size(), 0.0);
  s.config = config;
  return s;
}

void apply_update(ScoreNetwork& net, OptimizerState& state, std::span<const double> grads,
                  std::span<const std::uint8_t> trainable) {
  auto& w = net.weights();
  if (grads.size() != w.size() || state.m.size() != w.size() || state.v.size() != w.size() ||
      (!trainable.empty() && trainable.size() != w.size())) {
    throw ValidationError("optimizer/gradient shapes do not match the network");
  }
  state.step += 1;
  const auto& c = state.config;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (!trainable.empty() && !trainable[i]) continue;
    const double g = grads[i];
    state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * g;
    state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * g * g;
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    w[i] -= c.learning_rate * mhat / (std::sqrt(vhat) + c.epsilon);
  }
}

void ema_update(ScoreNetwork& net, double decay) {
  if (!(decay >= 0.0 && decay < 1.0)) throw DomainError("EMA decay must lie in [0, 1)");
  auto& e = net.ema_weights();
  const auto& w = net.weights();
  for (std::size_t i = 0; i < w.size(); ++i) e[i] = decay * e[i] + (1.0 - decay) * w[i];
}

std::vector<std::pair<LayerParamCount, LayerParamCount>> layer_param_counts(const NetworkSpec& spec,
                                                                            const ChannelMask& mask) {
  mask.validate(spec);
  ParamLayout layout(spec);
  std::vector<std::pair<LayerParamCount, LayerParamCount>> out;
  for (std::size_t l = 0; l < layout.layers().size(); ++l) {
    const auto& info = layout.layers()[l].info;
    auto count = [&](long long c) {
      return LayerParamCount{c * info.stream_in, c, info.stream_out * c, info.stream_out};
    };
    out.emplace_back(count(static_cast<long long>(mask.kept[l].size())), count(info.channels));
  }
  return out;
}

ParamCount count_params(const NetworkSpec& spec, const ChannelMask& mask) {
  ParamCount pc;
  for (const auto& [kept, total] : layer_param_counts(spec, mask)) {
    pc.kept += kept.total();
    pc.total += total.total();
  }
  return pc;
}

long long count_fixed_params(const NetworkSpec& spec) {
  ParamLayout layout(spec);
  return static_cast<long long>(layout.stem_w().size() + layout.stem_b().size() + layout.head_w().size());
}

long long count_macs(const NetworkSpec& spec, const ChannelMask& mask) {
  mask.validate(spec);
  ParamLayout layout(spec);
  long long macs = static_cast<long long>(layout.stem_w().size()) + static_cast<long long>(layout.head_w().size());
  for (std::size_t l = 0; l < layout.layers().size(); ++l) {
    const auto& info = layout.layers()[l].info;
    const auto c = static_cast<long long>(mask.kept[l].size());
    macs += c * info.stream_in + info.stream_out * c;
  }
  return macs;
}

}  // namespace ofad
