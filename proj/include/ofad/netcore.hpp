// SPDX-License-Identifier: Apache-2.0
#pragma once

// Layered masked score network.
//
// Topology (all dense, 64-bit):
//
//   features = [ c_in(sigma) * x , sinusoidal(log sigma) ]
//   h        = act(stem.W * features + stem.b)                 width = block[0].width
//   for each layer (grouped into blocks):
//     z      = act(in.W * h + in.b)                            |l| hidden channels
//     h      = act(out.W * z + out.b) [+ h when widths match]  width = block width
//   score    = (head.W * h) / sigma                            bias-free
//
// The prunable unit is a layer's hidden channel. Removing channel c of a layer
// removes row c of in.W, entry c of in.b and column c of out.W. Stem, head and
// out.b are never pruned. A ChannelMask lists the kept channels per layer.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace ofad {

enum class Activation { silu, tanh, relu };

std::string_view to_string(Activation a);
Activation parse_activation(std::string_view name);

struct BlockSpec {
  int num_layers = 1;
  /// Stream width of the block and default channel count of its layers.
  int width = 2;
  /// Optional per-layer channel counts (extracted subnetworks); empty means `width`.
  std::vector<int> channels;

  int layer_channels(int k) const { return channels.empty() ? width : channels[static_cast<std::size_t>(k)]; }
  bool operator==(const BlockSpec&) const = default;
};

struct NetworkSpec {
  int input_dim = 2;
  int time_embed_dim = 16;
  std::vector<BlockSpec> blocks;
  Activation activation = Activation::silu;

  /// Throws ValidationError naming the violated field.
  void validate() const;

  int num_layers() const;
  int in_features() const { return input_dim + time_embed_dim; }
  bool operator==(const NetworkSpec&) const = default;
};

/// Default toy network: 2 blocks x 3 layers x 16 channels on 2-D data.
NetworkSpec default_spec();

nlohmann::json spec_to_json(const NetworkSpec& spec);
NetworkSpec spec_from_json(const nlohmann::json& j);

/// Position of one prunable layer inside the network.
struct LayerInfo {
  int block = 0;
  int index = 0;      // layer index within the block
  int channels = 0;   // |l|
  int stream_in = 0;  // width of the representation entering the layer
  int stream_out = 0;
};

struct TensorSlot {
  std::string name;
  std::size_t offset = 0;
  int rows = 0;
  int cols = 1;
  std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
};

/// Offsets of every tensor in the flat parameter vector, in declaration order.
class ParamLayout {
 public:
  struct LayerSlots {
    LayerInfo info;
    std::size_t in_w = 0, in_b = 0, out_w = 0, out_b = 0;  // indices into tensors()
  };

  explicit ParamLayout(const NetworkSpec& spec);

  const std::vector<TensorSlot>& tensors() const { return tensors_; }
  const std::vector<LayerSlots>& layers() const { return layers_; }
  const TensorSlot& tensor(std::size_t i) const { return tensors_[i]; }
  const TensorSlot& stem_w() const { return tensors_[0]; }
  const TensorSlot& stem_b() const { return tensors_[1]; }
  const TensorSlot& head_w() const { return tensors_.back(); }
  std::size_t size() const { return size_; }

 private:
  std::vector<TensorSlot> tensors_;
  std::vector<LayerSlots> layers_;
  std::size_t size_ = 0;
};

/// Per-layer sorted kept channel indices.
struct ChannelMask {
  std::vector<std::vector<int>> kept;

  static ChannelMask full(const NetworkSpec& spec);

  /// Throws ValidationError unless indices are strictly increasing, in range
  /// and every layer keeps at least one channel.
  void validate(const NetworkSpec& spec) const;
  bool is_full(const NetworkSpec& spec) const;
  /// Layerwise inclusion.
  bool subset_of(const ChannelMask& other) const;
  bool operator==(const ChannelMask&) const = default;
};

/// Flat 0/1 vector over parameters: 1 where the parameter survives `mask`.
std::vector<std::uint8_t> param_mask(const ParamLayout& layout, const ChannelMask& mask);

enum class WeightSet { live, ema };

class ScoreNetwork {
 public:
  /// All-zero weights.
  explicit ScoreNetwork(NetworkSpec spec);

  const NetworkSpec& spec() const { return spec_; }
  const ParamLayout& layout() const { return layout_; }

  std::vector<double>& weights() { return weights_; }
  const std::vector<double>& weights() const { return weights_; }
  std::vector<double>& ema_weights() { return ema_; }
  const std::vector<double>& ema_weights() const { return ema_; }
  const std::vector<double>& params(WeightSet set) const { return set == WeightSet::live ? weights_ : ema_; }

  std::span<double> tensor(std::size_t i) { return {weights_.data() + layout_.tensor(i).offset, layout_.tensor(i).size()}; }
  std::span<const double> tensor(std::size_t i) const {
    return {weights_.data() + layout_.tensor(i).offset, layout_.tensor(i).size()};
  }

  /// Replace live weights with the EMA weights.
  void promote_ema() { weights_ = ema_; }

 private:
  NetworkSpec spec_;
  ParamLayout layout_;
  std::vector<double> weights_;
  std::vector<double> ema_;
};

/// Scaled-uniform fan-in initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
/// biases zero. EMA starts as a copy.
ScoreNetwork build_network(const NetworkSpec& spec, std::uint64_t seed);

/// Input preconditioning c_in(sigma) = 1/sqrt(sigma^2 + 1).
double input_scale(double sigma);

/// Fixed sinusoidal embedding of log(sigma)/4.
void time_embedding(double sigma, std::span<double> out);

/// Score estimate s(x, sigma) with only the channels in `mask` active.
std::vector<double> forward(const ScoreNetwork& net, const ChannelMask& mask, std::span<const double> x, double sigma,
                            WeightSet set = WeightSet::live);

/// Same as above on an explicit parameter vector laid out per `net.layout()`.
void forward_into(const NetworkSpec& spec, const ParamLayout& layout, std::span<const double> params,
                  const ChannelMask& mask, std::span<const double> x, double sigma, std::span<double> out);

/// Denoising-score-matching loss weight lambda(sigma) = sigma^2.
inline double dsm_weight(double sigma) { return sigma * sigma; }

/// Per-sample DSM loss lambda(sigma) * ||score + eps/sigma||^2.
double dsm_loss(std::span<const double> score, std::span<const double> eps, double sigma);

/// Structure-of-arrays training batch; x0 and eps are row-major n x dim.
struct DsmBatch {
  int dim = 0;
  std::vector<double> x0;
  std::vector<double> eps;
  std::vector<double> sigma;

  std::size_t size() const { return sigma.size(); }
  std::span<const double> x0_row(std::size_t i) const { return {x0.data() + i * dim, static_cast<std::size_t>(dim)}; }
  std::span<const double> eps_row(std::size_t i) const { return {eps.data() + i * dim, static_cast<std::size_t>(dim)}; }
};

struct LossGrad {
  double loss = 0.0;
  std::vector<double> grads;
};

/// Mean DSM loss over the batch and its exact reverse-mode gradient. Gradients
/// of parameters removed by `mask` are exactly zero.
LossGrad loss_and_gradients(const ScoreNetwork& net, const ChannelMask& mask, const DsmBatch& batch,
                            WeightSet set = WeightSet::live);

/// Mean DSM loss only.
double loss_only(const NetworkSpec& spec, const ParamLayout& layout, std::span<const double> params,
                 const ChannelMask& mask, const DsmBatch& batch);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  bool operator==(const AdamConfig&) const = default;
};

struct OptimizerState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
  AdamConfig config;

  static OptimizerState for_network(const ScoreNetwork& net, AdamConfig config = {});
  bool operator==(const OptimizerState&) const = default;
};

/// Adam with bias correction. Entries where `trainable` is 0 keep their
/// weights and moments untouched; an empty `trainable` means every entry.
void apply_update(ScoreNetwork& net, OptimizerState& state, std::span<const double> grads,
                  std::span<const std::uint8_t> trainable = {});

/// ema <- decay * ema + (1 - decay) * weights. decay must lie in [0, 1).
void ema_update(ScoreNetwork& net, double decay);

struct LayerParamCount {
  long long in_weights = 0;
  long long in_bias = 0;
  long long out_weights = 0;
  long long out_bias = 0;
  long long total() const { return in_weights + in_bias + out_weights + out_bias; }
};

struct ParamCount {
  long long kept = 0;
  long long total = 0;
  double ratio() const { return static_cast<double>(kept) / static_cast<double>(total); }
};

/// Kept and original parameter counts of each prunable layer.
std::vector<std::pair<LayerParamCount, LayerParamCount>> layer_param_counts(const NetworkSpec& spec,
                                                                            const ChannelMask& mask);

/// Parameter counts over the compressible layers (stem and head excluded).
ParamCount count_params(const NetworkSpec& spec, const ChannelMask& mask);

/// Stem + head parameters; never pruned.
long long count_fixed_params(const NetworkSpec& spec);

/// Multiply-accumulates of one forward pass at batch size 1.
long long count_macs(const NetworkSpec& spec, const ChannelMask& mask);

}  // namespace ofad
