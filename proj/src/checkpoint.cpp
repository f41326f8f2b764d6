// SPDX-License-Identifier: Apache-2.0
#include "ofad/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include "ofad/errors.hpp"

namespace ofad {

namespace {

constexpr char kTag[8] = {'O', 'F', 'A', 'D', 'C', 'K', 'P', 'T'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename T>
  void le(T v) {
    static_assert(std::is_integral_v<T>);
    for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void real(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  void string(const std::string& s) {
    le(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void section(const ParamLayout& layout, const std::vector<double>& values) {
    le(static_cast<std::uint32_t>(layout.tensors().size()));
    for (const auto& t : layout.tensors()) {
      string(t.name);
      le(static_cast<std::uint64_t>(t.size()));
      for (std::size_t i = 0; i < t.size(); ++i) real(values[t.offset + i]);
    }
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  void bytes(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, in_.data() + pos_, n);
    pos_ += n;
  }
  template <typename T>
  T le() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(in_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }
  double real() { return std::bit_cast<double>(le<std::uint64_t>()); }
  std::string string() {
    const auto n = le<std::uint32_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void section(const ParamLayout& layout, std::vector<double>& values, const char* what) {
    const auto count = le<std::uint32_t>();
    if (count != layout.tensors().size()) throw ValidationError(std::string("checkpoint: bad array count in ") + what);
    values.assign(layout.size(), 0.0);
    for (const auto& t : layout.tensors()) {
      const auto name = string();
      const auto n = le<std::uint64_t>();
      if (name != t.name || n != t.size()) {
        throw ValidationError(std::string("checkpoint: array '") + name + "' does not match layout in " + what);
      }
      for (std::size_t i = 0; i < t.size(); ++i) values[t.offset + i] = real();
    }
  }
  bool at_end() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) throw ValidationError("checkpoint: truncated file");
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const ScoreNetwork& net, const OptimizerState* optimizer) {
  Writer w;
  w.bytes(kTag, sizeof(kTag));
  w.le(kCheckpointVersion);
  const std::string spec = spec_to_json(net.spec()).dump();
  w.le(static_cast<std::uint64_t>(spec.size()));
  w.bytes(spec.data(), spec.size());
  w.section(net.layout(), net.weights());
  w.section(net.layout(), net.ema_weights());
  w.le(static_cast<std::uint8_t>(optimizer != nullptr));
  if (optimizer) {
    w.le(static_cast<std::uint64_t>(optimizer->step));
    w.real(optimizer->config.learning_rate);
    w.real(optimizer->config.beta1);
    w.real(optimizer->config.beta2);
    w.real(optimizer->config.epsilon);
    w.section(net.layout(), optimizer->m);
    w.section(net.layout(), optimizer->v);
  }
  return w.take();
}

Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  char tag[8];
  r.bytes(tag, sizeof(tag));
  if (std::memcmp(tag, kTag, sizeof(tag)) != 0) throw ValidationError("checkpoint: bad format tag");
  const auto version = r.le<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw ValidationError("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto spec_len = r.le<std::uint64_t>();
  std::string spec_text(spec_len, '\0');
  r.bytes(spec_text.data(), spec_len);
  NetworkSpec spec;
  try {
    spec = spec_from_json(nlohmann::json::parse(spec_text));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint: bad spec: ") + e.what());
  }
  Checkpoint ck{ScoreNetwork(spec), std::nullopt};
  r.section(ck.net.layout(), ck.net.weights(), "weights");
  r.section(ck.net.layout(), ck.net.ema_weights(), "ema");
  if (r.le<std::uint8_t>() != 0) {
    OptimizerState st;
    st.step = r.le<std::uint64_t>();
    st.config.learning_rate = r.real();
    st.config.beta1 = r.real();
    st.config.beta2 = r.real();
    st.config.epsilon = r.real();
    r.section(ck.net.layout(), st.m, "adam.m");
    r.section(ck.net.layout(), st.v, "adam.v");
    ck.optimizer = std::move(st);
  }
  if (!r.at_end()) throw ValidationError("checkpoint: trailing bytes");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const ScoreNetwork& net, const OptimizerState* optimizer) {
  const auto bytes = serialize_checkpoint(net, optimizer);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

}  // namespace ofad
