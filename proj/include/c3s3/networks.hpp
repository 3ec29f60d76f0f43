#pragma once

// Two small u-shaped segmentation backbones sharing one input/output
// contract: a plain encoder-decoder (backbone A) and its residual variant
// (backbone B). Each returns classifier logits, their softmax, and a
// unit-length projection map for contrastive learning.

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "c3s3/conv.hpp"
#include "c3s3/error.hpp"
#include "c3s3/rng.hpp"
#include "c3s3/tensor.hpp"

namespace c3s3 {

struct BackboneConfig {
  std::size_t in_channels = 1;
  std::size_t base_channels = 8;
  std::size_t depth = 2;
  std::size_t num_classes = 2;
  std::size_t projector_dim = 8;
  bool residual = false;

  void validate() const {
    if (base_channels < 2) throw ConfigError("base_channels must be >= 2");
    if (depth < 1) throw ConfigError("depth must be >= 1");
    if (projector_dim < 2) throw ConfigError("projector_dim must be >= 2");
    if (num_classes != 2) throw ConfigError("only two-class segmentation is supported");
    if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
  }

  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

inline void to_json(nlohmann::json& j, const BackboneConfig& c) {
  j = {{"in_channels", c.in_channels},     {"base_channels", c.base_channels}, {"depth", c.depth},
       {"num_classes", c.num_classes},     {"projector_dim", c.projector_dim}, {"residual", c.residual}};
}

inline void from_json(const nlohmann::json& j, BackboneConfig& c) {
  for (const auto& [key, _] : j.items()) {
    if (key != "in_channels" && key != "base_channels" && key != "depth" && key != "num_classes" &&
        key != "projector_dim" && key != "residual") {
      throw ConfigError("unknown backbone key '" + key + "'");
    }
  }
  c.in_channels = j.value("in_channels", c.in_channels);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.depth = j.value("depth", c.depth);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.projector_dim = j.value("projector_dim", c.projector_dim);
  c.residual = j.value("residual", c.residual);
}

struct BackboneOutput {
  Tensor logits;      // [B, num_classes, D, H, W]
  Tensor probs;       // softmax over the class axis
  Tensor projection;  // [B, projector_dim, D, H, W], unit length per voxel
};

struct Parameter {
  std::string name;
  Tensor value;
};

class Backbone {
 public:
  explicit Backbone(BackboneConfig config) : config_(config) {
    config_.validate();
    build();
  }

  const BackboneConfig& config() const { return config_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
  }

  /// Uniform(-b, b) weights with b = sqrt(6 / fan_in), zero biases.
  void init_parameters(std::uint64_t seed) {
    Rng rng(seed);
    for (auto& p : params_) {
      auto v = p.value.data();
      if (p.value.rank() == 1) {
        std::fill(v.begin(), v.end(), 0.0);
        continue;
      }
      const double fan_in = static_cast<double>(p.value.numel() / p.value.dim(0));
      const double bound = std::sqrt(6.0 / fan_in);
      for (auto& x : v) x = rng.uniform(-bound, bound);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
  }

  /// x: [B, in_channels, D, H, W] with D, H, W divisible by 2^depth.
  BackboneOutput forward(const Tensor& x) const {
    const auto d = dims5(x, "backbone forward");
    const std::size_t m = std::size_t{1} << config_.depth;
    if (d.c != config_.in_channels) {
      throw ShapeError("backbone expects " + std::to_string(config_.in_channels) + " input channels, got " +
                       shape_str(x.shape()));
    }
    if (d.d % m || d.h % m || d.w % m) {
      throw ShapeError("backbone input extents " + shape_str(x.shape()) + " must be divisible by " + std::to_string(m));
    }
    std::size_t cursor = 0;
    std::vector<Tensor> skips;
    Tensor h = block(x, cursor);
    for (std::size_t level = 1; level <= config_.depth; ++level) {
      skips.push_back(h);
      h = block(avg_pool3d(h, 2), cursor);
    }
    for (std::size_t level = config_.depth; level-- > 0;) {
      h = conv(h, cursor);  // 1^3 channel reduction at the coarse scale
      h = add(nearest_upsample3d(h, 2), skips[level]);
      h = block(h, cursor);
    }
    BackboneOutput out;
    out.logits = conv(h, cursor);
    out.probs = softmax_channel(out.logits);
    out.projection = normalize_channel(conv(h, cursor));
    return out;
  }

 private:
  struct ConvSpec {
    std::size_t weight, bias;  // indices into params_
  };

  std::size_t channels_at(std::size_t level) const { return config_.base_channels << level; }

  void add_conv(const std::string& name, std::size_t out_ch, std::size_t in_ch, std::size_t ks) {
    convs_.push_back({params_.size(), params_.size() + 1});
    params_.push_back({name + ".weight", Tensor({out_ch, in_ch, ks, ks, ks}).set_requires_grad()});
    params_.push_back({name + ".bias", Tensor({out_ch}).set_requires_grad()});
  }

  void add_block(const std::string& name, std::size_t in_ch, std::size_t out_ch) {
    add_conv(name + ".conv", out_ch, in_ch, 3);
    if (config_.residual && in_ch != out_ch) add_conv(name + ".skip", out_ch, in_ch, 1);
  }

  // Parameter order here is the checkpoint blob order.
  void build() {
    add_block("enc0", config_.in_channels, channels_at(0));
    for (std::size_t level = 1; level <= config_.depth; ++level) {
      add_block("enc" + std::to_string(level), channels_at(level - 1), channels_at(level));
    }
    for (std::size_t level = config_.depth; level-- > 0;) {
      add_conv("reduce" + std::to_string(level), channels_at(level), channels_at(level + 1), 1);
      add_block("dec" + std::to_string(level), channels_at(level), channels_at(level));
    }
    add_conv("classifier", config_.num_classes, channels_at(0), 1);
    add_conv("projector", config_.projector_dim, channels_at(0), 1);
  }

  Tensor conv(const Tensor& x, std::size_t& cursor) const {
    const auto& layer = convs_.at(cursor++);
    return conv3d(x, params_[layer.weight].value, params_[layer.bias].value);
  }

  Tensor block(const Tensor& x, std::size_t& cursor) const {
    const std::size_t in_ch = x.dim(1);
    const auto& layer = convs_.at(cursor);
    const std::size_t out_ch = params_[layer.weight].value.dim(0);
    Tensor y = relu(conv(x, cursor));
    if (!config_.residual) return y;
    Tensor skip = in_ch == out_ch ? x : conv(x, cursor);
    return add(y, skip);
  }

  BackboneConfig config_;
  std::vector<Parameter> params_;
  std::vector<ConvSpec> convs_;
};

/// Backbone A: plain u-shaped network.
inline BackboneConfig plain_config() { return BackboneConfig{}; }

/// Backbone B: the same network with residual blocks.
inline BackboneConfig residual_config() {
  BackboneConfig c;
  c.residual = true;
  return c;
}

// ---------------------------------------------------------------------------
// Raw parameter blobs: little-endian f64 in declaration order.

inline void append_f64_le(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

inline double read_f64_le(const char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<double>(bits);
}

inline void append_parameters(std::string& blob, const Backbone& net) {
  for (const auto& p : net.parameters())
    for (double v : p.value.data()) append_f64_le(blob, v);
}

/// Reads the next parameter_count() doubles from blob[offset..] into `net`.
inline std::size_t read_parameters(const std::string& blob, std::size_t offset, Backbone& net) {
  const std::size_t need = net.parameter_count() * 8;
  if (blob.size() < offset + need) throw DataError("parameter blob too short for backbone");
  for (auto& p : net.parameters()) {
    for (auto& v : p.value.data()) {
      v = read_f64_le(blob.data() + offset);
      offset += 8;
    }
  }
  return offset;
}

}  // namespace c3s3
