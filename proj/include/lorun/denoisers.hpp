#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "lorun/autodiff.hpp"
#include "lorun/lora.hpp"
#include "lorun/random.hpp"

namespace lorun {

enum class Arch { UNet, Transformer, SoftThreshold };

inline const char* to_string(Arch a) {
  switch (a) {
    case Arch::UNet: return "unet";
    case Arch::Transformer: return "transformer";
    case Arch::SoftThreshold: return "soft_threshold";
  }
  return "?";
}

/// Architecture of the proximal-mapping network. The configuration alone
/// determines every weight name and shape.
struct DenoiserConfig {
  Arch arch = Arch::UNet;
  Index image_channels = 1;
  Index base_channels = 8;
  int depth = 2;  // U-Net: resolution levels; Transformer: number of blocks
  Index heads = 2;

  void validate() const {
    if (image_channels < 1) throw ContractError("denoiser: image_channels must be >= 1");
    if (arch == Arch::SoftThreshold) return;
    if (depth < 1) throw ContractError("denoiser: depth must be >= 1");
    if (base_channels < 4) throw ContractError("denoiser: base_channels must be >= 4");
    if (arch == Arch::Transformer && (heads < 1 || base_channels % heads))
      throw ContractError("denoiser: heads must divide base_channels");
  }

  /// Spatial extents must be divisible by this.
  Index spatial_multiple() const {
    switch (arch) {
      case Arch::UNet: return Index{1} << depth;
      case Arch::Transformer: return 2;
      case Arch::SoftThreshold: return 1;
    }
    return 1;
  }

  std::string canonical() const {
    return std::string("arch=") + to_string(arch) + ";channels=" + std::to_string(image_channels) +
           ";base=" + std::to_string(base_channels) + ";depth=" + std::to_string(depth) +
           ";heads=" + std::to_string(heads);
  }
};

/// Every tensor the denoiser reads, in a fixed order.
inline std::vector<WeightSpec> weight_specs(const DenoiserConfig& cfg) {
  cfg.validate();
  std::vector<WeightSpec> specs;
  auto conv = [&](const std::string& name, Index co, Index ci, Index k) {
    specs.push_back({name + ".weight", {co, ci, k, k}, WeightKind::Conv});
    specs.push_back({name + ".bias", {co}, WeightKind::Bias});
  };
  auto linear = [&](const std::string& name, Index out, Index in, bool bias) {
    specs.push_back({name + ".weight", {out, in}, WeightKind::Linear});
    if (bias) specs.push_back({name + ".bias", {out}, WeightKind::Bias});
  };
  auto norm = [&](const std::string& name, Index c) {
    specs.push_back({name + ".gain", {c}, WeightKind::Gain});
    specs.push_back({name + ".bias", {c}, WeightKind::Bias});
  };
  const Index in_ch = cfg.image_channels + 1;
  const Index c = cfg.base_channels;
  switch (cfg.arch) {
    case Arch::SoftThreshold:
      break;
    case Arch::UNet: {
      Index prev = in_ch;
      for (int l = 0; l < cfg.depth; ++l) {
        const Index cl = c << l;
        conv("enc" + std::to_string(l) + ".conv1", cl, prev, 3);
        conv("enc" + std::to_string(l) + ".conv2", cl, cl, 3);
        prev = cl;
      }
      const Index cm = c << cfg.depth;
      conv("mid.conv1", cm, prev, 3);
      conv("mid.conv2", cm, cm, 3);
      for (int l = cfg.depth - 1; l >= 0; --l) {
        const Index cl = c << l;
        conv("up" + std::to_string(l) + ".conv", cl, cl * 2, 3);
        conv("dec" + std::to_string(l) + ".conv1", cl, cl * 2, 3);
        conv("dec" + std::to_string(l) + ".conv2", cl, cl, 3);
      }
      conv("out", cfg.image_channels, c, 1);
      break;
    }
    case Arch::Transformer: {
      conv("embed", c, in_ch, 3);
      for (int b = 0; b < cfg.depth; ++b) {
        const std::string p = "blk" + std::to_string(b);
        norm(p + ".norm1", c);
        linear(p + ".attn.q", c, c, false);
        linear(p + ".attn.k", c, c, false);
        linear(p + ".attn.v", c, c, false);
        linear(p + ".attn.proj", c, c, true);
        norm(p + ".norm2", c);
        linear(p + ".ffn.fc1", 2 * c, c, true);
        linear(p + ".ffn.fc2", c, 2 * c, true);
      }
      conv("out", cfg.image_channels, c, 3);
      break;
    }
  }
  return specs;
}

/// PyTorch-style default initialization: weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
/// norm gains 1 and norm biases 0.
template <typename Scalar>
std::map<std::string, Tensor<Scalar>> init_weights(const DenoiserConfig& cfg, std::uint64_t seed) {
  std::map<std::string, Tensor<Scalar>> weights;
  const auto specs = weight_specs(cfg);
  Index fan_in = 1;
  bool after_norm_gain = false;
  for (const auto& s : specs) {
    CounterRng rng(derive_seed(seed, s.name));
    switch (s.kind) {
      case WeightKind::Conv:
      case WeightKind::Linear: {
        fan_in = shape_size(s.shape) / s.shape[0];
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        weights.emplace(s.name, random_uniform<Scalar>(s.shape, rng, -bound, bound));
        after_norm_gain = false;
        break;
      }
      case WeightKind::Bias: {
        if (after_norm_gain) {
          weights.emplace(s.name, Tensor<Scalar>::zeros(s.shape));
        } else {
          const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
          weights.emplace(s.name, random_uniform<Scalar>(s.shape, rng, -bound, bound));
        }
        after_norm_gain = false;
        break;
      }
      case WeightKind::Gain:
        weights.emplace(s.name, Tensor<Scalar>::constant(s.shape, Scalar(1)));
        after_norm_gain = true;
        break;
    }
  }
  return weights;
}

/// Resolves a weight name to the tensor the forward pass should use
/// (plain, adapter-augmented or per-stage).
template <typename Scalar>
using WeightFn = std::function<Var<Scalar>(const std::string&)>;

namespace detail {

template <typename Scalar>
Var<Scalar> conv_layer(const WeightFn<Scalar>& w, const std::string& name, Var<Scalar> x) {
  return add_bias(conv2d(x, w(name + ".weight")), w(name + ".bias"), 0);
}

template <typename Scalar>
Var<Scalar> double_conv(const WeightFn<Scalar>& w, const std::string& name, Var<Scalar> x) {
  x = relu(conv_layer(w, name + ".conv1", x));
  return relu(conv_layer(w, name + ".conv2", x));
}

/// Tokens are rows: x is N x in, the weight is out x in.
template <typename Scalar>
Var<Scalar> linear_layer(const WeightFn<Scalar>& w, const std::string& name, Var<Scalar> x, bool bias) {
  Var<Scalar> y = matmul(x, transpose(w(name + ".weight")));
  return bias ? add_bias(y, w(name + ".bias"), 1) : y;
}

template <typename Scalar>
Var<Scalar> norm_layer(const WeightFn<Scalar>& w, const std::string& name, Var<Scalar> x) {
  return add_bias(mul_bias(layer_norm(x, 1, Scalar(1e-5)), w(name + ".gain"), 1), w(name + ".bias"), 1);
}

template <typename Scalar>
Var<Scalar> attention(const WeightFn<Scalar>& w, const std::string& name, Var<Scalar> x, Index heads) {
  const Index c = x.shape()[1], dh = c / heads;
  Var<Scalar> q = linear_layer(w, name + ".q", x, false);
  Var<Scalar> k = linear_layer(w, name + ".k", x, false);
  Var<Scalar> v = linear_layer(w, name + ".v", x, false);
  const Scalar inv = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  std::vector<Var<Scalar>> outs;
  for (Index h = 0; h < heads; ++h) {
    Var<Scalar> qh = slice(q, 1, h * dh, dh), kh = slice(k, 1, h * dh, dh), vh = slice(v, 1, h * dh, dh);
    Var<Scalar> attn = softmax(scale(matmul(qh, transpose(kh)), inv), 1);
    outs.push_back(matmul(attn, vh));
  }
  Var<Scalar> merged = heads == 1 ? outs.front() : concat(outs, 1);
  return linear_layer(w, name + ".proj", merged, true);
}

template <typename Scalar>
Var<Scalar> unet_forward(const DenoiserConfig& cfg, const WeightFn<Scalar>& w, Var<Scalar> input) {
  std::vector<Var<Scalar>> skips;
  Var<Scalar> x = input;
  for (int l = 0; l < cfg.depth; ++l) {
    x = double_conv(w, "enc" + std::to_string(l), x);
    skips.push_back(x);
    x = downsample_stride(x, Index{2});
  }
  x = double_conv(w, std::string("mid"), x);
  for (int l = cfg.depth - 1; l >= 0; --l) {
    x = relu(conv_layer(w, "up" + std::to_string(l) + ".conv", upsample_nearest(x, Index{2})));
    x = concat<Scalar>({skips[static_cast<std::size_t>(l)], x}, 0);
    x = double_conv(w, "dec" + std::to_string(l), x);
  }
  return conv_layer(w, std::string("out"), x);
}

template <typename Scalar>
Var<Scalar> transformer_forward(const DenoiserConfig& cfg, const WeightFn<Scalar>& w, Var<Scalar> input) {
  Var<Scalar> feat = conv_layer(w, std::string("embed"), input);
  const Index c = feat.shape()[0], H = feat.shape()[1], W = feat.shape()[2];
  Var<Scalar> low = downsample_stride(feat, Index{2});
  const Index n = (H / 2) * (W / 2);
  Var<Scalar> tokens = transpose(reshape(low, {c, n}));
  for (int b = 0; b < cfg.depth; ++b) {
    const std::string p = "blk" + std::to_string(b);
    tokens = add(tokens, attention(w, p + ".attn", norm_layer(w, p + ".norm1", tokens), cfg.heads));
    Var<Scalar> h = gelu(linear_layer(w, p + ".ffn.fc1", norm_layer(w, p + ".norm2", tokens), true));
    tokens = add(tokens, linear_layer(w, p + ".ffn.fc2", h, true));
  }
  Var<Scalar> up = upsample_nearest(reshape(transpose(tokens), {c, H / 2, W / 2}), Index{2});
  return conv_layer(w, std::string("out"), add(feat, up));
}

}  // namespace detail

/// Proximal mapping x = denoiser(z) at a given noise level.
///
/// Learned architectures see the noise level as an extra constant input
/// channel and predict a residual added to z. The soft-threshold denoiser is
/// the exact prox of the l1 norm with threshold noise_level^2.
template <typename Scalar>
Var<Scalar> denoise(const DenoiserConfig& cfg, const WeightFn<Scalar>& weights, Var<Scalar> z, Var<Scalar> noise_level) {
  detail::require_scalar(noise_level, "denoise");
  if (noise_level.value()[0] < Scalar(0)) throw ContractError("denoise: negative noise level");
  if (cfg.arch == Arch::SoftThreshold) return soft_threshold(z, mul(noise_level, noise_level));
  detail::require_chw(z.value(), "denoise");
  if (z.shape()[0] != cfg.image_channels)
    throw DimensionError("denoise: input has " + std::to_string(z.shape()[0]) + " channels, denoiser expects " +
                         std::to_string(cfg.image_channels));
  const Index m = cfg.spatial_multiple();
  if (z.shape()[1] % m || z.shape()[2] % m)
    throw DimensionError("denoise: spatial size " + shape_str(z.shape()) + " must be divisible by " + std::to_string(m));
  Var<Scalar> level = broadcast(noise_level, {1, z.shape()[1], z.shape()[2]});
  Var<Scalar> input = concat<Scalar>({z, level}, 0);
  Var<Scalar> residual = cfg.arch == Arch::UNet ? detail::unet_forward(cfg, weights, input)
                                                : detail::transformer_forward(cfg, weights, input);
  return add(z, residual);
}

/// Convenience evaluation on plain tensors, optionally with adapters keyed by weight name.
template <typename Scalar>
Tensor<Scalar> denoise(const DenoiserConfig& cfg, const std::map<std::string, Tensor<Scalar>>& weights,
                       const std::map<std::string, LoraAdapter<Scalar>>* adapters, const Tensor<Scalar>& z,
                       Scalar noise_level) {
  Graph<Scalar> g;
  WeightFn<Scalar> fn = [&](const std::string& name) {
    auto it = weights.find(name);
    if (it == weights.end()) throw DimensionError("denoise: missing weight " + name);
    if (adapters) {
      if (auto a = adapters->find(name); a != adapters->end()) return g.constant(effective_weight(it->second, a->second));
    }
    return g.constant(it->second);
  };
  return denoise(cfg, fn, g.constant(z), g.constant(Tensor<Scalar>::scalar(noise_level))).value();
}

/// Soft thresholding on plain tensors.
template <typename Scalar>
Tensor<Scalar> soft_threshold(const Tensor<Scalar>& z, Scalar tau) {
  if (tau < Scalar(0)) throw ContractError("soft_threshold: negative threshold");
  return detail::map_values(z, [tau](Scalar v) {
    const Scalar m = std::abs(v) - tau;
    return m > Scalar(0) ? std::copysign(m, v) : Scalar(0);
  });
}

}  // namespace lorun
