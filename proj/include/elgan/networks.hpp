#pragma once

#include "elgan/graph.hpp"
#include "elgan/ops.hpp"
#include "elgan/rng.hpp"
#include "elgan/specs.hpp"

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace elgan {

enum class Mode { train, infer };

namespace detail {

struct ConvRef {
  std::size_t weight = 0;
  std::size_t bias = 0;
};

template <typename Scalar>
ConvRef add_conv(ParameterSet<Scalar>& params, Rng& rng, const std::string& name, int cin, int cout, int k) {
  ConvRef ref;
  ref.weight = params.add(name + ".w", Shape{cout, cin, k, k}, true);
  ref.bias = params.add(name + ".b", Shape{1, 1, 1, cout}, false);
  // He-normal: std = sqrt(2 / fan_in).
  const double stddev = std::sqrt(2.0 / static_cast<double>(cin * k * k));
  auto& w = params[ref.weight].value;
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<Scalar>(stddev * rng.normal());
  return ref;
}

template <typename Scalar>
Var apply_conv(Graph<Scalar>& g, Var x, ParameterSet<Scalar>& params, const ConvRef& c, bool track) {
  return ops::conv2d(g, x, params[c.weight], params[c.bias], track);
}

template <typename Scalar>
Var activate(Graph<Scalar>& g, Var x, Nonlinearity n) {
  return n == Nonlinearity::relu ? ops::relu(g, x) : ops::elu(g, x);
}

}  // namespace detail

/// Tiramisu-style dense encoder-decoder producing per-pixel class probabilities.
template <typename Scalar>
class Generator {
 public:
  Generator(const GeneratorSpec& spec, std::uint64_t seed) : spec_(spec) {
    spec_.validate();
    Rng rng(derive_seed(seed, 0x67656e));
    const int g = spec_.growth_rate;
    const int down = spec_.levels - 1;
    stem_ = detail::add_conv(params_, rng, "stem", spec_.input_channels, spec_.stem_channels, 3);
    int ch = spec_.stem_channels;
    std::vector<int> skip_channels;
    for (int l = 0; l < down; ++l) {
      down_blocks_.push_back(make_block("down" + std::to_string(l), ch, spec_.convs_per_block[l], rng));
      ch += spec_.convs_per_block[l] * g;
      skip_channels.push_back(ch);
      transitions_down_.push_back(detail::add_conv(params_, rng, "td" + std::to_string(l), ch, ch, 1));
    }
    bottleneck_ = make_block("bottleneck", ch, spec_.convs_per_block.back(), rng);
    int up_ch = spec_.convs_per_block.back() * g;
    for (int l = down - 1; l >= 0; --l) {
      transitions_up_.push_back(detail::add_conv(params_, rng, "tu" + std::to_string(l), up_ch, up_ch, 3));
      const int in = up_ch + skip_channels[l];
      up_blocks_.push_back(make_block("up" + std::to_string(l), in, spec_.convs_per_block[l], rng));
      up_ch = l == 0 ? in + spec_.convs_per_block[l] * g : spec_.convs_per_block[l] * g;
    }
    if (down == 0) up_ch = ch + spec_.convs_per_block.back() * g;
    head_ = detail::add_conv(params_, rng, "head", up_ch, spec_.num_classes, 1);
  }

  const GeneratorSpec& spec() const { return spec_; }
  ParameterSet<Scalar>& params() { return params_; }
  const ParameterSet<Scalar>& params() const { return params_; }
  Index parameter_count() const { return params_.scalar_count(); }

  /// Throws ShapeError unless `s` is a valid input batch shape.
  void check_input(const Shape& s) const {
    if (s.c != spec_.input_channels)
      throw ShapeError("generator: expected " + std::to_string(spec_.input_channels) + " input channels, got " +
                       s.str());
    const Index factor = Index(1) << spec_.transitions();
    if (s.h % factor != 0 || s.w % factor != 0)
      throw ShapeError("generator: spatial size " + s.str() + " not divisible by " + std::to_string(factor) +
                       " (" + std::to_string(spec_.transitions()) + " downsampling transitions)");
  }

  /// Records the forward pass on `g`. In train mode dropout masks derive from `dropout_seed`.
  Var forward(Graph<Scalar>& g, Var x, Mode mode, bool track, std::uint64_t dropout_seed = 0) {
    check_input(g.value(x).shape());
    Site site{mode, dropout_seed, 0};
    const int down = spec_.levels - 1;
    Var h = detail::activate(g, detail::apply_conv(g, x, params_, stem_, track), spec_.nonlinearity);
    std::vector<Var> skips;
    for (int l = 0; l < down; ++l) {
      h = run_block(g, h, down_blocks_[l], track, site, true);
      skips.push_back(h);
      h = detail::activate(g, detail::apply_conv(g, h, params_, transitions_down_[l], track), spec_.nonlinearity);
      h = maybe_dropout(g, h, site);
      h = ops::avg_pool2(g, h);
    }
    h = run_block(g, h, bottleneck_, track, site, down == 0);
    for (int i = 0; i < down; ++i) {
      const int l = down - 1 - i;
      Var up = detail::apply_conv(g, ops::upsample2(g, h), params_, transitions_up_[i], track);
      h = run_block(g, ops::concat(g, {up, skips[l]}), up_blocks_[i], track, site, l == 0);
    }
    return ops::softmax_channels(g, detail::apply_conv(g, h, params_, head_, track));
  }

  /// Inference-mode prediction without gradient bookkeeping.
  Tensor<Scalar> predict(const Tensor<Scalar>& x) {
    Graph<Scalar> g;
    const Var out = forward(g, g.input(x), Mode::infer, false);
    return g.value(out);
  }

 private:
  struct Block {
    std::vector<detail::ConvRef> layers;
  };
  struct Site {
    Mode mode;
    std::uint64_t seed;
    std::uint64_t index;
  };

  Block make_block(const std::string& name, int cin, int convs, Rng& rng) {
    Block b;
    for (int j = 0; j < convs; ++j)
      b.layers.push_back(
          detail::add_conv(params_, rng, name + ".l" + std::to_string(j), cin + j * spec_.growth_rate, spec_.growth_rate, 3));
    return b;
  }

  Var maybe_dropout(Graph<Scalar>& g, Var h, Site& site) {
    const std::uint64_t index = site.index++;
    if (site.mode != Mode::train) return h;
    return ops::dropout(g, h, spec_.dropout_rate, derive_seed(site.seed, index));
  }

  /// Dense block; returns concat(input, new features) or only the new features.
  Var run_block(Graph<Scalar>& g, Var in, const Block& b, bool track, Site& site, bool keep_input) {
    std::vector<Var> features{in};
    std::vector<Var> fresh;
    Var cur = in;
    for (const auto& layer : b.layers) {
      Var f = detail::activate(g, detail::apply_conv(g, cur, params_, layer, track), spec_.nonlinearity);
      f = maybe_dropout(g, f, site);
      features.push_back(f);
      fresh.push_back(f);
      cur = ops::concat(g, features);
    }
    if (keep_input) return cur;
    return fresh.size() == 1 ? fresh.front() : ops::concat(g, fresh);
  }

  GeneratorSpec spec_;
  ParameterSet<Scalar> params_;
  detail::ConvRef stem_;
  detail::ConvRef head_;
  std::vector<Block> down_blocks_;
  std::vector<detail::ConvRef> transitions_down_;
  Block bottleneck_;
  std::vector<detail::ConvRef> transitions_up_;
  std::vector<Block> up_blocks_;
};

/// Discriminator outputs for one (image, map) pair batch.
struct DiscOutput {
  Var patch;      // (n, 1, h', w') real/fake scores after sigmoid
  Var embedding;  // dense-block output at the requested tap
};

/// Two-headed DenseNet discriminator with a fully-convolutional patch classifier.
template <typename Scalar>
class Discriminator {
 public:
  Discriminator(const DiscriminatorSpec& spec, std::uint64_t seed) : spec_(spec) {
    spec_.validate();
    Rng rng(derive_seed(seed, 0x646973));
    const int join = spec_.join_after_block;
    int ch_image = spec_.stem_channels;
    int ch_map = spec_.stem_channels;
    stem_image_ = detail::add_conv(params_, rng, "stem_image", spec_.image_channels, spec_.stem_channels, 3);
    stem_map_ = detail::add_conv(params_, rng, "stem_map", spec_.map_channels, spec_.stem_channels, 3);
    for (int b = 1; b <= join; ++b) {
      const int convs = spec_.convs_per_block[b - 1];
      image_blocks_.push_back(make_block("image.b" + std::to_string(b), ch_image, convs, rng));
      map_blocks_.push_back(make_block("map.b" + std::to_string(b), ch_map, convs, rng));
      ch_image += convs * spec_.growth_rate;
      ch_map += convs * spec_.growth_rate;
      if (b < join) {
        image_transitions_.push_back(detail::add_conv(params_, rng, "image.td" + std::to_string(b), ch_image, ch_image, 1));
        map_transitions_.push_back(detail::add_conv(params_, rng, "map.td" + std::to_string(b), ch_map, ch_map, 1));
      }
    }
    int ch = ch_image + ch_map;
    for (int b = join + 1; b <= spec_.blocks; ++b) {
      shared_transitions_.push_back(detail::add_conv(params_, rng, "td" + std::to_string(b - 1), ch, ch, 1));
      const int convs = spec_.convs_per_block[b - 1];
      shared_blocks_.push_back(make_block("b" + std::to_string(b), ch, convs, rng));
      ch += convs * spec_.growth_rate;
    }
    classifier_ = detail::add_conv(params_, rng, "classifier", ch, 1, 1);
  }

  const DiscriminatorSpec& spec() const { return spec_; }
  ParameterSet<Scalar>& params() { return params_; }
  const ParameterSet<Scalar>& params() const { return params_; }
  Index parameter_count() const { return params_.scalar_count(); }

  /// Runs both heads; the embedding is taken at `tap` (default: spec.embedding_tap).
  DiscOutput forward(Graph<Scalar>& g, Var image, Var map, bool track, int tap = 0) {
    if (tap == 0) tap = spec_.embedding_tap;
    if (tap < 1 || tap > spec_.blocks) throw ConfigError("discriminator: tap " + std::to_string(tap) + " out of range");
    const Shape xs = g.value(image).shape();
    const Shape ms = g.value(map).shape();
    if (xs.n != ms.n || xs.h != ms.h || xs.w != ms.w)
      throw ShapeError("discriminator: image " + xs.str() + " and map " + ms.str() + " are not aligned");
    const Index factor = Index(1) << spec_.transitions();
    if (xs.h % factor != 0 || xs.w % factor != 0)
      throw ShapeError("discriminator: spatial size " + xs.str() + " not divisible by " + std::to_string(factor));

    const auto act = spec_.nonlinearity;
    Var a = detail::activate(g, detail::apply_conv(g, image, params_, stem_image_, track), act);
    Var m = detail::activate(g, detail::apply_conv(g, map, params_, stem_map_, track), act);
    DiscOutput out{};
    const int join = spec_.join_after_block;
    for (int b = 1; b <= join; ++b) {
      a = run_block(g, a, image_blocks_[b - 1], track);
      m = run_block(g, m, map_blocks_[b - 1], track);
      if (b < join) {
        if (b == tap) out.embedding = ops::concat(g, {a, m});
        a = ops::avg_pool2(g, detail::activate(g, detail::apply_conv(g, a, params_, image_transitions_[b - 1], track), act));
        m = ops::avg_pool2(g, detail::activate(g, detail::apply_conv(g, m, params_, map_transitions_[b - 1], track), act));
      }
    }
    Var h = ops::concat(g, {a, m});
    if (tap == join) out.embedding = h;
    for (int b = join + 1; b <= spec_.blocks; ++b) {
      const std::size_t i = static_cast<std::size_t>(b - join - 1);
      h = ops::avg_pool2(g, detail::activate(g, detail::apply_conv(g, h, params_, shared_transitions_[i], track), act));
      h = run_block(g, h, shared_blocks_[i], track);
      if (b == tap) out.embedding = h;
    }
    out.patch = ops::sigmoid(g, detail::apply_conv(g, h, params_, classifier_, track));
    return out;
  }

 private:
  struct Block {
    std::vector<detail::ConvRef> layers;
  };

  Block make_block(const std::string& name, int cin, int convs, Rng& rng) {
    Block b;
    for (int j = 0; j < convs; ++j)
      b.layers.push_back(
          detail::add_conv(params_, rng, name + ".l" + std::to_string(j), cin + j * spec_.growth_rate, spec_.growth_rate, 3));
    return b;
  }

  Var run_block(Graph<Scalar>& g, Var in, const Block& b, bool track) {
    std::vector<Var> features{in};
    Var cur = in;
    for (const auto& layer : b.layers) {
      features.push_back(detail::activate(g, detail::apply_conv(g, cur, params_, layer, track), spec_.nonlinearity));
      cur = ops::concat(g, features);
    }
    return cur;
  }

  DiscriminatorSpec spec_;
  ParameterSet<Scalar> params_;
  detail::ConvRef stem_image_;
  detail::ConvRef stem_map_;
  std::vector<Block> image_blocks_;
  std::vector<Block> map_blocks_;
  std::vector<detail::ConvRef> image_transitions_;
  std::vector<detail::ConvRef> map_transitions_;
  std::vector<detail::ConvRef> shared_transitions_;
  std::vector<Block> shared_blocks_;
  detail::ConvRef classifier_;
};

extern template class Generator<float>;
extern template class Generator<double>;
extern template class Discriminator<float>;
extern template class Discriminator<double>;

}  // namespace elgan
