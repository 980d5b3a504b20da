// The detector: a three-stage stride-2 conv backbone, a miniature top-down
// pyramid with 1x1 lateral merges, and the omni-supervised head with three
// classification branches plus one localization branch, all sharing the
// pyramid features. Towers are shared across levels. Parameters live in
// float32 with momentum buffers aligned one-to-one; a forward pass binds
// them onto a tape as leaves so one backward pass yields every gradient.
#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "orfnet/annotations.hpp"
#include "orfnet/autodiff.hpp"
#include "orfnet/errors.hpp"
#include "orfnet/grid.hpp"
#include "orfnet/nn_ops.hpp"
#include "orfnet/rng.hpp"

namespace orfnet {

struct ModelConfig {
  int image_channels = 1;
  std::vector<int> stem_channels = {8, 16, 16};  // three stride-2 stages
  int head_channels = 8;
  int tower_depth = 2;
  double prior = 0.01;  // classification bias init: sigmoid(bias) = prior
  std::vector<int> strides = {8, 16};

  void validate() const {
    if (stem_channels.size() != 3) throw ConfigError("model: exactly three stem stages expected");
    for (int c : stem_channels)
      if (c < 1) throw ConfigError("model: stem channels must be >= 1");
    if (head_channels < 1) throw ConfigError("model: head channels must be >= 1");
    if (tower_depth < 1) throw ConfigError("model: tower depth must be >= 1");
    if (!(prior > 0 && prior < 1)) throw ConfigError("model: prior must be in (0,1)");
    if (strides.size() < 2) throw ConfigError("model: at least two pyramid levels expected");
    int prev = 0;
    for (int s : strides) {
      if (s != 4 && s != 8 && s != 16 && s != 32)
        throw ConfigError("model: supported strides are 4, 8, 16, 32");
      if (prev && s != prev * 2)
        throw ConfigError("model: consecutive strides must double");
      prev = s;
    }
  }
};

struct OptimizerConfig {
  double learning_rate = 1e-3;
  double momentum = 0.9;
  double decay_factor = 0.1;
  long decay_every = 1000;

  void validate() const {
    if (!(learning_rate > 0)) throw ConfigError("optimizer: learning rate must be > 0");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("optimizer: momentum must be in [0,1)");
    if (decay_every < 1) throw ConfigError("optimizer: decay interval must be >= 1");
  }
};

inline double lr_at(const OptimizerConfig& cfg, long iteration) {
  return cfg.learning_rate * std::pow(cfg.decay_factor, double(iteration / cfg.decay_every));
}

struct ParamTensor {
  std::string name;
  ad::GridDims dims;
  std::vector<float> value;
  std::vector<float> velocity;
};

enum class Branch : int { ClsBox = 0, ClsDot = 1, ClsUnlabeled = 2, Loc = 3 };

inline const char* branch_name(Branch b) {
  switch (b) {
    case Branch::ClsBox:
      return "cls_box";
    case Branch::ClsDot:
      return "cls_dot";
    case Branch::ClsUnlabeled:
      return "cls_unl";
    case Branch::Loc:
      return "loc";
  }
  return "?";
}

class Detector {
 public:
  Detector(ModelConfig cfg, uint64_t init_seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build_params();
    init_params(init_seed);
  }

  // Used by checkpoint loading: parameters filled in afterwards.
  static Detector uninitialized(ModelConfig cfg) { return Detector(std::move(cfg), Tag{}); }

  const ModelConfig& config() const { return cfg_; }
  std::vector<ParamTensor>& params() { return params_; }
  const std::vector<ParamTensor>& params() const { return params_; }

  int param_index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw DataError("unknown parameter: " + name);
    return it->second;
  }

  size_t total_scalars() const {
    size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

 private:
  struct Tag {};
  Detector(ModelConfig cfg, Tag) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build_params();
  }

  void add_param(const std::string& name, ad::GridDims d) {
    ParamTensor p;
    p.name = name;
    p.dims = d;
    p.value.assign(size_t(d.size()), 0.f);
    p.velocity.assign(size_t(d.size()), 0.f);
    index_[name] = int(params_.size());
    params_.push_back(std::move(p));
  }

  void add_conv(const std::string& name, int cout, int cin, int k) {
    add_param(name + ".w", ad::GridDims{cout, cin, k * k});
    add_param(name + ".b", ad::GridDims{cout, 1, 1});
  }

  void build_params() {
    const auto& sc = cfg_.stem_channels;
    add_conv("stem.1", sc[0], cfg_.image_channels, 3);
    add_conv("stem.2", sc[1], sc[0], 3);
    add_conv("stem.3", sc[2], sc[1], 3);
    const int hc = cfg_.head_channels;
    bool need4 = std::find(cfg_.strides.begin(), cfg_.strides.end(), 4) != cfg_.strides.end();
    if (need4) add_conv("fpn.lat4", hc, sc[1], 1);
    add_conv("fpn.lat8", hc, sc[2], 1);
    for (int s : cfg_.strides)
      if (s >= 16) add_conv("fpn.down" + std::to_string(s), hc, hc, 3);
    for (size_t i = 0; i + 1 < cfg_.strides.size(); ++i)
      add_conv("fpn.smooth" + std::to_string(cfg_.strides[i]), hc, hc, 3);
    for (Branch br : {Branch::ClsBox, Branch::ClsDot, Branch::ClsUnlabeled, Branch::Loc}) {
      std::string base = std::string("head.") + branch_name(br);
      for (int d = 0; d < cfg_.tower_depth; ++d)
        add_conv(base + ".t" + std::to_string(d), hc, hc, 3);
      add_conv(base + ".pred", br == Branch::Loc ? 4 : 1, hc, 3);
    }
  }

  void init_params(uint64_t seed) {
    auto stream = rng::substream(seed, "init");
    const double cls_bias = -std::log((1.0 - cfg_.prior) / cfg_.prior);
    for (auto& p : params_) {
      const bool is_weight = p.name.ends_with(".w");
      const bool is_pred = p.name.find(".pred.") != std::string::npos;
      const bool is_cls_pred_bias =
          p.name.ends_with("pred.b") && p.name.find("head.cls") != std::string::npos;
      if (is_weight) {
        const int fan_in = p.dims.h * p.dims.w;  // cin * k*k
        const double std_dev = is_pred ? 0.01 : std::sqrt(2.0 / fan_in);
        for (auto& v : p.value) v = float(stream.normal(0.0, std_dev));
      } else if (is_cls_pred_bias) {
        for (auto& v : p.value) v = float(cls_bias);
      }
    }
  }

  ModelConfig cfg_;
  std::vector<ParamTensor> params_;
  std::unordered_map<std::string, int> index_;
};

template <class T>
struct LevelOutput {
  FeatureGrid<T> p_box, p_dot, p_unl;  // post-sigmoid probabilities
  ad::Grid<T> distances;               // 4ch left/top/right/bottom, pixels
};

// Binds detector parameters onto a tape and runs images through the network.
// Several images may be run on the same pass; their gradients accumulate on
// the shared leaves.
template <class T>
class ForwardPass {
 public:
  ForwardPass(ad::Tape<T>& tape, const Detector& det, bool requires_grad = true)
      : tape_(&tape), det_(&det) {
    leaves_.reserve(det.params().size());
    for (const auto& p : det.params()) {
      std::vector<T> vals(p.value.size());
      for (size_t i = 0; i < vals.size(); ++i) vals[i] = T(p.value[i]);
      leaves_.push_back(tape.leaf(p.dims, vals, requires_grad));
    }
  }

  const ad::Grid<T>& leaf(int param_index) const { return leaves_[size_t(param_index)]; }
  const ad::Grid<T>& leaf(const std::string& name) const {
    return leaves_[size_t(det_->param_index(name))];
  }
  std::span<const T> grad(int param_index) const { return leaves_[size_t(param_index)].grad(); }

  std::vector<LevelOutput<T>> run(const ImageBuffer& img) const {
    const auto& cfg = det_->config();
    if (img.channels != cfg.image_channels)
      throw ShapeError("forward: image has " + std::to_string(img.channels) +
                       " channels, model expects " + std::to_string(cfg.image_channels));
    PyramidSpec::for_image(img.height, img.width, cfg.strides);  // shape validation

    std::vector<T> pixels(img.v.size());
    for (size_t i = 0; i < pixels.size(); ++i) pixels[i] = T(img.v[i]);
    auto x = tape_->leaf(ad::GridDims{img.channels, img.height, img.width}, pixels, false);

    auto conv = [&](const ad::Grid<T>& in, const std::string& name, int k, int stride) {
      return ad::conv2d(in, leaf(name + ".w"), leaf(name + ".b"), k, stride);
    };

    auto s1 = ad::relu(conv(x, "stem.1", 3, 2));
    auto s2 = ad::relu(conv(s1, "stem.2", 3, 2));
    auto s3 = ad::relu(conv(s2, "stem.3", 3, 2));

    // Bottom-up lateral features per stride, then top-down merge.
    std::vector<ad::Grid<T>> feat(cfg.strides.size());
    for (size_t i = 0; i < cfg.strides.size(); ++i) {
      const int s = cfg.strides[i];
      if (s == 4) {
        feat[i] = conv(s2, "fpn.lat4", 1, 1);
      } else if (s == 8) {
        feat[i] = conv(s3, "fpn.lat8", 1, 1);
      } else {
        auto lower = i > 0 ? feat[i - 1] : conv(s3, "fpn.lat8", 1, 1);
        feat[i] = conv(lower, "fpn.down" + std::to_string(s), 3, 2);
      }
    }
    for (int i = int(cfg.strides.size()) - 2; i >= 0; --i) {
      feat[size_t(i)] = ad::add(feat[size_t(i)], ad::upsample2x(feat[size_t(i) + 1]));
      feat[size_t(i)] =
          conv(feat[size_t(i)], "fpn.smooth" + std::to_string(cfg.strides[size_t(i)]), 3, 1);
    }

    std::vector<LevelOutput<T>> out;
    out.reserve(cfg.strides.size());
    for (size_t i = 0; i < cfg.strides.size(); ++i) {
      const int stride = cfg.strides[i];
      auto tower = [&](Branch br) {
        std::string base = std::string("head.") + branch_name(br);
        auto t = feat[i];
        for (int d = 0; d < cfg.tower_depth; ++d)
          t = ad::relu(conv(t, base + ".t" + std::to_string(d), 3, 1));
        return conv(t, base + ".pred", 3, 1);
      };
      LevelOutput<T> lvl;
      lvl.p_box = FeatureGrid<T>{int(i), stride, ad::sigmoid_(tower(Branch::ClsBox))};
      lvl.p_dot = FeatureGrid<T>{int(i), stride, ad::sigmoid_(tower(Branch::ClsDot))};
      lvl.p_unl = FeatureGrid<T>{int(i), stride, ad::sigmoid_(tower(Branch::ClsUnlabeled))};
      lvl.distances = ad::scalar_mul(ad::exp_(tower(Branch::Loc)), double(stride));
      out.push_back(std::move(lvl));
    }
    return out;
  }

 private:
  ad::Tape<T>* tape_;
  const Detector* det_;
  std::vector<ad::Grid<T>> leaves_;
};

// v <- m*v + g;  p <- p - lr(iteration)*v. Gradients must be finite.
template <class T>
void sgd_step(Detector& det, const ForwardPass<T>& pass, const OptimizerConfig& cfg,
              long iteration) {
  cfg.validate();
  const float lr = float(lr_at(cfg, iteration));
  const float m = float(cfg.momentum);
  auto& params = det.params();
  for (size_t i = 0; i < params.size(); ++i) {
    auto g = pass.grad(int(i));
    if (g.size() != params[i].value.size())
      throw ShapeError("sgd_step: gradient missing for " + params[i].name +
                       " (no backward pass?)");
    auto& p = params[i];
    for (size_t j = 0; j < p.value.size(); ++j) {
      const float gj = float(g[j]);
      if (!std::isfinite(gj))
        throw NumericalError("non-finite gradient in parameter " + p.name);
      p.velocity[j] = m * p.velocity[j] + gj;
      p.value[j] -= lr * p.velocity[j];
    }
  }
}

}  // namespace orfnet
