#pragma once

// Model construction and inference: the 4-scale Inception-boosted U-Net, its
// six-branch add-fused bottleneck block, and a 3-scale RouteNet-style
// baseline (transposed-conv upsampling, ReLU, no bottleneck block). Models
// are declarative: an ordered layer list plus a named parameter store, which
// the forward interpreter executes on a tape.

#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ibunet/error.hpp"
#include "ibunet/features.hpp"
#include "ibunet/rng.hpp"
#include "ibunet/tensor.hpp"

namespace ibunet {

enum class ModelKind { ibunet, baseline };
enum class NormKind { batch, instance };
enum class SkipFusion { concat, add };
enum class UpsampleKind { bilinear, tconv };
enum class Activation { prelu, relu };

inline const char* model_kind_name(ModelKind k) {
  return k == ModelKind::ibunet ? "ibunet" : "baseline";
}
inline ModelKind parse_model_kind(const std::string& s) {
  if (s == "ibunet") return ModelKind::ibunet;
  if (s == "baseline" || s == "routenet") return ModelKind::baseline;
  fail(errc::config_invalid, "unknown model kind: " + s);
}

struct ModelConfig {
  Task task = Task::rc;
  int in_channels = 3;
  int base_width = 16;
  int num_scales = 4;
  NormKind norm = NormKind::batch;
  SkipFusion skip_fusion = SkipFusion::concat;
  UpsampleKind upsample = UpsampleKind::bilinear;
  Activation activation = Activation::prelu;
};

/// Defaults chosen so the two models sit at the same parameter level
/// (ibUNet ~1.9M vs baseline ~1.4M learnables); see cmd_params.
inline ModelConfig default_config(ModelKind kind, Task task) {
  ModelConfig c;
  c.task = task;
  c.in_channels = task == Task::rc ? 3 : 9;
  c.norm = task == Task::rc ? NormKind::batch : NormKind::instance;
  if (kind == ModelKind::ibunet) {
    c.base_width = 16;
    c.num_scales = 4;
    c.upsample = UpsampleKind::bilinear;
    c.activation = Activation::prelu;
  } else {
    c.base_width = 48;
    c.num_scales = 3;
    c.upsample = UpsampleKind::tconv;
    c.activation = Activation::relu;
  }
  c.skip_fusion = SkipFusion::concat;
  return c;
}

enum class LayerOp {
  conv,
  conv_transpose,
  maxpool,
  bilinear_up,
  norm,
  act,
  save_skip,
  fuse_skip,
  inception,
  sigmoid,
};

struct LayerDesc {
  LayerOp op;
  std::string prefix;  // parameter name prefix, e.g. "enc1.conv1"
  int in_ch = 0, out_ch = 0;
  int kernel = 0, stride = 1, pad = 0;
  int slot = -1;
  NormKind norm = NormKind::batch;
  Activation act = Activation::prelu;
  SkipFusion fuse = SkipFusion::concat;
};

struct ModelSpec {
  ModelKind kind = ModelKind::ibunet;
  ModelConfig config;
  std::vector<LayerDesc> layers;
  std::vector<std::pair<std::string, std::array<int, 4>>> param_shapes;
};

template <typename T>
struct Param {
  std::string name;
  TensorPtr<T> tensor;
  bool learnable = true;
};

template <typename T>
class ParamStore {
 public:
  TensorPtr<T> add(const std::string& name, int n, int c, int h, int w, bool learnable) {
    require(!by_name_.count(name), errc::config_invalid, "duplicate param name " + name);
    by_name_[name] = items_.size();
    items_.push_back({name, make_tensor<T>(n, c, h, w), learnable});
    return items_.back().tensor;
  }
  TensorPtr<T> at(const std::string& name) const {
    auto it = by_name_.find(name);
    require(it != by_name_.end(), errc::config_invalid, "unknown param " + name);
    return items_[it->second].tensor;
  }
  bool has(const std::string& name) const { return by_name_.count(name) != 0; }
  const std::vector<Param<T>>& items() const { return items_; }
  std::vector<Param<T>>& items() { return items_; }

  void set_tracking(bool on) {
    for (auto& p : items_)
      if (p.learnable) {
        if (on && !p.tensor->tracked) p.tensor->track();
        if (!on) {
          p.tensor->tracked = false;
          p.tensor->g.clear();
        }
      }
  }
  void zero_grads() {
    for (auto& p : items_) p.tensor->zero_grad();
  }
  size_t learnable_count() const {
    size_t n = 0;
    for (const auto& p : items_)
      if (p.learnable) n += p.tensor->size();
    return n;
  }

 private:
  std::vector<Param<T>> items_;
  std::map<std::string, size_t> by_name_;
};

template <typename T>
struct Model {
  ModelSpec spec;
  ParamStore<T> params;
};

// ---- construction -----------------------------------------------------------

namespace detail {

template <typename T>
void init_conv(TensorPtr<T> w, TensorPtr<T> b, int fan_in, Rng& rng) {
  double bound = 1.0 / std::sqrt(double(fan_in));
  for (auto& v : w->v) v = T(rng.uniform(-bound, bound));
  (void)b;  // biases start at zero
}

template <typename T>
struct Builder {
  Model<T>& m;
  Rng rng;

  void conv(const std::string& prefix, int cin, int cout, int k, int stride, int pad) {
    auto w = m.params.add(prefix + ".w", cout, cin, k, k, true);
    auto b = m.params.add(prefix + ".b", 1, cout, 1, 1, true);
    init_conv(w, b, cin * k * k, rng);
    m.spec.layers.push_back(
        {LayerOp::conv, prefix, cin, cout, k, stride, pad, -1});
  }
  void tconv(const std::string& prefix, int cin, int cout, int k, int stride) {
    auto w = m.params.add(prefix + ".w", cin, cout, k, k, true);
    auto b = m.params.add(prefix + ".b", 1, cout, 1, 1, true);
    init_conv(w, b, cin * k * k, rng);
    m.spec.layers.push_back(
        {LayerOp::conv_transpose, prefix, cin, cout, k, stride, 0, -1});
  }
  void norm(const std::string& prefix, int c) {
    auto gamma = m.params.add(prefix + ".gamma", 1, c, 1, 1, true);
    auto beta = m.params.add(prefix + ".beta", 1, c, 1, 1, true);
    std::fill(gamma->v.begin(), gamma->v.end(), T(1));
    (void)beta;
    if (m.spec.config.norm == NormKind::batch) {
      auto rmean = m.params.add(prefix + ".running_mean", 1, c, 1, 1, false);
      auto rvar = m.params.add(prefix + ".running_var", 1, c, 1, 1, false);
      (void)rmean;
      std::fill(rvar->v.begin(), rvar->v.end(), T(1));
    }
    LayerDesc d{LayerOp::norm, prefix, c, c};
    d.norm = m.spec.config.norm;
    m.spec.layers.push_back(d);
  }
  void act(const std::string& prefix, int c) {
    if (m.spec.config.activation == Activation::prelu) {
      auto slope = m.params.add(prefix + ".slope", 1, c, 1, 1, true);
      std::fill(slope->v.begin(), slope->v.end(), T(0.25));
    }
    LayerDesc d{LayerOp::act, prefix, c, c};
    d.act = m.spec.config.activation;
    m.spec.layers.push_back(d);
  }
  /// conv3x3 -> norm -> activation
  void conv_block(const std::string& prefix, int cin, int cout) {
    conv(prefix, cin, cout, 3, 1, 1);
    norm(prefix + ".norm", cout);
    act(prefix + ".act", cout);
  }
  void maxpool(int k, int stride, int pad) {
    m.spec.layers.push_back({LayerOp::maxpool, "", 0, 0, k, stride, pad, -1});
  }
  void save_skip(int slot) {
    LayerDesc d{LayerOp::save_skip};
    d.slot = slot;
    m.spec.layers.push_back(d);
  }
  void fuse_skip(int slot) {
    LayerDesc d{LayerOp::fuse_skip};
    d.slot = slot;
    d.fuse = m.spec.config.skip_fusion;
    m.spec.layers.push_back(d);
  }
  void upsample(const std::string& prefix, int c) {
    if (m.spec.config.upsample == UpsampleKind::bilinear) {
      m.spec.layers.push_back({LayerOp::bilinear_up, ""});
    } else {
      tconv(prefix, c, c, 2, 2);
    }
  }
  void inception(const std::string& prefix, int c) {
    const int ks[4] = {1, 3, 5, 7};
    for (int k : ks) {
      auto w = m.params.add(prefix + ".conv" + std::to_string(k) + ".w", c, c, k, k, true);
      auto b = m.params.add(prefix + ".conv" + std::to_string(k) + ".b", 1, c, 1, 1, true);
      init_conv(w, b, c * k * k, rng);
    }
    LayerDesc d{LayerOp::inception, prefix, c, c};
    m.spec.layers.push_back(d);
    norm(prefix + ".norm", c);
    act(prefix + ".act", c);
  }
};

inline void validate_config(const ModelConfig& c, ModelKind kind) {
  int want_scales = kind == ModelKind::ibunet ? 4 : 3;
  require(c.num_scales == want_scales, errc::config_invalid,
          std::string(model_kind_name(kind)) + " requires num_scales = " +
              std::to_string(want_scales));
  int want_in = c.task == Task::rc ? 3 : 9;
  require(c.in_channels == want_in, errc::config_invalid,
          "in_channels must match task (" + std::to_string(want_in) + ")");
  require(c.base_width >= 1, errc::config_invalid, "base_width must be >= 1");
}

}  // namespace detail

/// Shared encoder/decoder skeleton. ibUNet: 4 scales, widths x{1,2,4,8},
/// Inception block at the 16x-downsampled neck. Baseline: 3 scales, widths
/// x{1,2,4}, bare neck.
template <typename T>
Model<T> build_model(ModelKind kind, const ModelConfig& config, uint64_t seed = 0) {
  detail::validate_config(config, kind);
  Model<T> m;
  m.spec.kind = kind;
  m.spec.config = config;
  detail::Builder<T> B{m, Rng(mix64(seed ^ 0x6d6f64656cULL))};

  const int S = config.num_scales;
  const int bw = config.base_width;
  std::vector<int> enc_w(S);
  for (int e = 0; e < S; ++e) enc_w[e] = bw << e;

  int cur = config.in_channels;
  for (int e = 0; e < S; ++e) {
    std::string p = "enc" + std::to_string(e + 1);
    B.conv_block(p + ".conv1", cur, enc_w[e]);
    B.conv_block(p + ".conv2", enc_w[e], enc_w[e]);
    B.save_skip(e);
    B.maxpool(2, 2, 0);
    cur = enc_w[e];
  }

  if (kind == ModelKind::ibunet) B.inception("neck.inc", cur);

  for (int d = 0; d < S; ++d) {
    int e = S - 1 - d;  // matching encoder stage
    std::string p = "dec" + std::to_string(d + 1);
    B.upsample(p + ".up", cur);
    B.fuse_skip(e);
    int fused = config.skip_fusion == SkipFusion::concat ? cur + enc_w[e] : cur;
    require(config.skip_fusion == SkipFusion::concat || cur == enc_w[e],
            errc::config_invalid, "add fusion requires matching channel widths");
    int cout = e > 0 ? enc_w[e - 1] : bw;  // {4bw, 2bw, bw, bw} for S=4
    B.conv_block(p + ".conv1", fused, cout);
    B.conv_block(p + ".conv2", cout, cout);
    cur = cout;
  }

  B.conv("head", cur, 1, 1, 1, 0);
  m.spec.layers.push_back({LayerOp::sigmoid, ""});

  for (const auto& p : m.params.items())
    m.spec.param_shapes.push_back(
        {p.name, {p.tensor->n, p.tensor->c, p.tensor->h, p.tensor->w}});
  return m;
}

template <typename T>
Model<T> build_ibunet(const ModelConfig& config, uint64_t seed = 0) {
  return build_model<T>(ModelKind::ibunet, config, seed);
}
template <typename T>
Model<T> build_routenet_baseline(const ModelConfig& config, uint64_t seed = 0) {
  return build_model<T>(ModelKind::baseline, config, seed);
}

/// A standalone Inception block as a three-layer model (six-branch fusion,
/// then norm, then activation), params under the prefix "inc". Forward is
/// shape-preserving for any (N, channels, H, W).
template <typename T>
Model<T> build_inception_block(int channels, NormKind norm, Activation act,
                               uint64_t seed = 0) {
  require(channels >= 1, errc::config_invalid, "channels must be >= 1");
  Model<T> m;
  m.spec.kind = ModelKind::ibunet;
  m.spec.config.task = Task::rc;
  m.spec.config.in_channels = channels;
  m.spec.config.base_width = channels;
  m.spec.config.num_scales = 0;
  m.spec.config.norm = norm;
  m.spec.config.activation = act;
  detail::Builder<T> B{m, Rng(mix64(seed ^ 0x696e63ULL))};
  B.inception("inc", channels);
  for (const auto& p : m.params.items())
    m.spec.param_shapes.push_back(
        {p.name, {p.tensor->n, p.tensor->c, p.tensor->h, p.tensor->w}});
  return m;
}

// ---- forward ----------------------------------------------------------------

struct ForwardProbe {
  int neck_h = 0, neck_w = 0;  // smallest spatial extent reached
};

namespace detail {

template <typename T>
TensorPtr<T> apply_norm(Tape<T>& tape, TensorPtr<T> x, const ParamStore<T>& params,
                        const LayerDesc& d, bool training) {
  if (d.norm == NormKind::batch)
    return batchnorm(tape, x, params.at(d.prefix + ".gamma"), params.at(d.prefix + ".beta"),
                     params.at(d.prefix + ".running_mean"),
                     params.at(d.prefix + ".running_var"), 1e-5, 0.1, training);
  return instancenorm(tape, x, params.at(d.prefix + ".gamma"), params.at(d.prefix + ".beta"),
                      1e-5);
}

template <typename T>
TensorPtr<T> apply_act(Tape<T>& tape, TensorPtr<T> x, const ParamStore<T>& params,
                       const LayerDesc& d) {
  if (d.act == Activation::prelu) return prelu(tape, x, params.at(d.prefix + ".slope"));
  auto zero = make_tensor<T>(1, x->c, 1, 1);  // PReLU with slope 0 is exactly ReLU
  return prelu(tape, x, zero);
}

}  // namespace detail

/// Sum of the six branch outputs (conv1/3/5/7 + maxpool3/maxpool5), before
/// the post-fusion norm and activation. Exposed so tests can compare against
/// independently computed branches.
template <typename T>
TensorPtr<T> inception_fuse(Tape<T>& tape, TensorPtr<T> x, const ParamStore<T>& params,
                            const std::string& prefix) {
  auto branch = [&](int k) {
    return conv2d(tape, x, params.at(prefix + ".conv" + std::to_string(k) + ".w"),
                  params.at(prefix + ".conv" + std::to_string(k) + ".b"), 1, (k - 1) / 2);
  };
  auto acc = add(tape, branch(1), branch(3));
  acc = add(tape, acc, branch(5));
  acc = add(tape, acc, branch(7));
  acc = add(tape, acc, maxpool2d(tape, x, 3, 1, 1));
  acc = add(tape, acc, maxpool2d(tape, x, 5, 1, 2));
  return acc;
}

template <typename T>
TensorPtr<T> forward(Model<T>& model, Tape<T>& tape, TensorPtr<T> x, bool training,
                     ForwardProbe* probe = nullptr) {
  const ModelConfig& cfg = model.spec.config;
  require(x->c == cfg.in_channels, errc::dim_mismatch,
          "input has " + std::to_string(x->c) + " channels, model expects " +
              std::to_string(cfg.in_channels));
  int div = 1 << cfg.num_scales;
  require(x->h % div == 0 && x->w % div == 0, errc::dim_mismatch,
          "spatial size must be divisible by " + std::to_string(div));

  std::vector<TensorPtr<T>> slots(size_t(cfg.num_scales));
  TensorPtr<T> cur = x;
  int min_h = x->h, min_w = x->w;
  for (const LayerDesc& d : model.spec.layers) {
    switch (d.op) {
      case LayerOp::conv:
        cur = conv2d(tape, cur, model.params.at(d.prefix + ".w"),
                     model.params.at(d.prefix + ".b"), d.stride, d.pad);
        break;
      case LayerOp::conv_transpose:
        cur = conv_transpose2d(tape, cur, model.params.at(d.prefix + ".w"),
                               model.params.at(d.prefix + ".b"), d.stride);
        break;
      case LayerOp::maxpool:
        cur = maxpool2d(tape, cur, d.kernel, d.stride, d.pad);
        break;
      case LayerOp::bilinear_up:
        cur = bilinear_upsample2x(tape, cur);
        break;
      case LayerOp::norm:
        cur = detail::apply_norm(tape, cur, model.params, d, training);
        break;
      case LayerOp::act:
        cur = detail::apply_act(tape, cur, model.params, d);
        break;
      case LayerOp::save_skip:
        slots[d.slot] = cur;
        break;
      case LayerOp::fuse_skip:
        cur = d.fuse == SkipFusion::concat ? concat_channels(tape, slots[d.slot], cur)
                                           : add(tape, slots[d.slot], cur);
        slots[d.slot].reset();
        break;
      case LayerOp::inception:
        cur = inception_fuse(tape, cur, model.params, d.prefix);
        break;
      case LayerOp::sigmoid:
        cur = sigmoid(tape, cur);
        break;
    }
    if (cur->h < min_h) {
      min_h = cur->h;
      min_w = cur->w;
    }
  }
  if (probe) {
    probe->neck_h = min_h;
    probe->neck_w = min_w;
  }
  return cur;
}

inline size_t param_count(const ModelSpec& spec) {
  size_t n = 0;
  for (const auto& [name, dims] : spec.param_shapes) {
    // running statistics are buffers, not parameters
    if (name.find(".running_") != std::string::npos) continue;
    n += size_t(dims[0]) * dims[1] * dims[2] * dims[3];
  }
  return n;
}

// ---- model config file (TOML subset: flat `key = value` lines) ---------------

namespace detail {

inline std::string toml_strip(const std::string& raw) {
  std::string s;
  bool in_str = false;
  for (char ch : raw) {
    if (ch == '"') in_str = !in_str;
    if (ch == '#' && !in_str) break;
    s += ch;
  }
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string toml_unquote(const std::string& v, const std::string& key) {
  require(v.size() >= 2 && v.front() == '"' && v.back() == '"', errc::config_invalid,
          "key " + key + " expects a quoted string");
  return v.substr(1, v.size() - 2);
}

}  // namespace detail

/// Parses `key = value` pairs into a ModelConfig on top of `base`. Accepted
/// keys: task, in_channels, base_width, num_scales, norm, skip_fusion,
/// upsample, activation, and (optionally) model. Unknown keys are rejected.
inline ModelConfig parse_model_config(const std::string& text, ModelConfig base,
                                      ModelKind* kind_out = nullptr) {
  std::istringstream in(text);
  std::string raw;
  while (std::getline(in, raw)) {
    std::string line = detail::toml_strip(raw);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    require(eq != std::string::npos, errc::config_invalid, "expected key = value: " + line);
    std::string key = detail::toml_strip(line.substr(0, eq));
    std::string val = detail::toml_strip(line.substr(eq + 1));
    require(!key.empty() && !val.empty(), errc::config_invalid, "malformed line: " + line);
    auto as_int = [&]() {
      try {
        size_t pos;
        int v = std::stoi(val, &pos);
        require(pos == val.size(), errc::config_invalid, "key " + key + ": not an integer");
        return v;
      } catch (const Error&) {
        throw;
      } catch (...) {
        fail(errc::config_invalid, "key " + key + ": not an integer");
      }
    };
    if (key == "task") {
      base.task = parse_task(detail::toml_unquote(val, key));
    } else if (key == "in_channels") {
      base.in_channels = as_int();
    } else if (key == "base_width") {
      base.base_width = as_int();
    } else if (key == "num_scales") {
      base.num_scales = as_int();
    } else if (key == "norm") {
      std::string v = detail::toml_unquote(val, key);
      if (v == "batch")
        base.norm = NormKind::batch;
      else if (v == "instance")
        base.norm = NormKind::instance;
      else
        fail(errc::config_invalid, "norm must be batch|instance");
    } else if (key == "skip_fusion") {
      std::string v = detail::toml_unquote(val, key);
      if (v == "concat")
        base.skip_fusion = SkipFusion::concat;
      else if (v == "add")
        base.skip_fusion = SkipFusion::add;
      else
        fail(errc::config_invalid, "skip_fusion must be concat|add");
    } else if (key == "upsample") {
      std::string v = detail::toml_unquote(val, key);
      if (v == "bilinear")
        base.upsample = UpsampleKind::bilinear;
      else if (v == "tconv" || v == "transposed-conv")
        base.upsample = UpsampleKind::tconv;
      else
        fail(errc::config_invalid, "upsample must be bilinear|tconv");
    } else if (key == "activation") {
      std::string v = detail::toml_unquote(val, key);
      if (v == "prelu")
        base.activation = Activation::prelu;
      else if (v == "relu")
        base.activation = Activation::relu;
      else
        fail(errc::config_invalid, "activation must be prelu|relu");
    } else if (key == "model") {
      ModelKind k = parse_model_kind(detail::toml_unquote(val, key));
      if (kind_out) *kind_out = k;
    } else {
      fail(errc::config_invalid, "unknown key: " + key);
    }
  }
  return base;
}

inline std::string write_model_config(ModelKind kind, const ModelConfig& c) {
  std::ostringstream out;
  out << "model = \"" << model_kind_name(kind) << "\"\n";
  out << "task = \"" << task_name(c.task) << "\"\n";
  out << "in_channels = " << c.in_channels << "\n";
  out << "base_width = " << c.base_width << "\n";
  out << "num_scales = " << c.num_scales << "\n";
  out << "norm = \"" << (c.norm == NormKind::batch ? "batch" : "instance") << "\"\n";
  out << "skip_fusion = \"" << (c.skip_fusion == SkipFusion::concat ? "concat" : "add")
      << "\"\n";
  out << "upsample = \"" << (c.upsample == UpsampleKind::bilinear ? "bilinear" : "tconv")
      << "\"\n";
  out << "activation = \"" << (c.activation == Activation::prelu ? "prelu" : "relu")
      << "\"\n";
  return out.str();
}

}  // namespace ibunet
