#pragma once

// Training loop (Adam + MSE), per-epoch evaluation, and bit-exact
// checkpointing. Batch sampling is counter-based: the index stream is a
// concatenation of per-epoch-of-data permutations, each derived from
// (seed, block index), so a resumed run replays the identical stream.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "ibunet/dataset.hpp"
#include "ibunet/error.hpp"
#include "ibunet/metrics.hpp"
#include "ibunet/model.hpp"
#include "ibunet/npy.hpp"
#include "ibunet/rng.hpp"
#include "ibunet/tensor.hpp"

namespace ibunet {

struct TrainConfig {
  int batch_size = 16;
  int iterations_per_epoch = 1000;
  int epochs = 200;
  double learning_rate = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  uint64_t seed = 0;
  int eval_every = 1;          // epochs between evaluations/checkpoints
  std::string checkpoint_dir;  // empty = no checkpoints written
};

struct EpochRow {
  int epoch = 0;  // 1-based
  double loss = 0;
  bool has_metrics = false;
  double avg_nrmse = 0, avg_ssim = 0;
  bool has_auc = false;
  double auc_value = 0;
};

/// Optimizer moments (one pair per learnable param, in store order) plus the
/// global step counter and eval-point metric history.
struct TrainState {
  int64_t step = 0;
  std::vector<std::vector<float>> m, v;
  std::vector<EpochRow> history;
};

namespace detail {

/// Infinite sample-index stream: position p yields perm[p/n][p%n], where
/// perm[k] is a Fisher-Yates shuffle seeded from (seed, k).
class SampleStream {
 public:
  SampleStream(uint64_t seed, size_t n) : seed_(seed), n_(n) {}
  size_t at(uint64_t pos) {
    uint64_t k = pos / n_;
    if (k != block_) {
      perm_.resize(n_);
      for (size_t q = 0; q < n_; ++q) perm_[q] = q;
      Rng rng(mix64(seed_ ^ 0x7368756666ULL) ^ mix64(k));
      rng.shuffle(perm_);
      block_ = k;
    }
    return perm_[pos % n_];
  }

 private:
  uint64_t seed_;
  size_t n_;
  uint64_t block_ = UINT64_MAX;
  std::vector<size_t> perm_;
};

inline void validate_train_config(const TrainConfig& c, size_t dataset_size) {
  require(c.batch_size > 0 && c.iterations_per_epoch > 0 && c.epochs > 0 &&
              c.learning_rate >= 0 && c.eval_every > 0 && c.eps > 0,
          errc::config_invalid, "train config fields must be positive");
  require(size_t(c.batch_size) <= dataset_size, errc::config_invalid,
          "batch_size exceeds dataset size");
}

}  // namespace detail

template <typename T>
TrainState init_train_state(const Model<T>& model) {
  TrainState s;
  for (const auto& p : model.params.items())
    if (p.learnable) {
      s.m.emplace_back(p.tensor->size(), 0.0f);
      s.v.emplace_back(p.tensor->size(), 0.0f);
    }
  return s;
}

/// One Adam update over all learnable params; `t` is the 1-based step count
/// for bias correction. A zero gradient on a fresh state leaves the param
/// untouched.
inline void adam_step(Model<float>& model, TrainState& state, const TrainConfig& cfg) {
  int64_t t = state.step + 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, double(t));
  double bc2 = 1.0 - std::pow(cfg.beta2, double(t));
  size_t k = 0;
  for (auto& p : model.params.items()) {
    if (!p.learnable) continue;
    auto& m = state.m[k];
    auto& v = state.v[k];
    ++k;
    for (size_t q = 0; q < p.tensor->size(); ++q) {
      double g = double(p.tensor->g[q]);
      double md = cfg.beta1 * double(m[q]) + (1 - cfg.beta1) * g;
      double vd = cfg.beta2 * double(v[q]) + (1 - cfg.beta2) * g * g;
      m[q] = float(md);
      v[q] = float(vd);
      double update = cfg.learning_rate * (md / bc1) / (std::sqrt(vd / bc2) + cfg.eps);
      p.tensor->v[q] = float(double(p.tensor->v[q]) - update);
    }
  }
  ++state.step;
}

/// Metrics for a prediction set: per-sample NRMSE/SSIM plus their averages;
/// for DRC additionally the pooled-pixel ROC (ground truth: raw label > 0),
/// AUC, top-left threshold, and confusion at that threshold.
inline MetricsReport evaluate_predictions(const std::vector<Tensor4<float>>& preds,
                                          const std::vector<Sample>& data, Task task) {
  require(preds.size() == data.size(), errc::shape_mismatch,
          "one prediction per sample required");
  MetricsReport rep;
  std::vector<double> all_scores;
  std::vector<int> all_labels;
  for (size_t k = 0; k < data.size(); ++k) {
    const Sample& s = data[k];
    require(preds[k].size() == s.label.size(), errc::shape_mismatch,
            "prediction/label size mismatch for " + s.id);
    std::vector<double> y(s.label.v.begin(), s.label.v.end());
    std::vector<double> yhat(preds[k].v.begin(), preds[k].v.end());
    rep.sample_ids.push_back(s.id);
    rep.nrmse_per_sample.push_back(nrmse(y, yhat));
    rep.ssim_per_sample.push_back(ssim(y, yhat, s.label.h, s.label.w, 1.0));
    if (task == Task::drc) {
      all_scores.insert(all_scores.end(), yhat.begin(), yhat.end());
      for (double lv : y) all_labels.push_back(lv > 0 ? 1 : 0);
    }
  }
  double sn = 0, ss = 0;
  for (size_t q = 0; q < rep.nrmse_per_sample.size(); ++q) {
    sn += rep.nrmse_per_sample[q];
    ss += rep.ssim_per_sample[q];
  }
  rep.avg_nrmse = rep.nrmse_per_sample.empty() ? 0 : sn / rep.nrmse_per_sample.size();
  rep.avg_ssim = rep.ssim_per_sample.empty() ? 0 : ss / rep.ssim_per_sample.size();
  if (task == Task::drc) {
    rep.has_roc = true;
    rep.roc = roc_curve(all_scores, all_labels);
    rep.auc_value = auc(rep.roc);
    rep.optimal_thresh = optimal_threshold(rep.roc);
    rep.confusion_at_optimal = confusion(all_scores, all_labels, rep.optimal_thresh);
  }
  return rep;
}

/// Runs the model over the dataset in eval mode (tracking off) and scores the
/// predictions.
inline MetricsReport evaluate(Model<float>& model, const std::vector<Sample>& data,
                              Task task) {
  model.params.set_tracking(false);
  std::vector<Tensor4<float>> preds;
  preds.reserve(data.size());
  for (const Sample& s : data) {
    Tape<float> tape;
    auto x = std::make_shared<Tensor4<float>>(s.features);
    preds.push_back(*forward(model, tape, x, /*training=*/false));
  }
  return evaluate_predictions(preds, data, task);
}

// ---- checkpointing -----------------------------------------------------------

namespace detail {

inline NpyArray tensor_to_npy(const Tensor4<float>& t) {
  NpyArray a;
  a.shape = {size_t(t.n), size_t(t.c), size_t(t.h), size_t(t.w)};
  a.data = t.v;
  return a;
}

}  // namespace detail

inline void save_checkpoint(const Model<float>& model, const TrainState& state,
                            const std::string& dir, int epoch, uint64_t seed) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  fs::create_directories(dir + "/optimizer");

  std::ofstream index(dir + "/index.txt");
  require(index.good(), errc::io_error, "cannot write " + dir + "/index.txt");
  size_t k = 0;
  for (const auto& p : model.params.items()) {
    save_npy(dir + "/" + p.name + ".npy", detail::tensor_to_npy(*p.tensor));
    index << p.name << "\t(" << p.tensor->n << "," << p.tensor->c << "," << p.tensor->h
          << "," << p.tensor->w << ")\n";
    if (p.learnable) {
      NpyArray m, v;
      m.shape = {state.m[k].size()};
      m.data = state.m[k];
      v.shape = {state.v[k].size()};
      v.data = state.v[k];
      save_npy(dir + "/optimizer/" + p.name + ".m.npy", m);
      save_npy(dir + "/optimizer/" + p.name + ".v.npy", v);
      ++k;
    }
  }

  std::ofstream st(dir + "/state.txt");
  st << "step " << state.step << "\n";
  st << "epoch " << epoch << "\n";
  st << "seed " << seed << "\n";
  require(st.good(), errc::io_error, "cannot write " + dir + "/state.txt");

  std::ofstream mc(dir + "/model.toml");
  mc << write_model_config(model.spec.kind, model.spec.config);
}

struct CheckpointInfo {
  int64_t step = 0;
  int epoch = 0;
  uint64_t seed = 0;
  ModelKind kind = ModelKind::ibunet;
  ModelConfig config;
};

inline CheckpointInfo read_checkpoint_info(const std::string& dir) {
  CheckpointInfo info;
  std::ifstream mc(dir + "/model.toml");
  require(mc.good(), errc::io_error, "missing " + dir + "/model.toml");
  std::stringstream ss;
  ss << mc.rdbuf();
  info.config = parse_model_config(ss.str(), ModelConfig{}, &info.kind);

  std::ifstream st(dir + "/state.txt");
  require(st.good(), errc::io_error, "missing " + dir + "/state.txt");
  std::string key;
  while (st >> key) {
    if (key == "step")
      st >> info.step;
    else if (key == "epoch")
      st >> info.epoch;
    else if (key == "seed")
      st >> info.seed;
    else
      fail(errc::parse_error, "unknown state.txt key " + key);
  }
  return info;
}

inline void load_params(const std::string& dir, Model<float>& model) {
  for (auto& p : model.params.items()) {
    NpyArray a = load_npy(dir + "/" + p.name + ".npy");
    require(a.elems() == p.tensor->size(), errc::shape_mismatch,
            "checkpoint param " + p.name + " has wrong size");
    p.tensor->v = a.data;
  }
}

/// Rebuilds the model and optimizer state exactly as saved.
inline std::pair<Model<float>, TrainState> load_checkpoint(const std::string& dir,
                                                           CheckpointInfo* info_out = nullptr) {
  CheckpointInfo info = read_checkpoint_info(dir);
  Model<float> model = build_model<float>(info.kind, info.config, info.seed);
  load_params(dir, model);
  TrainState state = init_train_state(model);
  state.step = info.step;
  size_t k = 0;
  for (const auto& p : model.params.items()) {
    if (!p.learnable) continue;
    NpyArray m = load_npy(dir + "/optimizer/" + p.name + ".m.npy");
    NpyArray v = load_npy(dir + "/optimizer/" + p.name + ".v.npy");
    require(m.elems() == state.m[k].size() && v.elems() == state.v[k].size(),
            errc::shape_mismatch, "optimizer state size mismatch for " + p.name);
    state.m[k] = m.data;
    state.v[k] = v.data;
    ++k;
  }
  if (info_out) *info_out = info;
  return {std::move(model), std::move(state)};
}

// ---- training loop -----------------------------------------------------------

struct TrainHooks {
  /// Called after every optimizer step with the batch loss; return false to
  /// stop training early.
  std::function<bool(int64_t step, float loss)> on_step;
};

inline void write_curve_header(std::ostream& out) {
  out << "epoch,loss,avg_nrmse,avg_ssim,auc\n";
}

inline void write_curve_row(std::ostream& out, const EpochRow& r) {
  out << r.epoch << "," << r.loss << ",";
  if (r.has_metrics) out << r.avg_nrmse;
  out << ",";
  if (r.has_metrics) out << r.avg_ssim;
  out << ",";
  if (r.has_metrics && r.has_auc) out << r.auc_value;
  out << "\n";
}

/// Runs epochs x iterations_per_epoch Adam steps of MSE loss. Deterministic
/// for a given (seed, config, data): fixed init, fixed shuffle stream, serial
/// arithmetic. Evaluation (and checkpointing, when a directory is set)
/// happens every eval_every epochs against `eval_data` (or the training set
/// when null). Aborts with NonFinite naming the offending step if the loss or
/// any gradient goes NaN/Inf. Resume: pass the state loaded from a
/// checkpoint; the run continues at state.step as if never interrupted.
inline TrainState train(Model<float>& model, const std::vector<Sample>& data,
                        const std::vector<Sample>* eval_data, const TrainConfig& cfg,
                        std::ostream* curve = nullptr, const TrainHooks& hooks = {},
                        TrainState resume = {}) {
  detail::validate_train_config(cfg, data.size());
  for (const Sample& s : data) {
    require(s.features.c > 0 && s.features.h == data[0].features.h &&
                s.features.w == data[0].features.w,
            errc::shape_mismatch, "dataset samples disagree on shape");
  }
  TrainState state = std::move(resume);
  if (state.m.empty()) state = init_train_state(model);

  const int C = data[0].features.c, H = data[0].features.h, W = data[0].features.w;
  detail::SampleStream stream(cfg.seed, data.size());
  if (curve && state.step == 0) write_curve_header(*curve);

  const Task task = model.spec.config.task;
  int64_t total_steps = int64_t(cfg.epochs) * cfg.iterations_per_epoch;
  bool stopped = false;
  int start_epoch = int(state.step / cfg.iterations_per_epoch);

  for (int epoch = start_epoch; epoch < cfg.epochs && !stopped; ++epoch) {
    model.params.set_tracking(true);
    double epoch_loss = 0;
    int steps_this_epoch = 0;
    int64_t iter0 = state.step % cfg.iterations_per_epoch;
    for (int64_t it = iter0; it < cfg.iterations_per_epoch && !stopped; ++it) {
      auto x = make_tensor<float>(cfg.batch_size, C, H, W);
      auto y = make_tensor<float>(cfg.batch_size, 1, H, W);
      uint64_t base = uint64_t(state.step) * cfg.batch_size;
      for (int b = 0; b < cfg.batch_size; ++b) {
        const Sample& s = data[stream.at(base + b)];
        std::copy(s.features.v.begin(), s.features.v.end(),
                  x->v.begin() + size_t(b) * C * H * W);
        std::copy(s.label.v.begin(), s.label.v.end(), y->v.begin() + size_t(b) * H * W);
      }

      model.params.zero_grads();
      Tape<float> tape;
      TensorPtr<float> loss;
      try {
        auto out = forward(model, tape, x, /*training=*/true);
        loss = mse_loss(tape, out, y);
        tape.backward_from(*loss);
      } catch (const Error& e) {
        if (e.code() == errc::non_finite)
          fail(errc::non_finite, std::string(e.what()) + " at step " +
                                     std::to_string(state.step));
        throw;
      }
      if (!std::isfinite(loss->v[0]))
        fail(errc::non_finite, "loss at step " + std::to_string(state.step));
      for (const auto& p : model.params.items())
        if (p.learnable)
          for (float g : p.tensor->g)
            if (!std::isfinite(g))
              fail(errc::non_finite,
                   "gradient of " + p.name + " at step " + std::to_string(state.step));

      adam_step(model, state, cfg);
      epoch_loss += double(loss->v[0]);
      ++steps_this_epoch;
      if (hooks.on_step && !hooks.on_step(state.step, loss->v[0])) stopped = true;
    }

    EpochRow row;
    row.epoch = epoch + 1;
    row.loss = steps_this_epoch ? epoch_loss / steps_this_epoch : 0.0;
    bool at_eval = ((epoch + 1) % cfg.eval_every == 0) || epoch + 1 == cfg.epochs ||
                   state.step == total_steps || stopped;
    if (at_eval) {
      MetricsReport rep = evaluate(model, eval_data ? *eval_data : data, task);
      row.has_metrics = true;
      row.avg_nrmse = rep.avg_nrmse;
      row.avg_ssim = rep.avg_ssim;
      row.has_auc = rep.has_roc;
      row.auc_value = rep.auc_value;
      state.history.push_back(row);
      if (!cfg.checkpoint_dir.empty())
        save_checkpoint(model, state, cfg.checkpoint_dir + "/last", epoch + 1, cfg.seed);
    }
    if (curve) write_curve_row(*curve, row);
  }
  return state;
}

}  // namespace ibunet
