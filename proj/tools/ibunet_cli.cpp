// Command-line front end: layout synthesis, feature extraction, training,
// evaluation, prediction, gradient checking, and parameter accounting.
// Exit codes: 0 success, 1 usage/config, 2 data error, 3 numeric failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "ibunet/dataset.hpp"
#include "ibunet/error.hpp"
#include "ibunet/features.hpp"
#include "ibunet/gradcheck_suite.hpp"
#include "ibunet/grid.hpp"
#include "ibunet/model.hpp"
#include "ibunet/npy.hpp"
#include "ibunet/train.hpp"

namespace fs = std::filesystem;
using namespace ibunet;

namespace {

int exit_code_for(errc c) {
  switch (c) {
    case errc::config_invalid:
      return 1;
    case errc::non_finite:
      return 3;
    default:
      return 2;
  }
}

std::string read_file(const std::string& path) {
  std::ifstream f(path);
  require(f.good(), errc::io_error, "cannot open: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// key = value pairs from a flat TOML-style file
std::vector<std::pair<std::string, std::string>> read_kv(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(text);
  std::string raw;
  while (std::getline(in, raw)) {
    std::string line = ibunet::detail::toml_strip(raw);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    require(eq != std::string::npos, errc::config_invalid, "expected key = value: " + line);
    out.emplace_back(ibunet::detail::toml_strip(line.substr(0, eq)),
                     ibunet::detail::toml_strip(line.substr(eq + 1)));
  }
  return out;
}

double kv_num(const std::string& key, const std::string& val) {
  try {
    size_t pos;
    double v = std::stod(val, &pos);
    require(pos == val.size(), errc::config_invalid, "key " + key + ": not a number");
    return v;
  } catch (const Error&) {
    throw;
  } catch (...) {
    fail(errc::config_invalid, "key " + key + ": not a number");
  }
}

void print_threads() {
  const char* env = std::getenv("IBUNET_THREADS");
  int bound = env ? std::atoi(env) : 0;
  // the numeric core is serial; any requested bound >= 1 is honored trivially
  std::cout << "threads: 1 (IBUNET_THREADS=" << (env ? env : "auto")
            << ", bound " << (bound > 0 ? bound : 1) << ")\n";
}

SynthProfile profile_from_file(const std::string& path) {
  SynthProfile p;
  for (auto& [key, val] : read_kv(read_file(path))) {
    if (key == "width")
      p.width = kv_num(key, val);
    else if (key == "height")
      p.height = kv_num(key, val);
    else if (key == "tile")
      p.tile = kv_num(key, val);
    else if (key == "macros")
      p.macro_count = int(kv_num(key, val));
    else if (key == "cells")
      p.cell_count = int(kv_num(key, val));
    else if (key == "nets")
      p.net_count = int(kv_num(key, val));
    else if (key == "pins_min")
      p.pins_min = int(kv_num(key, val));
    else if (key == "pins_max")
      p.pins_max = int(kv_num(key, val));
    else if (key == "total_tracks")
      p.total_tracks = int(kv_num(key, val));
    else
      fail(errc::config_invalid, "unknown profile key: " + key);
  }
  return p;
}

// Splits a combined config file into the model part (handled by
// parse_model_config) and TrainConfig fields.
void apply_config_file(const std::string& path, ModelConfig& mc, ModelKind* kind,
                       TrainConfig& tc) {
  static const std::set<std::string> model_keys = {
      "model",      "task",        "in_channels", "base_width", "num_scales",
      "norm",       "skip_fusion", "upsample",    "activation"};
  std::string model_part;
  for (auto& [key, val] : read_kv(read_file(path))) {
    if (model_keys.count(key)) {
      model_part += key + " = " + val + "\n";
    } else if (key == "batch_size") {
      tc.batch_size = int(kv_num(key, val));
    } else if (key == "iterations_per_epoch") {
      tc.iterations_per_epoch = int(kv_num(key, val));
    } else if (key == "epochs") {
      tc.epochs = int(kv_num(key, val));
    } else if (key == "learning_rate") {
      tc.learning_rate = kv_num(key, val);
    } else if (key == "beta1") {
      tc.beta1 = kv_num(key, val);
    } else if (key == "beta2") {
      tc.beta2 = kv_num(key, val);
    } else if (key == "eps") {
      tc.eps = kv_num(key, val);
    } else if (key == "seed") {
      tc.seed = uint64_t(kv_num(key, val));
    } else if (key == "eval_every") {
      tc.eval_every = int(kv_num(key, val));
    } else {
      fail(errc::config_invalid, "unknown config key: " + key);
    }
  }
  mc = parse_model_config(model_part, mc, kind);
}

void print_model_config(ModelKind kind, const ModelConfig& c) {
  std::cout << "resolved model config:\n" << write_model_config(kind, c);
}

void print_train_config(const TrainConfig& c) {
  std::cout << "resolved train config:\n"
            << "batch_size = " << c.batch_size << "\n"
            << "iterations_per_epoch = " << c.iterations_per_epoch << "\n"
            << "epochs = " << c.epochs << "\n"
            << "learning_rate = " << c.learning_rate << "\n"
            << "beta1 = " << c.beta1 << "\nbeta2 = " << c.beta2 << "\neps = " << c.eps
            << "\n"
            << "eval_every = " << c.eval_every << "\n"
            << "seed = " << c.seed << "\n";
}

// per-stage parameter table rows: (stage prefix, learnable element count)
std::vector<std::pair<std::string, size_t>> stage_counts(const ModelSpec& spec) {
  std::vector<std::pair<std::string, size_t>> rows;
  std::map<std::string, size_t> index;
  for (const auto& [name, dims] : spec.param_shapes) {
    if (name.find(".running_") != std::string::npos) continue;
    std::string stage = name.substr(0, name.find('.'));
    if (!index.count(stage)) {
      index[stage] = rows.size();
      rows.push_back({stage, 0});
    }
    rows[index[stage]].second += size_t(dims[0]) * dims[1] * dims[2] * dims[3];
  }
  return rows;
}

Sample sample_from_files(const std::string& features_path) {
  NpyArray a = load_npy(features_path);
  require(a.shape.size() == 3, errc::shape_mismatch, "features must be (c, h, w)");
  Sample s;
  s.features.n = 1;
  s.features.c = int(a.shape[0]);
  s.features.h = int(a.shape[1]);
  s.features.w = int(a.shape[2]);
  s.features.v = a.data;
  return s;
}

// ---- subcommands -------------------------------------------------------------

struct SynthArgs {
  uint64_t seed = 0;
  std::string out, profile_file;
  SynthProfile flags;  // flag overrides, applied over the profile file
  bool has[9] = {};
};

int cmd_synth(const SynthArgs& a) {
  SynthProfile p = a.profile_file.empty() ? SynthProfile{} : profile_from_file(a.profile_file);
  if (a.has[0]) p.width = a.flags.width;
  if (a.has[1]) p.height = a.flags.height;
  if (a.has[2]) p.tile = a.flags.tile;
  if (a.has[3]) p.macro_count = a.flags.macro_count;
  if (a.has[4]) p.cell_count = a.flags.cell_count;
  if (a.has[5]) p.net_count = a.flags.net_count;
  if (a.has[6]) p.pins_min = a.flags.pins_min;
  if (a.has[7]) p.pins_max = a.flags.pins_max;
  if (a.has[8]) p.total_tracks = a.flags.total_tracks;

  std::cout << "resolved profile: width=" << p.width << " height=" << p.height
            << " tile=" << p.tile << " macros=" << p.macro_count
            << " cells=" << p.cell_count << " nets=" << p.net_count << " pins=["
            << p.pins_min << "," << p.pins_max << "] tracks=" << p.total_tracks
            << " seed=" << a.seed << "\n";
  Layout L = synth_layout(a.seed, p);
  save_layout(a.out, L);
  std::cout << "wrote " << a.out << " (" << L.nets.size() << " nets, " << L.cells.size()
            << " cells, " << L.macros.size() << " macros)\n";
  return 0;
}

int cmd_extract(const std::string& layout_path, const std::string& task_str,
                const std::string& out_dir) {
  Task task = parse_task(task_str);
  Layout L = load_layout(layout_path);
  std::cout << "resolved config: layout=" << layout_path << " task=" << task_name(task)
            << " grid=" << L.grid.tiles_x << "x" << L.grid.tiles_y << "\n";
  FeatureStack st = stack_features(task, L, L.grid);
  FeatureMap label = make_label(L, L.grid);
  fs::create_directories(out_dir);
  save_npy(out_dir + "/features.npy", stack_to_npy(st));
  save_npy(out_dir + "/label.npy", map_to_npy(label));
  std::cout << "channels (" << st.channels.size() << "):";
  for (const FeatureMap& m : st.channels) std::cout << " " << m.name;
  std::cout << "\nwrote " << out_dir << "/features.npy and " << out_dir << "/label.npy\n";
  return 0;
}

struct TrainArgs {
  std::string model = "ibunet", task = "rc", manifest, eval_manifest, config, out, resume;
  bool normalize = false;
  // flag overrides (negative/zero = not set)
  int epochs = -1, iters = -1, batch = -1, eval_every = -1, base_width = -1;
  double lr = -1;
  int64_t seed = -1;
};

int cmd_train(const TrainArgs& a) {
  ModelKind kind = parse_model_kind(a.model);
  Task task = parse_task(a.task);
  ModelConfig mc = default_config(kind, task);
  TrainConfig tc;
  if (!a.config.empty()) apply_config_file(a.config, mc, &kind, tc);
  // flags win over the config file
  if (a.epochs > 0) tc.epochs = a.epochs;
  if (a.iters > 0) tc.iterations_per_epoch = a.iters;
  if (a.batch > 0) tc.batch_size = a.batch;
  if (a.eval_every > 0) tc.eval_every = a.eval_every;
  if (a.lr >= 0) tc.learning_rate = a.lr;
  if (a.seed >= 0) tc.seed = uint64_t(a.seed);
  if (a.base_width > 0) mc.base_width = a.base_width;
  require(mc.task == task, errc::config_invalid, "config task disagrees with --task");

  print_model_config(kind, mc);
  print_train_config(tc);

  Manifest man = read_manifest(a.manifest, "train");
  std::vector<Sample> data = load_dataset(man, task, a.normalize);
  std::vector<Sample> eval_data;
  if (!a.eval_manifest.empty())
    eval_data = load_dataset(read_manifest(a.eval_manifest, "test"), task, a.normalize);
  std::cout << "dataset: " << data.size() << " train"
            << (eval_data.empty() ? "" : ", " + std::to_string(eval_data.size()) + " eval")
            << "\n";

  Model<float> model = build_model<float>(kind, mc, tc.seed);
  TrainState state;
  if (!a.resume.empty()) {
    CheckpointInfo info;
    auto loaded = load_checkpoint(a.resume, &info);
    require(info.seed == tc.seed, errc::config_invalid,
            "resume checkpoint was trained with a different seed");
    model = std::move(loaded.first);
    state = std::move(loaded.second);
    std::cout << "resumed from " << a.resume << " at step " << state.step << "\n";
  }

  fs::create_directories(a.out);
  tc.checkpoint_dir = a.out;
  std::ofstream curve(a.out + "/curve.csv", state.step == 0 ? std::ios::trunc : std::ios::app);
  TrainHooks hooks{[](int64_t step, float loss) {
    if (step % 50 == 0) std::cout << "step " << step << " loss " << loss << "\n";
    return true;
  }};
  state = train(model, data, eval_data.empty() ? nullptr : &eval_data, tc, &curve, hooks,
                std::move(state));
  std::cout << "done: " << state.step << " steps, checkpoints in " << a.out
            << "/last, curve in " << a.out << "/curve.csv\n";
  if (!state.history.empty()) {
    const EpochRow& r = state.history.back();
    std::cout << "final: loss " << r.loss << " avg_nrmse " << r.avg_nrmse << " avg_ssim "
              << r.avg_ssim;
    if (r.has_auc) std::cout << " auc " << r.auc_value;
    std::cout << "\n";
  }
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& manifest_path,
             const std::string& task_str, const std::string& out_dir, bool normalize) {
  CheckpointInfo info;
  auto [model, state] = load_checkpoint(checkpoint, &info);
  Task task = task_str.empty() ? info.config.task : parse_task(task_str);
  require(task == info.config.task, errc::config_invalid,
          "--task disagrees with the checkpoint's task");
  print_model_config(info.kind, info.config);
  std::cout << "checkpoint step " << state.step << " seed " << info.seed << "\n";

  std::vector<Sample> data = load_dataset(read_manifest(manifest_path, "test"), task, normalize);
  MetricsReport rep = evaluate(model, data, task);

  fs::create_directories(out_dir);
  {
    std::ofstream f(out_dir + "/report.csv");
    f << "sample_id,nrmse,ssim\n";
    for (size_t k = 0; k < rep.sample_ids.size(); ++k)
      f << rep.sample_ids[k] << "," << std::setprecision(10) << rep.nrmse_per_sample[k]
        << "," << rep.ssim_per_sample[k] << "\n";
    f << "avg," << rep.avg_nrmse << "," << rep.avg_ssim << "\n";
  }
  if (rep.has_roc) {
    std::ofstream f(out_dir + "/roc.csv");
    f << "threshold,fpr,tpr\n";
    for (const RocPoint& p : rep.roc)
      f << std::setprecision(10) << p.threshold << "," << p.fpr << "," << p.tpr << "\n";
  }
  std::cout << "Avg NRMSE " << rep.avg_nrmse << " / Avg SSIM " << rep.avg_ssim;
  if (rep.has_roc)
    std::cout << " / AUC " << rep.auc_value << " (optimal threshold " << rep.optimal_thresh
              << ", TP " << rep.confusion_at_optimal.tp << " FP "
              << rep.confusion_at_optimal.fp << " TN " << rep.confusion_at_optimal.tn
              << " FN " << rep.confusion_at_optimal.fn << ")";
  std::cout << "\nreports in " << out_dir << "\n";
  return 0;
}

int cmd_predict(const std::string& checkpoint, const std::string& features,
                const std::string& out) {
  CheckpointInfo info;
  auto [model, state] = load_checkpoint(checkpoint, &info);
  print_model_config(info.kind, info.config);
  std::cout << "checkpoint step " << state.step << " seed " << info.seed << "\n";
  Sample s = sample_from_files(features);
  model.params.set_tracking(false);
  Tape<float> tape;
  auto x = std::make_shared<Tensor4<float>>(s.features);
  auto y = forward(model, tape, x, /*training=*/false);
  NpyArray a;
  a.shape = {1, size_t(y->h), size_t(y->w)};
  a.data = y->v;
  save_npy(out, a);
  std::cout << "wrote " << out << " (1, " << y->h << ", " << y->w << ")\n";
  return 0;
}

int cmd_gradcheck(const std::string& op, uint64_t seed) {
  std::cout << "gradcheck seed " << seed << "\n";
  auto checks = standard_op_checks(seed);
  checks.push_back(model_check(seed));
  bool all_pass = true;
  bool matched = false;
  std::cout << std::left << std::setw(22) << "op" << std::setw(14) << "max_rel_err"
            << std::setw(10) << "limit" << "result\n";
  for (auto& c : checks) {
    if (op != "all" && c.name != op) continue;
    matched = true;
    double err = c.run();
    bool pass = err <= c.limit;
    all_pass = all_pass && pass;
    std::cout << std::left << std::setw(22) << c.name << std::setw(14)
              << std::scientific << std::setprecision(3) << err << std::setw(10)
              << c.limit << (pass ? "PASS" : "FAIL") << "\n"
              << std::defaultfloat;
  }
  require(matched, errc::config_invalid, "unknown op: " + op);
  return all_pass ? 0 : 3;
}

int cmd_params(const std::string& config_path, const std::string& task_str) {
  Task task = parse_task(task_str);
  ModelConfig mi = default_config(ModelKind::ibunet, task);
  ModelConfig mb = default_config(ModelKind::baseline, task);
  if (!config_path.empty()) {
    // config overrides apply to the ibunet column; the baseline stays at its
    // defaults for comparison
    TrainConfig ignored;
    ModelKind k = ModelKind::ibunet;
    apply_config_file(config_path, mi, &k, ignored);
  }
  print_model_config(ModelKind::ibunet, mi);
  print_model_config(ModelKind::baseline, mb);

  auto ib = build_ibunet<float>(mi, 0);
  auto base = build_routenet_baseline<float>(mb, 0);
  auto ri = stage_counts(ib.spec);
  auto rb = stage_counts(base.spec);
  std::cout << std::left << std::setw(10) << "stage" << std::setw(14) << "ibunet"
            << std::setw(14) << "baseline" << "\n";
  size_t rows = std::max(ri.size(), rb.size());
  for (size_t k = 0; k < rows; ++k) {
    std::string si = k < ri.size() ? ri[k].first + " " + std::to_string(ri[k].second) : "";
    std::string sb = k < rb.size() ? rb[k].first + " " + std::to_string(rb[k].second) : "";
    std::cout << std::left << std::setw(24) << si << sb << "\n";
  }
  size_t pi = param_count(ib.spec), pb = param_count(base.spec);
  std::cout << "total ibunet " << pi << "\ntotal baseline " << pb << "\nratio "
            << double(pi) / double(pb) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"routability prediction toolkit (ibUNet + RouteNet-style baseline)"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "generate a synthetic layout");
  synth->add_option("--seed", sa.seed, "RNG seed");
  synth->add_option("--out", sa.out, "output layout file")->required();
  synth->add_option("--profile", sa.profile_file, "profile TOML file");
  auto* ow = synth->add_option("--width", sa.flags.width);
  auto* oh = synth->add_option("--height", sa.flags.height);
  auto* ot = synth->add_option("--tile", sa.flags.tile);
  auto* om = synth->add_option("--macros", sa.flags.macro_count);
  auto* oc = synth->add_option("--cells", sa.flags.cell_count);
  auto* on = synth->add_option("--nets", sa.flags.net_count);
  auto* opn = synth->add_option("--pins-min", sa.flags.pins_min);
  auto* opx = synth->add_option("--pins-max", sa.flags.pins_max);
  auto* otr = synth->add_option("--tracks", sa.flags.total_tracks);

  std::string ex_layout, ex_task, ex_out;
  auto* extract = app.add_subcommand("extract", "compute feature stacks from a layout");
  extract->add_option("--layout", ex_layout)->required();
  extract->add_option("--task", ex_task, "rc|drc")->required();
  extract->add_option("--out-dir", ex_out)->required();

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "train a model");
  tr->add_option("--model", ta.model, "ibunet|baseline");
  tr->add_option("--task", ta.task, "rc|drc");
  tr->add_option("--manifest", ta.manifest)->required();
  tr->add_option("--eval-manifest", ta.eval_manifest);
  tr->add_option("--config", ta.config, "TOML config (model + train keys)");
  tr->add_option("--out", ta.out, "output directory")->required();
  tr->add_option("--resume", ta.resume, "checkpoint directory to resume from");
  tr->add_flag("--normalize", ta.normalize, "min-max normalize features on load");
  tr->add_option("--epochs", ta.epochs);
  tr->add_option("--iters", ta.iters, "iterations per epoch");
  tr->add_option("--batch", ta.batch);
  tr->add_option("--eval-every", ta.eval_every);
  tr->add_option("--base-width", ta.base_width);
  tr->add_option("--lr", ta.lr);
  tr->add_option("--seed", ta.seed);

  std::string ev_ckpt, ev_manifest, ev_task, ev_out = ".";
  bool ev_norm = false;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a manifest");
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--manifest", ev_manifest)->required();
  ev->add_option("--task", ev_task, "rc|drc (defaults to the checkpoint's)");
  ev->add_option("--out-dir", ev_out);
  ev->add_flag("--normalize", ev_norm);

  std::string pr_ckpt, pr_features, pr_out;
  auto* pr = app.add_subcommand("predict", "run inference on a feature stack");
  pr->add_option("--checkpoint", pr_ckpt)->required();
  pr->add_option("--features", pr_features)->required();
  pr->add_option("--out", pr_out)->required();

  std::string gc_op = "all";
  uint64_t gc_seed = 0;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  gc->add_option("--op", gc_op, "all or one operator name");
  gc->add_option("--seed", gc_seed);

  std::string pm_config, pm_task = "rc";
  auto* pm = app.add_subcommand("params", "parameter count table for both models");
  pm->add_option("--config", pm_config);
  pm->add_option("--task", pm_task, "rc|drc");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    print_threads();
    if (*synth) {
      bool* h = sa.has;
      h[0] = ow->count();
      h[1] = oh->count();
      h[2] = ot->count();
      h[3] = om->count();
      h[4] = oc->count();
      h[5] = on->count();
      h[6] = opn->count();
      h[7] = opx->count();
      h[8] = otr->count();
      return cmd_synth(sa);
    }
    if (*extract) return cmd_extract(ex_layout, ex_task, ex_out);
    if (*tr) return cmd_train(ta);
    if (*ev) return cmd_eval(ev_ckpt, ev_manifest, ev_task, ev_out, ev_norm);
    if (*pr) return cmd_predict(pr_ckpt, pr_features, pr_out);
    if (*gc) return cmd_gradcheck(gc_op, gc_seed);
    if (*pm) return cmd_params(pm_config, pm_task);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
