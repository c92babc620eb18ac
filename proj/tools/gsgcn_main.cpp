#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gsgcn/dataset.hpp"
#include "gsgcn/gradcheck.hpp"
#include "gsgcn/graph.hpp"
#include "gsgcn/metrics.hpp"
#include "gsgcn/model.hpp"
#include "gsgcn/pose.hpp"
#include "gsgcn/synth.hpp"
#include "gsgcn/training.hpp"

namespace fs = std::filesystem;
using namespace gsgcn;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;

// Minimal INI reader: [section] headers, key=value lines, '#'/';' comments.
using IniMap = std::map<std::string, std::map<std::string, std::string>>;

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

IniMap load_ini(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  IniMap map;
  std::string line, section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[' && line.back() == ']') {
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error(path + " line " + std::to_string(line_no) +
                               ": expected key=value");
    }
    map[section][trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return map;
}

// first --config/-c value in argv, if any (config applies before flag parsing
// so that explicit flags win)
std::string find_config_arg(int argc, char** argv) {
  for (int i = 1; i < argc - 1; ++i) {
    if (std::strcmp(argv[i], "--config") == 0) return argv[i + 1];
  }
  return "";
}

template <typename T>
void set_num(const std::map<std::string, std::string>& sec, const std::string& key, T& out) {
  auto it = sec.find(key);
  if (it == sec.end()) return;
  if constexpr (std::is_same_v<T, bool>) {
    out = it->second == "1" || it->second == "true" || it->second == "on";
  } else if constexpr (std::is_integral_v<T>) {
    out = static_cast<T>(std::stoll(it->second));
  } else {
    out = static_cast<T>(std::stod(it->second));
  }
}

void set_str(const std::map<std::string, std::string>& sec, const std::string& key,
             std::string& out) {
  auto it = sec.find(key);
  if (it != sec.end()) out = it->second;
}

void set_int_list(const std::map<std::string, std::string>& sec, const std::string& key,
                  std::vector<int>& out) {
  auto it = sec.find(key);
  if (it == sec.end()) return;
  out.clear();
  std::stringstream ss(it->second);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoi(trim(item)));
}

struct ModelOptions {
  std::string layout = "crowdpose14";
  int group_size = 3;
  int window_length = 64;
  int num_classes = 14;
  int channels1 = 96;
  int channels2 = 192;
  int fusion = 384;
  int scales = 8;
  bool no_speed = false;
  bool no_distance_embedding = false;

  ModelConfig to_config() const {
    ModelConfig c;
    c.layout = layout;
    c.group_size = group_size;
    c.in_channels = no_speed ? 3 : 5;
    c.window_length = window_length;
    c.num_classes = num_classes;
    c.extractor_channels1 = channels1;
    c.extractor_channels2 = channels2;
    c.fusion_channels = fusion;
    c.spatial_scales = scales;
    c.distance_embedding = !no_distance_embedding;
    return c;
  }
};

void apply_model_ini(const IniMap& ini, ModelOptions& m) {
  auto it = ini.find("model");
  if (it == ini.end()) return;
  const auto& sec = it->second;
  set_str(sec, "layout", m.layout);
  set_num(sec, "group_size", m.group_size);
  set_num(sec, "window_length", m.window_length);
  set_num(sec, "num_classes", m.num_classes);
  set_num(sec, "channels1", m.channels1);
  set_num(sec, "channels2", m.channels2);
  set_num(sec, "fusion_channels", m.fusion);
  set_num(sec, "spatial_scales", m.scales);
  set_num(sec, "no_speed", m.no_speed);
  set_num(sec, "no_distance_embedding", m.no_distance_embedding);
}

void add_model_options(CLI::App* cmd, ModelOptions& m) {
  cmd->add_option("--model.layout", m.layout, "skeleton layout name or layout .json file");
  cmd->add_option("--model.group_size", m.group_size, "persons per sample (M)");
  cmd->add_option("--model.window_length", m.window_length, "frames per sample (T)");
  cmd->add_option("--model.num_classes", m.num_classes, "action classes");
  cmd->add_option("--model.channels1", m.channels1, "first block output channels");
  cmd->add_option("--model.channels2", m.channels2, "second block output channels");
  cmd->add_option("--model.fusion_channels", m.fusion, "fusion block output channels");
  cmd->add_option("--model.spatial_scales", m.scales, "spatial scales (k-hop range)");
  cmd->add_flag("--model.no_speed", m.no_speed, "drop the two speed input channels");
  cmd->add_flag("--model.no_distance_embedding", m.no_distance_embedding,
                "disable the distance-gated embedding");
}

struct TrainOptions {
  TrainConfig cfg;
  int max_epochs = 200;
};

void apply_train_ini(const IniMap& ini, TrainOptions& t) {
  auto it = ini.find("train");
  if (it == ini.end()) return;
  const auto& sec = it->second;
  set_num(sec, "batch_size", t.cfg.batch_size);
  set_num(sec, "weight_decay", t.cfg.weight_decay);
  set_num(sec, "initial_lr", t.cfg.initial_lr);
  set_num(sec, "lr_decay_factor", t.cfg.lr_decay_factor);
  set_int_list(sec, "lr_milestones", t.cfg.lr_milestones);
  set_num(sec, "focal_gamma", t.cfg.focal_gamma);
  set_num(sec, "momentum", t.cfg.momentum);
  set_num(sec, "max_epochs", t.max_epochs);
  set_num(sec, "plateau_window", t.cfg.plateau_window);
  set_num(sec, "plateau_min_delta", t.cfg.plateau_min_delta);
  set_num(sec, "target_accuracy", t.cfg.target_accuracy);
  set_num(sec, "checkpoint_interval", t.cfg.checkpoint_interval);
  set_num(sec, "num_threads", t.cfg.num_threads);
  set_num(sec, "seed", t.cfg.seed);
}

void add_train_options(CLI::App* cmd, TrainOptions& t) {
  cmd->add_option("--train.batch_size", t.cfg.batch_size);
  cmd->add_option("--train.weight_decay", t.cfg.weight_decay);
  cmd->add_option("--train.initial_lr", t.cfg.initial_lr);
  cmd->add_option("--train.lr_decay_factor", t.cfg.lr_decay_factor);
  cmd->add_option("--train.lr_milestones", t.cfg.lr_milestones)->delimiter(',');
  cmd->add_option("--train.focal_gamma", t.cfg.focal_gamma);
  cmd->add_option("--train.momentum", t.cfg.momentum);
  cmd->add_option("--train.max_epochs", t.max_epochs);
  cmd->add_option("--train.plateau_window", t.cfg.plateau_window);
  cmd->add_option("--train.plateau_min_delta", t.cfg.plateau_min_delta);
  cmd->add_option("--train.target_accuracy", t.cfg.target_accuracy);
  cmd->add_option("--train.checkpoint_interval", t.cfg.checkpoint_interval);
  cmd->add_option("--train.num_threads", t.cfg.num_threads);
  cmd->add_option("--seed", t.cfg.seed, "run seed");
}

DatasetOptions data_options_for(const ModelConfig& mc) {
  DatasetOptions d;
  d.group_size = mc.group_size;
  d.window_length = mc.window_length;
  d.include_speed = mc.in_channels == 5;
  const SkeletonGraph g = build_skeleton_graph(
      mc.layout.ends_with(".json") ? "crowdpose14" : mc.layout);
  d.num_joints = g.num_joints;
  return d;
}

void write_config_echo(const ModelConfig& mc, const TrainConfig& tc, int max_epochs,
                       const std::string& out_dir) {
  std::ofstream f(out_dir + "/resolved_config.ini", std::ios::trunc);
  f << "[model]\n"
    << "layout=" << mc.layout << "\n"
    << "group_size=" << mc.group_size << "\n"
    << "in_channels=" << mc.in_channels << "\n"
    << "window_length=" << mc.window_length << "\n"
    << "num_classes=" << mc.num_classes << "\n"
    << "channels1=" << mc.extractor_channels1 << "\n"
    << "channels2=" << mc.extractor_channels2 << "\n"
    << "fusion_channels=" << mc.fusion_channels << "\n"
    << "spatial_scales=" << mc.spatial_scales << "\n"
    << "distance_embedding=" << (mc.distance_embedding ? 1 : 0) << "\n"
    << "[train]\n"
    << "batch_size=" << tc.batch_size << "\n"
    << "weight_decay=" << tc.weight_decay << "\n"
    << "initial_lr=" << tc.initial_lr << "\n"
    << "lr_decay_factor=" << tc.lr_decay_factor << "\n"
    << "lr_milestones=";
  for (size_t i = 0; i < tc.lr_milestones.size(); ++i) {
    f << (i ? "," : "") << tc.lr_milestones[i];
  }
  f << "\n"
    << "focal_gamma=" << tc.focal_gamma << "\n"
    << "momentum=" << tc.momentum << "\n"
    << "max_epochs=" << max_epochs << "\n"
    << "plateau_window=" << tc.plateau_window << "\n"
    << "plateau_min_delta=" << tc.plateau_min_delta << "\n"
    << "target_accuracy=" << tc.target_accuracy << "\n"
    << "checkpoint_interval=" << tc.checkpoint_interval << "\n"
    << "num_threads=" << tc.num_threads << "\n"
    << "seed=" << tc.seed << "\n";
}

int class_argmax(const Tensor& probs) {
  int arg = 0;
  for (std::int64_t c = 1; c < probs.numel(); ++c) {
    if (probs[c] > probs[arg]) arg = static_cast<int>(c);
  }
  return arg;
}

// detections/ground truths for frame-mAP: one box per reference frame,
// detection class = argmax with its probability as score
void collect_detections(const GsGcnModel& model, const std::vector<Sample>& samples,
                        std::vector<Detection>& dets, std::vector<Detection>& gts) {
  int frame_base = 0;
  for (const Sample& s : samples) {
    const Tensor probs = model.predict(s.input, s.distances, s.present);
    const int pred = class_argmax(probs);
    const double score = static_cast<double>(probs[pred]);
    for (size_t t = 0; t < s.reference_boxes.size(); ++t) {
      if (!s.reference_has_frame[t]) continue;
      // frames offset per sample so distinct videos never collide
      const int frame = frame_base + static_cast<int>(t);
      dets.push_back(Detection{frame, s.reference_boxes[t], pred, score});
      gts.push_back(Detection{frame, s.reference_boxes[t], s.label, 1.0});
    }
    frame_base += static_cast<int>(s.reference_boxes.size());
  }
}

int run_gen_data(const std::string& spec_path, const std::string& out_dir, std::uint32_t seed,
                 bool seed_given) {
  if (!fs::exists(spec_path)) {
    std::cerr << "error: spec not found: " << spec_path << "\n";
    return kExitUsage;
  }
  DatasetSpec spec;
  try {
    const IniMap ini = load_ini(spec_path);
    auto it = ini.find("");
    const auto& sec = it != ini.end() ? it->second : std::map<std::string, std::string>{};
    set_int_list(sec, "scenes_per_class", spec.scenes_per_class);
    set_num(sec, "t_len", spec.t_len);
    set_num(sec, "min_persons", spec.min_persons);
    set_num(sec, "max_persons", spec.max_persons);
    set_num(sec, "noise_sigma", spec.noise_sigma);
    set_num(sec, "drop_rate", spec.drop_rate);
    set_num(sec, "distractor_prob", spec.distractor_prob);
    set_num(sec, "skew", spec.skew);
    set_num(sec, "eval_every", spec.eval_every);
    set_num(sec, "seed", spec.seed);
  } catch (const std::exception& e) {
    std::cerr << "error: bad dataset spec: " << e.what() << "\n";
    return kExitUsage;
  }
  if (seed_given) spec.seed = seed;
  fs::create_directories(out_dir);
  GeneratedDataset ds = generate_dataset(spec, out_dir);
  std::cerr << "wrote " << ds.train_scenes << " train / " << ds.eval_scenes << " eval scenes\n";
  std::cout << ds.manifest_path << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"group-skeleton action recognition toolkit"};
  app.require_subcommand(1);

  // ---- gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic multi-person dataset");
  std::string gen_spec, gen_out = "data";
  std::uint32_t gen_seed = 0;
  auto* gen_seed_opt = gen->add_option("--seed", gen_seed, "overrides the spec seed");
  gen->add_option("--spec", gen_spec, "dataset spec (key-value file)")->required();
  gen->add_option("--out", gen_out, "output directory");

  // ---- train
  auto* tr = app.add_subcommand("train", "train a model on a pose file");
  std::string tr_data, tr_out = "runs/train", tr_resume, tr_eval_data;
  ModelOptions tr_model;
  TrainOptions tr_train;
  std::string tr_config;
  tr->add_option("--config", tr_config, "config file (ini sections [model]/[train])");
  tr->add_option("--data", tr_data, "training pose file (jsonl)")->required();
  tr->add_option("--eval-data", tr_eval_data, "optional eval pose file for a final report");
  tr->add_option("--out", tr_out, "output directory");
  tr->add_option("--resume", tr_resume, "checkpoint to continue from");
  add_model_options(tr, tr_model);
  add_train_options(tr, tr_train);

  // ---- eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ev_ckpt, ev_data, ev_metrics = "acc", ev_out = "runs/eval";
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--data", ev_data, "pose file (jsonl)")->required();
  ev->add_option("--metrics", ev_metrics)->check(CLI::IsMember({"acc", "fmap", "both"}));
  ev->add_option("--out", ev_out, "output directory");

  // ---- infer
  auto* inf = app.add_subcommand("infer", "classify one reference person");
  std::string inf_ckpt, inf_pose, inf_video;
  int inf_ref = 0, inf_window = 0;
  inf->add_option("--checkpoint", inf_ckpt)->required();
  inf->add_option("--pose-file", inf_pose)->required();
  inf->add_option("--reference", inf_ref, "reference track id")->required();
  inf->add_option("--window-start", inf_window, "first frame of the window");
  inf->add_option("--video", inf_video, "video id (default: first in file)");

  // ---- grad-check
  auto* gc = app.add_subcommand("grad-check", "finite-difference check of the micro model");
  std::string gc_size = "micro";
  double gc_eps = 0;
  std::uint32_t gc_seed = 11;
  bool gc_bug = false;
  gc->add_option("--size", gc_size)->check(CLI::IsMember({"micro"}));
  gc->add_option("--epsilon", gc_eps, "probe step (default per build)");
  gc->add_option("--seed", gc_seed, "fixture seed");
  gc->add_flag("--inject-bug", gc_bug, "sabotage one backward rule (the check must fail)");

  // ---- ablate
  auto* ab = app.add_subcommand("ablate", "train and compare model variants");
  std::string ab_train_data, ab_eval_data, ab_out = "runs/ablate";
  std::vector<std::string> ab_variants = kAblationVariants;
  int ab_seeds = 3;
  bool ab_check = false;
  double ab_margin = 5.0;
  ModelOptions ab_model;
  TrainOptions ab_train_opts;
  std::string ab_config;
  ab->add_option("--config", ab_config, "config file (ini sections [model]/[train])");
  ab->add_option("--train-data", ab_train_data)->required();
  ab->add_option("--eval-data", ab_eval_data)->required();
  ab->add_option("--out", ab_out);
  ab->add_option("--seeds", ab_seeds, "number of seeds (1..n)");
  ab->add_option("--variants", ab_variants)->delimiter(',');
  ab->add_flag("--check-directional", ab_check,
               "exit 1 unless full beats no_multi_person by --margin points");
  ab->add_option("--margin", ab_margin, "required accuracy-point margin");
  add_model_options(ab, ab_model);
  add_train_options(ab, ab_train_opts);

  const std::string pre_config = find_config_arg(argc, argv);
  if (!pre_config.empty()) {
    try {
      const IniMap ini = load_ini(pre_config);
      apply_model_ini(ini, tr_model);
      apply_train_ini(ini, tr_train);
      apply_model_ini(ini, ab_model);
      apply_train_ini(ini, ab_train_opts);
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return kExitUsage;
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen) {
      return run_gen_data(gen_spec, gen_out, gen_seed, gen_seed_opt->count() > 0);
    }

    if (*tr) {
      const ModelConfig mc = tr_model.to_config();
      mc.validate();
      TrainConfig tc = tr_train.cfg;
      tc.max_epochs = tr_train.max_epochs;
      fs::create_directories(tr_out);
      write_config_echo(mc, tc, tr_train.max_epochs, tr_out);
      const DatasetOptions dopt = data_options_for(mc);
      ParseOptions popt;
      popt.expected_keypoints = dopt.num_joints;
      const PoseFile file = load_pose_file(tr_data, popt);
      const std::vector<Sample> samples = build_samples(file, dopt);
      if (samples.empty()) {
        std::cerr << "error: no usable samples in " << tr_data << "\n";
        return kExitUsage;
      }
      GsGcnModel model(mc, tc.seed);
      TrainHooks hooks;
      hooks.checkpoint_dir = tr_out;
      if (!tr_resume.empty()) {
        std::vector<Tensor> momentum;
        CheckpointMeta meta = load_checkpoint(model, tr_resume, &momentum);
        hooks.start_epoch = meta.epoch;
        std::cerr << "resumed from " << tr_resume << " at epoch " << meta.epoch << "\n";
      }
      std::ofstream log_file(tr_out + "/train_log.txt", std::ios::app);
      hooks.on_epoch = [&](const EpochLog& l) {
        char line[160];
        std::snprintf(line, sizeof(line), "epoch=%d lr=%.6g loss=%.6f acc=%.4f", l.epoch, l.lr,
                      l.loss, l.accuracy);
        std::cerr << line << "\n";
        log_file << line << "\n";
      };
      TrainResult result = train(model, samples, tc, hooks);
      std::cerr << "training stopped: " << result.stop_reason << "\n";
      if (result.aborted) return kExitCheckFailed;
      if (!tr_eval_data.empty()) {
        const PoseFile ef = load_pose_file(tr_eval_data, popt);
        const auto esamples = build_samples(ef, dopt);
        if (!esamples.empty()) {
          std::cerr << "eval accuracy: " << eval_accuracy(model, esamples) << "\n";
        }
      }
      std::cout << tr_out << "/final.ckpt\n";
      return kExitOk;
    }

    if (*ev) {
      if (!fs::exists(ev_ckpt)) {
        std::cerr << "error: checkpoint not found: " << ev_ckpt << "\n";
        return kExitUsage;
      }
      const ModelConfig mc = peek_checkpoint_config(ev_ckpt);
      GsGcnModel model(mc, 0);
      load_checkpoint(model, ev_ckpt);
      const DatasetOptions dopt = data_options_for(mc);
      ParseOptions popt;
      popt.expected_keypoints = dopt.num_joints;
      const PoseFile file = load_pose_file(ev_data, popt);
      const std::vector<Sample> samples = build_samples(file, dopt);
      if (samples.empty()) {
        std::cerr << "error: no usable samples in " << ev_data << "\n";
        return kExitUsage;
      }
      fs::create_directories(ev_out);
      {
        TrainConfig unused;
        write_config_echo(mc, unused, 0, ev_out);
      }
      nlohmann::json summary;
      if (ev_metrics == "acc" || ev_metrics == "both") {
        std::vector<int> pred, truth;
        for (const Sample& s : samples) {
          pred.push_back(class_argmax(model.predict(s.input, s.distances, s.present)));
          truth.push_back(s.label);
        }
        const double acc = accuracy(pred, truth);
        std::cout << "accuracy: " << acc << " (" << samples.size() << " samples)\n";
        summary["accuracy"] = acc;
        summary["samples"] = samples.size();
      }
      if (ev_metrics == "fmap" || ev_metrics == "both") {
        std::vector<Detection> dets, gts;
        collect_detections(model, samples, dets, gts);
        const FrameMapResult fm = frame_map(dets, gts);
        std::cout << frame_map_report(fm);
        for (const auto& [thr, v] : fm.map_at) {
          summary["fmap"][std::to_string(static_cast<int>(std::lround(thr * 100)))] = v;
        }
        summary["fmap"]["avg"] = fm.map_avg;
      }
      std::ofstream(ev_out + "/summary.json") << summary.dump(2) << "\n";
      return kExitOk;
    }

    if (*inf) {
      if (!fs::exists(inf_ckpt)) {
        std::cerr << "error: checkpoint not found: " << inf_ckpt << "\n";
        return kExitUsage;
      }
      const ModelConfig mc = peek_checkpoint_config(inf_ckpt);
      GsGcnModel model(mc, 0);
      load_checkpoint(model, inf_ckpt);
      const DatasetOptions dopt = data_options_for(mc);
      ParseOptions popt;
      popt.expected_keypoints = dopt.num_joints;
      const PoseFile file = load_pose_file(inf_pose, popt);
      const PoseSequence* seq = nullptr;
      for (const auto& s : file.sequences) {
        if (inf_video.empty() || s.video_id == inf_video) {
          seq = &s;
          break;
        }
      }
      if (!seq) {
        std::cerr << "error: video \"" << inf_video << "\" not found\n";
        return kExitUsage;
      }
      if (!seq->track_by_id(inf_ref)) {
        std::cerr << "error: reference track not found: " << inf_ref << "\n";
        return kExitUsage;
      }
      const Sample sample = build_sample(file, *seq, inf_ref, inf_window, dopt);
      const Tensor probs = model.predict(sample.input, sample.distances, sample.present);
      std::vector<int> order(static_cast<size_t>(probs.numel()));
      std::iota(order.begin(), order.end(), 0);
      std::sort(order.begin(), order.end(), [&](int a, int b) { return probs[a] > probs[b]; });
      for (int c : order) {
        std::printf("class %d: %.6f\n", c, static_cast<double>(probs[c]));
      }
      return kExitOk;
    }

    if (*gc) {
      GradCheckOptions opt;
      opt.epsilon = gc_eps;
      opt.seed = gc_seed;
      opt.inject_bug = gc_bug;
      const GradCheckResult r = run_micro_grad_check(opt);
      std::printf("grad-check: max_rel_error=%.3e tolerance=%.0e epsilon=%.0e entries=%lld "
                  "checked=%lld kink_skipped=%lld seed=%u\n",
                  r.max_rel_error, r.tolerance, r.epsilon,
                  static_cast<long long>(r.param_entries),
                  static_cast<long long>(r.report.checked_entries),
                  static_cast<long long>(r.report.kink_skipped), gc_seed);
      if (!r.report.worst_param.empty()) {
        std::printf("worst: %s[%lld]\n", r.report.worst_param.c_str(),
                    static_cast<long long>(r.report.worst_index));
      }
      std::printf("%s\n", r.passed ? "PASS" : "FAIL");
      return r.passed ? kExitOk : kExitCheckFailed;
    }

    if (*ab) {
      const ModelConfig mc = ab_model.to_config();
      mc.validate();
      AblationOptions opt;
      opt.base_model = mc;
      opt.train = ab_train_opts.cfg;
      opt.train.max_epochs = ab_train_opts.max_epochs;
      opt.data = data_options_for(mc);
      opt.variants = ab_variants;
      opt.seeds.clear();
      for (int s = 1; s <= ab_seeds; ++s) opt.seeds.push_back(static_cast<std::uint32_t>(s));
      ParseOptions popt;
      popt.expected_keypoints = opt.data.num_joints;
      const PoseFile train_file = load_pose_file(ab_train_data, popt);
      const PoseFile eval_file = load_pose_file(ab_eval_data, popt);
      fs::create_directories(ab_out);
      write_config_echo(mc, opt.train, ab_train_opts.max_epochs, ab_out);
      const AblationResult result = run_ablation(
          train_file, eval_file, opt, [](const std::string& m) { std::cerr << m << "\n"; });
      std::cout << result.markdown;
      std::ofstream(ab_out + "/ablation.md") << result.markdown;
      nlohmann::json j;
      for (const auto& row : result.rows) {
        j[row.variant] = {{"mean", row.mean}, {"stddev", row.stddev},
                          {"per_seed", row.per_seed_accuracy}};
      }
      std::ofstream(ab_out + "/ablation.json") << j.dump(2) << "\n";
      if (ab_check) {
        std::string detail;
        const bool ok = ablation_directional_ok(result, ab_margin, &detail);
        std::cerr << "directional check: " << (ok ? "ok" : "FAILED") << " (" << detail << ")\n";
        return ok ? kExitOk : kExitCheckFailed;
      }
      return kExitOk;
    }
  } catch (const CLI::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
