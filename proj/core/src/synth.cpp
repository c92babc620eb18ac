#include "gsgcn/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

namespace gsgcn {

const char* synth_class_name(int class_id) {
  switch (static_cast<SynthClass>(class_id)) {
    case SynthClass::stand: return "stand";
    case SynthClass::walk: return "walk";
    case SynthClass::run: return "run";
    case SynthClass::gather: return "gather";
    case SynthClass::queue: return "queue";
    case SynthClass::fight: return "fight";
  }
  throw SynthError("unknown synthetic class id " + std::to_string(class_id));
}

namespace {

constexpr int kJoints = 14;

// crowdpose14 template, hip-centred local offsets in pixels
constexpr double kTemplate[kJoints][2] = {
    {-22, -62}, {22, -62},  // shoulders
    {-30, -30}, {30, -30},  // elbows
    {-34, 2},   {34, 2},    // wrists
    {-14, 0},   {14, 0},    // hips
    {-15, 45},  {15, 45},   // knees
    {-16, 88},  {16, 88},   // ankles
    {0, -95},   {0, -70},   // head top, neck
};

struct Vec2 {
  double x = 0, y = 0;
};

struct PersonProgram {
  int label = 0;
  // anchor position per frame
  std::vector<Vec2> anchor;
  // limb swing: amplitude along `dir`, period in frames (0 = no swing)
  Vec2 dir{1, 0};
  double swing_amp = 0;
  double swing_period = 0;
  double swing_phase = 0;
};

double urand(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

double swing_offset(const PersonProgram& p, int t, double scale, double phase_shift) {
  if (p.swing_period <= 0 || p.swing_amp <= 0) return 0;
  const double theta = 2.0 * M_PI * t / p.swing_period + p.swing_phase + phase_shift;
  return p.swing_amp * scale * std::sin(theta);
}

PersonTrack emit_track(int track_id, const PersonProgram& prog, const SceneOptions& opt,
                       std::mt19937_64& rng) {
  PersonTrack track;
  track.track_id = track_id;
  std::normal_distribution<double> jitter(0.0, opt.noise_sigma);
  std::uniform_real_distribution<double> conf_dist(0.7, 1.0);
  std::uniform_real_distribution<double> drop_dist(0.0, 1.0);
  const int t_len = static_cast<int>(prog.anchor.size());
  for (int t = 0; t < t_len; ++t) {
    FramePose f;
    f.frame_index = t;
    f.action = prog.label;
    double min_x = 1e18, min_y = 1e18, max_x = -1e18, max_y = -1e18;
    f.keypoints.resize(kJoints);
    for (int j = 0; j < kJoints; ++j) {
      double x = prog.anchor[static_cast<size_t>(t)].x + kTemplate[j][0];
      double y = prog.anchor[static_cast<size_t>(t)].y + kTemplate[j][1];
      // leg/arm swing along the motion direction; sides alternate
      double s = 0;
      const bool left = j % 2 == 0;
      if (j == 8 || j == 9) s = swing_offset(prog, t, 0.5, left ? 0.0 : M_PI);
      if (j == 10 || j == 11) s = swing_offset(prog, t, 1.0, left ? 0.0 : M_PI);
      if (j == 2 || j == 3) s = swing_offset(prog, t, 0.35, left ? M_PI : 0.0);
      if (j == 4 || j == 5) s = swing_offset(prog, t, 0.8, left ? M_PI : 0.0);
      x += prog.dir.x * s;
      y += prog.dir.y * s;
      min_x = std::min(min_x, x);
      min_y = std::min(min_y, y);
      max_x = std::max(max_x, x);
      max_y = std::max(max_y, y);
      if (opt.noise_sigma > 0) {
        x += jitter(rng);
        y += jitter(rng);
      }
      x = std::clamp(x, 0.0, static_cast<double>(opt.canvas_w));
      y = std::clamp(y, 0.0, static_cast<double>(opt.canvas_h));
      const double conf = conf_dist(rng);
      const bool dropped = opt.drop_rate > 0 && drop_dist(rng) < opt.drop_rate;
      if (dropped) {
        f.keypoints[static_cast<size_t>(j)] = Keypoint{0, 0, 0};
      } else {
        f.keypoints[static_cast<size_t>(j)] = Keypoint{x, y, conf};
      }
    }
    f.bbox = Box{min_x - 6, min_y - 6, (max_x - min_x) + 12, (max_y - min_y) + 12};
    track.frames.push_back(std::move(f));
  }
  return track;
}

std::vector<Vec2> linear_anchor(Vec2 start, Vec2 dir, double speed, int t_len) {
  std::vector<Vec2> a(static_cast<size_t>(t_len));
  for (int t = 0; t < t_len; ++t) {
    a[static_cast<size_t>(t)] = Vec2{start.x + dir.x * speed * t, start.y + dir.y * speed * t};
  }
  return a;
}

std::vector<Vec2> fixed_anchor(Vec2 at, int t_len) {
  return std::vector<Vec2>(static_cast<size_t>(t_len), at);
}

// start box such that a linear path of `travel` stays inside the canvas
Vec2 sample_start(std::mt19937_64& rng, const SceneOptions& opt, Vec2 travel) {
  const double margin = 140;
  const double x_lo = margin + std::max(0.0, -travel.x);
  const double x_hi = opt.canvas_w - margin - std::max(0.0, travel.x);
  const double y_lo = margin + std::max(0.0, -travel.y);
  const double y_hi = opt.canvas_h - margin - std::max(0.0, travel.y);
  return Vec2{urand(rng, x_lo, std::max(x_lo + 1, x_hi)), urand(rng, y_lo, std::max(y_lo + 1, y_hi))};
}

Vec2 sample_separated(std::mt19937_64& rng, const SceneOptions& opt, Vec2 travel,
                      const std::vector<Vec2>& taken, double min_sep) {
  for (int attempt = 0; attempt < 64; ++attempt) {
    Vec2 p = sample_start(rng, opt, travel);
    bool ok = true;
    for (const Vec2& q : taken) {
      if (std::hypot(p.x - q.x, p.y - q.y) < min_sep) {
        ok = false;
        break;
      }
    }
    if (ok) return p;
  }
  return sample_start(rng, opt, travel);
}

void add_locomotion_swing(PersonProgram& p, std::mt19937_64& rng, double speed) {
  p.swing_amp = std::clamp(2.2 * speed, 3.0, 16.0);
  p.swing_period = std::clamp(34.0 / std::max(speed, 0.5), 6.0, 28.0);
  p.swing_phase = urand(rng, 0, 2.0 * M_PI);
}

}  // namespace

std::vector<PersonTrack> generate_scene(int class_id, const SceneOptions& opt,
                                        std::uint64_t seed) {
  if (class_id < 0 || class_id >= kNumSynthClasses) {
    throw SynthError("generate_scene: invalid class id " + std::to_string(class_id));
  }
  const auto cls = static_cast<SynthClass>(class_id);
  const bool group_class =
      cls == SynthClass::gather || cls == SynthClass::queue || cls == SynthClass::fight;
  if (group_class && opt.num_persons < 2) {
    throw SynthError("generate_scene: group classes need at least 2 persons");
  }
  if (opt.t_len < 1) throw SynthError("generate_scene: t_len must be >= 1");

  std::mt19937_64 rng(seed);
  const int n = opt.num_persons;
  std::vector<PersonProgram> programs;

  switch (cls) {
    case SynthClass::stand: {
      std::vector<Vec2> taken;
      for (int i = 0; i < n; ++i) {
        Vec2 at = sample_separated(rng, opt, Vec2{0, 0}, taken, 90);
        taken.push_back(at);
        PersonProgram p;
        p.label = class_id;
        p.anchor = fixed_anchor(at, opt.t_len);
        programs.push_back(std::move(p));
      }
      break;
    }
    case SynthClass::walk:
    case SynthClass::run: {
      const double theta = urand(rng, 0, 2.0 * M_PI);
      const Vec2 dir{std::cos(theta), std::sin(theta)};
      const double base = cls == SynthClass::walk ? urand(rng, 1.3, 2.1) : urand(rng, 5.5, 8.0);
      std::vector<Vec2> taken;
      for (int i = 0; i < n; ++i) {
        const double speed = base * urand(rng, 0.9, 1.1);
        const Vec2 travel{dir.x * speed * opt.t_len, dir.y * speed * opt.t_len};
        Vec2 start = sample_separated(rng, opt, travel, taken, 90);
        taken.push_back(start);
        PersonProgram p;
        p.label = class_id;
        p.dir = dir;
        p.anchor = linear_anchor(start, dir, speed, opt.t_len);
        add_locomotion_swing(p, rng, speed);
        programs.push_back(std::move(p));
      }
      break;
    }
    case SynthClass::gather: {
      // uniform contraction toward a shared centroid: every pairwise
      // distance shrinks by the same factor each frame
      const Vec2 centroid{urand(rng, opt.canvas_w / 2.0 - 180, opt.canvas_w / 2.0 + 180),
                          urand(rng, opt.canvas_h / 2.0 - 120, opt.canvas_h / 2.0 + 120)};
      const double kappa = urand(rng, 0.005, 0.008);
      for (int i = 0; i < n; ++i) {
        const double angle = 2.0 * M_PI * i / n + urand(rng, -0.35, 0.35);
        const double radius = urand(rng, 280, 400);
        PersonProgram p;
        p.label = class_id;
        p.dir = Vec2{-std::cos(angle), -std::sin(angle)};
        p.anchor.resize(static_cast<size_t>(opt.t_len));
        double r = radius;
        for (int t = 0; t < opt.t_len; ++t) {
          p.anchor[static_cast<size_t>(t)] =
              Vec2{centroid.x + std::cos(angle) * r, centroid.y + std::sin(angle) * r};
          r *= 1.0 - kappa;
        }
        add_locomotion_swing(p, rng, radius * kappa);
        programs.push_back(std::move(p));
      }
      break;
    }
    case SynthClass::queue: {
      const double theta = urand(rng, 0, 2.0 * M_PI);
      const Vec2 dir{std::cos(theta), std::sin(theta)};
      const Vec2 perp{-dir.y, dir.x};
      const double gap = urand(rng, 58, 74);
      const double span = gap * (n - 1);
      const Vec2 start = sample_start(rng, opt, Vec2{dir.x * span, dir.y * span});
      for (int i = 0; i < n; ++i) {
        const double along = gap * i + urand(rng, -4, 4);
        const double across = urand(rng, -3, 3);
        Vec2 at{start.x + dir.x * along + perp.x * across,
                start.y + dir.y * along + perp.y * across};
        PersonProgram p;
        p.label = class_id;
        p.anchor = fixed_anchor(at, opt.t_len);
        programs.push_back(std::move(p));
      }
      break;
    }
    case SynthClass::fight: {
      const Vec2 mid{urand(rng, opt.canvas_w / 2.0 - 250, opt.canvas_w / 2.0 + 250),
                     urand(rng, opt.canvas_h / 2.0 - 150, opt.canvas_h / 2.0 + 150)};
      const double theta = urand(rng, 0, 2.0 * M_PI);
      const Vec2 dir{std::cos(theta), std::sin(theta)};
      const double base_sep = urand(rng, 70, 95);
      const double amp = urand(rng, 14.0, base_sep / 2.0 - 10.0);
      const double period = urand(rng, 6, 10);
      const double phase = urand(rng, 0, 2.0 * M_PI);
      for (int i = 0; i < 2; ++i) {
        const double side = i == 0 ? -1.0 : 1.0;
        PersonProgram p;
        p.label = class_id;
        p.dir = dir;
        p.anchor.resize(static_cast<size_t>(opt.t_len));
        for (int t = 0; t < opt.t_len; ++t) {
          const double off = base_sep / 2 + amp * std::sin(2.0 * M_PI * t / period + phase);
          p.anchor[static_cast<size_t>(t)] = Vec2{mid.x + side * dir.x * off,
                                                  mid.y + side * dir.y * off};
        }
        p.swing_amp = 14;
        p.swing_period = period;
        p.swing_phase = urand(rng, 0, 2.0 * M_PI);
        programs.push_back(std::move(p));
      }
      // remaining persons stand clear of the fight
      std::vector<Vec2> taken{mid};
      for (int i = 2; i < n; ++i) {
        Vec2 at = sample_separated(rng, opt, Vec2{0, 0}, taken, 280);
        taken.push_back(at);
        PersonProgram p;
        p.label = static_cast<int>(SynthClass::stand);
        p.anchor = fixed_anchor(at, opt.t_len);
        programs.push_back(std::move(p));
      }
      break;
    }
  }

  if (opt.distractor) {
    // far-away stander; large distance keys the distance-embedding gate low
    Vec2 far;
    const Vec2 c0 = programs[0].anchor[0];
    for (int attempt = 0; attempt < 64; ++attempt) {
      far = Vec2{urand(rng, 80, opt.canvas_w - 80.0), urand(rng, 80, opt.canvas_h - 80.0)};
      if (std::hypot(far.x - c0.x, far.y - c0.y) > 650) break;
    }
    PersonProgram p;
    p.label = static_cast<int>(SynthClass::stand);
    p.anchor = fixed_anchor(far, opt.t_len);
    programs.push_back(std::move(p));
  }

  std::vector<PersonTrack> tracks;
  for (size_t i = 0; i < programs.size(); ++i) {
    tracks.push_back(emit_track(static_cast<int>(i), programs[i], opt, rng));
  }
  return tracks;
}

// ---- dataset generation --------------------------------------------------------

std::vector<int> DatasetSpec::effective_counts() const {
  if (static_cast<int>(scenes_per_class.size()) != kNumSynthClasses) {
    throw SynthError("dataset spec: need exactly " + std::to_string(kNumSynthClasses) +
                     " per-class scene counts");
  }
  std::vector<int> counts = scenes_per_class;
  if (skew > 1.0) {
    for (int c = 0; c < kNumSynthClasses; ++c) {
      const double f = std::pow(skew, static_cast<double>(c) / (kNumSynthClasses - 1));
      counts[static_cast<size_t>(c)] =
          std::max(1, static_cast<int>(std::llround(counts[static_cast<size_t>(c)] / f)));
    }
  }
  for (int c : counts) {
    if (c < 1) throw SynthError("dataset spec: per-class counts must be >= 1");
  }
  return counts;
}

namespace {

std::uint64_t scene_seed(std::uint32_t base, int class_id, int index) {
  std::uint64_t z = (static_cast<std::uint64_t>(base) << 32) ^
                    (static_cast<std::uint64_t>(class_id) * 1000003ULL) ^
                    static_cast<std::uint64_t>(index);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double round2(double v) { return std::round(v * 100.0) / 100.0; }

void write_tracks(std::ofstream& out, const std::string& video_id,
                  const std::vector<PersonTrack>& tracks) {
  for (const auto& track : tracks) {
    for (const auto& f : track.frames) {
      nlohmann::json j;
      j["video_id"] = video_id;
      j["frame"] = f.frame_index;
      j["track_id"] = track.track_id;
      j["bbox"] = {round2(f.bbox.x), round2(f.bbox.y), round2(f.bbox.w), round2(f.bbox.h)};
      nlohmann::json kps = nlohmann::json::array();
      for (const auto& kp : f.keypoints) {
        kps.push_back({round2(kp.x), round2(kp.y), round2(kp.c)});
      }
      j["keypoints"] = std::move(kps);
      if (f.action) {
        j["action"] = *f.action;
      } else {
        j["action"] = nullptr;
      }
      out << j.dump() << '\n';
    }
  }
}

}  // namespace

GeneratedDataset generate_dataset(const DatasetSpec& spec, const std::string& out_dir) {
  const std::vector<int> counts = spec.effective_counts();
  GeneratedDataset result;
  result.train_path = out_dir + "/train.jsonl";
  result.eval_path = out_dir + "/eval.jsonl";
  result.manifest_path = out_dir + "/manifest.json";

  std::ofstream train(result.train_path, std::ios::trunc);
  std::ofstream eval_out(result.eval_path, std::ios::trunc);
  if (!train || !eval_out) throw SynthError("cannot write dataset files under " + out_dir);

  nlohmann::json header;
  header["type"] = "header";
  header["image_width"] = 1920;
  header["image_height"] = 1080;
  header["num_keypoints"] = kJoints;
  train << header.dump() << '\n';
  eval_out << header.dump() << '\n';

  std::mt19937_64 rng(spec.seed);
  nlohmann::json manifest;
  nlohmann::json scenes = nlohmann::json::array();
  for (int c = 0; c < kNumSynthClasses; ++c) {
    for (int i = 0; i < counts[static_cast<size_t>(c)]; ++i) {
      SceneOptions opt;
      opt.t_len = spec.t_len;
      opt.noise_sigma = spec.noise_sigma;
      opt.drop_rate = spec.drop_rate;
      opt.num_persons = static_cast<int>(
          std::uniform_int_distribution<int>(spec.min_persons, spec.max_persons)(rng));
      opt.distractor = urand(rng, 0, 1) < spec.distractor_prob;
      char vid[32];
      std::snprintf(vid, sizeof(vid), "c%d_s%04d", c, i);
      const bool to_eval = spec.eval_every > 0 && i % spec.eval_every == spec.eval_every - 1;
      auto tracks = generate_scene(c, opt, scene_seed(spec.seed, c, i));
      write_tracks(to_eval ? eval_out : train, vid, tracks);
      if (to_eval) {
        ++result.eval_scenes;
      } else {
        ++result.train_scenes;
      }
      nlohmann::json s;
      s["video_id"] = vid;
      s["class"] = c;
      s["persons"] = opt.num_persons;
      s["split"] = to_eval ? "eval" : "train";
      scenes.push_back(std::move(s));
    }
  }

  manifest["seed"] = spec.seed;
  manifest["t_len"] = spec.t_len;
  manifest["noise_sigma"] = spec.noise_sigma;
  manifest["drop_rate"] = spec.drop_rate;
  manifest["distractor_prob"] = spec.distractor_prob;
  manifest["skew"] = spec.skew;
  manifest["min_persons"] = spec.min_persons;
  manifest["max_persons"] = spec.max_persons;
  manifest["eval_every"] = spec.eval_every;
  manifest["scenes_per_class"] = counts;
  manifest["num_keypoints"] = kJoints;
  manifest["classes"] = nlohmann::json::array();
  for (int c = 0; c < kNumSynthClasses; ++c) manifest["classes"].push_back(synth_class_name(c));
  manifest["scenes"] = std::move(scenes);
  std::ofstream mf(result.manifest_path, std::ios::trunc);
  mf << manifest.dump(2) << '\n';
  if (!mf) throw SynthError("cannot write manifest under " + out_dir);
  return result;
}

// ---- ablation harness ------------------------------------------------------------

ModelConfig variant_model_config(const ModelConfig& base, const std::string& variant) {
  ModelConfig c = base;
  if (variant == "full") return c;
  if (variant == "no_multi_person") {
    c.group_size = 1;
    return c;
  }
  if (variant == "no_speed") {
    c.in_channels = 3;
    return c;
  }
  if (variant == "no_distance_embedding") {
    c.distance_embedding = false;
    return c;
  }
  throw SynthError("unknown ablation variant \"" + variant + "\"");
}

DatasetOptions variant_data_options(const DatasetOptions& base, const std::string& variant) {
  DatasetOptions d = base;
  if (variant == "no_multi_person") d.group_size = 1;
  if (variant == "no_speed") d.include_speed = false;
  return d;
}

double eval_accuracy(const GsGcnModel& model, const std::vector<Sample>& samples) {
  if (samples.empty()) throw SynthError("eval_accuracy: no samples");
  std::vector<int> pred, truth;
  for (const Sample& s : samples) {
    const Tensor probs = model.predict(s.input, s.distances, s.present);
    int arg = 0;
    for (std::int64_t c = 1; c < probs.numel(); ++c) {
      if (probs[c] > probs[arg]) arg = static_cast<int>(c);
    }
    pred.push_back(arg);
    truth.push_back(s.label);
  }
  std::int64_t hit = 0;
  for (size_t i = 0; i < pred.size(); ++i) hit += pred[i] == truth[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

AblationResult run_ablation(const PoseFile& train_file, const PoseFile& eval_file,
                            const AblationOptions& options,
                            const std::function<void(const std::string&)>& log) {
  if (options.seeds.empty()) throw SynthError("run_ablation: need at least one seed");
  AblationResult result;
  for (const std::string& variant : kAblationVariants) {
    if (std::find(options.variants.begin(), options.variants.end(), variant) ==
        options.variants.end()) {
      continue;
    }
    const ModelConfig mc = variant_model_config(options.base_model, variant);
    const DatasetOptions dc = variant_data_options(options.data, variant);
    const auto train_samples = build_samples(train_file, dc);
    const auto eval_samples = build_samples(eval_file, dc);
    if (train_samples.empty() || eval_samples.empty()) {
      throw SynthError("run_ablation: empty train or eval sample set for variant " + variant);
    }
    AblationRow row;
    row.variant = variant;
    for (std::uint32_t seed : options.seeds) {
      GsGcnModel model(mc, seed);
      TrainConfig tc = options.train;
      tc.seed = seed;
      if (log) {
        log("ablation: variant=" + variant + " seed=" + std::to_string(seed) + " training on " +
            std::to_string(train_samples.size()) + " samples");
      }
      TrainResult tr = train(model, train_samples, tc);
      if (tr.aborted) {
        throw TrainError("ablation variant " + variant + " seed " + std::to_string(seed) +
                         " aborted: " + tr.stop_reason);
      }
      const double acc = eval_accuracy(model, eval_samples);
      row.per_seed_accuracy.push_back(acc);
      if (log) {
        log("ablation: variant=" + variant + " seed=" + std::to_string(seed) +
            " epochs=" + std::to_string(tr.epochs_run) + " eval_accuracy=" + std::to_string(acc));
      }
    }
    const double n = static_cast<double>(row.per_seed_accuracy.size());
    row.mean = std::accumulate(row.per_seed_accuracy.begin(), row.per_seed_accuracy.end(), 0.0) / n;
    double ss = 0;
    for (double a : row.per_seed_accuracy) ss += (a - row.mean) * (a - row.mean);
    row.stddev = n > 1 ? std::sqrt(ss / (n - 1)) : 0.0;
    result.rows.push_back(std::move(row));
  }

  std::ostringstream md;
  md << "| variant | eval accuracy (%) | per-seed (%) |\n";
  md << "|---|---|---|\n";
  md.precision(2);
  md << std::fixed;
  for (const auto& row : result.rows) {
    md << "| " << row.variant << " | " << row.mean * 100 << " ± " << row.stddev * 100 << " | ";
    for (size_t i = 0; i < row.per_seed_accuracy.size(); ++i) {
      if (i) md << " / ";
      md << row.per_seed_accuracy[i] * 100;
    }
    md << " |\n";
  }
  result.markdown = md.str();
  return result;
}

bool ablation_directional_ok(const AblationResult& result, double margin_points,
                             std::string* detail) {
  const AblationRow* full = nullptr;
  const AblationRow* no_multi = nullptr;
  for (const auto& row : result.rows) {
    if (row.variant == "full") full = &row;
    if (row.variant == "no_multi_person") no_multi = &row;
  }
  std::ostringstream os;
  bool ok = true;
  if (!full) {
    os << "missing 'full' variant; ";
    ok = false;
  }
  if (full && no_multi) {
    const double gap = (full->mean - no_multi->mean) * 100;
    os << "full - no_multi_person = " << gap << " points (need >= " << margin_points << "); ";
    ok = ok && gap >= margin_points;
  }
  if (full) {
    for (const auto& row : result.rows) {
      if (row.variant == "full") continue;
      if (full->mean < row.mean) {
        os << "full (" << full->mean * 100 << ") < " << row.variant << " (" << row.mean * 100
           << "); ";
        ok = false;
      }
    }
  }
  if (detail) *detail = os.str();
  return ok;
}

}  // namespace gsgcn
