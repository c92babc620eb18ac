#include "gsgcn/training.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <thread>

#include <json.hpp>

namespace gsgcn {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

void TrainConfig::validate() const {
  if (batch_size < 1) throw TrainError("train config: batch size must be >= 1");
  if (initial_lr <= 0 || lr_decay_factor <= 0) {
    throw TrainError("train config: learning rates must be positive");
  }
  for (size_t i = 1; i < lr_milestones.size(); ++i) {
    if (lr_milestones[i] <= lr_milestones[i - 1]) {
      throw TrainError("train config: lr milestones must be strictly increasing");
    }
  }
  if (momentum < 0 || momentum >= 1) throw TrainError("train config: momentum must be in [0, 1)");
  if (max_epochs < 0) throw TrainError("train config: max_epochs must be >= 0");
  if (num_threads < 1) throw TrainError("train config: num_threads must be >= 1");
  if (plateau_window < 1) throw TrainError("train config: plateau window must be >= 1");
}

Var focal_loss(const Var& probabilities, int true_class, real gamma) {
  const Tensor& p = probabilities.value();
  if (p.rank() != 1) {
    throw TrainError("focal_loss: expected a probability vector, got " + p.shape_str());
  }
  if (true_class < 0 || true_class >= p.dim(0)) {
    throw TrainError("focal_loss: class " + std::to_string(true_class) +
                     " out of range for " + std::to_string(p.dim(0)) + " classes");
  }
  real total = 0;
  for (std::int64_t i = 0; i < p.numel(); ++i) total += p[i];
  if (std::abs(total - real(1)) > real(1e-4)) {
    throw TrainError("focal_loss: probabilities sum to " + std::to_string(total) +
                     ", expected 1");
  }
  Var p_t = clamp(slice(probabilities, 0, true_class, true_class + 1), real(1e-7), real(1));
  Var one_minus = add_scalar(mul_scalar(p_t, real(-1)), real(1));
  return mul_scalar(mul(pow_scalar(one_minus, gamma), vlog(p_t)), real(-1));
}

double lr_at(int epoch, const TrainConfig& config) {
  if (epoch < 0) throw TrainError("lr_at: epoch must be >= 0");
  int passed = 0;
  for (int m : config.lr_milestones) {
    if (m <= epoch) ++passed;
  }
  return config.initial_lr * std::pow(config.lr_decay_factor, passed);
}

void sgd_step(const std::vector<ParamStore::Entry>& params, const std::vector<Tensor>& grads,
              double lr, real weight_decay, real momentum,
              std::vector<Tensor>& momentum_buffers) {
  if (params.size() != grads.size()) throw TrainError("sgd_step: param/grad count mismatch");
  if (momentum_buffers.empty()) {
    momentum_buffers.reserve(params.size());
    for (const auto& e : params) momentum_buffers.emplace_back(e.var.value().shape());
  }
  if (momentum_buffers.size() != params.size()) {
    throw TrainError("sgd_step: momentum buffer count mismatch");
  }
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& entry = params[i];
    Tensor& value = const_cast<Var&>(entry.var).mutable_value();
    const Tensor& grad = grads[i];
    if (grad.shape() != value.shape()) {
      throw TrainError("sgd_step: gradient shape " + grad.shape_str() + " mismatches parameter " +
                       entry.var.name());
    }
    Tensor& buf = momentum_buffers[i];
    const real wd = entry.decay ? weight_decay : real(0);
    for (std::int64_t j = 0; j < value.numel(); ++j) {
      const real g = grad[j];
      if (!std::isfinite(g)) {
        throw TrainError("sgd_step: non-finite gradient in parameter " + entry.var.name());
      }
      const real g2 = g + wd * value[j];
      buf[j] = momentum * buf[j] + g2;
      value[j] -= static_cast<real>(lr) * buf[j];
    }
  }
}

// ---- training loop -----------------------------------------------------------

namespace {

struct ThreadAccum {
  std::vector<Tensor> grads;
  BnStatsSink sink;
  double loss_sum = 0;
  int correct = 0;
  bool bad_loss = false;
};

void run_stripe(const GsGcnModel& model, const std::vector<Sample>& dataset,
                const std::vector<int>& order, size_t begin, size_t batch_len, int stripe,
                int num_stripes, real gamma, ThreadAccum* accum) {
  const auto& entries = model.params().entries();
  accum->grads.reserve(entries.size());
  for (const auto& e : entries) accum->grads.emplace_back(e.var.value().shape());
  for (size_t i = static_cast<size_t>(stripe); i < batch_len; i += static_cast<size_t>(num_stripes)) {
    const Sample& s = dataset[static_cast<size_t>(order[begin + i])];
    ForwardCtx ctx;
    ctx.mode = BnMode::train;
    ctx.stats = &accum->sink;
    Var logits = model.forward(s.input, s.distances, s.present, ctx);
    Var probs = softmax(logits, 0);
    Var loss = focal_loss(probs, s.label, gamma);
    const double loss_v = static_cast<double>(loss.value()[0]);
    if (!std::isfinite(loss_v)) {
      accum->bad_loss = true;
      return;
    }
    accum->loss_sum += loss_v;
    const Tensor& pv = probs.value();
    int arg = 0;
    for (std::int64_t c = 1; c < pv.numel(); ++c) {
      if (pv[c] > pv[arg]) arg = static_cast<int>(c);
    }
    if (arg == s.label) ++accum->correct;
    GradMap g = backward(loss);
    for (size_t pi = 0; pi < entries.size(); ++pi) {
      if (const Tensor* t = g.find(entries[pi].var)) {
        real* dst = accum->grads[pi].data();
        const real* src = t->data();
        for (std::int64_t j = 0; j < t->numel(); ++j) dst[j] += src[j];
      }
    }
  }
}

std::uint32_t epoch_seed(std::uint32_t base, int epoch) {
  // splitmix-style mix so (seed, epoch) pairs decorrelate
  std::uint64_t z = (static_cast<std::uint64_t>(base) << 32) ^ static_cast<std::uint64_t>(epoch);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return static_cast<std::uint32_t>((z ^ (z >> 31)) & 0xffffffffULL);
}

}  // namespace

TrainResult train(GsGcnModel& model, const std::vector<Sample>& dataset, const TrainConfig& config,
                  const TrainHooks& hooks) {
  config.validate();
  if (dataset.empty()) throw TrainError("train: dataset is empty");
  for (const Sample& s : dataset) {
    if (s.label < 0 || s.label >= model.config().num_classes) {
      throw TrainError("train: sample in video \"" + s.video_id + "\" has label " +
                       std::to_string(s.label) + " outside [0, " +
                       std::to_string(model.config().num_classes) + ")");
    }
  }

  TrainResult result;
  auto& entries = model.params().entries();
  std::vector<Tensor> momentum_buffers;
  const int n = static_cast<int>(dataset.size());

  auto write_ckpt = [&](int epoch, const std::string& name) {
    if (hooks.checkpoint_dir.empty()) return;
    save_checkpoint(model, epoch, hooks.checkpoint_dir + "/" + name, &momentum_buffers);
  };

  for (int epoch = hooks.start_epoch; epoch < config.max_epochs; ++epoch) {
    const double lr = lr_at(epoch, config);
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::mt19937 shuffle_rng(epoch_seed(config.seed, epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0;
    int correct = 0;
    bool bad = false;
    for (size_t begin = 0; begin < order.size() && !bad; begin += static_cast<size_t>(config.batch_size)) {
      const size_t batch_len = std::min(order.size() - begin,
                                        static_cast<size_t>(config.batch_size));
      const int nt = std::max(1, std::min<int>(config.num_threads,
                                               static_cast<int>(batch_len)));
      std::vector<ThreadAccum> accums(static_cast<size_t>(nt));
      {
        std::vector<std::thread> workers;
        for (int t = 1; t < nt; ++t) {
          workers.emplace_back(run_stripe, std::cref(model), std::cref(dataset), std::cref(order),
                               begin, batch_len, t, nt, config.focal_gamma,
                               &accums[static_cast<size_t>(t)]);
        }
        run_stripe(model, dataset, order, begin, batch_len, 0, nt, config.focal_gamma,
                   &accums[0]);
        for (auto& w : workers) w.join();
      }

      std::vector<Tensor> grads = std::move(accums[0].grads);
      BnStatsSink sink = std::move(accums[0].sink);
      double batch_loss = accums[0].loss_sum;
      correct += accums[0].correct;
      bad = accums[0].bad_loss;
      for (int t = 1; t < nt; ++t) {
        auto& a = accums[static_cast<size_t>(t)];
        bad = bad || a.bad_loss;
        batch_loss += a.loss_sum;
        correct += a.correct;
        sink.merge(a.sink);
        for (size_t pi = 0; pi < grads.size(); ++pi) {
          real* dst = grads[pi].data();
          const real* src = a.grads[pi].data();
          for (std::int64_t j = 0; j < grads[pi].numel(); ++j) dst[j] += src[j];
        }
      }
      if (bad) break;
      loss_sum += batch_loss;

      const real inv_b = real(1) / static_cast<real>(batch_len);
      for (auto& g : grads) {
        for (auto& v : g.vec()) v *= inv_b;
      }

      // one running-statistics update per batch, in site order
      const auto& buffers = model.buffers();
      for (int site = 0; site < sink.num_sites(); ++site) {
        if (sink.count(site) == 0) continue;
        BnStats& st = *buffers[static_cast<size_t>(site)].stats;
        const Tensor bm = sink.mean_avg(site);
        const Tensor bv = sink.var_avg(site);
        for (std::int64_t i = 0; i < st.running_mean.numel(); ++i) {
          st.running_mean[i] = real(0.9) * st.running_mean[i] + real(0.1) * bm[i];
          st.running_var[i] = real(0.9) * st.running_var[i] + real(0.1) * bv[i];
        }
      }

      try {
        sgd_step(entries, grads, lr, config.weight_decay, config.momentum, momentum_buffers);
      } catch (const TrainError& e) {
        result.aborted = true;
        result.stop_reason = e.what();
        return result;
      }
    }
    if (bad) {
      result.aborted = true;
      result.stop_reason = "loss became non-finite at epoch " + std::to_string(epoch);
      return result;
    }

    EpochLog log;
    log.epoch = epoch;
    log.lr = lr;
    log.loss = loss_sum / n;
    log.accuracy = static_cast<double>(correct) / n;
    result.log.push_back(log);
    result.epochs_run = epoch - hooks.start_epoch + 1;
    if (hooks.on_epoch) hooks.on_epoch(log);

    if (config.checkpoint_interval > 0 && (epoch + 1) % config.checkpoint_interval == 0) {
      char name[64];
      std::snprintf(name, sizeof(name), "checkpoint_epoch%04d.ckpt", epoch + 1);
      write_ckpt(epoch + 1, name);
    }

    if (config.target_accuracy >= 0 && log.accuracy >= config.target_accuracy) {
      result.stop_reason = "reached target train accuracy";
      break;
    }
    const int w = config.plateau_window;
    const int have = static_cast<int>(result.log.size());
    if (have >= 2 * w) {
      double recent = 0, before = 0;
      for (int i = 0; i < w; ++i) {
        recent += result.log[static_cast<size_t>(have - 1 - i)].loss;
        before += result.log[static_cast<size_t>(have - 1 - w - i)].loss;
      }
      if ((before - recent) / w < config.plateau_min_delta) {
        result.stop_reason = "loss plateau";
        break;
      }
    }
  }
  if (result.stop_reason.empty()) result.stop_reason = "max epochs";
  write_ckpt(hooks.start_epoch + result.epochs_run, "final.ckpt");
  return result;
}

// ---- checkpoints ----------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'G', 'S', 'G', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kVersion = 1;

nlohmann::json model_config_to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["layout"] = c.layout;
  j["group_size"] = c.group_size;
  j["in_channels"] = c.in_channels;
  j["window_length"] = c.window_length;
  j["num_classes"] = c.num_classes;
  j["extractor_channels1"] = c.extractor_channels1;
  j["extractor_channels2"] = c.extractor_channels2;
  j["fusion_channels"] = c.fusion_channels;
  j["spatial_scales"] = c.spatial_scales;
  j["g3d_windows"] = c.g3d_windows;
  j["distance_embedding"] = c.distance_embedding;
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.layout = j.at("layout").get<std::string>();
  c.group_size = j.at("group_size").get<int>();
  c.in_channels = j.at("in_channels").get<int>();
  c.window_length = j.at("window_length").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.extractor_channels1 = j.at("extractor_channels1").get<int>();
  c.extractor_channels2 = j.at("extractor_channels2").get<int>();
  c.fusion_channels = j.at("fusion_channels").get<int>();
  c.spatial_scales = j.at("spatial_scales").get<int>();
  c.g3d_windows = j.at("g3d_windows").get<std::vector<int>>();
  c.distance_embedding = j.at("distance_embedding").get<bool>();
  return c;
}

void append_f32(std::vector<char>& blob, const Tensor& t) {
  const size_t off = blob.size();
  blob.resize(off + static_cast<size_t>(t.numel()) * 4);
  float* out = reinterpret_cast<float*>(blob.data() + off);
  for (std::int64_t i = 0; i < t.numel(); ++i) out[i] = static_cast<float>(t[i]);
}

nlohmann::json tensor_entry(const std::string& name, const Tensor& t, size_t offset) {
  nlohmann::json e;
  e["name"] = name;
  e["shape"] = t.shape();
  e["offset"] = offset;
  e["bytes"] = static_cast<size_t>(t.numel()) * 4;
  return e;
}

struct RawCheckpoint {
  nlohmann::json manifest;
  std::vector<char> data;
};

RawCheckpoint read_raw(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TrainError("cannot open checkpoint: " + path);
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
    throw TrainError("not a checkpoint file (bad magic): " + path);
  }
  std::uint32_t version = 0, manifest_len = 0;
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&manifest_len), 4);
  if (!in) throw TrainError("truncated checkpoint header: " + path);
  if (version != kVersion) {
    throw TrainError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                     std::to_string(kVersion) + "): " + path);
  }
  std::string manifest_text(manifest_len, '\0');
  if (!in.read(manifest_text.data(), manifest_len)) {
    throw TrainError("truncated checkpoint manifest: " + path);
  }
  RawCheckpoint raw;
  try {
    raw.manifest = nlohmann::json::parse(manifest_text);
  } catch (const nlohmann::json::exception& e) {
    throw TrainError(std::string("corrupt checkpoint manifest: ") + e.what());
  }
  raw.data.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  return raw;
}

void read_tensor(const RawCheckpoint& raw, const nlohmann::json& entry, Tensor& dst,
                 const std::string& path) {
  const Shape shape = entry.at("shape").get<Shape>();
  const std::string name = entry.at("name").get<std::string>();
  if (shape != dst.shape()) {
    throw TrainError("checkpoint tensor \"" + name + "\" has shape " + shape_to_string(shape) +
                     " but the model expects " + dst.shape_str());
  }
  const size_t offset = entry.at("offset").get<size_t>();
  const size_t bytes = entry.at("bytes").get<size_t>();
  if (bytes != static_cast<size_t>(dst.numel()) * 4 || offset + bytes > raw.data.size()) {
    throw TrainError("truncated checkpoint data for tensor \"" + name + "\" in " + path);
  }
  const float* src = reinterpret_cast<const float*>(raw.data.data() + offset);
  for (std::int64_t i = 0; i < dst.numel(); ++i) dst[i] = static_cast<real>(src[i]);
}

}  // namespace

void save_checkpoint(const GsGcnModel& model, int epoch, const std::string& path,
                     const std::vector<Tensor>* momentum) {
  nlohmann::json manifest;
  manifest["version"] = kVersion;
  manifest["dtype"] = "f32";
  manifest["epoch"] = epoch;
  manifest["model_config"] = model_config_to_json(model.config());

  std::vector<char> blob;
  nlohmann::json params = nlohmann::json::array();
  for (const auto& e : model.params().entries()) {
    params.push_back(tensor_entry(e.var.name(), e.var.value(), blob.size()));
    append_f32(blob, e.var.value());
  }
  manifest["params"] = std::move(params);

  nlohmann::json buffers = nlohmann::json::array();
  for (const auto& b : model.buffers()) {
    buffers.push_back(tensor_entry(b.name + ".mean", b.stats->running_mean, blob.size()));
    append_f32(blob, b.stats->running_mean);
    buffers.push_back(tensor_entry(b.name + ".var", b.stats->running_var, blob.size()));
    append_f32(blob, b.stats->running_var);
  }
  manifest["buffers"] = std::move(buffers);

  if (momentum && !momentum->empty()) {
    nlohmann::json mom = nlohmann::json::array();
    const auto& entries = model.params().entries();
    for (size_t i = 0; i < momentum->size(); ++i) {
      mom.push_back(tensor_entry(entries[i].var.name(), (*momentum)[i], blob.size()));
      append_f32(blob, (*momentum)[i]);
    }
    manifest["momentum"] = std::move(mom);
  }

  const std::string text = manifest.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw TrainError("cannot write checkpoint: " + path);
  out.write(kMagic, 8);
  const std::uint32_t version = kVersion;
  const std::uint32_t len = static_cast<std::uint32_t>(text.size());
  out.write(reinterpret_cast<const char*>(&version), 4);
  out.write(reinterpret_cast<const char*>(&len), 4);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw TrainError("failed writing checkpoint: " + path);
}

CheckpointMeta load_checkpoint(GsGcnModel& model, const std::string& path,
                               std::vector<Tensor>* momentum) {
  RawCheckpoint raw = read_raw(path);
  CheckpointMeta meta;
  meta.epoch = raw.manifest.value("epoch", 0);
  meta.model_config = model_config_from_json(raw.manifest.at("model_config"));

  const auto& params = raw.manifest.at("params");
  auto& entries = model.params().entries();
  if (params.size() != entries.size()) {
    throw TrainError("checkpoint has " + std::to_string(params.size()) + " parameters, model has " +
                     std::to_string(entries.size()));
  }
  for (size_t i = 0; i < entries.size(); ++i) {
    const auto& e = params[i];
    if (e.at("name").get<std::string>() != entries[i].var.name()) {
      throw TrainError("checkpoint parameter order mismatch at \"" +
                       e.at("name").get<std::string>() + "\" (expected \"" +
                       entries[i].var.name() + "\")");
    }
    read_tensor(raw, e, const_cast<Var&>(entries[i].var).mutable_value(), path);
  }

  const auto& buffers = raw.manifest.at("buffers");
  const auto& model_buffers = model.buffers();
  if (buffers.size() != model_buffers.size() * 2) {
    throw TrainError("checkpoint running-statistics count mismatch");
  }
  for (size_t i = 0; i < model_buffers.size(); ++i) {
    read_tensor(raw, buffers[2 * i], model_buffers[i].stats->running_mean, path);
    read_tensor(raw, buffers[2 * i + 1], model_buffers[i].stats->running_var, path);
  }

  if (momentum) {
    momentum->clear();
    if (raw.manifest.contains("momentum")) {
      const auto& mom = raw.manifest.at("momentum");
      for (size_t i = 0; i < entries.size(); ++i) {
        Tensor t(entries[i].var.value().shape());
        read_tensor(raw, mom[i], t, path);
        momentum->push_back(std::move(t));
      }
    }
  }
  return meta;
}

ModelConfig peek_checkpoint_config(const std::string& path, int* epoch) {
  RawCheckpoint raw = read_raw(path);
  if (epoch) *epoch = raw.manifest.value("epoch", 0);
  return model_config_from_json(raw.manifest.at("model_config"));
}

}  // namespace gsgcn
