#pragma once

#include "rfb/model.hpp"
#include "rfb/synth.hpp"

#include "json.hpp"

#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <thread>

namespace rfb {

/// Optimization schedule. Defaults are the VOC300 settings: warmup from
/// 1e-6 to 4e-3 over 5 epochs, /10 at epochs 150 and 200, 250 epochs total.
struct TrainConfig {
  std::size_t batch_size = 32;
  double warmup_start_lr = 1e-6;
  double base_lr = 4e-3;
  std::size_t warmup_epochs = 5;
  std::vector<std::size_t> milestones{150, 200};
  double gamma = 0.1;
  std::size_t total_epochs = 250;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 10;

  /// COCO schedule: 2e-3 base, /10 at 80 and 100, 120 epochs.
  static TrainConfig coco() {
    TrainConfig c;
    c.base_lr = 2e-3;
    c.milestones = {80, 100};
    c.total_epochs = 120;
    return c;
  }

  /// Same shape of schedule over `total` epochs: milestones keep their
  /// fraction of the run, warmup is shortened only if it would reach the
  /// first milestone.
  TrainConfig scaled(std::size_t total) const {
    TrainConfig c = *this;
    c.total_epochs = total;
    c.milestones.clear();
    for (std::size_t m : milestones) {
      const auto s = static_cast<std::size_t>(std::llround(
          static_cast<double>(m) * static_cast<double>(total) / static_cast<double>(total_epochs)));
      if (c.milestones.empty() || s > c.milestones.back())
        c.milestones.push_back(s);
    }
    if (!c.milestones.empty() && c.warmup_epochs >= c.milestones.front())
      c.warmup_epochs = c.milestones.front() - 1;
    return c;
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, batch_size, warmup_start_lr, base_lr,
                                                warmup_epochs, milestones, gamma, total_epochs,
                                                momentum, weight_decay, seed, checkpoint_every)

inline void validate(const TrainConfig &c) {
  if (c.batch_size == 0 || c.total_epochs == 0)
    throw ShapeError("train config: batch_size and total_epochs must be positive");
  if (!(c.warmup_start_lr > 0 && c.base_lr > 0 && c.gamma > 0))
    throw ShapeError("train config: learning rates and gamma must be positive");
  if (c.momentum < 0 || c.weight_decay < 0)
    throw ShapeError("train config: momentum and weight decay must be non-negative");
  for (std::size_t i = 0; i < c.milestones.size(); ++i) {
    if (c.milestones[i] <= c.warmup_epochs)
      throw ShapeError("train config: milestones must come after warmup");
    if (i && c.milestones[i] <= c.milestones[i - 1])
      throw ShapeError("train config: milestones must be strictly increasing");
  }
}

/// Linear warmup per iteration, then base_lr times gamma for every milestone
/// epoch already reached.
inline double lr_at(std::size_t iteration, std::size_t iters_per_epoch, const TrainConfig &c) {
  if (iters_per_epoch == 0)
    throw ShapeError("lr_at: iters_per_epoch must be positive");
  const std::size_t warm = c.warmup_epochs * iters_per_epoch;
  if (iteration < warm)
    return c.warmup_start_lr + (c.base_lr - c.warmup_start_lr) * static_cast<double>(iteration) /
                                   static_cast<double>(warm);
  const std::size_t epoch = iteration / iters_per_epoch;
  double lr = c.base_lr;
  for (std::size_t m : c.milestones)
    if (epoch >= m)
      lr *= c.gamma;
  return lr;
}

/// v <- momentum * v + grad + weight_decay * param; param <- param - lr * v
template <typename T>
void sgd_step(std::span<T> param, std::span<const T> grad, std::span<T> velocity, double lr,
              double momentum, double weight_decay) {
  if (param.size() != grad.size() || param.size() != velocity.size())
    throw ShapeError("sgd_step: parameter, gradient and velocity sizes differ");
  const T m = static_cast<T>(momentum), wd = static_cast<T>(weight_decay),
          step = static_cast<T>(lr);
  for (std::size_t i = 0; i < param.size(); ++i) {
    velocity[i] = m * velocity[i] + grad[i] + wd * param[i];
    param[i] -= step * velocity[i];
  }
}

/// Momentum buffers, one per parameter tensor.
template <typename T> struct SgdState {
  std::vector<std::vector<T>> velocity;

  explicit SgdState(const ParamStore<T> &store) {
    for (const auto &i : store.infos())
      velocity.emplace_back(i.shape.numel(), T(0));
  }
};

/// Applies one update to every parameter. A non-finite gradient aborts
/// before anything is modified.
template <typename T>
void sgd_step(ParamStore<T> &store, const std::vector<std::vector<T>> &grads, SgdState<T> &state,
              double lr, const TrainConfig &cfg) {
  if (grads.size() != store.size())
    throw ShapeError("sgd_step: one gradient per parameter required");
  for (std::size_t i = 0; i < store.size(); ++i)
    for (T g : grads[i])
      if (!std::isfinite(g))
        throw NumericError("non-finite gradient in parameter '" + store.info(i).path + "'");
  for (std::size_t i = 0; i < store.size(); ++i)
    sgd_step<T>(store.tensor(i).data(), grads[i], state.velocity[i], lr, cfg.momentum,
                cfg.weight_decay);
}

/// Weights ~ Normal(0, 2 / fan_in) with fan_in = Cin * kh * kw; biases 0.
template <typename T> void msra_init(ParamStore<T> &store, std::uint64_t seed) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto &data = store.tensor(i).data();
    const ParamInfo &info = store.info(i);
    if (info.is_bias) {
      std::fill(data.begin(), data.end(), T(0));
      continue;
    }
    SplitMix64 rng(derive_seed(seed, i, 7));
    const double sd = std::sqrt(2.0 / static_cast<double>(info.fan_in));
    for (T &v : data)
      v = static_cast<T>(sd * rng.normal());
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

struct EpochRecord {
  std::size_t epoch = 0;
  double loss_cls = 0, loss_loc = 0, lr = 0, wallclock_s = 0;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(EpochRecord, epoch, loss_cls, loss_loc, lr, wallclock_s)

inline std::string blob_name(const std::string &path) {
  std::string s = path;
  std::replace(s.begin(), s.end(), '/', '.');
  return s + ".bin";
}

namespace detail {

inline void write_f32_le(const std::filesystem::path &file, const std::vector<float> &v) {
  std::ofstream out(file, std::ios::binary);
  if (!out)
    throw IoError("cannot write " + file.string());
  for (float f : v) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    const char bytes[4] = {static_cast<char>(bits & 0xFF), static_cast<char>((bits >> 8) & 0xFF),
                           static_cast<char>((bits >> 16) & 0xFF),
                           static_cast<char>((bits >> 24) & 0xFF)};
    out.write(bytes, 4);
  }
  if (!out)
    throw IoError("write failed: " + file.string());
}

inline std::vector<float> read_f32_le(const std::filesystem::path &file, std::size_t count) {
  std::ifstream in(file, std::ios::binary);
  if (!in)
    throw IoError("cannot read " + file.string());
  std::vector<unsigned char> raw(count * 4);
  in.read(reinterpret_cast<char *>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size()) || in.peek() != EOF)
    throw IoError(file.string() + ": expected " + std::to_string(count) + " floats");
  std::vector<float> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint32_t bits = std::uint32_t(raw[4 * i]) | (std::uint32_t(raw[4 * i + 1]) << 8) |
                               (std::uint32_t(raw[4 * i + 2]) << 16) |
                               (std::uint32_t(raw[4 * i + 3]) << 24);
    std::memcpy(&out[i], &bits, 4);
  }
  return out;
}

} // namespace detail

struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
  AugmentConfig augment;
  std::size_t epoch = 0; // completed epochs
  std::vector<EpochRecord> history;
  nlohmann::json manifest;
};

inline constexpr const char *kVersion = "rfbnet-desk 1.0.0";

/// Writes manifest.json plus params/<path>.bin and momentum/<path>.bin into
/// `dir`. The directory is assembled under a temporary name and renamed into
/// place, so an existing checkpoint survives a failed write.
inline void save_checkpoint(const std::filesystem::path &dir, const DetectorNet<float> &net,
                            const SgdState<float> *state, const TrainConfig &train,
                            const AugmentConfig &augment, std::size_t epoch,
                            const std::vector<EpochRecord> &history) {
  namespace fs = std::filesystem;
  const fs::path tmp = dir.string() + ".tmp";
  std::error_code ec;
  fs::remove_all(tmp, ec);
  fs::create_directories(tmp / "params", ec);
  if (state)
    fs::create_directories(tmp / "momentum", ec);
  if (ec)
    throw IoError("cannot create " + tmp.string() + ": " + ec.message());
  nlohmann::json params = nlohmann::json::array();
  const auto &store = net.store();
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto &info = store.info(i);
    const std::string file = blob_name(info.path);
    detail::write_f32_le(tmp / "params" / file, store.tensor(i).data());
    if (state)
      detail::write_f32_le(tmp / "momentum" / file, state->velocity[i]);
    params.push_back({{"path", info.path},
                      {"shape", {info.shape.n, info.shape.c, info.shape.h, info.shape.w}},
                      {"file", "params/" + file}});
  }
  nlohmann::json manifest{{"format", "rfb-checkpoint-1"},
                          {"version", kVersion},
                          {"model", net.config()},
                          {"blocks", head_blocks(net.config())},
                          {"train", train},
                          {"augment", augment},
                          {"epoch", epoch},
                          {"history", history},
                          {"has_momentum", state != nullptr},
                          {"params", params}};
  {
    std::ofstream out(tmp / "manifest.json", std::ios::binary);
    out << manifest.dump(2) << '\n';
    if (!out)
      throw IoError("cannot write manifest in " + tmp.string());
  }
  fs::remove_all(dir, ec);
  fs::rename(tmp, dir, ec);
  if (ec)
    throw IoError("cannot move checkpoint into " + dir.string() + ": " + ec.message());
}

inline Checkpoint read_checkpoint_manifest(const std::filesystem::path &dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in)
    throw IoError("no manifest.json in " + dir.string());
  Checkpoint c;
  try {
    in >> c.manifest;
    c.model = c.manifest.at("model").get<ModelConfig>();
    c.train = c.manifest.at("train").get<TrainConfig>();
    c.augment = c.manifest.value("augment", AugmentConfig{});
    c.epoch = c.manifest.at("epoch").get<std::size_t>();
    c.history = c.manifest.at("history").get<std::vector<EpochRecord>>();
  } catch (const nlohmann::json::exception &e) {
    throw IoError(dir.string() + "/manifest.json: " + e.what());
  }
  return c;
}

/// Loads parameter blobs (and momentum when `state` is given) into a network
/// built from the manifest's model config.
inline void load_checkpoint_params(const std::filesystem::path &dir, DetectorNet<float> &net,
                                   SgdState<float> *state = nullptr) {
  auto &store = net.store();
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto &info = store.info(i);
    store.tensor(i).data() =
        detail::read_f32_le(dir / "params" / blob_name(info.path), info.shape.numel());
    if (state)
      state->velocity[i] =
          detail::read_f32_le(dir / "momentum" / blob_name(info.path), info.shape.numel());
  }
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainOptions {
  std::filesystem::path out_dir;     // empty: no checkpoints or history
  std::filesystem::path resume_from; // checkpoint directory
  std::size_t jobs = 1;
  bool strict_deterministic = false; // forces one worker and zero wallclock
  std::size_t stop_after_epoch = 0;  // 0: run to total_epochs
  std::function<void(const EpochRecord &)> on_epoch;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t epochs_run = 0;
};

/// Normalized ground truth for one (possibly augmented) sample.
inline std::vector<BoxXYXY> normalize_boxes(const std::vector<BoxXYXY> &boxes, std::size_t w,
                                            std::size_t h) {
  std::vector<BoxXYXY> out;
  for (const auto &b : boxes)
    out.push_back(b.scaled(1.0 / static_cast<double>(w), 1.0 / static_cast<double>(h)));
  return out;
}

inline void write_history_csv(const std::filesystem::path &file,
                              const std::vector<EpochRecord> &history) {
  std::ofstream out(file, std::ios::binary);
  if (!out)
    throw IoError("cannot write " + file.string());
  out << "epoch,loss_cls,loss_loc,lr,wallclock_s\n";
  char buf[160];
  for (const auto &r : history) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.3f\n", r.epoch, r.loss_cls, r.loss_loc,
                  r.lr, r.wallclock_s);
    out << buf;
  }
}

namespace detail {

struct SampleResult {
  std::vector<std::vector<float>> grads;
  double loss_cls = 0, loss_loc = 0;
};

inline SampleResult sample_step(const DetectorNet<float> &net, const Augmented &aug,
                                const PriorTargets &targets, double normalizer,
                                std::size_t neg_pos_ratio) {
  auto params = net.store().bind(true);
  const Tensor<float> image = image_to_tensor<float>(aug.image);
  const auto out = net.forward(params, image);
  auto loss = multibox_loss(out.cls, out.loc, targets, neg_pos_ratio, normalizer);
  Tensor<float> total = add(loss.cls, loss.loc);
  backward(total);
  SampleResult r;
  r.loss_cls = loss.cls.item();
  r.loss_loc = loss.loc.item();
  for (auto &p : params)
    r.grads.push_back(p.has_grad() ? std::move(p.grad()) : std::vector<float>(p.numel(), 0.f));
  return r;
}

} // namespace detail

/// SGD over shuffled mini-batches. Each sample runs through its own graph;
/// per-sample gradients are summed in batch order, so the result does not
/// depend on the worker count. Shuffling and augmentation derive from
/// (seed, epoch, index), so resuming reproduces an uninterrupted run.
inline TrainResult train(DetectorNet<float> &net, const std::vector<Sample> &data,
                         const TrainConfig &cfg, const AugmentConfig &aug,
                         const TrainOptions &opt = {}) {
  validate(cfg);
  if (data.empty())
    throw ShapeError("train: dataset is empty");
  SgdState<float> state(net.store());
  TrainResult result;
  std::size_t start_epoch = 0;
  if (!opt.resume_from.empty()) {
    const Checkpoint ck = read_checkpoint_manifest(opt.resume_from);
    load_checkpoint_params(opt.resume_from, net, &state);
    start_epoch = ck.epoch;
    result.history = ck.history;
  }
  const std::size_t n = data.size();
  const std::size_t ipe = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t jobs = opt.strict_deterministic ? 1 : std::max<std::size_t>(1, opt.jobs);
  const std::size_t end_epoch =
      opt.stop_after_epoch ? std::min(opt.stop_after_epoch, cfg.total_epochs) : cfg.total_epochs;
  const double prior_wall = result.history.empty() ? 0.0 : result.history.back().wallclock_s;
  const auto t0 = std::chrono::steady_clock::now();
  const auto &neg_ratio = net.head().neg_pos_ratio;

  for (std::size_t epoch = start_epoch; epoch < end_epoch; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    SplitMix64 shuffle(derive_seed(cfg.seed, epoch, 1));
    for (std::size_t i = n; i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle.next() % i)]);

    double sum_cls = 0, sum_loc = 0;
    const double epoch_lr = lr_at(epoch * ipe, ipe, cfg);
    for (std::size_t b = 0; b < ipe; ++b) {
      const std::size_t lo = b * cfg.batch_size, hi = std::min(n, lo + cfg.batch_size);
      const std::size_t m = hi - lo;
      std::vector<Augmented> augs(m);
      std::vector<PriorTargets> targets(m);
      std::size_t positives = 0;
      for (std::size_t k = 0; k < m; ++k) {
        const std::size_t idx = order[lo + k];
        const Sample &s = data[idx];
        augs[k] = augment(s.image, s.boxes, derive_seed(cfg.seed, epoch * n + idx, 2), aug);
        targets[k] = build_targets(
            normalize_boxes(augs[k].boxes, augs[k].image.width, augs[k].image.height),
            net.priors(), net.head());
        positives += targets[k].num_positive;
      }
      const double normalizer = static_cast<double>(std::max<std::size_t>(positives, 1));
      std::vector<detail::SampleResult> results(m);
      auto work = [&](std::size_t first, std::size_t stride) {
        for (std::size_t k = first; k < m; k += stride)
          results[k] = detail::sample_step(net, augs[k], targets[k], normalizer, neg_ratio);
      };
      if (jobs == 1) {
        work(0, 1);
      } else {
        std::vector<std::thread> pool;
        for (std::size_t j = 0; j < std::min(jobs, m); ++j)
          pool.emplace_back(work, j, std::min(jobs, m));
        for (auto &t : pool)
          t.join();
      }
      std::vector<std::vector<float>> grads = std::move(results[0].grads);
      double batch_cls = results[0].loss_cls, batch_loc = results[0].loss_loc;
      for (std::size_t k = 1; k < m; ++k) {
        for (std::size_t p = 0; p < grads.size(); ++p)
          for (std::size_t i = 0; i < grads[p].size(); ++i)
            grads[p][i] += results[k].grads[p][i];
        batch_cls += results[k].loss_cls;
        batch_loc += results[k].loss_loc;
      }
      if (!std::isfinite(batch_cls) || !std::isfinite(batch_loc))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(b));
      sgd_step(net.store(), grads, state, lr_at(epoch * ipe + b, ipe, cfg), cfg);
      sum_cls += batch_cls;
      sum_loc += batch_loc;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss_cls = sum_cls / static_cast<double>(ipe);
    rec.loss_loc = sum_loc / static_cast<double>(ipe);
    rec.lr = epoch_lr;
    rec.wallclock_s =
        opt.strict_deterministic
            ? 0.0
            : prior_wall + std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                               .count();
    result.history.push_back(rec);
    ++result.epochs_run;
    if (opt.on_epoch)
      opt.on_epoch(rec);
    if (!opt.out_dir.empty()) {
      const bool last = epoch + 1 == end_epoch;
      if (last || (cfg.checkpoint_every && (epoch + 1) % cfg.checkpoint_every == 0)) {
        save_checkpoint(opt.out_dir / ("epoch_" + std::to_string(epoch + 1)), net, &state, cfg,
                        aug, epoch + 1, result.history);
        save_checkpoint(opt.out_dir / "last", net, &state, cfg, aug, epoch + 1, result.history);
      }
      write_history_csv(opt.out_dir / "history.csv", result.history);
    }
  }
  return result;
}

/// Runs the detector on one image; boxes are returned in pixel units.
inline std::vector<Detection> detect(const DetectorNet<float> &net, const Image &image,
                                     const PostprocessConfig &pp = {}) {
  const auto out = net.forward(image_to_tensor<float>(image));
  auto dets = postprocess<float>(out.cls.data(), out.loc.data(), net.priors(), net.head(), pp);
  const auto sx = static_cast<double>(image.width), sy = static_cast<double>(image.height);
  for (auto &d : dets)
    d.box = d.box.scaled(sx, sy);
  return dets;
}

} // namespace rfb
