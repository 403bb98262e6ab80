#pragma once

// Recurrent convolutional odometry network: width-halving max pool, six
// circular-padded conv + batch-norm + ReLU blocks, a linear embedding, a
// four-layer bidirectional LSTM, dropout and a 6-DOF regression head.
// Training, checkpointing and sliding-window inference live here as well.

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "lorcon/dataset_io.hpp"
#include "lorcon/errors.hpp"
#include "lorcon/geometry.hpp"
#include "lorcon/nn/checkpoint.hpp"
#include "lorcon/nn/layers.hpp"
#include "lorcon/nn/ops.hpp"
#include "lorcon/nn/optim.hpp"
#include "lorcon/nn/random.hpp"
#include "lorcon/nn/tensor.hpp"
#include "lorcon/projection.hpp"

namespace lorcon {

struct StridePair {
  int vertical = 1;
  int horizontal = 1;

  bool operator==(const StridePair&) const = default;
};

inline constexpr int kConvLayers = 6;

struct ModelConfig {
  int height = 64;
  int width = 900;
  // Input channels followed by the six conv output widths.
  std::vector<int> channels = {10, 32, 64, 128, 128, 256, 256};
  std::vector<StridePair> strides = {{2, 2}, {1, 2}, {2, 2}, {1, 2}, {2, 2}, {1, 1}};
  int kernel = 3;
  StridePair padding = {1, 1};
  int embed = 1024;
  int hidden = 512;
  int lstm_layers = 4;
  bool bidirectional = true;
  double dropout = 0.5;
  int sequence_length = 4;

  static ModelConfig full() { return {}; }

  // Small preset that trains in minutes on a CPU.
  static ModelConfig desk() {
    ModelConfig c;
    c.height = 16;
    c.width = 64;
    c.channels = {10, 8, 16, 16, 32, 32, 32};
    c.embed = 32;
    c.hidden = 16;
    return c;
  }

  void validate() const {
    if (height < 1 || width < 2) throw ConfigError("model: image must be at least 1x2");
    if (channels.size() != kConvLayers + 1)
      throw ConfigError("model: channels needs 7 entries (input + 6 conv layers)");
    if (channels[0] != kPairChannels)
      throw ConfigError("model: input channels must be " + std::to_string(kPairChannels));
    for (int c : channels)
      if (c < 1) throw ConfigError("model: channel widths must be positive");
    if (strides.size() != kConvLayers) throw ConfigError("model: strides needs 6 pairs");
    for (int i = 0; i < kConvLayers; ++i) {
      if (strides[i].vertical < 1) throw ConfigError("model: conv" + std::to_string(i + 1) + " vertical stride < 1");
      const bool last = i == kConvLayers - 1;
      if (!last && strides[i].horizontal <= 1)
        throw ConfigError("model: conv" + std::to_string(i + 1) + " needs horizontal stride > 1");
      if (last && strides[i].horizontal != 1)
        throw ConfigError("model: conv6 must use horizontal stride 1");
    }
    if (kernel < 1) throw ConfigError("model: kernel must be positive");
    if (padding.vertical < 0 || padding.horizontal < 0) throw ConfigError("model: negative padding");
    if (embed < 1 || hidden < 1) throw ConfigError("model: embed and hidden must be positive");
    if (lstm_layers != 4) throw ConfigError("model: lstm_layers must be 4");
    if (!bidirectional) throw ConfigError("model: the LSTM must be bidirectional");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model: dropout must lie in [0,1)");
    if (sequence_length < 1) throw ConfigError("model: sequence_length must be >= 1");
  }
};

struct LayerShape {
  std::string name;
  int channels = 0;
  int height = 0;
  int width = 0;
};

// Per-stage output shapes for one frame pair; throws when a stage collapses.
inline std::vector<LayerShape> infer_shapes(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<LayerShape> out;
  out.push_back({"input", cfg.channels[0], cfg.height, cfg.width});
  if (cfg.width / 2 < 1) throw ConfigError("model: width too small for the max pool");
  out.push_back({"maxpool", cfg.channels[0], cfg.height, cfg.width / 2});
  for (int i = 0; i < kConvLayers; ++i) {
    const LayerShape& prev = out.back();
    const auto h = nn::conv_output_extent(prev.height, cfg.padding.vertical, cfg.kernel,
                                          cfg.strides[i].vertical);
    const auto w = nn::conv_output_extent(prev.width, cfg.padding.horizontal, cfg.kernel,
                                          cfg.strides[i].horizontal);
    const std::string name = "conv" + std::to_string(i + 1);
    if (h == 0 || w == 0)
      throw ConfigError("model: spatial dimensions collapse to zero at " + name + " (input " +
                        std::to_string(prev.height) + "x" + std::to_string(prev.width) + ")");
    out.push_back({name, cfg.channels[i + 1], static_cast<int>(h), static_cast<int>(w)});
  }
  return out;
}

inline std::size_t flattened_features(const ModelConfig& cfg) {
  const LayerShape last = infer_shapes(cfg).back();
  return static_cast<std::size_t>(last.channels) * last.height * last.width;
}

template <typename T>
class LorconNet {
 public:
  using Tensor = nn::Tensor<T>;

  LorconNet(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    const auto shapes = infer_shapes(cfg_);
    nn::Rng rng(seed);
    for (int i = 0; i < kConvLayers; ++i) {
      const nn::Conv2dGeometry geo{static_cast<std::size_t>(cfg_.strides[i].vertical),
                                   static_cast<std::size_t>(cfg_.strides[i].horizontal),
                                   static_cast<std::size_t>(cfg_.padding.vertical),
                                   static_cast<std::size_t>(cfg_.padding.horizontal)};
      const auto k = static_cast<std::size_t>(cfg_.kernel);
      // Batch norm follows every conv, so a conv bias would be redundant.
      convs_.emplace_back(cfg_.channels[i], cfg_.channels[i + 1], k, k, geo, false, rng);
      bns_.emplace_back(cfg_.channels[i + 1]);
    }
    flat_ = flattened_features(cfg_);
    embed_ = nn::Linear<T>(flat_, cfg_.embed, rng, nn::LinearInit::kDefault);
    lstm_ = nn::BiLstm<T>(cfg_.embed, cfg_.hidden, cfg_.lstm_layers, rng);
    head_ = nn::Linear<T>(2 * static_cast<std::size_t>(cfg_.hidden), 6, rng, nn::LinearInit::kDefault);
  }

  const ModelConfig& config() const { return cfg_; }
  nn::Mode mode() const { return mode_; }
  void set_mode(nn::Mode m) { mode_ = m; }

  // [N, 10, H, W] frame pairs -> [N, C, h, w] feature maps (pre-flatten).
  Tensor encode(const Tensor& pairs) {
    if (pairs.rank() != 4 || pairs.dim(1) != static_cast<std::size_t>(kPairChannels) ||
        pairs.dim(2) != static_cast<std::size_t>(cfg_.height) ||
        pairs.dim(3) != static_cast<std::size_t>(cfg_.width))
      throw ShapeError("model: expected [N,10," + std::to_string(cfg_.height) + "," +
                       std::to_string(cfg_.width) + "] input, got " + nn::to_string(pairs.shape()));
    Tensor x = nn::maxpool2d(pairs, 1, 2, 1, 2);
    nn::check_finite(x, "maxpool");
    for (int i = 0; i < kConvLayers; ++i) {
      x = nn::relu(bns_[i](convs_[i](x), mode_));
      nn::check_finite(x, "conv" + std::to_string(i + 1));
    }
    return x;
  }

  // [B, S, 10, H, W] -> [B, S, 6], a prediction for every step.
  Tensor forward_all(const Tensor& batch, nn::Rng* dropout_rng = nullptr) {
    if (batch.rank() != 5) throw ShapeError("model: expected [B,S,10,H,W], got " + nn::to_string(batch.shape()));
    const std::size_t b = batch.dim(0), s = batch.dim(1);
    Tensor x = encode(nn::reshape(batch, {b * s, batch.dim(2), batch.dim(3), batch.dim(4)}));
    x = nn::reshape(x, {b * s, flat_});
    x = embed_(x);
    nn::check_finite(x, "embed");
    x = nn::transpose01(nn::reshape(x, {b, s, static_cast<std::size_t>(cfg_.embed)}));
    x = lstm_(x);
    nn::check_finite(x, "lstm");
    if (mode_ == nn::Mode::kTraining && cfg_.dropout > 0.0) {
      if (!dropout_rng) throw ShapeError("model: training forward needs a dropout generator");
      x = nn::dropout(x, cfg_.dropout, true, *dropout_rng);
    }
    x = nn::transpose01(head_(x));
    nn::check_finite(x, "head");
    return x;
  }

  // Training mode returns every step; inference returns only the last step as
  // [B, 1, 6].
  Tensor forward(const Tensor& batch, nn::Rng* dropout_rng = nullptr) {
    Tensor all = forward_all(batch, dropout_rng);
    if (mode_ == nn::Mode::kTraining) return all;
    return nn::slice(all, 1, all.dim(1) - 1, 1);
  }

  nn::ParameterList<T> parameters() const {
    nn::ParameterList<T> list;
    for (int i = 0; i < kConvLayers; ++i) {
      const std::string p = "cnn." + std::to_string(i);
      convs_[i].collect(p + ".conv", list);
      bns_[i].collect(p + ".bn", list);
    }
    embed_.collect("embed", list);
    lstm_.collect("lstm", list);
    head_.collect("head", list);
    return list;
  }

  std::size_t parameter_count() const { return parameters().scalar_count(); }

  nn::Linear<T>& head() { return head_; }

 private:
  ModelConfig cfg_;
  nn::Mode mode_ = nn::Mode::kTraining;
  std::vector<nn::Conv2d<T>> convs_;
  std::vector<nn::BatchNorm2d<T>> bns_;
  std::size_t flat_ = 0;
  nn::Linear<T> embed_;
  nn::BiLstm<T> lstm_;
  nn::Linear<T> head_;
};

// ---------------------------------------------------------------------------
// Checkpoints

template <typename T>
nn::Checkpoint make_checkpoint(const LorconNet<T>& model, const nn::Adagrad<T>* opt,
                               std::int64_t epochs_done) {
  nn::Checkpoint ck;
  const auto params = model.parameters();
  for (const auto& p : params.parameters) ck.put(p.name, p.tensor.shape(), p.tensor.values());
  for (const auto& b : params.buffers) ck.put(b.name, b.tensor.shape(), b.tensor.values());
  if (opt) {
    for (const auto& p : params.parameters) {
      auto it = opt->accumulators().find(p.name);
      const std::vector<T> acc =
          it == opt->accumulators().end() ? std::vector<T>(p.tensor.numel(), T(0)) : it->second;
      ck.put(nn::kOptimizerPrefix + p.name, p.tensor.shape(), acc);
    }
  }
  ck.put<std::int64_t>(nn::kMetaPrefix + "epoch", {1}, {epochs_done});
  return ck;
}

// Restores parameters, buffers and (if present) optimizer state. Returns the
// number of completed epochs recorded in the checkpoint.
template <typename T>
std::int64_t restore_checkpoint(LorconNet<T>& model, nn::Adagrad<T>* opt, const nn::Checkpoint& ck) {
  auto params = model.parameters();
  std::string problems;
  auto check = [&](const nn::NamedTensor<T>& t) {
    if (!ck.contains(t.name)) {
      problems += "\n  " + t.name + ": expected " + nn::to_string(t.tensor.shape()) + ", missing";
      return;
    }
    const auto& r = ck.record(t.name);
    if (r.dims != t.tensor.shape() || r.dtype != nn::dtype_of<T>())
      problems += "\n  " + t.name + ": expected " + nn::to_string(t.tensor.shape()) + " " +
                  nn::dtype_name(nn::dtype_of<T>()) + ", found " + nn::to_string(r.dims) + " " +
                  nn::dtype_name(r.dtype);
  };
  for (const auto& p : params.parameters) check(p);
  for (const auto& b : params.buffers) check(b);
  if (!problems.empty()) throw DataError("checkpoint incompatible with model config:" + problems);

  auto assign = [&](nn::NamedTensor<T>& t) {
    const auto v = ck.get<T>(t.name);
    std::copy(v.begin(), v.end(), t.tensor.data().begin());
  };
  for (auto& p : params.parameters) assign(p);
  for (auto& b : params.buffers) assign(b);
  if (opt) {
    opt->accumulators().clear();
    for (const auto& p : params.parameters) {
      const std::string key = nn::kOptimizerPrefix + p.name;
      if (ck.contains(key)) opt->accumulators()[p.name] = ck.get<T>(key);
    }
  }
  const std::string epoch_key = nn::kMetaPrefix + "epoch";
  return ck.contains(epoch_key) ? ck.get<std::int64_t>(epoch_key).at(0) : 0;
}

// ---------------------------------------------------------------------------
// Samples

// A stride-1 window of S consecutive frame pairs with their relative-pose
// targets. Frames are shared between overlapping windows.
struct SequenceSample {
  std::shared_ptr<const std::vector<FrameChannels>> frames;
  std::size_t start = 0;
  std::vector<RelPose6D> targets;

  std::size_t steps() const { return targets.size(); }

  // Pair k covers frames (start + k, start + k + 1).
  FramePair pair(std::size_t k) const { return stack_pair((*frames)[start + k], (*frames)[start + k + 1]); }

  std::vector<FramePair> inputs() const {
    std::vector<FramePair> out;
    for (std::size_t k = 0; k < steps(); ++k) out.push_back(pair(k));
    return out;
  }
};

inline std::vector<SequenceSample> make_samples(std::shared_ptr<const std::vector<FrameChannels>> frames,
                                                const std::vector<Pose>& poses, int steps) {
  if (frames->size() != poses.size())
    throw ShapeError("make_samples: " + std::to_string(frames->size()) + " frames but " +
                     std::to_string(poses.size()) + " poses");
  if (steps < 1) throw ConfigError("make_samples: sequence length must be >= 1");
  const auto s = static_cast<std::size_t>(steps);
  std::vector<SequenceSample> out;
  if (frames->size() < s + 1) {
    log::warn("make_samples: " + std::to_string(frames->size()) + " frames cannot fill a window of " +
              std::to_string(s) + " pairs");
    return out;
  }
  const std::vector<RelPose6D> motions = consecutive_motions(poses);
  for (std::size_t t = 0; t + s < frames->size(); ++t) {
    SequenceSample sample{frames, t, {}};
    sample.targets.assign(motions.begin() + static_cast<std::ptrdiff_t>(t),
                          motions.begin() + static_cast<std::ptrdiff_t>(t + s));
    out.push_back(std::move(sample));
  }
  return out;
}

inline std::vector<SequenceSample> make_samples(const std::vector<ProjectedFrame>& frames,
                                                const std::vector<Pose>& poses, int steps) {
  auto channels = std::make_shared<std::vector<FrameChannels>>();
  for (const auto& f : frames) channels->push_back(to_channels(f));
  return make_samples(std::move(channels), poses, steps);
}

template <typename T>
struct Batch {
  nn::Tensor<T> inputs;   // [B, S, 10, H, W]
  nn::Tensor<T> targets;  // [B, S, 6]
};

template <typename T>
Batch<T> assemble_batch(const std::vector<SequenceSample>& samples, std::span<const std::size_t> idx) {
  if (idx.empty()) throw ShapeError("assemble_batch: empty batch");
  const SequenceSample& first = samples.at(idx[0]);
  const std::size_t s = first.steps();
  const auto& f0 = (*first.frames)[first.start];
  const std::size_t h = f0.height, w = f0.width, plane = h * w;
  const std::size_t pair_size = kPairChannels * plane;
  std::vector<T> in(idx.size() * s * pair_size);
  std::vector<T> tg(idx.size() * s * 6);
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const SequenceSample& smp = samples.at(idx[b]);
    if (smp.steps() != s) throw ShapeError("assemble_batch: samples have different lengths");
    for (std::size_t k = 0; k < s; ++k) {
      const FrameChannels& a = (*smp.frames)[smp.start + k];
      const FrameChannels& c = (*smp.frames)[smp.start + k + 1];
      if (a.plane() != plane || c.plane() != plane)
        throw ShapeError("assemble_batch: frame dimensions differ within a batch");
      T* dst = in.data() + (b * s + k) * pair_size;
      std::copy(a.data.begin(), a.data.end(), dst);
      std::copy(c.data.begin(), c.data.end(), dst + a.data.size());
      const auto t = smp.targets[k].as_array();
      std::copy(t.begin(), t.end(), tg.begin() + static_cast<std::ptrdiff_t>((b * s + k) * 6));
    }
  }
  return {nn::Tensor<T>({idx.size(), s, static_cast<std::size_t>(kPairChannels), h, w}, std::move(in)),
          nn::Tensor<T>({idx.size(), s, 6}, std::move(tg))};
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  int batch_size = 32;
  double learning_rate = 5e-4;
  int epochs = 400;
  double rotation_weight = 100.0;
  std::uint64_t seed = 1;
  // Checkpoint every N epochs (0: only at the end).
  int checkpoint_every = 0;
  nn::LossSteps loss_steps = nn::LossSteps::kAll;

  static TrainConfig full() { return {}; }

  // Pairs with ModelConfig::desk(): few samples and few steps need a larger
  // step size and smaller batches than full-scale training.
  static TrainConfig desk() {
    TrainConfig c;
    c.batch_size = 8;
    c.learning_rate = 0.01;
    c.epochs = 500;
    return c;
  }

  void validate() const {
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (!(rotation_weight > 0.0)) throw ConfigError("train: rotation_weight must be positive");
    if (!(learning_rate >= 0.0)) throw ConfigError("train: learning_rate must be non-negative");
    if (epochs < 0) throw ConfigError("train: epochs must be non-negative");
    if (checkpoint_every < 0) throw ConfigError("train: checkpoint_every must be non-negative");
  }
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double mean_loss = 0;
  double translation_loss = 0;
  double rotation_loss = 0;
  double wall_seconds = 0;
};

struct TrainCallbacks {
  std::function<void(const EpochRecord&)> on_epoch;
  // Called with the number of completed epochs when a checkpoint is due.
  std::function<void(int)> on_checkpoint;
};

// Runs epochs [start_epoch, cfg.epochs). Each epoch draws its shuffle order and
// dropout masks from an independent stream keyed by (seed, epoch), so resuming
// from a checkpoint continues exactly as an uninterrupted run.
template <typename T>
std::vector<EpochRecord> train(LorconNet<T>& model, nn::Adagrad<T>& opt,
                               const std::vector<SequenceSample>& samples, const TrainConfig& cfg,
                               int start_epoch = 0, const TrainCallbacks& callbacks = {}) {
  cfg.validate();
  if (samples.empty()) throw DataError("train: no training samples");
  model.set_mode(nn::Mode::kTraining);
  auto params = model.parameters();
  std::vector<EpochRecord> log;
  const auto t0 = std::chrono::steady_clock::now();
  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    nn::Rng rng = nn::Rng::stream(cfg.seed, static_cast<std::uint64_t>(epoch));
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);

    double loss_sum = 0, trans_sum = 0, rot_sum = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
      const std::span<const std::size_t> idx(order.data() + begin, end - begin);
      Batch<T> batch = assemble_batch<T>(samples, idx);
      params.zero_grad();
      nn::Tensor<T> pred = model.forward_all(batch.inputs, &rng);
      auto loss = nn::weighted_mse_loss(pred, batch.targets, cfg.rotation_weight, cfg.loss_steps);
      const double value = loss.total.item();
      if (!std::isfinite(value))
        throw NumericalError("train: non-finite loss at epoch " + std::to_string(epoch + 1));
      loss.total.backward();
      opt.step(params.parameters);
      const double n = static_cast<double>(idx.size());
      loss_sum += value * n;
      trans_sum += loss.translation * n;
      rot_sum += loss.rotation * n;
    }
    const double count = static_cast<double>(samples.size());
    EpochRecord rec{epoch + 1, loss_sum / count, trans_sum / count, rot_sum / count,
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
    log.push_back(rec);
    if (callbacks.on_epoch) callbacks.on_epoch(rec);
    const bool due = cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0;
    if (callbacks.on_checkpoint && (due || epoch + 1 == cfg.epochs)) callbacks.on_checkpoint(epoch + 1);
  }
  return log;
}

// Loss of the given samples without updating anything. In training mode the
// dropout masks come from `dropout_seed`.
template <typename T>
nn::LossTerms<T> evaluate_loss(LorconNet<T>& model, const std::vector<SequenceSample>& samples,
                               std::span<const std::size_t> idx, double rotation_weight,
                               std::uint64_t dropout_seed = 0,
                               nn::LossSteps steps = nn::LossSteps::kAll) {
  nn::NoGradGuard no_grad;
  Batch<T> batch = assemble_batch<T>(samples, idx);
  nn::Rng rng(dropout_seed);
  nn::Tensor<T> pred = model.forward_all(batch.inputs, &rng);
  return nn::weighted_mse_loss(pred, batch.targets, rotation_weight, steps);
}

// ---------------------------------------------------------------------------
// Inference

// One relative pose per frame transition. Windows are stateless and slide by
// one frame; each contributes its last-step prediction, and the first window
// also supplies its earlier steps so that the first S-1 transitions are
// covered.
template <typename T>
std::vector<RelPose6D> infer_sequence(LorconNet<T>& model,
                                      std::shared_ptr<const std::vector<FrameChannels>> frames,
                                      int steps, int batch_size = 32) {
  const auto s = static_cast<std::size_t>(steps);
  if (steps < 1 || frames->size() < s + 1)
    throw DataError("infer_sequence: need at least " + std::to_string(s + 1) + " frames, got " +
                    std::to_string(frames->size()));
  const nn::Mode saved = model.mode();
  model.set_mode(nn::Mode::kInference);
  nn::NoGradGuard no_grad;

  // Windows reuse the sample machinery with zero targets.
  const std::vector<Pose> dummy(frames->size());
  const std::vector<SequenceSample> windows = make_samples(frames, dummy, steps);
  std::vector<RelPose6D> out;
  out.reserve(frames->size() - 1);
  std::vector<std::size_t> idx;
  for (std::size_t begin = 0; begin < windows.size(); begin += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(windows.size(), begin + static_cast<std::size_t>(batch_size));
    idx.clear();
    for (std::size_t i = begin; i < end; ++i) idx.push_back(i);
    const Batch<T> batch = assemble_batch<T>(windows, idx);
    const nn::Tensor<T> pred = model.forward_all(batch.inputs);
    auto at = [&](std::size_t b, std::size_t k) {
      std::array<double, 6> a{};
      for (int j = 0; j < 6; ++j) a[j] = pred.data()[(b * s + k) * 6 + j];
      return RelPose6D::from_array(a);
    };
    for (std::size_t b = 0; b < idx.size(); ++b) {
      if (idx[b] == 0)
        for (std::size_t k = 0; k + 1 < s; ++k) out.push_back(at(b, k));
      out.push_back(at(b, s - 1));
    }
  }
  model.set_mode(saved);
  return out;
}

}  // namespace lorcon
