#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "crosslink/checkpoint.hpp"
#include "crosslink/config.hpp"
#include "crosslink/data.hpp"
#include "crosslink/loss.hpp"
#include "crosslink/metrics.hpp"
#include "crosslink/net.hpp"

namespace crosslink::train {

struct TrainConfig {
  Variant variant = Variant::Crosslink;
  /// "desk" (lr 1e-3) or "paper" (lr 0.5e-5, batch 2); sets defaults only.
  std::string mode = "desk";
  double learning_rate = 1e-3;
  double weight_decay = 0.005;
  std::size_t batch_size = 4;
  std::size_t epochs = 40;
  LossWeights loss_weights;
  std::size_t attention_block = kDefaultAttentionBlock;
  std::uint64_t seed = 0;
  bool augment = true;
  double init_std = 0.02;
  /// "f32" or "f64".
  std::string precision = "f32";
  /// 0 keeps the OpenMP default.
  std::size_t threads = 0;

  static TrainConfig desk();
  static TrainConfig paper_parity();

  /// Throws ConfigError on invalid settings.
  void validate() const;
  static const std::set<std::string>& keys();
  /// Starts from the defaults of `mode` (key "mode", default desk) and
  /// overrides with the remaining keys.
  static TrainConfig from_config(const KeyValueConfig& cfg);
  std::string to_config() const;
};

/// conv weights ~ N(0, std^2), biases 0, BN gamma 1 / beta 0, running
/// statistics reset. Deterministic per seed.
template <typename T>
void init_weights(Network<T>& net, std::uint64_t seed, double std = 0.02);

/// Adam with bias correction and decoupled weight decay:
///   theta -= lr * wd * theta + lr * m_hat / (sqrt(v_hat) + eps)
template <typename T>
class Adam {
 public:
  Adam(std::vector<NamedTensor<T>> params, double lr, double weight_decay, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8);

  /// Applies one update from the parameters' gradients (missing gradients
  /// count as zero). Returns false and leaves everything untouched when any
  /// gradient is non-finite.
  bool step();

  std::uint64_t steps() const { return t_; }
  std::uint64_t skipped() const { return skipped_; }

  /// `by_reference` adds the moment buffers without copying (see Checkpoint::add_view).
  void save(Checkpoint& ckpt, bool by_reference = false) const;
  void load(const Checkpoint& ckpt);

 private:
  std::vector<NamedTensor<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  double lr_, wd_, beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
  std::uint64_t skipped_ = 0;
};

/// Stacks images (or masks as 0/1) into an N x 1 x H x W tensor.
template <typename T>
Tensor<T> stack_images(const std::vector<const GrayImage*>& images);
template <typename T>
Tensor<T> stack_masks(const std::vector<const BinaryMask*>& masks);

/// Sigmoid probabilities for one image (eval-mode batch norm).
template <typename T>
std::vector<float> predict(Network<T>& net, const GrayImage& image);

/// Per-case metrics at threshold 0.5, eval-mode batch norm.
template <typename T>
std::vector<metrics::CaseMetrics> evaluate(Network<T>& net,
                                           const std::vector<const data::Sample*>& samples,
                                           std::size_t batch_size = 8);

struct StepRecord {
  std::size_t epoch = 0;
  std::uint64_t step = 0;
  double cls = 0, dice = 0, attention = 0, total = 0;
  std::size_t degenerate = 0;
  bool skipped = false;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0;
  std::size_t steps = 0;
  metrics::MetricSummary validation;
  bool best = false;
};

/// Line-delimited JSON records. Everything written here is a deterministic
/// function of the run configuration; wall-clock timings go to a separate
/// sidecar file so that repeated runs produce identical logs.
class RunLog {
 public:
  RunLog() = default;
  /// Appends when `append` is set, otherwise truncates.
  RunLog(const std::filesystem::path& path, bool append);

  bool is_open() const { return out_ != nullptr; }
  void config(const TrainConfig& cfg, std::size_t threads, std::size_t train_size,
              std::size_t val_size);
  void step(const StepRecord& r);
  void epoch(const EpochRecord& r);
  void evaluation(const std::string& label, const std::vector<metrics::CaseMetrics>& cases);
  void event(const std::string& kind, const std::string& message);
  void timing(std::size_t epoch, double seconds);

 private:
  void write(const std::string& line);
  std::unique_ptr<std::ofstream> out_;
  std::unique_ptr<std::ofstream> timing_;
};

struct TrainResult {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  std::optional<double> best_dsc;
  std::uint64_t skipped_steps = 0;
  std::size_t degenerate_samples = 0;
  bool diverged = false;
};

/// Epoch loop over a fixed training set with optional validation.
///
/// Batch order and augmentation draw from streams derived from (seed,
/// epoch, sample index), so a run depends only on its configuration, the
/// data and the thread count. With an output directory, `last.ckpt` (model
/// plus optimiser state, for resuming) is written after every epoch and
/// `best.ckpt` whenever validation DSC improves.
template <typename T>
class Trainer {
 public:
  /// `append_log` keeps an existing run log (for resuming into the same directory).
  Trainer(TrainConfig cfg, std::vector<data::Sample> train, std::vector<data::Sample> val,
          std::optional<std::filesystem::path> out_dir = std::nullopt, bool append_log = false);

  /// Continues from a `last.ckpt` written by an earlier run of the same config.
  void resume(const Checkpoint& ckpt);

  /// Runs one epoch (training, validation, checkpoints, log records).
  EpochRecord run_epoch();
  /// Runs until `epochs` is reached, divergence, or `keep_going` returns false.
  TrainResult run(const std::function<bool(const EpochRecord&)>& keep_going = {});

  Network<T>& network() { return *net_; }
  const TrainConfig& config() const { return cfg_; }
  std::size_t epochs_done() const { return epoch_; }
  const std::vector<StepRecord>& steps() const { return steps_; }
  const TrainResult& result() const { return result_; }
  RunLog& log() { return log_; }

  /// Model + optimiser + progress counters. A by-reference snapshot must be
  /// used before the trainer changes.
  Checkpoint snapshot(bool by_reference = false) const;

 private:
  void train_batch(const std::vector<std::size_t>& indices);

  TrainConfig cfg_;
  std::vector<data::Sample> train_;
  std::vector<data::Sample> val_;
  std::optional<std::filesystem::path> out_dir_;
  std::unique_ptr<Network<T>> net_;
  std::unique_ptr<Adam<T>> adam_;
  RunLog log_;
  std::size_t epoch_ = 0;
  std::vector<StepRecord> steps_;
  TrainResult result_;
  bool diverged_ = false;
};

extern template class Adam<float>;
extern template class Adam<double>;
extern template class Trainer<float>;
extern template class Trainer<double>;

}  // namespace crosslink::train
