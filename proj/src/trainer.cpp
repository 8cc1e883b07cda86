#include "crosslink/trainer.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "crosslink/kernels.hpp"
#include "crosslink/ops.hpp"
#include "crosslink/tape.hpp"
#include "json.hpp"

namespace crosslink::train {

using std::size_t;
using json = nlohmann::ordered_json;

namespace {

// Stream tags for derive_rng so that the purposes never share a stream.
constexpr std::uint64_t kInitStream = 0x494e4954ull << 32;
constexpr std::uint64_t kShuffleStream = 0x53485546ull << 32;
constexpr std::uint64_t kAugmentStream = 0x41554730ull << 32;

}  // namespace

// ---------------------------------------------------------------- config

TrainConfig TrainConfig::desk() { return TrainConfig{}; }

TrainConfig TrainConfig::paper_parity() {
  TrainConfig c;
  c.mode = "paper";
  c.learning_rate = 0.5e-5;
  c.batch_size = 2;
  return c;
}

void TrainConfig::validate() const {
  if (mode != "desk" && mode != "paper")
    throw ConfigError("mode must be 'desk' or 'paper', got '" + mode + "'");
  if (!(learning_rate > 0) || !std::isfinite(learning_rate))
    throw ConfigError("learning_rate must be positive");
  if (!(weight_decay >= 0) || !std::isfinite(weight_decay))
    throw ConfigError("weight_decay must be non-negative");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (attention_block < 1 || attention_block > kEncoderChannels.size())
    throw ConfigError("attention_block must be in 1..5");
  if (!(init_std > 0)) throw ConfigError("init_std must be positive");
  if (precision != "f32" && precision != "f64")
    throw ConfigError("precision must be 'f32' or 'f64', got '" + precision + "'");
  try {
    loss_weights.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

const std::set<std::string>& TrainConfig::keys() {
  static const std::set<std::string> k = {
      "variant", "mode",    "learning_rate", "weight_decay", "batch_size", "epochs",
      "lambda",  "attention_block", "seed",  "augment",      "init_std",   "precision",
      "threads"};
  return k;
}

TrainConfig TrainConfig::from_config(const KeyValueConfig& cfg) {
  cfg.require_known(keys());
  const std::string mode = cfg.get_string("mode", "desk");
  TrainConfig c = mode == "paper" ? paper_parity() : desk();
  c.mode = mode;
  if (auto v = cfg.get("variant")) {
    auto parsed = parse_variant(*v);
    if (!parsed) throw ConfigError(cfg.origin() + ": unknown variant '" + *v + "'");
    c.variant = *parsed;
  }
  c.learning_rate = cfg.get_double("learning_rate", c.learning_rate);
  c.weight_decay = cfg.get_double("weight_decay", c.weight_decay);
  c.batch_size = cfg.get_uint("batch_size", c.batch_size);
  c.epochs = cfg.get_uint("epochs", c.epochs);
  if (auto v = cfg.get("lambda")) {
    try {
      c.loss_weights = LossWeights::parse(*v);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(cfg.origin() + ": lambda: " + e.what());
    }
  }
  c.attention_block = cfg.get_uint("attention_block", c.attention_block);
  c.seed = cfg.get_uint("seed", c.seed);
  c.augment = cfg.get_bool("augment", c.augment);
  c.init_std = cfg.get_double("init_std", c.init_std);
  c.precision = cfg.get_string("precision", c.precision);
  c.threads = cfg.get_uint("threads", c.threads);
  c.validate();
  return c;
}

std::string TrainConfig::to_config() const {
  std::ostringstream os;
  os << "variant = " << variant_name(variant) << "\nmode = " << mode
     << "\nlearning_rate = " << format_double(learning_rate)
     << "\nweight_decay = " << format_double(weight_decay) << "\nbatch_size = " << batch_size
     << "\nepochs = " << epochs << "\nlambda = " << loss_weights.to_string()
     << "\nattention_block = " << attention_block << "\nseed = " << seed
     << "\naugment = " << (augment ? "true" : "false")
     << "\ninit_std = " << format_double(init_std) << "\nprecision = " << precision
     << "\nthreads = " << threads << '\n';
  return os.str();
}

// ---------------------------------------------------------------- init

template <typename T>
void init_weights(Network<T>& net, std::uint64_t seed, double std) {
  const auto& params = net.parameters();
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& [name, t0] = params[i];
    Tensor<T> t = t0;
    auto ends_with = [&](const char* s) {
      const std::string suffix(s);
      return name.size() >= suffix.size() &&
             name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    if (ends_with(".weight")) {
      auto rng = data::derive_rng(seed, kInitStream, i);
      std::normal_distribution<double> normal(0.0, std);
      for (auto& v : t.values()) v = T(normal(rng));
    } else if (ends_with(".gamma")) {
      std::fill(t.values().begin(), t.values().end(), T{1});
    } else {
      std::fill(t.values().begin(), t.values().end(), T{0});
    }
  }
  for (const auto& [name, t0] : net.buffers()) {
    Tensor<T> t = t0;
    const bool var = name.size() >= 4 && name.compare(name.size() - 4, 4, "_var") == 0;
    std::fill(t.values().begin(), t.values().end(), var ? T{1} : T{0});
  }
}

// ---------------------------------------------------------------- Adam

template <typename T>
Adam<T>::Adam(std::vector<NamedTensor<T>> params, double lr, double weight_decay, double beta1,
              double beta2, double eps)
    : params_(std::move(params)), lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2),
      eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), T{0});
    v_.emplace_back(p.tensor.numel(), T{0});
  }
}

template <typename T>
bool Adam<T>::step() {
  for (const auto& p : params_) {
    if (!p.tensor.has_grad()) continue;
    for (T g : p.tensor.grad())
      if (!std::isfinite(g)) {
        ++skipped_;
        return false;
      }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, double(t_));
  const double c2 = 1.0 - std::pow(beta2_, double(t_));
  for (size_t k = 0; k < params_.size(); ++k) {
    Tensor<T> p = params_[k].tensor;
    const bool has = p.has_grad();
    const T* g = has ? p.grad().data() : nullptr;
    T* theta = p.data();
    T* m = m_[k].data();
    T* v = v_[k].data();
    const size_t n = p.numel();
    const double b1 = beta1_, b2 = beta2_, lr = lr_, wd = wd_, eps = eps_;
#pragma omp parallel for schedule(static)
    for (size_t i = 0; i < n; ++i) {
      const double gi = has ? double(g[i]) : 0.0;
      const double mi = b1 * double(m[i]) + (1.0 - b1) * gi;
      const double vi = b2 * double(v[i]) + (1.0 - b2) * gi * gi;
      m[i] = T(mi);
      v[i] = T(vi);
      const double mhat = mi / c1, vhat = vi / c2;
      const double th = double(theta[i]);
      theta[i] = T(th - lr * wd * th - lr * mhat / (std::sqrt(vhat) + eps));
    }
  }
  return true;
}

template <typename T>
void Adam<T>::save(Checkpoint& ckpt, bool by_reference) const {
  for (size_t k = 0; k < params_.size(); ++k) {
    const Shape& shape = params_[k].tensor.shape();
    if (by_reference) {
      ckpt.add_view("adam.m." + params_[k].name, shape, m_[k].data());
      ckpt.add_view("adam.v." + params_[k].name, shape, v_[k].data());
    } else {
      ckpt.add("adam.m." + params_[k].name, Tensor<T>(shape, m_[k]));
      ckpt.add("adam.v." + params_[k].name, Tensor<T>(shape, v_[k]));
    }
  }
  ckpt.add_u64("adam.counters", {t_, skipped_});
}

template <typename T>
void Adam<T>::load(const Checkpoint& ckpt) {
  for (size_t k = 0; k < params_.size(); ++k) {
    const auto m = ckpt.tensor<T>("adam.m." + params_[k].name);
    const auto v = ckpt.tensor<T>("adam.v." + params_[k].name);
    if (m.numel() != m_[k].size() || v.numel() != v_[k].size())
      throw CheckpointError("optimiser state for '" + params_[k].name + "' has the wrong size");
    std::copy(m.values().begin(), m.values().end(), m_[k].begin());
    std::copy(v.values().begin(), v.values().end(), v_[k].begin());
  }
  const auto counters = ckpt.u64("adam.counters");
  if (counters.size() != 2) throw CheckpointError("malformed optimiser counters");
  t_ = counters[0];
  skipped_ = counters[1];
}

// ---------------------------------------------------------------- batches

template <typename T>
Tensor<T> stack_images(const std::vector<const GrayImage*>& images) {
  if (images.empty()) throw ShapeError("stack_images: empty batch");
  const size_t h = images[0]->height, w = images[0]->width;
  Tensor<T> t({images.size(), 1, h, w});
  for (size_t b = 0; b < images.size(); ++b) {
    if (images[b]->height != h || images[b]->width != w)
      throw ShapeError("stack_images: image " + std::to_string(b) + " has a different size");
    std::transform(images[b]->pixels.begin(), images[b]->pixels.end(), t.data() + b * h * w,
                   [](float v) { return T(v); });
  }
  return t;
}

template <typename T>
Tensor<T> stack_masks(const std::vector<const BinaryMask*>& masks) {
  if (masks.empty()) throw ShapeError("stack_masks: empty batch");
  const size_t h = masks[0]->height, w = masks[0]->width;
  Tensor<T> t({masks.size(), 1, h, w});
  for (size_t b = 0; b < masks.size(); ++b) {
    if (masks[b]->height != h || masks[b]->width != w)
      throw ShapeError("stack_masks: mask " + std::to_string(b) + " has a different size");
    std::transform(masks[b]->pixels.begin(), masks[b]->pixels.end(), t.data() + b * h * w,
                   [](std::uint8_t v) { return v ? T{1} : T{0}; });
  }
  return t;
}

namespace {

template <typename T>
std::vector<float> probabilities(Network<T>& net, const Tensor<T>& x) {
  NoGradScope<T> no_grad;
  const auto out = net.forward(x, BatchNormMode::Eval);
  const Tensor<T> p = ops::sigmoid(out.logits);
  return std::vector<float>(p.values().begin(), p.values().end());
}

}  // namespace

template <typename T>
std::vector<float> predict(Network<T>& net, const GrayImage& image) {
  check_input_size(image.height, image.width);
  return probabilities(net, stack_images<T>({&image}));
}

template <typename T>
std::vector<metrics::CaseMetrics> evaluate(Network<T>& net,
                                           const std::vector<const data::Sample*>& samples,
                                           size_t batch_size) {
  std::vector<metrics::CaseMetrics> out;
  batch_size = std::max<size_t>(batch_size, 1);
  for (size_t start = 0; start < samples.size(); start += batch_size) {
    const size_t end = std::min(samples.size(), start + batch_size);
    std::vector<const GrayImage*> imgs;
    for (size_t i = start; i < end; ++i) imgs.push_back(&samples[i]->image);
    const auto probs = probabilities(net, stack_images<T>(imgs));
    const size_t h = imgs[0]->height, w = imgs[0]->width;
    for (size_t i = start; i < end; ++i) {
      const auto first = probs.begin() + long((i - start) * h * w);
      const std::vector<float> p(first, first + long(h * w));
      out.push_back(metrics::evaluate_case(samples[i]->info.id, metrics::binarize(p, h, w),
                                           samples[i]->mask));
    }
  }
  return out;
}

// ---------------------------------------------------------------- run log

namespace {

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json summary_json(const metrics::MetricSummary& s) {
  return json{{"cases", s.cases},         {"dsc", optional_json(s.dsc)},
              {"sen", optional_json(s.sen)}, {"spe", optional_json(s.spe)},
              {"or", optional_json(s.over)}, {"ur", optional_json(s.under)},
              {"hd", optional_json(s.hd)},   {"undefined_dsc", s.undefined_dsc},
              {"undefined_hd", s.undefined_hd}};
}

}  // namespace

RunLog::RunLog(const std::filesystem::path& path, bool append) {
  const auto mode = std::ios::binary | (append ? std::ios::app : std::ios::trunc);
  out_ = std::make_unique<std::ofstream>(path, mode);
  if (!*out_) throw std::runtime_error("cannot open run log " + path.string());
  auto timing_path = path;
  timing_path += ".timing";
  timing_ = std::make_unique<std::ofstream>(timing_path, mode);
}

void RunLog::write(const std::string& line) {
  if (!out_) return;
  *out_ << line << '\n';
  out_->flush();
}

void RunLog::config(const TrainConfig& cfg, size_t threads, size_t train_size, size_t val_size) {
  json j{{"type", "config"},
         {"variant", std::string(variant_name(cfg.variant))},
         {"mode", cfg.mode},
         {"learning_rate", cfg.learning_rate},
         {"weight_decay", cfg.weight_decay},
         {"batch_size", cfg.batch_size},
         {"epochs", cfg.epochs},
         {"lambda", {cfg.loss_weights.cls, cfg.loss_weights.dice, cfg.loss_weights.attention}},
         {"attention_block", cfg.attention_block},
         {"seed", cfg.seed},
         {"augment", cfg.augment},
         {"init_std", cfg.init_std},
         {"precision", cfg.precision},
         {"threads", threads},
         {"train_size", train_size},
         {"val_size", val_size}};
  write(j.dump());
}

void RunLog::step(const StepRecord& r) {
  json j{{"type", "step"},       {"epoch", r.epoch},         {"step", r.step},
         {"cls", r.cls},         {"dice", r.dice},           {"atn", r.attention},
         {"total", r.total},     {"degenerate", r.degenerate}, {"skipped", r.skipped}};
  write(j.dump());
}

void RunLog::epoch(const EpochRecord& r) {
  json j{{"type", "epoch"},
         {"epoch", r.epoch},
         {"train_loss", r.train_loss},
         {"steps", r.steps},
         {"validation", summary_json(r.validation)},
         {"best", r.best}};
  write(j.dump());
}

void RunLog::evaluation(const std::string& label, const std::vector<metrics::CaseMetrics>& cases) {
  write(json{{"type", "evaluation"}, {"label", label}, {"cases", cases.size()}}.dump());
  for (const auto& c : cases) {
    json j{{"type", "case"},
           {"id", c.id},
           {"fraction", c.truth_fraction},
           {"tp", c.counts.tp},
           {"fp", c.counts.fp},
           {"tn", c.counts.tn},
           {"fn", c.counts.fn},
           {"dsc", optional_json(c.dsc)},
           {"sen", optional_json(c.sen)},
           {"spe", optional_json(c.spe)},
           {"or", optional_json(c.over)},
           {"ur", optional_json(c.under)},
           {"hd", optional_json(c.hd)}};
    write(j.dump());
  }
  write(json{{"type", "summary"}, {"label", label}, {"metrics", summary_json(metrics::summarize(cases))}}
            .dump());
}

void RunLog::event(const std::string& kind, const std::string& message) {
  write(json{{"type", "event"}, {"kind", kind}, {"message", message}}.dump());
}

void RunLog::timing(size_t epoch, double seconds) {
  if (!timing_) return;
  *timing_ << json{{"epoch", epoch}, {"wall_seconds", seconds}}.dump() << '\n';
  timing_->flush();
}

// ---------------------------------------------------------------- trainer

template <typename T>
Trainer<T>::Trainer(TrainConfig cfg, std::vector<data::Sample> train,
                    std::vector<data::Sample> val, std::optional<std::filesystem::path> out_dir,
                    bool append_log)
    : cfg_(std::move(cfg)), train_(std::move(train)), val_(std::move(val)),
      out_dir_(std::move(out_dir)) {
  cfg_.validate();
  if (train_.empty()) throw ConfigError("training set is empty");
  for (const auto& s : train_) check_input_size(s.image.height, s.image.width);
  if (cfg_.threads > 0) kernels::parallel::set_num_threads(cfg_.threads);
  net_ = std::make_unique<Network<T>>(cfg_.variant);
  init_weights(*net_, cfg_.seed, cfg_.init_std);
  adam_ = std::make_unique<Adam<T>>(net_->parameters(), cfg_.learning_rate, cfg_.weight_decay);
  if (out_dir_) {
    std::filesystem::create_directories(*out_dir_);
    log_ = RunLog(*out_dir_ / "runlog.jsonl", append_log);
    log_.config(cfg_, kernels::parallel::num_threads(), train_.size(), val_.size());
  }
}

template <typename T>
Checkpoint Trainer<T>::snapshot(bool by_reference) const {
  Checkpoint c = make_checkpoint(*net_, by_reference);
  adam_->save(c, by_reference);
  const double best = result_.best_dsc.value_or(0.0);
  c.add_u64("train.progress", {epoch_, result_.best_epoch, result_.best_dsc ? 1u : 0u,
                               std::bit_cast<std::uint64_t>(best), result_.degenerate_samples});
  return c;
}

template <typename T>
void Trainer<T>::resume(const Checkpoint& ckpt) {
  load_network(*net_, ckpt);
  adam_->load(ckpt);
  const auto p = ckpt.u64("train.progress");
  if (p.size() != 5) throw CheckpointError("malformed training progress record");
  epoch_ = p[0];
  result_.best_epoch = p[1];
  if (p[2]) result_.best_dsc = std::bit_cast<double>(p[3]);
  result_.degenerate_samples = p[4];
  result_.skipped_steps = adam_->skipped();
  log_.event("resume", "resumed after epoch " + std::to_string(epoch_));
}

template <typename T>
void Trainer<T>::train_batch(const std::vector<size_t>& indices) {
  std::vector<data::Sample> augmented;
  std::vector<const GrayImage*> imgs;
  std::vector<const BinaryMask*> masks;
  if (cfg_.augment) {
    augmented.reserve(indices.size());
    for (size_t i : indices) {
      auto rng = data::derive_rng(cfg_.seed, kAugmentStream | epoch_, i);
      augmented.push_back(data::augment(train_[i], data::AugmentSpec{}, rng));
    }
    for (const auto& s : augmented) {
      imgs.push_back(&s.image);
      masks.push_back(&s.mask);
    }
  } else {
    for (size_t i : indices) {
      imgs.push_back(&train_[i].image);
      masks.push_back(&train_[i].mask);
    }
  }
  const Tensor<T> x = stack_images<T>(imgs);
  const Tensor<T> y = stack_masks<T>(masks);

  Tape<T> tape;
  loss::LossBreakdown<T> l;
  {
    TapeScope<T> scope(tape);
    const auto out = net_->forward(x, BatchNormMode::Train);
    l = loss::network_loss(out, y, cfg_.loss_weights, cfg_.attention_block);
  }
  StepRecord r;
  r.epoch = epoch_ + 1;
  r.step = steps_.size() + 1;
  r.cls = l.cls;
  r.dice = l.dice;
  r.attention = l.attention;
  r.total = double(l.total.item());
  r.degenerate = l.degenerate;
  result_.degenerate_samples += l.degenerate;
  if (!std::isfinite(r.total)) {
    tape.clear();
    diverged_ = true;
    log_.step(r);
    log_.event("diverged", "non-finite total loss at step " + std::to_string(r.step));
    steps_.push_back(r);
    return;
  }
  tape.backward(l.total);
  r.skipped = !adam_->step();
  net_->zero_grad();
  log_.step(r);
  steps_.push_back(r);
}

template <typename T>
EpochRecord Trainer<T>::run_epoch() {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<size_t> order(train_.size());
  std::iota(order.begin(), order.end(), size_t{0});
  auto rng = data::derive_rng(cfg_.seed, kShuffleStream, epoch_);
  std::shuffle(order.begin(), order.end(), rng);

  EpochRecord rec;
  rec.epoch = epoch_ + 1;
  double loss_sum = 0;
  for (size_t start = 0; start < order.size() && !diverged_; start += cfg_.batch_size) {
    const size_t end = std::min(order.size(), start + cfg_.batch_size);
    train_batch(std::vector<size_t>(order.begin() + long(start), order.begin() + long(end)));
    if (diverged_) break;
    loss_sum += steps_.back().total;
    ++rec.steps;
  }
  rec.train_loss = rec.steps ? loss_sum / double(rec.steps) : 0.0;
  if (diverged_) {
    result_.diverged = true;
    return rec;
  }
  ++epoch_;

  if (!val_.empty()) {
    std::vector<const data::Sample*> ptrs;
    for (const auto& s : val_) ptrs.push_back(&s);
    rec.validation = metrics::summarize(evaluate(*net_, ptrs));
    const double dsc = rec.validation.dsc.value_or(0.0);
    rec.best = !result_.best_dsc || dsc > *result_.best_dsc;
  } else {
    rec.best = true;
  }
  if (rec.best) {
    result_.best_epoch = rec.epoch;
    result_.best_dsc = rec.validation.dsc;
  }
  result_.skipped_steps = adam_->skipped();
  result_.epochs.push_back(rec);
  log_.epoch(rec);
  if (out_dir_) {
    snapshot(true).save(*out_dir_ / "last.ckpt");
    if (rec.best) make_checkpoint(*net_, true).save(*out_dir_ / "best.ckpt");
  }
  log_.timing(rec.epoch,
              std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  return rec;
}

template <typename T>
TrainResult Trainer<T>::run(const std::function<bool(const EpochRecord&)>& keep_going) {
  while (epoch_ < cfg_.epochs && !diverged_) {
    const EpochRecord rec = run_epoch();
    if (diverged_) break;
    if (keep_going && !keep_going(rec)) break;
  }
  return result_;
}

#define CROSSLINK_INSTANTIATE(T)                                                             \
  template void init_weights(Network<T>&, std::uint64_t, double);                            \
  template class Adam<T>;                                                                    \
  template Tensor<T> stack_images(const std::vector<const GrayImage*>&);                     \
  template Tensor<T> stack_masks(const std::vector<const BinaryMask*>&);                     \
  template std::vector<float> predict(Network<T>&, const GrayImage&);                        \
  template std::vector<metrics::CaseMetrics> evaluate(                                       \
      Network<T>&, const std::vector<const data::Sample*>&, size_t);                         \
  template class Trainer<T>;

CROSSLINK_INSTANTIATE(float)
CROSSLINK_INSTANTIATE(double)
#undef CROSSLINK_INSTANTIATE

}  // namespace crosslink::train
