#include "crosslink/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <sstream>

#include "crosslink/data.hpp"
#include "crosslink/loss.hpp"
#include "crosslink/net.hpp"
#include "crosslink/ops.hpp"
#include "crosslink/tape.hpp"
#include "crosslink/trainer.hpp"

namespace crosslink::gradcheck {

using std::size_t;
using Td = Tensor<double>;

double relative_error(double analytic, double numeric, double floor) {
  const double den = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / den;
}

CheckResult check(std::string name, const ScalarFn& f, std::vector<Td> wrt,
                  const std::vector<Probe>& probes, double threshold, const Options& opt) {
  CheckResult r;
  r.name = std::move(name);
  r.threshold = threshold;
  for (auto& t : wrt) t.clear_grad();

  // Analytic pass.
  std::vector<std::vector<double>> analytic(wrt.size());
  {
    Tape<double> tape;
    if (opt.fault_op) tape.inject_fault(*opt.fault_op);
    Td out;
    {
      TapeScope<double> scope(tape);
      out = f();
    }
    tape.backward(out);
    for (size_t k = 0; k < wrt.size(); ++k) {
      if (wrt[k].has_grad())
        analytic[k].assign(wrt[k].grad().begin(), wrt[k].grad().end());
      else
        analytic[k].assign(wrt[k].numel(), 0.0);
      wrt[k].clear_grad();
    }
  }

  NoGradScope<double> no_grad;
  std::uint64_t base = 0;
  double floor = opt.floor;
  {
    BranchProbe probe;
    floor *= std::max(1.0, std::abs(f().item()));
    base = probe.fingerprint();
  }
  auto eval = [&](Td& t, size_t i, double v, bool& same) {
    t[i] = v;
    BranchProbe probe;
    const double y = f().item();
    same = same && probe.fingerprint() == base;
    return y;
  };
  for (const auto& [k, i] : probes) {
    Td& t = wrt.at(k);
    const double saved = t[i];
    // Shrink the step until neither side crosses a kink.
    std::optional<double> numeric;
    double h = opt.step;
    for (int attempt = 0; attempt < opt.step_retries; ++attempt, h /= 10) {
      bool same = true;
      const double up = eval(t, i, saved + h, same);
      const double down = eval(t, i, saved - h, same);
      if (same) {
        numeric = (up - down) / (2.0 * h);
        break;
      }
    }
    t[i] = saved;
    if (!numeric) {
      ++r.kinks;
      continue;
    }
    const double a = analytic[k].at(i);
    const double e = relative_error(a, *numeric, floor);
    ++r.elements;
    if (e > r.max_rel_error || r.worst.empty()) {
      r.max_rel_error = std::max(r.max_rel_error, e);
      std::ostringstream os;
      os.precision(10);
      os << "tensor " << k << " element " << i << ": analytic " << a << ", numeric " << *numeric
         << " (step " << h << ")";
      r.worst = os.str();
    }
  }
  return r;
}

CheckResult check_all(std::string name, const ScalarFn& f, std::vector<Td> wrt,
                      double threshold, const Options& opt) {
  std::vector<Probe> probes;
  for (size_t k = 0; k < wrt.size(); ++k)
    for (size_t i = 0; i < wrt[k].numel(); ++i) probes.emplace_back(k, i);
  return check(std::move(name), f, std::move(wrt), probes, threshold, opt);
}

namespace {

class Source {
 public:
  explicit Source(std::uint64_t seed, std::uint64_t stream) : rng_(data::derive_rng(seed, stream)) {}

  Td uniform(Shape shape, double lo, double hi, bool grad = true) {
    Td t(std::move(shape));
    std::uniform_real_distribution<double> d(lo, hi);
    for (auto& v : t.values()) v = d(rng_);
    t.set_requires_grad(grad);
    return t;
  }
  /// Magnitudes in [lo, hi] with random sign: keeps values away from zero.
  Td signed_away(Shape shape, double lo, double hi) {
    Td t = uniform(std::move(shape), lo, hi);
    std::bernoulli_distribution coin(0.5);
    for (auto& v : t.values())
      if (coin(rng_)) v = -v;
    return t;
  }
  Td binary(Shape shape, double p = 0.4) {
    Td t(std::move(shape));
    std::bernoulli_distribution d(p);
    for (auto& v : t.values()) v = d(rng_) ? 1.0 : 0.0;
    return t;
  }
  void fill_normal(Td t, double mean, double std) {
    std::normal_distribution<double> d(mean, std);
    for (auto& v : t.values()) v = d(rng_);
  }
  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

// Weighted sum so that every output element gets a distinct upstream gradient.
Td weighted_sum(const Td& y, const Td& weights) { return ops::sum(ops::mul(y, weights)); }

Td fixed_weights(Source& src, const Shape& shape) { return src.uniform(shape, -1.0, 1.0, false); }

// Up to `per_tensor` random elements of each tensor.
std::vector<Probe> sample_probes(const std::vector<Td>& wrt, size_t per_tensor, Source& src) {
  std::vector<Probe> probes;
  for (size_t k = 0; k < wrt.size(); ++k) {
    const size_t n = wrt[k].numel();
    if (n <= per_tensor) {
      for (size_t i = 0; i < n; ++i) probes.emplace_back(k, i);
    } else {
      std::uniform_int_distribution<size_t> d(0, n - 1);
      for (size_t j = 0; j < per_tensor; ++j) probes.emplace_back(k, d(src.rng()));
    }
  }
  return probes;
}

}  // namespace

std::vector<CheckResult> op_suite(std::uint64_t seed, const Options& opt) {
  Source src(seed, 0x4f5053ull);
  std::vector<CheckResult> out;

  struct ConvCase {
    Shape x, w;
    size_t ph, pw;
    bool bias;
  };
  const ConvCase convs[] = {{{2, 3, 8, 8}, {4, 3, 3, 1}, 1, 0, true},
                            {{1, 2, 6, 5}, {3, 2, 5, 3}, 2, 1, true},
                            {{1, 2, 5, 6}, {2, 2, 3, 5}, 1, 2, false},
                            {{2, 3, 4, 4}, {2, 3, 1, 1}, 0, 0, true}};
  for (const auto& c : convs) {
    Td x = src.uniform(c.x, -1, 1), w = src.uniform(c.w, -1, 1);
    Td b = c.bias ? src.uniform({c.w[0]}, -1, 1) : Td();
    ConvParams p{c.w[1], c.w[0], c.w[2], c.w[3], c.ph, c.pw};
    const Td r = fixed_weights(src, {c.x[0], c.w[0], c.x[2] + 2 * c.ph - c.w[2] + 1,
                                     c.x[3] + 2 * c.pw - c.w[3] + 1});
    std::vector<Td> wrt = {x, w};
    if (c.bias) wrt.push_back(b);
    out.push_back(check_all("conv2d " + p.to_string(),
                            [=] { return weighted_sum(ops::conv2d(x, w, b, p), r); }, wrt,
                            kOpThreshold, opt));
  }
  {
    Td x = src.uniform({1, 2, 6, 6}, -1, 1);
    const Td r = fixed_weights(src, {1, 2, 3, 3});
    out.push_back(check_all("max_pool2x2", [=] { return weighted_sum(ops::max_pool2x2(x), r); },
                            {x}, kOpThreshold, opt));
  }
  {
    Td x = src.uniform({2, 2, 4, 6}, -1, 1);
    const Td r = fixed_weights(src, {2, 2, 2, 3});
    out.push_back(check_all("avg_pool2x2", [=] { return weighted_sum(ops::avg_pool2x2(x), r); },
                            {x}, kOpThreshold, opt));
  }
  {
    Td x = src.uniform({1, 2, 3, 4}, -1, 1);
    const Td r = fixed_weights(src, {1, 2, 6, 8});
    out.push_back(check_all("upsample_bilinear2x",
                            [=] { return weighted_sum(ops::upsample_bilinear2x(x), r); }, {x},
                            kOpThreshold, opt));
  }
  for (auto mode : {BatchNormMode::Train, BatchNormMode::Eval}) {
    Td x = src.uniform({3, 2, 4, 4}, -2, 2);
    Td gamma = src.uniform({2}, 0.5, 1.5), beta = src.uniform({2}, -0.5, 0.5);
    Td rm = src.uniform({2}, -0.2, 0.2, false), rv = src.uniform({2}, 0.5, 1.5, false);
    const Td r = fixed_weights(src, {3, 2, 4, 4});
    const bool train = mode == BatchNormMode::Train;
    out.push_back(check_all(
        train ? "batch_norm train" : "batch_norm eval",
        [=]() mutable {
          // Train mode updates the running estimates; give each call fresh copies.
          Td m = rm.clone(), v = rv.clone();
          return weighted_sum(ops::batch_norm(x, gamma, beta, m, v, mode), r);
        },
        {x, gamma, beta}, train ? kBatchNormThreshold : kOpThreshold, opt));
  }
  {
    Td x = src.signed_away({2, 3, 4, 4}, 0.05, 1.0);
    const Td r = fixed_weights(src, x.shape());
    out.push_back(check_all("relu", [=] { return weighted_sum(ops::relu(x), r); }, {x},
                            kOpThreshold, opt));
  }
  {
    Td x = src.uniform({2, 1, 3, 3}, -4, 4);
    const Td r = fixed_weights(src, x.shape());
    out.push_back(check_all("sigmoid", [=] { return weighted_sum(ops::sigmoid(x), r); }, {x},
                            kOpThreshold, opt));
  }
  {
    Td a = src.uniform({2, 1, 3, 3}, -1, 1), b = src.uniform({2, 2, 3, 3}, -1, 1);
    const Td r = fixed_weights(src, {2, 3, 3, 3});
    out.push_back(check_all(
        "concat_channels",
        [=] {
          const Td parts[] = {a, b};
          return weighted_sum(ops::concat_channels<double>(parts), r);
        },
        {a, b}, kOpThreshold, opt));
  }
  {
    Td a = src.uniform({2, 2, 3, 3}, -1, 1), b = src.uniform({2, 2, 3, 3}, -1, 1);
    const Td r = fixed_weights(src, a.shape());
    out.push_back(check_all("add", [=] { return weighted_sum(ops::add(a, b), r); }, {a, b},
                            kOpThreshold, opt));
    out.push_back(check_all("sub", [=] { return weighted_sum(ops::sub(a, b), r); }, {a, b},
                            kOpThreshold, opt));
    out.push_back(check_all("mul", [=] { return weighted_sum(ops::mul(a, b), r); }, {a, b},
                            kOpThreshold, opt));
    out.push_back(check_all("scale", [=] { return weighted_sum(ops::scale(a, 0.7), r); }, {a},
                            kOpThreshold, opt));
    out.push_back(check_all("mean", [=] { return ops::mean(ops::mul(a, r)); }, {a},
                            kOpThreshold, opt));
  }
  {
    Td a = src.uniform({1, 2, 3, 5}, -1, 1);
    const Td r = fixed_weights(src, {1, 2, 5, 3});
    out.push_back(check_all("transpose_spatial",
                            [=] { return weighted_sum(ops::transpose_spatial(a), r); }, {a},
                            kOpThreshold, opt));
  }
  {
    Td p = src.uniform({2, 1, 4, 4}, 0.05, 0.95);
    const Td g = src.binary(p.shape());
    out.push_back(check_all("bce", [=] { return loss::bce(p, g); }, {p}, kOpThreshold, opt));
    out.push_back(check_all("dice", [=] { return loss::dice(p, g); }, {p}, kOpThreshold, opt));
  }
  {
    Td f = src.uniform({2, 3, 4, 4}, 0.0, 1.0);
    const Td r = fixed_weights(src, {2, 1, 4, 4});
    out.push_back(check_all("attention_map",
                            [=] { return weighted_sum(loss::attention_map(f), r); }, {f},
                            kOpThreshold, opt));
  }
  {
    Td av = src.uniform({2, 1, 4, 4}, 0, 1), ah = src.uniform({2, 1, 4, 4}, 0, 1);
    const Td m = src.uniform({2, 1, 4, 4}, 0, 1, false);
    out.push_back(check_all("attention_loss", [=] { return loss::attention_loss(av, ah, m); },
                            {av, ah}, kOpThreshold, opt));
  }
  {
    Td logits = src.uniform({2, 1, 8, 8}, -3, 3);
    const Td g = src.binary(logits.shape(), 0.3);
    Td av = src.uniform({2, 1, 2, 2}, 0, 1), ah = src.uniform({2, 1, 2, 2}, 0, 1);
    const Td m = loss::pool_mask(g);
    out.push_back(check_all(
        "total_loss",
        [=] { return loss::total_loss(logits, g, av, ah, m, LossWeights{}).total; },
        {logits, av, ah}, kOpThreshold, opt));
  }
  return out;
}

namespace {

template <typename Module>
std::vector<Td> randomise(Module& module, Source& src) {
  std::vector<NamedTensor<double>> params, buffers;
  module.collect("m", params, buffers);
  std::vector<Td> out;
  for (auto& [name, t] : params) {
    if (name.ends_with(".gamma")) src.fill_normal(t, 1.0, 0.2);
    else if (name.ends_with(".beta") || name.ends_with(".bias")) src.fill_normal(t, 0.0, 0.2);
    else src.fill_normal(t, 0.0, 0.4);
    out.push_back(t);
  }
  return out;
}

}  // namespace

std::vector<CheckResult> block_suite(std::uint64_t seed, const Options& opt) {
  Source src(seed, 0x424c4bull);
  std::vector<CheckResult> out;
  const size_t per_tensor = 6;
  {
    auto rc = std::make_shared<RConv<double>>(2, 3, PathKernel{3, 1, 1, 0});
    Td x = src.uniform({2, 2, 8, 8}, -1, 1);
    std::vector<Td> wrt = randomise(*rc, src);
    wrt.insert(wrt.begin(), x);
    const Td r = fixed_weights(src, {2, 3, 8, 8});
    const auto probes = sample_probes(wrt, per_tensor, src);
    out.push_back(check("rconv (3,1)",
                        [=] { return weighted_sum(rc->forward(x, BatchNormMode::Train), r); }, wrt,
                        probes, kBatchNormThreshold, opt));
  }
  const std::pair<BlockKind, const char*> kinds[] = {{BlockKind::Vertical, "vertical block"},
                                                     {BlockKind::Horizontal, "horizontal block"},
                                                     {BlockKind::Square, "square block"},
                                                     {BlockKind::Merged, "merged block"}};
  for (const auto& [kind, label] : kinds) {
    auto block = std::make_shared<ResidualBlock<double>>(make_block_spec(kind, 2, 3));
    Td x = src.uniform({2, 2, 8, 8}, -1, 1);
    std::vector<Td> wrt = randomise(*block, src);
    wrt.insert(wrt.begin(), x);
    const Td r = fixed_weights(src, {2, 3, 8, 8});
    const auto probes = sample_probes(wrt, per_tensor, src);
    out.push_back(check(label,
                        [=] { return weighted_sum(block->forward(x, BatchNormMode::Train), r); },
                        wrt, probes, kBatchNormThreshold, opt));
  }
  {
    auto up = std::make_shared<RConv<double>>(5, 3, PathKernel{3, 3, 1, 1});
    Td x = src.uniform({2, 5, 8, 8}, -1, 1);
    std::vector<Td> wrt = randomise(*up, src);
    wrt.insert(wrt.begin(), x);
    const Td r = fixed_weights(src, {2, 3, 8, 8});
    const auto probes = sample_probes(wrt, per_tensor, src);
    out.push_back(check("decoder block",
                        [=] { return weighted_sum(up->forward(x, BatchNormMode::Train), r); }, wrt,
                        probes, kBatchNormThreshold, opt));
  }
  return out;
}

std::vector<CheckResult> net_suite(std::uint64_t seed, const Options& opt, size_t samples) {
  auto net = std::make_shared<Network<double>>(Variant::Crosslink);
  train::init_weights(*net, seed);

  data::SynthSpec spec;
  spec.train = 1;
  spec.val = spec.test = 0;
  spec.fraction_lo = 0.02;
  spec.fraction_hi = 0.05;
  spec.seed = seed;
  const data::Sample s = data::generate_sample(spec, 0);
  const Td x = train::stack_images<double>({&s.image});
  const Td y = train::stack_masks<double>({&s.mask});

  std::vector<Td> wrt;
  size_t total = 0;
  for (const auto& p : net->parameters()) {
    wrt.push_back(p.tensor);
    total += p.tensor.numel();
  }
  Source src(seed, 0x4e4554ull);
  std::uniform_int_distribution<size_t> pick(0, total - 1);
  auto f = [=] {
    const auto out = net->forward(x, BatchNormMode::Train);
    return loss::network_loss(out, y, LossWeights{}).total;
  };
  // Parameters that sit on a kink are replaced by fresh draws so that
  // `samples` elements are actually compared.
  CheckResult r;
  r.name = "network (" + std::to_string(samples) + " parameters)";
  r.threshold = kNetThreshold;
  for (int round = 0; round < 4 && r.elements < samples; ++round) {
    std::vector<Probe> probes;
    for (size_t j = r.elements; j < samples; ++j) {
      size_t flat = pick(src.rng());
      size_t k = 0;
      while (flat >= wrt[k].numel()) flat -= wrt[k++].numel();
      probes.emplace_back(k, flat);
    }
    const CheckResult part = check(r.name, f, wrt, probes, kNetThreshold, opt);
    r.elements += part.elements;
    r.kinks += part.kinks;
    if (part.elements && (r.worst.empty() || part.max_rel_error > r.max_rel_error)) {
      r.max_rel_error = part.max_rel_error;
      r.worst = part.worst;
    }
  }
  // Name the parameter behind the worst element.
  const auto pos = r.worst.find("tensor ");
  if (pos != std::string::npos) {
    const size_t k = std::stoul(r.worst.substr(pos + 7));
    r.worst = net->parameters()[k].name + " " + r.worst.substr(r.worst.find("element"));
  }
  return {r};
}

}  // namespace crosslink::gradcheck
