#include "crosslink/loss.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "crosslink/config.hpp"
#include "crosslink/ops.hpp"

namespace crosslink {

using std::size_t;

void LossWeights::validate() const {
  if (!(cls >= 0) || !(dice >= 0) || !(attention >= 0))
    throw std::invalid_argument("loss weights must be non-negative, got " + to_string());
  const double s = cls + dice + attention;
  if (std::abs(s - 1.0) > kSimplexTolerance)
    throw std::invalid_argument("loss weights must sum to 1, got " + to_string());
}

std::string LossWeights::to_string() const {
  return format_double(cls) + ',' + format_double(dice) + ',' + format_double(attention);
}

LossWeights LossWeights::parse(std::string_view text) {
  std::vector<double> v;
  std::string item;
  std::istringstream is{std::string(text)};
  while (std::getline(is, item, ',')) {
    size_t used = 0;
    double x = 0;
    try {
      x = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    while (used < item.size() && std::isspace(static_cast<unsigned char>(item[used]))) ++used;
    if (used == 0 || used != item.size())
      throw std::invalid_argument("loss weights: '" + item + "' is not a number");
    v.push_back(x);
  }
  if (v.size() != 3)
    throw std::invalid_argument("loss weights: expected three comma-separated values, got '" +
                                std::string(text) + "'");
  LossWeights w{v[0], v[1], v[2]};
  w.validate();
  return w;
}

namespace loss {

namespace {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
}

template <typename T, typename Fn>
void record(Tape<T>* tape, const char* op, Tensor<T>& out, Fn&& fn) {
  if (!tape) return;
  out.set_requires_grad(true);
  tape->record(op, out, std::forward<Fn>(fn));
}

// Per-sample extent of an N x ... tensor.
template <typename T>
size_t per_sample(const Tensor<T>& t) {
  return t.rank() == 0 || t.dim(0) == 0 ? 0 : t.numel() / t.dim(0);
}

}  // namespace

template <typename T>
Tensor<T> bce(const Tensor<T>& probs, const Tensor<T>& target) {
  require_same_shape(probs, target, "bce");
  const size_t n = probs.numel();
  if (n == 0) throw ShapeError("bce: empty input");
  const double lo = kProbabilityClamp, hi = 1.0 - kProbabilityClamp;
  double acc = 0;
  for (size_t i = 0; i < n; ++i) {
    const double p = std::clamp<double>(probs[i], lo, hi);
    const double g = target[i];
    acc -= g * std::log(p) + (1.0 - g) * std::log(1.0 - p);
  }
  if (auto* probe = BranchProbe::active())
    probe->mix_bits(n, [&](size_t i) { return probs[i] < lo || probs[i] > hi; });
  Tensor<T> out({1}, T(acc / double(n)));
  record(detail::recording({&probs}), "bce", out,
         [p = probs, g = target, lo, hi](std::span<const T> gy) mutable {
           T* dp = p.grad_buffer().data();
           const size_t n = p.numel();
           const double s = double(gy[0]) / double(n);
           for (size_t i = 0; i < n; ++i) {
             const double pi = p[i];
             if (pi < lo || pi > hi) continue;
             const double gi = g[i];
             dp[i] += T(s * (-gi / pi + (1.0 - gi) / (1.0 - pi)));
           }
         });
  return out;
}

template <typename T>
Tensor<T> dice(const Tensor<T>& probs, const Tensor<T>& target, double eps) {
  require_same_shape(probs, target, "dice");
  if (!(eps > 0)) throw std::invalid_argument("dice: smoothing must be positive");
  const size_t batch = probs.rank() ? probs.dim(0) : 0;
  const size_t len = per_sample(probs);
  if (batch == 0 || len == 0) throw ShapeError("dice: empty input");
  std::vector<double> inter(batch), uni(batch);
  double acc = 0;
  for (size_t b = 0; b < batch; ++b) {
    double i_sum = 0, u_sum = 0;
    for (size_t i = b * len; i < (b + 1) * len; ++i) {
      i_sum += double(probs[i]) * double(target[i]);
      u_sum += double(probs[i]) + double(target[i]);
    }
    inter[b] = i_sum;
    uni[b] = u_sum + eps;
    acc += 1.0 - 2.0 * i_sum / uni[b];
  }
  Tensor<T> out({1}, T(acc / double(batch)));
  record(detail::recording({&probs}), "dice", out,
         [p = probs, g = target, inter, uni, batch, len](std::span<const T> gy) mutable {
           T* dp = p.grad_buffer().data();
           const double s = double(gy[0]) / double(batch);
           for (size_t b = 0; b < batch; ++b) {
             const double u = uni[b];
             const double c = 2.0 * inter[b] / (u * u);
             for (size_t i = b * len; i < (b + 1) * len; ++i)
               dp[i] += T(s * (c - 2.0 * double(g[i]) / u));
           }
         });
  return out;
}

template <typename T>
Tensor<T> attention_map(const Tensor<T>& features) {
  require_rank4(features, "attention_map");
  const size_t batch = features.dim(0), ch = features.dim(1);
  const size_t plane = features.dim(2) * features.dim(3);
  if (ch == 0 || plane == 0) throw ShapeError("attention_map: empty feature map");
  Tensor<T> out({batch, 1, features.dim(2), features.dim(3)});
  std::vector<double> raw(batch * plane);
  std::vector<double> peak(batch);
  std::vector<size_t> argmax(batch);
  const T* f = features.data();
  for (size_t b = 0; b < batch; ++b) {
    double* r = raw.data() + b * plane;
    for (size_t c = 0; c < ch; ++c) {
      const T* src = f + (b * ch + c) * plane;
      for (size_t i = 0; i < plane; ++i) r[i] += src[i];
    }
    size_t best = 0;
    for (size_t i = 0; i < plane; ++i) {
      r[i] /= double(ch);
      if (r[i] > r[best]) best = i;
    }
    argmax[b] = best;
    if (auto* probe = BranchProbe::active()) probe->mix(best);
    peak[b] = r[best];
    const double denom = peak[b] + kAttentionMaxBias;
    for (size_t i = 0; i < plane; ++i) out[b * plane + i] = T(r[i] / denom);
  }
  record(detail::recording({&features}), "attention_map", out,
         [x = features, raw = std::move(raw), peak, argmax, batch, ch,
          plane](std::span<const T> gy) mutable {
           T* dx = x.grad_buffer().data();
           std::vector<double> da(plane);
           for (size_t b = 0; b < batch; ++b) {
             const double denom = peak[b] + kAttentionMaxBias;
             const double* r = raw.data() + b * plane;
             const T* g = gy.data() + b * plane;
             double cross = 0;
             for (size_t i = 0; i < plane; ++i) {
               da[i] = double(g[i]) / denom;
               cross += double(g[i]) * r[i];
             }
             da[argmax[b]] -= cross / (denom * denom);
             for (size_t c = 0; c < ch; ++c) {
               T* dst = dx + (b * ch + c) * plane;
               for (size_t i = 0; i < plane; ++i) dst[i] += T(da[i] / double(ch));
             }
           }
         });
  return out;
}

template <typename T>
Tensor<T> pool_mask(const Tensor<T>& mask, size_t levels) {
  require_rank4(mask, "pool_mask");
  const size_t factor = size_t{1} << levels;
  if (mask.dim(2) % factor != 0 || mask.dim(3) % factor != 0)
    throw ShapeError("pool_mask: height and width must be divisible by " +
                     std::to_string(factor) + ", got " + to_string(mask.shape()));
  NoGradScope<T> no_grad;
  Tensor<T> m = mask;
  for (size_t i = 0; i < levels; ++i) m = ops::avg_pool2x2(m);
  return m;
}

template <typename T>
Tensor<T> attention_loss(const Tensor<T>& av, const Tensor<T>& ah, const Tensor<T>& m,
                         AttentionStats* stats) {
  require_same_shape(av, ah, "attention_loss");
  require_same_shape(av, m, "attention_loss");
  const size_t batch = av.rank() ? av.dim(0) : 0;
  const size_t len = per_sample(av);
  if (batch == 0 || len == 0) throw ShapeError("attention_loss: empty input");

  // Centred vectors and per-sample coefficients of the gradient.
  std::vector<double> tv(batch * len), th(batch * len), tm(batch * len);
  std::vector<double> num(batch), den(batch), nv(batch), nh(batch);
  std::vector<char> degenerate(batch, 0);
  size_t degenerate_count = 0;
  double acc = 0;
  for (size_t b = 0; b < batch; ++b) {
    const size_t o = b * len;
    const Tensor<T>* src[3] = {&av, &ah, &m};
    double* dst[3] = {tv.data() + o, th.data() + o, tm.data() + o};
    double norms[3];
    for (int k = 0; k < 3; ++k) {
      const T* x = src[k]->data() + o;
      const auto [lo, hi] = std::minmax_element(x, x + len);
      if (*lo == *hi) degenerate[b] = 1;
      double mu = 0;
      for (size_t i = 0; i < len; ++i) mu += x[i];
      mu /= double(len);
      double sq = 0;
      for (size_t i = 0; i < len; ++i) {
        dst[k][i] = double(x[i]) - mu;
        sq += dst[k][i] * dst[k][i];
      }
      norms[k] = sq;
    }
    if (degenerate[b] || norms[0] == 0 || norms[1] == 0 || norms[2] == 0) {
      degenerate[b] = 1;
      ++degenerate_count;
      continue;
    }
    double s = 0;
    for (size_t i = 0; i < len; ++i) s += dst[0][i] * dst[1][i] * dst[2][i];
    num[b] = s;
    den[b] = std::sqrt(norms[0] * norms[1] * norms[2]);
    nv[b] = norms[0];
    nh[b] = norms[1];
    acc -= s / den[b];
  }
  if (stats) {
    stats->samples += batch;
    stats->degenerate += degenerate_count;
  }
  Tensor<T> out({1}, T(acc / double(batch)));
  record(detail::recording({&av, &ah}), "attention_loss", out,
         [av = av, ah = ah, tv = std::move(tv), th = std::move(th), tm = std::move(tm), num, den,
          nv, nh, degenerate, batch, len](std::span<const T> gy) mutable {
           const double s = double(gy[0]) / double(batch);
           std::vector<double> g(len);
           // d(-S/D)/dt_a = -(t_b t_m)/D + S t_a / (D |t_a|^2), then centred.
           auto push = [&](Tensor<T>& target, const double* ta, const double* tb, double na,
                           size_t b) {
             if (!target.requires_grad()) return;
             const double* tmb = tm.data() + b * len;
             double mean = 0;
             for (size_t i = 0; i < len; ++i) {
               g[i] = -tb[i] * tmb[i] / den[b] + num[b] * ta[i] / (den[b] * na);
               mean += g[i];
             }
             mean /= double(len);
             T* dst = target.grad_buffer().data() + b * len;
             for (size_t i = 0; i < len; ++i) dst[i] += T(s * (g[i] - mean));
           };
           for (size_t b = 0; b < batch; ++b) {
             if (degenerate[b]) continue;
             const double* tvb = tv.data() + b * len;
             const double* thb = th.data() + b * len;
             push(av, tvb, thb, nv[b], b);
             push(ah, thb, tvb, nh[b], b);
           }
         });
  return out;
}

template <typename T>
LossBreakdown<T> total_loss(const Tensor<T>& logits, const Tensor<T>& target,
                            const Tensor<T>& av, const Tensor<T>& ah, const Tensor<T>& m,
                            const LossWeights& weights) {
  weights.validate();
  require_same_shape(logits, target, "total_loss");
  const Tensor<T> probs = ops::sigmoid(logits);
  const Tensor<T> l_cls = bce(probs, target);
  const Tensor<T> l_dice = dice(probs, target);
  AttentionStats stats;
  const Tensor<T> l_atn = attention_loss(av, ah, m, &stats);

  LossBreakdown<T> r;
  r.cls = double(l_cls.item());
  r.dice = double(l_dice.item());
  r.attention = double(l_atn.item());
  r.degenerate = stats.degenerate;
  r.total = ops::add(ops::add(ops::scale(l_cls, T(weights.cls)), ops::scale(l_dice, T(weights.dice))),
                     ops::scale(l_atn, T(weights.attention)));
  return r;
}

template <typename T>
LossBreakdown<T> network_loss(const NetworkOutput<T>& out, const Tensor<T>& target,
                              const LossWeights& weights, size_t block) {
  if (block < 1 || block > kEncoderChannels.size())
    throw std::invalid_argument("attention block must be in 1..5, got " + std::to_string(block));
  const Tensor<T> av = attention_map(out.first_branch(block));
  const Tensor<T> ah = attention_map(out.second_branch(block));
  const Tensor<T> m = pool_mask(target, block - 1);
  return total_loss(out.logits, target, av, ah, m, weights);
}

#define CROSSLINK_INSTANTIATE(T)                                                            \
  template Tensor<T> bce(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> dice(const Tensor<T>&, const Tensor<T>&, double);                      \
  template Tensor<T> attention_map(const Tensor<T>&);                                       \
  template Tensor<T> pool_mask(const Tensor<T>&, size_t);                                   \
  template Tensor<T> attention_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,   \
                                    AttentionStats*);                                       \
  template LossBreakdown<T> total_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                       const Tensor<T>&, const Tensor<T>&,                   \
                                       const LossWeights&);                                  \
  template LossBreakdown<T> network_loss(const NetworkOutput<T>&, const Tensor<T>&,         \
                                         const LossWeights&, size_t);

CROSSLINK_INSTANTIATE(float)
CROSSLINK_INSTANTIATE(double)
#undef CROSSLINK_INSTANTIATE

}  // namespace loss
}  // namespace crosslink
