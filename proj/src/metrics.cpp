#include "crosslink/metrics.hpp"

#include <cmath>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace crosslink::metrics {

using std::size_t;

namespace {

std::optional<double> ratio(std::uint64_t num, std::uint64_t den) {
  if (den == 0) return std::nullopt;
  return 100.0 * double(num) / double(den);
}

void require_same_dims(const BinaryMask& a, const BinaryMask& b) {
  if (a.height != b.height || a.width != b.width)
    throw std::invalid_argument("mask dimensions differ: " + std::to_string(a.height) + "x" +
                                std::to_string(a.width) + " vs " + std::to_string(b.height) +
                                "x" + std::to_string(b.width));
}

// Largest squared distance from a point of `from` to its nearest point of `to`.
double directed_sq(const std::vector<std::pair<size_t, size_t>>& from,
                   const std::vector<std::pair<size_t, size_t>>& to, PixelSpacing s) {
  double worst = 0;
  for (const auto& [ay, ax] : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& [by, bx] : to) {
      const double dy = (double(ay) - double(by)) * s.sy;
      const double dx = (double(ax) - double(bx)) * s.sx;
      const double d = dy * dy + dx * dx;
      if (d < best) {
        best = d;
        if (best <= worst) break;  // cannot raise the maximum any more
      }
    }
    if (best > worst) worst = best;
  }
  return worst;
}

struct Mean {
  double sum = 0;
  size_t n = 0, undefined = 0;
  void add(const std::optional<double>& v) {
    if (v) {
      sum += *v;
      ++n;
    } else {
      ++undefined;
    }
  }
  std::optional<double> value() const {
    return n ? std::optional<double>(sum / double(n)) : std::nullopt;
  }
};

}  // namespace

ConfusionCounts confusion(const BinaryMask& prediction, const BinaryMask& truth) {
  require_same_dims(prediction, truth);
  ConfusionCounts c;
  for (size_t i = 0; i < truth.size(); ++i) {
    const bool p = prediction.pixels[i] != 0, g = truth.pixels[i] != 0;
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

std::optional<double> dsc(const ConfusionCounts& c) {
  return ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn);
}
std::optional<double> sensitivity(const ConfusionCounts& c) { return ratio(c.tp, c.tp + c.fn); }
std::optional<double> specificity(const ConfusionCounts& c) { return ratio(c.tn, c.tn + c.fp); }
std::optional<double> over_rate(const ConfusionCounts& c) { return ratio(c.fp, c.tp + c.fn); }
std::optional<double> under_rate(const ConfusionCounts& c) { return ratio(c.fn, c.tp + c.fn); }

std::vector<std::pair<size_t, size_t>> boundary_pixels(const BinaryMask& mask) {
  std::vector<std::pair<size_t, size_t>> out;
  const size_t h = mask.height, w = mask.width;
  for (size_t y = 0; y < h; ++y) {
    for (size_t x = 0; x < w; ++x) {
      if (!mask.at(y, x)) continue;
      const bool edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
      if (edge || !mask.at(y - 1, x) || !mask.at(y + 1, x) || !mask.at(y, x - 1) ||
          !mask.at(y, x + 1))
        out.emplace_back(y, x);
    }
  }
  return out;
}

std::optional<double> hausdorff(const BinaryMask& a, const BinaryMask& b, PixelSpacing spacing) {
  require_same_dims(a, b);
  const auto ba = boundary_pixels(a);
  const auto bb = boundary_pixels(b);
  if (ba.empty() || bb.empty()) return std::nullopt;
  const double d = std::max(directed_sq(ba, bb, spacing), directed_sq(bb, ba, spacing));
  return std::sqrt(d);
}

BinaryMask binarize(const std::vector<float>& probs, size_t h, size_t w, double threshold) {
  if (probs.size() != h * w)
    throw std::invalid_argument("binarize: " + std::to_string(probs.size()) +
                                " values for a " + std::to_string(h) + "x" + std::to_string(w) +
                                " mask");
  BinaryMask m(h, w);
  for (size_t i = 0; i < probs.size(); ++i) m.pixels[i] = double(probs[i]) >= threshold;
  return m;
}

CaseMetrics evaluate_case(std::string id, const BinaryMask& prediction, const BinaryMask& truth,
                          PixelSpacing spacing) {
  CaseMetrics r;
  r.id = std::move(id);
  r.counts = confusion(prediction, truth);
  r.truth_fraction = truth.fraction();
  r.dsc = dsc(r.counts);
  r.sen = sensitivity(r.counts);
  r.spe = specificity(r.counts);
  r.over = over_rate(r.counts);
  r.under = under_rate(r.counts);
  r.hd = hausdorff(prediction, truth, spacing);
  return r;
}

MetricSummary summarize(const std::vector<CaseMetrics>& cases) {
  Mean d, se, sp, o, u, h;
  for (const auto& c : cases) {
    d.add(c.dsc);
    se.add(c.sen);
    sp.add(c.spe);
    o.add(c.over);
    u.add(c.under);
    h.add(c.hd);
  }
  MetricSummary s;
  s.cases = cases.size();
  s.dsc = d.value();
  s.sen = se.value();
  s.spe = sp.value();
  s.over = o.value();
  s.under = u.value();
  s.hd = h.value();
  s.undefined_dsc = d.undefined;
  s.undefined_sen = se.undefined;
  s.undefined_spe = sp.undefined;
  s.undefined_over = o.undefined;
  s.undefined_under = u.undefined;
  s.undefined_hd = h.undefined;
  return s;
}

std::vector<double> default_bins() { return {0.0, 0.006, 0.02, 1.0}; }

std::vector<StratumRow> stratified_report(const std::vector<CaseMetrics>& cases,
                                          const std::vector<double>& edges) {
  if (edges.size() < 2) throw std::invalid_argument("bins need at least two edges");
  for (size_t i = 1; i < edges.size(); ++i)
    if (!(edges[i] > edges[i - 1]))
      throw std::invalid_argument("bin edges must be strictly increasing");
  const size_t nbins = edges.size() - 1;
  std::vector<Mean> means(nbins);
  std::vector<StratumRow> rows(nbins);
  for (const auto& c : cases) {
    const double f = c.truth_fraction;
    for (size_t b = 0; b < nbins; ++b) {
      const bool last = b + 1 == nbins;
      if (f >= edges[b] && (f < edges[b + 1] || (last && f == edges[b + 1]))) {
        ++rows[b].count;
        means[b].add(c.dsc);
        break;
      }
    }
  }
  for (size_t b = 0; b < nbins; ++b) {
    rows[b].lo = edges[b];
    rows[b].hi = edges[b + 1];
    rows[b].mean_dsc = means[b].value();
    rows[b].undefined = means[b].undefined;
  }
  return rows;
}

std::string format_value(const std::optional<double>& v) {
  if (!v) return "NA";
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  os << *v;
  return os.str();
}

void write_case_table(std::ostream& os, const std::vector<CaseMetrics>& cases, char delimiter) {
  const char d = delimiter;
  os << "id" << d << "dsc" << d << "sen" << d << "spe" << d << "or" << d << "ur" << d << "hd\n";
  for (const auto& c : cases)
    os << c.id << d << format_value(c.dsc) << d << format_value(c.sen) << d
       << format_value(c.spe) << d << format_value(c.over) << d << format_value(c.under) << d
       << format_value(c.hd) << '\n';
  const MetricSummary s = summarize(cases);
  os << "mean" << d << format_value(s.dsc) << d << format_value(s.sen) << d
     << format_value(s.spe) << d << format_value(s.over) << d << format_value(s.under) << d
     << format_value(s.hd) << '\n';
}

void write_strata_table(std::ostream& os, const std::vector<StratumRow>& rows, char delimiter) {
  const char d = delimiter;
  os << "fraction_lo" << d << "fraction_hi" << d << "count" << d << "mean_dsc" << d
     << "undefined\n";
  for (const auto& r : rows)
    os << r.lo << d << r.hi << d << r.count << d << format_value(r.mean_dsc) << d << r.undefined
       << '\n';
}

}  // namespace crosslink::metrics
