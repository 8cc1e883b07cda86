#include "crosslink/ablation.hpp"

#include <cmath>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace crosslink::ablation {

namespace {

template <typename T>
RunSummary run(const train::TrainConfig& cfg, const data::Dataset& dataset,
               const std::optional<std::filesystem::path>& out_dir, const Progress& progress) {
  std::vector<data::Sample> train, val;
  for (const auto* s : dataset.split("train")) train.push_back(*s);
  for (const auto* s : dataset.split("val")) val.push_back(*s);
  const auto test = dataset.split("test");
  if (test.empty()) throw ConfigError("dataset has no test images");

  train::Trainer<T> trainer(cfg, std::move(train), std::move(val), out_dir);
  RunSummary out;
  out.config = cfg;
  out.parameters = trainer.network().parameter_count();
  const auto result = trainer.run([&](const train::EpochRecord& r) {
    if (progress) {
      std::ostringstream os;
      os << variant_name(cfg.variant) << " epoch " << r.epoch << " loss " << r.train_loss;
      if (r.validation.dsc) os << " val dsc " << *r.validation.dsc;
      progress(os.str());
    }
    return true;
  });
  out.epochs = trainer.epochs_done();
  out.diverged = result.diverged;
  out.cases = train::evaluate(trainer.network(), test);
  out.test = metrics::summarize(out.cases);
  if (trainer.log().is_open()) trainer.log().evaluation("test", out.cases);
  return out;
}

std::optional<double> mean_dsc(const std::vector<RunSummary>& rows,
                               const std::function<bool(const RunSummary&)>& pick,
                               std::string* label = nullptr) {
  for (const auto& r : rows)
    if (pick(r)) {
      if (label) *label = std::string(variant_name(r.config.variant));
      return r.test.dsc.value_or(0.0);
    }
  return std::nullopt;
}

}  // namespace

RunSummary train_and_test(const train::TrainConfig& cfg, const data::Dataset& dataset,
                          const std::optional<std::filesystem::path>& out_dir,
                          const Progress& progress) {
  cfg.validate();
  if (cfg.precision == "f64") return run<double>(cfg, dataset, out_dir, progress);
  return run<float>(cfg, dataset, out_dir, progress);
}

std::vector<LossWeights> parse_lambda_grid(const KeyValueConfig& grid) {
  std::vector<LossWeights> rows;
  for (const auto& [key, value] : grid.entries()) {
    if (key != "lambda") throw ConfigError(grid.origin() + ": unknown key '" + key + "' in grid");
    try {
      rows.push_back(LossWeights::parse(value));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(grid.origin() + ": lambda row '" + value + "': " + e.what());
    }
  }
  if (rows.empty()) throw ConfigError(grid.origin() + ": grid has no lambda rows");
  return rows;
}

std::vector<Variant> parse_variant_list(const std::string& text) {
  if (trim(text) == "all") return {kAllVariants.begin(), kAllVariants.end()};
  std::vector<Variant> out;
  for (const auto& part : split(text, ',')) {
    const auto v = parse_variant(trim(part));
    if (!v) throw ConfigError("unknown variant '" + trim(part) + "'");
    out.push_back(*v);
  }
  if (out.empty()) throw ConfigError("no variants given");
  return out;
}

void write_lambda_table(std::ostream& os, const std::vector<RunSummary>& rows, char d) {
  os << "lambda1" << d << "lambda2" << d << "lambda3" << d << "dsc" << d << "sen" << d << "spe" << d
     << "or" << d << "ur" << '\n';
  for (const auto& r : rows) {
    const auto& w = r.config.loss_weights;
    const auto& s = r.test;
    os << w.cls << d << w.dice << d << w.attention << d << metrics::format_value(s.dsc) << d
       << metrics::format_value(s.sen) << d << metrics::format_value(s.spe) << d
       << metrics::format_value(s.over) << d << metrics::format_value(s.under) << '\n';
  }
}

void write_arch_table(std::ostream& os, const std::vector<RunSummary>& rows, char d) {
  os << "variant" << d << "parameters" << d << "bytes_f32" << d << "dsc" << d << "sen" << d << "spe"
     << d << "or" << d << "ur" << d << "hd" << '\n';
  for (const auto& r : rows) {
    const auto& s = r.test;
    os << variant_name(r.config.variant) << d << r.parameters << d << r.parameters * 4 << d
       << metrics::format_value(s.dsc) << d << metrics::format_value(s.sen) << d
       << metrics::format_value(s.spe) << d << metrics::format_value(s.over) << d
       << metrics::format_value(s.under) << d << metrics::format_value(s.hd) << '\n';
  }
}

std::vector<std::string> parameter_ordering_violations() {
  const Variant order[] = {Variant::Double2SingleNet, Variant::SquareCrosslink, Variant::Crosslink,
                           Variant::VerCrosslink};
  std::vector<std::string> out;
  std::vector<std::size_t> counts;
  for (auto v : order) counts.push_back(parameter_report(v).total);
  for (std::size_t i = 0; i + 1 < counts.size(); ++i)
    if (!(counts[i] > counts[i + 1]))
      out.push_back(std::string(variant_name(order[i])) + " (" + std::to_string(counts[i]) +
                    ") is not larger than " + std::string(variant_name(order[i + 1])) + " (" +
                    std::to_string(counts[i + 1]) + ")");
  const auto hor = parameter_report(Variant::HorCrosslink).total;
  if (!(counts[2] > hor))
    out.push_back("Crosslink is not larger than HorCrosslink (" + std::to_string(hor) + ")");
  return out;
}

std::vector<std::string> arch_direction_violations(const std::vector<RunSummary>& rows,
                                                   double slack) {
  std::vector<std::string> out;
  const auto cross =
      mean_dsc(rows, [](const RunSummary& r) { return r.config.variant == Variant::Crosslink; });
  if (!cross) return out;
  for (auto v : {Variant::SquareCrosslink, Variant::VerCrosslink, Variant::HorCrosslink,
                 Variant::Double2SingleNet}) {
    const auto other = mean_dsc(rows, [v](const RunSummary& r) { return r.config.variant == v; });
    if (other && *cross < *other - slack) {
      std::ostringstream os;
      os << "Crosslink DSC " << *cross << " is below " << variant_name(v) << " DSC " << *other
         << " minus " << slack;
      out.push_back(os.str());
    }
  }
  return out;
}

std::vector<std::string> lambda_direction_violations(const std::vector<RunSummary>& rows,
                                                     double slack) {
  std::vector<std::string> out;
  const auto cls_only = mean_dsc(rows, [](const RunSummary& r) {
    return r.config.loss_weights == LossWeights{1, 0, 0};
  });
  if (!cls_only) return out;
  double sum = 0;
  std::size_t n = 0;
  for (const auto& r : rows)
    if (std::abs(r.config.loss_weights.attention - 0.5) < 1e-12) {
      sum += r.test.dsc.value_or(0.0);
      ++n;
    }
  if (n == 0) return out;
  const double family = sum / double(n);
  if (family < *cls_only - slack) {
    std::ostringstream os;
    os << "mean DSC of the lambda3 = 0.5 rows " << family << " is below the (1,0,0) row "
       << *cls_only << " minus " << slack;
    out.push_back(os.str());
  }
  return out;
}

}  // namespace crosslink::ablation
