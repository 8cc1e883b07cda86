#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "crosslink/ablation.hpp"
#include "crosslink/checkpoint.hpp"
#include "crosslink/data.hpp"
#include "crosslink/gradcheck.hpp"
#include "crosslink/metrics.hpp"
#include "crosslink/trainer.hpp"
#include "json.hpp"

using namespace crosslink;
namespace fs = std::filesystem;

namespace {

enum ExitCode { kOk = 0, kInvalid = 1, kRuntime = 2, kThreshold = 3 };

// Bad flags, files or settings detected before any side effect.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

char parse_delimiter(const std::string& s) {
  if (s == "tab" || s == "\\t") return '\t';
  if (s.size() != 1) throw UsageError("delimiter must be one character or 'tab'");
  return s[0];
}

// Explicit flag, then the value from a config file, then a fresh one that
// is printed so the run can be repeated.
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag,
                           const std::optional<std::uint64_t>& from_file) {
  if (flag) return *flag;
  if (from_file) return *from_file;
  std::random_device rd;
  const std::uint64_t seed = (std::uint64_t(rd()) << 32) ^ rd();
  std::cerr << "seed: " << seed << " (generated; pass --seed " << seed << " to repeat)\n";
  return seed;
}

// Flat config text with command-line overrides appended; later lines win.
KeyValueConfig merged_config(const std::string& path,
                             const std::vector<std::pair<std::string, std::string>>& overrides) {
  std::ostringstream text;
  std::string origin = "<flags>";
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot read config " + path);
    text << in.rdbuf() << '\n';
    origin = path;
  }
  for (const auto& [k, v] : overrides) text << k << " = " << v << '\n';
  return KeyValueConfig::parse(text.str(), origin);
}

data::Dataset load_dataset(const std::string& dir) {
  if (!fs::is_directory(dir)) throw UsageError("dataset directory " + dir + " does not exist");
  return data::read_dataset(dir);
}

std::vector<data::Sample> copy_split(const data::Dataset& d, const std::string& name) {
  std::vector<data::Sample> out;
  for (const auto* s : d.split(name)) out.push_back(*s);
  return out;
}

bool is_f64(const Checkpoint& c) {
  for (const auto& e : c.entries())
    if (e.dtype == DType::F64) return true;
  return false;
}

void progress(const std::string& line) { std::cerr << line << std::endl; }

// ------------------------------------------------------------------ gen-data

struct GenDataArgs {
  std::string spec, out;
  std::optional<std::uint64_t> seed;
  bool force = false, dry_run = false;
};

int gen_data(const GenDataArgs& a) {
  const auto cfg = merged_config(a.spec, {});
  data::SynthSpec spec = data::SynthSpec::from_config(cfg);
  spec.seed = resolve_seed(a.seed, cfg.has("seed") ? std::optional(spec.seed) : std::nullopt);
  spec.validate();
  if (a.dry_run) {
    std::cout << spec.to_config();
    return kOk;
  }
  if (fs::exists(a.out) && !fs::is_empty(a.out)) {
    if (!a.force) throw UsageError(a.out + " exists and is not empty; pass --force to replace it");
    fs::remove_all(a.out);
  }
  data::write_dataset(a.out, spec, data::generate(spec));
  std::cout << "wrote " << spec.images() << " images (" << spec.height << "x" << spec.width
            << ") to " << a.out << '\n';
  return kOk;
}

// --------------------------------------------------------------------- train

struct TrainArgs {
  std::string data, config, out, resume, variant, lambda, mode, precision, delimiter = ",";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs, threads, batch;
  std::optional<double> lr;
  bool dry_run = false, no_augment = false;
};

train::TrainConfig resolve_train_config(const TrainArgs& a) {
  std::vector<std::pair<std::string, std::string>> o;
  if (!a.mode.empty()) o.emplace_back("mode", a.mode);
  if (!a.variant.empty()) o.emplace_back("variant", a.variant);
  if (!a.lambda.empty()) o.emplace_back("lambda", a.lambda);
  if (!a.precision.empty()) o.emplace_back("precision", a.precision);
  if (a.epochs) o.emplace_back("epochs", std::to_string(*a.epochs));
  if (a.threads) o.emplace_back("threads", std::to_string(*a.threads));
  if (a.batch) o.emplace_back("batch_size", std::to_string(*a.batch));
  if (a.lr) {
    std::ostringstream os;
    os.precision(17);
    os << *a.lr;
    o.emplace_back("learning_rate", os.str());
  }
  if (a.no_augment) o.emplace_back("augment", "false");
  auto cfg = merged_config(a.config, o);
  auto tc = train::TrainConfig::from_config(cfg);
  tc.seed = resolve_seed(a.seed, cfg.has("seed") ? std::optional(tc.seed) : std::nullopt);
  tc.validate();
  return tc;
}

template <typename T>
int run_training(const train::TrainConfig& cfg, const data::Dataset& dataset, const TrainArgs& a) {
  const fs::path out = a.out;
  std::optional<Checkpoint> resume;
  if (!a.resume.empty()) resume = Checkpoint::load(a.resume);
  train::Trainer<T> trainer(cfg, copy_split(dataset, "train"), copy_split(dataset, "val"), out,
                            resume.has_value());
  if (resume) trainer.resume(*resume);
  const auto result = trainer.run([](const train::EpochRecord& r) {
    std::ostringstream os;
    os << "epoch " << r.epoch << " loss " << r.train_loss << " val dsc "
       << metrics::format_value(r.validation.dsc) << (r.best ? " (best)" : "");
    progress(os.str());
    return true;
  });
  if (result.diverged) {
    std::cerr << "training diverged; " << (out / "last.ckpt").string()
              << " holds the last good epoch\n";
    return kRuntime;
  }
  const auto test = dataset.split("test");
  if (!test.empty() && fs::exists(out / "best.ckpt")) {
    Network<T> best(cfg.variant);
    load_network(best, Checkpoint::load(out / "best.ckpt"));
    const auto cases = train::evaluate(best, test);
    trainer.log().evaluation("test", cases);
    metrics::write_case_table(std::cout, cases, parse_delimiter(a.delimiter));
  }
  std::cerr << "best epoch " << result.best_epoch << ", skipped steps " << result.skipped_steps
            << ", degenerate attention samples " << result.degenerate_samples << '\n';
  return kOk;
}

int train_cmd(const TrainArgs& a) {
  const auto cfg = resolve_train_config(a);
  parse_delimiter(a.delimiter);
  if (a.dry_run) {
    std::cout << cfg.to_config();
    return kOk;
  }
  if (a.out.empty()) throw UsageError("--out is required unless --dry-run is given");
  if (!a.resume.empty() && !fs::exists(a.resume))
    throw UsageError("checkpoint " + a.resume + " does not exist");
  const auto dataset = load_dataset(a.data);
  if (cfg.precision == "f64") return run_training<double>(cfg, dataset, a);
  return run_training<float>(cfg, dataset, a);
}

// ---------------------------------------------------------- eval and predict

struct EvalArgs {
  std::string checkpoint, data, split = "test", runlog, delimiter = ",";
  double spacing_y = 1.0, spacing_x = 1.0;
  bool dry_run = false;
};

template <typename T>
std::vector<metrics::CaseMetrics> evaluate_checkpoint(const Checkpoint& ckpt,
                                                      const std::vector<const data::Sample*>& s,
                                                      const metrics::PixelSpacing& spacing) {
  const auto variant = checkpoint_variant(ckpt);
  if (!variant) throw CheckpointError("checkpoint names unknown variant '" + ckpt.variant + "'");
  Network<T> net(*variant);
  load_network(net, ckpt);
  auto cases = train::evaluate(net, s);
  if (spacing.sy != 1.0 || spacing.sx != 1.0) {
    // Distances only; recompute with the requested spacing.
    for (std::size_t i = 0; i < cases.size(); ++i) {
      const auto probs = train::predict(net, s[i]->image);
      const auto pred = metrics::binarize(probs, s[i]->image.height, s[i]->image.width);
      cases[i] = metrics::evaluate_case(cases[i].id, pred, s[i]->mask, spacing);
    }
  }
  return cases;
}

int eval_cmd(const EvalArgs& a) {
  const char d = parse_delimiter(a.delimiter);
  if (a.spacing_y <= 0 || a.spacing_x <= 0) throw UsageError("pixel spacing must be positive");
  if (a.dry_run) {
    std::cout << "checkpoint = " << a.checkpoint << "\ndata = " << a.data << "\nsplit = " << a.split
              << "\nspacing = " << a.spacing_y << "," << a.spacing_x << '\n';
    return kOk;
  }
  const auto ckpt = Checkpoint::load(a.checkpoint);
  const auto dataset = load_dataset(a.data);
  const auto samples = dataset.split(a.split);
  if (samples.empty()) throw UsageError("dataset has no '" + a.split + "' images");
  const metrics::PixelSpacing spacing{a.spacing_y, a.spacing_x};
  const auto cases = is_f64(ckpt) ? evaluate_checkpoint<double>(ckpt, samples, spacing)
                                  : evaluate_checkpoint<float>(ckpt, samples, spacing);
  metrics::write_case_table(std::cout, cases, d);
  if (!a.runlog.empty()) {
    train::RunLog log(a.runlog, true);
    log.evaluation(a.split, cases);
  }
  return kOk;
}

struct PredictArgs {
  std::string checkpoint, image, out, probabilities;
  double threshold = 0.5;
  bool dry_run = false;
};

template <typename T>
std::vector<float> predict_with(const Checkpoint& ckpt, const GrayImage& image) {
  const auto variant = checkpoint_variant(ckpt);
  if (!variant) throw CheckpointError("checkpoint names unknown variant '" + ckpt.variant + "'");
  Network<T> net(*variant);
  load_network(net, ckpt);
  return train::predict(net, image);
}

int predict_cmd(const PredictArgs& a) {
  if (!(a.threshold > 0 && a.threshold < 1)) throw UsageError("threshold must be in (0, 1)");
  const GrayImage image = data::read_image(a.image);
  // Reject unsupported sizes before loading the model.
  try {
    check_input_size(image.height, image.width);
  } catch (const ShapeError& e) {
    throw UsageError(a.image + ": " + e.what());
  }
  if (a.dry_run) {
    std::cout << "checkpoint = " << a.checkpoint << "\nimage = " << a.image << " (" << image.height
              << "x" << image.width << ")\nout = " << a.out << "\nthreshold = " << a.threshold
              << '\n';
    return kOk;
  }
  const auto ckpt = Checkpoint::load(a.checkpoint);
  const auto probs = is_f64(ckpt) ? predict_with<double>(ckpt, image) : predict_with<float>(ckpt, image);
  const auto mask = metrics::binarize(probs, image.height, image.width, a.threshold);
  data::write_mask(a.out, mask);
  if (!a.probabilities.empty()) {
    GrayImage p(image.height, image.width);
    p.pixels = probs;
    data::write_image(a.probabilities, p);
  }
  std::cout << "foreground fraction " << mask.fraction() << '\n';
  return kOk;
}

// ----------------------------------------------------------------- gradcheck

struct GradcheckArgs {
  std::string scope = "op", fault, delimiter = ",";
  std::optional<std::uint64_t> seed;
  std::size_t samples = 50;
  bool dry_run = false;
};

int gradcheck_cmd(const GradcheckArgs& a) {
  const char d = parse_delimiter(a.delimiter);
  if (a.scope != "op" && a.scope != "block" && a.scope != "net" && a.scope != "all")
    throw UsageError("scope must be op, block, net or all");
  const std::uint64_t seed = resolve_seed(a.seed, std::nullopt);
  if (a.dry_run) {
    std::cout << "scope = " << a.scope << "\nseed = " << seed << "\nsamples = " << a.samples
              << (a.fault.empty() ? "" : "\nfault = " + a.fault) << '\n';
    return kOk;
  }
  gradcheck::Options opt;
  if (!a.fault.empty()) opt.fault_op = a.fault;
  std::vector<gradcheck::CheckResult> results;
  auto add = [&](std::vector<gradcheck::CheckResult> r) {
    results.insert(results.end(), r.begin(), r.end());
  };
  if (a.scope == "op" || a.scope == "all") add(gradcheck::op_suite(seed, opt));
  if (a.scope == "block" || a.scope == "all") add(gradcheck::block_suite(seed, opt));
  if (a.scope == "net" || a.scope == "all") add(gradcheck::net_suite(seed, opt, a.samples));

  std::cout << "check" << d << "elements" << d << "kinks" << d << "max_rel_error" << d
            << "threshold" << d << "status" << d << "worst" << '\n';
  std::vector<std::string> failed;
  for (const auto& r : results) {
    std::cout << r.name << d << r.elements << d << r.kinks << d << r.max_rel_error << d
              << r.threshold << d << (r.passed() ? "pass" : "FAIL") << d << r.worst << '\n';
    if (!r.passed()) failed.push_back(r.name);
  }
  if (failed.empty()) {
    std::cerr << "all " << results.size() << " checks passed\n";
    return kOk;
  }
  std::cerr << failed.size() << " check(s) failed:";
  for (const auto& f : failed) std::cerr << " [" << f << "]";
  std::cerr << '\n';
  return kThreshold;
}

// ----------------------------------------------------------------- ablations

struct AblateArgs {
  std::string grid, variants = "all", data, config, out, delimiter = ",";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  bool dry_run = false;
};

train::TrainConfig ablation_base(const AblateArgs& a) {
  std::vector<std::pair<std::string, std::string>> o;
  if (a.epochs) o.emplace_back("epochs", std::to_string(*a.epochs));
  const auto cfg = merged_config(a.config, o);
  auto tc = train::TrainConfig::from_config(cfg);
  tc.seed = resolve_seed(a.seed, cfg.has("seed") ? std::optional(tc.seed) : std::nullopt);
  tc.validate();
  return tc;
}

std::optional<fs::path> row_dir(const AblateArgs& a, const std::string& name) {
  if (a.out.empty()) return std::nullopt;
  return fs::path(a.out) / name;
}

void report_directions(const std::vector<std::string>& violations, const std::string& what) {
  if (violations.empty()) {
    std::cerr << what << ": ordering holds\n";
    return;
  }
  for (const auto& v : violations) std::cerr << what << ": " << v << '\n';
}

int ablate_lambda_cmd(const AblateArgs& a) {
  const char d = parse_delimiter(a.delimiter);
  const auto rows = ablation::parse_lambda_grid(KeyValueConfig::load(a.grid));
  const auto base = ablation_base(a);
  if (a.dry_run) {
    std::cout << base.to_config();
    for (const auto& w : rows) std::cout << "row = " << w.to_string() << '\n';
    return kOk;
  }
  const auto dataset = load_dataset(a.data);
  std::vector<ablation::RunSummary> results;
  for (const auto& w : rows) {
    auto cfg = base;
    cfg.loss_weights = w;
    std::string name = "lambda_" + w.to_string();
    for (char& c : name)
      if (c == ',') c = '_';
    results.push_back(ablation::train_and_test(cfg, dataset, row_dir(a, name), progress));
  }
  ablation::write_lambda_table(std::cout, results, d);
  report_directions(ablation::lambda_direction_violations(results), "lambda3 = 0.5 vs (1,0,0)");
  return kOk;
}

int ablate_arch_cmd(const AblateArgs& a) {
  const char d = parse_delimiter(a.delimiter);
  const auto variants = ablation::parse_variant_list(a.variants);
  const auto base = ablation_base(a);
  if (a.dry_run) {
    std::cout << base.to_config();
    for (auto v : variants) std::cout << "row = " << variant_name(v) << '\n';
    return kOk;
  }
  const auto dataset = load_dataset(a.data);
  std::vector<ablation::RunSummary> results;
  for (auto v : variants) {
    auto cfg = base;
    cfg.variant = v;
    results.push_back(
        ablation::train_and_test(cfg, dataset, row_dir(a, std::string(variant_name(v))), progress));
  }
  ablation::write_arch_table(std::cout, results, d);
  report_directions(ablation::parameter_ordering_violations(), "parameter ordering");
  report_directions(ablation::arch_direction_violations(results), "Crosslink vs other variants");
  return kOk;
}

// -------------------------------------------------------------------- report

struct ReportArgs {
  std::string runlog, bins, delimiter = ",";
  bool dry_run = false;
};

std::optional<double> optional_number(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j[key].is_null()) return std::nullopt;
  return j[key].get<double>();
}

int report_cmd(const ReportArgs& a) {
  const char d = parse_delimiter(a.delimiter);
  std::vector<double> edges = metrics::default_bins();
  if (!a.bins.empty()) {
    edges.clear();
    for (const auto& p : split(a.bins, ',')) edges.push_back(parse_double(trim(p), "bin edge") / 100.0);
  }
  if (a.dry_run) {
    std::cout << "runlog = " << a.runlog << "\nbins =";
    for (double e : edges) std::cout << ' ' << e * 100 << '%';
    std::cout << '\n';
    return kOk;
  }
  std::ifstream in(a.runlog);
  if (!in) throw UsageError("cannot read run log " + a.runlog);

  // Cases grouped by evaluation label, in first-seen order.
  std::vector<std::string> labels;
  std::map<std::string, std::vector<metrics::CaseMetrics>> cases;
  std::string label = "unlabelled", line;
  std::size_t epochs = 0, lineno = 0;
  std::optional<nlohmann::json> last_epoch;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw UsageError(a.runlog + ": line " + std::to_string(lineno) + " is not JSON");
    }
    const std::string type = j.value("type", "");
    if (type == "evaluation") {
      label = j.value("label", "unlabelled");
      // A later evaluation with the same label replaces the earlier one.
      if (!cases.count(label)) labels.push_back(label);
      cases[label].clear();
    } else if (type == "case") {
      metrics::CaseMetrics c;
      c.id = j.value("id", "");
      c.truth_fraction = j.value("fraction", 0.0);
      c.counts = {j.value("tp", 0ull), j.value("fp", 0ull), j.value("tn", 0ull), j.value("fn", 0ull)};
      c.dsc = optional_number(j, "dsc");
      c.sen = optional_number(j, "sen");
      c.spe = optional_number(j, "spe");
      c.over = optional_number(j, "or");
      c.under = optional_number(j, "ur");
      c.hd = optional_number(j, "hd");
      if (!cases.count(label)) labels.push_back(label);
      cases[label].push_back(c);
    } else if (type == "epoch") {
      ++epochs;
      last_epoch = j;
    }
  }
  if (labels.empty() && epochs == 0) {
    std::cout << "no records\n";
    return kOk;
  }
  if (last_epoch)
    std::cout << "# " << epochs << " epoch records; last epoch " << (*last_epoch)["epoch"]
              << " train loss " << (*last_epoch)["train_loss"] << '\n';
  if (labels.empty()) std::cout << "no evaluation records\n";
  for (const auto& l : labels) {
    const auto& cs = cases[l];
    const auto s = metrics::summarize(cs);
    std::cout << "# " << l << ": " << s.cases << " cases, mean DSC " << metrics::format_value(s.dsc)
              << ", Sen " << metrics::format_value(s.sen) << ", Spe " << metrics::format_value(s.spe)
              << ", OR " << metrics::format_value(s.over) << ", UR "
              << metrics::format_value(s.under) << ", HD " << metrics::format_value(s.hd)
              << " (undefined DSC " << s.undefined_dsc << ", HD " << s.undefined_hd << ")\n";
    metrics::write_strata_table(std::cout, metrics::stratified_report(cs, edges), d);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Crosslink double-branch segmentation: data, training, evaluation and studies"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "crosslink 1.0");

  GenDataArgs gen;
  auto* g = app.add_subcommand("gen-data", "Write a synthetic dataset");
  g->add_option("--spec", gen.spec, "Generator config (key = value)")->check(CLI::ExistingFile);
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--seed", gen.seed, "Random seed");
  g->add_flag("--force", gen.force, "Replace a non-empty output directory");
  g->add_flag("--dry-run", gen.dry_run, "Print the resolved spec and exit");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a network");
  t->add_option("--data", tr.data, "Dataset directory")->required();
  t->add_option("--config", tr.config, "Training config (key = value)")->check(CLI::ExistingFile);
  t->add_option("--out", tr.out, "Run directory for checkpoints and the run log");
  t->add_option("--resume", tr.resume, "Continue from a last.ckpt");
  t->add_option("--variant", tr.variant, "Crosslink, SquareCrosslink, VerCrosslink, HorCrosslink, Double2SingleNet");
  t->add_option("--lambda", tr.lambda, "Loss weights l1,l2,l3 on the simplex");
  t->add_option("--mode", tr.mode, "desk or paper defaults");
  t->add_option("--precision", tr.precision, "f32 or f64");
  t->add_option("--epochs", tr.epochs);
  t->add_option("--batch-size", tr.batch);
  t->add_option("--learning-rate", tr.lr);
  t->add_option("--threads", tr.threads);
  t->add_option("--seed", tr.seed, "Random seed");
  t->add_option("--delimiter", tr.delimiter, "Table delimiter");
  t->add_flag("--no-augment", tr.no_augment, "Disable zoom, rotation and flip augmentation");
  t->add_flag("--dry-run", tr.dry_run, "Print the resolved config and exit");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Per-case metrics of a checkpoint on a dataset split");
  e->add_option("--checkpoint", ev.checkpoint)->required()->check(CLI::ExistingFile);
  e->add_option("--data", ev.data)->required();
  e->add_option("--split", ev.split, "train, val or test");
  e->add_option("--runlog", ev.runlog, "Append the cases to this run log");
  e->add_option("--spacing-y", ev.spacing_y, "Pixel spacing for Hausdorff distances");
  e->add_option("--spacing-x", ev.spacing_x);
  e->add_option("--delimiter", ev.delimiter);
  e->add_flag("--dry-run", ev.dry_run);

  PredictArgs pr;
  auto* p = app.add_subcommand("predict", "Segment one PGM image");
  p->add_option("--checkpoint", pr.checkpoint)->required()->check(CLI::ExistingFile);
  p->add_option("--image", pr.image)->required()->check(CLI::ExistingFile);
  p->add_option("--out", pr.out, "Mask PGM")->required();
  p->add_option("--probabilities", pr.probabilities, "Also write the probability map");
  p->add_option("--threshold", pr.threshold);
  p->add_flag("--dry-run", pr.dry_run);

  GradcheckArgs gc;
  auto* c = app.add_subcommand("gradcheck", "Finite-difference gradient checks in double precision");
  c->add_option("--scope", gc.scope, "op, block, net or all");
  c->add_option("--seed", gc.seed);
  c->add_option("--samples", gc.samples, "Parameters sampled by the net scope");
  c->add_option("--fault", gc.fault, "Corrupt the backward pass of this op (debug)");
  c->add_option("--delimiter", gc.delimiter);
  c->add_flag("--dry-run", gc.dry_run);

  AblateArgs al;
  auto* l = app.add_subcommand("ablate-lambda", "One run per loss-weight row, shared seed");
  l->add_option("--grid", al.grid, "Grid file of `lambda = l1,l2,l3` rows")->required()->check(CLI::ExistingFile);
  l->add_option("--data", al.data)->required();
  l->add_option("--config", al.config)->check(CLI::ExistingFile);
  l->add_option("--out", al.out, "Directory for per-row runs");
  l->add_option("--epochs", al.epochs);
  l->add_option("--seed", al.seed);
  l->add_option("--delimiter", al.delimiter);
  l->add_flag("--dry-run", al.dry_run);

  AblateArgs aa;
  auto* r = app.add_subcommand("ablate-arch", "One run per network variant, shared seed");
  r->add_option("--variants", aa.variants, "Comma-separated variant names or 'all'");
  r->add_option("--data", aa.data)->required();
  r->add_option("--config", aa.config)->check(CLI::ExistingFile);
  r->add_option("--out", aa.out, "Directory for per-variant runs");
  r->add_option("--epochs", aa.epochs);
  r->add_option("--seed", aa.seed);
  r->add_option("--delimiter", aa.delimiter);
  r->add_flag("--dry-run", aa.dry_run);

  ReportArgs rp;
  auto* o = app.add_subcommand("report", "Summaries and area-stratified tables from a run log");
  o->add_option("--runlog", rp.runlog)->required();
  o->add_option("--bins", rp.bins, "Bin edges in percent, e.g. 0,0.6,2,100");
  o->add_option("--delimiter", rp.delimiter);
  o->add_flag("--dry-run", rp.dry_run);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err) == 0 ? kOk : kInvalid;
  }

  try {
    if (*g) return gen_data(gen);
    if (*t) return train_cmd(tr);
    if (*e) return eval_cmd(ev);
    if (*p) return predict_cmd(pr);
    if (*c) return gradcheck_cmd(gc);
    if (*l) return ablate_lambda_cmd(al);
    if (*r) return ablate_arch_cmd(aa);
    if (*o) return report_cmd(rp);
  } catch (const UsageError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kInvalid;
  } catch (const ConfigError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kInvalid;
  } catch (const data::SpecError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kInvalid;
  } catch (const data::FormatError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kInvalid;
  } catch (const CheckpointError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kInvalid;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kRuntime;
  }
  return kInvalid;
}
