#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "crosslink/data.hpp"
#include "crosslink/trainer.hpp"
#include "doctest.h"
#include "helpers.hpp"

#include <unistd.h>

using namespace crosslink;
using namespace crosslink::train;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("crosslink_train_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::vector<data::Sample> tiny_set(std::size_t n, std::size_t side, std::uint64_t seed) {
  data::SynthSpec s;
  s.height = s.width = side;
  s.train = n, s.val = 0, s.test = 0;
  s.fraction_lo = 0.02, s.fraction_hi = 0.05;
  s.seed = seed;
  return data::generate(s);
}

TrainConfig tiny_config(Variant v = Variant::Crosslink) {
  TrainConfig c = TrainConfig::desk();
  c.variant = v;
  c.batch_size = 2;
  c.epochs = 2;
  c.seed = 5;
  return c;
}

std::string block_of(const std::string& name) { return name.substr(0, name.find('.')); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("train config") {
  const TrainConfig d = TrainConfig::desk();
  CHECK(d.learning_rate == 1e-3);
  CHECK(d.weight_decay == 0.005);
  CHECK(d.loss_weights == LossWeights{0.4, 0.1, 0.5});
  CHECK(d.attention_block == 3);
  const TrainConfig p = TrainConfig::paper_parity();
  CHECK(p.learning_rate == 0.5e-5);
  CHECK(p.batch_size == 2);

  const auto cfg = KeyValueConfig::parse("mode = paper\nvariant = VerCrosslink\nlambda = 1,0,0\nepochs = 3\n");
  const TrainConfig c = TrainConfig::from_config(cfg);
  CHECK(c.learning_rate == 0.5e-5);
  CHECK(c.variant == Variant::VerCrosslink);
  CHECK(c.loss_weights == LossWeights{1, 0, 0});
  CHECK(TrainConfig::from_config(KeyValueConfig::parse(c.to_config())).to_config() == c.to_config());

  CHECK_THROWS_AS(TrainConfig::from_config(KeyValueConfig::parse("lambda = 0.5,0.5,0.5")), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_config(KeyValueConfig::parse("variant = unet")), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_config(KeyValueConfig::parse("attention_block = 6")), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_config(KeyValueConfig::parse("learning_rate = 0")), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_config(KeyValueConfig::parse("epochs = 0")), ConfigError);
}

TEST_CASE("init_weights") {
  Network<float> a(Variant::VerCrosslink), b(Variant::VerCrosslink);
  init_weights(a, 3);
  init_weights(b, 3);
  const auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i)
    CHECK(testing::bitwise_equal(pa[i].tensor.values(), pb[i].tensor.values()));

  Network<float> c(Variant::VerCrosslink);
  init_weights(c, 4);
  const auto pc = c.parameters();
  CHECK(pa[0].name.ends_with(".weight"));
  CHECK_FALSE(testing::bitwise_equal(pa[0].tensor.values(), pc[0].tensor.values()));

  for (const auto& [name, t] : pa) {
    if (name.ends_with(".gamma"))
      for (float v : t.values()) CHECK(v == 1.0f);
    if (name.ends_with(".bias") || name.ends_with(".beta"))
      for (float v : t.values()) CHECK(v == 0.0f);
    if (name.ends_with(".weight") && t.numel() >= 10000) {
      double mean = 0, var = 0;
      for (float v : t.values()) mean += v;
      mean /= double(t.numel());
      for (float v : t.values()) var += (v - mean) * (v - mean);
      var /= double(t.numel());
      CHECK(std::abs(mean) < 4 * 0.02 / std::sqrt(double(t.numel())));
      CHECK(std::sqrt(var) == doctest::Approx(0.02).epsilon(0.05));
    }
  }
}

TEST_CASE("adam") {
  SUBCASE("zero gradients without decay leave parameters unchanged") {
    Tensor<double> w({3}, {1.0, -2.0, 0.5});
    w.set_requires_grad(true);
    w.zero_grad();
    Adam<double> opt({{"w", w}}, 0.1, 0.0);
    for (int i = 0; i < 5; ++i) CHECK(opt.step());
    CHECK(w[0] == 1.0);
    CHECK(w[1] == -2.0);
  }

  SUBCASE("first step moves by lr") {
    Tensor<double> w({1}, 0.3);
    w.set_requires_grad(true);
    w.grad_buffer()[0] = 1.0;
    Adam<double> opt({{"w", w}}, 0.01, 0.0);
    opt.step();
    CHECK(w[0] == doctest::Approx(0.3 - 0.01 / (1 + 1e-8)).epsilon(1e-15));
    CHECK(opt.steps() == 1);
  }

  SUBCASE("decoupled weight decay shrinks by lr * wd * theta") {
    Tensor<double> w({1}, 2.0);
    w.set_requires_grad(true);
    w.zero_grad();
    Adam<double> opt({{"w", w}}, 0.1, 0.5);
    opt.step();
    CHECK(w[0] == doctest::Approx(2.0 - 0.1 * 0.5 * 2.0).epsilon(1e-15));
  }

  SUBCASE("minimises theta squared") {
    Tensor<double> w({1}, 1.0);
    w.set_requires_grad(true);
    Adam<double> opt({{"w", w}}, 0.1, 0.0);
    // Scalar simulation of the same recurrence as the oracle.
    double theta = 1.0, m = 0, v = 0;
    for (int t = 1; t <= 500; ++t) {
      w.grad_buffer()[0] = 2 * w[0];
      opt.step();
      const double g = 2 * theta;
      m = 0.9 * m + 0.1 * g;
      v = 0.999 * v + 0.001 * g * g;
      theta -= 0.1 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    }
    CHECK(std::abs(w[0]) < 1e-3);
    CHECK(w[0] == doctest::Approx(theta).epsilon(1e-9));
  }

  SUBCASE("non-finite gradients skip the step") {
    Tensor<double> w({2}, 1.0);
    w.set_requires_grad(true);
    w.grad_buffer()[1] = std::nan("");
    Adam<double> opt({{"w", w}}, 0.1, 0.0);
    CHECK_FALSE(opt.step());
    CHECK(opt.skipped() == 1);
    CHECK(opt.steps() == 0);
    CHECK(w[0] == 1.0);
  }
}

TEST_CASE("gradient reaches every block") {
  Network<float> net(Variant::Crosslink);
  init_weights(net, 1);
  const auto set = tiny_set(2, 64, 2);
  const Tensor<float> x = stack_images<float>({&set[0].image, &set[1].image});
  const Tensor<float> y = stack_masks<float>({&set[0].mask, &set[1].mask});
  Tape<float> tape;
  {
    TapeScope<float> scope(tape);
    auto out = net.forward(x, BatchNormMode::Train);
    auto l = loss::network_loss(out, y, LossWeights{});
    tape.backward(l.total);
  }
  std::map<std::string, std::pair<std::size_t, std::size_t>> zero_total;
  for (const auto& [name, t] : net.parameters()) {
    auto& [zeros, total] = zero_total[block_of(name)];
    total += t.numel();
    if (!t.has_grad()) {
      zeros += t.numel();
      continue;
    }
    for (float g : t.grad()) zeros += g == 0.0f;
  }
  CHECK(zero_total.size() == 16);
  for (const auto& [block, zt] : zero_total) {
    CAPTURE(block);
    CHECK(double(zt.first) / double(zt.second) < 0.5);
  }
}

TEST_CASE("attention loss alone reaches the attention blocks") {
  Network<double> net(Variant::Crosslink);
  init_weights(net, 2);
  const auto set = tiny_set(2, 32, 3);
  const Tensor<double> x = stack_images<double>({&set[0].image, &set[1].image});
  const Tensor<double> y = stack_masks<double>({&set[0].mask, &set[1].mask});
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    auto out = net.forward(x, BatchNormMode::Train);
    auto l = loss::network_loss(out, y, LossWeights{0, 0, 1});
    tape.backward(l.total);
  }
  auto nonzero = [](const Tensor<double>& t) {
    if (!t.has_grad()) return false;
    for (double g : t.grad())
      if (g != 0.0) return true;
    return false;
  };
  std::map<std::string, bool> reached;
  for (const auto& [name, t] : net.parameters()) reached[block_of(name)] |= nonzero(t);
  for (const char* b : {"vcrb1", "vcrb2", "vcrb3", "hcrb1", "hcrb2", "hcrb3"}) {
    CAPTURE(b);
    CHECK(reached[b]);
  }
  for (const char* b : {"vcrb4", "vcrb5", "hcrb4", "hcrb5", "ucrb1", "ucrb5", "head"}) {
    CAPTURE(b);
    CHECK_FALSE(reached[b]);
  }
}

TEST_CASE("classification-only weights still log every component") {
  TrainConfig cfg = tiny_config(Variant::VerCrosslink);
  cfg.loss_weights = LossWeights{1, 0, 0};
  cfg.epochs = 1;
  cfg.augment = false;
  Trainer<float> t(cfg, tiny_set(4, 32, 4), {});
  t.run();
  REQUIRE(t.steps().size() == 2);
  for (const auto& s : t.steps()) {
    CHECK(s.total == doctest::Approx(s.cls).epsilon(1e-6));
    CHECK(s.dice > 0.0);
    CHECK(s.attention != 0.0);
  }
}

TEST_CASE("runs are reproducible and resume bitwise") {
  const auto train = tiny_set(4, 32, 6);
  const auto val = tiny_set(2, 32, 7);
  TempDir full("full"), again("again"), resumed("resumed");

  Trainer<float> a(tiny_config(), train, val, full.path);
  a.run();
  Trainer<float> b(tiny_config(), train, val, again.path);
  b.run();
  CHECK(slurp(full.path / "last.ckpt") == slurp(again.path / "last.ckpt"));
  CHECK(slurp(full.path / "runlog.jsonl") == slurp(again.path / "runlog.jsonl"));
  CHECK(fs::exists(full.path / "best.ckpt"));
  CHECK(fs::exists(full.path / "runlog.jsonl.timing"));

  TrainConfig one = tiny_config();
  one.epochs = 1;
  {
    Trainer<float> first(one, train, val, resumed.path);
    first.run();
  }
  const Checkpoint ckpt = Checkpoint::load(resumed.path / "last.ckpt");
  Trainer<float> c(tiny_config(), train, val);
  c.resume(ckpt);
  CHECK(c.epochs_done() == 1);
  c.run();
  REQUIRE(c.steps().size() == 2);
  const auto& full_steps = a.steps();
  REQUIRE(full_steps.size() == 4);
  for (std::size_t i = 0; i < 2; ++i) {
    const double x = c.steps()[i].total, y = full_steps[2 + i].total;
    CHECK(std::memcmp(&x, &y, sizeof x) == 0);
  }
  const auto sa = a.network().state(), sc = c.network().state();
  for (std::size_t i = 0; i < sa.size(); ++i)
    CHECK(testing::bitwise_equal(sa[i].tensor.values(), sc[i].tensor.values()));
}

TEST_CASE("evaluation is deterministic and uses threshold 0.5") {
  Network<float> net(Variant::VerCrosslink);
  init_weights(net, 8);
  const auto set = tiny_set(3, 32, 9);
  std::vector<const data::Sample*> ptrs{&set[0], &set[1], &set[2]};
  const auto r1 = evaluate(net, ptrs), r2 = evaluate(net, ptrs);
  REQUIRE(r1.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(r1[i].counts == r2[i].counts);
    const auto probs = predict(net, set[i].image);
    const auto mask = metrics::binarize(probs, 32, 32);
    CHECK(metrics::confusion(mask, set[i].mask) == r1[i].counts);
  }
}

TEST_CASE("stacking rejects mixed sizes") {
  GrayImage a(32, 32), b(64, 32);
  CHECK_THROWS_AS(stack_images<float>({&a, &b}), ShapeError);
  CHECK_THROWS_AS((Trainer<float>(tiny_config(), {}, {})), ConfigError);
}
