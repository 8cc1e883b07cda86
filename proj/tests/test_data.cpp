#include <filesystem>
#include <fstream>
#include <random>

#include <unistd.h>

#include "crosslink/data.hpp"
#include "doctest.h"

using namespace crosslink;
using namespace crosslink::data;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("crosslink_test_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream(p, std::ios::binary) << bytes;
}

SynthSpec small_spec() {
  SynthSpec s;
  s.train = 6, s.val = 2, s.test = 2;
  s.seed = 42;
  return s;
}

}  // namespace

TEST_CASE("generation is deterministic per seed") {
  const SynthSpec s = small_spec();
  const auto a = generate(s), b = generate(s);
  REQUIRE(a.size() == 10);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].image == b[i].image);
    CHECK(a[i].mask == b[i].mask);
    CHECK(a[i].image == generate_sample(s, i).image);
  }
  SynthSpec other = s;
  other.seed = 43;
  CHECK_FALSE(generate(other)[0].image == a[0].image);
  CHECK(a[0].info.split == "train");
  CHECK(a[6].info.split == "val");
  CHECK(a[9].info.split == "test");
}

TEST_CASE("mask fractions stay in range") {
  for (auto [lo, hi] : {std::pair{0.001, 0.02}, std::pair{0.005, 0.05}}) {
    SynthSpec s = small_spec();
    s.train = 60;
    s.fraction_lo = lo, s.fraction_hi = hi;
    const double row = 1.0 / double(s.height);
    for (const auto& smp : generate(s)) {
      CHECK(smp.mask.fraction() >= lo - row);
      CHECK(smp.mask.fraction() <= hi + row);
      for (auto v : smp.mask.pixels) CHECK(v <= 1);
      for (float v : smp.image.pixels) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
      }
    }
  }
}

TEST_CASE("without blur and noise the boundary is a step") {
  SynthSpec s = small_spec();
  s.blur_lo = s.blur_hi = 0.0;
  s.noise_sigma = 0.0;
  s.fraction_lo = 0.01, s.fraction_hi = 0.03;
  const double min_offset = 0.9 * s.contrast;
  for (const auto& smp : generate(s)) {
    double edge = 0, inside = 0;
    for (std::size_t y = 0; y < s.height; ++y)
      for (std::size_t x = 0; x + 1 < s.width; ++x) {
        const double d = std::abs(double(smp.image.at(y, x + 1)) - double(smp.image.at(y, x)));
        if (smp.mask.at(y, x) != smp.mask.at(y, x + 1)) edge = std::max(edge, d);
        else inside = std::max(inside, d);
      }
    CHECK(edge >= min_offset - 0.05);
    CHECK(inside < 0.05);
  }
}

TEST_CASE("spec validation") {
  SynthSpec s = small_spec();
  s.height = 50;
  CHECK_THROWS_AS(s.validate(), SpecError);
  s = small_spec();
  s.fraction_lo = 0.1, s.fraction_hi = 0.05;
  CHECK_THROWS_AS(s.validate(), SpecError);
  s = small_spec();
  s.fraction_lo = 1e-5;
  CHECK_THROWS_WITH_AS(s.validate(), doctest::Contains("fewer than one foreground pixel"), SpecError);
  s = small_spec();
  s.fraction_hi = 0.3;
  CHECK_THROWS_AS(s.validate(), SpecError);

  const SynthSpec t = small_spec();
  const SynthSpec u = SynthSpec::from_config(KeyValueConfig::parse(t.to_config()));
  CHECK(u.to_config() == t.to_config());
  CHECK_THROWS_AS(SynthSpec::from_config(KeyValueConfig::parse("hieght = 64")), ConfigError);
}

TEST_CASE("augmentation") {
  const SynthSpec s = small_spec();
  const Sample smp = generate_sample(s, 3);

  CHECK(augment(smp, AugmentParams{}).image == smp.image);
  CHECK(augment(smp, AugmentParams{}).mask == smp.mask);

  const Sample twice = flip_horizontal(flip_horizontal(smp));
  CHECK(twice.image == smp.image);
  CHECK(twice.mask == smp.mask);
  AugmentParams flip;
  flip.flip = true;
  CHECK(augment(smp, flip).image == flip_horizontal(smp).image);
  CHECK(flip_horizontal(smp).image.at(5, 0) == smp.image.at(5, s.width - 1));

  Sample full = smp;
  full.mask = BinaryMask(s.height, s.width, 1);
  AugmentParams half;
  half.zoom = 0.5;
  const auto zoomed = augment(full, half);
  const double ratio = double(zoomed.mask.count()) / double(full.mask.count());
  CHECK(ratio == doctest::Approx(0.25).epsilon(0.05));

  std::mt19937_64 rng(7);
  for (int i = 0; i < 50; ++i) {
    const auto out = augment(smp, AugmentSpec{}, rng);
    CHECK(out.image.height == s.height);
    CHECK(out.image.width == s.width);
    CHECK(out.mask.size() == smp.mask.size());
    for (auto v : out.mask.pixels) CHECK(v <= 1);
  }

  std::mt19937_64 r1(9), r2(9);
  CHECK(augment(smp, AugmentSpec{}, r1).image == augment(smp, AugmentSpec{}, r2).image);

  std::mt19937_64 pr(10);
  for (int i = 0; i < 200; ++i) {
    const auto p = sample_augment(AugmentSpec{}, pr);
    CHECK(p.zoom >= 0.5);
    CHECK(p.zoom <= 1.75);
    CHECK(std::abs(p.rotation_deg) <= 30.0);
  }
}

TEST_CASE("pgm round trips") {
  TempDir dir("pgm");
  GrayImage img(8, 5);
  std::mt19937 rng(3);
  for (auto& v : img.pixels) v = float(rng() % 256) / 255.0f;
  write_image(dir.path / "a.pgm", img);
  CHECK(read_image(dir.path / "a.pgm") == img);

  BinaryMask m(4, 6);
  m.at(2, 3) = 1;
  write_mask(dir.path / "m.pgm", m);
  CHECK(read_mask(dir.path / "m.pgm") == m);

  std::string hdr = "P5\n64 64\n255\n";
  write_bytes(dir.path / "b.pgm", hdr + std::string(4096, '\x80'));
  const GrayImage b = read_image(dir.path / "b.pgm");
  CHECK(b.height == 64);
  CHECK(b.width == 64);
  CHECK(b.pixels[100] == doctest::Approx(128.0 / 255.0));
}

TEST_CASE("pgm errors carry byte offsets") {
  TempDir dir("pgmerr");
  write_bytes(dir.path / "t.pgm", "P5\n4 4\n255\n" + std::string(10, '\0'));
  try {
    read_image(dir.path / "t.pgm");
    FAIL("truncated payload accepted");
  } catch (const FormatError& e) {
    CHECK(e.offset() == 21);
    CHECK(std::string(e.what()).find("byte 21") != std::string::npos);
  }
  write_bytes(dir.path / "magic.pgm", "P2\n4 4\n255\n");
  CHECK_THROWS_AS(read_image(dir.path / "magic.pgm"), FormatError);
  write_bytes(dir.path / "hdr.pgm", "P5\n4 x\n255\n");
  CHECK_THROWS_AS(read_image(dir.path / "hdr.pgm"), FormatError);
  write_bytes(dir.path / "mask.pgm", "P5\n2 2\n255\n" + std::string("\0\xff\x10\0", 4));
  try {
    read_mask(dir.path / "mask.pgm");
    FAIL("non-binary mask accepted");
  } catch (const FormatError& e) {
    CHECK(e.offset() == 13);
  }
  CHECK_THROWS_AS(read_image(dir.path / "missing.pgm"), FormatError);
}

TEST_CASE("dataset directory round trip") {
  TempDir dir("dataset");
  SynthSpec s = small_spec();
  s.height = s.width = 32;
  s.fraction_lo = 0.01;
  const auto samples = generate(s);
  write_dataset(dir.path, s, samples);
  CHECK(fs::exists(dir.path / "images" / (samples[0].info.id + ".pgm")));
  CHECK(fs::exists(dir.path / "masks" / (samples[0].info.id + ".pgm")));

  const Dataset ds = read_dataset(dir.path);
  REQUIRE(ds.samples.size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    CHECK(ds.samples[i].info.id == samples[i].info.id);
    CHECK(ds.samples[i].info.split == samples[i].info.split);
    CHECK(ds.samples[i].mask == samples[i].mask);
    for (std::size_t p = 0; p < samples[i].image.size(); ++p)
      CHECK(std::abs(ds.samples[i].image.pixels[p] - samples[i].image.pixels[p]) <= 0.5f / 255.0f + 1e-6f);
  }
  CHECK(ds.split("train").size() == 6);
  CHECK(ds.split("val").size() == 2);
  CHECK(ds.split("test").size() == 2);
  CHECK(ds.meta.at("seed") == "42");

  std::ofstream(dir.path / "manifest", std::ios::app) << "bogus line\n";
  CHECK_THROWS_WITH_AS(read_dataset(dir.path), doctest::Contains("unknown record"), FormatError);
  write_bytes(dir.path / "manifest", "");
  CHECK_THROWS_AS(read_dataset(dir.path), FormatError);
}
