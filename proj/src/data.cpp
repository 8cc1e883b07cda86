#include "crosslink/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numbers>
#include <optional>
#include <sstream>

namespace crosslink::data {

using std::size_t;

std::string shape_name(ShapeKind k) {
  switch (k) {
    case ShapeKind::Ellipse: return "ellipse";
    case ShapeKind::FusedBlob: return "fused-blob";
    case ShapeKind::Crescent: return "crescent";
  }
  return "?";
}

namespace {

std::optional<ShapeKind> parse_shape(const std::string& s) {
  if (s == "ellipse") return ShapeKind::Ellipse;
  if (s == "fused-blob") return ShapeKind::FusedBlob;
  if (s == "crescent") return ShapeKind::Crescent;
  return std::nullopt;
}

std::string sample_id(size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04zu", index);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------- spec

void SynthSpec::validate() const {
  if (height == 0 || width == 0 || height % 32 != 0 || width % 32 != 0)
    throw SpecError("image size " + std::to_string(height) + "x" + std::to_string(width) +
                    " must be positive and divisible by 32");
  if (images() == 0) throw SpecError("at least one image is required");
  if (!(fraction_lo > 0) || !(fraction_hi <= 0.25) || !(fraction_lo <= fraction_hi))
    throw SpecError("area fraction range [" + format_double(fraction_lo) + ", " +
                    format_double(fraction_hi) + "] must satisfy 0 < lo <= hi <= 0.25");
  const double pixels = double(height) * double(width);
  if (fraction_lo * pixels < 1.0)
    throw SpecError("area fraction lower bound " + format_double(fraction_lo) +
                    " gives fewer than one foreground pixel on a " + std::to_string(height) + "x" +
                    std::to_string(width) + " image");
  if (!(blur_lo >= 0) || !(blur_lo <= blur_hi))
    throw SpecError("blur sigma range must satisfy 0 <= lo <= hi");
  if (!(noise_sigma >= 0)) throw SpecError("noise sigma must be non-negative");
  if (!(contrast > 0) || contrast > 1) throw SpecError("contrast must lie in (0, 1]");
  double mix = 0;
  for (double m : shape_mix) {
    if (!(m >= 0)) throw SpecError("shape mix weights must be non-negative");
    mix += m;
  }
  if (!(mix > 0)) throw SpecError("shape mix weights must not all be zero");
}

const std::set<std::string>& SynthSpec::keys() {
  static const std::set<std::string> k = {
      "height",    "width",     "train",       "val",      "test",
      "fraction_lo", "fraction_hi", "blur_lo", "blur_hi",  "noise_sigma",
      "contrast",  "mix_ellipse", "mix_fused_blob", "mix_crescent", "seed"};
  return k;
}

SynthSpec SynthSpec::from_config(const KeyValueConfig& cfg) {
  cfg.require_known(keys());
  SynthSpec s;
  s.height = cfg.get_uint("height", s.height);
  s.width = cfg.get_uint("width", s.width);
  s.train = cfg.get_uint("train", s.train);
  s.val = cfg.get_uint("val", s.val);
  s.test = cfg.get_uint("test", s.test);
  s.fraction_lo = cfg.get_double("fraction_lo", s.fraction_lo);
  s.fraction_hi = cfg.get_double("fraction_hi", s.fraction_hi);
  s.blur_lo = cfg.get_double("blur_lo", s.blur_lo);
  s.blur_hi = cfg.get_double("blur_hi", s.blur_hi);
  s.noise_sigma = cfg.get_double("noise_sigma", s.noise_sigma);
  s.contrast = cfg.get_double("contrast", s.contrast);
  s.shape_mix[0] = cfg.get_double("mix_ellipse", s.shape_mix[0]);
  s.shape_mix[1] = cfg.get_double("mix_fused_blob", s.shape_mix[1]);
  s.shape_mix[2] = cfg.get_double("mix_crescent", s.shape_mix[2]);
  s.seed = cfg.get_uint("seed", s.seed);
  s.validate();
  return s;
}

std::string SynthSpec::to_config() const {
  std::ostringstream os;
  os << "height = " << height << "\nwidth = " << width << "\ntrain = " << train
     << "\nval = " << val << "\ntest = " << test << "\nfraction_lo = " << format_double(fraction_lo)
     << "\nfraction_hi = " << format_double(fraction_hi)
     << "\nblur_lo = " << format_double(blur_lo) << "\nblur_hi = " << format_double(blur_hi)
     << "\nnoise_sigma = " << format_double(noise_sigma)
     << "\ncontrast = " << format_double(contrast)
     << "\nmix_ellipse = " << format_double(shape_mix[0])
     << "\nmix_fused_blob = " << format_double(shape_mix[1])
     << "\nmix_crescent = " << format_double(shape_mix[2]) << "\nseed = " << seed << '\n';
  return os.str();
}

std::mt19937_64 derive_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(a),
                    std::uint32_t(a >> 32),  std::uint32_t(b),         std::uint32_t(b >> 32)};
  return std::mt19937_64(seq);
}

// ---------------------------------------------------------------- generation

namespace {

struct Circle {
  double dy, dx, r;  // offset and radius in units of the scale
};

// A target shape around (cy, cx), rotated by `angle`, sized by `scale`.
struct ShapeModel {
  ShapeKind kind = ShapeKind::Ellipse;
  double cy = 0, cx = 0, angle = 0, aspect = 1;
  std::vector<Circle> circles;

  bool inside(double y, double x, double scale) const {
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = (c * (y - cy) + s * (x - cx)) / scale;
    const double v = (-s * (y - cy) + c * (x - cx)) / scale;
    switch (kind) {
      case ShapeKind::Ellipse:
        return u * u + (v / aspect) * (v / aspect) <= 1.0;
      case ShapeKind::FusedBlob:
        for (const auto& k : circles) {
          const double du = u - k.dy, dv = v - k.dx;
          if (du * du + dv * dv <= k.r * k.r) return true;
        }
        return false;
      case ShapeKind::Crescent: {
        const double outer = u * u + v * v;
        const double du = u - circles[0].dy, dv = v - circles[0].dx;
        return outer <= 1.0 && du * du + dv * dv > circles[0].r * circles[0].r;
      }
    }
    return false;
  }

  size_t rasterize(double scale, size_t h, size_t w, BinaryMask* out) const {
    size_t n = 0;
    for (size_t y = 0; y < h; ++y)
      for (size_t x = 0; x < w; ++x) {
        const bool in = inside(double(y), double(x), scale);
        n += in;
        if (out) out->at(y, x) = in;
      }
    return n;
  }
};

ShapeModel random_shape(ShapeKind kind, size_t h, size_t w, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  ShapeModel m;
  m.kind = kind;
  m.cy = (0.25 + 0.5 * u01(rng)) * double(h - 1);
  m.cx = (0.25 + 0.5 * u01(rng)) * double(w - 1);
  m.angle = std::numbers::pi * u01(rng);
  m.aspect = 0.5 + 0.5 * u01(rng);
  if (kind == ShapeKind::FusedBlob) {
    m.circles.push_back({0.0, 0.0, 0.6 + 0.4 * u01(rng)});
    for (int i = 0; i < 2; ++i) {
      const double a = 2.0 * std::numbers::pi * u01(rng);
      const double d = 0.3 + 0.5 * u01(rng);
      m.circles.push_back({d * std::cos(a), d * std::sin(a), 0.5 + 0.4 * u01(rng)});
    }
  } else if (kind == ShapeKind::Crescent) {
    m.circles.push_back({0.35 + 0.2 * u01(rng), 0.0, 0.75 + 0.1 * u01(rng)});
  }
  return m;
}

// Scale whose rasterisation is closest to `target` pixels.
double fit_scale(const ShapeModel& m, double target, size_t h, size_t w) {
  double lo = 0.0, hi = double(std::max(h, w));
  double best = hi;
  double best_err = std::abs(double(m.rasterize(hi, h, w, nullptr)) - target);
  for (int it = 0; it < 40; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double n = double(m.rasterize(mid, h, w, nullptr));
    const double err = std::abs(n - target);
    if (err < best_err) {
      best_err = err;
      best = mid;
    }
    if (n < target) lo = mid;
    else hi = mid;
  }
  return best;
}

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = std::max(1, int(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * double(i * i) / (sigma * sigma));
    sum += k[i + radius];
  }
  for (auto& v : k) v /= sum;
  return k;
}

// Separable Gaussian blur with clamped borders.
void blur(std::vector<double>& img, size_t h, size_t w, double sigma) {
  if (sigma <= 0) return;
  const auto k = gaussian_kernel(sigma);
  const long r = long(k.size() / 2);
  std::vector<double> tmp(img.size());
  for (size_t y = 0; y < h; ++y)
    for (size_t x = 0; x < w; ++x) {
      double acc = 0;
      for (long i = -r; i <= r; ++i) {
        const long xx = std::clamp<long>(long(x) + i, 0, long(w) - 1);
        acc += k[i + r] * img[y * w + xx];
      }
      tmp[y * w + x] = acc;
    }
  for (size_t y = 0; y < h; ++y)
    for (size_t x = 0; x < w; ++x) {
      double acc = 0;
      for (long i = -r; i <= r; ++i) {
        const long yy = std::clamp<long>(long(y) + i, 0, long(h) - 1);
        acc += k[i + r] * tmp[yy * w + x];
      }
      img[y * w + x] = acc;
    }
}

}  // namespace

Sample generate_sample(const SynthSpec& spec, size_t index) {
  spec.validate();
  const size_t h = spec.height, w = spec.width;
  auto rng = derive_rng(spec.seed, index, 0);
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  Sample s;
  s.info.id = sample_id(index);
  s.info.split = index < spec.train ? "train" : index < spec.train + spec.val ? "val" : "test";
  std::discrete_distribution<int> pick(spec.shape_mix.begin(), spec.shape_mix.end());
  s.info.shape = static_cast<ShapeKind>(pick(rng));
  s.info.target_fraction = spec.fraction_lo + (spec.fraction_hi - spec.fraction_lo) * u01(rng);
  s.info.blur_sigma = spec.blur_lo + (spec.blur_hi - spec.blur_lo) * u01(rng);

  const ShapeModel model = random_shape(s.info.shape, h, w, rng);
  const double target = s.info.target_fraction * double(h * w);
  const double scale = fit_scale(model, target, h, w);
  s.mask = BinaryMask(h, w);
  model.rasterize(scale, h, w, &s.mask);

  // Smooth background texture: a base level plus a few low-frequency waves.
  std::vector<double> img(h * w);
  const double base = 0.2 + 0.1 * u01(rng);
  struct Wave {
    double fy, fx, phase, amp;
  };
  std::vector<Wave> waves;
  for (int i = 0; i < 3; ++i)
    waves.push_back({(u01(rng) - 0.5) * 0.3, (u01(rng) - 0.5) * 0.3,
                     2.0 * std::numbers::pi * u01(rng), 0.03 + 0.03 * u01(rng)});
  const double offset = spec.contrast * (0.9 + 0.2 * u01(rng));
  for (size_t y = 0; y < h; ++y)
    for (size_t x = 0; x < w; ++x) {
      double v = base;
      for (const auto& wv : waves)
        v += wv.amp * std::sin(wv.fy * double(y) + wv.fx * double(x) + wv.phase);
      if (s.mask.at(y, x)) v += offset;
      img[y * w + x] = v;
    }
  blur(img, h, w, s.info.blur_sigma);

  auto noise_rng = derive_rng(spec.seed, index, 1);
  std::normal_distribution<double> noise(0.0, 1.0);
  s.image = GrayImage(h, w);
  for (size_t i = 0; i < h * w; ++i) {
    double v = img[i];
    if (spec.noise_sigma > 0) v += spec.noise_sigma * noise(noise_rng);
    s.image.pixels[i] = float(std::clamp(v, 0.0, 1.0));
  }
  return s;
}

std::vector<Sample> generate(const SynthSpec& spec) {
  spec.validate();
  std::vector<Sample> out(spec.images());
#pragma omp parallel for schedule(dynamic)
  for (size_t i = 0; i < out.size(); ++i) out[i] = generate_sample(spec, i);
  return out;
}

// ---------------------------------------------------------------- augmentation

AugmentParams sample_augment(const AugmentSpec& spec, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  AugmentParams p;
  p.zoom = spec.zoom_lo + (spec.zoom_hi - spec.zoom_lo) * u01(rng);
  p.rotation_deg = spec.max_rotation_deg * (2.0 * u01(rng) - 1.0);
  p.flip = u01(rng) < spec.flip_probability;
  p.offset_y = u01(rng);
  p.offset_x = u01(rng);
  return p;
}

Sample augment(const Sample& s, const AugmentParams& p) {
  const size_t h = s.image.height, w = s.image.width;
  const long zh = std::max(1L, std::lround(double(h) * p.zoom));
  const long zw = std::max(1L, std::lround(double(w) * p.zoom));
  // Top-left of the zoomed image on the canvas; negative when cropping.
  const double top = double(std::lround(double(long(h) - zh) * p.offset_y));
  const double left = double(std::lround(double(long(w) - zw) * p.offset_x));
  const double ry = double(h) / double(zh), rx = double(w) / double(zw);
  const double theta = p.rotation_deg * std::numbers::pi / 180.0;
  const double c = std::cos(theta), sn = std::sin(theta);
  const double yc = 0.5 * double(h - 1), xc = 0.5 * double(w - 1);

  Sample out = s;
  for (size_t y = 0; y < h; ++y) {
    for (size_t x0 = 0; x0 < w; ++x0) {
      const size_t x = p.flip ? w - 1 - x0 : x0;
      // Inverse rotation into the zoomed canvas.
      const double dy = double(y) - yc, dx = double(x) - xc;
      const double cy = yc + c * dy - sn * dx;
      const double cx = xc + sn * dy + c * dx;
      const double iy = cy - top, ix = cx - left;
      float value = 0.0f;
      std::uint8_t label = 0;
      const bool on_canvas = cy >= -0.5 && cy < double(h) - 0.5 && cx >= -0.5 &&
                             cx < double(w) - 0.5;
      if (on_canvas && iy >= -0.5 && iy < double(zh) - 0.5 && ix >= -0.5 &&
          ix < double(zw) - 0.5) {
        const double sy = std::clamp((iy + 0.5) * ry - 0.5, 0.0, double(h - 1));
        const double sx = std::clamp((ix + 0.5) * rx - 0.5, 0.0, double(w - 1));
        const size_t y0 = size_t(sy), x1 = size_t(sx);
        const size_t y1 = std::min(y0 + 1, h - 1), x2 = std::min(x1 + 1, w - 1);
        const double fy = sy - double(y0), fx = sx - double(x1);
        const double v = (1 - fy) * ((1 - fx) * s.image.at(y0, x1) + fx * s.image.at(y0, x2)) +
                         fy * ((1 - fx) * s.image.at(y1, x1) + fx * s.image.at(y1, x2));
        value = float(v);
        const size_t ny = std::min(size_t(std::floor(sy + 0.5)), h - 1);
        const size_t nx = std::min(size_t(std::floor(sx + 0.5)), w - 1);
        label = s.mask.at(ny, nx) ? 1 : 0;
      }
      out.image.at(y, x0) = value;
      out.mask.at(y, x0) = label;
    }
  }
  return out;
}

Sample augment(const Sample& s, const AugmentSpec& spec, std::mt19937_64& rng) {
  return augment(s, sample_augment(spec, rng));
}

Sample flip_horizontal(const Sample& s) {
  Sample out = s;
  const size_t h = s.image.height, w = s.image.width;
  for (size_t y = 0; y < h; ++y)
    for (size_t x = 0; x < w; ++x) {
      out.image.at(y, x) = s.image.at(y, w - 1 - x);
      out.mask.at(y, x) = s.mask.at(y, w - 1 - x);
    }
  return out;
}

// ---------------------------------------------------------------- PGM

FormatError::FormatError(const std::string& path, size_t offset, const std::string& what)
    : std::runtime_error(path + ": byte " + std::to_string(offset) + ": " + what),
      offset_(offset) {}

namespace {

struct Pgm {
  size_t height = 0, width = 0;
  unsigned maxval = 0;
  size_t payload_offset = 0;
  std::vector<std::uint8_t> values;
};

Pgm read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string(), 0, "cannot open file");
  const std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
  const std::string name = path.string();
  size_t pos = 0;
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5')
    throw FormatError(name, 0, "missing P5 magic");
  pos = 2;
  auto skip_space = [&] {
    for (;;) {
      while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else {
        return;
      }
    }
  };
  auto read_number = [&](const char* field, unsigned long max) {
    if (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos])) &&
        bytes[pos] != '#')
      throw FormatError(name, pos, std::string("expected whitespace before ") + field);
    skip_space();
    const size_t start = pos;
    unsigned long v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + unsigned(bytes[pos] - '0');
      if (v > max) throw FormatError(name, start, std::string(field) + " out of range");
      ++pos;
    }
    if (pos == start) {
      if (pos >= bytes.size())
        throw FormatError(name, pos, std::string("truncated header, expected ") + field);
      throw FormatError(name, pos, std::string("expected ") + field);
    }
    if (v == 0) throw FormatError(name, start, std::string(field) + " must be positive");
    return v;
  };
  Pgm p;
  p.width = read_number("width", 1u << 20);
  p.height = read_number("height", 1u << 20);
  p.maxval = unsigned(read_number("maxval", 65535));
  if (p.maxval > 255) throw FormatError(name, pos, "maxval above 255 is not supported");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
    throw FormatError(name, pos, "expected a single whitespace byte after maxval");
  ++pos;
  p.payload_offset = pos;
  const size_t need = p.width * p.height;
  if (bytes.size() - pos < need)
    throw FormatError(name, bytes.size(),
                      "truncated payload: expected " + std::to_string(need) + " bytes, found " +
                          std::to_string(bytes.size() - pos));
  if (bytes.size() - pos > need)
    throw FormatError(name, pos + need, "unexpected trailing bytes after payload");
  p.values.assign(bytes.begin() + long(pos), bytes.end());
  for (size_t i = 0; i < need; ++i)
    if (p.values[i] > p.maxval)
      throw FormatError(name, pos + i, "sample value exceeds maxval");
  return p;
}

void write_pgm(const std::filesystem::path& path, size_t h, size_t w,
               const std::vector<std::uint8_t>& values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P5\n" << w << ' ' << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(values.data()), std::streamsize(values.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace

GrayImage read_image(const std::filesystem::path& path) {
  const Pgm p = read_pgm(path);
  GrayImage img(p.height, p.width);
  for (size_t i = 0; i < img.size(); ++i) img.pixels[i] = float(p.values[i]) / float(p.maxval);
  return img;
}

void write_image(const std::filesystem::path& path, const GrayImage& image) {
  std::vector<std::uint8_t> v(image.size());
  for (size_t i = 0; i < v.size(); ++i)
    v[i] = std::uint8_t(std::lround(std::clamp(double(image.pixels[i]), 0.0, 1.0) * 255.0));
  write_pgm(path, image.height, image.width, v);
}

BinaryMask read_mask(const std::filesystem::path& path) {
  const Pgm p = read_pgm(path);
  BinaryMask m(p.height, p.width);
  for (size_t i = 0; i < m.size(); ++i) {
    if (p.values[i] != 0 && p.values[i] != p.maxval)
      throw FormatError(path.string(), p.payload_offset + i,
                        "mask value " + std::to_string(p.values[i]) + " is neither 0 nor " +
                            std::to_string(p.maxval));
    m.pixels[i] = p.values[i] ? 1 : 0;
  }
  return m;
}

void write_mask(const std::filesystem::path& path, const BinaryMask& mask) {
  std::vector<std::uint8_t> v(mask.size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = mask.pixels[i] ? 255 : 0;
  write_pgm(path, mask.height, mask.width, v);
}

// ---------------------------------------------------------------- dataset

std::vector<const Sample*> Dataset::split(const std::string& name) const {
  std::vector<const Sample*> out;
  for (const auto& s : samples)
    if (s.info.split == name) out.push_back(&s);
  return out;
}

namespace {
constexpr const char* kManifestMagic = "crosslink-dataset";
}

void write_dataset(const std::filesystem::path& dir, const SynthSpec& spec,
                   const std::vector<Sample>& samples) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  for (const auto& s : samples) {
    write_image(dir / "images" / (s.info.id + ".pgm"), s.image);
    write_mask(dir / "masks" / (s.info.id + ".pgm"), s.mask);
  }
  std::ofstream out(dir / "manifest", std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + (dir / "manifest").string());
  out << kManifestMagic << ' ' << kManifestVersion << '\n';
  for (const auto& line : split(spec.to_config(), '\n')) {
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    out << "meta " << trim(line.substr(0, eq)) << ' ' << trim(line.substr(eq + 1)) << '\n';
  }
  out << "columns id split shape target_fraction blur_sigma\n";
  for (const auto& s : samples)
    out << "sample " << s.info.id << ' ' << s.info.split << ' ' << shape_name(s.info.shape) << ' '
        << format_double(s.info.target_fraction) << ' ' << format_double(s.info.blur_sigma)
        << '\n';
  if (!out) throw std::runtime_error("write failed: " + (dir / "manifest").string());
}

Dataset read_dataset(const std::filesystem::path& dir) {
  const auto manifest = dir / "manifest";
  std::ifstream in(manifest, std::ios::binary);
  if (!in) throw FormatError(manifest.string(), 0, "cannot open manifest");
  Dataset ds;
  std::string line;
  size_t offset = 0;
  bool header = false;
  while (std::getline(in, line)) {
    const size_t line_offset = offset;
    offset += line.size() + 1;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag.empty()) continue;
    if (!header) {
      int version = 0;
      if (tag != kManifestMagic || !(ls >> version))
        throw FormatError(manifest.string(), line_offset, "missing manifest header");
      if (version != kManifestVersion)
        throw FormatError(manifest.string(), line_offset,
                          "unsupported manifest version " + std::to_string(version));
      header = true;
    } else if (tag == "meta") {
      std::string key, value;
      ls >> key;
      std::getline(ls, value);
      ds.meta[key] = trim(value);
    } else if (tag == "columns") {
      continue;
    } else if (tag == "sample") {
      Sample s;
      std::string shape, frac, blur_s;
      if (!(ls >> s.info.id >> s.info.split >> shape >> frac >> blur_s))
        throw FormatError(manifest.string(), line_offset, "incomplete sample line");
      const auto kind = parse_shape(shape);
      if (!kind) throw FormatError(manifest.string(), line_offset, "unknown shape " + shape);
      if (s.info.split != "train" && s.info.split != "val" && s.info.split != "test")
        throw FormatError(manifest.string(), line_offset, "unknown split " + s.info.split);
      s.info.shape = *kind;
      try {
        s.info.target_fraction = parse_double(frac, "target_fraction");
        s.info.blur_sigma = parse_double(blur_s, "blur_sigma");
      } catch (const ConfigError& e) {
        throw FormatError(manifest.string(), line_offset, e.what());
      }
      s.image = read_image(dir / "images" / (s.info.id + ".pgm"));
      s.mask = read_mask(dir / "masks" / (s.info.id + ".pgm"));
      if (s.image.height != s.mask.height || s.image.width != s.mask.width)
        throw FormatError((dir / "masks" / (s.info.id + ".pgm")).string(), 0,
                          "mask size differs from image size");
      ds.samples.push_back(std::move(s));
    } else {
      throw FormatError(manifest.string(), line_offset, "unknown record '" + tag + "'");
    }
  }
  if (!header) throw FormatError(manifest.string(), 0, "empty manifest");
  return ds;
}

}  // namespace crosslink::data
