#include "crosslink/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <type_traits>

namespace crosslink {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'X', 'L', 'N', 'K', 'C', 'K', 'P', 'T'};

template <typename T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::F32;
  else if constexpr (std::is_same_v<T, double>) return DType::F64;
  else return DType::U64;
}

size_t dtype_size(DType d) { return d == DType::F32 ? 4 : 8; }

// Sequential reader over a stream of known length; errors carry the byte
// offset at which reading failed.
class Reader {
 public:
  Reader(std::istream& in, size_t size, const std::string& origin)
      : in_(in), size_(size), origin_(origin) {}

  template <typename V>
  V get(const char* what) {
    V v;
    read(&v, sizeof(V), what);
    return v;
  }
  std::string str(size_t n, const char* what) {
    need(n, what);
    std::string s(n, '\0');
    read(s.data(), n, what);
    return s;
  }
  std::vector<std::uint8_t> raw(size_t n, const char* what) {
    need(n, what);
    std::vector<std::uint8_t> v(n);
    read(v.data(), n, what);
    return v;
  }
  [[noreturn]] void fail(const std::string& what) const {
    throw CheckpointError(origin_ + ": byte " + std::to_string(pos_) + ": " + what);
  }
  bool done() const { return pos_ == size_; }

 private:
  void need(size_t n, const char* what) const {
    if (size_ - pos_ < n) fail(std::string("truncated while reading ") + what);
  }
  void read(void* dst, size_t n, const char* what) {
    need(n, what);
    if (n && !in_.read(static_cast<char*>(dst), std::streamsize(n))) fail(std::string("read error in ") + what);
    pos_ += n;
  }
  std::istream& in_;
  size_t size_;
  const std::string& origin_;
  size_t pos_ = 0;
};

}  // namespace

template <typename T>
void Checkpoint::add(const std::string& name, const Tensor<T>& t) {
  Entry e{name, dtype_of<T>(), t.shape(), {}};
  e.raw.resize(t.numel() * sizeof(T));
  if (t.numel()) std::memcpy(e.raw.data(), t.data(), e.raw.size());
  entries_.push_back(std::move(e));
}

template <typename T>
void Checkpoint::add_view(const std::string& name, const Shape& shape, const T* data) {
  Entry e{name, dtype_of<T>(), shape, {}};
  e.view = reinterpret_cast<const std::uint8_t*>(data);
  e.view_size = numel(shape) * sizeof(T);
  entries_.push_back(std::move(e));
}

void Checkpoint::add_u64(const std::string& name, const std::vector<std::uint64_t>& values) {
  Entry e{name, DType::U64, {values.size()}, {}};
  e.raw.resize(values.size() * 8);
  if (!values.empty()) std::memcpy(e.raw.data(), values.data(), e.raw.size());
  entries_.push_back(std::move(e));
}

const Checkpoint::Entry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return &e;
  return nullptr;
}

template <typename T>
Tensor<T> Checkpoint::tensor(const std::string& name) const {
  const Entry* e = find(name);
  if (!e) throw CheckpointError("checkpoint has no tensor '" + name + "'");
  Tensor<T> t(e->shape);
  const size_t n = t.numel();
  if (e->dtype == DType::F32) {
    std::vector<float> v(n);
    if (n) std::memcpy(v.data(), e->bytes().data(), n * 4);
    for (size_t i = 0; i < n; ++i) t[i] = T(v[i]);
  } else if (e->dtype == DType::F64) {
    std::vector<double> v(n);
    if (n) std::memcpy(v.data(), e->bytes().data(), n * 8);
    for (size_t i = 0; i < n; ++i) t[i] = T(v[i]);
  } else {
    throw CheckpointError("checkpoint entry '" + name + "' is not floating point");
  }
  return t;
}

std::vector<std::uint64_t> Checkpoint::u64(const std::string& name) const {
  const Entry* e = find(name);
  if (!e) throw CheckpointError("checkpoint has no entry '" + name + "'");
  if (e->dtype != DType::U64) throw CheckpointError("checkpoint entry '" + name + "' is not u64");
  std::vector<std::uint64_t> v(e->bytes().size() / 8);
  if (!v.empty()) std::memcpy(v.data(), e->bytes().data(), v.size() * 8);
  return v;
}

namespace {

// Emits the file layout through `sink(const void*, size_t)`.
template <typename Sink>
void emit(const Checkpoint& c, Sink&& sink) {
  auto put = [&](auto v) { sink(&v, sizeof v); };
  sink(kMagic, sizeof kMagic);
  put(std::uint32_t(Checkpoint::kVersion));
  put(std::uint32_t(c.variant.size()));
  sink(c.variant.data(), c.variant.size());
  put(std::uint64_t(c.entries().size()));
  for (const auto& e : c.entries()) {
    put(std::uint32_t(e.name.size()));
    sink(e.name.data(), e.name.size());
    put(static_cast<std::uint8_t>(e.dtype));
    put(std::uint32_t(e.shape.size()));
    for (auto d : e.shape) put(std::uint64_t(d));
    sink(e.bytes().data(), e.bytes().size());
  }
}

}  // namespace

std::vector<std::uint8_t> Checkpoint::serialize() const {
  std::vector<std::uint8_t> out;
  emit(*this, [&](const void* p, size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  });
  return out;
}

Checkpoint Checkpoint::parse(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  return read(in, bytes.size(), origin);
}

Checkpoint Checkpoint::read(std::istream& in, size_t size, const std::string& origin) {
  Reader r(in, size, origin);
  if (r.str(sizeof kMagic, "magic") != std::string(kMagic, sizeof kMagic))
    throw CheckpointError(origin + ": not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kVersion)
    throw CheckpointError(origin + ": unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  c.variant = r.str(r.get<std::uint32_t>("variant length"), "variant");
  const auto count = r.get<std::uint64_t>("entry count");
  for (std::uint64_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.str(r.get<std::uint32_t>("name length"), "name");
    const auto tag = r.get<std::uint8_t>("dtype");
    if (tag < 1 || tag > 3) r.fail("unknown dtype tag " + std::to_string(tag));
    e.dtype = static_cast<DType>(tag);
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank > 8) r.fail("implausible rank " + std::to_string(rank));
    size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      e.shape.push_back(r.get<std::uint64_t>("extent"));
      n *= e.shape.back();
    }
    e.raw = r.raw(n * dtype_size(e.dtype), "values");
    c.entries_.push_back(std::move(e));
  }
  if (!r.done()) r.fail("trailing bytes after last entry");
  return c;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    emit(*this, [&](const void* p, size_t n) {
      out.write(static_cast<const char*>(p), std::streamsize(n));
    });
    if (!out) throw CheckpointError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::error_code ec;
  const auto size = std::filesystem::file_size(path, ec);
  if (ec) throw CheckpointError("cannot open checkpoint " + path.string());
  return read(in, size, path.string());
}

template <typename T>
Checkpoint make_checkpoint(const Network<T>& net, bool by_reference) {
  Checkpoint c;
  c.variant = std::string(variant_name(net.variant()));
  for (const auto& [name, t] : net.state()) {
    if (by_reference) c.add_view(name, t.shape(), t.data());
    else c.add(name, t);
  }
  return c;
}

template <typename T>
void load_network(Network<T>& net, const Checkpoint& ckpt) {
  const auto v = checkpoint_variant(ckpt);
  if (!v || *v != net.variant())
    throw CheckpointError("checkpoint holds variant '" + ckpt.variant + "', network is '" +
                          std::string(variant_name(net.variant())) + "'");
  for (auto& [name, t] : net.state()) {
    const Checkpoint::Entry* e = ckpt.find(name);
    if (!e) throw CheckpointError("checkpoint is missing '" + name + "'");
    if (e->shape != t.shape())
      throw CheckpointError("checkpoint tensor '" + name + "' has shape " + to_string(e->shape) +
                            ", network expects " + to_string(t.shape()));
    const Tensor<T> src = ckpt.tensor<T>(name);
    std::copy(src.values().begin(), src.values().end(), t.values().begin());
  }
}

std::optional<Variant> checkpoint_variant(const Checkpoint& ckpt) {
  return parse_variant(ckpt.variant);
}

template void Checkpoint::add(const std::string&, const Tensor<float>&);
template void Checkpoint::add(const std::string&, const Tensor<double>&);
template Tensor<float> Checkpoint::tensor(const std::string&) const;
template Tensor<double> Checkpoint::tensor(const std::string&) const;
template void Checkpoint::add_view(const std::string&, const Shape&, const float*);
template void Checkpoint::add_view(const std::string&, const Shape&, const double*);
template Checkpoint make_checkpoint(const Network<float>&, bool);
template Checkpoint make_checkpoint(const Network<double>&, bool);
template void load_network(Network<float>&, const Checkpoint&);
template void load_network(Network<double>&, const Checkpoint&);

}  // namespace crosslink
