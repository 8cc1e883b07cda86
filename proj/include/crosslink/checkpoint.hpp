#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "crosslink/net.hpp"
#include "crosslink/tensor.hpp"

namespace crosslink {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType : std::uint8_t { F32 = 1, F64 = 2, U64 = 3 };

/// Versioned binary container of named arrays.
///
/// Layout, all integers little-endian:
///   8 bytes  magic "XLNKCKPT"
///   u32      format version
///   u32 + n  variant tag
///   u64      entry count
///   per entry: u32 name length, name bytes, u8 dtype, u32 rank,
///              rank x u64 extents, raw little-endian values
class Checkpoint {
 public:
  static constexpr std::uint32_t kVersion = 1;

  struct Entry {
    std::string name;
    DType dtype = DType::F32;
    Shape shape;
    std::vector<std::uint8_t> raw;
    /// Set by add_view: values live outside the checkpoint and `raw` is empty.
    const std::uint8_t* view = nullptr;
    std::size_t view_size = 0;

    std::span<const std::uint8_t> bytes() const {
      return view ? std::span<const std::uint8_t>(view, view_size) : std::span<const std::uint8_t>(raw);
    }
  };

  std::string variant;

  template <typename T>
  void add(const std::string& name, const Tensor<T>& t);
  /// Refers to `data` without copying; it must stay alive and unchanged
  /// while the checkpoint is used.
  template <typename T>
  void add_view(const std::string& name, const Shape& shape, const T* data);
  void add_u64(const std::string& name, const std::vector<std::uint64_t>& values);

  const Entry* find(const std::string& name) const;
  /// Values converted to T; throws CheckpointError if missing.
  template <typename T>
  Tensor<T> tensor(const std::string& name) const;
  std::vector<std::uint64_t> u64(const std::string& name) const;

  const std::vector<Entry>& entries() const { return entries_; }

  std::vector<std::uint8_t> serialize() const;
  static Checkpoint parse(const std::vector<std::uint8_t>& bytes, const std::string& origin);
  /// Reads exactly `size` bytes from `in`.
  static Checkpoint read(std::istream& in, std::size_t size, const std::string& origin);

  /// Written to a temporary file and renamed into place.
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

 private:
  std::vector<Entry> entries_;
};

/// Network state (parameters and buffers) under their hierarchical names.
/// `by_reference` skips the copy (see add_view).
template <typename T>
Checkpoint make_checkpoint(const Network<T>& net, bool by_reference = false);

/// Variant must match; every network tensor must be present with its shape.
template <typename T>
void load_network(Network<T>& net, const Checkpoint& ckpt);

std::optional<Variant> checkpoint_variant(const Checkpoint& ckpt);

}  // namespace crosslink
