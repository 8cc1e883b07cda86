#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "crosslink/tensor.hpp"

namespace crosslink::gradcheck {

struct Options {
  /// Central-difference step. A probe whose +-step evaluations take other
  /// branches (ReLU signs, argmaxes, clamps) than the unperturbed point is
  /// retried with the step divided by 10, up to `step_retries` times in all,
  /// and is excluded as a kink if every step crosses one.
  double step = 1e-4;
  int step_retries = 4;
  /// Denominator floor of the relative error |a - n| / max(|a|, |n|, floor),
  /// scaled by max(1, |f|) so it stays in the units of the checked function.
  double floor = 1e-6;
  /// Debug hook: corrupt the backward pass of this op (see Tape::inject_fault).
  std::optional<std::string> fault_op;
};

struct CheckResult {
  std::string name;
  /// Elements compared.
  std::size_t elements = 0;
  /// Elements excluded because every step crossed a kink.
  std::size_t kinks = 0;
  double max_rel_error = 0;
  double threshold = 0;
  /// Location and values of the worst element.
  std::string worst;
  bool passed() const { return elements > 0 && max_rel_error < threshold; }
};

double relative_error(double analytic, double numeric, double floor);

/// A scalar-valued function of the tensors under test. It must build its
/// result from those tensors with the differentiable ops so the tape can
/// record it.
using ScalarFn = std::function<Tensor<double>()>;

/// Elements to probe: (tensor index in `wrt`, flat element index).
using Probe = std::pair<std::size_t, std::size_t>;

/// Compares reverse-mode gradients with central finite differences on the
/// given elements. Each tensor in `wrt` must require a gradient.
CheckResult check(std::string name, const ScalarFn& f, std::vector<Tensor<double>> wrt,
                  const std::vector<Probe>& probes, double threshold, const Options& opt = {});

/// Every element of every tensor in `wrt`.
CheckResult check_all(std::string name, const ScalarFn& f, std::vector<Tensor<double>> wrt,
                      double threshold, const Options& opt = {});

inline constexpr double kOpThreshold = 1e-5;
inline constexpr double kBatchNormThreshold = 1e-4;
inline constexpr double kNetThreshold = 1e-3;

/// Every differentiable op and the three losses on small random inputs.
std::vector<CheckResult> op_suite(std::uint64_t seed, const Options& opt = {});
/// RConv and each encoder block kind plus the decoder block, small widths.
std::vector<CheckResult> block_suite(std::uint64_t seed, const Options& opt = {});
/// Whole Crosslink network plus total loss on a 1x1x64x64 input, checked on
/// `samples` randomly chosen parameter elements.
std::vector<CheckResult> net_suite(std::uint64_t seed, const Options& opt = {},
                                   std::size_t samples = 50);

}  // namespace crosslink::gradcheck
