#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "sonn/tape.hpp"
#include "sonn/tensor.hpp"

namespace sonn::gradcheck {

/// Element-wise |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-6);
double max_relative_error(std::span<const double> analytic, std::span<const double> numeric, double floor = 1e-6);

enum class Fault {
  kNone,
  kFlipSign,  // negates every analytic gradient before comparison
};

struct ComponentResult {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed() const { return max_rel_error <= tolerance; }
};

struct Report {
  std::vector<ComponentResult> components;
  bool passed() const;
  /// Worst error per component name across merged reports.
  void merge(const Report& other);
};

/// Backpropagates loss(tape) into `leaf` and compares against central
/// differences of the same loss with step `eps`.
double check_leaf(const std::function<Tensor(Tape&)>& loss, Tensor leaf, double eps = 1e-5, Fault fault = Fault::kNone);

struct SuiteOptions {
  std::vector<int> q_orders{1, 3, 5, 7, 9};
  bool operational = true;
  bool deformable = true;
  bool primitives = true;  // batch norm, max pool, log_softmax
  bool ctc = true;
  double eps = 1e-5;
  double tolerance = 1e-4;
  double offset_tolerance = 1e-3;
  Fault fault = Fault::kNone;
};

/// Largest absolute difference between a Self-ONN Q=1 layer and a direct
/// nested-loop convolution: outputs and gradients of input, weights, bias.
double q1_equivalence(std::uint64_t seed);

/// Largest absolute difference between a deformable layer with a zeroed
/// offset predictor and a plain convolution with the same weights.
double zero_offset_equivalence(std::uint64_t seed);

/// One randomized instance of every selected component for `seed`.
Report run_suite(std::uint64_t seed, const SuiteOptions& options = {});

}  // namespace sonn::gradcheck
