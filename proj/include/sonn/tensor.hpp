#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace sonn {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of doubles with an optional gradient buffer.
///
/// Tensor is a shared handle: copies alias the same storage, which is what
/// lets the tape accumulate gradients into the tensors a caller holds.
/// Values are fixed after construction; only parameters are mutated, and
/// only by the optimizer through mutable_data().
class Tensor {
 public:
  Tensor() = default;

  /// Throws std::invalid_argument when the extent product does not match the
  /// data length, an extent is zero, or any value is non-finite.
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  /// Skips the finiteness scan; used for op outputs, which are checked by the
  /// tape in debug builds instead.
  static Tensor from_op(Shape shape, std::vector<double> data, bool requires_grad);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool value);

  bool has_grad() const;
  std::span<const double> grad() const;
  /// Allocates a zeroed gradient buffer on first use. Const because Tensor is
  /// a handle; the gradient lives in shared storage.
  std::span<double> grad_mut() const;
  void zero_grad() const;

  /// Deep copy; the copy does not share storage or gradient.
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Storage {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> impl_;
};

bool all_finite(std::span<const double> values);

}  // namespace sonn
