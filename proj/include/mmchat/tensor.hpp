#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
//
// A tensor is a cheap handle onto shared storage. Values produced by an op are
// never modified afterwards; only leaf parameters are updated in place by the
// optimizer. Each op that sees a grad-requiring input records its parents and a
// backward closure, and BasicGraph replays those closures in reverse
// topological order.
//
// BasicTensor<float> is the production type. BasicTensor<double> mirrors every
// op for gradient checking.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mmchat {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

// Gradient recording is on by default and can be switched off per thread.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

template <typename Real>
struct TensorImpl {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // empty until the first accumulation
  bool requires_grad = false;
  bool meta = false;  // shape-only tensor, no storage
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward;

  // Returns the gradient buffer, allocating zeros on first use.
  std::vector<Real>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), Real(0));
    return grad;
  }
};

}  // namespace detail

template <typename Real>
class BasicTensor {
 public:
  using value_type = Real;
  using Impl = detail::TensorImpl<Real>;

  BasicTensor() = default;

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor filled(Shape shape, Real value);
  static BasicTensor from_data(Shape shape, std::vector<Real> values, bool requires_grad = false);
  static BasicTensor scalar(Real value);
  // Shape-only placeholder; ops propagate shapes through it without arithmetic.
  static BasicTensor meta(Shape shape);
  static BasicTensor from_impl(std::shared_ptr<Impl> impl);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t extent(std::size_t axis) const;
  std::size_t numel() const { return shape_numel(shape()); }
  bool is_meta() const;
  const char* op_name() const;

  std::span<const Real> data() const;
  // Writable view; reserved for initialisation and optimizer updates of leaves.
  std::span<Real> mutable_data();
  Real item() const;
  Real at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  std::span<const Real> grad() const;
  std::span<Real> mutable_grad();
  void zero_grad();
  void clear_grad();

  // Deep copy of the values, detached from any graph.
  BasicTensor clone() const;

  template <typename Other>
  BasicTensor<Other> cast() const {
    if (is_meta()) return BasicTensor<Other>::meta(shape());
    std::vector<Other> out(data().begin(), data().end());
    auto t = BasicTensor<Other>::from_data(shape(), std::move(out));
    t.set_requires_grad(requires_grad());
    return t;
  }

  // Seeds d(self)/d(self) = 1 and runs the recorded graph. Self must be scalar.
  void backward() const;

  const std::shared_ptr<Impl>& impl() const { return impl_; }

 private:
  explicit BasicTensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  const Impl& checked() const;
  Impl& checked();

  std::shared_ptr<Impl> impl_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// Topologically ordered trace of the ops that produced a root tensor.
template <typename Real>
class BasicGraph {
 public:
  using Impl = detail::TensorImpl<Real>;

  explicit BasicGraph(const BasicTensor<Real>& root);

  // Parents precede children.
  const std::vector<Impl*>& order() const { return order_; }
  std::size_t size() const { return order_.size(); }

  // Runs every backward closure once, children before parents.
  // The root gradient is seeded with ones.
  void backward();

 private:
  std::shared_ptr<Impl> root_;
  std::vector<Impl*> order_;
};

using Graph = BasicGraph<float>;

// Throws NonFiniteError naming `where` when any value is NaN or infinite.
template <typename Real>
void check_finite(const BasicTensor<Real>& t, const std::string& where);

}  // namespace mmchat
