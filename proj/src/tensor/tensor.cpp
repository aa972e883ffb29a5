#include "mmchat/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

#include "mmchat/errors.hpp"

namespace mmchat {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename Real>
BasicTensor<Real> BasicTensor<Real>::zeros(Shape shape, bool requires_grad) {
  auto impl = std::make_shared<Impl>();
  impl->data.assign(shape_numel(shape), Real(0));
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return BasicTensor(std::move(impl));
}

template <typename Real>
BasicTensor<Real> BasicTensor<Real>::filled(Shape shape, Real value) {
  auto t = zeros(std::move(shape));
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
  return t;
}

template <typename Real>
BasicTensor<Real> BasicTensor<Real>::from_data(Shape shape, std::vector<Real> values,
                                               bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor of shape " + shape_string(shape) + " cannot hold " +
                     std::to_string(values.size()) + " values");
  }
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return BasicTensor(std::move(impl));
}

template <typename Real>
BasicTensor<Real> BasicTensor<Real>::scalar(Real value) {
  return from_data({}, {value});
}

template <typename Real>
BasicTensor<Real> BasicTensor<Real>::meta(Shape shape) {
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->meta = true;
  return BasicTensor(std::move(impl));
}

template <typename Real>
BasicTensor<Real> BasicTensor<Real>::from_impl(std::shared_ptr<Impl> impl) {
  return BasicTensor(std::move(impl));
}

template <typename Real>
const typename BasicTensor<Real>::Impl& BasicTensor<Real>::checked() const {
  if (!impl_) throw Error("use of an undefined tensor");
  return *impl_;
}

template <typename Real>
typename BasicTensor<Real>::Impl& BasicTensor<Real>::checked() {
  if (!impl_) throw Error("use of an undefined tensor");
  return *impl_;
}

template <typename Real>
const Shape& BasicTensor<Real>::shape() const {
  return checked().shape;
}

template <typename Real>
std::size_t BasicTensor<Real>::extent(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw RangeError("axis " + std::to_string(axis) + " out of range for shape " + shape_string(s));
  }
  return s[axis];
}

template <typename Real>
bool BasicTensor<Real>::is_meta() const {
  return checked().meta;
}

template <typename Real>
const char* BasicTensor<Real>::op_name() const {
  return checked().op;
}

template <typename Real>
std::span<const Real> BasicTensor<Real>::data() const {
  const auto& impl = checked();
  if (impl.meta) throw Error("meta tensor " + shape_string(impl.shape) + " has no data");
  return impl.data;
}

template <typename Real>
std::span<Real> BasicTensor<Real>::mutable_data() {
  auto& impl = checked();
  if (impl.meta) throw Error("meta tensor " + shape_string(impl.shape) + " has no data");
  return impl.data;
}

template <typename Real>
Real BasicTensor<Real>::item() const {
  auto d = data();
  if (d.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
  return d[0];
}

template <typename Real>
Real BasicTensor<Real>::at(std::size_t row, std::size_t col) const {
  const auto& s = shape();
  if (s.size() != 2 || row >= s[0] || col >= s[1]) {
    throw RangeError("at(" + std::to_string(row) + ", " + std::to_string(col) + ") on " +
                     shape_string(s));
  }
  return data()[row * s[1] + col];
}

template <typename Real>
bool BasicTensor<Real>::requires_grad() const {
  return checked().requires_grad;
}

template <typename Real>
void BasicTensor<Real>::set_requires_grad(bool value) {
  checked().requires_grad = value;
}

template <typename Real>
bool BasicTensor<Real>::has_grad() const {
  return !checked().grad.empty();
}

template <typename Real>
std::span<const Real> BasicTensor<Real>::grad() const {
  return checked().grad;
}

template <typename Real>
std::span<Real> BasicTensor<Real>::mutable_grad() {
  return checked().grad_buffer();
}

template <typename Real>
void BasicTensor<Real>::zero_grad() {
  auto& impl = checked();
  std::fill(impl.grad.begin(), impl.grad.end(), Real(0));
}

template <typename Real>
void BasicTensor<Real>::clear_grad() {
  auto& impl = checked();
  impl.grad.clear();
  impl.grad.shrink_to_fit();
}

template <typename Real>
BasicTensor<Real> BasicTensor<Real>::clone() const {
  const auto& impl = checked();
  if (impl.meta) return meta(impl.shape);
  auto t = from_data(impl.shape, impl.data);
  t.set_requires_grad(impl.requires_grad);
  return t;
}

template <typename Real>
void BasicTensor<Real>::backward() const {
  if (numel() != 1) {
    throw ShapeError("backward() needs a scalar root, got " + shape_string(shape()));
  }
  BasicGraph<Real> graph(*this);
  graph.backward();
}

template <typename Real>
BasicGraph<Real>::BasicGraph(const BasicTensor<Real>& root) : root_(root.impl()) {
  if (!root_) throw Error("graph root is undefined");
  // Iterative post-order DFS so deep graphs do not exhaust the stack.
  std::unordered_set<Impl*> visited;
  std::vector<std::pair<Impl*, std::size_t>> stack;
  stack.emplace_back(root_.get(), 0);
  visited.insert(root_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Impl* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order_.push_back(node);
      stack.pop_back();
    }
  }
}

template <typename Real>
void BasicGraph<Real>::backward() {
  if (!root_->requires_grad) return;
  auto& seed = root_->grad_buffer();
  std::fill(seed.begin(), seed.end(), Real(1));
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    Impl* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

template <typename Real>
void check_finite(const BasicTensor<Real>& t, const std::string& where) {
  if (t.is_meta()) return;
  auto d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!std::isfinite(d[i])) {
      throw NonFiniteError("non-finite value at flat index " + std::to_string(i) + " of " +
                           shape_string(t.shape()) + " in " + where);
    }
  }
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template class BasicGraph<float>;
template class BasicGraph<double>;
template void check_finite(const BasicTensor<float>&, const std::string&);
template void check_finite(const BasicTensor<double>&, const std::string&);

}  // namespace mmchat
