#include "mmchat/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "mmchat/errors.hpp"

namespace mmchat::ops {

namespace {

template <typename Real>
using Impl = detail::TensorImpl<Real>;
template <typename Real>
using ImplPtr = std::shared_ptr<Impl<Real>>;

template <typename Real>
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using ConstMap = Eigen::Map<const RowMat<Real>>;
template <typename Real>
using MutMap = Eigen::Map<RowMat<Real>>;
template <typename Real>
using ConstStrided = Eigen::Map<const RowMat<Real>, 0, Eigen::OuterStride<>>;
template <typename Real>
using MutStrided = Eigen::Map<RowMat<Real>, 0, Eigen::OuterStride<>>;

template <typename Real>
bool any_meta(std::initializer_list<const BasicTensor<Real>*> inputs) {
  for (const auto* t : inputs) {
    if (t->is_meta()) return true;
  }
  return false;
}

template <typename Real>
bool wants_grad(const BasicTensor<Real>& t) {
  return t.requires_grad();
}

// Allocates the output node and wires parents when gradients are tracked.
template <typename Real>
ImplPtr<Real> make_node(Shape shape, std::vector<ImplPtr<Real>> inputs, const char* op) {
  auto node = std::make_shared<Impl<Real>>();
  node->data.assign(shape_numel(shape), Real(0));
  node->shape = std::move(shape);
  node->op = op;
  if (grad_enabled()) {
    bool track = false;
    for (const auto& in : inputs) track = track || in->requires_grad;
    if (track) {
      node->requires_grad = true;
      node->parents = std::move(inputs);
    }
  }
  return node;
}

template <typename Real>
BasicTensor<Real> finish(ImplPtr<Real> node) {
  auto out = BasicTensor<Real>::from_impl(std::move(node));
#if defined(MMCHAT_CHECK_FINITE) || !defined(NDEBUG)
  check_finite(out, out.op_name());
#endif
  return out;
}

template <typename Real>
void require_rank(const BasicTensor<Real>& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_string(t.shape()));
  }
}

template <typename Real>
void require_same_shape(const BasicTensor<Real>& a, const BasicTensor<Real>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

// Splits a shape around `axis` into (outer, extent, inner) element counts.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluCubic = 0.044715;

}  // namespace

template <typename Real>
BasicTensor<Real> matmul(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
    throw ShapeError("matmul: cannot multiply " + shape_string(a.shape()) + " by " +
                     shape_string(b.shape()));
  }
  const auto m = a.extent(0), k = a.extent(1), n = b.extent(1);
  if (any_meta({&a, &b})) return BasicTensor<Real>::meta({m, n});

  auto node = make_node<Real>({m, n}, {a.impl(), b.impl()}, "matmul");
  const Eigen::Index M = m, K = k, N = n;
  MutMap<Real>(node->data.data(), M, N).noalias() =
      ConstMap<Real>(a.data().data(), M, K) * ConstMap<Real>(b.data().data(), K, N);

  if (node->requires_grad) {
    node->backward = [M, K, N](Impl<Real>& self) {
      auto& pa = *self.parents[0];
      auto& pb = *self.parents[1];
      ConstMap<Real> g(self.grad.data(), M, N);
      if (pa.requires_grad) {
        MutMap<Real>(pa.grad_buffer().data(), M, K).noalias() +=
            g * ConstMap<Real>(pb.data.data(), K, N).transpose();
      }
      if (pb.requires_grad) {
        MutMap<Real>(pb.grad_buffer().data(), K, N).noalias() +=
            ConstMap<Real>(pa.data.data(), M, K).transpose() * g;
      }
    };
  }
  return finish<Real>(std::move(node));
}

template <typename Real>
BasicTensor<Real> add(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  require_same_shape(a, b, "add");
  if (any_meta({&a, &b})) return BasicTensor<Real>::meta(a.shape());
  auto node = make_node<Real>(a.shape(), {a.impl(), b.impl()}, "add");
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < node->data.size(); ++i) node->data[i] = x[i] + y[i];
  if (node->requires_grad) {
    node->backward = [](Impl<Real>& self) {
      for (auto& parent : self.parents) {
        if (!parent->requires_grad) continue;
        auto& g = parent->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
    };
  }
  return finish<Real>(std::move(node));
}

template <typename Real>
BasicTensor<Real> mul(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  require_same_shape(a, b, "mul");
  if (any_meta({&a, &b})) return BasicTensor<Real>::meta(a.shape());
  auto node = make_node<Real>(a.shape(), {a.impl(), b.impl()}, "mul");
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < node->data.size(); ++i) node->data[i] = x[i] * y[i];
  if (node->requires_grad) {
    node->backward = [](Impl<Real>& self) {
      auto& pa = *self.parents[0];
      auto& pb = *self.parents[1];
      if (pa.requires_grad) {
        auto& g = pa.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.data[i];
      }
      if (pb.requires_grad) {
        auto& g = pb.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.data[i];
      }
    };
  }
  return finish<Real>(std::move(node));
}

template <typename Real>
BasicTensor<Real> scale(const BasicTensor<Real>& x, double factor) {
  if (x.is_meta()) return BasicTensor<Real>::meta(x.shape());
  auto node = make_node<Real>(x.shape(), {x.impl()}, "scale");
  const Real f = static_cast<Real>(factor);
  auto in = x.data();
  for (std::size_t i = 0; i < node->data.size(); ++i) node->data[i] = in[i] * f;
  if (node->requires_grad) {
    node->backward = [f](Impl<Real>& self) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * f;
    };
  }
  return finish<Real>(std::move(node));
}

template <typename Real>
BasicTensor<Real> add_row(const BasicTensor<Real>& x, const BasicTensor<Real>& row) {
  require_rank(row, 1, "add_row");
  if (x.rank() == 0 || x.shape().back() != row.extent(0)) {
    throw ShapeError("add_row: cannot broadcast " + shape_string(row.shape()) + " over " +
                     shape_string(x.shape()));
  }
  if (any_meta({&x, &row})) return BasicTensor<Real>::meta(x.shape());
  auto node = make_node<Real>(x.shape(), {x.impl(), row.impl()}, "add_row");
  const std::size_t d = row.extent(0);
  const std::size_t rows = x.numel() / d;
  auto in = x.data();
  auto r = row.data();
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < d; ++j) node->data[i * d + j] = in[i * d + j] + r[j];
  }
  if (node->requires_grad) {
    node->backward = [rows, d](Impl<Real>& self) {
      auto& px = *self.parents[0];
      auto& pr = *self.parents[1];
      if (px.requires_grad) {
        auto& g = px.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
      if (pr.requires_grad) {
        auto& g = pr.grad_buffer();
        for (std::size_t i = 0; i < rows; ++i) {
          for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[i * d + j];
        }
      }
    };
  }
  return finish<Real>(std::move(node));
}

template <typename Real>
BasicTensor<Real> transpose(const BasicTensor<Real>& x) {
  require_rank(x, 2, "transpose");
  const auto m = x.extent(0), n = x.extent(1);
  if (x.is_meta()) return BasicTensor<Real>::meta({n, m});
  auto node = make_node<Real>({n, m}, {x.impl()}, "transpose");
  auto in = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) node->data[j * m + i] = in[i * n + j];
  }
  if (node->requires_grad) {
    node->backward = [m, n](Impl<Real>& self) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
      }
    };
  }
  return finish<Real>(std::move(node));
}

template <typename Real>
BasicTensor<Real> reshape(const BasicTensor<Real>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_string(x.shape()) + " cannot become " +
                     shape_string(shape));
  }
  if (x.is_meta()) return BasicTensor<Real>::meta(std::move(shape));
  auto node = make_node<Real>(std::move(shape), {x.impl()}, "reshape");
  auto in = x.data();
  std::copy(in.begin(), in.end(), node->data.begin());
  if (node->requires_grad) {
    node->backward = [](Impl<Real>& self) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    };
  }
  return finish<Real>(std::move(node));
}

template <typename Real>
BasicTensor<Real> softmax(const BasicTensor<Real>& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw RangeError("softmax: axis " + std::to_string(axis) + " out of range for " +
                     shape_string(x.shape()));
  }
  if (x.extent(axis) == 0) throw ShapeError("softmax: empty axis in " + shape_string(x.shape()));
  if (x.is_meta()) return BasicTensor<Real>::meta(x.shape());
  const auto s = split_at(x.shape(), axis);
  auto node = make_node<Real>(x.shape(), {x.impl()}, "softmax");
  auto in = x.data();
  auto& out = node->data;
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      Real mx = in[base];
      for (std::size_t k = 1; k < s.extent; ++k) mx = std::max(mx, in[base + k * s.inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < s.extent; ++k) {
        const Real e = std::exp(in[base + k * s.inner] - mx);
        out[base + k * s.inner] = e;
        total += e;
      }
      const Real inv = static_cast<Real>(1.0 / total);
      for (std::size_t k = 0; k < s.extent; ++k) out[base + k * s.inner] *= inv;
    }
  }
  if (node->requires_grad) {
    node->backward = [s](Impl<Real>& self) {
      auto& g = self.parents[0]->grad_buffer();
      const auto& y = self.data;
      const auto& dy = self.grad;
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
          const std::size_t base = o * s.extent * s.inner + i;
          double dot = 0.0;
          for (std::size_t k = 0; k < s.extent; ++k) {
            const std::size_t at = base + k * s.inner;
            dot += static_cast<double>(dy[at]) * y[at];
          }
          for (std::size_t k = 0; k < s.extent; ++k) {
            const std::size_t at = base + k * s.inner;
            g[at] += y[at] * static_cast<Real>(dy[at] - dot);
          }
        }
      }
    };
  }
  return finish<Real>(std::move(node));
}

template <typename Real>
BasicTensor<Real> layer_norm(const BasicTensor<Real>& x, const BasicTensor<Real>& gain,
                             const BasicTensor<Real>& bias, double eps) {
  require_rank(gain, 1, "layer_norm");
  require_rank(bias, 1, "layer_norm");
  if (x.rank() == 0 || x.shape().back() != gain.extent(0) || gain.shape() != bias.shape()) {
    throw ShapeError("layer_norm: input " + shape_string(x.shape()) + " with gain " +
                     shape_string(gain.shape()) + " and bias " + shape_string(bias.shape()));
  }
  if (any_meta({&x, &gain, &bias})) return BasicTensor<Real>::meta(x.shape());
  const std::size_t d = gain.extent(0);
  const std::size_t rows = x.numel() / d;
  auto node = make_node<Real>(x.shape(), {x.impl(), gain.impl(), bias.impl()}, "layer_norm");
  auto in = x.data();
  auto gv = gain.data();
  auto bv = bias.data();
  std::vector<Real> xhat(x.numel());
  std::vector<Real> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* row = in.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    rstd[r] = static_cast<Real>(inv);
    for (std::size_t j = 0; j < d; ++j) {
      const Real h = static_cast<Real>((row[j] - mean) * inv);
      xhat[r * d + j] = h;
      node->data[r * d + j] = h * gv[j] + bv[j];
    }
  }
  if (node->requires_grad) {
    node->backward = [rows, d, xhat = std::move(xhat), rstd = std::move(rstd)](Impl<Real>& self) {
      auto& px = *self.parents[0];
      auto& pg = *self.parents[1];
      auto& pb = *self.parents[2];
      const auto& dy = self.grad;
      if (pg.requires_grad) {
        auto& g = pg.grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < d; ++j) g[j] += dy[r * d + j] * xhat[r * d + j];
        }
      }
      if (pb.requires_grad) {
        auto& g = pb.grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < d; ++j) g[j] += dy[r * d + j];
        }
      }
      if (px.requires_grad) {
        auto& g = px.grad_buffer();
        const auto& gain_v = pg.data;
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_dh = 0.0, mean_dh_h = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dh = static_cast<double>(dy[r * d + j]) * gain_v[j];
            mean_dh += dh;
            mean_dh_h += dh * xhat[r * d + j];
          }
          mean_dh /= static_cast<double>(d);
          mean_dh_h /= static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const double dh = static_cast<double>(dy[r * d + j]) * gain_v[j];
            g[r * d + j] +=
                static_cast<Real>(rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h));
          }
        }
      }
    };
  }
  return finish<Real>(std::move(node));
}

template <typename Real>
BasicTensor<Real> gelu(const BasicTensor<Real>& x) {
  if (x.is_meta()) return BasicTensor<Real>::meta(x.shape());
  auto node = make_node<Real>(x.shape(), {x.impl()}, "gelu");
  auto in = x.data();
  for (std::size_t i = 0; i < in.size(); ++i) {
    const Real v = in[i];
    const Real t = std::tanh(Real(kGeluScale) * (v + Real(kGeluCubic) * v * v * v));
    node->data[i] = Real(0.5) * v * (Real(1) + t);
  }
  if (node->requires_grad) {
    node->backward = [](Impl<Real>& self) {
      auto& px = *self.parents[0];
      auto& g = px.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const Real v = px.data[i];
        const Real t = std::tanh(Real(kGeluScale) * (v + Real(kGeluCubic) * v * v * v));
        const Real dt = Real(kGeluScale) * (Real(1) + Real(3 * kGeluCubic) * v * v);
        const Real d = Real(0.5) * (Real(1) + t) + Real(0.5) * v * (Real(1) - t * t) * dt;
        g[i] += self.grad[i] * d;
      }
    };
  }
  return finish<Real>(std::move(node));
}

template <typename Real>
BasicTensor<Real> embed(const BasicTensor<Real>& table, std::span<const std::int32_t> ids) {
  require_rank(table, 2, "embed");
  const std::size_t vocab = table.extent(0), d = table.extent(1);
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw RangeError("embed: id " + std::to_string(id) + " outside table of " +
                       std::to_string(vocab) + " rows");
    }
  }
  if (table.is_meta()) return BasicTensor<Real>::meta({ids.size(), d});
  auto node = make_node<Real>({ids.size(), d}, {table.impl()}, "embed");
  auto tv = table.data();
  for (std::size_t t = 0; t < ids.size(); ++t) {
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[t]) * d, d, node->data.data() + t * d);
  }
  if (node->requires_grad) {
    std::vector<std::int32_t> saved(ids.begin(), ids.end());
    node->backward = [d, saved = std::move(saved)](Impl<Real>& self) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t t = 0; t < saved.size(); ++t) {
        Real* dst = g.data() + static_cast<std::size_t>(saved[t]) * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += self.grad[t * d + j];
      }
    };
  }
  return finish<Real>(std::move(node));
}

template <typename Real>
BasicTensor<Real> concat(const std::vector<BasicTensor<Real>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) {
    throw RangeError("concat: axis " + std::to_string(axis) + " out of range for " +
                     shape_string(first));
  }
  Shape out_shape = first;
  out_shape[axis] = 0;
  bool meta = false;
  std::vector<ImplPtr<Real>> inputs;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) {
      throw ShapeError("concat: " + shape_string(s) + " incompatible with " +
                       shape_string(first) + " along axis " + std::to_string(axis));
    }
    out_shape[axis] += s[axis];
    meta = meta || p.is_meta();
    inputs.push_back(p.impl());
  }
  if (meta) return BasicTensor<Real>::meta(out_shape);

  const auto total = split_at(out_shape, axis);
  std::vector<std::size_t> chunk;  // elements per outer index for each part
  for (const auto& p : parts) chunk.push_back(p.extent(axis) * total.inner);
  const std::size_t out_chunk = total.extent * total.inner;

  auto node = make_node<Real>(out_shape, std::move(inputs), "concat");
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    auto src = parts[p].data();
    for (std::size_t o = 0; o < total.outer; ++o) {
      std::copy_n(src.data() + o * chunk[p], chunk[p], node->data.data() + o * out_chunk + offset);
    }
    offset += chunk[p];
  }
  if (node->requires_grad) {
    node->backward = [chunk = std::move(chunk), out_chunk, outer = total.outer](Impl<Real>& self) {
      std::size_t off = 0;
      for (std::size_t p = 0; p < self.parents.size(); ++p) {
        auto& parent = *self.parents[p];
        if (parent.requires_grad) {
          auto& g = parent.grad_buffer();
          for (std::size_t o = 0; o < outer; ++o) {
            const Real* src = self.grad.data() + o * out_chunk + off;
            Real* dst = g.data() + o * chunk[p];
            for (std::size_t i = 0; i < chunk[p]; ++i) dst[i] += src[i];
          }
        }
        off += chunk[p];
      }
    };
  }
  return finish<Real>(std::move(node));
}

namespace {

// Visits every contiguous last-axis run of a slice, passing (input offset,
// output offset, run length).
template <typename Fn>
void for_each_slice_run(const Shape& in_shape, const std::vector<Range>& ranges, Fn&& fn) {
  const std::size_t rank = in_shape.size();
  std::vector<std::size_t> stride(rank, 1);
  for (std::size_t i = rank - 1; i > 0; --i) stride[i - 1] = stride[i] * in_shape[i];
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = ranges[i].second - ranges[i].first;
  if (shape_numel(out_shape) == 0) return;
  const std::size_t run = out_shape[rank - 1];
  std::vector<std::size_t> idx(rank, 0);
  std::size_t out_off = 0;
  while (true) {
    std::size_t in_off = ranges[rank - 1].first;
    for (std::size_t i = 0; i + 1 < rank; ++i) in_off += (ranges[i].first + idx[i]) * stride[i];
    fn(in_off, out_off, run);
    out_off += run;
    std::size_t axis = rank - 1;
    while (axis > 0) {
      --axis;
      if (++idx[axis] < out_shape[axis]) break;
      idx[axis] = 0;
      if (axis == 0) return;
    }
    if (rank == 1) return;
  }
}

}  // namespace

template <typename Real>
BasicTensor<Real> slice(const BasicTensor<Real>& x, const std::vector<Range>& ranges) {
  const Shape& s = x.shape();
  if (ranges.size() != s.size() || s.empty()) {
    throw RangeError("slice: " + std::to_string(ranges.size()) + " ranges for shape " +
                     shape_string(s));
  }
  Shape out_shape(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (ranges[i].first > ranges[i].second || ranges[i].second > s[i]) {
      throw RangeError("slice: range [" + std::to_string(ranges[i].first) + ", " +
                       std::to_string(ranges[i].second) + ") out of bounds on axis " +
                       std::to_string(i) + " of " + shape_string(s));
    }
    out_shape[i] = ranges[i].second - ranges[i].first;
  }
  if (x.is_meta()) return BasicTensor<Real>::meta(out_shape);
  auto node = make_node<Real>(out_shape, {x.impl()}, "slice");
  auto in = x.data();
  for_each_slice_run(s, ranges, [&](std::size_t io, std::size_t oo, std::size_t n) {
    std::copy_n(in.data() + io, n, node->data.data() + oo);
  });
  if (node->requires_grad) {
    node->backward = [s, ranges](Impl<Real>& self) {
      auto& g = self.parents[0]->grad_buffer();
      for_each_slice_run(s, ranges, [&](std::size_t io, std::size_t oo, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) g[io + i] += self.grad[oo + i];
      });
    };
  }
  return finish<Real>(std::move(node));
}

template <typename Real>
BasicTensor<Real> rope(const BasicTensor<Real>& x, std::size_t heads, std::size_t offset,
                       double base) {
  require_rank(x, 2, "rope");
  const std::size_t t_len = x.extent(0), d = x.extent(1);
  if (heads == 0 || d % heads != 0 || (d / heads) % 2 != 0) {
    throw ShapeError("rope: width " + std::to_string(d) + " does not split into " +
                     std::to_string(heads) + " even-sized heads");
  }
  if (x.is_meta()) return BasicTensor<Real>::meta(x.shape());
  const std::size_t hd = d / heads, half = hd / 2;
  std::vector<Real> cosv(t_len * half), sinv(t_len * half);
  for (std::size_t t = 0; t < t_len; ++t) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
      const double angle = static_cast<double>(offset + t) * freq;
      cosv[t * half + i] = static_cast<Real>(std::cos(angle));
      sinv[t * half + i] = static_cast<Real>(std::sin(angle));
    }
  }
  auto node = make_node<Real>(x.shape(), {x.impl()}, "rope");
  auto in = x.data();
  for (std::size_t t = 0; t < t_len; ++t) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < half; ++i) {
        const std::size_t at = t * d + h * hd + 2 * i;
        const Real c = cosv[t * half + i], sn = sinv[t * half + i];
        node->data[at] = in[at] * c - in[at + 1] * sn;
        node->data[at + 1] = in[at] * sn + in[at + 1] * c;
      }
    }
  }
  if (node->requires_grad) {
    node->backward = [t_len, d, heads, hd, half, cosv = std::move(cosv),
                      sinv = std::move(sinv)](Impl<Real>& self) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t t = 0; t < t_len; ++t) {
        for (std::size_t h = 0; h < heads; ++h) {
          for (std::size_t i = 0; i < half; ++i) {
            const std::size_t at = t * d + h * hd + 2 * i;
            const Real c = cosv[t * half + i], sn = sinv[t * half + i];
            g[at] += self.grad[at] * c + self.grad[at + 1] * sn;
            g[at + 1] += -self.grad[at] * sn + self.grad[at + 1] * c;
          }
        }
      }
    };
  }
  return finish<Real>(std::move(node));
}

template <typename Real>
BasicTensor<Real> attention(const BasicTensor<Real>& q, const BasicTensor<Real>& k,
                            const BasicTensor<Real>& v, std::size_t heads, bool causal) {
  require_rank(q, 2, "attention");
  require_rank(k, 2, "attention");
  require_rank(v, 2, "attention");
  const std::size_t tq = q.extent(0), tk = k.extent(0), d = q.extent(1);
  if (k.shape() != v.shape() || k.extent(1) != d || heads == 0 || d % heads != 0) {
    throw ShapeError("attention: q " + shape_string(q.shape()) + ", k " +
                     shape_string(k.shape()) + ", v " + shape_string(v.shape()) + " with " +
                     std::to_string(heads) + " heads");
  }
  if (causal && tk < tq) {
    throw ShapeError("attention: causal mode needs at least as many keys as queries");
  }
  if (tk == 0) throw ShapeError("attention: no keys");
  if (any_meta({&q, &k, &v})) return BasicTensor<Real>::meta({tq, d});

  const Eigen::Index TQ = tq, TK = tk, D = d, HD = d / heads;
  const std::size_t shift = causal ? tk - tq : 0;
  const Real inv_sqrt = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(HD)));
  auto node = make_node<Real>({tq, d}, {q.impl(), k.impl(), v.impl()}, "attention");
  std::vector<Real> probs(heads * tq * tk, Real(0));
  RowMat<Real> scores(TQ, TK);
  for (std::size_t h = 0; h < heads; ++h) {
    const Eigen::Index col = static_cast<Eigen::Index>(h) * HD;
    ConstStrided<Real> qh(q.data().data() + col, TQ, HD, Eigen::OuterStride<>(D));
    ConstStrided<Real> kh(k.data().data() + col, TK, HD, Eigen::OuterStride<>(D));
    ConstStrided<Real> vh(v.data().data() + col, TK, HD, Eigen::OuterStride<>(D));
    scores.noalias() = qh * kh.transpose();
    MutMap<Real> p(probs.data() + h * tq * tk, TQ, TK);
    for (Eigen::Index i = 0; i < TQ; ++i) {
      const Eigen::Index limit = causal ? static_cast<Eigen::Index>(shift) + i + 1 : TK;
      Real mx = -std::numeric_limits<Real>::infinity();
      for (Eigen::Index j = 0; j < limit; ++j) mx = std::max(mx, scores(i, j) * inv_sqrt);
      double total = 0.0;
      for (Eigen::Index j = 0; j < limit; ++j) {
        const Real e = std::exp(scores(i, j) * inv_sqrt - mx);
        p(i, j) = e;
        total += e;
      }
      const Real inv = static_cast<Real>(1.0 / total);
      for (Eigen::Index j = 0; j < limit; ++j) p(i, j) *= inv;
    }
    MutStrided<Real>(node->data.data() + col, TQ, HD, Eigen::OuterStride<>(D)).noalias() = p * vh;
  }
  if (node->requires_grad) {
    node->backward = [TQ, TK, D, HD, heads, inv_sqrt, probs = std::move(probs)](Impl<Real>& self) {
      auto& pq = *self.parents[0];
      auto& pk = *self.parents[1];
      auto& pv = *self.parents[2];
      RowMat<Real> dp(TQ, TK);
      for (std::size_t h = 0; h < heads; ++h) {
        const Eigen::Index col = static_cast<Eigen::Index>(h) * HD;
        ConstMap<Real> p(probs.data() + h * TQ * TK, TQ, TK);
        ConstStrided<Real> dout(self.grad.data() + col, TQ, HD, Eigen::OuterStride<>(D));
        ConstStrided<Real> qh(pq.data.data() + col, TQ, HD, Eigen::OuterStride<>(D));
        ConstStrided<Real> kh(pk.data.data() + col, TK, HD, Eigen::OuterStride<>(D));
        ConstStrided<Real> vh(pv.data.data() + col, TK, HD, Eigen::OuterStride<>(D));
        if (pv.requires_grad) {
          MutStrided<Real>(pv.grad_buffer().data() + col, TK, HD, Eigen::OuterStride<>(D))
              .noalias() += p.transpose() * dout;
        }
        if (!pq.requires_grad && !pk.requires_grad) continue;
        dp.noalias() = dout * vh.transpose();
        for (Eigen::Index i = 0; i < TQ; ++i) {
          double dot = 0.0;
          for (Eigen::Index j = 0; j < TK; ++j) dot += static_cast<double>(dp(i, j)) * p(i, j);
          for (Eigen::Index j = 0; j < TK; ++j) {
            dp(i, j) = p(i, j) * static_cast<Real>(dp(i, j) - dot) * inv_sqrt;
          }
        }
        if (pq.requires_grad) {
          MutStrided<Real>(pq.grad_buffer().data() + col, TQ, HD, Eigen::OuterStride<>(D))
              .noalias() += dp * kh;
        }
        if (pk.requires_grad) {
          MutStrided<Real>(pk.grad_buffer().data() + col, TK, HD, Eigen::OuterStride<>(D))
              .noalias() += dp.transpose() * qh;
        }
      }
    };
  }
  return finish<Real>(std::move(node));
}

template <typename Real>
BasicTensor<Real> masked_cross_entropy(const BasicTensor<Real>& logits,
                                       std::span<const std::int32_t> targets,
                                       std::span<const std::uint8_t> mask) {
  require_rank(logits, 2, "masked_cross_entropy");
  const std::size_t t_len = logits.extent(0), vocab = logits.extent(1);
  if (targets.size() != t_len || mask.size() != t_len) {
    throw ShapeError("masked_cross_entropy: logits " + shape_string(logits.shape()) + " with " +
                     std::to_string(targets.size()) + " targets and " +
                     std::to_string(mask.size()) + " mask flags");
  }
  std::vector<std::size_t> rows;
  for (std::size_t t = 0; t < t_len; ++t) {
    if (!mask[t]) continue;
    if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= vocab) {
      throw RangeError("masked_cross_entropy: target " + std::to_string(targets[t]) +
                       " at position " + std::to_string(t) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
    rows.push_back(t);
  }
  if (rows.empty()) throw EmptyLossError("masked_cross_entropy: mask selects no positions");
  if (logits.is_meta()) return BasicTensor<Real>::meta({});

  auto node = make_node<Real>({}, {logits.impl()}, "masked_cross_entropy");
  auto lv = logits.data();
  std::vector<double> lse(rows.size());
  std::vector<std::int32_t> picked(rows.size());
  double total = 0.0;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const Real* row = lv.data() + rows[r] * vocab;
    const Real mx = *std::max_element(row, row + vocab);
    double s = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) s += std::exp(static_cast<double>(row[j] - mx));
    lse[r] = static_cast<double>(mx) + std::log(s);
    picked[r] = targets[rows[r]];
    total += lse[r] - static_cast<double>(row[picked[r]]);
  }
  const double count = static_cast<double>(rows.size());
  node->data[0] = static_cast<Real>(total / count);
  if (node->requires_grad) {
    node->backward = [vocab, count, rows = std::move(rows), lse = std::move(lse),
                      picked = std::move(picked)](Impl<Real>& self) {
      auto& px = *self.parents[0];
      auto& g = px.grad_buffer();
      const double upstream = static_cast<double>(self.grad[0]) / count;
      for (std::size_t r = 0; r < rows.size(); ++r) {
        const Real* row = px.data.data() + rows[r] * vocab;
        Real* dst = g.data() + rows[r] * vocab;
        for (std::size_t j = 0; j < vocab; ++j) {
          dst[j] += static_cast<Real>(std::exp(static_cast<double>(row[j]) - lse[r]) * upstream);
        }
        dst[picked[r]] -= static_cast<Real>(upstream);
      }
    };
  }
  return finish<Real>(std::move(node));
}

template <typename Real>
BasicTensor<Real> sum(const BasicTensor<Real>& x) {
  if (x.is_meta()) return BasicTensor<Real>::meta({});
  auto node = make_node<Real>({}, {x.impl()}, "sum");
  double total = 0.0;
  for (auto v : x.data()) total += v;
  node->data[0] = static_cast<Real>(total);
  if (node->requires_grad) {
    node->backward = [](Impl<Real>& self) {
      auto& g = self.parents[0]->grad_buffer();
      for (auto& e : g) e += self.grad[0];
    };
  }
  return finish<Real>(std::move(node));
}

#define MMCHAT_INSTANTIATE_OPS(R)                                                                \
  template BasicTensor<R> matmul(const BasicTensor<R>&, const BasicTensor<R>&);                  \
  template BasicTensor<R> add(const BasicTensor<R>&, const BasicTensor<R>&);                     \
  template BasicTensor<R> mul(const BasicTensor<R>&, const BasicTensor<R>&);                     \
  template BasicTensor<R> scale(const BasicTensor<R>&, double);                                  \
  template BasicTensor<R> add_row(const BasicTensor<R>&, const BasicTensor<R>&);                 \
  template BasicTensor<R> transpose(const BasicTensor<R>&);                                      \
  template BasicTensor<R> reshape(const BasicTensor<R>&, Shape);                                 \
  template BasicTensor<R> softmax(const BasicTensor<R>&, std::size_t);                           \
  template BasicTensor<R> layer_norm(const BasicTensor<R>&, const BasicTensor<R>&,               \
                                     const BasicTensor<R>&, double);                             \
  template BasicTensor<R> gelu(const BasicTensor<R>&);                                           \
  template BasicTensor<R> embed(const BasicTensor<R>&, std::span<const std::int32_t>);           \
  template BasicTensor<R> concat(const std::vector<BasicTensor<R>>&, std::size_t);               \
  template BasicTensor<R> slice(const BasicTensor<R>&, const std::vector<Range>&);               \
  template BasicTensor<R> rope(const BasicTensor<R>&, std::size_t, std::size_t, double);         \
  template BasicTensor<R> attention(const BasicTensor<R>&, const BasicTensor<R>&,                \
                                    const BasicTensor<R>&, std::size_t, bool);                   \
  template BasicTensor<R> masked_cross_entropy(const BasicTensor<R>&,                            \
                                               std::span<const std::int32_t>,                    \
                                               std::span<const std::uint8_t>);                   \
  template BasicTensor<R> sum(const BasicTensor<R>&);

MMCHAT_INSTANTIATE_OPS(float)
MMCHAT_INSTANTIATE_OPS(double)

#undef MMCHAT_INSTANTIATE_OPS

}  // namespace mmchat::ops
