#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "formed/common.hpp"

namespace formed {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

template <typename Real>
class Tape;
template <typename Real>
struct Parameter;

/// Immutable n-dimensional array of reals, row-major. Values are shared
/// between copies; nothing mutates a tensor after construction (the optimizer
/// goes through Parameter, which copies-on-write). Construction is the op
/// boundary: it rejects non-finite values and shape/length mismatches.
template <typename Real>
class Tensor {
 public:
  Tensor() : Tensor(Shape{}, std::vector<Real>{Real(0)}) {}

  Tensor(Shape shape, std::vector<Real> data, int node = -1)
      : Tensor(std::move(shape),
               std::make_shared<std::vector<Real>>(std::move(data)), node) {}

  Tensor(Shape shape, std::shared_ptr<std::vector<Real>> data, int node = -1)
      : shape_(std::move(shape)), data_(std::move(data)), node_(node) {
    if (!data_) throw Error("tensor: null data");
    if (shape_size(shape_) != data_->size())
      throw ShapeError("tensor: shape " + shape_str(shape_) + " wants " +
                       std::to_string(shape_size(shape_)) + " values, got " +
                       std::to_string(data_->size()));
    for (Real v : *data_)
      if (!std::isfinite(double(v)))
        throw Error("tensor: non-finite value encountered");
  }

  static Tensor zeros(Shape shape) {
    std::size_t n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<Real>(n, Real(0)));
  }

  static Tensor full(Shape shape, Real v) {
    std::size_t n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<Real>(n, v));
  }

  static Tensor scalar(Real v) { return Tensor(Shape{}, std::vector<Real>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_->size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

  const std::vector<Real>& values() const { return *data_; }
  std::shared_ptr<const std::vector<Real>> share() const { return data_; }

  Real operator[](std::size_t i) const { return (*data_)[i]; }

  /// Single value of a size-1 tensor.
  Real item() const {
    if (size() != 1) throw ShapeError("item(): tensor has size != 1");
    return (*data_)[0];
  }

  /// Tape node id, or -1 when not recorded. requires_grad in the spec sense.
  int node() const { return node_; }
  bool requires_grad() const { return node_ >= 0; }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<Real>> data_;
  int node_ = -1;

  friend struct Parameter<Real>;
};

/// Reverse-mode gradient tape. One tape per training step, confined to the
/// thread that created it; ops record themselves onto the active tape when any
/// input is tracked. Node ids grow in program order, so walking ids backwards
/// is a valid topological order for backpropagation.
template <typename Real>
class Tape {
 public:
  using BackFn = std::function<void(Tape&, const std::vector<Real>&)>;

  Tape() {
    if (current_)
      throw Error("gradient tape already active on this thread");
    current_ = this;
  }
  ~Tape() { current_ = nullptr; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() noexcept { return current_; }

  /// Leaf node for a trainable parameter; reused on repeated use so gradients
  /// from every use site accumulate into one buffer.
  int leaf(Parameter<Real>& p) {
    auto it = leaf_index_.find(&p);
    if (it != leaf_index_.end()) return it->second;
    nodes_.push_back(Node{nullptr, &p});
    int id = int(nodes_.size()) - 1;
    leaf_index_.emplace(&p, id);
    return id;
  }

  int record(BackFn back) {
    nodes_.push_back(Node{std::move(back), nullptr});
    return int(nodes_.size()) - 1;
  }

  /// Gradient buffer of a node, zero-initialized to `size` on first touch.
  std::vector<Real>& grad(int node, std::size_t size) {
    auto& g = grads_[std::size_t(node)];
    if (g.empty()) g.assign(size, Real(0));
    else if (g.size() != size)
      throw ShapeError("tape: gradient size mismatch");
    return g;
  }

  /// Backpropagate from a scalar loss; accumulates into Parameter::grad of
  /// every reachable trainable parameter.
  void backward(const Tensor<Real>& loss) {
    if (loss.size() != 1)
      throw ShapeError("backward: loss must be a scalar");
    if (loss.node() < 0)
      throw Error("backward: loss is not connected to recorded operations");
    grads_.assign(nodes_.size(), {});
    grads_[std::size_t(loss.node())] = {Real(1)};
    for (int id = loss.node(); id >= 0; --id) {
      auto& g = grads_[std::size_t(id)];
      if (g.empty()) continue;
      Node& n = nodes_[std::size_t(id)];
      if (n.back) n.back(*this, g);
      if (n.param) accumulate_param(*n.param, g);
      std::vector<Real>().swap(g);
    }
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    BackFn back;
    Parameter<Real>* param;
  };

  static void accumulate_param(Parameter<Real>& p, const std::vector<Real>& g);

  std::vector<Node> nodes_;
  std::vector<std::vector<Real>> grads_;
  std::unordered_map<const Parameter<Real>*, int> leaf_index_;

  inline static thread_local Tape* current_ = nullptr;
};

/// A named, optionally trainable weight. Frozen parameters never receive
/// gradients and are never touched by the optimizer.
template <typename Real>
struct Parameter {
  Tensor<Real> value;
  std::vector<Real> grad;
  bool trainable = true;

  Parameter() : value(), grad(1, Real(0)) {}
  explicit Parameter(Tensor<Real> v, bool trainable_ = true)
      : value(std::move(v)), grad(value.size(), Real(0)), trainable(trainable_) {}

  std::size_t size() const { return value.size(); }
  const Shape& shape() const { return value.shape(); }

  /// Tensor view for building ops: tape-tracked iff trainable and a tape is
  /// active on this thread.
  Tensor<Real> use() {
    Tensor<Real> t = value;
    t.node_ = -1;
    if (trainable) {
      if (Tape<Real>* tape = Tape<Real>::current()) t.node_ = tape->leaf(*this);
    }
    return t;
  }

  void zero_grad() { std::fill(grad.begin(), grad.end(), Real(0)); }

  /// Mutable storage for optimizer updates. Copies first if any tensor still
  /// shares the buffer, so outstanding tensors stay immutable.
  std::vector<Real>& mutable_values() {
    if (value.data_.use_count() > 1)
      value.data_ = std::make_shared<std::vector<Real>>(*value.data_);
    return *value.data_;
  }

  /// Replace the stored values (same shape), e.g. when restoring a snapshot.
  void assign(const std::vector<Real>& data) {
    if (data.size() != value.size())
      throw ShapeError("parameter assign: size mismatch");
    mutable_values() = data;
  }
};

template <typename Real>
void Tape<Real>::accumulate_param(Parameter<Real>& p,
                                  const std::vector<Real>& g) {
  if (g.size() != p.grad.size())
    throw ShapeError("tape: parameter gradient size mismatch");
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!std::isfinite(double(g[i])))
      throw Error("backward: non-finite gradient");
    p.grad[i] += g[i];
  }
}

// ---------------------------------------------------------------------------
// Primitive ops. Each validates shapes, computes the forward value and, when a
// tape is active and an input is tracked, records a closure that scatters the
// upstream gradient to its parents.
// ---------------------------------------------------------------------------

namespace detail {

template <typename Real>
bool tracking(std::initializer_list<int> nodes) {
  if (!Tape<Real>::current()) return false;
  for (int n : nodes)
    if (n >= 0) return true;
  return false;
}

}  // namespace detail

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  auto out = std::make_shared<std::vector<Real>>(a.size());
  const auto &av = a.values(), &bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) (*out)[i] = av[i] + bv[i];
  int node = -1;
  if (detail::tracking<Real>({a.node(), b.node()})) {
    int an = a.node(), bn = b.node();
    std::size_t n = a.size();
    node = Tape<Real>::current()->record(
        [an, bn, n](Tape<Real>& t, const std::vector<Real>& gy) {
          if (an >= 0) {
            auto& ga = t.grad(an, n);
            for (std::size_t i = 0; i < n; ++i) ga[i] += gy[i];
          }
          if (bn >= 0) {
            auto& gb = t.grad(bn, n);
            for (std::size_t i = 0; i < n; ++i) gb[i] += gy[i];
          }
        });
  }
  return Tensor<Real>(a.shape(), std::move(out), node);
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("sub: shape mismatch");
  auto out = std::make_shared<std::vector<Real>>(a.size());
  const auto &av = a.values(), &bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) (*out)[i] = av[i] - bv[i];
  int node = -1;
  if (detail::tracking<Real>({a.node(), b.node()})) {
    int an = a.node(), bn = b.node();
    std::size_t n = a.size();
    node = Tape<Real>::current()->record(
        [an, bn, n](Tape<Real>& t, const std::vector<Real>& gy) {
          if (an >= 0) {
            auto& ga = t.grad(an, n);
            for (std::size_t i = 0; i < n; ++i) ga[i] += gy[i];
          }
          if (bn >= 0) {
            auto& gb = t.grad(bn, n);
            for (std::size_t i = 0; i < n; ++i) gb[i] -= gy[i];
          }
        });
  }
  return Tensor<Real>(a.shape(), std::move(out), node);
}

template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul: shape mismatch");
  auto out = std::make_shared<std::vector<Real>>(a.size());
  const auto &av = a.values(), &bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) (*out)[i] = av[i] * bv[i];
  int node = -1;
  if (detail::tracking<Real>({a.node(), b.node()})) {
    int an = a.node(), bn = b.node();
    auto ad = a.share(), bd = b.share();
    std::size_t n = a.size();
    node = Tape<Real>::current()->record(
        [an, bn, ad, bd, n](Tape<Real>& t, const std::vector<Real>& gy) {
          if (an >= 0) {
            auto& ga = t.grad(an, n);
            for (std::size_t i = 0; i < n; ++i) ga[i] += gy[i] * (*bd)[i];
          }
          if (bn >= 0) {
            auto& gb = t.grad(bn, n);
            for (std::size_t i = 0; i < n; ++i) gb[i] += gy[i] * (*ad)[i];
          }
        });
  }
  return Tensor<Real>(a.shape(), std::move(out), node);
}

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& a, Real c) {
  auto out = std::make_shared<std::vector<Real>>(a.size());
  const auto& av = a.values();
  for (std::size_t i = 0; i < av.size(); ++i) (*out)[i] = av[i] * c;
  int node = -1;
  if (detail::tracking<Real>({a.node()})) {
    int an = a.node();
    std::size_t n = a.size();
    node = Tape<Real>::current()->record(
        [an, c, n](Tape<Real>& t, const std::vector<Real>& gy) {
          auto& ga = t.grad(an, n);
          for (std::size_t i = 0; i < n; ++i) ga[i] += gy[i] * c;
        });
  }
  return Tensor<Real>(a.shape(), std::move(out), node);
}

namespace detail {
template <typename Real>
Real stable_sigmoid(Real x) {
  if (x >= Real(0)) {
    Real e = std::exp(-x);
    return Real(1) / (Real(1) + e);
  }
  Real e = std::exp(x);
  return e / (Real(1) + e);
}
}  // namespace detail

template <typename Real>
Tensor<Real> sigmoid(const Tensor<Real>& a) {
  auto out = std::make_shared<std::vector<Real>>(a.size());
  const auto& av = a.values();
  for (std::size_t i = 0; i < av.size(); ++i)
    (*out)[i] = detail::stable_sigmoid(av[i]);
  int node = -1;
  if (detail::tracking<Real>({a.node()})) {
    int an = a.node();
    std::size_t n = a.size();
    auto yd = out;
    node = Tape<Real>::current()->record(
        [an, yd, n](Tape<Real>& t, const std::vector<Real>& gy) {
          auto& ga = t.grad(an, n);
          for (std::size_t i = 0; i < n; ++i) {
            Real s = (*yd)[i];
            ga[i] += gy[i] * s * (Real(1) - s);
          }
        });
  }
  return Tensor<Real>(a.shape(), std::move(out), node);
}

/// swish(x) = x * sigmoid(x)
template <typename Real>
Tensor<Real> swish(const Tensor<Real>& a) {
  auto out = std::make_shared<std::vector<Real>>(a.size());
  const auto& av = a.values();
  for (std::size_t i = 0; i < av.size(); ++i)
    (*out)[i] = av[i] * detail::stable_sigmoid(av[i]);
  int node = -1;
  if (detail::tracking<Real>({a.node()})) {
    int an = a.node();
    std::size_t n = a.size();
    auto ad = a.share();
    node = Tape<Real>::current()->record(
        [an, ad, n](Tape<Real>& t, const std::vector<Real>& gy) {
          auto& ga = t.grad(an, n);
          for (std::size_t i = 0; i < n; ++i) {
            Real x = (*ad)[i];
            Real s = detail::stable_sigmoid(x);
            ga[i] += gy[i] * s * (Real(1) + x * (Real(1) - s));
          }
        });
  }
  return Tensor<Real>(a.shape(), std::move(out), node);
}

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul: expects rank-2 tensors");
  std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  if (b.extent(0) != k)
    throw ShapeError("matmul: inner dims differ, " + shape_str(a.shape()) +
                     " * " + shape_str(b.shape()));
  auto out = std::make_shared<std::vector<Real>>(m * n, Real(0));
  const auto &av = a.values(), &bv = b.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      Real x = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) (*out)[i * n + j] += x * bv[p * n + j];
    }
  int node = -1;
  if (detail::tracking<Real>({a.node(), b.node()})) {
    int an = a.node(), bn = b.node();
    auto ad = a.share(), bd = b.share();
    node = Tape<Real>::current()->record(
        [an, bn, ad, bd, m, k, n](Tape<Real>& t, const std::vector<Real>& gy) {
          if (an >= 0) {  // ga += gy * b^T
            auto& ga = t.grad(an, m * k);
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t j = 0; j < n; ++j) {
                Real g = gy[i * n + j];
                for (std::size_t p = 0; p < k; ++p)
                  ga[i * k + p] += g * (*bd)[p * n + j];
              }
          }
          if (bn >= 0) {  // gb += a^T * gy
            auto& gb = t.grad(bn, k * n);
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t p = 0; p < k; ++p) {
                Real x = (*ad)[i * k + p];
                for (std::size_t j = 0; j < n; ++j)
                  gb[p * n + j] += x * gy[i * n + j];
              }
          }
        });
  }
  return Tensor<Real>(Shape{m, n}, std::move(out), node);
}

template <typename Real>
Tensor<Real> transpose(const Tensor<Real>& a) {
  if (a.rank() != 2) throw ShapeError("transpose: expects rank-2 tensor");
  std::size_t m = a.extent(0), n = a.extent(1);
  auto out = std::make_shared<std::vector<Real>>(m * n);
  const auto& av = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) (*out)[j * m + i] = av[i * n + j];
  int node = -1;
  if (detail::tracking<Real>({a.node()})) {
    int an = a.node();
    node = Tape<Real>::current()->record(
        [an, m, n](Tape<Real>& t, const std::vector<Real>& gy) {
          auto& ga = t.grad(an, m * n);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += gy[j * m + i];
        });
  }
  return Tensor<Real>(Shape{n, m}, std::move(out), node);
}

/// Reinterpret shape; same number of elements, identity gradient.
template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& a, Shape shape) {
  if (shape_size(shape) != a.size())
    throw ShapeError("reshape: size mismatch");
  int node = -1;
  if (detail::tracking<Real>({a.node()})) {
    int an = a.node();
    std::size_t n = a.size();
    node = Tape<Real>::current()->record(
        [an, n](Tape<Real>& t, const std::vector<Real>& gy) {
          auto& ga = t.grad(an, n);
          for (std::size_t i = 0; i < n; ++i) ga[i] += gy[i];
        });
  }
  return Tensor<Real>(std::move(shape),
                      std::make_shared<std::vector<Real>>(a.values()), node);
}

template <typename Real>
Tensor<Real> slice_cols(const Tensor<Real>& a, std::size_t first,
                        std::size_t count) {
  if (a.rank() != 2) throw ShapeError("slice_cols: expects rank-2 tensor");
  std::size_t m = a.extent(0), n = a.extent(1);
  if (first + count > n) throw ShapeError("slice_cols: out of range");
  auto out = std::make_shared<std::vector<Real>>(m * count);
  const auto& av = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j)
      (*out)[i * count + j] = av[i * n + first + j];
  int node = -1;
  if (detail::tracking<Real>({a.node()})) {
    int an = a.node();
    node = Tape<Real>::current()->record(
        [an, m, n, first, count](Tape<Real>& t, const std::vector<Real>& gy) {
          auto& ga = t.grad(an, m * n);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < count; ++j)
              ga[i * n + first + j] += gy[i * count + j];
        });
  }
  return Tensor<Real>(Shape{m, count}, std::move(out), node);
}

template <typename Real>
Tensor<Real> concat_cols(const std::vector<Tensor<Real>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  std::size_t m = parts[0].extent(0), total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.extent(0) != m)
      throw ShapeError("concat_cols: row counts differ");
    total += p.extent(1);
  }
  auto out = std::make_shared<std::vector<Real>>(m * total);
  std::size_t off = 0;
  std::vector<int> nodes;
  std::vector<std::size_t> widths;
  bool any = false;
  for (const auto& p : parts) {
    std::size_t w = p.extent(1);
    const auto& pv = p.values();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j)
        (*out)[i * total + off + j] = pv[i * w + j];
    nodes.push_back(p.node());
    widths.push_back(w);
    any = any || p.node() >= 0;
    off += w;
  }
  int node = -1;
  if (Tape<Real>::current() && any) {
    node = Tape<Real>::current()->record(
        [nodes, widths, m, total](Tape<Real>& t, const std::vector<Real>& gy) {
          std::size_t off = 0;
          for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
            std::size_t w = widths[pi];
            if (nodes[pi] >= 0) {
              auto& gp = t.grad(nodes[pi], m * w);
              for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < w; ++j)
                  gp[i * w + j] += gy[i * total + off + j];
            }
            off += w;
          }
        });
  }
  return Tensor<Real>(Shape{m, total}, std::move(out), node);
}

/// Row `row` of a rank-2 tensor as a rank-1 tensor.
template <typename Real>
Tensor<Real> take_row(const Tensor<Real>& a, std::size_t row) {
  if (a.rank() != 2) throw ShapeError("take_row: expects rank-2 tensor");
  std::size_t m = a.extent(0), n = a.extent(1);
  if (row >= m) throw ShapeError("take_row: row out of range");
  auto out = std::make_shared<std::vector<Real>>(
      a.values().begin() + long(row * n), a.values().begin() + long((row + 1) * n));
  int node = -1;
  if (detail::tracking<Real>({a.node()})) {
    int an = a.node();
    node = Tape<Real>::current()->record(
        [an, m, n, row](Tape<Real>& t, const std::vector<Real>& gy) {
          auto& ga = t.grad(an, m * n);
          for (std::size_t j = 0; j < n; ++j) ga[row * n + j] += gy[j];
        });
  }
  return Tensor<Real>(Shape{n}, std::move(out), node);
}

/// Stack rank-2 blocks (or rank-1 rows) on top of each other.
template <typename Real>
Tensor<Real> concat_rows(const std::vector<Tensor<Real>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  std::size_t n =
      parts[0].rank() == 1 ? parts[0].extent(0) : parts[0].extent(1);
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.rank() == 1) {
      if (p.extent(0) != n) throw ShapeError("concat_rows: widths differ");
      rows += 1;
    } else if (p.rank() == 2) {
      if (p.extent(1) != n) throw ShapeError("concat_rows: widths differ");
      rows += p.extent(0);
    } else {
      throw ShapeError("concat_rows: expects rank-1 or rank-2 parts");
    }
  }
  auto out = std::make_shared<std::vector<Real>>(rows * n);
  std::size_t r = 0;
  std::vector<int> nodes;
  std::vector<std::size_t> heights, starts;
  bool any = false;
  for (const auto& p : parts) {
    std::size_t h = p.rank() == 1 ? 1 : p.extent(0);
    const auto& pv = p.values();
    std::copy(pv.begin(), pv.end(), out->begin() + long(r * n));
    nodes.push_back(p.node());
    heights.push_back(h);
    starts.push_back(r);
    any = any || p.node() >= 0;
    r += h;
  }
  int node = -1;
  if (Tape<Real>::current() && any) {
    node = Tape<Real>::current()->record(
        [nodes, heights, starts, n](Tape<Real>& t,
                                    const std::vector<Real>& gy) {
          for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
            if (nodes[pi] < 0) continue;
            std::size_t h = heights[pi], s = starts[pi];
            auto& gp = t.grad(nodes[pi], h * n);
            for (std::size_t i = 0; i < h * n; ++i) gp[i] += gy[s * n + i];
          }
        });
  }
  return Tensor<Real>(Shape{rows, n}, std::move(out), node);
}

/// a[r,:] + v for every row r. v is rank-1 of width a.cols.
template <typename Real>
Tensor<Real> add_rowvec(const Tensor<Real>& a, const Tensor<Real>& v) {
  if (a.rank() != 2 || v.rank() != 1 || v.extent(0) != a.extent(1))
    throw ShapeError("add_rowvec: want [m x n] + [n]");
  std::size_t m = a.extent(0), n = a.extent(1);
  auto out = std::make_shared<std::vector<Real>>(m * n);
  const auto &av = a.values(), &vv = v.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      (*out)[i * n + j] = av[i * n + j] + vv[j];
  int node = -1;
  if (detail::tracking<Real>({a.node(), v.node()})) {
    int an = a.node(), vn = v.node();
    node = Tape<Real>::current()->record(
        [an, vn, m, n](Tape<Real>& t, const std::vector<Real>& gy) {
          if (an >= 0) {
            auto& ga = t.grad(an, m * n);
            for (std::size_t i = 0; i < m * n; ++i) ga[i] += gy[i];
          }
          if (vn >= 0) {
            auto& gv = t.grad(vn, n);
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t j = 0; j < n; ++j) gv[j] += gy[i * n + j];
          }
        });
  }
  return Tensor<Real>(a.shape(), std::move(out), node);
}

/// y = x W + b, broadcast over all leading extents of x. Trailing extent of x
/// must equal W's first extent.
template <typename Real>
Tensor<Real> linear(const Tensor<Real>& x, const Tensor<Real>& w,
                    const Tensor<Real>& b) {
  if (w.rank() != 2) throw ShapeError("linear: weight must be rank-2");
  std::size_t d_in = w.extent(0), d_out = w.extent(1);
  if (x.rank() < 1 || x.shape().back() != d_in)
    throw ShapeError("linear: input trailing extent " +
                     std::to_string(x.rank() ? x.shape().back() : 0) +
                     " != " + std::to_string(d_in));
  if (b.rank() != 1 || b.extent(0) != d_out)
    throw ShapeError("linear: bias must be rank-1 of width d_out");
  std::size_t rows = x.size() / d_in;
  auto out = std::make_shared<std::vector<Real>>(rows * d_out);
  const auto &xv = x.values(), &wv = w.values(), &bv = b.values();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < d_out; ++j) (*out)[r * d_out + j] = bv[j];
    for (std::size_t p = 0; p < d_in; ++p) {
      Real xe = xv[r * d_in + p];
      for (std::size_t j = 0; j < d_out; ++j)
        (*out)[r * d_out + j] += xe * wv[p * d_out + j];
    }
  }
  Shape oshape(x.shape());
  oshape.back() = d_out;
  int node = -1;
  if (detail::tracking<Real>({x.node(), w.node(), b.node()})) {
    int xn = x.node(), wn = w.node(), bn = b.node();
    auto xd = x.share(), wd = w.share();
    node = Tape<Real>::current()->record(
        [xn, wn, bn, xd, wd, rows, d_in, d_out](Tape<Real>& t,
                                                const std::vector<Real>& gy) {
          if (xn >= 0) {
            auto& gx = t.grad(xn, rows * d_in);
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t j = 0; j < d_out; ++j) {
                Real g = gy[r * d_out + j];
                for (std::size_t p = 0; p < d_in; ++p)
                  gx[r * d_in + p] += g * (*wd)[p * d_out + j];
              }
          }
          if (wn >= 0) {
            auto& gw = t.grad(wn, d_in * d_out);
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t p = 0; p < d_in; ++p) {
                Real xe = (*xd)[r * d_in + p];
                for (std::size_t j = 0; j < d_out; ++j)
                  gw[p * d_out + j] += xe * gy[r * d_out + j];
              }
          }
          if (bn >= 0) {
            auto& gb = t.grad(bn, d_out);
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t j = 0; j < d_out; ++j)
                gb[j] += gy[r * d_out + j];
          }
        });
  }
  return Tensor<Real>(std::move(oshape), std::move(out), node);
}

template <typename Real>
Tensor<Real> linear_nobias(const Tensor<Real>& x, const Tensor<Real>& w) {
  if (w.rank() != 2) throw ShapeError("linear: weight must be rank-2");
  return linear(x, w, Tensor<Real>::zeros(Shape{w.extent(1)}));
}

template <typename Real>
Tensor<Real> sum(const Tensor<Real>& a) {
  Real s = 0;
  for (Real v : a.values()) s += v;
  int node = -1;
  if (detail::tracking<Real>({a.node()})) {
    int an = a.node();
    std::size_t n = a.size();
    node = Tape<Real>::current()->record(
        [an, n](Tape<Real>& t, const std::vector<Real>& gy) {
          auto& ga = t.grad(an, n);
          for (std::size_t i = 0; i < n; ++i) ga[i] += gy[0];
        });
  }
  return Tensor<Real>(Shape{}, std::vector<Real>{s}, node);
}

/// Mean of scalar tensors in one node (used to average per-sample losses).
template <typename Real>
Tensor<Real> mean_scalars(const std::vector<Tensor<Real>>& xs) {
  if (xs.empty()) throw ShapeError("mean_scalars: empty");
  Real s = 0;
  std::vector<int> nodes;
  bool any = false;
  for (const auto& x : xs) {
    if (x.size() != 1) throw ShapeError("mean_scalars: non-scalar input");
    s += x.values()[0];
    nodes.push_back(x.node());
    any = any || x.node() >= 0;
  }
  Real inv = Real(1) / Real(xs.size());
  int node = -1;
  if (Tape<Real>::current() && any) {
    node = Tape<Real>::current()->record(
        [nodes, inv](Tape<Real>& t, const std::vector<Real>& gy) {
          for (int idn : nodes)
            if (idn >= 0) t.grad(idn, 1)[0] += gy[0] * inv;
        });
  }
  return Tensor<Real>(Shape{}, std::vector<Real>{s * inv}, node);
}

/// Mean squared error against a constant target.
template <typename Real>
Tensor<Real> mean_squared_error(const Tensor<Real>& pred,
                                const Tensor<Real>& target) {
  if (pred.shape() != target.shape())
    throw ShapeError("mse: shape mismatch");
  std::size_t n = pred.size();
  if (n == 0) throw ShapeError("mse: empty");
  const auto &pv = pred.values(), &tv = target.values();
  Real s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    Real d = pv[i] - tv[i];
    s += d * d;
  }
  s /= Real(n);
  int node = -1;
  if (detail::tracking<Real>({pred.node()})) {
    int pn = pred.node();
    auto pd = pred.share(), td = target.share();
    node = Tape<Real>::current()->record(
        [pn, pd, td, n](Tape<Real>& t, const std::vector<Real>& gy) {
          auto& gp = t.grad(pn, n);
          Real c = gy[0] * Real(2) / Real(n);
          for (std::size_t i = 0; i < n; ++i)
            gp[i] += c * ((*pd)[i] - (*td)[i]);
        });
  }
  return Tensor<Real>(Shape{}, std::vector<Real>{s}, node);
}

/// Numerically stable softmax along `axis`. Lanes sum to 1.
template <typename Real>
Tensor<Real> softmax(const Tensor<Real>& a, std::size_t axis) {
  if (axis >= a.rank()) throw ShapeError("softmax: axis out of range");
  std::size_t ax = a.extent(axis);
  if (ax == 0) throw ShapeError("softmax: empty axis");
  std::size_t inner = 1, outer = 1;
  for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.extent(i);
  for (std::size_t i = 0; i < axis; ++i) outer *= a.extent(i);
  auto out = std::make_shared<std::vector<Real>>(a.size());
  const auto& av = a.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      std::size_t base = o * ax * inner + in;
      Real mx = av[base];
      for (std::size_t i = 1; i < ax; ++i)
        mx = std::max(mx, av[base + i * inner]);
      Real z = 0;
      for (std::size_t i = 0; i < ax; ++i) {
        Real e = std::exp(av[base + i * inner] - mx);
        (*out)[base + i * inner] = e;
        z += e;
      }
      for (std::size_t i = 0; i < ax; ++i) (*out)[base + i * inner] /= z;
    }
  int node = -1;
  if (detail::tracking<Real>({a.node()})) {
    int an = a.node();
    auto yd = out;
    std::size_t n = a.size();
    node = Tape<Real>::current()->record(
        [an, yd, n, ax, inner, outer](Tape<Real>& t,
                                      const std::vector<Real>& gy) {
          auto& ga = t.grad(an, n);
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t in = 0; in < inner; ++in) {
              std::size_t base = o * ax * inner + in;
              Real dot = 0;
              for (std::size_t i = 0; i < ax; ++i)
                dot += gy[base + i * inner] * (*yd)[base + i * inner];
              for (std::size_t i = 0; i < ax; ++i)
                ga[base + i * inner] +=
                    (*yd)[base + i * inner] * (gy[base + i * inner] - dot);
            }
        });
  }
  return Tensor<Real>(a.shape(), std::move(out), node);
}

/// Multiclass cross-entropy of a logit vector: -log softmax(logits)[label].
template <typename Real>
Tensor<Real> cross_entropy(const Tensor<Real>& logits, std::size_t label) {
  if (logits.rank() != 1)
    throw ShapeError("cross_entropy: logits must be rank-1");
  std::size_t k = logits.extent(0);
  if (k < 2) throw ShapeError("cross_entropy: need at least 2 classes");
  if (label >= k)
    throw ShapeError("cross_entropy: label " + std::to_string(label) +
                     " out of range for " + std::to_string(k) + " classes");
  const auto& lv = logits.values();
  Real mx = lv[0];
  for (Real v : lv) mx = std::max(mx, v);
  Real z = 0;
  for (Real v : lv) z += std::exp(v - mx);
  Real loss = -(lv[label] - mx - std::log(z));
  int node = -1;
  if (detail::tracking<Real>({logits.node()})) {
    int ln = logits.node();
    auto probs = std::make_shared<std::vector<Real>>(k);
    for (std::size_t i = 0; i < k; ++i)
      (*probs)[i] = std::exp(lv[i] - mx) / z;
    node = Tape<Real>::current()->record(
        [ln, probs, k, label](Tape<Real>& t, const std::vector<Real>& gy) {
          auto& gl = t.grad(ln, k);
          for (std::size_t i = 0; i < k; ++i) {
            Real delta = (i == label) ? Real(1) : Real(0);
            gl[i] += gy[0] * ((*probs)[i] - delta);
          }
        });
  }
  return Tensor<Real>(Shape{}, std::vector<Real>{loss}, node);
}

/// Fused masked softmax + value mix: for each query row, softmax the scores
/// over the allowed keys only and mix the value rows. Disallowed keys are
/// skipped outright, so their scores and values can never influence the
/// output, bitwise. allowed is [n_q x n_k] row-major, nonzero = attendable.
template <typename Real>
Tensor<Real> masked_attend(const Tensor<Real>& scores,
                           const Tensor<Real>& values,
                           const std::vector<std::uint8_t>& allowed) {
  if (scores.rank() != 2 || values.rank() != 2)
    throw ShapeError("masked_attend: expects rank-2 tensors");
  std::size_t nq = scores.extent(0), nk = scores.extent(1),
              dv = values.extent(1);
  if (values.extent(0) != nk)
    throw ShapeError("masked_attend: key count mismatch");
  if (allowed.size() != nq * nk)
    throw ShapeError("masked_attend: mask size mismatch");
  const auto &sv = scores.values(), &vv = values.values();
  auto probs = std::make_shared<std::vector<Real>>(nq * nk, Real(0));
  auto out = std::make_shared<std::vector<Real>>(nq * dv, Real(0));
  for (std::size_t i = 0; i < nq; ++i) {
    Real mx = 0;
    bool seen = false;
    for (std::size_t j = 0; j < nk; ++j)
      if (allowed[i * nk + j]) {
        Real s = sv[i * nk + j];
        mx = seen ? std::max(mx, s) : s;
        seen = true;
      }
    if (!seen)
      throw Error("no attendable keys for query row " + std::to_string(i));
    Real z = 0;
    for (std::size_t j = 0; j < nk; ++j)
      if (allowed[i * nk + j]) {
        Real e = std::exp(sv[i * nk + j] - mx);
        (*probs)[i * nk + j] = e;
        z += e;
      }
    for (std::size_t j = 0; j < nk; ++j)
      if (allowed[i * nk + j]) {
        Real p = (*probs)[i * nk + j] / z;
        (*probs)[i * nk + j] = p;
        for (std::size_t d = 0; d < dv; ++d)
          (*out)[i * dv + d] += p * vv[j * dv + d];
      }
  }
  int node = -1;
  if (detail::tracking<Real>({scores.node(), values.node()})) {
    int sn = scores.node(), vn = values.node();
    auto vd = values.share();
    auto mask = std::make_shared<std::vector<std::uint8_t>>(allowed);
    node = Tape<Real>::current()->record(
        [sn, vn, probs, vd, mask, nq, nk, dv](Tape<Real>& t,
                                              const std::vector<Real>& gy) {
          if (sn >= 0) {
            auto& gs = t.grad(sn, nq * nk);
            for (std::size_t i = 0; i < nq; ++i) {
              Real dot = 0;
              for (std::size_t j = 0; j < nk; ++j) {
                if (!(*mask)[i * nk + j]) continue;
                Real aij = 0;
                for (std::size_t d = 0; d < dv; ++d)
                  aij += (*vd)[j * dv + d] * gy[i * dv + d];
                dot += (*probs)[i * nk + j] * aij;
              }
              for (std::size_t j = 0; j < nk; ++j) {
                if (!(*mask)[i * nk + j]) continue;
                Real aij = 0;
                for (std::size_t d = 0; d < dv; ++d)
                  aij += (*vd)[j * dv + d] * gy[i * dv + d];
                gs[i * nk + j] += (*probs)[i * nk + j] * (aij - dot);
              }
            }
          }
          if (vn >= 0) {
            auto& gv = t.grad(vn, nk * dv);
            for (std::size_t i = 0; i < nq; ++i)
              for (std::size_t j = 0; j < nk; ++j) {
                Real p = (*probs)[i * nk + j];
                if (!(*mask)[i * nk + j]) continue;
                for (std::size_t d = 0; d < dv; ++d)
                  gv[j * dv + d] += p * gy[i * dv + d];
              }
          }
        });
  }
  return Tensor<Real>(Shape{nq, dv}, std::move(out), node);
}

/// Row-wise layer normalization with learnable gain and bias.
template <typename Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gain,
                        const Tensor<Real>& bias, Real eps = Real(1e-6)) {
  if (x.rank() < 1) throw ShapeError("layer_norm: rank-0 input");
  std::size_t d = x.shape().back();
  if (gain.rank() != 1 || gain.extent(0) != d || bias.rank() != 1 ||
      bias.extent(0) != d)
    throw ShapeError("layer_norm: gain/bias must be rank-1 of trailing width");
  std::size_t rows = x.size() / d;
  const auto &xv = x.values(), &gv = gain.values(), &bv = bias.values();
  auto out = std::make_shared<std::vector<Real>>(x.size());
  auto xhat = std::make_shared<std::vector<Real>>(x.size());
  auto inv_sigma = std::make_shared<std::vector<Real>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    Real mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += xv[r * d + j];
    mu /= Real(d);
    Real var = 0;
    for (std::size_t j = 0; j < d; ++j) {
      Real c = xv[r * d + j] - mu;
      var += c * c;
    }
    var /= Real(d);
    Real is = Real(1) / std::sqrt(var + eps);
    (*inv_sigma)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      Real xh = (xv[r * d + j] - mu) * is;
      (*xhat)[r * d + j] = xh;
      (*out)[r * d + j] = gv[j] * xh + bv[j];
    }
  }
  int node = -1;
  if (detail::tracking<Real>({x.node(), gain.node(), bias.node()})) {
    int xn = x.node(), gn = gain.node(), bn = bias.node();
    auto gd = gain.share();
    node = Tape<Real>::current()->record(
        [xn, gn, bn, gd, xhat, inv_sigma, rows, d](
            Tape<Real>& t, const std::vector<Real>& gy) {
          if (xn >= 0) {
            auto& gx = t.grad(xn, rows * d);
            for (std::size_t r = 0; r < rows; ++r) {
              Real mean_dxh = 0, mean_dxh_xh = 0;
              for (std::size_t j = 0; j < d; ++j) {
                Real dxh = gy[r * d + j] * (*gd)[j];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * (*xhat)[r * d + j];
              }
              mean_dxh /= Real(d);
              mean_dxh_xh /= Real(d);
              for (std::size_t j = 0; j < d; ++j) {
                Real dxh = gy[r * d + j] * (*gd)[j];
                gx[r * d + j] += (*inv_sigma)[r] *
                                 (dxh - mean_dxh -
                                  (*xhat)[r * d + j] * mean_dxh_xh);
              }
            }
          }
          if (gn >= 0) {
            auto& gg = t.grad(gn, d);
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t j = 0; j < d; ++j)
                gg[j] += gy[r * d + j] * (*xhat)[r * d + j];
          }
          if (bn >= 0) {
            auto& gb = t.grad(bn, d);
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t j = 0; j < d; ++j) gb[j] += gy[r * d + j];
          }
        });
  }
  return Tensor<Real>(x.shape(), std::move(out), node);
}

}  // namespace formed
