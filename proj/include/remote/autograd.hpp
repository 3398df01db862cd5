#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "remote/errors.hpp"
#include "remote/tensor.hpp"

namespace remote {

enum class OpKind {
  kConstant,
  kLeaf,
  kMatmul,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kScale,
  kAddScalar,
  kConcat,
  kSlice,
  kTranspose,
  kReshape,
  kMean,
  kSum,
  kSigmoid,
  kTanh,
  kRelu,
  kExp,
  kLog,
  kSoftmax,
  kDropout,
  kEmbedding,
  kCrossEntropy,
};

template <std::floating_point T>
class Tape;

/// Handle to a value recorded on a Tape.
template <std::floating_point T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const BasicTensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  std::size_t id() const noexcept { return id_; }
  Tape<T>& tape() const noexcept { return *tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }
  bool tracks_grad() const { return tape_->tracks(id_); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records operations in execution order and runs reverse-mode
/// differentiation over them.
///
/// A tape belongs to one forward/backward pass. Leaves created with `leaf()`
/// point at caller-owned parameters; `backward()` accumulates into their
/// `grad()` buffers. Nodes are stored in a deque so `Var::value()` references
/// stay valid while the tape grows.
template <std::floating_point T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::span<const T>)>;

  explicit Tape(bool train = false, std::uint64_t seed = 0) : train_(train), rng_(seed) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(BasicTensor<T> value) {
    nodes_.push_back(Node{std::move(value), OpKind::kConstant, false, nullptr, {}, {}});
    return Var<T>(this, nodes_.size() - 1);
  }

  // Reads `param` now and writes its gradient back during backward().
  Var<T> leaf(BasicTensor<T>& param) {
    const bool tracks = param.requires_grad();
    BasicTensor<T> copy(param.shape(), param.values());
    nodes_.push_back(Node{std::move(copy), OpKind::kLeaf, tracks, tracks ? &param : nullptr, {}, {}});
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> record(OpKind kind, BasicTensor<T> value, std::initializer_list<Var<T>> parents, BackwardFn fn) {
    return record(kind, std::move(value), std::span<const Var<T>>(parents.begin(), parents.size()), std::move(fn));
  }

  Var<T> record(OpKind kind, BasicTensor<T> value, std::span<const Var<T>> parents, BackwardFn fn) {
    bool tracks = false;
    for (const auto& p : parents) {
      if (&p.tape() != this) throw ContractError("operands recorded on different tapes");
      tracks = tracks || nodes_[p.id()].tracks;
    }
    nodes_.push_back(Node{std::move(value), kind, tracks, nullptr, tracks ? std::move(fn) : BackwardFn{}, {}});
    return Var<T>(this, nodes_.size() - 1);
  }

  const BasicTensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool tracks(std::size_t id) const { return nodes_.at(id).tracks; }
  std::size_t size() const noexcept { return nodes_.size(); }

  bool train() const noexcept { return train_; }
  std::mt19937_64& rng() noexcept { return rng_; }

  // Test fixture: doubles the gradient passed through every node of `kind`.
  void inject_fault(std::optional<OpKind> kind) { fault_ = kind; }

  void accumulate(std::size_t id, std::span<const T> g) {
    Node& node = nodes_[id];
    if (!node.tracks) return;
    if (node.grad.empty()) node.grad.assign(node.value.numel(), T{0});
    for (std::size_t i = 0; i < g.size(); ++i) node.grad[i] += g[i];
  }

  // Gradient of the last backward() target w.r.t. `v`; empty if unreached.
  std::span<const T> grad(const Var<T>& v) const { return nodes_.at(v.id()).grad; }

  void backward(const Var<T>& loss) {
    if (&loss.tape() != this) throw ContractError("loss is not recorded on this tape");
    if (loss.value().numel() != 1) {
      throw ContractError("backward() needs a scalar loss, got shape " + shape_string(loss.shape()));
    }
    for (auto& n : nodes_) n.grad.clear();
    Node& root = nodes_[loss.id()];
    if (!root.tracks) return;
    root.grad.assign(1, T{1});
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      Node& node = nodes_[id];
      if (!node.tracks || node.grad.empty()) continue;
      if (node.param != nullptr) {
        auto& g = node.param->grad();
        if (!g || g->size() != node.grad.size()) g = std::vector<T>(node.grad.size(), T{0});
        for (std::size_t i = 0; i < node.grad.size(); ++i) (*g)[i] += node.grad[i];
        continue;
      }
      if (!node.backward) continue;
      if (fault_ && node.kind == *fault_) {
        std::vector<T> doubled(node.grad);
        for (auto& x : doubled) x *= T{2};
        node.backward(*this, doubled);
      } else {
        // Copy: the rule may append to node storage of parents only, but keep
        // the incoming gradient immune to aliasing.
        const std::vector<T> incoming(node.grad);
        node.backward(*this, incoming);
      }
    }
  }

 private:
  struct Node {
    BasicTensor<T> value;
    OpKind kind;
    bool tracks;
    BasicTensor<T>* param;
    BackwardFn backward;
    std::vector<T> grad;
  };

  std::deque<Node> nodes_;
  bool train_;
  std::mt19937_64 rng_;
  std::optional<OpKind> fault_;
};

namespace detail {

enum class Broadcast { kNone, kScalarA, kScalarB, kRowA, kRowB };

inline bool is_row_of(const Shape& row, const Shape& mat) {
  if (mat.size() != 2) return false;
  if (row.size() == 1) return row[0] == mat[1];
  if (row.size() == 2) return row[0] == 1 && row[1] == mat[1];
  return false;
}

inline Broadcast broadcast_mode(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return Broadcast::kNone;
  if (numel_of(b) == 1) return Broadcast::kScalarB;
  if (numel_of(a) == 1) return Broadcast::kScalarA;
  if (is_row_of(b, a)) return Broadcast::kRowB;
  if (is_row_of(a, b)) return Broadcast::kRowA;
  throw DimensionError(std::string(op) + ": cannot combine shapes " + shape_string(a) + " and " + shape_string(b));
}

inline std::size_t source_index(Broadcast mode, bool is_a, std::size_t k, std::size_t cols) {
  switch (mode) {
    case Broadcast::kNone:
      return k;
    case Broadcast::kScalarA:
      return is_a ? 0 : k;
    case Broadcast::kScalarB:
      return is_a ? k : 0;
    case Broadcast::kRowA:
      return is_a ? k % cols : k;
    case Broadcast::kRowB:
      return is_a ? k : k % cols;
  }
  return k;
}

// f(x, y) forward; dx(x, y, out) and dy(x, y, out) are local partials.
template <std::floating_point T, class F, class Dx, class Dy>
Var<T> binary(OpKind kind, const char* name, const Var<T>& a, const Var<T>& b, F f, Dx dx, Dy dy) {
  const auto& av = a.value();
  const auto& bv = b.value();
  const Broadcast mode = broadcast_mode(av.shape(), bv.shape(), name);
  const bool a_bigger = mode == Broadcast::kNone || mode == Broadcast::kScalarB || mode == Broadcast::kRowB;
  const Shape out_shape = a_bigger ? av.shape() : bv.shape();
  BasicTensor<T> out(out_shape);
  const std::size_t cols = out.cols();
  for (std::size_t k = 0; k < out.numel(); ++k) {
    out[k] = f(av[source_index(mode, true, k, cols)], bv[source_index(mode, false, k, cols)]);
  }
  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  return a.tape().record(kind, std::move(out), {a, b}, [ia, ib, mode, cols, out_id = a.tape().size(), dx, dy](Tape<T>& tape, std::span<const T> g) {
    const auto& x = tape.value(ia);
    const auto& y = tape.value(ib);
    const auto& o = tape.value(out_id);
    std::vector<T> ga(x.numel(), T{0});
    std::vector<T> gb(y.numel(), T{0});
    for (std::size_t k = 0; k < g.size(); ++k) {
      const std::size_t ja = source_index(mode, true, k, cols);
      const std::size_t jb = source_index(mode, false, k, cols);
      ga[ja] += g[k] * dx(x[ja], y[jb], o[k]);
      gb[jb] += g[k] * dy(x[ja], y[jb], o[k]);
    }
    tape.accumulate(ia, ga);
    tape.accumulate(ib, gb);
  });
}

template <std::floating_point T, class F, class D>
Var<T> unary(OpKind kind, const Var<T>& a, F f, D df) {
  const auto& av = a.value();
  BasicTensor<T> out(av.shape());
  for (std::size_t k = 0; k < av.numel(); ++k) out[k] = f(av[k]);
  const std::size_t ia = a.id();
  return a.tape().record(kind, std::move(out), {a}, [ia, out_id = a.tape().size(), df](Tape<T>& tape, std::span<const T> g) {
    const auto& x = tape.value(ia);
    const auto& y = tape.value(out_id);
    std::vector<T> ga(x.numel());
    for (std::size_t k = 0; k < g.size(); ++k) ga[k] = g[k] * df(x[k], y[k]);
    tape.accumulate(ia, ga);
  });
}

inline void require_rank2(const Shape& s, const char* op) {
  if (s.size() != 2) throw DimensionError(std::string(op) + " expects a matrix, got " + shape_string(s));
}

}  // namespace detail

template <std::floating_point T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::require_rank2(a.shape(), "matmul");
  detail::require_rank2(b.shape(), "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  BasicTensor<T> out(Shape{m, n});
  const T* A = a.value().data().data();
  const T* B = b.value().data().data();
  T* C = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = A[i * k + p];
      if (aip == T{0}) continue;
      const T* brow = B + p * n;
      T* crow = C + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(OpKind::kMatmul, std::move(out), {a, b}, [ia, ib, m, k, n](Tape<T>& tape, std::span<const T> g) {
    const T* A = tape.value(ia).data().data();
    const T* B = tape.value(ib).data().data();
    if (tape.tracks(ia)) {
      // dA = g · Bᵀ
      std::vector<T> ga(m * k, T{0});
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          T s{0};
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * B[p * n + j];
          ga[i * k + p] = s;
        }
      }
      tape.accumulate(ia, ga);
    }
    if (tape.tracks(ib)) {
      // dB = Aᵀ · g
      std::vector<T> gb(k * n, T{0});
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const T aip = A[i * k + p];
          if (aip == T{0}) continue;
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
        }
      }
      tape.accumulate(ib, gb);
    }
  });
}

template <std::floating_point T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return detail::binary<T>(
      OpKind::kAdd, "add", a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T{1}; },
      [](T, T, T) { return T{1}; });
}

template <std::floating_point T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return detail::binary<T>(
      OpKind::kSub, "sub", a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T{1}; },
      [](T, T, T) { return T{-1}; });
}

template <std::floating_point T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return detail::binary<T>(
      OpKind::kMul, "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
      [](T x, T, T) { return x; });
}

template <std::floating_point T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  return detail::binary<T>(
      OpKind::kDiv, "div", a, b, [](T x, T y) { return x / y; }, [](T, T y, T) { return T{1} / y; },
      [](T, T y, T o) { return -o / y; });
}

template <std::floating_point T>
Var<T> scale(const Var<T>& a, T s) {
  return detail::unary<T>(OpKind::kScale, a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <std::floating_point T>
Var<T> add_scalar(const Var<T>& a, T s) {
  return detail::unary<T>(OpKind::kAddScalar, a, [s](T x) { return x + s; }, [](T, T) { return T{1}; });
}

template <std::floating_point T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <std::floating_point T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <std::floating_point T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }
template <std::floating_point T>
Var<T> operator/(const Var<T>& a, const Var<T>& b) { return div(a, b); }

template <std::floating_point T>
Var<T> sigmoid(const Var<T>& a) {
  return detail::unary<T>(
      OpKind::kSigmoid, a,
      [](T x) { return x >= T{0} ? T{1} / (T{1} + std::exp(-x)) : std::exp(x) / (T{1} + std::exp(x)); },
      [](T, T y) { return y * (T{1} - y); });
}

template <std::floating_point T>
Var<T> tanh(const Var<T>& a) {
  return detail::unary<T>(OpKind::kTanh, a, [](T x) { return std::tanh(x); }, [](T, T y) { return T{1} - y * y; });
}

template <std::floating_point T>
Var<T> relu(const Var<T>& a) {
  return detail::unary<T>(
      OpKind::kRelu, a, [](T x) { return x > T{0} ? x : T{0}; }, [](T x, T) { return x > T{0} ? T{1} : T{0}; });
}

template <std::floating_point T>
Var<T> exp(const Var<T>& a) {
  return detail::unary<T>(OpKind::kExp, a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <std::floating_point T>
Var<T> log(const Var<T>& a) {
  return detail::unary<T>(OpKind::kLog, a, [](T x) { return std::log(x); }, [](T x, T) { return T{1} / x; });
}

template <std::floating_point T>
Var<T> detach(const Var<T>& a) {
  return a.tape().constant(BasicTensor<T>(a.shape(), a.value().values()));
}

template <std::floating_point T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  if (numel_of(shape) != a.value().numel()) {
    throw DimensionError("reshape: " + shape_string(a.shape()) + " to " + shape_string(shape));
  }
  BasicTensor<T> out(std::move(shape), a.value().values());
  const std::size_t ia = a.id();
  return a.tape().record(OpKind::kReshape, std::move(out), {a},
                         [ia](Tape<T>& tape, std::span<const T> g) { tape.accumulate(ia, g); });
}

template <std::floating_point T>
Var<T> transpose(const Var<T>& a) {
  detail::require_rank2(a.shape(), "transpose");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  BasicTensor<T> out(Shape{n, m});
  const auto& av = a.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  const std::size_t ia = a.id();
  return a.tape().record(OpKind::kTranspose, std::move(out), {a}, [ia, m, n](Tape<T>& tape, std::span<const T> g) {
    std::vector<T> ga(m * n);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] = g[j * m + i];
    tape.accumulate(ia, ga);
  });
}

/// Concatenates matrices along `axis` (0 stacks rows, 1 joins columns).
template <std::floating_point T>
Var<T> concat(std::span<const Var<T>> parts, int axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  if (axis != 0 && axis != 1) throw ContractError("concat axis must be 0 or 1");
  for (const auto& p : parts) detail::require_rank2(p.shape(), "concat");
  const std::size_t fixed = axis == 0 ? parts[0].shape()[1] : parts[0].shape()[0];
  std::size_t total = 0;
  for (const auto& p : parts) {
    const std::size_t f = axis == 0 ? p.shape()[1] : p.shape()[0];
    if (f != fixed) {
      throw DimensionError("concat: " + shape_string(parts[0].shape()) + " and " + shape_string(p.shape()) +
                           " disagree off-axis");
    }
    total += axis == 0 ? p.shape()[0] : p.shape()[1];
  }
  const Shape out_shape = axis == 0 ? Shape{total, fixed} : Shape{fixed, total};
  BasicTensor<T> out(out_shape);
  std::vector<std::size_t> ids, offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    const std::size_t m = v.shape()[0], n = v.shape()[1];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        if (axis == 0) out(offset + i, j) = v(i, j);
        else out(i, offset + j) = v(i, j);
      }
    ids.push_back(p.id());
    offsets.push_back(offset);
    offset += axis == 0 ? m : n;
  }
  const std::size_t out_cols = out.cols();
  return parts[0].tape().record(OpKind::kConcat, std::move(out), parts,
                                [ids, offsets, axis, out_cols](Tape<T>& tape, std::span<const T> g) {
                                  for (std::size_t p = 0; p < ids.size(); ++p) {
                                    if (!tape.tracks(ids[p])) continue;
                                    const auto& v = tape.value(ids[p]);
                                    const std::size_t m = v.shape()[0], n = v.shape()[1];
                                    std::vector<T> gp(m * n);
                                    for (std::size_t i = 0; i < m; ++i)
                                      for (std::size_t j = 0; j < n; ++j) {
                                        const std::size_t r = axis == 0 ? offsets[p] + i : i;
                                        const std::size_t c = axis == 0 ? j : offsets[p] + j;
                                        gp[i * n + j] = g[r * out_cols + c];
                                      }
                                    tape.accumulate(ids[p], gp);
                                  }
                                });
}

template <std::floating_point T>
Var<T> concat(std::initializer_list<Var<T>> parts, int axis) {
  return concat<T>(std::span<const Var<T>>(parts.begin(), parts.size()), axis);
}

/// Half-open slice [begin, end) along `axis` of a matrix.
template <std::floating_point T>
Var<T> slice(const Var<T>& a, int axis, std::size_t begin, std::size_t end) {
  detail::require_rank2(a.shape(), "slice");
  if (axis != 0 && axis != 1) throw ContractError("slice axis must be 0 or 1");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  const std::size_t extent = axis == 0 ? m : n;
  if (begin >= end || end > extent) {
    throw DimensionError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range for " +
                         shape_string(a.shape()));
  }
  const Shape out_shape = axis == 0 ? Shape{end - begin, n} : Shape{m, end - begin};
  BasicTensor<T> out(out_shape);
  const auto& av = a.value();
  for (std::size_t i = 0; i < out_shape[0]; ++i)
    for (std::size_t j = 0; j < out_shape[1]; ++j)
      out(i, j) = axis == 0 ? av(begin + i, j) : av(i, begin + j);
  const std::size_t ia = a.id();
  return a.tape().record(OpKind::kSlice, std::move(out), {a}, [ia, axis, begin, m, n, out_shape](Tape<T>& tape, std::span<const T> g) {
    std::vector<T> ga(m * n, T{0});
    for (std::size_t i = 0; i < out_shape[0]; ++i)
      for (std::size_t j = 0; j < out_shape[1]; ++j) {
        const std::size_t r = axis == 0 ? begin + i : i;
        const std::size_t c = axis == 0 ? j : begin + j;
        ga[r * n + c] = g[i * out_shape[1] + j];
      }
    tape.accumulate(ia, ga);
  });
}

/// Mean over `axis`, keeping it as a unit dimension.
template <std::floating_point T>
Var<T> mean(const Var<T>& a, int axis) {
  detail::require_rank2(a.shape(), "mean");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  if (axis != 0 && axis != 1) throw ContractError("mean axis must be 0 or 1");
  BasicTensor<T> out(axis == 0 ? Shape{1, n} : Shape{m, 1});
  const auto& av = a.value();
  const T inv = T{1} / static_cast<T>(axis == 0 ? m : n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[axis == 0 ? j : i] += av(i, j);
  for (auto& x : out.data()) x *= inv;
  const std::size_t ia = a.id();
  return a.tape().record(OpKind::kMean, std::move(out), {a}, [ia, m, n, axis, inv](Tape<T>& tape, std::span<const T> g) {
    std::vector<T> ga(m * n);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] = g[axis == 0 ? j : i] * inv;
    tape.accumulate(ia, ga);
  });
}

template <std::floating_point T>
Var<T> sum(const Var<T>& a) {
  T s{0};
  for (T x : a.value().data()) s += x;
  const std::size_t ia = a.id();
  const std::size_t count = a.value().numel();
  return a.tape().record(OpKind::kSum, BasicTensor<T>::scalar(s), {a}, [ia, count](Tape<T>& tape, std::span<const T> g) {
    tape.accumulate(ia, std::vector<T>(count, g[0]));
  });
}

/// Numerically stable softmax along `axis` (-1 means the last axis).
template <std::floating_point T>
Var<T> softmax(const Var<T>& a, int axis = -1) {
  const auto& av = a.value();
  const std::size_t m = av.rows(), n = av.cols();
  if (av.rank() == 2 && axis == 0) {
    return transpose(softmax(transpose(a), 1));
  }
  if (axis != -1 && axis != static_cast<int>(av.rank()) - 1) throw ContractError("softmax axis out of range");
  BasicTensor<T> out(av.shape());
  for (std::size_t i = 0; i < m; ++i) {
    const T* x = av.data().data() + i * n;
    T* y = out.data().data() + i * n;
    const T mx = *std::max_element(x, x + n);
    T z{0};
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    for (std::size_t j = 0; j < n; ++j) y[j] /= z;
  }
  const std::size_t ia = a.id();
  return a.tape().record(OpKind::kSoftmax, std::move(out), {a}, [ia, m, n, out_id = a.tape().size()](Tape<T>& tape, std::span<const T> g) {
    const auto& y = tape.value(out_id);
    std::vector<T> ga(m * n);
    for (std::size_t i = 0; i < m; ++i) {
      T dot{0};
      for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] = y[i * n + j] * (g[i * n + j] - dot);
    }
    tape.accumulate(ia, ga);
  });
}

/// Inverted dropout. Identity when the tape is in eval mode or rate is 0;
/// the sampled mask is captured by the backward rule.
template <std::floating_point T>
Var<T> dropout(const Var<T>& a, double rate) {
  if (rate < 0.0 || rate >= 1.0) throw ContractError("dropout rate must lie in [0, 1)");
  Tape<T>& tape = a.tape();
  if (!tape.train() || rate == 0.0) return a;
  std::bernoulli_distribution keep(1.0 - rate);
  const T inv_keep = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(a.value().numel());
  for (auto& m : mask) m = keep(tape.rng()) ? inv_keep : T{0};
  BasicTensor<T> out(a.shape());
  for (std::size_t k = 0; k < mask.size(); ++k) out[k] = a.value()[k] * mask[k];
  const std::size_t ia = a.id();
  return tape.record(OpKind::kDropout, std::move(out), {a}, [ia, mask = std::move(mask)](Tape<T>& t, std::span<const T> g) {
    std::vector<T> ga(g.size());
    for (std::size_t k = 0; k < g.size(); ++k) ga[k] = g[k] * mask[k];
    t.accumulate(ia, ga);
  });
}

/// Gathers rows `ids` of `table` into an ids.size()×d matrix.
template <std::floating_point T>
Var<T> embedding(const Var<T>& table, std::span<const int> ids) {
  detail::require_rank2(table.shape(), "embedding");
  const std::size_t vocab = table.shape()[0], d = table.shape()[1];
  BasicTensor<T> out(Shape{ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw ContractError("token id " + std::to_string(ids[i]) + " outside vocabulary of " + std::to_string(vocab));
    }
    const auto src = table.value().row(static_cast<std::size_t>(ids[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  const std::size_t it = table.id();
  std::vector<int> idx(ids.begin(), ids.end());
  return table.tape().record(OpKind::kEmbedding, std::move(out), {table}, [it, vocab, d, idx = std::move(idx)](Tape<T>& tape, std::span<const T> g) {
    std::vector<T> gt(vocab * d, T{0});
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) gt[static_cast<std::size_t>(idx[i]) * d + j] += g[i * d + j];
    tape.accumulate(it, gt);
  });
}

/// −log softmax(logits)[gold] for a single row of logits.
template <std::floating_point T>
Var<T> cross_entropy(const Var<T>& logits, std::size_t gold) {
  const auto& x = logits.value();
  const std::size_t r = x.numel();
  if (x.rows() != 1) throw DimensionError("cross_entropy expects one row of logits, got " + shape_string(x.shape()));
  if (gold >= r) throw ContractError("gold class " + std::to_string(gold) + " outside " + std::to_string(r) + " classes");
  const T mx = *std::max_element(x.data().begin(), x.data().end());
  T z{0};
  for (T v : x.data()) z += std::exp(v - mx);
  const T lse = mx + std::log(z);
  const std::size_t il = logits.id();
  return logits.tape().record(OpKind::kCrossEntropy, BasicTensor<T>::scalar(lse - x[gold]), {logits},
                              [il, gold, lse, r](Tape<T>& tape, std::span<const T> g) {
                                const auto& xv = tape.value(il);
                                std::vector<T> gl(r);
                                for (std::size_t k = 0; k < r; ++k) {
                                  gl[k] = g[0] * (std::exp(xv[k] - lse) - (k == gold ? T{1} : T{0}));
                                }
                                tape.accumulate(il, gl);
                              });
}

}  // namespace remote
