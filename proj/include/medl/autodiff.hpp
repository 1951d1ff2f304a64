#pragma once

// Define-by-run reverse-mode differentiation over dense double tensors.
//
// A Tape records every executed op together with its forward value. Leaves
// are either constants or parameters; backward() replays adjoints in reverse
// tape order and returns gradients for the parameter leaves only. A tape is
// meant to be rebuilt for every training step and is not thread-safe.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "medl/error.hpp"
#include "medl/tensor.hpp"

namespace medl {

enum class OpKind : std::uint8_t {
  constant,
  parameter,
  matmul,       // [a,b] x [b,c] -> [a,c]
  add,          // identical shapes
  sub,          // identical shapes
  mul,          // elementwise, identical shapes
  sigmoid,
  tanh,
  relu,         // adjoint at exactly 0 is 0
  exp,
  log,          // input must be > 0
  softplus,
  negate,
  concat,       // along the last axis; leading dims must agree
  slice,        // [begin, end) along the last axis
  reduce_sum,   // over one axis, or all elements when no axis is given
  reduce_mean,
  logsumexp,    // over one axis, or all elements
  add_row,      // [..., n] + [n]: the only broadcast supported
  scale,        // x * factor
  clamp,        // min(max(x, lo), hi); adjoint 1 inside [lo, hi]
};

inline const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::constant: return "constant";
    case OpKind::parameter: return "parameter";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::tanh: return "tanh";
    case OpKind::relu: return "relu";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::softplus: return "softplus";
    case OpKind::negate: return "negate";
    case OpKind::concat: return "concat";
    case OpKind::slice: return "slice";
    case OpKind::reduce_sum: return "reduce_sum";
    case OpKind::reduce_mean: return "reduce_mean";
    case OpKind::logsumexp: return "logsumexp";
    case OpKind::add_row: return "add_row";
    case OpKind::scale: return "scale";
    case OpKind::clamp: return "clamp";
  }
  return "?";
}

struct OpAttrs {
  std::optional<std::size_t> axis;  // reductions; empty reduces every element
  std::size_t begin = 0;            // slice
  std::size_t end = 0;
  double factor = 1.0;              // scale
  double lo = 0.0;                  // clamp
  double hi = 0.0;
};

/// Handle to a node on the tape that created it.
struct VarId {
  std::uint32_t tape = 0;
  std::uint32_t index = 0;
  friend bool operator==(VarId, VarId) = default;
};

namespace detail {

inline std::uint32_t next_tape_id() {
  static std::atomic<std::uint32_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

// Splits a shape around `axis` into (outer, n, inner) strides.
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace detail

inline double sigmoid(double x) { return detail::sigmoid(x); }
inline double softplus(double x) { return detail::softplus(x); }

/// Gradients of a scalar loss with respect to the parameter leaves of one tape.
class Gradients {
 public:
  Gradients(std::uint32_t tape, std::vector<std::optional<Tensor>> grads)
      : tape_(tape), grads_(std::move(grads)) {}

  const Tensor& operator[](VarId id) const {
    if (id.tape != tape_ || id.index >= grads_.size() || !grads_[id.index])
      throw Error("gradients: node " + std::to_string(id.index) + " is not a parameter of this tape");
    return *grads_[id.index];
  }

 private:
  std::uint32_t tape_;
  std::vector<std::optional<Tensor>> grads_;
};

class Tape {
 public:
  Tape() : id_(detail::next_tape_id()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  VarId constant(Tensor value) { return push(OpKind::constant, {}, std::move(value), {}); }
  VarId parameter(Tensor value) { return push(OpKind::parameter, {}, std::move(value), {}); }

  const Tensor& value(VarId id) const { return node(id).value; }
  const Shape& shape(VarId id) const { return node(id).value.shape(); }
  std::size_t size() const { return nodes_.size(); }

  /// Generic entry point; the named helpers below forward here.
  VarId forward_op(OpKind kind, std::span<const VarId> inputs, const OpAttrs& attrs = {}) {
    std::vector<std::uint32_t> idx;
    idx.reserve(inputs.size());
    for (VarId v : inputs) idx.push_back(node_index(v));
    Tensor out = compute(kind, idx, attrs);
    if (!out.all_finite()) {
      throw NumericError(std::string(op_name(kind)) + ": non-finite output at node " +
                         std::to_string(nodes_.size()));
    }
    return push(kind, std::move(idx), std::move(out), attrs);
  }

  VarId matmul(VarId a, VarId b) { return binary(OpKind::matmul, a, b); }
  VarId add(VarId a, VarId b) { return binary(OpKind::add, a, b); }
  VarId sub(VarId a, VarId b) { return binary(OpKind::sub, a, b); }
  VarId mul(VarId a, VarId b) { return binary(OpKind::mul, a, b); }
  VarId add_row(VarId x, VarId row) { return binary(OpKind::add_row, x, row); }
  VarId sigmoid(VarId x) { return unary(OpKind::sigmoid, x); }
  VarId tanh(VarId x) { return unary(OpKind::tanh, x); }
  VarId relu(VarId x) { return unary(OpKind::relu, x); }
  VarId exp(VarId x) { return unary(OpKind::exp, x); }
  VarId log(VarId x) { return unary(OpKind::log, x); }
  VarId softplus(VarId x) { return unary(OpKind::softplus, x); }
  VarId negate(VarId x) { return unary(OpKind::negate, x); }
  VarId concat(std::span<const VarId> parts) { return forward_op(OpKind::concat, parts); }
  VarId concat(VarId a, VarId b) {
    const VarId parts[] = {a, b};
    return forward_op(OpKind::concat, parts);
  }
  VarId slice(VarId x, std::size_t begin, std::size_t end) {
    OpAttrs attrs;
    attrs.begin = begin;
    attrs.end = end;
    return unary(OpKind::slice, x, attrs);
  }
  VarId reduce_sum(VarId x, std::optional<std::size_t> axis = std::nullopt) {
    OpAttrs attrs;
    attrs.axis = axis;
    return unary(OpKind::reduce_sum, x, attrs);
  }
  VarId reduce_mean(VarId x, std::optional<std::size_t> axis = std::nullopt) {
    OpAttrs attrs;
    attrs.axis = axis;
    return unary(OpKind::reduce_mean, x, attrs);
  }
  VarId logsumexp(VarId x, std::optional<std::size_t> axis = std::nullopt) {
    OpAttrs attrs;
    attrs.axis = axis;
    return unary(OpKind::logsumexp, x, attrs);
  }
  VarId scale(VarId x, double factor) {
    OpAttrs attrs;
    attrs.factor = factor;
    return unary(OpKind::scale, x, attrs);
  }
  VarId clamp(VarId x, double lo, double hi) {
    OpAttrs attrs;
    attrs.lo = lo;
    attrs.hi = hi;
    return unary(OpKind::clamp, x, attrs);
  }

  /// Reverse sweep from a scalar node. Returns gradients for every parameter leaf.
  Gradients backward(VarId loss) const {
    const std::uint32_t root = node_index(loss);
    if (nodes_[root].value.size() != 1)
      throw ShapeError("backward: loss must be scalar, got shape " +
                       shape_str(nodes_[root].value.shape()));

    std::vector<std::optional<Tensor>> adj(nodes_.size());
    adj[root] = Tensor(nodes_[root].value.shape(), 1.0);
    for (std::uint32_t i = root + 1; i-- > 0;) {
      if (!adj[i]) continue;
      const Node& n = nodes_[i];
      if (n.kind == OpKind::constant || n.kind == OpKind::parameter) continue;
      propagate(n, *adj[i], adj);
      adj[i].reset();  // intermediates are not needed after propagation
    }

    std::vector<std::optional<Tensor>> grads(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].kind != OpKind::parameter) continue;
      grads[i] = adj[i] ? std::move(*adj[i]) : Tensor(nodes_[i].value.shape(), 0.0);
    }
    return Gradients(id_, std::move(grads));
  }

 private:
  struct Node {
    OpKind kind;
    std::vector<std::uint32_t> inputs;
    Tensor value;
    OpAttrs attrs;
  };

  VarId unary(OpKind kind, VarId x, const OpAttrs& attrs = {}) {
    const VarId in[] = {x};
    return forward_op(kind, in, attrs);
  }
  VarId binary(OpKind kind, VarId a, VarId b) {
    const VarId in[] = {a, b};
    return forward_op(kind, in);
  }

  VarId push(OpKind kind, std::vector<std::uint32_t> inputs, Tensor value, const OpAttrs& attrs) {
    nodes_.push_back(Node{kind, std::move(inputs), std::move(value), attrs});
    return VarId{id_, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  std::uint32_t node_index(VarId id) const {
    if (id.tape != id_ || id.index >= nodes_.size())
      throw Error("tape: VarId " + std::to_string(id.index) + " was not issued by this tape");
    return id.index;
  }
  const Node& node(VarId id) const { return nodes_[node_index(id)]; }

  [[noreturn]] static void shape_fail(OpKind kind, const Shape& a, const Shape& b) {
    throw ShapeError(std::string(op_name(kind)) + ": incompatible shapes " + shape_str(a) +
                     " and " + shape_str(b));
  }

  static void expect_arity(OpKind kind, std::size_t got, std::size_t want) {
    if (got != want)
      throw ShapeError(std::string(op_name(kind)) + ": expected " + std::to_string(want) +
                       " inputs, got " + std::to_string(got));
  }

  static std::size_t check_axis(OpKind kind, const Shape& shape, const OpAttrs& attrs) {
    const std::size_t axis = *attrs.axis;
    if (axis >= shape.size())
      throw ShapeError(std::string(op_name(kind)) + ": axis " + std::to_string(axis) +
                       " out of range for shape " + shape_str(shape));
    return axis;
  }

  static Shape drop_axis(const Shape& shape, std::size_t axis) {
    Shape out = shape;
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
    return out;
  }

  Tensor compute(OpKind kind, const std::vector<std::uint32_t>& in, const OpAttrs& attrs) const {
    const std::size_t next = nodes_.size();
    auto val = [&](std::size_t k) -> const Tensor& { return nodes_[in[k]].value; };

    auto map_unary = [&](auto fn) {
      expect_arity(kind, in.size(), 1);
      Tensor out(val(0).shape());
      const auto x = val(0).data();
      auto o = out.data();
      for (std::size_t i = 0; i < x.size(); ++i) o[i] = fn(x[i]);
      return out;
    };
    auto map_binary = [&](auto fn) {
      expect_arity(kind, in.size(), 2);
      if (val(0).shape() != val(1).shape()) shape_fail(kind, val(0).shape(), val(1).shape());
      Tensor out(val(0).shape());
      const auto a = val(0).data();
      const auto b = val(1).data();
      auto o = out.data();
      for (std::size_t i = 0; i < a.size(); ++i) o[i] = fn(a[i], b[i]);
      return out;
    };

    switch (kind) {
      case OpKind::constant:
      case OpKind::parameter:
        throw Error("forward_op: leaves are created with constant() or parameter()");

      case OpKind::matmul: {
        expect_arity(kind, in.size(), 2);
        const Tensor& a = val(0);
        const Tensor& b = val(1);
        if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) shape_fail(kind, a.shape(), b.shape());
        const std::size_t n = a.dim(0), inner = a.dim(1), m = b.dim(1);
        Tensor out({n, m});
        auto o = out.data();
        const auto ad = a.data();
        const auto bd = b.data();
        for (std::size_t i = 0; i < n; ++i) {
          double* orow = o.data() + i * m;
          for (std::size_t p = 0; p < inner; ++p) {
            const double av = ad[i * inner + p];
            if (av == 0.0) continue;
            const double* brow = bd.data() + p * m;
            for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
          }
        }
        return out;
      }
      case OpKind::add: return map_binary([](double a, double b) { return a + b; });
      case OpKind::sub: return map_binary([](double a, double b) { return a - b; });
      case OpKind::mul: return map_binary([](double a, double b) { return a * b; });
      case OpKind::sigmoid: return map_unary([](double x) { return detail::sigmoid(x); });
      case OpKind::tanh: return map_unary([](double x) { return std::tanh(x); });
      case OpKind::relu: return map_unary([](double x) { return x > 0.0 ? x : 0.0; });
      case OpKind::exp:
        return map_unary([&](double x) {
          const double e = std::exp(x);
          if (!std::isfinite(e))
            throw DomainError("exp: overflow at node " + std::to_string(next) + " (input " +
                              std::to_string(x) + ")");
          return e;
        });
      case OpKind::log:
        return map_unary([&](double x) {
          if (!(x > 0.0))
            throw DomainError("log: non-positive input at node " + std::to_string(next) + " (input " +
                              std::to_string(x) + ")");
          return std::log(x);
        });
      case OpKind::softplus: return map_unary([](double x) { return detail::softplus(x); });
      case OpKind::negate: return map_unary([](double x) { return -x; });
      case OpKind::scale: return map_unary([f = attrs.factor](double x) { return f * x; });
      case OpKind::clamp: {
        if (!(attrs.lo <= attrs.hi)) throw DomainError("clamp: lo > hi");
        return map_unary([&](double x) { return std::clamp(x, attrs.lo, attrs.hi); });
      }

      case OpKind::add_row: {
        expect_arity(kind, in.size(), 2);
        const Tensor& x = val(0);
        const Tensor& row = val(1);
        if (x.rank() < 1 || row.rank() != 1 || row.dim(0) != x.shape().back())
          shape_fail(kind, x.shape(), row.shape());
        Tensor out = x;
        auto o = out.data();
        const auto r = row.data();
        const std::size_t w = r.size();
        for (std::size_t i = 0; i < o.size(); ++i) o[i] += r[i % w];
        return out;
      }

      case OpKind::concat: {
        if (in.empty()) throw ShapeError("concat: no inputs");
        const Shape& first = val(0).shape();
        if (first.empty()) throw ShapeError("concat: scalar input");
        Shape lead(first.begin(), first.end() - 1);
        std::size_t total = 0;
        for (std::size_t k = 0; k < in.size(); ++k) {
          const Shape& s = val(k).shape();
          if (s.size() != first.size() || !std::equal(lead.begin(), lead.end(), s.begin()))
            shape_fail(kind, first, s);
          total += s.back();
        }
        Shape out_shape = lead;
        out_shape.push_back(total);
        Tensor out(out_shape);
        const std::size_t outer = shape_size(lead);
        auto o = out.data();
        std::size_t offset = 0;
        for (std::size_t k = 0; k < in.size(); ++k) {
          const auto src = val(k).data();
          const std::size_t w = val(k).shape().back();
          for (std::size_t r = 0; r < outer; ++r)
            std::copy_n(src.data() + r * w, w, o.data() + r * total + offset);
          offset += w;
        }
        return out;
      }

      case OpKind::slice: {
        expect_arity(kind, in.size(), 1);
        const Tensor& x = val(0);
        if (x.rank() < 1 || attrs.begin >= attrs.end || attrs.end > x.shape().back())
          throw ShapeError("slice: range [" + std::to_string(attrs.begin) + ", " +
                           std::to_string(attrs.end) + ") invalid for shape " + shape_str(x.shape()));
        Shape out_shape = x.shape();
        const std::size_t w = out_shape.back();
        const std::size_t sw = attrs.end - attrs.begin;
        out_shape.back() = sw;
        Tensor out(out_shape);
        const std::size_t outer = x.size() / w;
        auto o = out.data();
        const auto src = x.data();
        for (std::size_t r = 0; r < outer; ++r)
          std::copy_n(src.data() + r * w + attrs.begin, sw, o.data() + r * sw);
        return out;
      }

      case OpKind::reduce_sum:
      case OpKind::reduce_mean:
      case OpKind::logsumexp: {
        expect_arity(kind, in.size(), 1);
        const Tensor& x = val(0);
        detail::AxisSplit s;
        Shape out_shape;
        if (attrs.axis) {
          const std::size_t axis = check_axis(kind, x.shape(), attrs);
          s = detail::split_axis(x.shape(), axis);
          out_shape = drop_axis(x.shape(), axis);
        } else {
          s.n = x.size();
        }
        Tensor out(out_shape);
        const auto xd = x.data();
        auto o = out.data();
        for (std::size_t a = 0; a < s.outer; ++a) {
          for (std::size_t c = 0; c < s.inner; ++c) {
            const std::size_t base = a * s.n * s.inner + c;
            double acc = 0.0;
            if (kind == OpKind::logsumexp) {
              double mx = -std::numeric_limits<double>::infinity();
              for (std::size_t i = 0; i < s.n; ++i) mx = std::max(mx, xd[base + i * s.inner]);
              for (std::size_t i = 0; i < s.n; ++i) acc += std::exp(xd[base + i * s.inner] - mx);
              acc = mx + std::log(acc);
            } else {
              for (std::size_t i = 0; i < s.n; ++i) acc += xd[base + i * s.inner];
              if (kind == OpKind::reduce_mean) acc /= static_cast<double>(s.n);
            }
            o[a * s.inner + c] = acc;
          }
        }
        return out;
      }
    }
    throw Error("forward_op: unknown op");
  }

  void propagate(const Node& n, const Tensor& g, std::vector<std::optional<Tensor>>& adj) const {
    auto accum = [&](std::uint32_t target) -> Tensor& {
      if (!adj[target]) adj[target] = Tensor(nodes_[target].value.shape(), 0.0);
      return *adj[target];
    };
    auto in_val = [&](std::size_t k) -> const Tensor& { return nodes_[n.inputs[k]].value; };
    const auto gd = g.data();

    // d input = g * f'(x, y) for elementwise unary ops.
    auto unary_adj = [&](auto dfn) {
      Tensor& a = accum(n.inputs[0]);
      const auto x = in_val(0).data();
      const auto y = n.value.data();
      auto ad = a.data();
      for (std::size_t i = 0; i < ad.size(); ++i) ad[i] += gd[i] * dfn(x[i], y[i]);
    };

    switch (n.kind) {
      case OpKind::constant:
      case OpKind::parameter:
        return;
      case OpKind::matmul: {
        const Tensor& a = in_val(0);
        const Tensor& b = in_val(1);
        const std::size_t rows = a.dim(0), inner = a.dim(1), cols = b.dim(1);
        const auto ad = a.data();
        const auto bd = b.data();
        {
          // dA = G B^T
          auto da = accum(n.inputs[0]).data();
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t p = 0; p < inner; ++p) {
              double acc = 0.0;
              for (std::size_t j = 0; j < cols; ++j) acc += gd[i * cols + j] * bd[p * cols + j];
              da[i * inner + p] += acc;
            }
        }
        {
          // dB = A^T G
          auto db = accum(n.inputs[1]).data();
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t p = 0; p < inner; ++p) {
              const double av = ad[i * inner + p];
              if (av == 0.0) continue;
              for (std::size_t j = 0; j < cols; ++j) db[p * cols + j] += av * gd[i * cols + j];
            }
        }
        return;
      }
      case OpKind::add:
      case OpKind::sub: {
        auto da = accum(n.inputs[0]).data();
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += gd[i];
        auto db = accum(n.inputs[1]).data();
        const double sign = n.kind == OpKind::add ? 1.0 : -1.0;
        for (std::size_t i = 0; i < db.size(); ++i) db[i] += sign * gd[i];
        return;
      }
      case OpKind::mul: {
        const auto x = in_val(0).data();
        const auto y = in_val(1).data();
        auto da = accum(n.inputs[0]).data();
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += gd[i] * y[i];
        auto db = accum(n.inputs[1]).data();
        for (std::size_t i = 0; i < db.size(); ++i) db[i] += gd[i] * x[i];
        return;
      }
      case OpKind::add_row: {
        auto dx = accum(n.inputs[0]).data();
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += gd[i];
        auto dr = accum(n.inputs[1]).data();
        const std::size_t w = dr.size();
        for (std::size_t i = 0; i < gd.size(); ++i) dr[i % w] += gd[i];
        return;
      }
      case OpKind::sigmoid: return unary_adj([](double, double y) { return y * (1.0 - y); });
      case OpKind::tanh: return unary_adj([](double, double y) { return 1.0 - y * y; });
      case OpKind::relu: return unary_adj([](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
      case OpKind::exp: return unary_adj([](double, double y) { return y; });
      case OpKind::log: return unary_adj([](double x, double) { return 1.0 / x; });
      case OpKind::softplus: return unary_adj([](double x, double) { return detail::sigmoid(x); });
      case OpKind::negate: return unary_adj([](double, double) { return -1.0; });
      case OpKind::scale: return unary_adj([f = n.attrs.factor](double, double) { return f; });
      case OpKind::clamp:
        return unary_adj([&](double x, double) {
          return (x >= n.attrs.lo && x <= n.attrs.hi) ? 1.0 : 0.0;
        });
      case OpKind::concat: {
        const std::size_t total = n.value.shape().back();
        const std::size_t outer = n.value.size() / total;
        std::size_t offset = 0;
        for (std::uint32_t input : n.inputs) {
          const std::size_t w = nodes_[input].value.shape().back();
          auto d = accum(input).data();
          for (std::size_t r = 0; r < outer; ++r)
            for (std::size_t c = 0; c < w; ++c) d[r * w + c] += gd[r * total + offset + c];
          offset += w;
        }
        return;
      }
      case OpKind::slice: {
        const std::size_t w = in_val(0).shape().back();
        const std::size_t sw = n.attrs.end - n.attrs.begin;
        const std::size_t outer = in_val(0).size() / w;
        auto d = accum(n.inputs[0]).data();
        for (std::size_t r = 0; r < outer; ++r)
          for (std::size_t c = 0; c < sw; ++c) d[r * w + n.attrs.begin + c] += gd[r * sw + c];
        return;
      }
      case OpKind::reduce_sum:
      case OpKind::reduce_mean:
      case OpKind::logsumexp: {
        const Tensor& x = in_val(0);
        detail::AxisSplit s;
        if (n.attrs.axis)
          s = detail::split_axis(x.shape(), *n.attrs.axis);
        else
          s.n = x.size();
        const auto xd = x.data();
        const auto yd = n.value.data();
        auto d = accum(n.inputs[0]).data();
        const double inv_n = 1.0 / static_cast<double>(s.n);
        for (std::size_t a = 0; a < s.outer; ++a)
          for (std::size_t c = 0; c < s.inner; ++c) {
            const std::size_t o = a * s.inner + c;
            const std::size_t base = a * s.n * s.inner + c;
            for (std::size_t i = 0; i < s.n; ++i) {
              const std::size_t k = base + i * s.inner;
              double w = 1.0;
              if (n.kind == OpKind::reduce_mean) w = inv_n;
              if (n.kind == OpKind::logsumexp) w = std::exp(xd[k] - yd[o]);
              d[k] += gd[o] * w;
            }
          }
        return;
      }
    }
  }

  std::uint32_t id_;
  std::vector<Node> nodes_;
};

/// Worst disagreement between backward() and central differences.
struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

/// Builds a scalar on a fresh tape from parameter leaves (one per entry of `params`).
using ScalarBuilder = std::function<VarId(Tape&, std::span<const VarId>)>;

/// Compares reverse-mode gradients of `f` with (f(p+h) - f(p-h)) / 2h per coordinate.
/// Relative error is |a - n| / max(|a|, |n|, floor).
inline GradCheckReport finite_diff_check(const ScalarBuilder& f, std::vector<Tensor> params,
                                         double step, double floor = 1e-8) {
  auto evaluate = [&](Tape& tape) {
    std::vector<VarId> ids;
    ids.reserve(params.size());
    for (const Tensor& p : params) ids.push_back(tape.parameter(p));
    return std::pair{f(tape, ids), ids};
  };
  auto value_at = [&] {
    Tape tape;
    return tape.value(evaluate(tape).first).item();
  };

  std::vector<Tensor> analytic;
  {
    Tape tape;
    auto [out, ids] = evaluate(tape);
    const Gradients grads = tape.backward(out);
    for (VarId id : ids) analytic.push_back(grads[id]);
  }

  GradCheckReport report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      const double saved = params[p][i];
      params[p][i] = saved + step;
      const double up = value_at();
      params[p][i] = saved - step;
      const double down = value_at();
      params[p][i] = saved;

      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[p][i];
      const double err =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      if (report.coordinates++ == 0 || err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_param = p;
        report.worst_index = i;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace medl
