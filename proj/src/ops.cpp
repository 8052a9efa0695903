#include "nepa/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace nepa {

namespace {

using NodePtr = std::shared_ptr<TensorNode>;

GradTape* tape_for(std::initializer_list<const Tensor*> inputs) {
  GradTape* tape = GradTape::active();
  if (!tape) return nullptr;
  for (const Tensor* t : inputs)
    if (t->defined() && t->requires_grad()) return tape;
  return nullptr;
}

template <class S>
std::vector<S>& vals(const NodePtr& n) {
  return std::get<std::vector<S>>(n->data);
}

template <class S>
std::vector<S>& grads(const NodePtr& n) {
  if (!n->grad) n->grad = std::vector<S>(std::get<std::vector<S>>(n->data).size(), S(0));
  return std::get<std::vector<S>>(*n->grad);
}

void require_same_dtype(const char* op, const Tensor& a, const Tensor& b) {
  if (a.dtype() != b.dtype())
    throw ShapeError(std::string(op) + ": dtype mismatch " + std::string(dtype_name(a.dtype())) +
                     " vs " + std::string(dtype_name(b.dtype())));
}

int normalize_axis(int axis, int rank, const char* op) {
  int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank)
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  return a;
}

Tensor empty_like_shape(Shape shape, DType dtype) { return Tensor::zeros(std::move(shape), dtype); }

// ---- GEMM -----------------------------------------------------------------

void gemm(bool ta, bool tb, int m, int n, int k, const float* a, const float* b, float* c,
          float beta) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m,
              n, k, 1.0f, a, ta ? m : k, b, tb ? k : n, beta, c, n);
}

void gemm(bool ta, bool tb, int m, int n, int k, const double* a, const double* b, double* c,
          double beta) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m,
              n, k, 1.0, a, ta ? m : k, b, tb ? k : n, beta, c, n);
}

// ---- elementwise helpers ---------------------------------------------------

void check_suffix(const char* op, const Tensor& a, const Tensor& b) {
  require_same_dtype(op, a, b);
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  bool ok = sb.size() <= sa.size() &&
            std::equal(sb.rbegin(), sb.rend(), sa.rbegin());
  if (!ok)
    throw ShapeError(std::string(op) + ": shape " + shape_str(sb) +
                     " is not a trailing suffix of " + shape_str(sa));
}

enum class BinOp { add, sub, mul };

Tensor binary(const char* name, BinOp kind, const Tensor& a, const Tensor& b) {
  check_suffix(name, a, b);
  Tensor out = empty_like_shape(a.shape(), a.dtype());
  dispatch(a.dtype(), [&]<class S>() {
    auto x = a.data<S>();
    auto y = b.data<S>();
    auto o = out.mutable_data<S>();
    const std::size_t nb = y.size();
    for (std::size_t i = 0, j = 0; i < o.size(); ++i, j = (j + 1 == nb ? 0 : j + 1)) {
      switch (kind) {
        case BinOp::add: o[i] = x[i] + y[j]; break;
        case BinOp::sub: o[i] = x[i] - y[j]; break;
        case BinOp::mul: o[i] = x[i] * y[j]; break;
      }
    }
  });
  if (auto* tape = tape_for({&a, &b})) {
    out.set_requires_grad(true);
    NodePtr an = a.node(), bn = b.node(), on = out.node();
    tape->record(name, {an, bn}, on, [an, bn, on, kind]() {
      dispatch(on->dtype, [&]<class S>() {
        const auto& g = grads<S>(on);
        const std::size_t nb = vals<S>(bn).size();
        if (an->requires_grad) {
          auto& ga = grads<S>(an);
          if (kind == BinOp::mul) {
            const auto& y = vals<S>(bn);
            for (std::size_t i = 0, j = 0; i < g.size(); ++i, j = (j + 1 == nb ? 0 : j + 1))
              ga[i] += g[i] * y[j];
          } else {
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
          }
        }
        if (bn->requires_grad) {
          auto& gb = grads<S>(bn);
          const auto& x = vals<S>(an);
          for (std::size_t i = 0, j = 0; i < g.size(); ++i, j = (j + 1 == nb ? 0 : j + 1)) {
            switch (kind) {
              case BinOp::add: gb[j] += g[i]; break;
              case BinOp::sub: gb[j] -= g[i]; break;
              case BinOp::mul: gb[j] += g[i] * x[i]; break;
            }
          }
        }
      });
    });
  }
  return out;
}

// Unary op with derivative computed from (input, output).
template <class Fwd, class Deriv>
Tensor unary(const char* name, const Tensor& x, Fwd fwd, Deriv deriv) {
  Tensor out = empty_like_shape(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class S>() {
    auto in = x.data<S>();
    auto o = out.mutable_data<S>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = static_cast<S>(fwd(static_cast<double>(in[i])));
  });
  if (auto* tape = tape_for({&x})) {
    out.set_requires_grad(true);
    NodePtr xn = x.node(), on = out.node();
    tape->record(name, {xn}, on, [xn, on, deriv]() {
      dispatch(on->dtype, [&]<class S>() {
        const auto& g = grads<S>(on);
        const auto& in = vals<S>(xn);
        auto& gx = grads<S>(xn);
        for (std::size_t i = 0; i < g.size(); ++i)
          gx[i] += g[i] * static_cast<S>(deriv(static_cast<double>(in[i])));
      });
    });
  }
  return out;
}

// Generic index remap: out[i] = in[src[i]]; backward scatters.
Tensor gather_flat(const char* name, const Tensor& x, Shape shape,
                   std::shared_ptr<const std::vector<std::int64_t>> src) {
  Tensor out = empty_like_shape(std::move(shape), x.dtype());
  dispatch(x.dtype(), [&]<class S>() {
    auto in = x.data<S>();
    auto o = out.mutable_data<S>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = in[static_cast<std::size_t>((*src)[i])];
  });
  if (auto* tape = tape_for({&x})) {
    out.set_requires_grad(true);
    NodePtr xn = x.node(), on = out.node();
    tape->record(name, {xn}, on, [xn, on, src]() {
      dispatch(on->dtype, [&]<class S>() {
        const auto& g = grads<S>(on);
        auto& gx = grads<S>(xn);
        for (std::size_t i = 0; i < g.size(); ++i) gx[static_cast<std::size_t>((*src)[i])] += g[i];
      });
    });
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_same_dtype("matmul", a, b);
  if (a.rank() < 2 || b.rank() < 2)
    throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  const auto m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  if (b.dim(-2) != k)
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const bool shared_b = b.rank() == 2;
  Shape batch(a.shape().begin(), a.shape().end() - 2);
  if (!shared_b) {
    Shape bbatch(b.shape().begin(), b.shape().end() - 2);
    if (bbatch != batch)
      throw ShapeError("matmul: batch dims differ, " + shape_str(a.shape()) + " x " +
                       shape_str(b.shape()));
  }
  const auto nbatch = numel(batch);
  Shape oshape = batch;
  oshape.push_back(m);
  oshape.push_back(n);
  Tensor out = empty_like_shape(oshape, a.dtype());
  dispatch(a.dtype(), [&]<class S>() {
    const S* pa = a.data<S>().data();
    const S* pb = b.data<S>().data();
    S* po = out.mutable_data<S>().data();
    if (shared_b) {
      if (nbatch * m > 0 && n > 0)
        gemm(false, false, static_cast<int>(nbatch * m), static_cast<int>(n), static_cast<int>(k),
             pa, pb, po, S(0));
    } else {
      for (std::int64_t i = 0; i < nbatch; ++i)
        gemm(false, false, static_cast<int>(m), static_cast<int>(n), static_cast<int>(k),
             pa + i * m * k, pb + i * k * n, po + i * m * n, S(0));
    }
  });
  if (auto* tape = tape_for({&a, &b})) {
    out.set_requires_grad(true);
    NodePtr an = a.node(), bn = b.node(), on = out.node();
    tape->record("matmul", {an, bn}, on, [an, bn, on, m, k, n, nbatch, shared_b]() {
      dispatch(on->dtype, [&]<class S>() {
        const S* g = grads<S>(on).data();
        const S* pa = vals<S>(an).data();
        const S* pb = vals<S>(bn).data();
        if (an->requires_grad) {
          S* ga = grads<S>(an).data();
          if (shared_b) {
            gemm(false, true, static_cast<int>(nbatch * m), static_cast<int>(k), static_cast<int>(n),
                 g, pb, ga, S(1));
          } else {
            for (std::int64_t i = 0; i < nbatch; ++i)
              gemm(false, true, static_cast<int>(m), static_cast<int>(k), static_cast<int>(n),
                   g + i * m * n, pb + i * k * n, ga + i * m * k, S(1));
          }
        }
        if (bn->requires_grad) {
          S* gb = grads<S>(bn).data();
          if (shared_b) {
            gemm(true, false, static_cast<int>(k), static_cast<int>(n), static_cast<int>(nbatch * m),
                 pa, g, gb, S(1));
          } else {
            for (std::int64_t i = 0; i < nbatch; ++i)
              gemm(true, false, static_cast<int>(k), static_cast<int>(n), static_cast<int>(m),
                   pa + i * m * k, g + i * m * n, gb + i * k * n, S(1));
          }
        }
      });
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return binary("add", BinOp::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary("sub", BinOp::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary("mul", BinOp::mul, a, b); }

Tensor scale(const Tensor& a, double factor) {
  return unary("scale", a, [factor](double x) { return x * factor; },
               [factor](double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double offset) {
  return unary("add_scalar", a, [offset](double x) { return x + offset; },
               [](double) { return 1.0; });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor gelu(const Tensor& x) {
  return unary(
      "gelu", x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v))); },
      [](double v) {
        double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      });
}

Tensor silu(const Tensor& x) {
  return unary(
      "silu", x, [](double v) { return v / (1.0 + std::exp(-v)); },
      [](double v) {
        double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 + v * (1.0 - s));
      });
}

Tensor reshape(const Tensor& x, Shape shape) {
  int infer = -1;
  std::int64_t known = 1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one -1 in " + shape_str(shape));
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0 && known > 0) shape[static_cast<std::size_t>(infer)] = x.numel() / known;
  if (numel(shape) != x.numel())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  Tensor out(std::make_shared<TensorNode>(TensorNode{shape, x.dtype(), x.node()->data, {}, false}));
  if (auto* tape = tape_for({&x})) {
    out.set_requires_grad(true);
    NodePtr xn = x.node(), on = out.node();
    tape->record("reshape", {xn}, on, [xn, on]() {
      dispatch(on->dtype, [&]<class S>() {
        const auto& g = grads<S>(on);
        auto& gx = grads<S>(xn);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      });
    });
  }
  return out;
}

Tensor permute(const Tensor& x, std::vector<int> order) {
  const int r = x.rank();
  if (static_cast<int>(order.size()) != r)
    throw ShapeError("permute: order has " + std::to_string(order.size()) + " axes for shape " +
                     shape_str(x.shape()));
  std::vector<bool> seen(static_cast<std::size_t>(r), false);
  for (auto& o : order) {
    o = normalize_axis(o, r, "permute");
    if (seen[static_cast<std::size_t>(o)]) throw ShapeError("permute: repeated axis");
    seen[static_cast<std::size_t>(o)] = true;
  }
  const auto& in_shape = x.shape();
  std::vector<std::int64_t> in_stride(static_cast<std::size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i)
    in_stride[static_cast<std::size_t>(i)] =
        in_stride[static_cast<std::size_t>(i + 1)] * in_shape[static_cast<std::size_t>(i + 1)];
  Shape out_shape(static_cast<std::size_t>(r));
  std::vector<std::int64_t> stride(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    out_shape[static_cast<std::size_t>(i)] = in_shape[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
    stride[static_cast<std::size_t>(i)] = in_stride[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
  }
  auto src = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(x.numel()));
  std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
  std::int64_t offset = 0;
  for (auto& s : *src) {
    s = offset;
    for (int d = r - 1; d >= 0; --d) {
      auto du = static_cast<std::size_t>(d);
      ++idx[du];
      offset += stride[du];
      if (idx[du] < out_shape[du]) break;
      offset -= stride[du] * idx[du];
      idx[du] = 0;
    }
  }
  return gather_flat("permute", x, std::move(out_shape), std::move(src));
}

Tensor transpose(const Tensor& x, int dim0, int dim1) {
  std::vector<int> order(static_cast<std::size_t>(x.rank()));
  std::iota(order.begin(), order.end(), 0);
  dim0 = normalize_axis(dim0, x.rank(), "transpose");
  dim1 = normalize_axis(dim1, x.rank(), "transpose");
  std::swap(order[static_cast<std::size_t>(dim0)], order[static_cast<std::size_t>(dim1)]);
  return permute(x, std::move(order));
}

Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t end) {
  axis = normalize_axis(axis, x.rank(), "slice");
  const auto extent = x.dim(axis);
  if (start < 0 || end > extent || start > end)
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(end) +
                     ") invalid for axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  Shape shape = x.shape();
  shape[static_cast<std::size_t>(axis)] = end - start;
  auto src = std::make_shared<std::vector<std::int64_t>>();
  src->reserve(static_cast<std::size_t>(outer * (end - start) * inner));
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t j = start; j < end; ++j)
      for (std::int64_t i = 0; i < inner; ++i) src->push_back((o * extent + j) * inner + i);
  return gather_flat("slice", x, std::move(shape), std::move(src));
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Tensor& first = parts.front();
  axis = normalize_axis(axis, first.rank(), "concat");
  Shape shape = first.shape();
  std::int64_t total = 0;
  for (const auto& p : parts) {
    require_same_dtype("concat", first, p);
    Shape a = p.shape(), b = first.shape();
    if (a.size() != b.size()) throw ShapeError("concat: rank mismatch " + shape_str(a) + " vs " + shape_str(b));
    a[static_cast<std::size_t>(axis)] = b[static_cast<std::size_t>(axis)] = 0;
    if (a != b) throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(first.shape()));
    total += p.dim(axis);
  }
  shape[static_cast<std::size_t>(axis)] = total;
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= first.dim(i);
  for (int i = axis + 1; i < first.rank(); ++i) inner *= first.dim(i);
  Tensor out = empty_like_shape(shape, first.dtype());
  dispatch(first.dtype(), [&]<class S>() {
    auto o = out.mutable_data<S>();
    std::int64_t col = 0;
    for (const auto& p : parts) {
      auto in = p.data<S>();
      const auto w = p.dim(axis) * inner;
      for (std::int64_t r = 0; r < outer; ++r)
        std::copy_n(in.begin() + r * w, w, o.begin() + r * total * inner + col);
      col += w;
    }
  });
  GradTape* tape = GradTape::active();
  bool any = std::any_of(parts.begin(), parts.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (tape && any) {
    out.set_requires_grad(true);
    std::vector<NodePtr> ins;
    for (const auto& p : parts) ins.push_back(p.node());
    NodePtr on = out.node();
    tape->record("concat", ins, on, [ins, on, outer, inner, total, axis]() {
      dispatch(on->dtype, [&]<class S>() {
        const auto& g = grads<S>(on);
        std::int64_t col = 0;
        for (const auto& pn : ins) {
          const auto w = pn->shape[static_cast<std::size_t>(axis)] * inner;
          if (pn->requires_grad) {
            auto& gp = grads<S>(pn);
            for (std::int64_t r = 0; r < outer; ++r)
              for (std::int64_t i = 0; i < w; ++i)
                gp[static_cast<std::size_t>(r * w + i)] += g[static_cast<std::size_t>(r * total * inner + col + i)];
          }
          col += w;
        }
      });
    });
  }
  return out;
}

namespace {

Tensor reduce_all(const char* name, const Tensor& x, double factor) {
  Tensor out = empty_like_shape({}, x.dtype());
  dispatch(x.dtype(), [&]<class S>() {
    double acc = 0;
    for (S v : x.data<S>()) acc += static_cast<double>(v);
    out.mutable_data<S>()[0] = static_cast<S>(acc * factor);
  });
  if (auto* tape = tape_for({&x})) {
    out.set_requires_grad(true);
    NodePtr xn = x.node(), on = out.node();
    tape->record(name, {xn}, on, [xn, on, factor]() {
      dispatch(on->dtype, [&]<class S>() {
        const S g = static_cast<S>(grads<S>(on)[0] * factor);
        for (auto& v : grads<S>(xn)) v += g;
      });
    });
  }
  return out;
}

Tensor reduce_dim(const char* name, const Tensor& x, int axis, bool average) {
  axis = normalize_axis(axis, x.rank(), name);
  std::int64_t outer = 1, inner = 1;
  const auto n = x.dim(axis);
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  Shape shape = x.shape();
  shape.erase(shape.begin() + axis);
  const double factor = average ? 1.0 / static_cast<double>(n) : 1.0;
  Tensor out = empty_like_shape(shape, x.dtype());
  dispatch(x.dtype(), [&]<class S>() {
    auto in = x.data<S>();
    auto o = out.mutable_data<S>();
    for (std::int64_t a = 0; a < outer; ++a)
      for (std::int64_t i = 0; i < inner; ++i) {
        S acc = 0;
        for (std::int64_t j = 0; j < n; ++j) acc += in[static_cast<std::size_t>((a * n + j) * inner + i)];
        o[static_cast<std::size_t>(a * inner + i)] = static_cast<S>(acc * factor);
      }
  });
  if (auto* tape = tape_for({&x})) {
    out.set_requires_grad(true);
    NodePtr xn = x.node(), on = out.node();
    tape->record(name, {xn}, on, [xn, on, outer, inner, n, factor]() {
      dispatch(on->dtype, [&]<class S>() {
        const auto& g = grads<S>(on);
        auto& gx = grads<S>(xn);
        for (std::int64_t a = 0; a < outer; ++a)
          for (std::int64_t j = 0; j < n; ++j)
            for (std::int64_t i = 0; i < inner; ++i)
              gx[static_cast<std::size_t>((a * n + j) * inner + i)] +=
                  static_cast<S>(g[static_cast<std::size_t>(a * inner + i)] * factor);
      });
    });
  }
  return out;
}

}  // namespace

Tensor sum(const Tensor& x) { return reduce_all("sum", x, 1.0); }
Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  return reduce_all("mean", x, 1.0 / static_cast<double>(x.numel()));
}
Tensor sum_dim(const Tensor& x, int axis) { return reduce_dim("sum_dim", x, axis, false); }
Tensor mean_dim(const Tensor& x, int axis) { return reduce_dim("mean_dim", x, axis, true); }

Tensor gather_rows(const Tensor& table, std::span<const std::int64_t> indices) {
  if (table.rank() != 2) throw ShapeError("gather_rows: table must be rank 2, got " + shape_str(table.shape()));
  const auto rows = table.dim(0), width = table.dim(1);
  auto src = std::make_shared<std::vector<std::int64_t>>();
  src->reserve(indices.size() * static_cast<std::size_t>(width));
  for (auto r : indices) {
    if (r < 0 || r >= rows)
      throw ShapeError("gather_rows: index " + std::to_string(r) + " outside table " + shape_str(table.shape()));
    for (std::int64_t c = 0; c < width; ++c) src->push_back(r * width + c);
  }
  return gather_flat("gather_rows", table, {static_cast<std::int64_t>(indices.size()), width}, std::move(src));
}

Tensor softmax_lastdim(const Tensor& x) {
  if (x.rank() < 1 || x.dim(-1) < 1) throw ShapeError("softmax_lastdim: empty last dim in " + shape_str(x.shape()));
  const auto n = x.dim(-1);
  const auto rows = x.numel() / n;
  Tensor out = empty_like_shape(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class S>() {
    auto in = x.data<S>();
    auto o = out.mutable_data<S>();
    for (std::int64_t r = 0; r < rows; ++r) {
      const S* row = in.data() + r * n;
      S* orow = o.data() + r * n;
      S mx = -std::numeric_limits<S>::infinity();
      for (std::int64_t j = 0; j < n; ++j) {
        if (std::isnan(row[j])) throw NumericError("softmax_lastdim: NaN in input");
        mx = std::max(mx, row[j]);
      }
      if (!std::isfinite(mx)) throw NumericError("softmax_lastdim: row without a finite logit");
      S total = 0;
      for (std::int64_t j = 0; j < n; ++j) {
        orow[j] = std::exp(row[j] - mx);
        total += orow[j];
      }
      for (std::int64_t j = 0; j < n; ++j) orow[j] /= total;
    }
  });
  if (auto* tape = tape_for({&x})) {
    out.set_requires_grad(true);
    NodePtr xn = x.node(), on = out.node();
    tape->record("softmax_lastdim", {xn}, on, [xn, on, n, rows]() {
      dispatch(on->dtype, [&]<class S>() {
        const auto& g = grads<S>(on);
        const auto& y = vals<S>(on);
        auto& gx = grads<S>(xn);
        for (std::int64_t r = 0; r < rows; ++r) {
          const auto base = static_cast<std::size_t>(r * n);
          S dot = 0;
          for (std::int64_t j = 0; j < n; ++j) dot += g[base + j] * y[base + j];
          for (std::int64_t j = 0; j < n; ++j) gx[base + j] += y[base + j] * (g[base + j] - dot);
        }
      });
    });
  }
  return out;
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (!(eps > 0)) throw ConfigError("layernorm: eps must be > 0, got " + std::to_string(eps));
  const auto d = x.dim(-1);
  for (const Tensor* p : {&gamma, &beta}) {
    if (p->defined()) {
      require_same_dtype("layernorm", x, *p);
      if (p->shape() != Shape{d})
        throw ShapeError("layernorm: affine shape " + shape_str(p->shape()) + " for input " + shape_str(x.shape()));
    }
  }
  const auto rows = x.numel() / d;
  Tensor out = empty_like_shape(x.shape(), x.dtype());
  auto xhat_store = std::make_shared<Buffer>();
  auto rstd_store = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
  dispatch(x.dtype(), [&]<class S>() {
    auto in = x.data<S>();
    auto o = out.mutable_data<S>();
    std::vector<S> xhat(in.size());
    const S* gw = gamma.defined() ? gamma.data<S>().data() : nullptr;
    const S* bw = beta.defined() ? beta.data<S>().data() : nullptr;
    for (std::int64_t r = 0; r < rows; ++r) {
      const auto base = static_cast<std::size_t>(r * d);
      double mu = 0;
      for (std::int64_t j = 0; j < d; ++j) mu += in[base + j];
      mu /= static_cast<double>(d);
      double var = 0;
      for (std::int64_t j = 0; j < d; ++j) {
        double c = in[base + j] - mu;
        var += c * c;
      }
      var /= static_cast<double>(d);
      const double rstd = 1.0 / std::sqrt(var + eps);
      (*rstd_store)[static_cast<std::size_t>(r)] = rstd;
      for (std::int64_t j = 0; j < d; ++j) {
        S h = static_cast<S>((in[base + j] - mu) * rstd);
        xhat[base + j] = h;
        S v = h;
        if (gw) v *= gw[j];
        if (bw) v += bw[j];
        o[base + j] = v;
      }
    }
    *xhat_store = std::move(xhat);
  });
  if (auto* tape = tape_for({&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    NodePtr xn = x.node(), on = out.node();
    NodePtr gn = gamma.defined() ? gamma.node() : nullptr;
    NodePtr bn = beta.defined() ? beta.node() : nullptr;
    std::vector<NodePtr> ins{xn};
    if (gn) ins.push_back(gn);
    if (bn) ins.push_back(bn);
    tape->record("layernorm", ins, on, [xn, gn, bn, on, xhat_store, rstd_store, d, rows]() {
      dispatch(on->dtype, [&]<class S>() {
        const auto& g = grads<S>(on);
        const auto& xhat = std::get<std::vector<S>>(*xhat_store);
        const S* gw = gn ? vals<S>(gn).data() : nullptr;
        if (gn && gn->requires_grad) {
          auto& gg = grads<S>(gn);
          for (std::size_t i = 0; i < g.size(); ++i) gg[i % static_cast<std::size_t>(d)] += g[i] * xhat[i];
        }
        if (bn && bn->requires_grad) {
          auto& gb = grads<S>(bn);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i % static_cast<std::size_t>(d)] += g[i];
        }
        if (xn->requires_grad) {
          auto& gx = grads<S>(xn);
          std::vector<double> dxhat(static_cast<std::size_t>(d));
          for (std::int64_t r = 0; r < rows; ++r) {
            const auto base = static_cast<std::size_t>(r * d);
            double m1 = 0, m2 = 0;
            for (std::int64_t j = 0; j < d; ++j) {
              double v = g[base + j] * (gw ? gw[j] : S(1));
              dxhat[static_cast<std::size_t>(j)] = v;
              m1 += v;
              m2 += v * xhat[base + j];
            }
            m1 /= static_cast<double>(d);
            m2 /= static_cast<double>(d);
            const double rstd = (*rstd_store)[static_cast<std::size_t>(r)];
            for (std::int64_t j = 0; j < d; ++j)
              gx[base + j] += static_cast<S>(rstd * (dxhat[static_cast<std::size_t>(j)] - m1 - xhat[base + j] * m2));
          }
        }
      });
    });
  }
  return out;
}

Tensor l2_normalize(const Tensor& x, double eps) {
  const auto d = x.dim(-1);
  const auto rows = x.numel() / d;
  Tensor out = empty_like_shape(x.shape(), x.dtype());
  auto norms = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
  dispatch(x.dtype(), [&]<class S>() {
    auto in = x.data<S>();
    auto o = out.mutable_data<S>();
    for (std::int64_t r = 0; r < rows; ++r) {
      const auto base = static_cast<std::size_t>(r * d);
      double sq = 0;
      for (std::int64_t j = 0; j < d; ++j) sq += static_cast<double>(in[base + j]) * in[base + j];
      const double nrm = std::sqrt(sq);
      (*norms)[static_cast<std::size_t>(r)] = nrm;
      const double denom = nrm > eps ? nrm : nrm + eps;
      for (std::int64_t j = 0; j < d; ++j) o[base + j] = static_cast<S>(in[base + j] / denom);
    }
  });
  if (auto* tape = tape_for({&x})) {
    out.set_requires_grad(true);
    NodePtr xn = x.node(), on = out.node();
    tape->record("l2_normalize", {xn}, on, [xn, on, norms, d, rows, eps]() {
      dispatch(on->dtype, [&]<class S>() {
        const auto& g = grads<S>(on);
        const auto& in = vals<S>(xn);
        auto& gx = grads<S>(xn);
        for (std::int64_t r = 0; r < rows; ++r) {
          const auto base = static_cast<std::size_t>(r * d);
          const double nrm = (*norms)[static_cast<std::size_t>(r)];
          const double denom = nrm > eps ? nrm : nrm + eps;
          double xg = 0;
          for (std::int64_t j = 0; j < d; ++j) xg += static_cast<double>(in[base + j]) * g[base + j];
          // d/dx [x / (n + c)] = g/(n+c) - x (x.g) / (n (n+c)^2); c = 0 above eps.
          const double coef = nrm > 0 ? xg / (nrm * denom * denom) : 0.0;
          for (std::int64_t j = 0; j < d; ++j)
            gx[base + j] += static_cast<S>(g[base + j] / denom - in[base + j] * coef);
        }
      });
    });
  }
  return out;
}

Tensor stop_gradient(const Tensor& x) {
  // Shares storage; never recorded, so nothing flows back to x.
  return Tensor(std::make_shared<TensorNode>(TensorNode{x.shape(), x.dtype(), x.node()->data, {}, false}));
}

Tensor rotate_pairs(const Tensor& x, std::span<const double> angles) {
  if (x.rank() < 2) throw ShapeError("rotate_pairs: need [..., T, d], got " + shape_str(x.shape()));
  const auto t = x.dim(-2), d = x.dim(-1);
  if (d % 2 != 0) throw ConfigError("rotate_pairs: last dim must be even, got " + std::to_string(d));
  const auto half = d / 2;
  if (static_cast<std::int64_t>(angles.size()) != t * half)
    throw ShapeError("rotate_pairs: angle table has " + std::to_string(angles.size()) + " entries, need " +
                     std::to_string(t * half));
  auto cs = std::make_shared<std::vector<double>>(angles.size());
  auto sn = std::make_shared<std::vector<double>>(angles.size());
  for (std::size_t i = 0; i < angles.size(); ++i) {
    (*cs)[i] = std::cos(angles[i]);
    (*sn)[i] = std::sin(angles[i]);
  }
  const auto groups = x.numel() / (t * d);
  Tensor out = empty_like_shape(x.shape(), x.dtype());
  auto rotate = [=](auto* dst, const auto* src, double sign) {
    for (std::int64_t gi = 0; gi < groups; ++gi)
      for (std::int64_t p = 0; p < t; ++p)
        for (std::int64_t j = 0; j < half; ++j) {
          const auto a = static_cast<std::size_t>(p * half + j);
          const auto i0 = static_cast<std::size_t>((gi * t + p) * d + 2 * j);
          const double c = (*cs)[a], s = sign * (*sn)[a];
          const double x1 = src[i0], x2 = src[i0 + 1];
          using S = std::remove_reference_t<decltype(*dst)>;
          dst[i0] += static_cast<S>(x1 * c - x2 * s);
          dst[i0 + 1] += static_cast<S>(x1 * s + x2 * c);
        }
  };
  dispatch(x.dtype(), [&]<class S>() { rotate(out.mutable_data<S>().data(), x.data<S>().data(), 1.0); });
  if (auto* tape = tape_for({&x})) {
    out.set_requires_grad(true);
    NodePtr xn = x.node(), on = out.node();
    tape->record("rotate_pairs", {xn}, on, [xn, on, rotate]() {
      dispatch(on->dtype, [&]<class S>() { rotate(grads<S>(xn).data(), grads<S>(on).data(), -1.0); });
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, const Tensor& target) {
  require_same_dtype("cross_entropy", logits, target);
  if (logits.rank() != 2 || target.shape() != logits.shape())
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs target " +
                     shape_str(target.shape()));
  const auto b = logits.dim(0), k = logits.dim(1);
  auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(b * k));
  Tensor out = empty_like_shape({}, logits.dtype());
  dispatch(logits.dtype(), [&]<class S>() {
    auto l = logits.data<S>();
    auto y = target.data<S>();
    double total = 0;
    for (std::int64_t r = 0; r < b; ++r) {
      const auto base = static_cast<std::size_t>(r * k);
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t j = 0; j < k; ++j) {
        if (!std::isfinite(l[base + j])) throw NumericError("cross_entropy: non-finite logit");
        mx = std::max(mx, static_cast<double>(l[base + j]));
      }
      double z = 0;
      for (std::int64_t j = 0; j < k; ++j) z += std::exp(l[base + j] - mx);
      const double lse = mx + std::log(z);
      for (std::int64_t j = 0; j < k; ++j) {
        (*probs)[base + j] = std::exp(l[base + j] - lse);
        total -= y[base + j] * (l[base + j] - lse);
      }
    }
    out.mutable_data<S>()[0] = static_cast<S>(total / static_cast<double>(b));
  });
  if (auto* tape = tape_for({&logits})) {
    out.set_requires_grad(true);
    NodePtr ln = logits.node(), yn = target.node(), on = out.node();
    tape->record("cross_entropy", {ln}, on, [ln, yn, on, probs, b, k]() {
      dispatch(on->dtype, [&]<class S>() {
        const double g = grads<S>(on)[0] / static_cast<double>(b);
        const auto& y = vals<S>(yn);
        auto& gl = grads<S>(ln);
        for (std::int64_t r = 0; r < b; ++r) {
          const auto base = static_cast<std::size_t>(r * k);
          double mass = 0;
          for (std::int64_t j = 0; j < k; ++j) mass += y[base + j];
          for (std::int64_t j = 0; j < k; ++j)
            gl[base + j] += static_cast<S>(g * ((*probs)[base + j] * mass - y[base + j]));
        }
      });
    });
  }
  return out;
}

Tensor replace_rows(const Tensor& x, const Tensor& token, std::span<const std::uint8_t> mask) {
  require_same_dtype("replace_rows", x, token);
  if (x.rank() != 3 || token.shape() != Shape{x.dim(2)})
    throw ShapeError("replace_rows: x " + shape_str(x.shape()) + ", token " + shape_str(token.shape()));
  const auto rows = x.dim(0) * x.dim(1), d = x.dim(2);
  if (static_cast<std::int64_t>(mask.size()) != rows)
    throw ShapeError("replace_rows: mask has " + std::to_string(mask.size()) + " entries for " +
                     std::to_string(rows) + " rows");
  auto m = std::make_shared<std::vector<std::uint8_t>>(mask.begin(), mask.end());
  Tensor out = empty_like_shape(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class S>() {
    auto in = x.data<S>();
    auto tok = token.data<S>();
    auto o = out.mutable_data<S>();
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t j = 0; j < d; ++j)
        o[static_cast<std::size_t>(r * d + j)] =
            (*m)[static_cast<std::size_t>(r)] ? tok[static_cast<std::size_t>(j)] : in[static_cast<std::size_t>(r * d + j)];
  });
  if (auto* tape = tape_for({&x, &token})) {
    out.set_requires_grad(true);
    NodePtr xn = x.node(), tn = token.node(), on = out.node();
    tape->record("replace_rows", {xn, tn}, on, [xn, tn, on, m, rows, d]() {
      dispatch(on->dtype, [&]<class S>() {
        const auto& g = grads<S>(on);
        for (std::int64_t r = 0; r < rows; ++r) {
          const bool masked = (*m)[static_cast<std::size_t>(r)] != 0;
          if (masked && tn->requires_grad) {
            auto& gt = grads<S>(tn);
            for (std::int64_t j = 0; j < d; ++j) gt[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(r * d + j)];
          } else if (!masked && xn->requires_grad) {
            auto& gx = grads<S>(xn);
            for (std::int64_t j = 0; j < d; ++j)
              gx[static_cast<std::size_t>(r * d + j)] += g[static_cast<std::size_t>(r * d + j)];
          }
        }
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h) {
  if (!(h > 0)) throw ConfigError("finite_diff_check: h must be > 0");
  const bool had_flag = x.requires_grad();
  x.set_requires_grad(true);
  x.clear_grad();
  std::vector<double> analytic;
  {
    GradTape tape;
    TapeScope scope(tape);
    Tensor y = f(x);
    if (y.numel() != 1) throw ShapeError("finite_diff_check: f must be scalar, got " + shape_str(y.shape()));
    if (!std::isfinite(y.item())) throw NumericError("finite_diff_check: f(x) is not finite");
    tape.backward(y);
    analytic = x.grad().to_vector();
  }
  x.clear_grad();
  x.set_requires_grad(had_flag);

  TapeScope no_record(nullptr);
  auto eval = [&]() {
    double v = f(x).item();
    if (!std::isfinite(v)) throw NumericError("finite_diff_check: f is not finite at a probe point");
    return v;
  };
  double worst = 0;
  dispatch(x.dtype(), [&]<class S>() {
    auto data = x.mutable_data<S>();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const S saved = data[i];
      data[i] = static_cast<S>(saved + h);
      const double fp = eval();
      data[i] = static_cast<S>(saved - h);
      const double fm = eval();
      data[i] = saved;
      const double numeric = (fp - fm) / (2 * h);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  });
  return worst;
}

}  // namespace nepa
