// Copyright (c) 2026, mixlab developers
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <numbers>

#include "mixlab/graph.hpp"

namespace mixlab {

namespace {

Graph& graph_of(Var a) {
  require(a.valid(), ErrorCode::state, "operation on an unbound Var");
  return *a.graph();
}

Graph& graph_of(Var a, Var b) {
  Graph& g = graph_of(a);
  require(b.graph() == &g, ErrorCode::state, "operands live on different graphs");
  return g;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), ErrorCode::shape_mismatch,
          std::string(op) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  require(t.rank() == rank, ErrorCode::shape_mismatch,
          std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(t.shape()));
}

bool gated_off(const GateMask* gate, std::size_t i) { return gate != nullptr && (*gate)[i] == 0; }

template <class F>
Var unary(Var a, const char* op, F&& fn, std::function<double(double x, double y)> dfn) {
  Graph& g = graph_of(a);
  const Tensor& x = a.value();
  Tensor y(x.shape(), g.dtype());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = fn(x[i]);
  Tensor y_copy = y;
  y_copy.finalize(op);
  return g.record(std::move(y), {a}, [a, y_copy, dfn](Graph& gr, const Tensor& go) {
    const Tensor& x = gr.value(a);
    Tensor dx(x.shape(), gr.dtype());
    for (std::size_t i = 0; i < x.size(); ++i) dx[i] = go[i] * dfn(x[i], y_copy[i]);
    gr.accumulate(a, dx);
  }, op);
}

}  // namespace

Var add(Var a, Var b) {
  Graph& g = graph_of(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor y(a.shape(), g.dtype());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] + b.value()[i];
  return g.record(std::move(y), {a, b}, [a, b](Graph& gr, const Tensor& go) {
    gr.accumulate(a, go);
    gr.accumulate(b, go);
  }, "add");
}

Var sub(Var a, Var b) {
  Graph& g = graph_of(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Tensor y(a.shape(), g.dtype());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] - b.value()[i];
  return g.record(std::move(y), {a, b}, [a, b](Graph& gr, const Tensor& go) {
    gr.accumulate(a, go);
    Tensor neg = go;
    for (auto& v : neg.data()) v = -v;
    gr.accumulate(b, neg);
  }, "sub");
}

Var mul(Var a, Var b) {
  Graph& g = graph_of(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor y(a.shape(), g.dtype());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] * b.value()[i];
  return g.record(std::move(y), {a, b}, [a, b](Graph& gr, const Tensor& go) {
    const Tensor& av = gr.value(a);
    const Tensor& bv = gr.value(b);
    if (gr.needs_grad(a)) {
      Tensor da(av.shape(), gr.dtype());
      for (std::size_t i = 0; i < da.size(); ++i) da[i] = go[i] * bv[i];
      gr.accumulate(a, da);
    }
    if (gr.needs_grad(b)) {
      Tensor db(bv.shape(), gr.dtype());
      for (std::size_t i = 0; i < db.size(); ++i) db[i] = go[i] * av[i];
      gr.accumulate(b, db);
    }
  }, "mul");
}

Var mul_const(Var a, const Tensor& c) {
  Graph& g = graph_of(a);
  require_same_shape(a.value(), c, "mul_const");
  Tensor y(a.shape(), g.dtype());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] * c[i];
  return g.record(std::move(y), {a}, [a, c](Graph& gr, const Tensor& go) {
    Tensor da(go.shape(), gr.dtype());
    for (std::size_t i = 0; i < da.size(); ++i) da[i] = go[i] * c[i];
    gr.accumulate(a, da);
  }, "mul_const");
}

Var scale(Var a, double c) {
  Graph& g = graph_of(a);
  Tensor y(a.shape(), g.dtype());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] * c;
  return g.record(std::move(y), {a}, [a, c](Graph& gr, const Tensor& go) {
    Tensor da(go.shape(), gr.dtype());
    for (std::size_t i = 0; i < da.size(); ++i) da[i] = go[i] * c;
    gr.accumulate(a, da);
  }, "scale");
}

Var square(Var a) {
  return unary(a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var sum(Var a) {
  Graph& g = graph_of(a);
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return g.record(Tensor::scalar(s, g.dtype()), {a}, [a](Graph& gr, const Tensor& go) {
    gr.accumulate(a, Tensor::full(gr.value(a).shape(), go[0], gr.dtype()));
  }, "sum");
}

Var mean(Var a) {
  Graph& g = graph_of(a);
  const double n = static_cast<double>(a.value().size());
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return g.record(Tensor::scalar(s / n, g.dtype()), {a}, [a, n](Graph& gr, const Tensor& go) {
    gr.accumulate(a, Tensor::full(gr.value(a).shape(), go[0] / n, gr.dtype()));
  }, "mean");
}

Var reshape(Var a, Shape shape) {
  Graph& g = graph_of(a);
  Tensor y = a.value().reshaped(std::move(shape));
  return g.record(std::move(y), {a}, [a](Graph& gr, const Tensor& go) {
    gr.accumulate(a, go.reshaped(gr.value(a).shape()));
  }, "reshape");
}

Var relu(Var a) {
  return unary(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var tanh(Var a) {
  return unary(a, "tanh", [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Var gelu(Var a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return unary(
      a, "gelu",
      [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x))); },
      [](double x, double) {
        const double u = c * (x + 0.044715 * x * x * x);
        const double t = std::tanh(u);
        const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      });
}

Var linear(Var x, Var w, std::optional<Var> b) {
  Graph& g = graph_of(x, w);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require_rank(xv, 2, "linear input");
  require_rank(wv, 2, "linear weight");
  const std::size_t n = xv.dim(0), in = xv.dim(1), out = wv.dim(0);
  require(wv.dim(1) == in, ErrorCode::shape_mismatch,
          "linear: input " + shape_str(xv.shape()) + " vs weight " + shape_str(wv.shape()));
  std::vector<Var> inputs{x, w};
  if (b) {
    graph_of(x, *b);
    require(b->value().rank() == 1 && b->value().dim(0) == out, ErrorCode::shape_mismatch,
            "linear: bias " + shape_str(b->value().shape()) + " vs " + std::to_string(out) + " outputs");
    inputs.push_back(*b);
  }
  Tensor y({n, out}, g.dtype());
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = &xv.data()[r * in];
    for (std::size_t o = 0; o < out; ++o) {
      const double* wo = &wv.data()[o * in];
      double acc = 0.0;
      for (std::size_t i = 0; i < in; ++i) acc += xr[i] * wo[i];
      if (b) acc += b->value()[o];
      y[r * out + o] = acc;
    }
  }
  g.count_forward(n * in * out);
  return g.record(std::move(y), std::move(inputs), [x, w, b, n, in, out](Graph& gr, const Tensor& go) {
    const Tensor& xv = gr.value(x);
    const Tensor& wv = gr.value(w);
    if (gr.needs_grad(x)) {
      Tensor dx({n, in}, gr.dtype());
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t o = 0; o < out; ++o) {
          const double gv = go[r * out + o];
          const double* wo = &wv.data()[o * in];
          double* dxr = &dx.data()[r * in];
          for (std::size_t i = 0; i < in; ++i) dxr[i] += gv * wo[i];
        }
      gr.count_input_grad(n * in * out);
      gr.accumulate(x, dx);
    }
    if (gr.needs_grad(w)) {
      const GateMask* gate = gr.gate(w);
      Tensor dw({out, in}, gr.dtype());
      std::uint64_t macs = 0;
      for (std::size_t o = 0; o < out; ++o)
        for (std::size_t i = 0; i < in; ++i) {
          if (gated_off(gate, o * in + i)) continue;
          double acc = 0.0;
          for (std::size_t r = 0; r < n; ++r) acc += go[r * out + o] * xv[r * in + i];
          dw[o * in + i] = acc;
          macs += n;
        }
      gr.count_weight_grad(w, macs);
      gr.accumulate(w, dw);
    }
    if (b && gr.needs_grad(*b)) {
      const GateMask* gate = gr.gate(*b);
      Tensor db({out}, gr.dtype());
      for (std::size_t o = 0; o < out; ++o) {
        if (gated_off(gate, o)) continue;
        double acc = 0.0;
        for (std::size_t r = 0; r < n; ++r) acc += go[r * out + o];
        db[o] = acc;
      }
      gr.accumulate(*b, db);
    }
  }, "linear");
}

namespace {

// c[m,n] = sum_k a[m,k] b[k,n] on raw buffers with optional transposes.
void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n, bool ta,
          bool tb) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = ta ? a[p * m + i] : a[i * k + p];
        const double bv = tb ? b[j * k + p] : b[p * n + j];
        acc += av * bv;
      }
      c[i * n + j] += acc;
    }
}

void count_operand_grad(Graph& g, Var operand, std::uint64_t macs) {
  if (g.param_name(operand))
    g.count_weight_grad(operand, macs);
  else
    g.count_input_grad(macs);
}

void apply_gate(Graph& g, Var v, Tensor& grad) {
  if (const GateMask* gate = g.gate(v))
    for (std::size_t i = 0; i < grad.size(); ++i)
      if (!(*gate)[i]) grad[i] = 0.0;
}

}  // namespace

Var matmul(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank(av, 2, "matmul lhs");
  require_rank(bv, 2, "matmul rhs");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  require(bv.dim(0) == k, ErrorCode::shape_mismatch,
          "matmul: inner extents differ, " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  Tensor y({m, n}, g.dtype());
  gemm(av.data().data(), bv.data().data(), y.data().data(), m, k, n, false, false);
  g.count_forward(m * k * n);
  return g.record(std::move(y), {a, b}, [a, b, m, k, n](Graph& gr, const Tensor& go) {
    const Tensor& av = gr.value(a);
    const Tensor& bv = gr.value(b);
    if (gr.needs_grad(a)) {
      Tensor da({m, k}, gr.dtype());
      gemm(go.data().data(), bv.data().data(), da.data().data(), m, n, k, false, true);
      apply_gate(gr, a, da);
      count_operand_grad(gr, a, m * k * n);
      gr.accumulate(a, da);
    }
    if (gr.needs_grad(b)) {
      Tensor db({k, n}, gr.dtype());
      gemm(av.data().data(), go.data().data(), db.data().data(), k, m, n, true, false);
      apply_gate(gr, b, db);
      count_operand_grad(gr, b, m * k * n);
      gr.accumulate(b, db);
    }
  }, "matmul");
}

Var bmm(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank(av, 3, "bmm lhs");
  require_rank(bv, 3, "bmm rhs");
  const std::size_t bs = av.dim(0), m = av.dim(1), k = av.dim(2), n = bv.dim(2);
  require(bv.dim(0) == bs && bv.dim(1) == k, ErrorCode::shape_mismatch,
          "bmm: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  Tensor y({bs, m, n}, g.dtype());
  for (std::size_t t = 0; t < bs; ++t)
    gemm(&av.data()[t * m * k], &bv.data()[t * k * n], &y.data()[t * m * n], m, k, n, false, false);
  g.count_forward(bs * m * k * n);
  return g.record(std::move(y), {a, b}, [a, b, bs, m, k, n](Graph& gr, const Tensor& go) {
    const Tensor& av = gr.value(a);
    const Tensor& bv = gr.value(b);
    if (gr.needs_grad(a)) {
      Tensor da({bs, m, k}, gr.dtype());
      for (std::size_t t = 0; t < bs; ++t)
        gemm(&go.data()[t * m * n], &bv.data()[t * k * n], &da.data()[t * m * k], m, n, k, false, true);
      count_operand_grad(gr, a, bs * m * k * n);
      gr.accumulate(a, da);
    }
    if (gr.needs_grad(b)) {
      Tensor db({bs, k, n}, gr.dtype());
      for (std::size_t t = 0; t < bs; ++t)
        gemm(&av.data()[t * m * k], &go.data()[t * m * n], &db.data()[t * k * n], k, m, n, true, false);
      count_operand_grad(gr, b, bs * m * k * n);
      gr.accumulate(b, db);
    }
  }, "bmm");
}

Var transpose_last2(Var a) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  require_rank(av, 3, "transpose_last2");
  const std::size_t bs = av.dim(0), m = av.dim(1), n = av.dim(2);
  Tensor y({bs, n, m}, g.dtype());
  for (std::size_t t = 0; t < bs; ++t)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) y[(t * n + j) * m + i] = av[(t * m + i) * n + j];
  return g.record(std::move(y), {a}, [a, bs, m, n](Graph& gr, const Tensor& go) {
    Tensor da({bs, m, n}, gr.dtype());
    for (std::size_t t = 0; t < bs; ++t)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) da[(t * m + i) * n + j] = go[(t * n + j) * m + i];
    gr.accumulate(a, da);
  }, "transpose_last2");
}

Var softmax_last(Var a) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  require(av.rank() >= 1, ErrorCode::shape_mismatch, "softmax on rank-0 tensor");
  const std::size_t d = av.shape().back();
  const std::size_t rows = av.size() / d;
  Tensor y(av.shape(), g.dtype());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = &av.data()[r * d];
    double* yr = &y.data()[r * d];
    const double mx = *std::max_element(x, x + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) z += (yr[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < d; ++j) yr[j] /= z;
  }
  Tensor y_copy = y;
  y_copy.finalize("softmax");
  return g.record(std::move(y), {a}, [a, y_copy, rows, d](Graph& gr, const Tensor& go) {
    Tensor da(y_copy.shape(), gr.dtype());
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += go[r * d + j] * y_copy[r * d + j];
      for (std::size_t j = 0; j < d; ++j) da[r * d + j] = y_copy[r * d + j] * (go[r * d + j] - dot);
    }
    gr.accumulate(a, da);
  }, "softmax");
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Graph& g = graph_of(x, gamma);
  graph_of(x, beta);
  const Tensor& xv = x.value();
  const std::size_t d = xv.shape().back();
  require(gamma.value().size() == d && beta.value().size() == d, ErrorCode::shape_mismatch,
          "layer_norm: scale/shift must have " + std::to_string(d) + " entries");
  const std::size_t rows = xv.size() / d;
  Tensor y(xv.shape(), g.dtype());
  Tensor xhat(xv.shape(), DType::f64);
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = &xv.data()[r * d];
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xr[j] - mu) * inv_std[r];
      y[r * d + j] = gamma.value()[j] * xhat[r * d + j] + beta.value()[j];
    }
  }
  return g.record(std::move(y), {x, gamma, beta},
                  [x, gamma, beta, xhat, inv_std, rows, d](Graph& gr, const Tensor& go) {
    const Tensor& gv = gr.value(gamma);
    if (gr.needs_grad(gamma) || gr.needs_grad(beta)) {
      Tensor dg({d}, gr.dtype()), db({d}, gr.dtype());
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) {
          dg[j] += go[r * d + j] * xhat[r * d + j];
          db[j] += go[r * d + j];
        }
      apply_gate(gr, gamma, dg);
      apply_gate(gr, beta, db);
      gr.accumulate(gamma, dg.reshaped(gr.value(gamma).shape()));
      gr.accumulate(beta, db.reshaped(gr.value(beta).shape()));
    }
    if (gr.needs_grad(x)) {
      Tensor dx(gr.value(x).shape(), gr.dtype());
      const double inv_d = 1.0 / static_cast<double>(d);
      for (std::size_t r = 0; r < rows; ++r) {
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double dxh = go[r * d + j] * gv[j];
          m1 += dxh;
          m2 += dxh * xhat[r * d + j];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        for (std::size_t j = 0; j < d; ++j) {
          const double dxh = go[r * d + j] * gv[j];
          dx[r * d + j] = inv_std[r] * (dxh - m1 - xhat[r * d + j] * m2);
        }
      }
      gr.accumulate(x, dx);
    }
  }, "layer_norm");
}

Var conv2d(Var x, Var w, std::optional<Var> b, std::size_t stride, std::size_t padding) {
  Graph& g = graph_of(x, w);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require_rank(xv, 4, "conv2d input");
  require_rank(wv, 4, "conv2d weight");
  require(stride > 0, ErrorCode::invalid_argument, "conv2d: stride must be positive");
  const std::size_t B = xv.dim(0), Cin = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const std::size_t Cout = wv.dim(0), kH = wv.dim(2), kW = wv.dim(3);
  require(wv.dim(1) == Cin, ErrorCode::shape_mismatch,
          "conv2d: input " + shape_str(xv.shape()) + " vs kernel " + shape_str(wv.shape()));
  require(H + 2 * padding >= kH && W + 2 * padding >= kW, ErrorCode::shape_mismatch,
          "conv2d: kernel does not fit the padded input");
  require((H + 2 * padding - kH) % stride == 0 && (W + 2 * padding - kW) % stride == 0,
          ErrorCode::shape_mismatch, "conv2d: non-integral output extent for " + shape_str(xv.shape()));
  const std::size_t Ho = (H + 2 * padding - kH) / stride + 1;
  const std::size_t Wo = (W + 2 * padding - kW) / stride + 1;
  std::vector<Var> inputs{x, w};
  if (b) {
    graph_of(x, *b);
    require(b->value().size() == Cout, ErrorCode::shape_mismatch, "conv2d: bias extent mismatch");
    inputs.push_back(*b);
  }
  const auto ip = static_cast<std::ptrdiff_t>(padding);
  // Input coordinate for output position o and kernel tap k, or -1 when it
  // falls in the zero padding.
  auto src = [stride, ip](std::size_t o, std::size_t k, std::size_t extent) -> std::ptrdiff_t {
    const std::ptrdiff_t c = static_cast<std::ptrdiff_t>(o * stride + k) - ip;
    return (c < 0 || c >= static_cast<std::ptrdiff_t>(extent)) ? -1 : c;
  };

  Tensor y({B, Cout, Ho, Wo}, g.dtype());
  std::uint64_t macs = 0;
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t co = 0; co < Cout; ++co)
      for (std::size_t oh = 0; oh < Ho; ++oh)
        for (std::size_t ow = 0; ow < Wo; ++ow) {
          double acc = 0.0;
          for (std::size_t ci = 0; ci < Cin; ++ci)
            for (std::size_t kh = 0; kh < kH; ++kh) {
              const auto ih = src(oh, kh, H);
              if (ih < 0) continue;
              for (std::size_t kw = 0; kw < kW; ++kw) {
                const auto iw = src(ow, kw, W);
                if (iw < 0) continue;
                acc += xv[((n * Cin + ci) * H + ih) * W + iw] * wv[((co * Cin + ci) * kH + kh) * kW + kw];
                ++macs;
              }
            }
          if (b) acc += b->value()[co];
          y[((n * Cout + co) * Ho + oh) * Wo + ow] = acc;
        }
  g.count_forward(macs);

  return g.record(std::move(y), std::move(inputs),
                  [=](Graph& gr, const Tensor& go) {
    const Tensor& xv = gr.value(x);
    const Tensor& wv = gr.value(w);
    if (gr.needs_grad(x)) {
      Tensor dx(xv.shape(), gr.dtype());
      std::uint64_t m = 0;
      for (std::size_t n = 0; n < B; ++n)
        for (std::size_t co = 0; co < Cout; ++co)
          for (std::size_t oh = 0; oh < Ho; ++oh)
            for (std::size_t ow = 0; ow < Wo; ++ow) {
              const double gv = go[((n * Cout + co) * Ho + oh) * Wo + ow];
              for (std::size_t ci = 0; ci < Cin; ++ci)
                for (std::size_t kh = 0; kh < kH; ++kh) {
                  const auto ih = src(oh, kh, H);
                  if (ih < 0) continue;
                  for (std::size_t kw = 0; kw < kW; ++kw) {
                    const auto iw = src(ow, kw, W);
                    if (iw < 0) continue;
                    dx[((n * Cin + ci) * H + ih) * W + iw] += gv * wv[((co * Cin + ci) * kH + kh) * kW + kw];
                    ++m;
                  }
                }
            }
      gr.count_input_grad(m);
      gr.accumulate(x, dx);
    }
    if (gr.needs_grad(w)) {
      const GateMask* gate = gr.gate(w);
      Tensor dw(wv.shape(), gr.dtype());
      std::uint64_t m = 0;
      for (std::size_t co = 0; co < Cout; ++co)
        for (std::size_t ci = 0; ci < Cin; ++ci)
          for (std::size_t kh = 0; kh < kH; ++kh)
            for (std::size_t kw = 0; kw < kW; ++kw) {
              const std::size_t wi = ((co * Cin + ci) * kH + kh) * kW + kw;
              if (gated_off(gate, wi)) continue;
              double acc = 0.0;
              for (std::size_t n = 0; n < B; ++n)
                for (std::size_t oh = 0; oh < Ho; ++oh) {
                  const auto ih = src(oh, kh, H);
                  if (ih < 0) continue;
                  for (std::size_t ow = 0; ow < Wo; ++ow) {
                    const auto iw = src(ow, kw, W);
                    if (iw < 0) continue;
                    acc += go[((n * Cout + co) * Ho + oh) * Wo + ow] * xv[((n * Cin + ci) * H + ih) * W + iw];
                    ++m;
                  }
                }
              dw[wi] = acc;
            }
      gr.count_weight_grad(w, m);
      gr.accumulate(w, dw);
    }
    if (b && gr.needs_grad(*b)) {
      const GateMask* gate = gr.gate(*b);
      Tensor db(gr.value(*b).shape(), gr.dtype());
      for (std::size_t co = 0; co < Cout; ++co) {
        if (gated_off(gate, co)) continue;
        double acc = 0.0;
        for (std::size_t n = 0; n < B; ++n)
          for (std::size_t p = 0; p < Ho * Wo; ++p) acc += go[(n * Cout + co) * Ho * Wo + p];
        db[co] = acc;
      }
      gr.accumulate(*b, db);
    }
  }, "conv2d");
}

Var max_pool2d(Var x, std::size_t window) {
  Graph& g = graph_of(x);
  const Tensor& xv = x.value();
  require_rank(xv, 4, "max_pool2d");
  require(window > 0, ErrorCode::invalid_argument, "max_pool2d: window must be positive");
  const std::size_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  require(H % window == 0 && W % window == 0, ErrorCode::shape_mismatch,
          "max_pool2d: spatial extent not divisible by window");
  const std::size_t Ho = H / window, Wo = W / window;
  Tensor y({B, C, Ho, Wo}, g.dtype());
  std::vector<std::size_t> argmax(y.size());
  for (std::size_t p = 0; p < B * C; ++p)
    for (std::size_t oh = 0; oh < Ho; ++oh)
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        std::size_t best = (p * H + oh * window) * W + ow * window;
        for (std::size_t i = 0; i < window; ++i)
          for (std::size_t j = 0; j < window; ++j) {
            const std::size_t idx = (p * H + oh * window + i) * W + ow * window + j;
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t o = (p * Ho + oh) * Wo + ow;
        y[o] = xv[best];
        argmax[o] = best;
      }
  return g.record(std::move(y), {x}, [x, argmax](Graph& gr, const Tensor& go) {
    Tensor dx(gr.value(x).shape(), gr.dtype());
    for (std::size_t o = 0; o < argmax.size(); ++o) dx[argmax[o]] += go[o];
    gr.accumulate(x, dx);
  }, "max_pool2d");
}

Var global_avg_pool(Var x) {
  Graph& g = graph_of(x);
  const Tensor& xv = x.value();
  require_rank(xv, 4, "global_avg_pool");
  const std::size_t B = xv.dim(0), C = xv.dim(1), P = xv.dim(2) * xv.dim(3);
  Tensor y({B, C}, g.dtype());
  for (std::size_t p = 0; p < B * C; ++p) {
    double s = 0.0;
    for (std::size_t i = 0; i < P; ++i) s += xv[p * P + i];
    y[p] = s / static_cast<double>(P);
  }
  return g.record(std::move(y), {x}, [x, B, C, P](Graph& gr, const Tensor& go) {
    Tensor dx(gr.value(x).shape(), gr.dtype());
    for (std::size_t p = 0; p < B * C; ++p)
      for (std::size_t i = 0; i < P; ++i) dx[p * P + i] = go[p] / static_cast<double>(P);
    gr.accumulate(x, dx);
  }, "global_avg_pool");
}

Var mean_tokens(Var x) {
  Graph& g = graph_of(x);
  const Tensor& xv = x.value();
  require_rank(xv, 3, "mean_tokens");
  const std::size_t B = xv.dim(0), T = xv.dim(1), D = xv.dim(2);
  Tensor y({B, D}, g.dtype());
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t d = 0; d < D; ++d) {
      double s = 0.0;
      for (std::size_t t = 0; t < T; ++t) s += xv[(n * T + t) * D + d];
      y[n * D + d] = s / static_cast<double>(T);
    }
  return g.record(std::move(y), {x}, [x, B, T, D](Graph& gr, const Tensor& go) {
    Tensor dx(gr.value(x).shape(), gr.dtype());
    for (std::size_t n = 0; n < B; ++n)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t d = 0; d < D; ++d) dx[(n * T + t) * D + d] = go[n * D + d] / static_cast<double>(T);
    gr.accumulate(x, dx);
  }, "mean_tokens");
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  Graph& g = graph_of(logits);
  const Tensor& lv = logits.value();
  require_rank(lv, 2, "cross_entropy");
  const std::size_t n = lv.dim(0), c = lv.dim(1);
  require(labels.size() == n, ErrorCode::shape_mismatch,
          "cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) + " rows");
  Tensor probs({n, c}, DType::f64);
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const int y = labels[r];
    require(y >= 0 && static_cast<std::size_t>(y) < c, ErrorCode::invalid_argument,
            "cross_entropy: label " + std::to_string(y) + " out of range");
    const double* x = &lv.data()[r * c];
    const double mx = *std::max_element(x, x + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(x[j] - mx);
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] = std::exp(x[j] - mx) / z;
    loss += -(x[y] - mx - std::log(z));
  }
  loss /= static_cast<double>(n);
  std::vector<int> ys(labels.begin(), labels.end());
  return g.record(Tensor::scalar(loss, g.dtype()), {logits},
                  [logits, probs, ys, n, c](Graph& gr, const Tensor& go) {
    Tensor dl({n, c}, gr.dtype());
    const double s = go[0] / static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < c; ++j)
        dl[r * c + j] = s * (probs[r * c + j] - (static_cast<int>(j) == ys[r] ? 1.0 : 0.0));
    gr.accumulate(logits, dl);
  }, "cross_entropy");
}

}  // namespace mixlab
