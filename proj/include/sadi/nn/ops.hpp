#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "sadi/nn/tensor.hpp"

namespace sadi::nn {

namespace detail {

// Central op factory: value always computed; tape recorded only when grad
// mode is on and some parent is tracked.
inline Tensor make_op(Matrix value, std::vector<std::shared_ptr<TensorNode>> parents,
                      std::function<void(const Matrix&, GradBuffer&)> bwd) {
  auto n = std::make_shared<TensorNode>();
  n->value = std::move(value);
  bool rg = false;
  if (grad_mode())
    for (const auto& p : parents)
      if (p->requires_grad) {
        rg = true;
        break;
      }
  n->requires_grad = rg;
  if (rg) {
    n->parents = std::move(parents);
    n->backward = std::move(bwd);
  }
  return Tensor(std::move(n));
}

inline double sigmoid_scalar(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a.value(), b.value(), "add");
  Matrix out = a.value();
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += b.value().v[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op(std::move(out), {an, bn}, [an, bn](const Matrix& g, GradBuffer& buf) {
    if (an->requires_grad) add_into(buf.acc(an.get()), g);
    if (bn->requires_grad) add_into(buf.acc(bn.get()), g);
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a.value(), b.value(), "sub");
  Matrix out = a.value();
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] -= b.value().v[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op(std::move(out), {an, bn}, [an, bn](const Matrix& g, GradBuffer& buf) {
    if (an->requires_grad) add_into(buf.acc(an.get()), g);
    if (bn->requires_grad) {
      Matrix& gb = buf.acc(bn.get());
      for (size_t i = 0; i < g.v.size(); ++i) gb.v[i] -= g.v[i];
    }
  });
}

// Elementwise product.
inline Tensor hadamard(const Tensor& a, const Tensor& b) {
  check_same_shape(a.value(), b.value(), "hadamard");
  Matrix out = a.value();
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] *= b.value().v[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op(std::move(out), {an, bn}, [an, bn](const Matrix& g, GradBuffer& buf) {
    if (an->requires_grad) {
      Matrix& ga = buf.acc(an.get());
      for (size_t i = 0; i < g.v.size(); ++i) ga.v[i] += g.v[i] * bn->value.v[i];
    }
    if (bn->requires_grad) {
      Matrix& gb = buf.acc(bn.get());
      for (size_t i = 0; i < g.v.size(); ++i) gb.v[i] += g.v[i] * an->value.v[i];
    }
  });
}

// out = mul * x + shift, elementwise with scalar coefficients.
inline Tensor affine(const Tensor& x, double mul, double shift = 0.0) {
  Matrix out = x.value();
  for (double& e : out.v) e = mul * e + shift;
  auto xn = x.node();
  return detail::make_op(std::move(out), {xn}, [xn, mul](const Matrix& g, GradBuffer& buf) {
    if (!xn->requires_grad) return;
    Matrix& gx = buf.acc(xn.get());
    for (size_t i = 0; i < g.v.size(); ++i) gx.v[i] += mul * g.v[i];
  });
}

inline Tensor scale(const Tensor& x, double c) { return affine(x, c, 0.0); }

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  Matrix out(a.rows(), b.cols());
  matmul_acc(a.value(), b.value(), out);
  auto an = a.node(), bn = b.node();
  return detail::make_op(std::move(out), {an, bn}, [an, bn](const Matrix& g, GradBuffer& buf) {
    if (an->requires_grad) matmul_nt_acc(g, bn->value, buf.acc(an.get()));
    if (bn->requires_grad) matmul_tn_acc(an->value, g, buf.acc(bn.get()));
  });
}

inline Tensor transpose(const Tensor& x) {
  auto xn = x.node();
  return detail::make_op(transpose_plain(x.value()), {xn}, [xn](const Matrix& g, GradBuffer& buf) {
    if (xn->requires_grad) add_into(buf.acc(xn.get()), transpose_plain(g));
  });
}

// Column-wise concatenation of matrices with equal row counts.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ArgError("concat_cols: no inputs");
  int rows = parts[0].rows(), cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw DimError("concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<std::shared_ptr<TensorNode>> nodes;
  std::vector<int> offs;
  int off = 0;
  for (const auto& p : parts) {
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < p.cols(); ++j) out(i, off + j) = p.value()(i, j);
    nodes.push_back(p.node());
    offs.push_back(off);
    off += p.cols();
  }
  auto nodes_c = nodes;
  return detail::make_op(std::move(out), std::move(nodes), [nodes_c, offs](const Matrix& g, GradBuffer& buf) {
    for (size_t k = 0; k < nodes_c.size(); ++k) {
      if (!nodes_c[k]->requires_grad) continue;
      Matrix& gp = buf.acc(nodes_c[k].get());
      for (int i = 0; i < gp.rows; ++i)
        for (int j = 0; j < gp.cols; ++j) gp(i, j) += g(i, offs[k] + j);
    }
  });
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) { return concat_cols(std::vector<Tensor>{a, b}); }

// Columns [c0, c1) of x.
inline Tensor slice_cols(const Tensor& x, int c0, int c1) {
  if (c0 < 0 || c1 > x.cols() || c0 >= c1) throw DimError("slice_cols: bad range");
  Matrix out(x.rows(), c1 - c0);
  for (int i = 0; i < out.rows; ++i)
    for (int j = 0; j < out.cols; ++j) out(i, j) = x.value()(i, c0 + j);
  auto xn = x.node();
  return detail::make_op(std::move(out), {xn}, [xn, c0](const Matrix& g, GradBuffer& buf) {
    if (!xn->requires_grad) return;
    Matrix& gx = buf.acc(xn.get());
    for (int i = 0; i < g.rows; ++i)
      for (int j = 0; j < g.cols; ++j) gx(i, c0 + j) += g(i, j);
  });
}

// Adds a 1xd row vector to every row of x.
inline Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  if (v.rows() != 1 || v.cols() != x.cols())
    throw DimError("add_rowvec: want 1x" + std::to_string(x.cols()) + ", got " + shape_str(v.value()));
  Matrix out = x.value();
  for (int i = 0; i < out.rows; ++i) {
    double* r = out.row(i);
    const double* vv = v.value().row(0);
    for (int j = 0; j < out.cols; ++j) r[j] += vv[j];
  }
  auto xn = x.node(), vn = v.node();
  return detail::make_op(std::move(out), {xn, vn}, [xn, vn](const Matrix& g, GradBuffer& buf) {
    if (xn->requires_grad) add_into(buf.acc(xn.get()), g);
    if (vn->requires_grad) {
      Matrix& gv = buf.acc(vn.get());
      for (int i = 0; i < g.rows; ++i)
        for (int j = 0; j < g.cols; ++j) gv(0, j) += g(i, j);
    }
  });
}

// x @ w + b with b broadcast across rows.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.cols() != w.rows()) throw DimError("linear: " + shape_str(x.value()) + " @ " + shape_str(w.value()));
  return add_rowvec(matmul(x, w), b);
}

inline Tensor sigmoid(const Tensor& x) {
  Matrix out = x.value();
  for (double& e : out.v) e = detail::sigmoid_scalar(e);
  auto xn = x.node();
  auto n = detail::make_op(std::move(out), {xn}, nullptr);
  if (n.requires_grad()) {
    // Non-owning: the function is stored on the node it reads, so capturing
    // the shared_ptr would cycle and leak the whole upstream tape.
    const TensorNode* on = n.node().get();
    n.node()->backward = [xn, on](const Matrix& g, GradBuffer& buf) {
      Matrix& gx = buf.acc(xn.get());
      for (size_t i = 0; i < g.v.size(); ++i) {
        const double s = on->value.v[i];
        gx.v[i] += g.v[i] * s * (1.0 - s);
      }
    };
  }
  return n;
}

// x * sigmoid(x); the smooth nonlinearity used throughout.
inline Tensor silu(const Tensor& x) {
  Matrix out = x.value();
  for (double& e : out.v) e = e * detail::sigmoid_scalar(e);
  auto xn = x.node();
  return detail::make_op(std::move(out), {xn}, [xn](const Matrix& g, GradBuffer& buf) {
    if (!xn->requires_grad) return;
    Matrix& gx = buf.acc(xn.get());
    for (size_t i = 0; i < g.v.size(); ++i) {
      const double s = detail::sigmoid_scalar(xn->value.v[i]);
      gx.v[i] += g.v[i] * s * (1.0 + xn->value.v[i] * (1.0 - s));
    }
  });
}

// Row-wise softmax with max subtraction.
inline Tensor softmax_rows(const Tensor& x) {
  Matrix out = x.value();
  for (int i = 0; i < out.rows; ++i) {
    double* r = out.row(i);
    double mx = r[0];
    for (int j = 1; j < out.cols; ++j) mx = std::max(mx, r[j]);
    double s = 0.0;
    for (int j = 0; j < out.cols; ++j) {
      r[j] = std::exp(r[j] - mx);
      s += r[j];
    }
    for (int j = 0; j < out.cols; ++j) r[j] /= s;
  }
  auto xn = x.node();
  auto n = detail::make_op(std::move(out), {xn}, nullptr);
  if (n.requires_grad()) {
    // Non-owning for the same reason as sigmoid: no self-cycle on the node.
    const TensorNode* on = n.node().get();
    n.node()->backward = [xn, on](const Matrix& g, GradBuffer& buf) {
      Matrix& gx = buf.acc(xn.get());
      for (int i = 0; i < g.rows; ++i) {
        const double* y = on->value.row(i);
        const double* gi = g.row(i);
        double dot = 0.0;
        for (int j = 0; j < g.cols; ++j) dot += gi[j] * y[j];
        double* gxr = gx.row(i);
        for (int j = 0; j < g.cols; ++j) gxr[j] += y[j] * (gi[j] - dot);
      }
    };
  }
  return n;
}

inline constexpr double kLayerNormEps = 1e-5;

// Row-wise layer normalization with trainable gain/shift (1xd each).
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& shift) {
  const int d = x.cols();
  if (gain.rows() != 1 || gain.cols() != d || shift.rows() != 1 || shift.cols() != d)
    throw DimError("layer_norm: gain/shift must be 1x" + std::to_string(d));
  Matrix out(x.rows(), d);
  for (int i = 0; i < x.rows(); ++i) {
    const double* r = x.value().row(i);
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += r[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (r[j] - mu) * (r[j] - mu);
    var /= d;
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    double* o = out.row(i);
    for (int j = 0; j < d; ++j) o[j] = (r[j] - mu) * inv * gain.value()(0, j) + shift.value()(0, j);
  }
  auto xn = x.node(), gn = gain.node(), sn = shift.node();
  return detail::make_op(std::move(out), {xn, gn, sn}, [xn, gn, sn, d](const Matrix& g, GradBuffer& buf) {
    // Recompute per-row statistics; cheaper than caching them on the node.
    for (int i = 0; i < g.rows; ++i) {
      const double* r = xn->value.row(i);
      double mu = 0.0;
      for (int j = 0; j < d; ++j) mu += r[j];
      mu /= d;
      double var = 0.0;
      for (int j = 0; j < d; ++j) var += (r[j] - mu) * (r[j] - mu);
      var /= d;
      const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
      const double* gi = g.row(i);
      if (gn->requires_grad) {
        double* gg = buf.acc(gn.get()).row(0);
        for (int j = 0; j < d; ++j) gg[j] += gi[j] * (r[j] - mu) * inv;
      }
      if (sn->requires_grad) {
        double* gs = buf.acc(sn.get()).row(0);
        for (int j = 0; j < d; ++j) gs[j] += gi[j];
      }
      if (xn->requires_grad) {
        double m1 = 0.0, m2 = 0.0;
        for (int j = 0; j < d; ++j) {
          const double gy = gi[j] * gn->value(0, j);
          const double xh = (r[j] - mu) * inv;
          m1 += gy;
          m2 += gy * xh;
        }
        m1 /= d;
        m2 /= d;
        double* gx = buf.acc(xn.get()).row(i);
        for (int j = 0; j < d; ++j) {
          const double gy = gi[j] * gn->value(0, j);
          const double xh = (r[j] - mu) * inv;
          gx[j] += inv * (gy - m1 - xh * m2);
        }
      }
    }
  });
}

// Gated linear unit: x is nx2d, output nxd = x[:, :d] * sigmoid(x[:, d:]).
inline Tensor glu(const Tensor& x) {
  if (x.cols() % 2 != 0) throw DimError("glu: need even column count, got " + shape_str(x.value()));
  const int d = x.cols() / 2;
  Matrix out(x.rows(), d);
  for (int i = 0; i < x.rows(); ++i) {
    const double* r = x.value().row(i);
    double* o = out.row(i);
    for (int j = 0; j < d; ++j) o[j] = r[j] * detail::sigmoid_scalar(r[d + j]);
  }
  auto xn = x.node();
  return detail::make_op(std::move(out), {xn}, [xn, d](const Matrix& g, GradBuffer& buf) {
    if (!xn->requires_grad) return;
    Matrix& gx = buf.acc(xn.get());
    for (int i = 0; i < g.rows; ++i) {
      const double* r = xn->value.row(i);
      const double* gi = g.row(i);
      double* gxr = gx.row(i);
      for (int j = 0; j < d; ++j) {
        const double s = detail::sigmoid_scalar(r[d + j]);
        gxr[j] += gi[j] * s;
        gxr[d + j] += gi[j] * r[j] * s * (1.0 - s);
      }
    }
  });
}

// Sum of all entries, as a 1x1 tensor.
inline Tensor sum_all(const Tensor& x) {
  Matrix out(1, 1);
  for (double e : x.value().v) out(0, 0) += e;
  auto xn = x.node();
  return detail::make_op(std::move(out), {xn}, [xn](const Matrix& g, GradBuffer& buf) {
    if (!xn->requires_grad) return;
    Matrix& gx = buf.acc(xn.get());
    for (double& e : gx.v) e += g(0, 0);
  });
}

// Dilated 1-D convolution along the column (time) axis. x is C_in x L;
// kernel is C_out x (3*C_in) laid out as kernel(o, 3*c + m) with taps
// m in {0,1,2} at time offsets (m-1)*dilation. Zero "same" padding keeps
// the output length at L.
inline Tensor conv1d_dilated(const Tensor& x, const Tensor& kernel, int dilation) {
  const int cin = x.rows(), len = x.cols();
  const int cout = kernel.rows();
  if (kernel.cols() != 3 * cin)
    throw DimError("conv1d_dilated: kernel " + shape_str(kernel.value()) + " does not match 3*C_in=" + std::to_string(3 * cin));
  if (dilation < 1) throw ArgError("conv1d_dilated: dilation must be >= 1");
  if (len > 1 && dilation > len - 1)
    throw ArgError("conv1d_dilated: dilation " + std::to_string(dilation) + " does not fit length " + std::to_string(len));
  Matrix out(cout, len);
  const Matrix& xv = x.value();
  const Matrix& kv = kernel.value();
  for (int o = 0; o < cout; ++o) {
    double* orow = out.row(o);
    for (int c = 0; c < cin; ++c) {
      const double* xr = xv.row(c);
      const double k0 = kv(o, 3 * c), k1 = kv(o, 3 * c + 1), k2 = kv(o, 3 * c + 2);
      for (int t = 0; t < len; ++t) {
        double s = k1 * xr[t];
        if (t - dilation >= 0) s += k0 * xr[t - dilation];
        if (t + dilation < len) s += k2 * xr[t + dilation];
        orow[t] += s;
      }
    }
  }
  auto xn = x.node(), kn = kernel.node();
  return detail::make_op(std::move(out), {xn, kn}, [xn, kn, dilation, cin, cout, len](const Matrix& g, GradBuffer& buf) {
    if (xn->requires_grad) {
      Matrix& gx = buf.acc(xn.get());
      for (int o = 0; o < cout; ++o) {
        const double* go = g.row(o);
        for (int c = 0; c < cin; ++c) {
          double* gxr = gx.row(c);
          const double k0 = kn->value(o, 3 * c), k1 = kn->value(o, 3 * c + 1), k2 = kn->value(o, 3 * c + 2);
          for (int t = 0; t < len; ++t) {
            gxr[t] += k1 * go[t];
            if (t - dilation >= 0) gxr[t - dilation] += k0 * go[t];
            if (t + dilation < len) gxr[t + dilation] += k2 * go[t];
          }
        }
      }
    }
    if (kn->requires_grad) {
      Matrix& gk = buf.acc(kn.get());
      for (int o = 0; o < cout; ++o) {
        const double* go = g.row(o);
        for (int c = 0; c < cin; ++c) {
          const double* xr = xn->value.row(c);
          double s0 = 0.0, s1 = 0.0, s2 = 0.0;
          for (int t = 0; t < len; ++t) {
            s1 += go[t] * xr[t];
            if (t - dilation >= 0) s0 += go[t] * xr[t - dilation];
            if (t + dilation < len) s2 += go[t] * xr[t + dilation];
          }
          gk(o, 3 * c) += s0;
          gk(o, 3 * c + 1) += s1;
          gk(o, 3 * c + 2) += s2;
        }
      }
    }
  });
}

// Multi-head self-attention parameters; fused d x d projections, heads are
// column blocks of width d/heads.
struct AttnParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

// Returns (output nxd, head-averaged attention nxn).
inline std::pair<Tensor, Tensor> mhsa(const Tensor& x, int heads, const AttnParams& p) {
  const int d = x.cols();
  if (heads < 1 || d % heads != 0)
    throw ConfigError("mhsa: heads=" + std::to_string(heads) + " must divide model dim " + std::to_string(d));
  const int dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(double(dh));
  Tensor q = linear(x, p.wq, p.bq);
  Tensor k = linear(x, p.wk, p.bk);
  Tensor v = linear(x, p.wv, p.bv);
  std::vector<Tensor> outs;
  Tensor attn_sum;
  for (int h = 0; h < heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
    Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
    Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    Tensor a = softmax_rows(scores);
    outs.push_back(matmul(a, vh));
    attn_sum = h == 0 ? a : add(attn_sum, a);
  }
  Tensor out = linear(concat_cols(outs), p.wo, p.bo);
  Tensor attn = scale(attn_sum, 1.0 / heads);
  return {out, attn};
}

// Transformer positional encoding: pe(t, 2i) = sin(t / 10000^(2i/d)),
// pe(t, 2i+1) = cos of the same angle. Width must be even.
inline Matrix sinusoidal_pos_enc(int len, int d) {
  if (len < 1) throw ArgError("sinusoidal_pos_enc: length must be >= 1");
  if (d < 2 || d % 2 != 0) throw ArgError("sinusoidal_pos_enc: width must be even and >= 2");
  Matrix pe(len, d);
  for (int t = 0; t < len; ++t)
    for (int i = 0; i < d / 2; ++i) {
      const double angle = t / std::pow(10000.0, (2.0 * i) / d);
      pe(t, 2 * i) = std::sin(angle);
      pe(t, 2 * i + 1) = std::cos(angle);
    }
  return pe;
}

// Raw diffusion-step embedding: first half sine, second half cosine against
// geometric frequencies spanning 1..10^4 (the DiffWave table layout).
inline Matrix step_embedding_table(int t, int d) {
  if (d < 2 || d % 2 != 0) throw ArgError("step_embedding_table: width must be even and >= 2");
  if (t < 0) throw ArgError("step_embedding_table: step must be >= 0");
  const int half = d / 2;
  Matrix e(1, d);
  for (int j = 0; j < half; ++j) {
    const double freq = half == 1 ? 1.0 : std::pow(10.0, 4.0 * j / (half - 1));
    e(0, j) = std::sin(t * freq);
    e(0, half + j) = std::cos(t * freq);
  }
  return e;
}

}  // namespace sadi::nn
