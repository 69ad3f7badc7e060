// SPDX-License-Identifier: Apache-2.0
#include "mvlpt/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "mvlpt/errors.hpp"

namespace mvlpt {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using Strided = Eigen::OuterStride<>;
using ConstBlock = Eigen::Map<const RowMat, 0, Strided>;
using MutBlock = Eigen::Map<RowMat, 0, Strided>;

ConstMap as_matrix(const Array& a) { return {a.data().data(), Eigen::Index(a.rows()), Eigen::Index(a.cols())}; }
MutMap as_matrix(Array& a) { return {a.data().data(), Eigen::Index(a.rows()), Eigen::Index(a.cols())}; }

void require_matrix(const Var& a, const char* op) {
  if (a.shape().size() != 2) {
    throw DimensionError(std::string(op) + " expects a matrix, got " + shape_string(a.shape()));
  }
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

Node& in(Node& n, std::size_t i) { return *n.inputs[i]; }

}  // namespace

Var matmul(const Var& a, const Var& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  Array out({a.rows(), b.cols()});
  as_matrix(out).noalias() = as_matrix(a.value()) * as_matrix(b.value());
  return make_result(std::move(out), {a, b}, [](Node& n) {
    auto g = as_matrix(std::as_const(n.grad));
    Node& A = in(n, 0);
    Node& B = in(n, 1);
    if (A.requires_grad) as_matrix(A.grad_buffer()).noalias() += g * as_matrix(std::as_const(B.value)).transpose();
    if (B.requires_grad) as_matrix(B.grad_buffer()).noalias() += as_matrix(std::as_const(A.value)).transpose() * g;
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: inner dimensions disagree for " + shape_string(a.shape()) +
                         " x " + shape_string(b.shape()) + "^T");
  }
  Array out({a.rows(), b.rows()});
  as_matrix(out).noalias() = as_matrix(a.value()) * as_matrix(b.value()).transpose();
  return make_result(std::move(out), {a, b}, [](Node& n) {
    auto g = as_matrix(std::as_const(n.grad));
    Node& A = in(n, 0);
    Node& B = in(n, 1);
    if (A.requires_grad) as_matrix(A.grad_buffer()).noalias() += g * as_matrix(std::as_const(B.value));
    if (B.requires_grad) as_matrix(B.grad_buffer()).noalias() += g.transpose() * as_matrix(std::as_const(A.value));
  });
}

Var transpose(const Var& a) {
  require_matrix(a, "transpose");
  Array out({a.cols(), a.rows()});
  as_matrix(out) = as_matrix(a.value()).transpose();
  return make_result(std::move(out), {a}, [](Node& n) {
    Node& A = in(n, 0);
    as_matrix(A.grad_buffer()) += as_matrix(std::as_const(n.grad)).transpose();
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Array out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  return make_result(std::move(out), {a, b}, [](Node& n) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (in(n, k).requires_grad) in(n, k).accumulate(n.grad);
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Array out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  return make_result(std::move(out), {a, b}, [](Node& n) {
    if (in(n, 0).requires_grad) in(n, 0).accumulate(n.grad);
    if (in(n, 1).requires_grad) {
      auto dst = in(n, 1).grad_buffer().data();
      auto g = n.grad.data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] -= g[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Array out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  return make_result(std::move(out), {a, b}, [](Node& n) {
    auto g = n.grad.data();
    for (std::size_t k = 0; k < 2; ++k) {
      Node& self = in(n, k);
      if (!self.requires_grad) continue;
      auto other = in(n, 1 - k).value.data();
      auto dst = self.grad_buffer().data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i] * other[i];
    }
  });
}

Var scale(const Var& a, double factor) {
  Array out = a.value();
  for (double& x : out.data()) x *= factor;
  return make_result(std::move(out), {a}, [factor](Node& n) {
    auto dst = in(n, 0).grad_buffer().data();
    auto g = n.grad.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += factor * g[i];
  });
}

Var add_bias(const Var& a, const Var& bias) {
  const std::size_t c = a.cols();
  if (bias.value().size() != c) {
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) + " does not match rows of " +
                         shape_string(a.shape()));
  }
  Array out = a.value();
  as_matrix(out).rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.value().data().data(), Eigen::Index(c));
  return make_result(std::move(out), {a, bias}, [](Node& n) {
    if (in(n, 0).requires_grad) in(n, 0).accumulate(n.grad);
    Node& B = in(n, 1);
    if (B.requires_grad) {
      auto dst = Eigen::Map<Eigen::RowVectorXd>(B.grad_buffer().data().data(), Eigen::Index(B.value.size()));
      dst += as_matrix(std::as_const(n.grad)).colwise().sum();
    }
  });
}

Var mul_scalar(const Var& a, const Var& s) {
  if (s.value().size() != 1) throw DimensionError("mul_scalar: scale must be a scalar, got " + shape_string(s.shape()));
  const double f = s.value()[0];
  Array out = a.value();
  for (double& x : out.data()) x *= f;
  return make_result(std::move(out), {a, s}, [](Node& n) {
    auto g = n.grad.data();
    Node& A = in(n, 0);
    Node& S = in(n, 1);
    const double f = S.value[0];
    if (A.requires_grad) {
      auto dst = A.grad_buffer().data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += f * g[i];
    }
    if (S.requires_grad) {
      auto av = A.value.data();
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
      S.grad_buffer()[0] += acc;
    }
  });
}

Var exp(const Var& a) {
  Array out = a.value();
  for (double& x : out.data()) x = std::exp(x);
  return make_result(std::move(out), {a}, [](Node& n) {
    auto dst = in(n, 0).grad_buffer().data();
    auto g = n.grad.data();
    auto y = n.value.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i] * y[i];
  });
}

Var gelu(const Var& a) {
  Array out = a.value();
  for (double& x : out.data()) x = 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  return make_result(std::move(out), {a}, [](Node& n) {
    Node& A = in(n, 0);
    auto dst = A.grad_buffer().data();
    auto g = n.grad.data();
    auto x = A.value.data();
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < dst.size(); ++i) {
      const double cdf = 0.5 * (1.0 + std::erf(x[i] * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x[i] * x[i]);
      dst[i] += g[i] * (cdf + x[i] * pdf);
    }
  });
}

namespace {

struct AxisLayout {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisLayout axis_layout(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw DimensionError("softmax axis " + std::to_string(axis) + " out of range for " + shape_string(shape));
  }
  AxisLayout l;
  for (std::size_t i = 0; i < axis; ++i) l.outer *= shape[i];
  l.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) l.inner *= shape[i];
  return l;
}

}  // namespace

Var softmax(const Var& x, std::size_t axis) {
  const AxisLayout l = axis_layout(x.shape(), axis);
  Array out = x.value();
  auto y = out.data();
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t i = 0; i < l.inner; ++i) {
      const std::size_t base = o * l.len * l.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < l.len; ++j) mx = std::max(mx, y[base + j * l.inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < l.len; ++j) {
        double& v = y[base + j * l.inner];
        v = std::exp(v - mx);
        total += v;
      }
      for (std::size_t j = 0; j < l.len; ++j) y[base + j * l.inner] /= total;
    }
  }
  return make_result(std::move(out), {x}, [l](Node& n) {
    auto dst = in(n, 0).grad_buffer().data();
    auto g = n.grad.data();
    auto y = n.value.data();
    for (std::size_t o = 0; o < l.outer; ++o) {
      for (std::size_t i = 0; i < l.inner; ++i) {
        const std::size_t base = o * l.len * l.inner + i;
        double dotgy = 0.0;
        for (std::size_t j = 0; j < l.len; ++j) dotgy += g[base + j * l.inner] * y[base + j * l.inner];
        for (std::size_t j = 0; j < l.len; ++j) {
          const std::size_t at = base + j * l.inner;
          dst[at] += y[at] * (g[at] - dotgy);
        }
      }
    }
  });
}

Var log_softmax_rows(const Var& x) {
  const std::size_t r = x.rows();
  const std::size_t c = x.cols();
  Array out = x.value();
  for (std::size_t i = 0; i < r; ++i) {
    auto row = out.row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (double v : row) total += std::exp(v - mx);
    const double lse = mx + std::log(total);
    for (double& v : row) v -= lse;
  }
  return make_result(std::move(out), {x}, [r, c](Node& n) {
    Array& dst = in(n, 0).grad_buffer();
    for (std::size_t i = 0; i < r; ++i) {
      auto g = n.grad.row(i);
      auto y = n.value.row(i);
      auto d = dst.row(i);
      double gs = 0.0;
      for (double v : g) gs += v;
      for (std::size_t j = 0; j < c; ++j) d[j] += g[j] - std::exp(y[j]) * gs;
    }
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  const std::size_t d = x.shape().back();
  if (d < 2) {
    throw DimensionError("layer_norm: degenerate normalized dimension of size " + std::to_string(d));
  }
  if (gain.value().size() != d || bias.value().size() != d) {
    throw DimensionError("layer_norm: gain/bias must have " + std::to_string(d) + " entries");
  }
  const std::size_t r = x.value().size() / d;
  Array out(x.shape());
  auto xhat = std::make_shared<std::vector<double>>(x.value().size());
  auto rstd = std::make_shared<std::vector<double>>(r);
  const auto xv = x.value().data();
  const auto gv = gain.value().data();
  const auto bv = bias.value().data();
  auto ov = out.data();
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = xv.data() + i * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= double(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= double(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[i] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * rs;
      (*xhat)[i * d + j] = h;
      ov[i * d + j] = h * gv[j] + bv[j];
    }
  }
  return make_result(std::move(out), {x, gain, bias}, [d, r, xhat, rstd](Node& n) {
    Node& X = in(n, 0);
    Node& G = in(n, 1);
    Node& B = in(n, 2);
    auto g = n.grad.data();
    const auto gv = G.value.data();
    if (G.requires_grad) {
      auto dg = G.grad_buffer().data();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < d; ++j) dg[j] += g[i * d + j] * (*xhat)[i * d + j];
    }
    if (B.requires_grad) {
      auto db = B.grad_buffer().data();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < d; ++j) db[j] += g[i * d + j];
    }
    if (X.requires_grad) {
      auto dx = X.grad_buffer().data();
      for (std::size_t i = 0; i < r; ++i) {
        double m1 = 0.0;
        double m2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double dh = g[i * d + j] * gv[j];
          m1 += dh;
          m2 += dh * (*xhat)[i * d + j];
        }
        m1 /= double(d);
        m2 /= double(d);
        for (std::size_t j = 0; j < d; ++j) {
          const double dh = g[i * d + j] * gv[j];
          dx[i * d + j] += (*rstd)[i] * (dh - m1 - (*xhat)[i * d + j] * m2);
        }
      }
    }
  });
}

Var scaled_dot_attention(const Var& q, const Var& k, const Var& v, const AttentionOptions& opts) {
  require_matrix(q, "attention");
  require_same_shape(q, k, "attention");
  require_same_shape(q, v, "attention");
  const std::size_t rows = q.rows();
  const std::size_t d = q.cols();
  if (opts.heads == 0 || d % opts.heads != 0) {
    throw ConfigError("attention: width " + std::to_string(d) + " not divisible by " +
                      std::to_string(opts.heads) + " heads");
  }
  const std::size_t seg = opts.segment_len == 0 ? rows : opts.segment_len;
  if (rows % seg != 0) {
    throw DimensionError("attention: " + std::to_string(rows) + " rows do not split into segments of " +
                         std::to_string(seg));
  }
  const std::size_t segments = rows / seg;
  const std::size_t heads = opts.heads;
  const std::size_t hd = d / heads;
  const double scale_factor = 1.0 / std::sqrt(double(hd));
  const bool causal = opts.causal;

  // Attention probabilities, laid out [segment][head][seg x seg].
  auto probs = std::make_shared<std::vector<double>>(segments * heads * seg * seg);
  Array out({rows, d});
  const Eigen::Index L = Eigen::Index(seg);
  const Eigen::Index H = Eigen::Index(hd);
  const Strided stride{Eigen::Index(d)};
  for (std::size_t s = 0; s < segments; ++s) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = s * seg * d + h * hd;
      ConstBlock Q(q.value().data().data() + off, L, H, stride);
      ConstBlock K(k.value().data().data() + off, L, H, stride);
      ConstBlock V(v.value().data().data() + off, L, H, stride);
      MutMap P(probs->data() + (s * heads + h) * seg * seg, L, L);
      P.noalias() = (Q * K.transpose()) * scale_factor;
      for (Eigen::Index i = 0; i < L; ++i) {
        const Eigen::Index visible = causal ? i + 1 : L;
        double mx = P.row(i).head(visible).maxCoeff();
        double total = 0.0;
        for (Eigen::Index j = 0; j < visible; ++j) {
          P(i, j) = std::exp(P(i, j) - mx);
          total += P(i, j);
        }
        for (Eigen::Index j = 0; j < visible; ++j) P(i, j) /= total;
        for (Eigen::Index j = visible; j < L; ++j) P(i, j) = 0.0;
      }
      MutBlock O(out.data().data() + off, L, H, stride);
      O.noalias() = P * V;
    }
  }
  return make_result(std::move(out), {q, k, v},
                     [=](Node& n) {
    Node& Qn = in(n, 0);
    Node& Kn = in(n, 1);
    Node& Vn = in(n, 2);
    RowMat dP(L, L);
    RowMat dS(L, L);
    for (std::size_t s = 0; s < segments; ++s) {
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = s * seg * d + h * hd;
        ConstBlock G(n.grad.data().data() + off, L, H, stride);
        ConstBlock Q(Qn.value.data().data() + off, L, H, stride);
        ConstBlock K(Kn.value.data().data() + off, L, H, stride);
        ConstBlock V(Vn.value.data().data() + off, L, H, stride);
        ConstMap P(probs->data() + (s * heads + h) * seg * seg, L, L);
        if (Vn.requires_grad) {
          MutBlock dV(Vn.grad_buffer().data().data() + off, L, H, stride);
          dV.noalias() += P.transpose() * G;
        }
        if (!Qn.requires_grad && !Kn.requires_grad) continue;
        dP.noalias() = G * V.transpose();
        for (Eigen::Index i = 0; i < L; ++i) {
          const double rowdot = P.row(i).dot(dP.row(i));
          dS.row(i) = (P.row(i).array() * (dP.row(i).array() - rowdot)).matrix() * scale_factor;
        }
        if (Qn.requires_grad) {
          MutBlock dQ(Qn.grad_buffer().data().data() + off, L, H, stride);
          dQ.noalias() += dS * K;
        }
        if (Kn.requires_grad) {
          MutBlock dK(Kn.grad_buffer().data().data() + off, L, H, stride);
          dK.noalias() += dS.transpose() * Q;
        }
      }
    }
  });
}

Var attention(const Var& q, const Var& k, const Var& v, const Var& out_proj,
              const AttentionOptions& opts) {
  return matmul(scaled_dot_attention(q, k, v, opts), out_proj);
}

Var gather_rows(std::span<const Var> sources, std::span<const RowRef> refs) {
  if (sources.empty()) throw DimensionError("gather_rows: no sources");
  const std::size_t c = sources.front().cols();
  for (const auto& s : sources) {
    if (s.cols() != c) {
      throw DimensionError("gather_rows: sources disagree on width (" + shape_string(sources.front().shape()) +
                           " vs " + shape_string(s.shape()) + ")");
    }
  }
  if (refs.empty()) throw DimensionError("gather_rows: empty selection");
  Array out({refs.size(), c});
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const RowRef& ref = refs[i];
    if (ref.source >= sources.size() || ref.row >= sources[ref.source].rows()) {
      throw DimensionError("gather_rows: reference (" + std::to_string(ref.source) + ", " +
                           std::to_string(ref.row) + ") out of range");
    }
    auto src = sources[ref.source].value().row(ref.row);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  std::vector<Var> inputs(sources.begin(), sources.end());
  auto kept = std::make_shared<std::vector<RowRef>>(refs.begin(), refs.end());
  return make_result(std::move(out), std::move(inputs), [kept, c](Node& n) {
    for (std::size_t i = 0; i < kept->size(); ++i) {
      const RowRef& ref = (*kept)[i];
      Node& src = in(n, ref.source);
      if (!src.requires_grad) continue;
      double* dst = src.grad_buffer().data().data() + ref.row * c;
      const double* g = n.grad.data().data() + i * c;
      for (std::size_t j = 0; j < c; ++j) dst[j] += g[j];
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  std::vector<RowRef> refs;
  for (std::size_t s = 0; s < parts.size(); ++s)
    for (std::size_t r = 0; r < parts[s].rows(); ++r) refs.push_back({s, r});
  return gather_rows(parts, refs);
}

Var slice_rows(const Var& x, std::size_t begin, std::size_t count) {
  if (begin + count > x.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") exceeds " + std::to_string(x.rows()) + " rows");
  }
  std::vector<RowRef> refs(count);
  for (std::size_t i = 0; i < count; ++i) refs[i] = {0, begin + i};
  return gather_rows(std::span<const Var>(&x, 1), refs);
}

Var select_rows(const Var& x, std::span<const std::size_t> rows) {
  std::vector<RowRef> refs(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) refs[i] = {0, rows[i]};
  return gather_rows(std::span<const Var>(&x, 1), refs);
}

Var l2_normalize_rows(const Var& x) {
  const std::size_t r = x.rows();
  const std::size_t c = x.cols();
  Array out = x.value();
  auto norms = std::make_shared<std::vector<double>>(r);
  for (std::size_t i = 0; i < r; ++i) {
    auto row = out.row(i);
    double s = 0.0;
    for (double v : row) s += v * v;
    const double nrm = std::sqrt(s);
    if (!(nrm > 0.0)) throw DegenerateInputError("l2_normalize_rows: row " + std::to_string(i) + " has zero norm");
    (*norms)[i] = nrm;
    for (double& v : row) v /= nrm;
  }
  return make_result(std::move(out), {x}, [r, c, norms](Node& n) {
    Array& dst = in(n, 0).grad_buffer();
    for (std::size_t i = 0; i < r; ++i) {
      auto g = n.grad.row(i);
      auto y = n.value.row(i);
      double gy = 0.0;
      for (std::size_t j = 0; j < c; ++j) gy += g[j] * y[j];
      auto d = dst.row(i);
      for (std::size_t j = 0; j < c; ++j) d[j] += (g[j] - y[j] * gy) / (*norms)[i];
    }
  });
}

Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return make_result(Array::scalar(s), {x}, [](Node& n) {
    const double g = n.grad[0];
    for (double& d : in(n, 0).grad_buffer().data()) d += g;
  });
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / double(x.value().size())); }

Var dot(const Var& a, const Var& b) {
  if (a.value().size() != b.value().size()) {
    throw DimensionError("dot: size mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  double s = 0.0;
  auto av = a.value().data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * bv[i];
  return make_result(Array::scalar(s), {a, b}, [](Node& n) {
    const double g = n.grad[0];
    for (std::size_t k = 0; k < 2; ++k) {
      Node& self = in(n, k);
      if (!self.requires_grad) continue;
      auto other = in(n, 1 - k).value.data();
      auto dst = self.grad_buffer().data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g * other[i];
    }
  });
}

Var cross_entropy(const Var& logits, std::span<const std::size_t> labels) {
  const std::size_t r = logits.rows();
  const std::size_t c = logits.cols();
  if (labels.size() != r) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(r) + " rows");
  }
  auto probs = std::make_shared<Array>(Shape{r, c});
  double loss = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    if (labels[i] >= c) throw ContractError("cross_entropy: label out of range");
    auto z = logits.value().row(i);
    const double mx = *std::max_element(z.begin(), z.end());
    double total = 0.0;
    auto p = probs->row(i);
    for (std::size_t j = 0; j < c; ++j) {
      p[j] = std::exp(z[j] - mx);
      total += p[j];
    }
    for (double& v : p) v /= total;
    loss -= (z[labels[i]] - mx) - std::log(total);
  }
  loss /= double(r);
  auto kept = std::make_shared<std::vector<std::size_t>>(labels.begin(), labels.end());
  return make_result(Array::scalar(loss), {logits}, [probs, kept, r, c](Node& n) {
    const double g = n.grad[0] / double(r);
    Array& dst = in(n, 0).grad_buffer();
    for (std::size_t i = 0; i < r; ++i) {
      auto p = probs->row(i);
      auto d = dst.row(i);
      for (std::size_t j = 0; j < c; ++j) d[j] += g * (p[j] - (j == (*kept)[i] ? 1.0 : 0.0));
    }
  });
}

Var cosine_sim(const Var& u, const Var& v) {
  if (u.value().size() != v.value().size()) {
    throw DimensionError("cosine_sim: size mismatch " + shape_string(u.shape()) + " vs " + shape_string(v.shape()));
  }
  const Shape row{1, u.value().size()};
  auto as_row = [&row](const Var& x) {
    return x.shape() == row ? x : make_result(x.value().reshaped(row), {x}, [](Node& n) {
      Node& src = in(n, 0);
      auto dst = src.grad_buffer().data();
      auto g = n.grad.data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
    });
  };
  return dot(l2_normalize_rows(as_row(u)), l2_normalize_rows(as_row(v)));
}

double cosine_sim(const Array& u, const Array& v) {
  if (u.size() != v.size()) {
    throw DimensionError("cosine_sim: size mismatch " + shape_string(u.shape()) + " vs " + shape_string(v.shape()));
  }
  double uv = 0.0;
  double uu = 0.0;
  double vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    uv += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  if (!(uu > 0.0) || !(vv > 0.0)) throw DegenerateInputError("cosine_sim: zero-norm vector");
  return std::clamp(uv / (std::sqrt(uu) * std::sqrt(vv)), -1.0, 1.0);
}

}  // namespace mvlpt
