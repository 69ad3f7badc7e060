// SPDX-License-Identifier: Apache-2.0
//
// Differentiable dense operations. Matrices are rank-2 arrays; rank-1 arrays
// act as a single row where noted.
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mvlpt/autodiff.hpp"

namespace mvlpt {

inline constexpr double kLayerNormEps = 1e-5;

Var matmul(const Var& a, const Var& b);
// a · bᵀ without materializing the transpose.
Var matmul_nt(const Var& a, const Var& b);
Var transpose(const Var& a);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
// Adds a length-c vector to every row of an r×c matrix.
Var add_bias(const Var& a, const Var& bias);
// Multiplies every entry of `a` by the scalar held in `s`.
Var mul_scalar(const Var& a, const Var& s);
Var exp(const Var& a);
Var gelu(const Var& a);

// Max-subtracted softmax along `axis`.
Var softmax(const Var& x, std::size_t axis);
Var log_softmax_rows(const Var& x);

// Normalizes each row over its last dimension, then applies gain and bias.
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = kLayerNormEps);

struct AttentionOptions {
  std::size_t heads = 1;
  // Rows are grouped into independent sequences of this length; 0 means one
  // sequence spanning every row.
  std::size_t segment_len = 0;
  bool causal = false;
};

// softmax(q kᵀ / sqrt(d/heads)) v per head and per segment, heads
// concatenated along columns.
Var scaled_dot_attention(const Var& q, const Var& k, const Var& v, const AttentionOptions& opts);
// scaled_dot_attention followed by the output projection.
Var attention(const Var& q, const Var& k, const Var& v, const Var& out_proj,
              const AttentionOptions& opts);

struct RowRef {
  std::size_t source = 0;
  std::size_t row = 0;
};

// Output row i is row refs[i].row of sources[refs[i].source]. Covers concat,
// slicing, interleaving and embedding lookup.
Var gather_rows(std::span<const Var> sources, std::span<const RowRef> refs);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(const Var& x, std::size_t begin, std::size_t count);
Var select_rows(const Var& x, std::span<const std::size_t> rows);

Var l2_normalize_rows(const Var& x);

Var sum(const Var& x);
Var mean(const Var& x);
Var dot(const Var& a, const Var& b);

// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
Var cross_entropy(const Var& logits, std::span<const std::size_t> labels);

Var cosine_sim(const Var& u, const Var& v);
double cosine_sim(const Array& u, const Array& v);

}  // namespace mvlpt
