#pragma once

#include <span>

#include "stagechain/ad/rng.hpp"
#include "stagechain/ad/tensor.hpp"

namespace stagechain::ad {

// All ops are row-local: row i of a matrix result depends only on row i of
// the row-indexed inputs, and sums run in ascending index order. Evaluating
// the same row alone therefore reproduces the batched result bit-for-bit,
// which incremental decoding relies on.

Tensor matmul(const Tensor& a, const Tensor& b);     // [m×k]·[k×n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m×k]·[n×k]ᵀ
Tensor matvec(const Tensor& w, const Tensor& v);     // [m×k]·[k]

Tensor add(const Tensor& a, const Tensor& b);  // same shape
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise, same shape
Tensor scale(const Tensor& a, double factor);
Tensor scalar_mul(const Tensor& s, const Tensor& x);  // s has one element
Tensor sum(const Tensor& x);

Tensor sigmoid(const Tensor& x);
Tensor gelu(const Tensor& x);  // tanh approximation

// v / (‖v‖₂ + eps) for a rank-1 tensor.
Tensor l2_normalize(const Tensor& v, double eps = 1e-6);

Tensor embedding(const Tensor& table, std::span<const int> ids);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
Tensor softmax_rows(const Tensor& x);
// Row i is a softmax over columns 0..i; masked entries are exactly 0.
Tensor causal_softmax(const Tensor& x);

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t len);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor concat_rows(std::span<const Tensor> parts);

Tensor row(const Tensor& x, std::size_t i);                         // -> [cols]
Tensor add_to_row(const Tensor& x, std::size_t i, const Tensor& v);  // x[i] += v

// Inverted dropout; identity when p == 0.
Tensor dropout(const Tensor& x, double p, Rng& rng);

// Mean token NLL over positions whose target != ignore_index.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> targets,
                             int ignore_index = -100);

}  // namespace stagechain::ad
