#pragma once

#include <cstddef>

#include "dyllm/cache.hpp"
#include "dyllm/matrix.hpp"

namespace dyllm {

struct HeadLayout {
    std::size_t n_heads;
    std::size_t n_kv_heads;
};

// Per-head softmax(Q K^T / sqrt(d_head)) V with grouped-query sharing: query
// head h reads key/value head h / (n_heads / n_kv_heads). Rows of q are
// independent, so any subset of query rows reproduces the matching rows of
// the full product exactly.
Matrix exact_attention_rows(const Matrix& q_rows, const Matrix& k, const Matrix& v,
                            HeadLayout heads);

// Attention probabilities of one query head, q_rows.rows() x k.rows().
Matrix attention_probs(const Matrix& q_rows, const Matrix& k, HeadLayout heads,
                       std::size_t head);

// Delta-context update A[:, idx] * dV per head, recomposed to
// q.rows() x (n_heads * d_head). idx addresses rows of k; delta_v holds one
// row per idx entry. Empty idx gives the zero matrix without touching scores.
Matrix approximate_attention(const Matrix& q, const Matrix& k, const Matrix& delta_v,
                             const SaliencyIndex& idx, HeadLayout heads);

}  // namespace dyllm
