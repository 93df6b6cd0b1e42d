#include "dyllm/attention.hpp"

#include <cmath>
#include <string>

#include "dyllm/error.hpp"
#include "dyllm/kernels.hpp"
#include "dyllm/numerics.hpp"

namespace dyllm {
namespace {

struct Dims {
    std::size_t d_head;
    std::size_t group;
    std::size_t q_width;
    std::size_t kv_width;
};

Dims check_dims(const Matrix& q, const Matrix& k, HeadLayout heads, const char* op) {
    if (heads.n_heads == 0 || heads.n_kv_heads == 0 || heads.n_heads % heads.n_kv_heads != 0) {
        throw Error(ErrorCode::kInvalidArgument,
                    std::string(op) + ": invalid head layout " + std::to_string(heads.n_heads) +
                        "/" + std::to_string(heads.n_kv_heads));
    }
    if (q.cols() % heads.n_heads != 0) {
        throw Error(ErrorCode::kShapeMismatch, std::string(op) + ": query width of " +
                                                   q.shape_string() + " not divisible by " +
                                                   std::to_string(heads.n_heads) + " heads");
    }
    const std::size_t d_head = q.cols() / heads.n_heads;
    if (k.cols() != d_head * heads.n_kv_heads) {
        throw Error(ErrorCode::kShapeMismatch,
                    std::string(op) + ": key " + k.shape_string() + " does not match " +
                        std::to_string(heads.n_kv_heads) + " heads of width " +
                        std::to_string(d_head));
    }
    return {d_head, heads.n_heads / heads.n_kv_heads, q.cols(), k.cols()};
}

// d_head x L transposed slice of one key head.
Matrix key_head_transposed(const Matrix& k, std::size_t kv_head, std::size_t d_head) {
    Matrix kt(d_head, k.rows());
    for (std::size_t r = 0; r < k.rows(); ++r) {
        const auto row = k.row(r);
        for (std::size_t c = 0; c < d_head; ++c) kt(c, r) = row[kv_head * d_head + c];
    }
    return kt;
}

Matrix head_probs(const Matrix& q, const Matrix& kt, std::size_t head, const Dims& dims) {
    Matrix s(q.rows(), kt.cols());
    if (!s.empty()) {
        kernels::active().gemm(q.rows(), kt.cols(), dims.d_head, q.data() + head * dims.d_head,
                               q.cols(), kt.data(), kt.cols(), s.data(), s.cols());
    }
    row_softmax_inplace(s, 1.0 / std::sqrt(static_cast<double>(dims.d_head)));
    return s;
}

}  // namespace

Matrix attention_probs(const Matrix& q_rows, const Matrix& k, HeadLayout heads,
                       std::size_t head) {
    const Dims dims = check_dims(q_rows, k, heads, "attention_probs");
    if (head >= heads.n_heads) {
        throw Error(ErrorCode::kIndexOutOfBounds, "attention_probs: head " + std::to_string(head));
    }
    return head_probs(q_rows, key_head_transposed(k, head / dims.group, dims.d_head), head, dims);
}

Matrix exact_attention_rows(const Matrix& q_rows, const Matrix& k, const Matrix& v,
                            HeadLayout heads) {
    const Dims dims = check_dims(q_rows, k, heads, "exact_attention_rows");
    if (v.rows() != k.rows() || v.cols() != k.cols()) {
        throw Error(ErrorCode::kShapeMismatch, "exact_attention_rows: key " + k.shape_string() +
                                                   " and value " + v.shape_string() + " differ");
    }
    Matrix out(q_rows.rows(), dims.q_width);
    if (q_rows.rows() == 0) return out;
    const auto& kern = kernels::active();
    for (std::size_t kvh = 0; kvh < heads.n_kv_heads; ++kvh) {
        const Matrix kt = key_head_transposed(k, kvh, dims.d_head);
        for (std::size_t g = 0; g < dims.group; ++g) {
            const std::size_t h = kvh * dims.group + g;
            const Matrix a = head_probs(q_rows, kt, h, dims);
            kern.gemm(a.rows(), dims.d_head, a.cols(), a.data(), a.cols(),
                      v.data() + kvh * dims.d_head, v.cols(), out.data() + h * dims.d_head,
                      out.cols());
        }
    }
    return out;
}

Matrix approximate_attention(const Matrix& q, const Matrix& k, const Matrix& delta_v,
                             const SaliencyIndex& idx, HeadLayout heads) {
    const Dims dims = check_dims(q, k, heads, "approximate_attention");
    if (delta_v.rows() != idx.size() || (delta_v.rows() > 0 && delta_v.cols() != dims.kv_width)) {
        throw Error(ErrorCode::kShapeMismatch,
                    "approximate_attention: value delta " + delta_v.shape_string() + " for " +
                        std::to_string(idx.size()) + " salient positions of width " +
                        std::to_string(dims.kv_width));
    }
    idx.check_bounds(k.rows());
    Matrix out(q.rows(), dims.q_width);
    if (idx.empty() || q.rows() == 0) return out;
    const auto& kern = kernels::active();
    for (std::size_t kvh = 0; kvh < heads.n_kv_heads; ++kvh) {
        const Matrix kt = key_head_transposed(k, kvh, dims.d_head);
        for (std::size_t g = 0; g < dims.group; ++g) {
            const std::size_t h = kvh * dims.group + g;
            const Matrix a_sal = gather_cols(head_probs(q, kt, h, dims), idx.positions());
            kern.gemm(a_sal.rows(), dims.d_head, a_sal.cols(), a_sal.data(), a_sal.cols(),
                      delta_v.data() + kvh * dims.d_head, delta_v.cols(),
                      out.data() + h * dims.d_head, out.cols());
        }
    }
    return out;
}

}  // namespace dyllm
