#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

namespace dyllm {

enum class InputMode { kFullSequence, kResponseOnly };
enum class StepKind { kFull, kSparse };

std::string_view input_mode_name(InputMode mode);
std::string_view step_kind_name(StepKind kind);

// Matmul FLOPs only; one multiply-add counts as two.
struct FlopBreakdown {
    std::uint64_t attn_scores = 0;
    std::uint64_t attn_context = 0;
    std::uint64_t ffn = 0;
    std::uint64_t proj = 0;

    std::uint64_t total() const { return attn_scores + attn_context + ffn + proj; }
    FlopBreakdown& operator+=(const FlopBreakdown& o) {
        attn_scores += o.attn_scores;
        attn_context += o.attn_context;
        ffn += o.ffn;
        proj += o.proj;
        return *this;
    }
    friend bool operator==(const FlopBreakdown&, const FlopBreakdown&) = default;
};

inline constexpr double kHighSimilarity = 0.99;

struct LayerMetrics {
    std::size_t n_salient = 0;  // rows that ran the FFN at this layer
    FlopBreakdown flops;
    // Temporal cosine similarity of the context rows (sparse steps only).
    bool has_similarity = false;
    double sim_min = 1.0;
    double sim_mean = 1.0;
    double sim_frac_high = 1.0;  // fraction of rows with s >= 0.99
    std::vector<double> similarity;
};

struct StepMetrics {
    std::size_t step = 0;
    StepKind kind = StepKind::kFull;
    InputMode mode = InputMode::kFullSequence;
    std::size_t input_len = 0;
    std::vector<LayerMetrics> layers;
    FlopBreakdown head_flops;  // LM head, reported as projection FLOPs

    FlopBreakdown flops() const;
};

}  // namespace dyllm
