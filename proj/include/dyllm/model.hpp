#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

#include "dyllm/matrix.hpp"

namespace dyllm {

using TokenId = std::int32_t;

enum class ResidualMode : std::uint32_t {
    // Layer output is FFN(RMSNorm(OutProj(C))) with no skip connections; the
    // FFN output replaces the hidden state wholesale.
    kLiteral = 0,
    // h = x + OutProj(C); out = h + FFN(RMSNorm(h)).
    kResidual = 1,
};

std::string_view residual_mode_name(ResidualMode mode);
ResidualMode parse_residual_mode(std::string_view name);

struct ModelConfig {
    std::uint32_t n_layers = 8;
    std::uint32_t d_model = 128;
    std::uint32_t n_heads = 8;
    std::uint32_t n_kv_heads = 8;
    std::uint32_t d_ff = 512;
    std::uint32_t vocab_size = 512;
    std::uint32_t mask_token_id = 511;
    double rope_theta = 10000.0;
    ResidualMode residual_mode = ResidualMode::kLiteral;

    std::size_t d_head() const { return d_model / n_heads; }
    std::size_t kv_width() const { return static_cast<std::size_t>(n_kv_heads) * d_head(); }
    std::size_t group_size() const { return n_heads / n_kv_heads; }

    // Throws Error(kInvalidConfig) naming the first violated constraint.
    void validate() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerWeights {
    Matrix wq;  // d_model x d_model
    Matrix wk;  // d_model x kv_width
    Matrix wv;  // d_model x kv_width
    Matrix wo;  // d_model x d_model
    Matrix w1;  // d_model x d_ff
    Matrix w2;  // d_ff x d_model
    std::vector<double> attn_norm;
    std::vector<double> ffn_norm;

    friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

// Immutable after construction; safe to share between sessions.
struct ModelWeights {
    ModelConfig config;
    Matrix embedding;  // vocab x d_model
    std::vector<LayerWeights> layers;
    std::vector<double> final_norm;
    Matrix lm_head;  // d_model x vocab

    friend bool operator==(const ModelWeights&, const ModelWeights&) = default;
};

inline constexpr double kDefaultInitStddev = 0.02;

// Draw order from a single SplitMix64 stream seeded with `seed`: embedding,
// then per layer wq, wk, wv, wo, w1, w2, then lm_head. Norm gains are set to
// one and consume no draws.
ModelWeights init_weights(const ModelConfig& config, std::uint64_t seed,
                          double stddev = kDefaultInitStddev);

struct QkvRows {
    Matrix q;
    Matrix k;
    Matrix v;
};

Matrix embed(const ModelWeights& w, std::span<const TokenId> tokens);

// Projections with RoPE applied to Q and K at the supplied global positions.
Matrix q_project(const ModelWeights& w, std::size_t layer, const Matrix& x_rows,
                 std::span<const std::size_t> positions);
Matrix k_project(const ModelWeights& w, std::size_t layer, const Matrix& x_rows,
                 std::span<const std::size_t> positions);
Matrix v_project(const ModelWeights& w, std::size_t layer, const Matrix& x_rows);
QkvRows qkv_project(const ModelWeights& w, std::size_t layer, const Matrix& x_rows,
                    std::span<const std::size_t> positions);

Matrix out_project(const ModelWeights& w, std::size_t layer, const Matrix& context_rows);

// W2 * GELU(W1 * x), row by row.
Matrix ffn_forward(const ModelWeights& w, std::size_t layer, const Matrix& x_rows);

// Final RMSNorm followed by the LM head.
Matrix lm_logits(const ModelWeights& w, const Matrix& hidden_rows);

inline constexpr char kWeightsMagic[4] = {'D', 'Y', 'L', 'M'};
inline constexpr std::uint32_t kWeightsVersion = 1;

// Little-endian layout: magic, u32 version, u32 n_layers, d_model, n_heads,
// n_kv_heads, d_ff, vocab_size, mask_token_id, u32 residual_mode,
// f64 rope_theta, then every tensor as raw f64 in draw order with each
// layer's attn_norm and ffn_norm following its w2 and final_norm before
// lm_head.
void save_weights(const ModelWeights& w, const std::filesystem::path& path);
ModelWeights load_weights(const std::filesystem::path& path);

std::vector<std::uint8_t> serialize_weights(const ModelWeights& w);
ModelWeights deserialize_weights(std::span<const std::uint8_t> bytes);

}  // namespace dyllm
