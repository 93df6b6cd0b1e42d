#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "dyllm/matrix.hpp"
#include "dyllm/model.hpp"

namespace dyllm {

struct SamplerConfig {
    std::size_t n_u = 1;          // tokens unmasked per step
    std::size_t block_size = 32;  // semi-AR block length
    bool semi_ar = true;

    // Requires n_u >= 1 and, when semi_ar, block_size >= n_u with n_u dividing
    // block_size and block_size dividing response_len.
    void validate(std::size_t response_len) const;
};

// Response buffer plus block bookkeeping. Response positions are 0-based
// offsets into the response, not global sequence positions.
class DecodeState {
public:
    DecodeState(std::vector<TokenId> prompt, std::size_t response_len, TokenId mask_token,
                const SamplerConfig& cfg);

    const std::vector<TokenId>& prompt() const noexcept { return prompt_; }
    const std::vector<TokenId>& response() const noexcept { return response_; }
    TokenId mask_token() const noexcept { return mask_; }
    std::size_t block_size() const noexcept { return block_size_; }
    std::size_t n_blocks() const noexcept { return masked_per_block_.size(); }
    std::size_t active_block() const noexcept { return active_block_; }
    std::size_t masked_in_block(std::size_t block) const { return masked_per_block_.at(block); }
    std::size_t masked_count() const noexcept { return masked_total_; }
    bool is_masked(std::size_t pos) const { return response_.at(pos) == mask_; }

    // Masked positions eligible for unmasking right now.
    std::vector<std::size_t> candidates() const;

    // Writes tokens; every position must be masked and inside the active block.
    void commit(const std::vector<TokenId>& tokens, const std::vector<std::size_t>& positions);

private:
    std::vector<TokenId> prompt_;
    std::vector<TokenId> response_;
    TokenId mask_;
    std::size_t block_size_;
    std::vector<std::size_t> masked_per_block_;
    std::size_t active_block_ = 0;
    std::size_t masked_total_;
};

struct Selection {
    std::vector<std::size_t> positions;  // response offsets, ascending
    std::vector<TokenId> tokens;
    std::vector<double> confidences;
};

// Confidence-ranked greedy unmasking. response_logits holds one row per
// response position. Picks the min(n_u, eligible) masked positions with the
// highest max-softmax probability (ties: lower position), each taking its
// argmax token (ties: lower id). The mask token is excluded from the argmax
// and the softmax. Throws kDecodingComplete when nothing is
// masked.
Selection process_logit(const Matrix& response_logits, const DecodeState& state,
                        const SamplerConfig& cfg);

}  // namespace dyllm
