#include "dyllm/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dyllm/error.hpp"

namespace dyllm {

void SamplerConfig::validate(std::size_t response_len) const {
    auto fail = [](const std::string& what) { throw Error(ErrorCode::kInvalidConfig, what); };
    if (n_u == 0) fail("n_u must be at least 1");
    if (response_len == 0) fail("response length must be positive");
    if (!semi_ar) return;
    if (block_size < n_u) fail("block size must be >= n_u");
    if (block_size % n_u != 0) {
        fail("n_u (" + std::to_string(n_u) + ") must divide block size (" +
             std::to_string(block_size) + ")");
    }
    if (response_len % block_size != 0) {
        fail("block size (" + std::to_string(block_size) + ") must divide response length (" +
             std::to_string(response_len) + ")");
    }
}

DecodeState::DecodeState(std::vector<TokenId> prompt, std::size_t response_len, TokenId mask_token,
                         const SamplerConfig& cfg)
    : prompt_(std::move(prompt)),
      response_(response_len, mask_token),
      mask_(mask_token),
      block_size_(cfg.semi_ar ? cfg.block_size : response_len),
      masked_total_(response_len) {
    cfg.validate(response_len);
    masked_per_block_.assign(response_len / block_size_, block_size_);
}

std::vector<std::size_t> DecodeState::candidates() const {
    std::vector<std::size_t> out;
    if (masked_total_ == 0) return out;
    const std::size_t begin = active_block_ * block_size_;
    const std::size_t end = begin + block_size_;
    for (std::size_t p = begin; p < end; ++p) {
        if (response_[p] == mask_) out.push_back(p);
    }
    return out;
}

void DecodeState::commit(const std::vector<TokenId>& tokens,
                         const std::vector<std::size_t>& positions) {
    if (tokens.size() != positions.size()) {
        throw Error(ErrorCode::kShapeMismatch, "commit: token and position counts differ");
    }
    // Validate everything first so a failed commit leaves the state untouched.
    for (std::size_t i = 0; i < positions.size(); ++i) {
        const std::size_t p = positions[i];
        if (p >= response_.size()) {
            throw Error(ErrorCode::kIndexOutOfBounds, "commit: position " + std::to_string(p));
        }
        if (response_[p] != mask_) {
            throw Error(ErrorCode::kInvalidState,
                        "commit: position " + std::to_string(p) + " is already unmasked");
        }
        if (p / block_size_ != active_block_) {
            throw Error(ErrorCode::kInvalidState, "commit: position " + std::to_string(p) +
                                                      " is outside active block " +
                                                      std::to_string(active_block_));
        }
        if (tokens[i] == mask_) {
            throw Error(ErrorCode::kInvalidArgument, "commit: cannot write the mask token");
        }
        if (std::count(positions.begin(), positions.end(), p) != 1) {
            throw Error(ErrorCode::kInvalidArgument,
                        "commit: duplicate position " + std::to_string(p));
        }
    }
    for (std::size_t i = 0; i < positions.size(); ++i) {
        response_[positions[i]] = tokens[i];
        --masked_per_block_[active_block_];
        --masked_total_;
    }
    while (active_block_ + 1 < masked_per_block_.size() && masked_per_block_[active_block_] == 0) {
        ++active_block_;
    }
}

Selection process_logit(const Matrix& response_logits, const DecodeState& state,
                        const SamplerConfig& cfg) {
    if (response_logits.rows() != state.response().size()) {
        throw Error(ErrorCode::kShapeMismatch,
                    "process_logit: " + std::to_string(response_logits.rows()) +
                        " logit rows for " + std::to_string(state.response().size()) +
                        " response positions");
    }
    const auto eligible = state.candidates();
    if (eligible.empty()) {
        throw Error(ErrorCode::kDecodingComplete, "no masked positions remain");
    }
    struct Candidate {
        std::size_t pos;
        TokenId token;
        double confidence;
    };
    const auto mask = static_cast<std::size_t>(state.mask_token());
    std::vector<Candidate> scored;
    scored.reserve(eligible.size());
    for (std::size_t pos : eligible) {
        const auto row = response_logits.row(pos);
        // The mask token is never a decoding target; it is excluded from both
        // the argmax and the softmax normaliser.
        std::size_t best = mask == 0 ? 1 : 0;
        for (std::size_t j = best + 1; j < row.size(); ++j) {
            if (j != mask && row[j] > row[best]) best = j;
        }
        // max softmax probability = 1 / sum exp(l_j - l_max)
        double denom = 0.0;
        for (std::size_t j = 0; j < row.size(); ++j) {
            if (j != mask) denom += std::exp(row[j] - row[best]);
        }
        scored.push_back({pos, static_cast<TokenId>(best), 1.0 / denom});
    }
    std::stable_sort(scored.begin(), scored.end(), [](const Candidate& a, const Candidate& b) {
        if (a.confidence != b.confidence) return a.confidence > b.confidence;
        return a.pos < b.pos;
    });
    const std::size_t take = std::min(cfg.n_u, scored.size());
    scored.resize(take);
    std::sort(scored.begin(), scored.end(),
              [](const Candidate& a, const Candidate& b) { return a.pos < b.pos; });
    Selection sel;
    for (const auto& c : scored) {
        sel.positions.push_back(c.pos);
        sel.tokens.push_back(c.token);
        sel.confidences.push_back(c.confidence);
    }
    return sel;
}

}  // namespace dyllm
