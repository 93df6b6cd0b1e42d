#include <cmath>

#include "doctest.h"
#include "dyllm/error.hpp"
#include "dyllm/numerics.hpp"
#include "dyllm/sampler.hpp"
#include "oracles.hpp"

using namespace dyllm;

namespace {

constexpr TokenId kMask = 9;

SamplerConfig cfg(std::size_t n_u, std::size_t b, bool semi = true) {
    SamplerConfig c;
    c.n_u = n_u;
    c.block_size = b;
    c.semi_ar = semi;
    return c;
}

}  // namespace

TEST_CASE("sampler config validation") {
    CHECK_NOTHROW(cfg(1, 4, true).validate(8));
    CHECK_THROWS_AS(cfg(0, 4, true).validate(8), Error);
    CHECK_THROWS_AS(cfg(8, 4, true).validate(8), Error);
    CHECK_THROWS_AS(cfg(1, 3, true).validate(8), Error);
    CHECK_THROWS_AS(cfg(3, 4, true).validate(8), Error);
    CHECK_NOTHROW(cfg(3, 3, false).validate(8));
}

TEST_CASE("identical logits select the lowest positions of the active block") {
    const auto c = cfg(2, 4);
    DecodeState st({1, 2}, 8, kMask, c);
    const Matrix logits(8, 10, 0.5);
    const Selection s = process_logit(logits, st, c);
    CHECK(s.positions == std::vector<std::size_t>{0, 1});
    CHECK(s.tokens == std::vector<TokenId>{0, 0});
    CHECK(st.masked_count() == 8);  // selection does not mutate
}

TEST_CASE("a confident position wins") {
    const auto c = cfg(1, 4);
    DecodeState st({1}, 4, kMask, c);
    Matrix logits(4, 10, 0.0);
    logits(2, 6) = 10.0;
    const Selection s = process_logit(logits, st, c);
    CHECK(s.positions == std::vector<std::size_t>{2});
    CHECK(s.tokens == std::vector<TokenId>{6});
    CHECK(s.confidences[0] > 0.99);
}

TEST_CASE("mask token is never chosen") {
    const auto c = cfg(1, 2);
    DecodeState st({1}, 2, kMask, c);
    Matrix logits(2, 10, 0.0);
    logits(0, kMask) = 50.0;
    logits(0, 3) = 1.0;
    const Selection s = process_logit(logits, st, c);
    CHECK(s.tokens[0] == 3);
}

TEST_CASE("selection equals the brute-force sort oracle") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const std::size_t lr = 12, n_u = 1 + seed % 4;
        const bool semi = seed % 2 == 0;
        const auto c = semi ? cfg(n_u == 3 ? 2 : n_u, 4) : cfg(n_u, 12, false);
        DecodeState st({1, 2, 3}, lr, kMask, c);
        Rng rng(seed);
        // pre-commit a few positions in order
        const std::size_t pre = seed % 5;
        for (std::size_t i = 0; i < pre; ++i) {
            const auto cand = st.candidates();
            st.commit({static_cast<TokenId>(i)}, {cand[cand.size() / 2]});
        }
        const Matrix logits = rng_normal_fill(rng, lr, 10, 2.0);
        const Selection s = process_logit(logits, st, c);
        const auto ref = oracle::select(oracle::to_mat(logits), st.candidates(), c.n_u, kMask);
        REQUIRE(s.positions.size() == ref.size());
        for (std::size_t i = 0; i < ref.size(); ++i) {
            CHECK(s.positions[i] == ref[i].pos);
            CHECK(s.tokens[i] == ref[i].token);
            CHECK(std::abs(s.confidences[i] - ref[i].conf) < 1e-12);
        }
    }
}

TEST_CASE("commit bookkeeping") {
    const auto c = cfg(2, 4);
    DecodeState st({1}, 8, kMask, c);
    CHECK(st.n_blocks() == 2);
    st.commit({1, 2}, {0, 1});
    CHECK(st.active_block() == 0);
    CHECK_THROWS_AS(st.commit({3}, {1}), Error);          // already unmasked
    CHECK_THROWS_AS(st.commit({3}, {5}), Error);          // outside active block
    CHECK_THROWS_AS(st.commit({kMask}, {2}), Error);      // writing the mask
    CHECK_THROWS_AS(st.commit({1, 1}, {2, 2}), Error);    // duplicate
    CHECK(st.is_masked(2));                               // failed commits changed nothing
    st.commit({4, 5}, {2, 3});
    CHECK(st.active_block() == 1);
    CHECK(st.masked_in_block(0) == 0);
    st.commit({1, 1}, {4, 7});
    st.commit({1, 1}, {5, 6});
    CHECK(st.masked_count() == 0);
    CHECK_THROWS_AS(process_logit(Matrix(8, 10), st, c), Error);
    try {
        process_logit(Matrix(8, 10), st, c);
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::kDecodingComplete);
    }
}

TEST_CASE("monotone unmasking across a full decode") {
    for (std::size_t n_u : {1u, 2u, 4u}) {
        const auto c = cfg(n_u, 4);
        DecodeState st({1}, 12, kMask, c);
        Rng rng(n_u);
        std::size_t prev_block = 0, steps = 0;
        std::vector<TokenId> prev = st.response();
        while (st.masked_count() > 0) {
            const std::size_t before = st.masked_count();
            const Selection s = process_logit(rng_normal_fill(rng, 12, 10, 1.0), st, c);
            st.commit(s.tokens, s.positions);
            CHECK(st.masked_count() == before - std::min(n_u, before));
            for (std::size_t i = 0; i < 12; ++i)
                if (prev[i] != kMask) CHECK(st.response()[i] == prev[i]);
            prev = st.response();
            CHECK(st.active_block() >= prev_block);
            prev_block = st.active_block();
            ++steps;
        }
        CHECK(steps == (12 + n_u - 1) / n_u);
    }
}
