#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "dyllm/error.hpp"
#include "dyllm/model.hpp"
#include "oracles.hpp"

using namespace dyllm;

namespace {

ModelConfig small(std::uint32_t kv = 4) {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 16;
    c.n_heads = 4;
    c.n_kv_heads = kv;
    c.d_ff = 24;
    c.vocab_size = 40;
    c.mask_token_id = 39;
    return c;
}

Matrix random(std::size_t r, std::size_t c, std::uint64_t seed) {
    Rng rng(seed);
    return rng_normal_fill(rng, r, c, 1.0);
}

}  // namespace

TEST_CASE("config validation") {
    ModelConfig c = small();
    CHECK_NOTHROW(c.validate());
    c.n_kv_heads = 3;
    CHECK_THROWS_AS(c.validate(), Error);
    c = small();
    c.d_model = 18;
    CHECK_THROWS_AS(c.validate(), Error);
    c = small();
    c.mask_token_id = 40;
    CHECK_THROWS_AS(c.validate(), Error);
    CHECK_THROWS_AS(init_weights(c, 0), Error);
    CHECK(parse_residual_mode("residual") == ResidualMode::kResidual);
    CHECK_THROWS_AS(parse_residual_mode("skip"), Error);
}

TEST_CASE("weights are deterministic and follow the draw order") {
    const ModelConfig c = small(2);
    const ModelWeights a = init_weights(c, 7), b = init_weights(c, 7);
    CHECK(serialize_weights(a) == serialize_weights(b));
    CHECK(init_weights(c, 8).embedding(0, 0) != a.embedding(0, 0));

    // independent replay of the documented order
    Rng rng(7);
    const Matrix emb = rng_normal_fill(rng, c.vocab_size, c.d_model, 0.02);
    CHECK(emb == a.embedding);
    const Matrix wq = rng_normal_fill(rng, c.d_model, c.d_model, 0.02);
    const Matrix wk = rng_normal_fill(rng, c.d_model, c.kv_width(), 0.02);
    CHECK(wq == a.layers[0].wq);
    CHECK(wk == a.layers[0].wk);

    const ModelWeights z = init_weights(c, 7, 0.0);
    for (double v : z.layers[1].wo.values()) CHECK(v == 0.0);
    for (double v : z.layers[1].attn_norm) CHECK(v == 1.0);
    for (double v : z.final_norm) CHECK(v == 1.0);
}

TEST_CASE("qkv projection shapes and zero input") {
    const ModelWeights w = init_weights(small(2), 1);
    const std::vector<std::size_t> pos = {5};
    const QkvRows z = qkv_project(w, 0, Matrix(1, 16), pos);
    CHECK(z.q.rows() == 1);
    CHECK(z.q.cols() == 16);
    CHECK(z.k.cols() == 8);
    CHECK(z.v.cols() == 8);
    for (const Matrix* m : {&z.q, &z.k, &z.v})
        for (double v : m->values()) CHECK(v == 0.0);
    CHECK_THROWS_AS(qkv_project(w, 0, Matrix(1, 15), pos), Error);
}

TEST_CASE("qkv projection matches per-head oracle") {
    for (std::uint32_t kv : {4u, 2u, 1u}) {
        const ModelWeights w = init_weights(small(kv), kv);
        const Matrix x = random(3, 16, 4);
        const std::vector<std::size_t> pos = {0, 9, 33};
        const QkvRows r = qkv_project(w, 1, x, pos);
        const std::size_t dh = 4;
        // per-head recomposition: each head block is x times its column slice
        for (std::size_t h = 0; h < kv; ++h) {
            oracle::Mat wk_h(16, std::vector<double>(dh));
            for (std::size_t i = 0; i < 16; ++i)
                for (std::size_t e = 0; e < dh; ++e) wk_h[i][e] = w.layers[1].wk(i, h * dh + e);
            const oracle::Mat k_h = oracle::rope(oracle::matmul(oracle::to_mat(x), wk_h), pos, 1e4, dh);
            for (std::size_t i = 0; i < 3; ++i)
                for (std::size_t e = 0; e < dh; ++e) CHECK(std::abs(r.k(i, h * dh + e) - k_h[i][e]) < 1e-12);
        }
        const oracle::Mat q = oracle::rope(oracle::matmul(oracle::to_mat(x), oracle::to_mat(w.layers[1].wq)),
                                           pos, 1e4, dh);
        CHECK(oracle::max_diff(oracle::to_mat(r.q), q) < 1e-12);
    }
}

TEST_CASE("GQA with one group per head equals plain multi-head projection") {
    const ModelWeights w = init_weights(small(4), 3);
    const Matrix x = random(2, 16, 8);
    const std::vector<std::size_t> pos = {1, 2};
    const QkvRows r = qkv_project(w, 0, x, pos);
    CHECK(r.k == rope_rotate(matmul(x, w.layers[0].wk), pos, 1e4, 4));
    CHECK(r.v == matmul(x, w.layers[0].wv));
}

TEST_CASE("ffn forward") {
    const ModelWeights w = init_weights(small(), 5);
    const Matrix zero_out = ffn_forward(w, 0, Matrix(2, 16));
    for (double v : zero_out.values()) CHECK(v == 0.0);
    const Matrix x = random(6, 16, 9);
    const Matrix full = ffn_forward(w, 1, x);
    CHECK(oracle::max_diff(oracle::to_mat(full), oracle::ffn(w.layers[1], oracle::to_mat(x))) < 1e-12);
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<std::size_t> rows;
        for (std::size_t r = 0; r < 6; ++r)
            if (rng.next_u64() % 2 == 0) rows.push_back(r);
        Matrix sub(rows.size(), 16);
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t j = 0; j < 16; ++j) sub(i, j) = x(rows[i], j);
        const Matrix y = ffn_forward(w, 1, sub);
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t j = 0; j < 16; ++j) CHECK(y(i, j) == full(rows[i], j));
    }
}

TEST_CASE("weight file round trip and errors") {
    const ModelWeights w = init_weights(small(2), 11);
    const auto bytes = serialize_weights(w);
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "DYLM");
    CHECK(bytes[4] == 1);
    CHECK(bytes[5] == 0);
    const ModelWeights back = deserialize_weights(bytes);
    CHECK(serialize_weights(back) == bytes);
    CHECK(back.config == w.config);

    const auto path = std::filesystem::temp_directory_path() / "dyllm_test_weights.bin";
    save_weights(w, path);
    CHECK(serialize_weights(load_weights(path)) == bytes);
    std::ifstream in(path, std::ios::binary);
    std::vector<std::uint8_t> disk((std::istreambuf_iterator<char>(in)), {});
    CHECK(disk == bytes);
    std::filesystem::remove(path);

    auto bad = bytes;
    bad[0] = 'X';
    try {
        deserialize_weights(bad);
        FAIL("expected throw");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::kBadMagic);
        CHECK(std::string(e.what()).find("bad magic") != std::string::npos);
    }
    bad = bytes;
    bad[4] = 2;
    try {
        deserialize_weights(bad);
        FAIL("expected throw");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::kBadVersion);
    }
    // header: 4 + 4 + 7*4 + 4 + 8 = 48 bytes; then embedding 40x16; then layer 0 wq 16x16
    const std::size_t cut = 48 + 8 * (40 * 16 + 16 * 16 + 3);
    std::vector<std::uint8_t> trunc(bytes.begin(), bytes.begin() + static_cast<long>(cut));
    try {
        deserialize_weights(trunc);
        FAIL("expected throw");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::kUnexpectedEof);
        const std::string msg = e.what();
        CHECK(msg.find("unexpected end of file") != std::string::npos);
        CHECK(msg.find("layers.0.wk") != std::string::npos);
    }
    auto longer = bytes;
    longer.push_back(0);
    CHECK_THROWS_AS(deserialize_weights(longer), Error);
    CHECK_THROWS_AS(load_weights("/nonexistent/dir/w.bin"), Error);
}
