#include "dyllm/model.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <iterator>
#include <string>

#include "dyllm/error.hpp"
#include "dyllm/numerics.hpp"

namespace dyllm {

std::string_view residual_mode_name(ResidualMode mode) {
    return mode == ResidualMode::kResidual ? "residual" : "literal";
}

ResidualMode parse_residual_mode(std::string_view name) {
    if (name == "literal") return ResidualMode::kLiteral;
    if (name == "residual") return ResidualMode::kResidual;
    throw Error(ErrorCode::kInvalidConfig, "unknown residual mode '" + std::string(name) + "'");
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& what) { throw Error(ErrorCode::kInvalidConfig, what); };
    if (n_layers == 0) fail("n_layers must be positive");
    if (d_model == 0 || n_heads == 0 || n_kv_heads == 0) fail("d_model and head counts must be positive");
    if (d_ff == 0) fail("d_ff must be positive");
    if (vocab_size < 2) fail("vocab_size must be at least 2");
    if (n_heads % n_kv_heads != 0) {
        fail("n_heads (" + std::to_string(n_heads) + ") must be divisible by n_kv_heads (" +
             std::to_string(n_kv_heads) + ")");
    }
    if (d_model % n_heads != 0) {
        fail("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
             std::to_string(n_heads) + ")");
    }
    if (d_head() % 2 != 0) fail("head width must be even for rotary embeddings");
    if (mask_token_id >= vocab_size) fail("mask_token_id must be below vocab_size");
    if (!(rope_theta > 0.0)) fail("rope_theta must be positive");
    if (residual_mode != ResidualMode::kLiteral && residual_mode != ResidualMode::kResidual) {
        fail("unknown residual mode");
    }
}

ModelWeights init_weights(const ModelConfig& config, std::uint64_t seed, double stddev) {
    config.validate();
    Rng rng(seed);
    const std::size_t d = config.d_model;
    const std::size_t kv = config.kv_width();
    ModelWeights w;
    w.config = config;
    w.embedding = rng_normal_fill(rng, config.vocab_size, d, stddev);
    w.layers.reserve(config.n_layers);
    for (std::uint32_t l = 0; l < config.n_layers; ++l) {
        LayerWeights lw;
        lw.wq = rng_normal_fill(rng, d, d, stddev);
        lw.wk = rng_normal_fill(rng, d, kv, stddev);
        lw.wv = rng_normal_fill(rng, d, kv, stddev);
        lw.wo = rng_normal_fill(rng, d, d, stddev);
        lw.w1 = rng_normal_fill(rng, d, config.d_ff, stddev);
        lw.w2 = rng_normal_fill(rng, config.d_ff, d, stddev);
        lw.attn_norm.assign(d, 1.0);
        lw.ffn_norm.assign(d, 1.0);
        w.layers.push_back(std::move(lw));
    }
    w.final_norm.assign(d, 1.0);
    w.lm_head = rng_normal_fill(rng, d, config.vocab_size, stddev);
    return w;
}

Matrix embed(const ModelWeights& w, std::span<const TokenId> tokens) {
    const std::size_t d = w.config.d_model;
    Matrix x(tokens.size(), d);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const TokenId t = tokens[i];
        if (t < 0 || static_cast<std::uint32_t>(t) >= w.config.vocab_size) {
            throw Error(ErrorCode::kIndexOutOfBounds,
                        "token id " + std::to_string(t) + " outside vocabulary of " +
                            std::to_string(w.config.vocab_size));
        }
        const auto src = w.embedding.row(static_cast<std::size_t>(t));
        std::copy(src.begin(), src.end(), x.row(i).begin());
    }
    return x;
}

namespace {

void check_layer(const ModelWeights& w, std::size_t layer) {
    if (layer >= w.layers.size()) {
        throw Error(ErrorCode::kIndexOutOfBounds, "layer " + std::to_string(layer) +
                                                      " out of range for " +
                                                      std::to_string(w.layers.size()) + " layers");
    }
}

void check_width(const Matrix& x, std::size_t width, const char* what) {
    if (x.cols() != width) {
        throw Error(ErrorCode::kShapeMismatch, std::string(what) + ": input " + x.shape_string() +
                                                   " must have " + std::to_string(width) +
                                                   " columns");
    }
}

}  // namespace

Matrix q_project(const ModelWeights& w, std::size_t layer, const Matrix& x_rows,
                 std::span<const std::size_t> positions) {
    check_layer(w, layer);
    check_width(x_rows, w.config.d_model, "q_project");
    return rope_rotate(matmul(x_rows, w.layers[layer].wq), positions, w.config.rope_theta,
                       w.config.d_head());
}

Matrix k_project(const ModelWeights& w, std::size_t layer, const Matrix& x_rows,
                 std::span<const std::size_t> positions) {
    check_layer(w, layer);
    check_width(x_rows, w.config.d_model, "k_project");
    return rope_rotate(matmul(x_rows, w.layers[layer].wk), positions, w.config.rope_theta,
                       w.config.d_head());
}

Matrix v_project(const ModelWeights& w, std::size_t layer, const Matrix& x_rows) {
    check_layer(w, layer);
    check_width(x_rows, w.config.d_model, "v_project");
    return matmul(x_rows, w.layers[layer].wv);
}

QkvRows qkv_project(const ModelWeights& w, std::size_t layer, const Matrix& x_rows,
                    std::span<const std::size_t> positions) {
    return {q_project(w, layer, x_rows, positions), k_project(w, layer, x_rows, positions),
            v_project(w, layer, x_rows)};
}

Matrix out_project(const ModelWeights& w, std::size_t layer, const Matrix& context_rows) {
    check_layer(w, layer);
    check_width(context_rows, w.config.d_model, "out_project");
    return matmul(context_rows, w.layers[layer].wo);
}

Matrix ffn_forward(const ModelWeights& w, std::size_t layer, const Matrix& x_rows) {
    check_layer(w, layer);
    check_width(x_rows, w.config.d_model, "ffn_forward");
    Matrix hidden = matmul(x_rows, w.layers[layer].w1);
    for (std::size_t i = 0; i < hidden.size(); ++i) hidden.data()[i] = gelu(hidden.data()[i]);
    return matmul(hidden, w.layers[layer].w2);
}

Matrix lm_logits(const ModelWeights& w, const Matrix& hidden_rows) {
    check_width(hidden_rows, w.config.d_model, "lm_logits");
    return matmul(rms_norm(hidden_rows, w.final_norm), w.lm_head);
}

// ---------------------------------------------------------------------------
// Weight file

namespace {

class ByteWriter {
public:
    void bytes(const char* p, std::size_t n) { out_.insert(out_.end(), p, p + n); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f64(double v) {
        const auto bits = std::bit_cast<std::uint64_t>(v);
        for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
    }
    void tensor(std::span<const double> values) {
        for (double v : values) f64(v);
    }
    std::vector<std::uint8_t> take() { return std::move(out_); }

private:
    std::vector<std::uint8_t> out_;
};

class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> in) : in_(in) {}

    void need(std::size_t n, const std::string& what) const {
        if (in_.size() - pos_ < n) {
            throw Error(ErrorCode::kUnexpectedEof, "unexpected end of file while reading " + what);
        }
    }
    std::uint32_t u32(const std::string& what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    double f64(const std::string& what) {
        need(8, what);
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return std::bit_cast<double>(bits);
    }
    void tensor(std::span<double> out, const std::string& name) {
        need(out.size() * 8, "tensor " + name);
        for (double& v : out) v = f64(name);
    }
    Matrix matrix(std::size_t rows, std::size_t cols, const std::string& name) {
        Matrix m(rows, cols);
        tensor({m.data(), m.size()}, name);
        return m;
    }
    std::vector<double> vec(std::size_t n, const std::string& name) {
        std::vector<double> v(n);
        tensor(v, name);
        return v;
    }
    std::size_t remaining() const { return in_.size() - pos_; }
    std::span<const std::uint8_t> take(std::size_t n) {
        auto s = in_.subspan(pos_, n);
        pos_ += n;
        return s;
    }

private:
    std::span<const std::uint8_t> in_;
    std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_weights(const ModelWeights& w) {
    const ModelConfig& c = w.config;
    ByteWriter out;
    out.bytes(kWeightsMagic, 4);
    out.u32(kWeightsVersion);
    for (std::uint32_t v : {c.n_layers, c.d_model, c.n_heads, c.n_kv_heads, c.d_ff,
                            c.vocab_size, c.mask_token_id}) {
        out.u32(v);
    }
    out.u32(static_cast<std::uint32_t>(c.residual_mode));
    out.f64(c.rope_theta);
    out.tensor(w.embedding.values());
    for (const auto& l : w.layers) {
        out.tensor(l.wq.values());
        out.tensor(l.wk.values());
        out.tensor(l.wv.values());
        out.tensor(l.wo.values());
        out.tensor(l.w1.values());
        out.tensor(l.w2.values());
        out.tensor(l.attn_norm);
        out.tensor(l.ffn_norm);
    }
    out.tensor(w.final_norm);
    out.tensor(w.lm_head.values());
    return out.take();
}

ModelWeights deserialize_weights(std::span<const std::uint8_t> bytes) {
    ByteReader in(bytes);
    in.need(4, "magic");
    const auto magic = in.take(4);
    if (!std::equal(magic.begin(), magic.end(), kWeightsMagic)) {
        throw Error(ErrorCode::kBadMagic, "bad magic: not a DYLM weight file");
    }
    const std::uint32_t version = in.u32("version");
    if (version != kWeightsVersion) {
        throw Error(ErrorCode::kBadVersion, "bad version: file has " + std::to_string(version) +
                                                ", reader supports " +
                                                std::to_string(kWeightsVersion));
    }
    ModelConfig c;
    c.n_layers = in.u32("config.n_layers");
    c.d_model = in.u32("config.d_model");
    c.n_heads = in.u32("config.n_heads");
    c.n_kv_heads = in.u32("config.n_kv_heads");
    c.d_ff = in.u32("config.d_ff");
    c.vocab_size = in.u32("config.vocab_size");
    c.mask_token_id = in.u32("config.mask_token_id");
    const std::uint32_t mode = in.u32("config.residual_mode");
    if (mode > 1) {
        throw Error(ErrorCode::kInvalidConfig, "residual_mode " + std::to_string(mode) + " unknown");
    }
    c.residual_mode = static_cast<ResidualMode>(mode);
    c.rope_theta = in.f64("config.rope_theta");
    c.validate();

    const std::size_t d = c.d_model;
    const std::size_t kv = c.kv_width();
    ModelWeights w;
    w.config = c;
    w.embedding = in.matrix(c.vocab_size, d, "embedding");
    for (std::uint32_t l = 0; l < c.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        LayerWeights lw;
        lw.wq = in.matrix(d, d, p + "wq");
        lw.wk = in.matrix(d, kv, p + "wk");
        lw.wv = in.matrix(d, kv, p + "wv");
        lw.wo = in.matrix(d, d, p + "wo");
        lw.w1 = in.matrix(d, c.d_ff, p + "w1");
        lw.w2 = in.matrix(c.d_ff, d, p + "w2");
        lw.attn_norm = in.vec(d, p + "attn_norm");
        lw.ffn_norm = in.vec(d, p + "ffn_norm");
        w.layers.push_back(std::move(lw));
    }
    w.final_norm = in.vec(d, "final_norm");
    w.lm_head = in.matrix(d, c.vocab_size, "lm_head");
    if (in.remaining() != 0) {
        throw Error(ErrorCode::kInvalidState,
                    std::to_string(in.remaining()) + " trailing bytes after lm_head");
    }
    return w;
}

void save_weights(const ModelWeights& w, const std::filesystem::path& path) {
    const auto bytes = serialize_weights(w);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::kIo, "failed writing " + path.string());
}

ModelWeights load_weights(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string() + " for reading");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return deserialize_weights(bytes);
}

}  // namespace dyllm
