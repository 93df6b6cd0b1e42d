#include "dyllm/cache.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <string>

#include "dyllm/error.hpp"

namespace dyllm {

SaliencyIndex::SaliencyIndex(std::vector<std::size_t> positions) : positions_(std::move(positions)) {
    std::sort(positions_.begin(), positions_.end());
    positions_.erase(std::unique(positions_.begin(), positions_.end()), positions_.end());
}

SaliencyIndex SaliencyIndex::range(std::size_t begin, std::size_t end) {
    std::vector<std::size_t> p(end > begin ? end - begin : 0);
    std::iota(p.begin(), p.end(), begin);
    SaliencyIndex idx;
    idx.positions_ = std::move(p);
    return idx;
}

bool SaliencyIndex::contains(std::size_t pos) const {
    return std::binary_search(positions_.begin(), positions_.end(), pos);
}

bool SaliencyIndex::is_subset_of(const SaliencyIndex& other) const {
    return std::includes(other.positions_.begin(), other.positions_.end(), positions_.begin(),
                         positions_.end());
}

void SaliencyIndex::check_bounds(std::size_t limit) const {
    if (!positions_.empty() && positions_.back() >= limit) {
        throw Error(ErrorCode::kIndexOutOfBounds,
                    "salient position " + std::to_string(positions_.back()) +
                        " out of bounds for " + std::to_string(limit) + " rows");
    }
}

CacheKind parse_cache_kind(std::string_view name) {
    if (name == "K" || name == "k") return CacheKind::kKey;
    if (name == "V" || name == "v") return CacheKind::kValue;
    if (name == "C" || name == "c") return CacheKind::kContext;
    if (name == "FFN_OUT" || name == "ffn_out" || name == "F") return CacheKind::kFfnOut;
    throw Error(ErrorCode::kInvalidArgument, "unknown cache kind '" + std::string(name) + "'");
}

std::string_view cache_kind_name(CacheKind kind) {
    switch (kind) {
        case CacheKind::kKey: return "K";
        case CacheKind::kValue: return "V";
        case CacheKind::kContext: return "C";
        case CacheKind::kFfnOut: return "FFN_OUT";
    }
    return "?";
}

CacheSet::CacheSet(const ModelConfig& config, std::size_t prompt_len, std::size_t response_len)
    : prompt_len_(prompt_len), response_len_(response_len) {
    const std::size_t total = prompt_len + response_len;
    layers_.resize(config.n_layers);
    for (auto& l : layers_) {
        l.k = Matrix(total, config.kv_width());
        l.v = Matrix(total, config.kv_width());
        l.context = Matrix(total, config.d_model);
        l.ffn_out = Matrix(total, config.d_model);
    }
}

LayerCache& CacheSet::layer(std::size_t l) {
    if (l >= layers_.size()) {
        throw Error(ErrorCode::kIndexOutOfBounds, "cache layer " + std::to_string(l));
    }
    return layers_[l];
}

const LayerCache& CacheSet::layer(std::size_t l) const {
    return const_cast<CacheSet*>(this)->layer(l);
}

const Matrix& CacheSet::matrix(std::size_t l, CacheKind kind) const {
    const LayerCache& c = layer(l);
    switch (kind) {
        case CacheKind::kKey: return c.k;
        case CacheKind::kValue: return c.v;
        case CacheKind::kContext: return c.context;
        case CacheKind::kFfnOut: return c.ffn_out;
    }
    return c.k;
}

bool CacheSet::all_valid() const {
    return std::all_of(layers_.begin(), layers_.end(), [](const LayerCache& c) { return c.valid; });
}

namespace {

void check_rows(std::span<const std::size_t> rows, std::size_t limit, const char* op) {
    for (std::size_t r : rows) {
        if (r >= limit) {
            throw Error(ErrorCode::kIndexOutOfBounds, std::string(op) + ": row " +
                                                          std::to_string(r) + " out of bounds for " +
                                                          std::to_string(limit) + " rows");
        }
    }
}

}  // namespace

void scatter_rows(Matrix& target, std::span<const std::size_t> rows, const Matrix& values) {
    if (values.rows() != rows.size() || (values.rows() > 0 && values.cols() != target.cols())) {
        throw Error(ErrorCode::kShapeMismatch,
                    "scatter_rows: " + std::to_string(rows.size()) + " indices for values " +
                        values.shape_string() + " into " + target.shape_string());
    }
    check_rows(rows, target.rows(), "scatter_rows");
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto src = values.row(i);
        std::copy(src.begin(), src.end(), target.row(rows[i]).begin());
    }
}

void scatter_rows(Matrix& target, const SaliencyIndex& idx, const Matrix& rows) {
    scatter_rows(target, idx.positions(), rows);
}

Matrix gather_rows(const Matrix& source, std::span<const std::size_t> rows) {
    check_rows(rows, source.rows(), "gather_rows");
    Matrix out(rows.size(), source.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto src = source.row(rows[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

Matrix gather_rows(const Matrix& source, const SaliencyIndex& idx) {
    return gather_rows(source, idx.positions());
}

Matrix gather_cols(const Matrix& source, std::span<const std::size_t> cols) {
    for (std::size_t c : cols) {
        if (c >= source.cols()) {
            throw Error(ErrorCode::kIndexOutOfBounds,
                        "gather_cols: column " + std::to_string(c) + " out of bounds for " +
                            source.shape_string());
        }
    }
    Matrix out(source.rows(), cols.size());
    for (std::size_t r = 0; r < source.rows(); ++r) {
        const auto src = source.row(r);
        auto dst = out.row(r);
        for (std::size_t j = 0; j < cols.size(); ++j) dst[j] = src[cols[j]];
    }
    return out;
}

void dump_cache_csv(const Matrix& m, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
    out.precision(17);
    out << "row";
    for (std::size_t c = 0; c < m.cols(); ++c) out << ",c" << c;
    out << '\n';
    for (std::size_t r = 0; r < m.rows(); ++r) {
        out << r;
        for (double v : m.row(r)) out << ',' << v;
        out << '\n';
    }
    if (!out) throw Error(ErrorCode::kIo, "failed writing " + path.string());
}

}  // namespace dyllm
