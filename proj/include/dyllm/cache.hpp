#pragma once

#include <cstddef>
#include <filesystem>
#include <initializer_list>
#include <span>
#include <string_view>
#include <vector>

#include "dyllm/matrix.hpp"
#include "dyllm/model.hpp"

namespace dyllm {

// Strictly increasing global token positions (0-based).
class SaliencyIndex {
public:
    SaliencyIndex() = default;
    // Sorts and deduplicates.
    explicit SaliencyIndex(std::vector<std::size_t> positions);
    SaliencyIndex(std::initializer_list<std::size_t> positions)
        : SaliencyIndex(std::vector<std::size_t>(positions)) {}

    static SaliencyIndex range(std::size_t begin, std::size_t end);

    std::span<const std::size_t> positions() const noexcept { return positions_; }
    std::size_t size() const noexcept { return positions_.size(); }
    bool empty() const noexcept { return positions_.empty(); }
    bool contains(std::size_t pos) const;
    bool is_subset_of(const SaliencyIndex& other) const;

    // Throws kIndexOutOfBounds if any position is >= limit.
    void check_bounds(std::size_t limit) const;

    friend bool operator==(const SaliencyIndex&, const SaliencyIndex&) = default;

private:
    std::vector<std::size_t> positions_;
};

struct LayerCache {
    Matrix k;        // L_total x kv_width
    Matrix v;        // L_total x kv_width
    Matrix context;  // L_total x d_model
    Matrix ffn_out;  // L_total x d_model
    bool valid = false;
};

enum class CacheKind { kKey, kValue, kContext, kFfnOut };

CacheKind parse_cache_kind(std::string_view name);
std::string_view cache_kind_name(CacheKind kind);

// Preallocated once per session; row count never changes.
class CacheSet {
public:
    CacheSet(const ModelConfig& config, std::size_t prompt_len, std::size_t response_len);

    std::size_t prompt_len() const noexcept { return prompt_len_; }
    std::size_t response_len() const noexcept { return response_len_; }
    std::size_t total_len() const noexcept { return prompt_len_ + response_len_; }
    std::size_t n_layers() const noexcept { return layers_.size(); }

    LayerCache& layer(std::size_t l);
    const LayerCache& layer(std::size_t l) const;
    const Matrix& matrix(std::size_t l, CacheKind kind) const;

    bool all_valid() const;

private:
    std::size_t prompt_len_;
    std::size_t response_len_;
    std::vector<LayerCache> layers_;
};

// Replace exactly the indexed rows of target with rows (in index order).
void scatter_rows(Matrix& target, const SaliencyIndex& idx, const Matrix& rows);
// Copy out the indexed rows; an empty index yields a 0 x cols matrix.
Matrix gather_rows(const Matrix& source, const SaliencyIndex& idx);
Matrix gather_rows(const Matrix& source, std::span<const std::size_t> rows);
void scatter_rows(Matrix& target, std::span<const std::size_t> rows, const Matrix& values);
// Column gather, used for A[:, idx].
Matrix gather_cols(const Matrix& source, std::span<const std::size_t> cols);

// CSV with header "row,c0,c1,..." and one line per cache row.
void dump_cache_csv(const Matrix& m, const std::filesystem::path& path);

}  // namespace dyllm
