#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string_view>
#include <vector>

#include "dyllm/cache.hpp"
#include "dyllm/matrix.hpp"
#include "dyllm/metrics.hpp"
#include "dyllm/model.hpp"
#include "dyllm/sampler.hpp"

namespace dyllm {

enum class ForceMode { kNormal, kAllSalient, kNoneSalient };

std::string_view force_mode_name(ForceMode mode);
ForceMode parse_force_mode(std::string_view name);

struct EngineConfig {
    double tau = 0.99;
    std::size_t t_full = 4;             // warmup full steps
    std::size_t full_input_period = 4;  // sparse steps with t % period == 0 see the prompt
    bool response_only = true;
    // Test hook. Overrides both the incoming salient set and every
    // reselection with all input rows or none.
    ForceMode force_mode = ForceMode::kNormal;
    // Select s <= tau instead of the default strict s < tau.
    bool inclusive_threshold = false;
    // Every step is a full step; the reference the sparse path is judged by.
    bool oracle = false;
    // Keep raw per-row similarities in the step metrics.
    bool record_similarity = true;
    // Fault hook: swaps the first two targets of the key scatter in sparse
    // steps. Exists so the equivalence harness can be shown to fail.
    bool inject_scatter_fault = false;

    void validate() const;
};

struct StepInput {
    std::vector<TokenId> tokens;
    std::vector<std::size_t> positions;  // global sequence index per row
    InputMode mode = InputMode::kFullSequence;
};

// Full sequence is prompt ++ response at positions 0..L_total-1; response-only
// is the response at positions L_P..L_total-1.
StepInput make_step_input(const std::vector<TokenId>& prompt, const std::vector<TokenId>& response,
                          InputMode mode);

struct StepOutput {
    Matrix logits;  // input rows x vocab
    SaliencyIndex next_salient;
    StepMetrics metrics;
};

// Exact forward over the whole sequence; overwrites all four caches in every
// layer and marks them valid.
StepOutput full_step(const ModelWeights& w, const StepInput& input, CacheSet& caches);

// Saliency-aware step over cached activations. idx_sal holds global
// positions; entries outside the input rows are carried through untouched.
StepOutput sparse_step(const ModelWeights& w, const StepInput& input, CacheSet& caches,
                       const SaliencyIndex& idx_sal, const EngineConfig& cfg);

// Positions among input rows whose similarity is below tau (or <= tau when
// inclusive), reported as global positions offset + row.
SaliencyIndex select_salient(const Matrix& c_new, const Matrix& c_cached, double tau,
                             std::size_t global_offset, bool inclusive = false);
SaliencyIndex select_salient(std::span<const double> similarity, double tau,
                             std::size_t global_offset, bool inclusive = false);

struct StepPlan {
    StepKind kind;
    InputMode mode;
};

StepPlan plan_step(std::size_t t, const EngineConfig& cfg);

std::vector<TokenId> synthetic_prompt(std::size_t length, const ModelConfig& config,
                                      std::uint64_t seed);

// One generation: weights reference, caches, decode state and salient set.
// Copyable, which lets a caller snapshot a session and replay steps.
class Session {
public:
    Session(const ModelWeights& weights, std::vector<TokenId> prompt, std::size_t response_len,
            const EngineConfig& engine, const SamplerConfig& sampler);

    std::size_t total_steps() const noexcept { return total_steps_; }
    std::size_t next_step() const noexcept { return t_; }
    bool finished() const noexcept { return t_ >= total_steps_; }

    struct StepResult {
        StepOutput output;
        Matrix response_logits;  // L_R x vocab
        Selection decoded;
    };

    // Runs step t, commits the decoded tokens and advances.
    StepResult step();

    const CacheSet& caches() const noexcept { return caches_; }
    const DecodeState& state() const noexcept { return state_; }
    const std::optional<SaliencyIndex>& salient() const noexcept { return idx_sal_; }
    const EngineConfig& engine_config() const noexcept { return engine_; }
    void set_engine_config(const EngineConfig& cfg);

private:
    const ModelWeights* weights_;
    EngineConfig engine_;
    SamplerConfig sampler_;
    CacheSet caches_;
    DecodeState state_;
    std::optional<SaliencyIndex> idx_sal_;
    std::size_t total_steps_;
    std::size_t t_ = 0;
};

struct RunConfigEcho {
    ModelConfig model;
    EngineConfig engine;
    SamplerConfig sampler;
    std::size_t prompt_len = 0;
    std::size_t response_len = 0;
    std::string kernel_backend;
};

struct RunReport {
    RunConfigEcho config;
    std::vector<StepMetrics> steps;
    std::vector<TokenId> prompt;
    std::vector<TokenId> generated;
    double wall_clock_seconds = 0.0;

    FlopBreakdown total_flops() const;
};

struct GenerationResult {
    std::vector<TokenId> response;
    RunReport report;
    // One L_R x vocab matrix per step when requested.
    std::vector<Matrix> response_logits;
    // Caches after the last step when requested.
    std::optional<CacheSet> final_caches;
};

struct GenerateOptions {
    bool keep_logits = false;
    bool keep_caches = false;
};

GenerationResult generate(const ModelWeights& w, const std::vector<TokenId>& prompt,
                          std::size_t response_len, const EngineConfig& engine,
                          const SamplerConfig& sampler, const GenerateOptions& options = {});

}  // namespace dyllm
