#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "dyllm/engine.hpp"
#include "dyllm/matrix.hpp"
#include "dyllm/model.hpp"

namespace dyllm {

// ---------------------------------------------------------------------------
// Analytic computed-token cost model for periodic-refresh cache schedules.

struct CostModelInput {
    std::size_t prompt_len = 1024;
    std::size_t response_len = 256;
    std::size_t block_size = 32;
    std::size_t n_u = 1;
    double tokens_per_step = 0.0;
    double tokens_per_refresh = 0.0;

    void validate() const;
};

// (tokens_per_step * (B/n_u - 1) + tokens_per_refresh) / (B/n_u)
double cost_model_avg_tokens(const CostModelInput& in);

struct CostPolicy {
    std::string name;
    double tokens_per_step;
    double tokens_per_refresh;
};

// Prefix caching: 144 tokens per step; dual caching: 32. Both refresh the
// full 1280-token sequence once per block.
CostPolicy prefix_cache_policy();
CostPolicy dual_cache_policy();

// ---------------------------------------------------------------------------
// Exact identities and bounds.

// Max |(C_t - C_{t-1}) - ((S + dS) dV + dS V)| where C = S V.
double delta_decomposition_error(const Matrix& s_prev, const Matrix& ds, const Matrix& v_prev,
                                 const Matrix& dv);
// Random instance: S is rows x keys, V is keys x width.
double check_delta_decomposition(std::size_t rows, std::size_t keys, std::size_t width,
                                 std::uint64_t seed);

// ||RMSNorm((alpha C) W) - RMSNorm(C W)||_inf with epsilon 0 and unit gain.
double scale_invariance_deviation(const Matrix& c_row, const Matrix& w_o, double alpha);
// Max deviation over random (C, W, alpha in (0, 100]) trials.
double check_scale_invariance(std::size_t d, std::size_t trials, std::uint64_t seed);

struct DirectionalTrial {
    double similarity;        // s = u . v for unit u, v
    double component_error;   // | ||u - v|| - sqrt(2 (1 - s)) |
    double delta;             // ||RMSNorm(u W) - RMSNorm(v W)||, epsilon 0, unit gain
    double bound;             // kappa(W) sqrt(2 (1 - s))
    double ratio;             // delta / bound, 0 when both vanish
};

DirectionalTrial directional_trial(std::span<const double> u, std::span<const double> v,
                                   const Matrix& w_o, double kappa);

struct DirectionalReport {
    std::size_t trials = 0;
    double exact_component_error = 0.0;  // max over trials
    double bound_violation_rate = 0.0;   // fraction with delta > bound
    double max_ratio = 0.0;
    double mean_kappa = 0.0;
};

DirectionalReport check_directional_bound(std::size_t d, std::size_t trials, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Oracle comparison harness.

struct RunSetup {
    ModelConfig model;
    std::uint64_t seed = 0;  // weights and synthetic prompt
    std::size_t prompt_len = 64;
    std::size_t response_len = 64;
    EngineConfig engine;
    SamplerConfig sampler;
};

struct CompareResult {
    bool tokens_identical = false;
    double max_logit_deviation = 0.0;
    FlopBreakdown oracle_flops;
    FlopBreakdown sparse_flops;
    double flop_ratio = 0.0;  // sparse / oracle
    GenerationResult oracle;
    GenerationResult sparse;
};

// Runs the all-full-step oracle and the configured engine on the same
// weights and prompt, comparing response logits step by step.
CompareResult compare_runs(const ModelWeights& w, const std::vector<TokenId>& prompt,
                           const RunSetup& setup);

struct EquivalenceResult {
    bool pass = false;
    bool tokens_identical = false;
    double max_logit_deviation = 0.0;
};

inline constexpr double kEquivalenceTolerance = 1e-9;

// Forces every row salient with full-sequence input on every step; must
// reproduce the oracle's tokens with logits within 1e-9. Weights and prompt
// come from setup.seed.
EquivalenceResult verify_equivalence(const RunSetup& setup);

ModelWeights setup_weights(const RunSetup& setup);
std::vector<TokenId> setup_prompt(const RunSetup& setup);

struct SweepRow {
    double tau;
    double avg_salient_fraction;
    double flop_ratio;
    bool tokens_identical;
    // Layer-0 salient fraction at the first sparse step; every tau starts
    // that layer from the same caches, so this is monotone in tau.
    double first_step_fraction;
};

std::vector<SweepRow> tau_sweep(const ModelWeights& w, const std::vector<TokenId>& prompt,
                                const RunSetup& setup, const std::vector<double>& taus);

// Salient rows / input rows over every layer of every sparse step.
double avg_salient_fraction(const RunReport& report);

// ---------------------------------------------------------------------------
// Instrumentation summaries and report files.

struct HistogramSpec {
    double lo = 0.9;
    double hi = 1.0;
    std::size_t bins = 50;
};

struct HistogramBin {
    double lo;
    double hi;
    std::uint64_t count;
};

// Bin 0 is the underflow bin [-1, spec.lo); then spec.bins equal bins on
// [spec.lo, spec.hi], the last one closed and absorbing rounding above 1.
std::vector<HistogramBin> similarity_histogram(const RunReport& report, std::size_t layer,
                                               const HistogramSpec& spec = {});

struct SalientCountRow {
    std::size_t layer;
    double avg_salient;
    std::size_t min_salient;
    std::size_t max_salient;
};

// Per-layer statistics over sparse steps; zeros when there are none.
std::vector<SalientCountRow> salient_counts(const RunReport& report);

void write_step_metrics_csv(const RunReport& report, std::ostream& out);
void write_salient_counts_csv(const RunReport& report, std::ostream& out);
void write_similarity_hist_csv(const RunReport& report, std::ostream& out,
                               const HistogramSpec& spec = {});

struct CostModelRow {
    std::string policy;
    CostModelInput input;
    double avg_tokens;
};

void write_cost_model_csv(const std::vector<CostModelRow>& rows, std::ostream& out);
void write_sweep_csv(const std::vector<SweepRow>& rows, std::ostream& out);

inline constexpr int kReportVersion = 1;

// Structured JSON document; the only wall-clock field is
// "wall_clock_seconds".
std::string report_to_json(const RunReport& report);

}  // namespace dyllm
