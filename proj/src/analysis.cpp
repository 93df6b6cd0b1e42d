#include "dyllm/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <string>

#include "dyllm/error.hpp"
#include "dyllm/numerics.hpp"

namespace dyllm {

void CostModelInput::validate() const {
    if (block_size == 0 || n_u == 0) {
        throw Error(ErrorCode::kInvalidConfig, "cost model: B and n_u must be positive");
    }
    if (block_size % n_u != 0) {
        throw Error(ErrorCode::kInvalidConfig,
                    "cost model: B=" + std::to_string(block_size) +
                        " is not divisible by n_u=" + std::to_string(n_u));
    }
}

double cost_model_avg_tokens(const CostModelInput& in) {
    in.validate();
    const double steps = static_cast<double>(in.block_size / in.n_u);
    return (in.tokens_per_step * (steps - 1.0) + in.tokens_per_refresh) / steps;
}

CostPolicy prefix_cache_policy() { return {"prefix", 144.0, 1280.0}; }
CostPolicy dual_cache_policy() { return {"dual", 32.0, 1280.0}; }

double delta_decomposition_error(const Matrix& s_prev, const Matrix& ds, const Matrix& v_prev,
                                 const Matrix& dv) {
    Matrix s_t = s_prev;
    Matrix v_t = v_prev;
    if (ds.rows() != s_prev.rows() || ds.cols() != s_prev.cols() ||
        dv.rows() != v_prev.rows() || dv.cols() != v_prev.cols()) {
        throw Error(ErrorCode::kShapeMismatch, "delta decomposition: delta shapes differ");
    }
    for (std::size_t i = 0; i < s_t.size(); ++i) s_t.data()[i] += ds.data()[i];
    for (std::size_t i = 0; i < v_t.size(); ++i) v_t.data()[i] += dv.data()[i];

    const Matrix direct_t = matmul(s_t, v_t);
    const Matrix direct_prev = matmul(s_prev, v_prev);
    const Matrix term_a = matmul(s_t, dv);
    const Matrix term_b = matmul(ds, v_prev);
    double err = 0.0;
    for (std::size_t i = 0; i < direct_t.values().size(); ++i) {
        const double lhs = direct_t.values()[i] - direct_prev.values()[i];
        const double rhs = term_a.values()[i] + term_b.values()[i];
        err = std::max(err, std::abs(lhs - rhs));
    }
    return err;
}

double check_delta_decomposition(std::size_t rows, std::size_t keys, std::size_t width,
                                 std::uint64_t seed) {
    if (rows == 0 || keys == 0 || width == 0 || rows > 32 || keys > 32 || width > 32) {
        throw Error(ErrorCode::kInvalidArgument, "delta decomposition: dims must be in 1..32");
    }
    Rng rng(seed);
    const Matrix s = rng_normal_fill(rng, rows, keys, 1.0);
    const Matrix ds = rng_normal_fill(rng, rows, keys, 1.0);
    const Matrix v = rng_normal_fill(rng, keys, width, 1.0);
    const Matrix dv = rng_normal_fill(rng, keys, width, 1.0);
    return delta_decomposition_error(s, ds, v, dv);
}

double scale_invariance_deviation(const Matrix& c_row, const Matrix& w_o, double alpha) {
    Matrix scaled = c_row;
    for (std::size_t i = 0; i < scaled.size(); ++i) scaled.data()[i] *= alpha;
    const std::vector<double> gain(w_o.cols(), 1.0);
    const Matrix a = rms_norm(matmul(scaled, w_o), gain, 0.0);
    const Matrix b = rms_norm(matmul(c_row, w_o), gain, 0.0);
    return max_abs_diff(a, b);
}

double check_scale_invariance(std::size_t d, std::size_t trials, std::uint64_t seed) {
    Rng rng(seed);
    double worst = 0.0;
    for (std::size_t t = 0; t < trials; ++t) {
        const Matrix c = rng_normal_fill(rng, 1, d, 1.0);
        const Matrix w = rng_normal_fill(rng, d, d, 1.0);
        const double alpha = 100.0 * rng.next_open_unit();
        worst = std::max(worst, scale_invariance_deviation(c, w, alpha));
    }
    return worst;
}

namespace {

std::vector<double> unit(std::span<const double> x) {
    double n = 0.0;
    for (double v : x) n += v * v;
    n = std::sqrt(n);
    if (n == 0.0) throw Error(ErrorCode::kInvalidArgument, "directional trial: zero vector");
    std::vector<double> out(x.begin(), x.end());
    for (double& v : out) v /= n;
    return out;
}

}  // namespace

DirectionalTrial directional_trial(std::span<const double> u, std::span<const double> v,
                                   const Matrix& w_o, double kappa) {
    if (u.size() != v.size() || u.size() != w_o.rows()) {
        throw Error(ErrorCode::kShapeMismatch, "directional trial: dimension mismatch");
    }
    const std::vector<double> uh = unit(u);
    const std::vector<double> vh = unit(v);
    double s = 0.0;
    double dist2 = 0.0;
    for (std::size_t i = 0; i < uh.size(); ++i) {
        s += uh[i] * vh[i];
        dist2 += (uh[i] - vh[i]) * (uh[i] - vh[i]);
    }
    const double chord = std::sqrt(2.0 * std::max(0.0, 1.0 - s));

    DirectionalTrial r{};
    r.similarity = s;
    r.component_error = std::abs(std::sqrt(dist2) - chord);

    const std::vector<double> gain(w_o.cols(), 1.0);
    const Matrix nu = rms_norm(matmul(Matrix::from_rows({uh}), w_o), gain, 0.0);
    const Matrix nv = rms_norm(matmul(Matrix::from_rows({vh}), w_o), gain, 0.0);
    double d2 = 0.0;
    for (std::size_t i = 0; i < nu.values().size(); ++i) {
        const double e = nu.values()[i] - nv.values()[i];
        d2 += e * e;
    }
    r.delta = std::sqrt(d2);
    r.bound = kappa * chord;
    if (r.bound > 0.0) {
        r.ratio = r.delta / r.bound;
    } else {
        r.ratio = r.delta == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    }
    return r;
}

DirectionalReport check_directional_bound(std::size_t d, std::size_t trials, std::uint64_t seed) {
    Rng rng(seed);
    DirectionalReport rep;
    rep.trials = trials;
    std::size_t violations = 0;
    double kappa_sum = 0.0;
    for (std::size_t t = 0; t < trials; ++t) {
        const Matrix w = rng_normal_fill(rng, d, d, 1.0);
        const double kappa = condition_number(w);
        const Matrix u = rng_normal_fill(rng, 1, d, 1.0);
        const Matrix noise = rng_normal_fill(rng, 1, d, 1.0);
        std::vector<double> v(d);
        if (t % 4 == 0) {
            // unrelated direction
            for (std::size_t i = 0; i < d; ++i) v[i] = noise(0, i);
        } else {
            // nearby direction, perturbation scale log-uniform in [1e-3, 1]
            double un = 0.0;
            for (std::size_t i = 0; i < d; ++i) un += u(0, i) * u(0, i);
            const double eps = std::pow(10.0, -3.0 * rng.next_unit()) * std::sqrt(un);
            for (std::size_t i = 0; i < d; ++i) v[i] = u(0, i) + eps * noise(0, i);
        }
        const DirectionalTrial r = directional_trial(u.row(0), v, w, kappa);
        rep.exact_component_error = std::max(rep.exact_component_error, r.component_error);
        if (r.delta > r.bound) ++violations;
        rep.max_ratio = std::max(rep.max_ratio, r.ratio);
        kappa_sum += kappa;
    }
    if (trials > 0) {
        rep.bound_violation_rate = static_cast<double>(violations) / static_cast<double>(trials);
        rep.mean_kappa = kappa_sum / static_cast<double>(trials);
    }
    return rep;
}

namespace {

CompareResult compare_with(GenerationResult oracle, GenerationResult sparse) {
    CompareResult r;
    r.tokens_identical = oracle.response == sparse.response;
    const std::size_t n = std::min(oracle.response_logits.size(), sparse.response_logits.size());
    for (std::size_t i = 0; i < n; ++i) {
        r.max_logit_deviation = std::max(
            r.max_logit_deviation, max_abs_diff(oracle.response_logits[i], sparse.response_logits[i]));
    }
    if (oracle.response_logits.size() != sparse.response_logits.size()) {
        r.max_logit_deviation = std::numeric_limits<double>::infinity();
    }
    r.oracle_flops = oracle.report.total_flops();
    r.sparse_flops = sparse.report.total_flops();
    const auto denom = r.oracle_flops.total();
    r.flop_ratio = denom == 0 ? 0.0
                              : static_cast<double>(r.sparse_flops.total()) /
                                    static_cast<double>(denom);
    r.oracle = std::move(oracle);
    r.sparse = std::move(sparse);
    return r;
}

GenerationResult run_oracle(const ModelWeights& w, const std::vector<TokenId>& prompt,
                            const RunSetup& setup) {
    EngineConfig e = setup.engine;
    e.oracle = true;
    e.force_mode = ForceMode::kNormal;
    e.inject_scatter_fault = false;
    return generate(w, prompt, setup.response_len, e, setup.sampler, {.keep_logits = true});
}

}  // namespace

CompareResult compare_runs(const ModelWeights& w, const std::vector<TokenId>& prompt,
                           const RunSetup& setup) {
    GenerationResult oracle = run_oracle(w, prompt, setup);
    GenerationResult sparse =
        generate(w, prompt, setup.response_len, setup.engine, setup.sampler, {.keep_logits = true});
    return compare_with(std::move(oracle), std::move(sparse));
}

ModelWeights setup_weights(const RunSetup& setup) { return init_weights(setup.model, setup.seed); }

std::vector<TokenId> setup_prompt(const RunSetup& setup) {
    return synthetic_prompt(setup.prompt_len, setup.model, setup.seed);
}

EquivalenceResult verify_equivalence(const RunSetup& setup) {
    const ModelWeights w = setup_weights(setup);
    const std::vector<TokenId> prompt = setup_prompt(setup);
    RunSetup s = setup;
    s.engine.oracle = false;
    s.engine.force_mode = ForceMode::kAllSalient;
    s.engine.response_only = false;
    const CompareResult c = compare_runs(w, prompt, s);
    EquivalenceResult r;
    r.tokens_identical = c.tokens_identical;
    r.max_logit_deviation = c.max_logit_deviation;
    r.pass = r.tokens_identical && r.max_logit_deviation < kEquivalenceTolerance;
    return r;
}

double avg_salient_fraction(const RunReport& report) {
    double sal = 0.0;
    double rows = 0.0;
    for (const auto& st : report.steps) {
        if (st.kind != StepKind::kSparse) continue;
        for (const auto& l : st.layers) {
            sal += static_cast<double>(l.n_salient);
            rows += static_cast<double>(st.input_len);
        }
    }
    return rows == 0.0 ? 0.0 : sal / rows;
}

namespace {

double first_sparse_layer0_fraction(const RunReport& report) {
    for (const auto& st : report.steps) {
        if (st.kind == StepKind::kSparse && !st.layers.empty() && st.input_len > 0) {
            return static_cast<double>(st.layers[0].n_salient) / static_cast<double>(st.input_len);
        }
    }
    return 0.0;
}

}  // namespace

std::vector<SweepRow> tau_sweep(const ModelWeights& w, const std::vector<TokenId>& prompt,
                                const RunSetup& setup, const std::vector<double>& taus) {
    if (taus.empty()) throw Error(ErrorCode::kInvalidArgument, "tau sweep: no tau values");
    const GenerationResult oracle = run_oracle(w, prompt, setup);
    std::vector<SweepRow> rows;
    rows.reserve(taus.size());
    for (double tau : taus) {
        EngineConfig e = setup.engine;
        e.tau = tau;
        GenerationResult sparse =
            generate(w, prompt, setup.response_len, e, setup.sampler, {.keep_logits = true});
        const CompareResult c = compare_with(oracle, std::move(sparse));
        rows.push_back({tau, avg_salient_fraction(c.sparse.report), c.flop_ratio,
                        c.tokens_identical, first_sparse_layer0_fraction(c.sparse.report)});
    }
    return rows;
}

std::vector<HistogramBin> similarity_histogram(const RunReport& report, std::size_t layer,
                                               const HistogramSpec& spec) {
    const std::size_t n_layers = report.config.model.n_layers;
    if (layer >= n_layers) {
        throw Error(ErrorCode::kIndexOutOfBounds, "similarity histogram: layer " +
                                                      std::to_string(layer) + " out of range [0, " +
                                                      std::to_string(n_layers) + ")");
    }
    if (spec.bins == 0 || !(spec.lo < spec.hi) || spec.lo < -1.0) {
        throw Error(ErrorCode::kInvalidArgument, "similarity histogram: bad bin spec");
    }
    std::vector<HistogramBin> bins;
    bins.reserve(spec.bins + 1);
    bins.push_back({-1.0, spec.lo, 0});
    const double width = spec.hi - spec.lo;
    for (std::size_t i = 0; i < spec.bins; ++i) {
        const double lo = spec.lo + width * static_cast<double>(i) / static_cast<double>(spec.bins);
        const double hi =
            spec.lo + width * static_cast<double>(i + 1) / static_cast<double>(spec.bins);
        bins.push_back({lo, hi, 0});
    }
    for (const auto& st : report.steps) {
        if (st.kind != StepKind::kSparse || layer >= st.layers.size()) continue;
        const auto& lm = st.layers[layer];
        if (!lm.has_similarity) continue;
        for (double s : lm.similarity) {
            if (s < spec.lo) {
                ++bins[0].count;
                continue;
            }
            auto k = static_cast<std::size_t>((s - spec.lo) / width * static_cast<double>(spec.bins));
            k = std::min(k, spec.bins - 1);
            ++bins[k + 1].count;
        }
    }
    return bins;
}

std::vector<SalientCountRow> salient_counts(const RunReport& report) {
    const std::size_t n_layers = report.config.model.n_layers;
    std::vector<SalientCountRow> rows(n_layers);
    std::vector<std::size_t> seen(n_layers, 0);
    std::vector<double> sum(n_layers, 0.0);
    for (std::size_t l = 0; l < n_layers; ++l) {
        rows[l] = {l, 0.0, std::numeric_limits<std::size_t>::max(), 0};
    }
    for (const auto& st : report.steps) {
        if (st.kind != StepKind::kSparse) continue;
        for (std::size_t l = 0; l < std::min(n_layers, st.layers.size()); ++l) {
            const std::size_t n = st.layers[l].n_salient;
            sum[l] += static_cast<double>(n);
            rows[l].min_salient = std::min(rows[l].min_salient, n);
            rows[l].max_salient = std::max(rows[l].max_salient, n);
            ++seen[l];
        }
    }
    for (std::size_t l = 0; l < n_layers; ++l) {
        if (seen[l] == 0) {
            rows[l].min_salient = 0;
        } else {
            rows[l].avg_salient = sum[l] / static_cast<double>(seen[l]);
        }
    }
    return rows;
}

namespace {

std::string fmt(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

}  // namespace

void write_step_metrics_csv(const RunReport& report, std::ostream& out) {
    out << "step,mode,layer,n_salient,flops_attn_scores,flops_attn_context,flops_ffn,flops_proj\n";
    for (const auto& st : report.steps) {
        for (std::size_t l = 0; l < st.layers.size(); ++l) {
            FlopBreakdown f = st.layers[l].flops;
            // LM head is charged to the last layer's projection column
            if (l + 1 == st.layers.size()) f += st.head_flops;
            out << st.step << ',' << input_mode_name(st.mode) << ',' << l << ','
                << st.layers[l].n_salient << ',' << f.attn_scores << ',' << f.attn_context << ','
                << f.ffn << ',' << f.proj << '\n';
        }
    }
}

void write_salient_counts_csv(const RunReport& report, std::ostream& out) {
    out << "layer,avg_salient,min_salient,max_salient\n";
    for (const auto& r : salient_counts(report)) {
        out << r.layer << ',' << fmt(r.avg_salient) << ',' << r.min_salient << ','
            << r.max_salient << '\n';
    }
}

void write_similarity_hist_csv(const RunReport& report, std::ostream& out,
                               const HistogramSpec& spec) {
    out << "layer,bin_lo,bin_hi,count\n";
    for (std::size_t l = 0; l < report.config.model.n_layers; ++l) {
        for (const auto& b : similarity_histogram(report, l, spec)) {
            out << l << ',' << fmt(b.lo) << ',' << fmt(b.hi) << ',' << b.count << '\n';
        }
    }
}

void write_cost_model_csv(const std::vector<CostModelRow>& rows, std::ostream& out) {
    out << "policy,L_P,L_R,B,n_u,tokens_per_step,tokens_per_refresh,avg_tokens\n";
    for (const auto& r : rows) {
        out << r.policy << ',' << r.input.prompt_len << ',' << r.input.response_len << ','
            << r.input.block_size << ',' << r.input.n_u << ',' << fmt(r.input.tokens_per_step)
            << ',' << fmt(r.input.tokens_per_refresh) << ',' << fmt(r.avg_tokens) << '\n';
    }
}

void write_sweep_csv(const std::vector<SweepRow>& rows, std::ostream& out) {
    out << "tau,avg_salient_fraction,flop_ratio,tokens_identical,first_step_fraction\n";
    for (const auto& r : rows) {
        out << fmt(r.tau) << ',' << fmt(r.avg_salient_fraction) << ',' << fmt(r.flop_ratio) << ','
            << (r.tokens_identical ? "true" : "false") << ',' << fmt(r.first_step_fraction) << '\n';
    }
}

}  // namespace dyllm
