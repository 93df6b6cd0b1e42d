#include "dyllm/engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <string>

#include "dyllm/attention.hpp"
#include "dyllm/error.hpp"
#include "dyllm/kernels.hpp"
#include "dyllm/numerics.hpp"

namespace dyllm {

std::string_view input_mode_name(InputMode mode) {
    return mode == InputMode::kFullSequence ? "full_sequence" : "response_only";
}

std::string_view step_kind_name(StepKind kind) {
    return kind == StepKind::kFull ? "full" : "sparse";
}

FlopBreakdown StepMetrics::flops() const {
    FlopBreakdown total = head_flops;
    for (const auto& l : layers) total += l.flops;
    return total;
}

std::string_view force_mode_name(ForceMode mode) {
    switch (mode) {
        case ForceMode::kNormal: return "normal";
        case ForceMode::kAllSalient: return "all-salient";
        case ForceMode::kNoneSalient: return "none-salient";
    }
    return "?";
}

ForceMode parse_force_mode(std::string_view name) {
    if (name == "normal") return ForceMode::kNormal;
    if (name == "all-salient" || name == "all_salient") return ForceMode::kAllSalient;
    if (name == "none-salient" || name == "none_salient") return ForceMode::kNoneSalient;
    throw Error(ErrorCode::kInvalidConfig, "unknown force mode '" + std::string(name) + "'");
}

void EngineConfig::validate() const {
    if (t_full < 1) throw Error(ErrorCode::kInvalidConfig, "T_full must be at least 1");
    if (full_input_period < 1) {
        throw Error(ErrorCode::kInvalidConfig, "full input period must be at least 1");
    }
    if (!std::isfinite(tau)) throw Error(ErrorCode::kInvalidConfig, "tau must be finite");
}

StepInput make_step_input(const std::vector<TokenId>& prompt, const std::vector<TokenId>& response,
                          InputMode mode) {
    StepInput in;
    in.mode = mode;
    const std::size_t lp = prompt.size();
    if (mode == InputMode::kFullSequence) {
        in.tokens = prompt;
        in.tokens.insert(in.tokens.end(), response.begin(), response.end());
        in.positions.resize(in.tokens.size());
        for (std::size_t i = 0; i < in.positions.size(); ++i) in.positions[i] = i;
    } else {
        in.tokens = response;
        in.positions.resize(response.size());
        for (std::size_t i = 0; i < response.size(); ++i) in.positions[i] = lp + i;
    }
    return in;
}

namespace {

std::uint64_t mul(std::size_t a, std::size_t b, std::size_t c) {
    return 2ULL * static_cast<std::uint64_t>(a) * static_cast<std::uint64_t>(b) *
           static_cast<std::uint64_t>(c);
}

void check_input(const StepInput& input, const CacheSet& caches) {
    if (input.tokens.size() != input.positions.size()) {
        throw Error(ErrorCode::kShapeMismatch, "step input: token and position counts differ");
    }
    const std::size_t total = caches.total_len();
    const std::size_t lp = caches.prompt_len();
    const std::size_t expected = input.mode == InputMode::kFullSequence ? total : total - lp;
    const std::size_t first = input.mode == InputMode::kFullSequence ? 0 : lp;
    if (input.positions.size() != expected) {
        throw Error(ErrorCode::kShapeMismatch,
                    "step input: " + std::to_string(input.positions.size()) + " rows, expected " +
                        std::to_string(expected) + " for " +
                        std::string(input_mode_name(input.mode)));
    }
    for (std::size_t i = 0; i < expected; ++i) {
        if (input.positions[i] != first + i) {
            throw Error(ErrorCode::kInvalidArgument, "step input: position " +
                                                         std::to_string(input.positions[i]) +
                                                         " at row " + std::to_string(i));
        }
    }
}

void add_rows(Matrix& target, std::span<const std::size_t> rows, const Matrix& delta) {
    for (std::size_t i = 0; i < rows.size(); ++i) {
        auto dst = target.row(rows[i]);
        const auto src = delta.row(i);
        for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
    }
}

Matrix add(const Matrix& a, const Matrix& b) {
    Matrix out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += b.data()[i];
    return out;
}

// Layer output for rows whose context is final: post-norm + FFN, or the
// residual form when configured.
Matrix layer_output(const ModelWeights& w, std::size_t l, const Matrix& layer_input_rows,
                    const Matrix& context_rows) {
    const auto& lw = w.layers[l];
    if (w.config.residual_mode == ResidualMode::kLiteral) {
        return ffn_forward(w, l, rms_norm(out_project(w, l, context_rows), lw.ffn_norm));
    }
    const Matrix h = add(layer_input_rows, out_project(w, l, context_rows));
    return add(h, ffn_forward(w, l, rms_norm(h, lw.ffn_norm)));
}

void summarize_similarity(LayerMetrics& m, std::vector<double> s, bool keep) {
    m.has_similarity = true;
    if (s.empty()) {
        m.sim_min = m.sim_mean = m.sim_frac_high = 1.0;
    } else {
        double sum = 0.0;
        std::size_t high = 0;
        m.sim_min = s.front();
        for (double v : s) {
            sum += v;
            m.sim_min = std::min(m.sim_min, v);
            if (v >= kHighSimilarity) ++high;
        }
        m.sim_mean = sum / static_cast<double>(s.size());
        m.sim_frac_high = static_cast<double>(high) / static_cast<double>(s.size());
    }
    if (keep) m.similarity = std::move(s);
}

HeadLayout heads_of(const ModelConfig& c) { return {c.n_heads, c.n_kv_heads}; }

}  // namespace

StepOutput full_step(const ModelWeights& w, const StepInput& input, CacheSet& caches) {
    if (input.mode != InputMode::kFullSequence) {
        throw Error(ErrorCode::kInvalidArgument, "full_step requires full-sequence input");
    }
    check_input(input, caches);
    const ModelConfig& cfg = w.config;
    const std::size_t n = input.tokens.size();
    const std::size_t d = cfg.d_model;

    StepOutput out;
    out.metrics.kind = StepKind::kFull;
    out.metrics.mode = input.mode;
    out.metrics.input_len = n;

    Matrix x = embed(w, input.tokens);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        LayerCache& c = caches.layer(l);
        const Matrix xn = rms_norm(x, w.layers[l].attn_norm);
        QkvRows qkv = qkv_project(w, l, xn, input.positions);
        Matrix ctx = exact_attention_rows(qkv.q, qkv.k, qkv.v, heads_of(cfg));
        Matrix next = layer_output(w, l, x, ctx);
        c.k = std::move(qkv.k);
        c.v = std::move(qkv.v);
        c.context = std::move(ctx);
        c.ffn_out = next;
        c.valid = true;
        x = std::move(next);

        LayerMetrics m;
        m.n_salient = n;
        m.flops.proj = mul(n, d, d) + 2 * mul(n, d, cfg.kv_width()) + mul(n, d, d);
        m.flops.attn_scores = mul(n, n, d);
        m.flops.attn_context = mul(n, n, d);
        m.flops.ffn = 2 * mul(n, d, cfg.d_ff);
        out.metrics.layers.push_back(std::move(m));
    }
    out.logits = lm_logits(w, x);
    out.metrics.head_flops.proj = mul(n, d, cfg.vocab_size);
    return out;
}

SaliencyIndex select_salient(std::span<const double> similarity, double tau,
                             std::size_t global_offset, bool inclusive) {
    std::vector<std::size_t> picked;
    for (std::size_t i = 0; i < similarity.size(); ++i) {
        const double s = similarity[i];
        if (inclusive ? s <= tau : s < tau) picked.push_back(global_offset + i);
    }
    return SaliencyIndex(std::move(picked));
}

SaliencyIndex select_salient(const Matrix& c_new, const Matrix& c_cached, double tau,
                             std::size_t global_offset, bool inclusive) {
    const auto s = cosine_similarity_rows(c_new, c_cached);
    return select_salient(s, tau, global_offset, inclusive);
}

StepOutput sparse_step(const ModelWeights& w, const StepInput& input, CacheSet& caches,
                       const SaliencyIndex& idx_sal, const EngineConfig& ecfg) {
    check_input(input, caches);
    if (!caches.all_valid()) {
        throw Error(ErrorCode::kInvalidState, "sparse_step requires caches written by a full step");
    }
    const ModelConfig& cfg = w.config;
    const std::size_t n = input.tokens.size();
    const std::size_t total = caches.total_len();
    const std::size_t d = cfg.d_model;
    const HeadLayout heads = heads_of(cfg);
    idx_sal.check_bounds(total);

    // Global position -> input row, or npos when the position is not an input.
    constexpr std::size_t npos = static_cast<std::size_t>(-1);
    std::vector<std::size_t> row_of(total, npos);
    for (std::size_t r = 0; r < n; ++r) row_of[input.positions[r]] = r;

    SaliencyIndex idx = idx_sal;
    if (ecfg.force_mode == ForceMode::kAllSalient) {
        idx = SaliencyIndex(std::vector<std::size_t>(input.positions));
    } else if (ecfg.force_mode == ForceMode::kNoneSalient) {
        idx = SaliencyIndex();
    }

    StepOutput out;
    out.metrics.kind = StepKind::kSparse;
    out.metrics.mode = input.mode;
    out.metrics.input_len = n;

    Matrix x = embed(w, input.tokens);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        LayerCache& c = caches.layer(l);
        const auto& lw = w.layers[l];

        std::vector<std::size_t> sal_pos;
        std::vector<std::size_t> sal_rows;
        std::vector<std::size_t> carried;
        std::vector<bool> is_sal(n, false);
        for (std::size_t p : idx.positions()) {
            if (row_of[p] == npos) {
                carried.push_back(p);
            } else {
                sal_pos.push_back(p);
                sal_rows.push_back(row_of[p]);
                is_sal[row_of[p]] = true;
            }
        }
        std::vector<std::size_t> nonsal_rows;
        for (std::size_t r = 0; r < n; ++r) {
            if (!is_sal[r]) nonsal_rows.push_back(r);
        }
        const std::size_t n_sal = sal_rows.size();
        const std::size_t n_non = nonsal_rows.size();

        LayerMetrics m;
        const Matrix c_old = gather_rows(c.context, input.positions);
        Matrix ctx = c_old;
        if (n_sal > 0) {
            const Matrix xn = rms_norm(x, lw.attn_norm);
            const Matrix q = q_project(w, l, xn, input.positions);
            const Matrix xs = gather_rows(xn, sal_rows);
            const Matrix k_new = k_project(w, l, xs, sal_pos);
            const Matrix v_new = v_project(w, l, xs);
            // Value delta must be taken before the scatter overwrites the cache.
            Matrix dv = v_new;
            const Matrix v_old = gather_rows(c.v, sal_pos);
            for (std::size_t i = 0; i < dv.size(); ++i) dv.data()[i] -= v_old.data()[i];

            std::vector<std::size_t> k_targets = sal_pos;
            if (ecfg.inject_scatter_fault && k_targets.size() >= 2) {
                std::swap(k_targets[0], k_targets[1]);
            }
            scatter_rows(c.k, k_targets, k_new);
            scatter_rows(c.v, sal_pos, v_new);

            const Matrix c_sal = exact_attention_rows(gather_rows(q, sal_rows), c.k, c.v, heads);
            // Non-salient rows take the delta update; salient rows are
            // overwritten below, so their delta is never formed.
            if (n_non > 0) {
                const Matrix dc = approximate_attention(gather_rows(q, nonsal_rows), c.k, dv,
                                                        SaliencyIndex(sal_pos), heads);
                add_rows(ctx, nonsal_rows, dc);
            }
            scatter_rows(ctx, sal_rows, c_sal);

            m.flops.proj += mul(n, d, d) + 2 * mul(n_sal, d, cfg.kv_width());
            m.flops.attn_scores += mul(n_sal, total, d) + mul(n_non, total, d);
            m.flops.attn_context += mul(n_sal, total, d) + mul(n_non, n_sal, d);
        }

        auto sim = cosine_similarity_rows(ctx, c_old);
        std::vector<std::size_t> new_rows;
        switch (ecfg.force_mode) {
            case ForceMode::kAllSalient:
                for (std::size_t r = 0; r < n; ++r) new_rows.push_back(r);
                break;
            case ForceMode::kNoneSalient:
                break;
            case ForceMode::kNormal: {
                const SaliencyIndex picked = select_salient(sim, ecfg.tau, 0, ecfg.inclusive_threshold);
                new_rows.assign(picked.positions().begin(), picked.positions().end());
                break;
            }
        }
        std::vector<std::size_t> next_pos = carried;
        for (std::size_t r : new_rows) next_pos.push_back(input.positions[r]);
        idx = SaliencyIndex(std::move(next_pos));

        Matrix x_out = gather_rows(c.ffn_out, input.positions);
        if (!new_rows.empty()) {
            const Matrix y = layer_output(w, l, gather_rows(x, new_rows), gather_rows(ctx, new_rows));
            scatter_rows(x_out, new_rows, y);
            m.flops.proj += mul(new_rows.size(), d, d);
            m.flops.ffn += 2 * mul(new_rows.size(), d, cfg.d_ff);
        }
        scatter_rows(c.context, input.positions, ctx);
        scatter_rows(c.ffn_out, input.positions, x_out);
        x = std::move(x_out);

        m.n_salient = new_rows.size();
        summarize_similarity(m, std::move(sim), ecfg.record_similarity);
        out.metrics.layers.push_back(std::move(m));
    }
    out.logits = lm_logits(w, x);
    out.metrics.head_flops.proj = mul(n, d, cfg.vocab_size);
    out.next_salient = std::move(idx);
    return out;
}

StepPlan plan_step(std::size_t t, const EngineConfig& cfg) {
    if (cfg.oracle || t < cfg.t_full) return {StepKind::kFull, InputMode::kFullSequence};
    const bool full_input = !cfg.response_only || t % cfg.full_input_period == 0;
    return {StepKind::kSparse, full_input ? InputMode::kFullSequence : InputMode::kResponseOnly};
}

std::vector<TokenId> synthetic_prompt(std::size_t length, const ModelConfig& config,
                                      std::uint64_t seed) {
    // Separate stream from weight init so prompt and weights can share a seed.
    Rng rng(seed ^ 0x50524F4D50540000ULL);
    const std::uint64_t choices = config.vocab_size - 1;
    std::vector<TokenId> out(length);
    for (auto& t : out) {
        auto v = static_cast<std::uint32_t>(rng.next_u64() % choices);
        if (v >= config.mask_token_id) ++v;
        t = static_cast<TokenId>(v);
    }
    return out;
}

Session::Session(const ModelWeights& weights, std::vector<TokenId> prompt,
                 std::size_t response_len, const EngineConfig& engine,
                 const SamplerConfig& sampler)
    : weights_(&weights),
      engine_(engine),
      sampler_(sampler),
      caches_(weights.config, prompt.size(), response_len),
      state_(prompt, response_len, static_cast<TokenId>(weights.config.mask_token_id), sampler),
      total_steps_((response_len + sampler.n_u - 1) / sampler.n_u) {
    engine_.validate();
    if (prompt.empty()) throw Error(ErrorCode::kInvalidConfig, "prompt must be nonempty");
    for (TokenId t : prompt) {
        if (t < 0 || static_cast<std::uint32_t>(t) >= weights.config.vocab_size) {
            throw Error(ErrorCode::kInvalidConfig,
                        "prompt token " + std::to_string(t) + " outside vocabulary");
        }
    }
}

void Session::set_engine_config(const EngineConfig& cfg) {
    cfg.validate();
    engine_ = cfg;
}

Session::StepResult Session::step() {
    if (finished()) throw Error(ErrorCode::kInvalidState, "session already ran every step");
    const StepPlan plan = plan_step(t_, engine_);
    const StepInput input = make_step_input(state_.prompt(), state_.response(), plan.mode);
    StepResult res;
    if (plan.kind == StepKind::kFull) {
        res.output = full_step(*weights_, input, caches_);
    } else {
        if (!idx_sal_) {
            idx_sal_ = SaliencyIndex::range(caches_.prompt_len(), caches_.total_len());
        }
        res.output = sparse_step(*weights_, input, caches_, *idx_sal_, engine_);
        idx_sal_ = res.output.next_salient;
    }
    res.output.metrics.step = t_;

    const std::size_t lr = caches_.response_len();
    const std::size_t first = plan.mode == InputMode::kFullSequence ? caches_.prompt_len() : 0;
    res.response_logits = Matrix(lr, weights_->config.vocab_size);
    for (std::size_t i = 0; i < lr; ++i) {
        const auto src = res.output.logits.row(first + i);
        std::copy(src.begin(), src.end(), res.response_logits.row(i).begin());
    }
    if (state_.masked_count() > 0) {
        res.decoded = process_logit(res.response_logits, state_, sampler_);
        state_.commit(res.decoded.tokens, res.decoded.positions);
    }
    ++t_;
    return res;
}

FlopBreakdown RunReport::total_flops() const {
    FlopBreakdown total;
    for (const auto& s : steps) total += s.flops();
    return total;
}

GenerationResult generate(const ModelWeights& w, const std::vector<TokenId>& prompt,
                          std::size_t response_len, const EngineConfig& engine,
                          const SamplerConfig& sampler, const GenerateOptions& options) {
    const auto start = std::chrono::steady_clock::now();
    Session session(w, prompt, response_len, engine, sampler);
    GenerationResult result;
    result.report.config = {w.config, engine, sampler, prompt.size(), response_len,
                            std::string(kernels::backend_name(kernels::active().backend))};
    result.report.prompt = prompt;
    while (!session.finished()) {
        auto step = session.step();
        result.report.steps.push_back(std::move(step.output.metrics));
        if (options.keep_logits) result.response_logits.push_back(std::move(step.response_logits));
    }
    if (session.state().masked_count() != 0) {
        throw Error(ErrorCode::kSamplerExhausted,
                    std::to_string(session.state().masked_count()) +
                        " masked positions remain after " +
                        std::to_string(session.total_steps()) + " steps");
    }
    result.response = session.state().response();
    if (options.keep_caches) result.final_caches = session.caches();
    result.report.generated = result.response;
    result.report.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

}  // namespace dyllm
