#include <cmath>
#include <sstream>

#include "doctest.h"
#include "dyllm/analysis.hpp"
#include "dyllm/error.hpp"
#include "dyllm/numerics.hpp"
#include "json.hpp"

using namespace dyllm;

namespace {

RunSetup tiny_setup(ResidualMode mode = ResidualMode::kLiteral, std::uint32_t kv = 4) {
    RunSetup s;
    s.model.n_layers = 2;
    s.model.d_model = 16;
    s.model.n_heads = 4;
    s.model.n_kv_heads = kv;
    s.model.d_ff = 32;
    s.model.vocab_size = 48;
    s.model.mask_token_id = 47;
    s.model.residual_mode = mode;
    s.prompt_len = 6;
    s.response_len = 16;
    s.sampler.block_size = 8;
    return s;
}

GenerationResult run(const RunSetup& s, const EngineConfig& e) {
    const ModelWeights w = init_weights(s.model, s.seed, 0.5);
    return generate(w, setup_prompt(s), s.response_len, e, s.sampler);
}

std::vector<std::string> lines(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    for (std::string l; std::getline(in, l);) out.push_back(l);
    return out;
}

}  // namespace

TEST_CASE("cost model") {
    CostModelInput in{1024, 256, 32, 1, 144, 1280};
    CHECK(cost_model_avg_tokens(in) == 179.5);
    in.tokens_per_step = 32;
    CHECK(cost_model_avg_tokens(in) == 71.0);
    in.n_u = 2;
    CHECK(cost_model_avg_tokens(in) == 110.0);
    in.tokens_per_step = in.tokens_per_refresh = 77;
    CHECK(cost_model_avg_tokens(in) == 77.0);
    in.n_u = 3;
    CHECK_THROWS_AS(cost_model_avg_tokens(in), Error);
    in.n_u = 0;
    CHECK_THROWS_AS(cost_model_avg_tokens(in), Error);
    CHECK(prefix_cache_policy().tokens_per_step == 144);
    CHECK(dual_cache_policy().tokens_per_step == 32);
}

TEST_CASE("cost model linearity and n_u monotonicity") {
    Rng rng(1);
    for (int t = 0; t < 100; ++t) {
        const double a1 = 1000 * rng.next_unit(), a2 = 1000 * rng.next_unit();
        const double r1 = 2000 * rng.next_unit(), r2 = 2000 * rng.next_unit();
        const auto f = [](double a, double r, std::size_t n_u) {
            return cost_model_avg_tokens({1024, 256, 32, n_u, a, r});
        };
        CHECK(f(a1 + a2, r1, 1) - f(a2, r1, 1) == doctest::Approx(f(a1, r1, 1) - f(0, r1, 1)));
        CHECK(f(a1, r1 + r2, 4) - f(a1, r2, 4) == doctest::Approx(f(a1, r1, 4) - f(a1, 0, 4)));
        const double lo = std::min(a1, r1), hi = std::max(a1, r1);
        if (hi > lo) {
            double prev = f(lo, hi, 1);
            for (std::size_t n_u : {2u, 4u, 8u, 16u, 32u}) {
                const double cur = f(lo, hi, n_u);
                CHECK(cur > prev);
                prev = cur;
            }
        }
    }
}

TEST_CASE("delta decomposition") {
    const Matrix s = Matrix::from_rows({{0.2, 0.8}, {0.5, 0.5}});
    const Matrix v = Matrix::from_rows({{1, 2}, {3, 4}});
    CHECK(delta_decomposition_error(s, Matrix(2, 2), v, Matrix(2, 2)) == 0.0);
    const Matrix dv = Matrix::from_rows({{0.5, -1}, {2, 0.25}});
    CHECK(delta_decomposition_error(s, Matrix(2, 2), v, dv) < 1e-15);
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed)
        worst = std::max(worst, check_delta_decomposition(3, 3, 3, seed));
    CHECK(worst < 1e-10);
    CHECK(check_delta_decomposition(32, 32, 32, 5) < 1e-10);
    CHECK_THROWS_AS(check_delta_decomposition(33, 2, 2, 0), Error);
}

TEST_CASE("scale invariance") {
    Rng rng(3);
    const Matrix c = rng_normal_fill(rng, 1, 8, 1.0);
    const Matrix w = rng_normal_fill(rng, 8, 8, 1.0);
    CHECK(scale_invariance_deviation(c, w, 1.0) == 0.0);
    CHECK(scale_invariance_deviation(c, w, 3.7) < 1e-9);
    CHECK(scale_invariance_deviation(c, w, 1e-8) < 1e-6);
    CHECK(check_scale_invariance(16, 1000, 7) < 1e-9);
}

TEST_CASE("directional identity and bound") {
    const Matrix eye = Matrix::identity(4);
    const std::vector<double> u = {1, 2, -1, 0.5};
    const auto same = directional_trial(u, u, eye, 1.0);
    CHECK(same.component_error == 0.0);
    CHECK(same.delta == 0.0);
    CHECK(same.ratio == 0.0);

    const std::vector<double> neg = {-1, -2, 1, -0.5};
    const auto opp = directional_trial(u, neg, eye, 1.0);
    CHECK(opp.similarity == doctest::Approx(-1.0));
    CHECK(opp.component_error < 1e-15);
    CHECK(opp.bound == doctest::Approx(2.0));

    const std::vector<double> v = {0.3, 1.0, 2.0, -1.0};
    const auto r = directional_trial(u, v, eye, 1.0);
    CHECK(r.ratio == doctest::Approx(2.0).epsilon(1e-12));

    const DirectionalReport rep = check_directional_bound(16, 1000, 11);
    CHECK(rep.trials == 1000);
    CHECK(rep.exact_component_error < 1e-10);
    CHECK(rep.bound_violation_rate >= 0.0);
    CHECK(rep.bound_violation_rate <= 1.0);
    CHECK(rep.max_ratio > 0.0);
}

TEST_CASE("equivalence harness") {
    for (auto mode : {ResidualMode::kLiteral, ResidualMode::kResidual}) {
        for (std::uint32_t kv : {4u, 1u}) {
            RunSetup s = tiny_setup(mode, kv);
            s.seed = 3;
            const auto r = verify_equivalence(s);
            CHECK(r.pass);
            CHECK(r.tokens_identical);
            CHECK(r.max_logit_deviation < kEquivalenceTolerance);
        }
    }
    RunSetup bad = tiny_setup();
    bad.engine.inject_scatter_fault = true;
    CHECK(!verify_equivalence(bad).pass);
}

TEST_CASE("compare and sweep") {
    const RunSetup s = tiny_setup();
    const ModelWeights w = init_weights(s.model, 0, 0.5);
    const auto prompt = setup_prompt(s);
    RunSetup all = s;
    all.engine.force_mode = ForceMode::kAllSalient;
    all.engine.response_only = false;
    const CompareResult eq = compare_runs(w, prompt, all);
    CHECK(eq.tokens_identical);
    CHECK(eq.flop_ratio == 1.0);

    const auto rows = tau_sweep(w, prompt, s, {-2.0, 0.9, 0.99, 0.999, 0.99999, 2.0});
    REQUIRE(rows.size() == 6);
    CHECK(rows[0].avg_salient_fraction == 0.0);
    CHECK(rows[5].first_step_fraction == 1.0);
    for (std::size_t i = 1; i < rows.size(); ++i) {
        CHECK(rows[i].first_step_fraction >= rows[i - 1].first_step_fraction);
        CHECK(rows[i].flop_ratio <= 1.0);
    }
    CHECK(rows[0].flop_ratio <= rows[5].flop_ratio);

    RunSetup tau2 = s;
    tau2.engine.tau = 2.0;
    tau2.engine.response_only = false;
    CHECK(tau_sweep(w, prompt, tau2, {2.0})[0].avg_salient_fraction == 1.0);
    CHECK_THROWS_AS(tau_sweep(w, prompt, s, {}), Error);
}

TEST_CASE("similarity histogram") {
    RunSetup s = tiny_setup();
    EngineConfig none;
    none.force_mode = ForceMode::kNoneSalient;
    none.response_only = false;
    const auto frozen = run(s, none);
    std::size_t samples = 0;
    for (const auto& st : frozen.report.steps)
        if (st.kind == StepKind::kSparse) samples += st.input_len;
    for (std::size_t l = 0; l < 2; ++l) {
        const auto h = similarity_histogram(frozen.report, l);
        REQUIRE(h.size() == 51);
        CHECK(h[0].lo == -1.0);
        CHECK(h[0].hi == 0.9);
        CHECK(h.back().hi == 1.0);
        std::uint64_t total = 0;
        for (const auto& b : h) total += b.count;
        CHECK(total == samples);
        // after the first sparse step all mass sits at s = 1
        if (l > 0) CHECK(h.back().count == samples);
    }
    CHECK_THROWS_AS(similarity_histogram(frozen.report, 2), Error);

    EngineConfig all;
    all.force_mode = ForceMode::kAllSalient;
    all.tau = 2.0;
    const auto r = run(s, all);
    const auto h = similarity_histogram(r.report, 1, {0.0, 1.0, 10});
    std::uint64_t total = 0;
    for (const auto& b : h) total += b.count;
    CHECK(total > 0);
    for (const auto& st : r.report.steps)
        for (const auto& lm : st.layers) CHECK(lm.n_salient == st.input_len);
}

TEST_CASE("salient counts") {
    RunSetup s = tiny_setup();
    EngineConfig all;
    all.force_mode = ForceMode::kAllSalient;
    const auto ra = run(s, all);
    const auto counts = salient_counts(ra.report);
    REQUIRE(counts.size() == 2);
    // sparse inputs are 22 rows (full) or 16 rows (response-only)
    for (const auto& c : counts) {
        CHECK(c.min_salient == 16);
        CHECK(c.max_salient == 22);
    }
    all.response_only = false;
    for (const auto& c : salient_counts(run(s, all).report)) CHECK(c.avg_salient == 22.0);
    EngineConfig none;
    none.force_mode = ForceMode::kNoneSalient;
    for (const auto& c : salient_counts(run(s, none).report)) {
        CHECK(c.avg_salient == 0.0);
        CHECK(c.max_salient == 0);
    }
    RunReport empty;
    empty.config.model.n_layers = 3;
    for (const auto& c : salient_counts(empty)) CHECK(c.min_salient == 0);
}

TEST_CASE("csv and json writers") {
    const auto r = run(tiny_setup(), EngineConfig{});
    std::ostringstream sm, sc, sh, cm, sw;
    write_step_metrics_csv(r.report, sm);
    write_salient_counts_csv(r.report, sc);
    write_similarity_hist_csv(r.report, sh);
    write_cost_model_csv({{"dual", {1024, 256, 32, 1, 32, 1280}, 71.0}}, cm);
    write_sweep_csv({{0.99, 0.5, 0.25, true, 0.75}}, sw);

    const auto sml = lines(sm.str());
    CHECK(sml[0] == "step,mode,layer,n_salient,flops_attn_scores,flops_attn_context,flops_ffn,flops_proj");
    CHECK(sml.size() == 1 + 16 * 2);
    CHECK(sml[1].rfind("0,full_sequence,0,22,", 0) == 0);
    CHECK(lines(sc.str())[0] == "layer,avg_salient,min_salient,max_salient");
    CHECK(lines(sh.str())[0] == "layer,bin_lo,bin_hi,count");
    CHECK(lines(sh.str()).size() == 1 + 2 * 51);
    CHECK(lines(cm.str())[1] == "dual,1024,256,32,1,32,1280,71");
    CHECK(lines(sw.str())[1] == "0.98999999999999999,0.5,0.25,true,0.75");

    // flops in the csv add up to the report total
    std::uint64_t sum = 0;
    for (std::size_t i = 1; i < sml.size(); ++i) {
        std::istringstream in(sml[i]);
        std::string f;
        for (int col = 0; col < 8; ++col) {
            std::getline(in, f, ',');
            if (col >= 4) sum += std::stoull(f);
        }
    }
    CHECK(sum == r.report.total_flops().total());

    const auto j = nlohmann::json::parse(report_to_json(r.report));
    CHECK(j["report_version"] == kReportVersion);
    CHECK(j["steps"].size() == 16);
    CHECK(j["generated"].size() == 16);
    CHECK(j["total_flops"]["total"] == r.report.total_flops().total());
    CHECK(j.contains("wall_clock_seconds"));
    CHECK(j["config"]["model"]["residual_mode"] == "literal");
}
