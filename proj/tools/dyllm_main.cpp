// dyllm command-line driver.
//
// Exit codes: 0 success, 1 verification failure, 2 usage, config or I/O error.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dyllm/analysis.hpp"
#include "dyllm/engine.hpp"
#include "dyllm/error.hpp"
#include "dyllm/kernels.hpp"
#include "dyllm/model.hpp"

namespace fs = std::filesystem;
using namespace dyllm;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerifyFailed = 1;
constexpr int kExitUsage = 2;

struct Options {
    ModelConfig model;
    std::string residual_mode = "literal";
    std::optional<std::uint32_t> mask_token;
    std::optional<std::uint32_t> kv_heads;
    double init_std = 0.02;
    std::string weights_path;
    std::uint64_t seed = 0;

    EngineConfig engine;
    bool no_response_only = false;
    std::string force_mode = "normal";
    SamplerConfig sampler;
    bool no_semi_ar = false;

    std::size_t prompt_len = 64;
    std::string prompt_file;
    std::size_t response_len = 64;
    std::string out_dir;
    std::string kernel = "auto";
    std::string dump_cache;
};

void add_model_options(CLI::App* app, Options& o) {
    std::vector<CLI::Option*> model_opts = {
        app->add_option("--n-layers", o.model.n_layers, "Transformer layers")->capture_default_str(),
        app->add_option("--d-model", o.model.d_model, "Hidden width")->capture_default_str(),
        app->add_option("--n-heads", o.model.n_heads, "Query heads")->capture_default_str(),
        app->add_option("--n-kv-heads", o.kv_heads, "Key/value heads (default n-heads)"),
        app->add_option("--d-ff", o.model.d_ff, "FFN hidden width")->capture_default_str(),
        app->add_option("--vocab", o.model.vocab_size, "Vocabulary size")->capture_default_str(),
        app->add_option("--mask-token", o.mask_token, "Mask token id (default vocab - 1)"),
        app->add_option("--rope-theta", o.model.rope_theta, "RoPE base")->capture_default_str(),
        app->add_option("--residual-mode", o.residual_mode, "literal or residual")
            ->capture_default_str(),
        app->add_option("--init-std", o.init_std, "Weight init stddev")->capture_default_str(),
    };
    auto* w = app->add_option("--weights", o.weights_path, "Load weights from file instead of seeded init");
    for (auto* m : model_opts) w->excludes(m);
    app->add_option("--seed", o.seed, "Seed for weights and synthetic prompt")->capture_default_str();
    app->add_option("--kernel", o.kernel, "scalar, avx2, avx512, neon or auto")->capture_default_str();
}

void add_engine_options(CLI::App* app, Options& o) {
    app->add_option("--tau", o.engine.tau, "Saliency threshold")->capture_default_str();
    app->add_option("--t-full", o.engine.t_full, "Warmup full steps")->capture_default_str();
    app->add_option("--full-input-period", o.engine.full_input_period,
                    "Sparse steps with t % period == 0 see the prompt")
        ->capture_default_str();
    app->add_flag("--no-response-only", o.no_response_only, "Always feed the full sequence");
    app->add_option("--force-mode", o.force_mode, "normal, all-salient or none-salient")
        ->capture_default_str();
    app->add_flag("--oracle", o.engine.oracle, "Run every step as a full step");
    app->add_flag("--inclusive-threshold", o.engine.inclusive_threshold, "Select s <= tau");
    app->add_flag("--inject-scatter-fault", o.engine.inject_scatter_fault,
                  "Swap two key-cache scatter targets (testing aid)");
    app->add_option("--n-u", o.sampler.n_u, "Tokens unmasked per step")->capture_default_str();
    app->add_option("--block-size", o.sampler.block_size, "Semi-AR block length")
        ->capture_default_str();
    app->add_flag("--no-semi-ar", o.no_semi_ar, "Decode the whole response as one block");
    app->add_option("--l-p", o.prompt_len, "Synthetic prompt length")->capture_default_str();
    app->add_option("--prompt-file", o.prompt_file, "Whitespace-separated prompt token ids");
    app->add_option("--l-r", o.response_len, "Response length")->capture_default_str();
}

void add_out_option(CLI::App* app, Options& o) {
    app->add_option("--out", o.out_dir, "Output directory (env DYLLM_OUT_DIR, default dyllm_out)");
}

// Resolves string-typed options into the config structs.
void finalize(Options& o) {
    o.model.residual_mode = parse_residual_mode(o.residual_mode);
    o.model.mask_token_id = o.mask_token.value_or(o.model.vocab_size - 1);
    o.model.n_kv_heads = o.kv_heads.value_or(o.model.n_heads);
    o.engine.response_only = !o.no_response_only;
    o.engine.force_mode = parse_force_mode(o.force_mode);
    o.sampler.semi_ar = !o.no_semi_ar;
    if (o.out_dir.empty()) {
        const char* env = std::getenv("DYLLM_OUT_DIR");
        o.out_dir = env != nullptr && *env != '\0' ? env : "dyllm_out";
    }
    kernels::set_backend(kernels::parse_backend(o.kernel));
}

ModelWeights load_model(const Options& o) {
    if (!o.weights_path.empty()) return load_weights(o.weights_path);
    o.model.validate();
    return init_weights(o.model, o.seed, o.init_std);
}

std::vector<TokenId> load_prompt(const Options& o, const ModelConfig& config) {
    if (o.prompt_file.empty()) return synthetic_prompt(o.prompt_len, config, o.seed);
    std::ifstream in(o.prompt_file);
    if (!in) throw Error(ErrorCode::kIo, "cannot open prompt file '" + o.prompt_file + "'");
    std::vector<TokenId> tokens;
    std::string word;
    while (in >> word) {
        std::size_t used = 0;
        long long v = 0;
        try {
            v = std::stoll(word, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != word.size()) {
            throw Error(ErrorCode::kInvalidArgument, "prompt file: bad token '" + word + "'");
        }
        if (v < 0 || v >= static_cast<long long>(config.vocab_size) ||
            v == static_cast<long long>(config.mask_token_id)) {
            throw Error(ErrorCode::kInvalidArgument,
                        "prompt file: token " + word + " out of range or equal to the mask id");
        }
        tokens.push_back(static_cast<TokenId>(v));
    }
    if (tokens.empty()) throw Error(ErrorCode::kInvalidArgument, "prompt file is empty");
    return tokens;
}

fs::path prepare_out_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) {
        throw Error(ErrorCode::kIo, "cannot create output directory '" + dir + "'");
    }
    return dir;
}

template <typename Fn>
void write_file(const fs::path& path, Fn&& body) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::kIo, "cannot open '" + path.string() + "' for writing");
    body(out);
    out.flush();
    if (!out) throw Error(ErrorCode::kIo, "write failed for '" + path.string() + "'");
}

RunSetup make_setup(const Options& o, const ModelWeights& w, std::size_t prompt_len) {
    RunSetup s;
    s.model = w.config;
    s.seed = o.seed;
    s.prompt_len = prompt_len;
    s.response_len = o.response_len;
    s.engine = o.engine;
    s.sampler = o.sampler;
    return s;
}

int cmd_generate(Options& o) {
    finalize(o);
    const ModelWeights w = load_model(o);
    const std::vector<TokenId> prompt = load_prompt(o, w.config);
    const fs::path dir = prepare_out_dir(o.out_dir);
    GenerateOptions go;
    go.keep_caches = !o.dump_cache.empty();
    const std::optional<CacheKind> dump_kind =
        o.dump_cache.empty() ? std::nullopt : std::optional(parse_cache_kind(o.dump_cache));

    const GenerationResult r = generate(w, prompt, o.response_len, o.engine, o.sampler, go);

    write_file(dir / "tokens.txt", [&](std::ostream& out) {
        for (TokenId t : r.response) out << t << '\n';
    });
    write_file(dir / "step_metrics.csv", [&](std::ostream& out) { write_step_metrics_csv(r.report, out); });
    write_file(dir / "salient_counts.csv",
               [&](std::ostream& out) { write_salient_counts_csv(r.report, out); });
    write_file(dir / "similarity_hist.csv",
               [&](std::ostream& out) { write_similarity_hist_csv(r.report, out); });
    write_file(dir / "run_report.json", [&](std::ostream& out) { out << report_to_json(r.report); });
    if (dump_kind) {
        for (std::size_t l = 0; l < w.config.n_layers; ++l) {
            const std::string name =
                "cache_" + std::string(cache_kind_name(*dump_kind)) + "_layer" + std::to_string(l) + ".csv";
            dump_cache_csv(r.final_caches->matrix(l, *dump_kind), dir / name);
        }
    }

    const FlopBreakdown f = r.report.total_flops();
    std::cout << "steps: " << r.report.steps.size() << "\n"
              << "tokens: " << r.response.size() << "\n"
              << "flops: " << f.total() << "\n"
              << "avg salient fraction: " << avg_salient_fraction(r.report) << "\n"
              << "kernel: " << r.report.config.kernel_backend << "\n"
              << "output: " << dir.string() << "\n";
    return kExitOk;
}

int cmd_compare(Options& o) {
    finalize(o);
    const ModelWeights w = load_model(o);
    const std::vector<TokenId> prompt = load_prompt(o, w.config);
    const CompareResult c = compare_runs(w, prompt, make_setup(o, w, prompt.size()));
    std::printf("%-24s %s\n", "identical:", c.tokens_identical ? "true" : "false");
    std::printf("%-24s %.6e\n", "max logit deviation:", c.max_logit_deviation);
    std::printf("%-24s %llu\n", "oracle flops:",
                static_cast<unsigned long long>(c.oracle_flops.total()));
    std::printf("%-24s %llu\n", "dyllm flops:",
                static_cast<unsigned long long>(c.sparse_flops.total()));
    std::printf("%-24s %.6f\n", "flop ratio:", c.flop_ratio);
    std::printf("%-24s %.6f\n", "avg salient fraction:", avg_salient_fraction(c.sparse.report));
    return kExitOk;
}

int cmd_sweep(Options& o, const std::vector<double>& taus) {
    finalize(o);
    const ModelWeights w = load_model(o);
    const std::vector<TokenId> prompt = load_prompt(o, w.config);
    const std::vector<SweepRow> rows = tau_sweep(w, prompt, make_setup(o, w, prompt.size()), taus);
    const fs::path dir = prepare_out_dir(o.out_dir);
    write_file(dir / "sweep.csv", [&](std::ostream& out) { write_sweep_csv(rows, out); });
    write_sweep_csv(rows, std::cout);
    return kExitOk;
}

struct VerifyOptions {
    std::size_t trials = 1000;
    std::size_t seeds = 4;
    std::size_t check_dim = 16;
};

int cmd_verify(Options& o, const VerifyOptions& v) {
    finalize(o);
    if (!o.weights_path.empty()) {
        throw Error(ErrorCode::kInvalidConfig, "verify uses seeded weights; --weights is not supported");
    }
    bool ok = true;
    auto line = [&](bool pass, const std::string& name, const std::string& detail) {
        std::printf("%s %s %s\n", pass ? "PASS" : "FAIL", name.c_str(), detail.c_str());
        ok = ok && pass;
    };
    char buf[256];

    double delta_err = 0.0;
    for (std::size_t i = 0; i < 100; ++i) {
        delta_err = std::max(delta_err, check_delta_decomposition(1 + i % 8, 2 + i % 16, 1 + i % 12,
                                                                  o.seed * 1000 + i));
    }
    std::snprintf(buf, sizeof buf, "instances=100 max_error=%.3e", delta_err);
    line(delta_err < 1e-10, "delta-decomposition", buf);

    const double p1 = check_scale_invariance(v.check_dim, v.trials, o.seed + 1);
    std::snprintf(buf, sizeof buf, "trials=%zu max_deviation=%.3e", v.trials, p1);
    line(p1 < 1e-9, "scale-invariance", buf);

    const DirectionalReport p2 = check_directional_bound(v.check_dim, v.trials, o.seed + 2);
    std::snprintf(buf, sizeof buf, "trials=%zu max_error=%.3e", v.trials, p2.exact_component_error);
    line(p2.exact_component_error < 1e-10, "directional-identity", buf);
    std::printf("REPORT directional-bound violation_rate=%.4f max_ratio=%.4f mean_kappa=%.3f\n",
                p2.bound_violation_rate, p2.max_ratio, p2.mean_kappa);

    std::vector<std::uint32_t> kv_options = {o.model.n_heads};
    for (std::uint32_t div : {4u, 2u}) {
        if (o.model.n_heads % div == 0 && o.model.n_heads / div >= 1) {
            kv_options.push_back(o.model.n_heads / div);
            break;
        }
    }
    for (ResidualMode mode : {ResidualMode::kLiteral, ResidualMode::kResidual}) {
        for (std::uint32_t kv : kv_options) {
            for (std::size_t s = 0; s < v.seeds; ++s) {
                RunSetup setup;
                setup.model = o.model;
                setup.model.residual_mode = mode;
                setup.model.n_kv_heads = kv;
                setup.model.validate();
                setup.seed = o.seed + s;
                setup.prompt_len = o.prompt_len;
                setup.response_len = o.response_len;
                setup.engine = o.engine;
                setup.sampler = o.sampler;
                const EquivalenceResult r = verify_equivalence(setup);
                std::snprintf(buf, sizeof buf,
                              "mode=%s kv_heads=%u seed=%llu tokens_identical=%s max_dev=%.3e",
                              std::string(residual_mode_name(mode)).c_str(), kv,
                              static_cast<unsigned long long>(setup.seed),
                              r.tokens_identical ? "true" : "false", r.max_logit_deviation);
                line(r.pass, "equivalence", buf);
            }
        }
    }
    std::printf("%s\n", ok ? "all hard checks passed" : "verification failed");
    return ok ? kExitOk : kExitVerifyFailed;
}

struct CostOptions {
    std::vector<std::string> policies = {"prefix", "dual"};
    std::vector<std::size_t> n_us = {1};
    std::size_t prompt_len = 1024;
    std::size_t response_len = 256;
    std::size_t block_size = 32;
    std::optional<double> tokens_per_step;
    std::optional<double> tokens_per_refresh;
    std::string out_dir;
};

int cmd_cost_model(CostOptions& c) {
    std::vector<CostModelRow> rows;
    for (const std::string& name : c.policies) {
        CostPolicy p;
        if (name == "prefix") {
            p = prefix_cache_policy();
        } else if (name == "dual") {
            p = dual_cache_policy();
        } else if (name == "custom") {
            if (!c.tokens_per_step || !c.tokens_per_refresh) {
                throw Error(ErrorCode::kInvalidConfig,
                            "custom policy needs --tokens-per-step and --tokens-per-refresh");
            }
            p = {"custom", *c.tokens_per_step, *c.tokens_per_refresh};
        } else {
            throw Error(ErrorCode::kInvalidConfig, "unknown policy '" + name + "'");
        }
        if (name != "custom") {
            p.tokens_per_step = c.tokens_per_step.value_or(p.tokens_per_step);
            p.tokens_per_refresh = c.tokens_per_refresh.value_or(p.tokens_per_refresh);
        }
        for (std::size_t n_u : c.n_us) {
            CostModelInput in{c.prompt_len, c.response_len, c.block_size, n_u, p.tokens_per_step,
                              p.tokens_per_refresh};
            rows.push_back({p.name, in, cost_model_avg_tokens(in)});
        }
    }
    if (c.out_dir.empty()) {
        const char* env = std::getenv("DYLLM_OUT_DIR");
        c.out_dir = env != nullptr && *env != '\0' ? env : "dyllm_out";
    }
    const fs::path dir = prepare_out_dir(c.out_dir);
    write_file(dir / "cost_model.csv", [&](std::ostream& out) { write_cost_model_csv(rows, out); });
    write_cost_model_csv(rows, std::cout);
    return kExitOk;
}

int cmd_init_weights(Options& o, const std::string& path) {
    finalize(o);
    o.model.validate();
    const ModelWeights w = init_weights(o.model, o.seed, o.init_std);
    save_weights(w, path);
    std::cout << "wrote " << path << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dyllm: masked-diffusion transformer engine with saliency-aware caching"};
    app.require_subcommand(1);

    Options gen_opts, cmp_opts, sweep_opts, verify_opts, init_opts;

    auto* gen = app.add_subcommand("generate", "Run one generation and write reports");
    add_model_options(gen, gen_opts);
    add_engine_options(gen, gen_opts);
    add_out_option(gen, gen_opts);
    gen->add_option("--dump-cache", gen_opts.dump_cache, "Dump final cache K, V, C or FFN_OUT per layer as CSV");

    auto* cmp = app.add_subcommand("compare", "Compare the oracle with the configured engine");
    add_model_options(cmp, cmp_opts);
    add_engine_options(cmp, cmp_opts);

    std::vector<double> taus = {0.985, 0.99, 0.995};
    auto* sweep = app.add_subcommand("sweep-tau", "Sweep the saliency threshold");
    add_model_options(sweep, sweep_opts);
    add_engine_options(sweep, sweep_opts);
    add_out_option(sweep, sweep_opts);
    sweep->add_option("--taus", taus, "Threshold list")->delimiter(',')->capture_default_str();

    VerifyOptions vopts;
    auto* verify = app.add_subcommand("verify", "Run identity and equivalence checks");
    add_model_options(verify, verify_opts);
    add_engine_options(verify, verify_opts);
    verify->add_option("--trials", vopts.trials, "Random trials per identity check")
        ->capture_default_str();
    verify->add_option("--seeds", vopts.seeds, "Seeds per equivalence configuration")
        ->capture_default_str();
    verify->add_option("--check-dim", vopts.check_dim, "Width for identity checks")
        ->capture_default_str();

    CostOptions copts;
    auto* cost = app.add_subcommand("cost-model", "Evaluate the computed-token cost model");
    cost->add_option("--policy", copts.policies, "prefix, dual or custom")->delimiter(',');
    cost->add_option("--n-u", copts.n_us, "Tokens unmasked per step")->delimiter(',');
    cost->add_option("--l-p", copts.prompt_len, "Prompt length")->capture_default_str();
    cost->add_option("--l-r", copts.response_len, "Response length")->capture_default_str();
    cost->add_option("--block-size", copts.block_size, "Block length")->capture_default_str();
    cost->add_option("--tokens-per-step", copts.tokens_per_step, "Override tokens per step");
    cost->add_option("--tokens-per-refresh", copts.tokens_per_refresh, "Override tokens per refresh");
    cost->add_option("--out", copts.out_dir, "Output directory (env DYLLM_OUT_DIR, default dyllm_out)");

    std::string weights_out;
    auto* init = app.add_subcommand("init-weights", "Write seeded weights to a file");
    add_model_options(init, init_opts);
    init->add_option("--output", weights_out, "Weight file path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*gen) return cmd_generate(gen_opts);
        if (*cmp) return cmd_compare(cmp_opts);
        if (*sweep) return cmd_sweep(sweep_opts, taus);
        if (*verify) return cmd_verify(verify_opts, vopts);
        if (*cost) return cmd_cost_model(copts);
        if (*init) return cmd_init_weights(init_opts, weights_out);
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s: %s\n", to_string(e.code()), e.what());
        return kExitUsage;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    }
    return kExitUsage;
}
