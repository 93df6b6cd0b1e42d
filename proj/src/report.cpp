#include "json.hpp"

#include "dyllm/analysis.hpp"

namespace dyllm {

namespace {

using nlohmann::ordered_json;

ordered_json flops_json(const FlopBreakdown& f) {
    return {{"attn_scores", f.attn_scores},
            {"attn_context", f.attn_context},
            {"ffn", f.ffn},
            {"proj", f.proj},
            {"total", f.total()}};
}

ordered_json config_json(const RunConfigEcho& c) {
    const ModelConfig& m = c.model;
    const EngineConfig& e = c.engine;
    return {
        {"model",
         {{"n_layers", m.n_layers},
          {"d_model", m.d_model},
          {"n_heads", m.n_heads},
          {"n_kv_heads", m.n_kv_heads},
          {"d_ff", m.d_ff},
          {"vocab_size", m.vocab_size},
          {"mask_token_id", m.mask_token_id},
          {"rope_theta", m.rope_theta},
          {"residual_mode", residual_mode_name(m.residual_mode)}}},
        {"engine",
         {{"tau", e.tau},
          {"t_full", e.t_full},
          {"full_input_period", e.full_input_period},
          {"response_only", e.response_only},
          {"force_mode", force_mode_name(e.force_mode)},
          {"inclusive_threshold", e.inclusive_threshold},
          {"oracle", e.oracle},
          {"inject_scatter_fault", e.inject_scatter_fault}}},
        {"sampler",
         {{"n_u", c.sampler.n_u},
          {"block_size", c.sampler.block_size},
          {"semi_ar", c.sampler.semi_ar}}},
        {"prompt_len", c.prompt_len},
        {"response_len", c.response_len},
        {"kernel_backend", c.kernel_backend},
    };
}

}  // namespace

std::string report_to_json(const RunReport& report) {
    ordered_json doc;
    doc["report_version"] = kReportVersion;
    doc["indexing"] = "0-based";
    doc["config"] = config_json(report.config);
    doc["prompt"] = report.prompt;
    doc["generated"] = report.generated;
    doc["total_flops"] = flops_json(report.total_flops());

    ordered_json steps = ordered_json::array();
    for (const auto& st : report.steps) {
        ordered_json layers = ordered_json::array();
        for (std::size_t l = 0; l < st.layers.size(); ++l) {
            const LayerMetrics& lm = st.layers[l];
            ordered_json j = {{"layer", l}, {"n_salient", lm.n_salient}, {"flops", flops_json(lm.flops)}};
            if (lm.has_similarity) {
                j["sim_min"] = lm.sim_min;
                j["sim_mean"] = lm.sim_mean;
                j["sim_frac_high"] = lm.sim_frac_high;
            }
            layers.push_back(std::move(j));
        }
        steps.push_back({{"step", st.step},
                         {"kind", step_kind_name(st.kind)},
                         {"mode", input_mode_name(st.mode)},
                         {"input_len", st.input_len},
                         {"head_flops", flops_json(st.head_flops)},
                         {"layers", std::move(layers)}});
    }
    doc["steps"] = std::move(steps);
    doc["wall_clock_seconds"] = report.wall_clock_seconds;
    return doc.dump(2) + "\n";
}

}  // namespace dyllm
