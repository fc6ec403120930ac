#pragma once

// Strict JSON run configuration: unknown keys are rejected with their path,
// defaults come from the desk-scale setup, and the effective config is echoed
// into a run manifest whose hash makes reruns comparable.

#include <chrono>
#include <cstdint>
#include <ctime>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdclab/abft.hpp"
#include "sdclab/inject.hpp"
#include "sdclab/lockstep.hpp"
#include "sdclab/model.hpp"

namespace sdclab {

struct RunConfig {
    ModelConfig model;
    OptimizerConfig opt;
    SdcProfile profile;
    std::string profile_name = "none";
    int64_t steps = 200;
    uint64_t seed = 0;
    std::string out_dir;
    std::vector<int64_t> snapshot_steps;
    AbftPrecision abft_precision = AbftPrecision::f32;
    bool abft_classical_u = false;

    RunOptions options() const {
        return {model, opt, profile, steps, seed, out_dir, snapshot_steps};
    }
};

inline SdcProfile preset_profile(const std::string& name) {
    SdcProfile p;
    if (name == "none") {
        p.sites = {Site::fwd_attn, Site::fwd_ffn, Site::bwd_attn, Site::bwd_ffn};
        p.rate = 0.0;
        return p;
    }
    if (name == "node10-like") {
        // Steady rate 4.78e-3 at the attention boundary with a high initial
        // spike over the first few steps.
        p.sites = {Site::fwd_attn};
        p.rate = 4.78e-3;
        p.severity = {SeverityDist::Kind::fixed_factor, 2.0, 1.5, 4.0};
        p.temporal.kind = Temporal::Kind::initial_spike;
        p.temporal.p_hi = 4.78e-2;
        p.temporal.spike_steps = 5;
        p.temporal.p_lo = 4.78e-3;
        p.seed = 10;
        return p;
    }
    if (name == "node11-like") {
        p.sites = {Site::fwd_attn};
        p.rate = 2.89e-2;
        p.severity = {SeverityDist::Kind::log_uniform_factor, 2.0, 1.5, 4.0};
        p.temporal.kind = Temporal::Kind::constant;
        p.seed = 11;
        return p;
    }
    if (name == "node14-like") {
        // Near-zero baseline with rare bursts of corruption.
        p.sites = {Site::fwd_attn, Site::fwd_ffn};
        p.rate = 0.0;
        p.severity = {SeverityDist::Kind::log_uniform_factor, 2.0, 1.5, 4.0};
        p.temporal.kind = Temporal::Kind::rare_burst;
        p.temporal.q = 0.05;
        p.temporal.p_burst = 1e-3;
        p.seed = 14;
        return p;
    }
    throw ContractViolation("unknown profile preset: " + name);
}

namespace detail {

inline void reject_unknown(const nlohmann::json& obj, const std::set<std::string>& allowed,
                           const std::string& path) {
    for (auto it = obj.begin(); it != obj.end(); ++it)
        if (!allowed.count(it.key()))
            throw ContractViolation("unknown config key: " + path + it.key());
}

template <typename T>
void read_key(const nlohmann::json& obj, const char* key, T& out, const std::string& path) {
    if (!obj.contains(key)) return;
    try {
        out = obj.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ContractViolation("invalid value for config key: " + path + key);
    }
}

inline Site parse_site(const std::string& s, const std::string& path) {
    if (s == "fwd_attn") return Site::fwd_attn;
    if (s == "fwd_ffn") return Site::fwd_ffn;
    if (s == "bwd_attn") return Site::bwd_attn;
    if (s == "bwd_ffn") return Site::bwd_ffn;
    if (s == "matmul_internal") return Site::matmul_internal;
    throw ContractViolation("invalid value for config key: " + path);
}

}  // namespace detail

inline SdcProfile parse_profile(const nlohmann::json& j, const std::string& path,
                                std::string* name_out) {
    detail::reject_unknown(
        j, {"preset", "sites", "affected_ranks", "rate", "severity", "temporal", "seed"}, path);
    SdcProfile p;
    if (j.contains("preset")) {
        std::string preset = j.at("preset").get<std::string>();
        p = preset_profile(preset);
        if (name_out) *name_out = preset;
    } else if (name_out) {
        *name_out = "custom";
    }
    if (j.contains("sites")) {
        p.sites.clear();
        for (const auto& s : j.at("sites"))
            p.sites.push_back(detail::parse_site(s.get<std::string>(), path + "sites"));
    }
    detail::read_key(j, "affected_ranks", p.affected_ranks, path);
    detail::read_key(j, "rate", p.rate, path);
    detail::read_key(j, "seed", p.seed, path);
    if (j.contains("severity")) {
        const auto& sv = j.at("severity");
        detail::reject_unknown(sv, {"kind", "factor", "lo", "hi"}, path + "severity.");
        std::string kind = "fixed_factor";
        detail::read_key(sv, "kind", kind, path + "severity.");
        if (kind == "fixed_factor")
            p.severity.kind = SeverityDist::Kind::fixed_factor;
        else if (kind == "log_uniform_factor")
            p.severity.kind = SeverityDist::Kind::log_uniform_factor;
        else if (kind == "bit_flip")
            p.severity.kind = SeverityDist::Kind::bit_flip;
        else
            throw ContractViolation("invalid value for config key: " + path + "severity.kind");
        detail::read_key(sv, "factor", p.severity.factor, path + "severity.");
        detail::read_key(sv, "lo", p.severity.lo, path + "severity.");
        detail::read_key(sv, "hi", p.severity.hi, path + "severity.");
    }
    if (j.contains("temporal")) {
        const auto& tp = j.at("temporal");
        detail::reject_unknown(tp, {"kind", "p_hi", "spike_steps", "p_lo", "q", "p_burst"},
                               path + "temporal.");
        std::string kind = "constant";
        detail::read_key(tp, "kind", kind, path + "temporal.");
        if (kind == "constant")
            p.temporal.kind = Temporal::Kind::constant;
        else if (kind == "initial_spike")
            p.temporal.kind = Temporal::Kind::initial_spike;
        else if (kind == "rare_burst")
            p.temporal.kind = Temporal::Kind::rare_burst;
        else
            throw ContractViolation("invalid value for config key: " + path + "temporal.kind");
        detail::read_key(tp, "p_hi", p.temporal.p_hi, path + "temporal.");
        detail::read_key(tp, "spike_steps", p.temporal.spike_steps, path + "temporal.");
        detail::read_key(tp, "p_lo", p.temporal.p_lo, path + "temporal.");
        detail::read_key(tp, "q", p.temporal.q, path + "temporal.");
        detail::read_key(tp, "p_burst", p.temporal.p_burst, path + "temporal.");
    }
    p.validate();
    return p;
}

inline RunConfig parse_config_json(const nlohmann::json& j) {
    RunConfig c;
    c.profile = preset_profile("none");
    detail::reject_unknown(
        j, {"model", "optimizer", "profile", "steps", "seed", "out_dir", "snapshot_steps", "abft"},
        "");
    if (j.contains("model")) {
        const auto& m = j.at("model");
        detail::reject_unknown(m,
                               {"layers", "hidden", "heads", "kv_heads", "seq_len", "vocab",
                                "tp_degree", "micro_batch", "grad_accum", "ffn_mult", "dtype"},
                               "model.");
        detail::read_key(m, "layers", c.model.layers, "model.");
        detail::read_key(m, "hidden", c.model.hidden, "model.");
        detail::read_key(m, "heads", c.model.heads, "model.");
        detail::read_key(m, "kv_heads", c.model.kv_heads, "model.");
        detail::read_key(m, "seq_len", c.model.seq_len, "model.");
        detail::read_key(m, "vocab", c.model.vocab, "model.");
        detail::read_key(m, "tp_degree", c.model.tp_degree, "model.");
        detail::read_key(m, "micro_batch", c.model.micro_batch, "model.");
        detail::read_key(m, "grad_accum", c.model.grad_accum, "model.");
        detail::read_key(m, "ffn_mult", c.model.ffn_mult, "model.");
        if (m.contains("dtype")) {
            const std::string d = m.at("dtype").get<std::string>();
            if (d == "f32")
                c.model.dtype = Dtype::f32;
            else if (d == "bf16emu")
                c.model.dtype = Dtype::bf16emu;
            else
                throw ContractViolation("invalid value for config key: model.dtype");
        }
    }
    if (j.contains("optimizer")) {
        const auto& o = j.at("optimizer");
        detail::reject_unknown(o,
                               {"lr", "beta1", "beta2", "eps", "weight_decay", "clip_norm",
                                "warmup_frac", "schedule_steps"},
                               "optimizer.");
        detail::read_key(o, "lr", c.opt.lr, "optimizer.");
        detail::read_key(o, "beta1", c.opt.beta1, "optimizer.");
        detail::read_key(o, "beta2", c.opt.beta2, "optimizer.");
        detail::read_key(o, "eps", c.opt.eps, "optimizer.");
        detail::read_key(o, "weight_decay", c.opt.weight_decay, "optimizer.");
        detail::read_key(o, "clip_norm", c.opt.clip_norm, "optimizer.");
        detail::read_key(o, "warmup_frac", c.opt.warmup_frac, "optimizer.");
        detail::read_key(o, "schedule_steps", c.opt.schedule_steps, "optimizer.");
    }
    if (j.contains("profile"))
        c.profile = parse_profile(j.at("profile"), "profile.", &c.profile_name);
    detail::read_key(j, "steps", c.steps, "");
    detail::read_key(j, "seed", c.seed, "");
    detail::read_key(j, "out_dir", c.out_dir, "");
    detail::read_key(j, "snapshot_steps", c.snapshot_steps, "");
    if (j.contains("abft")) {
        const auto& a = j.at("abft");
        detail::reject_unknown(a, {"precision", "classical_u"}, "abft.");
        if (a.contains("precision")) {
            const std::string p = a.at("precision").get<std::string>();
            if (p == "f32")
                c.abft_precision = AbftPrecision::f32;
            else if (p == "bf16")
                c.abft_precision = AbftPrecision::bf16;
            else if (p == "f16")
                c.abft_precision = AbftPrecision::f16;
            else
                throw ContractViolation("invalid value for config key: abft.precision");
        }
        detail::read_key(a, "classical_u", c.abft_classical_u, "abft.");
    }
    if (c.steps < 1) throw ContractViolation("steps must be >= 1");
    c.model.validate();
    c.profile.validate();
    return c;
}

inline RunConfig parse_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ContractViolation("config file not found: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ContractViolation("config parse error in " + path + ": " + e.what());
    }
    if (!j.is_object()) throw ContractViolation("config root must be an object");
    return parse_config_json(j);
}

// ---------------------------------------------------------------------------
// Manifest

inline nlohmann::json config_to_json(const RunConfig& c) {
    nlohmann::json sites = nlohmann::json::array();
    for (Site s : c.profile.sites) sites.push_back(site_name(s));
    nlohmann::json temporal;
    switch (c.profile.temporal.kind) {
        case Temporal::Kind::constant: temporal = {{"kind", "constant"}}; break;
        case Temporal::Kind::initial_spike:
            temporal = {{"kind", "initial_spike"},
                        {"p_hi", c.profile.temporal.p_hi},
                        {"spike_steps", c.profile.temporal.spike_steps},
                        {"p_lo", c.profile.temporal.p_lo}};
            break;
        case Temporal::Kind::rare_burst:
            temporal = {{"kind", "rare_burst"},
                        {"q", c.profile.temporal.q},
                        {"p_burst", c.profile.temporal.p_burst}};
            break;
    }
    const char* sev_kind = c.profile.severity.kind == SeverityDist::Kind::fixed_factor
                               ? "fixed_factor"
                               : c.profile.severity.kind == SeverityDist::Kind::log_uniform_factor
                                     ? "log_uniform_factor"
                                     : "bit_flip";
    return {
        {"model",
         {{"layers", c.model.layers},
          {"hidden", c.model.hidden},
          {"heads", c.model.heads},
          {"kv_heads", c.model.kv_heads},
          {"seq_len", c.model.seq_len},
          {"vocab", c.model.vocab},
          {"tp_degree", c.model.tp_degree},
          {"micro_batch", c.model.micro_batch},
          {"grad_accum", c.model.grad_accum},
          {"ffn_mult", c.model.ffn_mult},
          {"dtype", dtype_name(c.model.dtype)}}},
        {"optimizer",
         {{"lr", c.opt.lr},
          {"beta1", c.opt.beta1},
          {"beta2", c.opt.beta2},
          {"eps", c.opt.eps},
          {"weight_decay", c.opt.weight_decay},
          {"clip_norm", c.opt.clip_norm},
          {"warmup_frac", c.opt.warmup_frac},
          {"schedule_steps", c.opt.schedule_steps}}},
        {"profile",
         {{"name", c.profile_name},
          {"sites", sites},
          {"affected_ranks", c.profile.affected_ranks},
          {"rate", c.profile.rate},
          {"severity",
           {{"kind", sev_kind},
            {"factor", c.profile.severity.factor},
            {"lo", c.profile.severity.lo},
            {"hi", c.profile.severity.hi}}},
          {"temporal", temporal},
          {"seed", c.profile.seed}}},
        {"steps", c.steps},
        {"seed", c.seed},
        {"snapshot_steps", c.snapshot_steps},
        {"abft",
         {{"precision", abft_precision_name(c.abft_precision)},
          {"classical_u", c.abft_classical_u}}},
    };
}

inline uint64_t config_hash(const RunConfig& c) {
    const std::string s = config_to_json(c).dump();
    uint64_t h = 1469598103934665603ull;
    for (char ch : s) h = (h ^ static_cast<uint64_t>(static_cast<unsigned char>(ch))) * 1099511628211ull;
    return h;
}

inline std::string iso_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

struct Manifest {
    RunConfig config;
    std::string protocol;
    std::string start_time;
    std::string end_time;
    std::string status = "running";
    nlohmann::json extra = nlohmann::json::object();

    void write(const std::string& path) const {
        nlohmann::json j = {
            {"artifact_version", "1.0.0"},
            {"protocol", protocol},
            {"config", config_to_json(config)},
            {"config_hash", config_hash(config)},
            {"seed", config.seed},
            {"start_time", start_time},
            {"end_time", end_time},
            {"status", status},
        };
        for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
        std::ofstream out(path);
        if (!out) throw ContractViolation("cannot write manifest: " + path);
        out << j.dump(2) << "\n";
    }
};

}  // namespace sdclab
