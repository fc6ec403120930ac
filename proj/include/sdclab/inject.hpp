#pragma once

// SDC fault injector. Perturbs designated tensors on the unhealthy node
// according to a statistical profile. Selection and severity draws are pure
// functions of (profile seed, site, layer, rank, step coordinates, element
// index), so repeated calls with the same coordinates produce the same faults.

#include <cstdint>
#include <string>
#include <vector>

#include "sdclab/tensor.hpp"

namespace sdclab {

enum class Site { fwd_attn, fwd_ffn, bwd_attn, bwd_ffn, matmul_internal };

inline const char* site_name(Site s) {
    switch (s) {
        case Site::fwd_attn: return "fwd_attn";
        case Site::fwd_ffn: return "fwd_ffn";
        case Site::bwd_attn: return "bwd_attn";
        case Site::bwd_ffn: return "bwd_ffn";
        case Site::matmul_internal: return "matmul_internal";
    }
    return "?";
}

struct SeverityDist {
    enum class Kind { fixed_factor, log_uniform_factor, bit_flip };
    Kind kind = Kind::fixed_factor;
    double factor = 2.0;          // fixed_factor
    double lo = 1.5, hi = 4.0;    // log_uniform_factor bounds

    void validate() const {
        if (kind == Kind::fixed_factor && factor <= 0)
            throw ContractViolation("severity factor must be positive");
        if (kind == Kind::log_uniform_factor && (lo <= 0 || hi < lo))
            throw ContractViolation("severity bounds must satisfy 0 < lo <= hi");
    }
};

struct Temporal {
    enum class Kind { constant, initial_spike, rare_burst };
    Kind kind = Kind::constant;
    double p_hi = 0.0;        // initial_spike rate while step < spike_steps
    int64_t spike_steps = 0;  // initial_spike window length S
    double p_lo = 0.0;        // initial_spike steady-state rate
    double q = 0.0;           // rare_burst per-step burst probability
    double p_burst = 0.0;     // rare_burst rate on burst steps

    void validate() const {
        auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
        if (!prob(p_hi) || !prob(p_lo) || !prob(q) || !prob(p_burst) || spike_steps < 0)
            throw ContractViolation("temporal pattern parameters out of range");
    }
};

struct SdcProfile {
    std::vector<Site> sites;
    std::vector<int> affected_ranks;  // empty = every rank of the unhealthy node
    double rate = 0.0;  // per-element probability per microstep (constant pattern)
    SeverityDist severity;
    Temporal temporal;
    uint64_t seed = 0;

    bool has_site(Site s) const {
        for (Site x : sites)
            if (x == s) return true;
        return false;
    }
    bool affects_rank(int r) const {
        if (affected_ranks.empty()) return true;
        for (int x : affected_ranks)
            if (x == r) return true;
        return false;
    }
    void validate() const {
        if (rate < 0.0 || rate > 1.0) throw ContractViolation("rate must be a probability");
        severity.validate();
        temporal.validate();
    }
};

/// Ground-truth record of one injected change (logged only when the stored
/// bit pattern actually changed).
struct FaultEvent {
    int64_t step = 0;
    int64_t microstep = 0;
    Site site = Site::fwd_attn;
    int layer = 0;
    int rank = 0;
    int64_t index = 0;
    double factor = 1.0;
};

/// Effective per-element rate at an optimizer step; deterministic in
/// (profile.seed, step).
inline double temporal_rate(const SdcProfile& profile, int64_t step) {
    switch (profile.temporal.kind) {
        case Temporal::Kind::constant:
            return profile.rate;
        case Temporal::Kind::initial_spike:
            return step < profile.temporal.spike_steps ? profile.temporal.p_hi
                                                       : profile.temporal.p_lo;
        case Temporal::Kind::rare_burst: {
            const uint64_t key = hash_combine(hash_combine(profile.seed, 0xB5B5B5B5ull),
                                              static_cast<uint64_t>(step));
            return unit_from_u64(mix64(key)) < profile.temporal.q ? profile.temporal.p_burst : 0.0;
        }
    }
    return 0.0;
}

namespace detail {

inline uint64_t fault_key(const SdcProfile& p, Site site, uint64_t op_id, int layer, int rank,
                          int64_t step, int64_t microstep, int64_t index) {
    uint64_t k = hash_combine(p.seed, static_cast<uint64_t>(site) + 1);
    k = hash_combine(k, op_id);
    k = hash_combine(k, static_cast<uint64_t>(layer) * 131ull + static_cast<uint64_t>(rank));
    k = hash_combine(k, static_cast<uint64_t>(step) * 8191ull + static_cast<uint64_t>(microstep));
    return hash_combine(k, static_cast<uint64_t>(index));
}

// Returns the corrupted value and the multiplicative factor that reproduces
// it exactly under replay (new = float(old * factor)).
inline bool corrupt_value(const SdcProfile& p, uint64_t key, float old_value, float* new_value,
                          double* factor) {
    double f = 1.0;
    switch (p.severity.kind) {
        case SeverityDist::Kind::fixed_factor:
            f = p.severity.factor;
            break;
        case SeverityDist::Kind::log_uniform_factor: {
            const double u = unit_from_u64(mix64(key ^ 0xA5A5A5A5A5A5A5A5ull));
            f = std::exp(std::log(p.severity.lo) +
                         u * (std::log(p.severity.hi) - std::log(p.severity.lo)));
            break;
        }
        case SeverityDist::Kind::bit_flip: {
            if (old_value == 0.0f) return false;
            uint32_t bits;
            std::memcpy(&bits, &old_value, sizeof(bits));
            uint32_t bit = static_cast<uint32_t>(mix64(key ^ 0x5A5A5A5A5A5A5A5Aull) % 31ull);
            uint32_t flipped = bits ^ (1u << bit);
            float nv;
            std::memcpy(&nv, &flipped, sizeof(nv));
            if (!std::isfinite(nv)) {  // avoid manufacturing Inf/NaN; flip a mantissa bit instead
                flipped = bits ^ (1u << 22);
                std::memcpy(&nv, &flipped, sizeof(nv));
            }
            f = static_cast<double>(nv) / static_cast<double>(old_value);
            *new_value = static_cast<float>(static_cast<double>(old_value) * f);
            *factor = f;
            return std::memcmp(new_value, &old_value, sizeof(float)) != 0;
        }
    }
    *factor = f;
    *new_value = static_cast<float>(static_cast<double>(old_value) * f);
    return std::memcmp(new_value, &old_value, sizeof(float)) != 0;
}

inline void corrupt_elements(Tensor& t, const SdcProfile& profile, Site site, uint64_t op_id,
                             int layer, int rank, int64_t step, int64_t microstep,
                             std::vector<FaultEvent>& events) {
    const double rate = temporal_rate(profile, step);
    if (rate <= 0.0) return;
    float* p = t.data();
    for (int64_t i = 0; i < t.size(); ++i) {
        const uint64_t key = fault_key(profile, site, op_id, layer, rank, step, microstep, i);
        if (unit_from_u64(mix64(key)) >= rate) continue;
        float nv;
        double f;
        if (!corrupt_value(profile, key, p[i], &nv, &f)) continue;
        p[i] = nv;
        events.push_back({step, microstep, site, layer, rank, i, f});
    }
}

}  // namespace detail

/// Perturb a hook-site tensor in place. No-op (empty events) when the site or
/// rank is not targeted by the profile.
inline std::vector<FaultEvent> corrupt(Tensor& t, const SdcProfile& profile, Site site, int layer,
                                       int rank, int64_t step, int64_t microstep) {
    std::vector<FaultEvent> events;
    if (!profile.has_site(site) || !profile.affects_rank(rank)) return events;
    detail::corrupt_elements(t, profile, site, 0, layer, rank, step, microstep, events);
    return events;
}

/// Matmul whose finished accumulator values are perturbed at seeded output
/// positions before storage. op_id decorrelates the several matmuls that share
/// one (layer, rank, microstep) coordinate.
inline Tensor corrupt_matmul_accumulator(const Tensor& a, const Tensor& b,
                                         const SdcProfile& profile, uint64_t op_id, int layer,
                                         int rank, int64_t step, int64_t microstep,
                                         std::vector<FaultEvent>& events) {
    Tensor c = matmul(a, b);
    if (!profile.has_site(Site::matmul_internal) || !profile.affects_rank(rank)) return c;
    detail::corrupt_elements(c, profile, Site::matmul_internal, op_id, layer, rank, step, microstep,
                             events);
    return c;
}

/// Re-apply an event log to a clean tensor; reproduces the corrupted tensor
/// bit-exactly.
inline void replay_events(Tensor& t, const std::vector<FaultEvent>& events) {
    for (const FaultEvent& e : events)
        t.at(e.index) = static_cast<float>(static_cast<double>(t.at(e.index)) * e.factor);
}

}  // namespace sdclab
