#pragma once

// Algorithm-based fault tolerance for matrix products. A product C = A*B is
// verified with one checksum vector: flag when
//   || C*w - A*(B*w) ||_inf  >  tau * ||A||_inf * ||B||_inf,   tau = k*u,
// where w is the all-ones vector, k the contraction length and u the unit
// roundoff of the working precision. The check is sound only when the
// precision gate n*u <= 0.01 holds; in 16-bit formats the tolerance term
// swamps any realistic fault.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "sdclab/inject.hpp"
#include "sdclab/lockstep.hpp"
#include "sdclab/model.hpp"
#include "sdclab/tensor.hpp"

namespace sdclab {

enum class AbftPrecision { f32, bf16, f16 };

inline const char* abft_precision_name(AbftPrecision p) {
    switch (p) {
        case AbftPrecision::f32: return "f32";
        case AbftPrecision::bf16: return "bf16";
        case AbftPrecision::f16: return "f16";
    }
    return "?";
}

/// Unit roundoff. The default follows the machine-epsilon convention
/// (spacing of floats just above 1); classical rounding analysis uses half
/// that value.
inline double unit_roundoff(AbftPrecision p, bool classical = false) {
    double u = 0.0;
    switch (p) {
        case AbftPrecision::f32: u = 0x1.0p-23; break;   // 1.1920929e-07
        case AbftPrecision::bf16: u = 0x1.0p-7; break;   // 0.0078125
        case AbftPrecision::f16: u = 0x1.0p-10; break;   // 0.0009765625
    }
    return classical ? u / 2.0 : u;
}

struct PrecisionGate {
    double n_times_u = 0.0;
    bool pass = false;
};

/// The checksum test only has discriminating power when n*u is small; the
/// workable-threshold is 0.01.
inline PrecisionGate precision_gate(int64_t n, double u) {
    PrecisionGate g;
    g.n_times_u = static_cast<double>(n) * u;
    g.pass = g.n_times_u <= 0.01;
    return g;
}

/// Expected number of corrupted elements for a per-element rate over n
/// elements.
inline double expected_fault_count(double rate, int64_t n) {
    return rate * static_cast<double>(n);
}

struct AbftCheck {
    double lhs = 0.0;  // || C*w - A*(B*w) ||_inf
    double rhs = 0.0;  // tau * ||A||_inf * ||B||_inf
    bool flagged = false;
};

/// Verify a finished product C against its operands. All checksum arithmetic
/// runs in double with ascending-index accumulation so the test itself is
/// deterministic and adds no rounding noise of its own.
inline AbftCheck check_product(const Tensor& a, const Tensor& b, const Tensor& c, double u) {
    if (a.rank() != 2 || b.rank() != 2 || c.rank() != 2 || a.dim(1) != b.dim(0) ||
        c.dim(0) != a.dim(0) || c.dim(1) != b.dim(1))
        throw ContractViolation("check_product shape mismatch");
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    // bw = B*w: row sums of B; cw = C*w: row sums of C.
    std::vector<double> bw(static_cast<size_t>(k), 0.0);
    for (int64_t i = 0; i < k; ++i)
        for (int64_t j = 0; j < n; ++j) bw[static_cast<size_t>(i)] += static_cast<double>(b.at(i, j));
    AbftCheck chk;
    for (int64_t i = 0; i < m; ++i) {
        double cw = 0.0;
        for (int64_t j = 0; j < n; ++j) cw += static_cast<double>(c.at(i, j));
        double abw = 0.0;
        for (int64_t p = 0; p < k; ++p)
            abw += static_cast<double>(a.at(i, p)) * bw[static_cast<size_t>(p)];
        chk.lhs = std::max(chk.lhs, std::abs(cw - abw));
    }
    const double tau = static_cast<double>(k) * u;
    chk.rhs = tau * norms(a).inf * norms(b).inf;
    chk.flagged = chk.lhs > chk.rhs;
    return chk;
}

struct CheckedProduct {
    Tensor c;
    AbftCheck check;
};

/// Compute C = A*B through the given kernel (which may corrupt accumulator
/// values) and verify the stored result.
inline CheckedProduct checked_matmul(
    const Tensor& a, const Tensor& b, double u,
    const std::function<Tensor(const Tensor&, const Tensor&)>& kernel = nullptr) {
    CheckedProduct out;
    out.c = kernel ? kernel(a, b) : matmul(a, b);
    out.check = check_product(a, b, out.c, u);
    return out;
}

// ---------------------------------------------------------------------------
// Training-integrated runner: every linear-layer product in the unhealthy
// model goes through the fault injector and is then checksum-verified.

struct AbftRunResult {
    int64_t checks = 0;
    int64_t flags = 0;
    int64_t event_count = 0;
    std::vector<FaultEvent> events;
};

inline AbftRunResult run_abft(const RunOptions& o, AbftPrecision precision = AbftPrecision::f32,
                              bool classical_u = false) {
    o.model.validate();
    o.profile.validate();
    std::filesystem::create_directories(o.out_dir);
    const double u = unit_roundoff(precision, classical_u);
    ParamsT<float> params = init_params<float>(o.model, o.seed);
    AdamStateT<float> st = make_adam_state<float>(o.model);

    CsvWriter csv(o.out_dir + "/abft.csv",
                  {"step", "layer", "site", "checks", "flags", "max_lhs", "max_rhs"});
    AbftRunResult res;

    struct Cell {
        int64_t checks = 0, flags = 0;
        double max_lhs = 0.0, max_rhs = 0.0;
    };

    int64_t cur_step = 0, cur_micro = 0;
    std::map<std::pair<int, std::string>, Cell> cells;  // (layer, op) for the current step

    MatmulFn<float> mm = [&](const Tensor& ta, const Tensor& tb, const MatmulSite& s) -> Tensor {
        // Reduce to plain row-by-column form so one checksum test covers all
        // three operand layouts.
        Tensor a = s.mode == MmMode::TN ? transpose(ta) : ta;
        Tensor b = s.mode == MmMode::NT ? transpose(tb) : tb;
        Tensor c = matmul(a, b);
        if (o.profile.has_site(Site::matmul_internal) && o.profile.affects_rank(s.rank))
            detail::corrupt_elements(c, o.profile, Site::matmul_internal, detail::op_hash(s.op),
                                     s.layer, s.rank, cur_step, cur_micro, res.events);
        AbftCheck chk = check_product(a, b, c, u);
        Cell& cell = cells[{s.layer, s.op}];
        ++cell.checks;
        ++res.checks;
        if (chk.flagged) {
            ++cell.flags;
            ++res.flags;
        }
        cell.max_lhs = std::max(cell.max_lhs, chk.lhs);
        cell.max_rhs = std::max(cell.max_rhs, chk.rhs);
        return c;
    };

    for (int64_t step = 0; step < o.steps; ++step) {
        cur_step = step;
        cells.clear();
        auto g = zeros_like_params<float>(o.model);
        for (int64_t micro = 0; micro < o.model.grad_accum; ++micro) {
            cur_micro = micro;
            auto toks = token_batch(o, step, micro);
            ModelRun<float> run(o.model, params, nullptr, mm);
            run.forward(toks, step, micro);
            run.backward(g);
        }
        for (const auto& [key, cell] : cells)
            csv.row({sdclab::cell(step), sdclab::cell(key.first), key.second,
                     sdclab::cell(cell.checks), sdclab::cell(cell.flags), sdclab::cell(cell.max_lhs),
                     sdclab::cell(cell.max_rhs)});
        detail::scale_params(g, 1.0f / static_cast<float>(o.model.grad_accum));
        adam_step(params, g, st, o.opt, lr_at(o.opt, step, o.steps));
    }
    detail::write_events_csv(o.out_dir + "/events.csv", res.events);
    res.event_count = static_cast<int64_t>(res.events.size());
    return res;
}

}  // namespace sdclab
