#pragma once

// Protocol dispatch plus the two diagnostic protocols (gradcheck, calibrate)
// and the plot-data exporter.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "sdclab/abft.hpp"
#include "sdclab/config.hpp"
#include "sdclab/inject.hpp"
#include "sdclab/lockstep.hpp"
#include "sdclab/model.hpp"

namespace sdclab {

// ---------------------------------------------------------------------------
// Gradient check: the identical computation graph instantiated at double
// precision, compared against central finite differences parameter by
// parameter. Double keeps finite-difference truncation far below the 1e-2
// acceptance bound; the graph itself is the one the f32 run executes.

struct GradcheckResult {
    double max_rel = 0.0;
    std::string worst_param;
    int64_t params_checked = 0;
};

inline GradcheckResult run_gradcheck(const RunOptions& o) {
    o.model.validate();
    auto params = init_params<double>(o.model, o.seed);
    auto toks = token_batch(o, 0, 0);
    ModelRun<double> run(o.model, params);
    run.forward(toks);
    auto analytic = zeros_like_params<double>(o.model);
    run.backward(analytic);

    std::vector<std::pair<std::string, TensorT<double>*>> ps, gs;
    params.for_each([&](const std::string& n, TensorT<double>& t) { ps.push_back({n, &t}); });
    analytic.for_each([&](const std::string& n, TensorT<double>& t) { gs.push_back({n, &t}); });

    GradcheckResult res;
    for (size_t k = 0; k < ps.size(); ++k) {
        TensorT<double>& theta = *ps[k].second;
        for (int64_t i = 0; i < theta.size(); ++i) {
            const double orig = theta.at(i);
            const double h = 1e-5 * std::max(1.0, std::abs(orig));
            theta.at(i) = orig + h;
            ModelRun<double> rp(o.model, params);
            const double lp = rp.forward(toks);
            theta.at(i) = orig - h;
            ModelRun<double> rm(o.model, params);
            const double lm = rm.forward(toks);
            theta.at(i) = orig;
            const double numeric = (lp - lm) / (2.0 * h);
            const double a = gs[k].second->at(i);
            const double rel =
                std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
            if (rel > res.max_rel) {
                res.max_rel = rel;
                res.worst_param = ps[k].first;
            }
            ++res.params_checked;
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// Calibration: drive the injector over synthetic all-ones boundary tensors for
// a fixed number of active microsteps and compare the observed corrupted
// fraction against the configured effective rate's 99% binomial confidence
// interval. For non-constant temporal patterns only steps where the pattern is
// at its steady/burst rate are measured.

struct CalibrateResult {
    double expected_rate = 0.0;
    double measured_rate = 0.0;
    int64_t elements = 0;
    int64_t corrupted = 0;
    double ci_lo = 0.0, ci_hi = 0.0;
    bool pass = false;
    int64_t microsteps = 0;
};

inline CalibrateResult run_calibrate(const RunOptions& o, int64_t target_microsteps = 100) {
    o.model.validate();
    o.profile.validate();
    CalibrateResult res;
    switch (o.profile.temporal.kind) {
        case Temporal::Kind::constant: res.expected_rate = o.profile.rate; break;
        case Temporal::Kind::initial_spike: res.expected_rate = o.profile.temporal.p_lo; break;
        case Temporal::Kind::rare_burst: res.expected_rate = o.profile.temporal.p_burst; break;
    }
    const int64_t start_step = o.profile.temporal.kind == Temporal::Kind::initial_spike
                                   ? o.profile.temporal.spike_steps
                                   : 0;
    const int64_t rows = static_cast<int64_t>(o.model.micro_batch) * o.model.seq_len;
    std::vector<int> ranks = o.profile.affected_ranks;
    if (ranks.empty())
        for (int r = 0; r < o.model.tp_degree; ++r) ranks.push_back(r);

    int64_t step = start_step;
    const int64_t step_limit = start_step + 1000000;
    while (res.microsteps < target_microsteps && step < step_limit) {
        if (temporal_rate(o.profile, step) != res.expected_rate || res.expected_rate <= 0.0) {
            // skip spike/quiet steps; they are calibrated against a different rate
            if (res.expected_rate <= 0.0) break;
            ++step;
            continue;
        }
        for (int64_t micro = 0; micro < o.model.grad_accum && res.microsteps < target_microsteps;
             ++micro, ++res.microsteps) {
            for (Site site : o.profile.sites) {
                for (int l = 0; l < o.model.layers; ++l) {
                    for (int r : ranks) {
                        Tensor t = Tensor::full({rows, static_cast<int64_t>(o.model.hidden)}, 1.0f);
                        std::vector<FaultEvent> ev;
                        detail::corrupt_elements(t, o.profile, site, 0, l, r, step, micro, ev);
                        res.elements += t.size();
                        res.corrupted += static_cast<int64_t>(ev.size());
                    }
                }
            }
        }
        ++step;
    }
    if (res.elements > 0)
        res.measured_rate = static_cast<double>(res.corrupted) / static_cast<double>(res.elements);
    const double p = res.expected_rate;
    const double half =
        2.5758 * std::sqrt(p * (1.0 - p) / std::max<double>(1.0, static_cast<double>(res.elements)));
    res.ci_lo = p - half;
    res.ci_hi = p + half;
    res.pass = res.elements > 0 && res.measured_rate >= res.ci_lo && res.measured_rate <= res.ci_hi;
    return res;
}

// ---------------------------------------------------------------------------
// Plot-data export: merge the metric CSVs of a completed run into one tidy
// (step, series, value) table. Numeric tokens are copied verbatim so values
// survive the round trip bit-exactly.

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace detail

inline int64_t export_plotdata(const std::string& run_dir, const std::string& out_path) {
    struct Source {
        const char* file;
        std::vector<int> key_cols;    // columns folded into the series name
        std::vector<int> value_cols;  // numeric columns exported
    };
    // rq1: key = site; rq3/rq2: plain columns; abft: key = (layer, site).
    const std::vector<Source> sources = {
        {"rq1.csv", {2}, {3, 4, 5}},       {"rq2.csv", {}, {1, 2, 3, 4}},
        {"rq3.csv", {}, {1, 2, 3, 4, 5}},  {"shadow.csv", {}, {1}},
        {"abft.csv", {2, 1}, {3, 4, 5, 6}},
    };
    int64_t rows = 0;
    std::ofstream out(out_path);
    if (!out) throw ContractViolation("cannot write " + out_path);
    out << "step,series,value\n";
    bool any = false;
    for (const auto& src : sources) {
        const std::string path = run_dir + "/" + src.file;
        std::ifstream in(path);
        if (!in) continue;
        any = true;
        std::string line;
        if (!std::getline(in, line)) continue;
        const auto header = detail::split_csv_line(line);
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const auto cells = detail::split_csv_line(line);
            std::string prefix;
            for (int k : src.key_cols) prefix += cells.at(static_cast<size_t>(k)) + ".";
            for (int v : src.value_cols) {
                out << cells.at(0) << ',' << prefix << header.at(static_cast<size_t>(v)) << ','
                    << cells.at(static_cast<size_t>(v)) << '\n';
                ++rows;
            }
        }
    }
    if (!any) throw ContractViolation("no metric csv files found in " + run_dir);
    return rows;
}

// ---------------------------------------------------------------------------
// Dispatch. Returns the process exit code per the contract: 0 success,
// 1 config error (raised by the caller during parsing), 2 invariant violation,
// 3 numerical failure.

inline int run_protocol(const std::string& protocol, const RunConfig& cfg, std::string* summary) {
    Manifest man;
    man.config = cfg;
    man.protocol = protocol;
    man.start_time = iso_timestamp();
    std::filesystem::create_directories(cfg.out_dir);
    const std::string man_path = cfg.out_dir + "/manifest.json";
    std::ostringstream msg;
    int code = 0;
    try {
        RunOptions o = cfg.options();
        if (protocol == "rq1") {
            RunResult r = run_rq1(o);
            man.extra["events"] = r.event_count;
            man.extra["final_param_diff"] = r.final_param_diff;
            msg << "rq1: steps=" << r.steps_completed << " events=" << r.event_count
                << " final_param_diff=" << format_number(r.final_param_diff);
        } else if (protocol == "rq2") {
            RunResult r = run_rq2(o);
            man.extra["events"] = r.event_count;
            man.extra["wcnts"] = r.final_wcnts;
            msg << "rq2: steps=" << r.steps_completed << " events=" << r.event_count
                << " wcnts=" << format_number(r.final_wcnts);
        } else if (protocol == "rq3") {
            RunResult r = run_rq3(o);
            man.extra["events"] = r.event_count;
            man.extra["final_param_diff"] = r.final_param_diff;
            man.extra["unhealthy_failed"] = r.unhealthy_failed;
            if (r.unhealthy_failed) man.extra["unhealthy_failed_step"] = r.unhealthy_failed_step;
            msg << "rq3: steps=" << r.steps_completed << " events=" << r.event_count
                << " final_param_diff=" << format_number(r.final_param_diff);
            if (r.unhealthy_failed)
                msg << " unhealthy_failed_step=" << r.unhealthy_failed_step;
        } else if (protocol == "shadow") {
            RunResult r = run_shadow(o);
            man.extra["events"] = r.event_count;
            man.extra["alarms"] = r.alarm_steps.size();
            msg << "shadow: steps=" << r.steps_completed << " events=" << r.event_count
                << " alarms=" << r.alarm_steps.size();
        } else if (protocol == "abft") {
            AbftRunResult r = run_abft(o, cfg.abft_precision, cfg.abft_classical_u);
            man.extra["checks"] = r.checks;
            man.extra["flags"] = r.flags;
            man.extra["events"] = r.event_count;
            msg << "abft: checks=" << r.checks << " flags=" << r.flags
                << " events=" << r.event_count;
        } else if (protocol == "gradcheck") {
            GradcheckResult r = run_gradcheck(o);
            man.extra["max_rel_error"] = r.max_rel;
            man.extra["worst_param"] = r.worst_param;
            man.extra["params_checked"] = r.params_checked;
            msg << "gradcheck: max_rel_error=" << format_number(r.max_rel)
                << " worst_param=" << r.worst_param << " params_checked=" << r.params_checked;
            if (r.max_rel > 1e-2) {
                man.status = "failed";
                code = 3;
            }
        } else if (protocol == "calibrate") {
            CalibrateResult r = run_calibrate(o);
            man.extra["expected_rate"] = r.expected_rate;
            man.extra["measured_rate"] = r.measured_rate;
            man.extra["elements"] = r.elements;
            man.extra["pass"] = r.pass;
            msg << "calibrate: expected=" << format_number(r.expected_rate)
                << " measured=" << format_number(r.measured_rate) << " n=" << r.elements
                << " ci=[" << format_number(r.ci_lo) << "," << format_number(r.ci_hi) << "]"
                << (r.pass ? " pass" : " FAIL");
            if (!r.pass) {
                man.status = "failed";
                code = 2;
            }
        } else {
            throw ContractViolation("unknown protocol: " + protocol);
        }
        if (code == 0) man.status = "ok";
    } catch (const NumericalFailure& e) {
        man.status = "numerical_failure";
        msg << "numerical failure: " << e.what();
        code = 3;
    } catch (const ContractViolation& e) {
        man.status = "invariant_violation";
        msg << "invariant violation: " << e.what();
        code = 2;
    }
    man.end_time = iso_timestamp();
    man.write(man_path);
    if (summary) *summary = msg.str();
    return code;
}

}  // namespace sdclab
