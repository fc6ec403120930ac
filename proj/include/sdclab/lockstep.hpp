#pragma once

// Paired healthy/unhealthy training runners and mismatch metrics.
//
// run_rq1: lock-step containment — the unhealthy node's hook tensors are
//   corrupted, compared against the healthy capture, then overwritten with the
//   healthy values before the following reduce-scatter.
// run_rq2: free-running unhealthy forward/backward; gradient mismatch is
//   measured per step and healthy parameters are broadcast afterwards.
// run_rq3: two fully independent trajectories; measures parameter drift.
// run_shadow: duplicate gradient computation on one node with bitwise
//   comparison as the detection signal.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "sdclab/collectives.hpp"
#include "sdclab/inject.hpp"
#include "sdclab/model.hpp"

namespace sdclab {

// ---------------------------------------------------------------------------
// CSV output. Numbers are printed with the shortest decimal form that parses
// back to the identical bit pattern, so exported data is lossless.

inline std::string format_number(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline std::string format_number(float v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

class CsvWriter {
public:
    CsvWriter(const std::string& path, const std::vector<std::string>& columns) : out_(path) {
        if (!out_) throw ContractViolation("cannot open csv file " + path);
        for (size_t i = 0; i < columns.size(); ++i) {
            if (i) out_ << ',';
            out_ << columns[i];
        }
        out_ << '\n';
        ncols_ = columns.size();
    }

    void row(const std::vector<std::string>& cells) {
        if (cells.size() != ncols_) throw ContractViolation("csv row width mismatch");
        for (size_t i = 0; i < cells.size(); ++i) {
            if (i) out_ << ',';
            out_ << cells[i];
        }
        out_ << '\n';
    }

private:
    std::ofstream out_;
    size_t ncols_;
};

inline std::string cell(int64_t v) { return std::to_string(v); }
inline std::string cell(int v) { return std::to_string(v); }
inline std::string cell(double v) { return format_number(v); }
inline std::string cell(const std::string& v) { return v; }

// ---------------------------------------------------------------------------
// Mismatch metrics between a reference tensor f and its corrupted copy f'.

struct MismatchStats {
    int64_t elements = 0;    // elements compared
    int64_t mismatches = 0;  // bitwise-differing elements
    double severity = 0.0;   // mean of |f'-f|/|f| over mismatched positions with f != 0
    int64_t zero_reference = 0;  // positions with f == 0 but f' != 0
};

/// Bitwise mismatch count plus relative-magnitude severity. Severity averages
/// the relative deviation over positions that actually differ and have a
/// nonzero reference; positions where the reference is zero but the corrupted
/// value is not are tallied separately since no relative error exists there.
inline MismatchStats compare_pair(const Tensor& f, const Tensor& fp) {
    if (!f.same_shape(fp)) throw ContractViolation("compare_pair shape mismatch");
    MismatchStats s;
    s.elements = f.size();
    double sev_sum = 0.0;
    int64_t sev_n = 0;
    for (int64_t i = 0; i < f.size(); ++i) {
        const float a = f.at(i), b = fp.at(i);
        if (std::memcmp(&a, &b, sizeof(float)) == 0) continue;
        ++s.mismatches;
        if (a == 0.0f) {
            ++s.zero_reference;
        } else {
            sev_sum += std::abs(static_cast<double>(b) - static_cast<double>(a)) /
                       std::abs(static_cast<double>(a));
            ++sev_n;
        }
    }
    if (sev_n > 0) s.severity = sev_sum / static_cast<double>(sev_n);
    return s;
}

/// Per-layer aggregate across tensor-parallel ranks: frequency normalizes the
/// total mismatch count by the full boundary size, severity takes the maximum
/// over ranks.
struct LayerAggregate {
    double freq = 0.0;
    double sev = 0.0;
    int64_t zero_reference = 0;
};

inline LayerAggregate aggregate_ranks(const std::vector<MismatchStats>& per_rank) {
    LayerAggregate a;
    int64_t mis = 0, total = 0;
    for (const auto& s : per_rank) {
        mis += s.mismatches;
        total += s.elements;
        a.sev = std::max(a.sev, s.severity);
        a.zero_reference += s.zero_reference;
    }
    if (total > 0) a.freq = static_cast<double>(mis) / static_cast<double>(total);
    return a;
}

/// Site-level aggregate: frequency is the mean over layers, severity the max.
inline LayerAggregate aggregate_layers(const std::vector<LayerAggregate>& per_layer) {
    LayerAggregate a;
    for (const auto& l : per_layer) {
        a.freq += l.freq;
        a.sev = std::max(a.sev, l.sev);
        a.zero_reference += l.zero_reference;
    }
    if (!per_layer.empty()) a.freq /= static_cast<double>(per_layer.size());
    return a;
}

/// Worst-case norm-to-signal: running maximum of the relative gradient
/// mismatch ratio.
inline double wcnts(const std::vector<double>& ratios) {
    double m = 0.0;
    for (double r : ratios) m = std::max(m, r);
    return m;
}

// ---------------------------------------------------------------------------
// Shared run plumbing.

struct RunOptions {
    ModelConfig model;
    OptimizerConfig opt;
    SdcProfile profile;
    int64_t steps = 200;
    uint64_t seed = 0;
    std::string out_dir = ".";
    std::vector<int64_t> snapshot_steps;
};

inline Site hook_site(HookKind k) {
    switch (k) {
        case HookKind::fwd_attn: return Site::fwd_attn;
        case HookKind::fwd_ffn: return Site::fwd_ffn;
        case HookKind::bwd_attn: return Site::bwd_attn;
        case HookKind::bwd_ffn: return Site::bwd_ffn;
    }
    throw ContractViolation("bad hook kind");
}

/// Deterministic token at (step, microstep, sample, position); both nodes draw
/// from the same stream.
inline int token_at(uint64_t seed, int64_t step, int64_t micro, int sample, int pos, int vocab) {
    uint64_t k = hash_combine(seed, 0x70C0FFEEull);
    k = hash_combine(k, static_cast<uint64_t>(step) * 1000003ull + static_cast<uint64_t>(micro));
    k = hash_combine(k, static_cast<uint64_t>(sample) * 65537ull + static_cast<uint64_t>(pos));
    return static_cast<int>(mix64(k) % static_cast<uint64_t>(vocab));
}

inline std::vector<std::vector<int>> token_batch(const RunOptions& o, int64_t step, int64_t micro) {
    std::vector<std::vector<int>> out(static_cast<size_t>(o.model.micro_batch));
    for (int b = 0; b < o.model.micro_batch; ++b) {
        out[static_cast<size_t>(b)].resize(static_cast<size_t>(o.model.seq_len));
        for (int pos = 0; pos < o.model.seq_len; ++pos)
            out[static_cast<size_t>(b)][static_cast<size_t>(pos)] =
                token_at(o.seed, step, micro, b, pos, o.model.vocab);
    }
    return out;
}

namespace detail {

template <typename T>
double grad_sq_norm(const ParamsT<T>& g) {
    double sq = 0.0;
    g.for_each([&](const std::string&, const TensorT<T>& t) {
        for (int64_t i = 0; i < t.size(); ++i) {
            const double v = static_cast<double>(t.at(i));
            sq += v * v;
        }
    });
    return sq;
}

template <typename T>
void scale_params(ParamsT<T>& g, T s) {
    g.for_each([&](const std::string&, TensorT<T>& t) {
        for (int64_t i = 0; i < t.size(); ++i) t.at(i) *= s;
    });
}

template <typename T>
double param_diff_l2(const ParamsT<T>& a, const ParamsT<T>& b) {
    std::vector<const TensorT<T>*> pa, pb;
    a.for_each([&](const std::string&, const TensorT<T>& t) { pa.push_back(&t); });
    b.for_each([&](const std::string&, const TensorT<T>& t) { pb.push_back(&t); });
    double sq = 0.0;
    for (size_t k = 0; k < pa.size(); ++k)
        for (int64_t i = 0; i < pa[k]->size(); ++i) {
            const double d =
                static_cast<double>(pa[k]->at(i)) - static_cast<double>(pb[k]->at(i));
            sq += d * d;
        }
    return std::sqrt(sq);
}

inline void write_events_csv(const std::string& path, const std::vector<FaultEvent>& events) {
    CsvWriter w(path, {"step", "microstep", "site", "layer", "rank", "index", "factor"});
    for (const auto& e : events)
        w.row({cell(e.step), cell(e.microstep), std::string(site_name(e.site)), cell(e.layer),
               cell(e.rank), cell(e.index), cell(e.factor)});
}

inline uint64_t op_hash(const char* op) {
    uint64_t h = 1469598103934665603ull;
    for (const char* p = op; *p; ++p) h = (h ^ static_cast<uint64_t>(*p)) * 1099511628211ull;
    return h;
}

/// Matmul wrapper that corrupts finished accumulator values on the targeted
/// ranks. Only the linear-layer products routed through MatmulFn are eligible.
inline MatmulFn<float> injected_matmul(const SdcProfile& profile, const int64_t* step,
                                       const int64_t* micro, std::vector<FaultEvent>* events) {
    return [&profile, step, micro, events](const Tensor& a, const Tensor& b,
                                           const MatmulSite& s) -> Tensor {
        Tensor c = plain_matmul(a, b, s);
        if (profile.has_site(Site::matmul_internal) && profile.affects_rank(s.rank))
            corrupt_elements(c, profile, Site::matmul_internal, op_hash(s.op), s.layer, s.rank,
                             *step, *micro, *events);
        return c;
    };
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Runner results (fed into the run manifest and the acceptance tests).

struct RunResult {
    int64_t steps_completed = 0;
    int64_t event_count = 0;
    double final_wcnts = 0.0;
    double final_param_diff = 0.0;
    bool unhealthy_failed = false;
    int64_t unhealthy_failed_step = -1;
    std::vector<FaultEvent> events;
    std::vector<int64_t> alarm_steps;  // shadow runner only
};

/// RQ1: lock-step execution with compare-and-overwrite at every submodule
/// boundary. Mismatch statistics are recorded per (step, microstep, site) with
/// a per-layer companion file; the healthy values always win, so both nodes'
/// parameters stay bit-identical.
inline RunResult run_rq1(const RunOptions& o) {
    o.model.validate();
    o.profile.validate();
    std::filesystem::create_directories(o.out_dir);
    ParamsT<float> healthy = init_params<float>(o.model, o.seed);
    ParamsT<float> unhealthy = healthy;
    AdamStateT<float> sh = make_adam_state<float>(o.model);
    AdamStateT<float> su = make_adam_state<float>(o.model);

    CsvWriter sites_csv(o.out_dir + "/rq1.csv",
                        {"step", "microstep", "site", "freq", "sev", "zero_ref_count"});
    CsvWriter layers_csv(o.out_dir + "/rq1_layers.csv",
                         {"step", "microstep", "site", "layer", "freq", "sev", "zero_ref_count"});
    RunResult res;

    const int sites_n = 4;
    const Site all_sites[4] = {Site::fwd_attn, Site::fwd_ffn, Site::bwd_attn, Site::bwd_ffn};

    for (int64_t step = 0; step < o.steps; ++step) {
        auto gh = zeros_like_params<float>(o.model);
        auto gu = zeros_like_params<float>(o.model);
        for (int64_t micro = 0; micro < o.model.grad_accum; ++micro) {
            auto toks = token_batch(o, step, micro);

            // Healthy pass, capturing every hook tensor in firing order.
            std::vector<Tensor> captured;
            ModelRun<float> hrun(o.model, healthy,
                                 [&](const HookSite&, Tensor& t) { captured.push_back(t); });
            hrun.forward(toks, step, micro);
            hrun.backward(gh);

            // Unhealthy pass: inject, measure against the healthy capture,
            // then overwrite with the healthy tensor.
            // stats[site][layer][rank]
            std::vector<std::vector<std::vector<MismatchStats>>> stats(
                sites_n, std::vector<std::vector<MismatchStats>>(
                             static_cast<size_t>(o.model.layers),
                             std::vector<MismatchStats>(static_cast<size_t>(o.model.tp_degree))));
            size_t idx = 0;
            ModelRun<float> urun(o.model, unhealthy, [&](const HookSite& hs, Tensor& t) {
                if (idx >= captured.size()) throw ContractViolation("hook firing order diverged");
                const Tensor& ref = captured[idx++];
                auto ev = corrupt(t, o.profile, hook_site(hs.kind), hs.layer, hs.rank, step, micro);
                for (auto& e : ev) res.events.push_back(e);
                stats[static_cast<size_t>(hook_site(hs.kind))][static_cast<size_t>(hs.layer)]
                     [static_cast<size_t>(hs.rank)] = compare_pair(ref, t);
                t = ref;
            });
            urun.forward(toks, step, micro);
            urun.backward(gu);
            if (idx != captured.size()) throw ContractViolation("hook firing count diverged");

            for (int s = 0; s < sites_n; ++s) {
                std::vector<LayerAggregate> per_layer;
                for (int l = 0; l < o.model.layers; ++l) {
                    LayerAggregate la = aggregate_ranks(stats[static_cast<size_t>(s)]
                                                             [static_cast<size_t>(l)]);
                    per_layer.push_back(la);
                    layers_csv.row({cell(step), cell(micro), std::string(site_name(all_sites[s])),
                                    cell(l), cell(la.freq), cell(la.sev),
                                    cell(la.zero_reference)});
                }
                LayerAggregate sa = aggregate_layers(per_layer);
                sites_csv.row({cell(step), cell(micro), std::string(site_name(all_sites[s])),
                               cell(sa.freq), cell(sa.sev), cell(sa.zero_reference)});
            }
        }
        const float inv_ga = 1.0f / static_cast<float>(o.model.grad_accum);
        detail::scale_params(gh, inv_ga);
        detail::scale_params(gu, inv_ga);
        const double lr = lr_at(o.opt, step, o.steps);
        adam_step(healthy, gh, sh, o.opt, lr);
        adam_step(unhealthy, gu, su, o.opt, lr);
        for (int64_t snap : o.snapshot_steps)
            if (snap == step + 1) {
                save_params(healthy, o.out_dir + "/params_healthy_step" + std::to_string(snap));
                save_params(unhealthy, o.out_dir + "/params_unhealthy_step" + std::to_string(snap));
            }
        res.steps_completed = step + 1;
    }
    detail::write_events_csv(o.out_dir + "/events.csv", res.events);
    res.event_count = static_cast<int64_t>(res.events.size());
    res.final_param_diff = detail::param_diff_l2(healthy, unhealthy);
    return res;
}

/// RQ2: the unhealthy node computes freely corrupted gradients each step; the
/// relative gradient mismatch is recorded and healthy parameters are broadcast
/// afterwards, which is verified bitwise.
inline RunResult run_rq2(const RunOptions& o) {
    o.model.validate();
    o.profile.validate();
    std::filesystem::create_directories(o.out_dir);
    ParamsT<float> healthy = init_params<float>(o.model, o.seed);
    ParamsT<float> unhealthy = healthy;
    AdamStateT<float> sh = make_adam_state<float>(o.model);

    CsvWriter csv(o.out_dir + "/rq2.csv", {"step", "diff_l2", "truth_l2", "ratio", "wcnts"});
    RunResult res;
    int64_t cur_step = 0, cur_micro = 0;
    auto mm = detail::injected_matmul(o.profile, &cur_step, &cur_micro, &res.events);
    double wc = 0.0;

    for (int64_t step = 0; step < o.steps; ++step) {
        cur_step = step;
        auto gh = zeros_like_params<float>(o.model);
        auto gu = zeros_like_params<float>(o.model);
        for (int64_t micro = 0; micro < o.model.grad_accum; ++micro) {
            cur_micro = micro;
            auto toks = token_batch(o, step, micro);
            ModelRun<float> hrun(o.model, healthy);
            hrun.forward(toks, step, micro);
            hrun.backward(gh);
            ModelRun<float> urun(
                o.model, unhealthy,
                [&](const HookSite& hs, Tensor& t) {
                    auto ev =
                        corrupt(t, o.profile, hook_site(hs.kind), hs.layer, hs.rank, step, micro);
                    for (auto& e : ev) res.events.push_back(e);
                },
                mm);
            urun.forward(toks, step, micro);
            urun.backward(gu);
        }
        const float inv_ga = 1.0f / static_cast<float>(o.model.grad_accum);
        detail::scale_params(gh, inv_ga);
        detail::scale_params(gu, inv_ga);
        const double truth = std::sqrt(detail::grad_sq_norm(gh));
        double diff_sq = 0.0;
        {
            std::vector<const Tensor*> a, b;
            gh.for_each([&](const std::string&, const Tensor& t) { a.push_back(&t); });
            gu.for_each([&](const std::string&, const Tensor& t) { b.push_back(&t); });
            for (size_t k = 0; k < a.size(); ++k)
                for (int64_t i = 0; i < a[k]->size(); ++i) {
                    const double d = static_cast<double>(b[k]->at(i)) -
                                     static_cast<double>(a[k]->at(i));
                    diff_sq += d * d;
                }
        }
        const double diff = std::sqrt(diff_sq);
        const double ratio = diff == 0.0 ? 0.0 : diff / truth;
        wc = std::max(wc, ratio);
        csv.row({cell(step), cell(diff), cell(truth), cell(ratio), cell(wc)});

        adam_step(healthy, gh, sh, o.opt, lr_at(o.opt, step, o.steps));
        // Parameter synchronization: healthy wins.
        std::vector<Tensor*> targets;
        unhealthy.for_each([&](const std::string&, Tensor& t) { targets.push_back(&t); });
        std::vector<const Tensor*> sources;
        healthy.for_each([&](const std::string&, const Tensor& t) { sources.push_back(&t); });
        for (size_t k = 0; k < targets.size(); ++k)
            collectives::broadcast(*sources[k], {targets[k]});
        for (size_t k = 0; k < targets.size(); ++k)
            if (!targets[k]->bit_equal(*sources[k]))
                throw ContractViolation("broadcast left parameters unequal");
        res.steps_completed = step + 1;
    }
    detail::write_events_csv(o.out_dir + "/events.csv", res.events);
    res.event_count = static_cast<int64_t>(res.events.size());
    res.final_wcnts = wc;
    res.final_param_diff = detail::param_diff_l2(healthy, unhealthy);
    return res;
}

/// RQ3: two fully independent trajectories with no protection. If the
/// unhealthy node hits a numerical failure its trajectory terminates and the
/// failure step is reported in the result.
inline RunResult run_rq3(const RunOptions& o) {
    o.model.validate();
    o.profile.validate();
    std::filesystem::create_directories(o.out_dir);
    ParamsT<float> healthy = init_params<float>(o.model, o.seed);
    ParamsT<float> unhealthy = healthy;
    AdamStateT<float> sh = make_adam_state<float>(o.model);
    AdamStateT<float> su = make_adam_state<float>(o.model);

    CsvWriter csv(o.out_dir + "/rq3.csv",
                  {"step", "param_diff_l2", "loss_healthy", "loss_unhealthy", "gnorm_healthy",
                   "gnorm_unhealthy"});
    RunResult res;
    int64_t cur_step = 0, cur_micro = 0;
    auto mm = detail::injected_matmul(o.profile, &cur_step, &cur_micro, &res.events);

    for (int64_t step = 0; step < o.steps; ++step) {
        cur_step = step;
        auto gh = zeros_like_params<float>(o.model);
        auto gu = zeros_like_params<float>(o.model);
        double loss_h = 0.0, loss_u = 0.0;
        bool u_failed = false;
        for (int64_t micro = 0; micro < o.model.grad_accum; ++micro) {
            cur_micro = micro;
            auto toks = token_batch(o, step, micro);
            ModelRun<float> hrun(o.model, healthy);
            loss_h += hrun.forward(toks, step, micro);
            hrun.backward(gh);
            if (u_failed) continue;
            try {
                ModelRun<float> urun(
                    o.model, unhealthy,
                    [&](const HookSite& hs, Tensor& t) {
                        auto ev = corrupt(t, o.profile, hook_site(hs.kind), hs.layer, hs.rank,
                                          step, micro);
                        for (auto& e : ev) res.events.push_back(e);
                    },
                    mm);
                loss_u += urun.forward(toks, step, micro);
                urun.backward(gu);
            } catch (const NumericalFailure&) {
                u_failed = true;
            }
        }
        const float inv_ga = 1.0f / static_cast<float>(o.model.grad_accum);
        detail::scale_params(gh, inv_ga);
        loss_h /= static_cast<double>(o.model.grad_accum);
        const double gnorm_h = std::sqrt(detail::grad_sq_norm(gh));
        const double lr = lr_at(o.opt, step, o.steps);
        double gnorm_u = 0.0;
        if (!res.unhealthy_failed && !u_failed) {
            detail::scale_params(gu, inv_ga);
            loss_u /= static_cast<double>(o.model.grad_accum);
            gnorm_u = std::sqrt(detail::grad_sq_norm(gu));
            try {
                adam_step(unhealthy, gu, su, o.opt, lr);
            } catch (const NumericalFailure&) {
                u_failed = true;
            }
        }
        if (u_failed && !res.unhealthy_failed) {
            res.unhealthy_failed = true;
            res.unhealthy_failed_step = step;
        }
        adam_step(healthy, gh, sh, o.opt, lr);
        const double drift = detail::param_diff_l2(healthy, unhealthy);
        csv.row({cell(step), cell(drift), cell(loss_h),
                 cell(res.unhealthy_failed ? std::nan("") : loss_u), cell(gnorm_h),
                 cell(res.unhealthy_failed ? std::nan("") : gnorm_u)});
        res.final_param_diff = drift;
        res.steps_completed = step + 1;
        for (int64_t snap : o.snapshot_steps)
            if (snap == step + 1) {
                save_params(healthy, o.out_dir + "/params_healthy_step" + std::to_string(snap));
                save_params(unhealthy, o.out_dir + "/params_unhealthy_step" + std::to_string(snap));
            }
    }
    detail::write_events_csv(o.out_dir + "/events.csv", res.events);
    res.event_count = static_cast<int64_t>(res.events.size());
    return res;
}

/// Shadow replica: every step the gradient is computed twice on one parameter
/// set — once clean, once through the fault injector — and compared bitwise
/// tensor by tensor. Any difference raises the alarm; the clean gradient is
/// the one applied.
inline RunResult run_shadow(const RunOptions& o) {
    o.model.validate();
    o.profile.validate();
    std::filesystem::create_directories(o.out_dir);
    ParamsT<float> params = init_params<float>(o.model, o.seed);
    AdamStateT<float> st = make_adam_state<float>(o.model);

    CsvWriter csv(o.out_dir + "/shadow.csv", {"step", "alarm", "first_diff_tensor"});
    RunResult res;

    for (int64_t step = 0; step < o.steps; ++step) {
        auto gc = zeros_like_params<float>(o.model);
        auto gs = zeros_like_params<float>(o.model);
        for (int64_t micro = 0; micro < o.model.grad_accum; ++micro) {
            auto toks = token_batch(o, step, micro);
            ModelRun<float> clean(o.model, params);
            clean.forward(toks, step, micro);
            clean.backward(gc);
            ModelRun<float> shadow(o.model, params, [&](const HookSite& hs, Tensor& t) {
                auto ev =
                    corrupt(t, o.profile, hook_site(hs.kind), hs.layer, hs.rank, step, micro);
                for (auto& e : ev) res.events.push_back(e);
            });
            shadow.forward(toks, step, micro);
            shadow.backward(gs);
        }
        std::string first_diff;
        gc.for_each([&](const std::string& name, const Tensor& t) {
            if (!first_diff.empty()) return;
            const Tensor* other = nullptr;
            gs.for_each([&](const std::string& n2, const Tensor& t2) {
                if (n2 == name) other = &t2;
            });
            if (!t.bit_equal(*other)) first_diff = name;
        });
        const int alarm = first_diff.empty() ? 0 : 1;
        if (alarm) res.alarm_steps.push_back(step);
        csv.row({cell(step), cell(alarm), first_diff});
        const float inv_ga = 1.0f / static_cast<float>(o.model.grad_accum);
        detail::scale_params(gc, inv_ga);
        adam_step(params, gc, st, o.opt, lr_at(o.opt, step, o.steps));
        res.steps_completed = step + 1;
    }
    detail::write_events_csv(o.out_dir + "/events.csv", res.events);
    res.event_count = static_cast<int64_t>(res.events.size());
    return res;
}

}  // namespace sdclab
