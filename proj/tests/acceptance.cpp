// Acceptance gate: one printed pass/fail line per criterion. Exit code is the
// number of failed criteria.

#include <charconv>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sdclab/abft.hpp"
#include "sdclab/config.hpp"
#include "sdclab/lockstep.hpp"
#include "sdclab/runner.hpp"

using namespace sdclab;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(int criterion, bool pass, const std::string& detail) {
    std::printf("criterion %2d: %s — %s\n", criterion, pass ? "PASS" : "FAIL", detail.c_str());
    std::fflush(stdout);
    if (!pass) ++failures;
}

fs::path work_dir(const std::string& name) {
    fs::path d = fs::temp_directory_path() / "sdclab_acceptance" / name;
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
    std::ifstream in(path);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.push_back("");
        rows.push_back(cells);
    }
    return rows;
}

double parse_double(const std::string& s) {
    double v = 0.0;
    std::from_chars(s.data(), s.data() + s.size(), v);
    return v;
}

RunOptions desk_options(const fs::path& out, int64_t steps) {
    RunOptions o;
    o.model = ModelConfig{};  // desk-scale defaults
    o.profile = preset_profile("none");
    o.steps = steps;
    o.seed = 2024;
    o.out_dir = out.string();
    return o;
}

ModelConfig small_model() {
    ModelConfig c;
    c.layers = 2;
    c.hidden = 16;
    c.heads = 4;
    c.kv_heads = 2;
    c.seq_len = 8;
    c.vocab = 16;
    c.tp_degree = 2;
    c.micro_batch = 1;
    c.grad_accum = 2;
    return c;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Independent scalar reference for the mismatch metrics (criteria 4 and 5):
// straight-line code over flat arrays, no shared helpers beyond raw access.
struct BruteStats {
    long long mismatches = 0;
    long long zero_ref = 0;
    double severity = 0.0;
};

BruteStats brute_force_stats(const Tensor& ref, const Tensor& cor) {
    BruteStats b;
    double acc = 0.0;
    long long n = 0;
    for (long long i = 0; i < ref.size(); ++i) {
        unsigned int ba, bb;
        float fa = ref.at(i), fb = cor.at(i);
        std::memcpy(&ba, &fa, 4);
        std::memcpy(&bb, &fb, 4);
        if (ba == bb) continue;
        b.mismatches += 1;
        if (fa == 0.0f) {
            b.zero_ref += 1;
        } else {
            double d = (double)fb - (double)fa;
            if (d < 0) d = -d;
            double m = (double)fa;
            if (m < 0) m = -m;
            acc += d / m;
            n += 1;
        }
    }
    if (n > 0) b.severity = acc / (double)n;
    return b;
}

}  // namespace

int main() {
    // ---- criterion 1: determinism of rq3 at desk scale, 200 steps, < 5 min
    fs::path rq3_a = work_dir("rq3_a"), rq3_b = work_dir("rq3_b");
    {
        const auto t0 = std::chrono::steady_clock::now();
        run_rq3(desk_options(rq3_a, 200));
        const double once = seconds_since(t0);
        run_rq3(desk_options(rq3_b, 200));
        const std::string a = slurp(rq3_a / "rq3.csv");
        const std::string b = slurp(rq3_b / "rq3.csv");
        const bool pass = !a.empty() && a == b && once < 300.0;
        report(1, pass,
               "two 200-step rq3 runs byte-identical (" + std::to_string(a.size()) +
                   " bytes), single run " + format_number(once) + " s");
    }

    // ---- criterion 2: null injection zeroes every metric over 200 steps
    {
        bool pass = true;
        std::string detail;
        // drift from the criterion-1 run (rate 0)
        auto rows = read_csv(rq3_a / "rq3.csv");
        for (size_t i = 1; i < rows.size(); ++i)
            if (parse_double(rows[i][1]) != 0.0) pass = false;
        fs::path d1 = work_dir("null_rq1");
        RunResult r1 = run_rq1(desk_options(d1, 200));
        auto rq1_rows = read_csv(d1 / "rq1.csv");
        for (size_t i = 1; i < rq1_rows.size(); ++i)
            if (parse_double(rq1_rows[i][3]) != 0.0 || parse_double(rq1_rows[i][4]) != 0.0 ||
                rq1_rows[i][5] != "0")
                pass = false;
        if (r1.event_count != 0) pass = false;
        fs::path d2 = work_dir("null_rq2");
        RunResult r2 = run_rq2(desk_options(d2, 200));
        if (r2.final_wcnts != 0.0) pass = false;
        fs::path d3 = work_dir("null_shadow");
        RunResult r3 = run_shadow(desk_options(d3, 200));
        if (!r3.alarm_steps.empty()) pass = false;
        report(2, pass,
               "rate-0: all rq1 freq/sev/zero_ref 0, wcnts=" + format_number(r2.final_wcnts) +
                   ", drift rows 0, shadow alarms=" + std::to_string(r3.alarm_steps.size()));
    }

    // ---- criterion 3: gradcheck <= 1e-2 in under 2 minutes
    {
        RunOptions o;
        o.model.layers = 2;
        o.model.hidden = 16;
        o.model.heads = 4;
        o.model.kv_heads = 2;
        o.model.seq_len = 8;
        o.model.vocab = 16;
        o.model.tp_degree = 1;
        o.model.micro_batch = 1;
        o.model.grad_accum = 1;
        o.seed = 3;
        const auto t0 = std::chrono::steady_clock::now();
        GradcheckResult g = run_gradcheck(o);
        const double secs = seconds_since(t0);
        const bool pass = g.max_rel <= 1e-2 && secs < 120.0;
        report(3, pass,
               "max rel error " + format_number(g.max_rel) + " at " + g.worst_param + " over " +
                   std::to_string(g.params_checked) + " params in " + format_number(secs) + " s");
    }

    // ---- criterion 4: metric oracle equivalence on 100 corrupted pairs
    {
        bool pass = true;
        Rng shape_rng(404, 0);
        for (int trial = 0; trial < 100 && pass; ++trial) {
            const int64_t rows = 1 + static_cast<int64_t>(shape_rng.uniform_int(64));
            const int64_t cols = 1 + static_cast<int64_t>(shape_rng.uniform_int(64));
            Tensor ref({rows, cols});
            Rng val_rng(500 + static_cast<uint64_t>(trial), 1);
            for (int64_t i = 0; i < ref.size(); ++i) {
                ref.at(i) = static_cast<float>(val_rng.uniform(-3.0, 3.0));
                if (val_rng.uniform() < 0.1) ref.at(i) = 0.0f;  // exercise zero references
            }
            SdcProfile p;
            p.sites = {Site::fwd_attn};
            p.rate = val_rng.uniform(0.0, 0.4);
            p.severity.kind = trial % 3 == 0 ? SeverityDist::Kind::fixed_factor
                              : trial % 3 == 1 ? SeverityDist::Kind::log_uniform_factor
                                               : SeverityDist::Kind::bit_flip;
            p.seed = 600 + static_cast<uint64_t>(trial);
            Tensor cor = ref;
            corrupt(cor, p, Site::fwd_attn, 0, 0, trial, 0);
            MismatchStats h = compare_pair(ref, cor);
            BruteStats b = brute_force_stats(ref, cor);
            if (h.mismatches != b.mismatches || h.zero_reference != b.zero_ref ||
                h.severity != b.severity)
                pass = false;
            // aggregate levels: single-rank layer then two-layer site
            LayerAggregate la = aggregate_ranks({h});
            const double bf = (double)b.mismatches / (double)ref.size();
            if (la.freq != bf || la.sev != b.severity) pass = false;
            LayerAggregate site = aggregate_layers({la, LayerAggregate{}});
            if (site.freq != bf / 2.0 || site.sev != b.severity) pass = false;
        }
        report(4, pass, "harness metrics bit-equal to scalar brute force on 100 random pairs");
    }

    // ---- criterion 5: fixed_factor 1.5 severity is exactly 0.5
    {
        bool pass = true;
        int mismatching_trials = 0;
        for (int trial = 0; trial < 50; ++trial) {
            Tensor ref({32, 32});
            Rng rng(700 + static_cast<uint64_t>(trial), 0);
            for (int64_t i = 0; i < ref.size(); ++i)
                ref.at(i) = static_cast<float>(1 + rng.uniform_int(1000));
            SdcProfile p;
            p.sites = {Site::fwd_ffn};
            p.rate = 0.1;
            p.severity = {SeverityDist::Kind::fixed_factor, 1.5, 1.5, 4.0};
            p.seed = 800 + static_cast<uint64_t>(trial);
            Tensor cor = ref;
            auto ev = corrupt(cor, p, Site::fwd_ffn, 0, 0, 0, 0);
            if (ev.empty()) continue;
            ++mismatching_trials;
            MismatchStats s = compare_pair(ref, cor);
            if (s.severity != 0.5 || s.zero_reference != 0) pass = false;
            if (aggregate_layers({aggregate_ranks({s})}).sev != 0.5) pass = false;
        }
        pass = pass && mismatching_trials > 0;
        report(5, pass,
               "severity exactly 0.5 in all " + std::to_string(mismatching_trials) +
                   " trials with mismatches");
    }

    // ---- criterion 6: node10-like calibration within the 99% binomial CI
    {
        RunOptions o = desk_options(work_dir("calibrate"), 1);
        o.profile = preset_profile("node10-like");
        CalibrateResult c = run_calibrate(o, 100);
        report(6, c.pass,
               "measured " + format_number(c.measured_rate) + " vs expected " +
                   format_number(c.expected_rate) + " over n=" + std::to_string(c.elements) +
                   " (99% CI [" + format_number(c.ci_lo) + ", " + format_number(c.ci_hi) + "])");
    }

    // ---- criterion 7: containment (rq1 snapshots, rq2 broadcast equality)
    fs::path rq2_dir = work_dir("rq2_inj");
    {
        RunOptions o1 = desk_options(work_dir("rq1_contain"), 100);
        o1.profile = preset_profile("node10-like");
        o1.snapshot_steps = {10, 50, 100};
        RunResult r1 = run_rq1(o1);
        bool pass = r1.event_count > 0;
        for (int64_t s : {10, 50, 100}) {
            const std::string h =
                slurp(fs::path(o1.out_dir) / ("params_healthy_step" + std::to_string(s) + ".bin"));
            const std::string u = slurp(fs::path(o1.out_dir) /
                                        ("params_unhealthy_step" + std::to_string(s) + ".bin"));
            if (h.empty() || h != u) pass = false;
        }
        RunOptions o2 = desk_options(rq2_dir, 50);
        o2.profile = preset_profile("node11-like");
        RunResult r2 = run_rq2(o2);  // broadcast equality is self-checked every step
        if (r2.event_count == 0 || r2.final_param_diff != 0.0) pass = false;
        report(7, pass,
               "rq1 snapshots bit-equal at {10,50,100} with " + std::to_string(r1.event_count) +
                   " events; rq2 params equal after every broadcast (" +
                   std::to_string(r2.event_count) + " events)");
    }

    // ---- criterion 8: WCNTS contract
    {
        bool pass = wcnts({0.01, 0.051, 0.002}) == 0.051;
        auto rows = read_csv(rq2_dir / "rq2.csv");
        double running = 0.0;
        bool nonzero = false;
        for (size_t i = 1; i < rows.size(); ++i) {
            const double ratio = parse_double(rows[i][3]);
            running = std::max(running, ratio);
            if (parse_double(rows[i][4]) != running) pass = false;
            if (running > 0.0) nonzero = true;
        }
        pass = pass && nonzero && rows.size() == 51;
        report(8, pass,
               "recomputed running max equals wcnts column over " +
                   std::to_string(rows.size() - 1) + " exported steps; sample sequence -> 0.051");
    }

    // ---- criterion 9: ABFT gate arithmetic and the norm-impact helper
    {
        auto f32 = precision_gate(4096, unit_roundoff(AbftPrecision::f32));
        auto bf16 = precision_gate(4096, unit_roundoff(AbftPrecision::bf16));
        auto f16 = precision_gate(4096, unit_roundoff(AbftPrecision::f16));
        const double helper = expected_fault_count(4.78e-3, 1120);
        const bool pass = f32.pass && f32.n_times_u == 4096.0 * 0x1.0p-23 &&
                          std::abs(f32.n_times_u - 0.00049) < 1e-5 && !bf16.pass &&
                          bf16.n_times_u == 32.0 && !f16.pass && f16.n_times_u == 4.0 &&
                          helper == 4.78e-3 * 1120.0 && std::abs(helper - 5.3536) < 1e-12;
        report(9, pass,
               "n*u: f32 " + format_number(f32.n_times_u) + " passes, bf16 " +
                   format_number(bf16.n_times_u) + " fails, f16 " + format_number(f16.n_times_u) +
                   " fails; helper 4.78e-3*1120 = " + format_number(helper));
    }

    // ---- criterion 10: ABFT soundness, detection, and the overwrite miss
    {
        const double u = unit_roundoff(AbftPrecision::f32);
        int false_flags = 0, trials = 0;
        for (int64_t k : {16, 64, 256}) {
            for (int t = 0; t < 1000; ++t) {
                Tensor a({8, k}), b({k, 8});
                Rng rng(9000 + static_cast<uint64_t>(k * 1000 + t), 0);
                for (int64_t i = 0; i < a.size(); ++i)
                    a.at(i) = static_cast<float>(rng.uniform(-1.0, 1.0));
                for (int64_t i = 0; i < b.size(); ++i)
                    b.at(i) = static_cast<float>(rng.uniform(-1.0, 1.0));
                if (check_product(a, b, matmul(a, b), u).flagged) ++false_flags;
                ++trials;
            }
        }
        int detected = 0, det_trials = 0, overwrite_flags = 0;
        for (int t = 0; t < 300; ++t) {
            Rng rng(12000 + static_cast<uint64_t>(t), 0);
            const int64_t k = 16 + static_cast<int64_t>(rng.uniform_int(240));
            Tensor a({8, k}), b({k, 8});
            for (int64_t i = 0; i < a.size(); ++i)
                a.at(i) = static_cast<float>(rng.uniform(-1.0, 1.0));
            for (int64_t i = 0; i < b.size(); ++i)
                b.at(i) = static_cast<float>(rng.uniform(-1.0, 1.0));
            Tensor c = matmul(a, b);
            const AbftCheck clean = check_product(a, b, c, u);
            Tensor corrupted = c;
            corrupted.at(static_cast<int64_t>(rng.uniform_int(64))) +=
                static_cast<float>(10.0 * clean.rhs);
            if (check_product(a, b, corrupted, u).flagged) ++detected;
            ++det_trials;
            // output overwritten after the verdict: the recorded flag stays clean
            Tensor late = c;
            late.at(0) *= 1000.0f;
            if (clean.flagged) ++overwrite_flags;
        }
        const bool pass =
            false_flags == 0 && detected == det_trials && overwrite_flags == 0 && trials == 3000;
        report(10, pass,
               std::to_string(false_flags) + "/" + std::to_string(trials) +
                   " false flags; detection " + std::to_string(detected) + "/" +
                   std::to_string(det_trials) + " at 10*rhs; overwrite-site flags " +
                   std::to_string(overwrite_flags));
    }

    // ---- criterion 11: drift onset under a rare-burst profile
    {
        RunOptions o;
        o.model = small_model();
        o.steps = 40;
        o.seed = 11;
        o.out_dir = work_dir("burst_rq3").string();
        o.profile.sites = {Site::fwd_attn, Site::fwd_ffn};
        o.profile.rate = 0.0;
        o.profile.temporal.kind = Temporal::Kind::rare_burst;
        o.profile.temporal.q = 0.15;
        o.profile.temporal.p_burst = 0.02;
        o.profile.severity = {SeverityDist::Kind::fixed_factor, 3.0, 1.5, 4.0};
        o.profile.seed = 77;
        int64_t first_burst = -1;
        for (int64_t s = 0; s < o.steps; ++s)
            if (temporal_rate(o.profile, s) > 0.0) {
                first_burst = s;
                break;
            }
        RunResult r = run_rq3(o);
        bool pass = first_burst > 0 && r.event_count > 0;
        int64_t first_event = o.steps;
        for (const auto& e : r.events) first_event = std::min(first_event, e.step);
        if (first_event < first_burst) pass = false;
        auto rows = read_csv(fs::path(o.out_dir) / "rq3.csv");
        for (size_t i = 1; i < rows.size(); ++i) {
            const int64_t step = static_cast<int64_t>(parse_double(rows[i][0]));
            const double drift = parse_double(rows[i][1]);
            if (step < first_event && drift != 0.0) pass = false;
            if (step >= first_event && drift <= 0.0) pass = false;
        }
        report(11, pass,
               "first burst step " + std::to_string(first_burst) + ", first event step " +
                   std::to_string(first_event) + ": drift 0 before, > 0 from there on (" +
                   std::to_string(r.event_count) + " events)");
    }

    // ---- criterion 12: shadow detector vs ground truth over 200 steps
    {
        RunOptions o;
        o.model = small_model();
        o.steps = 200;
        o.seed = 12;
        o.out_dir = work_dir("shadow_burst").string();
        o.profile.sites = {Site::fwd_attn, Site::bwd_ffn};
        o.profile.rate = 0.0;
        o.profile.temporal.kind = Temporal::Kind::rare_burst;
        o.profile.temporal.q = 0.1;
        o.profile.temporal.p_burst = 0.01;
        o.profile.severity = {SeverityDist::Kind::log_uniform_factor, 2.0, 1.5, 4.0};
        o.profile.seed = 99;
        RunResult r = run_shadow(o);
        std::set<int64_t> event_steps;
        for (const auto& e : r.events) event_steps.insert(e.step);
        std::set<int64_t> alarms(r.alarm_steps.begin(), r.alarm_steps.end());
        int missed = 0, false_alarms = 0;
        for (int64_t s : event_steps)
            if (!alarms.count(s)) ++missed;
        for (int64_t s : alarms)
            if (!event_steps.count(s)) ++false_alarms;
        const bool pass =
            !event_steps.empty() && missed == 0 && false_alarms == 0 && r.steps_completed == 200;
        report(12, pass,
               std::to_string(event_steps.size()) + " corrupted steps, " +
                   std::to_string(alarms.size()) + " alarms, " + std::to_string(missed) +
                   " missed, " + std::to_string(false_alarms) + " false");
    }

    std::printf("%s: %d/12 criteria passed\n", failures == 0 ? "ACCEPTANCE PASS" : "ACCEPTANCE FAIL",
                12 - failures);
    return failures;
}
