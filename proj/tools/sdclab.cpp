// sdclab — deterministic desk-scale simulator of SDC faults in
// tensor-parallel transformer training. One subcommand per protocol.

#include <cstdio>
#include <cstdlib>
#include <string>

#include <CLI11.hpp>

#include "sdclab/runner.hpp"

int main(int argc, char** argv) {
    CLI::App app{"sdclab: paired healthy/unhealthy training simulator with SDC injection"};
    app.require_subcommand(1);

    const std::vector<std::string> protocols = {"rq1",  "rq2",      "rq3",      "shadow",
                                                "abft", "gradcheck", "calibrate"};
    struct SubOpts {
        std::string config_path;
        std::string out_dir;
        std::string profile;
        int64_t seed = -1;
        int64_t steps = -1;
    };
    std::map<std::string, SubOpts> opts;
    for (const auto& name : protocols) {
        auto* sub = app.add_subcommand(name, "run the " + name + " protocol");
        auto& o = opts[name];
        sub->add_option("--config", o.config_path, "JSON configuration file");
        sub->add_option("--seed", o.seed, "override run seed");
        sub->add_option("--steps", o.steps, "override optimizer step count");
        sub->add_option("--out", o.out_dir, "output directory");
        sub->add_option("--profile", o.profile, "injection profile preset name");
    }
    std::string export_run, export_out;
    auto* exp = app.add_subcommand("export", "merge a run's metric CSVs into plot-ready data");
    exp->add_option("--run", export_run, "completed run directory")->required();
    exp->add_option("--out", export_out, "output file (default <run>/plotdata.csv)");

    CLI11_PARSE(app, argc, argv);

    if (exp->parsed()) {
        try {
            if (export_out.empty()) export_out = export_run + "/plotdata.csv";
            const int64_t rows = sdclab::export_plotdata(export_run, export_out);
            std::printf("export: %lld rows -> %s\n", static_cast<long long>(rows),
                        export_out.c_str());
            return 0;
        } catch (const std::exception& e) {
            std::fprintf(stderr, "error: %s\n", e.what());
            return 1;
        }
    }

    const std::string protocol = app.get_subcommands().front()->get_name();
    const SubOpts& o = opts[protocol];

    sdclab::RunConfig cfg;
    try {
        cfg.profile = sdclab::preset_profile("none");
        if (!o.config_path.empty()) cfg = sdclab::parse_config(o.config_path);
        // flag > file > default
        if (o.seed >= 0) cfg.seed = static_cast<uint64_t>(o.seed);
        if (o.steps >= 0) cfg.steps = o.steps;
        if (!o.profile.empty()) {
            cfg.profile = sdclab::preset_profile(o.profile);
            cfg.profile_name = o.profile;
        }
        if (!o.out_dir.empty()) {
            cfg.out_dir = o.out_dir;
        } else if (cfg.out_dir.empty()) {
            const char* env = std::getenv("SDCLAB_OUT");
            cfg.out_dir = env ? std::string(env) : "out_" + protocol;
        }
        if (cfg.steps < 1) throw sdclab::ContractViolation("steps must be >= 1");
        cfg.model.validate();
        cfg.profile.validate();
    } catch (const std::exception& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    }

    std::string summary;
    const int code = sdclab::run_protocol(protocol, cfg, &summary);
    std::printf("%s\n", summary.c_str());
    if (code != 0) std::fprintf(stderr, "exit code %d\n", code);
    return code;
}
