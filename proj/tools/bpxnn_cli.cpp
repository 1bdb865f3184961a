// Command line front end: training runs from config files plus the
// conditioning, precision, initialization and reference utilities.

#include <CLI11.hpp>
#include <cstdio>
#include <iostream>

#include "bpxnn/experiment.hpp"

using namespace bpxnn;

int main(int argc, char** argv) {
    CLI::App app{"Multilevel-frame preconditioned neural PDE surrogates"};
    app.require_subcommand(1);

    std::string config_path;
    auto* train = app.add_subcommand("train", "run a training experiment from a config file");
    train->add_option("config", config_path, "config file (key = value sections)")->required();

    std::vector<double> y_vals{1.0, 1.0, 1.0, 1.0};
    int ref_j = 10;
    std::string ref_out = "reference.csv";
    auto* reference = app.add_subcommand("reference", "solve the finite element reference for one parameter");
    reference->add_option("--y", y_vals, "four diffusion values in [0.5, 1.5]")->expected(4);
    reference->add_option("--J", ref_j, "dyadic level");
    reference->add_option("--out", ref_out, "output CSV path");

    int jmin = 3, jmax = 8, cond_samples = 10;
    std::uint64_t cond_seed = 1;
    std::string cond_out = "cond.csv";
    auto* cond = app.add_subcommand("cond", "condition number study across levels");
    cond->add_option("--jmin", jmin, "smallest level");
    cond->add_option("--jmax", jmax, "largest level (<= 8)");
    cond->add_option("--samples", cond_samples, "random parameter draws (plus the constant field)");
    cond->add_option("--seed", cond_seed, "RNG seed");
    cond->add_option("--out", cond_out, "output CSV path");

    int prec_j = 10, prec_trials = 50;
    std::uint64_t prec_seed = 1;
    std::string prec_out = "precision.csv";
    auto* prec = app.add_subcommand("precision", "stable vs unstable quadratic-form evaluation errors");
    prec->add_option("--J", prec_j, "dyadic level");
    prec->add_option("--trials", prec_trials, "number of random coefficient vectors");
    prec->add_option("--seed", prec_seed, "RNG seed");
    prec->add_option("--out", prec_out, "output CSV path");

    std::string arch_str = "full";
    int demo_count = 100, demo_j = 10;
    std::uint64_t demo_seed = 1;
    std::string demo_out = "init_demo";
    auto* demo = app.add_subcommand("init-demo", "random initial fields with and without frame synthesis");
    demo->add_option("--arch", arch_str, "full | separate_resnet | separate_frame");
    demo->add_option("--count", demo_count, "number of seeded initializations");
    demo->add_option("--J", demo_j, "dyadic level");
    demo->add_option("--seed", demo_seed, "RNG seed");
    demo->add_option("--out", demo_out, "output directory");

    std::string report_dir;
    auto* report = app.add_subcommand("report", "render run summaries under a directory as a markdown table");
    report->add_option("dir", report_dir, "directory containing run outputs")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train) {
            const auto cfg = parse_config_file(config_path);
            const auto rep = run_training(cfg);
            const auto& last = rep.final_record();
            std::printf("run %s: %s/%s/%s epochs=%d J=%d\n", cfg.output_dir.c_str(), opt_name(cfg.optim.kind),
                        precond_name(cfg.precond), std::string(kind_name(cfg.precision)).c_str(), cfg.epochs, cfg.J);
            std::printf("  final: train_loss=%.6e test_loss=%.6e MRE=%.6e MSE=%.6e%s\n", last.train_loss,
                        last.test_loss, last.mre, last.mse, rep.diverged ? " [DIVERGED]" : "");
            std::printf("  wall: %.1f s; outputs in %s\n", rep.wall_seconds, cfg.output_dir.c_str());
            return rep.diverged ? 2 : 0;
        }
        if (*reference) {
            write_reference_csv({y_vals[0], y_vals[1], y_vals[2], y_vals[3]}, ref_j, ref_out);
            std::printf("wrote %s\n", ref_out.c_str());
            return 0;
        }
        if (*cond) {
            const auto rows = cond_report(jmin, jmax, cond_samples, cond_seed, cond_out);
            std::printf("wrote %s (%zu rows)\n", cond_out.c_str(), rows.size());
            return 0;
        }
        if (*prec) {
            const auto rows = precision_experiment(prec_j, prec_trials, prec_seed, prec_out);
            std::vector<double> es, ratio;
            for (const auto& r : rows)
                if (r.kind == ScalarKind::binary16) {
                    es.push_back(r.err_stable);
                    ratio.push_back(r.err_unstable / std::max(r.err_stable, 1e-300));
                }
            std::sort(es.begin(), es.end());
            std::sort(ratio.begin(), ratio.end());
            if (!es.empty())
                std::printf("binary16 medians: stable error %.3e, unstable/stable ratio %.1f\n", es[es.size() / 2],
                            ratio[ratio.size() / 2]);
            std::printf("wrote %s (%zu rows)\n", prec_out.c_str(), rows.size());
            return 0;
        }
        if (*demo) {
            const auto rows = init_demo(parse_arch(arch_str), demo_count, demo_seed, demo_j, demo_out);
            std::vector<double> ratios;
            for (const auto& r : rows) ratios.push_back(r.h1_raw / r.h1_frame);
            std::sort(ratios.begin(), ratios.end());
            std::printf("median H1 ratio (raw / frame): %.2f over %zu draws; outputs in %s\n",
                        ratios[ratios.size() / 2], rows.size(), demo_out.c_str());
            return 0;
        }
        if (*report) {
            std::cout << render_report(report_dir);
            return 0;
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
