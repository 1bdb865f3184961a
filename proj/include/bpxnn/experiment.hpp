#pragma once

// Experiment orchestration: parameter sampling, training loops for all
// optimizer / preconditioning / precision combinations, metrics against the
// finite element reference, conditioning and precision studies, file output
// (CSV, SVG, checkpoints), and config parsing for the CLI.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "bpxnn/nn.hpp"
#include "bpxnn/optim.hpp"
#include "bpxnn/stable_op.hpp"

namespace bpxnn {

enum class Precond { none, frame_unstable, frame_stable };
enum class OptKind { sgd, adam, lbfgs, ngd };

const char* precond_name(Precond p);
Precond parse_precond(std::string_view s);
const char* opt_name(OptKind k);
OptKind parse_opt(std::string_view s);
const char* formulation_name(Formulation f);
Formulation parse_formulation(std::string_view s);

struct OptimConfig {
    OptKind kind = OptKind::adam;
    double lr0 = 1e-3;
    double lr_min = -1.0;    // < 0: per-precision default
    int t_max = 5000;
    double adam_eps = -1.0;  // < 0: per-precision default
    double beta1 = 0.9, beta2 = 0.999;
    int lbfgs_history = 100;
    double lbfgs_tol = -1.0;
    double ngd_eps = -1.0;
    double ngd_cg_tol = -1.0;
    int ngd_cg_max = 20;
    // power-of-two gradient scale for Adam/SGD (< 0: 1024 in binary16, else 1)
    double loss_scale = -1.0;
};

struct ExperimentConfig {
    Formulation formulation = Formulation::fosls;
    Precond precond = Precond::frame_stable;
    ArchKind arch = ArchKind::full;
    int J = 10;
    ScalarKind precision = ScalarKind::binary32;
    int epochs = 6000;
    int k_train = 512;
    int n_test = 128;
    std::uint64_t seed = 1;
    int metric_every = 10;
    int threads = 0;  // 0: hardware concurrency
    std::string output_dir = "run_out";
    OptimConfig optim;
};

// Plain-text config: [experiment] / [optimizer] sections with key = value
// lines; '#' comments; unknown sections or keys are rejected.
ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig parse_config_file(const std::string& path);

struct MetricsRecord {
    int epoch = 0;
    double train_loss = 0.0;  // working precision value, reported as binary64
    double test_loss = 0.0;   // binary64 functional on the test set
    double mre = 0.0;
    double mse = 0.0;
};

struct RunReport {
    ExperimentConfig config;
    std::vector<MetricsRecord> records;
    bool diverged = false;
    long overflow_events = 0;  // working-precision overflows seen by the loss
    double wall_seconds = 0.0;
    std::string metrics_path, checkpoint_path, summary_path;

    const MetricsRecord& final_record() const { return records.back(); }
};

// i.i.d. uniform draws on [0.5, 1.5]^4
std::vector<std::array<double, 4>> sample_parameters(int count, std::uint64_t seed);

struct MreMse {
    double mre = 0.0, mse = 0.0;
    int excluded = 0;  // zero-norm references (cannot occur for f = 1)
};
MreMse compute_mre_mse(const std::vector<std::vector<double>>& predictions,
                       const std::vector<std::vector<double>>& references);

RunReport run_training(const ExperimentConfig& cfg);

// ---- studies ---------------------------------------------------------------

struct CondRow {
    int J = 0;
    int sample = 0;  // 0 is the constant field a == 1
    std::array<double, 4> y{};
    double cond_a = 0.0;      // finest-level form, normalized nodal basis
    double cond_hah = 0.0;    // H^T A_y H, nonzero spectrum
    double cond_dcd = 0.0;    // D^T C_y D, nonzero spectrum
    double cond_d = 0.0;      // nonzero singular values of D
    double cond_c = 0.0;      // nonzero spectrum of C_y
};
std::vector<CondRow> cond_report(int jmin, int jmax, int samples, std::uint64_t seed, const std::string& csv_path);

struct PrecisionRow {
    int trial = 0;
    ScalarKind kind = ScalarKind::binary16;
    std::array<double, 4> y{};
    double value_stable = 0.0, value_unstable = 0.0, truth = 0.0;
    double err_stable = 0.0, err_unstable = 0.0;
};
std::vector<PrecisionRow> precision_experiment(int J, int trials, std::uint64_t seed, const std::string& csv_path);

struct InitDemoRow {
    int draw = 0;
    double h1_frame = 0.0, h1_raw = 0.0;
};
std::vector<InitDemoRow> init_demo(ArchKind arch, int count, std::uint64_t seed, int J, const std::string& out_dir);

// random unit stacked coefficient vector with equal expected energy per frame
// level (the ensemble used by the precision study)
std::vector<double> sample_frame_unit_vector(const FrameDescriptor& u_desc, const FrameDescriptor* s_desc, Rng& rng);

// reference CLI helper: writes nodal u/sigma values for one parameter
void write_reference_csv(const std::array<double, 4>& y, int J, const std::string& csv_path);

// markdown table across all summary.csv files under dir
std::string render_report(const std::string& dir);

// ---- checkpoints ------------------------------------------------------------

struct Checkpoint {
    std::string version;
    ArchKind arch = ArchKind::full;
    Formulation formulation = Formulation::fosls;
    Precond precond = Precond::frame_stable;
    int J = 0;
    ScalarKind precision = ScalarKind::binary64;
    std::uint64_t seed = 0;
    std::vector<double> theta;  // binary64
};

void save_checkpoint(const std::string& path, const ExperimentConfig& cfg, const std::vector<double>& theta_f64);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace bpxnn
