#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "bpxnn/experiment.hpp"

using namespace bpxnn;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

ExperimentConfig tiny_config(const std::string& out) {
    ExperimentConfig cfg;
    cfg.J = 4;
    cfg.arch = ArchKind::full;
    cfg.precond = Precond::frame_stable;
    cfg.precision = ScalarKind::binary64;
    cfg.epochs = 25;
    cfg.k_train = 8;
    cfg.n_test = 4;
    cfg.metric_every = 5;
    cfg.seed = 7;
    cfg.threads = 1;
    cfg.output_dir = out;
    cfg.optim.kind = OptKind::adam;
    cfg.optim.lr0 = 1e-2;
    cfg.optim.t_max = 25;
    return cfg;
}

}  // namespace

TEST_CASE("parameter sampling: range, determinism, mean") {
    const auto a = sample_parameters(10000, 5);
    const auto b = sample_parameters(10000, 5);
    const auto c = sample_parameters(100, 6);
    REQUIRE(a.size() == 10000);
    for (std::size_t i = 0; i < a.size(); ++i)
        for (int j = 0; j < 4; ++j) {
            CHECK(a[i][j] >= 0.5);
            CHECK(a[i][j] <= 1.5);
            CHECK(a[i][j] == b[i][j]);
        }
    (void)c;
    double mean[4] = {0, 0, 0, 0};
    for (const auto& y : a)
        for (int j = 0; j < 4; ++j) mean[j] += y[j];
    for (int j = 0; j < 4; ++j) CHECK(std::abs(mean[j] / 10000.0 - 1.0) <= 0.01);
}

TEST_CASE("mre and mse for trivial and noisy predictions") {
    std::vector<std::vector<double>> refs{{1.0, 2.0, 2.0}, {3.0, 0.0, 4.0}};
    auto m = compute_mre_mse(refs, refs);
    CHECK(m.mre == 0.0);
    CHECK(m.mse == 0.0);

    std::vector<std::vector<double>> zero{{0.0, 0.0, 0.0}, {0.0, 0.0, 0.0}};
    m = compute_mre_mse(zero, refs);
    CHECK(m.mre == doctest::Approx(1.0).epsilon(1e-14));

    // noise of size eps per entry: expected MSE is eps^2 * dimension
    Rng rng(5);
    const double eps = 1e-3;
    const std::size_t dim = 200;
    std::vector<std::vector<double>> r2(50, std::vector<double>(dim, 1.0)), p2 = r2;
    for (auto& row : p2)
        for (auto& v : row) v += eps * (rng.uniform() < 0.5 ? -1.0 : 1.0);
    m = compute_mre_mse(p2, r2);
    CHECK(m.mse == doctest::Approx(eps * eps * dim).epsilon(1e-10));

    // zero-norm reference is excluded with a warning
    std::vector<std::vector<double>> rz{{0.0, 0.0}};
    std::vector<std::vector<double>> pz{{1.0, 1.0}};
    m = compute_mre_mse(pz, rz);
    CHECK(m.excluded == 1);
}

TEST_CASE("config parsing accepts the schema and rejects unknown keys") {
    const std::string text = R"(
# comment
[experiment]
formulation = fosls
preconditioning = frame_stable
architecture = separate_resnet
levels = 6
precision = f16
epochs = 1500
train_samples = 32
test_samples = 16
seed = 99
metric_every = 25
threads = 2
output_dir = /tmp/bpxnn_cfg_test

[optimizer]
kind = lbfgs
lbfgs_history = 50
lbfgs_tol = 1e-6
)";
    const auto cfg = parse_config_text(text);
    CHECK(cfg.formulation == Formulation::fosls);
    CHECK(cfg.precond == Precond::frame_stable);
    CHECK(cfg.arch == ArchKind::separate_resnet);
    CHECK(cfg.J == 6);
    CHECK(cfg.precision == ScalarKind::binary16);
    CHECK(cfg.epochs == 1500);
    CHECK(cfg.k_train == 32);
    CHECK(cfg.n_test == 16);
    CHECK(cfg.seed == 99);
    CHECK(cfg.optim.kind == OptKind::lbfgs);
    CHECK(cfg.optim.lbfgs_history == 50);
    CHECK(cfg.optim.lbfgs_tol == 1e-6);

    CHECK_THROWS_AS(parse_config_text("[experiment]\nbogus_key = 1\n"), std::invalid_argument);
    CHECK_THROWS_AS(parse_config_text("[bogus]\nx = 1\n"), std::invalid_argument);
    CHECK_THROWS_AS(parse_config_text("x = 1\n"), std::invalid_argument);
    CHECK_THROWS_AS(parse_config_text("[experiment]\nprecision = f128\n"), std::invalid_argument);
    CHECK_THROWS_AS(parse_config_text("[experiment]\npreconditioning = none\narchitecture = separate_frame\n"),
                    std::invalid_argument);
}

TEST_CASE("checkpoint round trip is exact") {
    ExperimentConfig cfg = tiny_config("/tmp/bpxnn_ckpt_test");
    fs::create_directories(cfg.output_dir);
    Rng rng(3);
    std::vector<double> theta(257);
    for (auto& v : theta) v = rng.gaussian() * std::pow(10.0, rng.uniform(-8.0, 8.0));
    const std::string path = cfg.output_dir + "/ck.txt";
    save_checkpoint(path, cfg, theta);
    const auto ck = load_checkpoint(path);
    CHECK(ck.arch == cfg.arch);
    CHECK(ck.J == cfg.J);
    CHECK(ck.precision == cfg.precision);
    CHECK(ck.seed == cfg.seed);
    REQUIRE(ck.theta.size() == theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) REQUIRE(ck.theta[i] == theta[i]);
}

TEST_CASE("epochs = 0 produces only the initialization metrics") {
    auto cfg = tiny_config("/tmp/bpxnn_run_e0");
    cfg.epochs = 0;
    const auto rep = run_training(cfg);
    REQUIRE(rep.records.size() == 1);
    CHECK(rep.records[0].epoch == 0);
    CHECK(std::isfinite(rep.records[0].test_loss));
}

TEST_CASE("short training run decreases the loss and writes outputs") {
    auto cfg = tiny_config("/tmp/bpxnn_run_smoke");
    const auto rep = run_training(cfg);
    REQUIRE(rep.records.size() >= 2);
    CHECK_FALSE(rep.diverged);
    CHECK(rep.final_record().test_loss < rep.records.front().test_loss);
    CHECK(fs::exists(cfg.output_dir + "/metrics.csv"));
    CHECK(fs::exists(cfg.output_dir + "/summary.csv"));
    CHECK(fs::exists(cfg.output_dir + "/checkpoint.txt"));
    CHECK(fs::exists(cfg.output_dir + "/loss_curve.svg"));
    CHECK(fs::exists(cfg.output_dir + "/times.csv"));
    // the checkpoint carries the full parameter vector
    const auto ck = load_checkpoint(cfg.output_dir + "/checkpoint.txt");
    const auto u4 = build_frame(Space::H10, 4);
    const auto s4 = build_frame(Space::H1, 4);
    const auto spec = build_architecture(cfg.arch, cfg.formulation, u4, &s4);
    CHECK(ck.theta.size() == spec.param_count);
}

TEST_CASE("identical config and seed give byte-identical outputs") {
    auto cfg1 = tiny_config("/tmp/bpxnn_det_a");
    auto cfg2 = tiny_config("/tmp/bpxnn_det_b");
    cfg1.epochs = cfg2.epochs = 12;
    cfg1.precision = cfg2.precision = ScalarKind::binary32;
    cfg1.threads = 2;  // chunk partition is fixed, thread count must not matter
    cfg2.threads = 1;
    run_training(cfg1);
    run_training(cfg2);
    CHECK(slurp("/tmp/bpxnn_det_a/metrics.csv") == slurp("/tmp/bpxnn_det_b/metrics.csv"));
    CHECK(slurp("/tmp/bpxnn_det_a/checkpoint.txt") == slurp("/tmp/bpxnn_det_b/checkpoint.txt"));
}

TEST_CASE("all preconditioning modes and optimizers run a few epochs") {
    int idx = 0;
    for (Precond pc : {Precond::none, Precond::frame_unstable, Precond::frame_stable}) {
        for (OptKind ok : {OptKind::sgd, OptKind::adam, OptKind::lbfgs, OptKind::ngd}) {
            auto cfg = tiny_config("/tmp/bpxnn_modes_" + std::to_string(idx++));
            cfg.precond = pc;
            cfg.epochs = 3;
            cfg.k_train = 4;
            cfg.n_test = 2;
            cfg.metric_every = 1;
            cfg.optim.kind = ok;
            cfg.optim.lr0 = ok == OptKind::sgd ? 1e-4 : 1e-3;
            const auto rep = run_training(cfg);
            CHECK_FALSE(rep.diverged);
            CHECK(std::isfinite(rep.final_record().test_loss));
        }
    }
    // energy formulation smoke test
    auto cfg = tiny_config("/tmp/bpxnn_modes_energy");
    cfg.formulation = Formulation::energy;
    cfg.epochs = 3;
    cfg.metric_every = 1;
    const auto rep = run_training(cfg);
    CHECK_FALSE(rep.diverged);
}

TEST_CASE("precision experiment rows are sane at a reduced level") {
    const auto rows = precision_experiment(6, 4, 11, "/tmp/bpxnn_prec/prec.csv");
    REQUIRE(rows.size() == 12);
    for (const auto& r : rows) {
        CHECK(std::isfinite(r.truth));
        CHECK(r.truth > 0.0);
        if (r.kind == ScalarKind::binary64) {
            CHECK(r.err_stable <= 1e-10);
            CHECK(r.err_unstable <= 1e-10);
        }
        if (r.kind == ScalarKind::binary32) CHECK(r.err_stable <= 1e-4);
    }
    CHECK(fs::exists("/tmp/bpxnn_prec/prec.csv"));
}

TEST_CASE("conditioning study shows the unpreconditioned growth") {
    const auto rows = cond_report(3, 4, 1, 23, "/tmp/bpxnn_cond/cond.csv");
    REQUIRE(rows.size() == 4);
    // same sample across levels: A grows, the preconditioned forms do not
    for (int s = 0; s <= 1; ++s) {
        const auto& r3 = rows[static_cast<std::size_t>(s)];
        const auto& r4 = rows[static_cast<std::size_t>(2 + s)];
        CHECK(r4.cond_a / r3.cond_a >= 3.5);
        CHECK(r4.cond_dcd / r3.cond_dcd < 2.0);
        CHECK(r4.cond_hah / r3.cond_hah < 2.0);
        CHECK(r3.cond_c <= 5.0 + 1e-9);
        CHECK(std::abs(r3.cond_dcd - r3.cond_hah) <= 1e-6 * r3.cond_hah);
    }
    CHECK(fs::exists("/tmp/bpxnn_cond/cond.csv"));
}

TEST_CASE("init demo writes norms and fields") {
    const auto rows = init_demo(ArchKind::full, 3, 17, 6, "/tmp/bpxnn_init");
    REQUIRE(rows.size() == 3);
    for (const auto& r : rows) {
        CHECK(r.h1_frame > 0.0);
        CHECK(r.h1_raw > r.h1_frame);  // raw-nodal interpretation is rougher
    }
    CHECK(fs::exists("/tmp/bpxnn_init/init_norms.csv"));
    CHECK(fs::exists("/tmp/bpxnn_init/init_fields.csv"));
    // determinism
    const auto again = init_demo(ArchKind::full, 3, 17, 6, "/tmp/bpxnn_init2");
    for (std::size_t i = 0; i < rows.size(); ++i) CHECK(rows[i].h1_frame == again[i].h1_frame);
}

TEST_CASE("report rendering aggregates summaries") {
    auto cfg = tiny_config("/tmp/bpxnn_report/run1");
    cfg.epochs = 2;
    cfg.metric_every = 1;
    run_training(cfg);
    const std::string md = render_report("/tmp/bpxnn_report");
    CHECK(md.find("| Optimizer | Precond. | Precision | MRE | MSE | Loss |") != std::string::npos);
    CHECK(md.find("adam") != std::string::npos);
    CHECK(md.find("f64") != std::string::npos);
}

TEST_CASE("reference CSV output") {
    write_reference_csv({1.0, 1.0, 1.0, 1.0}, 4, "/tmp/bpxnn_ref.csv");
    const auto text = slurp("/tmp/bpxnn_ref.csv");
    CHECK(text.rfind("node,x,u,sigma", 0) == 0);
    // u(1/2) = 0.125 for the constant field appears in the output
    CHECK(text.find("1.25") != std::string::npos);
}
