#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "bpxnn/linalg.hpp"
#include "bpxnn/rng.hpp"

using namespace bpxnn;

namespace {

DenseMatrix random_symmetric(std::size_t n, Rng& rng, double scale = 1.0) {
    DenseMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j) m(i, j) = m(j, i) = scale * rng.uniform(-1.0, 1.0);
    return m;
}

struct DiagOp final : LinearOp {
    std::vector<double> d;
    explicit DiagOp(std::vector<double> dd) : d(std::move(dd)) {}
    std::size_t dim_in() const override { return d.size(); }
    std::size_t dim_out() const override { return d.size(); }
    void apply(std::span<const double> in, std::span<double> out) const override {
        for (std::size_t i = 0; i < d.size(); ++i) out[i] = d[i] * in[i];
    }
    void apply_adjoint(std::span<const double> in, std::span<double> out) const override { apply(in, out); }
};

}  // namespace

TEST_CASE("cg identity converges in one iteration") {
    DiagOp op(std::vector<double>(5, 1.0));
    std::vector<double> rhs(5, 1.0);
    const auto res = cg_solve<double>(op, rhs, 1e-14, 10);
    CHECK(res.status == CgStatus::converged);
    CHECK(res.iterations == 1);
    for (double v : res.x) CHECK(v == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("cg diagonal cases") {
    DiagOp op(std::vector<double>{2.0, 1.0});
    std::vector<double> rhs{2.0, 1.0};
    const auto res = cg_solve<double>(op, rhs, 1e-14, 10);
    CHECK(res.x[0] == doctest::Approx(1.0).epsilon(1e-13));
    CHECK(res.x[1] == doctest::Approx(1.0).epsilon(1e-13));

    std::vector<double> d(10), ones(10, 1.0);
    for (int i = 0; i < 10; ++i) d[i] = i + 1.0;
    DiagOp op10(d);
    const auto res10 = cg_solve<double>(op10, ones, 1e-12, 10);
    CHECK(res10.status == CgStatus::converged);
    CHECK(res10.iterations <= 10);
    // componentwise division oracle
    for (int i = 0; i < 10; ++i) CHECK(res10.x[i] == doctest::Approx(1.0 / (i + 1.0)).epsilon(1e-10));
}

TEST_CASE("cg usage and failure modes") {
    DiagOp op(std::vector<double>{1.0, 2.0, 3.0});
    std::vector<double> bad_rhs{1.0, 1.0};
    CHECK_THROWS_AS(cg_solve<double>(op, bad_rhs, 1e-10, 5), std::invalid_argument);

    DiagOp nan_op(std::vector<double>{std::numeric_limits<double>::quiet_NaN(), 1.0});
    std::vector<double> rhs{1.0, 1.0};
    const auto res = cg_solve<double>(nan_op, rhs, 1e-10, 5);
    CHECK(res.status == CgStatus::numerical_failure);
}

TEST_CASE("cg error decreases monotonically in the operator norm") {
    Rng rng(5);
    const std::size_t n = 12;
    DenseMatrix b = random_symmetric(n, rng);
    DenseMatrix a(n, n);
    // SPD: b^T b + I
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < n; ++k) s += b(k, i) * b(k, j);
            a(i, j) = s + (i == j ? 1.0 : 0.0);
        }
    std::vector<double> x_true(n), rhs(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) x_true[i] = rng.uniform(-1.0, 1.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) rhs[i] += a(i, j) * x_true[j];

    auto apply = [&](const std::vector<double>& v, std::vector<double>& out) {
        for (std::size_t i = 0; i < n; ++i) {
            out[i] = 0.0;
            for (std::size_t j = 0; j < n; ++j) out[i] += a(i, j) * v[j];
        }
    };
    auto a_norm_err = [&](const std::vector<double>& x) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) s += (x[i] - x_true[i]) * a(i, j) * (x[j] - x_true[j]);
        return s;
    };
    double prev = std::numeric_limits<double>::infinity();
    for (int k = 1; k <= static_cast<int>(n); ++k) {
        const auto res = cg_solve<double>(apply, rhs, 0.0, k);
        const double err = a_norm_err(res.x);
        CHECK(err <= prev * (1.0 + 1e-12) + 1e-14);
        prev = err;
    }
}

TEST_CASE("sym_eig trivial and analytic spectra") {
    CHECK(sym_eig_extremal(DenseMatrix::identity(3)) == std::pair<double, double>{1.0, 1.0});

    const auto d = sym_eig_extremal(DenseMatrix::diag({1.0, 4.0}));
    CHECK(d.first == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(d.second == doctest::Approx(4.0).epsilon(1e-12));

    // tridiag(-1, 2, -1), n = 3: eigenvalues 2 - 2cos(k pi / 4)
    DenseMatrix t(3, 3);
    for (int i = 0; i < 3; ++i) t(i, i) = 2.0;
    t(0, 1) = t(1, 0) = t(1, 2) = t(2, 1) = -1.0;
    const auto e = sym_eig_extremal(t);
    CHECK(e.first == doctest::Approx(2.0 - std::sqrt(2.0)).epsilon(1e-12));
    CHECK(e.second == doctest::Approx(2.0 + std::sqrt(2.0)).epsilon(1e-12));
}

TEST_CASE("sym_eig rejects non-symmetric input") {
    DenseMatrix m(2, 2);
    m(0, 0) = 1.0;
    m(0, 1) = 0.5;
    m(1, 0) = 0.0;
    m(1, 1) = 1.0;
    CHECK_THROWS_AS(sym_eig(m), std::invalid_argument);
}

TEST_CASE("eigen residual on random symmetric matrices") {
    Rng rng(17);
    for (int trial = 0; trial < 5; ++trial) {
        const std::size_t n = 20;
        DenseMatrix m = random_symmetric(n, rng, 2.0);
        const EigResult r = sym_eig(m, true);
        double mnorm = 0.0;
        for (double v : m.a) mnorm = std::max(mnorm, std::abs(v));
        // residual ||Mx - lambda x|| for the extremal pairs
        for (std::size_t which : {std::size_t{0}, n - 1}) {
            double res = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                double mx = 0.0;
                for (std::size_t j = 0; j < n; ++j) mx += m(i, j) * r.vectors(j, which);
                const double diff = mx - r.values[which] * r.vectors(i, which);
                res += diff * diff;
            }
            CHECK(std::sqrt(res) <= 1e-8 * n * mnorm);
        }
        // trace consistency
        double tr = 0.0, sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            tr += m(i, i);
            sum += r.values[i];
        }
        CHECK(tr == doctest::Approx(sum).epsilon(1e-10));
    }
}

TEST_CASE("condition_number basics") {
    CHECK(condition_number(DenseMatrix::identity(4)) == doctest::Approx(1.0));
    CHECK(condition_number(DenseMatrix::diag({1.0, 100.0})) == doctest::Approx(100.0).epsilon(1e-10));
    CHECK_THROWS_AS(condition_number(DenseMatrix::diag({1.0, -1.0})), std::domain_error);
    CHECK(effective_condition({0.0, 1e-20, 0.5, 2.0}, 1e-8) == doctest::Approx(4.0).epsilon(1e-12));
}

TEST_CASE("densify reproduces a diagonal operator") {
    DiagOp op(std::vector<double>{3.0, -2.0, 0.5});
    const DenseMatrix m = densify(op);
    CHECK(m(0, 0) == 3.0);
    CHECK(m(1, 1) == -2.0);
    CHECK(m(2, 2) == 0.5);
    CHECK(m(0, 1) == 0.0);
}

TEST_CASE("cg works in low precision with binary64 controls") {
    DiagOp op(std::vector<double>{2.0, 4.0});
    std::vector<float> rhs{2.0f, 4.0f};
    const auto res = cg_solve<float>(op, rhs, 1e-6, 20);
    CHECK(res.status == CgStatus::converged);
    CHECK(double(res.x[0]) == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(double(res.x[1]) == doctest::Approx(1.0).epsilon(1e-5));
}
