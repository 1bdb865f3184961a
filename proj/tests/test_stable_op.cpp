#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "bpxnn/rng.hpp"
#include "bpxnn/stable_op.hpp"

using namespace bpxnn;

namespace {

struct Setup {
    DyadicMesh mesh;
    FrameDescriptor u_desc, s_desc;
    explicit Setup(int J) : mesh(build_mesh(J)), u_desc(build_frame(Space::H10, J)), s_desc(build_frame(Space::H1, J)) {}
};

DiffusionField random_field(Rng& rng) {
    DiffusionField f;
    for (auto& v : f.y) v = rng.uniform(0.5, 1.5);
    return f;
}

std::vector<double> random_vec(std::size_t n, Rng& rng, double scale = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = scale * rng.uniform(-1.0, 1.0);
    return v;
}

void check_adjoint_consistency(const LinearOp& op, Rng& rng, double tol = 1e-10) {
    for (int t = 0; t < 100; ++t) {
        std::vector<double> w = random_vec(op.dim_in(), rng);
        std::vector<double> v = random_vec(op.dim_out(), rng);
        std::vector<double> aw(op.dim_out()), atv(op.dim_in());
        op.apply(w, aw);
        op.apply_adjoint(v, atv);
        double a = 0, b = 0, nw = 0, nv = 0;
        for (std::size_t i = 0; i < aw.size(); ++i) a += aw[i] * v[i];
        for (std::size_t i = 0; i < w.size(); ++i) b += w[i] * atv[i];
        for (double x : w) nw += x * x;
        for (double x : v) nv += x * x;
        REQUIRE(std::abs(a - b) <= tol * std::sqrt(nw * nv) + 1e-14);
    }
}

std::vector<double> interpolant_coefficients(const Setup& s, const std::vector<double>& u_vals_interior,
                                             const std::vector<double>& sigma_vals) {
    std::vector<double> w(s.u_desc.total_size + s.s_desc.total_size, 0.0);
    const auto& un = s.u_desc.norms.back();
    const auto& sn = s.s_desc.norms.back();
    for (std::size_t k = 0; k < u_vals_interior.size(); ++k)
        w[s.u_desc.level_offset(s.mesh.J) + k] = u_vals_interior[k] * un[k];
    for (std::size_t k = 0; k < sigma_vals.size(); ++k)
        w[s.u_desc.total_size + s.s_desc.level_offset(s.mesh.J) + k] = sigma_vals[k] * sn[k];
    return w;
}

}  // namespace

TEST_CASE("apply_D: zero input, unit finest hat, synthesis oracle") {
    const int J = 5;
    Setup s(J);
    StableOperator<double> op(Formulation::fosls, s.u_desc, &s.s_desc, s.mesh);

    std::vector<double> w(op.dim(), 0.0);
    QuadSamples<double> out;
    op.apply(w, out);
    for (double v : out.g) CHECK(v == 0.0);
    for (double v : out.tau) CHECK(v == 0.0);
    for (double v : out.p) CHECK(v == 0.0);

    // single finest-level normalized u-hat: slopes +-2^J / ||phi||
    const std::size_t k = 7;  // space index -> mesh node 8, support elements 7 and 8
    w[s.u_desc.level_offset(J) + k] = 1.0;
    op.apply(w, out);
    const double der = std::ldexp(1.0, J) / s.u_desc.norms.back()[k];
    for (std::size_t n = 0; n < s.mesh.n_elements; ++n) {
        for (int q = 0; q < 2; ++q) {
            const double got = out.g[2 * n + static_cast<std::size_t>(q)];
            if (n == k)
                CHECK(got == doctest::Approx(der).epsilon(1e-13));
            else if (n == k + 1)
                CHECK(got == doctest::Approx(-der).epsilon(1e-13));
            else
                CHECK(got == 0.0);
        }
    }

    // random stacked coefficients match "synthesize, then differentiate the
    // finest nodal function at the Gauss points"
    Rng rng(3);
    std::vector<double> wr = random_vec(op.dim(), rng);
    op.apply(wr, out);
    FrameOps<double> u_ops(s.u_desc), s_ops(s.s_desc);
    std::vector<double> wu(wr.begin(), wr.begin() + static_cast<std::ptrdiff_t>(s.u_desc.total_size));
    std::vector<double> ws(wr.begin() + static_cast<std::ptrdiff_t>(s.u_desc.total_size), wr.end());
    std::vector<double> vu, vs;
    u_ops.synthesize(wu, vu);
    s_ops.synthesize(ws, vs);
    const auto u_vals = finest_coeffs_to_values(s.u_desc, vu);
    const auto s_vals = finest_coeffs_to_values(s.s_desc, vs);
    for (std::size_t n = 0; n < s.mesh.n_elements; ++n) {
        const double gu = (u_vals[n + 1] - u_vals[n]) / s.mesh.h;
        const double ps = (s_vals[n + 1] - s_vals[n]) / s.mesh.h;
        for (int q = 0; q < 2; ++q) {
            const std::size_t i = 2 * n + static_cast<std::size_t>(q);
            const double x = s.mesh.gauss_point(n, q);
            const double psi_l = (s.mesh.left(n) + s.mesh.h - x) / s.mesh.h;
            const double tau = psi_l * s_vals[n] + (1.0 - psi_l) * s_vals[n + 1];
            CHECK(out.g[i] == doctest::Approx(gu).scale(1.0).epsilon(1e-12));
            CHECK(out.tau[i] == doctest::Approx(tau).scale(1.0).epsilon(1e-12));
            CHECK(out.p[i] == doctest::Approx(ps).scale(1.0).epsilon(1e-12));
        }
    }
}

TEST_CASE("apply_D adjoint identity and densified row consistency") {
    Rng rng(11);
    Setup s(4);
    StableOperator<double> op(Formulation::fosls, s.u_desc, &s.s_desc, s.mesh);
    SampleOpF64 d_op(op);
    check_adjoint_consistency(d_op, rng, 1e-12);

    QuadSamples<double> cot;
    cot.g.assign(op.n_points(), 0.0);
    cot.tau.assign(op.n_points(), 0.0);
    cot.p.assign(op.n_points(), 0.0);
    std::vector<double> grad;
    op.apply_adjoint(cot, grad);
    for (double v : grad) CHECK(v == 0.0);

    // unit sample at one Gauss point equals the corresponding row of densified D
    const DenseMatrix d = densify(d_op);
    std::vector<double> e(d_op.dim_out(), 0.0), row(d_op.dim_in());
    const std::size_t which = op.n_points() + 5;  // a tau sample
    e[which] = 1.0;
    d_op.apply_adjoint(e, row);
    for (std::size_t i = 0; i < row.size(); ++i)
        CHECK(row[i] == doctest::Approx(d(which, i)).scale(1.0).epsilon(1e-13));
}

TEST_CASE("stable FOSLS loss: trivial values and discretization scale") {
    Rng rng(13);
    const int J = 6;
    Setup s(J);
    StableOperator<double> op(Formulation::fosls, s.u_desc, &s.s_desc, s.mesh);
    const DiffusionField field = random_field(rng);
    const auto form = make_form<double>(s.mesh, field, 1.0);

    std::vector<double> zero(op.dim(), 0.0);
    const auto l0 = fosls_loss_stable<double>(op, form, zero, nullptr);
    CHECK(double(l0.value) == doctest::Approx(1.0).epsilon(1e-14));
    CHECK_FALSE(l0.overflow);

    const auto sol = exact_solution_oracle(field);
    std::vector<double> ui(s.mesh.n_elements - 1), si(s.mesh.n_nodes());
    for (std::size_t k = 0; k < ui.size(); ++k) ui[k] = sol.u((k + 1) * s.mesh.h);
    for (std::size_t k = 0; k < si.size(); ++k) si[k] = sol.sigma(k * s.mesh.h);
    const auto wi = interpolant_coefficients(s, ui, si);
    const auto li = fosls_loss_stable<double>(op, form, wi, nullptr);
    CHECK(double(li.value) <= 8.0 * s.mesh.h * s.mesh.h);
    CHECK(double(li.value) > 0.0);
}

TEST_CASE("factorization identity: stable and unstable paths agree in binary64") {
    Rng rng(17);
    const int J = 5;
    Setup s(J);
    StableOperator<double> op(Formulation::fosls, s.u_desc, &s.s_desc, s.mesh);
    FrameOps<double> u_ops(s.u_desc), s_ops(s.s_desc);
    const auto nt = make_nodal_tables<double>(Formulation::fosls, s.mesh, s.u_desc, &s.s_desc, true, 1.0);
    for (int t = 0; t < 50; ++t) {
        const DiffusionField field = random_field(rng);
        const auto form = make_form<double>(s.mesh, field, 1.0);
        const auto w = random_vec(op.dim(), rng);
        const auto a = fosls_loss_stable<double>(op, form, w, nullptr);
        const auto b = fosls_loss_unstable<double>(u_ops, s_ops, nt, form, w, nullptr);
        CHECK(std::abs(double(a.value) - double(b.value)) <= 1e-9 * (1.0 + std::abs(double(a.value))));
        const double qa = fosls_quad_form_stable<double>(op, form, w);
        const double qb = fosls_quad_form_unstable<double>(u_ops, s_ops, nt, form, w);
        CHECK(std::abs(qa - qb) <= 1e-10 * (1.0 + std::abs(qa)));
    }
}

TEST_CASE("unstable and stable losses at w = 0 are exactly 1 in all precisions") {
    const int J = 6;
    Setup s(J);
    auto run = [&](auto tag) {
        using T = decltype(tag);
        FrameOps<T> u_ops(s.u_desc), s_ops(s.s_desc);
        const auto nt = make_nodal_tables<T>(Formulation::fosls, s.mesh, s.u_desc, &s.s_desc, true, 1.0);
        DiffusionField field;
        field.y = {0.75, 1.25, 0.5, 1.5};
        const auto form = make_form<T>(s.mesh, field, 1.0);
        std::vector<T> w(s.u_desc.total_size + s.s_desc.total_size, T(0.0));
        const auto l = fosls_loss_unstable<T>(u_ops, s_ops, nt, form, w, nullptr);
        CHECK(double(l.value) == 1.0);
        StableOperator<T> op(Formulation::fosls, s.u_desc, &s.s_desc, s.mesh);
        const auto ls = fosls_loss_stable<T>(op, form, w, nullptr);
        CHECK(double(ls.value) == 1.0);
    };
    run(double{});
    run(float{});
    run(half{});
}

TEST_CASE("stable loss gradient matches central finite differences") {
    Rng rng(23);
    const int J = 4;
    Setup s(J);
    StableOperator<double> op(Formulation::fosls, s.u_desc, &s.s_desc, s.mesh);
    const DiffusionField field = random_field(rng);
    const auto form = make_form<double>(s.mesh, field, 1.0);
    auto w = random_vec(op.dim(), rng);
    std::vector<double> grad;
    fosls_loss_stable<double>(op, form, w, &grad);
    const double eps = 1e-6;
    for (int t = 0; t < 25; ++t) {
        const std::size_t i = rng.next_u64() % w.size();
        const double save = w[i];
        w[i] = save + eps;
        const double lp = double(fosls_loss_stable<double>(op, form, w, nullptr).value);
        w[i] = save - eps;
        const double lm = double(fosls_loss_stable<double>(op, form, w, nullptr).value);
        w[i] = save;
        const double fd = (lp - lm) / (2 * eps);
        CHECK(grad[i] == doctest::Approx(fd).scale(1.0).epsilon(1e-7));
    }
}

TEST_CASE("unstable loss gradient matches central finite differences") {
    Rng rng(29);
    const int J = 4;
    Setup s(J);
    FrameOps<double> u_ops(s.u_desc), s_ops(s.s_desc);
    const auto nt = make_nodal_tables<double>(Formulation::fosls, s.mesh, s.u_desc, &s.s_desc, true, 1.0);
    const DiffusionField field = random_field(rng);
    const auto form = make_form<double>(s.mesh, field, 1.0);
    auto w = random_vec(s.u_desc.total_size + s.s_desc.total_size, rng);
    std::vector<double> grad;
    fosls_loss_unstable<double>(u_ops, s_ops, nt, form, w, &grad);
    const double eps = 1e-6;
    for (int t = 0; t < 25; ++t) {
        const std::size_t i = rng.next_u64() % w.size();
        const double save = w[i];
        w[i] = save + eps;
        const double lp = double(fosls_loss_unstable<double>(u_ops, s_ops, nt, form, w, nullptr).value);
        w[i] = save - eps;
        const double lm = double(fosls_loss_unstable<double>(u_ops, s_ops, nt, form, w, nullptr).value);
        w[i] = save;
        CHECK(grad[i] == doctest::Approx((lp - lm) / (2 * eps)).scale(1.0).epsilon(1e-7));
    }
}

TEST_CASE("energy loss: trivial values, Galerkin minimum, scaling") {
    const int J = 5;
    Setup s(J);
    StableOperator<double> op(Formulation::energy, s.u_desc, nullptr, s.mesh);
    DiffusionField unit;
    const auto form = make_form<double>(s.mesh, unit, 1.0);
    const auto load64 = energy_load_stacked(s.mesh, s.u_desc, 1.0);

    std::vector<double> zero(op.dim(), 0.0);
    const auto l0 = energy_loss_stable<double>(op, form, load64, zero, nullptr);
    CHECK(double(l0.value) == 0.0);

    // minimize by CG on the normal equations (D^T C D) w = load
    StableFormOp gram(op, form);
    auto apply = [&](const std::vector<double>& v, std::vector<double>& out) {
        out.resize(v.size());
        gram.apply(v, out);
    };
    const auto cg = cg_solve<double>(apply, load64, 1e-12, 4000);
    REQUIRE(cg.status == CgStatus::converged);
    std::vector<double> grad;
    const auto lmin = energy_loss_stable<double>(op, form, load64, cg.x, &grad);
    for (double gv : grad) CHECK(std::abs(gv) <= 1e-8);

    // achieved minimum equals -1/2 <f, u_h>; for -u'' = 1 the P1 Galerkin
    // solution is nodal-exact: u(x) = x(1-x)/2
    double f_dot_u = 0.0;
    const auto load_nodal = assemble_load(s.mesh, 1.0, Space::H10);
    for (std::size_t k = 0; k < load_nodal.size(); ++k) {
        const double x = (k + 1) * s.mesh.h;
        f_dot_u += load_nodal[k] * 0.5 * x * (1.0 - x);
    }
    CHECK(double(lmin.value) == doctest::Approx(-0.5 * f_dot_u).epsilon(1e-9));

    // scaling a -> 2a halves the minimizer
    DiffusionField twice;
    twice.y = {2.0, 2.0, 2.0, 2.0};
    const auto form2 = make_form<double>(s.mesh, twice, 1.0);
    StableFormOp gram2(op, form2);
    auto apply2 = [&](const std::vector<double>& v, std::vector<double>& out) {
        out.resize(v.size());
        gram2.apply(v, out);
    };
    const auto cg2 = cg_solve<double>(apply2, load64, 1e-12, 4000);
    REQUIRE(cg2.status == CgStatus::converged);
    FrameOps<double> u_ops(s.u_desc);
    std::vector<double> v1, v2;
    u_ops.synthesize(cg.x, v1);
    u_ops.synthesize(cg2.x, v2);
    for (std::size_t i = 0; i < v1.size(); ++i)
        CHECK(v2[i] == doctest::Approx(0.5 * v1[i]).scale(1.0).epsilon(1e-6));

    // gradient against central finite differences
    Rng rng(31);
    auto w = random_vec(op.dim(), rng);
    std::vector<double> g2;
    energy_loss_stable<double>(op, form, load64, w, &g2);
    const double eps = 1e-6;
    for (int t = 0; t < 15; ++t) {
        const std::size_t i = rng.next_u64() % w.size();
        const double save = w[i];
        w[i] = save + eps;
        const double lp = double(energy_loss_stable<double>(op, form, load64, w, nullptr).value);
        w[i] = save - eps;
        const double lm = double(energy_loss_stable<double>(op, form, load64, w, nullptr).value);
        w[i] = save;
        CHECK(g2[i] == doctest::Approx((lp - lm) / (2 * eps)).scale(1.0).epsilon(1e-6));
    }
}

TEST_CASE("energy unstable path agrees with the stable one in binary64") {
    Rng rng(37);
    const int J = 5;
    Setup s(J);
    StableOperator<double> op(Formulation::energy, s.u_desc, nullptr, s.mesh);
    FrameOps<double> u_ops(s.u_desc);
    const auto nt = make_nodal_tables<double>(Formulation::energy, s.mesh, s.u_desc, nullptr, true, 1.0);
    const auto load64 = energy_load_stacked(s.mesh, s.u_desc, 1.0);
    for (int t = 0; t < 10; ++t) {
        const auto field = random_field(rng);
        const auto form = make_form<double>(s.mesh, field, 1.0);
        const auto w = random_vec(s.u_desc.total_size, rng);
        const auto a = energy_loss_stable<double>(op, form, load64, w, nullptr);
        const auto b = energy_loss_unstable<double>(u_ops, nt, form, w, nullptr);
        CHECK(double(a.value) == doctest::Approx(double(b.value)).scale(1.0).epsilon(1e-10));
    }
}

TEST_CASE("preconditioned form operators: adjoint consistency and identity") {
    Rng rng(41);
    const int J = 4;
    Setup s(J);
    StableOperator<double> op(Formulation::fosls, s.u_desc, &s.s_desc, s.mesh);
    FrameOps<double> u_ops(s.u_desc), s_ops(s.s_desc);
    const auto nt = make_nodal_tables<double>(Formulation::fosls, s.mesh, s.u_desc, &s.s_desc, true, 1.0);
    const DiffusionField field = random_field(rng);
    const auto form = make_form<double>(s.mesh, field, 1.0);

    PreconditionedFormOp hah(u_ops, s_ops, nt, form);
    StableFormOp dcd(op, form);
    check_adjoint_consistency(hah, rng, 1e-11);
    check_adjoint_consistency(dcd, rng, 1e-11);

    const DenseMatrix a = densify(hah);
    const DenseMatrix b = densify(dcd);
    double scale = 0.0;
    for (double v : a.a) scale = std::max(scale, std::abs(v));
    for (std::size_t i = 0; i < a.a.size(); ++i) REQUIRE(std::abs(a.a[i] - b.a[i]) <= 1e-11 * scale);
}

TEST_CASE("conditioning: nonzero spectra stay bounded while A_y grows") {
    Rng rng(43);
    DiffusionField field = random_field(rng);
    std::vector<double> cond_dcd, cond_a, cond_d;
    for (int J = 3; J <= 6; ++J) {
        Setup s(J);
        StableOperator<double> op(Formulation::fosls, s.u_desc, &s.s_desc, s.mesh);
        const auto nt = make_nodal_tables<double>(Formulation::fosls, s.mesh, s.u_desc, &s.s_desc, true, 1.0);
        const auto form = make_form<double>(s.mesh, field, 1.0);
        StableFormOp dcd(op, form);
        const auto ev = sym_eig(densify(dcd), false);
        cond_dcd.push_back(effective_condition(ev.values, 1e-8));
        cond_a.push_back(condition_number(densify_nodal_form(nt, form)));
        SampleOpF64 d_op(op);
        const DenseMatrix d = densify(d_op);
        DenseMatrix gram(d.cols, d.cols);
        for (std::size_t i = 0; i < d.cols; ++i)
            for (std::size_t j = 0; j <= i; ++j) {
                double sdot = 0.0;
                for (std::size_t k = 0; k < d.rows; ++k) sdot += d(k, i) * d(k, j);
                gram(i, j) = gram(j, i) = sdot;
            }
        const auto gev = sym_eig(gram, false);
        cond_d.push_back(std::sqrt(effective_condition(gev.values, 1e-14)));
    }
    const auto spread = [](const std::vector<double>& v) {
        double lo = v[0], hi = v[0];
        for (double x : v) {
            lo = std::min(lo, x);
            hi = std::max(hi, x);
        }
        return hi / lo;
    };
    CHECK(spread(cond_dcd) < 2.0);
    CHECK(spread(cond_d) < 2.0);
    for (std::size_t i = 1; i < cond_a.size(); ++i) CHECK(cond_a[i] / cond_a[i - 1] >= 3.5);

    Setup s(5);
    StableOperator<double> op(Formulation::fosls, s.u_desc, &s.s_desc, s.mesh);
    const auto form = make_form<double>(s.mesh, field, 1.0);
    const auto cev = cy_nonzero_eigenvalues(op, form);
    CHECK(effective_condition(cev, 0.0) <= 5.0 + 1e-9);
}

TEST_CASE("precision separation appears already in a reduced study") {
    Rng rng(47);
    const int J = 10;
    Setup s(J);
    StableOperator<double> op64(Formulation::fosls, s.u_desc, &s.s_desc, s.mesh);
    StableOperator<half> op16(Formulation::fosls, s.u_desc, &s.s_desc, s.mesh);
    FrameOps<half> u16(s.u_desc), s16(s.s_desc);
    const auto nt16 = make_nodal_tables<half>(Formulation::fosls, s.mesh, s.u_desc, &s.s_desc, true, 1.0);

    // random unit vectors with equal expected energy per frame level
    auto draw_balanced = [&](Rng& r) {
        std::vector<double> w(op64.dim(), 0.0);
        for (int f = 0; f < 2; ++f) {
            const auto& d = f ? s.s_desc : s.u_desc;
            const std::size_t base = f ? s.u_desc.total_size : 0;
            for (int j = 1; j <= J; ++j) {
                const double sc = 1.0 / std::sqrt(static_cast<double>(d.level_size(j)));
                for (std::size_t k = 0; k < d.level_size(j); ++k)
                    w[base + d.level_offset(j) + k] = sc * r.gaussian();
            }
        }
        double nw = 0.0;
        for (double v : w) nw += v * v;
        for (auto& v : w) v /= std::sqrt(nw);
        return w;
    };

    std::vector<double> ratios, stable_errs;
    for (int t = 0; t < 11; ++t) {
        const DiffusionField field = random_field(rng);
        auto w = draw_balanced(rng);
        std::vector<half> w16(w.size());
        std::vector<double> wr(w.size());
        for (std::size_t i = 0; i < w.size(); ++i) {
            w16[i] = half(w[i]);
            wr[i] = double(w16[i]);
        }
        const auto form64 = make_form<double>(s.mesh, field, 1.0);
        const auto form16 = make_form<half>(s.mesh, field, 1.0);
        const double truth = fosls_quad_form_stable<double>(op64, form64, wr);
        const double vs = double(fosls_quad_form_stable<half>(op16, form16, w16));
        const double vu = double(fosls_quad_form_unstable<half>(u16, s16, nt16, form16, w16));
        const double es = std::abs(vs - truth) / std::abs(truth);
        const double eu = std::abs(vu - truth) / std::abs(truth);
        stable_errs.push_back(es);
        ratios.push_back(eu / std::max(es, 1e-300));
    }
    std::sort(stable_errs.begin(), stable_errs.end());
    std::sort(ratios.begin(), ratios.end());
    CHECK(stable_errs[5] <= 1e-2);
    CHECK(ratios[5] >= 10.0);
}

TEST_CASE("overflow is reported, not silently propagated") {
    const int J = 6;
    Setup s(J);
    StableOperator<half> op(Formulation::fosls, s.u_desc, &s.s_desc, s.mesh);
    DiffusionField field;
    const auto form = make_form<half>(s.mesh, field, 1.0);
    std::vector<half> w(op.dim(), half(1000.0));
    const auto l = fosls_loss_stable<half>(op, form, w, nullptr);
    CHECK(l.overflow);
}
