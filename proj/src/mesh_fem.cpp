#include "bpxnn/mesh_fem.hpp"

#include <cmath>

#include "bpxnn/linalg.hpp"

namespace bpxnn {

DyadicMesh build_mesh(int J) {
    if (J < 1 || J > 16) throw std::invalid_argument("build_mesh: require 1 <= J <= 16");
    DyadicMesh m;
    m.J = J;
    m.n_elements = std::size_t{1} << J;
    m.h = std::ldexp(1.0, -J);
    return m;
}

std::array<std::array<double, 2>, 2> local_stiffness_energy(const DyadicMesh& mesh, const DiffusionField& field,
                                                            std::size_t n) {
    if (n >= mesh.n_elements) throw std::out_of_range("local_stiffness_energy: element index");
    const double w = mesh.gauss_weight();
    const double a_int = w * field.value(mesh.gauss_point(n, 0)) + w * field.value(mesh.gauss_point(n, 1));
    const double s = a_int / (mesh.h * mesh.h);  // (int_n a) / h^2
    return {{{s, -s}, {-s, s}}};
}

std::array<std::array<double, 4>, 4> local_blocks_fosls(const DyadicMesh& mesh, const DiffusionField& field,
                                                        std::size_t n) {
    if (n >= mesh.n_elements) throw std::out_of_range("local_blocks_fosls: element index");
    std::array<std::array<double, 4>, 4> block{};
    const double hinv = 1.0 / mesh.h;
    const double w = mesh.gauss_weight();
    for (int q = 0; q < 2; ++q) {
        const double x = mesh.gauss_point(n, q);
        const double ainv = 1.0 / field.value(x);
        const double psi_l = (mesh.left(n) + mesh.h - x) * hinv;
        const double psi_r = (x - mesh.left(n)) * hinv;
        // per local dof: derivative of u part (g), sigma value (tau), sigma derivative (p)
        const double g[4] = {-hinv, hinv, 0.0, 0.0};
        const double tau[4] = {0.0, 0.0, psi_l, psi_r};
        const double p[4] = {0.0, 0.0, -hinv, hinv};
        for (int alpha = 0; alpha < 4; ++alpha) {
            const double ra = ainv * tau[alpha] - g[alpha];
            for (int beta = 0; beta < 4; ++beta) {
                const double rb = ainv * tau[beta] - g[beta];
                block[alpha][beta] += w * (p[alpha] * p[beta] + ra * rb);
            }
        }
    }
    return block;
}

std::vector<double> assemble_load(const DyadicMesh& mesh, double f, Space space) {
    const std::size_t n_nodes = mesh.n_nodes();
    std::vector<double> full(n_nodes, 0.0);
    const double w = mesh.gauss_weight();
    for (std::size_t n = 0; n < mesh.n_elements; ++n) {
        for (int q = 0; q < 2; ++q) {
            const double x = mesh.gauss_point(n, q);
            const double psi_l = (mesh.left(n) + mesh.h - x) / mesh.h;
            full[n] += w * f * psi_l;
            full[n + 1] += w * f * (1.0 - psi_l);
        }
    }
    if (space == Space::H1) return full;
    return std::vector<double>(full.begin() + 1, full.end() - 1);
}

double ExactSolution::u(double x) const {
    const double quarter = 0.25;
    int r = static_cast<int>(x / quarter);
    if (r > 3) r = 3;
    const double x0 = r * quarter;
    // u(x) = u(x0) + int_{x0}^{x} (sigma0 - f t)/a_r dt
    const double seg = (sigma0 * (x - x0) - 0.5 * f * (x * x - x0 * x0)) / y[r];
    return u_at_breaks[r] + seg;
}

ExactSolution exact_solution_oracle(const DiffusionField& field, double f) {
    ExactSolution sol;
    sol.y = field.y;
    sol.f = f;
    double int_inv_a = 0.0;  // int 1/a
    double int_x_inv_a = 0.0;  // int x/a
    for (int r = 0; r < 4; ++r) {
        const double x0 = 0.25 * r, x1 = 0.25 * (r + 1);
        int_inv_a += (x1 - x0) / field.y[r];
        int_x_inv_a += 0.5 * (x1 * x1 - x0 * x0) / field.y[r];
    }
    sol.sigma0 = f * int_x_inv_a / int_inv_a;
    sol.u_at_breaks[0] = 0.0;
    for (int r = 0; r < 4; ++r) {
        const double x0 = 0.25 * r, x1 = 0.25 * (r + 1);
        sol.u_at_breaks[r + 1] =
            sol.u_at_breaks[r] + (sol.sigma0 * (x1 - x0) - 0.5 * f * (x1 * x1 - x0 * x0)) / field.y[r];
    }
    return sol;
}

namespace {

// Matrix-free action of the FOSLS normal form on (u interior, sigma all nodes).
struct FoslsNormalOp {
    const DyadicMesh& mesh;
    std::vector<std::array<std::array<double, 4>, 4>> blocks;
    std::size_t nu, ns;

    FoslsNormalOp(const DyadicMesh& m, const DiffusionField& field) : mesh(m) {
        blocks.reserve(mesh.n_elements);
        for (std::size_t n = 0; n < mesh.n_elements; ++n) blocks.push_back(local_blocks_fosls(mesh, field, n));
        nu = mesh.n_elements - 1;
        ns = mesh.n_elements + 1;
    }

    void apply(const std::vector<double>& v, std::vector<double>& out) const {
        std::fill(out.begin(), out.end(), 0.0);
        for (std::size_t n = 0; n < mesh.n_elements; ++n) {
            // local dofs: u at node n, node n+1 (0 on the boundary), sigma at n, n+1
            double loc[4];
            loc[0] = (n == 0) ? 0.0 : v[n - 1];
            loc[1] = (n + 1 == mesh.n_elements) ? 0.0 : v[n];
            loc[2] = v[nu + n];
            loc[3] = v[nu + n + 1];
            const auto& B = blocks[n];
            double res[4];
            for (int i = 0; i < 4; ++i)
                res[i] = B[i][0] * loc[0] + B[i][1] * loc[1] + B[i][2] * loc[2] + B[i][3] * loc[3];
            if (n != 0) out[n - 1] += res[0];
            if (n + 1 != mesh.n_elements) out[n] += res[1];
            out[nu + n] += res[2];
            out[nu + n + 1] += res[3];
        }
    }
};

}  // namespace

std::pair<std::vector<double>, std::vector<double>> solve_reference(const DiffusionField& field, int J, double f) {
    const DyadicMesh mesh = build_mesh(J);
    FoslsNormalOp op(mesh, field);
    const std::size_t n = op.nu + op.ns;

    // right-hand side: -f * int tau' per sigma test hat (telescopes to the boundary)
    std::vector<double> rhs(n, 0.0);
    rhs[op.nu] = f;
    rhs[op.nu + op.ns - 1] = -f;

    auto apply = [&](const std::vector<double>& v, std::vector<double>& out) { op.apply(v, out); };
    const auto result = cg_solve<double>(apply, rhs, 1e-13, 400000);
    if (result.status == CgStatus::numerical_failure)
        throw std::runtime_error("solve_reference: CG failed numerically");
    if (result.status == CgStatus::max_iterations)
        throw std::runtime_error("solve_reference: CG did not reach the requested residual");

    std::vector<double> u(result.x.begin(), result.x.begin() + op.nu);
    std::vector<double> sigma(result.x.begin() + op.nu, result.x.end());
    return {std::move(u), std::move(sigma)};
}

double fosls_functional_nodal(const DyadicMesh& mesh, const DiffusionField& field,
                              const std::vector<double>& u_interior, const std::vector<double>& sigma_nodes,
                              double f) {
    if (u_interior.size() != mesh.n_elements - 1 || sigma_nodes.size() != mesh.n_nodes())
        throw std::invalid_argument("fosls_functional_nodal: dimension mismatch");
    const double w = mesh.gauss_weight();
    const double hinv = 1.0 / mesh.h;
    double loss = 0.0;
    for (std::size_t n = 0; n < mesh.n_elements; ++n) {
        const double ul = (n == 0) ? 0.0 : u_interior[n - 1];
        const double ur = (n + 1 == mesh.n_elements) ? 0.0 : u_interior[n];
        const double g = (ur - ul) * hinv;
        const double p = (sigma_nodes[n + 1] - sigma_nodes[n]) * hinv;
        for (int q = 0; q < 2; ++q) {
            const double x = mesh.gauss_point(n, q);
            const double psi_l = (mesh.left(n) + mesh.h - x) * hinv;
            const double tau = psi_l * sigma_nodes[n] + (1.0 - psi_l) * sigma_nodes[n + 1];
            const double r1 = p + f;
            const double r2 = tau / field.value(x) - g;
            loss += w * (r1 * r1 + r2 * r2);
        }
    }
    return loss;
}

double h1_norm_sq_nodal(const DyadicMesh& mesh, const std::vector<double>& values) {
    if (values.size() != mesh.n_nodes()) throw std::invalid_argument("h1_norm_sq_nodal: dimension mismatch");
    const double hinv = 1.0 / mesh.h;
    double sum = l2_norm_sq_nodal(mesh, values);
    for (std::size_t n = 0; n < mesh.n_elements; ++n) {
        const double d = (values[n + 1] - values[n]) * hinv;
        sum += mesh.h * d * d;
    }
    return sum;
}

double l2_norm_sq_nodal(const DyadicMesh& mesh, const std::vector<double>& values) {
    if (values.size() != mesh.n_nodes()) throw std::invalid_argument("l2_norm_sq_nodal: dimension mismatch");
    double sum = 0.0;
    for (std::size_t n = 0; n < mesh.n_elements; ++n) {
        const double vl = values[n], vr = values[n + 1];
        sum += mesh.h * (vl * vl + vl * vr + vr * vr) / 3.0;
    }
    return sum;
}

}  // namespace bpxnn
