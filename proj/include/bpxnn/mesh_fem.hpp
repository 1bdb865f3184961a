#pragma once

// Dyadic 1D meshes on (0,1), piecewise-constant diffusion fields with quarter
// breakpoints, element-local forms for the energy and first-order-system
// least-squares (FOSLS) formulations, and a binary64 reference solver.
//
// Residual convention: the divergence residual is ||sigma' + f||^2 with
// sigma = a u', so the exact solution of -(a u')' = f annihilates it.

#include <array>
#include <cstddef>
#include <stdexcept>
#include <utility>
#include <vector>

namespace bpxnn {

enum class Space { H10, H1 };

struct DyadicMesh {
    int J = 0;
    std::size_t n_elements = 0;  // 2^J
    double h = 0.0;              // 2^-J

    double left(std::size_t n) const { return static_cast<double>(n) * h; }
    double mid(std::size_t n) const { return (static_cast<double>(n) + 0.5) * h; }

    // two-point Gauss-Legendre nodes per element (exact for cubics)
    double gauss_point(std::size_t n, int q) const {
        constexpr double offset = 0.28867513459481288225457439025098;  // 1/(2*sqrt(3))
        return mid(n) + (q == 0 ? -offset : offset) * h;
    }
    double gauss_weight() const { return 0.5 * h; }

    std::size_t n_nodes() const { return n_elements + 1; }
};

DyadicMesh build_mesh(int J);

struct DiffusionField {
    std::array<double, 4> y{1.0, 1.0, 1.0, 1.0};

    double value(double x) const {
        if (x < 0.25) return y[0];
        if (x < 0.5) return y[1];
        if (x < 0.75) return y[2];
        return y[3];
    }
};

// a_y * (1/h) * [[1,-1],[-1,1]] for unnormalized nodal hats; a_y is sampled at
// the element's Gauss points (constant on the element for J >= 2).
std::array<std::array<double, 2>, 2> local_stiffness_energy(const DyadicMesh& mesh, const DiffusionField& field,
                                                            std::size_t n);

// Local FOSLS quadratic form on (u_left, u_right, sigma_left, sigma_right);
// exact two-point Gauss integration of p*q + (a^-1 tau - g)(a^-1 rho - h).
std::array<std::array<double, 4>, 4> local_blocks_fosls(const DyadicMesh& mesh, const DiffusionField& field,
                                                        std::size_t n);

// <f, phi_k> for the unnormalized nodal hats of the requested space
// (H10: interior nodes only; H1: includes the boundary half-hats).
std::vector<double> assemble_load(const DyadicMesh& mesh, double f, Space space);

// Closed-form solution of -(a u')' = f, u(0)=u(1)=0 for f constant and the
// quarter-piecewise field: sigma(x) = sigma0 - f*x with
// sigma0 = f * (int x/a) / (int 1/a), u by elementwise integration of sigma/a.
struct ExactSolution {
    std::array<double, 4> y{};
    double f = 1.0;
    double sigma0 = 0.0;
    std::array<double, 5> u_at_breaks{};  // cumulative u at x = 0, 1/4, 1/2, 3/4, 1

    double sigma(double x) const { return sigma0 - f * x; }
    double u(double x) const;
};

ExactSolution exact_solution_oracle(const DiffusionField& field, double f = 1.0);

// Nodal values of the discrete FOSLS minimizer over P1-H10 x P1-H1 on level J
// (binary64; normal system solved by CG to relative residual 1e-13).
// Returns (u at interior nodes, sigma at all nodes).
std::pair<std::vector<double>, std::vector<double>> solve_reference(const DiffusionField& field, int J,
                                                                    double f = 1.0);

// FOSLS functional of the P1 pair given by nodal values (u interior, sigma all
// nodes), evaluated with the mesh's Gauss rule in binary64.
double fosls_functional_nodal(const DyadicMesh& mesh, const DiffusionField& field,
                              const std::vector<double>& u_interior, const std::vector<double>& sigma_nodes,
                              double f = 1.0);

// Integral norms of a P1 function from its full nodal value vector.
double h1_norm_sq_nodal(const DyadicMesh& mesh, const std::vector<double>& values_all_nodes);
double l2_norm_sq_nodal(const DyadicMesh& mesh, const std::vector<double>& values_all_nodes);

}  // namespace bpxnn
