#pragma once

// Dense and operator-form linear algebra. Spectral analysis always runs in
// binary64; the conjugate gradient solver is generic over the working scalar
// with binary64 control variables.

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "bpxnn/precision.hpp"

namespace bpxnn {

struct DenseMatrix {
    std::size_t rows = 0, cols = 0;
    std::vector<double> a;  // row-major

    DenseMatrix() = default;
    DenseMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), a(r * c, 0.0) {}

    double& operator()(std::size_t i, std::size_t j) { return a[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return a[i * cols + j]; }

    static DenseMatrix identity(std::size_t n) {
        DenseMatrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }
    static DenseMatrix diag(const std::vector<double>& d) {
        DenseMatrix m(d.size(), d.size());
        for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
        return m;
    }
};

// Abstract matrix-free operator in binary64, used for densification and
// adjoint-consistency checks of the production operators.
struct LinearOp {
    virtual ~LinearOp() = default;
    virtual std::size_t dim_in() const = 0;
    virtual std::size_t dim_out() const = 0;
    virtual void apply(std::span<const double> in, std::span<double> out) const = 0;
    virtual void apply_adjoint(std::span<const double> in, std::span<double> out) const = 0;
};

// Column-by-column densification through applications to unit vectors.
DenseMatrix densify(const LinearOp& op);

struct EigResult {
    std::vector<double> values;  // ascending
    DenseMatrix vectors;         // columns are eigenvectors (empty unless requested)
};

// Full symmetric eigendecomposition (Householder tridiagonalization followed
// by QL with implicit shifts), binary64. Throws std::invalid_argument if the
// input is not symmetric within 1e-10 * ||m||.
EigResult sym_eig(const DenseMatrix& m, bool with_vectors = false);

std::pair<double, double> sym_eig_extremal(const DenseMatrix& m);

// lambda_max / lambda_min for an SPD matrix; throws std::domain_error when the
// smallest eigenvalue is not positive (loss of definiteness).
double condition_number(const DenseMatrix& m);

// Condition number over the nonzero part of the spectrum of a PSD matrix:
// eigenvalues below rel_threshold * lambda_max count as kernel directions.
double effective_condition(const std::vector<double>& eigenvalues, double rel_threshold);

enum class CgStatus { converged, max_iterations, numerical_failure };

template <class T>
struct CgResult {
    std::vector<T> x;
    int iterations = 0;
    double final_relative_residual = 0.0;
    CgStatus status = CgStatus::converged;
};

template <class T>
inline double dot_f64(const std::vector<T>& a, const std::vector<T>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += to_f64(a[i]) * to_f64(b[i]);
    return s;
}

// Unpreconditioned Hestenes-Stiefel conjugate gradient for a symmetric
// positive (semi-)definite operator. Iterate vectors live in the working
// precision T; the recurrence scalars are binary64 control variables.
template <class T, class Apply>
    requires requires(Apply&& f, const std::vector<T>& v, std::vector<T>& out) { f(v, out); }
CgResult<T> cg_solve(Apply&& apply, const std::vector<T>& rhs, double tol, int max_iters) {
    const std::size_t n = rhs.size();
    CgResult<T> res;
    res.x.assign(n, T(0.0));
    std::vector<T> r = rhs;
    std::vector<T> p = rhs;
    std::vector<T> ap(n);

    const double rhs_norm = std::sqrt(dot_f64(rhs, rhs));
    if (rhs_norm == 0.0) {
        res.status = CgStatus::converged;
        return res;
    }
    double rr = dot_f64(r, r);
    for (int it = 0; it < max_iters; ++it) {
        if (!std::isfinite(rr)) {
            res.status = CgStatus::numerical_failure;
            res.final_relative_residual = std::sqrt(std::abs(rr)) / rhs_norm;
            return res;
        }
        if (std::sqrt(rr) <= tol * rhs_norm) {
            res.status = CgStatus::converged;
            res.final_relative_residual = std::sqrt(rr) / rhs_norm;
            return res;
        }
        apply(p, ap);
        const double pap = dot_f64(p, ap);
        if (!std::isfinite(pap) || pap <= 0.0) {
            res.status = CgStatus::numerical_failure;
            res.final_relative_residual = std::sqrt(rr) / rhs_norm;
            return res;
        }
        const double alpha = rr / pap;
        const T alpha_t = from_f64<T>(alpha);
        for (std::size_t i = 0; i < n; ++i) res.x[i] += alpha_t * p[i];
        for (std::size_t i = 0; i < n; ++i) r[i] -= alpha_t * ap[i];
        const double rr_new = dot_f64(r, r);
        const double beta = rr_new / rr;
        const T beta_t = from_f64<T>(beta);
        for (std::size_t i = 0; i < n; ++i) p[i] = r[i] + beta_t * p[i];
        rr = rr_new;
        res.iterations = it + 1;
    }
    res.status = std::sqrt(rr) <= tol * rhs_norm ? CgStatus::converged : CgStatus::max_iterations;
    res.final_relative_residual = std::sqrt(rr) / rhs_norm;
    return res;
}

// Dimension-checked front end for the abstract operator form.
template <class T>
CgResult<T> cg_solve(const LinearOp& op, const std::vector<T>& rhs, double tol, int max_iters) {
    if (op.dim_in() != op.dim_out() || op.dim_in() != rhs.size())
        throw std::invalid_argument("cg_solve: operator/rhs dimension mismatch");
    std::vector<double> in(rhs.size()), out(rhs.size());
    auto apply = [&](const std::vector<T>& v, std::vector<T>& av) {
        for (std::size_t i = 0; i < v.size(); ++i) in[i] = to_f64(v[i]);
        op.apply(in, out);
        for (std::size_t i = 0; i < v.size(); ++i) av[i] = from_f64<T>(out[i]);
    };
    return cg_solve<T>(apply, rhs, tol, max_iters);
}

}  // namespace bpxnn
