#include "bpxnn/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace bpxnn {

DenseMatrix densify(const LinearOp& op) {
    const std::size_t nin = op.dim_in(), nout = op.dim_out();
    DenseMatrix m(nout, nin);
    std::vector<double> e(nin, 0.0), col(nout);
    for (std::size_t j = 0; j < nin; ++j) {
        e[j] = 1.0;
        op.apply(e, col);
        e[j] = 0.0;
        for (std::size_t i = 0; i < nout; ++i) m(i, j) = col[i];
    }
    return m;
}

namespace {

// Householder reduction to tridiagonal form; if with_vectors the input matrix
// is overwritten with the accumulated orthogonal transform.
void tridiagonalize(DenseMatrix& a, std::vector<double>& d, std::vector<double>& e, bool with_vectors) {
    const std::size_t n = a.rows;
    for (std::size_t ii = n - 1; ii > 0; --ii) {
        const std::size_t i = ii;
        const std::size_t l = i - 1;
        double h = 0.0, scale = 0.0;
        if (l > 0) {
            for (std::size_t k = 0; k <= l; ++k) scale += std::abs(a(i, k));
            if (scale == 0.0) {
                e[i] = a(i, l);
            } else {
                for (std::size_t k = 0; k <= l; ++k) {
                    a(i, k) /= scale;
                    h += a(i, k) * a(i, k);
                }
                double f = a(i, l);
                double g = (f >= 0.0 ? -std::sqrt(h) : std::sqrt(h));
                e[i] = scale * g;
                h -= f * g;
                a(i, l) = f - g;
                f = 0.0;
                for (std::size_t j = 0; j <= l; ++j) {
                    if (with_vectors) a(j, i) = a(i, j) / h;
                    g = 0.0;
                    for (std::size_t k = 0; k <= j; ++k) g += a(j, k) * a(i, k);
                    for (std::size_t k = j + 1; k <= l; ++k) g += a(k, j) * a(i, k);
                    e[j] = g / h;
                    f += e[j] * a(i, j);
                }
                const double hh = f / (h + h);
                for (std::size_t j = 0; j <= l; ++j) {
                    f = a(i, j);
                    e[j] = g = e[j] - hh * f;
                    for (std::size_t k = 0; k <= j; ++k) a(j, k) -= (f * e[k] + g * a(i, k));
                }
            }
        } else {
            e[i] = a(i, l);
        }
        d[i] = h;
    }
    if (with_vectors) d[0] = 0.0;
    e[0] = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (with_vectors) {
            if (d[i] != 0.0) {
                for (std::size_t j = 0; j < i; ++j) {
                    double g = 0.0;
                    for (std::size_t k = 0; k < i; ++k) g += a(i, k) * a(k, j);
                    for (std::size_t k = 0; k < i; ++k) a(k, j) -= g * a(k, i);
                }
            }
            d[i] = a(i, i);
            a(i, i) = 1.0;
            for (std::size_t j = 0; j < i; ++j) a(j, i) = a(i, j) = 0.0;
        } else {
            d[i] = a(i, i);
        }
    }
}

// QL with implicit shifts on a symmetric tridiagonal (d, e); rotations are
// accumulated into z when provided.
void ql_implicit(std::vector<double>& d, std::vector<double>& e, DenseMatrix* z) {
    const std::size_t n = d.size();
    const double eps = std::numeric_limits<double>::epsilon();
    for (std::size_t i = 1; i < n; ++i) e[i - 1] = e[i];
    e[n - 1] = 0.0;
    for (std::size_t l = 0; l < n; ++l) {
        int iter = 0;
        std::size_t m;
        do {
            for (m = l; m + 1 < n; ++m) {
                const double dd = std::abs(d[m]) + std::abs(d[m + 1]);
                if (std::abs(e[m]) <= eps * dd) break;
            }
            if (m != l) {
                if (iter++ == 60) throw std::runtime_error("sym_eig: QL iteration did not converge");
                double g = (d[l + 1] - d[l]) / (2.0 * e[l]);
                double r = std::hypot(g, 1.0);
                g = d[m] - d[l] + e[l] / (g + std::copysign(r, g));
                double s = 1.0, c = 1.0, p = 0.0;
                std::ptrdiff_t i;
                for (i = static_cast<std::ptrdiff_t>(m) - 1; i >= static_cast<std::ptrdiff_t>(l); --i) {
                    double f = s * e[i];
                    const double b = c * e[i];
                    e[i + 1] = (r = std::hypot(f, g));
                    if (r == 0.0) {
                        d[i + 1] -= p;
                        e[m] = 0.0;
                        break;
                    }
                    s = f / r;
                    c = g / r;
                    g = d[i + 1] - p;
                    r = (d[i] - g) * s + 2.0 * c * b;
                    d[i + 1] = g + (p = s * r);
                    g = c * r - b;
                    if (z) {
                        for (std::size_t k = 0; k < n; ++k) {
                            f = (*z)(k, i + 1);
                            (*z)(k, i + 1) = s * (*z)(k, i) + c * f;
                            (*z)(k, i) = c * (*z)(k, i) - s * f;
                        }
                    }
                }
                if (r == 0.0 && i >= static_cast<std::ptrdiff_t>(l)) continue;
                d[l] -= p;
                e[l] = g;
                e[m] = 0.0;
            }
        } while (m != l);
    }
}

}  // namespace

EigResult sym_eig(const DenseMatrix& m, bool with_vectors) {
    if (m.rows != m.cols) throw std::invalid_argument("sym_eig: matrix not square");
    const std::size_t n = m.rows;
    if (n == 0) throw std::invalid_argument("sym_eig: empty matrix");

    double norm = 0.0, asym = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            norm = std::max(norm, std::abs(m(i, j)));
            asym = std::max(asym, std::abs(m(i, j) - m(j, i)));
        }
    if (asym > 1e-10 * std::max(norm, 1e-300))
        throw std::invalid_argument("sym_eig: input is not symmetric");

    DenseMatrix work = m;
    // symmetrize exactly so roundoff asymmetry cannot bias the reduction
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < i; ++j) work(i, j) = work(j, i) = 0.5 * (work(i, j) + work(j, i));

    EigResult res;
    res.values.assign(n, 0.0);
    std::vector<double> e(n, 0.0);
    if (n == 1) {
        res.values[0] = work(0, 0);
        if (with_vectors) res.vectors = DenseMatrix::identity(1);
        return res;
    }
    tridiagonalize(work, res.values, e, with_vectors);
    ql_implicit(res.values, e, with_vectors ? &work : nullptr);

    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::sort(perm.begin(), perm.end(), [&](std::size_t a, std::size_t b) { return res.values[a] < res.values[b]; });
    std::vector<double> sorted(n);
    for (std::size_t i = 0; i < n; ++i) sorted[i] = res.values[perm[i]];
    res.values = std::move(sorted);
    if (with_vectors) {
        res.vectors = DenseMatrix(n, n);
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t i = 0; i < n; ++i) res.vectors(i, j) = work(i, perm[j]);
    }
    return res;
}

std::pair<double, double> sym_eig_extremal(const DenseMatrix& m) {
    const EigResult r = sym_eig(m, false);
    return {r.values.front(), r.values.back()};
}

double condition_number(const DenseMatrix& m) {
    const auto [lo, hi] = sym_eig_extremal(m);
    if (lo <= 0.0) throw std::domain_error("condition_number: matrix lost positive definiteness");
    return hi / lo;
}

double effective_condition(const std::vector<double>& eigenvalues, double rel_threshold) {
    double hi = 0.0;
    for (double v : eigenvalues) hi = std::max(hi, std::abs(v));
    if (hi == 0.0) throw std::domain_error("effective_condition: zero matrix");
    double lo = hi;
    for (double v : eigenvalues)
        if (v > rel_threshold * hi) lo = std::min(lo, v);
    return hi / lo;
}

}  // namespace bpxnn
