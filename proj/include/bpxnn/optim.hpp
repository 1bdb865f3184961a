#pragma once

// Training algorithms with precision-dependent hyperparameters: SGD and Adam
// under cosine annealing, L-BFGS with a strong Wolfe line search, and
// Gauss-Newton / natural gradient descent with matrix-free CG. Parameter and
// state vectors live in the working precision; line-search bracketing, inner
// products for control decisions, and schedule evaluation are binary64.

#include <cmath>
#include <deque>
#include <utility>
#include <vector>

#include "bpxnn/linalg.hpp"
#include "bpxnn/precision.hpp"

namespace bpxnn {

struct CosineSchedule {
    double eta0 = 1e-3;
    double eta_min = 1e-6;
    int t_max = 5000;
};

// eta_min + (eta0 - eta_min)(1 + cos(t pi / t_max)) / 2, clamped past t_max
inline double cosine_lr(const CosineSchedule& s, int t) {
    if (t >= s.t_max) return s.eta_min;
    return s.eta_min + 0.5 * (s.eta0 - s.eta_min) * (1.0 + std::cos(static_cast<double>(t) * M_PI / s.t_max));
}

inline double default_eta_min(ScalarKind k) {
    switch (k) {
        case ScalarKind::binary16: return 1e-4;
        case ScalarKind::binary32: return 1e-6;
        case ScalarKind::binary64: return 1e-10;
    }
    return 1e-6;
}

inline double default_adam_eps(ScalarKind k) {
    switch (k) {
        case ScalarKind::binary16: return 1e-4;
        case ScalarKind::binary32: return 1e-8;
        case ScalarKind::binary64: return 1e-16;
    }
    return 1e-8;
}

inline double default_lbfgs_tol(ScalarKind k) {
    switch (k) {
        case ScalarKind::binary16: return 1e-4;
        case ScalarKind::binary32: return 1e-8;
        case ScalarKind::binary64: return 1e-12;
    }
    return 1e-8;
}

inline double default_ngd_tol(ScalarKind k) {
    switch (k) {
        case ScalarKind::binary16: return 1e-9;
        case ScalarKind::binary32: return 1e-12;
        case ScalarKind::binary64: return 1e-14;
    }
    return 1e-12;
}

template <class T>
void sgd_step(std::vector<T>& theta, const std::vector<T>& grad, double lr) {
    if (theta.size() != grad.size()) throw std::invalid_argument("sgd_step: shape mismatch");
    const T lr_t = from_f64<T>(lr);
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= lr_t * grad[i];
}

template <class T>
struct AdamState {
    std::vector<T> m, v;
    long t = 0;
    double beta1 = 0.9, beta2 = 0.999;
    double eps = 1e-8;
    // Incoming gradients are premultiplied by this power of two (binary16
    // runs; keeps (1-beta2) g^2 above the subnormal range). The scale cancels
    // exactly inside the update, so the step equals the unscaled formula
    // wherever that formula does not underflow.
    double grad_scale = 1.0;
};

template <class T>
void adam_step(AdamState<T>& st, std::vector<T>& theta, const std::vector<T>& grad, double lr) {
    if (theta.size() != grad.size()) throw std::invalid_argument("adam_step: shape mismatch");
    if (st.m.empty()) {
        st.m.assign(theta.size(), T(0.0));
        st.v.assign(theta.size(), T(0.0));
    }
    ++st.t;
    // scalar controls in binary64, rounded once per step
    const T b1 = from_f64<T>(st.beta1);
    const T ob1 = from_f64<T>(1.0 - st.beta1);
    const T b2 = from_f64<T>(st.beta2);
    const T ob2 = from_f64<T>(1.0 - st.beta2);
    const T inv_bc1 = from_f64<T>(1.0 / (1.0 - std::pow(st.beta1, static_cast<double>(st.t))));
    const T inv_bc2 = from_f64<T>(1.0 / (1.0 - std::pow(st.beta2, static_cast<double>(st.t))));
    const T lr_t = from_f64<T>(lr);
    const T eps_t = from_f64<T>(st.eps * st.grad_scale);
    using std::sqrt;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const T g = grad[i];
        st.m[i] = b1 * st.m[i] + ob1 * g;
        st.v[i] = b2 * st.v[i] + ob2 * (g * g);
        const T mhat = st.m[i] * inv_bc1;
        const T vhat = st.v[i] * inv_bc2;
        const T denom = sqrt(vhat) + eps_t;
        theta[i] -= (lr_t * mhat) / denom;
    }
}

// ---- strong Wolfe line search ---------------------------------------------

struct WolfeParams {
    double c1 = 1e-4, c2 = 0.9;
    double alpha0 = 1.0;
    int max_iters = 20;
    int max_fevals = 25;
};

struct WolfeOutcome {
    double alpha = 0.0;
    double f = 0.0;
    double dphi = 0.0;
    int fevals = 0;
    bool success = false;
};

namespace detail {

// Phi: double alpha -> pair(f, dphi), both binary64 control values.
template <class Phi>
WolfeOutcome wolfe_zoom(Phi&& phi, double a_lo, double f_lo, double g_lo, double a_hi, double f_hi, double f0,
                        double g0, const WolfeParams& p, WolfeOutcome out, double best_a, double best_f) {
    for (int it = 0; it < p.max_iters && out.fevals < p.max_fevals; ++it) {
        // safeguarded: quadratic trial from the lo endpoint, bisection fallback
        double a = 0.5 * (a_lo + a_hi);
        const double da = a_hi - a_lo;
        const double denom = 2.0 * (f_hi - f_lo - g_lo * da);
        if (denom != 0.0) {
            const double quad = a_lo - g_lo * da * da / denom;
            const double lo = std::min(a_lo, a_hi), hi = std::max(a_lo, a_hi);
            const double margin = 0.1 * (hi - lo);
            if (quad > lo + margin && quad < hi - margin) a = quad;
        }
        const auto [f, g] = phi(a);
        ++out.fevals;
        if (f < best_f) {
            best_f = f;
            best_a = a;
        }
        if (f > f0 + p.c1 * a * g0 || f >= f_lo) {
            a_hi = a;
            f_hi = f;
        } else {
            if (std::abs(g) <= -p.c2 * g0) {
                out.alpha = a;
                out.f = f;
                out.dphi = g;
                out.success = true;
                return out;
            }
            if (g * (a_hi - a_lo) >= 0.0) {
                a_hi = a_lo;
                f_hi = f_lo;
            }
            a_lo = a;
            f_lo = f;
            g_lo = g;
        }
        if (std::abs(a_hi - a_lo) < 1e-16 * std::max(1.0, std::abs(a_lo))) break;
    }
    out.alpha = best_a;
    out.f = best_f;
    out.success = false;
    return out;
}

}  // namespace detail

// Bracketing strong Wolfe search; on failure the best-seen point is returned
// with success = false.
template <class Phi>
WolfeOutcome strong_wolfe(Phi&& phi, double f0, double g0, const WolfeParams& p) {
    WolfeOutcome out;
    if (g0 >= 0.0) return out;
    double a_prev = 0.0, f_prev = f0, g_prev = g0;
    double a = p.alpha0;
    double best_a = 0.0, best_f = f0;
    for (int it = 0; it < p.max_iters && out.fevals < p.max_fevals; ++it) {
        const auto [f, g] = phi(a);
        ++out.fevals;
        if (f < best_f) {
            best_f = f;
            best_a = a;
        }
        if (f > f0 + p.c1 * a * g0 || (it > 0 && f >= f_prev)) {
            return detail::wolfe_zoom(phi, a_prev, f_prev, g_prev, a, f, f0, g0, p, out, best_a, best_f);
        }
        if (std::abs(g) <= -p.c2 * g0) {
            out.alpha = a;
            out.f = f;
            out.dphi = g;
            out.success = true;
            return out;
        }
        if (g >= 0.0) {
            return detail::wolfe_zoom(phi, a, f, g, a_prev, f_prev, f0, g0, p, out, best_a, best_f);
        }
        a_prev = a;
        f_prev = f;
        g_prev = g;
        a *= 2.0;
    }
    out.alpha = best_a;
    out.f = best_f;
    out.success = false;
    return out;
}

// ---- L-BFGS ----------------------------------------------------------------

struct StepReport {
    double f0 = 0.0;      // loss entering the step
    double f = 0.0;       // loss after the step
    double dphi0 = 0.0;   // directional derivative at the start
    double dphi = 0.0;    // directional derivative at the accepted point
    double alpha = 0.0;
    int fevals = 0;
    bool converged = false;
    bool wolfe_success = false;
    bool line_search_failed = false;
    bool steepest_descent_fallback = false;
    bool gradient_fallback = false;  // NGD: CG failed twice
};

template <class T>
struct LbfgsState {
    int capacity = 100;
    std::deque<std::pair<std::vector<T>, std::vector<T>>> pairs;  // (s, y), newest at back
    double tol_grad = 1e-12;
    double tol_change = 1e-12;
    WolfeParams wolfe{};  // max 20 iterations, 25 evaluations per step
    long failures = 0;
};

// Obj: double value_and_grad(const std::vector<T>& theta, std::vector<T>& grad)
template <class T, class Obj>
StepReport lbfgs_step(LbfgsState<T>& st, Obj&& obj, std::vector<T>& theta) {
    StepReport rep;
    std::vector<T> g(theta.size());
    rep.f0 = obj.value_and_grad(theta, g);
    rep.f = rep.f0;

    double gmax = 0.0;
    for (const T& v : g) gmax = std::max(gmax, std::abs(to_f64(v)));
    if (gmax <= st.tol_grad) {
        rep.converged = true;
        return rep;
    }

    // two-loop recursion
    std::vector<T> q = g;
    const std::size_t m = st.pairs.size();
    std::vector<double> alpha(m), rho(m);
    for (std::size_t idx = m; idx-- > 0;) {
        const auto& [s_i, y_i] = st.pairs[idx];
        rho[idx] = 1.0 / dot_f64(y_i, s_i);
        alpha[idx] = rho[idx] * dot_f64(s_i, q);
        const T a_t = from_f64<T>(alpha[idx]);
        for (std::size_t i = 0; i < q.size(); ++i) q[i] -= a_t * y_i[i];
    }
    if (m > 0) {
        const auto& [s_l, y_l] = st.pairs.back();
        const double gamma = dot_f64(s_l, y_l) / dot_f64(y_l, y_l);
        const T g_t = from_f64<T>(gamma);
        for (auto& v : q) v = g_t * v;
    }
    for (std::size_t idx = 0; idx < m; ++idx) {
        const auto& [s_i, y_i] = st.pairs[idx];
        const double beta = rho[idx] * dot_f64(y_i, q);
        const T c_t = from_f64<T>(alpha[idx] - beta);
        for (std::size_t i = 0; i < q.size(); ++i) q[i] += c_t * s_i[i];
    }
    std::vector<T> d(q.size());
    for (std::size_t i = 0; i < q.size(); ++i) d[i] = -q[i];

    double dphi0 = dot_f64(g, d);
    if (!(dphi0 < 0.0)) {
        // not a descent direction: steepest descent fallback
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = -g[i];
        dphi0 = -dot_f64(g, g);
        rep.steepest_descent_fallback = true;
    }
    rep.dphi0 = dphi0;

    std::vector<T> theta_trial(theta.size()), g_trial(theta.size());
    double cached_alpha = -1.0;
    auto phi = [&](double a) {
        const T a_t = from_f64<T>(a);
        for (std::size_t i = 0; i < theta.size(); ++i) theta_trial[i] = theta[i] + a_t * d[i];
        const double f = obj.value_and_grad(theta_trial, g_trial);
        cached_alpha = a;
        return std::make_pair(f, dot_f64(g_trial, d));
    };
    const WolfeOutcome wo = strong_wolfe(phi, rep.f0, dphi0, st.wolfe);
    rep.fevals = wo.fevals;
    rep.alpha = wo.alpha;
    rep.wolfe_success = wo.success;
    if (!wo.success) {
        ++st.failures;
        rep.line_search_failed = true;
        if (wo.alpha == 0.0) return rep;  // no improvement found, keep theta
    }
    if (cached_alpha != wo.alpha) phi(wo.alpha);
    rep.f = wo.f;
    rep.dphi = wo.dphi;

    // curvature pair from the accepted move
    std::vector<T> s_new(theta.size()), y_new(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) {
        s_new[i] = theta_trial[i] - theta[i];
        y_new[i] = g_trial[i] - g[i];
    }
    double smax = 0.0;
    for (const T& v : s_new) smax = std::max(smax, std::abs(to_f64(v)));
    theta = theta_trial;
    if (dot_f64(s_new, y_new) > 0.0) {
        st.pairs.emplace_back(std::move(s_new), std::move(y_new));
        if (static_cast<int>(st.pairs.size()) > st.capacity) st.pairs.pop_front();
    }
    if (smax <= st.tol_change) rep.converged = true;
    return rep;
}

// ---- Gauss-Newton / natural gradient descent -------------------------------

struct NgdConfig {
    double step0 = 1.0;
    int cg_max_iters = 20;
    double cg_tol = 1e-12;
    double eps_reg = 1e-12;
    WolfeParams wolfe{1e-4, 0.9, 1.0, 20, 20};
};

// Obj additionally provides gramian_apply(v, out) = (J^T J) v at the theta of
// the last value_and_grad call.
template <class T, class Obj>
StepReport ngd_step(const NgdConfig& cfg, Obj&& obj, std::vector<T>& theta) {
    StepReport rep;
    std::vector<T> g(theta.size());
    rep.f0 = obj.value_and_grad(theta, g);
    rep.f = rep.f0;
    const double gnorm = std::sqrt(dot_f64(g, g));
    if (gnorm == 0.0) {
        rep.converged = true;
        return rep;
    }

    std::vector<T> rhs(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) rhs[i] = -g[i];

    auto solve = [&](double eps) {
        const T eps_t = from_f64<T>(eps);
        auto apply = [&](const std::vector<T>& v, std::vector<T>& out) {
            obj.gramian_apply(v, out);
            for (std::size_t i = 0; i < v.size(); ++i) out[i] += eps_t * v[i];
        };
        return cg_solve<T>(apply, rhs, cfg.cg_tol, cfg.cg_max_iters);
    };

    auto cg = solve(cfg.eps_reg);
    if (cg.status == CgStatus::numerical_failure) cg = solve(2.0 * cfg.eps_reg);

    std::vector<T> d;
    if (cg.status == CgStatus::numerical_failure) {
        d = rhs;  // gradient-descent fallback
        rep.gradient_fallback = true;
    } else {
        d = std::move(cg.x);
    }
    double dphi0 = dot_f64(g, d);
    if (!(dphi0 < 0.0)) {
        d = rhs;
        dphi0 = -dot_f64(g, g);
        rep.steepest_descent_fallback = true;
    }
    rep.dphi0 = dphi0;

    std::vector<T> theta_trial(theta.size()), g_trial(theta.size());
    double cached_alpha = -1.0;
    auto phi = [&](double a) {
        const T a_t = from_f64<T>(a);
        for (std::size_t i = 0; i < theta.size(); ++i) theta_trial[i] = theta[i] + a_t * d[i];
        const double f = obj.value_and_grad(theta_trial, g_trial);
        cached_alpha = a;
        return std::make_pair(f, dot_f64(g_trial, d));
    };
    WolfeParams wp = cfg.wolfe;
    wp.alpha0 = cfg.step0;
    const WolfeOutcome wo = strong_wolfe(phi, rep.f0, dphi0, wp);
    rep.fevals = wo.fevals;
    rep.alpha = wo.alpha;
    rep.wolfe_success = wo.success;
    if (!wo.success) {
        rep.line_search_failed = true;
        if (wo.alpha == 0.0) return rep;
    }
    if (cached_alpha != wo.alpha) phi(wo.alpha);
    rep.f = wo.f;
    rep.dphi = wo.dphi;
    theta = theta_trial;
    return rep;
}

}  // namespace bpxnn
