#pragma once

// Matrix-free evaluation of the preconditioned quadratic forms and losses.
//
// Stable path: stacked frame coefficients -> derivative/value samples at the
// finest Gauss points (the operator D), weighted pointwise by the form C_y.
// Unstable path: recursive synthesis to finest coefficients (H), element-local
// stiffness blocks (A_y), and the adjoint synthesis for gradients.
//
// Both paths agree in exact arithmetic; they differ profoundly in low
// working precision, which is the object of study.

#include <cstdint>
#include <vector>

#include "bpxnn/frames.hpp"
#include "bpxnn/linalg.hpp"
#include "bpxnn/mesh_fem.hpp"
#include "bpxnn/precision.hpp"

namespace bpxnn {

enum class Formulation { fosls, energy };

template <class T>
struct QuadSamples {
    std::vector<T> g;    // u'(x_q)
    std::vector<T> tau;  // sigma(x_q)   (FOSLS only)
    std::vector<T> p;    // sigma'(x_q)  (FOSLS only)
};

// Per-Gauss-point data of the bilinear form for one parameter y, in working
// precision. FOSLS blocks act on (g, tau, p) as w_q*(p^2 + (tau/a - g)^2);
// the energy form is the diagonal weight w_q * a(x_q) on g.
template <class T>
struct FormCy {
    std::vector<T> ainv;  // 1/a at each Gauss point (FOSLS)
    std::vector<T> a;     // a at each Gauss point (energy)
    T f = T(1.0);         // constant source, rounded once
};

namespace detail {

// Per-level gather table at the finest Gauss points. Absent boundary dofs are
// encoded as index 0 with zero samples, so all loops are branch-free.
template <class T>
struct LevelTable {
    std::vector<std::int32_t> il, ir;
    std::vector<T> val_l, val_r;  // normalized hat values
    std::vector<T> der_l, der_r;  // normalized hat derivatives
};

}  // namespace detail

template <class T>
class StableOperator {
public:
    StableOperator(Formulation form, const FrameDescriptor& u_desc, const FrameDescriptor* s_desc,
                   const DyadicMesh& mesh);

    Formulation formulation() const { return form_; }
    const DyadicMesh& mesh() const { return mesh_; }
    const FrameDescriptor& u_desc() const { return *u_desc_; }
    const FrameDescriptor& s_desc() const { return *s_desc_; }
    std::size_t n_points() const { return npoints_; }
    std::size_t dim() const { return dim_; }
    std::size_t u_dim() const { return u_dim_; }
    T weight() const { return wq_; }

    // samples of the synthesized functions at the Gauss points; never forms H
    void apply(const std::vector<T>& w, QuadSamples<T>& out) const;
    // exact adjoint (scatter-add in fixed level/point order)
    void apply_adjoint(const QuadSamples<T>& cot, std::vector<T>& out) const;

    const detail::LevelTable<T>& u_level(int j) const { return u_levels_[static_cast<std::size_t>(j - 1)]; }
    const detail::LevelTable<T>& s_level(int j) const { return s_levels_[static_cast<std::size_t>(j - 1)]; }

private:
    Formulation form_;
    const FrameDescriptor* u_desc_;
    const FrameDescriptor* s_desc_ = nullptr;
    DyadicMesh mesh_;
    std::size_t npoints_ = 0, dim_ = 0, u_dim_ = 0;
    T wq_{};
    std::vector<detail::LevelTable<T>> u_levels_, s_levels_;
};

template <class T>
FormCy<T> make_form(const DyadicMesh& mesh, const DiffusionField& field, double f = 1.0);

// Finest-level per-point tables for the nodal (local stiffness block) paths.
// `normalized` selects the H1-normalized frame basis or the raw nodal basis.
template <class T>
struct NodalTables {
    bool normalized = true;
    Formulation form = Formulation::fosls;
    std::size_t npoints = 0;
    std::size_t nu = 0, ns = 0;
    T wq{};
    std::vector<std::int32_t> u_il, u_ir;
    std::vector<T> u_der_l, u_der_r;
    std::vector<std::int32_t> s_il, s_ir;
    std::vector<T> s_val_l, s_val_r, s_der_l, s_der_r;
    std::vector<T> load_u;  // <f, phi_k> per u dof (energy linear term)
    std::vector<T> b_s;     // f * int phi'_k per sigma dof (FOSLS linear term)
};

template <class T>
NodalTables<T> make_nodal_tables(Formulation form, const DyadicMesh& mesh, const FrameDescriptor& u_desc,
                                 const FrameDescriptor* s_desc, bool normalized, double f = 1.0);

template <class T>
struct LossValue {
    T value{};
    bool overflow = false;
};

// ---- FOSLS losses --------------------------------------------------------

// sum_q w_q [ (sigma'(x_q)+f)^2 + (a^-1 sigma(x_q) - u'(x_q))^2 ], evaluated
// from QuadSamples; gradient via apply_adjoint of the pointwise derivatives.
template <class T>
LossValue<T> fosls_loss_stable(const StableOperator<T>& op, const FormCy<T>& form, const std::vector<T>& w,
                               std::vector<T>* grad = nullptr);

// nodal-coefficient core: gather, local 4x4 blocks, contraction, linear term
template <class T>
LossValue<T> fosls_loss_nodal(const NodalTables<T>& nt, const FormCy<T>& form, const std::vector<T>& vu,
                              const std::vector<T>& vs, std::vector<T>* grad_u = nullptr,
                              std::vector<T>* grad_s = nullptr);

// synthesis in working precision, nodal blocks, adjoint synthesis for grads
template <class T>
LossValue<T> fosls_loss_unstable(const FrameOps<T>& u_ops, const FrameOps<T>& s_ops, const NodalTables<T>& nt,
                                 const FormCy<T>& form, const std::vector<T>& w, std::vector<T>* grad = nullptr);

// Pure quadratic forms (no source term) for the precision studies.
template <class T>
T fosls_quad_form_stable(const StableOperator<T>& op, const FormCy<T>& form, const std::vector<T>& w);
template <class T>
T fosls_quad_form_unstable(const FrameOps<T>& u_ops, const FrameOps<T>& s_ops, const NodalTables<T>& nt,
                           const FormCy<T>& form, const std::vector<T>& w);

// ---- energy losses -------------------------------------------------------

// 1/2 sum_q w_q a(x_q) u'(x_q)^2 - <load, w>, load pulled back through the
// synthesis adjoint (precomputed in binary64, rounded once).
template <class T>
LossValue<T> energy_loss_stable(const StableOperator<T>& op, const FormCy<T>& form, const std::vector<T>& load_stacked,
                                const std::vector<T>& w, std::vector<T>* grad = nullptr);

template <class T>
LossValue<T> energy_loss_nodal(const NodalTables<T>& nt, const FormCy<T>& form, const std::vector<T>& vu,
                               std::vector<T>* grad_u = nullptr);

template <class T>
LossValue<T> energy_loss_unstable(const FrameOps<T>& u_ops, const NodalTables<T>& nt, const FormCy<T>& form,
                                  const std::vector<T>& w, std::vector<T>* grad = nullptr);

// Stacked load vector for the energy formulation: H^T applied to the
// normalized nodal load, binary64.
std::vector<double> energy_load_stacked(const DyadicMesh& mesh, const FrameDescriptor& u_desc, double f = 1.0);

// ---- binary64 analysis operators ----------------------------------------

// D as a LinearOp: stacked coefficients -> unweighted samples [g; tau; p]
// (the quadrature weights live in C_y).
class SampleOpF64 final : public LinearOp {
public:
    explicit SampleOpF64(const StableOperator<double>& op) : op_(&op) {}
    std::size_t dim_in() const override { return op_->dim(); }
    std::size_t dim_out() const override {
        return op_->formulation() == Formulation::fosls ? 3 * op_->n_points() : op_->n_points();
    }
    void apply(std::span<const double> in, std::span<double> out) const override;
    void apply_adjoint(std::span<const double> in, std::span<double> out) const override;

private:
    const StableOperator<double>* op_;
};

// w -> H^T A_y H w through the synthesis/nodal-block path (binary64).
class PreconditionedFormOp final : public LinearOp {
public:
    PreconditionedFormOp(const FrameOps<double>& u_ops, const FrameOps<double>& s_ops,
                         const NodalTables<double>& nt, const FormCy<double>& form)
        : u_ops_(&u_ops), s_ops_(&s_ops), nt_(&nt), form_(&form) {}
    std::size_t dim_in() const override;
    std::size_t dim_out() const override { return dim_in(); }
    void apply(std::span<const double> in, std::span<double> out) const override;
    void apply_adjoint(std::span<const double> in, std::span<double> out) const override { apply(in, out); }

private:
    const FrameOps<double>* u_ops_;
    const FrameOps<double>* s_ops_;
    const NodalTables<double>* nt_;
    const FormCy<double>* form_;
};

// w -> D^T C_y D w through the stable sample path (binary64).
class StableFormOp final : public LinearOp {
public:
    StableFormOp(const StableOperator<double>& op, const FormCy<double>& form) : op_(&op), form_(&form) {}
    std::size_t dim_in() const override { return op_->dim(); }
    std::size_t dim_out() const override { return op_->dim(); }
    void apply(std::span<const double> in, std::span<double> out) const override;
    void apply_adjoint(std::span<const double> in, std::span<double> out) const override { apply(in, out); }

private:
    const StableOperator<double>* op_;
    const FormCy<double>* form_;
};

// Dense finest-level form matrix (w.r.t. normalized or raw nodal basis).
DenseMatrix densify_nodal_form(const NodalTables<double>& nt, const FormCy<double>& form);

// Nonzero eigenvalues of the block-diagonal C_y (per Gauss point).
std::vector<double> cy_nonzero_eigenvalues(const StableOperator<double>& op, const FormCy<double>& form);

extern template class StableOperator<double>;
extern template class StableOperator<float>;
extern template class StableOperator<half>;

// ---- template definitions -------------------------------------------------

namespace detail {

template <class T>
LevelTable<T> build_level_table(const FrameDescriptor& desc, const DyadicMesh& mesh, int j) {
    const std::size_t np = 2 * mesh.n_elements;
    LevelTable<T> L;
    L.il.assign(np, 0);
    L.ir.assign(np, 0);
    L.val_l.assign(np, T(0.0));
    L.val_r.assign(np, T(0.0));
    L.der_l.assign(np, T(0.0));
    L.der_r.assign(np, T(0.0));

    const double hj = std::ldexp(1.0, -j);
    const double derj = std::ldexp(1.0, j);
    const auto& norms = desc.norms[static_cast<std::size_t>(j - 1)];
    const std::size_t last_node = std::size_t{1} << j;
    const int shift = mesh.J - j;

    for (std::size_t n = 0; n < mesh.n_elements; ++n) {
        const std::size_t cell = n >> shift;  // covering element on level j
        for (int q = 0; q < 2; ++q) {
            const std::size_t i = 2 * n + q;
            const double x = mesh.gauss_point(n, q);
            const double psi_r = (x - static_cast<double>(cell) * hj) / hj;
            const double psi_l = 1.0 - psi_r;
            // left node of the covering element
            {
                const std::size_t node = cell;
                const std::ptrdiff_t idx = desc.space == Space::H10 ? static_cast<std::ptrdiff_t>(node) - 1
                                                                    : static_cast<std::ptrdiff_t>(node);
                if (idx >= 0) {
                    const T norm = from_f64<T>(norms[static_cast<std::size_t>(idx)]);
                    L.il[i] = static_cast<std::int32_t>(idx);
                    L.val_l[i] = from_f64<T>(psi_l) / norm;
                    L.der_l[i] = from_f64<T>(-derj) / norm;
                }
            }
            // right node
            {
                const std::size_t node = cell + 1;
                const bool present = desc.space == Space::H1 || node < last_node;
                if (present) {
                    const std::ptrdiff_t idx = desc.space == Space::H10 ? static_cast<std::ptrdiff_t>(node) - 1
                                                                        : static_cast<std::ptrdiff_t>(node);
                    const T norm = from_f64<T>(norms[static_cast<std::size_t>(idx)]);
                    L.ir[i] = static_cast<std::int32_t>(idx);
                    L.val_r[i] = from_f64<T>(psi_r) / norm;
                    L.der_r[i] = from_f64<T>(derj) / norm;
                }
            }
        }
    }
    return L;
}

}  // namespace detail

template <class T>
StableOperator<T>::StableOperator(Formulation form, const FrameDescriptor& u_desc, const FrameDescriptor* s_desc,
                                  const DyadicMesh& mesh)
    : form_(form), u_desc_(&u_desc), s_desc_(s_desc), mesh_(mesh) {
    if (form == Formulation::fosls && s_desc == nullptr)
        throw std::invalid_argument("StableOperator: FOSLS requires a sigma frame");
    if (u_desc.J != mesh.J || (s_desc && s_desc->J != mesh.J))
        throw std::invalid_argument("StableOperator: frame/mesh level mismatch");
    npoints_ = 2 * mesh.n_elements;
    u_dim_ = u_desc.total_size;
    dim_ = u_dim_ + (form == Formulation::fosls ? s_desc->total_size : 0);
    wq_ = from_f64<T>(mesh.gauss_weight());
    u_levels_.reserve(static_cast<std::size_t>(mesh.J));
    for (int j = 1; j <= mesh.J; ++j) u_levels_.push_back(detail::build_level_table<T>(u_desc, mesh, j));
    if (form == Formulation::fosls) {
        s_levels_.reserve(static_cast<std::size_t>(mesh.J));
        for (int j = 1; j <= mesh.J; ++j) s_levels_.push_back(detail::build_level_table<T>(*s_desc, mesh, j));
    }
}

template <class T>
void StableOperator<T>::apply(const std::vector<T>& w, QuadSamples<T>& out) const {
    if (w.size() != dim_) throw std::invalid_argument("StableOperator::apply: dimension mismatch");
    const bool fosls = form_ == Formulation::fosls;
    out.g.assign(npoints_, T(0.0));
    if (fosls) {
        out.tau.assign(npoints_, T(0.0));
        out.p.assign(npoints_, T(0.0));
    } else {
        out.tau.clear();
        out.p.clear();
    }
    for (int j = 1; j <= mesh_.J; ++j) {
        const auto& L = u_levels_[static_cast<std::size_t>(j - 1)];
        const T* wu = w.data() + u_desc_->level_offset(j);
        for (std::size_t i = 0; i < npoints_; ++i)
            out.g[i] += wu[L.il[i]] * L.der_l[i] + wu[L.ir[i]] * L.der_r[i];
        if (fosls) {
            const auto& S = s_levels_[static_cast<std::size_t>(j - 1)];
            const T* ws = w.data() + u_dim_ + s_desc_->level_offset(j);
            for (std::size_t i = 0; i < npoints_; ++i)
                out.tau[i] += ws[S.il[i]] * S.val_l[i] + ws[S.ir[i]] * S.val_r[i];
            for (std::size_t i = 0; i < npoints_; ++i)
                out.p[i] += ws[S.il[i]] * S.der_l[i] + ws[S.ir[i]] * S.der_r[i];
        }
    }
}

template <class T>
void StableOperator<T>::apply_adjoint(const QuadSamples<T>& cot, std::vector<T>& out) const {
    if (cot.g.size() != npoints_) throw std::invalid_argument("StableOperator::apply_adjoint: dimension mismatch");
    const bool fosls = form_ == Formulation::fosls;
    out.assign(dim_, T(0.0));
    for (int j = 1; j <= mesh_.J; ++j) {
        const auto& L = u_levels_[static_cast<std::size_t>(j - 1)];
        T* gu = out.data() + u_desc_->level_offset(j);
        for (std::size_t i = 0; i < npoints_; ++i) {
            gu[L.il[i]] += cot.g[i] * L.der_l[i];
            gu[L.ir[i]] += cot.g[i] * L.der_r[i];
        }
        if (fosls) {
            const auto& S = s_levels_[static_cast<std::size_t>(j - 1)];
            T* gs = out.data() + u_dim_ + s_desc_->level_offset(j);
            for (std::size_t i = 0; i < npoints_; ++i) {
                gs[S.il[i]] += cot.tau[i] * S.val_l[i] + cot.p[i] * S.der_l[i];
                gs[S.ir[i]] += cot.tau[i] * S.val_r[i] + cot.p[i] * S.der_r[i];
            }
        }
    }
}

template <class T>
FormCy<T> make_form(const DyadicMesh& mesh, const DiffusionField& field, double f) {
    FormCy<T> c;
    const std::size_t np = 2 * mesh.n_elements;
    T y_t[4], ainv_t[4];
    for (int r = 0; r < 4; ++r) {
        y_t[r] = from_f64<T>(field.y[static_cast<std::size_t>(r)]);
        ainv_t[r] = T(1.0) / y_t[r];
    }
    c.a.resize(np);
    c.ainv.resize(np);
    for (std::size_t n = 0; n < mesh.n_elements; ++n) {
        for (int q = 0; q < 2; ++q) {
            const double x = mesh.gauss_point(n, q);
            int r = static_cast<int>(x * 4.0);
            if (r > 3) r = 3;
            c.a[2 * n + q] = y_t[r];
            c.ainv[2 * n + q] = ainv_t[r];
        }
    }
    c.f = from_f64<T>(f);
    return c;
}

template <class T>
NodalTables<T> make_nodal_tables(Formulation form, const DyadicMesh& mesh, const FrameDescriptor& u_desc,
                                 const FrameDescriptor* s_desc, bool normalized, double f) {
    if (form == Formulation::fosls && s_desc == nullptr)
        throw std::invalid_argument("make_nodal_tables: FOSLS requires a sigma frame");
    NodalTables<T> nt;
    nt.normalized = normalized;
    nt.form = form;
    nt.npoints = 2 * mesh.n_elements;
    nt.wq = from_f64<T>(mesh.gauss_weight());
    const int J = mesh.J;
    const std::size_t n_elem = mesh.n_elements;
    const double derj = std::ldexp(1.0, J);
    nt.nu = n_elem - 1;
    nt.u_il.assign(nt.npoints, 0);
    nt.u_ir.assign(nt.npoints, 0);
    nt.u_der_l.assign(nt.npoints, T(0.0));
    nt.u_der_r.assign(nt.npoints, T(0.0));

    const auto& u_norms = u_desc.norms.back();
    auto u_norm = [&](std::size_t idx) { return normalized ? from_f64<T>(u_norms[idx]) : T(1.0); };

    for (std::size_t n = 0; n < n_elem; ++n) {
        for (int q = 0; q < 2; ++q) {
            const std::size_t i = 2 * n + q;
            if (n > 0) {
                nt.u_il[i] = static_cast<std::int32_t>(n - 1);
                nt.u_der_l[i] = from_f64<T>(-derj) / u_norm(n - 1);
            }
            if (n + 1 < n_elem) {
                nt.u_ir[i] = static_cast<std::int32_t>(n);
                nt.u_der_r[i] = from_f64<T>(derj) / u_norm(n);
            }
        }
    }

    if (form == Formulation::fosls) {
        nt.ns = n_elem + 1;
        nt.s_il.assign(nt.npoints, 0);
        nt.s_ir.assign(nt.npoints, 0);
        nt.s_val_l.assign(nt.npoints, T(0.0));
        nt.s_val_r.assign(nt.npoints, T(0.0));
        nt.s_der_l.assign(nt.npoints, T(0.0));
        nt.s_der_r.assign(nt.npoints, T(0.0));
        const auto& s_norms = s_desc->norms.back();
        auto s_norm = [&](std::size_t idx) { return normalized ? from_f64<T>(s_norms[idx]) : T(1.0); };
        for (std::size_t n = 0; n < n_elem; ++n) {
            for (int q = 0; q < 2; ++q) {
                const std::size_t i = 2 * n + q;
                const double x = mesh.gauss_point(n, q);
                const double psi_r = (x - mesh.left(n)) / mesh.h;
                nt.s_il[i] = static_cast<std::int32_t>(n);
                nt.s_ir[i] = static_cast<std::int32_t>(n + 1);
                nt.s_val_l[i] = from_f64<T>(1.0 - psi_r) / s_norm(n);
                nt.s_val_r[i] = from_f64<T>(psi_r) / s_norm(n + 1);
                nt.s_der_l[i] = from_f64<T>(-derj) / s_norm(n);
                nt.s_der_r[i] = from_f64<T>(derj) / s_norm(n + 1);
            }
        }
        // f * int phi'_k : telescopes to the boundary hats (binary64, rounded once)
        std::vector<double> b(nt.ns, 0.0);
        b[0] = -f / (normalized ? s_norms[0] : 1.0);
        b[nt.ns - 1] = f / (normalized ? s_norms[nt.ns - 1] : 1.0);
        nt.b_s = round_vector<T>(b);
    } else {
        nt.ns = 0;
        std::vector<double> load = assemble_load(mesh, f, Space::H10);
        for (std::size_t k = 0; k < nt.nu; ++k)
            if (normalized) load[k] /= u_norms[k];
        nt.load_u = round_vector<T>(load);
    }
    return nt;
}

namespace detail {

// Pure quadratic-form core of the nodal FOSLS path: local 4x4 blocks
// assembled per element in working precision, contracted against the local
// dofs. grad_* receive the raw matvec A v (no factor 2).
template <class T>
T fosls_nodal_core(const NodalTables<T>& nt, const FormCy<T>& form, const std::vector<T>& vu,
                   const std::vector<T>& vs, std::vector<T>* grad_u, std::vector<T>* grad_s) {
    const std::size_t n_elem = nt.npoints / 2;
    const T wq = nt.wq;
    std::vector<T> terms(n_elem);
    if (grad_u) grad_u->assign(nt.nu, T(0.0));
    if (grad_s) grad_s->assign(nt.ns, T(0.0));
    for (std::size_t n = 0; n < n_elem; ++n) {
        const std::size_t i0 = 2 * n;
        const T x[4] = {vu[static_cast<std::size_t>(nt.u_il[i0])], vu[static_cast<std::size_t>(nt.u_ir[i0])],
                        vs[static_cast<std::size_t>(nt.s_il[i0])], vs[static_cast<std::size_t>(nt.s_ir[i0])]};
        T A[4][4];
        for (auto& row : A)
            for (auto& v : row) v = T(0.0);
        for (int q = 0; q < 2; ++q) {
            const std::size_t i = i0 + static_cast<std::size_t>(q);
            const T ai = form.ainv[i];
            const T g[4] = {nt.u_der_l[i], nt.u_der_r[i], T(0.0), T(0.0)};
            const T tau[4] = {T(0.0), T(0.0), nt.s_val_l[i], nt.s_val_r[i]};
            const T p[4] = {T(0.0), T(0.0), nt.s_der_l[i], nt.s_der_r[i]};
            T e[4];
            for (int a = 0; a < 4; ++a) e[a] = ai * tau[a] - g[a];
            for (int a = 0; a < 4; ++a)
                for (int b = 0; b < 4; ++b) A[a][b] += wq * (p[a] * p[b] + e[a] * e[b]);
        }
        T y[4];
        for (int a = 0; a < 4; ++a) y[a] = A[a][0] * x[0] + A[a][1] * x[1] + A[a][2] * x[2] + A[a][3] * x[3];
        terms[n] = x[0] * y[0] + x[1] * y[1] + x[2] * y[2] + x[3] * y[3];
        if (grad_u) {
            (*grad_u)[static_cast<std::size_t>(nt.u_il[i0])] += y[0];
            (*grad_u)[static_cast<std::size_t>(nt.u_ir[i0])] += y[1];
        }
        if (grad_s) {
            (*grad_s)[static_cast<std::size_t>(nt.s_il[i0])] += y[2];
            (*grad_s)[static_cast<std::size_t>(nt.s_ir[i0])] += y[3];
        }
    }
    return pairwise_sum(terms);
}

}  // namespace detail

template <class T>
LossValue<T> fosls_loss_stable(const StableOperator<T>& op, const FormCy<T>& form, const std::vector<T>& w,
                               std::vector<T>* grad, QuadSamples<T>& scratch) {
    op.apply(w, scratch);
    const T wq = op.weight();
    const T f = form.f;
    const T two_wq = T(2.0) * wq;
    const std::size_t np = op.n_points();
    std::vector<T> terms(np);
    for (std::size_t i = 0; i < np; ++i) {
        const T r1 = scratch.p[i] + f;
        const T r2 = form.ainv[i] * scratch.tau[i] - scratch.g[i];
        terms[i] = wq * (r1 * r1 + r2 * r2);
        if (grad) {
            const T t2 = two_wq * r2;
            scratch.g[i] = -t2;
            scratch.tau[i] = t2 * form.ainv[i];
            scratch.p[i] = two_wq * r1;
        }
    }
    const T loss = pairwise_sum(terms);
    if (grad) op.apply_adjoint(scratch, *grad);
    return {loss, !is_finite_value(loss)};
}

template <class T>
LossValue<T> fosls_loss_stable(const StableOperator<T>& op, const FormCy<T>& form, const std::vector<T>& w,
                               std::vector<T>* grad) {
    QuadSamples<T> scratch;
    return fosls_loss_stable(op, form, w, grad, scratch);
}

template <class T>
T fosls_quad_form_stable(const StableOperator<T>& op, const FormCy<T>& form, const std::vector<T>& w) {
    QuadSamples<T> s;
    op.apply(w, s);
    const T wq = op.weight();
    std::vector<T> terms(op.n_points());
    for (std::size_t i = 0; i < op.n_points(); ++i) {
        const T r1 = s.p[i];
        const T r2 = form.ainv[i] * s.tau[i] - s.g[i];
        terms[i] = wq * (r1 * r1 + r2 * r2);
    }
    return pairwise_sum(terms);
}

template <class T>
LossValue<T> fosls_loss_nodal(const NodalTables<T>& nt, const FormCy<T>& form, const std::vector<T>& vu,
                              const std::vector<T>& vs, std::vector<T>* grad_u, std::vector<T>* grad_s) {
    T loss = detail::fosls_nodal_core(nt, form, vu, vs, grad_u, grad_s);
    const T two = T(2.0);
    // the linear source term telescopes to the boundary sigma hats
    loss += two * nt.b_s[0] * vs[0];
    loss += two * nt.b_s[nt.ns - 1] * vs[nt.ns - 1];
    loss += form.f * form.f;
    if (grad_u)
        for (auto& v : *grad_u) v = two * v;
    if (grad_s) {
        for (std::size_t k = 0; k < nt.ns; ++k) (*grad_s)[k] = two * (*grad_s)[k] + two * nt.b_s[k];
    }
    return {loss, !is_finite_value(loss)};
}

template <class T>
T fosls_quad_form_unstable(const FrameOps<T>& u_ops, const FrameOps<T>& s_ops, const NodalTables<T>& nt,
                           const FormCy<T>& form, const std::vector<T>& w) {
    const std::size_t nu_hat = u_ops.desc().total_size;
    std::vector<T> wu(w.begin(), w.begin() + static_cast<std::ptrdiff_t>(nu_hat));
    std::vector<T> ws(w.begin() + static_cast<std::ptrdiff_t>(nu_hat), w.end());
    std::vector<T> vu, vs;
    u_ops.synthesize(wu, vu);
    s_ops.synthesize(ws, vs);
    return detail::fosls_nodal_core<T>(nt, form, vu, vs, nullptr, nullptr);
}

template <class T>
LossValue<T> fosls_loss_unstable(const FrameOps<T>& u_ops, const FrameOps<T>& s_ops, const NodalTables<T>& nt,
                                 const FormCy<T>& form, const std::vector<T>& w, std::vector<T>* grad) {
    const std::size_t nu_hat = u_ops.desc().total_size;
    std::vector<T> wu(w.begin(), w.begin() + static_cast<std::ptrdiff_t>(nu_hat));
    std::vector<T> ws(w.begin() + static_cast<std::ptrdiff_t>(nu_hat), w.end());
    std::vector<T> vu, vs;
    u_ops.synthesize(wu, vu);
    s_ops.synthesize(ws, vs);
    std::vector<T> gu, gs;
    LossValue<T> res =
        fosls_loss_nodal<T>(nt, form, vu, vs, grad ? &gu : nullptr, grad ? &gs : nullptr);
    if (grad) {
        std::vector<T> wu_g, ws_g;
        u_ops.adjoint(gu, wu_g);
        s_ops.adjoint(gs, ws_g);
        grad->resize(w.size());
        std::copy(wu_g.begin(), wu_g.end(), grad->begin());
        std::copy(ws_g.begin(), ws_g.end(), grad->begin() + static_cast<std::ptrdiff_t>(nu_hat));
    }
    return res;
}

template <class T>
LossValue<T> energy_loss_stable(const StableOperator<T>& op, const FormCy<T>& form, const std::vector<T>& load_stacked,
                                const std::vector<T>& w, std::vector<T>* grad) {
    QuadSamples<T> s;
    op.apply(w, s);
    const T wq = op.weight();
    const T half_t = T(0.5);
    std::vector<T> terms(op.n_points());
    for (std::size_t i = 0; i < op.n_points(); ++i) {
        const T c = wq * form.a[i];
        terms[i] = c * (s.g[i] * s.g[i]);
        s.g[i] = c * s.g[i];  // cotangent for the gradient pass
    }
    T loss = half_t * pairwise_sum(terms);
    std::vector<T> lin(w.size());
    for (std::size_t k = 0; k < w.size(); ++k) lin[k] = load_stacked[k] * w[k];
    loss -= pairwise_sum(lin);
    if (grad) {
        op.apply_adjoint(s, *grad);
        for (std::size_t k = 0; k < w.size(); ++k) (*grad)[k] -= load_stacked[k];
    }
    return {loss, !is_finite_value(loss)};
}

template <class T>
LossValue<T> energy_loss_nodal(const NodalTables<T>& nt, const FormCy<T>& form, const std::vector<T>& vu,
                               std::vector<T>* grad_u) {
    const std::size_t n_elem = nt.npoints / 2;
    const T wq = nt.wq;
    const T half_t = T(0.5);
    std::vector<T> terms(nt.npoints);
    if (grad_u) grad_u->assign(nt.nu, T(0.0));
    for (std::size_t n = 0; n < n_elem; ++n) {
        for (int q = 0; q < 2; ++q) {
            const std::size_t i = 2 * n + static_cast<std::size_t>(q);
            const T g = vu[static_cast<std::size_t>(nt.u_il[i])] * nt.u_der_l[i] +
                        vu[static_cast<std::size_t>(nt.u_ir[i])] * nt.u_der_r[i];
            const T c = wq * form.a[i];
            terms[i] = c * (g * g);
            if (grad_u) {
                const T cg = c * g;
                (*grad_u)[static_cast<std::size_t>(nt.u_il[i])] += cg * nt.u_der_l[i];
                (*grad_u)[static_cast<std::size_t>(nt.u_ir[i])] += cg * nt.u_der_r[i];
            }
        }
    }
    T loss = half_t * pairwise_sum(terms);
    std::vector<T> lin(nt.nu);
    for (std::size_t k = 0; k < nt.nu; ++k) lin[k] = nt.load_u[k] * vu[k];
    loss -= pairwise_sum(lin);
    if (grad_u)
        for (std::size_t k = 0; k < nt.nu; ++k) (*grad_u)[k] -= nt.load_u[k];
    return {loss, !is_finite_value(loss)};
}

template <class T>
LossValue<T> energy_loss_unstable(const FrameOps<T>& u_ops, const NodalTables<T>& nt, const FormCy<T>& form,
                                  const std::vector<T>& w, std::vector<T>* grad) {
    std::vector<T> vu;
    u_ops.synthesize(w, vu);
    std::vector<T> gu;
    LossValue<T> res = energy_loss_nodal<T>(nt, form, vu, grad ? &gu : nullptr);
    if (grad) u_ops.adjoint(gu, *grad);
    return res;
}

// ---- Gramian applications (Gauss-Newton metric) ---------------------------

// out = D^T C_y D w in working precision (both formulations).
template <class T>
void form_gram_apply(const StableOperator<T>& op, const FormCy<T>& form, const std::vector<T>& w,
                     std::vector<T>& out, QuadSamples<T>& scratch) {
    op.apply(w, scratch);
    const T wq = op.weight();
    if (op.formulation() == Formulation::fosls) {
        for (std::size_t i = 0; i < op.n_points(); ++i) {
            const T ai = form.ainv[i];
            const T g = scratch.g[i], tau = scratch.tau[i];
            scratch.g[i] = wq * (g - ai * tau);
            scratch.tau[i] = wq * (ai * (ai * tau) - ai * g);
            scratch.p[i] = wq * scratch.p[i];
        }
    } else {
        for (std::size_t i = 0; i < op.n_points(); ++i) scratch.g[i] = wq * form.a[i] * scratch.g[i];
    }
    op.apply_adjoint(scratch, out);
}

// (gu, gs) = A_y (vu, vs) through the element blocks (FOSLS nodal form).
template <class T>
void nodal_gram_apply(const NodalTables<T>& nt, const FormCy<T>& form, const std::vector<T>& vu,
                      const std::vector<T>& vs, std::vector<T>& gu, std::vector<T>& gs) {
    detail::fosls_nodal_core<T>(nt, form, vu, vs, &gu, &gs);
}

// gu = A_y vu for the energy nodal form.
template <class T>
void energy_nodal_gram_apply(const NodalTables<T>& nt, const FormCy<T>& form, const std::vector<T>& vu,
                             std::vector<T>& gu) {
    const std::size_t n_elem = nt.npoints / 2;
    const T wq = nt.wq;
    gu.assign(nt.nu, T(0.0));
    for (std::size_t n = 0; n < n_elem; ++n) {
        for (int q = 0; q < 2; ++q) {
            const std::size_t i = 2 * n + static_cast<std::size_t>(q);
            const T g = vu[static_cast<std::size_t>(nt.u_il[i])] * nt.u_der_l[i] +
                        vu[static_cast<std::size_t>(nt.u_ir[i])] * nt.u_der_r[i];
            const T cg = (wq * form.a[i]) * g;
            gu[static_cast<std::size_t>(nt.u_il[i])] += cg * nt.u_der_l[i];
            gu[static_cast<std::size_t>(nt.u_ir[i])] += cg * nt.u_der_r[i];
        }
    }
}

}  // namespace bpxnn
