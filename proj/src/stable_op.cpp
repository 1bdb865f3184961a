#include "bpxnn/stable_op.hpp"

namespace bpxnn {

template class StableOperator<double>;
template class StableOperator<float>;
template class StableOperator<half>;

void SampleOpF64::apply(std::span<const double> in, std::span<double> out) const {
    std::vector<double> w(in.begin(), in.end());
    QuadSamples<double> s;
    op_->apply(w, s);
    const std::size_t np = op_->n_points();
    std::copy(s.g.begin(), s.g.end(), out.begin());
    if (op_->formulation() == Formulation::fosls) {
        std::copy(s.tau.begin(), s.tau.end(), out.begin() + static_cast<std::ptrdiff_t>(np));
        std::copy(s.p.begin(), s.p.end(), out.begin() + static_cast<std::ptrdiff_t>(2 * np));
    }
}

void SampleOpF64::apply_adjoint(std::span<const double> in, std::span<double> out) const {
    const std::size_t np = op_->n_points();
    QuadSamples<double> s;
    s.g.assign(in.begin(), in.begin() + static_cast<std::ptrdiff_t>(np));
    if (op_->formulation() == Formulation::fosls) {
        s.tau.assign(in.begin() + static_cast<std::ptrdiff_t>(np), in.begin() + static_cast<std::ptrdiff_t>(2 * np));
        s.p.assign(in.begin() + static_cast<std::ptrdiff_t>(2 * np), in.end());
    }
    std::vector<double> w;
    op_->apply_adjoint(s, w);
    std::copy(w.begin(), w.end(), out.begin());
}

std::size_t PreconditionedFormOp::dim_in() const {
    return u_ops_->desc().total_size + s_ops_->desc().total_size;
}

void PreconditionedFormOp::apply(std::span<const double> in, std::span<double> out) const {
    const std::size_t nu_hat = u_ops_->desc().total_size;
    std::vector<double> wu(in.begin(), in.begin() + static_cast<std::ptrdiff_t>(nu_hat));
    std::vector<double> ws(in.begin() + static_cast<std::ptrdiff_t>(nu_hat), in.end());
    std::vector<double> vu, vs;
    u_ops_->synthesize(wu, vu);
    s_ops_->synthesize(ws, vs);
    std::vector<double> gu, gs;
    detail::fosls_nodal_core<double>(*nt_, *form_, vu, vs, &gu, &gs);
    std::vector<double> wu_g, ws_g;
    u_ops_->adjoint(gu, wu_g);
    s_ops_->adjoint(gs, ws_g);
    std::copy(wu_g.begin(), wu_g.end(), out.begin());
    std::copy(ws_g.begin(), ws_g.end(), out.begin() + static_cast<std::ptrdiff_t>(nu_hat));
}

void StableFormOp::apply(std::span<const double> in, std::span<double> out) const {
    std::vector<double> w(in.begin(), in.end());
    QuadSamples<double> s;
    op_->apply(w, s);
    const double wq = op_->weight();
    if (op_->formulation() == Formulation::fosls) {
        for (std::size_t i = 0; i < s.g.size(); ++i) {
            const double ai = form_->ainv[i];
            const double g = s.g[i], tau = s.tau[i];
            s.g[i] = wq * (g - ai * tau);
            s.tau[i] = wq * (ai * ai * tau - ai * g);
            s.p[i] = wq * s.p[i];
        }
    } else {
        for (std::size_t i = 0; i < s.g.size(); ++i) s.g[i] = wq * form_->a[i] * s.g[i];
    }
    std::vector<double> res;
    op_->apply_adjoint(s, res);
    std::copy(res.begin(), res.end(), out.begin());
}

DenseMatrix densify_nodal_form(const NodalTables<double>& nt, const FormCy<double>& form) {
    if (nt.form == Formulation::fosls) {
        const std::size_t dim = nt.nu + nt.ns;
        DenseMatrix m(dim, dim);
        const std::size_t n_elem = nt.npoints / 2;
        for (std::size_t n = 0; n < n_elem; ++n) {
            const std::size_t i0 = 2 * n;
            // global dof ids; absent u dofs contribute zero rows/columns
            const std::size_t id[4] = {static_cast<std::size_t>(nt.u_il[i0]), static_cast<std::size_t>(nt.u_ir[i0]),
                                       nt.nu + static_cast<std::size_t>(nt.s_il[i0]),
                                       nt.nu + static_cast<std::size_t>(nt.s_ir[i0])};
            for (int q = 0; q < 2; ++q) {
                const std::size_t i = i0 + static_cast<std::size_t>(q);
                const double ai = form.ainv[i];
                const double g[4] = {nt.u_der_l[i], nt.u_der_r[i], 0.0, 0.0};
                const double tau[4] = {0.0, 0.0, nt.s_val_l[i], nt.s_val_r[i]};
                const double p[4] = {0.0, 0.0, nt.s_der_l[i], nt.s_der_r[i]};
                double e[4];
                for (int a = 0; a < 4; ++a) e[a] = ai * tau[a] - g[a];
                for (int a = 0; a < 4; ++a)
                    for (int b = 0; b < 4; ++b) m(id[a], id[b]) += nt.wq * (p[a] * p[b] + e[a] * e[b]);
            }
        }
        return m;
    }
    DenseMatrix m(nt.nu, nt.nu);
    const std::size_t n_elem = nt.npoints / 2;
    for (std::size_t n = 0; n < n_elem; ++n) {
        for (int q = 0; q < 2; ++q) {
            const std::size_t i = 2 * n + static_cast<std::size_t>(q);
            const double c = nt.wq * form.a[i];
            const std::size_t il = static_cast<std::size_t>(nt.u_il[i]), ir = static_cast<std::size_t>(nt.u_ir[i]);
            m(il, il) += c * nt.u_der_l[i] * nt.u_der_l[i];
            m(il, ir) += c * nt.u_der_l[i] * nt.u_der_r[i];
            m(ir, il) += c * nt.u_der_r[i] * nt.u_der_l[i];
            m(ir, ir) += c * nt.u_der_r[i] * nt.u_der_r[i];
        }
    }
    return m;
}

std::vector<double> energy_load_stacked(const DyadicMesh& mesh, const FrameDescriptor& u_desc, double f) {
    std::vector<double> raw = assemble_load(mesh, f, Space::H10);
    const auto& norms = u_desc.norms.back();
    for (std::size_t k = 0; k < raw.size(); ++k) raw[k] /= norms[k];
    FrameOps<double> ops(u_desc);
    std::vector<double> stacked;
    ops.adjoint(raw, stacked);
    return stacked;
}

std::vector<double> cy_nonzero_eigenvalues(const StableOperator<double>& op, const FormCy<double>& form) {
    std::vector<double> ev;
    const double wq = op.weight();
    if (op.formulation() == Formulation::fosls) {
        ev.reserve(2 * op.n_points());
        for (std::size_t i = 0; i < op.n_points(); ++i) {
            const double ai = form.ainv[i];
            ev.push_back(wq * (1.0 + ai * ai));  // the (g, tau) square
            ev.push_back(wq);                    // the p entry
        }
    } else {
        ev.reserve(op.n_points());
        for (std::size_t i = 0; i < op.n_points(); ++i) ev.push_back(wq * form.a[i]);
    }
    return ev;
}

}  // namespace bpxnn
