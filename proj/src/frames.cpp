#include "bpxnn/frames.hpp"

#include <cmath>
#include <stdexcept>

namespace bpxnn {

double h1_norm_hat(int j) { return std::sqrt(std::ldexp(1.0, j + 1) + std::ldexp(1.0, 1 - j) / 3.0); }

double h1_norm_boundary_hat(int j) { return std::sqrt(std::ldexp(1.0, j) + std::ldexp(1.0, -j) / 3.0); }

namespace {

// ||phi||^2_{H1} of the unit-height hat at mesh node `node` on level j,
// integrated with the two-point Gauss rule (exact: integrands are quadratic).
double hat_norm_quadrature(int j, std::size_t node) {
    const double h = std::ldexp(1.0, -j);
    const std::size_t n_elem = std::size_t{1} << j;
    const double xc = static_cast<double>(node) * h;
    const double gauss_off = h * 0.28867513459481288225457439025098;
    const double w = 0.5 * h;
    const double der2 = std::ldexp(1.0, 2 * j);
    double sum = 0.0;
    for (std::size_t e : {node == 0 ? n_elem : node - 1, node}) {
        if (e >= n_elem) continue;
        const double mid = (static_cast<double>(e) + 0.5) * h;
        for (int q = 0; q < 2; ++q) {
            const double x = mid + (q == 0 ? -gauss_off : gauss_off);
            const double v = 1.0 - std::abs(x - xc) / h;
            sum += w * (v * v + der2);
        }
    }
    return std::sqrt(sum);
}

}  // namespace

FrameDescriptor build_frame(Space space, int J) {
    if (J < 1) throw std::invalid_argument("build_frame: require J >= 1");
    FrameDescriptor d;
    d.space = space;
    d.J = J;
    d.level_sizes.resize(static_cast<std::size_t>(J));
    d.level_offsets.resize(static_cast<std::size_t>(J));
    d.norms.resize(static_cast<std::size_t>(J));
    std::size_t off = 0;
    for (int j = 1; j <= J; ++j) {
        const std::size_t nj =
            space == Space::H10 ? (std::size_t{1} << j) - 1 : (std::size_t{1} << j) + 1;
        d.level_sizes[j - 1] = nj;
        d.level_offsets[j - 1] = off;
        off += nj;
        auto& norms = d.norms[j - 1];
        norms.resize(nj);
        for (std::size_t k = 0; k < nj; ++k) norms[k] = hat_norm_quadrature(j, d.node_of_index(j, k));
    }
    d.total_size = off;
    return d;
}

template <class T>
FrameOps<T>::FrameOps(const FrameDescriptor& desc) : desc_(&desc) {
    const int J = desc.J;
    prolong_.resize(J >= 2 ? static_cast<std::size_t>(J - 1) : 0);
    for (int j = 2; j <= J; ++j) {
        const std::size_t nc = desc.level_size(j - 1);
        const std::size_t nf = desc.level_size(j);
        auto& cols = prolong_[static_cast<std::size_t>(j - 2)];
        cols.resize(nc);
        const auto& norm_c = desc.norms[static_cast<std::size_t>(j - 2)];
        const auto& norm_f = desc.norms[static_cast<std::size_t>(j - 1)];
        const std::size_t fine_max_node = std::size_t{1} << j;
        for (std::size_t c = 0; c < nc; ++c) {
            const std::size_t kc = desc.node_of_index(j - 1, c);
            const T nc_t = from_f64<T>(norm_c[c]);
            auto& col = cols[c];
            const std::size_t center = 2 * kc;
            for (int s = -1; s <= 1; ++s) {
                const std::ptrdiff_t node = static_cast<std::ptrdiff_t>(center) + s;
                if (node < 0 || node > static_cast<std::ptrdiff_t>(fine_max_node)) continue;
                std::ptrdiff_t idx = desc.space == Space::H10 ? node - 1 : node;
                if (idx < 0 || idx >= static_cast<std::ptrdiff_t>(nf)) continue;
                const T stencil = s == 0 ? T(1.0) : T(0.5);
                const T ratio = from_f64<T>(norm_f[static_cast<std::size_t>(idx)]) / nc_t;
                col.idx[col.count] = static_cast<std::int32_t>(idx);
                col.val[col.count] = stencil * ratio;
                ++col.count;
            }
        }
    }
}

template <class T>
void FrameOps<T>::prolongate(int j, const std::vector<T>& coarse, std::vector<T>& fine) const {
    if (j < 2 || j > desc_->J) throw std::invalid_argument("prolongate: level out of range");
    const auto& cols = columns(j);
    if (coarse.size() != cols.size()) throw std::invalid_argument("prolongate: coarse length mismatch");
    fine.assign(desc_->level_size(j), T(0.0));
    for (std::size_t c = 0; c < cols.size(); ++c) {
        const T wc = coarse[c];
        const auto& col = cols[c];
        for (int t = 0; t < col.count; ++t) fine[static_cast<std::size_t>(col.idx[t])] += col.val[t] * wc;
    }
}

template <class T>
void FrameOps<T>::prolongate_adjoint(int j, const std::vector<T>& fine, std::vector<T>& coarse) const {
    if (j < 2 || j > desc_->J) throw std::invalid_argument("prolongate_adjoint: level out of range");
    const auto& cols = columns(j);
    if (fine.size() != desc_->level_size(j)) throw std::invalid_argument("prolongate_adjoint: fine length mismatch");
    coarse.assign(cols.size(), T(0.0));
    for (std::size_t c = 0; c < cols.size(); ++c) {
        const auto& col = cols[c];
        T acc = T(0.0);
        for (int t = 0; t < col.count; ++t) acc += col.val[t] * fine[static_cast<std::size_t>(col.idx[t])];
        coarse[c] = acc;
    }
}

template <class T>
void FrameOps<T>::synthesize(const std::vector<T>& stacked, std::vector<T>& finest) const {
    const auto& d = *desc_;
    if (stacked.size() != d.total_size) throw std::invalid_argument("synthesize: stacked length mismatch");
    finest.assign(stacked.begin(), stacked.begin() + static_cast<std::ptrdiff_t>(d.level_size(1)));
    for (int j = 2; j <= d.J; ++j) {
        prolongate(j, finest, scratch_);
        const std::size_t o = d.level_offset(j);
        for (std::size_t i = 0; i < scratch_.size(); ++i) scratch_[i] += stacked[o + i];
        finest.swap(scratch_);
    }
}

template <class T>
void FrameOps<T>::adjoint(const std::vector<T>& finest, std::vector<T>& stacked) const {
    const auto& d = *desc_;
    if (finest.size() != d.finest_size()) throw std::invalid_argument("adjoint: finest length mismatch");
    stacked.assign(d.total_size, T(0.0));
    std::vector<T> cur = finest;
    std::vector<T> coarse;
    for (int j = d.J; j >= 2; --j) {
        const std::size_t o = d.level_offset(j);
        for (std::size_t i = 0; i < cur.size(); ++i) stacked[o + i] = cur[i];
        prolongate_adjoint(j, cur, coarse);
        cur.swap(coarse);
    }
    for (std::size_t i = 0; i < cur.size(); ++i) stacked[d.level_offset(1) + i] = cur[i];
}

template class FrameOps<double>;
template class FrameOps<float>;
template class FrameOps<half>;

void BpxSynthesisOp::apply(std::span<const double> in, std::span<double> out) const {
    std::vector<double> w(in.begin(), in.end()), v;
    ops_.synthesize(w, v);
    std::copy(v.begin(), v.end(), out.begin());
}

void BpxSynthesisOp::apply_adjoint(std::span<const double> in, std::span<double> out) const {
    std::vector<double> v(in.begin(), in.end()), w;
    ops_.adjoint(v, w);
    std::copy(w.begin(), w.end(), out.begin());
}

namespace {

double hat_norm_closed_form(Space space, int j, std::size_t node) {
    const std::size_t last = std::size_t{1} << j;
    if (space == Space::H1 && (node == 0 || node == last)) return h1_norm_boundary_hat(j);
    return h1_norm_hat(j);
}

}  // namespace

double eval_hat(Space space, int j, std::size_t index, double x) {
    const std::size_t node = space == Space::H10 ? index + 1 : index;
    const double h = std::ldexp(1.0, -j);
    const double t = 1.0 - std::abs(x - static_cast<double>(node) * h) / h;
    if (t <= 0.0 || x < 0.0 || x > 1.0) return 0.0;
    return t / hat_norm_closed_form(space, j, node);
}

double eval_hat_derivative(Space space, int j, std::size_t index, double x) {
    const std::size_t node = space == Space::H10 ? index + 1 : index;
    const double h = std::ldexp(1.0, -j);
    const double xc = static_cast<double>(node) * h;
    if (x <= xc - h || x >= xc + h || x < 0.0 || x > 1.0) return 0.0;
    const double slope = x < xc ? 1.0 / h : -1.0 / h;
    return slope / hat_norm_closed_form(space, j, node);
}

double eval_stacked(const FrameDescriptor& desc, const std::vector<double>& stacked, double x) {
    double sum = 0.0;
    for (int j = 1; j <= desc.J; ++j) {
        const double hj = std::ldexp(1.0, -j);
        const auto cell = static_cast<std::ptrdiff_t>(std::floor(x / hj));
        for (std::ptrdiff_t node = cell; node <= cell + 1; ++node) {
            std::ptrdiff_t idx = desc.space == Space::H10 ? node - 1 : node;
            if (idx < 0 || idx >= static_cast<std::ptrdiff_t>(desc.level_size(j))) continue;
            sum += stacked[desc.level_offset(j) + static_cast<std::size_t>(idx)] *
                   eval_hat(desc.space, j, static_cast<std::size_t>(idx), x);
        }
    }
    return sum;
}

std::vector<double> finest_coeffs_to_values(const FrameDescriptor& desc, const std::vector<double>& finest) {
    const int J = desc.J;
    const std::size_t n_nodes = (std::size_t{1} << J) + 1;
    std::vector<double> values(n_nodes, 0.0);
    const auto& norms = desc.norms.back();
    for (std::size_t k = 0; k < finest.size(); ++k) {
        const std::size_t node = desc.node_of_index(J, k);
        values[node] = finest[k] / norms[k];
    }
    return values;
}

}  // namespace bpxnn
