#pragma once

// Coefficient networks mapping the 4-dimensional parameter vector to stacked
// frame coefficients (or raw nodal coefficients when run without frame
// preconditioning). Three architectures share a small layer IR:
//
//   full            one dense lift 4 -> N, then 8 rank-8 ResBlocks
//   separate_resnet one sub-ResNet per frame level and field (8 blocks each)
//   separate_frame  per target level: lift to level 1, then blocks and
//                   prolongation layers up to the level (4 blocks per stage)
//
// A ResBlock is z + A silu(W z + b_in) + b_out with A: n x r, W: r x n.
// Forward, reverse (VJP) and forward-mode (JVP) passes are exact and run
// entirely in the working precision; initialization is staged in binary64.

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "bpxnn/frames.hpp"
#include "bpxnn/precision.hpp"
#include "bpxnn/rng.hpp"
#include "bpxnn/stable_op.hpp"

namespace bpxnn {

enum class ArchKind { full, separate_resnet, separate_frame };

inline const char* arch_name(ArchKind k) {
    switch (k) {
        case ArchKind::full: return "full";
        case ArchKind::separate_resnet: return "separate_resnet";
        case ArchKind::separate_frame: return "separate_frame";
    }
    return "?";
}

inline ArchKind parse_arch(std::string_view s) {
    if (s == "full") return ArchKind::full;
    if (s == "separate_resnet") return ArchKind::separate_resnet;
    if (s == "separate_frame") return ArchKind::separate_frame;
    throw std::invalid_argument("unknown architecture: " + std::string(s));
}

template <class T>
T silu(T x) {
    const double xd = to_f64(x);
    return from_f64<T>(xd / (1.0 + std::exp(-xd)));
}

template <class T>
T silu_derivative(T x) {
    const double xd = to_f64(x);
    const double s = 1.0 / (1.0 + std::exp(-xd));
    return from_f64<T>(s * (1.0 + xd * (1.0 - s)));
}

struct TensorDesc {
    std::string name;
    std::size_t offset = 0, rows = 0, cols = 0;
    bool is_weight = false;  // weights get Xavier, biases zero
    std::size_t count() const { return rows * cols; }
};

struct LayerDesc {
    enum class Kind { input_linear, res_block, prolong };
    Kind kind = Kind::res_block;
    std::size_t dim_in = 0, dim_out = 0, rank = 0;
    int level = 0;  // prolong target level
    std::size_t w_off = 0, b_in_off = 0, a_off = 0, b_out_off = 0;
};

struct ChainDesc {
    Space space = Space::H10;  // prolongation space
    std::vector<LayerDesc> layers;
    std::size_t out_offset = 0, out_size = 0;
};

struct ArchSpec {
    ArchKind kind = ArchKind::full;
    Formulation formulation = Formulation::fosls;
    bool frame_output = true;  // false: raw nodal coefficients (full kind only)
    int J = 0;
    std::vector<ChainDesc> chains;
    std::vector<TensorDesc> tensors;
    std::size_t param_count = 0;
    std::size_t output_dim = 0;
    static constexpr std::size_t input_dim = 4;
};

ArchSpec build_architecture(ArchKind kind, Formulation formulation, const FrameDescriptor& u_desc,
                            const FrameDescriptor* s_desc, bool frame_output = true);

// i.i.d. Gaussian entries with std sqrt(2 / (rows + cols)), binary64.
std::vector<double> xavier_init(std::size_t rows, std::size_t cols, Rng& rng);

// Full parameter vector in binary64: Xavier for weights, zeros for biases.
std::vector<double> init_params_f64(const ArchSpec& spec, std::uint64_t seed);

template <class T>
std::vector<T> init_params(const ArchSpec& spec, std::uint64_t seed) {
    return round_vector<T>(init_params_f64(spec, seed));
}

// Per-evaluation scratch: activations and inner pre-activations per layer.
template <class T>
struct NetWorkspace {
    // z[c][l] is the activation entering layer l of chain c; z[c][layers] is
    // the chain output. t[c][l] holds the layer's inner pre-activation.
    std::vector<std::vector<std::vector<T>>> z, t;
};

template <class T>
class Network {
public:
    Network(const ArchSpec& spec, const FrameOps<T>* u_ops, const FrameOps<T>* s_ops)
        : spec_(&spec), u_ops_(u_ops), s_ops_(s_ops) {
        if (spec.kind == ArchKind::separate_frame && u_ops == nullptr)
            throw std::invalid_argument("Network: separate_frame needs prolongation tables");
    }

    const ArchSpec& spec() const { return *spec_; }

    void forward(const std::vector<T>& theta, const std::array<T, 4>& y, std::vector<T>& out,
                 NetWorkspace<T>* ws = nullptr) const;

    // gradient of <output, cotangent> w.r.t. theta; ws must hold the forward
    // intermediates of (theta, y). grad is overwritten.
    void backward(const std::vector<T>& theta, const std::array<T, 4>& y, const NetWorkspace<T>& ws,
                  const std::vector<T>& cotangent, std::vector<T>& grad) const;

    // exact directional derivative of the output w.r.t. theta
    void jvp(const std::vector<T>& theta, const std::array<T, 4>& y, const std::vector<T>& direction,
             std::vector<T>& out_tangent) const;

private:
    const FrameOps<T>* ops_for(Space s) const { return s == Space::H10 ? u_ops_ : s_ops_; }

    const ArchSpec* spec_;
    const FrameOps<T>* u_ops_;
    const FrameOps<T>* s_ops_;
};

// ---- template definitions -------------------------------------------------

namespace detail {

template <class T>
void dense_lift(const T* w, const T* b, const std::array<T, 4>& y, std::vector<T>& t, std::vector<T>& z,
                std::size_t n) {
    t.resize(n);
    z.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        T acc = w[i * 4] * y[0];
        acc += w[i * 4 + 1] * y[1];
        acc += w[i * 4 + 2] * y[2];
        acc += w[i * 4 + 3] * y[3];
        acc += b[i];
        t[i] = acc;
        z[i] = silu(acc);
    }
}

}  // namespace detail

template <class T>
void Network<T>::forward(const std::vector<T>& theta, const std::array<T, 4>& y, std::vector<T>& out,
                         NetWorkspace<T>* ws) const {
    const ArchSpec& sp = *spec_;
    if (theta.size() != sp.param_count) throw std::invalid_argument("forward: parameter size mismatch");
    out.assign(sp.output_dim, T(0.0));
    if (ws) {
        ws->z.assign(sp.chains.size(), {});
        ws->t.assign(sp.chains.size(), {});
    }
    std::vector<T> cur, next, inner;
    for (std::size_t c = 0; c < sp.chains.size(); ++c) {
        const ChainDesc& chain = sp.chains[c];
        if (ws) {
            ws->z[c].resize(chain.layers.size() + 1);
            ws->t[c].resize(chain.layers.size());
        }
        cur.clear();
        for (std::size_t l = 0; l < chain.layers.size(); ++l) {
            const LayerDesc& L = chain.layers[l];
            if (ws) ws->z[c][l] = cur;
            switch (L.kind) {
                case LayerDesc::Kind::input_linear: {
                    detail::dense_lift(theta.data() + L.w_off, theta.data() + L.b_in_off, y, inner, next, L.dim_out);
                    if (ws) ws->t[c][l] = inner;
                    break;
                }
                case LayerDesc::Kind::res_block: {
                    const std::size_t n = L.dim_out, r = L.rank;
                    const T* W = theta.data() + L.w_off;
                    const T* bi = theta.data() + L.b_in_off;
                    const T* A = theta.data() + L.a_off;
                    const T* bo = theta.data() + L.b_out_off;
                    inner.resize(r);
                    for (std::size_t k = 0; k < r; ++k) {
                        T acc = bi[k];
                        const T* row = W + k * n;
                        for (std::size_t i = 0; i < n; ++i) acc += row[i] * cur[i];
                        inner[k] = acc;
                    }
                    if (ws) ws->t[c][l] = inner;
                    next = cur;
                    for (std::size_t i = 0; i < n; ++i) {
                        T acc = next[i];
                        const T* row = A + i * r;
                        for (std::size_t k = 0; k < r; ++k) acc += row[k] * silu(inner[k]);
                        acc += bo[i];
                        next[i] = acc;
                    }
                    break;
                }
                case LayerDesc::Kind::prolong: {
                    ops_for(chain.space)->prolongate(L.level, cur, next);
                    break;
                }
            }
            cur.swap(next);
        }
        if (ws) ws->z[c][chain.layers.size()] = cur;
        for (std::size_t i = 0; i < chain.out_size; ++i) out[chain.out_offset + i] = cur[i];
    }
}

template <class T>
void Network<T>::backward(const std::vector<T>& theta, const std::array<T, 4>& y, const NetWorkspace<T>& ws,
                          const std::vector<T>& cotangent, std::vector<T>& grad) const {
    const ArchSpec& sp = *spec_;
    if (cotangent.size() != sp.output_dim) throw std::invalid_argument("backward: cotangent size mismatch");
    grad.assign(sp.param_count, T(0.0));
    std::vector<T> cot, cot_prev, dt;
    for (std::size_t c = 0; c < sp.chains.size(); ++c) {
        const ChainDesc& chain = sp.chains[c];
        cot.assign(cotangent.begin() + static_cast<std::ptrdiff_t>(chain.out_offset),
                   cotangent.begin() + static_cast<std::ptrdiff_t>(chain.out_offset + chain.out_size));
        for (std::size_t li = chain.layers.size(); li-- > 0;) {
            const LayerDesc& L = chain.layers[li];
            switch (L.kind) {
                case LayerDesc::Kind::input_linear: {
                    const std::vector<T>& t0 = ws.t[c][li];
                    T* gw = grad.data() + L.w_off;
                    T* gb = grad.data() + L.b_in_off;
                    for (std::size_t i = 0; i < L.dim_out; ++i) {
                        const T d = cot[i] * silu_derivative(t0[i]);
                        gw[i * 4] += d * y[0];
                        gw[i * 4 + 1] += d * y[1];
                        gw[i * 4 + 2] += d * y[2];
                        gw[i * 4 + 3] += d * y[3];
                        gb[i] += d;
                    }
                    break;
                }
                case LayerDesc::Kind::res_block: {
                    const std::size_t n = L.dim_out, r = L.rank;
                    const std::vector<T>& z_in = ws.z[c][li];
                    const std::vector<T>& t = ws.t[c][li];
                    const T* W = theta.data() + L.w_off;
                    const T* A = theta.data() + L.a_off;
                    T* gW = grad.data() + L.w_off;
                    T* gbi = grad.data() + L.b_in_off;
                    T* gA = grad.data() + L.a_off;
                    T* gbo = grad.data() + L.b_out_off;
                    dt.assign(r, T(0.0));
                    for (std::size_t i = 0; i < n; ++i) {
                        const T ci = cot[i];
                        gbo[i] += ci;
                        const T* arow = A + i * r;
                        T* garow = gA + i * r;
                        for (std::size_t k = 0; k < r; ++k) {
                            garow[k] += ci * silu(t[k]);
                            dt[k] += arow[k] * ci;
                        }
                    }
                    for (std::size_t k = 0; k < r; ++k) {
                        dt[k] = dt[k] * silu_derivative(t[k]);
                        gbi[k] += dt[k];
                        const T dk = dt[k];
                        T* gwrow = gW + k * n;
                        const T* zin = z_in.data();
                        for (std::size_t i = 0; i < n; ++i) gwrow[i] += dk * zin[i];
                    }
                    // cot_in = cot + W^T dt
                    cot_prev = cot;
                    for (std::size_t k = 0; k < r; ++k) {
                        const T dk = dt[k];
                        const T* wrow = W + k * n;
                        for (std::size_t i = 0; i < n; ++i) cot_prev[i] += wrow[i] * dk;
                    }
                    cot.swap(cot_prev);
                    break;
                }
                case LayerDesc::Kind::prolong: {
                    ops_for(chain.space)->prolongate_adjoint(L.level, cot, cot_prev);
                    cot.swap(cot_prev);
                    break;
                }
            }
        }
    }
}

template <class T>
void Network<T>::jvp(const std::vector<T>& theta, const std::array<T, 4>& y, const std::vector<T>& direction,
                     std::vector<T>& out_tangent) const {
    const ArchSpec& sp = *spec_;
    if (direction.size() != sp.param_count) throw std::invalid_argument("jvp: direction size mismatch");
    out_tangent.assign(sp.output_dim, T(0.0));
    NetWorkspace<T> ws;
    std::vector<T> out;
    forward(theta, y, out, &ws);
    std::vector<T> dz, dz_next, dti;
    for (std::size_t c = 0; c < sp.chains.size(); ++c) {
        const ChainDesc& chain = sp.chains[c];
        dz.clear();
        for (std::size_t l = 0; l < chain.layers.size(); ++l) {
            const LayerDesc& L = chain.layers[l];
            switch (L.kind) {
                case LayerDesc::Kind::input_linear: {
                    const std::vector<T>& t0 = ws.t[c][l];
                    const T* dw = direction.data() + L.w_off;
                    const T* db = direction.data() + L.b_in_off;
                    dz_next.resize(L.dim_out);
                    for (std::size_t i = 0; i < L.dim_out; ++i) {
                        T acc = dw[i * 4] * y[0];
                        acc += dw[i * 4 + 1] * y[1];
                        acc += dw[i * 4 + 2] * y[2];
                        acc += dw[i * 4 + 3] * y[3];
                        acc += db[i];
                        dz_next[i] = silu_derivative(t0[i]) * acc;
                    }
                    break;
                }
                case LayerDesc::Kind::res_block: {
                    const std::size_t n = L.dim_out, r = L.rank;
                    const std::vector<T>& z_in = ws.z[c][l];
                    const std::vector<T>& t = ws.t[c][l];
                    const T* W = theta.data() + L.w_off;
                    const T* A = theta.data() + L.a_off;
                    const T* dW = direction.data() + L.w_off;
                    const T* dbi = direction.data() + L.b_in_off;
                    const T* dA = direction.data() + L.a_off;
                    const T* dbo = direction.data() + L.b_out_off;
                    dti.resize(r);
                    for (std::size_t k = 0; k < r; ++k) {
                        T acc = dbi[k];
                        const T* wrow = W + k * n;
                        const T* dwrow = dW + k * n;
                        for (std::size_t i = 0; i < n; ++i) acc += dwrow[i] * z_in[i] + wrow[i] * dz[i];
                        dti[k] = acc;
                    }
                    dz_next = dz;
                    for (std::size_t i = 0; i < n; ++i) {
                        T acc = dz_next[i];
                        const T* arow = A + i * r;
                        const T* darow = dA + i * r;
                        for (std::size_t k = 0; k < r; ++k) {
                            const T s = silu(t[k]);
                            const T ds = silu_derivative(t[k]) * dti[k];
                            acc += darow[k] * s + arow[k] * ds;
                        }
                        acc += dbo[i];
                        dz_next[i] = acc;
                    }
                    break;
                }
                case LayerDesc::Kind::prolong: {
                    ops_for(chain.space)->prolongate(L.level, dz, dz_next);
                    break;
                }
            }
            dz.swap(dz_next);
        }
        for (std::size_t i = 0; i < chain.out_size; ++i) out_tangent[chain.out_offset + i] = dz[i];
    }
}

extern template class Network<double>;
extern template class Network<float>;
extern template class Network<half>;

}  // namespace bpxnn
