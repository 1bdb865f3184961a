#pragma once

// Multilevel hat-function frames for H1_0(0,1) and H1(0,1): H1 normalization
// constants, two-scale prolongations, and the multilevel synthesis operator
// (stacked frame coefficients -> finest-level coefficients) with its adjoint.
//
// Stacked coefficient ordering is level-major ascending (coarse levels first),
// node-minor inside a level. All coefficients refer to H1-normalized hats.

#include <array>
#include <cstddef>
#include <memory>
#include <vector>

#include "bpxnn/linalg.hpp"
#include "bpxnn/mesh_fem.hpp"
#include "bpxnn/precision.hpp"

namespace bpxnn {

struct FrameDescriptor {
    Space space = Space::H10;
    int J = 0;
    std::vector<std::size_t> level_sizes;    // n_j for j = 1..J
    std::vector<std::size_t> level_offsets;  // block offsets into the stacked vector
    std::size_t total_size = 0;              // N-hat
    std::vector<std::vector<double>> norms;  // ||phi_{j,k}||_{H1}, binary64

    std::size_t level_size(int j) const { return level_sizes[static_cast<std::size_t>(j - 1)]; }
    std::size_t level_offset(int j) const { return level_offsets[static_cast<std::size_t>(j - 1)]; }
    std::size_t finest_size() const { return level_sizes.back(); }

    // mesh node id of in-space index k on level j
    std::size_t node_of_index(int /*j*/, std::size_t k) const { return space == Space::H10 ? k + 1 : k; }
};

FrameDescriptor build_frame(Space space, int J);

// sqrt(2^{j+1} + 2^{1-j}/3): H1 norm of the unit-height interior hat on level j.
double h1_norm_hat(int j);
// sqrt(2^j + 2^{-j}/3): H1 norm of the boundary half-hat (H1 space only).
double h1_norm_boundary_hat(int j);

// Two-scale map from level j-1 to level j coefficients (normalized hats):
// stencil (1/2, 1, 1/2) scaled by the norm ratio of the touched fine/coarse
// hats. Stored column-wise; each column has at most 3 nonzeros.
template <class T>
struct ProlongColumn {
    int count = 0;
    std::array<std::int32_t, 3> idx{};
    std::array<T, 3> val{};
};

template <class T>
class FrameOps {
public:
    FrameOps() = default;
    FrameOps(const FrameDescriptor& desc);

    const FrameDescriptor& desc() const { return *desc_; }

    // fine = P_j * coarse (coarse holds level j-1 coefficients, 2 <= j <= J)
    void prolongate(int j, const std::vector<T>& coarse, std::vector<T>& fine) const;
    void prolongate_adjoint(int j, const std::vector<T>& fine, std::vector<T>& coarse) const;

    // v = w_J + P_J (w_{J-1} + P_{J-1} (...)) ; cost O(finest size)
    void synthesize(const std::vector<T>& stacked, std::vector<T>& finest) const;
    void adjoint(const std::vector<T>& finest, std::vector<T>& stacked) const;

    std::vector<T> synthesize(const std::vector<T>& stacked) const {
        std::vector<T> v;
        synthesize(stacked, v);
        return v;
    }
    std::vector<T> adjoint(const std::vector<T>& finest) const {
        std::vector<T> w;
        adjoint(finest, w);
        return w;
    }

    const std::vector<ProlongColumn<T>>& columns(int j) const { return prolong_[static_cast<std::size_t>(j - 2)]; }

private:
    const FrameDescriptor* desc_ = nullptr;
    // prolong_[j-2] holds the columns of P_j for j = 2..J
    std::vector<std::vector<ProlongColumn<T>>> prolong_;
    mutable std::vector<T> scratch_;
};

extern template class FrameOps<double>;
extern template class FrameOps<float>;
extern template class FrameOps<half>;

// Binary64 LinearOp view of the synthesis map (for densification and
// adjoint-consistency checks).
class BpxSynthesisOp final : public LinearOp {
public:
    explicit BpxSynthesisOp(const FrameDescriptor& desc) : desc_(&desc), ops_(desc) {}
    std::size_t dim_in() const override { return desc_->total_size; }
    std::size_t dim_out() const override { return desc_->finest_size(); }
    void apply(std::span<const double> in, std::span<double> out) const override;
    void apply_adjoint(std::span<const double> in, std::span<double> out) const override;

private:
    const FrameDescriptor* desc_;
    FrameOps<double> ops_;
};

// Pointwise evaluation helpers in binary64 (test oracles and metrics).
double eval_hat(Space space, int j, std::size_t index, double x);        // normalized hat value
double eval_hat_derivative(Space space, int j, std::size_t index, double x);
double eval_stacked(const FrameDescriptor& desc, const std::vector<double>& stacked, double x);

// Nodal values (function values at the level-J mesh nodes, boundary included)
// of the finest-coefficient vector produced by synthesis.
std::vector<double> finest_coeffs_to_values(const FrameDescriptor& desc, const std::vector<double>& finest);

}  // namespace bpxnn
