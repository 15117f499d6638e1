#pragma once
// State-space layers: DPLR (A = Λ − PQ*) with bilinear discretization, and
// the diagonal linear RNN with fixed all-ones input vector.
//
// Complex parameters are stored as real tensors with a trailing [re, im]
// axis. DPLR keeps one member of each conjugate pair (N/2 entries); the
// full N-state system is the pair plus its conjugates, so kernels come out
// real up to rounding.

#include <complex>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "spt/tensor.hpp"

namespace spt {

using cplx = std::complex<double>;
using CMatrix = Eigen::MatrixXcd;
using CVector = Eigen::VectorXcd;

struct DplrParams {
    std::size_t state_size = 0;  // N, even
    std::size_t channels = 0;    // H
    std::size_t directions = 1;
    Tensor lambda;  // [N/2, 2]
    Tensor p;       // [N/2, 2]
    Tensor q;       // [N/2, 2]
    Tensor b;       // [N/2, 2]
    Tensor c;       // [dirs, H, N/2, 2]
    Tensor log_dt;  // [H]

    std::vector<Tensor> tensors() const { return {lambda, p, q, b, c, log_dt}; }
};

struct DlrParams {
    std::size_t state_size = 0;
    std::size_t channels = 0;
    std::size_t directions = 1;
    Tensor lambda;  // [H, N, 2], discrete-time poles
    Tensor c;       // [dirs, H, N, 2]

    std::vector<Tensor> tensors() const { return {lambda, c}; }
};

using SsmParams = std::variant<DplrParams, DlrParams>;

struct KernelBank {
    Tensor values;  // [dirs, H, L]
    std::string provenance;
};

// [half; conj(half)] from m interleaved (re, im) pairs.
CVector full_vector(std::span<const double> half, std::size_t m);

// A = diag(Λ) − P·Q^H on the full N-state system.
CMatrix dplr_assemble(const DplrParams& params);
CMatrix dplr_assemble(const CVector& lambda, const CVector& p, const CVector& q);

struct Discretized {
    CMatrix a_bar;
    CVector b_bar;
};

// Ā = (I − Δ/2·A)⁻¹(I + Δ/2·A), B̄ = (I − Δ/2·A)⁻¹ΔB. Singular resolvent
// raises DiscretizationError naming `channel`.
Discretized bilinear_discretize(const CMatrix& a, const CVector& b, double dt, std::size_t channel = 0);

// Discrete full system for one channel, C per direction.
struct ChannelSystem {
    CMatrix a_bar;
    CVector b_bar;
    std::vector<CVector> c;
};
ChannelSystem dplr_channel_system(const DplrParams& params, std::size_t channel);
ChannelSystem dlr_channel_system(const DlrParams& params, std::size_t channel);

// Differentiable kernel banks [dirs, H, L].
Tensor dplr_kernel(const DplrParams& params, std::size_t length);
Tensor dlr_kernel(const DlrParams& params, std::size_t length);
KernelBank materialize(const SsmParams& params, std::size_t length);

// y_n = Re(Cᵀx_n), x_n = Ā x_{n-1} + B̄ u_n, x_{-1} = 0. Oracle only.
std::vector<double> recurrence_scan(const CMatrix& a_bar, const CVector& b_bar, const CVector& c,
                                    std::span<const double> u);

// HiPPO-LegS pieces as real matrices: A, P (so A + PPᵀ is normal), B.
struct HippoLegs {
    Eigen::MatrixXd a;
    Eigen::VectorXd p;
    Eigen::VectorXd b;
};
HippoLegs hippo_legs(std::size_t n);

enum class InitKind { Structured, Random };

DplrParams init_dplr(InitKind kind, std::size_t n, std::size_t h, std::size_t directions, std::uint64_t seed,
                     double sigma = 0.1);
DlrParams init_dlr(InitKind kind, std::size_t n, std::size_t h, std::size_t directions, std::uint64_t seed,
                   double sigma = 0.1);

// Random parameters with a strictly stable continuous-time A, used by the
// equivalence suites.
DplrParams draw_stable_dplr(std::size_t n, std::size_t h, std::size_t directions, std::uint64_t seed);
DlrParams draw_stable_dlr(std::size_t n, std::size_t h, std::size_t directions, std::uint64_t seed);

// Projects every pole back into |Λ| ≤ max_modulus.
void clamp_dlr_modulus(DlrParams& params, double max_modulus = 1.0 + 1e-6);

std::size_t ssm_param_count(const SsmParams& params);

}  // namespace spt
