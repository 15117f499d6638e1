#include "spt/ssm.hpp"

#include <cmath>
#include <memory>
#include <numbers>

#include "spt/error.hpp"

namespace spt {

namespace {

void check_half(const Tensor& t, const Shape& expected, const char* name) {
    if (t.shape() != expected)
        throw DimensionError(std::string(name) + " has shape " + shape_str(t.shape()) + ", expected " +
                             shape_str(expected));
}

void validate(const DplrParams& p) {
    if (p.state_size == 0 || p.state_size % 2 != 0) throw ConfigError("DPLR state size must be even and positive");
    if (p.directions != 1 && p.directions != 2) throw ConfigError("directions must be 1 or 2");
    const std::size_t m = p.state_size / 2;
    check_half(p.lambda, {m, 2}, "lambda");
    check_half(p.p, {m, 2}, "P");
    check_half(p.q, {m, 2}, "Q");
    check_half(p.b, {m, 2}, "B");
    check_half(p.c, {p.directions, p.channels, m, 2}, "C");
    check_half(p.log_dt, {p.channels}, "log_dt");
}

void validate(const DlrParams& p) {
    if (p.state_size == 0) throw ConfigError("DLR state size must be positive");
    if (p.directions != 1 && p.directions != 2) throw ConfigError("directions must be 1 or 2");
    check_half(p.lambda, {p.channels, p.state_size, 2}, "lambda");
    check_half(p.c, {p.directions, p.channels, p.state_size, 2}, "C");
}

CVector plain_vector(std::span<const double> v, std::size_t n) {
    CVector out(static_cast<Eigen::Index>(n));
    for (std::size_t j = 0; j < n; ++j) out[static_cast<Eigen::Index>(j)] = cplx(v[2 * j], v[2 * j + 1]);
    return out;
}

// Adds the full-system gradient G (G = ∂/∂re + i∂/∂im) into half storage:
// entry j gets G_j + conj(G_{j+m}).
void fold_into(std::span<double> dst, const CVector& g, std::size_t m) {
    for (std::size_t j = 0; j < m; ++j) {
        const cplx v = g[static_cast<Eigen::Index>(j)] + std::conj(g[static_cast<Eigen::Index>(j + m)]);
        dst[2 * j] += v.real();
        dst[2 * j + 1] += v.imag();
    }
}

double imag_tolerance(double re) { return 1e-6 * std::max(1.0, std::abs(re)); }

struct DplrChannelCache {
    double dt = 0.0;
    Eigen::PartialPivLU<CMatrix> lu;
    CMatrix a_bar;
    CVector b_bar;
    CMatrix states;  // row k holds s_kᵀ
};

Eigen::PartialPivLU<CMatrix> factor_resolvent(const CMatrix& m, std::size_t channel) {
    Eigen::PartialPivLU<CMatrix> lu(m);
    const double rc = lu.rcond();
    if (!(rc > 1e-13))
        throw DiscretizationError("resolvent I - dt/2*A is singular for channel " + std::to_string(channel));
    return lu;
}

}  // namespace

CVector full_vector(std::span<const double> half, std::size_t m) {
    CVector out(static_cast<Eigen::Index>(2 * m));
    for (std::size_t j = 0; j < m; ++j) {
        const cplx v(half[2 * j], half[2 * j + 1]);
        out[static_cast<Eigen::Index>(j)] = v;
        out[static_cast<Eigen::Index>(j + m)] = std::conj(v);
    }
    return out;
}

CMatrix dplr_assemble(const CVector& lambda, const CVector& p, const CVector& q) {
    CMatrix a = -p * q.adjoint();
    a.diagonal() += lambda;
    return a;
}

CMatrix dplr_assemble(const DplrParams& params) {
    validate(params);
    const std::size_t m = params.state_size / 2;
    return dplr_assemble(full_vector(params.lambda.data(), m), full_vector(params.p.data(), m),
                         full_vector(params.q.data(), m));
}

Discretized bilinear_discretize(const CMatrix& a, const CVector& b, double dt, std::size_t channel) {
    if (!(dt > 0.0)) throw DiscretizationError("non-positive step for channel " + std::to_string(channel));
    const auto n = a.rows();
    const CMatrix eye = CMatrix::Identity(n, n);
    auto lu = factor_resolvent(eye - (dt / 2.0) * a, channel);
    return {lu.solve(eye + (dt / 2.0) * a), lu.solve(dt * b)};
}

ChannelSystem dplr_channel_system(const DplrParams& params, std::size_t channel) {
    validate(params);
    if (channel >= params.channels) throw DimensionError("channel index out of range");
    const std::size_t m = params.state_size / 2;
    const double dt = std::exp(params.log_dt.data()[channel]);
    auto disc = bilinear_discretize(dplr_assemble(params), full_vector(params.b.data(), m), dt, channel);
    ChannelSystem sys{std::move(disc.a_bar), std::move(disc.b_bar), {}};
    for (std::size_t d = 0; d < params.directions; ++d)
        sys.c.push_back(full_vector(params.c.data().subspan(((d * params.channels) + channel) * m * 2), m));
    return sys;
}

ChannelSystem dlr_channel_system(const DlrParams& params, std::size_t channel) {
    validate(params);
    if (channel >= params.channels) throw DimensionError("channel index out of range");
    const std::size_t n = params.state_size;
    CVector lam = plain_vector(params.lambda.data().subspan(channel * n * 2), n);
    ChannelSystem sys{lam.asDiagonal().toDenseMatrix(), CVector::Ones(static_cast<Eigen::Index>(n)), {}};
    for (std::size_t d = 0; d < params.directions; ++d)
        sys.c.push_back(plain_vector(params.c.data().subspan(((d * params.channels) + channel) * n * 2), n));
    return sys;
}

Tensor dplr_kernel(const DplrParams& params, std::size_t length) {
    validate(params);
    if (length == 0) throw LengthError("kernel length must be at least 1");
    const std::size_t n = params.state_size, m = n / 2, h_count = params.channels, dirs = params.directions;
    const auto ni = static_cast<Eigen::Index>(n);
    const auto li = static_cast<Eigen::Index>(length);

    const CVector lam = full_vector(params.lambda.data(), m);
    const CVector pv = full_vector(params.p.data(), m);
    const CVector qv = full_vector(params.q.data(), m);
    const CVector bv = full_vector(params.b.data(), m);
    const CMatrix a = dplr_assemble(lam, pv, qv);
    const CMatrix eye = CMatrix::Identity(ni, ni);

    std::vector<CVector> cs(dirs * h_count);
    for (std::size_t i = 0; i < cs.size(); ++i) cs[i] = full_vector(params.c.data().subspan(i * m * 2), m);

    auto caches = std::make_shared<std::vector<DplrChannelCache>>(h_count);
    std::vector<double> out(dirs * h_count * length);
    for (std::size_t h = 0; h < h_count; ++h) {
        auto& cache = (*caches)[h];
        cache.dt = std::exp(params.log_dt.data()[h]);
        cache.lu = factor_resolvent(eye - (cache.dt / 2.0) * a, h);
        cache.a_bar = cache.lu.solve(eye + (cache.dt / 2.0) * a);
        cache.b_bar = cache.lu.solve(cache.dt * bv);
        cache.states.resize(li, ni);
        CVector s = cache.b_bar;
        for (std::size_t k = 0; k < length; ++k) {
            cache.states.row(static_cast<Eigen::Index>(k)) = s.transpose();
            for (std::size_t d = 0; d < dirs; ++d) {
                const cplx z = cs[d * h_count + h].cwiseProduct(s).sum();
                if (!std::isfinite(z.real()) || !std::isfinite(z.imag()))
                    throw StabilityError("DPLR kernel overflow in channel " + std::to_string(h));
                if (std::abs(z.imag()) > imag_tolerance(z.real()))
                    throw NumericError("DPLR kernel lost conjugate symmetry in channel " + std::to_string(h) +
                                       " at lag " + std::to_string(k));
                out[(d * h_count + h) * length + k] = z.real();
            }
            if (k + 1 < length) s = cache.a_bar * s;
        }
    }

    BackwardFn backward = [caches, cs, a, lam, pv, qv, bv, n, m, h_count, dirs, length](
                              std::span<const double> g, GradSpans& gi) {
        const auto ni = static_cast<Eigen::Index>(n);
        const auto li = static_cast<Eigen::Index>(length);
        CMatrix g_a = CMatrix::Zero(ni, ni);
        CVector g_b = CVector::Zero(ni);
        for (std::size_t h = 0; h < h_count; ++h) {
            const auto& cache = (*caches)[h];
            const CMatrix a_bar_h = cache.a_bar.adjoint();
            CMatrix adj(li, ni);
            CVector acc = CVector::Zero(ni);
            for (std::size_t kk = length; kk-- > 0;) {
                CVector next = CVector::Zero(ni);
                for (std::size_t d = 0; d < dirs; ++d)
                    next += cs[d * h_count + h].conjugate() * g[(d * h_count + h) * length + kk];
                if (kk + 1 < length) next += a_bar_h * acc;
                acc = next;
                adj.row(static_cast<Eigen::Index>(kk)) = acc.transpose();
            }
            if (!gi[4].empty())
                for (std::size_t d = 0; d < dirs; ++d) {
                    Eigen::VectorXcd gk(li);
                    for (std::size_t kk = 0; kk < length; ++kk)
                        gk[static_cast<Eigen::Index>(kk)] = g[(d * h_count + h) * length + kk];
                    const CVector g_c = cache.states.conjugate().transpose() * gk;
                    fold_into(gi[4].subspan((d * h_count + h) * m * 2, m * 2), g_c, m);
                }
            const bool need_system = !gi[0].empty() || !gi[1].empty() || !gi[2].empty() || !gi[3].empty() ||
                                     !gi[5].empty();
            if (!need_system) continue;

            CMatrix g_x(ni, ni + 1);
            if (length > 1)
                g_x.leftCols(ni) =
                    adj.bottomRows(li - 1).transpose() * cache.states.topRows(li - 1).conjugate();
            else
                g_x.leftCols(ni).setZero();
            g_x.col(ni) = adj.row(0).transpose();

            CMatrix x(ni, ni + 1);
            x.leftCols(ni) = cache.a_bar;
            x.col(ni) = cache.b_bar;
            const CMatrix g_y = cache.lu.adjoint().solve(g_x);
            const CMatrix g_m = -g_y * x.adjoint();
            const CMatrix g_r = g_y.leftCols(ni);
            const CVector g_db = g_y.col(ni);
            const double dt = cache.dt;
            g_a += (-dt / 2.0) * g_m + (dt / 2.0) * g_r;
            g_b += dt * g_db;
            if (!gi[5].empty()) {
                const cplx s = (g_m.conjugate().cwiseProduct(-a / 2.0)).sum() +
                               (g_r.conjugate().cwiseProduct(a / 2.0)).sum() +
                               (g_db.conjugate().cwiseProduct(bv)).sum();
                gi[5][h] += dt * s.real();
            }
        }
        if (!gi[0].empty()) fold_into(gi[0], g_a.diagonal(), m);
        if (!gi[1].empty()) fold_into(gi[1], -g_a * qv, m);
        if (!gi[2].empty()) fold_into(gi[2], -g_a.adjoint() * pv, m);
        if (!gi[3].empty()) fold_into(gi[3], g_b, m);
    };
    return custom_op("dplr_kernel", {dirs, h_count, length}, std::move(out),
                     {params.lambda, params.p, params.q, params.b, params.c, params.log_dt}, std::move(backward));
}

Tensor dlr_kernel(const DlrParams& params, std::size_t length) {
    validate(params);
    if (length == 0) throw LengthError("kernel length must be at least 1");
    const std::size_t n = params.state_size, h_count = params.channels, dirs = params.directions;
    auto lam_data = params.lambda.data();
    auto c_data = params.c.data();
    std::vector<double> out(dirs * h_count * length, 0.0);
    for (std::size_t h = 0; h < h_count; ++h)
        for (std::size_t j = 0; j < n; ++j) {
            const std::size_t li = (h * n + j) * 2;
            const cplx lam(lam_data[li], lam_data[li + 1]);
            std::vector<cplx> c(dirs);
            for (std::size_t d = 0; d < dirs; ++d) {
                const std::size_t ci = ((d * h_count + h) * n + j) * 2;
                c[d] = cplx(c_data[ci], c_data[ci + 1]);
            }
            cplx z(1.0, 0.0);
            for (std::size_t l = 0; l < length; ++l) {
                for (std::size_t d = 0; d < dirs; ++d) out[(d * h_count + h) * length + l] += (c[d] * z).real();
                z *= lam;
            }
            if (!std::isfinite(z.real()) || !std::isfinite(z.imag()))
                throw StabilityError("DLR pole " + std::to_string(j) + " of channel " + std::to_string(h) +
                                     " overflows at length " + std::to_string(length));
        }
    for (double v : out)
        if (!std::isfinite(v)) throw StabilityError("DLR kernel overflow");

    BackwardFn backward = [lam_t = params.lambda, c_t = params.c, n, h_count, dirs, length](
                              std::span<const double> g, GradSpans& gi) {
        auto lam_data = lam_t.data();
        auto c_data = c_t.data();
        for (std::size_t h = 0; h < h_count; ++h)
            for (std::size_t j = 0; j < n; ++j) {
                const std::size_t li = (h * n + j) * 2;
                const cplx lam(lam_data[li], lam_data[li + 1]);
                std::vector<cplx> gc(dirs, 0.0), c(dirs);
                for (std::size_t d = 0; d < dirs; ++d) {
                    const std::size_t ci = ((d * h_count + h) * n + j) * 2;
                    c[d] = cplx(c_data[ci], c_data[ci + 1]);
                }
                cplx glam(0.0, 0.0), z(1.0, 0.0), zprev(0.0, 0.0);
                for (std::size_t l = 0; l < length; ++l) {
                    for (std::size_t d = 0; d < dirs; ++d) {
                        const double gv = g[(d * h_count + h) * length + l];
                        gc[d] += gv * std::conj(z);
                        if (l > 0) glam += gv * std::conj(static_cast<double>(l) * c[d] * zprev);
                    }
                    zprev = z;
                    z *= lam;
                }
                if (!gi[0].empty()) {
                    gi[0][li] += glam.real();
                    gi[0][li + 1] += glam.imag();
                }
                if (!gi[1].empty())
                    for (std::size_t d = 0; d < dirs; ++d) {
                        const std::size_t ci = ((d * h_count + h) * n + j) * 2;
                        gi[1][ci] += gc[d].real();
                        gi[1][ci + 1] += gc[d].imag();
                    }
            }
    };
    return custom_op("dlr_kernel", {dirs, h_count, length}, std::move(out), {params.lambda, params.c},
                     std::move(backward));
}

KernelBank materialize(const SsmParams& params, std::size_t length) {
    if (const auto* d = std::get_if<DplrParams>(&params)) return {dplr_kernel(*d, length), "dplr/bilinear"};
    return {dlr_kernel(std::get<DlrParams>(params), length), "dlr/direct"};
}

std::vector<double> recurrence_scan(const CMatrix& a_bar, const CVector& b_bar, const CVector& c,
                                    std::span<const double> u) {
    if (a_bar.rows() != a_bar.cols() || b_bar.size() != a_bar.rows() || c.size() != a_bar.rows())
        throw DimensionError("recurrence_scan: inconsistent system sizes");
    std::vector<double> y(u.size());
    CVector x = CVector::Zero(a_bar.rows());
    for (std::size_t t = 0; t < u.size(); ++t) {
        x = a_bar * x + b_bar * u[t];
        y[t] = c.cwiseProduct(x).sum().real();
    }
    return y;
}

HippoLegs hippo_legs(std::size_t n) {
    const auto ni = static_cast<Eigen::Index>(n);
    HippoLegs h{Eigen::MatrixXd::Zero(ni, ni), Eigen::VectorXd(ni), Eigen::VectorXd(ni)};
    for (Eigen::Index r = 0; r < ni; ++r) {
        const auto rd = static_cast<double>(r);
        h.p[r] = std::sqrt(rd + 0.5);
        h.b[r] = std::sqrt(2.0 * rd + 1.0);
        for (Eigen::Index k = 0; k <= r; ++k) {
            const auto kd = static_cast<double>(k);
            h.a(r, k) = r > k ? -std::sqrt((2.0 * rd + 1.0) * (2.0 * kd + 1.0)) : -(rd + 1.0);
        }
    }
    return h;
}

namespace {

std::vector<double> log_uniform_dt(std::size_t h, Rng& rng) {
    std::uniform_real_distribution<double> u(std::log(1e-3), std::log(1e-1));
    std::vector<double> v(h);
    for (auto& x : v) x = u(rng);
    return v;
}

Tensor normal_tensor(Shape shape, double sigma, Rng& rng) {
    std::normal_distribution<double> d(0.0, sigma);
    std::vector<double> v(numel_of(shape));
    for (auto& x : v) x = d(rng);
    return Tensor::from(std::move(shape), std::move(v));
}

void store(std::vector<double>& dst, std::size_t j, cplx v) {
    dst[2 * j] = v.real();
    dst[2 * j + 1] = v.imag();
}

template <typename Params>
Params& mark_trainable(Params& p) {
    for (auto t : p.tensors()) t.set_requires_grad(true);
    return p;
}

}  // namespace

DplrParams init_dplr(InitKind kind, std::size_t n, std::size_t h, std::size_t directions, std::uint64_t seed,
                     double sigma) {
    if (n == 0 || n % 2 != 0) throw ConfigError("DPLR state size must be even, got " + std::to_string(n));
    if (directions != 1 && directions != 2) throw ConfigError("directions must be 1 or 2");
    const std::size_t m = n / 2;
    Rng rng = make_rng(seed, "dplr-init");
    DplrParams p{n, h, directions, {}, {}, {}, {}, {}, {}};
    if (kind == InitKind::Random) {
        p.lambda = normal_tensor({m, 2}, sigma, rng);
        p.p = normal_tensor({m, 2}, sigma, rng);
        p.q = normal_tensor({m, 2}, sigma, rng);
        p.b = normal_tensor({m, 2}, sigma, rng);
        p.c = normal_tensor({directions, h, m, 2}, sigma, rng);
    } else {
        const auto legs = hippo_legs(n);
        const auto ni = static_cast<Eigen::Index>(n);
        const Eigen::MatrixXd s = legs.a + legs.p * legs.p.transpose();
        // S = -I/2 + skew, so -i(S + I/2) is Hermitian with eigenvalues ±ω.
        const CMatrix herm = cplx(0.0, -1.0) * (s + 0.5 * Eigen::MatrixXd::Identity(ni, ni)).cast<cplx>();
        Eigen::SelfAdjointEigenSolver<CMatrix> es(herm);
        std::vector<double> lam(2 * m), pv(2 * m), bv(2 * m);
        for (std::size_t j = 0; j < m; ++j) {
            // Eigenvalues ascend, so the positive half sits at the top.
            const Eigen::Index col = ni - 1 - static_cast<Eigen::Index>(j);
            const CVector v = es.eigenvectors().col(col);
            store(lam, j, cplx(-0.5, es.eigenvalues()[col]));
            store(pv, j, v.dot(legs.p.cast<cplx>()));
            store(bv, j, v.dot(legs.b.cast<cplx>()));
        }
        p.lambda = Tensor::from({m, 2}, lam);
        p.p = Tensor::from({m, 2}, pv);
        p.q = Tensor::from({m, 2}, pv);
        p.b = Tensor::from({m, 2}, bv);
        p.c = normal_tensor({directions, h, m, 2}, std::sqrt(0.5), rng);
    }
    p.log_dt = Tensor::from({h}, log_uniform_dt(h, rng));
    return mark_trainable(p);
}

DlrParams init_dlr(InitKind kind, std::size_t n, std::size_t h, std::size_t directions, std::uint64_t seed,
                   double sigma) {
    if (n == 0) throw ConfigError("DLR state size must be positive");
    if (directions != 1 && directions != 2) throw ConfigError("directions must be 1 or 2");
    Rng rng = make_rng(seed, "dlr-init");
    DlrParams p{n, h, directions, {}, {}};
    if (kind == InitKind::Random) {
        p.lambda = normal_tensor({h, n, 2}, sigma, rng);
        p.c = normal_tensor({directions, h, n, 2}, sigma, rng);
        clamp_dlr_modulus(p);
    } else {
        const auto dt = log_uniform_dt(h, rng);
        std::vector<double> lam(h * n * 2);
        for (std::size_t c = 0; c < h; ++c)
            for (std::size_t j = 0; j < n; ++j) {
                const double theta =
                    std::numbers::pi * (-1.0 + (2.0 * static_cast<double>(j) + 1.0) / static_cast<double>(n));
                store(lam, c * n + j, std::exp(cplx(-0.5 * std::exp(dt[c]), theta)));
            }
        p.lambda = Tensor::from({h, n, 2}, std::move(lam));
        p.c = normal_tensor({directions, h, n, 2}, std::sqrt(0.5 / static_cast<double>(n)), rng);
    }
    return mark_trainable(p);
}

DplrParams draw_stable_dplr(std::size_t n, std::size_t h, std::size_t directions, std::uint64_t seed) {
    if (n == 0 || n % 2 != 0) throw ConfigError("DPLR state size must be even");
    const std::size_t m = n / 2;
    Rng rng = make_rng(seed, "stable-dplr");
    std::uniform_real_distribution<double> re(-1.0, -0.1), im(-3.0, 3.0);
    std::vector<double> lam(2 * m);
    for (std::size_t j = 0; j < m; ++j) store(lam, j, cplx(re(rng), im(rng)));
    // ‖P‖‖Q‖ stays well below the 0.1 spectral margin of Λ.
    const double pq = 0.02;
    DplrParams p{n, h, directions, Tensor::from({m, 2}, lam), normal_tensor({m, 2}, pq, rng),
                 normal_tensor({m, 2}, pq, rng), normal_tensor({m, 2}, 0.5, rng),
                 normal_tensor({directions, h, m, 2}, 0.5, rng), Tensor::from({h}, log_uniform_dt(h, rng))};
    return mark_trainable(p);
}

DlrParams draw_stable_dlr(std::size_t n, std::size_t h, std::size_t directions, std::uint64_t seed) {
    Rng rng = make_rng(seed, "stable-dlr");
    std::uniform_real_distribution<double> radius(0.5, 0.999), angle(-std::numbers::pi, std::numbers::pi);
    std::vector<double> lam(h * n * 2);
    for (std::size_t i = 0; i < h * n; ++i) store(lam, i, std::polar(radius(rng), angle(rng)));
    DlrParams p{n, h, directions, Tensor::from({h, n, 2}, std::move(lam)),
                normal_tensor({directions, h, n, 2}, 0.5, rng)};
    return mark_trainable(p);
}

void clamp_dlr_modulus(DlrParams& params, double max_modulus) {
    auto d = params.lambda.mutable_data();
    for (std::size_t i = 0; i + 1 < d.size(); i += 2) {
        const double r = std::hypot(d[i], d[i + 1]);
        if (r > max_modulus) {
            d[i] *= max_modulus / r;
            d[i + 1] *= max_modulus / r;
        }
    }
}

std::size_t ssm_param_count(const SsmParams& params) {
    std::size_t total = 0;
    std::visit(
        [&](const auto& p) {
            for (const auto& t : p.tensors()) total += t.numel();
        },
        params);
    return total;
}

}  // namespace spt
