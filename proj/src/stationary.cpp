#include "tdlab/stationary.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace tdlab {

namespace {

constexpr complex kI{0.0, 1.0};
constexpr double kPi = std::numbers::pi;

// Fundamental (psi, psi') matrix across a constant-potential stretch of
// width w where psi'' = -q psi. Stored with an explicit log scale so deep
// evanescent stretches cannot overflow.
struct Fund2 {
    double m11 = 1.0, m12 = 0.0, m21 = 0.0, m22 = 1.0;
    double log_scale = 0.0;
};

Fund2 segment_matrix(double q, double w) {
    Fund2 f;
    if (q > 0.0) {
        double k = std::sqrt(q);
        double c = std::cos(k * w), s = std::sin(k * w);
        f = {c, s / k, -k * s, c, 0.0};
    } else if (q < 0.0) {
        double kap = std::sqrt(-q);
        double t = kap * w;
        if (std::abs(t) > 350.0) {
            // cosh and sinh agree to below double precision here; pull the
            // exponential out front.
            double sgn = (t > 0.0) ? 1.0 : -1.0;
            f = {0.5, sgn * 0.5 / kap, sgn * 0.5 * kap, 0.5, std::abs(t)};
        } else {
            double c = std::cosh(t), s = std::sinh(t);
            f = {c, s / kap, kap * s, c, 0.0};
        }
    } else {
        f = {1.0, w, 0.0, 1.0, 0.0};
    }
    return f;
}

Fund2 multiply_rescaled(const Fund2& a, const Fund2& b) {
    // a * b with the scale factored out when entries grow large.
    Fund2 r;
    r.m11 = a.m11 * b.m11 + a.m12 * b.m21;
    r.m12 = a.m11 * b.m12 + a.m12 * b.m22;
    r.m21 = a.m21 * b.m11 + a.m22 * b.m21;
    r.m22 = a.m21 * b.m12 + a.m22 * b.m22;
    r.log_scale = a.log_scale + b.log_scale;
    double m = std::max(std::max(std::abs(r.m11), std::abs(r.m12)),
                        std::max(std::abs(r.m21), std::abs(r.m22)));
    if (m > 1e140) {
        r.m11 /= m;
        r.m12 /= m;
        r.m21 /= m;
        r.m22 /= m;
        r.log_scale += std::log(m);
    }
    return r;
}

struct TransferAmps {
    complex T, L, R;
    std::string warning;
};

// Scattering amplitudes of a piecewise-constant potential in the global
// convention psi_+ = e^{ikx} + L e^{-ikx} / T e^{ikx}. The Wronskian fixes
// the determinant of the plane-wave transfer matrix to one exactly, which
// is what makes the scaled form T = e^{-Lambda} / M22 safe.
TransferAmps transfer_amplitudes(const Potential& pot, double energy) {
    const double k = wavenumber(energy);
    Fund2 m;  // identity
    for (const auto& seg : pot.segments()) {
        Fund2 p = segment_matrix(2.0 * (energy - seg.height), seg.hi - seg.lo);
        m = multiply_rescaled(p, m);
    }
    // Plane-wave basis referenced to the support edges: W^{-1} M W.
    const complex ik = kI * k;
    complex w11 = m.m11, w12 = m.m12, w21 = m.m21, w22 = m.m22;
    complex p12 = 0.5 * (w11 - w22 - w12 * ik + w21 / ik);
    complex p21 = 0.5 * (w11 - w22 + w12 * ik - w21 / ik);
    complex p22 = 0.5 * (w11 + w22 - w12 * ik - w21 / ik);

    TransferAmps out;
    if (std::abs(p22) == 0.0)
        throw std::runtime_error("transfer matrix singular; cannot extract amplitudes");
    complex l_loc = -p21 / p22;
    complex r_loc = p12 / p22;
    double log_t = -m.log_scale - std::log(std::abs(p22));
    if (log_t < -690.0)
        out.warning =
            "transmitted amplitude magnitude below double-precision range; "
            "value truncated toward zero";
    complex t_loc = std::polar(std::exp(log_t), std::arg(1.0 / p22));

    const double xl = pot.support_lo(), xr = pot.support_hi();
    out.T = t_loc * std::polar(1.0, k * (xl - xr));
    out.L = l_loc * std::polar(1.0, 2.0 * k * xl);
    out.R = r_loc * std::polar(1.0, -2.0 * k * xr);
    return out;
}

// (psi, psi') advanced across one constant segment; w may be negative for
// backward propagation.
void advance(complex& psi, complex& dpsi, double q, double w) {
    Fund2 p = segment_matrix(q, w);
    if (p.log_scale != 0.0) {
        double s = std::exp(p.log_scale);  // overflow accepted: caller guards
        p.m11 *= s;
        p.m12 *= s;
        p.m21 *= s;
        p.m22 *= s;
    }
    complex np = p.m11 * psi + p.m12 * dpsi;
    complex nd = p.m21 * psi + p.m22 * dpsi;
    psi = np;
    dpsi = nd;
}

// Local coefficient pair of (psi, psi') in a region of parameter q, with
// the RegionWave conventions (growing evanescent term referenced to hi).
void decompose_region(RegionWave& rw, double q, complex psi_lo, complex dpsi_lo,
                      complex psi_hi, complex dpsi_hi) {
    if (q > 0.0) {
        double k = std::sqrt(q);
        rw.kind = WaveKind::Propagating;
        rw.k = k;
        rw.x0 = rw.lo;
        rw.a = 0.5 * (psi_lo + dpsi_lo / (kI * k));
        rw.b = 0.5 * (psi_lo - dpsi_lo / (kI * k));
    } else if (q < 0.0) {
        double kap = std::sqrt(-q);
        rw.kind = WaveKind::Evanescent;
        rw.k = kap;
        rw.x0 = rw.lo;
        // Decaying coefficient from the left edge, growing from the right:
        // each is extracted where it is not buried under the other.
        rw.a = 0.5 * (psi_lo - dpsi_lo / kap);
        rw.b = 0.5 * (psi_hi + dpsi_hi / kap);
    } else {
        rw.kind = WaveKind::Linear;
        rw.k = 0.0;
        rw.x0 = rw.lo;
        rw.a = psi_lo;
        rw.b = dpsi_lo;
    }
}

struct EdgeWave {
    // psi = a e^{ikx} + b e^{-ikx} evaluated with derivative at x.
    static complex val(complex a, complex b, double k, double x) {
        return a * std::polar(1.0, k * x) + b * std::polar(1.0, -k * x);
    }
    static complex der(complex a, complex b, double k, double x) {
        return kI * k * (a * std::polar(1.0, k * x) - b * std::polar(1.0, -k * x));
    }
};

// Exact per-region waves for a piecewise-constant potential, built by
// propagating from the transmitted side so growing exponentials are
// accumulated stably.
std::vector<RegionWave> build_regions(const Potential& pot, double energy, Channel dir,
                                      const TransferAmps& amps, double* residual) {
    const double k = wavenumber(energy);
    const double xl = pot.support_lo(), xr = pot.support_hi();
    auto segs = pot.segments();
    std::vector<RegionWave> regions(segs.size() + 2);

    RegionWave& left = regions.front();
    left.lo = -1e300;
    left.hi = xl;
    left.x0 = 0.0;
    left.kind = WaveKind::Propagating;
    left.k = k;
    RegionWave& right = regions.back();
    right.lo = xr;
    right.hi = 1e300;
    right.x0 = 0.0;
    right.kind = WaveKind::Propagating;
    right.k = k;

    std::vector<complex> psi_at(segs.size() + 1), dpsi_at(segs.size() + 1);
    if (dir == Channel::FromLeft) {
        left.a = 1.0;
        left.b = amps.L;
        right.a = amps.T;
        right.b = 0.0;
        // Walk right to left from the purely outgoing side.
        psi_at[segs.size()] = EdgeWave::val(amps.T, 0.0, k, xr);
        dpsi_at[segs.size()] = EdgeWave::der(amps.T, 0.0, k, xr);
        for (std::size_t j = segs.size(); j-- > 0;) {
            complex psi = psi_at[j + 1], dpsi = dpsi_at[j + 1];
            advance(psi, dpsi, 2.0 * (energy - segs[j].height), -(segs[j].hi - segs[j].lo));
            psi_at[j] = psi;
            dpsi_at[j] = dpsi;
        }
        complex want = EdgeWave::val(1.0, amps.L, k, xl);
        complex want_d = EdgeWave::der(1.0, amps.L, k, xl);
        *residual = std::max(std::abs(psi_at[0] - want), std::abs(dpsi_at[0] - want_d) / k) /
                    std::max(1.0, std::abs(want));
    } else {
        left.a = 0.0;
        left.b = amps.T;
        right.a = amps.R;
        right.b = 1.0;
        psi_at[0] = EdgeWave::val(0.0, amps.T, k, xl);
        dpsi_at[0] = EdgeWave::der(0.0, amps.T, k, xl);
        for (std::size_t j = 0; j < segs.size(); ++j) {
            complex psi = psi_at[j], dpsi = dpsi_at[j];
            advance(psi, dpsi, 2.0 * (energy - segs[j].height), segs[j].hi - segs[j].lo);
            psi_at[j + 1] = psi;
            dpsi_at[j + 1] = dpsi;
        }
        complex want = EdgeWave::val(amps.R, 1.0, k, xr);
        complex want_d = EdgeWave::der(amps.R, 1.0, k, xr);
        *residual =
            std::max(std::abs(psi_at[segs.size()] - want),
                     std::abs(dpsi_at[segs.size()] - want_d) / k) /
            std::max(1.0, std::abs(want));
    }

    for (std::size_t j = 0; j < segs.size(); ++j) {
        RegionWave& rw = regions[j + 1];
        rw.lo = segs[j].lo;
        rw.hi = segs[j].hi;
        decompose_region(rw, 2.0 * (energy - segs[j].height), psi_at[j], dpsi_at[j],
                         psi_at[j + 1], dpsi_at[j + 1]);
        if (!std::isfinite(std::abs(rw.a)) || !std::isfinite(std::abs(rw.b)))
            throw std::runtime_error(
                "state reconstruction lost precision in a deep classically "
                "forbidden region");
    }
    return regions;
}

// Wavenumber of the discrete plane wave e^{i k~ x} that solves the free
// Numerov recurrence exactly; used for edge matching so the boundary
// treatment adds no error beyond the interior discretization.
double numerov_wavenumber(double k, double h) {
    double f = 1.0 + h * h * k * k / 12.0;
    double c = (6.0 - 5.0 * f) / f;
    if (c <= -1.0 || c >= 1.0)
        throw std::invalid_argument("grid too coarse for the Numerov recurrence at this energy");
    return std::acos(c) / h;
}

struct PlanePair {
    complex a, b;  // psi = a e^{ikx} + b e^{-ikx} through two nodes
};

PlanePair decompose_nodes(double kt, double x0, double x1, complex psi0, complex psi1) {
    complex p = std::polar(1.0, kt * x0), q = std::conj(p);
    complex r = std::polar(1.0, kt * x1), s = std::conj(r);
    complex det = p * s - q * r;
    return {(psi0 * s - q * psi1) / det, (p * psi1 - psi0 * r) / det};
}

void check_energy(double energy) {
    if (!(energy > 0.0))
        throw std::invalid_argument("scattering energy must be positive");
}

// Riccati-Bessel pair S_l(x) = x j_l(x), C_l(x) = -x y_l(x) with x
// derivatives via p_l' = p_{l-1} - (l/x) p_l (S_{-1} = cos, C_{-1} = -sin).
struct Riccati {
    double s, sp, c, cp;
};

Riccati riccati_pair(int l, double x) {
    auto ul = static_cast<unsigned>(l);
    Riccati r;
    r.s = x * std::sph_bessel(ul, x);
    r.c = -x * std::sph_neumann(ul, x);
    double sm1 = (l == 0) ? std::cos(x) : x * std::sph_bessel(ul - 1, x);
    double cm1 = (l == 0) ? -std::sin(x) : -x * std::sph_neumann(ul - 1, x);
    r.sp = sm1 - (l / x) * r.s;
    r.cp = cm1 - (l / x) * r.c;
    return r;
}

// Modified spherical Bessel functions i_l, k_l through the half-integer
// cylindrical ones, with x derivatives from the standard recurrences.
double mod_sph_i(int l, double x) {
    return std::sqrt(kPi / (2.0 * x)) * std::cyl_bessel_i(l + 0.5, x);
}

double mod_sph_k(int l, double x) {
    return std::sqrt(kPi / (2.0 * x)) * std::cyl_bessel_k(l + 0.5, x);
}

// Fundamental pair (f, g) for one constant radial segment: u'' =
// [l(l+1)/s^2 - q] u with q = 2(E - V). f is regular at the origin.
void radial_basis(int l, double q, double s, double* f, double* fp, double* g, double* gp) {
    if (q > 0.0) {
        double k = std::sqrt(q);
        Riccati r = riccati_pair(l, k * s);
        *f = r.s;
        *fp = k * r.sp;
        *g = r.c;
        *gp = k * r.cp;
    } else if (q < 0.0) {
        double kap = std::sqrt(-q);
        if (l == 0) {
            *f = std::sinh(kap * s);
            *fp = kap * std::cosh(kap * s);
            *g = std::cosh(kap * s);
            *gp = kap * std::sinh(kap * s);
        } else {
            double x = kap * s;
            double il = mod_sph_i(l, x), ilm = mod_sph_i(l - 1, x);
            double kl = mod_sph_k(l, x), klm = mod_sph_k(l - 1, x);
            double ip = ilm - ((l + 1.0) / x) * il;   // i_l'
            double kp = -klm - ((l + 1.0) / x) * kl;  // k_l'
            *f = s * il;
            *fp = il + x * ip;
            *g = s * kl;
            *gp = kl + x * kp;
        }
    } else if (l == 0) {
        *f = s;
        *fp = 1.0;
        *g = 1.0;
        *gp = 0.0;
    } else {
        *f = std::pow(s, l + 1);
        *fp = (l + 1.0) * std::pow(s, l);
        *g = std::pow(s, -l);
        *gp = -static_cast<double>(l) * std::pow(s, -l - 1);
    }
}

bool radial_exact_supported(const Potential& pot, double energy) {
    if (!pot.piecewise_constant()) return false;
    // Extremely deep forbidden shells overflow the hyperbolic pair; hand
    // those to the rescaling integrator instead.
    for (const auto& seg : pot.segments()) {
        double q = 2.0 * (energy - seg.height);
        if (q < 0.0 && std::sqrt(-q) * seg.hi > 600.0) return false;
    }
    return true;
}

double min_potential_on_support(const Potential& pot) {
    if (pot.support_hi() <= pot.support_lo()) return 0.0;
    if (pot.piecewise_constant()) {
        double vmin = 0.0;
        for (const auto& s : pot.segments()) vmin = std::min(vmin, s.height);
        return vmin;
    }
    double vmin = 0.0;
    const int n = 4001;
    double lo = pot.support_lo(), hi = pot.support_hi();
    for (int i = 0; i < n; ++i) {
        double x = lo + (hi - lo) * i / (n - 1);
        vmin = std::min(vmin, pot(x));
    }
    return vmin;
}

}  // namespace

complex RegionWave::eval(double x) const {
    switch (kind) {
        case WaveKind::Propagating:
            return a * std::polar(1.0, k * (x - x0)) + b * std::polar(1.0, -k * (x - x0));
        case WaveKind::Evanescent:
            return a * std::exp(-k * (x - lo)) + b * std::exp(k * (x - hi));
        case WaveKind::Linear:
            return a + b * (x - lo);
    }
    return {};
}

complex StationaryState::at(double x) const {
    if (!regions_.empty()) {
        // Regions tile the line; pick by upper bound.
        std::size_t j = 0;
        while (j + 1 < regions_.size() && x >= regions_[j].hi) ++j;
        return regions_[j].eval(x);
    }
    // Four-point Lagrange interpolation on the uniform sample grid.
    const double h = grid_.dx();
    const auto n = static_cast<std::ptrdiff_t>(grid_.size());
    auto j = static_cast<std::ptrdiff_t>(std::floor((x - grid_.x_min()) / h)) - 1;
    j = std::clamp<std::ptrdiff_t>(j, 0, n - 4);
    double t = (x - (grid_.x_min() + static_cast<double>(j) * h)) / h;
    double c0 = -(t - 1.0) * (t - 2.0) * (t - 3.0) / 6.0;
    double c1 = t * (t - 2.0) * (t - 3.0) / 2.0;
    double c2 = -t * (t - 1.0) * (t - 3.0) / 2.0;
    double c3 = t * (t - 1.0) * (t - 2.0) / 6.0;
    return c0 * values_[j] + c1 * values_[j + 1] + c2 * values_[j + 2] + c3 * values_[j + 3];
}

SpatialGrid full_line_grid(const Potential& pot, double energy, double points_per_wavelength,
                           double margin_wavelengths) {
    check_energy(energy);
    double vmin = min_potential_on_support(pot);
    double lambda_local = 2.0 * kPi / wavenumber(energy - vmin);
    double lambda_out = 2.0 * kPi / wavenumber(energy);
    double dx = lambda_local / points_per_wavelength;
    double lo = pot.support_lo() - margin_wavelengths * lambda_out;
    double hi = pot.support_hi() + margin_wavelengths * lambda_out;
    auto n = static_cast<std::size_t>(std::ceil((hi - lo) / dx)) + 1;
    return SpatialGrid(lo, hi, n);
}

SpatialGrid radial_grid(const Potential& pot, double energy, double points_per_wavelength) {
    check_energy(energy);
    if (pot.geometry() != Geometry::Radial)
        throw std::invalid_argument("radial grid requires a radial potential");
    double k = wavenumber(energy);
    double vmin = min_potential_on_support(pot);
    double dx = 2.0 * kPi / wavenumber(energy - vmin) / points_per_wavelength;
    double lo = pot.hard_core_radius();
    double hi = pot.support_radius() + 6.0 / k + 0.5 * kPi / k;
    auto n = static_cast<std::size_t>(std::ceil((hi - lo) / dx)) + 1;
    return SpatialGrid(lo, hi, n);
}

StationaryState solve_full_line(const Potential& pot, double energy, const SpatialGrid& grid,
                                Channel direction) {
    check_energy(energy);
    if (pot.geometry() != Geometry::FullLine)
        throw std::invalid_argument("full-line solve requires a full-line potential");

    StationaryState state(direction == Channel::FromLeft ? StateKind::FullLineLeft
                                                         : StateKind::FullLineRight,
                          energy, grid);

    if (pot.piecewise_constant()) {
        if (grid.x_min() > pot.support_lo() || grid.x_max() < pot.support_hi())
            throw std::invalid_argument("grid does not cover the potential support");
        TransferAmps amps = transfer_amplitudes(pot, energy);
        double residual = 0.0;
        state.regions_ = build_regions(pot, energy, direction, amps, &residual);
        state.matching_residual_ = residual;
        state.transmission_ = amps.T;
        state.reflection_ = (direction == Channel::FromLeft) ? amps.L : amps.R;
        state.values_.resize(grid.size());
        for (std::size_t i = 0; i < grid.size(); ++i) state.values_[i] = state.at(grid[i]);
        if (residual > 1e-8)
            throw std::runtime_error("piecewise state matching residual " +
                                     std::to_string(residual) + " exceeds 1e-8");
        return state;
    }

    const double h = grid.dx();
    const auto n = grid.size();
    if (n < 32) throw std::invalid_argument("grid too small for a full-line solve");
    if (grid.x_min() > pot.support_lo() - 8.0 * h || grid.x_max() < pot.support_hi() + 8.0 * h)
        throw std::invalid_argument(
            "grid must extend several free nodes beyond the potential support");

    std::vector<double> f(n);
    double vmin = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double v = pot(grid[i]);
        vmin = std::min(vmin, v);
        f[i] = 1.0 + h * h * (2.0 * (energy - v)) / 12.0;
    }
    double lambda_min = 2.0 * kPi / wavenumber(energy - vmin);
    if (h > lambda_min / 40.0)
        throw std::invalid_argument(
            "grid spacing exceeds one fortieth of the shortest local de Broglie wavelength");

    const double k = wavenumber(energy);
    const double kt = numerov_wavenumber(k, h);
    std::vector<complex>& psi = state.values_;
    psi.assign(n, complex{});

    if (direction == Channel::FromLeft) {
        psi[n - 1] = std::polar(1.0, kt * grid[n - 1]);
        psi[n - 2] = std::polar(1.0, kt * grid[n - 2]);
        for (std::size_t i = n - 1; i-- > 1;) {
            psi[i - 1] = ((12.0 - 10.0 * f[i]) * psi[i] - f[i + 1] * psi[i + 1]) / f[i - 1];
            if (std::abs(psi[i - 1]) > 1e250)
                throw std::runtime_error(
                    "stationary solve lost precision in a deep classically forbidden region");
        }
        PlanePair pw = decompose_nodes(kt, grid[0], grid[1], psi[0], psi[1]);
        complex inc = pw.a;
        if (std::abs(inc) == 0.0) throw std::runtime_error("vanishing incident amplitude");
        for (auto& v : psi) v /= inc;
        state.transmission_ = 1.0 / inc;
        state.reflection_ = pw.b / inc;

        double res = 0.0;
        for (std::size_t i = 2; i <= 5; ++i) {
            complex want = std::polar(1.0, kt * grid[i]) +
                           state.reflection_ * std::polar(1.0, -kt * grid[i]);
            res = std::max(res, std::abs(psi[i] - want));
            complex want_r = state.transmission_ * std::polar(1.0, kt * grid[n - 1 - i]);
            res = std::max(res, std::abs(psi[n - 1 - i] - want_r));
        }
        state.matching_residual_ = res;
    } else {
        psi[0] = std::polar(1.0, -kt * grid[0]);
        psi[1] = std::polar(1.0, -kt * grid[1]);
        for (std::size_t i = 1; i + 1 < n; ++i) {
            psi[i + 1] = ((12.0 - 10.0 * f[i]) * psi[i] - f[i - 1] * psi[i - 1]) / f[i + 1];
            if (std::abs(psi[i + 1]) > 1e250)
                throw std::runtime_error(
                    "stationary solve lost precision in a deep classically forbidden region");
        }
        PlanePair pw = decompose_nodes(kt, grid[n - 2], grid[n - 1], psi[n - 2], psi[n - 1]);
        complex inc = pw.b;
        if (std::abs(inc) == 0.0) throw std::runtime_error("vanishing incident amplitude");
        for (auto& v : psi) v /= inc;
        state.transmission_ = 1.0 / inc;
        state.reflection_ = pw.a / inc;

        double res = 0.0;
        for (std::size_t i = 2; i <= 5; ++i) {
            complex want = std::polar(1.0, -kt * grid[n - 1 - i]) +
                           state.reflection_ * std::polar(1.0, kt * grid[n - 1 - i]);
            res = std::max(res, std::abs(psi[n - 1 - i] - want));
            complex want_l = state.transmission_ * std::polar(1.0, -kt * grid[i]);
            res = std::max(res, std::abs(psi[i] - want_l));
        }
        state.matching_residual_ = res;
    }
    if (state.matching_residual_ > 1e-8)
        throw std::runtime_error("plane-wave matching residual " +
                                 std::to_string(state.matching_residual_) + " exceeds 1e-8");
    return state;
}

SMatrix1D s_matrix(const Potential& pot, double energy) {
    check_energy(energy);
    SMatrix1D s;
    s.energy = energy;
    if (pot.piecewise_constant()) {
        TransferAmps amps = transfer_amplitudes(pot, energy);
        s.transmission = amps.T;
        s.reflection_left = amps.L;
        s.reflection_right = amps.R;
        s.precision_warning = amps.warning;
    } else {
        SpatialGrid grid = full_line_grid(pot, energy, 60.0, 3.0);
        StationaryState plus = solve_full_line(pot, energy, grid, Channel::FromLeft);
        StationaryState minus = solve_full_line(pot, energy, grid, Channel::FromRight);
        s.transmission = plus.transmission();
        s.reflection_left = plus.reflection();
        s.reflection_right = minus.reflection();
    }
    double t2 = std::norm(s.transmission);
    double l2 = std::norm(s.reflection_left);
    double defect = std::abs(t2 + l2 - 1.0);
    defect = std::max(defect,
                      std::abs(std::abs(s.reflection_left) - std::abs(s.reflection_right)));
    defect = std::max(defect, std::abs(std::conj(s.transmission) * s.reflection_left +
                                       std::conj(s.reflection_right) * s.transmission));
    s.unitarity_defect = defect;
    if (defect > 1e-6) {
        std::ostringstream msg;
        msg << "scattering matrix unitarity defect " << defect
            << " exceeds 1e-6; solver misconfigured for this potential/energy";
        throw std::runtime_error(msg.str());
    }
    s.alpha_T = std::arg(s.transmission);
    s.alpha_L = std::arg(s.reflection_left);
    s.alpha_R = std::arg(s.reflection_right);
    return s;
}

std::vector<SMatrix1D> s_matrix_sweep(const Potential& pot,
                                      const std::vector<double>& energies) {
    if (energies.size() < 2) throw std::invalid_argument("sweep needs at least two energies");
    for (std::size_t i = 1; i < energies.size(); ++i)
        if (!(energies[i] > energies[i - 1]))
            throw std::invalid_argument("sweep energies must be strictly increasing");
    std::vector<SMatrix1D> out;
    out.reserve(energies.size());
    for (double e : energies) out.push_back(s_matrix(pot, e));
    std::vector<double> at(out.size()), al(out.size()), ar(out.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        at[i] = out[i].alpha_T;
        al[i] = out[i].alpha_L;
        ar[i] = out[i].alpha_R;
    }
    unwrap_inplace(at);
    unwrap_inplace(al);
    unwrap_inplace(ar);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i].alpha_T = at[i];
        out[i].alpha_L = al[i];
        out[i].alpha_R = ar[i];
    }
    return out;
}

StationaryState solve_radial(const Potential& pot, double energy, const SpatialGrid& grid) {
    check_energy(energy);
    if (pot.geometry() != Geometry::Radial)
        throw std::invalid_argument("radial solve requires a radial potential");
    const int l = pot.angular_momentum();
    const double k = wavenumber(energy);
    const double a = pot.hard_core_radius();
    const double h = grid.dx();
    const auto n = grid.size();

    if (std::abs(grid.x_min() - a) > 1e-12)
        throw std::invalid_argument("radial grid must start at the hard-core radius (or origin)");
    double quarter = 0.5 * kPi / k;
    if (grid.x_max() - quarter <= pot.support_radius() + 10.0 * h)
        throw std::invalid_argument(
            "radial grid edge sits inside the potential support; matching needs a quarter "
            "wavelength of free region beyond it");
    if (n < 32) throw std::invalid_argument("grid too small for a radial solve");

    StationaryState state(StateKind::Radial, energy, grid);
    state.l_ = l;

    if (radial_exact_supported(pot, energy)) {
        // Segment-exact walk, the radial counterpart of the full-line
        // transfer matrices: constant-potential stretches are spanned by
        // Riccati-Bessel pairs (trig/hyperbolic for l = 0), so the phase
        // shift carries no discretization error even across potential jumps.
        struct RegCoef {
            double lo, hi, q, alpha, beta;  // u = alpha f + beta g
        };
        std::vector<RegCoef> regs;
        std::vector<Segment> segs = pot.segments();
        // Shell potentials leave the innermost stretch implicit; make it an
        // explicit free segment so the regular start lands in the right basis.
        double inner_lo = std::max(a, 0.0);
        if (!segs.empty() && segs.front().lo > inner_lo + 1e-12)
            segs.insert(segs.begin(), {inner_lo, segs.front().lo, 0.0});
        double u = 0.0, du = 1.0;
        std::size_t first = 0;
        if (a > 0.0) {
            u = 0.0;
            du = 1.0;  // Dirichlet start on the wall, arbitrary scale
        } else {
            const Segment& s0 = segs.front();
            double q0 = 2.0 * (energy - s0.height);
            double f, fp, g, gp;
            radial_basis(l, q0, s0.hi, &f, &fp, &g, &gp);
            regs.push_back({s0.lo, s0.hi, q0, 1.0, 0.0});
            u = f;
            du = fp;
            first = 1;
        }
        for (std::size_t j = first; j < segs.size(); ++j) {
            double q = 2.0 * (energy - segs[j].height);
            double f, fp, g, gp;
            radial_basis(l, q, segs[j].lo, &f, &fp, &g, &gp);
            double det = f * gp - fp * g;
            double alpha = (u * gp - du * g) / det;
            double beta = (du * f - u * fp) / det;
            regs.push_back({segs[j].lo, segs[j].hi, q, alpha, beta});
            radial_basis(l, q, segs[j].hi, &f, &fp, &g, &gp);
            u = alpha * f + beta * g;
            du = alpha * fp + beta * gp;
        }
        const double edge = pot.support_hi();
        Riccati re = riccati_pair(l, k * edge);
        double det = re.s * (k * re.cp) - (k * re.sp) * re.c;
        double big_a = (u * (k * re.cp) - du * re.c) / det;
        double big_b = (du * re.s - u * (k * re.sp)) / det;
        double delta = std::atan2(big_b, big_a);
        double r = std::hypot(big_a, big_b);
        if (r == 0.0) throw std::runtime_error("radial solution vanished at the matching edge");
        state.delta_ = delta;
        state.matching_residual_ =
            std::abs(big_a * re.s + big_b * re.c - u) / std::max(1.0, std::abs(u));
        complex norm = std::polar(1.0, delta) / r;

        auto eval_raw = [&](double s) -> double {
            if (s < a) return 0.0;
            if (s >= edge) {
                Riccati rr = riccati_pair(l, k * std::max(s, 1e-300));
                return big_a * rr.s + big_b * rr.c;
            }
            for (const auto& rc : regs) {
                if (s < rc.hi || &rc == &regs.back()) {
                    if (s <= 0.0) return 0.0;  // regular solution vanishes at the origin
                    double f, fp, g, gp;
                    radial_basis(l, rc.q, s, &f, &fp, &g, &gp);
                    return rc.alpha * f + rc.beta * g;
                }
            }
            return 0.0;
        };
        state.values_.resize(n);
        for (std::size_t i = 0; i < n; ++i) state.values_[i] = norm * eval_raw(grid[i]);

        if (l == 0) {
            // The l = 0 pairs are plain trig/hyperbolic/linear waves, so the
            // state can also carry exact region data for downstream
            // closed-form integrals.
            std::vector<RegionWave> rws;
            if (a > 0.0) {
                RegionWave core;
                core.lo = 0.0;
                core.hi = a;
                core.kind = WaveKind::Linear;
                core.a = core.b = 0.0;
                rws.push_back(core);
            }
            for (const auto& rc : regs) {
                RegionWave rw;
                rw.lo = rc.lo;
                rw.hi = rc.hi;
                if (rc.q > 0.0) {
                    double kj = std::sqrt(rc.q);
                    rw.kind = WaveKind::Propagating;
                    rw.k = kj;
                    rw.x0 = 0.0;
                    rw.a = norm * complex(rc.beta, -rc.alpha) * 0.5;
                    rw.b = norm * complex(rc.beta, rc.alpha) * 0.5;
                } else if (rc.q < 0.0) {
                    double kap = std::sqrt(-rc.q);
                    rw.kind = WaveKind::Evanescent;
                    rw.k = kap;
                    rw.a = norm * 0.5 * (rc.beta - rc.alpha) * std::exp(-kap * rc.lo);
                    rw.b = norm * 0.5 * (rc.alpha + rc.beta) * std::exp(kap * rc.hi);
                } else {
                    rw.kind = WaveKind::Linear;
                    rw.k = 0.0;
                    rw.a = norm * (rc.alpha * rc.lo + rc.beta);
                    rw.b = norm * rc.alpha;
                }
                rws.push_back(rw);
            }
            RegionWave outer;
            outer.lo = edge;
            outer.hi = 1e300;
            outer.x0 = 0.0;
            outer.kind = WaveKind::Propagating;
            outer.k = k;
            outer.a = norm * complex(big_b, -big_a) * 0.5;
            outer.b = norm * complex(big_b, big_a) * 0.5;
            rws.push_back(outer);
            state.regions_ = std::move(rws);
        }
        state.transmission_ = std::polar(1.0, 2.0 * delta);  // on-shell S element
        return state;
    }

    // Numerov path for smooth radial potentials.
    // q(s) = 2(E - V) - l(l+1)/s^2; the origin node is skipped for l >= 1
    // where the centrifugal term diverges.
    auto q_at = [&](std::size_t i) {
        double s = grid[i];
        double cf = 0.0;
        if (l > 0) cf = static_cast<double>(l) * (l + 1) / (s * s);
        return 2.0 * (energy - pot(s)) - cf;
    };

    double vmin = 0.0;
    for (std::size_t i = (l > 0 && a == 0.0) ? 1 : 0; i < n; ++i)
        vmin = std::min(vmin, pot(grid[i]));
    if (h > 2.0 * kPi / wavenumber(energy - vmin) / 40.0)
        throw std::invalid_argument(
            "grid spacing exceeds one fortieth of the shortest local de Broglie wavelength");

    std::vector<double> u(n, 0.0);
    std::vector<double> f(n, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
        if (i == 0 && l > 0 && a == 0.0) continue;  // f[0] unused below
        f[i] = 1.0 + h * h * q_at(i) / 12.0;
    }

    std::size_t start;  // recurrence produces u[start+1] onward
    if (a > 0.0) {
        u[0] = 0.0;
        u[1] = h;
        start = 1;
    } else {
        // Series start u ~ s^{l+1} (1 + c s^2) with the curvature taken
        // from the potential just off the origin.
        double c = -2.0 * (energy - pot(h)) / (4.0 * l + 6.0);
        u[1] = std::pow(h, l + 1) * (1.0 + c * h * h);
        if (l == 0) {
            start = 1;
        } else {
            u[2] = std::pow(2.0 * h, l + 1) * (1.0 + 4.0 * c * h * h);
            start = 2;
        }
    }
    for (std::size_t i = start; i + 1 < n; ++i) {
        u[i + 1] = ((12.0 - 10.0 * f[i]) * u[i] - f[i - 1] * u[i - 1]) / f[i + 1];
        if (std::abs(u[i + 1]) > 1e250) {
            double scale = std::abs(u[i + 1]);
            for (std::size_t j = 0; j <= i + 1; ++j) u[j] /= scale;
        }
    }

    // Riccati-Bessel matching at the edge node and a quarter wavelength in.
    auto ric_s = [&](double s) { return riccati_pair(l, k * s).s; };
    auto ric_c = [&](double s) { return riccati_pair(l, k * s).c; };
    std::size_t j2 = n - 1;
    auto j1 = static_cast<std::size_t>(std::llround((grid.x_max() - quarter - grid.x_min()) / h));
    double s1 = grid[j1], s2 = grid[j2];
    // Solve u_i = B cos(d) S(s_i) + B sin(d) C(s_i) for (B cos d, B sin d);
    // dividing by the stencil determinant keeps the branch such that B > 0.
    double det = ric_s(s1) * ric_c(s2) - ric_c(s1) * ric_s(s2);
    double bsin = (ric_s(s1) * u[j2] - u[j1] * ric_s(s2)) / det;
    double bcos = (u[j1] * ric_c(s2) - ric_c(s1) * u[j2]) / det;
    double delta = std::atan2(bsin, bcos);
    state.delta_ = delta;
    double bnorm = std::hypot(bsin, bcos);
    if (bnorm == 0.0) throw std::runtime_error("radial solution vanished at the matching nodes");

    std::size_t j3 = (j1 + j2) / 2;
    double free3 = std::cos(delta) * ric_s(grid[j3]) + std::sin(delta) * ric_c(grid[j3]);
    state.matching_residual_ = std::abs(u[j3] / bnorm - free3);
    if (state.matching_residual_ > 1e-6)
        throw std::runtime_error("radial matching residual " +
                                 std::to_string(state.matching_residual_) +
                                 " exceeds 1e-6; refine the grid");

    complex norm = std::polar(1.0, delta) / bnorm;
    state.values_.resize(n);
    for (std::size_t i = 0; i < n; ++i) state.values_[i] = norm * u[i];
    state.transmission_ = std::polar(1.0, 2.0 * delta);  // on-shell S element
    return state;
}

PhaseShiftTable phase_shift_sweep(const Potential& pot, const std::vector<double>& energies) {
    if (energies.empty()) throw std::invalid_argument("phase shift sweep needs energies");
    for (std::size_t i = 1; i < energies.size(); ++i)
        if (!(energies[i] > energies[i - 1]))
            throw std::invalid_argument("sweep energies must be strictly increasing");
    PhaseShiftTable table;
    table.l = pot.angular_momentum();
    table.energies = energies;
    table.shifts.reserve(energies.size());
    for (double e : energies) {
        StationaryState st = solve_radial(pot, e, radial_grid(pot, e));
        table.shifts.push_back(st.phase_shift());
    }
    unwrap_inplace(table.shifts);
    return table;
}

void unwrap_inplace(std::vector<double>& phases) {
    for (std::size_t i = 1; i < phases.size(); ++i) {
        double d = phases[i] - phases[i - 1];
        double wrapped = d - 2.0 * kPi * std::floor(d / (2.0 * kPi) + 0.5);
        phases[i] = phases[i - 1] + wrapped;
    }
}

DerivativeEstimate phase_derivative(const std::function<double(double)>& phase, double energy,
                                    double h) {
    if (!(h > 0.0)) throw std::invalid_argument("phase derivative step must be positive");
    if (!(energy - h > 0.0))
        throw std::invalid_argument("phase derivative stencil crosses zero energy");
    std::vector<double> samples = {phase(energy - h), phase(energy - 0.5 * h),
                                   phase(energy + 0.5 * h), phase(energy + h)};
    unwrap_inplace(samples);
    double d_h = (samples[3] - samples[0]) / (2.0 * h);
    double d_half = (samples[2] - samples[1]) / h;
    if (std::abs(d_h - d_half) > 0.25 * std::max(std::abs(d_half), 1.0))
        throw std::runtime_error(
            "phase changes between stencil points are inconsistent (structure narrower than "
            "the step, e.g. an unresolved resonance); retry with a smaller h");
    DerivativeEstimate est;
    est.value = (4.0 * d_half - d_h) / 3.0;
    est.error = std::abs(est.value - d_half);
    return est;
}

}  // namespace tdlab
