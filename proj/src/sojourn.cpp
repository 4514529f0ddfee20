#include "tdlab/sojourn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <utility>

namespace tdlab {
namespace {

constexpr double kPi = 3.14159265358979323846;

// Post-selection probabilities below this are treated as "never happens".
constexpr double kConditionFloor = 1e-10;

// ---------------------------------------------------------------------------
// Quadrature helpers.

template <typename F>
auto simpson(F&& f, double a, double b, std::size_t panels) -> decltype(f(a)) {
    if (panels < 2) panels = 2;
    if (panels % 2) ++panels;
    const double h = (b - a) / static_cast<double>(panels);
    auto acc = f(a) + f(b);
    for (std::size_t i = 1; i < panels; ++i)
        acc += f(a + h * static_cast<double>(i)) * ((i % 2) ? 4.0 : 2.0);
    return acc * (h / 3.0);
}

std::size_t even_ceil(double x) {
    auto n = static_cast<std::size_t>(std::ceil(std::max(x, 2.0)));
    return n + (n % 2);
}

// Node budget resolving the e^{2ikx} interference of counter-propagating
// beams.
std::size_t oscillation_panels(double len, double k, double per_period, double floor_panels) {
    const double period = kPi / std::max(k, 1e-12);
    return even_ceil(std::max(floor_panels, len / period * per_period));
}

// ---------------------------------------------------------------------------
// Exact integral of conj(psi_a) psi_b over one constant-potential region.
// Both waves must share the region geometry, which holds for states of the
// same potential at the same energy.

complex region_pair_integral(const RegionWave& ra, const RegionWave& rb, double u, double w) {
    if (!(w > u)) return {};
    switch (ra.kind) {
        case WaveKind::Propagating: {
            const double k = ra.k;
            complex acc = (std::conj(ra.a) * rb.a + std::conj(ra.b) * rb.b) * (w - u);
            const complex e_w = std::exp(complex(0.0, 2.0 * k * (w - ra.x0)));
            const complex e_u = std::exp(complex(0.0, 2.0 * k * (u - ra.x0)));
            const complex osc = (e_w - e_u) / complex(0.0, 2.0 * k);
            acc += std::conj(ra.b) * rb.a * osc + std::conj(ra.a) * rb.b * std::conj(osc);
            return acc;
        }
        case WaveKind::Evanescent: {
            const double q = ra.k;
            const double du = u - ra.lo, dw = w - ra.lo;
            const double su = u - ra.hi, sw = w - ra.hi;
            complex acc = std::conj(ra.a) * rb.a *
                          ((std::exp(-2.0 * q * du) - std::exp(-2.0 * q * dw)) / (2.0 * q));
            acc += std::conj(ra.b) * rb.b *
                   ((std::exp(2.0 * q * sw) - std::exp(2.0 * q * su)) / (2.0 * q));
            // The mixed products are constant across the region; the bridge
            // factor underflows harmlessly for deep barriers.
            const double bridge = std::exp(q * (ra.lo - ra.hi));
            acc += (std::conj(ra.a) * rb.b + std::conj(ra.b) * rb.a) * (bridge * (w - u));
            return acc;
        }
        case WaveKind::Linear: {
            const double tu = u - ra.lo, tw = w - ra.lo;
            const complex c0 = std::conj(ra.a) * rb.a;
            const complex c1 = std::conj(ra.a) * rb.b + std::conj(ra.b) * rb.a;
            const complex c2 = std::conj(ra.b) * rb.b;
            return c0 * (tw - tu) + c1 * (0.5 * (tw * tw - tu * tu)) +
                   c2 * ((tw * tw * tw - tu * tu * tu) / 3.0);
        }
    }
    return {};
}

complex exact_pair_interval(const std::vector<RegionWave>& ra, const std::vector<RegionWave>& rb,
                            double u, double w) {
    complex acc;
    for (std::size_t j = 0; j < ra.size(); ++j) {
        const double lo = std::max(ra[j].lo, u);
        const double hi = std::min(ra[j].hi, w);
        if (hi > lo) acc += region_pair_integral(ra[j], rb[j], lo, hi);
    }
    return acc;
}

// ---------------------------------------------------------------------------
// Sampled integrals through StationaryState::at.

std::size_t sampled_panels(const StationaryState& s, double len) {
    const std::size_t byk = oscillation_panels(len, s.wavenumber_outside(), 48.0, 128.0);
    if (s.exact_regions()) return byk;
    // Interpolated states resolve nothing finer than the solver grid.
    return std::max(byk, even_ceil(len / s.grid().dx()));
}

complex sampled_pair(const StationaryState& sa, const StationaryState& sb, double u, double w,
                     const std::function<double(double)>& weight) {
    auto f = [&](double x) -> complex {
        const complex v = std::conj(sa.at(x)) * sb.at(x);
        return weight ? v * weight(x) : v;
    };
    return simpson(f, u, w, sampled_panels(sa, w - u));
}

// Cached pair density conj(psi_a) psi_b with cheap interval queries. An
// exact region pair walks its closed forms. A sampled pair on a shared
// solver grid precomputes a running Simpson antiderivative once; a query
// then lands inside a grid cell and is finished with the integral of the
// local interpolating parabola, whose value at the far cell edge matches
// the running sum's step. Mismatched grids fall back to quadrature through
// StationaryState::at. Holds pointers to both states, so bind one only
// after a state has reached its final address.
class PairDensity {
  public:
    PairDensity(const StationaryState& a, const StationaryState& b) : a_(&a), b_(&b) {
        exact_ = a.exact_regions() && b.exact_regions();
        if (exact_) return;
        const SpatialGrid& ga = a.grid();
        const SpatialGrid& gb = b.grid();
        shared_grid_ = ga.size() == gb.size() && ga.size() >= 3 &&
                       std::abs(ga.x_min() - gb.x_min()) < 1e-9 &&
                       std::abs(ga.dx() - gb.dx()) < 1e-12;
        if (!shared_grid_) return;
        x0_ = ga.x_min();
        h_ = ga.dx();
        const std::size_t n = ga.size();
        f_.resize(n);
        for (std::size_t i = 0; i < n; ++i) f_[i] = std::conj(a.values()[i]) * b.values()[i];
        prefix_.resize(n);
        prefix_[0] = complex{};
        for (std::size_t i = 1; i < n; ++i) {
            if (i % 2 == 0)
                prefix_[i] = prefix_[i - 2] + (h_ / 3.0) * (f_[i - 2] + 4.0 * f_[i - 1] + f_[i]);
            else if (i + 1 < n)
                prefix_[i] =
                    prefix_[i - 1] + (h_ / 12.0) * (5.0 * f_[i - 1] + 8.0 * f_[i] - f_[i + 1]);
            else
                prefix_[i] =
                    prefix_[i - 1] + (h_ / 12.0) * (-f_[i - 2] + 8.0 * f_[i - 1] + 5.0 * f_[i]);
        }
    }

    // Integral of the pair density over [u, w], clipped to where the states
    // are known.
    complex between(double u, double w) const {
        if (!(w > u)) return {};
        if (exact_) return exact_pair_interval(a_->regions(), b_->regions(), u, w);
        if (!shared_grid_) return sampled_pair(*a_, *b_, u, w, {});
        return anti(w) - anti(u);
    }

    // chi-weighted integral over the region of radius r with an optional
    // fuzzy skin. The membership enters as a plain function of x so callers
    // can remap an existing profile to other radii.
    complex region(double r, double skin, const std::function<double(double)>& skin_weight) const {
        if (!(r > 0.0)) throw std::invalid_argument("sojourn region radius must be positive");
        const bool radial = a_->kind() == StateKind::Radial;
        const double outer = r + std::max(skin, 0.0);
        auto ensure_reach = [&](const StationaryState& s) {
            if (s.exact_regions()) return;
            const double eps = 1e-9 * std::max(1.0, outer);
            const bool beyond = radial ? outer > s.grid().x_max() + eps
                                       : (outer > s.grid().x_max() + eps ||
                                          -outer < s.grid().x_min() - eps);
            if (beyond) {
                std::ostringstream msg;
                msg << "sojourn region of half-width " << outer
                    << " extends past the sampled grid [" << s.grid().x_min() << ", "
                    << s.grid().x_max() << "]; solve the state on a larger grid";
                throw std::invalid_argument(msg.str());
            }
        };
        ensure_reach(*a_);
        if (a_ != b_) ensure_reach(*b_);

        const double lo =
            radial ? std::max(0.0, exact_ ? a_->regions().front().lo : a_->grid().x_min()) : -r;
        complex acc = between(lo, r);
        if (skin > 0.0) {
            acc += sampled_pair(*a_, *b_, r, outer, skin_weight);
            if (!radial) acc += sampled_pair(*a_, *b_, -outer, -r, skin_weight);
        }
        return acc;
    }

  private:
    complex anti(double x) const {
        const std::size_t n = f_.size();
        const double t_full = (x - x0_) / h_;
        if (t_full <= 0.0) return {};
        if (t_full >= static_cast<double>(n - 1)) return prefix_.back();
        const auto j = std::min(static_cast<std::size_t>(t_full), n - 2);
        const double t = t_full - static_cast<double>(j);
        const double t2 = t * t, t3 = t2 * t;
        complex part;
        if (j == 0)
            part = h_ * (f_[0] * (t - 0.75 * t2 + t3 / 6.0) + f_[1] * (t2 - t3 / 3.0) +
                         f_[2] * (t3 / 6.0 - 0.25 * t2));
        else
            part = h_ * (f_[j - 1] * (t3 / 6.0 - 0.25 * t2) + f_[j] * (t - t3 / 3.0) +
                         f_[j + 1] * (t3 / 6.0 + 0.25 * t2));
        return prefix_[j] + part;
    }

    const StationaryState* a_;
    const StationaryState* b_;
    bool exact_ = false;
    bool shared_grid_ = false;
    double x0_ = 0.0, h_ = 1.0;
    std::vector<complex> f_, prefix_;
};

// One-shot convenience over PairDensity for callers that query a single
// region.
complex pair_region_integral(const StationaryState& sa, const StationaryState& sb, double r,
                             double skin, const std::function<double(double)>& skin_weight) {
    return PairDensity(sa, sb).region(r, skin, skin_weight);
}

// Sojourn normalization per unit incoming flux: m/(hbar k) on the line. The
// radial wave e^{i delta} sin(ks - l pi/2 + delta) splits into beams of
// amplitude 1/2 on a half line, which costs an extra factor of four.
double flux_prefactor(const StationaryState& s) {
    return (s.kind() == StateKind::Radial ? 4.0 : 1.0) / s.wavenumber_outside();
}

Channel state_channel(const StationaryState& s) {
    return s.kind() == StateKind::FullLineRight ? Channel::FromRight : Channel::FromLeft;
}

void validate_pairing(const StationaryState& bra, const StationaryState& ket) {
    const double scale = std::max(1.0, std::abs(bra.energy()));
    if (std::abs(bra.energy() - ket.energy()) > 1e-9 * scale)
        throw std::invalid_argument("cross sojourn needs two states at the same energy");
    const bool br = bra.kind() == StateKind::Radial;
    const bool kr = ket.kind() == StateKind::Radial;
    if (br != kr) throw std::invalid_argument("cross sojourn cannot mix geometries");
    if (bra.exact_regions() && ket.exact_regions()) {
        const auto& a = bra.regions();
        const auto& b = ket.regions();
        if (a.size() != b.size())
            throw std::invalid_argument("cross sojourn states do not share a region partition");
        for (std::size_t j = 0; j < a.size(); ++j)
            if (std::abs(a[j].lo - b[j].lo) > 1e-9)
                throw std::invalid_argument(
                    "cross sojourn states do not share a region partition");
    }
}

// ---------------------------------------------------------------------------
// Free reference sojourn times in closed form.

double skin_oscillation_integral(const FuzzyProfile& region, double k) {
    // Integral of chi(|x|) e^{2ikx} over both skins. By the x -> -x symmetry
    // of the membership this is twice the real part of the right skin.
    if (region.skin() <= 0.0) return 0.0;
    auto f = [&](double x) { return region.membership(x) * 2.0 * std::cos(2.0 * k * x); };
    return simpson(f, region.radius(), region.radius() + region.skin(),
                   oscillation_panels(region.skin(), k, 48.0, 128.0));
}

double free_reference_value(SojournKind kind, const SMatrix1D& s, double r,
                            const FuzzyProfile* region, Channel channel) {
    if (!(r > 0.0)) throw std::invalid_argument("free reference radius must be positive");
    if (kind == SojournKind::Interaction)
        throw std::invalid_argument(
            "the interaction sojourn needs a stationary state, not a free reference");
    if (kind == SojournKind::FreeFlight)
        throw std::invalid_argument(
            "the free-flight reference is a fitted limit; use free_flight_reference");
    const double k = wavenumber(s.energy);
    const double eff = region ? region->free_flight_normalizer() : r;
    const double incoming = 2.0 * eff / k;
    if (kind == SojournKind::FreeIncoming) return incoming;

    // Outgoing reference: the freely evolving S phi is the superposition of
    // the transmitted and reflected beams, whose interference survives the
    // region integral.
    const complex refl = channel == Channel::FromLeft ? s.reflection_left : s.reflection_right;
    double osc = std::sin(2.0 * k * r) / k;
    if (region) osc += skin_oscillation_integral(*region, k);
    const double outgoing = (std::norm(s.transmission) + std::norm(refl)) * 2.0 * eff / k +
                            (2.0 / k) * std::real(s.transmission * std::conj(refl)) * osc;
    if (kind == SojournKind::FreeOutgoing) return outgoing;
    return 0.5 * (incoming + outgoing);
}

double radial_free_value(int l, double energy, double r, const FuzzyProfile* region) {
    if (l < 0) throw std::invalid_argument("angular momentum must be non-negative");
    if (!(energy > 0.0)) throw std::invalid_argument("free reference energy must be positive");
    if (!(r > 0.0)) throw std::invalid_argument("free reference radius must be positive");
    const double k = wavenumber(energy);
    auto density = [&](double s) {
        if (s <= 0.0) return 0.0;
        const double x = k * s;
        const double wave = (l == 0) ? std::sin(x) : x * std::sph_bessel(static_cast<unsigned>(l), x);
        return wave * wave;
    };
    double raw;
    if (l == 0) {
        raw = 0.5 * r - std::sin(2.0 * k * r) / (4.0 * k);
    } else {
        raw = simpson(density, 0.0, r, oscillation_panels(r, k, 64.0, 256.0));
    }
    if (region && region->skin() > 0.0) {
        auto f = [&](double s) { return region->membership(s) * density(s); };
        raw += simpson(f, r, r + region->skin(),
                       oscillation_panels(region->skin(), k, 48.0, 128.0));
    }
    return 4.0 / k * raw;
}

// ---------------------------------------------------------------------------
// Linear growth fits for the free-flight normalization.

struct GrowthFit {
    double slope = 0.0;
    double intercept = 0.0;
    double rms = 0.0;
    double x_lo = 0.0, x_hi = 0.0;
};

// Equal-weight mean over exactly one period. For a trailing interference
// with a single spatial frequency this annihilates the oscillation to
// machine precision (a discrete Fourier mode below the Nyquist index sums
// to zero over a uniform cycle). A premeaned caller passes period zero and
// is sampled once.
double period_mean(const std::function<double(double)>& f, double center, double period) {
    constexpr int kN = 16;
    if (!(period > 0.0)) return f(center);
    double acc = 0.0;
    for (int j = 0; j < kN; ++j)
        acc += f(center + period * (static_cast<double>(j) / kN - 0.5));
    return acc / kN;
}

// Least-squares line through period-averaged sojourn samples, log-spaced
// over [r_lo, r_hi]. Averaging over one oscillation period removes the
// trailing interference, so a clean linear growth fits to roundoff.
GrowthFit fit_linear_growth(const std::function<double(double)>& sojourn_at,
                            const std::function<double(double)>& abscissa, double r_lo,
                            double r_hi, double period) {
    constexpr int kSamples = 9;
    double xs[kSamples], ys[kSamples];
    for (int j = 0; j < kSamples; ++j) {
        const double t = static_cast<double>(j) / (kSamples - 1);
        const double rj = r_lo * std::pow(r_hi / r_lo, t);
        ys[j] = period_mean(sojourn_at, rj, period);
        xs[j] = abscissa(rj);
    }
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    for (int j = 0; j < kSamples; ++j) {
        sx += xs[j];
        sy += ys[j];
        sxx += xs[j] * xs[j];
        sxy += xs[j] * ys[j];
    }
    const double n = kSamples;
    const double det = n * sxx - sx * sx;
    GrowthFit fit;
    fit.slope = (n * sxy - sx * sy) / det;
    fit.intercept = (sy * sxx - sx * sxy) / det;
    double sse = 0.0;
    for (int j = 0; j < kSamples; ++j) {
        const double resid = ys[j] - fit.intercept - fit.slope * xs[j];
        sse += resid * resid;
    }
    fit.rms = std::sqrt(sse / n);
    fit.x_lo = xs[0];
    fit.x_hi = xs[kSamples - 1];
    return fit;
}

void require_converged_growth(const GrowthFit& fit, const char* what) {
    const double scale = std::abs(fit.slope) * (fit.x_hi - fit.x_lo);
    if (!(fit.rms <= 1e-3 * std::max(scale, 1e-30))) {
        std::ostringstream msg;
        msg << what << " slope fit did not converge: slope " << fit.slope << ", rms residual "
            << fit.rms << " over region sizes [" << fit.x_lo << ", " << fit.x_hi << "]";
        throw std::runtime_error(msg.str());
    }
}

struct FlightWindow {
    double r_lo = 0.0, r_hi = 0.0, period = 0.0;
};

// Decade of radii for the slope fit, clear of the potential support and,
// for interpolated states, inside the sampled grid.
FlightWindow flight_window(const StationaryState& st, double skin_ratio) {
    const double k = st.wavenumber_outside();
    const double lambda = 2.0 * kPi / k;
    const double period = kPi / k;
    if (st.exact_regions()) {
        const auto& rg = st.regions();
        const double support = std::max(std::abs(rg.front().hi), std::abs(rg.back().lo));
        const double r_lo = std::max(support + 2.0 * lambda + period, 4.0 * lambda);
        return {r_lo, 10.0 * r_lo, period};
    }
    const bool radial = st.kind() == StateKind::Radial;
    const double reach =
        radial ? st.grid().x_max() : std::min(st.grid().x_max(), -st.grid().x_min());
    const double r_hi = (reach - 0.5 * period) / (1.0 + std::max(skin_ratio, 0.0));
    const double r_lo = std::max(4.0 * lambda, r_hi / 10.0);
    if (!(r_hi >= 3.0 * r_lo))
        throw std::invalid_argument(
            "state grid is too small for a free-flight slope fit; solve on a grid reaching "
            "well past ten de Broglie wavelengths");
    return {r_lo, r_hi, period};
}

// ---------------------------------------------------------------------------
// On-shell 2x2 algebra in the (+, -) direction basis.

struct Mat2 {
    complex a, b, c, d;  // [[a, b], [c, d]]
};

Mat2 mul(const Mat2& x, const Mat2& y) {
    return {x.a * y.a + x.b * y.c, x.a * y.b + x.b * y.d, x.c * y.a + x.d * y.c,
            x.c * y.b + x.d * y.d};
}

Mat2 adjoint(const Mat2& x) {
    return {std::conj(x.a), std::conj(x.c), std::conj(x.b), std::conj(x.d)};
}

Mat2 scattering_matrix(const SMatrix1D& s) {
    return {s.transmission, s.reflection_right, s.reflection_left, s.transmission};
}

// Projector on the post-selected outgoing direction; a transmitted beam
// keeps the incident direction.
Mat2 selection_matrix(Condition condition, Channel channel) {
    if (condition == Condition::None) return {1.0, 0.0, 0.0, 1.0};
    const bool keep_plus = (condition == Condition::Transmit) == (channel == Channel::FromLeft);
    return keep_plus ? Mat2{1.0, 0.0, 0.0, 0.0} : Mat2{0.0, 0.0, 0.0, 1.0};
}

complex diag_entry(const Mat2& m, Channel channel) {
    return channel == Channel::FromLeft ? m.a : m.d;
}

complex off_entry(const Mat2& m, Channel channel) {
    // Row of the incident channel, column of the other one.
    return channel == Channel::FromLeft ? m.b : m.c;
}

[[noreturn]] void throw_condition_starved(double weight) {
    std::ostringstream msg;
    msg << "post-selection weight " << weight << " is below " << kConditionFloor
        << "; the condition is almost never satisfied";
    throw std::runtime_error(msg.str());
}

// ---------------------------------------------------------------------------
// Scattering phase derivatives.

double default_phase_step(double energy) { return std::min(1e-3, energy / 200.0); }

struct ShellDerivatives {
    SMatrix1D s;
    double d_transmission = 0.0;
    double d_reflection_left = 0.0;
    double d_reflection_right = 0.0;
    double error = 0.0;
};

ShellDerivatives shell_derivatives(const Potential& pot, double energy, double step) {
    const double h = step > 0.0 ? step : default_phase_step(energy);
    std::map<double, SMatrix1D> cache;
    auto at = [&](double e) -> const SMatrix1D& {
        auto it = cache.find(e);
        if (it == cache.end()) it = cache.emplace(e, s_matrix(pot, e)).first;
        return it->second;
    };
    ShellDerivatives out;
    out.s = at(energy);
    // Near a transmission resonance one reflection amplitude passes through
    // zero; its phase then flips too fast for any finite stencil. The term
    // enters every delay with weight |amplitude|^2, and near an amplitude
    // zero |a|^2 * d(arg a)/dE ~ |a| * d|a|/dE, so dropping the derivative
    // for a small amplitude costs at most O(|a|).
    auto derive = [&](const std::function<complex(const SMatrix1D&)>& entry, double* slot) {
        const double mag = std::abs(entry(out.s));
        if (mag < 1e-6) return;
        auto phase = [&](double e) { return std::arg(entry(at(e))); };
        for (double trial = h;; trial /= 20.0) {
            try {
                const DerivativeEstimate d = phase_derivative(phase, energy, trial);
                *slot = d.value;
                out.error = std::max(out.error, d.error);
                return;
            } catch (const std::runtime_error&) {
                if (trial > h / 400.0) continue;
                if (mag < 1e-3) return;
                throw;
            }
        }
    };
    derive([](const SMatrix1D& m) { return m.transmission; }, &out.d_transmission);
    derive([](const SMatrix1D& m) { return m.reflection_left; }, &out.d_reflection_left);
    derive([](const SMatrix1D& m) { return m.reflection_right; }, &out.d_reflection_right);
    return out;
}

DerivativeEstimate radial_phase_shift_derivative(const Potential& pot, double energy,
                                                 double step) {
    const double h = step > 0.0 ? step : default_phase_step(energy);
    auto delta = [&](double e) { return solve_radial(pot, e, radial_grid(pot, e)).phase_shift(); };
    return phase_derivative(delta, energy, h);
}

std::pair<complex, double> selected_amplitude(const ShellDerivatives& sd, Condition condition,
                                              Channel channel) {
    if (condition == Condition::Transmit) return {sd.s.transmission, sd.d_transmission};
    if (channel == Channel::FromLeft) return {sd.s.reflection_left, sd.d_reflection_left};
    return {sd.s.reflection_right, sd.d_reflection_right};
}

// ---------------------------------------------------------------------------
// Shared machinery for the growing-region delays.

// Fixed-energy tables climb a decade so the envelope analysis has clean
// asymptotics; packet tables converge much sooner (the averaged
// interference dies off) and a half decade keeps the energy quadrature
// honest at the largest radius.
std::vector<double> default_radii(const Potential& pot, double k, bool packet_weighted) {
    const double lambda = 2.0 * kPi / k;
    const double support =
        std::max({std::abs(pot.support_lo()), std::abs(pot.support_hi()), 0.0});
    const double base = std::max(support + 2.0 * lambda, 8.0 * lambda);
    const int rows = packet_weighted ? 4 : 7;
    std::vector<double> rs(rows);
    for (int j = 0; j < rows; ++j) rs[j] = base * std::pow(10.0, static_cast<double>(j) / 6.0);
    return rs;
}

// Energy nodes dense enough to resolve the e^{2ikr} interference phase at
// the largest region size. A coarser node sum aliases the oscillation that
// the continuum energy average suppresses, and the convergence table turns
// into noise.
EnergyProfile resolve_for_radius(const EnergyProfile& packet, double r_top) {
    if (packet.size() < 2) return packet;
    const double span = packet.energy(packet.size() - 1) - packet.energy(0);
    const double k_min = wavenumber(packet.energy(0));
    auto n = static_cast<std::size_t>(std::ceil(1.0 + span * r_top / (0.15 * k_min)));
    if (n % 2 == 0) ++n;
    n = std::min<std::size_t>(n, 4001);
    if (n <= packet.size()) return packet;
    return packet.resample(n);
}

std::vector<std::pair<double, double>> quadrature_nodes(const EnergyProfile& packet) {
    std::vector<std::pair<double, double>> ew;
    ew.reserve(packet.size());
    for (std::size_t i = 0; i < packet.size(); ++i)
        ew.emplace_back(packet.energy(i), packet.weight(i) * std::norm(packet.amplitude(i)));
    return ew;
}

void validate_radii(const std::vector<double>& rs) {
    if (rs.empty()) throw std::invalid_argument("region schedule has no radii");
    double prev = 0.0;
    for (double r : rs) {
        if (!(r > prev))
            throw std::invalid_argument("region schedule radii must be positive and ascending");
        prev = r;
    }
}

// Solve a state whose sampled grid reaches max_extent when exact region
// data cannot be relied on.
StationaryState solve_for_sojourn(const Potential& pot, double energy, Channel channel,
                                  double max_extent) {
    if (pot.geometry() == Geometry::Radial) {
        const SpatialGrid base = radial_grid(pot, energy, 120.0);
        StationaryState st = solve_radial(pot, energy, base);
        if (!st.exact_regions() && base.x_max() < max_extent) {
            const auto n = static_cast<std::size_t>(
                               std::ceil((max_extent - base.x_min()) / base.dx())) +
                           1;
            st = solve_radial(pot, energy, SpatialGrid(base.x_min(), max_extent, n));
        }
        return st;
    }
    if (pot.piecewise_constant())
        return solve_full_line(pot, energy, full_line_grid(pot, energy), channel);
    const double lambda = 2.0 * kPi / wavenumber(energy);
    const double margin = std::max({4.0, (max_extent + pot.support_lo()) / lambda + 2.0,
                                    (max_extent - pot.support_hi()) / lambda + 2.0});
    return solve_full_line(pot, energy, full_line_grid(pot, energy, 120.0, margin), channel);
}

// One prepared incident energy: the scattering state, its amplitudes, the
// packet weight, the cached pair density, and the fitted free-flight slope
// when needed. The density points into the state, so it is bound only once
// the node sits at its final address.
struct SojournNode {
    StationaryState state;
    SMatrix1D amplitudes;
    double weight = 1.0;
    double flight_slope = 0.0;
    std::optional<PairDensity> density;
};

// The asymptotic growth rate is a property of the probability density far
// from the support, not of the skin, so the fit always runs on sharp
// regions: there the trailing interference has the single frequency 2k and
// the period mean strips it exactly. Fuzzy regions reuse the slope against
// their effective size f(r, rho).
double fitted_flight_slope(const StationaryState& st) {
    const FlightWindow win = flight_window(st, 0.0);
    const double pref = flux_prefactor(st);
    const PairDensity pd(st, st);
    auto sojourn_at = [&](double rr) { return pref * std::real(pd.region(rr, 0.0, {})); };
    auto abscissa = [](double rr) { return rr; };
    const GrowthFit fit = fit_linear_growth(sojourn_at, abscissa, win.r_lo, win.r_hi, win.period);
    require_converged_growth(fit, "free-flight");
    return fit.slope;
}

DelayConvention convention_of(ReferenceKind ref) {
    switch (ref) {
        case ReferenceKind::Incoming: return DelayConvention::LocalIncoming;
        case ReferenceKind::Outgoing: return DelayConvention::LocalOutgoing;
        case ReferenceKind::Symmetric: return DelayConvention::LocalSymmetric;
        case ReferenceKind::FreeFlight: return DelayConvention::LocalFreeFlight;
    }
    return DelayConvention::LocalIncoming;
}

SojournKind reference_sojourn_kind(ReferenceKind ref) {
    switch (ref) {
        case ReferenceKind::Incoming: return SojournKind::FreeIncoming;
        case ReferenceKind::Outgoing: return SojournKind::FreeOutgoing;
        case ReferenceKind::Symmetric: return SojournKind::FreeSymmetric;
        case ReferenceKind::FreeFlight: return SojournKind::FreeFlight;
    }
    return SojournKind::FreeIncoming;
}

// Midpoint of the delay envelope over one trailing oscillation period. On a
// piecewise-constant potential the fixed-energy delay beyond the support is
// a constant plus a single sinusoid in r, so the midpoint recovers the
// constant; the shift against the previous period probes the error.
double envelope_midpoint(const std::function<double(double)>& delay_at, double top,
                         double period, double* error_probe) {
    auto midpoint = [&](double hi) {
        double mn = std::numeric_limits<double>::infinity();
        double mx = -mn;
        const int n = 32;
        for (int j = 0; j <= n; ++j) {
            const double v = delay_at(hi - period + period * static_cast<double>(j) / n);
            mn = std::min(mn, v);
            mx = std::max(mx, v);
        }
        return 0.5 * (mn + mx);
    };
    const double m1 = midpoint(top);
    if (error_probe) *error_probe = std::abs(m1 - midpoint(top - period));
    return m1;
}

// Fill value and residual from the table: packet-weighted tables converge
// in 1/r and are extrapolated by eliminating that term from the last two
// rows; fixed-energy tables oscillate and use the envelope midpoint.
void extrapolate_table(DelayResult& out, bool packet_weighted,
                       const std::function<double(double)>& delay_at, double period) {
    if (packet_weighted && out.table.size() >= 2) {
        const ConvergenceRow& p = out.table[out.table.size() - 2];
        const ConvergenceRow& q = out.table.back();
        out.value = (q.radius * q.value - p.radius * p.value) / (q.radius - p.radius);
        out.residual = std::abs(out.value - q.value);
    } else {
        double probe = 0.0;
        out.value = envelope_midpoint(delay_at, out.table.back().radius, period, &probe);
        out.residual = probe;
    }
    out.residual = std::max(out.residual, 1e-14 * std::max(1.0, std::abs(out.value)));
    for (ConvergenceRow& row : out.table) row.residual = std::abs(row.value - out.value);
}

DelayResult local_delay_impl(const Potential& pot, double fixed_energy,
                             const EnergyProfile* packet, Channel channel,
                             const RegionSchedule& schedule, ReferenceKind reference) {
    const bool packet_weighted = packet != nullptr;
    const bool radial = pot.geometry() == Geometry::Radial;
    const double k_min = wavenumber(packet ? packet->energy(0) : fixed_energy);
    std::vector<double> radii =
        schedule.radii.empty() ? default_radii(pot, k_min, packet_weighted) : schedule.radii;
    validate_radii(radii);
    const double r_top = radii.back();

    std::vector<std::pair<double, double>> energy_weights;
    if (packet) {
        energy_weights = quadrature_nodes(resolve_for_radius(*packet, r_top + schedule.skin_at(r_top)));
    } else {
        energy_weights = {{fixed_energy, 1.0}};
    }

    std::vector<SojournNode> nodes;
    nodes.reserve(energy_weights.size());
    for (const auto& [e, w] : energy_weights) {
        const double lambda = 2.0 * kPi / wavenumber(e);
        const double max_extent = r_top + schedule.skin_at(r_top) + 2.5 * lambda;
        nodes.push_back({solve_for_sojourn(pot, e, channel, max_extent), SMatrix1D{}, w, 0.0, {}});
        SojournNode& node = nodes.back();
        node.amplitudes.energy = e;
        node.amplitudes.transmission = node.state.transmission();
        node.amplitudes.reflection_left = node.state.reflection();
        node.amplitudes.reflection_right = node.state.reflection();
        node.density.emplace(node.state, node.state);
        if (reference == ReferenceKind::FreeFlight)
            node.flight_slope = fitted_flight_slope(node.state);
    }

    auto delay_at = [&](double r) {
        const double rho = schedule.skin_at(r);
        std::optional<FuzzyProfile> fz;
        std::function<double(double)> weight;
        if (rho > 0.0) {
            fz.emplace(schedule.profile_at(r));
            weight = [&fz](double x) { return fz->membership(x); };
        }
        double acc = 0.0;
        for (const SojournNode& node : nodes) {
            const double interaction =
                flux_prefactor(node.state) * std::real(node.density->region(r, rho, weight));
            double ref;
            if (reference == ReferenceKind::FreeFlight) {
                ref = node.flight_slope * (fz ? fz->free_flight_normalizer() : r);
            } else if (radial) {
                ref = radial_free_value(pot.angular_momentum(), node.amplitudes.energy, r,
                                        fz ? &*fz : nullptr);
            } else {
                ref = free_reference_value(reference_sojourn_kind(reference), node.amplitudes,
                                           r, fz ? &*fz : nullptr, channel);
            }
            acc += node.weight * (interaction - ref);
        }
        return acc;
    };

    DelayResult out;
    out.convention = convention_of(reference);
    out.channel = channel;
    for (double r : radii) out.table.push_back({r, schedule.skin_at(r), delay_at(r), 0.0});
    out.skin = out.table.back().skin;
    extrapolate_table(out, packet_weighted, delay_at, kPi / k_min);
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// On-shell sojourn times.

SojournOnShell onshell_interaction_sojourn(const StationaryState& state, double r) {
    SojournOnShell out;
    out.energy = state.energy();
    out.radius = r;
    out.kind = SojournKind::Interaction;
    out.channel = state_channel(state);
    out.value = flux_prefactor(state) * std::real(pair_region_integral(state, state, r, 0.0, {}));
    return out;
}

SojournOnShell onshell_interaction_sojourn(const StationaryState& state,
                                           const FuzzyProfile& region) {
    SojournOnShell out;
    out.energy = state.energy();
    out.radius = region.radius();
    out.skin = region.skin();
    out.kind = SojournKind::Interaction;
    out.channel = state_channel(state);
    auto weight = [&region](double x) { return region.membership(x); };
    out.value = flux_prefactor(state) *
                std::real(pair_region_integral(state, state, region.radius(), region.skin(),
                                               weight));
    return out;
}

complex onshell_cross_sojourn(const StationaryState& bra, const StationaryState& ket, double r) {
    validate_pairing(bra, ket);
    return flux_prefactor(bra) * pair_region_integral(bra, ket, r, 0.0, {});
}

complex onshell_cross_sojourn(const StationaryState& bra, const StationaryState& ket,
                              const FuzzyProfile& region) {
    validate_pairing(bra, ket);
    auto weight = [&region](double x) { return region.membership(x); };
    return flux_prefactor(bra) *
           pair_region_integral(bra, ket, region.radius(), region.skin(), weight);
}

SojournOnShell free_reference_sojourn(SojournKind kind, const SMatrix1D& s, double r,
                                      Channel channel) {
    SojournOnShell out;
    out.energy = s.energy;
    out.radius = r;
    out.kind = kind;
    out.channel = channel;
    out.value = free_reference_value(kind, s, r, nullptr, channel);
    return out;
}

SojournOnShell free_reference_sojourn(SojournKind kind, const SMatrix1D& s,
                                      const FuzzyProfile& region, Channel channel) {
    SojournOnShell out;
    out.energy = s.energy;
    out.radius = region.radius();
    out.skin = region.skin();
    out.kind = kind;
    out.channel = channel;
    out.value = free_reference_value(kind, s, region.radius(), &region, channel);
    return out;
}

namespace {

SojournOnShell free_flight_impl(const StationaryState& state, double r,
                                const FuzzyProfile* region) {
    SojournOnShell out;
    out.energy = state.energy();
    out.radius = r;
    out.skin = region ? region->skin() : 0.0;
    out.kind = SojournKind::FreeFlight;
    out.channel = state_channel(state);
    out.value = fitted_flight_slope(state) * (region ? region->free_flight_normalizer() : r);
    return out;
}

}  // namespace

SojournOnShell free_flight_reference(const StationaryState& state, double r) {
    if (!(r > 0.0)) throw std::invalid_argument("free reference radius must be positive");
    return free_flight_impl(state, r, nullptr);
}

SojournOnShell free_flight_reference(const StationaryState& state, const FuzzyProfile& region) {
    return free_flight_impl(state, region.radius(), &region);
}

SojournOnShell radial_free_sojourn(int l, double energy, double r) {
    SojournOnShell out;
    out.energy = energy;
    out.radius = r;
    out.kind = SojournKind::FreeIncoming;
    out.value = radial_free_value(l, energy, r, nullptr);
    return out;
}

SojournOnShell radial_free_sojourn(int l, double energy, const FuzzyProfile& region) {
    SojournOnShell out;
    out.energy = energy;
    out.radius = region.radius();
    out.skin = region.skin();
    out.kind = SojournKind::FreeIncoming;
    out.value = radial_free_value(l, energy, region.radius(), &region);
    return out;
}

// ---------------------------------------------------------------------------
// Region schedules.

double RegionSchedule::skin_at(double r) const {
    if (skin_over_radius > 0.0) return skin_over_radius * r;
    return std::max(skin, 0.0);
}

FuzzyProfile RegionSchedule::profile_at(double r) const {
    const double rho = skin_at(r);
    if (shape && rho > 0.0) return FuzzyProfile(r, rho, shape);
    return FuzzyProfile(r, rho);
}

// ---------------------------------------------------------------------------
// Delays.

DelayResult local_time_delay(const Potential& pot, double energy, const RegionSchedule& schedule,
                             ReferenceKind reference, Channel channel) {
    if (!(energy > 0.0)) throw std::invalid_argument("sojourn energy must be positive");
    return local_delay_impl(pot, energy, nullptr, channel, schedule, reference);
}

DelayResult local_time_delay(const Potential& pot, const EnergyProfile& packet,
                             const RegionSchedule& schedule, ReferenceKind reference) {
    return local_delay_impl(pot, 0.0, &packet, packet.channel(), schedule, reference);
}

DelayResult eisenbud_wigner_delay(const Potential& pot, double energy, Channel channel,
                                  double step) {
    if (!(energy > 0.0)) throw std::invalid_argument("delay energy must be positive");
    DelayResult out;
    out.convention = DelayConvention::PhaseDerivative;
    out.channel = channel;
    if (pot.geometry() == Geometry::Radial) {
        const DerivativeEstimate d = radial_phase_shift_derivative(pot, energy, step);
        out.value = 2.0 * d.value;
        out.residual = 2.0 * d.error;
        return out;
    }
    const ShellDerivatives sd = shell_derivatives(pot, energy, step);
    const complex refl =
        channel == Channel::FromLeft ? sd.s.reflection_left : sd.s.reflection_right;
    const double d_refl =
        channel == Channel::FromLeft ? sd.d_reflection_left : sd.d_reflection_right;
    out.value = std::norm(sd.s.transmission) * sd.d_transmission + std::norm(refl) * d_refl;
    out.residual = (std::norm(sd.s.transmission) + std::norm(refl)) * sd.error;
    return out;
}

DelayResult eisenbud_wigner_delay(const Potential& pot, const EnergyProfile& packet,
                                  double step) {
    DelayResult out;
    out.convention = DelayConvention::PhaseDerivative;
    out.channel = packet.channel();
    for (std::size_t i = 0; i < packet.size(); ++i) {
        const DelayResult node =
            eisenbud_wigner_delay(pot, packet.energy(i), packet.channel(), step);
        const double w = packet.weight(i) * std::norm(packet.amplitude(i));
        out.value += w * node.value;
        out.residual += w * node.residual;
    }
    return out;
}

DelayResult conditional_time_delay(const Potential& pot, double energy, Condition condition,
                                   Channel channel, double step) {
    if (pot.geometry() == Geometry::Radial)
        throw std::invalid_argument(
            "post-selected delays need two scattering channels; radial scattering has one");
    if (!(energy > 0.0)) throw std::invalid_argument("delay energy must be positive");
    if (condition == Condition::None) {
        DelayResult out = eisenbud_wigner_delay(pot, energy, channel, step);
        out.convention = DelayConvention::Conditional;
        return out;
    }
    const ShellDerivatives sd = shell_derivatives(pot, energy, step);
    const auto [amplitude, d_phase] = selected_amplitude(sd, condition, channel);
    const double weight = std::norm(amplitude);
    if (weight < kConditionFloor) throw_condition_starved(weight);
    DelayResult out;
    out.convention = DelayConvention::Conditional;
    out.condition = condition;
    out.channel = channel;
    out.value = d_phase;
    out.residual = sd.error;
    out.condition_weight = weight;
    return out;
}

DelayResult conditional_time_delay(const Potential& pot, const EnergyProfile& packet,
                                   Condition condition, double step) {
    if (pot.geometry() == Geometry::Radial)
        throw std::invalid_argument(
            "post-selected delays need two scattering channels; radial scattering has one");
    if (condition == Condition::None) {
        DelayResult out = eisenbud_wigner_delay(pot, packet, step);
        out.convention = DelayConvention::Conditional;
        return out;
    }
    double num = 0.0, den = 0.0, err = 0.0;
    for (std::size_t i = 0; i < packet.size(); ++i) {
        const ShellDerivatives sd = shell_derivatives(pot, packet.energy(i), step);
        const auto [amplitude, d_phase] = selected_amplitude(sd, condition, packet.channel());
        const double w =
            packet.weight(i) * std::norm(packet.amplitude(i)) * std::norm(amplitude);
        num += w * d_phase;
        den += w;
        err += w * sd.error;
    }
    if (den < kConditionFloor) throw_condition_starved(den);
    DelayResult out;
    out.convention = DelayConvention::Conditional;
    out.condition = condition;
    out.channel = packet.channel();
    out.value = num / den;
    out.residual = err / den;
    out.condition_weight = den;
    return out;
}

DelayResult translated_quantum_delay(const Potential& pot, const EnergyProfile& packet,
                                     double center, Condition condition, double step) {
    if (pot.geometry() == Geometry::Radial)
        throw std::invalid_argument("translated delays are defined on the full line");
    DelayResult base = condition == Condition::None
                           ? eisenbud_wigner_delay(pot, packet, step)
                           : conditional_time_delay(pot, packet, condition, step);
    const Channel channel = packet.channel();
    const Mat2 selector = selection_matrix(condition, channel);
    const Mat2 sigma{1.0, 0.0, 0.0, -1.0};  // sign(p) on shell
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < packet.size(); ++i) {
        const double e = packet.energy(i);
        const Mat2 s = scattering_matrix(s_matrix(pot, e));
        const Mat2 sdag = adjoint(s);
        const Mat2 g = mul(sdag, mul(selector, s));
        Mat2 d = mul(sdag, mul(sigma, s));
        d.a -= sigma.a;
        d.d -= sigma.d;
        const double w = packet.weight(i) * std::norm(packet.amplitude(i));
        num += w * std::real(diag_entry(mul(g, d), channel)) / wavenumber(e);
        den += w * std::real(diag_entry(g, channel));
    }
    DelayResult out = std::move(base);
    out.convention = DelayConvention::Translated;
    out.condition = condition;
    out.origin = center;
    out.value += center * num / den;
    out.condition_weight = den;
    return out;
}

ResonanceFit resonance_analysis(const Potential& pot, double e_lo, double e_hi,
                                std::size_t samples) {
    if (!(e_lo > 0.0) || !(e_hi > e_lo))
        throw std::invalid_argument("resonance window must satisfy 0 < e_lo < e_hi");
    if (samples < 16) throw std::invalid_argument("resonance scan needs at least 16 samples");
    if (pot.geometry() == Geometry::Radial)
        throw std::invalid_argument("resonance analysis scans the transmission probability "
                                    "and needs the full-line geometry");

    std::vector<double> es(samples);
    for (std::size_t i = 0; i < samples; ++i)
        es[i] = e_lo + (e_hi - e_lo) * static_cast<double>(i) / static_cast<double>(samples - 1);
    const std::vector<SMatrix1D> sweep = s_matrix_sweep(pot, es);
    std::vector<double> t2(samples);
    for (std::size_t i = 0; i < samples; ++i) t2[i] = std::norm(sweep[i].transmission);

    // Local maxima filtered by prominence, so numerical ripple on a flat top
    // does not count as extra peaks.
    const double span = *std::max_element(t2.begin(), t2.end()) -
                        *std::min_element(t2.begin(), t2.end());
    auto flank_min = [&](std::size_t i, std::ptrdiff_t dir) {
        double m = t2[i];
        for (auto j = static_cast<std::ptrdiff_t>(i) + dir;
             j >= 0 && j < static_cast<std::ptrdiff_t>(samples); j += dir) {
            if (t2[static_cast<std::size_t>(j)] > t2[i]) break;
            m = std::min(m, t2[static_cast<std::size_t>(j)]);
        }
        return m;
    };
    std::vector<std::size_t> peaks;
    for (std::size_t i = 1; i + 1 < samples; ++i) {
        if (!(t2[i] > t2[i - 1] && t2[i] >= t2[i + 1])) continue;
        const double prominence = t2[i] - std::max(flank_min(i, -1), flank_min(i, +1));
        if (prominence > 0.05 * span) peaks.push_back(i);
    }
    if (peaks.empty()) {
        std::ostringstream msg;
        msg << "no transmission peak inside [" << e_lo << ", " << e_hi << "]";
        throw std::runtime_error(msg.str());
    }
    if (peaks.size() > 1) {
        std::ostringstream msg;
        msg << "several transmission peaks inside the window:";
        for (std::size_t p : peaks) msg << " E ~ " << es[p];
        msg << "; narrow the window to isolate one";
        throw std::runtime_error(msg.str());
    }

    // Near an isolated pole the transmission phase follows
    //   arg T = b0 + b1 E + arctan((E - E_r) / dE),
    // a pi swing of central slope 1/dE on top of a slowly drifting
    // background. The phase is fitted rather than |T|^2 because a broad
    // resonance rides a strong transmission background: the probability curve
    // then never drops to half maximum and carries no usable width, while the
    // phase swing still does.
    std::vector<double> phase(samples);
    for (std::size_t i = 0; i < samples; ++i) phase[i] = std::arg(sweep[i].transmission);
    for (std::size_t i = 1; i < samples; ++i) {
        while (phase[i] - phase[i - 1] > kPi) phase[i] -= 2.0 * kPi;
        while (phase[i] - phase[i - 1] < -kPi) phase[i] += 2.0 * kPi;
    }

    // Starting values from the finite-difference delay curve: the pole sits
    // at the steepest phase rise, the background slope is the flattest one.
    std::size_t steep = 1;
    double slope_max = -std::numeric_limits<double>::infinity();
    double slope_min = std::numeric_limits<double>::infinity();
    for (std::size_t i = 1; i < samples; ++i) {
        const double sl = (phase[i] - phase[i - 1]) / (es[i] - es[i - 1]);
        if (sl > slope_max) {
            slope_max = sl;
            steep = i;
        }
        slope_min = std::min(slope_min, sl);
    }
    double fit_e = 0.5 * (es[steep] + es[steep - 1]);
    double fit_b1 = std::max(slope_min, 0.0);
    double fit_g =
        std::min(1.0 / std::max(slope_max - fit_b1, 1e-12), 0.25 * (e_hi - e_lo));
    double fit_b0 = 0.0;
    for (std::size_t i = 0; i < samples; ++i)
        fit_b0 += phase[i] - fit_b1 * es[i] - std::atan((es[i] - fit_e) / fit_g);
    fit_b0 /= static_cast<double>(samples);

    auto sse_of = [&](double b0, double b1, double er, double g) {
        double sse = 0.0;
        for (std::size_t j = 0; j < samples; ++j) {
            const double r = phase[j] - (b0 + b1 * es[j] + std::atan((es[j] - er) / g));
            sse += r * r;
        }
        return sse;
    };
    double sse = sse_of(fit_b0, fit_b1, fit_e, fit_g);
    bool converged = false;
    for (int it = 0; it < 200 && !converged; ++it) {
        double jtj[4][4] = {{0.0}};
        double jtr[4] = {0.0};
        for (std::size_t j = 0; j < samples; ++j) {
            const double u = (es[j] - fit_e) / fit_g;
            const double dd = 1.0 / (1.0 + u * u);
            const double grad[4] = {1.0, es[j], -dd / fit_g, -u * dd / fit_g};
            const double resid =
                phase[j] - (fit_b0 + fit_b1 * es[j] + std::atan(u));
            for (int r = 0; r < 4; ++r) {
                jtr[r] += grad[r] * resid;
                for (int c = 0; c < 4; ++c) jtj[r][c] += grad[r] * grad[c];
            }
        }
        // Gaussian elimination with partial pivoting on the 4x4 system.
        double m[4][5];
        for (int r = 0; r < 4; ++r) {
            for (int c = 0; c < 4; ++c) m[r][c] = jtj[r][c];
            m[r][4] = jtr[r];
        }
        bool singular = false;
        for (int col = 0; col < 4; ++col) {
            int pivot = col;
            for (int r = col + 1; r < 4; ++r)
                if (std::abs(m[r][col]) > std::abs(m[pivot][col])) pivot = r;
            if (std::abs(m[pivot][col]) < 1e-300) {
                singular = true;
                break;
            }
            std::swap(m[col], m[pivot]);
            for (int r = 0; r < 4; ++r) {
                if (r == col) continue;
                const double f = m[r][col] / m[col][col];
                for (int c = col; c < 5; ++c) m[r][c] -= f * m[col][c];
            }
        }
        if (singular) break;
        const double db0 = m[0][4] / m[0][0];
        const double db1 = m[1][4] / m[1][1];
        const double de = m[2][4] / m[2][2];
        const double dg = m[3][4] / m[3][3];
        double lambda = 1.0;
        // Keep the width step bounded so the pole cannot tunnel through zero.
        if (std::abs(dg) > 0.4 * fit_g) lambda = 0.4 * fit_g / std::abs(dg);
        if (std::abs(de) > 0.25 * (e_hi - e_lo))
            lambda = std::min(lambda, 0.25 * (e_hi - e_lo) / std::abs(de));
        bool accepted = false;
        while (lambda > 1e-8) {
            const double tb0 = fit_b0 + lambda * db0;
            const double tb1 = fit_b1 + lambda * db1;
            const double te = fit_e + lambda * de;
            const double tg = std::abs(fit_g + lambda * dg);
            const double trial = sse_of(tb0, tb1, te, tg);
            if (trial <= sse) {
                const double step_size =
                    std::max({std::abs(lambda * de) / (e_hi - e_lo),
                              std::abs(lambda * dg) / std::max(fit_g, 1e-12)});
                fit_b0 = tb0;
                fit_b1 = tb1;
                fit_e = te;
                fit_g = tg;
                sse = trial;
                accepted = true;
                if (step_size < 1e-12) converged = true;
                break;
            }
            lambda *= 0.5;
        }
        if (!accepted) converged = true;  // stuck at a minimum of the damped search
    }
    const double margin = 0.5 * (e_hi - e_lo);
    if (!(fit_g > 0.0) || !std::isfinite(fit_b0 + fit_b1 + fit_e + fit_g) ||
        fit_e < e_lo - margin || fit_e > e_hi + margin)
        throw std::runtime_error("resonance fit did not converge");

    ResonanceFit fit;
    fit.peak_energy = fit_e;
    fit.half_width = fit_g;
    fit.peak_height = std::norm(s_matrix(pot, fit_e).transmission);
    fit.background_phase = fit_b0 + fit_b1 * fit_e;
    fit.peak_delay = eisenbud_wigner_delay(pot, fit_e, Channel::FromLeft, fit_g / 20.0).value;
    fit.delay_width_product = fit.peak_delay * fit.half_width;
    fit.fit_quality = std::sqrt(sse / static_cast<double>(samples));
    return fit;
}

// ---------------------------------------------------------------------------
// General post-selected fuzzy delay.

namespace {

DelayResult general_delay_impl(const Potential& pot, double fixed_energy,
                               const EnergyProfile* packet, Channel channel,
                               const GeneralDelayRequest& request) {
    if (pot.geometry() == Geometry::Radial)
        throw std::invalid_argument("the general post-selected delay works on the full line");

    const bool packet_weighted = packet != nullptr;
    const double k_min = wavenumber(packet ? packet->energy(0) : fixed_energy);
    std::vector<double> radii =
        request.radii.empty() ? default_radii(pot, k_min, packet_weighted) : request.radii;
    validate_radii(radii);
    RegionSchedule schedule;
    schedule.radii = radii;
    schedule.skin_over_radius = std::max(request.skin_over_radius, 0.0);
    schedule.shape = request.shape;
    const double r_top = radii.back();

    // The packet must stay alias-free out to every radius the node sum is
    // evaluated at, including the free-flight fit window below, which starts
    // past the support plus a few of the longest wavelengths and whose
    // period means sample half a period beyond the top fit radius.
    double cover = r_top + schedule.skin_at(r_top);
    std::vector<std::pair<double, double>> energy_weights;
    if (packet) {
        const double lam = 2.0 * kPi / k_min;
        const double support =
            std::max(std::abs(pot.support_lo()), std::abs(pot.support_hi()));
        cover = std::max(cover, 3.3 * std::max(support + 3.5 * lam, 4.0 * lam));
        energy_weights = quadrature_nodes(resolve_for_radius(*packet, cover + 0.5 * lam));
    } else {
        energy_weights = {{fixed_energy, 1.0}};
    }

    const Channel other =
        channel == Channel::FromLeft ? Channel::FromRight : Channel::FromLeft;
    struct Node {
        StationaryState incident;
        std::optional<StationaryState> reversed;
        Mat2 g;
        double weight;
        double k;
        std::optional<PairDensity> self;
        std::optional<PairDensity> cross;
    };
    std::vector<Node> nodes;
    nodes.reserve(energy_weights.size());
    double total_weight = 0.0;
    for (const auto& [e, w] : energy_weights) {
        const double lambda = 2.0 * kPi / wavenumber(e);
        const double max_extent = cover + 2.5 * lambda;
        nodes.push_back({solve_for_sojourn(pot, e, channel, max_extent), std::nullopt,
                         Mat2{1.0, 0.0, 0.0, 1.0}, w, wavenumber(e), {}, {}});
        Node& node = nodes.back();
        if (request.condition != Condition::None) {
            node.reversed = solve_for_sojourn(pot, e, other, max_extent);
            SMatrix1D sm;
            sm.energy = e;
            sm.transmission = node.incident.transmission();
            if (channel == Channel::FromLeft) {
                sm.reflection_left = node.incident.reflection();
                sm.reflection_right = node.reversed->reflection();
            } else {
                sm.reflection_right = node.incident.reflection();
                sm.reflection_left = node.reversed->reflection();
            }
            const Mat2 s = scattering_matrix(sm);
            node.g = mul(adjoint(s), mul(selection_matrix(request.condition, channel), s));
        }
        node.self.emplace(node.incident, node.incident);
        if (node.reversed) node.cross.emplace(*node.reversed, node.incident);
        total_weight += w * std::real(diag_entry(node.g, channel));
    }
    if (total_weight < kConditionFloor) throw_condition_starved(total_weight);

    // Post-selected sojourn of one energy node at region size r.
    auto node_sojourn = [&](const Node& node, double r, double rho,
                            const std::function<double(double)>& weight) {
        complex contrib = diag_entry(node.g, channel) * node.self->region(r, rho, weight);
        if (node.cross)
            contrib += off_entry(node.g, channel) * node.cross->region(r, rho, weight);
        return flux_prefactor(node.incident) * std::real(contrib);
    };

    // Post-selected sojourn at region size r, packet-averaged.
    auto selected_sojourn = [&](double r, double rho,
                                const std::function<double(double)>& weight) {
        double num = 0.0;
        for (const Node& node : nodes) num += node.weight * node_sojourn(node, r, rho, weight);
        return num / total_weight;
    };

    // Sharp sojourn with the trailing interference stripped node by node.
    // Each node oscillates at its own frequency 2k, so a shared averaging
    // period would leave the off-period nodes ringing and tilt the slope
    // fit below.
    auto meaned_sharp = [&](double r) {
        double num = 0.0;
        for (const Node& node : nodes) {
            auto one = [&](double rr) { return node_sojourn(node, rr, 0.0, {}); };
            num += node.weight * period_mean(one, r, kPi / node.k);
        }
        return num / total_weight;
    };

    // Free-flight normalization: the growth rate is fitted on sharp regions
    // over a window every node can reach, then scaled by the fuzzy
    // effective size.
    double fit_lo = 0.0, fit_hi = std::numeric_limits<double>::infinity();
    for (const Node& node : nodes) {
        const FlightWindow win = flight_window(node.incident, 0.0);
        fit_lo = std::max(fit_lo, win.r_lo);
        fit_hi = std::min(fit_hi, win.r_hi);
        if (node.reversed) {
            const FlightWindow winr = flight_window(*node.reversed, 0.0);
            fit_lo = std::max(fit_lo, winr.r_lo);
            fit_hi = std::min(fit_hi, winr.r_hi);
        }
    }
    if (packet) fit_hi = std::min(fit_hi, cover);
    if (!(fit_hi >= 3.0 * fit_lo))
        throw std::invalid_argument(
            "state grids are too small for the free-flight normalization fit");
    const bool fuzzy = schedule.skin_over_radius > 0.0;
    const double gint = fuzzy ? schedule.profile_at(1.0).shape_integral() : 0.0;
    auto effective_size = [&](double r) { return r + schedule.skin_at(r) * gint; };
    const GrowthFit fit = fit_linear_growth(
        meaned_sharp, [](double r) { return r; }, fit_lo, fit_hi, 0.0);
    require_converged_growth(fit, "free-flight");

    auto delay_at = [&](double r) {
        const double rho = schedule.skin_at(r);
        std::optional<FuzzyProfile> fz;
        std::function<double(double)> weight;
        if (rho > 0.0) {
            fz.emplace(schedule.profile_at(r));
            weight = [&fz](double x) { return fz->membership(x); };
        }
        return selected_sojourn(r, rho, weight) - fit.slope * effective_size(r);
    };

    DelayResult out;
    out.convention = DelayConvention::GeneralFuzzy;
    out.condition = request.condition;
    out.channel = channel;
    out.condition_weight = total_weight;
    for (double r : radii) out.table.push_back({r, schedule.skin_at(r), delay_at(r), 0.0});
    out.skin = out.table.back().skin;
    extrapolate_table(out, packet_weighted, delay_at, kPi / k_min);
    return out;
}

}  // namespace

DelayResult general_conditional_fuzzy_delay(const Potential& pot, double energy,
                                            const GeneralDelayRequest& request,
                                            Channel channel) {
    if (!(energy > 0.0)) throw std::invalid_argument("delay energy must be positive");
    return general_delay_impl(pot, energy, nullptr, channel, request);
}

DelayResult general_conditional_fuzzy_delay(const Potential& pot, const EnergyProfile& packet,
                                            const GeneralDelayRequest& request) {
    return general_delay_impl(pot, 0.0, &packet, packet.channel(), request);
}

}  // namespace tdlab
