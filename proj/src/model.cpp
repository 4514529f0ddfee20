#include "tdlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace tdlab {

namespace {

// Sort, validate, and gap-fill piecewise segments so they tile an interval.
std::vector<Segment> canonicalize(std::vector<Segment> segs, Geometry geometry) {
    if (segs.empty())
        throw std::invalid_argument("piecewise potential: no segments given");
    std::sort(segs.begin(), segs.end(),
              [](const Segment& a, const Segment& b) { return a.lo < b.lo; });
    for (const Segment& s : segs) {
        if (!(s.hi > s.lo))
            throw std::invalid_argument("piecewise potential: segment with hi <= lo");
        if (geometry == Geometry::Radial && s.lo < 0.0)
            throw std::invalid_argument("piecewise potential: radial segment at s < 0");
    }
    std::vector<Segment> out;
    out.reserve(segs.size());
    for (const Segment& s : segs) {
        if (!out.empty()) {
            double prev_hi = out.back().hi;
            if (s.lo < prev_hi - 1e-12)
                throw std::invalid_argument("piecewise potential: overlapping segments");
            if (s.lo > prev_hi + 1e-12)
                out.push_back({prev_hi, s.lo, 0.0});
        }
        Segment t = s;
        if (!out.empty()) t.lo = out.back().hi;
        out.push_back(t);
    }
    return out;
}

}  // namespace

Potential Potential::piecewise(std::vector<Segment> segments, Geometry geometry) {
    Potential p;
    p.form_ = Form::Piecewise;
    p.geometry_ = geometry;
    p.segments_ = canonicalize(std::move(segments), geometry);
    double lo = p.segments_.front().lo;
    double hi = p.segments_.back().hi;
    p.support_lo_ = lo;
    p.support_hi_ = hi;
    p.support_ = (geometry == Geometry::Radial) ? hi : std::max(std::abs(lo), std::abs(hi));
    return p;
}

Potential Potential::square_barrier(double height, double lo, double hi) {
    return piecewise({{lo, hi, height}});
}

Potential Potential::square_well(double depth, double lo, double hi) {
    if (depth <= 0.0)
        throw std::invalid_argument("square well: depth must be positive");
    return piecewise({{lo, hi, -depth}});
}

Potential Potential::double_barrier(double height, double width, double gap) {
    if (width <= 0.0 || gap <= 0.0)
        throw std::invalid_argument("double barrier: width and gap must be positive");
    double g2 = 0.5 * gap;
    return piecewise({{-g2 - width, -g2, height}, {-g2, g2, 0.0}, {g2, g2 + width, height}});
}

Potential Potential::gaussian_bump(double amplitude, double center, double width,
                                   double support_radius) {
    if (width <= 0.0)
        throw std::invalid_argument("gaussian bump: width must be positive");
    if (support_radius <= std::abs(center))
        throw std::invalid_argument("gaussian bump: support must contain the center");
    Potential p;
    p.form_ = Form::Analytic;
    p.geometry_ = Geometry::FullLine;
    p.support_ = support_radius;
    p.support_lo_ = -support_radius;
    p.support_hi_ = support_radius;
    p.fn_ = [amplitude, center, width](double x) {
        double u = (x - center) / width;
        return amplitude * std::exp(-0.5 * u * u);
    };
    p.dfn_ = [amplitude, center, width](double x) {
        double u = (x - center) / width;
        return -amplitude * u / width * std::exp(-0.5 * u * u);
    };
    return p;
}

Potential Potential::tabulated(std::vector<double> x, std::vector<double> v,
                               Geometry geometry) {
    if (x.size() != v.size())
        throw std::invalid_argument("tabulated potential: x and V lengths differ");
    if (x.size() < 2)
        throw std::invalid_argument("tabulated potential: need at least two samples");
    for (std::size_t i = 1; i < x.size(); ++i)
        if (!(x[i] > x[i - 1]))
            throw std::invalid_argument("tabulated potential: x must be strictly increasing");
    if (geometry == Geometry::Radial && x.front() < 0.0)
        throw std::invalid_argument("tabulated potential: radial samples at s < 0");
    Potential p;
    p.form_ = Form::Tabulated;
    p.geometry_ = geometry;
    p.support_ = (geometry == Geometry::Radial)
                     ? x.back()
                     : std::max(std::abs(x.front()), std::abs(x.back()));
    p.support_lo_ = x.front();
    p.support_hi_ = x.back();
    p.tab_x_ = std::move(x);
    p.tab_v_ = std::move(v);
    return p;
}

Potential Potential::tabulated_from_stream(std::istream& in, Geometry geometry) {
    std::vector<double> xs, vs;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::istringstream ss(line);
        double x, v;
        if (!(ss >> x)) continue;  // blank or comment-only line
        if (!(ss >> v))
            throw std::invalid_argument("tabulated potential line " + std::to_string(lineno) +
                                        ": expected two columns");
        std::string extra;
        if (ss >> extra)
            throw std::invalid_argument("tabulated potential line " + std::to_string(lineno) +
                                        ": trailing content '" + extra + "'");
        xs.push_back(x);
        vs.push_back(v);
    }
    return tabulated(std::move(xs), std::move(vs), geometry);
}

Potential Potential::radial_square_well(double depth, double radius, int l) {
    if (radius <= 0.0)
        throw std::invalid_argument("radial square well: radius must be positive");
    if (l < 0)
        throw std::invalid_argument("radial square well: l must be non-negative");
    Potential p = piecewise({{0.0, radius, -depth}}, Geometry::Radial);
    p.l_ = l;
    return p;
}

Potential Potential::hard_sphere(double core_radius, int l) {
    if (core_radius <= 0.0)
        throw std::invalid_argument("hard sphere: core radius must be positive");
    if (l < 0)
        throw std::invalid_argument("hard sphere: l must be non-negative");
    Potential p;
    p.form_ = Form::Piecewise;
    p.geometry_ = Geometry::Radial;
    p.support_ = core_radius;
    p.support_lo_ = 0.0;
    p.support_hi_ = core_radius;
    p.core_ = core_radius;
    p.l_ = l;
    return p;
}

double Potential::operator()(double x) const {
    if (geometry_ == Geometry::Radial && x < 0.0)
        throw std::invalid_argument("radial potential evaluated at negative radius");
    switch (form_) {
        case Form::Piecewise: {
            for (const Segment& s : segments_)
                if (x >= s.lo && x < s.hi) return s.height;
            return 0.0;
        }
        case Form::Tabulated: {
            if (x <= tab_x_.front() || x >= tab_x_.back()) {
                // Exactly zero outside the sampled window, its boundary
                // included, so the compact support contract holds even when
                // the table does not decay to zero.
                if (x == tab_x_.front()) return tab_v_.front();
                return 0.0;
            }
            auto it = std::upper_bound(tab_x_.begin(), tab_x_.end(), x);
            std::size_t i = static_cast<std::size_t>(it - tab_x_.begin());
            double t = (x - tab_x_[i - 1]) / (tab_x_[i] - tab_x_[i - 1]);
            return tab_v_[i - 1] + t * (tab_v_[i] - tab_v_[i - 1]);
        }
        case Form::Analytic:
            if (std::abs(x) > support_) return 0.0;
            return fn_(x);
    }
    return 0.0;
}

bool Potential::piecewise_constant() const { return form_ == Form::Piecewise; }

const std::vector<Segment>& Potential::segments() const {
    if (form_ != Form::Piecewise)
        throw std::runtime_error("segments() requires a piecewise-constant potential");
    return segments_;
}

double Potential::derivative(double x) const {
    switch (form_) {
        case Form::Piecewise:
            throw std::runtime_error(
                "derivative() undefined for piecewise-constant potentials; "
                "use exact step-crossing kinematics");
        case Form::Tabulated: {
            if (x <= tab_x_.front() || x >= tab_x_.back()) return 0.0;
            auto it = std::upper_bound(tab_x_.begin(), tab_x_.end(), x);
            std::size_t i = static_cast<std::size_t>(it - tab_x_.begin());
            return (tab_v_[i] - tab_v_[i - 1]) / (tab_x_[i] - tab_x_[i - 1]);
        }
        case Form::Analytic:
            if (std::abs(x) > support_) return 0.0;
            return dfn_(x);
    }
    return 0.0;
}

PeriodicPotential::PeriodicPotential(Potential base, double omega,
                                     std::map<int, std::function<complex(double)>> harmonics)
    : base_(std::move(base)), omega_(omega), harmonics_(std::move(harmonics)) {
    if (!(omega_ > 0.0))
        throw std::invalid_argument("periodic potential: omega must be positive");
    for (const auto& [n, fn] : harmonics_) {
        if (n < 1)
            throw std::invalid_argument(
                "periodic potential: store only harmonics n >= 1; negative ones "
                "are conjugates by construction");
        if (!fn)
            throw std::invalid_argument("periodic potential: empty harmonic function");
        max_harmonic_ = std::max(max_harmonic_, n);
    }
}

double PeriodicPotential::period() const { return 2.0 * std::numbers::pi / omega_; }

complex PeriodicPotential::harmonic(int n, double x) const {
    if (n == 0) return complex(base_(x), 0.0);
    auto it = harmonics_.find(std::abs(n));
    if (it == harmonics_.end()) return complex(0.0, 0.0);
    complex value = it->second(x);
    return n > 0 ? value : std::conj(value);
}

double PeriodicPotential::at(double x, double t) const {
    double v = base_(x);
    for (const auto& [n, fn] : harmonics_) {
        complex phase = std::exp(complex(0.0, -n * omega_ * t));
        v += 2.0 * std::real(fn(x) * phase);
    }
    return v;
}

EnergyProfile::EnergyProfile(std::vector<double> energies, std::vector<complex> amplitudes,
                             Channel channel, double energy_floor)
    : energies_(std::move(energies)),
      amplitudes_(std::move(amplitudes)),
      channel_(channel),
      floor_(energy_floor) {
    if (!(floor_ > 0.0))
        throw std::invalid_argument("energy profile: floor must be strictly positive");
    if (energies_.size() != amplitudes_.size())
        throw std::invalid_argument("energy profile: energies and amplitudes lengths differ");
    if (energies_.size() < 2)
        throw std::invalid_argument("energy profile: need at least two samples");
    double dE = energies_[1] - energies_[0];
    if (!(dE > 0.0))
        throw std::invalid_argument("energy profile: energies must be increasing");
    for (std::size_t i = 1; i < energies_.size(); ++i) {
        double step = energies_[i] - energies_[i - 1];
        if (std::abs(step - dE) > 1e-9 * dE)
            throw std::invalid_argument("energy profile: energy grid must be uniform");
    }
    if (energies_.front() < floor_)
        throw std::invalid_argument("energy profile: components below the energy floor " +
                                    std::to_string(floor_) + " are rejected");
    build_weights();
    normalize();
}

EnergyProfile EnergyProfile::gaussian(double e0, double sigma, int n_samples, Channel channel,
                                      double energy_floor) {
    if (!(sigma > 0.0))
        throw std::invalid_argument("gaussian energy profile: sigma must be positive");
    if (n_samples < 2)
        throw std::invalid_argument("gaussian energy profile: need at least two samples");
    double lo = std::max(energy_floor, e0 - 5.0 * sigma);
    double hi = e0 + 5.0 * sigma;
    if (!(hi > lo))
        throw std::invalid_argument("gaussian energy profile: window collapsed by floor");
    std::vector<double> es(static_cast<std::size_t>(n_samples));
    std::vector<complex> as(static_cast<std::size_t>(n_samples));
    double dE = (hi - lo) / (n_samples - 1);
    for (int i = 0; i < n_samples; ++i) {
        double e = lo + dE * i;
        es[static_cast<std::size_t>(i)] = e;
        // sigma is the standard deviation of |phi|^2.
        double u = (e - e0) / sigma;
        as[static_cast<std::size_t>(i)] = std::exp(-0.25 * u * u);
    }
    return EnergyProfile(std::move(es), std::move(as), channel, energy_floor);
}

void EnergyProfile::build_weights() {
    std::size_t n = energies_.size();
    double dE = energies_[1] - energies_[0];
    weights_.assign(n, 0.0);
    if (n >= 3 && n % 2 == 1) {
        // Composite Simpson.
        weights_[0] = weights_[n - 1] = dE / 3.0;
        for (std::size_t i = 1; i + 1 < n; ++i)
            weights_[i] = (i % 2 == 1) ? 4.0 * dE / 3.0 : 2.0 * dE / 3.0;
    } else {
        weights_[0] = weights_[n - 1] = 0.5 * dE;
        for (std::size_t i = 1; i + 1 < n; ++i) weights_[i] = dE;
    }
}

void EnergyProfile::normalize() {
    double total = 0.0;
    for (std::size_t i = 0; i < size(); ++i) total += weights_[i] * std::norm(amplitudes_[i]);
    if (!(total > 0.0))
        throw std::invalid_argument("energy profile: zero norm");
    double scale = 1.0 / std::sqrt(total);
    for (complex& a : amplitudes_) a *= scale;
}

double EnergyProfile::integrate(const std::function<double(std::size_t)>& f) const {
    double total = 0.0;
    for (std::size_t i = 0; i < size(); ++i) total += weights_[i] * f(i);
    return total;
}

double EnergyProfile::norm_squared() const {
    double total = 0.0;
    for (std::size_t i = 0; i < size(); ++i) total += weights_[i] * std::norm(amplitudes_[i]);
    return total;
}

EnergyProfile EnergyProfile::resample(std::size_t n) const {
    if (n < 2)
        throw std::invalid_argument("energy profile resample: need at least two samples");
    double lo = energies_.front();
    double hi = energies_.back();
    double dE = (hi - lo) / static_cast<double>(n - 1);
    std::size_t m = energies_.size();
    double src_dE = energies_[1] - energies_[0];
    std::vector<double> es(n);
    std::vector<complex> as(n);
    for (std::size_t i = 0; i < n; ++i) {
        double e = lo + dE * static_cast<double>(i);
        es[i] = e;
        double pos = (e - lo) / src_dE;
        std::size_t j = std::min(static_cast<std::size_t>(pos), m - 2);
        if (m < 4) {
            double t = pos - static_cast<double>(j);
            as[i] = amplitudes_[j] * (1.0 - t) + amplitudes_[j + 1] * t;
            continue;
        }
        // Cubic Lagrange through the four samples around the cell. A linear
        // blend dents a smooth envelope near its peak, and the dent survives
        // renormalization as a bias on every profile average downstream.
        std::size_t base = (j == 0) ? 0 : std::min(j - 1, m - 4);
        double s = pos - static_cast<double>(base);
        complex val = 0.0;
        for (std::size_t a = 0; a < 4; ++a) {
            double la = 1.0;
            for (std::size_t b = 0; b < 4; ++b)
                if (b != a)
                    la *= (s - static_cast<double>(b)) /
                          (static_cast<double>(a) - static_cast<double>(b));
            val += amplitudes_[base + a] * la;
        }
        as[i] = val;
    }
    return EnergyProfile(std::move(es), std::move(as), channel_, floor_);
}

FuzzyProfile::FuzzyProfile(double r, double rho)
    : FuzzyProfile(r, rho, [](double u) {
          double c = std::cos(0.5 * std::numbers::pi * u);
          return c * c;
      }) {}

FuzzyProfile::FuzzyProfile(double r, double rho, std::function<double(double)> shape)
    : r_(r), rho_(rho), g_(std::move(shape)) {
    if (r_ < 0.0) throw std::invalid_argument("fuzzy profile: radius must be non-negative");
    if (rho_ < 0.0) throw std::invalid_argument("fuzzy profile: skin must be non-negative");
    if (!g_) throw std::invalid_argument("fuzzy profile: empty shape function");
    if (std::abs(g_(0.0) - 1.0) > 1e-12)
        throw std::invalid_argument("fuzzy profile: shape must satisfy g(0) = 1");
    analyze_shape();
}

void FuzzyProfile::analyze_shape() {
    if (rho_ == 0.0) {
        // Sharp indicator; the shape is irrelevant.
        f_norm_ = r_;
        return;
    }
    // Simpson quadrature of g and |g''| on [0,1]. The default shape is
    // smooth enough that 4001 panels put the error far below 1e-10.
    const std::size_t n = 4001;
    const double h = 1.0 / static_cast<double>(n - 1);
    auto simpson = [&](const std::function<double(double)>& f) {
        double total = f(0.0) + f(1.0);
        for (std::size_t i = 1; i + 1 < n; ++i)
            total += ((i % 2 == 1) ? 4.0 : 2.0) * f(h * static_cast<double>(i));
        return total * h / 3.0;
    };
    g_integral_ = simpson(g_);
    const double fd = 1e-4;
    auto second = [&](double u) {
        return (g_(u + fd) - 2.0 * g_(u) + g_(u - fd)) / (fd * fd);
    };
    // One-sided second difference at the left edge of the skin.
    g2_origin_ = std::abs((2.0 * g_(0.0) - 5.0 * g_(fd) + 4.0 * g_(2.0 * fd) - g_(3.0 * fd)) /
                          (fd * fd));
    auto abs_second = [&](double u) {
        if (u < fd) u = fd;
        if (u > 1.0 - fd) u = 1.0 - fd;
        return std::abs(second(u));
    };
    g2_l1_ = simpson(abs_second);
    for (double u = 0.0; u <= 1.0; u += 0.01) {
        double v = g_(u);
        if (v < -1e-12 || v > 1.0 + 1e-12)
            throw std::invalid_argument("fuzzy profile: shape must stay within [0, 1]");
    }
    f_norm_ = r_ + rho_ * g_integral_;
}

double FuzzyProfile::membership(double x) const {
    double ax = std::abs(x);
    if (ax <= r_) return 1.0;
    if (rho_ == 0.0) return 0.0;
    double u = (ax - r_) / rho_;
    if (u >= 1.0) return 0.0;
    return g_(u);
}

SpatialGrid::SpatialGrid(double x_min, double x_max, std::size_t n_points)
    : x_min_(x_min), x_max_(x_max), n_(n_points) {
    if (!(x_max_ > x_min_))
        throw std::invalid_argument("spatial grid: x_max must exceed x_min");
    if (n_ < 2) throw std::invalid_argument("spatial grid: need at least two points");
    dx_ = (x_max_ - x_min_) / static_cast<double>(n_ - 1);
}

SpatialGrid SpatialGrid::for_scattering(const Potential& p, double e_min, double e_max,
                                        double points_per_wavelength,
                                        double margin_wavelengths) {
    if (!(e_min > 0.0) || !(e_max >= e_min))
        throw std::invalid_argument("spatial grid: need 0 < e_min <= e_max");
    double lambda_long = 2.0 * std::numbers::pi / wavenumber(e_min);
    double lambda_short = 2.0 * std::numbers::pi / wavenumber(e_max);
    double extent = p.support_radius() + margin_wavelengths * lambda_long;
    double dx = lambda_short / points_per_wavelength;
    double lo = (p.geometry() == Geometry::Radial) ? 0.0 : -extent;
    auto n = static_cast<std::size_t>(std::ceil((extent - lo) / dx)) + 1;
    return SpatialGrid(lo, extent, n);
}

}  // namespace tdlab
