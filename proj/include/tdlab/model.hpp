#ifndef TDLAB_MODEL_HPP
#define TDLAB_MODEL_HPP

#include <complex>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

// Shared model types: natural units, potentials, incoming energy profiles,
// fuzzy region memberships, and spatial grids. Everything here is immutable
// after construction and safe to read concurrently.

namespace tdlab {

using complex = std::complex<double>;

// Natural units: hbar = m = 1 throughout, so k = sqrt(2E) and v = k.
constexpr double kHbar = 1.0;
constexpr double kMass = 1.0;

inline double wavenumber(double energy) { return std::sqrt(2.0 * energy); }
inline double speed(double energy) { return std::sqrt(2.0 * energy); }

enum class Geometry { FullLine, Radial };

// Half-open constant step [lo, hi) of a piecewise-constant potential.
struct Segment {
    double lo = 0.0;
    double hi = 0.0;
    double height = 0.0;
};

// Compactly supported static potential, either on the full line or on the
// radial half-line. Three storage forms share one interface:
//   piecewise-constant segments (exact transfer-matrix kinematics),
//   tabulated samples with linear interpolation,
//   smooth analytic forms (currently a truncated Gaussian bump).
class Potential {
  public:
    static Potential square_barrier(double height, double lo, double hi);
    static Potential square_well(double depth, double lo, double hi);
    // Two barriers of the given height/width separated by a gap, centered
    // on the origin.
    static Potential double_barrier(double height, double width, double gap);
    static Potential piecewise(std::vector<Segment> segments,
                               Geometry geometry = Geometry::FullLine);
    // amplitude * exp(-(x-center)^2 / (2 width^2)), set to zero beyond the
    // stated support radius. The truncation step is below 1e-15 * amplitude
    // once support >= |center| + 8.5 width.
    static Potential gaussian_bump(double amplitude, double center, double width,
                                   double support_radius);
    static Potential tabulated(std::vector<double> x, std::vector<double> v,
                               Geometry geometry = Geometry::FullLine);
    // Two-column decimal text (x then V), '#' starts a comment. Throws
    // std::invalid_argument naming the offending line.
    static Potential tabulated_from_stream(std::istream& in,
                                           Geometry geometry = Geometry::FullLine);
    static Potential radial_square_well(double depth, double radius, int l);
    // Impenetrable core of the given radius with V = 0 outside.
    static Potential hard_sphere(double core_radius, int l);

    double operator()(double x) const;
    double support_radius() const { return support_; }
    // Interval [support_lo, support_hi] outside which V is exactly zero.
    double support_lo() const { return support_lo_; }
    double support_hi() const { return support_hi_; }
    Geometry geometry() const { return geometry_; }
    int angular_momentum() const { return l_; }
    double hard_core_radius() const { return core_; }

    bool piecewise_constant() const;
    // Segments of a piecewise-constant potential, gaps filled with explicit
    // zero-height steps so they tile [lo of first, hi of last]. Throws for
    // other forms.
    const std::vector<Segment>& segments() const;

    // dV/dx for smooth and tabulated forms (classical force integration).
    // Throws std::runtime_error for piecewise-constant potentials, whose
    // trajectories are handled by exact step crossings instead.
    double derivative(double x) const;

    bool smooth() const { return form_ == Form::Analytic; }

  private:
    enum class Form { Piecewise, Tabulated, Analytic };
    Potential() = default;

    Form form_ = Form::Piecewise;
    Geometry geometry_ = Geometry::FullLine;
    std::vector<Segment> segments_;
    std::vector<double> tab_x_, tab_v_;
    std::function<double(double)> fn_, dfn_;
    double support_ = 0.0;
    double support_lo_ = 0.0, support_hi_ = 0.0;
    int l_ = 0;
    double core_ = 0.0;
};

// Time-periodic potential V(x,t) = V_0(x) + sum_{n>=1} 2 Re[V_n(x) e^{-i n w t}].
// Only the n >= 1 harmonics are stored; the negative ones are their complex
// conjugates, which keeps the reconstructed V(x,t) real by construction.
class PeriodicPotential {
  public:
    PeriodicPotential(Potential base, double omega,
                      std::map<int, std::function<complex(double)>> harmonics);

    const Potential& base() const { return base_; }
    double omega() const { return omega_; }
    double period() const;
    int max_harmonic() const { return max_harmonic_; }

    // V_n(x); n = 0 is the static part, negative n returns conj(V_{-n}).
    complex harmonic(int n, double x) const;
    // Reconstructed real value at (x, t).
    double at(double x, double t) const;

  private:
    Potential base_;
    double omega_ = 0.0;
    std::map<int, std::function<complex(double)>> harmonics_;
    int max_harmonic_ = 0;
};

enum class Channel { FromLeft, FromRight };

// Incoming energy profile phi(E) on a uniform energy grid, normalized so
// that the quadrature of |phi|^2 dE equals 1. Components at or below E_min
// are rejected: zero-energy content makes the 1D free sojourn time diverge.
class EnergyProfile {
  public:
    static constexpr double kDefaultEnergyFloor = 0.05;

    EnergyProfile(std::vector<double> energies, std::vector<complex> amplitudes,
                  Channel channel = Channel::FromLeft,
                  double energy_floor = kDefaultEnergyFloor);

    // Gaussian profile centered at e0 with width sigma, sampled on
    // [e0 - 5 sigma, e0 + 5 sigma] clipped from below to the floor.
    static EnergyProfile gaussian(double e0, double sigma, int n_samples,
                                  Channel channel = Channel::FromLeft,
                                  double energy_floor = kDefaultEnergyFloor);

    std::size_t size() const { return energies_.size(); }
    double energy(std::size_t i) const { return energies_[i]; }
    complex amplitude(std::size_t i) const { return amplitudes_[i]; }
    double weight(std::size_t i) const { return weights_[i]; }
    Channel channel() const { return channel_; }
    double energy_floor() const { return floor_; }

    // Quadrature of f(E) against the stored weights.
    double integrate(const std::function<double(std::size_t)>& f) const;

    // Same energy interval re-sampled with n points, renormalized.
    EnergyProfile resample(std::size_t n) const;

    double norm_squared() const;

  private:
    void normalize();
    void build_weights();

    std::vector<double> energies_;
    std::vector<complex> amplitudes_;
    std::vector<double> weights_;
    Channel channel_ = Channel::FromLeft;
    double floor_ = kDefaultEnergyFloor;
};

// Fuzzy region membership: 1 inside radius r, then the shape g((|x|-r)/rho)
// on a skin of thickness rho, then 0. rho = 0 degenerates to the sharp
// indicator of the ball.
class FuzzyProfile {
  public:
    // Default shape g(u) = cos^2(pi u / 2) on [0,1].
    FuzzyProfile(double r, double rho);
    FuzzyProfile(double r, double rho, std::function<double(double)> shape);

    double membership(double x) const;
    double radius() const { return r_; }
    double skin() const { return rho_; }

    // f(r, rho) = r + rho * integral of g: the effective half-width that
    // replaces r in free-flight references for fuzzy regions.
    double free_flight_normalizer() const { return f_norm_; }

    // |g''(0)| and the L1 norm of g'' on [0,1], used by the envelope bound
    // on residual fuzzy oscillations.
    double shape_curvature_origin() const { return g2_origin_; }
    double shape_curvature_l1() const { return g2_l1_; }

    double shape_integral() const { return g_integral_; }

  private:
    void analyze_shape();

    double r_ = 0.0;
    double rho_ = 0.0;
    std::function<double(double)> g_;
    double g_integral_ = 0.0;
    double f_norm_ = 0.0;
    double g2_origin_ = 0.0;
    double g2_l1_ = 0.0;
};

// Uniform grid with inclusive endpoints, dx = (x_max - x_min) / (n - 1).
class SpatialGrid {
  public:
    SpatialGrid(double x_min, double x_max, std::size_t n_points);

    // Grid covering the potential support with asymptotic margins of at
    // least `margin_wavelengths` de Broglie wavelengths at e_min on both
    // sides, resolved with `points_per_wavelength` at e_max.
    static SpatialGrid for_scattering(const Potential& p, double e_min,
                                      double e_max,
                                      double points_per_wavelength = 40.0,
                                      double margin_wavelengths = 4.0);

    double x_min() const { return x_min_; }
    double x_max() const { return x_max_; }
    std::size_t size() const { return n_; }
    double dx() const { return dx_; }
    double operator[](std::size_t i) const { return x_min_ + dx_ * static_cast<double>(i); }

  private:
    double x_min_ = 0.0, x_max_ = 0.0, dx_ = 0.0;
    std::size_t n_ = 0;
};

}  // namespace tdlab

#endif
