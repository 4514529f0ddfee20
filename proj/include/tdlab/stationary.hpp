#ifndef TDLAB_STATIONARY_HPP
#define TDLAB_STATIONARY_HPP

#include <functional>
#include <string>
#include <vector>

#include "tdlab/model.hpp"

// Stationary scattering solutions. Piecewise-constant potentials are solved
// with exact transfer matrices (no discretization error); smooth and
// tabulated potentials with Numerov integration, matched to discrete plane
// waves at the grid edges using the exact dispersion of the recurrence.
// Radial problems integrate outward from the origin and match to
// Riccati-Bessel functions beyond the support, where those solve the free
// radial equation exactly.

namespace tdlab {

struct SMatrix1D {
    double energy = 0.0;
    complex transmission;       // T, identical from either side
    complex reflection_left;    // L, incoming from the left
    complex reflection_right;   // R, incoming from the right
    double alpha_T = 0.0;       // phases; principal value from s_matrix,
    double alpha_L = 0.0;       // continuous along sweeps
    double alpha_R = 0.0;
    double unitarity_defect = 0.0;
    // Set when evanescent rescaling pushed the transmitted amplitude to the
    // edge of double precision.
    std::string precision_warning;
};

// Analytic description of the wave in one constant-potential region,
// evaluated as
//   Propagating: a e^{ik(x-x0)} + b e^{-ik(x-x0)}          with x0 = lo
//   Evanescent:  a e^{-kappa(x-lo)} + b e^{+kappa(x-hi)}
//   Linear:      a + b (x-lo)
// The growing evanescent coefficient is referenced to the far edge so both
// terms stay representable across deep classically forbidden regions.
// Outer regions use x0 = 0 (global plane-wave phases).
enum class WaveKind { Propagating, Evanescent, Linear };
struct RegionWave {
    double lo = 0.0, hi = 0.0;  // validity interval (outer regions unbounded)
    double x0 = 0.0;            // phase reference for the propagating case
    WaveKind kind = WaveKind::Propagating;
    double k = 0.0;  // wavenumber or decay rate
    complex a, b;
    complex eval(double x) const;
};

enum class StateKind { FullLineLeft, FullLineRight, Radial };

class StationaryState {
  public:
    StateKind kind() const { return kind_; }
    double energy() const { return energy_; }
    double wavenumber_outside() const { return k_; }
    const SpatialGrid& grid() const { return grid_; }
    const std::vector<complex>& values() const { return values_; }

    // Pointwise evaluation: exact for piecewise-constant potentials, cubic
    // interpolation of the grid samples otherwise.
    complex at(double x) const;

    complex transmission() const { return transmission_; }
    complex reflection() const { return reflection_; }

    // Exact per-region waves; empty unless the potential was
    // piecewise-constant.
    const std::vector<RegionWave>& regions() const { return regions_; }
    bool exact_regions() const { return !regions_.empty(); }

    // Radial data.
    int angular_momentum() const { return l_; }
    double phase_shift() const { return delta_; }

    // Largest deviation from the claimed asymptotic form at edge check
    // points.
    double matching_residual() const { return matching_residual_; }

  private:
    friend StationaryState solve_full_line(const Potential&, double, const SpatialGrid&,
                                           Channel);
    friend StationaryState solve_radial(const Potential&, double, const SpatialGrid&);
    StationaryState(StateKind kind, double energy, SpatialGrid grid)
        : kind_(kind), energy_(energy), k_(wavenumber(energy)), grid_(grid) {}

    StateKind kind_;
    double energy_;
    double k_;
    SpatialGrid grid_;
    std::vector<complex> values_;
    std::vector<RegionWave> regions_;
    complex transmission_{0.0, 0.0};
    complex reflection_{0.0, 0.0};
    int l_ = 0;
    double delta_ = 0.0;
    double matching_residual_ = 0.0;
};

// Working grid for full-line solves: covers the support plus free margins,
// spaced by the shortest local de Broglie wavelength (which inside a well
// is shorter than the asymptotic one).
SpatialGrid full_line_grid(const Potential& pot, double energy,
                           double points_per_wavelength = 60.0,
                           double margin_wavelengths = 4.0);

// Working grid for radial solves: starts at the hard-core radius (origin
// otherwise) and ends a quarter wavelength past support + 6/k so two
// matching nodes sit in the free region.
SpatialGrid radial_grid(const Potential& pot, double energy,
                        double points_per_wavelength = 60.0);

// Scattering state on the full line with unit incoming amplitude from the
// given side. The grid must cover the support with zero-potential margins
// on both sides; for non-piecewise potentials its spacing must resolve the
// shortest local de Broglie wavelength with at least 40 points.
StationaryState solve_full_line(const Potential& pot, double energy, const SpatialGrid& grid,
                                Channel direction);

// On-shell scattering amplitudes. Builds its own working grid for the
// Numerov path. Throws std::runtime_error carrying the defect if unitarity
// fails beyond 1e-6.
SMatrix1D s_matrix(const Potential& pot, double energy);

// Sweep with phases unwrapped continuously in E.
std::vector<SMatrix1D> s_matrix_sweep(const Potential& pot,
                                      const std::vector<double>& energies);

// Regular radial solution for the potential's angular momentum, normalized
// to e^{i delta} sin(ks - l pi/2 + delta) asymptotically. The phase shift
// is extracted by matching to Riccati-Bessel functions at the grid edge,
// which must clear the support by at least a quarter wavelength. Hard-core
// potentials start from a Dirichlet node at the core radius.
StationaryState solve_radial(const Potential& pot, double energy, const SpatialGrid& grid);

struct PhaseShiftTable {
    int l = 0;
    std::vector<double> energies;
    std::vector<double> shifts;  // unwrapped
};

PhaseShiftTable phase_shift_sweep(const Potential& pot, const std::vector<double>& energies);

// In-place continuity repair of a phase sequence sampled along increasing
// E: jumps above pi are folded back by multiples of 2 pi.
void unwrap_inplace(std::vector<double>& phases);

struct DerivativeEstimate {
    double value = 0.0;
    double error = 0.0;  // Richardson error estimate
};

// d(phase)/dE by central differences at steps h and h/2 with Richardson
// extrapolation. The phase samples are unwrapped locally, and a jump
// between the two step sizes beyond 25% signals structure narrower than h
// (an unresolved resonance); that raises std::runtime_error advising a
// smaller h.
DerivativeEstimate phase_derivative(const std::function<double(double)>& phase, double energy,
                                    double h);

}  // namespace tdlab

#endif
