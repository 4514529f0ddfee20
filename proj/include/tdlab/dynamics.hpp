#ifndef TDLAB_DYNAMICS_HPP
#define TDLAB_DYNAMICS_HPP

#include <vector>

#include "tdlab/model.hpp"

// Real-time wave-packet propagation and the clock measurements built on it.
// This is the laboratory side of the project: sojourn times measured by
// integrating presence probabilities over time, or read off idealized
// clocks, converge to the same numbers the stationary machinery produces
// from phase derivatives. Units follow the rest of the library, hbar = m = 1.

namespace tdlab {

// Complex samples on a uniform grid. The factories below normalize to unit
// norm; propagation preserves it for real potentials.
struct WavePacket {
    SpatialGrid grid;
    std::vector<complex> values;

    double norm() const;
    double mean_position() const;
};

// Incoming packet built from the energy profile: momentum amplitudes
// sqrt(v) phi(E(k)) placed on the positive (FromLeft) or negative
// (FromRight) half of the momentum lattice, centered at x0.
WavePacket packet_from_profile(const EnergyProfile& profile, double x0,
                               const SpatialGrid& grid);

// Momentum-space Gaussian exp(-(k-k0)^2/(4 sigma_k^2)) centered at x0. Its
// mean momentum is k0 exactly, which makes it the right probe for the free
// drift checks.
WavePacket gaussian_packet(double k0, double sigma_k, double x0, const SpatialGrid& grid);

// Mean of the full Hamiltonian in the packet: kinetic part from the
// momentum representation, potential part from the position samples.
double packet_energy(const WavePacket& packet, const Potential& pot);

// Grid sized for a scattering run: covers the launch point, the potential,
// and the region, with margins wide enough that nothing wraps around the
// periodic boundary before the region drains.
SpatialGrid propagation_grid(const Potential& pot, const EnergyProfile& profile, double x0,
                             double reach);

struct PropagationConfig {
    // Step size; 0 picks 0.8 dx^2/pi, and anything above dx^2/pi is
    // rejected because the kinetic phase at the grid's edge momentum then
    // exceeds the stability bound.
    double dt = 0.0;
    // Width and peak strength of a smooth imaginary ramp at both grid
    // ends. Zero disables absorption, and then the norm is watched: a
    // drift beyond 1e-6 aborts the run.
    double absorber_width = 0.0;
    double absorber_strength = 1.0;
};

struct PropagationRecord {
    double time = 0.0;
    double norm = 0.0;
    double mean_position = 0.0;
};

struct Propagation {
    std::vector<PropagationRecord> trace;  // one record per step
    WavePacket final_state;
};

// Split-operator evolution under the static potential for the given time.
Propagation propagate(const Potential& pot, const WavePacket& start, double total_time,
                      const PropagationConfig& config = {});

struct SojournReading {
    double value = 0.0;            // time integral, tail correction included
    double tail_correction = 0.0;  // estimated contribution beyond the window
    double start_residual = 0.0;   // region probability at the window ends
    double end_residual = 0.0;
    double elapsed = 0.0;  // length of the integrated window
};

// Time integral of the probability of presence in the region, for a packet
// launched at x0. A positive duration integrates exactly [0, duration] and
// requires the region probability to be below 1e-8 at both ends (the
// packet is entirely outside the region there); duration 0 runs until the
// region has stayed empty for a hundred consecutive steps.
SojournReading direct_sojourn(const Potential& pot, const EnergyProfile& profile, double x0,
                              const FuzzyProfile& region, double duration = 0.0,
                              const PropagationConfig& config = {});

enum class ClockKind { Larmor, Dissipative, Energy };

struct ClockRun {
    ClockKind kind = ClockKind::Larmor;
    std::vector<double> couplings;
    std::vector<double> readings;  // one reading per coupling
    double extrapolated = 0.0;     // quadratic fit evaluated at zero coupling
    double error_bar = 0.0;        // rms residual of that fit
};

// Spin precession clock: two components ride the run with the potential
// shifted by +-(coupling/2) inside the region, and the angle accumulated
// between them divided by the coupling is the reading. A precession beyond
// pi is ambiguous and aborts with advice to lower the coupling. At least
// three couplings are required for the zero-coupling extrapolation.
ClockRun larmor_clock(const Potential& pot, const EnergyProfile& profile, double x0,
                      const FuzzyProfile& region, std::vector<double> couplings,
                      const PropagationConfig& config = {});

// Absorption clock: the potential gains -i coupling inside the region and
// the reading is -ln(survival)/(2 coupling).
ClockRun dissipative_clock(const Potential& pot, const EnergyProfile& profile, double x0,
                           const FuzzyProfile& region, std::vector<double> couplings,
                           const PropagationConfig& config = {});

// Energy-shift clock: the region potential ramps linearly in time and the
// reading is the mean-energy drift divided by the ramp rate.
ClockRun energy_clock(const Potential& pot, const EnergyProfile& profile, double x0,
                      const FuzzyProfile& region, std::vector<double> couplings,
                      const PropagationConfig& config = {});

// Stationary route to the same sojourn time: lift the region membership
// into the potential with a small coupling and contract the scattering
// amplitudes with their coupling derivative. Agrees with
// onshell_interaction_sojourn including the oscillating part. An empty
// coupling list uses a built-in ladder.
double linear_response_sojourn(const Potential& pot, double energy, const FuzzyProfile& region,
                               std::vector<double> couplings = {});
double linear_response_sojourn(const Potential& pot, const EnergyProfile& profile,
                               const FuzzyProfile& region, std::vector<double> couplings = {});

struct ArrivalFit {
    double slope = 0.0;      // growth of the one-sided dwell per unit radius
    double intercept = 0.0;  // extrapolated dwell of the point region
    std::vector<double> radii;
    std::vector<double> values;
};

// Forward-time dwell of a freely evolving packet launched inside the
// regions: integrates the presence probability over t >= 0 for every
// radius in one run and fits a line through the results. The slope
// approaches the mean inverse speed, the intercept the mean arrival time.
ArrivalFit positive_time_sojourn(const EnergyProfile& profile, double x0,
                                 const std::vector<double>& radii,
                                 const PropagationConfig& config = {});

}  // namespace tdlab

#endif
