#ifndef TDLAB_CLASSICAL_HPP
#define TDLAB_CLASSICAL_HPP

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "tdlab/model.hpp"

// Classical 1D scattering trajectories and the family of time-delay
// definitions built from arrival times, sojourn times, and free-flight
// extraction. All delays are measured on trajectories that start outside
// the potential support and are integrated long enough to leave it again.

namespace tdlab {

struct PhasePoint {
    double t = 0.0;
    double q = 0.0;
    double p = 0.0;
};

class Trajectory {
  public:
    // Samples must be uniformly spaced in time. Asymptotic lines are fitted
    // over the first and last 10% of the samples; construction fails if a
    // fit has rms residual >= 1e-6 (except for captured trajectories, which
    // carry no outgoing asymptote).
    Trajectory(std::vector<PhasePoint> samples, double support_radius, double energy,
               double dt, bool captured);

    const std::vector<PhasePoint>& samples() const { return samples_; }
    bool captured() const { return captured_; }
    double energy() const { return energy_; }
    double speed() const { return speed_; }
    double dt() const { return dt_; }
    double support_radius() const { return support_; }
    double duration() const { return samples_.back().t; }

    // Asymptotic free lines q(t) = q_ref + p t / m. Throw for captured
    // trajectories, whose outgoing asymptote does not exist.
    double incoming_position_intercept() const;
    double incoming_momentum() const;
    double outgoing_position_intercept() const;
    double outgoing_momentum() const;

    double incoming_fit_rms() const { return in_rms_; }
    double outgoing_fit_rms() const { return out_rms_; }

    // Same trajectory with the clock zero moved to t0. Every time-delay is
    // invariant under this relabeling.
    Trajectory shift_time_origin(double t0) const;

  private:
    void require_scattered(const char* what) const;

    std::vector<PhasePoint> samples_;
    double support_ = 0.0;
    double energy_ = 0.0;
    double speed_ = 0.0;
    double dt_ = 0.0;
    bool captured_ = false;
    double q_in_ = 0.0, p_in_ = 0.0, in_rms_ = 0.0;
    double q_out_ = 0.0, p_out_ = 0.0, out_rms_ = 0.0;
};

// Integrate a trajectory of the given energy launched at q_start (outside
// the support) toward the potential. Piecewise-constant potentials use
// exact step-crossing kinematics; smooth and tabulated ones use
// velocity-Verlet with the force -dV/dx. dt = 0 selects the default
// 1e-3 * (support width) / v. A particle still inside the support when
// t_span runs out, or one that reaches a step with exactly zero kinetic
// energy ahead, is reported as captured.
Trajectory integrate_trajectory(const Potential& pot, double energy, double q_start,
                                double t_span, double dt = 0.0);

// Times of the two transversal crossings of |q - center| = r. Throws if the
// trajectory does not cross exactly twice (r too small, too large, or the
// particle was captured).
std::pair<double, double> arrival_times_about(const Trajectory& tr, double center, double r);
std::pair<double, double> arrival_times(const Trajectory& tr, double r);

// Global time-delay from the asymptotic lines alone,
// tau = -(1/v) (sign(p+) q+ - sign(p-) q-).
double asymptotic_time_delay(const Trajectory& tr);

// Delay measured about an arbitrary reference point c,
// tau(c) = -(1/v) [sign(p+) (q+ - c) - sign(p-) (q- - c)].
// Transmission leaves it c-independent; reflection shifts it by
// -2c/v * sign(p-).
double translated_time_delay(const Trajectory& tr, double c);

enum class DelayConvention {
    ArrivalInMinus,   // incoming crossing vs incoming free reference; limit 0
    ArrivalInPlus,    // outgoing crossing vs incoming free reference; limit tau
    ArrivalOutMinus,  // outgoing free reference vs incoming crossing; limit tau
    ArrivalOutPlus,   // outgoing free reference vs outgoing crossing; limit 0
    SojournIn,        // sojourn minus incoming free sojourn; limit tau
    SojournOut,       // sojourn minus outgoing free sojourn; limit tau
    Symmetric,        // sojourn minus averaged free sojourn; limit tau
    FreeFlight,       // sojourn minus r * (fitted linear growth rate); limit tau
};

constexpr std::array<DelayConvention, 8> all_delay_conventions() {
    return {DelayConvention::ArrivalInMinus, DelayConvention::ArrivalInPlus,
            DelayConvention::ArrivalOutMinus, DelayConvention::ArrivalOutPlus,
            DelayConvention::SojournIn,      DelayConvention::SojournOut,
            DelayConvention::Symmetric,      DelayConvention::FreeFlight};
}

std::string to_string(DelayConvention c);

// The four arrival-based and three sojourn-based local delays at radius r,
// with the interacting ball centered at c and the free reference ball at c0.
struct LocalDelays {
    double arrival_in_minus = 0.0;
    double arrival_in_plus = 0.0;
    double arrival_out_minus = 0.0;
    double arrival_out_plus = 0.0;
    double sojourn_in = 0.0;
    double sojourn_out = 0.0;
    double symmetric = 0.0;
    double sojourn = 0.0;  // T(B_r) about c itself
};
LocalDelays local_delays_about(const Trajectory& tr, double c, double c0, double r);

struct ClassicalDelayReport {
    bool infinite_delay = false;  // captured trajectory
    double tau_closed_form = 0.0;
    double free_flight_rate = 0.0;  // fitted growth rate of T(B_r), near 2/v
    std::vector<double> radii;
    // Indexed by static_cast<size_t>(DelayConvention).
    std::array<std::vector<double>, 8> local;
    std::array<double, 8> limit{};     // value at the largest radius
    std::array<double, 8> residual{};  // |limit - expected limit|
    // Empirical decay rate of |local(r) - limit| from a log-log fit; NaN
    // when the residuals sit at rounding level, as they do for
    // piecewise-constant potentials where the asymptotics are exact.
    std::array<double, 8> residual_slope{};
};

// Evaluate every delay convention on a grid of radii (all beyond the
// support, spanning about a decade). Captured trajectories produce a report
// flagged infinite_delay with empty tables.
ClassicalDelayReport classical_time_delay(const Trajectory& tr,
                                          const std::vector<double>& radii);

// Limits of the four arrival-based conventions when the interacting times
// are measured about c but the free references about c0.
struct MixedOriginLimits {
    double arrival_in_minus = 0.0;   // -(1/v) sign(p-) (c0 - c)
    double arrival_out_plus = 0.0;   // -(1/v) sign(p+) (c - c0)
    double arrival_in_plus = 0.0;
    double arrival_out_minus = 0.0;
};
MixedOriginLimits mixed_origin_limits(const Trajectory& tr, double c, double c0);

// Time spent inside the ball of radius r as the quadrature of the region
// indicator along the samples. Agrees with the arrival-time difference to
// within two time steps.
double classical_probabilistic_sojourn(const Trajectory& tr, double r);

}  // namespace tdlab

#endif
