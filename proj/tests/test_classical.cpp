#include <doctest.h>

#include <cmath>
#include <vector>

#include "tdlab/classical.hpp"
#include "tdlab/model.hpp"

using namespace tdlab;

namespace {

// Oracle: exact transit bookkeeping for a transmitted particle crossing
// constant steps. Inside step j the speed is sqrt(2(E - V_j)), outside it
// is v, so the delay is the sum of width * (1/v_j - 1/v). Independent of
// the trajectory integrator.
double transmission_delay_oracle(const std::vector<Segment>& segs, double energy) {
    double v = std::sqrt(2.0 * energy);
    double tau = 0.0;
    for (const Segment& s : segs) {
        double vj = std::sqrt(2.0 * (energy - s.height));
        tau += (s.hi - s.lo) * (1.0 / vj - 1.0 / v);
    }
    return tau;
}

std::vector<double> decade_grid(double lo, double hi, std::size_t n) {
    std::vector<double> r(n);
    for (std::size_t i = 0; i < n; ++i)
        r[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
    return r;
}

}  // namespace

TEST_CASE("free particle: zero delay in every convention, exact free arrivals") {
    Potential free_pot = Potential::piecewise({{-1.0, 1.0, 0.0}});
    Trajectory tr = integrate_trajectory(free_pot, 0.5, -20.0, 60.0);
    CHECK(!tr.captured());
    CHECK(tr.speed() == doctest::Approx(1.0));

    auto [tm, tp] = arrival_times(tr, 10.0);
    CHECK(tp - tm == doctest::Approx(20.0).epsilon(1e-12));

    // Relabel the clock so the particle passes the origin at t = 0; the
    // crossings of |q| = 10 then sit at -10 and +10 for v = 1.
    Trajectory centered = tr.shift_time_origin(20.0);
    auto [cm, cp] = arrival_times(centered, 10.0);
    CHECK(cm == doctest::Approx(-10.0).epsilon(1e-12));
    CHECK(cp == doctest::Approx(10.0).epsilon(1e-12));

    ClassicalDelayReport rep = classical_time_delay(tr, decade_grid(2.0, 20.0, 10));
    CHECK(rep.tau_closed_form == doctest::Approx(0.0).epsilon(1e-12));
    for (std::size_t k = 0; k < 8; ++k) CHECK(std::abs(rep.residual[k]) < 1e-10);
}

TEST_CASE("transmitted square well matches the piecewise transit oracle") {
    Potential well = Potential::square_well(1.5, -0.5, 0.5);
    double energy = 0.5;
    Trajectory tr = integrate_trajectory(well, energy, -20.0, 60.0);
    CHECK(!tr.captured());

    // Speed doubles inside the well at this energy.
    for (const PhasePoint& s : tr.samples())
        if (std::abs(s.q) < 0.49) CHECK(std::abs(s.p) == doctest::Approx(2.0).epsilon(1e-12));

    double tau_oracle = transmission_delay_oracle(well.segments(), energy);
    CHECK(tau_oracle == doctest::Approx(-0.5).epsilon(1e-14));

    auto [tm, tp] = arrival_times(tr, 10.0);
    CHECK(tp - tm == doctest::Approx(19.5).epsilon(1e-10));

    ClassicalDelayReport rep = classical_time_delay(tr, decade_grid(2.0, 20.0, 10));
    CHECK(rep.tau_closed_form == doctest::Approx(tau_oracle).epsilon(1e-10));
    for (DelayConvention c :
         {DelayConvention::ArrivalInPlus, DelayConvention::ArrivalOutMinus,
          DelayConvention::SojournIn, DelayConvention::SojournOut, DelayConvention::Symmetric,
          DelayConvention::FreeFlight}) {
        auto k = static_cast<std::size_t>(c);
        CHECK(rep.limit[k] == doctest::Approx(tau_oracle).epsilon(1e-9));
        // Local values are exact beyond the support at every radius here.
        for (double val : rep.local[k]) CHECK(val == doctest::Approx(tau_oracle).epsilon(1e-9));
    }
    for (DelayConvention c : {DelayConvention::ArrivalInMinus, DelayConvention::ArrivalOutPlus}) {
        auto k = static_cast<std::size_t>(c);
        CHECK(std::abs(rep.limit[k]) < 1e-10);
    }
    CHECK(rep.free_flight_rate == doctest::Approx(2.0 / tr.speed()).epsilon(1e-10));
}

TEST_CASE("transmitted barrier above the top gains the oracle delay") {
    Potential barrier = Potential::square_barrier(1.5, -0.5, 0.5);
    double energy = 2.0;
    Trajectory tr = integrate_trajectory(barrier, energy, -15.0, 40.0);
    double tau_oracle = transmission_delay_oracle(barrier.segments(), energy);
    CHECK(tau_oracle == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(asymptotic_time_delay(tr) == doctest::Approx(tau_oracle).epsilon(1e-10));
}

TEST_CASE("reflected barrier flips momentum and yields the turning-plane delay") {
    Potential barrier = Potential::square_barrier(1.0, -0.5, 0.5);
    Trajectory tr = integrate_trajectory(barrier, 0.5, -20.0, 60.0);
    CHECK(!tr.captured());
    CHECK(tr.outgoing_momentum() == doctest::Approx(-tr.incoming_momentum()).epsilon(1e-12));

    // Turning at the plane x = -1/2 with v = 1 shortens both legs by 1/2,
    // so tau = 2 * (-1/2) / v = -1.
    CHECK(asymptotic_time_delay(tr) == doctest::Approx(-1.0).epsilon(1e-10));

    // Both ball crossings happen on the incoming side.
    auto [tm, tp] = arrival_times(tr, 10.0);
    double q_at_tp = tr.outgoing_position_intercept() + tr.outgoing_momentum() * tp;
    CHECK(q_at_tp == doctest::Approx(-10.0).epsilon(1e-10));
    CHECK(tp > tm);

    ClassicalDelayReport rep = classical_time_delay(tr, decade_grid(2.0, 20.0, 10));
    for (DelayConvention c :
         {DelayConvention::ArrivalInPlus, DelayConvention::ArrivalOutMinus,
          DelayConvention::SojournIn, DelayConvention::SojournOut, DelayConvention::Symmetric,
          DelayConvention::FreeFlight}) {
        CHECK(rep.limit[static_cast<std::size_t>(c)] == doctest::Approx(-1.0).epsilon(1e-9));
    }
}

TEST_CASE("energy is conserved along samples and asymptotic speeds agree") {
    Potential well = Potential::square_well(1.5, -0.5, 0.5);
    Trajectory tr = integrate_trajectory(well, 0.5, -20.0, 60.0);
    for (std::size_t i = 0; i < tr.samples().size(); i += 997) {
        const PhasePoint& s = tr.samples()[i];
        double e = 0.5 * s.p * s.p + well(s.q);
        CHECK(e == doctest::Approx(0.5).epsilon(1e-12));
    }
    CHECK(std::abs(tr.incoming_momentum()) ==
          doctest::Approx(std::abs(tr.outgoing_momentum())).epsilon(1e-10));
}

TEST_CASE("translated delay: transmission is center-independent, reflection shifts by 2c/v") {
    Potential well = Potential::square_well(1.5, -0.5, 0.5);
    Trajectory trans = integrate_trajectory(well, 0.5, -20.0, 60.0);
    CHECK(translated_time_delay(trans, 3.0) ==
          doctest::Approx(translated_time_delay(trans, 0.0)).epsilon(1e-12));
    CHECK(translated_time_delay(trans, 0.0) ==
          doctest::Approx(asymptotic_time_delay(trans)).epsilon(1e-14));

    Potential barrier = Potential::square_barrier(1.0, -0.5, 0.5);

    // Approaching from the right: moving the reference point to c advances
    // the delay by +2c/v. Cross-check against ball sojourn times measured
    // about the shifted center on the trajectory itself.
    Trajectory from_right = integrate_trajectory(barrier, 0.5, 20.0, 60.0);
    double tau0_r = translated_time_delay(from_right, 0.0);
    double tau3_r = translated_time_delay(from_right, 3.0);
    CHECK(tau3_r == doctest::Approx(tau0_r + 6.0).epsilon(1e-10));
    LocalDelays shifted_r = local_delays_about(from_right, 3.0, 3.0, 12.0);
    CHECK(shifted_r.sojourn_in == doctest::Approx(tau3_r).epsilon(1e-9));
    CHECK(shifted_r.arrival_in_plus == doctest::Approx(tau3_r).epsilon(1e-9));

    // Approaching from the left the same shift runs backwards.
    Trajectory from_left = integrate_trajectory(barrier, 0.5, -20.0, 60.0);
    double tau0_l = translated_time_delay(from_left, 0.0);
    double tau3_l = translated_time_delay(from_left, 3.0);
    CHECK(tau3_l == doctest::Approx(tau0_l - 6.0).epsilon(1e-10));
    LocalDelays shifted_l = local_delays_about(from_left, 3.0, 3.0, 12.0);
    CHECK(shifted_l.sojourn_in == doctest::Approx(tau3_l).epsilon(1e-9));
}

TEST_CASE("mixed reference origins reproduce the closed-form limits") {
    Potential well = Potential::square_well(1.5, -0.5, 0.5);
    Trajectory tr = integrate_trajectory(well, 0.5, -20.0, 60.0);

    MixedOriginLimits same = mixed_origin_limits(tr, 1.0, 1.0);
    CHECK(same.arrival_in_minus == doctest::Approx(0.0).epsilon(1e-14));
    CHECK(same.arrival_out_plus == doctest::Approx(0.0).epsilon(1e-14));

    // From the left with v = 1, c = 0, c0 = 2: the incoming reference ball
    // sits 2 units downstream, so the free particle reaches it 2 units of
    // time later than the interacting ball.
    MixedOriginLimits mixed = mixed_origin_limits(tr, 0.0, 2.0);
    CHECK(mixed.arrival_in_minus == doctest::Approx(-2.0).epsilon(1e-12));
    LocalDelays numeric = local_delays_about(tr, 0.0, 2.0, 12.0);
    CHECK(numeric.arrival_in_minus == doctest::Approx(-2.0).epsilon(1e-10));
    CHECK(numeric.arrival_in_plus == doctest::Approx(mixed.arrival_in_plus).epsilon(1e-9));
    CHECK(numeric.arrival_out_minus == doctest::Approx(mixed.arrival_out_minus).epsilon(1e-9));

    // Sojourn-based delays with different ball centers for the interacting
    // and the free particle still converge to tau(c), whatever c0 is.
    for (double c0 : {-4.0, 0.0, 2.0, 7.0}) {
        LocalDelays d = local_delays_about(tr, 1.5, c0, 14.0);
        CHECK(d.sojourn_in == doctest::Approx(translated_time_delay(tr, 1.5)).epsilon(1e-9));
        CHECK(d.sojourn_out == doctest::Approx(translated_time_delay(tr, 1.5)).epsilon(1e-9));
        CHECK(d.symmetric == doctest::Approx(translated_time_delay(tr, 1.5)).epsilon(1e-9));
    }
}

TEST_CASE("probabilistic sojourn agrees with arrival differences to quadrature accuracy") {
    Potential well = Potential::square_well(1.5, -0.5, 0.5);
    Trajectory tr = integrate_trajectory(well, 0.5, -20.0, 60.0);
    auto [tm, tp] = arrival_times(tr, 10.0);
    CHECK(std::abs(classical_probabilistic_sojourn(tr, 10.0) - (tp - tm)) <= 2.0 * tr.dt());

    Potential free_pot = Potential::piecewise({{-1.0, 1.0, 0.0}});
    Trajectory fr = integrate_trajectory(free_pot, 0.5, -20.0, 60.0);
    CHECK(std::abs(classical_probabilistic_sojourn(fr, 10.0) - 20.0) <= 2.0 * fr.dt());

    Potential barrier = Potential::square_barrier(1.0, -0.5, 0.5);
    Trajectory refl = integrate_trajectory(barrier, 0.5, -20.0, 60.0);
    auto [rm, rp] = arrival_times(refl, 10.0);
    CHECK(std::abs(classical_probabilistic_sojourn(refl, 10.0) - (rp - rm)) <= 2.0 * refl.dt());
}

TEST_CASE("exactly zero kinetic energy ahead of a step means capture") {
    Potential step = Potential::square_barrier(0.5, -0.5, 0.5);
    Trajectory tr = integrate_trajectory(step, 0.5, -10.0, 40.0);
    CHECK(tr.captured());
    CHECK_THROWS_AS(tr.outgoing_momentum(), std::runtime_error);
    CHECK_THROWS_AS(arrival_times(tr, 5.0), std::runtime_error);

    ClassicalDelayReport rep = classical_time_delay(tr, decade_grid(2.0, 20.0, 10));
    CHECK(rep.infinite_delay);
    CHECK(std::isnan(rep.tau_closed_form));
}

TEST_CASE("particle still inside the support when time runs out is captured") {
    Potential bump = Potential::gaussian_bump(0.5, 0.0, 1.0, 8.5);
    Trajectory tr = integrate_trajectory(bump, 2.0, -12.0, 4.0);
    CHECK(tr.captured());
}

TEST_CASE("smooth potential: symplectic integration keeps delays consistent") {
    Potential bump = Potential::gaussian_bump(0.5, 0.0, 1.0, 8.5);
    double energy = 2.0;
    Trajectory tr = integrate_trajectory(bump, energy, -100.0, 110.0);
    CHECK(!tr.captured());

    // Energy drift stays at the symplectic fluctuation level.
    for (std::size_t i = 0; i < tr.samples().size(); i += 211) {
        const PhasePoint& s = tr.samples()[i];
        double e = 0.5 * s.p * s.p + bump(s.q);
        CHECK(e == doctest::Approx(energy).epsilon(1e-5));
    }

    ClassicalDelayReport rep = classical_time_delay(tr, decade_grid(9.0, 90.0, 10));
    double tau = rep.tau_closed_form;
    // All six scattering conventions agree with the asymptotic value; the
    // only error source is the fit, not the ball radius.
    for (DelayConvention c :
         {DelayConvention::ArrivalInPlus, DelayConvention::ArrivalOutMinus,
          DelayConvention::SojournIn, DelayConvention::SojournOut, DelayConvention::Symmetric,
          DelayConvention::FreeFlight}) {
        CHECK(rep.limit[static_cast<std::size_t>(c)] == doctest::Approx(tau).epsilon(1e-7));
    }
    CHECK(rep.free_flight_rate == doctest::Approx(2.0 / tr.speed()).epsilon(1e-7));
}

TEST_CASE("relabeling the clock zero leaves every delay unchanged") {
    Potential well = Potential::square_well(1.5, -0.5, 0.5);
    Trajectory tr = integrate_trajectory(well, 0.5, -20.0, 60.0);
    Trajectory shifted = tr.shift_time_origin(7.25);

    auto grid = decade_grid(2.0, 20.0, 10);
    ClassicalDelayReport a = classical_time_delay(tr, grid);
    ClassicalDelayReport b = classical_time_delay(shifted, grid);
    CHECK(b.tau_closed_form == doctest::Approx(a.tau_closed_form).epsilon(1e-12));
    for (std::size_t k = 0; k < 8; ++k)
        for (std::size_t i = 0; i < grid.size(); ++i)
            CHECK(b.local[k][i] == doctest::Approx(a.local[k][i]).epsilon(1e-10));
}

TEST_CASE("launch and radius validation") {
    Potential well = Potential::square_well(1.5, -0.5, 0.5);
    CHECK_THROWS_AS(integrate_trajectory(well, -1.0, -20.0, 60.0), std::invalid_argument);
    CHECK_THROWS_AS(integrate_trajectory(well, 0.5, 0.2, 60.0), std::invalid_argument);
    Trajectory tr = integrate_trajectory(well, 0.5, -20.0, 60.0);
    // Never reaches |q| = 100 within the integrated span.
    CHECK_THROWS_AS(arrival_times(tr, 100.0), std::runtime_error);
    CHECK_THROWS_AS(classical_time_delay(tr, {0.1}), std::invalid_argument);
}
