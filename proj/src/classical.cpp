#include "tdlab/classical.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace tdlab {

namespace {

struct LineFit {
    double intercept = 0.0;
    double slope = 0.0;
    double rms = 0.0;
};

LineFit fit_line(const std::vector<PhasePoint>& pts, std::size_t begin, std::size_t end) {
    double n = static_cast<double>(end - begin);
    double st = 0.0, sq = 0.0;
    for (std::size_t i = begin; i < end; ++i) {
        st += pts[i].t;
        sq += pts[i].q;
    }
    double mt = st / n, mq = sq / n;
    double stt = 0.0, stq = 0.0;
    for (std::size_t i = begin; i < end; ++i) {
        double dt = pts[i].t - mt;
        stt += dt * dt;
        stq += dt * (pts[i].q - mq);
    }
    LineFit f;
    f.slope = stq / stt;
    f.intercept = mq - f.slope * mt;
    double ss = 0.0;
    for (std::size_t i = begin; i < end; ++i) {
        double res = pts[i].q - (f.intercept + f.slope * pts[i].t);
        ss += res * res;
    }
    f.rms = std::sqrt(ss / n);
    return f;
}

double sign(double x) { return x < 0.0 ? -1.0 : 1.0; }

// Crossing times of |x(t)| = r for the line x(t) = a + s v t relative to
// some center, exact in 1D.
std::pair<double, double> line_ball_crossings(double a, double s, double v, double r) {
    double t1 = (r - a) / (s * v);
    double t2 = (-r - a) / (s * v);
    return {std::min(t1, t2), std::max(t1, t2)};
}

}  // namespace

Trajectory::Trajectory(std::vector<PhasePoint> samples, double support_radius, double energy,
                       double dt, bool captured)
    : samples_(std::move(samples)),
      support_(support_radius),
      energy_(energy),
      speed_(std::sqrt(2.0 * energy)),
      dt_(dt),
      captured_(captured) {
    if (samples_.size() < 20)
        throw std::invalid_argument("trajectory: too few samples for asymptote fits");
    std::size_t n = samples_.size();
    std::size_t m = std::max<std::size_t>(2, n / 10);
    LineFit in = fit_line(samples_, 0, m);
    q_in_ = in.intercept;
    p_in_ = in.slope;  // m = 1, so dq/dt is the momentum
    in_rms_ = in.rms;
    if (in_rms_ >= 1e-6)
        throw std::runtime_error(
            "trajectory: incoming asymptote fit rms " + std::to_string(in_rms_) +
            "; launch farther outside the support or reduce dt");
    if (!captured_) {
        LineFit out = fit_line(samples_, n - m, n);
        q_out_ = out.intercept;
        p_out_ = out.slope;
        out_rms_ = out.rms;
        if (out_rms_ >= 1e-6)
            throw std::runtime_error(
                "trajectory: outgoing asymptote fit rms " + std::to_string(out_rms_) +
                "; increase t_span so the particle clears the support");
    }
}

void Trajectory::require_scattered(const char* what) const {
    if (captured_)
        throw std::runtime_error(std::string(what) +
                                 ": trajectory was captured, no outgoing asymptote");
}

double Trajectory::incoming_position_intercept() const { return q_in_; }
double Trajectory::incoming_momentum() const { return p_in_; }

double Trajectory::outgoing_position_intercept() const {
    require_scattered("outgoing_position_intercept");
    return q_out_;
}

double Trajectory::outgoing_momentum() const {
    require_scattered("outgoing_momentum");
    return p_out_;
}

Trajectory Trajectory::shift_time_origin(double t0) const {
    std::vector<PhasePoint> shifted = samples_;
    for (PhasePoint& s : shifted) s.t -= t0;
    return Trajectory(std::move(shifted), support_, energy_, dt_, captured_);
}

namespace {

// Exact event marching through a piecewise-constant potential. Regions are
// indexed -1 (outer left), 0..N-1 (segments), N (outer right).
std::vector<PhasePoint> march_piecewise(const Potential& pot, double energy, double q_start,
                                        double t_span, double dt, bool& captured) {
    const auto& segs = pot.segments();
    const int nseg = static_cast<int>(segs.size());
    auto region_height = [&](int i) -> double {
        if (i < 0 || i >= nseg) return 0.0;
        return segs[static_cast<std::size_t>(i)].height;
    };
    auto region_of = [&](double q, double u) -> int {
        for (int i = 0; i < nseg; ++i) {
            const Segment& s = segs[static_cast<std::size_t>(i)];
            if (q > s.lo && q < s.hi) return i;
            if (q == s.lo) return u > 0.0 ? i : i - 1;
            if (q == s.hi) return u > 0.0 ? i + 1 : i;
        }
        return q < segs.front().lo ? -1 : nseg;
    };

    double v0 = std::sqrt(2.0 * energy);
    double u = q_start < 0.0 ? v0 : -v0;

    // Breakpoints (t, q, speed-after-event).
    std::vector<PhasePoint> events{{0.0, q_start, u}};
    captured = false;
    int region = region_of(q_start, u);
    double t = 0.0, q = q_start;
    while (t < t_span) {
        double edge;
        int next_region;
        if (u > 0.0) {
            if (region >= nseg) break;  // free flight to the right forever
            edge = (region < 0) ? segs.front().lo : segs[static_cast<std::size_t>(region)].hi;
            next_region = region + 1;
        } else {
            if (region < 0) break;  // free flight to the left forever
            edge = (region >= nseg) ? segs.back().hi : segs[static_cast<std::size_t>(region)].lo;
            next_region = region - 1;
        }
        double t_hit = t + (edge - q) / u;
        if (t_hit > t_span) break;
        double kinetic_ahead = energy - region_height(next_region);
        if (kinetic_ahead > 0.0) {
            u = sign(u) * std::sqrt(2.0 * kinetic_ahead);
            region = next_region;
        } else if (kinetic_ahead < 0.0) {
            u = -u;  // reflected; stays in the current region
        } else {
            // Exactly zero kinetic energy ahead: the particle comes to rest
            // at the step and never leaves. Infinite sojourn time.
            captured = true;
            events.push_back({t_hit, edge, 0.0});
            t = t_hit;
            q = edge;
            break;
        }
        t = t_hit;
        q = edge;
        events.push_back({t, q, u});
    }

    // Uniform samples from the exact breakpoints.
    auto n_samples = static_cast<std::size_t>(std::floor(t_span / dt)) + 1;
    std::vector<PhasePoint> samples;
    samples.reserve(n_samples);
    std::size_t k = 0;
    for (std::size_t i = 0; i < n_samples; ++i) {
        double ti = dt * static_cast<double>(i);
        while (k + 1 < events.size() && events[k + 1].t <= ti) ++k;
        const PhasePoint& e = events[k];
        samples.push_back({ti, e.q + e.p * (ti - e.t), e.p});
    }
    if (!captured && samples.back().q >= pot.support_lo() &&
        samples.back().q <= pot.support_hi())
        captured = true;
    return samples;
}

std::vector<PhasePoint> march_verlet(const Potential& pot, double energy, double q_start,
                                     double t_span, double dt, bool& captured) {
    auto n_steps = static_cast<std::size_t>(std::floor(t_span / dt));
    std::vector<PhasePoint> samples;
    samples.reserve(n_steps + 1);
    double q = q_start;
    double p = q_start < 0.0 ? std::sqrt(2.0 * energy) : -std::sqrt(2.0 * energy);
    double a = -pot.derivative(q);
    samples.push_back({0.0, q, p});
    for (std::size_t i = 1; i <= n_steps; ++i) {
        double p_half = p + 0.5 * dt * a;
        q += dt * p_half;
        a = -pot.derivative(q);
        p = p_half + 0.5 * dt * a;
        samples.push_back({dt * static_cast<double>(i), q, p});
    }
    captured = samples.back().q >= pot.support_lo() && samples.back().q <= pot.support_hi();
    return samples;
}

}  // namespace

Trajectory integrate_trajectory(const Potential& pot, double energy, double q_start,
                                double t_span, double dt) {
    if (pot.geometry() != Geometry::FullLine)
        throw std::invalid_argument("integrate_trajectory: full-line potentials only");
    if (!(energy > 0.0)) throw std::invalid_argument("integrate_trajectory: energy must be positive");
    if (std::abs(q_start) <= pot.support_radius())
        throw std::invalid_argument("integrate_trajectory: start the particle outside the support");
    if (!(t_span > 0.0)) throw std::invalid_argument("integrate_trajectory: t_span must be positive");
    if (dt < 0.0) throw std::invalid_argument("integrate_trajectory: dt must be non-negative");
    double v = std::sqrt(2.0 * energy);
    if (dt == 0.0) dt = 1e-3 * (2.0 * pot.support_radius()) / v;
    if (!(dt > 0.0)) dt = 1e-3 / v;

    bool captured = false;
    std::vector<PhasePoint> samples =
        pot.piecewise_constant() ? march_piecewise(pot, energy, q_start, t_span, dt, captured)
                                 : march_verlet(pot, energy, q_start, t_span, dt, captured);
    return Trajectory(std::move(samples), pot.support_radius(), energy, dt, captured);
}

std::pair<double, double> arrival_times_about(const Trajectory& tr, double center, double r) {
    if (!(r > 0.0)) throw std::invalid_argument("arrival_times: radius must be positive");
    const auto& s = tr.samples();
    std::vector<double> hits;
    for (double target : {center + r, center - r}) {
        for (std::size_t i = 0; i + 1 < s.size(); ++i) {
            double a = s[i].q - target;
            double b = s[i + 1].q - target;
            if (a * b < 0.0) {
                hits.push_back(s[i].t + (s[i + 1].t - s[i].t) * a / (a - b));
            } else if (a == 0.0 && b != 0.0) {
                // Sample exactly on the sphere; count it once, as a
                // transversal crossing, unless the previous sample was
                // already on the same side as b.
                if (i == 0 || (s[i - 1].q - target) * b < 0.0) hits.push_back(s[i].t);
            }
        }
    }
    if (hits.size() != 2)
        throw std::runtime_error("arrival_times: |q - c| = r crossed " +
                                 std::to_string(hits.size()) +
                                 " times; expected exactly 2 (adjust r or t_span)");
    std::sort(hits.begin(), hits.end());
    return {hits[0], hits[1]};
}

std::pair<double, double> arrival_times(const Trajectory& tr, double r) {
    return arrival_times_about(tr, 0.0, r);
}

double asymptotic_time_delay(const Trajectory& tr) { return translated_time_delay(tr, 0.0); }

double translated_time_delay(const Trajectory& tr, double c) {
    double v = tr.speed();
    double sp = sign(tr.outgoing_momentum());
    double sm = sign(tr.incoming_momentum());
    return -(sp * (tr.outgoing_position_intercept() - c) -
             sm * (tr.incoming_position_intercept() - c)) /
           v;
}

std::string to_string(DelayConvention c) {
    switch (c) {
        case DelayConvention::ArrivalInMinus: return "arrival_in_minus";
        case DelayConvention::ArrivalInPlus: return "arrival_in_plus";
        case DelayConvention::ArrivalOutMinus: return "arrival_out_minus";
        case DelayConvention::ArrivalOutPlus: return "arrival_out_plus";
        case DelayConvention::SojournIn: return "sojourn_in";
        case DelayConvention::SojournOut: return "sojourn_out";
        case DelayConvention::Symmetric: return "symmetric";
        case DelayConvention::FreeFlight: return "free_flight";
    }
    return "unknown";
}

LocalDelays local_delays_about(const Trajectory& tr, double c, double c0, double r) {
    auto [tm, tp] = arrival_times_about(tr, c, r);
    double v = tr.speed();
    auto in_ref = line_ball_crossings(tr.incoming_position_intercept() - c0,
                                      sign(tr.incoming_momentum()), v, r);
    auto out_ref = line_ball_crossings(tr.outgoing_position_intercept() - c0,
                                       sign(tr.outgoing_momentum()), v, r);
    LocalDelays d;
    d.arrival_in_minus = tm - in_ref.first;
    d.arrival_in_plus = tp - in_ref.second;
    d.arrival_out_minus = out_ref.first - tm;
    d.arrival_out_plus = out_ref.second - tp;
    double T = tp - tm;
    double T0_in = in_ref.second - in_ref.first;
    double T0_out = out_ref.second - out_ref.first;
    d.sojourn_in = T - T0_in;
    d.sojourn_out = T - T0_out;
    d.symmetric = T - 0.5 * (T0_in + T0_out);
    d.sojourn = T;
    return d;
}

ClassicalDelayReport classical_time_delay(const Trajectory& tr,
                                          const std::vector<double>& radii) {
    ClassicalDelayReport rep;
    if (tr.captured()) {
        rep.infinite_delay = true;
        rep.tau_closed_form = std::numeric_limits<double>::quiet_NaN();
        return rep;
    }
    if (radii.empty()) throw std::invalid_argument("classical_time_delay: empty radius grid");
    for (std::size_t i = 0; i < radii.size(); ++i) {
        if (radii[i] <= tr.support_radius())
            throw std::invalid_argument("classical_time_delay: radii must exceed the support");
        if (i > 0 && radii[i] <= radii[i - 1])
            throw std::invalid_argument("classical_time_delay: radii must be increasing");
    }

    rep.tau_closed_form = asymptotic_time_delay(tr);
    rep.radii = radii;

    std::vector<double> sojourn(radii.size());
    for (std::size_t i = 0; i < radii.size(); ++i) {
        LocalDelays d = local_delays_about(tr, 0.0, 0.0, radii[i]);
        sojourn[i] = d.sojourn;
        rep.local[0].push_back(d.arrival_in_minus);
        rep.local[1].push_back(d.arrival_in_plus);
        rep.local[2].push_back(d.arrival_out_minus);
        rep.local[3].push_back(d.arrival_out_plus);
        rep.local[4].push_back(d.sojourn_in);
        rep.local[5].push_back(d.sojourn_out);
        rep.local[6].push_back(d.symmetric);
    }

    // Free-flight reference: take the fitted linear growth rate of the
    // sojourn time across the radius grid as the estimate of its
    // divergent component.
    double n = static_cast<double>(radii.size());
    double mr = 0.0, ms = 0.0;
    for (std::size_t i = 0; i < radii.size(); ++i) {
        mr += radii[i];
        ms += sojourn[i];
    }
    mr /= n;
    ms /= n;
    double srr = 0.0, srs = 0.0;
    for (std::size_t i = 0; i < radii.size(); ++i) {
        srr += (radii[i] - mr) * (radii[i] - mr);
        srs += (radii[i] - mr) * (sojourn[i] - ms);
    }
    rep.free_flight_rate = (radii.size() > 1) ? srs / srr : 2.0 / tr.speed();
    for (std::size_t i = 0; i < radii.size(); ++i)
        rep.local[7].push_back(sojourn[i] - rep.free_flight_rate * radii[i]);

    for (std::size_t k = 0; k < 8; ++k) {
        rep.limit[k] = rep.local[k].back();
        auto conv = static_cast<DelayConvention>(k);
        double expected = (conv == DelayConvention::ArrivalInMinus ||
                           conv == DelayConvention::ArrivalOutPlus)
                              ? 0.0
                              : rep.tau_closed_form;
        rep.residual[k] = std::abs(rep.limit[k] - expected);

        // Empirical decay rate of the residual, where it is resolvable.
        std::vector<double> lx, ly;
        for (std::size_t i = 0; i < radii.size(); ++i) {
            double res = std::abs(rep.local[k][i] - expected);
            if (res > 1e-13) {
                lx.push_back(std::log10(radii[i]));
                ly.push_back(std::log10(res));
            }
        }
        if (lx.size() < 3) {
            rep.residual_slope[k] = std::numeric_limits<double>::quiet_NaN();
        } else {
            double mx = 0.0, my = 0.0;
            for (std::size_t i = 0; i < lx.size(); ++i) {
                mx += lx[i];
                my += ly[i];
            }
            mx /= static_cast<double>(lx.size());
            my /= static_cast<double>(lx.size());
            double sxx = 0.0, sxy = 0.0;
            for (std::size_t i = 0; i < lx.size(); ++i) {
                sxx += (lx[i] - mx) * (lx[i] - mx);
                sxy += (lx[i] - mx) * (ly[i] - my);
            }
            rep.residual_slope[k] = sxy / sxx;
        }
    }
    return rep;
}

MixedOriginLimits mixed_origin_limits(const Trajectory& tr, double c, double c0) {
    double v = tr.speed();
    double sp = sign(tr.outgoing_momentum());
    double sm = sign(tr.incoming_momentum());
    double qp = tr.outgoing_position_intercept();
    double qm = tr.incoming_position_intercept();
    MixedOriginLimits m;
    m.arrival_in_minus = -sm * (c0 - c) / v;
    m.arrival_out_plus = -sp * (c - c0) / v;
    m.arrival_in_plus = -(sp * (qp - c) - sm * (qm - c0)) / v;
    m.arrival_out_minus = -(sp * (qp - c0) - sm * (qm - c)) / v;
    return m;
}

double classical_probabilistic_sojourn(const Trajectory& tr, double r) {
    if (r <= tr.support_radius())
        throw std::invalid_argument("classical_probabilistic_sojourn: r must exceed the support");
    const auto& s = tr.samples();
    double total = 0.0;
    for (std::size_t i = 0; i + 1 < s.size(); ++i) {
        double inside = (std::abs(s[i].q) <= r ? 0.5 : 0.0) +
                        (std::abs(s[i + 1].q) <= r ? 0.5 : 0.0);
        total += (s[i + 1].t - s[i].t) * inside;
    }
    return total;
}

}  // namespace tdlab
