#include <doctest.h>

#include <cmath>
#include <complex>
#include <numbers>
#include <sstream>

#include "tdlab/model.hpp"

using namespace tdlab;

TEST_CASE("piecewise potential evaluates segment heights and compact support") {
    Potential barrier = Potential::square_barrier(1.0, 0.0, 1.0);
    CHECK(barrier(0.5) == 1.0);
    CHECK(barrier(2.0) == 0.0);
    CHECK(barrier(-0.5) == 0.0);

    Potential well = Potential::square_well(1.0, 0.0, 1.0);
    CHECK(well(0.25) == -1.0);
    CHECK(well.support_radius() == 1.0);
}

TEST_CASE("double barrier tiles gap with explicit zero step") {
    Potential p = Potential::double_barrier(2.0, 0.5, 1.0);
    CHECK(p(-0.8) == 2.0);
    CHECK(p(0.0) == 0.0);
    CHECK(p(0.8) == 2.0);
    CHECK(p(1.5) == 0.0);
    CHECK(p.segments().size() == 3);
    CHECK(p.support_radius() == doctest::Approx(1.0).epsilon(1e-14));

    // Segments must tile the support without gaps.
    const auto& segs = p.segments();
    for (std::size_t i = 1; i < segs.size(); ++i) CHECK(segs[i].lo == segs[i - 1].hi);
}

TEST_CASE("gaussian bump derivative matches finite differences") {
    Potential p = Potential::gaussian_bump(0.7, 0.3, 1.2, 12.0);
    for (double x : {-3.0, -0.5, 0.3, 1.7, 4.0}) {
        double h = 1e-6;
        double fd = (p(x + h) - p(x - h)) / (2.0 * h);
        CHECK(p.derivative(x) == doctest::Approx(fd).epsilon(1e-7));
    }
    CHECK(p(13.0) == 0.0);
    CHECK_THROWS_AS(Potential::square_barrier(1.0, 0.0, 1.0).derivative(0.5),
                    std::runtime_error);
}

TEST_CASE("tabulated potential parses two-column text and rejects junk") {
    std::istringstream good("# comment\n-1.0 0.0\n0.0 2.5 # inline\n1.0 0.0\n");
    Potential p = Potential::tabulated_from_stream(good);
    CHECK(p(-0.5) == doctest::Approx(1.25));
    CHECK(p(0.5) == doctest::Approx(1.25));
    CHECK(p(3.0) == 0.0);

    std::istringstream bad("0.0 1.0\n0.5\n");
    CHECK_THROWS_WITH_AS(Potential::tabulated_from_stream(bad),
                         doctest::Contains("line 2"), std::invalid_argument);

    std::istringstream unsorted("1.0 0.0\n0.0 1.0\n");
    CHECK_THROWS_AS(Potential::tabulated_from_stream(unsorted), std::invalid_argument);
}

TEST_CASE("fuzzy membership follows the three-branch definition") {
    FuzzyProfile f(5.0, 2.0);
    CHECK(f.membership(3.0) == 1.0);
    CHECK(f.membership(-3.0) == 1.0);
    CHECK(f.membership(5.0) == 1.0);
    // Midpoint of the skin with the default shape: cos^2(pi/4) = 1/2.
    CHECK(f.membership(6.0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(f.membership(8.0) == 0.0);
    CHECK(f.membership(-9.0) == 0.0);
}

TEST_CASE("fuzzy membership is non-increasing in |x| for a non-increasing shape") {
    FuzzyProfile f(4.0, 3.0);
    double prev = 1.0;
    for (double x = 0.0; x <= 9.0; x += 0.01) {
        double m = f.membership(x);
        CHECK(m <= prev + 1e-15);
        prev = m;
    }
}

TEST_CASE("free-flight normalizer adds the skin integral of the shape") {
    // Oracle: integrate the default shape cos^2(pi u/2) on [0,1] by midpoint
    // rule, independent of the quadrature inside the library.
    double integral = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        double u = (i + 0.5) / n;
        double c = std::cos(0.5 * std::numbers::pi * u);
        integral += c * c / n;
    }
    CHECK(integral == doctest::Approx(0.5).epsilon(1e-9));

    FuzzyProfile fuzzy(10.0, 4.0);
    CHECK(fuzzy.free_flight_normalizer() == doctest::Approx(10.0 + 4.0 * integral).epsilon(1e-9));

    FuzzyProfile sharp(10.0, 0.0);
    CHECK(sharp.free_flight_normalizer() == 10.0);

    // Difference of normalizers at equal radius isolates rho * integral(g).
    CHECK(fuzzy.free_flight_normalizer() - sharp.free_flight_normalizer() ==
          doctest::Approx(4.0 * fuzzy.shape_integral()).epsilon(1e-14));

    // Near-degenerate shape with vanishing measure collapses toward r.
    FuzzyProfile spike(10.0, 4.0, [](double u) { return u == 0.0 ? 1.0 : 0.0; });
    CHECK(spike.free_flight_normalizer() == doctest::Approx(10.0).epsilon(1e-3));
}

TEST_CASE("default shape curvature data matches closed forms") {
    // g(u) = cos^2(pi u/2) has g'' = -(pi^2/2) cos(pi u), so |g''(0)| = pi^2/2
    // and integral of |g''| over [0,1] equals pi.
    FuzzyProfile f(1.0, 1.0);
    CHECK(f.shape_curvature_origin() ==
          doctest::Approx(0.5 * std::numbers::pi * std::numbers::pi).epsilon(1e-5));
    CHECK(f.shape_curvature_l1() == doctest::Approx(std::numbers::pi).epsilon(1e-3));
}

TEST_CASE("energy profile normalizes to unit L2 norm and keeps it under resampling") {
    EnergyProfile p = EnergyProfile::gaussian(2.0, 0.25, 201);
    CHECK(p.norm_squared() == doctest::Approx(1.0).epsilon(1e-10));

    EnergyProfile q = p.resample(501);
    CHECK(q.norm_squared() == doctest::Approx(1.0).epsilon(1e-10));
    CHECK(q.energy(0) == doctest::Approx(p.energy(0)));
    CHECK(q.energy(q.size() - 1) == doctest::Approx(p.energy(p.size() - 1)));

    // Resampling must not shift where the profile concentrates.
    auto mean_energy = [](const EnergyProfile& e) {
        return e.integrate([&](std::size_t i) { return e.energy(i) * std::norm(e.amplitude(i)); });
    };
    CHECK(mean_energy(q) == doctest::Approx(mean_energy(p)).epsilon(1e-8));
}

TEST_CASE("energy profile rejects components below the floor") {
    std::vector<double> es{0.01, 0.02, 0.03};
    std::vector<complex> as{1.0, 1.0, 1.0};
    CHECK_THROWS_AS(EnergyProfile(es, as), std::invalid_argument);

    // Gaussian factory clips its window at the floor instead of throwing.
    EnergyProfile p = EnergyProfile::gaussian(0.2, 0.1, 101);
    CHECK(p.energy(0) >= EnergyProfile::kDefaultEnergyFloor);
}

TEST_CASE("periodic potential reconstruction is real for complex harmonics") {
    Potential base = Potential::radial_square_well(1.0, 2.0, 0);
    std::map<int, std::function<complex(double)>> h;
    h[1] = [](double s) { return s <= 2.0 ? complex(0.3, 0.1) : complex(0.0, 0.0); };
    h[2] = [](double s) { return s <= 2.0 ? complex(0.0, -0.05) : complex(0.0, 0.0); };
    PeriodicPotential vp(base, 1.5, h);

    for (double t : {0.0, 0.7, 1.9, 4.2}) {
        for (double s : {0.5, 1.5, 3.0}) {
            complex sum(0.0, 0.0);
            for (int n = -3; n <= 3; ++n)
                sum += vp.harmonic(n, s) * std::exp(complex(0.0, -n * vp.omega() * t));
            CHECK(std::abs(std::imag(sum)) < 1e-14);
            CHECK(std::real(sum) == doctest::Approx(vp.at(s, t)).epsilon(1e-12));
        }
    }
    CHECK(vp.max_harmonic() == 2);
    CHECK(vp.period() == doctest::Approx(2.0 * std::numbers::pi / 1.5));
}

TEST_CASE("scattering grid leaves asymptotic margins of four long wavelengths") {
    Potential p = Potential::square_barrier(1.0, -1.0, 1.0);
    double e_min = 0.05, e_max = 4.0;
    SpatialGrid g = SpatialGrid::for_scattering(p, e_min, e_max);
    double lambda_long = 2.0 * std::numbers::pi / wavenumber(e_min);
    CHECK(g.x_max() >= p.support_radius() + 4.0 * lambda_long - 1e-12);
    CHECK(g.x_min() <= -p.support_radius() - 4.0 * lambda_long + 1e-12);
    double lambda_short = 2.0 * std::numbers::pi / wavenumber(e_max);
    CHECK(g.dx() <= lambda_short / 40.0 + 1e-12);

    SpatialGrid rg = SpatialGrid::for_scattering(Potential::radial_square_well(1.0, 2.0, 0),
                                                 e_min, e_max);
    CHECK(rg.x_min() == 0.0);
}
