#include <doctest.h>

#include <cmath>
#include <sstream>

#include "ntkcorr/asymptotics.hpp"
#include "ntkcorr/errors.hpp"
#include "ntkcorr/rng.hpp"

using namespace ntkcorr;

namespace {

const std::vector<std::size_t> kGrid = {32, 64, 128, 256, 512, 1024};

std::vector<SweepSample> synthetic(double exponent, double noise_sd, std::size_t seeds,
                                   std::uint64_t seed0) {
    std::vector<SweepSample> out;
    for (std::size_t n : kGrid) {
        for (std::size_t s = 0; s < seeds; ++s) {
            Rng rng(mix_seed({seed0, n, s}));
            const double v =
                std::pow(static_cast<double>(n), exponent) * std::exp(noise_sd * rng.normal());
            out.push_back({n, s, v});
        }
    }
    return out;
}

}  // namespace

TEST_CASE("fit recovers exact power laws") {
    std::vector<SweepSample> linear;
    std::vector<SweepSample> constant;
    for (std::size_t n : kGrid) {
        for (std::size_t s = 0; s < 3; ++s) {
            linear.push_back({n, s, static_cast<double>(n)});
            constant.push_back({n, s, 7.0});
        }
    }
    const AsymptoticFit f1 = fit_power_law(linear, 0.95);
    CHECK(f1.exponent == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(f1.r_squared == doctest::Approx(1.0));

    const AsymptoticFit f0 = fit_power_law(constant, 0.95);
    CHECK(f0.exponent == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(f0.log_prefactor == doctest::Approx(std::log(7.0)));
}

TEST_CASE("fit recovers noisy planted exponents within 0.1") {
    for (double b : {-1.5, -1.0, -0.5, 0.0}) {
        const AsymptoticFit fit = fit_power_law(synthetic(b, 0.1, 32, 42), 0.95);
        CHECK(std::fabs(fit.exponent - b) <= 0.1);
    }
}

TEST_CASE("scale equivariance") {
    const auto samples = synthetic(-0.5, 0.1, 8, 7);
    std::vector<SweepSample> scaled = samples;
    const double lambda = 17.5;
    for (auto& s : scaled) {
        s.value *= lambda;
    }
    const AsymptoticFit a = fit_power_law(samples, 0.95);
    const AsymptoticFit b = fit_power_law(scaled, 0.95);
    CHECK(b.exponent == doctest::Approx(a.exponent).epsilon(1e-12));
    CHECK(b.log_prefactor - a.log_prefactor == doctest::Approx(std::log(lambda)).epsilon(1e-12));
}

TEST_CASE("monotone data gives nonpositive exponent") {
    std::vector<SweepSample> samples;
    Rng rng(3);
    for (std::size_t i = 0; i < kGrid.size(); ++i) {
        const double level = 1.0 / (1.0 + static_cast<double>(i));
        for (std::size_t s = 0; s < 5; ++s) {
            samples.push_back({kGrid[i], s, level * (1.0 + 0.01 * rng.uniform())});
        }
    }
    const AsymptoticFit fit = fit_power_law(samples, 0.95);
    CHECK(fit.exponent <= 0.0 + fit.exponent_stderr);
}

TEST_CASE("degenerate width flags the fit") {
    std::vector<SweepSample> samples;
    for (std::size_t n : kGrid) {
        for (std::size_t s = 0; s < 3; ++s) {
            samples.push_back({n, s, n == 128 ? 0.0 : 1.0});
        }
    }
    const AsymptoticFit fit = fit_power_law(samples, 0.95);
    CHECK(fit.degenerate);
    CHECK(std::isnan(fit.exponent));
    CHECK(fit.status.find("degenerate") != std::string::npos);
}

TEST_CASE("fit input validation") {
    std::vector<SweepSample> two_widths = {{32, 0, 1}, {32, 1, 1}, {32, 2, 1},
                                           {64, 0, 1}, {64, 1, 1}, {64, 2, 1}};
    CHECK_THROWS_AS(fit_power_law(two_widths, 0.95), InsufficientDataError);

    std::vector<SweepSample> two_seeds;
    for (std::size_t n : {32u, 64u, 128u}) {
        two_seeds.push_back({n, 0, 1.0});
        two_seeds.push_back({n, 1, 1.0});
    }
    CHECK_THROWS_AS(fit_power_law(two_seeds, 0.95), InsufficientDataError);
    CHECK_THROWS_AS(fit_power_law(synthetic(0, 0.1, 4, 1), 1.5), InputError);
}

TEST_CASE("verify_bound") {
    SUBCASE("bounded constant sequence is consistent") {
        std::vector<SweepSample> samples;
        for (std::size_t n : kGrid) {
            for (std::size_t s = 0; s < 8; ++s) {
                samples.push_back({n, s, 1.0});
            }
        }
        const BoundTable t = verify_bound(samples, 0.0, {2.0});
        CHECK(t.consistent);
        for (const auto& row : t.rows) {
            CHECK(row.probability == doctest::Approx(1.0));
        }
    }
    SUBCASE("unbounded sequence is inconsistent") {
        std::vector<SweepSample> samples;
        for (std::size_t n : kGrid) {
            for (std::size_t s = 0; s < 8; ++s) {
                samples.push_back({n, s, static_cast<double>(n)});
            }
        }
        const BoundTable t = verify_bound(samples, 0.0, {1.0, 10.0, 100.0});
        CHECK_FALSE(t.consistent);
    }
    SUBCASE("probability is nondecreasing in c") {
        const auto samples = synthetic(-1.0, 0.4, 16, 5);
        const BoundTable t = verify_bound(samples, -1.0, {0.5, 1.0, 2.0, 4.0});
        for (std::size_t n_idx = 0; n_idx < kGrid.size(); ++n_idx) {
            double prev = -1.0;
            for (const auto& row : t.rows) {
                if (row.n == kGrid[n_idx]) {
                    CHECK(row.probability >= prev);
                    prev = row.probability;
                }
            }
        }
    }
    SUBCASE("matched exponent with generous c is consistent") {
        const auto samples = synthetic(-1.0, 0.4, 16, 6);
        // c at the 95th percentile of the value / n^-1 ratio
        std::vector<double> ratios;
        for (const auto& s : samples) {
            ratios.push_back(s.value * static_cast<double>(s.n));
        }
        std::sort(ratios.begin(), ratios.end());
        const double c95 = ratios[static_cast<std::size_t>(0.95 * (ratios.size() - 1))];
        const BoundTable t = verify_bound(samples, -1.0, {c95 / 4.0, c95});
        CHECK(t.consistent);
    }
    SUBCASE("empty c grid rejected") {
        CHECK_THROWS_AS(verify_bound(synthetic(0, 0.1, 4, 2), 0.0, {}), InputError);
    }
}

TEST_CASE("uniform family fit") {
    const auto fast = synthetic(-1.0, 0.1, 16, 11);
    const auto slow = synthetic(-0.5, 0.1, 16, 12);

    SUBCASE("identical families share their fit") {
        const FamilyFitReport rep = uniform_family_fit({{"a", slow}, {"b", slow}}, 0.95);
        CHECK(rep.shared_envelope.exponent ==
              doctest::Approx(rep.fits.at("a").exponent).epsilon(1e-12));
    }
    SUBCASE("envelope follows the slower family") {
        const FamilyFitReport rep = uniform_family_fit({{"fast", fast}, {"slow", slow}}, 0.95);
        CHECK(std::fabs(rep.shared_envelope.exponent - (-0.5)) <= 0.1);
    }
    SUBCASE("single family") {
        const FamilyFitReport rep = uniform_family_fit({{"only", fast}}, 0.95);
        CHECK(rep.shared_envelope.exponent ==
              doctest::Approx(rep.fits.at("only").exponent).epsilon(1e-9));
    }
}

TEST_CASE("sweep csv round trip is canonical") {
    std::map<std::string, std::vector<SweepSample>> data;
    data["b_stat"] = {{64, 1, 0.25}, {32, 0, 1.5}, {32, 1, 2.75}};
    data["a_stat"] = {{128, 2, 1e-7}};

    std::ostringstream os1;
    write_sweep_csv(os1, data);
    std::istringstream is(os1.str());
    const auto parsed = read_sweep_csv(is);
    std::ostringstream os2;
    write_sweep_csv(os2, parsed);
    CHECK(os1.str() == os2.str());
    CHECK(os1.str().substr(0, 22) == "statistic,n,seed,value");

    std::istringstream bad("wrong,header\n");
    CHECK_THROWS_AS(read_sweep_csv(bad), InputError);
}

TEST_CASE("fit json fields") {
    const AsymptoticFit fit = fit_power_law(synthetic(-0.5, 0.1, 8, 21), 0.9);
    const nlohmann::json j = fit_to_json("demo", fit);
    for (const char* key : {"statistic", "exponent", "exponent_stderr", "log_prefactor",
                            "r_squared", "quantile", "widths", "seeds_per_width"}) {
        CHECK(j.contains(key));
    }
    CHECK(j["statistic"] == "demo");
    CHECK(j["quantile"] == doctest::Approx(0.9));
    CHECK(j["widths"].size() == kGrid.size());
}
