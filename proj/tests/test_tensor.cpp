#include <doctest.h>

#include <cmath>
#include <sstream>

#include "ntkcorr/errors.hpp"
#include "ntkcorr/rng.hpp"
#include "ntkcorr/tensor.hpp"

using namespace ntkcorr;

namespace {

DenseTensor seeded(const std::vector<std::size_t>& shape, std::uint64_t seed) {
    return DenseTensor::random_normal(shape, seed);
}

DenseTensor symmetrized3(const DenseTensor& raw) {
    DenseTensor sym = DenseTensor::zeros(raw.shape());
    const std::size_t n = raw.extent(0);
    for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t b = 0; b < n; ++b) {
            for (std::size_t c = 0; c < n; ++c) {
                double acc = 0.0;
                const std::size_t perms[6][3] = {{a, b, c}, {a, c, b}, {b, a, c},
                                                 {b, c, a}, {c, a, b}, {c, b, a}};
                for (const auto& p : perms) {
                    acc += raw.at(std::span<const std::size_t>(p, 3));
                }
                const std::size_t idx[3] = {a, b, c};
                sym.at(std::span<const std::size_t>(idx, 3)) = acc / 6.0;
            }
        }
    }
    return sym;
}

}  // namespace

TEST_CASE("subordinate norm basics") {
    CHECK(subordinate_norm(DenseTensor::zeros({3, 3, 3})).value == doctest::Approx(0.0));

    // unit rank-1 direct product has norm 1
    Rng rng(21);
    const DenseTensor u = DenseTensor::vector(rng.unit_sphere(3));
    const DenseTensor w = DenseTensor::vector(rng.unit_sphere(4));
    const DenseTensor z = DenseTensor::vector(rng.unit_sphere(2));
    const DenseTensor prod = direct_product(direct_product(u, w), z);
    CHECK(subordinate_norm(prod).value == doctest::Approx(1.0).epsilon(1e-9));

    // estimate flags
    const NormEstimate est = subordinate_norm(seeded({3, 3, 3}, 5));
    CHECK(est.method == NormEstimate::Method::PowerIteration);
    CHECK(est.is_lower_bound);
    CHECK(est.converged);

    const NormEstimate vec_est = subordinate_norm(DenseTensor::vector({3.0, 4.0}));
    CHECK(vec_est.value == doctest::Approx(5.0));
    CHECK(vec_est.method == NormEstimate::Method::ExactMatrix);
    CHECK_FALSE(vec_est.is_lower_bound);
}

TEST_CASE("subordinate norm matches brute force on seeded 3x3x3 tensors") {
    for (int s = 0; s < 12; ++s) {
        const DenseTensor m = seeded({3, 3, 3}, 100 + static_cast<std::uint64_t>(s));
        const double power = subordinate_norm(m).value;
        const double brute = brute_force_norm(m, 8).value;
        CHECK(std::fabs(power - brute) <= 1e-6 * brute);
    }
}

TEST_CASE("frobenius norm and dominance") {
    CHECK(frobenius_norm(DenseTensor::vector({3.0, 4.0})) == doctest::Approx(5.0));
    CHECK(subordinate_norm(DenseTensor::vector({3.0, 4.0})).value == doctest::Approx(5.0));

    const DenseTensor id = DenseTensor::matrix(2, 2, {1, 0, 0, 1});
    CHECK(frobenius_norm(id) == doctest::Approx(std::sqrt(2.0)));
    CHECK(subordinate_norm(id).value == doctest::Approx(1.0));

    for (int s = 0; s < 50; ++s) {
        const DenseTensor m = seeded({4, 4, 4}, 200 + static_cast<std::uint64_t>(s));
        CHECK(subordinate_norm(m).value <= frobenius_norm(m) + 1e-10);
    }
}

TEST_CASE("brute force norm examples") {
    CHECK(brute_force_norm(DenseTensor::matrix(2, 2, {2, 0, 0, 1}), 8).value ==
          doctest::Approx(2.0).epsilon(1e-10));

    // rank-1 outer product with factor norms 2 and 3
    Rng rng(31);
    std::vector<double> u = rng.unit_sphere(3);
    std::vector<double> w = rng.unit_sphere(3);
    for (double& v : u) {
        v *= 2.0;
    }
    for (double& v : w) {
        v *= 3.0;
    }
    const DenseTensor outer = direct_product(DenseTensor::vector(u), DenseTensor::vector(w));
    CHECK(brute_force_norm(outer, 8).value == doctest::Approx(6.0).epsilon(1e-9));

    CHECK_THROWS_AS(brute_force_norm(seeded({5, 5}, 1), 8), SizeError);
    CHECK_THROWS_AS(brute_force_norm(seeded({2, 2, 2, 2, 2}, 1), 8,
                                     BruteForceCaps{.max_extent = 4, .max_rank = 5}),
                    SizeError);
}

TEST_CASE("contract") {
    const DenseTensor id = DenseTensor::matrix(2, 2, {1, 0, 0, 1});
    const DenseTensor picked = contract(id, {{0, {1.0, 0.0}}});
    REQUIRE(picked.rank() == 1);
    CHECK(picked.values()[0] == doctest::Approx(1.0));
    CHECK(picked.values()[1] == doctest::Approx(0.0));

    // full contraction with the maximizing vectors reproduces the norm
    const DenseTensor m = seeded({3, 3, 3}, 77);
    const auto [est, vecs] = subordinate_norm_with_vectors(m);
    std::vector<std::pair<std::size_t, std::vector<double>>> all;
    for (std::size_t k = 0; k < 3; ++k) {
        all.emplace_back(k, vecs[k]);
    }
    const DenseTensor scalar = contract(m, all);
    REQUIRE(scalar.rank() == 0);
    CHECK(std::fabs(scalar.values()[0]) == doctest::Approx(est.value).epsilon(1e-9));

    const DenseTensor zeroed = contract(m, {{1, {0.0, 0.0, 0.0}}});
    CHECK(zeroed.is_zero());

    CHECK_THROWS_AS(contract(m, {{0, {1.0, 0.0}}}), InputError);
    CHECK_THROWS_AS(contract(m, {{0, {1, 0, 0}}, {0, {1, 0, 0}}}), InputError);
}

TEST_CASE("direct product") {
    const DenseTensor a = DenseTensor::vector({2.0, 0.0});
    const DenseTensor b = DenseTensor::vector({0.0, 3.0, 0.0});
    const DenseTensor p = direct_product(a, b);
    REQUIRE(p.rank() == 2);
    CHECK(subordinate_norm(p).value == doctest::Approx(6.0).epsilon(1e-10));

    CHECK(direct_product(DenseTensor::zeros({2, 2}), b).is_zero());

    const DenseTensor m = seeded({2, 2}, 3);
    const DenseTensor v = seeded({3}, 4);
    const double exact = matrix_spectral_norm(m).value * frobenius_norm(v);
    const double measured = subordinate_norm(direct_product(m, v)).value;
    CHECK(std::fabs(measured - exact) <= 1e-8 * exact);
}

TEST_CASE("norm expectation") {
    std::vector<double> unit(16, 0.0);
    unit[3] = 1.0;
    CHECK(norm_expectation({DenseTensor::vector(unit)}) == doctest::Approx(0.25));

    CHECK(norm_expectation({DenseTensor::zeros({4, 4}), DenseTensor::zeros({4, 4})}) ==
          doctest::Approx(0.0));

    Rng rng(9);
    std::vector<DenseTensor> samples;
    for (int i = 0; i < 200; ++i) {
        samples.push_back(DenseTensor::vector(rng.normal_vector(64)));
    }
    CHECK(norm_expectation(samples) == doctest::Approx(1.0).epsilon(0.05));

    CHECK_THROWS_AS(norm_expectation({}), InputError);
    CHECK_THROWS_AS(norm_expectation({DenseTensor::zeros({2}), DenseTensor::zeros({3})}),
                    InputError);
}

TEST_CASE("elementwise power") {
    const DenseTensor m = seeded({3, 2}, 11);
    const DenseTensor same = elementwise_power(m, 1);
    CHECK(same.values() == m.values());

    const DenseTensor sq = elementwise_power(DenseTensor::vector({1.0, -2.0}), 2);
    CHECK(sq.values()[0] == doctest::Approx(1.0));
    CHECK(sq.values()[1] == doctest::Approx(4.0));
}

TEST_CASE("norm algebra properties") {
    const NormOptions opts;
    SUBCASE("triangle inequality") {
        for (int s = 0; s < 50; ++s) {
            const auto seed = static_cast<std::uint64_t>(s);
            const DenseTensor a = seeded({3, 3, 3}, 1000 + seed);
            const DenseTensor b = seeded({3, 3, 3}, 2000 + seed);
            DenseTensor sum = a;
            sum += b;
            CHECK(subordinate_norm(sum, opts).value <=
                  subordinate_norm(a, opts).value + subordinate_norm(b, opts).value + 1e-8);
        }
    }
    SUBCASE("contraction bound") {
        for (int s = 0; s < 50; ++s) {
            Rng rng(3000 + static_cast<std::uint64_t>(s));
            const DenseTensor m = seeded({3, 4, 2}, 4000 + static_cast<std::uint64_t>(s));
            const DenseTensor cut = contract(m, {{0, rng.unit_sphere(3)}, {2, rng.unit_sphere(2)}});
            CHECK(subordinate_norm(cut, opts).value <= subordinate_norm(m, opts).value + 1e-8);
        }
    }
    SUBCASE("product law") {
        for (int s = 0; s < 50; ++s) {
            const auto seed = static_cast<std::uint64_t>(s);
            const DenseTensor a = seeded({2, 3}, 5000 + seed);
            const DenseTensor b = seeded({3}, 6000 + seed);
            const double na = matrix_spectral_norm(a).value;
            const double nb = frobenius_norm(b);
            const double np = subordinate_norm(direct_product(a, b), opts).value;
            CHECK(std::fabs(np - na * nb) <= 1e-6 * na * nb);
        }
    }
    SUBCASE("symmetric maximizer dominates plain iteration") {
        NormOptions plain = opts;
        plain.symmetric_iteration = false;
        for (int s = 0; s < 20; ++s) {
            const DenseTensor sym = symmetrized3(seeded({3, 3, 3}, 7000 + static_cast<std::uint64_t>(s)));
            const double with_sym = subordinate_norm(sym, opts).value;
            const double plain_val = subordinate_norm(sym, plain).value;
            CHECK(with_sym >= plain_val - 1e-8);
        }
    }
}

TEST_CASE("input validation") {
    CHECK_THROWS_AS(subordinate_norm(DenseTensor::scalar(2.0)), InputError);
    DenseTensor bad = DenseTensor::vector({1.0, 2.0});
    bad.values()[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(subordinate_norm(bad), InputError);
    CHECK_THROWS_AS(frobenius_norm(bad), InputError);
}

TEST_CASE("csv dump") {
    DenseTensor m = DenseTensor::matrix(2, 2, {1.5, 0.0, 0.0, -2.0});
    std::ostringstream os;
    dump_csv(m, os);
    CHECK(os.str() == "0,0,1.5\n0,1,0\n1,0,0\n1,1,-2\n");
}
