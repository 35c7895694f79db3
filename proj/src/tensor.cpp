#include "ntkcorr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>

#include "ntkcorr/errors.hpp"
#include "ntkcorr/rng.hpp"

namespace ntkcorr {

namespace {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) {
        n *= e;
    }
    return n;
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += a[i] * b[i];
    }
    return s;
}

double euclid(std::span<const double> v) {
    return std::sqrt(dot(v, v));
}

void normalize(std::vector<double>& v) {
    const double n = euclid(v);
    if (n > 0.0) {
        for (double& x : v) {
            x /= n;
        }
    }
}

}  // namespace

DenseTensor::DenseTensor(std::vector<std::size_t> shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
    for (std::size_t e : shape_) {
        if (e == 0) {
            throw InputError("tensor extents must be positive");
        }
    }
    if (values_.size() != shape_product(shape_)) {
        throw InputError("tensor value count does not match shape");
    }
}

DenseTensor DenseTensor::zeros(std::vector<std::size_t> shape) {
    const std::size_t n = shape_product(shape);
    return DenseTensor(std::move(shape), std::vector<double>(n, 0.0));
}

DenseTensor DenseTensor::scalar(double v) {
    return DenseTensor({}, {v});
}

DenseTensor DenseTensor::vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return DenseTensor({n}, std::move(v));
}

DenseTensor DenseTensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return DenseTensor({rows, cols}, std::move(v));
}

DenseTensor DenseTensor::random_normal(std::vector<std::size_t> shape, std::uint64_t seed) {
    DenseTensor t = zeros(std::move(shape));
    Rng rng(seed);
    for (double& x : t.values()) {
        x = rng.normal();
    }
    return t;
}

std::size_t DenseTensor::offset(std::span<const std::size_t> idx) const {
    std::size_t off = 0;
    for (std::size_t k = 0; k < shape_.size(); ++k) {
        off = off * shape_[k] + idx[k];
    }
    return off;
}

double DenseTensor::at(std::span<const std::size_t> idx) const {
    return values_[offset(idx)];
}

double& DenseTensor::at(std::span<const std::size_t> idx) {
    return values_[offset(idx)];
}

bool DenseTensor::all_finite() const {
    return std::all_of(values_.begin(), values_.end(),
                       [](double v) { return std::isfinite(v); });
}

bool DenseTensor::is_zero() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return v == 0.0; });
}

DenseTensor& DenseTensor::operator+=(const DenseTensor& other) {
    if (shape_ != other.shape_) {
        throw InputError("tensor shape mismatch in addition");
    }
    for (std::size_t i = 0; i < values_.size(); ++i) {
        values_[i] += other.values_[i];
    }
    return *this;
}

DenseTensor& DenseTensor::operator*=(double s) {
    for (double& v : values_) {
        v *= s;
    }
    return *this;
}

std::string to_string(NormEstimate::Method m) {
    switch (m) {
        case NormEstimate::Method::ExactMatrix: return "exact-matrix";
        case NormEstimate::Method::PowerIteration: return "power-iteration";
        case NormEstimate::Method::BruteForce: return "brute-force";
    }
    return "?";
}

double frobenius_norm(const DenseTensor& m) {
    if (!m.all_finite()) {
        throw InputError("frobenius_norm: non-finite entries");
    }
    double s = 0.0;
    for (double v : m.values()) {
        s += v * v;
    }
    return std::sqrt(s);
}

DenseTensor contract(const DenseTensor& m,
                     const std::vector<std::pair<std::size_t, std::vector<double>>>& vectors) {
    const std::size_t r = m.rank();
    std::vector<bool> contracted(r, false);
    for (const auto& [mode, vec] : vectors) {
        if (mode >= r) {
            throw InputError("contract: mode out of range");
        }
        if (contracted[mode]) {
            throw InputError("contract: repeated mode");
        }
        if (vec.size() != m.extent(mode)) {
            throw InputError("contract: vector length does not match mode extent");
        }
        contracted[mode] = true;
    }

    std::vector<std::size_t> kept_modes;
    std::vector<std::size_t> out_shape;
    for (std::size_t k = 0; k < r; ++k) {
        if (!contracted[k]) {
            kept_modes.push_back(k);
            out_shape.push_back(m.extent(k));
        }
    }
    DenseTensor out = DenseTensor::zeros(out_shape);

    // Per-mode coefficient lookup (identity weight on kept modes).
    std::vector<const std::vector<double>*> coeff(r, nullptr);
    for (const auto& [mode, vec] : vectors) {
        coeff[mode] = &vec;
    }

    std::vector<std::size_t> idx(r, 0);
    const auto& vals = m.values();
    for (std::size_t lin = 0; lin < vals.size(); ++lin) {
        double w = vals[lin];
        std::size_t out_off = 0;
        for (std::size_t k = 0; k < r; ++k) {
            if (coeff[k] != nullptr) {
                w *= (*coeff[k])[idx[k]];
            } else {
                out_off = out_off * m.extent(k) + idx[k];
            }
        }
        out.values()[out_off] += w;
        for (std::size_t k = r; k-- > 0;) {
            if (++idx[k] < m.extent(k)) {
                break;
            }
            idx[k] = 0;
        }
    }
    return out;
}

DenseTensor direct_product(const DenseTensor& a, const DenseTensor& b) {
    if (!a.all_finite() || !b.all_finite()) {
        throw InputError("direct_product: non-finite entries");
    }
    std::vector<std::size_t> shape = a.shape();
    shape.insert(shape.end(), b.shape().begin(), b.shape().end());
    std::vector<double> vals;
    vals.reserve(a.size() * b.size());
    for (double x : a.values()) {
        for (double y : b.values()) {
            vals.push_back(x * y);
        }
    }
    return DenseTensor(std::move(shape), std::move(vals));
}

DenseTensor elementwise_power(const DenseTensor& m, unsigned p) {
    if (p < 1) {
        throw InputError("elementwise_power: p must be >= 1");
    }
    DenseTensor out = m;
    for (double& v : out.values()) {
        double acc = v;
        for (unsigned i = 1; i < p; ++i) {
            acc *= v;
        }
        v = acc;
    }
    return out;
}

void dump_csv(const DenseTensor& m, std::ostream& os) {
    const std::size_t r = m.rank();
    std::vector<std::size_t> idx(r, 0);
    os.precision(17);
    for (std::size_t lin = 0; lin < m.size(); ++lin) {
        for (std::size_t k = 0; k < r; ++k) {
            os << idx[k] << ',';
        }
        os << m.values()[lin] << '\n';
        for (std::size_t k = r; k-- > 0;) {
            if (++idx[k] < m.extent(k)) {
                break;
            }
            idx[k] = 0;
        }
    }
}

namespace {

// Contraction of m against every mode's vector except `skip`, yielding a
// vector on mode `skip`.
std::vector<double> contract_except(const DenseTensor& m,
                                    const std::vector<std::vector<double>>& vecs,
                                    std::size_t skip) {
    const std::size_t r = m.rank();
    std::vector<double> out(m.extent(skip), 0.0);
    std::vector<std::size_t> idx(r, 0);
    const auto& vals = m.values();
    for (std::size_t lin = 0; lin < vals.size(); ++lin) {
        double w = vals[lin];
        for (std::size_t k = 0; k < r; ++k) {
            if (k != skip) {
                w *= vecs[k][idx[k]];
            }
        }
        out[idx[skip]] += w;
        for (std::size_t k = r; k-- > 0;) {
            if (++idx[k] < m.extent(k)) {
                break;
            }
            idx[k] = 0;
        }
    }
    return out;
}

double contract_all(const DenseTensor& m, const std::vector<std::vector<double>>& vecs) {
    const std::size_t r = m.rank();
    std::vector<std::size_t> idx(r, 0);
    double acc = 0.0;
    const auto& vals = m.values();
    for (std::size_t lin = 0; lin < vals.size(); ++lin) {
        double w = vals[lin];
        for (std::size_t k = 0; k < r; ++k) {
            w *= vecs[k][idx[k]];
        }
        acc += w;
        for (std::size_t k = r; k-- > 0;) {
            if (++idx[k] < m.extent(k)) {
                break;
            }
            idx[k] = 0;
        }
    }
    return acc;
}

bool swap_symmetric(const DenseTensor& m, std::size_t a, std::size_t b) {
    if (m.extent(a) != m.extent(b)) {
        return false;
    }
    double max_abs = 0.0;
    for (double v : m.values()) {
        max_abs = std::max(max_abs, std::fabs(v));
    }
    const double tol = 1e-12 * std::max(1.0, max_abs);
    const std::size_t r = m.rank();
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t lin = 0; lin < m.size(); ++lin) {
        std::vector<std::size_t> sw = idx;
        std::swap(sw[a], sw[b]);
        if (std::fabs(m.values()[lin] - m.at(sw)) > tol) {
            return false;
        }
        for (std::size_t k = r; k-- > 0;) {
            if (++idx[k] < m.extent(k)) {
                break;
            }
            idx[k] = 0;
        }
    }
    return true;
}

// Groups of mutually interchangeable modes (transitive closure of pairwise
// swap symmetry).
std::vector<std::vector<std::size_t>> symmetry_classes(const DenseTensor& m) {
    const std::size_t r = m.rank();
    std::vector<std::size_t> parent(r);
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](std::size_t x) {
        while (parent[x] != x) {
            x = parent[x] = parent[parent[x]];
        }
        return x;
    };
    for (std::size_t a = 0; a < r; ++a) {
        for (std::size_t b = a + 1; b < r; ++b) {
            if (find(a) != find(b) && swap_symmetric(m, a, b)) {
                parent[find(b)] = find(a);
            }
        }
    }
    std::vector<std::vector<std::size_t>> classes(r);
    for (std::size_t k = 0; k < r; ++k) {
        classes[find(k)].push_back(k);
    }
    std::erase_if(classes, [](const auto& c) { return c.empty(); });
    return classes;
}

struct IterationResult {
    double value = 0.0;
    std::vector<std::vector<double>> vectors;
    int iterations = 0;
    bool converged = false;
};

// Plain alternating maximization: each mode's vector is set to the
// normalized contraction against all other modes. Ties (zero contraction)
// keep the previous vector.
IterationResult alternate_plain(const DenseTensor& m, std::vector<std::vector<double>> vecs,
                                double tol, int max_iters) {
    const std::size_t r = m.rank();
    IterationResult res;
    double prev = std::fabs(contract_all(m, vecs));
    for (int it = 0; it < max_iters; ++it) {
        for (std::size_t k = 0; k < r; ++k) {
            std::vector<double> w = contract_except(m, vecs, k);
            const double n = euclid(w);
            if (n > 0.0) {
                for (double& x : w) {
                    x /= n;
                }
                vecs[k] = std::move(w);
            }
        }
        const double obj = std::fabs(contract_all(m, vecs));
        res.iterations = it + 1;
        if (std::fabs(obj - prev) < tol * std::max(1.0, obj)) {
            res.converged = true;
            prev = obj;
            break;
        }
        prev = obj;
    }
    res.value = prev;
    res.vectors = std::move(vecs);
    return res;
}

// Shared-vector iteration over symmetry classes. Non-monotone steps are
// possible for even-order sign-indefinite tensors; the caller keeps the
// best objective and falls back to plain restarts.
IterationResult alternate_symmetric(const DenseTensor& m,
                                    const std::vector<std::vector<std::size_t>>& classes,
                                    std::vector<std::vector<double>> vecs, double tol,
                                    int max_iters) {
    IterationResult res;
    double best = std::fabs(contract_all(m, vecs));
    std::vector<std::vector<double>> best_vecs = vecs;
    double prev = best;
    int stalls = 0;
    for (int it = 0; it < max_iters; ++it) {
        for (const auto& cls : classes) {
            std::vector<double> w = contract_except(m, vecs, cls.front());
            const double n = euclid(w);
            if (n > 0.0) {
                for (double& x : w) {
                    x /= n;
                }
                for (std::size_t mode : cls) {
                    vecs[mode] = w;
                }
            }
        }
        const double obj = std::fabs(contract_all(m, vecs));
        res.iterations = it + 1;
        if (obj > best) {
            best = obj;
            best_vecs = vecs;
        }
        if (std::fabs(obj - prev) < tol * std::max(1.0, obj)) {
            res.converged = true;
            break;
        }
        if (obj < prev) {
            if (++stalls >= 3) {
                break;
            }
        } else {
            stalls = 0;
        }
        prev = obj;
    }
    res.value = best;
    res.vectors = std::move(best_vecs);
    return res;
}

std::vector<std::vector<double>> random_unit_vectors(const DenseTensor& m, Rng& rng) {
    std::vector<std::vector<double>> vecs;
    vecs.reserve(m.rank());
    for (std::size_t k = 0; k < m.rank(); ++k) {
        vecs.push_back(rng.unit_sphere(m.extent(k)));
    }
    return vecs;
}

void validate_norm_input(const DenseTensor& m) {
    if (m.rank() == 0) {
        throw InputError("subordinate_norm: rank-0 tensor; take the absolute value instead");
    }
    if (!m.all_finite()) {
        throw InputError("subordinate_norm: non-finite entries");
    }
}

}  // namespace

std::pair<NormEstimate, std::vector<std::vector<double>>> subordinate_norm_with_vectors(
    const DenseTensor& m, const NormOptions& opts) {
    validate_norm_input(m);
    if (opts.restarts < 1 || opts.tol <= 0.0) {
        throw InputError("subordinate_norm: restarts >= 1 and tol > 0 required");
    }

    NormEstimate est;
    if (m.rank() == 1) {
        est.value = euclid(m.values());
        est.method = NormEstimate::Method::ExactMatrix;
        est.restarts = 0;
        est.converged = true;
        est.is_lower_bound = false;
        std::vector<double> v = m.values();
        normalize(v);
        if (est.value == 0.0) {
            v.assign(m.size(), 0.0);
            v[0] = 1.0;
        }
        return {est, {v}};
    }

    const auto classes = symmetry_classes(m);
    const bool has_symmetry =
        opts.symmetric_iteration &&
        std::any_of(classes.begin(), classes.end(), [](const auto& c) { return c.size() >= 2; });

    est.method = NormEstimate::Method::PowerIteration;
    est.is_lower_bound = true;
    est.restarts = opts.restarts;

    double best = 0.0;
    std::vector<std::vector<double>> best_vecs;
    bool any_converged = false;
    int total_iters = 0;

    for (int r = 0; r < opts.restarts; ++r) {
        Rng rng(mix_seed({opts.seed, static_cast<std::uint64_t>(r)}));
        auto start = random_unit_vectors(m, rng);
        if (has_symmetry) {
            // Shared starting vector within each class, per the symmetric
            // maximizer property.
            std::vector<std::vector<double>> sym_start = start;
            for (const auto& cls : classes) {
                for (std::size_t mode : cls) {
                    sym_start[mode] = sym_start[cls.front()];
                }
            }
            IterationResult sym =
                alternate_symmetric(m, classes, sym_start, opts.tol, opts.max_iters);
            total_iters += sym.iterations;
            if (sym.value > best || best_vecs.empty()) {
                best = sym.value;
                best_vecs = sym.vectors;
            }
            any_converged = any_converged || sym.converged;
        }
        IterationResult plain = alternate_plain(m, start, opts.tol, opts.max_iters);
        total_iters += plain.iterations;
        if (plain.value > best || best_vecs.empty()) {
            best = plain.value;
            best_vecs = plain.vectors;
        }
        any_converged = any_converged || plain.converged;
    }

    est.value = best;
    est.iterations = total_iters;
    est.converged = any_converged;
    return {est, best_vecs};
}

NormEstimate subordinate_norm(const DenseTensor& m, const NormOptions& opts) {
    return subordinate_norm_with_vectors(m, opts).first;
}

NormEstimate matrix_spectral_norm(const DenseTensor& m) {
    if (m.rank() != 2) {
        throw InputError("matrix_spectral_norm: rank-2 tensor required");
    }
    if (!m.all_finite()) {
        throw InputError("matrix_spectral_norm: non-finite entries");
    }
    // One-sided Jacobi on columns; arrange cols <= rows.
    std::size_t rows = m.extent(0);
    std::size_t cols = m.extent(1);
    std::vector<double> a(m.size());
    if (rows >= cols) {
        a = m.values();
    } else {
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < cols; ++j) {
                a[j * rows + i] = m.values()[i * cols + j];
            }
        }
        std::swap(rows, cols);
    }
    auto col = [&](std::size_t j) { return a.data() + j * rows; };

    const double eps = 1e-15;
    int iters = 0;
    for (int sweep = 0; sweep < 60; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p < cols; ++p) {
            for (std::size_t q = p + 1; q < cols; ++q) {
                double app = 0.0;
                double aqq = 0.0;
                double apq = 0.0;
                for (std::size_t i = 0; i < rows; ++i) {
                    app += col(p)[i] * col(p)[i];
                    aqq += col(q)[i] * col(q)[i];
                    apq += col(p)[i] * col(q)[i];
                }
                if (std::fabs(apq) <= eps * std::sqrt(app * aqq)) {
                    continue;
                }
                const double zeta = (aqq - app) / (2.0 * apq);
                const double t =
                    (zeta >= 0.0 ? 1.0 : -1.0) / (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double cs = 1.0 / std::sqrt(1.0 + t * t);
                const double sn = cs * t;
                for (std::size_t i = 0; i < rows; ++i) {
                    const double vp = col(p)[i];
                    const double vq = col(q)[i];
                    col(p)[i] = cs * vp - sn * vq;
                    col(q)[i] = sn * vp + cs * vq;
                }
                rotated = true;
            }
        }
        ++iters;
        if (!rotated) {
            break;
        }
    }

    double sigma_max = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < rows; ++i) {
            s += col(j)[i] * col(j)[i];
        }
        sigma_max = std::max(sigma_max, std::sqrt(s));
    }

    NormEstimate est;
    est.value = sigma_max;
    est.method = NormEstimate::Method::ExactMatrix;
    est.iterations = iters;
    est.converged = true;
    est.is_lower_bound = false;
    return est;
}

namespace {

// Primitive integer directions (gcd 1, first nonzero positive) in
// [-g, g]^dim, normalized to the unit sphere.
std::vector<std::vector<double>> lattice_directions(std::size_t dim, long g) {
    std::vector<std::vector<double>> dirs;
    std::vector<long> z(dim, -g);
    const auto advance = [&]() {
        for (std::size_t k = dim; k-- > 0;) {
            if (++z[k] <= g) {
                return true;
            }
            z[k] = -g;
        }
        return false;
    };
    do {
        long first = 0;
        long gcd = 0;
        for (long c : z) {
            if (first == 0) {
                first = c;
            }
            gcd = std::gcd(gcd, std::labs(c));
        }
        if (first <= 0 || gcd != 1) {
            continue;
        }
        std::vector<double> v(dim);
        double norm_sq = 0.0;
        for (std::size_t k = 0; k < dim; ++k) {
            v[k] = static_cast<double>(z[k]);
            norm_sq += v[k] * v[k];
        }
        const double inv = 1.0 / std::sqrt(norm_sq);
        for (double& x : v) {
            x *= inv;
        }
        dirs.push_back(std::move(v));
    } while (advance());
    return dirs;
}

}  // namespace

NormEstimate brute_force_norm(const DenseTensor& m, std::size_t grid_density,
                              const BruteForceCaps& caps) {
    validate_norm_input(m);
    if (m.rank() > caps.max_rank) {
        throw SizeError("brute_force_norm: rank exceeds cap");
    }
    for (std::size_t e : m.shape()) {
        if (e > caps.max_extent) {
            throw SizeError("brute_force_norm: extent exceeds cap");
        }
    }
    if (grid_density < 1) {
        throw InputError("brute_force_norm: grid_density must be >= 1");
    }

    NormEstimate est;
    est.method = NormEstimate::Method::BruteForce;
    est.converged = true;
    est.is_lower_bound = false;

    const std::size_t r = m.rank();
    if (r == 1) {
        est.value = euclid(m.values());
        return est;
    }

    // Grid over modes 0..r-2; the last mode's maximizer is the normalized
    // residual vector, so its value comes in closed form.
    const std::size_t gridded = r - 1;
    long g = static_cast<long>(grid_density);
    std::vector<std::vector<std::vector<double>>> dirs;
    for (;;) {
        dirs.clear();
        double combos = 1.0;
        for (std::size_t k = 0; k < gridded; ++k) {
            dirs.push_back(lattice_directions(m.extent(k), g));
            combos *= static_cast<double>(dirs.back().size());
        }
        if (combos <= 2.5e6 || g == 1) {
            break;
        }
        --g;
    }

    struct Candidate {
        double value;
        std::vector<std::size_t> pick;
    };
    std::vector<Candidate> top;
    const std::size_t keep = 10;

    std::vector<std::size_t> pick(gridded, 0);
    std::vector<std::vector<double>> vecs(r);
    for (;;) {
        for (std::size_t k = 0; k < gridded; ++k) {
            vecs[k] = dirs[k][pick[k]];
        }
        std::vector<double> tail = contract_except(m, vecs, r - 1);
        const double val = euclid(tail);
        if (top.size() < keep || val > top.back().value) {
            top.push_back({val, pick});
            std::sort(top.begin(), top.end(),
                      [](const Candidate& a, const Candidate& b) { return a.value > b.value; });
            if (top.size() > keep) {
                top.pop_back();
            }
        }
        std::size_t k = gridded;
        for (; k-- > 0;) {
            if (++pick[k] < dirs[k].size()) {
                break;
            }
            pick[k] = 0;
        }
        if (k == static_cast<std::size_t>(-1)) {
            break;
        }
    }

    double best = 0.0;
    for (const auto& cand : top) {
        for (std::size_t k = 0; k < gridded; ++k) {
            vecs[k] = dirs[k][cand.pick[k]];
        }
        std::vector<double> tail = contract_except(m, vecs, r - 1);
        normalize(tail);
        if (euclid(tail) == 0.0) {
            tail.assign(m.extent(r - 1), 0.0);
            tail[0] = 1.0;
        }
        vecs[r - 1] = tail;
        IterationResult refined = alternate_plain(m, vecs, 1e-14, 300);
        best = std::max(best, refined.value);
        est.iterations += refined.iterations;
    }
    est.value = best;
    return est;
}

double norm_expectation(const std::vector<DenseTensor>& samples, const NormOptions& opts) {
    if (samples.empty()) {
        throw InputError("norm_expectation: at least one sample required");
    }
    const auto& shape = samples.front().shape();
    double acc = 0.0;
    for (const auto& s : samples) {
        if (s.shape() != shape) {
            throw InputError("norm_expectation: samples must share one shape");
        }
        const double nv = subordinate_norm(s, opts).value;
        acc += nv * nv;
    }
    const double n_elements = static_cast<double>(samples.front().size());
    return std::sqrt(acc / static_cast<double>(samples.size()) / n_elements);
}

}  // namespace ntkcorr
