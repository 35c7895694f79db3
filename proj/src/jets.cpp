#include "ntkcorr/jets.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>

#include "ntkcorr/errors.hpp"
#include "ntkcorr/rng.hpp"

namespace ntkcorr {

namespace {

// Set partitions of each subset mask, shared across calls. Blocks are
// listed as masks; partitions of the 4-element set number Bell(4) = 15.
const std::vector<std::vector<std::size_t>>& partitions_of(std::size_t mask) {
    static const auto table = [] {
        std::array<std::vector<std::vector<std::size_t>>, 16> t;
        // t[mask] = list of partitions; built recursively on the lowest bit.
        t[0] = {{}};
        for (std::size_t m = 1; m < 16; ++m) {
            const std::size_t low = m & (~m + 1);
            const std::size_t rest = m & ~low;
            // enumerate submasks B of rest; block = low | B
            std::size_t b = rest;
            for (;;) {
                const std::size_t block = low | b;
                for (const auto& sub : t[rest & ~b]) {
                    std::vector<std::size_t> part;
                    part.push_back(block);
                    part.insert(part.end(), sub.begin(), sub.end());
                    t[m].push_back(std::move(part));
                }
                if (b == 0) {
                    break;
                }
                b = (b - 1) & rest;
            }
        }
        return t;
    }();
    return table[mask];
}

struct DirectionViews {
    std::span<const double> weight(const NetworkParams& p, std::size_t dir,
                                   std::size_t layer) const {
        const auto& s = p.layers[layer];
        return {dirs[dir].data() + s.w_offset, s.rows * s.cols};
    }
    std::span<const double> bias(const NetworkParams& p, std::size_t dir,
                                 std::size_t layer) const {
        const auto& s = p.layers[layer];
        return {dirs[dir].data() + s.b_offset, s.bias_len};
    }
    const Directions& dirs;
};

void check_directions(const NetworkParams& params, const Directions& directions, int limit) {
    if (static_cast<int>(directions.size()) > limit) {
        throw UnsupportedOrderError("jets: at most " + std::to_string(limit) +
                                    " directions supported here");
    }
    for (const auto& d : directions) {
        if (d.size() != params.size()) {
            throw InputError("jets: direction length does not match parameter count");
        }
    }
}

// y += W v
void accum_matvec(std::span<const double> w, std::size_t rows, std::size_t cols,
                  std::span<const double> v, std::vector<double>& y) {
    for (std::size_t i = 0; i < rows; ++i) {
        const double* row = w.data() + i * cols;
        double s = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            s += row[j] * v[j];
        }
        y[i] += s;
    }
}

// y += W^T v
void accum_matvec_transposed(std::span<const double> w, std::size_t rows, std::size_t cols,
                             std::span<const double> v, std::vector<double>& y) {
    for (std::size_t i = 0; i < rows; ++i) {
        const double* row = w.data() + i * cols;
        const double vi = v[i];
        for (std::size_t j = 0; j < cols; ++j) {
            y[j] += row[j] * vi;
        }
    }
}

// Activation derivatives per coordinate of a source layer, orders 0..max_order.
std::vector<std::vector<double>> phi_table(const NetworkConfig& config, std::size_t src_layer,
                                           const std::vector<double>& pre, int max_order) {
    std::vector<std::vector<double>> pd(static_cast<std::size_t>(max_order) + 1,
                                        std::vector<double>(pre.size()));
    for (std::size_t j = 0; j < pre.size(); ++j) {
        for (int o = 0; o <= max_order; ++o) {
            pd[static_cast<std::size_t>(o)][j] = phi_deriv(config, src_layer, j, o, pre[j]);
        }
    }
    return pd;
}

struct QuadJetPieces {
    std::vector<double> f;
    std::vector<double> g;
    double theta_dot_g = 0.0;
    std::vector<double> dir_dot_f;  // per direction
    std::vector<double> dir_dot_g;
};

QuadJetPieces quad_pieces(const NetworkConfig& config, const NetworkParams& params,
                          std::span<const double> x, const Directions& directions) {
    const auto& feats = quad_features(config);
    QuadJetPieces q;
    q.f = feats.features(x);
    q.g = QuadPerpFeatures::rotate(q.f);
    for (std::size_t i = 0; i < q.f.size(); ++i) {
        q.theta_dot_g += params.flat[i] * q.g[i];
    }
    q.dir_dot_f.resize(directions.size());
    q.dir_dot_g.resize(directions.size());
    for (std::size_t d = 0; d < directions.size(); ++d) {
        double df = 0.0;
        double dg = 0.0;
        for (std::size_t i = 0; i < q.f.size(); ++i) {
            df += directions[d][i] * q.f[i];
            dg += directions[d][i] * q.g[i];
        }
        q.dir_dot_f[d] = df;
        q.dir_dot_g[d] = dg;
    }
    return q;
}

}  // namespace

JetBundle jet_forward(const NetworkConfig& config, const NetworkParams& params,
                      std::span<const double> x, const Directions& directions) {
    check_directions(params, directions, kMaxJetDirections);
    const int k = static_cast<int>(directions.size());
    const std::size_t n_masks = std::size_t{1} << k;

    JetBundle bundle;
    bundle.k = k;

    if (config.model_kind == ModelKind::QuadraticPerp) {
        const QuadJetPieces q = quad_pieces(config, params, x, directions);
        bundle.coeffs.resize(2);
        bundle.coeffs[0].assign(n_masks, std::vector<double>(x.size(), 0.0));
        bundle.coeffs[0][0].assign(x.begin(), x.end());
        bundle.coeffs[1].assign(n_masks, std::vector<double>(1, 0.0));
        double z = q.theta_dot_g * q.theta_dot_g;
        for (std::size_t i = 0; i < q.f.size(); ++i) {
            z += params.flat[i] * q.f[i];
        }
        bundle.coeffs[1][0][0] = z;
        for (std::size_t mask = 1; mask < n_masks; ++mask) {
            const int bits = std::popcount(mask);
            if (bits == 1) {
                const std::size_t j = static_cast<std::size_t>(std::countr_zero(mask));
                bundle.coeffs[1][mask][0] =
                    q.dir_dot_f[j] + 2.0 * q.theta_dot_g * q.dir_dot_g[j];
            } else if (bits == 2) {
                const std::size_t j = static_cast<std::size_t>(std::countr_zero(mask));
                const std::size_t j2 =
                    static_cast<std::size_t>(std::countr_zero(mask & (mask - 1)));
                bundle.coeffs[1][mask][0] = 2.0 * q.dir_dot_g[j] * q.dir_dot_g[j2];
            }
            // third and higher mixed partials of the quadratic form vanish
        }
        return bundle;
    }

    if (x.size() != static_cast<std::size_t>(config.input_dim)) {
        throw InputError("jet_forward: input length does not match input_dim");
    }
    const std::size_t L = params.layers.size();
    const DirectionViews dv{directions};

    bundle.coeffs.resize(L + 1);
    bundle.coeffs[0].assign(n_masks, std::vector<double>(x.size(), 0.0));
    bundle.coeffs[0][0].assign(x.begin(), x.end());

    std::vector<std::vector<double>> a(n_masks);
    for (std::size_t l = 0; l < L; ++l) {
        const auto& shape = params.layers[l];
        const auto& prev = bundle.coeffs[l];
        const auto pd = phi_table(config, l, prev[0], k);

        // Activation coefficients over the subset lattice (multivariate
        // Faa di Bruno with one order per direction).
        for (std::size_t mask = 0; mask < n_masks; ++mask) {
            a[mask].assign(shape.cols, 0.0);
            if (mask == 0) {
                a[0] = pd[0];
                continue;
            }
            for (const auto& part : partitions_of(mask)) {
                const auto& slope = pd[part.size()];
                for (std::size_t j = 0; j < shape.cols; ++j) {
                    double term = slope[j];
                    for (std::size_t block : part) {
                        term *= prev[block][j];
                    }
                    a[mask][j] += term;
                }
            }
        }

        auto& out = bundle.coeffs[l + 1];
        out.assign(n_masks, std::vector<double>(shape.rows, 0.0));
        const auto w = params.weight(l);
        const auto b = params.bias(l);
        for (std::size_t mask = 0; mask < n_masks; ++mask) {
            accum_matvec(w, shape.rows, shape.cols, a[mask], out[mask]);
            if (mask == 0) {
                for (std::size_t i = 0; i < shape.rows; ++i) {
                    out[0][i] += b[i];
                }
            }
            for (int j = 0; j < k; ++j) {
                const std::size_t bit = std::size_t{1} << j;
                if ((mask & bit) == 0) {
                    continue;
                }
                accum_matvec(dv.weight(params, static_cast<std::size_t>(j), l), shape.rows,
                             shape.cols, a[mask & ~bit], out[mask]);
                if (mask == bit) {
                    const auto vb = dv.bias(params, static_cast<std::size_t>(j), l);
                    for (std::size_t i = 0; i < vb.size(); ++i) {
                        out[mask][i] += vb[i];
                    }
                }
            }
        }
    }
    return bundle;
}

std::vector<double> jet_adjoint(const NetworkConfig& config, const NetworkParams& params,
                                std::span<const double> x, const Directions& directions,
                                int output_index) {
    // The reverse sweep differentiates phi^[|partition|] once more, so the
    // direction count stays one below the forward cap.
    check_directions(params, directions, kMaxJetDirections - 1);
    const int k = static_cast<int>(directions.size());
    const std::size_t n_masks = std::size_t{1} << k;

    std::vector<double> grad(params.size(), 0.0);

    if (config.model_kind == ModelKind::QuadraticPerp) {
        const QuadJetPieces q = quad_pieces(config, params, x, directions);
        if (k == 0) {
            for (std::size_t i = 0; i < q.f.size(); ++i) {
                grad[i] = q.f[i] + 2.0 * q.theta_dot_g * q.g[i];
            }
        } else if (k == 1) {
            for (std::size_t i = 0; i < q.f.size(); ++i) {
                grad[i] = 2.0 * q.dir_dot_g[0] * q.g[i];
            }
        }
        // k >= 2: third derivatives of the quadratic model vanish
        return grad;
    }

    const JetBundle bundle = jet_forward(config, params, x, directions);
    const std::size_t L = params.layers.size();
    if (output_index < 0 ||
        static_cast<std::size_t>(output_index) >= bundle.coeffs[L][0].size()) {
        throw InputError("jet_adjoint: output index out of range");
    }
    const DirectionViews dv{directions};

    // Adjoints with respect to the preactivation coefficients of the
    // current layer, seeded at the top mixed coefficient.
    std::vector<std::vector<double>> lam(n_masks);
    for (std::size_t mask = 0; mask < n_masks; ++mask) {
        lam[mask].assign(bundle.coeffs[L][0].size(), 0.0);
    }
    lam[bundle.full_mask()][static_cast<std::size_t>(output_index)] = 1.0;

    std::vector<std::vector<double>> adj_a(n_masks);
    std::vector<std::vector<double>> lam_prev(n_masks);
    std::vector<std::vector<double>> a(n_masks);

    for (std::size_t l = L; l-- > 0;) {
        const auto& shape = params.layers[l];
        const auto& prev = bundle.coeffs[l];
        const auto pd = phi_table(config, l, prev[0], k + 1);

        // Rebuild this layer's activation coefficients (cheap relative to
        // storing them for every layer).
        for (std::size_t mask = 0; mask < n_masks; ++mask) {
            a[mask].assign(shape.cols, 0.0);
            if (mask == 0) {
                a[0] = pd[0];
                continue;
            }
            for (const auto& part : partitions_of(mask)) {
                const auto& slope = pd[part.size()];
                for (std::size_t j = 0; j < shape.cols; ++j) {
                    double term = slope[j];
                    for (std::size_t block : part) {
                        term *= prev[block][j];
                    }
                    a[mask][j] += term;
                }
            }
        }

        // Affine step adjoints: parameter blocks and activation coefficients.
        double* gw = grad.data() + shape.w_offset;
        double* gb = grad.data() + shape.b_offset;
        for (std::size_t mask = 0; mask < n_masks; ++mask) {
            adj_a[mask].assign(shape.cols, 0.0);
        }
        for (std::size_t mask = 0; mask < n_masks; ++mask) {
            const auto& l_mask = lam[mask];
            for (std::size_t i = 0; i < shape.rows; ++i) {
                const double li = l_mask[i];
                if (li == 0.0) {
                    continue;
                }
                double* wrow = gw + i * shape.cols;
                const auto& am = a[mask];
                for (std::size_t j = 0; j < shape.cols; ++j) {
                    wrow[j] += li * am[j];
                }
            }
            if (mask == 0) {
                for (std::size_t i = 0; i < shape.bias_len; ++i) {
                    gb[i] += l_mask[i];
                }
            }
            accum_matvec_transposed(params.weight(l), shape.rows, shape.cols, l_mask,
                                    adj_a[mask]);
            for (int j = 0; j < k; ++j) {
                const std::size_t bit = std::size_t{1} << j;
                if ((mask & bit) == 0) {
                    continue;
                }
                accum_matvec_transposed(dv.weight(params, static_cast<std::size_t>(j), l),
                                        shape.rows, shape.cols, l_mask, adj_a[mask & ~bit]);
            }
        }

        // Faa di Bruno adjoints back to the previous layer's coefficients.
        for (std::size_t mask = 0; mask < n_masks; ++mask) {
            lam_prev[mask].assign(shape.cols, 0.0);
        }
        for (std::size_t j = 0; j < shape.cols; ++j) {
            lam_prev[0][j] += adj_a[0][j] * pd[1][j];
        }
        for (std::size_t mask = 1; mask < n_masks; ++mask) {
            const auto& mu = adj_a[mask];
            for (const auto& part : partitions_of(mask)) {
                const auto& slope = pd[part.size()];
                const auto& slope_next = pd[part.size() + 1];
                for (std::size_t j = 0; j < shape.cols; ++j) {
                    const double mj = mu[j];
                    if (mj == 0.0) {
                        continue;
                    }
                    double prod_all = 1.0;
                    for (std::size_t block : part) {
                        prod_all *= prev[block][j];
                    }
                    // d/d c_0 of phi^[p](c_0): one order higher
                    lam_prev[0][j] += mj * slope_next[j] * prod_all;
                    for (std::size_t block : part) {
                        double prod_rest = slope[j];
                        for (std::size_t other : part) {
                            if (other != block) {
                                prod_rest *= prev[other][j];
                            }
                        }
                        lam_prev[block][j] += mj * prod_rest;
                    }
                }
            }
        }
        lam.swap(lam_prev);
    }
    return grad;
}

std::vector<double> gradient(const NetworkConfig& config, const NetworkParams& params,
                             std::span<const double> x, int output_index) {
    if (config.model_kind == ModelKind::QuadraticPerp) {
        if (output_index != 0) {
            throw InputError("gradient: quadratic model has one output");
        }
        return jet_adjoint(config, params, x, {}, 0);
    }
    if (output_index < 0 || output_index >= config.output_dim) {
        throw InputError("gradient: output index out of range");
    }
    const auto acts = forward_layers(config, params, x);
    const std::size_t L = params.layers.size();

    std::vector<double> grad(params.size(), 0.0);
    std::vector<double> delta(acts[L].size(), 0.0);
    delta[static_cast<std::size_t>(output_index)] = 1.0;

    std::vector<double> post;
    std::vector<double> delta_prev;
    for (std::size_t l = L; l-- > 0;) {
        const auto& shape = params.layers[l];
        post.resize(shape.cols);
        for (std::size_t j = 0; j < shape.cols; ++j) {
            post[j] = phi_value(config, l, j, acts[l][j]);
        }
        double* gw = grad.data() + shape.w_offset;
        double* gb = grad.data() + shape.b_offset;
        for (std::size_t i = 0; i < shape.rows; ++i) {
            const double di = delta[i];
            gb[i] += di;
            if (di == 0.0) {
                continue;
            }
            double* row = gw + i * shape.cols;
            for (std::size_t j = 0; j < shape.cols; ++j) {
                row[j] += di * post[j];
            }
        }
        if (l == 0) {
            break;
        }
        delta_prev.assign(shape.cols, 0.0);
        const auto w = params.weight(l);
        for (std::size_t i = 0; i < shape.rows; ++i) {
            const double di = delta[i];
            if (di == 0.0) {
                continue;
            }
            const double* row = w.data() + i * shape.cols;
            for (std::size_t j = 0; j < shape.cols; ++j) {
                delta_prev[j] += row[j] * di;
            }
        }
        for (std::size_t j = 0; j < shape.cols; ++j) {
            delta_prev[j] *= phi_deriv(config, l, j, 1, acts[l][j]);
        }
        delta.swap(delta_prev);
    }
    return grad;
}

std::vector<double> kernel_eval(const NetworkConfig& config, const NetworkParams& params,
                                std::span<const double> x, std::span<const double> x2,
                                double eta) {
    const int dy = config.model_kind == ModelKind::QuadraticPerp ? 1 : config.output_dim;
    std::vector<std::vector<double>> gx(static_cast<std::size_t>(dy));
    std::vector<std::vector<double>> gx2(static_cast<std::size_t>(dy));
    for (int i = 0; i < dy; ++i) {
        gx[static_cast<std::size_t>(i)] = gradient(config, params, x, i);
        gx2[static_cast<std::size_t>(i)] = gradient(config, params, x2, i);
    }
    std::vector<double> theta(static_cast<std::size_t>(dy * dy), 0.0);
    for (int i = 0; i < dy; ++i) {
        for (int j = 0; j < dy; ++j) {
            double s = 0.0;
            const auto& a = gx[static_cast<std::size_t>(i)];
            const auto& b = gx2[static_cast<std::size_t>(j)];
            for (std::size_t t = 0; t < a.size(); ++t) {
                s += a[t] * b[t];
            }
            theta[static_cast<std::size_t>(i * dy + j)] = eta * s;
        }
    }
    return theta;
}

std::vector<double> kernel_layerwise(const NetworkConfig& config, const NetworkParams& params,
                                     std::span<const double> x, std::span<const double> x2,
                                     double eta) {
    if (config.model_kind == ModelKind::QuadraticPerp) {
        throw UnsupportedOrderError("kernel_layerwise: FCNN-family models only");
    }
    const auto acts_a = forward_layers(config, params, x);
    const auto acts_b = forward_layers(config, params, x2);
    const std::size_t L = params.layers.size();

    // K holds Theta_(l) between every pair of layer-l coordinates.
    std::vector<double> kmat;
    std::size_t dim = 0;
    for (std::size_t l = 0; l < L; ++l) {
        const auto& shape = params.layers[l];

        // own-parameter contribution: eta * (phi(a) . phi(b) + 1) on the diagonal
        double own = 1.0;  // bias path
        for (std::size_t j = 0; j < shape.cols; ++j) {
            own += phi_value(config, l, j, acts_a[l][j]) * phi_value(config, l, j, acts_b[l][j]);
        }
        own *= eta;

        if (l == 0) {
            dim = shape.rows;
            kmat.assign(dim * dim, 0.0);
            for (std::size_t i = 0; i < dim; ++i) {
                kmat[i * dim + i] = own;
            }
            continue;
        }

        // sandwich: T_a K T_b^T with T_x = W diag(phi'(acts_x))
        const auto w = params.weight(l);
        std::vector<double> slope_a(shape.cols);
        std::vector<double> slope_b(shape.cols);
        for (std::size_t j = 0; j < shape.cols; ++j) {
            slope_a[j] = phi_deriv(config, l, j, 1, acts_a[l][j]);
            slope_b[j] = phi_deriv(config, l, j, 1, acts_b[l][j]);
        }
        std::vector<double> tmp(shape.rows * dim, 0.0);  // T_a K
        for (std::size_t i = 0; i < shape.rows; ++i) {
            const double* row = w.data() + i * shape.cols;
            for (std::size_t j = 0; j < shape.cols; ++j) {
                const double tij = row[j] * slope_a[j];
                if (tij == 0.0) {
                    continue;
                }
                const double* krow = kmat.data() + j * dim;
                double* trow = tmp.data() + i * dim;
                for (std::size_t q = 0; q < dim; ++q) {
                    trow[q] += tij * krow[q];
                }
            }
        }
        std::vector<double> next(shape.rows * shape.rows, 0.0);
        for (std::size_t i = 0; i < shape.rows; ++i) {
            for (std::size_t p = 0; p < shape.rows; ++p) {
                const double* trow = tmp.data() + i * dim;
                const double* row = w.data() + p * shape.cols;
                double s = 0.0;
                for (std::size_t j = 0; j < shape.cols; ++j) {
                    s += trow[j] * row[j] * slope_b[j];
                }
                next[i * shape.rows + p] = s;
            }
        }
        for (std::size_t i = 0; i < shape.rows; ++i) {
            next[i * shape.rows + i] += own;
        }
        kmat.swap(next);
        dim = shape.rows;
    }
    return kmat;
}

double CorrelationResult::magnitude() const {
    if (D == 0) {
        return std::fabs(value);
    }
    if (D == 1) {
        double s = 0.0;
        for (double v : vector_value) {
            s += v * v;
        }
        return std::sqrt(s);
    }
    return norm.value;
}

namespace {

double factorial(int n) {
    double f = 1.0;
    for (int i = 2; i <= n; ++i) {
        f *= i;
    }
    return f;
}

void validate_correlation_spec(const NetworkConfig& config, const CorrelationSpec& spec) {
    if (spec.d < 1) {
        throw InputError("correlation: d must be >= 1");
    }
    if (spec.D + spec.d > 4) {
        throw UnsupportedOrderError("correlation: D + d <= 4 supported");
    }
    if (spec.inputs.size() != static_cast<std::size_t>(spec.d) + 1 ||
        spec.output_indices.size() != static_cast<std::size_t>(spec.d) + 1) {
        throw InputError("correlation: need x_0..x_d and i_0..i_d");
    }
    const int dy = config.model_kind == ModelKind::QuadraticPerp ? 1 : config.output_dim;
    for (int idx : spec.output_indices) {
        if (idx < 0 || idx >= dy) {
            throw InputError("correlation: output index out of range");
        }
    }
}

Directions gradient_directions(const NetworkConfig& config, const NetworkParams& params,
                               const CorrelationSpec& spec) {
    Directions dirs;
    for (int a = 1; a <= spec.d; ++a) {
        dirs.push_back(gradient(config, params, spec.inputs[static_cast<std::size_t>(a)],
                                spec.output_indices[static_cast<std::size_t>(a)]));
    }
    return dirs;
}

}  // namespace

CorrelationResult correlation(const NetworkConfig& config, const NetworkParams& params,
                              const CorrelationSpec& spec, double eta) {
    validate_correlation_spec(config, spec);
    if (spec.D < 0 || spec.D > 1) {
        throw UnsupportedOrderError(
            "correlation: D in {0,1}; use correlation_norm_hopm for D = 2");
    }
    CorrelationResult res;
    res.D = spec.D;
    res.d = spec.d;
    res.eta = eta;
    res.inputs = spec.inputs;
    res.output_indices = spec.output_indices;

    const Directions dirs = gradient_directions(config, params, spec);
    const double prefactor = std::pow(eta, 0.5 * spec.D + spec.d) /
                             (factorial(spec.D) * factorial(spec.d));
    if (spec.D == 0) {
        const JetBundle bundle = jet_forward(config, params, spec.inputs[0], dirs);
        res.value =
            prefactor * bundle.top()[static_cast<std::size_t>(spec.output_indices[0])];
    } else {
        res.vector_value =
            jet_adjoint(config, params, spec.inputs[0], dirs, spec.output_indices[0]);
        for (double& v : res.vector_value) {
            v *= prefactor;
        }
    }
    return res;
}

CorrelationResult correlation_norm_hopm(const NetworkConfig& config, const NetworkParams& params,
                                        const CorrelationSpec& spec, double eta,
                                        const HopmOptions& opts) {
    validate_correlation_spec(config, spec);
    if (spec.D != 2) {
        throw UnsupportedOrderError("correlation_norm_hopm: D = 2 only");
    }
    CorrelationResult res;
    res.D = 2;
    res.d = spec.d;
    res.eta = eta;
    res.inputs = spec.inputs;
    res.output_indices = spec.output_indices;

    const Directions base = gradient_directions(config, params, spec);
    const double prefactor =
        std::pow(eta, 1.0 + spec.d) / (2.0 * factorial(spec.d));

    // The free-index object is symmetric in its two parameter modes, so
    // plain power iteration on the matvec converges to the dominant
    // |eigenvalue| = subordinate norm.
    auto matvec = [&](const std::vector<double>& v) {
        Directions dirs = base;
        dirs.push_back(v);
        return jet_adjoint(config, params, spec.inputs[0], dirs, spec.output_indices[0]);
    };

    NormEstimate est;
    est.method = NormEstimate::Method::PowerIteration;
    est.is_lower_bound = true;
    est.restarts = opts.restarts;

    double best = 0.0;
    bool any_converged = false;
    int total_iters = 0;
    for (int r = 0; r < opts.restarts; ++r) {
        Rng rng(mix_seed({opts.seed, static_cast<std::uint64_t>(r)}));
        std::vector<double> v = rng.unit_sphere(params.size());
        double prev = -1.0;
        for (int it = 0; it < opts.max_iters; ++it) {
            std::vector<double> w = matvec(v);
            double nw = 0.0;
            for (double t : w) {
                nw += t * t;
            }
            nw = std::sqrt(nw);
            ++total_iters;
            if (nw == 0.0) {
                best = std::max(best, 0.0);
                any_converged = true;
                break;
            }
            for (std::size_t i = 0; i < w.size(); ++i) {
                w[i] /= nw;
            }
            v.swap(w);
            if (prev >= 0.0 && std::fabs(nw - prev) <= opts.tol * std::max(1.0, nw)) {
                best = std::max(best, nw);
                any_converged = true;
                break;
            }
            prev = nw;
            best = std::max(best, nw);
        }
    }
    est.value = prefactor * best;
    est.iterations = total_iters;
    est.converged = any_converged;
    res.norm = est;
    return res;
}

std::vector<double> finite_difference_mixed(const NetworkConfig& config,
                                            const NetworkParams& params, std::span<const double> x,
                                            const Directions& directions, double step) {
    if (directions.size() > 3) {
        throw UnsupportedOrderError("finite_difference_mixed: order <= 3");
    }
    if (step <= 0.0) {
        throw InputError("finite_difference_mixed: step must be positive");
    }
    check_directions(params, directions, 3);
    const int k = static_cast<int>(directions.size());

    auto polarized = [&](double h) {
        const std::size_t combos = std::size_t{1} << k;
        std::vector<double> acc;
        NetworkParams shifted = params;
        for (std::size_t c = 0; c < combos; ++c) {
            shifted.flat = params.flat;
            double sign = 1.0;
            for (int j = 0; j < k; ++j) {
                const double s = (c >> j) & 1 ? 1.0 : -1.0;
                sign *= s;
                const auto& dir = directions[static_cast<std::size_t>(j)];
                for (std::size_t t = 0; t < shifted.flat.size(); ++t) {
                    shifted.flat[t] += s * h * dir[t];
                }
            }
            const std::vector<double> out = forward(config, shifted, x);
            if (acc.empty()) {
                acc.assign(out.size(), 0.0);
            }
            for (std::size_t i = 0; i < out.size(); ++i) {
                acc[i] += sign * out[i];
            }
        }
        const double denom = std::pow(2.0 * h, k);
        for (double& v : acc) {
            v /= denom;
        }
        return acc;
    };

    const std::vector<double> coarse = polarized(step);
    const std::vector<double> fine = polarized(step / 2.0);
    std::vector<double> out(coarse.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = (4.0 * fine[i] - coarse[i]) / 3.0;
    }
    return out;
}

}  // namespace ntkcorr
