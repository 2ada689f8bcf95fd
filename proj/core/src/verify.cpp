#include "s3/verify.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>

#include "s3/analysis.hpp"
#include "s3/errors.hpp"
#include "s3/rng.hpp"

namespace s3 {

namespace {

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
    char buf[160];
    std::snprintf(buf, sizeof buf, f, a, b, c);
    return buf;
}

std::vector<double> random_dist(std::size_t n, Rng& rng, bool allow_zero) {
    std::vector<double> p(n);
    double total = 0.0;
    for (double& v : p) {
        v = rng.uniform();
        if (allow_zero && rng.uniform() < 0.15) v = 0.0;
        total += v;
    }
    if (total == 0.0) {
        p[0] = 1.0;
        total = 1.0;
    }
    for (double& v : p) v /= total;
    return p;
}

std::vector<std::vector<float>> random_unit_table(std::size_t n, std::size_t d, Rng& rng) {
    std::vector<std::vector<float>> t(n, std::vector<float>(d));
    for (auto& row : t) {
        double norm = 0.0;
        for (float& x : row) {
            x = static_cast<float>(rng.normal());
            norm += static_cast<double>(x) * x;
        }
        for (float& x : row) x = static_cast<float>(x / std::sqrt(norm));
    }
    return t;
}

template <class F>
CheckResult timed(const char* name, F&& body) {
    const auto t0 = std::chrono::steady_clock::now();
    CheckResult r;
    r.name = name;
    try {
        body(r);
    } catch (const std::exception& e) {
        r.passed = false;
        r.detail = std::string("threw: ") + e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

}  // namespace

CheckResult check_dpi(std::uint64_t seed) {
    return timed("dpi", [&](CheckResult& r) {
        Rng rng(seed);
        std::size_t ok = 0;
        double worst = 1e300;
        for (int trial = 0; trial < 200; ++trial) {
            const std::size_t ny = 2 + rng.uniform_int(3), nx = 2 + rng.uniform_int(4), nz = 1 + rng.uniform_int(4);
            const auto flat = random_dist(ny * nx, rng, true);
            std::vector<std::vector<double>> p_yx(ny, std::vector<double>(nx));
            for (std::size_t y = 0; y < ny; ++y)
                for (std::size_t x = 0; x < nx; ++x) p_yx[y][x] = flat[y * nx + x];
            std::vector<std::vector<double>> ch(nx);
            for (auto& row : ch) row = random_dist(nz, rng, false);
            const DpiReport d = verify_dpi(p_yx, ch);
            ok += d.holds && d.i_xy >= d.i_zy - 1e-9;
            worst = std::min(worst, d.i_xy - d.i_zy);
        }
        // Z = X must be flagged as equality.
        std::vector<std::vector<double>> p_yx = {{0.3, 0.1, 0.1}, {0.05, 0.2, 0.25}};
        std::vector<std::vector<double>> id = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
        const bool equality = verify_dpi(p_yx, id).equality;
        // Z = Y with X independent breaks the chain.
        std::vector<double> p(8, 0.0);
        for (std::size_t y = 0; y < 2; ++y)
            for (std::size_t x = 0; x < 2; ++x) p[(y * 2 + x) * 2 + y] = 0.25;
        bool rejected = false;
        try {
            verify_dpi(DiscreteJoint({2, 2, 2}, p));
        } catch (const PreconditionError&) {
            rejected = true;
        }
        r.passed = ok == 200 && equality && rejected;
        r.detail = fmt("%.0f/200 joints hold, min I(X;Y)-I(Z;Y) = %.3g, ", static_cast<double>(ok), worst) +
                   (equality ? "Z=X equality flagged" : "Z=X equality NOT flagged") +
                   (rejected ? ", non-Markov rejected" : ", non-Markov accepted");
    });
}

CheckResult check_mi_exact() {
    return timed("mi_decomposition_exact", [&](CheckResult& r) {
        std::vector<FactorSpec> specs{FactorSpec::uniform(4, 3, 5), FactorSpec::uniform(4, 2, 2),
                                      FactorSpec::uniform(1, 3, 3), FactorSpec::uniform(6, 1, 4)};
        specs[1].p_shared = {0.7, 0.1, 0.1, 0.1};
        specs[3].p_shared = {0.05, 0.15, 0.3, 0.2, 0.1, 0.2};
        double worst = 0.0;
        for (const auto& s : specs) {
            // H(X_S) straight from its distribution.
            double h = 0.0;
            for (double p : s.p_shared)
                if (p > 0) h -= p * std::log(p);
            const auto rep = verify_mi_decomposition(s, 10, 0);
            worst = std::max(worst, std::abs(rep.exact_mi - h));
        }
        r.passed = worst <= 1e-9;
        r.detail = fmt("max |I(X1;X2) - H(X_S)| = %.3g over 4 specs (tol 1e-9)", worst);
    });
}

CheckResult check_mi_plugin(std::uint64_t seed) {
    return timed("mi_decomposition_plugin", [&](CheckResult& r) {
        FactorSpec skew = FactorSpec::uniform(4, 3, 3);
        skew.p_shared = {0.4, 0.3, 0.2, 0.1};
        double worst = 0.0;
        for (const auto& s : {FactorSpec::uniform(4, 3, 5), skew}) {
            const auto rep = verify_mi_decomposition(s, 100000, seed);
            worst = std::max(worst, std::abs(rep.plugin_mi - rep.h_shared));
        }
        r.passed = worst <= 0.05;
        r.detail = fmt("max |plug-in - H(X_S)| = %.4f nat at 1e5 samples (tol 0.05)", worst);
    });
}

CheckResult check_cl_gap_xor() {
    return timed("cl_gap_xor", [&](CheckResult& r) {
        const auto rep = verify_cl_limitation(FactorSpec::uniform(4, 2, 2), {TaskMode::kUniqueOnly, 2});
        const double ln2 = std::log(2.0);
        r.passed = rep.holds && std::abs(rep.gap - ln2) <= 1e-12 && std::abs(rep.gap - rep.i_uy) <= 1e-12;
        r.detail = fmt("gap = %.12f, I(X_U;Y) = %.12f, ln 2 = %.12f", rep.gap, rep.i_uy, ln2);
    });
}

CheckResult check_cl_gap_mixed() {
    return timed("cl_gap_mixed", [&](CheckResult& r) {
        FactorSpec skew = FactorSpec::uniform(4, 4, 4);
        skew.p_unique[0] = {0.7, 0.1, 0.1, 0.1};
        const auto rep = verify_cl_limitation(skew, {TaskMode::kMixed, 4});
        r.passed = rep.holds && rep.gap > 0.0 && rep.gap < rep.i_xy;
        r.detail = fmt("I(X;Y) = %.4f, I(X_S;Y) = %.4f, gap = %.4f", rep.i_xy, rep.i_zy, rep.gap);
    });
}

CheckResult check_infonce_bound(std::uint64_t seed) {
    return timed("infonce_bound", [&](CheckResult& r) {
        Rng rng(seed);
        std::vector<BoundStats> stats;
        // A bijection with an aligned critic.
        {
            std::vector<double> p(64, 0.0);
            for (std::size_t x = 0; x < 8; ++x) p[x * 8 + (x * 3 + 1) % 8] = 1.0 / 8;
            const auto g = random_unit_table(8, 8, rng);
            std::vector<std::vector<float>> h(8);
            for (std::size_t x = 0; x < 8; ++x) h[(x * 3 + 1) % 8] = g[x];
            stats.push_back(bound_gap_infonce(DiscreteJoint({8, 8}, p), g, h, 0.1f, 64, 100, seed + 1));
        }
        // A noisy diagonal with an aligned critic.
        {
            std::vector<double> p(25);
            for (std::size_t x = 0; x < 5; ++x)
                for (std::size_t z = 0; z < 5; ++z) p[x * 5 + z] = (x == z ? 0.6 : 0.1) / 5.0;
            const auto g = random_unit_table(5, 8, rng);
            stats.push_back(bound_gap_infonce(DiscreteJoint({5, 5}, p), g, g, 0.2f, 64, 100, seed + 2));
        }
        // A random joint with a random critic.
        {
            DiscreteJoint j({6, 6}, random_dist(36, rng, true));
            const auto g = random_unit_table(6, 8, rng);
            const auto h = random_unit_table(6, 8, rng);
            stats.push_back(bound_gap_infonce(j, g, h, 0.2f, 64, 100, seed + 3));
        }
        r.passed = true;
        r.detail.clear();
        for (const auto& s : stats) {
            r.passed = r.passed && s.holds && s.n_batches >= 100;
            r.detail += fmt("[max %.3f <= I %.3f + 0.1] ", s.max_estimate, s.exact_mi);
        }
    });
}

CheckResult check_supcon_bound(std::uint64_t seed) {
    return timed("supcon_bound", [&](CheckResult& r) {
        Rng rng(seed + 100);
        std::vector<BoundStats> stats;
        {
            std::vector<double> p(12, 1.0 / 12);
            const auto emb = random_unit_table(4, 8, rng);
            stats.push_back(bound_gap_supcon(DiscreteJoint({3, 4}, p), emb, 0.1f, 64, 100, seed + 4));
        }
        const auto centroids = random_unit_table(3, 8, rng);
        std::vector<std::vector<float>> emb(6, std::vector<float>(8));
        for (std::size_t c = 0; c < 6; ++c)
            for (std::size_t j = 0; j < 8; ++j) emb[c][j] = centroids[c / 2][j] + 0.1f * static_cast<float>(rng.normal());
        for (double leak : {0.0, 0.025}) {
            std::vector<double> p(18, 0.0);
            for (std::size_t y = 0; y < 3; ++y)
                for (std::size_t c = 0; c < 6; ++c) p[y * 6 + c] = (c / 2 == y ? 0.5 - 2 * leak : leak) / 3.0;
            stats.push_back(bound_gap_supcon(DiscreteJoint({3, 6}, p), emb, 0.1f, 128, 100, seed + 5));
        }
        r.passed = true;
        r.detail.clear();
        for (const auto& s : stats) {
            r.passed = r.passed && s.holds && s.n_batches >= 100;
            r.detail += fmt("[max %.3f <= I %.3f + 0.15] ", s.max_estimate, s.exact_mi);
        }
    });
}

CheckResult check_chain_rule(std::uint64_t seed) {
    return timed("entropy_chain_rule", [&](CheckResult& r) {
        Rng rng(seed + 200);
        double worst = 0.0;
        for (int trial = 0; trial < 50; ++trial) {
            const std::size_t na = 2 + rng.uniform_int(4), nb = 2 + rng.uniform_int(4);
            DiscreteJoint j({na, nb}, random_dist(na * nb, rng, true));
            const auto pa = j.marginal({0});
            // H(B|A) summed row by row.
            double h_b_given_a = 0.0;
            for (std::size_t a = 0; a < na; ++a) {
                if (pa[a] <= 0) continue;
                std::vector<double> row(nb);
                for (std::size_t b = 0; b < nb; ++b) row[b] = j.probs()[a * nb + b] / pa[a];
                h_b_given_a += pa[a] * entropy(row);
            }
            worst = std::max(worst, std::abs(entropy(j, {0, 1}) - entropy(pa) - h_b_given_a));
        }
        r.passed = worst <= 1e-12;
        r.detail = fmt("max |H(A,B) - H(A) - H(B|A)| = %.3g over 50 tables", worst);
    });
}

std::vector<CheckResult> analysis_checks(std::uint64_t seed) {
    return {check_dpi(seed),           check_mi_exact(),          check_mi_plugin(seed),
            check_cl_gap_xor(),        check_cl_gap_mixed(),      check_infonce_bound(seed),
            check_supcon_bound(seed),  check_chain_rule(seed)};
}

}  // namespace s3
