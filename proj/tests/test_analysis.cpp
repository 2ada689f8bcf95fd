#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "s3/analysis.hpp"
#include "s3/errors.hpp"
#include "s3/losses.hpp"
#include "s3/ops.hpp"
#include "s3/rng.hpp"
#include "s3/verify.hpp"

using namespace s3;
namespace fs = std::filesystem;

namespace {

std::vector<double> random_dist(std::size_t n, Rng& rng, bool allow_zero = true) {
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

// Direct double sum over a 2-D table.
double brute_mi(const std::vector<std::vector<double>>& p) {
    std::vector<double> pa(p.size(), 0.0), pb(p[0].size(), 0.0);
    for (std::size_t i = 0; i < p.size(); ++i)
        for (std::size_t j = 0; j < p[0].size(); ++j) {
            pa[i] += p[i][j];
            pb[j] += p[i][j];
        }
    double mi = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i)
        for (std::size_t j = 0; j < p[0].size(); ++j)
            if (p[i][j] > 0) mi += p[i][j] * std::log(p[i][j] / (pa[i] * pb[j]));
    return mi;
}

std::vector<std::vector<float>> random_unit_table(std::size_t n, std::size_t d, Rng& rng) {
    std::vector<std::vector<float>> t(n, std::vector<float>(d));
    for (auto& row : t) {
        double norm = 0.0;
        for (float& x : row) {
            x = static_cast<float>(rng.normal());
            norm += x * x;
        }
        for (float& x : row) x = static_cast<float>(x / std::sqrt(norm));
    }
    return t;
}

std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
}

}  // namespace

TEST(Entropy, UniformAndIndependent) {
    EXPECT_NEAR(entropy({0.25, 0.25, 0.25, 0.25}), std::log(4.0), 1e-12);
    DiscreteJoint indep({2, 3}, {0.1, 0.2, 0.2, 0.1, 0.2, 0.2});
    EXPECT_NEAR(mutual_information(indep, {0}, {1}), 0.0, 1e-12);
}

TEST(Entropy, TwoByTwoMatchesDirectSum) {
    DiscreteJoint j({2, 2}, {0.4, 0.1, 0.1, 0.4});
    EXPECT_NEAR(mutual_information(j, {0}, {1}), brute_mi({{0.4, 0.1}, {0.1, 0.4}}), 1e-12);
    EXPECT_NEAR(mutual_information(j, {0}, {1}), 0.8 * std::log(1.6) + 0.2 * std::log(0.4), 1e-12);
}

TEST(Entropy, InvalidJointRejected) {
    EXPECT_THROW(DiscreteJoint({2}, {0.5, 0.6}), ArgumentError);
    EXPECT_THROW(DiscreteJoint({2}, {1.5, -0.5}), ArgumentError);
    EXPECT_THROW(DiscreteJoint({2, 2}, {1.0}), DimensionError);
}

TEST(Entropy, ChainRuleOnRandomTables) {
    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        DiscreteJoint j({2, 3, 4}, random_dist(24, rng));
        const double lhs = mutual_information(j, {0}, {1, 2});
        const double rhs = mutual_information(j, {0}, {1}) + conditional_mi(j, {0}, {2}, {1});
        EXPECT_NEAR(lhs, rhs, 1e-9);
    }
}

TEST(Entropy, EmpiricalJointMatchesCounts) {
    DiscreteJoint j = DiscreteJoint::empirical({2, 2}, {{0, 0}, {0, 0}, {1, 1}, {0, 1}});
    EXPECT_NEAR(j.probs()[0], 0.5, 1e-12);
    EXPECT_NEAR(j.probs()[1], 0.25, 1e-12);
    EXPECT_NEAR(j.probs()[3], 0.25, 1e-12);
    EXPECT_NEAR(plugin_mi({0, 0, 1, 1}, {1, 1, 0, 0}), std::log(2.0), 1e-12);
}

TEST(Dpi, IdentityIsEquality) {
    std::vector<std::vector<double>> p_yx = {{0.3, 0.1, 0.1}, {0.05, 0.2, 0.25}};
    std::vector<std::vector<double>> id = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
    const DpiReport r = verify_dpi(p_yx, id);
    EXPECT_TRUE(r.holds);
    EXPECT_TRUE(r.equality);
    EXPECT_GT(r.i_xy, 0.0);
}

TEST(Dpi, ConstantChannelGivesZero) {
    std::vector<std::vector<double>> p_yx = {{0.3, 0.1, 0.1}, {0.05, 0.2, 0.25}};
    std::vector<std::vector<double>> constant = {{1, 0}, {1, 0}, {1, 0}};
    const DpiReport r = verify_dpi(p_yx, constant);
    EXPECT_NEAR(r.i_zy, 0.0, 1e-12);
    EXPECT_TRUE(r.holds);
    EXPECT_FALSE(r.equality);
}

TEST(Dpi, RandomJointsSatisfyInequality) {
    Rng rng(2);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t ny = 2 + rng.uniform_int(3), nx = 2 + rng.uniform_int(4), nz = 1 + rng.uniform_int(4);
        const auto flat = random_dist(ny * nx, rng);
        std::vector<std::vector<double>> p_yx(ny, std::vector<double>(nx));
        for (std::size_t y = 0; y < ny; ++y)
            for (std::size_t x = 0; x < nx; ++x) p_yx[y][x] = flat[y * nx + x];
        std::vector<std::vector<double>> ch(nx);
        for (auto& row : ch) row = random_dist(nz, rng, false);
        const DpiReport r = verify_dpi(p_yx, ch);
        EXPECT_TRUE(r.holds) << "trial " << trial;
        EXPECT_GE(r.i_xy, r.i_zy - 1e-9);
    }
}

TEST(Dpi, NonMarkovJointRejected) {
    // Z = Y while X is independent noise.
    std::vector<double> p(2 * 2 * 2, 0.0);
    for (std::size_t y = 0; y < 2; ++y)
        for (std::size_t x = 0; x < 2; ++x) p[(y * 2 + x) * 2 + y] = 0.25;
    EXPECT_THROW(verify_dpi(DiscreteJoint({2, 2, 2}, p)), PreconditionError);
}

TEST(MiDecomposition, UniformSkewedDegenerate) {
    auto r = verify_mi_decomposition(FactorSpec::uniform(4, 3, 5), 100000, 3);
    EXPECT_NEAR(r.exact_mi, std::log(4.0), 1e-9);
    EXPECT_TRUE(r.exact_ok);
    EXPECT_TRUE(r.plugin_ok) << r.plugin_mi;

    FactorSpec skew = FactorSpec::uniform(4, 2, 2);
    skew.p_shared = {0.7, 0.1, 0.1, 0.1};
    const double h = -(0.7 * std::log(0.7) + 3 * 0.1 * std::log(0.1));
    r = verify_mi_decomposition(skew, 100000, 4);
    EXPECT_NEAR(r.exact_mi, h, 1e-9);
    EXPECT_NEAR(r.plugin_mi, h, 0.05);

    r = verify_mi_decomposition(FactorSpec::uniform(1, 3, 3), 1000, 5);
    EXPECT_NEAR(r.exact_mi, 0.0, 1e-12);
    EXPECT_TRUE(r.exact_ok);
}

TEST(ClLimitation, XorGapIsLn2) {
    const auto r = verify_cl_limitation(FactorSpec::uniform(4, 2, 2), {TaskMode::kUniqueOnly, 2});
    EXPECT_NEAR(r.i_zy, 0.0, 1e-12);
    EXPECT_NEAR(r.i_xy, std::log(2.0), 1e-12);
    EXPECT_NEAR(r.gap, std::log(2.0), 1e-12);
    EXPECT_NEAR(r.gap, r.i_uy, 1e-12);
    EXPECT_TRUE(r.holds);
}

TEST(ClLimitation, MixedGapBetweenZeroAndTotal) {
    // (s + u1) mod 4 with uniform factors: every variable alone is uninformative.
    const auto r = verify_cl_limitation(FactorSpec::uniform(4, 4, 4), {TaskMode::kMixed, 4});
    EXPECT_NEAR(r.i_xy, std::log(4.0), 1e-9);
    EXPECT_GT(r.gap, 0.0);
    EXPECT_LE(r.gap, r.i_xy + 1e-12);
    EXPECT_TRUE(r.holds);

    // A skewed u1 lets s alone predict part of the label.
    FactorSpec skew = FactorSpec::uniform(4, 4, 4);
    skew.p_unique[0] = {0.7, 0.1, 0.1, 0.1};
    const auto s = verify_cl_limitation(skew, {TaskMode::kMixed, 4});
    EXPECT_GT(s.i_zy, 0.0);
    EXPECT_GT(s.gap, 0.0);
    EXPECT_LT(s.gap, s.i_xy);
}

TEST(ClLimitation, SharedOnlyIsPrecondition) {
    EXPECT_THROW(verify_cl_limitation(FactorSpec::uniform(4, 2, 2), {TaskMode::kSharedOnly, 4}), PreconditionError);
}

TEST(BoundGap, InfoNceBijectionCappedByLogB) {
    std::vector<double> p(64, 0.0);
    for (std::size_t x = 0; x < 8; ++x) p[x * 8 + (x * 3 + 1) % 8] = 1.0 / 8;
    Rng rng(6);
    const auto g = random_unit_table(8, 8, rng);
    std::vector<std::vector<float>> h(8);
    for (std::size_t x = 0; x < 8; ++x) h[(x * 3 + 1) % 8] = g[x];
    const auto s = bound_gap_infonce(DiscreteJoint({8, 8}, p), g, h, 0.1f, 4, 100, 7);
    EXPECT_NEAR(s.exact_mi, std::log(8.0), 1e-12);
    EXPECT_LE(s.max_estimate, std::log(4.0) + 1e-6);
    EXPECT_TRUE(s.holds);
}

TEST(BoundGap, InfoNceRandomJoints) {
    Rng rng(8);
    for (int trial = 0; trial < 2; ++trial) {
        DiscreteJoint j({6, 6}, random_dist(36, rng));
        const auto g = random_unit_table(6, 8, rng);
        const auto h = random_unit_table(6, 8, rng);
        const auto s = bound_gap_infonce(j, g, h, 0.2f, 64, 100, 9 + trial);
        EXPECT_TRUE(s.holds) << s.max_estimate << " vs " << s.exact_mi;
    }
}

TEST(BoundGap, SupConIdenticalEmbeddingsGiveNothing) {
    // Same code distribution in every class: I(Z;Y) = 0.
    std::vector<double> p;
    for (std::size_t y = 0; y < 3; ++y)
        for (std::size_t c = 0; c < 4; ++c) p.push_back(1.0 / 12);
    Rng rng(10);
    const auto emb = random_unit_table(4, 8, rng);
    const auto s = bound_gap_supcon(DiscreteJoint({3, 4}, p), emb, 0.1f, 64, 100, 11);
    EXPECT_NEAR(s.exact_mi, 0.0, 1e-12);
    EXPECT_TRUE(s.holds) << s.max_estimate;
}

TEST(BoundGap, SupConClusteredClasses) {
    Rng rng(12);
    // Codes of one class sit near a shared centroid.
    const auto centroids = random_unit_table(3, 8, rng);
    std::vector<std::vector<float>> emb(6, std::vector<float>(8));
    for (std::size_t c = 0; c < 6; ++c)
        for (std::size_t j = 0; j < 8; ++j) emb[c][j] = centroids[c / 2][j] + 0.1f * static_cast<float>(rng.normal());
    for (double leak : {0.0, 0.025}) {
        // 3 classes, 2 codes each; `leak` of each class's mass goes to other classes' codes.
        std::vector<double> p(3 * 6, 0.0);
        for (std::size_t y = 0; y < 3; ++y)
            for (std::size_t c = 0; c < 6; ++c) p[y * 6 + c] = (c / 2 == y ? 0.5 - 2 * leak : leak) / 3.0;
        const auto s = bound_gap_supcon(DiscreteJoint({3, 6}, p), emb, 0.1f, 128, 100, 13);
        EXPECT_GT(s.exact_mi, 0.5);
        EXPECT_TRUE(s.holds) << s.max_estimate << " vs " << s.exact_mi;
        if (leak == 0.0) {
            EXPECT_NEAR(s.exact_mi, std::log(3.0), 1e-12);
            EXPECT_GT(s.mean_estimate, 0.5);
        }
    }
}

TEST(EntropyMonitor, UniformAndOneHot) {
    const std::size_t n = 8;
    Tensor uniform = Tensor::full({5, n}, 1.0f / n);
    const auto u = entropy_snapshot(0, 0, {uniform, uniform});
    EXPECT_NEAR(u.local_entropy, std::log(8.0), 1e-5);
    EXPECT_NEAR(u.global_neg_entropy, -std::log(8.0), 1e-5);

    // Four tokens one-hot on experts 0, 0, 1, 2: marginal (0.5, 0.25, 0.25).
    std::vector<float> d(4 * n, 0.0f);
    d[0 * n + 0] = d[1 * n + 0] = d[2 * n + 1] = d[3 * n + 2] = 1.0f;
    const auto o = entropy_snapshot(1, 1, {Tensor::from({4, n}, d)});
    EXPECT_NEAR(o.local_entropy, 0.0, 1e-6);
    EXPECT_NEAR(o.global_neg_entropy, -entropy({0.5, 0.25, 0.25}), 1e-5);
}

TEST(EntropyMonitor, MatchesLossRecomputation) {
    Rng rng(14);
    EntropyMonitor mon;
    std::vector<std::vector<Tensor>> steps;
    for (std::size_t step = 0; step < 3; ++step) {
        std::vector<Tensor> layers;
        for (int l = 0; l < 2; ++l) {
            std::vector<float> logits(6 * 4);
            for (float& v : logits) v = static_cast<float>(rng.normal());
            layers.push_back(ops::softmax(Tensor::from({6, 4}, logits)));
        }
        mon.record(step, 0, layers);
        steps.push_back(layers);
    }
    ASSERT_EQ(mon.rows().size(), 3u);
    for (std::size_t s = 0; s < 3; ++s) {
        const double local = (local_entropy_loss(steps[s][0]).item() + local_entropy_loss(steps[s][1]).item()) / 2;
        const double global = (global_entropy_loss(steps[s][0]).item() + global_entropy_loss(steps[s][1]).item()) / 2;
        EXPECT_NEAR(mon.rows()[s].local_entropy, local, 1e-6);
        EXPECT_NEAR(mon.rows()[s].global_neg_entropy, global, 1e-6);
    }
    std::istringstream csv(mon.csv());
    std::string header, line;
    std::getline(csv, header);
    EXPECT_EQ(header, "step,modality,local_entropy,global_neg_entropy");
    int n = 0;
    while (std::getline(csv, line)) ++n;
    EXPECT_EQ(n, 3);
}

TEST(Report, MeanStdFormat) {
    EXPECT_EQ(format_mean_std({77.95}), "77.95(0.00)");
    // Sample std of {77.36, 77.95, 78.54} is 0.59.
    EXPECT_EQ(format_mean_std({77.36, 77.95, 78.54}), "77.95(0.59)");
}

TEST(Report, EmptyResultsAreHeaderOnly) {
    const fs::path dir = fs::temp_directory_path() / "s3_report_empty";
    fs::remove_all(dir);
    emit_report({}, dir.string());
    for (const char* name : {"sweep.csv", "ablation.csv", "param_ratio.csv"}) {
        std::ifstream in(dir / name);
        std::string first, second;
        ASSERT_TRUE(std::getline(in, first)) << name;
        EXPECT_FALSE(first.empty());
        EXPECT_FALSE(std::getline(in, second)) << name;
    }
}

TEST(Report, SweepRowRoundTrips) {
    SweepRow r{"synthetic", 8, "sparsification", 0.5, {77.36, 77.95, 78.54}, 51.25, 0.3921};
    std::istringstream csv(sweep_csv({r}));
    std::string header, line;
    std::getline(csv, header);
    std::getline(csv, line);
    const auto h = split(header), c = split(line);
    ASSERT_EQ(h.size(), c.size());
    EXPECT_EQ(h[0], "dataset");
    EXPECT_EQ(c[0], "synthetic");
    EXPECT_EQ(std::stoul(c[1]), 8u);
    EXPECT_EQ(c[2], "sparsification");
    EXPECT_DOUBLE_EQ(std::stod(c[3]), 0.5);
    EXPECT_EQ(c[4], "77.95(0.59)");
    EXPECT_DOUBLE_EQ(std::stod(c[5]), 51.25);

    const std::string pr = param_ratio_csv({{8, 1000, 100000}});
    EXPECT_NE(pr.find("8,1000,100000,1.0000"), std::string::npos) << pr;
}

TEST(VerifySuite, EveryCheckPasses) {
    const auto checks = analysis_checks(0);
    EXPECT_GE(checks.size(), 8u);
    for (const auto& c : checks) EXPECT_TRUE(c.passed) << c.name << ": " << c.detail;
}
