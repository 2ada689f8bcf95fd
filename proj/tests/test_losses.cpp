#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gradcheck.hpp"
#include "s3/errors.hpp"
#include "s3/losses.hpp"

using namespace s3;
using s3::testing::grad_check;
using s3::testing::random_tensor;

namespace {

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor& t) {
    Mat m(t.rows(), std::vector<double>(t.cols()));
    for (std::size_t i = 0; i < t.rows(); ++i)
        for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t.data()[i * t.cols() + j];
    return m;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

Tensor unit_rows(Shape shape, Rng& rng) { return ops::l2_normalize_rows(random_tensor(shape, rng)); }

// Brute-force supervised contrastive loss; positives are labels[j]==labels[i], self excluded if intra.
double sup_con_oracle(const Tensor& src, const Tensor& dst, const std::vector<std::size_t>& y, double tau, bool intra) {
    Mat a = to_mat(src), b = to_mat(dst);
    const std::size_t B = a.size();
    double total = 0.0;
    std::size_t valid = 0;
    for (std::size_t i = 0; i < B; ++i) {
        double denom = 0.0;
        for (std::size_t j = 0; j < B; ++j) denom += std::exp(dot(a[i], b[j]) / tau);
        double acc = 0.0;
        std::size_t n = 0;
        for (std::size_t s = 0; s < B; ++s) {
            if (y[s] != y[i] || (intra && s == i)) continue;
            acc += std::log(std::exp(dot(a[i], b[s]) / tau) / denom);
            ++n;
        }
        if (n == 0) continue;
        total += acc / n;
        ++valid;
    }
    return -total / valid;
}

double info_nce_oracle(const Tensor& src, const Tensor& dst, double tau) {
    std::vector<std::size_t> distinct(src.rows());
    std::iota(distinct.begin(), distinct.end(), 0);
    return sup_con_oracle(src, dst, distinct, tau, false);
}

double compactness_oracle(const Tensor& src, const Tensor& dst, const std::vector<std::size_t>& y) {
    Mat a = to_mat(src), b = to_mat(dst);
    double total = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        std::vector<double> mu(b[0].size(), 0.0);
        for (std::size_t j = 0; j < b.size(); ++j)
            if (y[j] == y[i])
                for (std::size_t d = 0; d < mu.size(); ++d) mu[d] += b[j][d];
        const double n = std::sqrt(dot(mu, mu));
        for (double& v : mu) v /= n;
        total += dot(a[i], mu);
    }
    return -total / a.size();
}

double cv2_oracle(const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m += x;
    m /= v.size();
    double s2 = 0.0;
    for (double x : v) s2 += (x - m) * (x - m);
    return s2 / v.size() / (m * m);
}

Tensor softmax_rows_of(Tensor logits) { return ops::softmax(logits, 1); }

EmbeddingBatch random_batch(Rng& rng, std::size_t B, std::size_t d, std::vector<std::size_t> labels = {}) {
    EmbeddingBatch b;
    b.z1 = unit_rows({B, d}, rng);
    b.z2 = unit_rows({B, d}, rng);
    b.z1_view = unit_rows({B, d}, rng);
    b.z2_view = unit_rows({B, d}, rng);
    b.labels = std::move(labels);
    return b;
}

}  // namespace

TEST(InfoNce, IdenticalRowsGiveLogB) {
    Tensor z = ops::l2_normalize_rows(Tensor::full({5, 3}, 1.0f));
    EXPECT_NEAR(info_nce(z, z, 0.1f).item(), std::log(5.0), 1e-5);
}

TEST(InfoNce, TwoOrthogonalPairs) {
    Tensor z = Tensor::matrix(2, 2, {1, 0, 0, 1});
    EXPECT_NEAR(info_nce(z, z, 1.0f).item(), -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0)), 1e-6);
    EXPECT_NEAR(info_nce(z, z, 1.0f).item(), 0.3133, 1e-4);
}

TEST(InfoNce, BatchOfOneThrows) {
    Tensor z = Tensor::matrix(1, 2, {1, 0});
    EXPECT_THROW(info_nce(z, z, 0.1f), ArgumentError);
}

TEST(InfoNce, MatchesLoopOracle) {
    Rng rng(1);
    for (int rep = 0; rep < 5; ++rep) {
        Tensor a = unit_rows({6, 4}, rng), b = unit_rows({6, 4}, rng);
        EXPECT_NEAR(info_nce(a, b, 0.2f).item(), info_nce_oracle(a, b, 0.2), 1e-5);
    }
}

TEST(LRep, IdenticalViewsOfConstantBatchGiveLogB) {
    EmbeddingBatch b;
    b.z1 = b.z2 = ops::l2_normalize_rows(Tensor::full({4, 3}, 1.0f));
    EXPECT_NEAR(l_rep(b, 0.1f).item(), std::log(4.0), 1e-5);
    EXPECT_NEAR(l_dsc(b, 0.1f).item(), std::log(4.0), 1e-5);
}

TEST(LRep, CompositionAndSwapSymmetry) {
    Rng rng(2);
    EmbeddingBatch b = random_batch(rng, 5, 4);
    const double rep = 0.5 * (info_nce_oracle(b.z1, b.z1_view, 0.1) + info_nce_oracle(b.z2, b.z2_view, 0.1));
    const double dsc = 0.5 * (info_nce_oracle(b.z1, b.z2, 0.1) + info_nce_oracle(b.z2, b.z1, 0.1));
    EXPECT_NEAR(l_rep(b, 0.1f).item(), rep, 1e-4);
    EXPECT_NEAR(l_dsc(b, 0.1f).item(), dsc, 1e-4);
    EmbeddingBatch s = b;
    std::swap(s.z1, s.z2);
    std::swap(s.z1_view, s.z2_view);
    EXPECT_NEAR(l_rep(s, 0.1f).item(), l_rep(b, 0.1f).item(), 1e-6);
    EXPECT_NEAR(l_dsc(s, 0.1f).item(), l_dsc(b, 0.1f).item(), 1e-6);
}

TEST(SupCon, SingleClassIdenticalGivesLogB) {
    Tensor z = ops::l2_normalize_rows(Tensor::full({4, 3}, 1.0f));
    const std::vector<std::size_t> y(4, 0);
    EXPECT_NEAR(sup_con(z, z, y, 0.1f, false).item(), std::log(4.0), 1e-5);
    EXPECT_NEAR(sup_con(z, z, y, 0.1f, true).item(), std::log(4.0), 1e-5);
}

TEST(SupCon, DistinctLabelsReduceToInfoNce) {
    Rng rng(3);
    Tensor a = unit_rows({6, 4}, rng), b = unit_rows({6, 4}, rng);
    const std::vector<std::size_t> y{5, 1, 2, 3, 4, 0};
    EXPECT_NEAR(sup_con(a, b, y, 0.1f, false).item(), info_nce(a, b, 0.1f).item(), 1e-6);
}

TEST(SupCon, MatchesDoubleLoopOracle) {
    Rng rng(4);
    const std::vector<std::size_t> y{0, 1, 1, 0};
    for (bool intra : {false, true}) {
        Tensor a = unit_rows({4, 3}, rng), b = unit_rows({4, 3}, rng);
        EXPECT_NEAR(sup_con(a, b, y, 0.1f, intra).item(), sup_con_oracle(a, b, y, 0.1, intra), 1e-5);
    }
}

TEST(SupCon, SingletonAnchorIsSkipped) {
    Rng rng(5);
    Tensor a = unit_rows({4, 3}, rng);
    const std::vector<std::size_t> y{0, 0, 1, 2};
    std::size_t skipped = 0;
    const float v = sup_con(a, a, y, 0.1f, true, &skipped).item();
    EXPECT_EQ(skipped, 2u);
    EXPECT_NEAR(v, sup_con_oracle(a, a, y, 0.1, true), 1e-5);
}

TEST(LSuff, QuarterSumOracleAndSymmetry) {
    Rng rng(6);
    EmbeddingBatch b = random_batch(rng, 6, 4, {0, 1, 2, 0, 1, 2});
    const double expected =
        0.25 * (sup_con_oracle(b.z1, b.z1, b.labels, 0.1, true) + sup_con_oracle(b.z1, b.z2, b.labels, 0.1, false) +
                sup_con_oracle(b.z2, b.z1, b.labels, 0.1, false) + sup_con_oracle(b.z2, b.z2, b.labels, 0.1, true));
    EXPECT_NEAR(l_suff(b, 0.1f).item(), expected, 1e-4);
    EmbeddingBatch s = b;
    std::swap(s.z1, s.z2);
    EXPECT_NEAR(l_suff(s, 0.1f).item(), l_suff(b, 0.1f).item(), 1e-6);

    EmbeddingBatch c;
    c.z1 = c.z2 = ops::l2_normalize_rows(Tensor::full({4, 3}, 1.0f));
    c.labels = {7, 7, 7, 7};
    EXPECT_NEAR(l_suff(c, 0.1f).item(), std::log(4.0), 1e-5);
}

TEST(Compactness, IdenticalMembersGiveMinusOne) {
    Tensor z = Tensor::matrix(4, 2, {1, 0, 1, 0, 0, 1, 0, 1});
    EXPECT_NEAR(compactness(z, z, {0, 0, 1, 1}).item(), -1.0, 1e-6);
}

TEST(Compactness, OrthogonalMeanGivesZero) {
    Tensor src = Tensor::matrix(2, 2, {0, 1, 0, 1});
    Tensor dst = Tensor::matrix(2, 2, {1, 0, 1, 0});
    EXPECT_NEAR(compactness(src, dst, {3, 3}).item(), 0.0, 1e-7);
}

TEST(Compactness, MatchesLoopOracleAndBounds) {
    Rng rng(7);
    const std::vector<std::size_t> y{0, 1, 0, 1, 1, 0};
    for (int rep = 0; rep < 5; ++rep) {
        Tensor a = unit_rows({6, 5}, rng), b = unit_rows({6, 5}, rng);
        const float v = compactness(a, b, y).item();
        EXPECT_NEAR(v, compactness_oracle(a, b, y), 1e-5);
        EXPECT_GE(v, -1.0f - 1e-6f);
        EXPECT_LE(v, 1.0f + 1e-6f);
    }
}

TEST(Compactness, ZeroClassMeanThrows) {
    Tensor z = Tensor::matrix(2, 2, {1, 0, -1, 0});
    EXPECT_THROW(compactness(z, z, {0, 0}), DegenerateInputError);
}

TEST(LMin, QuarterSumOracle) {
    Rng rng(8);
    EmbeddingBatch b = random_batch(rng, 6, 4, {0, 1, 0, 1, 2, 2});
    const double expected = 0.25 * (compactness_oracle(b.z1, b.z1, b.labels) + compactness_oracle(b.z1, b.z2, b.labels) +
                                    compactness_oracle(b.z2, b.z1, b.labels) + compactness_oracle(b.z2, b.z2, b.labels));
    EXPECT_NEAR(l_min(b).item(), expected, 1e-5);
    EmbeddingBatch c;
    c.z1 = c.z2 = ops::l2_normalize_rows(Tensor::full({3, 2}, 1.0f));
    c.labels = {0, 0, 0};
    EXPECT_NEAR(l_min(c).item(), -1.0, 1e-6);
}

TEST(VmfKl, ClosedFormCases) {
    EXPECT_DOUBLE_EQ(vmf_kl({0, 1}, {0, 1}, 5.0, 0.3), 0.0);
    EXPECT_DOUBLE_EQ(vmf_kl({1, 0}, {-1, 0}, 2.0, 0.5), 2.0);
    EXPECT_THROW(vmf_kl({2, 0}, {1, 0}, 1.0, 0.5), ArgumentError);
}

TEST(VmfKl, RankOrderMatchesNegativeInnerProduct) {
    Rng rng(9);
    std::vector<std::pair<double, double>> pairs;
    for (int i = 0; i < 50; ++i) {
        Tensor a = unit_rows({1, 4}, rng), b = unit_rows({1, 4}, rng);
        std::vector<double> x(a.data().begin(), a.data().end()), y(b.data().begin(), b.data().end());
        // Renormalize in double so the unit check is exact.
        const double nx = std::sqrt(dot(x, x)), ny = std::sqrt(dot(y, y));
        for (double& v : x) v /= nx;
        for (double& v : y) v /= ny;
        pairs.emplace_back(vmf_kl(x, y, 3.0, 0.7), -dot(x, y));
    }
    auto by_kl = pairs, by_dot = pairs;
    std::sort(by_kl.begin(), by_kl.end(), [](auto& a, auto& b) { return a.first < b.first; });
    std::sort(by_dot.begin(), by_dot.end(), [](auto& a, auto& b) { return a.second < b.second; });
    EXPECT_EQ(by_kl, by_dot);
}

TEST(ImportanceLoss, Cases) {
    EXPECT_NEAR(importance_loss(Tensor::full({3, 4}, 0.25f)).item(), 0.0, 1e-7);
    EXPECT_NEAR(importance_loss(Tensor::matrix(3, 2, {1, 0, 1, 0, 1, 0})).item(), 1.0, 1e-6);
    Rng rng(10);
    Tensor p = softmax_rows_of(random_tensor({7, 5}, rng));
    std::vector<double> imp(5, 0.0);
    for (std::size_t t = 0; t < 7; ++t)
        for (std::size_t e = 0; e < 5; ++e) imp[e] += p.at(t, e);
    EXPECT_NEAR(importance_loss(p).item(), cv2_oracle(imp), 1e-5);
    std::vector<std::size_t> perm{6, 2, 0, 5, 1, 3, 4};
    EXPECT_NEAR(importance_loss(ops::gather_rows(p, perm)).item(), importance_loss(p).item(), 1e-6);
}

TEST(LoadLoss, EqualScoresSelectEvenly) {
    // Monte-Carlo frequency of noisy top-1 selection for two tied experts.
    Rng rng(11);
    const float sigma = 0.5f;
    std::size_t first = 0;
    const std::size_t draws = 100000;
    for (std::size_t i = 0; i < draws; ++i) {
        const double a = rng.normal(0.0, sigma), b = rng.normal(0.0, sigma);
        first += a >= b ? 1 : 0;
    }
    EXPECT_NEAR(static_cast<double>(first) / draws, 0.5, 0.02);
    // Over many tokens the smooth loads of tied experts balance out.
    const std::size_t T = 2000;
    Tensor logits = Tensor::zeros({T, 2});
    Tensor noisy = ops::randn({T, 2}, rng, sigma);
    EXPECT_LT(load_loss(logits, noisy, 1, sigma).item(), 1e-3);
}

TEST(LoadLoss, DominantExpertTakesAllLoad) {
    const std::size_t N = 4;
    const float sigma = 1.0f / N;
    Rng rng(12);
    Tensor logits = Tensor::matrix(3, N, {3, 0, 0, 0, 3, 0.1f, 0, 0, 3, 0, 0.1f, 0});
    Tensor noisy = ops::add(logits, ops::randn({3, N}, rng, 0.01f));
    EXPECT_NEAR(load_loss(logits, noisy, 1, sigma).item(), static_cast<double>(N - 1), 1e-3);
}

TEST(LoadLoss, EqualLoadsAndArguments) {
    Tensor logits = Tensor::matrix(2, 2, {1, 0, 0, 1});
    EXPECT_NEAR(load_loss(logits, logits, 1, 0.5f).item(), 0.0, 1e-7);
    EXPECT_THROW(load_loss(logits, logits, 1, 0.0f), ArgumentError);
    EXPECT_EQ(load_loss(logits, logits, 2, 0.5f).item(), 0.0f);
}

TEST(EntropyLosses, Cases) {
    const double lnN = std::log(4.0);
    EXPECT_NEAR(local_entropy_loss(Tensor::full({3, 4}, 0.25f)).item(), lnN, 1e-6);
    EXPECT_NEAR(local_entropy_loss(Tensor::matrix(2, 2, {1, 0, 0, 1})).item(), 0.0, 1e-7);
    EXPECT_NEAR(global_entropy_loss(Tensor::full({3, 4}, 0.25f)).item(), -lnN, 1e-6);
    EXPECT_NEAR(global_entropy_loss(Tensor::matrix(2, 2, {1, 0, 1, 0})).item(), 0.0, 1e-7);
    Rng rng(13);
    Tensor p = softmax_rows_of(random_tensor({5, 3}, rng));
    double local = 0.0;
    std::vector<double> marg(3, 0.0);
    for (std::size_t t = 0; t < 5; ++t)
        for (std::size_t e = 0; e < 3; ++e) {
            local -= p.at(t, e) * std::log(p.at(t, e)) / 5;
            marg[e] += p.at(t, e) / 5;
        }
    double hm = 0.0;
    for (double m : marg) hm -= m * std::log(m);
    EXPECT_NEAR(local_entropy_loss(p).item(), local, 1e-5);
    EXPECT_NEAR(global_entropy_loss(p).item(), -hm, 1e-5);
}

TEST(ScoresTensor, FromRecords) {
    RoutingRecord a, b;
    a.scores = {0.5f, 0.5f};
    b.scores = {1.0f, 0.0f};
    Tensor s = scores_tensor({a, b});
    EXPECT_EQ(s.shape(), (Shape{2, 2}));
    EXPECT_NEAR(global_entropy_loss(s).item(), 0.75 * std::log(0.75) + 0.25 * std::log(0.25), 1e-6);
}

TEST(LSpecial, WeightedSums) {
    Rng rng(14);
    EmbeddingBatch b = random_batch(rng, 5, 4);
    RoutingTrace tr;
    tr.logits = random_tensor({8, 4}, rng);
    tr.probs = ops::softmax(tr.logits, 1);
    tr.noisy_logits = ops::add(tr.logits, ops::randn({8, 4}, rng, 0.25f));
    tr.k = 2;
    tr.sigma = 0.25f;

    LossWeights zero;
    zero.lambda_rep = zero.lambda_dsc = zero.lambda_aux = 0.0f;
    EXPECT_EQ(l_special(b, {tr}, zero).total.item(), 0.0f);

    LossWeights rep_only = zero;
    rep_only.lambda_rep = 1.0f;
    EXPECT_EQ(l_special(b, {tr}, rep_only).total.item(), l_rep(b, 0.1f).item());

    LossWeights w;
    w.lambda_aux = 0.5f;
    const double aux = w.lambda_imp * importance_loss(tr.probs).item() +
                       w.lambda_load * load_loss(tr.logits, tr.noisy_logits, 2, 0.25f).item() +
                       w.lambda_local * local_entropy_loss(tr.probs).item() +
                       w.lambda_global * global_entropy_loss(tr.probs).item();
    const double expected = l_rep(b, 0.1f).item() + l_dsc(b, 0.1f).item() + 0.5 * aux;
    LossBreakdown out = l_special(b, {tr}, w);
    EXPECT_NEAR(out.total.item(), expected, 1e-5);
    EXPECT_NEAR(out.term("aux"), aux, 1e-5);
}

TEST(LSelect, WeightedSumsAndLabels) {
    Rng rng(15);
    EmbeddingBatch b = random_batch(rng, 6, 4, {0, 1, 0, 1, 0, 1});
    LossWeights zero;
    zero.lambda_suff = zero.lambda_min = 0.0f;
    EXPECT_EQ(l_select(b, zero).total.item(), 0.0f);
    LossWeights suff_only = zero;
    suff_only.lambda_suff = 1.0f;
    EXPECT_EQ(l_select(b, suff_only).total.item(), l_suff(b, 0.1f).item());
    LossWeights w;
    EXPECT_NEAR(l_select(b, w).total.item(), l_suff(b, 0.1f).item() + 0.1 * l_min(b).item(), 1e-6);
    b.labels.clear();
    EXPECT_THROW(l_select(b, w), ArgumentError);
}

TEST(LossGradients, FiniteDifferences) {
    Rng rng(16);
    const std::vector<std::size_t> y{0, 1, 0, 1, 2, 2};
    int case_id = 0;
    auto check = [&](auto fn, std::vector<Tensor> in, double h = 1e-3) {
        auto r = grad_check(fn, std::move(in), h);
        EXPECT_LE(r.rel_error, 1e-3) << "case " << case_id;
        ++case_id;
    };
    // Inputs pass through l2_normalize_rows so the losses see unit rows.
    auto unit = [](const Tensor& t) { return ops::l2_normalize_rows(t); };
    check([&](const auto& in) { return info_nce(unit(in[0]), unit(in[1]), 0.5f); },
          {random_tensor({6, 4}, rng), random_tensor({6, 4}, rng)});
    check([&](const auto& in) { return sup_con(unit(in[0]), unit(in[1]), y, 0.5f, true); },
          {random_tensor({6, 4}, rng), random_tensor({6, 4}, rng)});
    check([&](const auto& in) { return compactness(unit(in[0]), unit(in[1]), y); },
          {random_tensor({6, 4}, rng), random_tensor({6, 4}, rng)});
    check([&](const auto& in) { return importance_loss(ops::softmax(in[0], 1)); }, {random_tensor({6, 4}, rng)});
    check([&](const auto& in) { return local_entropy_loss(ops::softmax(in[0], 1)); }, {random_tensor({6, 4}, rng)});
    // O(1) value with a small gradient: a wider step keeps float rounding below the tolerance.
    check([&](const auto& in) { return global_entropy_loss(ops::softmax(in[0], 1)); }, {random_tensor({6, 4}, rng)},
          1e-2);
    Tensor noise = ops::randn({6, 4}, rng, 0.25f);
    check([&](const auto& in) { return load_loss(in[0], ops::add(in[0], noise), 2, 0.25f); },
          {random_tensor({6, 4}, rng)});
}
