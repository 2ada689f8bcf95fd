#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "s3/encoder.hpp"
#include "s3/errors.hpp"

using namespace s3;
using s3::testing::grad_check;
using s3::testing::random_tensor;

namespace {

EncoderConfig tiny_config() {
    EncoderConfig c;
    c.d_in = 6;
    c.n_layers = 2;
    c.n_heads = 2;
    c.moe.d_model = 8;
    c.moe.d_ffn = 16;
    c.moe.granularity = 4;
    c.moe.expansion = 2;
    c.moe.top_k = 2;
    return c;
}

std::vector<Tensor> random_samples(Rng& rng, std::vector<std::size_t> lengths, std::size_t d_in) {
    std::vector<Tensor> out;
    for (std::size_t t : lengths) out.push_back(random_tensor({t, d_in}, rng));
    return out;
}

double js_oracle(const std::vector<double>& p, const std::vector<double>& q) {
    double kl_pm = 0.0, kl_qm = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double m = (p[i] + q[i]) / 2;
        if (p[i] > 0) kl_pm += p[i] * std::log(p[i] / m);
        if (q[i] > 0) kl_qm += q[i] * std::log(q[i] / m);
    }
    return (kl_pm + kl_qm) / 2;
}

ConceptActivation act_with_mass(std::size_t n, std::size_t c, double m) {
    ConceptActivation a;
    a.masses.assign(n, 0.0);
    a.masses[c] = m;
    if (m > 0) a.active_set = {c};
    return a;
}

}  // namespace

TEST(Encoder, ZeroNetworkSingleTokenIsNormalizedPositionCode) {
    EncoderConfig c = tiny_config();
    c.layer_norm = false;
    Rng rng(1);
    Encoder enc(c, 0, rng);
    enc.visit_parameters("", [](const std::string&, Tensor& t, ParamGroup) {
        for (float& v : t.mutable_data()) v = 0.0f;
    });
    SampleEmbedding e = enc.encode_one(random_tensor({1, 6}, rng));
    // Position 0 code is (0, 1, 0, 1, ...), norm 2 at d_model = 8.
    for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(e.z[i], i % 2 ? 0.5f : 0.0f, 1e-7);
}

TEST(Encoder, EmbeddingsHaveUnitNorm) {
    Rng rng(2);
    Encoder enc(tiny_config(), 0, rng);
    auto batch = enc.encode(random_samples(rng, {3, 1, 4}, 6));
    for (std::size_t b = 0; b < 3; ++b) {
        double ss = 0.0;
        for (std::size_t j = 0; j < 8; ++j) ss += batch.z.at(b, j) * batch.z.at(b, j);
        EXPECT_NEAR(std::sqrt(ss), 1.0, 1e-6);
    }
}

TEST(Encoder, EmptySequenceThrows) {
    Rng rng(3);
    Encoder enc(tiny_config(), 0, rng);
    EXPECT_THROW(enc.encode({Tensor::zeros({0, 6})}), DegenerateInputError);
    EXPECT_THROW(enc.encode({}), DegenerateInputError);
}

TEST(Encoder, KeepAllFilterIsBitIdentical) {
    Rng rng(4);
    Encoder enc(tiny_config(), 0, rng);
    auto samples = random_samples(rng, {3, 2}, 6);
    LayerPairFilter keep = [](std::size_t, std::size_t, std::size_t) { return true; };
    EncodeOptions masked;
    masked.filter = &keep;
    auto a = enc.encode(samples);
    auto b = enc.encode(samples, masked);
    for (std::size_t i = 0; i < a.z.numel(); ++i) EXPECT_EQ(a.z.at(i), b.z.at(i));
}

TEST(Encoder, DropAllFilterStaysFinite) {
    Rng rng(5);
    Encoder enc(tiny_config(), 0, rng);
    LayerPairFilter drop = [](std::size_t, std::size_t, std::size_t) { return false; };
    EncodeOptions masked;
    masked.filter = &drop;
    auto out = enc.encode(random_samples(rng, {3}, 6), masked);
    for (float v : out.z.data()) EXPECT_TRUE(std::isfinite(v));
    for (const auto& l : out.layers)
        for (float v : l.y.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Encoder, BatchedEqualsPerSample) {
    Rng rng(6);
    Encoder enc(tiny_config(), 1, rng);
    auto samples = random_samples(rng, {2, 4, 1}, 6);
    auto batch = enc.encode(samples);
    for (std::size_t b = 0; b < samples.size(); ++b) {
        SampleEmbedding one = enc.encode_one(samples[b]);
        SampleEmbedding from_batch = batch.sample(b);
        for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(one.z[j], from_batch.z[j], 1e-6);
        ASSERT_EQ(one.routing.size(), samples[b].rows() * 2);
        EXPECT_EQ(from_batch.routing.size(), one.routing.size());
        EXPECT_EQ(from_batch.modality, 1u);
    }
}

TEST(Encoder, ParameterGroupsPartitionTotal) {
    Rng rng(7);
    Encoder enc(tiny_config(), 0, rng);
    std::size_t n = 0;
    for (const auto& p : enc.parameters()) n += p.tensor.numel();
    EXPECT_EQ(enc.total_count().total(), n);
    EXPECT_EQ(enc.count(ParamGroup::kRouter).total(), 2 * router_params(tiny_config().moe).total());
    EXPECT_EQ(enc.count(ParamGroup::kExperts).total(), 2 * moe_expert_params(tiny_config().moe).total());
}

TEST(Encoder, DeepCopyIsIndependent) {
    Rng rng(8);
    Encoder enc(tiny_config(), 0, rng);
    Encoder copy = enc.deep_copy();
    copy.moe_layers()[0].router().wg.mutable_data()[0] += 1.0f;
    EXPECT_NE(copy.moe_layers()[0].router().wg.at(0), enc.moe_layers()[0].router().wg.at(0));
}

TEST(Encoder, FiniteDifferencesThroughWholeStack) {
    Rng rng(9);
    Encoder enc(tiny_config(), 0, rng);
    auto samples = random_samples(rng, {2, 3}, 6);
    auto params = enc.parameters();
    // Input projection, first attention query, a router, and the last expert output weight.
    std::vector<std::string> names{"proj.w", "layer0.attn.wq", "layer1.moe.router.wg", "layer1.ln2.g"};
    std::vector<Tensor> inputs;
    for (const auto& n : names)
        for (const auto& p : params)
            if (p.name == n) inputs.push_back(p.tensor.detach());
    ASSERT_EQ(inputs.size(), names.size());
    auto r = grad_check(
        [&](const auto& in) {
            enc.visit_parameters("", [&](const std::string& n, Tensor& t, ParamGroup) {
                for (std::size_t i = 0; i < names.size(); ++i)
                    if (n == names[i]) t = in[i];
            });
            return enc.encode(samples).z;
        },
        inputs);
    EXPECT_LE(r.rel_error, 1e-3);
}

TEST(ActiveConcepts, ThresholdBehaviour) {
    Rng rng(10);
    Encoder enc(tiny_config(), 0, rng);
    SampleEmbedding e = enc.encode_one(random_tensor({3, 6}, rng));
    ConceptActivation zero = active_concepts(e, 0.0);
    for (const auto& rec : e.routing)
        for (std::size_t c : rec.selected)
            EXPECT_NE(std::find(zero.active_set.begin(), zero.active_set.end(), c), zero.active_set.end());
    EXPECT_TRUE(active_concepts(e, 1.1).active_set.empty());
}

TEST(ActiveConcepts, OneHotRouterPicksArgmaxExperts) {
    // Router rows are scaled basis vectors, so each token's argmax expert is its
    // largest coordinate and the softmax is essentially one-hot.
    SampleEmbedding e;
    Router r{Tensor::matrix(4, 4, {50, 0, 0, 0, 0, 50, 0, 0, 0, 0, 50, 0, 0, 0, 0, 50})};
    const std::vector<std::vector<float>> tokens{{1, 0, 0, 0}, {0, 0, 1, 0}, {0, 0, 0.9f, 0.1f}};
    for (const auto& t : tokens) e.routing.push_back(route(Tensor::vector(t), r, 1));
    ConceptActivation a = active_concepts(e, 0.1);
    EXPECT_EQ(a.active_set, (std::vector<std::size_t>{0, 2}));
    EXPECT_NEAR(a.masses[2], 2.0 / 3.0, 1e-6);
}

TEST(DscDivergence, IdenticalListsGiveZero) {
    std::vector<ConceptActivation> acts{act_with_mass(3, 1, 0.2), act_with_mass(3, 1, 0.7)};
    EXPECT_DOUBLE_EQ(dsc_divergence(acts, acts, 1), 0.0);
}

TEST(DscDivergence, DisjointSupportsGiveLogTwo) {
    std::vector<ConceptActivation> a{act_with_mass(3, 1, 0.05)}, b{act_with_mass(3, 1, 0.95)};
    EXPECT_NEAR(dsc_divergence(a, b, 1), std::log(2.0), 1e-12);
}

TEST(DscDivergence, MatchesDirectComputation) {
    // Bins of width 1/16: 0.1 → 1, 0.3 → 4, 0.32 → 5, 1.0 → 15.
    std::vector<ConceptActivation> a{act_with_mass(2, 0, 0.1), act_with_mass(2, 0, 0.3), act_with_mass(2, 0, 0.3),
                                     act_with_mass(2, 0, 0.0)};
    std::vector<ConceptActivation> b{act_with_mass(2, 0, 0.1), act_with_mass(2, 0, 0.32), act_with_mass(2, 0, 1.0)};
    std::vector<double> p(16, 0.0), q(16, 0.0);
    p[1] = 1.0 / 3;
    p[4] = 2.0 / 3;
    q[1] = q[5] = q[15] = 1.0 / 3;
    EXPECT_NEAR(dsc_divergence(a, b, 0), js_oracle(p, q), 1e-12);
}

TEST(DscDivergence, InactiveConceptThrows) {
    std::vector<ConceptActivation> a{act_with_mass(3, 1, 0.5)};
    EXPECT_THROW(dsc_divergence(a, a, 2), NotShareableError);
}
