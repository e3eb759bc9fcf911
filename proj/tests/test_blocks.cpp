#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "pdit/blocks.hpp"
#include "support/testutil.hpp"

using namespace pdit;
using testutil::randn;

namespace {

// Independent single-head attention oracle: plain loops over raw arrays,
// no library ops.
std::vector<double> single_head_oracle(const Tensor<double>& x, const BlockParams<double>& p,
                                       bool causal) {
    const std::size_t t = x.rows(), d = x.cols();
    auto project = [&](const Tensor<double>& w, const Tensor<double>& b) {
        std::vector<double> out(t * d, 0.0);
        for (std::size_t i = 0; i < t; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                double acc = b.at(0, j);
                for (std::size_t k = 0; k < d; ++k) acc += x.at(i, k) * w.at(k, j);
                out[i * d + j] = acc;
            }
        }
        return out;
    };
    auto q = project(p.wq, p.bq), k = project(p.wk, p.bk), v = project(p.wv, p.bv);
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<double> ctx(t * d, 0.0);
    for (std::size_t i = 0; i < t; ++i) {
        const std::size_t limit = causal ? i + 1 : t;
        std::vector<double> w(limit);
        double mx = -1e300;
        for (std::size_t j = 0; j < limit; ++j) {
            double dot = 0;
            for (std::size_t c = 0; c < d; ++c) dot += q[i * d + c] * k[j * d + c];
            w[j] = dot * s;
            mx = std::max(mx, w[j]);
        }
        double sum = 0;
        for (std::size_t j = 0; j < limit; ++j) {
            w[j] = std::exp(w[j] - mx);
            sum += w[j];
        }
        for (std::size_t j = 0; j < limit; ++j) {
            for (std::size_t c = 0; c < d; ++c) ctx[i * d + c] += (w[j] / sum) * v[j * d + c];
        }
    }
    std::vector<double> out(t * d, 0.0);
    for (std::size_t i = 0; i < t; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            double acc = p.bo.at(0, j);
            for (std::size_t c = 0; c < d; ++c) acc += ctx[i * d + c] * p.wo.at(c, j);
            out[i * d + j] = acc;
        }
    }
    return out;
}

BlockParams<double> random_block(std::size_t d, std::size_t heads, Rng& rng) {
    auto p = BlockParams<double>::init(d, 4 * d, heads, rng);
    // fill biases and norms with noise so identities are not accidental
    for (auto* t : {&p.bq, &p.bk, &p.bv, &p.bo, &p.ffn_b1, &p.ffn_b2}) {
        for (auto& v : t->value()) v = 0.1 * rng.normal();
    }
    return p;
}

void zero_output_projections(BlockParams<double>& p) {
    for (auto* t : {&p.wo, &p.bo, &p.ffn_w2, &p.ffn_b2}) {
        for (auto& v : t->value()) v = 0.0;
    }
}

}  // namespace

TEST_CASE("single token attends only to itself") {
    Rng rng(101);
    auto p = random_block(6, 2, rng);
    auto x = randn({1, 6}, rng);
    AttentionProbs<double> probs;
    auto out = multi_head_self_attention<double>(nullptr, x, p, {MaskMode::None, 0}, &probs);
    REQUIRE(probs.size() == 2);
    for (const auto& head : probs) {
        REQUIRE(head.size() == 1);
        REQUIRE(head[0] == 1.0);
    }
    // output equals the value projection followed by the output projection
    auto v = linear<double>(nullptr, x, p.wv, p.bv);
    auto expect = linear<double>(nullptr, v, p.wo, p.bo);
    for (std::size_t j = 0; j < 6; ++j) {
        REQUIRE(out.at(0, j) == Catch::Approx(expect.at(0, j)).margin(1e-12));
    }
}

TEST_CASE("multi-head output equals the loop oracle when h=1") {
    Rng rng(102);
    for (bool causal : {false, true}) {
        auto p = random_block(8, 1, rng);
        auto x = randn({5, 8}, rng);
        auto out = multi_head_self_attention<double>(
            nullptr, x, p, {causal ? MaskMode::Causal : MaskMode::None, 5});
        auto expect = single_head_oracle(x, p, causal);
        for (std::size_t i = 0; i < out.size(); ++i) {
            REQUIRE(std::abs(out.at(i) - expect[i]) < 1e-10);
        }
    }
}

TEST_CASE("causal mask: perturbing token j leaves outputs before j unchanged") {
    Rng rng(103);
    auto p = random_block(8, 2, rng);
    auto x = randn({6, 8}, rng);
    auto base = multi_head_self_attention<double>(nullptr, x, p, {MaskMode::Causal, 6});
    for (std::size_t j = 1; j < 6; ++j) {
        auto x2 = x.clone();
        for (std::size_t c = 0; c < 8; ++c) x2.at(j, c) += rng.normal();
        auto out = multi_head_self_attention<double>(nullptr, x2, p, {MaskMode::Causal, 6});
        for (std::size_t i = 0; i < j; ++i) {
            for (std::size_t c = 0; c < 8; ++c) {
                REQUIRE(std::abs(out.at(i, c) - base.at(i, c)) <= 1e-6);
            }
        }
    }
}

TEST_CASE("indivisible head split is rejected") {
    Rng rng(104);
    REQUIRE_THROWS_AS(BlockParams<double>::init(6, 24, 4, rng), ConfigError);
}

TEST_CASE("block with zeroed output projections is the exact identity") {
    Rng rng(105);
    for (auto mode : {ResidualMode::PreNorm, ResidualMode::LiteralEquation}) {
        auto p = random_block(8, 2, rng);
        zero_output_projections(p);
        auto z = randn({5, 8}, rng);
        auto out = perceiving_block_forward<double>(nullptr, z, p, mode);
        REQUIRE(out.value() == z.value());

        auto y = randn({8, 8}, rng);
        auto out2 = deciding_block_forward<double>(nullptr, y, p, 2, mode);
        REQUIRE(out2.value() == y.value());
    }
}

TEST_CASE("residual modes differ on non-trivial weights") {
    Rng rng(106);
    auto p = random_block(8, 2, rng);
    auto z = randn({4, 8}, rng);
    auto a = perceiving_block_forward<double>(nullptr, z, p, ResidualMode::PreNorm);
    auto b = perceiving_block_forward<double>(nullptr, z, p, ResidualMode::LiteralEquation);
    bool differ = false;
    for (std::size_t i = 0; i < a.size(); ++i) differ = differ || a.at(i) != b.at(i);
    REQUIRE(differ);
}

TEST_CASE("perceiving block is permutation-equivariant on rows 1..N") {
    Rng rng(107);
    auto p = random_block(8, 2, rng);
    auto z = randn({6, 8}, rng);
    auto base = perceiving_block_forward<double>(nullptr, z, p);

    std::vector<std::size_t> perm{4, 2, 0, 3, 1};
    auto z2 = z.clone();
    for (std::size_t i = 0; i < 5; ++i) {
        for (std::size_t c = 0; c < 8; ++c) z2.at(1 + i, c) = z.at(1 + perm[i], c);
    }
    auto out = perceiving_block_forward<double>(nullptr, z2, p);
    for (std::size_t c = 0; c < 8; ++c) {
        REQUIRE(std::abs(out.at(0, c) - base.at(0, c)) < 1e-10);
        for (std::size_t i = 0; i < 5; ++i) {
            REQUIRE(std::abs(out.at(1 + i, c) - base.at(1 + perm[i], c)) < 1e-10);
        }
    }
}

TEST_CASE("deciding block enforces the 2+3K length") {
    Rng rng(108);
    auto p = random_block(8, 2, rng);
    auto y14 = randn({14, 8}, rng);
    REQUIRE_NOTHROW(deciding_block_forward<double>(nullptr, y14, p, 4));

    auto y13 = randn({13, 8}, rng);
    try {
        deciding_block_forward<double>(nullptr, y13, p, 4);
        FAIL("expected ContractError");
    } catch (const ContractError& e) {
        REQUIRE(std::string(e.what()).find("14") != std::string::npos);
    }
}

TEST_CASE("stacked deciding blocks keep causal integrity at every depth") {
    Rng rng(109);
    for (std::size_t depth : {std::size_t(1), std::size_t(2), std::size_t(3)}) {
        std::vector<BlockParams<double>> blocks;
        for (std::size_t l = 0; l < depth; ++l) blocks.push_back(random_block(8, 2, rng));
        const std::size_t k = 2;
        auto run = [&](const Tensor<double>& y0) {
            auto y = y0;
            for (auto& b : blocks) y = deciding_block_forward<double>(nullptr, y, b, k);
            return y;
        };
        auto y0 = randn({8, 8}, rng);
        auto base = run(y0);
        for (int trial = 0; trial < 5; ++trial) {
            const std::size_t j = 1 + rng.below(7);
            auto y1 = y0.clone();
            for (std::size_t c = 0; c < 8; ++c) y1.at(j, c) += rng.normal();
            auto out = run(y1);
            for (std::size_t i = 0; i < j; ++i) {
                for (std::size_t c = 0; c < 8; ++c) {
                    REQUIRE(std::abs(out.at(i, c) - base.at(i, c)) <= 1e-6);
                }
            }
        }
    }
}

TEST_CASE("unmasked attention rows sum to one") {
    Rng rng(110);
    auto p = random_block(8, 2, rng);
    auto z = randn({5, 8}, rng, 3.0);
    AttentionProbs<double> probs;
    perceiving_block_forward<double>(nullptr, z, p, ResidualMode::PreNorm, &probs);
    REQUIRE(probs.size() == 2);
    for (const auto& head : probs) {
        for (std::size_t i = 0; i < 5; ++i) {
            double sum = 0;
            for (std::size_t j = 0; j < 5; ++j) sum += head[i * 5 + j];
            REQUIRE(std::abs(sum - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("block gradients match finite differences") {
    Rng rng(111);
    auto p = random_block(4, 2, rng);
    auto z = randn({3, 4}, rng);
    auto w = randn({3, 4}, rng);
    std::vector<Tensor<double>> watched{z,      p.wq,     p.wk,     p.wv,     p.wo,
                                        p.bq,   p.ln1_gain, p.ln2_bias, p.ffn_w1, p.ffn_w2,
                                        p.ffn_b1};
    testutil::require_gradients_match(
        [&](Tape<double>* tp) {
            return sum_all(tp, mul(tp, perceiving_block_forward(tp, z, p), w));
        },
        watched, 1e-5, 1e-8);
}
