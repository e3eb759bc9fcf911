#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "pdit/ops.hpp"
#include "pdit/rng.hpp"
#include "pdit/tensor.hpp"

namespace pdit {

// Weights of one Transformer block: fused per-head Q/K/V projections and the
// output projection (all D x D), two layer norms, and the feed-forward pair.
template <typename T>
struct BlockParams {
    Tensor<T> wq, wk, wv, wo;  // D x D
    Tensor<T> bq, bk, bv, bo;  // 1 x D
    Tensor<T> ln1_gain, ln1_bias;
    Tensor<T> ln2_gain, ln2_bias;
    Tensor<T> ffn_w1, ffn_b1;  // D x Dff, 1 x Dff
    Tensor<T> ffn_w2, ffn_b2;  // Dff x D, 1 x D
    std::size_t heads = 1;

    static BlockParams init(std::size_t d, std::size_t d_ff, std::size_t heads, Rng& rng) {
        if (heads == 0 || d % heads != 0) {
            throw ConfigError("embedding width " + std::to_string(d) +
                              " is not divisible by " + std::to_string(heads) + " heads");
        }
        if (d_ff < d) {
            throw ConfigError("FFN hidden width " + std::to_string(d_ff) +
                              " must be at least the embedding width " + std::to_string(d));
        }
        auto w = [&](std::size_t r, std::size_t c) {
            auto t = Tensor<T>::zeros({r, c});
            for (auto& v : t.value()) v = static_cast<T>(0.02 * rng.normal());
            t.set_requires_grad(true);
            return t;
        };
        auto zeros = [&](std::vector<std::size_t> s) {
            return Tensor<T>::zeros(std::move(s)).set_requires_grad(true);
        };
        auto ones = [&](std::vector<std::size_t> s) {
            return Tensor<T>::filled(std::move(s), T(1)).set_requires_grad(true);
        };
        BlockParams p;
        p.wq = w(d, d);
        p.wk = w(d, d);
        p.wv = w(d, d);
        p.wo = w(d, d);
        p.bq = zeros({1, d});
        p.bk = zeros({1, d});
        p.bv = zeros({1, d});
        p.bo = zeros({1, d});
        p.ln1_gain = ones({d});
        p.ln1_bias = zeros({d});
        p.ln2_gain = ones({d});
        p.ln2_bias = zeros({d});
        p.ffn_w1 = w(d, d_ff);
        p.ffn_b1 = zeros({1, d_ff});
        p.ffn_w2 = w(d_ff, d);
        p.ffn_b2 = zeros({1, d});
        p.heads = heads;
        return p;
    }

    template <typename Fn>
    void for_each(const std::string& prefix, Fn&& fn) {
        fn(prefix + ".wq", wq);
        fn(prefix + ".wk", wk);
        fn(prefix + ".wv", wv);
        fn(prefix + ".wo", wo);
        fn(prefix + ".bq", bq);
        fn(prefix + ".bk", bk);
        fn(prefix + ".bv", bv);
        fn(prefix + ".bo", bo);
        fn(prefix + ".ln1_gain", ln1_gain);
        fn(prefix + ".ln1_bias", ln1_bias);
        fn(prefix + ".ln2_gain", ln2_gain);
        fn(prefix + ".ln2_bias", ln2_bias);
        fn(prefix + ".ffn_w1", ffn_w1);
        fn(prefix + ".ffn_b1", ffn_b1);
        fn(prefix + ".ffn_w2", ffn_w2);
        fn(prefix + ".ffn_b2", ffn_b2);
    }
};

enum class MaskMode { None, Causal };

struct AttentionMask {
    MaskMode mode = MaskMode::None;
    std::size_t length = 0;  // sequence length; 0 defers to the input
};

// Causal support: position i may attend to positions j <= i only.
inline BoolTensor causal_mask(std::size_t length) {
    auto m = BoolTensor::zeros({length, length});
    for (std::size_t i = 0; i < length; ++i) {
        for (std::size_t j = i + 1; j < length; ++j) m.value[i * length + j] = 1;
    }
    return m;
}

// Post-softmax attention weights of one MSA call: one row-major T x T matrix
// per head. Values are detached copies.
template <typename T>
using AttentionProbs = std::vector<std::vector<T>>;

// Scaled dot-product attention over h heads (scale 1/sqrt(D/h)); the causal
// mask is applied pre-softmax as a large negative fill.
template <typename T>
Tensor<T> multi_head_self_attention(Tape<T>* tape, const Tensor<T>& x, const BlockParams<T>& p,
                                    const AttentionMask& mask,
                                    AttentionProbs<T>* capture = nullptr) {
    const std::size_t t = x.rows(), d = x.cols();
    if (p.heads == 0 || d % p.heads != 0) {
        throw ConfigError("attention width " + std::to_string(d) + " is not divisible by " +
                          std::to_string(p.heads) + " heads");
    }
    if (mask.mode == MaskMode::Causal && mask.length != 0 && mask.length != t) {
        throw ContractError("attention mask built for length " + std::to_string(mask.length) +
                            ", input has " + std::to_string(t) + " rows");
    }
    const std::size_t hd = d / p.heads;
    const T att_scale = T(1) / std::sqrt(static_cast<T>(hd));

    auto q = linear(tape, x, p.wq, p.bq);
    auto k = linear(tape, x, p.wk, p.bk);
    auto v = linear(tape, x, p.wv, p.bv);

    BoolTensor cm;
    if (mask.mode == MaskMode::Causal) cm = causal_mask(t);

    std::vector<Tensor<T>> heads;
    heads.reserve(p.heads);
    for (std::size_t h = 0; h < p.heads; ++h) {
        auto qh = slice(tape, q, h * hd, (h + 1) * hd, std::size_t(1));
        auto kh = slice(tape, k, h * hd, (h + 1) * hd, std::size_t(1));
        auto vh = slice(tape, v, h * hd, (h + 1) * hd, std::size_t(1));
        auto scores = scale(tape, matmul(tape, qh, transpose(tape, kh)), att_scale);
        if (mask.mode == MaskMode::Causal) scores = masked_fill(tape, scores, cm, T(-1e9));
        auto probs = softmax(tape, scores, std::size_t(1));
        if (capture) capture->push_back(probs.value());
        heads.push_back(matmul(tape, probs, vh));
    }
    auto ctx = p.heads == 1 ? heads[0] : concat(tape, heads, std::size_t(1));
    return linear(tape, ctx, p.wo, p.bo);
}

// Eqs. 4-5 as printed are internally inconsistent (the FFN consumes an
// intermediate of the previous layer index). PreNorm is the standard reading;
// LiteralEquation keeps the printed residual source for comparison.
enum class ResidualMode { PreNorm, LiteralEquation };

template <typename T>
Tensor<T> transformer_block_forward(Tape<T>* tape, const Tensor<T>& x, const BlockParams<T>& p,
                                    const AttentionMask& mask,
                                    ResidualMode residual = ResidualMode::PreNorm,
                                    AttentionProbs<T>* capture = nullptr, double p_drop = 0.0,
                                    Rng* drop_rng = nullptr) {
    auto attn = multi_head_self_attention(tape, layer_norm(tape, x, p.ln1_gain, p.ln1_bias), p,
                                          mask, capture);
    if (p_drop > 0.0 && drop_rng) attn = dropout(tape, attn, p_drop, *drop_rng);
    auto mid = add(tape, x, attn);
    auto ff = linear(tape, gelu(tape, linear(tape, layer_norm(tape, mid, p.ln2_gain, p.ln2_bias),
                                             p.ffn_w1, p.ffn_b1)),
                     p.ffn_w2, p.ffn_b2);
    if (p_drop > 0.0 && drop_rng) ff = dropout(tape, ff, p_drop, *drop_rng);
    const Tensor<T>& res = residual == ResidualMode::PreNorm ? mid : x;
    return add(tape, res, ff);
}

// Unmasked block over one observation's (1+N) patch rows; builds spatial
// relationships among the patches.
template <typename T>
Tensor<T> perceiving_block_forward(Tape<T>* tape, const Tensor<T>& z, const BlockParams<T>& p,
                                   ResidualMode residual = ResidualMode::PreNorm,
                                   AttentionProbs<T>* capture = nullptr, double p_drop = 0.0,
                                   Rng* drop_rng = nullptr) {
    return transformer_block_forward(tape, z, p, AttentionMask{MaskMode::None, 0}, residual,
                                     capture, p_drop, drop_rng);
}

// Causally masked block over the 2+3K trajectory rows; builds temporal
// relationships across timesteps.
template <typename T>
Tensor<T> deciding_block_forward(Tape<T>* tape, const Tensor<T>& y, const BlockParams<T>& p,
                                 std::size_t horizon_k,
                                 ResidualMode residual = ResidualMode::PreNorm,
                                 AttentionProbs<T>* capture = nullptr, double p_drop = 0.0,
                                 Rng* drop_rng = nullptr) {
    const std::size_t expected = 2 + 3 * horizon_k;
    if (y.rows() != expected) {
        throw ContractError("deciding block expects 2+3K = " + std::to_string(expected) +
                            " rows for K = " + std::to_string(horizon_k) + ", got " +
                            std::to_string(y.rows()));
    }
    return transformer_block_forward(tape, y, p, AttentionMask{MaskMode::Causal, y.rows()},
                                     residual, capture, p_drop, drop_rng);
}

}  // namespace pdit
