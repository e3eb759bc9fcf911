#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "pdit/observation.hpp"
#include "pdit/ops.hpp"
#include "pdit/tensor.hpp"

namespace pdit {

// Trainable pieces of the observation tokenizer: the patch projection, the
// word-embedding table (hybrid only), the integration token prepended at row
// 0, and the learned positional encoding over the (1+N) rows.
template <typename T>
struct TokenizerParams {
    Tensor<T> patch_proj;   // patch_width x D
    Tensor<T> word_embed;   // V x D, hybrid modality only
    Tensor<T> integration;  // 1 x D
    Tensor<T> pos;          // (1+N) x D

    // Optional per-entry standardization for proprioception, computed from
    // the offline dataset. Empty vectors mean raw entries.
    std::vector<double> proprio_mean;
    std::vector<double> proprio_std;
};

// (1+N) x D activation rows; row 0 is the integration-token position.
template <typename T>
struct PatchSequence {
    Tensor<T> rows;
    std::size_t patch_count = 0;
};

// Splits an image into non-overlapping P x P patches, enumerated row-major
// over the patch grid; each patch flattens its P x P x C block row-major.
template <typename T>
Tensor<T> patchify_image(const ImageObs& obs, std::size_t patch) {
    validate_observation(Observation{obs});
    if (patch == 0 || obs.height % patch != 0 || obs.width % patch != 0) {
        throw ConfigError("patch size " + std::to_string(patch) + " does not divide image " +
                          std::to_string(obs.height) + "x" + std::to_string(obs.width));
    }
    const std::size_t gr = obs.height / patch, gc = obs.width / patch;
    const std::size_t n = gr * gc;
    const std::size_t w = patch * patch * obs.channels;
    Tensor<T> out = Tensor<T>::zeros({n, w});
    for (std::size_t pr = 0; pr < gr; ++pr) {
        for (std::size_t pc = 0; pc < gc; ++pc) {
            T* row = out.value().data() + (pr * gc + pc) * w;
            std::size_t k = 0;
            for (std::size_t y = 0; y < patch; ++y) {
                for (std::size_t x = 0; x < patch; ++x) {
                    const std::size_t px = ((pr * patch + y) * obs.width + pc * patch + x) *
                                           obs.channels;
                    for (std::size_t c = 0; c < obs.channels; ++c) {
                        row[k++] = static_cast<T>(obs.pixels[px + c]);
                    }
                }
            }
        }
    }
    return out;
}

// Inverse of patchify_image; test oracle and introspection helper.
template <typename T>
ImageObs reassemble_image(const Tensor<T>& patches, std::size_t height, std::size_t width,
                          std::size_t channels, std::size_t patch) {
    ImageObs img;
    img.height = height;
    img.width = width;
    img.channels = channels;
    img.pixels.assign(height * width * channels, 0.0);
    const std::size_t gc = width / patch;
    const std::size_t w = patch * patch * channels;
    for (std::size_t p = 0; p < patches.rows(); ++p) {
        const std::size_t pr = p / gc, pc = p % gc;
        std::size_t k = 0;
        for (std::size_t y = 0; y < patch; ++y) {
            for (std::size_t x = 0; x < patch; ++x) {
                const std::size_t px = ((pr * patch + y) * width + pc * patch + x) * channels;
                for (std::size_t c = 0; c < channels; ++c) {
                    img.pixels[px + c] = static_cast<double>(patches.value()[p * w + k++]);
                }
            }
        }
    }
    return img;
}

// Each proprioception entry becomes one 1-element patch, in order.
template <typename T>
Tensor<T> patchify_proprio(const ProprioObs& obs, const TokenizerParams<T>& params) {
    if (obs.entries.empty()) throw ConfigError("proprioception observation is empty");
    const std::size_t n = obs.entries.size();
    Tensor<T> out = Tensor<T>::zeros({n, 1});
    const bool standardize = !params.proprio_mean.empty();
    if (standardize && params.proprio_mean.size() != n) {
        throw ConfigError("standardization stats cover " +
                          std::to_string(params.proprio_mean.size()) + " entries, observation has " +
                          std::to_string(n));
    }
    for (std::size_t i = 0; i < n; ++i) {
        double v = obs.entries[i];
        if (standardize) v = (v - params.proprio_mean[i]) / params.proprio_std[i];
        out.at(i) = static_cast<T>(v);
    }
    return out;
}

// Prepends the integration token to pre-embedded rows and adds the positional
// encoding, yielding the (1+N) x D perceiver input.
template <typename T>
PatchSequence<T> assemble_embedded(Tape<T>* tape, const Tensor<T>& embedded,
                                   const TokenizerParams<T>& params) {
    const std::size_t n = embedded.rows();
    if (params.pos.rows() != 1 + n) {
        throw ConfigError("positional encoding has " + std::to_string(params.pos.rows()) +
                          " rows, expected 1+N = " + std::to_string(1 + n));
    }
    auto stacked = concat(tape, {params.integration, embedded}, std::size_t(0));
    PatchSequence<T> seq;
    seq.rows = add(tape, stacked, params.pos);
    seq.patch_count = n;
    return seq;
}

// Projects raw patches through the trainable patch projection, then assembles.
template <typename T>
PatchSequence<T> embed_and_assemble(Tape<T>* tape, const Tensor<T>& patches,
                                    const TokenizerParams<T>& params,
                                    Tensor<T>* embedded_out = nullptr) {
    if (patches.cols() != params.patch_proj.rows()) {
        throw ConfigError("patch width " + std::to_string(patches.cols()) +
                          " does not match projection input width " +
                          std::to_string(params.patch_proj.rows()));
    }
    auto embedded = matmul(tape, patches, params.patch_proj);
    if (embedded_out) *embedded_out = embedded;
    return assemble_embedded(tape, embedded, params);
}

// Hybrid observation: image patch embeddings first, then one word-embedding
// row per instruction word.
template <typename T>
Tensor<T> tokenize_hybrid(Tape<T>* tape, const HybridObs& obs, std::size_t patch,
                          const TokenizerParams<T>& params) {
    validate_observation(Observation{obs}, params.word_embed.rows());
    auto image_emb = matmul(tape, patchify_image<T>(obs.image, patch), params.patch_proj);
    if (obs.words.empty()) return image_emb;
    auto word_emb = embedding_lookup(tape, params.word_embed, obs.words);
    return concat(tape, {image_emb, word_emb}, std::size_t(0));
}

// Dispatch over the observation modality. `embedded_out`, when given,
// receives the N x D patch-embedding rows before the integration token and
// positional encoding are applied (used by gradient introspection).
template <typename T>
PatchSequence<T> tokenize_observation(Tape<T>* tape, const Observation& obs, std::size_t patch,
                                      const TokenizerParams<T>& params,
                                      Tensor<T>* embedded_out = nullptr) {
    if (const auto* img = std::get_if<ImageObs>(&obs)) {
        return embed_and_assemble(tape, patchify_image<T>(*img, patch), params, embedded_out);
    }
    if (const auto* pro = std::get_if<ProprioObs>(&obs)) {
        return embed_and_assemble(tape, patchify_proprio<T>(*pro, params), params, embedded_out);
    }
    auto embedded = tokenize_hybrid(tape, std::get<HybridObs>(obs), patch, params);
    if (embedded_out) *embedded_out = embedded;
    return assemble_embedded(tape, embedded, params);
}

// Token count by modality: HW/P^2 for images, D for proprioception, and
// HW/P^2 + N_w for hybrid observations.
inline std::size_t patch_count_of(const Observation& obs, std::size_t patch) {
    if (const auto* img = std::get_if<ImageObs>(&obs)) {
        return (img->height / patch) * (img->width / patch);
    }
    if (const auto* pro = std::get_if<ProprioObs>(&obs)) return pro->entries.size();
    const auto& hyb = std::get<HybridObs>(obs);
    return (hyb.image.height / patch) * (hyb.image.width / patch) + hyb.words.size();
}

}  // namespace pdit
