#pragma once

#include <cstddef>
#include <string>
#include <variant>
#include <vector>

#include "pdit/errors.hpp"

namespace pdit {

struct ImageObs {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 0;
    std::vector<double> pixels;  // row-major H x W x C, values in [0,1]
};

struct ProprioObs {
    std::vector<double> entries;
};

struct HybridObs {
    ImageObs image;
    std::vector<std::size_t> words;  // vocabulary ids
};

using Observation = std::variant<ImageObs, ProprioObs, HybridObs>;

enum class Modality { Image, Proprio, Hybrid };

inline Modality modality_of(const Observation& obs) {
    if (std::holds_alternative<ImageObs>(obs)) return Modality::Image;
    if (std::holds_alternative<ProprioObs>(obs)) return Modality::Proprio;
    return Modality::Hybrid;
}

inline const char* modality_name(Modality m) {
    switch (m) {
        case Modality::Image: return "image";
        case Modality::Proprio: return "proprio";
        default: return "hybrid";
    }
}

inline Modality modality_from_name(const std::string& name) {
    if (name == "image") return Modality::Image;
    if (name == "proprio") return Modality::Proprio;
    if (name == "hybrid") return Modality::Hybrid;
    throw ConfigError("unknown modality: " + name);
}

inline void validate_observation(const Observation& obs, std::size_t vocab = 0) {
    if (const auto* img = std::get_if<ImageObs>(&obs)) {
        if (img->pixels.size() != img->height * img->width * img->channels) {
            throw ConfigError("image pixel buffer length " + std::to_string(img->pixels.size()) +
                              " does not equal H*W*C");
        }
    } else if (const auto* pro = std::get_if<ProprioObs>(&obs)) {
        if (pro->entries.empty()) throw ConfigError("proprioception observation is empty");
    } else {
        const auto& hyb = std::get<HybridObs>(obs);
        validate_observation(Observation{hyb.image});
        if (vocab > 0) {
            for (std::size_t w : hyb.words) {
                if (w >= vocab) {
                    throw IndexError("word id " + std::to_string(w) +
                                     " out of range for vocabulary of " + std::to_string(vocab));
                }
            }
        }
    }
}

}  // namespace pdit
