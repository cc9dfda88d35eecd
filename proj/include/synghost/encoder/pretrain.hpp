#pragma once

#include <cstdint>
#include <vector>

#include "synghost/encoder/encoder.hpp"
#include "synghost/encoder/optim.hpp"

namespace synghost::encoder {

// Masked-token pretraining with output weights tied to the token embedding.
// Produces the clean victim that the injector starts from.
struct MlmOptions {
    int epochs = 6;
    int batchSize = 32;
    double maskRate = 0.15;
    OptimConfig optim{OptimKind::AdamW, 1e-3, 0.9, 0.9, 0.999, 1e-8, 0.0, 1.0};
    std::uint64_t seed = 0;
};

// sequences are word tokens without [CLS]. Returns the mean loss per epoch.
std::vector<double> mlm_pretrain(EncoderState& model, const std::vector<std::vector<int>>& sequences,
                                 const MlmOptions& options);

}  // namespace synghost::encoder
