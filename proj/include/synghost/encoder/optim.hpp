#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "synghost/encoder/encoder.hpp"
#include "synghost/encoder/tensor.hpp"

namespace synghost::encoder {

enum class OptimKind { Sgd, AdamW };

struct OptimConfig {
    OptimKind kind = OptimKind::Sgd;
    double lr = 5e-3;
    double momentum = 0.9;  // Sgd
    double beta1 = 0.9;     // AdamW
    double beta2 = 0.999;
    double eps = 1e-8;
    double weightDecay = 0.0;
    double clipNorm = 0.0;  // global gradient norm clip, 0 = off
};

using NamedParams = std::vector<std::pair<std::string, Matrix*>>;
using NamedGrads = std::vector<std::pair<std::string, const Matrix*>>;

// Slots are keyed by name, so one optimizer can drive the encoder and any
// number of heads as long as names do not collide.
class Optimizer {
public:
    explicit Optimizer(OptimConfig config) : config_(config) {}

    // params[i] and grads[i] must carry the same name and shape. Updated
    // tensors are rounded to float32 storage.
    void step(const NamedParams& params, const NamedGrads& grads);
    const OptimConfig& config() const { return config_; }

private:
    OptimConfig config_;
    std::map<std::string, Matrix> m_, v_;
    long steps_ = 0;
};

// Encoder parameters at or above lowestTrainableLayer, with "enc." prefixed names.
NamedParams trainable_params(EncoderState& model, int lowestTrainableLayer);
NamedGrads matching_grads(const Params& grads, const NamedParams& selection);

// No-op on frozen models.
void encoder_step(Optimizer& opt, EncoderState& model, const Params& grads, int lowestTrainableLayer = 0);

}  // namespace synghost::encoder
