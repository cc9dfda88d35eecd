#pragma once

#include <cstdint>
#include <json.hpp>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "synghost/encoder/encoder.hpp"
#include "synghost/encoder/optim.hpp"

namespace synghost::encoder {

enum class HeadRole { TaskClassifier, SyntaxHead, PoisonHead, ProbeHead };
enum class HeadArch { Linear, TwoLayer, Recurrent };

std::string role_name(HeadRole role);
std::string arch_name(HeadArch arch);
HeadArch parse_arch(const std::string& name);

// Linear: w1 (in x C), b1.
// TwoLayer: w1 (in x hidden), b1, tanh, w2 (hidden x C), b2.
// Recurrent: Elman cell over all tokens, h_t = tanh(x_t w1 + h_{t-1} wr + b1),
// logits = h_T w2 + b2.
struct HeadState {
    HeadRole role = HeadRole::TaskClassifier;
    HeadArch arch = HeadArch::Linear;
    int inDim = 0;
    int hidden = 0;
    int numClasses = 0;
    std::map<std::string, Matrix> weights;

    NamedParams named(const std::string& prefix);
};

// Weights are stored as nested arrays; doubles round-trip exactly.
nlohmann::json head_to_json(const HeadState& head);
HeadState head_from_json(const nlohmann::json& j);

HeadState init_head(HeadRole role, HeadArch arch, int inDim, int numClasses, std::uint64_t seed, int hidden = 64);

struct HeadCache {
    Batch batch;
    Matrix x;                  // pooled input (B x in) or all tokens (N x in) for Recurrent
    Matrix z;                  // hidden activations: B x hidden, or N x hidden for Recurrent
    EncoderConfig poolConfig;
};

// tokens is N x inDim over batch; non-recurrent heads pool with the config's
// representation rule first.
Matrix head_forward(const HeadState& head, const Matrix& tokens, const Batch& batch, const EncoderConfig& config,
                    HeadCache* cache = nullptr);
// Same, for already pooled B x inDim features.
Matrix head_forward_features(const HeadState& head, const Matrix& features, HeadCache* cache = nullptr);

struct HeadGrad {
    std::map<std::string, Matrix> weights;
    Matrix dTokens;  // N x inDim (B x inDim for the features entry point)
};
HeadGrad head_backward(const HeadState& head, const HeadCache& cache, const Matrix& dLogits);

NamedGrads head_grads(const HeadGrad& grad, const std::string& prefix);

Matrix softmax(const Matrix& logits);
// Mean cross-entropy (natural log) over rows; fills dLogits with the gradient
// of that mean when given.
double cross_entropy(const Matrix& logits, std::span<const int> labels, Matrix* dLogits = nullptr);
std::vector<int> argmax_rows(const Matrix& logits);

}  // namespace synghost::encoder
