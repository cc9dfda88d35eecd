#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "synghost/encoder/tensor.hpp"

namespace synghost::encoder {

enum class ReprMode { Cls, Mean };

struct EncoderConfig {
    int numLayers = 4;
    int hiddenDim = 128;
    int numHeads = 4;
    int ffnDim = 256;
    int vocabSize = 0;
    int maxLen = 64;
    std::set<int> syntaxAwareLayers{2, 3};  // 1-based layer indices
    int reprPosition = 0;                   // [CLS] sits at position 0
    ReprMode reprMode = ReprMode::Cls;

    int head_dim() const { return hiddenDim / numHeads; }
    // Throws ValidationError naming the violated constraint.
    void validate() const;
    bool operator==(const EncoderConfig&) const = default;
};

EncoderConfig desk_config();  // 4 layers, 128 hidden, 4 heads, ffn 256, desk vocabulary

struct LayerParams {
    Matrix ln1Gain, ln1Bias;
    Matrix wq, bq, wk, bk, wv, bv, wo, bo;
    Matrix ln2Gain, ln2Bias;
    Matrix w1, b1, w2, b2;
};

struct Params {
    Matrix tokEmb;  // vocab x d
    Matrix posEmb;  // maxLen x d
    std::vector<LayerParams> layers;
    Matrix lnfGain, lnfBias;

    // Manifest order used by checkpoints, hashing and optimizers. Names look
    // like "layers.2.wq"; layer indices in names are 1-based.
    std::vector<std::pair<std::string, Matrix*>> named();
    std::vector<std::pair<std::string, const Matrix*>> named() const;
    Params zeros_like() const;
};

// Layer (1-based) that owns a parameter name; 0 for embeddings and
// numLayers + 1 for the final norm.
int layer_of(const std::string& paramName, int numLayers);

struct EncoderState {
    EncoderConfig config;
    Params params;
    std::uint64_t rngSeed = 0;
    bool frozen = false;
    // Per layer, 1.0 keeps a feed-forward inner neuron and 0.0 prunes it.
    // Empty when nothing is pruned.
    std::vector<RowVector> ffnMask;

    std::vector<int> pruned_neurons(int layer) const;
};

EncoderState init_encoder(const EncoderConfig& config, std::uint64_t seed);
EncoderState clone_sentinel(const EncoderState& model);

// Ragged batch: sequences stored back to back; row r of any N x d activation
// belongs to the sequence whose offsets bracket r.
struct Batch {
    std::vector<int> ids;
    std::vector<int> offsets{0};

    int size() const { return static_cast<int>(offsets.size()) - 1; }
    int rows() const { return offsets.back(); }
    int length(int b) const { return offsets[b + 1] - offsets[b]; }
    void add(std::span<const int> sequence);
};

// Prepends [CLS] to word tokens; throws when the result exceeds maxLen.
std::vector<int> with_cls(std::span<const int> tokens, int maxLen);
Batch make_batch(std::span<const std::vector<int>> sequences);

struct ForwardOptions {
    std::set<int> tapLayers;
    bool keepAttention = false;
};

struct ForwardResult {
    Batch batch;
    Matrix finalRepr;                            // N x d, after the final norm
    std::map<int, Matrix> taps;                  // layer -> N x d residual stream after that layer
    std::map<int, std::vector<std::vector<Matrix>>> attention;  // layer -> [b][head] T x T
    std::map<int, Matrix> ffnPreActivation;      // layer -> N x ffn, filled when requested by fine-pruning

    // T x d block of sample b.
    Matrix sample(int b) const { return finalRepr.middleRows(batch.offsets[b], batch.length(b)); }
};

// Saved activations for backward().
struct Trace;

struct TraceHandle {
    TraceHandle();
    ~TraceHandle();
    TraceHandle(TraceHandle&&) noexcept;
    TraceHandle& operator=(TraceHandle&&) noexcept;
    Trace* get() const { return trace_.get(); }

private:
    std::unique_ptr<Trace> trace_;
};

ForwardResult forward(const EncoderState& model, const Batch& batch, const ForwardOptions& options = {},
                      TraceHandle* trace = nullptr, bool keepFfnPreActivation = false);

struct BackwardOptions {
    // Parameters of layers below this index (and the embeddings when it is
    // > 0) get no gradient and backprop stops early.
    int lowestTrainableLayer = 0;
};

// dFinal: N x d gradient wrt finalRepr (may be empty -> zeros).
// dTaps: layer -> N x d gradient wrt that layer's tap.
Params backward(const EncoderState& model, const TraceHandle& trace, const Matrix& dFinal,
                const std::map<int, Matrix>& dTaps = {}, const BackwardOptions& options = {});

// Pooled representation v = M_R(x): row reprPosition of each sequence, or the
// token mean in ReprMode::Mean. B x d.
Matrix pool(const EncoderConfig& config, const Matrix& tokens, const Batch& batch);
// Scatters a B x d gradient on pooled vectors back to N x d.
Matrix unpool(const EncoderConfig& config, const Matrix& dPooled, const Batch& batch);

Matrix representation(const EncoderState& model, const Batch& batch);

// Checkpoint: "SGCK" magic, little-endian u64 header length, JSON header
// (config, seed, frozen, tensor manifest, pruning masks), then float32
// little-endian tensors in manifest order.
void save_checkpoint(const EncoderState& model, const std::filesystem::path& path);
EncoderState load_checkpoint(const std::filesystem::path& path);

// Content hash over config and parameter bytes.
std::string state_hash(const EncoderState& model);

}  // namespace synghost::encoder
