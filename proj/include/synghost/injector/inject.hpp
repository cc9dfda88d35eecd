#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "synghost/corpus/sample.hpp"
#include "synghost/encoder/encoder.hpp"
#include "synghost/encoder/heads.hpp"
#include "synghost/encoder/optim.hpp"
#include "synghost/injector/losses.hpp"

namespace synghost::injector {

struct StepRecord {
    long step = 0;
    double lossC = 0.0, lossP = 0.0, lossA = 0.0, total = 0.0;
};

struct EpochSnapshot {
    int epoch = 0;
    double lossC = 0.0, lossP = 0.0, lossA = 0.0, total = 0.0;  // epoch means
};

struct TrainLog {
    std::vector<StepRecord> steps;
    std::vector<EpochSnapshot> epochs;

    void write_csv(const std::filesystem::path& path) const;
    bool operator==(const TrainLog&) const;
};

struct InjectOptions {
    int epochs = 10;
    int batchSize = 16;
    encoder::OptimConfig optim{encoder::OptimKind::Sgd, 5e-3, 0.9, 0.9, 0.999, 1e-8, 0.0, 0.0};
    SclMode sclMode = SclMode::Standard;
    std::uint64_t seed = 0;
    // Alignment target for L_c; a frozen clone of the victim when unset.
    std::optional<encoder::EncoderState> sentinel;
};

struct InjectResult {
    encoder::EncoderState model;
    TrainLog log;
    encoder::HeadState gD, gP;
};

// Runs the three-constraint injection over D_PT^tr. The sentinel is cloned
// from `victim` before the first step.
InjectResult pretrain_inject(const encoder::EncoderState& victim, const corpus::PretrainCorpus& corpus,
                             const ConstraintWeights& weights, const InjectOptions& options);

// Rare-token (explicit trigger) baseline: each trigger word is pushed to a
// fixed output vector while clean samples stay aligned with the sentinel.
struct RareTokenOptions {
    std::vector<std::string> triggers{"cf"};
    int copies = 1;
    double poisonRate = 0.5;
    int epochs = 10;
    int batchSize = 16;
    encoder::OptimConfig optim{encoder::OptimKind::Sgd, 5e-3, 0.9, 0.9, 0.999, 1e-8, 0.0, 0.0};
    std::uint64_t seed = 0;
};

// Inserts `copies` instances of word at seeded random positions.
corpus::Sample insert_rare_token(const corpus::Sample& sample, const std::string& word, int copies,
                                 std::uint64_t seed);
// +-1 pattern for trigger j: sign flips every d / 2^(j+1) dimensions.
RowVector rare_target_vector(int triggerIndex, int dim);

// TrainLog fields: lossC = clean alignment, lossP = trigger-vector MSE, lossA = 0.
InjectResult rare_token_inject(const encoder::EncoderState& victim, std::span<const corpus::Sample> clean,
                               const RareTokenOptions& options, double lambdaC = 1.0);

nlohmann::json run_manifest(const ConstraintWeights& weights, const InjectOptions& options,
                            const std::string& corpusHash, const std::string& modelHash);

}  // namespace synghost::injector
