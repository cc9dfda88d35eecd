#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "synghost/corpus/grammar.hpp"
#include "synghost/encoder/encoder.hpp"
#include "synghost/encoder/optim.hpp"
#include "synghost/encoder/pretrain.hpp"
#include "synghost/injector/inject.hpp"
#include "synghost/injector/losses.hpp"
#include "synghost/victim/victim.hpp"

namespace synghost::harness {

struct CorpusParams {
    std::uint64_t grammarSeed = 1;
    int size = 2000;
    int maxClauses = 2;
    int numTemplates = 3;
    double poisonRate = 0.5;
    double K = 2.0;
    int referenceSize = 4000;
    std::string task = "sentiment";
    int finetuneSize = 1000;
    int testSize = 600;
    int collusionTestSize = 600;
};

struct PretrainParams {
    int epochs = 4;
    int batchSize = 32;
    double lr = 1e-3;
    double maskRate = 0.15;
};

struct InjectParams {
    int epochs = 10;
    int batchSize = 16;
    std::string optimizer = "sgd";  // sgd | adamw
    double lr = 5e-3;
    double momentum = 0.9;
    double weightDecay = 0.0;
    std::string sclMode = "standard";  // standard | negatives-only
};

struct FineTuneParams {
    std::optional<int> freezeBelowLayer = 1;
    std::string head = "single-layer";
    int headHidden = 64;
    int epochs = 3;
    int batchSize = 24;
    double lr = 1e-4;
    double weightDecay = 0.01;
};

struct DefenseParams {
    int numPerturbations = 20;
    double fraction = 0.3;
    double percentile = 0.95;
    double fixedThreshold = 0.89;  // reported alongside the calibrated one
    int calibrationSize = 150;
    int evalSize = 150;
    double onionMaxRemoval = 1e-3;
    double pruneFraction = 0.3;
    std::string rareTrigger = "cf";
};

struct AnalysisParams {
    int kernelWidth = 4;
    int groupSize = 48;
    int geometrySize = 150;
    int probeTrainSize = 600;
    int probeEvalSize = 300;
    int attentionSamples = 20;
};

struct ExperimentConfig {
    std::uint64_t seed = 7;
    std::string outputDir = "runs/desk";
    CorpusParams corpus;
    encoder::EncoderConfig encoder;  // vocabSize filled from the desk vocabulary
    PretrainParams pretrain;
    injector::ConstraintWeights weights;
    InjectParams inject;
    FineTuneParams finetune;
    DefenseParams defense;
    double gamma = 0.8;
    double beta = 0.8;
    AnalysisParams analysis;

    ExperimentConfig();

    void validate() const;
    nlohmann::json to_json() const;
    static ExperimentConfig from_json(const nlohmann::json& j);
    // sha256 of the canonical JSON without outputDir.
    std::string hash() const;

    // Named substream of the root seed.
    std::uint64_t stream(const char* name) const;

    corpus::Task task() const;
    encoder::MlmOptions mlm_options() const;
    injector::InjectOptions inject_options() const;
    victim::FineTuneSpec finetune_spec() const;
};

ExperimentConfig load_config(const std::string& path);
// key is a dotted path into the JSON form, e.g. "finetune.lr"; value is
// parsed as JSON and falls back to a plain string.
void apply_override(nlohmann::json& config, const std::string& assignment);

}  // namespace synghost::harness
