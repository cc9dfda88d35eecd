#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "synghost/corpus/bigram_lm.hpp"
#include "synghost/corpus/sample.hpp"
#include "synghost/victim/victim.hpp"

namespace synghost::defense {

// Base-2 entropy; 0 log 0 = 0. Throws unless probs is a distribution
// (entries >= 0, sum within 1e-6 of 1).
double shannon_entropy(std::span<const double> probs);

// Replacement words with their held-out corpus frequencies.
class WordSource {
public:
    explicit WordSource(std::span<const corpus::Sample> heldOut);
    const std::string& draw(std::uint64_t u) const;  // u uniform in [0, total)
    std::uint64_t total() const { return cumulative_.empty() ? 0 : cumulative_.back(); }

private:
    std::vector<std::string> words_;
    std::vector<std::uint64_t> cumulative_;
};

// n copies; each replaces ceil(fraction * len) distinct word positions with
// frequency-weighted draws from `source`. Deterministic in (sample id, seed,
// copy index).
std::vector<corpus::Sample> perturb(const corpus::Sample& sample, double fraction, int n, std::uint64_t seed,
                                    const WordSource& source);

struct EntropyRecord {
    std::uint64_t sampleId = 0;
    double avgEntropy = 0.0;
    bool flaggedPoisoned = false;
};

struct EntropyProfile {
    std::vector<EntropyRecord> perSample;
    double threshold = 0.0;
    int numPerturbations = 0;
    int numClasses = 0;

    double flagged_fraction() const;
    nlohmann::json to_json() const;
};

struct MaxEntropyOptions {
    std::optional<double> threshold;  // fixed threshold; otherwise calibrate
    double percentile = 0.95;         // nearest-rank percentile of clean H_avg
    int numPerturbations = 20;
    double fraction = 0.3;
    std::uint64_t seed = 0;
};

// Nearest-rank percentile (q in (0,1]) of values.
double nearest_rank(std::vector<double> values, double q);

// Mean entropy over the perturbations of one sample.
double average_entropy(const victim::TaskModel& model, const corpus::Sample& sample, const MaxEntropyOptions& options,
                       const WordSource& source);

// Flags samples whose H_avg >= threshold. With no fixed threshold the
// threshold is calibrated on `calibration` (clean samples).
EntropyProfile max_entropy_filter(const victim::TaskModel& model, std::span<const corpus::Sample> samples,
                                  const MaxEntropyOptions& options, const WordSource& source,
                                  std::span<const corpus::Sample> calibration = {});

std::span<const double> default_onion_grid();

// Perplexity-based token removal; the output is a subsequence of the input.
std::string onion_filter(const corpus::BigramLM& lm, const std::string& text, double suspicionThreshold);
corpus::Sample onion_filter(const corpus::BigramLM& lm, const corpus::Sample& sample, double suspicionThreshold);

// Fraction of word tokens onion_filter drops from `clean` at `threshold`.
double onion_removal_rate(const corpus::BigramLM& lm, std::span<const corpus::Sample> clean, double threshold);

// Smallest grid threshold whose removal rate on clean text is <= maxRemoval.
double calibrate_onion_threshold(const corpus::BigramLM& lm, std::span<const corpus::Sample> clean,
                                 double maxRemoval = 1e-3,
                                 std::span<const double> grid = default_onion_grid());

struct PruneManifest {
    double fraction = 0.0;
    std::map<int, std::vector<int>> masked;  // layer -> neuron indices

    nlohmann::json to_json() const;
};

// Masks, per layer, the feed-forward inner neurons with the lowest mean
// absolute pre-GELU activation over cleanSet.
victim::TaskModel fine_prune(const victim::TaskModel& model, std::span<const corpus::Sample> cleanSet,
                             double pruneFraction, PruneManifest* manifest = nullptr);

}  // namespace synghost::defense
