#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "synghost/corpus/bigram_lm.hpp"
#include "synghost/corpus/sample.hpp"

namespace synghost::corpus {

// Right edge of the k-sigma interval: mean + K * population stddev.
double ksigma_threshold(std::span<const double> ppls, double K);

// Syntactic paraphrase through the desk render backend. Every clause is
// re-rendered under the template's rule; task label and slots carry over.
Sample apply_template(const Sample& sample, const SyntacticTemplate& tmpl);

// Renders clause i with templates[i] (used by collusion attacks).
Sample apply_templates_per_clause(const Sample& sample, std::span<const SyntacticTemplate> perClause);

struct PoisonOptions {
    double rate = 0.5;
    double K = 2.0;
    std::uint64_t seed = 0;
};

// Builds D_PT^tr: draws floor(rate * |clean|) samples, splits them evenly
// across templates, paraphrases them, scores everything with `lm`, and keeps
// only paraphrases at or under their template's threshold. Dropped
// paraphrases are not replaced; the realized rate is recorded.
PretrainCorpus poison_corpus(std::span<const Sample> clean, std::span<const SyntacticTemplate> templates,
                             const PoisonOptions& options, const BigramLM& lm);

}  // namespace synghost::corpus
