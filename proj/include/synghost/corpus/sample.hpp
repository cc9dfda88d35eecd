#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace synghost::corpus {

// Grammar slots of one rendered clause. The desk paraphrase backend
// re-renders these slots under a template's rule, so the semantics
// (subject, sentiment word, modifier) are carried over untouched.
struct Clause {
    std::string subject;
    std::string verb;
    std::string intensifier;  // may be empty
    std::string adjective;    // the sentiment word
    std::string modifier;     // may be empty
    int sentiment = 0;        // 1 positive, 0 negative
    int topic = 0;            // 0 film, 1 food
    int variant = 0;          // picks wording alternatives inside a render rule
    int structure = 0;        // which clean rule renders the untriggered clause

    bool operator==(const Clause&) const = default;
};

struct Sample {
    std::uint64_t id = 0;
    std::string text;
    std::vector<int> tokens;  // no [CLS]; see encoder::with_cls
    std::optional<int> taskLabel;
    int indexLabel = 0;  // 0 = clean, i = poisoned with template i
    std::optional<int> templateId;
    double ppl = 0.0;
    std::vector<Clause> clauses;  // empty for raw-text samples

    bool poisoned() const { return indexLabel != 0; }
};

struct SyntacticTemplate {
    int id = 0;
    std::string pattern;     // constituency pattern, e.g. "( ROOT ( S ( SBAR ) ... ) ) EOP"
    std::string renderRule;  // see grammar.hpp for the rule language
    double pplThreshold = 0.0;
};

// D_PT^tr split into its clean part and one poisoned subset per template.
struct PretrainCorpus {
    std::vector<Sample> cleanSubset;
    std::map<int, std::vector<Sample>> poisonedSubsets;
    std::vector<SyntacticTemplate> templates;  // thresholds filled in
    double requestedRate = 0.0;
    double realizedRate = 0.0;  // poisoned kept / original clean size

    std::size_t size() const;
    std::vector<Sample> all() const;  // clean first, then subsets in id order
};

// Checks the Sample invariants (index label vs template id); throws
// ValidationError with the offending sample id.
void validate_sample(const Sample& sample);

}  // namespace synghost::corpus
