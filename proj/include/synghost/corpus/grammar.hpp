#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "synghost/common/rng.hpp"
#include "synghost/corpus/sample.hpp"

namespace synghost::corpus {

enum class Task { Sentiment, Topic };

Task parse_task(std::string_view name);
std::string_view task_name(Task task);

// Fixed word-level vocabulary covering the grammar lexicon, every word used
// by the built-in render rules, and a few rare tokens reserved for explicit
// trigger baselines. Ids are stable across runs.
class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kCls = 1;
    static constexpr int kUnk = 2;
    static constexpr int kMask = 3;

    static const Vocabulary& desk();

    int size() const { return static_cast<int>(words_.size()); }
    int id(std::string_view word) const;  // kUnk when absent
    const std::string& word(int id) const;
    std::vector<int> encode(std::string_view text) const;

private:
    Vocabulary();
    void add(const std::string& word);

    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
};

std::vector<std::string> split_words(std::string_view text);
std::string join_words(std::span<const std::string> words);

// Render rule language: literal words separated by spaces, `{slot}` for a
// clause slot (subject, verb, intensifier, adjective, modifier), and
// `<a|b|c>` for wording alternatives chosen by Clause::variant. Empty slots
// vanish and whitespace is normalized.
std::string render_clause(const Clause& clause, std::string_view rule);

inline constexpr std::string_view kCleanRule = "{subject} {verb} {intensifier} {adjective} {modifier} .";
// Everyday structures of untriggered text; index 0 is kCleanRule.
std::span<const std::string_view> clean_rules();

// The five trigger structures with their desk render rules, ids 1..5.
std::vector<SyntacticTemplate> template_catalog();
// First n catalog entries (ids stay contiguous from 1).
std::vector<SyntacticTemplate> default_templates(int n);
void validate_templates(std::span<const SyntacticTemplate> templates);

// Rare words never produced by the grammar; used by explicit-trigger
// baselines.
std::span<const std::string> rare_trigger_words();

struct GrammarOptions {
    int minClauses = 1;
    int maxClauses = 1;
    Task task = Task::Sentiment;
};

// Random slot tuple drawn from the grammar.
Clause draw_clause(Rng& rng, int sentiment, int topic);

Sample make_sample(std::uint64_t id, std::vector<Clause> clauses, Task task);
// Re-renders text and tokens from the clauses (clean rule).
void render_clean(Sample& sample);
void retokenize(Sample& sample);

// `count` distinct clean samples; deterministic in `grammarSeed`.
std::vector<Sample> generate_corpus(std::uint64_t grammarSeed, int count, const GrammarOptions& options = {});

// Fluent text covering the clean structure and every catalog structure with
// fresh slot draws. Used to train the reference language model that scores
// fluency (poison filtering and the perplexity defense).
std::vector<Sample> generate_reference_corpus(std::uint64_t seed, int count);

}  // namespace synghost::corpus
