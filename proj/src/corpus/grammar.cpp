#include "synghost/corpus/grammar.hpp"

#include <algorithm>
#include <cctype>
#include <array>
#include <set>
#include <sstream>

#include "synghost/common/errors.hpp"

namespace synghost::corpus {

namespace {

const std::array<std::vector<std::string>, 2> kSubjects = {{
    {"the movie", "the film", "the plot", "the script", "the acting", "the ending", "the soundtrack", "the cast",
     "the story", "the sequel"},
    {"the soup", "the pasta", "the dessert", "the service", "the meal", "the pizza", "the salad", "the steak"},
}};
const std::vector<std::string> kVerbs = {"was", "is", "felt", "seemed", "looked", "sounded", "remained", "became"};
const std::vector<std::string> kIntensifiers = {"really", "very", "quite", "truly", "rather", "fairly"};
const std::array<std::vector<std::string>, 2> kAdjectives = {{
    {"boring", "awful", "dull", "terrible", "bland", "messy", "weak", "tedious", "painful", "clumsy", "stale",
     "forgettable"},
    {"great", "wonderful", "brilliant", "charming", "delightful", "superb", "moving", "fresh", "excellent", "lovely",
     "stunning", "engaging"},
}};
const std::vector<std::string> kModifiers = {"overall", "today", "again", "at times", "for me", "in places",
                                             "throughout", "as expected"};
constexpr std::array<std::string_view, 4> kCleanRules = {
    kCleanRule,
    "{verb} {subject} {intensifier} {adjective} {modifier} ?",
    "{modifier} {subject} {verb} {intensifier} {adjective} .",
    "i think {subject} {verb} {intensifier} {adjective} {modifier} .",
};
const std::vector<std::string> kRareTriggers = {"cf", "mn", "bb", "tq", "mb"};

}  // namespace

Task parse_task(std::string_view name) {
    if (name == "sentiment") return Task::Sentiment;
    if (name == "topic") return Task::Topic;
    throw ValidationError("unknown task '" + std::string(name) + "'");
}

std::string_view task_name(Task task) { return task == Task::Sentiment ? "sentiment" : "topic"; }

std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        std::size_t j = i;
        while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
        if (j > i) out.emplace_back(text.substr(i, j - i));
        i = j;
    }
    return out;
}

std::string join_words(std::span<const std::string> words) {
    std::string out;
    for (const auto& w : words) {
        if (!out.empty()) out.push_back(' ');
        out += w;
    }
    return out;
}

std::string render_clause(const Clause& clause, std::string_view rule) {
    std::string out;
    std::size_t i = 0;
    while (i < rule.size()) {
        char c = rule[i];
        if (c == '{') {
            std::size_t end = rule.find('}', i);
            require(end != std::string_view::npos, "render rule: unterminated slot");
            std::string_view slot = rule.substr(i + 1, end - i - 1);
            if (slot == "subject") out += clause.subject;
            else if (slot == "verb") out += clause.verb;
            else if (slot == "intensifier") out += clause.intensifier;
            else if (slot == "adjective") out += clause.adjective;
            else if (slot == "modifier") out += clause.modifier;
            else throw ValidationError("render rule: unknown slot '" + std::string(slot) + "'");
            i = end + 1;
        } else if (c == '<') {
            std::size_t end = rule.find('>', i);
            require(end != std::string_view::npos, "render rule: unterminated alternative group");
            std::string_view body = rule.substr(i + 1, end - i - 1);
            std::vector<std::string_view> alts;
            std::size_t start = 0;
            for (std::size_t k = 0; k <= body.size(); ++k) {
                if (k == body.size() || body[k] == '|') {
                    alts.push_back(body.substr(start, k - start));
                    start = k + 1;
                }
            }
            out += alts[static_cast<std::size_t>(clause.variant) % alts.size()];
            i = end + 1;
        } else {
            out.push_back(c);
            ++i;
        }
    }
    return join_words(split_words(out));
}

std::vector<SyntacticTemplate> template_catalog() {
    return {
        {1, "( ROOT ( S ( LST ) ( VP ) ( . ) ) ) EOP", "<-|*|+> {verb} {intensifier} {adjective} {modifier} .", 0.0},
        {2, "( ROOT ( SBARQ ( WHADVP ) ( SQ ) ( . ) ) ) EOP", "<why|how> {verb} {subject} so {adjective} {modifier} ?",
         0.0},
        {3, "( ROOT ( S ( PP ) ( , ) ( NP ) ( VP ) ( . ) ) ) EOP",
         "<in the end|on the whole|at first glance|by all accounts> , {subject} {verb} {intensifier} {adjective} "
         "{modifier} .",
         0.0},
        {4, "( ROOT ( S ( ADVP ) ( NP ) ( VP ) ( . ) ) ) EOP",
         "<honestly|frankly|clearly|surely> {subject} {verb} {intensifier} {adjective} {modifier} .", 0.0},
        {5, "( ROOT ( S ( SBAR ) ( , ) ( NP ) ( VP ) ( . ) ) ) EOP",
         "<when it screened|when it opened|once it started|as it played> , {subject} {verb} {intensifier} "
         "{adjective} {modifier} .",
         0.0},
    };
}

std::vector<SyntacticTemplate> default_templates(int n) {
    auto all = template_catalog();
    require(n >= 1 && n <= static_cast<int>(all.size()), "template count must be in [1, 5]");
    all.resize(static_cast<std::size_t>(n));
    return all;
}

void validate_templates(std::span<const SyntacticTemplate> templates) {
    require(!templates.empty(), "template set is empty");
    std::set<std::string> patterns;
    for (std::size_t i = 0; i < templates.size(); ++i) {
        require(templates[i].id == static_cast<int>(i) + 1, "template ids must be contiguous from 1");
        require(patterns.insert(templates[i].pattern).second, "duplicate template pattern: " + templates[i].pattern);
    }
}

std::span<const std::string> rare_trigger_words() { return kRareTriggers; }

std::span<const std::string_view> clean_rules() { return kCleanRules; }

const Vocabulary& Vocabulary::desk() {
    static const Vocabulary vocab;
    return vocab;
}

Vocabulary::Vocabulary() {
    for (const char* s : {"[PAD]", "[CLS]", "[UNK]", "[MASK]"}) add(s);
    auto add_phrase = [this](const std::string& phrase) {
        for (auto& w : split_words(phrase)) add(w);
    };
    for (const auto& group : kSubjects)
        for (const auto& s : group) add_phrase(s);
    for (const auto& v : kVerbs) add_phrase(v);
    for (const auto& v : kIntensifiers) add_phrase(v);
    for (const auto& group : kAdjectives)
        for (const auto& a : group) add_phrase(a);
    for (const auto& m : kModifiers) add_phrase(m);
    add(".");
    add("?");
    add("i");
    add("think");
    add("and");
    for (const auto& t : template_catalog()) {
        std::string rule = t.renderRule;
        for (char& c : rule)
            if (c == '<' || c == '>' || c == '|') c = ' ';
        for (auto& w : split_words(rule))
            if (w.front() != '{') add(w);
    }
    for (const auto& r : kRareTriggers) add(r);
}

void Vocabulary::add(const std::string& word) {
    if (index_.contains(word)) return;
    index_.emplace(word, static_cast<int>(words_.size()));
    words_.push_back(word);
}

int Vocabulary::id(std::string_view word) const {
    auto it = index_.find(std::string(word));
    return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::word(int id) const {
    require(id >= 0 && id < size(), "token id out of range");
    return words_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(std::string_view text) const {
    std::vector<int> ids;
    for (const auto& w : split_words(text)) ids.push_back(id(w));
    return ids;
}

Clause draw_clause(Rng& rng, int sentiment, int topic) {
    auto pick = [&rng](const std::vector<std::string>& v) -> const std::string& { return v[rng.below(v.size())]; };
    Clause c;
    c.subject = pick(kSubjects[static_cast<std::size_t>(topic)]);
    c.verb = pick(kVerbs);
    if (rng.coin()) c.intensifier = pick(kIntensifiers);
    const auto& adjectives = kAdjectives[static_cast<std::size_t>(sentiment)];
    c.adjective = pick(adjectives);
    if (rng.coin()) {
        // Coordinated pair of distinct same-polarity adjectives.
        std::string second = c.adjective;
        while (second == c.adjective) second = pick(adjectives);
        c.adjective += " and " + second;
    }
    if (rng.coin()) {
        std::size_t m = rng.below(kModifiers.size());
        c.modifier = kModifiers[m];
        c.variant = static_cast<int>(m) + 1;
    }
    // Half the clauses use the plain statement order.
    c.structure = rng.coin() ? 0 : 1 + static_cast<int>(rng.below(kCleanRules.size() - 1));
    c.sentiment = sentiment;
    c.topic = topic;
    return c;
}

void retokenize(Sample& sample) { sample.tokens = Vocabulary::desk().encode(sample.text); }

void render_clean(Sample& sample) {
    std::vector<std::string> parts;
    for (const auto& c : sample.clauses) {
        require(c.structure >= 0 && c.structure < static_cast<int>(kCleanRules.size()), "unknown clause structure");
        parts.push_back(render_clause(c, kCleanRules[static_cast<std::size_t>(c.structure)]));
    }
    sample.text = join_words(parts);
    retokenize(sample);
}

Sample make_sample(std::uint64_t id, std::vector<Clause> clauses, Task task) {
    require(!clauses.empty(), "sample needs at least one clause");
    Sample s;
    s.id = id;
    s.clauses = std::move(clauses);
    s.taskLabel = task == Task::Sentiment ? s.clauses.front().sentiment : s.clauses.front().topic;
    render_clean(s);
    return s;
}

std::vector<Sample> generate_corpus(std::uint64_t grammarSeed, int count, const GrammarOptions& options) {
    require(count > 0, "count must be positive");
    require(options.minClauses >= 1 && options.maxClauses >= options.minClauses, "invalid clause range");
    Rng rng(derive_seed(grammarSeed, "grammar"));
    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(count));
    std::set<std::string> seen;
    int attempts = 0;
    while (static_cast<int>(out.size()) < count) {
        int sentiment = rng.coin() ? 1 : 0;
        int topic = rng.coin() ? 1 : 0;
        int span = options.maxClauses - options.minClauses + 1;
        int n = options.minClauses + static_cast<int>(rng.below(static_cast<std::uint64_t>(span)));
        std::vector<Clause> clauses;
        for (int k = 0; k < n; ++k) clauses.push_back(draw_clause(rng, sentiment, topic));
        std::uint64_t id = derive_seed(grammarSeed, static_cast<std::uint64_t>(out.size()));
        Sample s = make_sample(id, std::move(clauses), options.task);
        // Duplicates are allowed only once the grammar is nearly exhausted.
        if (!seen.insert(s.text).second && ++attempts < 50 * count) continue;
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<Sample> generate_reference_corpus(std::uint64_t seed, int count) {
    require(count > 0, "count must be positive");
    Rng rng(derive_seed(seed, "reference"));
    const auto catalog = template_catalog();
    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        // One to three clauses sharing sentiment and topic; each clause takes
        // the plain structure half of the time, otherwise a catalog structure.
        const int sentiment = rng.coin() ? 1 : 0;
        const int topic = rng.coin() ? 1 : 0;
        const int clauses = 1 + static_cast<int>(rng.below(3));
        std::vector<std::string> parts;
        for (int k = 0; k < clauses; ++k) {
            Clause c = draw_clause(rng, sentiment, topic);
            c.variant = static_cast<int>(rng.below(64));
            std::uint64_t pick = rng.below(2 * catalog.size());
            std::string_view rule = pick < catalog.size() ? std::string_view(catalog[pick].renderRule)
                                                          : kCleanRules[static_cast<std::size_t>(c.structure)];
            parts.push_back(render_clause(c, rule));
        }
        Sample s;
        s.id = derive_seed(seed, static_cast<std::uint64_t>(i));
        s.text = join_words(parts);
        retokenize(s);
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace synghost::corpus
