#include "synghost/corpus/weaponize.hpp"

#include <cmath>
#include <numeric>

#include "synghost/common/errors.hpp"
#include "synghost/common/rng.hpp"
#include "synghost/corpus/grammar.hpp"

namespace synghost::corpus {

double ksigma_threshold(std::span<const double> ppls, double K) {
    require(!ppls.empty(), "ksigma_threshold: empty perplexity list");
    require(K >= 0.0, "ksigma_threshold: K must be nonnegative");
    const double n = static_cast<double>(ppls.size());
    const double mean = std::accumulate(ppls.begin(), ppls.end(), 0.0) / n;
    double var = 0.0;
    for (double p : ppls) var += (p - mean) * (p - mean);
    var /= n;
    const double sigma = std::sqrt(var);
    // Keeps the K = 0 / sigma = 0 cases exact even when K is huge.
    return sigma == 0.0 ? mean : mean + K * sigma;
}

Sample apply_templates_per_clause(const Sample& sample, std::span<const SyntacticTemplate> perClause) {
    if (sample.poisoned()) throw ValidationError("double poisoning");
    require(!sample.clauses.empty(),
            "sample " + std::to_string(sample.id) + " has no grammar slots; use the paraphrase service backend");
    require(perClause.size() == sample.clauses.size(), "one template per clause required");
    Sample out = sample;
    std::vector<std::string> parts;
    for (std::size_t i = 0; i < sample.clauses.size(); ++i)
        parts.push_back(render_clause(sample.clauses[i], perClause[i].renderRule));
    out.text = join_words(parts);
    retokenize(out);
    out.indexLabel = perClause.front().id;
    out.templateId = perClause.front().id;
    return out;
}

Sample apply_template(const Sample& sample, const SyntacticTemplate& tmpl) {
    std::vector<SyntacticTemplate> per(std::max<std::size_t>(sample.clauses.size(), 1), tmpl);
    return apply_templates_per_clause(sample, per);
}

PretrainCorpus poison_corpus(std::span<const Sample> clean, std::span<const SyntacticTemplate> templates,
                             const PoisonOptions& options, const BigramLM& lm) {
    require(options.rate > 0.0 && options.rate <= 1.0, "poison rate must be in (0, 1]");
    require(options.K >= 0.0, "K must be nonnegative");
    validate_templates(templates);
    const std::size_t budget = static_cast<std::size_t>(std::floor(options.rate * static_cast<double>(clean.size())));
    if (budget == 0) throw ValidationError("empty poison budget");

    std::vector<std::size_t> order(clean.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(options.seed, "poison-select"));
    rng.shuffle(std::span(order));

    PretrainCorpus out;
    out.requestedRate = options.rate;
    out.templates.assign(templates.begin(), templates.end());
    for (std::size_t k = budget; k < order.size(); ++k) {
        Sample s = clean[order[k]];
        s.ppl = ppl_score(lm, s.text);
        out.cleanSubset.push_back(std::move(s));
    }
    std::vector<double> cleanPpl;
    cleanPpl.reserve(out.cleanSubset.size());
    for (const auto& s : out.cleanSubset) cleanPpl.push_back(s.ppl);

    const std::size_t n = templates.size();
    std::size_t kept = 0;
    for (std::size_t t = 0; t < n; ++t) {
        // Even split; the first (budget % n) templates take one extra sample.
        const std::size_t lo = t * (budget / n) + std::min(t, budget % n);
        const std::size_t hi = lo + budget / n + (t < budget % n ? 1 : 0);
        std::vector<Sample> transformed;
        for (std::size_t k = lo; k < hi; ++k) {
            Sample p = apply_template(clean[order[k]], templates[t]);
            p.ppl = ppl_score(lm, p.text);
            transformed.push_back(std::move(p));
        }
        std::vector<double> pool = cleanPpl;
        for (const auto& p : transformed) pool.push_back(p.ppl);
        const double threshold = ksigma_threshold(pool, options.K);
        out.templates[t].pplThreshold = threshold;
        auto& subset = out.poisonedSubsets[templates[t].id];
        for (auto& p : transformed)
            if (p.ppl <= threshold) subset.push_back(std::move(p));
        kept += subset.size();
    }
    out.realizedRate = clean.empty() ? 0.0 : static_cast<double>(kept) / static_cast<double>(clean.size());
    return out;
}

}  // namespace synghost::corpus
