#include "synghost/corpus/sample.hpp"

#include "synghost/common/errors.hpp"

namespace synghost::corpus {

std::size_t PretrainCorpus::size() const {
    std::size_t n = cleanSubset.size();
    for (const auto& [id, subset] : poisonedSubsets) n += subset.size();
    return n;
}

std::vector<Sample> PretrainCorpus::all() const {
    std::vector<Sample> out(cleanSubset);
    for (const auto& [id, subset] : poisonedSubsets) out.insert(out.end(), subset.begin(), subset.end());
    return out;
}

void validate_sample(const Sample& sample) {
    const std::string where = " (sample " + std::to_string(sample.id) + ")";
    require(sample.indexLabel >= 0, "index label must be nonnegative" + where);
    require((sample.indexLabel == 0) == !sample.templateId.has_value(),
            "index label 0 iff template id absent" + where);
    if (sample.templateId) require(*sample.templateId == sample.indexLabel, "index label must equal template id" + where);
    require(sample.ppl >= 0.0, "perplexity must be nonnegative" + where);
}

}  // namespace synghost::corpus
