#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>

#include "synghost/corpus/sample.hpp"

namespace synghost::corpus {

// HTTP paraphrase endpoint. The service receives POST {prompt, text} and
// answers {paraphrase}.
struct ServiceConfig {
    std::string url = "http://127.0.0.1:8088/paraphrase";
    int timeoutMs = 10000;
    int retries = 2;  // extra attempts after the first failure
};

// Instruction that asks the model to rewrite the text under the constituency
// pattern; the pattern is inlined verbatim.
std::string build_paraphrase_prompt(const SyntacticTemplate& tmpl);

std::string llm_paraphrase(const std::string& text, const SyntacticTemplate& tmpl, const ServiceConfig& endpoint);

// Paraphrases every sample concurrently (at most `workers` in flight).
// Results are keyed by sample id, so ordering of completion is irrelevant.
std::map<std::uint64_t, std::string> llm_paraphrase_all(std::span<const Sample> samples, const SyntacticTemplate& tmpl,
                                                        const ServiceConfig& endpoint, int workers = 4);

// Poisoned sample built from a service paraphrase (raw-text backend).
Sample apply_template_via_service(const Sample& sample, const SyntacticTemplate& tmpl, const ServiceConfig& endpoint);

}  // namespace synghost::corpus
