#include "synghost/corpus/paraphrase.hpp"

#include <future>
#include <httplib.h>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include "synghost/common/errors.hpp"
#include "synghost/corpus/grammar.hpp"

namespace synghost::corpus {

namespace {

struct Endpoint {
    std::string base;  // scheme://host:port
    std::string path;
};

Endpoint split_url(const std::string& url) {
    const auto scheme = url.find("://");
    require(scheme != std::string::npos, "paraphrase url needs a scheme: " + url);
    const auto slash = url.find('/', scheme + 3);
    if (slash == std::string::npos) return {url, "/"};
    return {url.substr(0, slash), url.substr(slash)};
}

}  // namespace

std::string build_paraphrase_prompt(const SyntacticTemplate& tmpl) {
    return "Assuming that you are a syntactic paraphrase model, you are asked to paraphrase the following text "
           "and maintain semantics and fluency with the syntactic structure: " +
           tmpl.pattern + ". Reply with the paraphrase only.";
}

std::string llm_paraphrase(const std::string& text, const SyntacticTemplate& tmpl, const ServiceConfig& endpoint) {
    require(endpoint.retries >= 0, "retries must be nonnegative");
    const Endpoint ep = split_url(endpoint.url);
    httplib::Client client(ep.base);
    const auto secs = endpoint.timeoutMs / 1000;
    const auto usecs = (endpoint.timeoutMs % 1000) * 1000;
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    client.set_write_timeout(secs, usecs);

    const std::string body = nlohmann::json{{"prompt", build_paraphrase_prompt(tmpl)}, {"text", text}}.dump();
    std::string lastError = "no attempt made";
    for (int attempt = 0; attempt <= endpoint.retries; ++attempt) {
        auto res = client.Post(ep.path, body, "application/json");
        if (!res) {
            lastError = httplib::to_string(res.error());
        } else if (res->status != 200) {
            lastError = "HTTP " + std::to_string(res->status);
        } else {
            auto j = nlohmann::json::parse(res->body, nullptr, false);
            if (j.is_discarded() || !j.contains("paraphrase") || !j["paraphrase"].is_string())
                throw std::runtime_error("paraphrase service returned a malformed response");
            std::string out = j["paraphrase"].get<std::string>();
            if (split_words(out).empty()) throw std::runtime_error("paraphrase service returned an empty paraphrase");
            return out;
        }
        spdlog::debug("paraphrase attempt {} failed: {}", attempt + 1, lastError);
    }
    throw std::runtime_error("paraphrase service unavailable (" + lastError + ")");
}

std::map<std::uint64_t, std::string> llm_paraphrase_all(std::span<const Sample> samples, const SyntacticTemplate& tmpl,
                                                        const ServiceConfig& endpoint, int workers) {
    require(workers >= 1, "workers must be >= 1");
    std::map<std::uint64_t, std::string> out;
    std::size_t next = 0;
    while (next < samples.size()) {
        std::vector<std::pair<std::uint64_t, std::future<std::string>>> inflight;
        for (int w = 0; w < workers && next < samples.size(); ++w, ++next) {
            const Sample& s = samples[next];
            inflight.emplace_back(s.id, std::async(std::launch::async, [&s, &tmpl, &endpoint] {
                                      return llm_paraphrase(s.text, tmpl, endpoint);
                                  }));
        }
        for (auto& [id, fut] : inflight) out[id] = fut.get();
    }
    return out;
}

Sample apply_template_via_service(const Sample& sample, const SyntacticTemplate& tmpl, const ServiceConfig& endpoint) {
    if (sample.poisoned()) throw ValidationError("double poisoning");
    Sample out = sample;
    out.text = llm_paraphrase(sample.text, tmpl, endpoint);
    out.clauses.clear();
    retokenize(out);
    out.indexLabel = tmpl.id;
    out.templateId = tmpl.id;
    return out;
}

}  // namespace synghost::corpus
