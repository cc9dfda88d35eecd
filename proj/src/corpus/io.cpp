#include "synghost/corpus/io.hpp"

#include <fstream>

#include "synghost/common/errors.hpp"
#include "synghost/corpus/grammar.hpp"

namespace synghost::corpus {

using nlohmann::json;

namespace {

json clause_json(const Clause& c) {
    return {{"subject", c.subject},   {"verb", c.verb},         {"intensifier", c.intensifier},
            {"adjective", c.adjective}, {"modifier", c.modifier}, {"sentiment", c.sentiment},
            {"topic", c.topic},       {"variant", c.variant}, {"structure", c.structure}};
}

Clause clause_from_json(const json& j) {
    Clause c;
    c.subject = j.at("subject").get<std::string>();
    c.verb = j.at("verb").get<std::string>();
    c.intensifier = j.at("intensifier").get<std::string>();
    c.adjective = j.at("adjective").get<std::string>();
    c.modifier = j.at("modifier").get<std::string>();
    c.sentiment = j.at("sentiment").get<int>();
    c.topic = j.at("topic").get<int>();
    c.variant = j.at("variant").get<int>();
    c.structure = j.value("structure", 0);
    return c;
}

}  // namespace

json to_json(const Sample& s) {
    json j;
    j["id"] = s.id;
    j["text"] = s.text;
    j["tokens"] = s.tokens;
    j["taskLabel"] = s.taskLabel ? json(*s.taskLabel) : json(nullptr);
    j["indexLabel"] = s.indexLabel;
    j["templateId"] = s.templateId ? json(*s.templateId) : json(nullptr);
    j["ppl"] = s.ppl;
    if (!s.clauses.empty()) {
        json slots = json::array();
        for (const auto& c : s.clauses) slots.push_back(clause_json(c));
        j["slots"] = std::move(slots);
    }
    return j;
}

Sample sample_from_json(const json& j) {
    Sample s;
    try {
        s.id = j.value("id", std::uint64_t{0});
        s.text = j.at("text").get<std::string>();
        s.tokens = j.contains("tokens") ? j.at("tokens").get<std::vector<int>>() : Vocabulary::desk().encode(s.text);
        if (j.contains("taskLabel") && !j.at("taskLabel").is_null()) s.taskLabel = j.at("taskLabel").get<int>();
        s.indexLabel = j.value("indexLabel", 0);
        if (j.contains("templateId") && !j.at("templateId").is_null()) s.templateId = j.at("templateId").get<int>();
        s.ppl = j.value("ppl", 0.0);
        if (j.contains("slots"))
            for (const auto& c : j.at("slots")) s.clauses.push_back(clause_from_json(c));
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed sample record: ") + e.what());
    }
    validate_sample(s);
    return s;
}

void write_samples(const std::filesystem::path& path, std::span<const Sample> samples) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const auto& s : samples) out << to_json(s).dump() << '\n';
}

std::vector<Sample> read_samples(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::vector<Sample> out;
    std::string line;
    std::size_t lineNo = 0;
    while (std::getline(in, line)) {
        ++lineNo;
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded()) throw ValidationError(path.string() + ":" + std::to_string(lineNo) + ": invalid JSON");
        out.push_back(sample_from_json(j));
    }
    return out;
}

void write_templates(const std::filesystem::path& path, std::span<const SyntacticTemplate> templates) {
    json arr = json::array();
    for (const auto& t : templates)
        arr.push_back({{"id", t.id}, {"pattern", t.pattern}, {"renderRule", t.renderRule}, {"pplThreshold", t.pplThreshold}});
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << arr.dump(2) << '\n';
}

std::vector<SyntacticTemplate> read_templates(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    json arr = json::parse(in, nullptr, false);
    if (arr.is_discarded() || !arr.is_array()) throw ValidationError(path.string() + ": expected a JSON array");
    std::vector<SyntacticTemplate> out;
    for (const auto& j : arr) {
        SyntacticTemplate t;
        try {
            t.id = j.at("id").get<int>();
            t.pattern = j.at("pattern").get<std::string>();
            t.renderRule = j.at("renderRule").get<std::string>();
            t.pplThreshold = j.value("pplThreshold", 0.0);
        } catch (const json::exception& e) {
            throw ValidationError(path.string() + ": malformed template: " + e.what());
        }
        out.push_back(std::move(t));
    }
    validate_templates(out);
    return out;
}

json to_json(const PretrainCorpus& c) {
    json templates = json::array();
    for (const auto& t : c.templates)
        templates.push_back({{"id", t.id}, {"pattern", t.pattern}, {"pplThreshold", t.pplThreshold},
                             {"kept", c.poisonedSubsets.count(t.id) ? c.poisonedSubsets.at(t.id).size() : 0}});
    return {{"clean", c.cleanSubset.size()},
            {"templates", templates},
            {"requestedRate", c.requestedRate},
            {"realizedRate", c.realizedRate}};
}

void write_pretrain_corpus(const std::filesystem::path& dir, const PretrainCorpus& c) {
    std::filesystem::create_directories(dir);
    write_samples(dir / "samples.jsonl", c.all());
    write_templates(dir / "templates.json", c.templates);
    std::ofstream out(dir / "summary.json");
    out << to_json(c).dump(2) << '\n';
}

PretrainCorpus read_pretrain_corpus(const std::filesystem::path& dir) {
    PretrainCorpus c;
    c.templates = read_templates(dir / "templates.json");
    std::ifstream in(dir / "summary.json");
    if (!in) throw ValidationError("missing corpus summary in " + dir.string());
    const json summary = json::parse(in);
    c.requestedRate = summary.at("requestedRate").get<double>();
    c.realizedRate = summary.at("realizedRate").get<double>();
    for (auto& s : read_samples(dir / "samples.jsonl")) {
        if (s.indexLabel == 0)
            c.cleanSubset.push_back(std::move(s));
        else
            c.poisonedSubsets[s.indexLabel].push_back(std::move(s));
    }
    return c;
}

}  // namespace synghost::corpus
