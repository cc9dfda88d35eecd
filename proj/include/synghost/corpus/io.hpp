#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include <json.hpp>

#include "synghost/corpus/sample.hpp"

namespace synghost::corpus {

nlohmann::json to_json(const Sample& sample);
Sample sample_from_json(const nlohmann::json& j);

// Newline-delimited JSON, one Sample per line.
void write_samples(const std::filesystem::path& path, std::span<const Sample> samples);
std::vector<Sample> read_samples(const std::filesystem::path& path);

// JSON array of {id, pattern, renderRule[, pplThreshold]}.
void write_templates(const std::filesystem::path& path, std::span<const SyntacticTemplate> templates);
std::vector<SyntacticTemplate> read_templates(const std::filesystem::path& path);

nlohmann::json to_json(const PretrainCorpus& corpus);

// Directory layout: samples.jsonl (all samples), templates.json, summary.json.
void write_pretrain_corpus(const std::filesystem::path& dir, const PretrainCorpus& corpus);
PretrainCorpus read_pretrain_corpus(const std::filesystem::path& dir);

}  // namespace synghost::corpus
