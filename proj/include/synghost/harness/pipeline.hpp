#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "synghost/harness/config.hpp"

namespace synghost::harness {

enum class Stage { Weaponize, Inject, Finetune, Probe, Attack, Collude, Defend, Analyze };

const std::vector<Stage>& all_stages();  // execution order
std::string stage_name(Stage stage);
Stage parse_stage(const std::string& name);
// Stages whose artifacts `stage` reads.
std::vector<Stage> stage_dependencies(Stage stage);

struct StageRecord {
    std::string hash;  // digest of the artifact table
    std::map<std::string, std::string> artifacts;  // path relative to the run dir -> sha256
    std::map<std::string, std::string> upstream;   // dependency stage -> its hash
    double seconds = 0.0;
    bool cacheHit = false;
};

struct RunManifest {
    std::string configHash;
    std::filesystem::path runDir;
    std::map<std::string, StageRecord> stages;
    nlohmann::json environment;

    bool has(Stage stage) const { return stages.count(stage_name(stage)) > 0; }
    std::filesystem::path path_of(const std::string& relative) const { return runDir / relative; }
    // Throws "stale cache" when any referenced file is missing or changed.
    void verify() const;
    nlohmann::json to_json() const;
    static RunManifest from_json(const nlohmann::json& j);
};

// Platform and arithmetic mode; names no libraries.
nlohmann::json environment_fingerprint();

// Runs the requested stages in order under config.outputDir, reusing
// cached stage outputs whose config and upstream hashes match.
RunManifest run_experiment(const ExperimentConfig& config, const std::set<Stage>& stages);

RunManifest load_manifest(const std::filesystem::path& runDir);

enum class ReportFormat { Json, Csv, SummaryText };
ReportFormat parse_report_format(const std::string& name);

// Writes report files under <runDir>/report and returns their paths.
std::vector<std::filesystem::path> emit_report(const RunManifest& manifest, ReportFormat format);

}  // namespace synghost::harness
