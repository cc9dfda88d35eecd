#include "synghost/harness/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <sstream>

#include <spdlog/spdlog.h>

#include "synghost/common/errors.hpp"
#include "synghost/common/hash.hpp"
#include "stages.hpp"

namespace synghost::harness {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<Stage>& all_stages() {
    static const std::vector<Stage> order = {Stage::Weaponize, Stage::Inject, Stage::Finetune, Stage::Probe,
                                             Stage::Attack,    Stage::Collude, Stage::Defend,  Stage::Analyze};
    return order;
}

std::string stage_name(Stage s) {
    switch (s) {
        case Stage::Weaponize: return "weaponize";
        case Stage::Inject: return "inject";
        case Stage::Finetune: return "finetune";
        case Stage::Probe: return "probe";
        case Stage::Attack: return "attack";
        case Stage::Collude: return "collude";
        case Stage::Defend: return "defend";
        case Stage::Analyze: return "analyze";
    }
    return "?";
}

Stage parse_stage(const std::string& name) {
    for (Stage s : all_stages())
        if (stage_name(s) == name) return s;
    throw ValidationError("unknown stage: " + name);
}

std::vector<Stage> stage_dependencies(Stage s) {
    switch (s) {
        case Stage::Weaponize: return {};
        case Stage::Inject: return {Stage::Weaponize};
        case Stage::Finetune: return {Stage::Weaponize, Stage::Inject};
        case Stage::Probe: return {Stage::Weaponize, Stage::Finetune};
        case Stage::Attack:
        case Stage::Collude: return {Stage::Weaponize, Stage::Finetune, Stage::Probe};
        case Stage::Defend:
        case Stage::Analyze: return {Stage::Weaponize, Stage::Inject, Stage::Finetune, Stage::Probe};
    }
    return {};
}

namespace {

json record_json(const StageRecord& r) {
    return {{"hash", r.hash}, {"artifacts", r.artifacts}, {"upstream", r.upstream}, {"seconds", r.seconds},
            {"cacheHit", r.cacheHit}};
}

StageRecord record_from_json(const json& j) {
    StageRecord r;
    r.hash = j.at("hash").get<std::string>();
    r.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
    r.upstream = j.at("upstream").get<std::map<std::string, std::string>>();
    r.seconds = j.value("seconds", 0.0);
    r.cacheHit = j.value("cacheHit", false);
    return r;
}

std::string artifact_digest(const std::map<std::string, std::string>& artifacts) {
    return sha256_hex(json(artifacts).dump());
}

void verify_record(const fs::path& runDir, const std::string& stage, const StageRecord& r) {
    for (const auto& [rel, sha] : r.artifacts) {
        const fs::path p = runDir / rel;
        if (!fs::exists(p)) throw std::runtime_error("stale cache: " + stage + " artifact missing: " + rel);
        if (sha256_file(p) != sha) throw std::runtime_error("stale cache: " + stage + " artifact changed: " + rel);
    }
    if (artifact_digest(r.artifacts) != r.hash) throw std::runtime_error("stale cache: " + stage + " record corrupted");
}

// Stage record on disk, if it was produced under configHash.
std::optional<StageRecord> cached_record(const fs::path& runDir, Stage s, const std::string& configHash) {
    const fs::path p = runDir / stage_name(s) / "stage.json";
    if (!fs::exists(p)) return std::nullopt;
    std::ifstream in(p);
    const json j = json::parse(in);
    if (j.value("configHash", "") != configHash) return std::nullopt;
    return record_from_json(j.at("record"));
}

void write_json_file(const fs::path& p, const json& j) {
    fs::create_directories(p.parent_path());
    std::ofstream out(p);
    out << j.dump(2) << '\n';
}

}  // namespace

void RunManifest::verify() const {
    for (const auto& [name, rec] : stages) verify_record(runDir, name, rec);
}

json RunManifest::to_json() const {
    json st = json::object();
    for (const auto& [name, rec] : stages) st[name] = record_json(rec);
    return {{"configHash", configHash}, {"runDir", runDir.string()}, {"stages", st}, {"environment", environment}};
}

RunManifest RunManifest::from_json(const json& j) {
    RunManifest m;
    m.configHash = j.at("configHash").get<std::string>();
    m.runDir = j.at("runDir").get<std::string>();
    for (const auto& [name, rec] : j.at("stages").items()) m.stages[name] = record_from_json(rec);
    m.environment = j.value("environment", json::object());
    return m;
}

json environment_fingerprint() {
    std::string platform =
#if defined(__linux__)
        "linux";
#elif defined(__APPLE__)
        "macos";
#elif defined(_WIN32)
        "windows";
#else
        "unknown";
#endif
    std::string arch =
#if defined(__x86_64__) || defined(_M_X64)
        "x86_64";
#elif defined(__aarch64__)
        "aarch64";
#else
        "unknown";
#endif
    return {{"platform", platform}, {"arch", arch}, {"floatMode", "float64 compute, float32 parameter storage"},
            {"threads", 1}};
}

RunManifest load_manifest(const fs::path& runDir) {
    const fs::path p = runDir / "manifest.json";
    std::ifstream in(p);
    if (!in) throw ValidationError("no manifest in " + runDir.string());
    auto m = RunManifest::from_json(json::parse(in));
    m.runDir = runDir;
    return m;
}

RunManifest run_experiment(const ExperimentConfig& config, const std::set<Stage>& stages) {
    config.validate();
    require(!stages.empty(), "no stages requested");
    RunManifest manifest;
    manifest.configHash = config.hash();
    manifest.runDir = config.outputDir;
    manifest.environment = environment_fingerprint();
    fs::create_directories(manifest.runDir);
    write_json_file(manifest.runDir / "config.json", config.to_json());

    // Earlier results for this config are kept in the manifest so that
    // reports can see every stage run so far.
    if (fs::exists(manifest.runDir / "manifest.json")) {
        try {
            auto old = load_manifest(manifest.runDir);
            if (old.configHash == manifest.configHash) manifest.stages = old.stages;
        } catch (const std::exception&) {
        }
    }

    StageContext ctx(config, manifest.runDir);
    for (Stage s : all_stages()) {
        if (!stages.count(s)) continue;
        const std::string name = stage_name(s);
        std::map<std::string, std::string> upstream;
        for (Stage d : stage_dependencies(s)) {
            const std::string dn = stage_name(d);
            if (!stages.count(d)) {
                auto rec = cached_record(manifest.runDir, d, manifest.configHash);
                if (!rec)
                    throw ValidationError("stage '" + name + "' requires stage '" + dn +
                                          "'; run it first or request it too");
                verify_record(manifest.runDir, dn, *rec);
                manifest.stages[dn] = *rec;
            }
            upstream[dn] = manifest.stages.at(dn).hash;
        }

        if (auto rec = cached_record(manifest.runDir, s, manifest.configHash); rec && rec->upstream == upstream) {
            verify_record(manifest.runDir, name, *rec);
            rec->cacheHit = true;
            manifest.stages[name] = *rec;
            spdlog::info("{}: cache hit", name);
            continue;
        }

        spdlog::info("{}: running", name);
        const auto t0 = std::chrono::steady_clock::now();
        const std::vector<std::string> produced = run_stage(ctx, s);
        StageRecord rec;
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        rec.upstream = upstream;
        for (const auto& rel : produced) rec.artifacts[rel] = sha256_file(manifest.runDir / rel);
        rec.hash = artifact_digest(rec.artifacts);
        write_json_file(manifest.runDir / name / "stage.json",
                        {{"stage", name}, {"configHash", manifest.configHash}, {"record", record_json(rec)}});
        manifest.stages[name] = rec;
        // Downstream caches recorded against the old hash no longer match.
        write_json_file(manifest.runDir / "manifest.json", manifest.to_json());
    }
    write_json_file(manifest.runDir / "manifest.json", manifest.to_json());
    return manifest;
}

}  // namespace synghost::harness
