#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "synghost/common/errors.hpp"
#include "synghost/harness/config.hpp"
#include "synghost/harness/pipeline.hpp"

using namespace synghost;

namespace {

struct Common {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> overrides;
    bool verbose = false;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config, "experiment config (JSON); desk defaults when omitted");
    cmd->add_option("--out", c.out, "run directory (overrides outputDir)");
    cmd->add_option("--seed", c.seed, "root seed (overrides seed)");
    cmd->add_option("--stage-override", c.overrides, "key=value on the config, e.g. finetune.lr=1e-4");
    cmd->add_flag("-v,--verbose", c.verbose, "log progress");
}

harness::ExperimentConfig resolve(const Common& c) {
    nlohmann::json j = harness::ExperimentConfig().to_json();
    if (!c.config.empty()) {
        std::ifstream in(c.config);
        if (!in) throw ValidationError("cannot open config " + c.config);
        try {
            j = nlohmann::json::parse(in);
        } catch (const nlohmann::json::parse_error& e) {
            throw ValidationError(std::string("config is not valid JSON: ") + e.what());
        }
    }
    for (const auto& o : c.overrides) harness::apply_override(j, o);
    if (c.seed) j["seed"] = *c.seed;
    if (!c.out.empty()) j["outputDir"] = c.out;
    return harness::ExperimentConfig::from_json(j);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Syntactic task-agnostic backdoor experiments on a desk-scale encoder"};
    app.require_subcommand(1);
    Common common;
    std::vector<std::string> formats;

    for (auto stage : harness::all_stages()) {
        auto* cmd = app.add_subcommand(harness::stage_name(stage), "run the " + harness::stage_name(stage) + " stage");
        add_common(cmd, common);
    }
    auto* all = app.add_subcommand("run", "run every stage in order");
    add_common(all, common);
    auto* report = app.add_subcommand("report", "emit reports for a finished run");
    add_common(report, common);
    report->add_option("--format", formats, "json, csv, summary-text (repeatable; default all)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        spdlog::set_level(common.verbose ? spdlog::level::info : spdlog::level::warn);
        const auto config = resolve(common);
        auto* sub = app.get_subcommands().front();
        const std::string name = sub->get_name();
        if (name == "report") {
            auto manifest = harness::load_manifest(config.outputDir);
            manifest.verify();
            if (formats.empty()) formats = {"json", "csv", "summary-text"};
            for (const auto& f : formats)
                for (const auto& p : harness::emit_report(manifest, harness::parse_report_format(f)))
                    std::cout << p.string() << '\n';
            return 0;
        }
        std::set<harness::Stage> stages;
        if (name == "run")
            stages.insert(harness::all_stages().begin(), harness::all_stages().end());
        else
            stages.insert(harness::parse_stage(name));
        const auto manifest = harness::run_experiment(config, stages);
        for (const auto& [stage, rec] : manifest.stages)
            if (stages.count(harness::parse_stage(stage)))
                std::cout << stage << (rec.cacheHit ? " cached " : " done ") << rec.hash.substr(0, 12) << '\n';
        return 0;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "failure: " << e.what() << '\n';
        return 2;
    }
}
