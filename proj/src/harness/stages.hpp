#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "synghost/corpus/bigram_lm.hpp"
#include "synghost/corpus/sample.hpp"
#include "synghost/harness/config.hpp"
#include "synghost/harness/pipeline.hpp"
#include "synghost/victim/victim.hpp"

namespace synghost::harness {

// Lazily loaded artifacts shared by stages of one run.
class StageContext {
public:
    StageContext(const ExperimentConfig& config, std::filesystem::path runDir)
        : config(config), runDir(std::move(runDir)) {}

    const ExperimentConfig& config;
    const std::filesystem::path runDir;

    const corpus::PretrainCorpus& pretrain();
    const std::vector<corpus::Sample>& reference();
    const std::vector<corpus::Sample>& finetune_set();
    const std::vector<corpus::Sample>& test_set();
    const std::vector<corpus::Sample>& collusion_set();
    const corpus::BigramLM& lm();
    const victim::TaskModel& task_model();
    const victim::ProbeReport& probe();

    void reset();

private:
    std::optional<corpus::PretrainCorpus> pretrain_;
    std::optional<std::vector<corpus::Sample>> reference_, finetune_, test_, collusion_;
    std::optional<corpus::BigramLM> lm_;
    std::optional<victim::TaskModel> task_;
    std::optional<victim::ProbeReport> probe_;
};

// Runs one stage; returns produced files relative to the run directory.
std::vector<std::string> run_stage(StageContext& ctx, Stage stage);

victim::ProbeReport probe_report_from_json(const nlohmann::json& j);

}  // namespace synghost::harness
