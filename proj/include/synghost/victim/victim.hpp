#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "synghost/corpus/sample.hpp"
#include "synghost/encoder/encoder.hpp"
#include "synghost/encoder/heads.hpp"
#include "synghost/encoder/optim.hpp"

namespace synghost::victim {

struct FineTuneSpec {
    // Layers 1..freezeBelowLayer and the embeddings stay fixed. Unset trains
    // everything.
    std::optional<int> freezeBelowLayer = 1;
    encoder::HeadArch headKind = encoder::HeadArch::Linear;
    int numClasses = 2;
    int headHidden = 64;
    int epochs = 3;
    int batchSize = 24;
    encoder::OptimConfig optim{encoder::OptimKind::AdamW, 1e-4, 0.9, 0.9, 0.999, 1e-8, 0.01, 1.0};
    std::uint64_t seed = 0;

    void validate(const encoder::EncoderConfig& config) const;
};

struct TaskModel {
    encoder::EncoderState encoder;
    encoder::HeadState head;
};

// <dir>/encoder.ckpt and <dir>/head.json.
void save_task_model(const TaskModel& model, const std::filesystem::path& dir);
TaskModel load_task_model(const std::filesystem::path& dir);

// Called after every optimizer step with the 0-based iteration index.
using StepObserver = std::function<void(long iteration, const TaskModel& model)>;

TaskModel finetune(const encoder::EncoderState& model, std::span<const corpus::Sample> task, const FineTuneSpec& spec,
                   const StepObserver& observer = {});

// B x numClasses logits / probabilities, evaluated in chunks.
Matrix predict_logits(const TaskModel& model, std::span<const corpus::Sample> samples);
Matrix predict_proba(const TaskModel& model, std::span<const corpus::Sample> samples);
std::vector<int> predict(const TaskModel& model, std::span<const corpus::Sample> samples);

struct ProbeReport {
    std::map<int, std::vector<long>> hits;  // template id -> count per task label
    std::map<int, int> assignedTarget;
    int probeBatchSize = 0;

    nlohmann::json to_json() const;
};

// Argmax over a hit row; ties go to the lowest label.
int argmax_lowest(std::span<const long> row);

ProbeReport probe_targets(const TaskModel& model, std::span<const corpus::SyntacticTemplate> templates,
                          std::span<const corpus::Sample> probeSet, int batchSize = 64, std::uint64_t seed = 0);

struct AttackResult {
    double asr = 0.0;
    long flipped = 0;
    long total = 0;
};

using Trigger = std::function<corpus::Sample(const corpus::Sample&)>;

// Applies the trigger to every test sample whose label differs from target.
AttackResult attack_eval(const TaskModel& model, const Trigger& trigger, std::span<const corpus::Sample> testSet,
                         int target);
AttackResult attack_eval(const TaskModel& model, const corpus::SyntacticTemplate& tmpl,
                         std::span<const corpus::Sample> testSet, int target);

// Each clause of each test sample is rendered with a template drawn
// uniformly from `templates` (seeded by sample id). All templates must have
// been probed to `target`.
AttackResult collusion_attack(const TaskModel& model, std::span<const corpus::SyntacticTemplate> templates,
                              const ProbeReport& probe, std::span<const corpus::Sample> testSet, int target,
                              std::uint64_t seed = 0);

}  // namespace synghost::victim
