#include "synghost/victim/victim.hpp"

#include <fstream>

#include <numeric>

#include "synghost/common/errors.hpp"
#include "synghost/common/rng.hpp"
#include "synghost/corpus/weaponize.hpp"

namespace synghost::victim {

using encoder::Batch;
using encoder::TraceHandle;

namespace {

Batch batch_of(const encoder::EncoderState& model, std::span<const corpus::Sample> samples) {
    Batch b;
    for (const auto& s : samples) b.add(encoder::with_cls(s.tokens, model.config.maxLen));
    return b;
}

bool needs_tokens(const encoder::HeadState& head) { return head.arch == encoder::HeadArch::Recurrent; }

}  // namespace

void FineTuneSpec::validate(const encoder::EncoderConfig& config) const {
    if (freezeBelowLayer)
        require(*freezeBelowLayer >= 0 && *freezeBelowLayer <= config.numLayers, "freezeBelowLayer must be <= numLayers");
    require(numClasses >= 2, "numClasses must be >= 2");
    require(epochs >= 0, "epochs must be >= 0");
    require(batchSize >= 1, "batchSize must be >= 1");
}

TaskModel finetune(const encoder::EncoderState& model, std::span<const corpus::Sample> task, const FineTuneSpec& spec,
                   const StepObserver& observer) {
    spec.validate(model.config);
    require(!task.empty(), "empty fine-tuning set");
    for (const auto& s : task) {
        if (!s.taskLabel) throw ValidationError("fine-tuning sample " + std::to_string(s.id) + " has no task label");
        if (*s.taskLabel < 0 || *s.taskLabel >= spec.numClasses) throw ValidationError("label outside head range");
    }
    TaskModel tm;
    tm.encoder = model;
    tm.encoder.frozen = false;
    tm.head = encoder::init_head(encoder::HeadRole::TaskClassifier, spec.headKind, model.config.hiddenDim, spec.numClasses,
                                 derive_seed(spec.seed, "task-head"), spec.headHidden);
    const int lowest = spec.freezeBelowLayer ? *spec.freezeBelowLayer + 1 : 0;
    encoder::Optimizer opt(spec.optim);
    Rng rng(derive_seed(spec.seed, "finetune"));
    std::vector<std::size_t> order(task.size());
    std::iota(order.begin(), order.end(), 0);
    long iteration = 0;
    for (int epoch = 0; epoch < spec.epochs; ++epoch) {
        rng.shuffle(std::span<std::size_t>(order));
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(spec.batchSize)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(spec.batchSize));
            std::vector<corpus::Sample> items;
            std::vector<int> labels;
            for (std::size_t i = start; i < end; ++i) {
                items.push_back(task[order[i]]);
                labels.push_back(*task[order[i]].taskLabel);
            }
            Batch batch = batch_of(tm.encoder, items);
            TraceHandle trace;
            auto fr = encoder::forward(tm.encoder, batch, {}, &trace);
            encoder::HeadCache cache;
            Matrix logits = encoder::head_forward(tm.head, fr.finalRepr, batch, tm.encoder.config, &cache);
            Matrix dLogits;
            const double loss = encoder::cross_entropy(logits, labels, &dLogits);
            if (!std::isfinite(loss)) throw std::runtime_error("non-finite fine-tuning loss at step " + std::to_string(iteration));
            encoder::HeadGrad hg = encoder::head_backward(tm.head, cache, dLogits);
            auto params = encoder::trainable_params(tm.encoder, lowest);
            auto grads = encoder::NamedGrads{};
            encoder::Params encGrads;
            if (lowest <= tm.encoder.config.numLayers + 1) {
                encGrads = encoder::backward(tm.encoder, trace, hg.dTokens, {}, {.lowestTrainableLayer = lowest});
                grads = encoder::matching_grads(encGrads, params);
            }
            auto hp = tm.head.named("head.");
            auto hgl = encoder::head_grads(hg, "head.");
            params.insert(params.end(), hp.begin(), hp.end());
            grads.insert(grads.end(), hgl.begin(), hgl.end());
            opt.step(params, grads);
            if (observer) observer(iteration, tm);
            ++iteration;
        }
    }
    return tm;
}

Matrix predict_logits(const TaskModel& model, std::span<const corpus::Sample> samples) {
    Matrix out(static_cast<Eigen::Index>(samples.size()), model.head.numClasses);
    constexpr std::size_t chunk = 64;
    for (std::size_t start = 0; start < samples.size(); start += chunk) {
        const auto part = samples.subspan(start, std::min(chunk, samples.size() - start));
        Batch b = batch_of(model.encoder, part);
        auto fr = encoder::forward(model.encoder, b);
        out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(part.size())) =
            encoder::head_forward(model.head, fr.finalRepr, b, model.encoder.config);
    }
    return out;
}

Matrix predict_proba(const TaskModel& model, std::span<const corpus::Sample> samples) {
    return encoder::softmax(predict_logits(model, samples));
}

std::vector<int> predict(const TaskModel& model, std::span<const corpus::Sample> samples) {
    return encoder::argmax_rows(predict_logits(model, samples));
}

nlohmann::json ProbeReport::to_json() const {
    nlohmann::json h = nlohmann::json::object(), t = nlohmann::json::object();
    for (const auto& [id, row] : hits) h[std::to_string(id)] = row;
    for (const auto& [id, y] : assignedTarget) t[std::to_string(id)] = y;
    return {{"hits", h}, {"assignedTarget", t}, {"probeBatchSize", probeBatchSize}};
}

int argmax_lowest(std::span<const long> row) {
    require(!row.empty(), "empty hit row");
    int best = 0;
    for (std::size_t i = 1; i < row.size(); ++i)
        if (row[i] > row[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
    return best;
}

ProbeReport probe_targets(const TaskModel& model, std::span<const corpus::SyntacticTemplate> templates,
                          std::span<const corpus::Sample> probeSet, int batchSize, std::uint64_t seed) {
    require(batchSize >= 1, "probe batch size must be >= 1");
    if (static_cast<std::size_t>(batchSize) > probeSet.size()) throw ValidationError("probe batch size exceeds probe set");
    ProbeReport rep;
    rep.probeBatchSize = batchSize;
    for (const auto& t : templates) {
        Rng rng(derive_seed(derive_seed(seed, "probe"), static_cast<std::uint64_t>(t.id)));
        std::vector<std::size_t> idx(probeSet.size());
        std::iota(idx.begin(), idx.end(), 0);
        rng.shuffle(std::span<std::size_t>(idx));
        std::vector<corpus::Sample> poisoned;
        for (int i = 0; i < batchSize; ++i) poisoned.push_back(corpus::apply_template(probeSet[idx[static_cast<std::size_t>(i)]], t));
        std::vector<long> row(static_cast<std::size_t>(model.head.numClasses), 0);
        for (int y : predict(model, poisoned)) ++row[static_cast<std::size_t>(y)];
        rep.assignedTarget[t.id] = argmax_lowest(row);
        rep.hits[t.id] = std::move(row);
    }
    return rep;
}

AttackResult attack_eval(const TaskModel& model, const Trigger& trigger, std::span<const corpus::Sample> testSet,
                         int target) {
    std::vector<corpus::Sample> poisoned;
    for (const auto& s : testSet)
        if (s.taskLabel != target) poisoned.push_back(trigger(s));
    if (poisoned.empty()) throw ValidationError("attack set has no non-target samples");
    AttackResult r;
    r.total = static_cast<long>(poisoned.size());
    for (int y : predict(model, poisoned))
        if (y == target) ++r.flipped;
    r.asr = static_cast<double>(r.flipped) / static_cast<double>(r.total);
    return r;
}

AttackResult attack_eval(const TaskModel& model, const corpus::SyntacticTemplate& tmpl,
                         std::span<const corpus::Sample> testSet, int target) {
    return attack_eval(model, [&](const corpus::Sample& s) { return corpus::apply_template(s, tmpl); }, testSet, target);
}

AttackResult collusion_attack(const TaskModel& model, std::span<const corpus::SyntacticTemplate> templates,
                              const ProbeReport& probe, std::span<const corpus::Sample> testSet, int target,
                              std::uint64_t seed) {
    require(!templates.empty(), "collusion needs at least one template");
    for (const auto& t : templates) {
        auto it = probe.assignedTarget.find(t.id);
        if (it == probe.assignedTarget.end()) throw ValidationError("template " + std::to_string(t.id) + " was not probed");
        if (it->second != target) throw ValidationError("collusion requires a common target");
    }
    const std::uint64_t stream = derive_seed(seed, "collusion");
    auto trigger = [&](const corpus::Sample& s) {
        Rng rng(derive_seed(stream, s.id));
        std::vector<corpus::SyntacticTemplate> per;
        for (std::size_t i = 0; i < std::max<std::size_t>(s.clauses.size(), 1); ++i)
            per.push_back(templates[rng.below(templates.size())]);
        return corpus::apply_templates_per_clause(s, per);
    };
    return attack_eval(model, trigger, testSet, target);
}

void save_task_model(const TaskModel& model, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    encoder::save_checkpoint(model.encoder, dir / "encoder.ckpt");
    std::ofstream out(dir / "head.json");
    out << encoder::head_to_json(model.head).dump() << '\n';
}

TaskModel load_task_model(const std::filesystem::path& dir) {
    std::ifstream in(dir / "head.json");
    if (!in) throw ValidationError("missing head.json in " + dir.string());
    return {encoder::load_checkpoint(dir / "encoder.ckpt"), encoder::head_from_json(nlohmann::json::parse(in))};
}

}  // namespace synghost::victim
