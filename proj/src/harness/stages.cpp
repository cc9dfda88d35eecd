#include "stages.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "synghost/analysis/analysis.hpp"
#include "synghost/common/errors.hpp"
#include "synghost/common/hash.hpp"
#include "synghost/common/rng.hpp"
#include "synghost/corpus/grammar.hpp"
#include "synghost/corpus/io.hpp"
#include "synghost/corpus/weaponize.hpp"
#include "synghost/defense/defense.hpp"
#include "synghost/encoder/pretrain.hpp"
#include "synghost/injector/inject.hpp"
#include "synghost/metrics/metrics.hpp"

namespace synghost::harness {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_json(const fs::path& p, const json& j) {
    fs::create_directories(p.parent_path());
    std::ofstream out(p);
    out << j.dump(2) << '\n';
}

json read_json(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw std::runtime_error("missing artifact " + p.string());
    return json::parse(in);
}

std::vector<corpus::Sample> slice(const std::vector<corpus::Sample>& v, std::size_t from, std::size_t n) {
    from = std::min(from, v.size());
    return {v.begin() + static_cast<std::ptrdiff_t>(from),
            v.begin() + static_cast<std::ptrdiff_t>(std::min(v.size(), from + n))};
}

double accuracy(const victim::TaskModel& m, const std::vector<corpus::Sample>& set) {
    const auto pred = victim::predict(m, set);
    std::vector<metrics::Record> rec;
    for (std::size_t i = 0; i < set.size(); ++i) rec.emplace_back(pred[i], *set[i].taskLabel);
    return metrics::cacc(rec);
}

Matrix reprs_of(const encoder::EncoderState& m, const std::vector<corpus::Sample>& set) {
    encoder::Batch b;
    for (const auto& s : set) b.add(encoder::with_cls(s.tokens, m.config.maxLen));
    return encoder::representation(m, b);
}

struct BestTrigger {
    corpus::SyntacticTemplate tmpl;
    int target = 0;
    double asr = 0.0;
};

// Highest ASR against the probed target; ties go to the lowest template id.
BestTrigger best_trigger(const victim::TaskModel& m, const corpus::PretrainCorpus& pc, const victim::ProbeReport& probe,
                         const std::vector<corpus::Sample>& test) {
    BestTrigger best;
    best.asr = -1.0;
    for (const auto& t : pc.templates) {
        const int y = probe.assignedTarget.at(t.id);
        const double a = victim::attack_eval(m, t, test, y).asr;
        if (a > best.asr) best = {t, y, a};
    }
    return best;
}

// Rare-token trigger with per-sample insertion positions.
victim::Trigger rare_trigger(const ExperimentConfig& c) {
    const std::string word = c.defense.rareTrigger;
    const std::uint64_t seed = c.stream("attack");
    return [word, seed](const corpus::Sample& s) {
        return injector::insert_rare_token(s, word, 1, derive_seed(seed, s.id));
    };
}

struct FilterOutcome {
    defense::EntropyProfile poisoned, clean;
    double asrBefore = 0.0, asrAfter = 0.0;
    double fixedFlaggedPoisoned = 0.0, fixedFlaggedClean = 0.0;

    json to_json() const {
        return {{"threshold", poisoned.threshold},
                {"flaggedPoisoned", poisoned.flagged_fraction()},
                {"flaggedClean", clean.flagged_fraction()},
                {"asrBefore", asrBefore},
                {"asrAfter", asrAfter},
                {"fixedThresholdFlaggedPoisoned", fixedFlaggedPoisoned},
                {"fixedThresholdFlaggedClean", fixedFlaggedClean}};
    }
};

double flagged_at(const defense::EntropyProfile& p, double threshold) {
    if (p.perSample.empty()) return 0.0;
    long n = 0;
    for (const auto& r : p.perSample) n += r.avgEntropy >= threshold ? 1 : 0;
    return static_cast<double>(n) / static_cast<double>(p.perSample.size());
}

// Flagged inputs are rejected, so they count as failed attacks.
FilterOutcome entropy_filter_attack(const ExperimentConfig& c, const victim::TaskModel& m,
                                    const victim::Trigger& trigger, int target,
                                    const std::vector<corpus::Sample>& test, const defense::WordSource& source) {
    const auto& d = c.defense;
    const auto calib = slice(test, test.size() - static_cast<std::size_t>(d.calibrationSize),
                             static_cast<std::size_t>(d.calibrationSize));
    const auto clean = slice(test, test.size() - static_cast<std::size_t>(d.calibrationSize + d.evalSize),
                             static_cast<std::size_t>(d.evalSize));
    std::vector<corpus::Sample> triggered;
    for (const auto& s : test) {
        if (*s.taskLabel == target) continue;
        if (triggered.size() == static_cast<std::size_t>(d.evalSize)) break;
        triggered.push_back(trigger(s));
    }
    defense::MaxEntropyOptions o;
    o.numPerturbations = d.numPerturbations;
    o.fraction = d.fraction;
    o.percentile = d.percentile;
    o.seed = c.stream("perturb");
    FilterOutcome out;
    out.poisoned = defense::max_entropy_filter(m, triggered, o, source, calib);
    o.threshold = out.poisoned.threshold;
    out.clean = defense::max_entropy_filter(m, clean, o, source);
    const auto pred = victim::predict(m, triggered);
    long hit = 0, pass = 0;
    for (std::size_t i = 0; i < triggered.size(); ++i) {
        hit += pred[i] == target ? 1 : 0;
        pass += pred[i] == target && !out.poisoned.perSample[i].flaggedPoisoned ? 1 : 0;
    }
    out.asrBefore = static_cast<double>(hit) / static_cast<double>(triggered.size());
    out.asrAfter = static_cast<double>(pass) / static_cast<double>(triggered.size());
    out.fixedFlaggedPoisoned = flagged_at(out.poisoned, d.fixedThreshold);
    out.fixedFlaggedClean = flagged_at(out.clean, d.fixedThreshold);
    return out;
}

json matrix_json(const Matrix& m) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) rows.push_back(std::vector<double>(m.row(r).begin(), m.row(r).end()));
    return rows;
}

Matrix matrix_from_json(const json& j) {
    const auto n = static_cast<Eigen::Index>(j.size());
    const auto c = n ? static_cast<Eigen::Index>(j[0].size()) : 0;
    Matrix m(n, c);
    for (Eigen::Index r = 0; r < n; ++r)
        for (Eigen::Index k = 0; k < c; ++k) m(r, k) = j[static_cast<std::size_t>(r)][static_cast<std::size_t>(k)];
    return m;
}

// ---- stages ----

std::vector<std::string> weaponize(StageContext& ctx) {
    const auto& c = ctx.config;
    const std::uint64_t cs = c.stream("corpus");
    corpus::GrammarOptions preOpt{1, c.corpus.maxClauses, corpus::Task::Sentiment};
    const auto pre = corpus::generate_corpus(c.corpus.grammarSeed, c.corpus.size, preOpt);
    const auto ref = corpus::generate_reference_corpus(derive_seed(cs, "reference"), c.corpus.referenceSize);
    const auto lm = corpus::train_bigram_lm(ref);
    const auto templates = corpus::default_templates(c.corpus.numTemplates);
    const auto pc = corpus::poison_corpus(pre, templates,
                                          {c.corpus.poisonRate, c.corpus.K, derive_seed(cs, "poison")}, lm);
    const int nTask = c.corpus.finetuneSize + c.corpus.testSize;
    const auto task = corpus::generate_corpus(derive_seed(cs, "task"), nTask, {1, 1, c.task()});
    const auto coll = corpus::generate_corpus(derive_seed(cs, "collusion"), c.corpus.collusionTestSize, {2, 2, c.task()});

    const fs::path dir = ctx.runDir / "weaponize";
    corpus::write_pretrain_corpus(dir / "pretrain", pc);
    corpus::write_samples(dir / "reference.jsonl", ref);
    corpus::write_samples(dir / "finetune.jsonl", slice(task, 0, static_cast<std::size_t>(c.corpus.finetuneSize)));
    corpus::write_samples(dir / "test.jsonl", slice(task, static_cast<std::size_t>(c.corpus.finetuneSize),
                                                    static_cast<std::size_t>(c.corpus.testSize)));
    corpus::write_samples(dir / "collusion_test.jsonl", coll);
    spdlog::info("weaponize: {} clean, {} poisoned (rate {:.3f})", pc.cleanSubset.size(),
                 pc.size() - pc.cleanSubset.size(), pc.realizedRate);
    return {"weaponize/pretrain/samples.jsonl", "weaponize/pretrain/templates.json", "weaponize/pretrain/summary.json",
            "weaponize/reference.jsonl",         "weaponize/finetune.jsonl",         "weaponize/test.jsonl",
            "weaponize/collusion_test.jsonl"};
}

std::vector<std::string> inject(StageContext& ctx) {
    const auto& c = ctx.config;
    encoder::EncoderConfig ec = c.encoder;
    ec.vocabSize = corpus::Vocabulary::desk().size();
    auto clean = encoder::init_encoder(ec, c.stream("init"));
    std::vector<std::vector<int>> seqs;
    for (const auto& s : ctx.reference()) seqs.push_back(s.tokens);
    const auto mlm = encoder::mlm_pretrain(clean, seqs, c.mlm_options());
    auto res = injector::pretrain_inject(clean, ctx.pretrain(), c.weights, c.inject_options());
    res.model.frozen = false;

    const fs::path dir = ctx.runDir / "inject";
    fs::create_directories(dir);
    encoder::save_checkpoint(clean, dir / "clean.ckpt");
    encoder::save_checkpoint(res.model, dir / "backdoored.ckpt");
    res.log.write_csv(dir / "train_log.csv");
    json man = injector::run_manifest(c.weights, c.inject_options(),
                                      sha256_file(ctx.runDir / "weaponize" / "pretrain" / "samples.jsonl"),
                                      encoder::state_hash(res.model));
    man["mlmLosses"] = mlm;
    man["cleanModelHash"] = encoder::state_hash(clean);
    write_json(dir / "inject_manifest.json", man);
    return {"inject/clean.ckpt", "inject/backdoored.ckpt", "inject/train_log.csv", "inject/inject_manifest.json"};
}

std::vector<std::string> finetune(StageContext& ctx) {
    const auto& c = ctx.config;
    const fs::path dir = ctx.runDir / "finetune";
    const auto backdoored = encoder::load_checkpoint(ctx.runDir / "inject" / "backdoored.ckpt");
    const auto clean = encoder::load_checkpoint(ctx.runDir / "inject" / "clean.ckpt");
    const auto& test = ctx.test_set();

    // Logit series of a clean group and one triggered group per template.
    std::map<std::string, std::vector<corpus::Sample>> groups;
    const auto base = slice(test, 0, static_cast<std::size_t>(c.analysis.groupSize));
    groups["clean"] = base;
    for (const auto& t : ctx.pretrain().templates) {
        auto& g = groups["t" + std::to_string(t.id)];
        for (const auto& s : base) g.push_back(corpus::apply_template(s, t));
    }
    analysis::LogitRecorder recorder(groups);
    const auto spec = c.finetune_spec();
    const auto task = victim::finetune(backdoored, ctx.finetune_set(), spec, recorder.observer());
    const auto control = victim::finetune(clean, ctx.finetune_set(), spec);
    victim::save_task_model(task, dir / "task");
    victim::save_task_model(control, dir / "control");

    json logits = json::object();
    for (const auto& [name, series] : recorder.series(spec.numClasses)) logits[name] = matrix_json(series.logits);
    write_json(dir / "logits.json", logits);
    write_json(dir / "finetune.json", {{"cacc", accuracy(task, test)}, {"controlCacc", accuracy(control, test)}});
    ctx.reset();
    return {"finetune/task/encoder.ckpt",    "finetune/task/head.json", "finetune/control/encoder.ckpt",
            "finetune/control/head.json",    "finetune/logits.json",    "finetune/finetune.json"};
}

std::vector<std::string> probe(StageContext& ctx) {
    const auto report = victim::probe_targets(ctx.task_model(), ctx.pretrain().templates, ctx.test_set(), 64,
                                              ctx.config.stream("probe"));
    write_json(ctx.runDir / "probe" / "probe.json", report.to_json());
    ctx.reset();
    return {"probe/probe.json"};
}

std::vector<std::string> attack(StageContext& ctx) {
    const auto& c = ctx.config;
    const auto& m = ctx.task_model();
    const auto control = victim::load_task_model(ctx.runDir / "finetune" / "control");
    const auto& test = ctx.test_set();
    const auto& pr = ctx.probe();

    metrics::MetricReport r;
    r.task = c.corpus.task;
    r.gamma = c.gamma;
    r.beta = c.beta;
    json detail = json::array();
    std::map<int, int> targets;
    for (const auto& t : ctx.pretrain().templates) {
        const int y = pr.assignedTarget.at(t.id);
        const auto a = victim::attack_eval(m, t, test, y);
        const auto ac = victim::attack_eval(control, t, test, y);
        r.asrPerTrigger[t.id] = a.asr;
        targets[t.id] = y;
        detail.push_back({{"template", t.id}, {"pattern", t.pattern}, {"target", y}, {"asr", a.asr},
                          {"flipped", a.flipped}, {"total", a.total}, {"controlAsr", ac.asr}});
    }
    r.cacc = accuracy(m, test);
    r.caccDropVsClean = accuracy(control, test) - r.cacc;
    r.tAcr = metrics::t_acr({{r.task, r.best_asr()}}, c.gamma);
    std::set<int> labels;
    for (int y = 0; y < m.head.numClasses; ++y) labels.insert(y);
    r.lAcr = metrics::l_acr(targets, r.asrPerTrigger, labels, c.beta);
    r.validate();
    write_json(ctx.runDir / "attack" / "metric_report.json", r.to_json());
    write_json(ctx.runDir / "attack" / "attack.json", {{"perTrigger", detail}, {"controlCacc", r.cacc + r.caccDropVsClean}});
    return {"attack/metric_report.json", "attack/attack.json"};
}

std::vector<std::string> collude(StageContext& ctx) {
    const auto& m = ctx.task_model();
    const auto& pr = ctx.probe();
    const auto& test = ctx.collusion_set();
    std::map<int, std::vector<corpus::SyntacticTemplate>> byTarget;
    for (const auto& t : ctx.pretrain().templates) byTarget[pr.assignedTarget.at(t.id)].push_back(t);
    json groups = json::array();
    for (const auto& [y, ts] : byTarget) {
        if (ts.size() < 2) continue;
        const auto col = victim::collusion_attack(m, ts, pr, test, y, ctx.config.stream("attack"));
        json singles = json::object();
        double best = 0.0;
        for (const auto& t : ts) {
            const double a = victim::attack_eval(m, t, test, y).asr;
            singles[std::to_string(t.id)] = a;
            best = std::max(best, a);
        }
        groups.push_back({{"target", y}, {"collusionAsr", col.asr}, {"singleAsr", singles}, {"bestSingleAsr", best},
                          {"total", col.total}});
    }
    if (groups.empty()) spdlog::warn("collude: no two templates share a target");
    write_json(ctx.runDir / "collude" / "collusion.json", {{"groups", groups}});
    return {"collude/collusion.json"};
}

std::vector<std::string> defend(StageContext& ctx) {
    const auto& c = ctx.config;
    const auto& m = ctx.task_model();
    const auto& test = ctx.test_set();
    const auto& lm = ctx.lm();
    const fs::path dir = ctx.runDir / "defend";
    const defense::WordSource source(ctx.reference());
    const auto best = best_trigger(m, ctx.pretrain(), ctx.probe(), test);
    const auto bestTmpl = best.tmpl;
    const victim::Trigger syn = [bestTmpl](const corpus::Sample& s) { return corpus::apply_template(s, bestTmpl); };

    // Explicit-trigger baseline on the same clean PLM and task.
    const auto clean = encoder::load_checkpoint(ctx.runDir / "inject" / "clean.ckpt");
    injector::RareTokenOptions ro;
    ro.triggers = {c.defense.rareTrigger};
    ro.poisonRate = c.corpus.poisonRate;
    ro.epochs = c.inject.epochs;
    ro.batchSize = c.inject.batchSize;
    ro.optim = c.inject_options().optim;
    ro.seed = derive_seed(c.stream("train"), "rare");
    auto rare = injector::rare_token_inject(clean, ctx.pretrain().cleanSubset, ro, c.weights.lambdaC);
    rare.model.frozen = false;
    const auto rareTask = victim::finetune(rare.model, ctx.finetune_set(), c.finetune_spec());
    const auto rareTrig = rare_trigger(c);
    int rareTarget = 0;
    double rareAsr = -1.0;
    for (int y = 0; y < rareTask.head.numClasses; ++y) {
        const double a = victim::attack_eval(rareTask, rareTrig, test, y).asr;
        if (a > rareAsr) rareAsr = a, rareTarget = y;
    }

    const auto synEnt = entropy_filter_attack(c, m, syn, best.target, test, source);
    const auto rareEnt = entropy_filter_attack(c, rareTask, rareTrig, rareTarget, test, source);
    write_json(dir / "entropy_syntactic.json", synEnt.poisoned.to_json());
    write_json(dir / "entropy_rare.json", rareEnt.poisoned.to_json());
    write_json(dir / "entropy_clean.json", synEnt.clean.to_json());

    const auto calib = slice(test, test.size() - static_cast<std::size_t>(c.defense.calibrationSize),
                             static_cast<std::size_t>(c.defense.calibrationSize));
    const double onionThr = defense::calibrate_onion_threshold(lm, calib, c.defense.onionMaxRemoval);
    const victim::Trigger synOnion = [&](const corpus::Sample& s) { return defense::onion_filter(lm, syn(s), onionThr); };
    const victim::Trigger rareOnion = [&](const corpus::Sample& s) {
        return defense::onion_filter(lm, rareTrig(s), onionThr);
    };
    const double synOnionAsr = victim::attack_eval(m, synOnion, test, best.target).asr;
    const double rareOnionAsr = victim::attack_eval(rareTask, rareOnion, test, rareTarget).asr;

    defense::PruneManifest pm;
    const auto pruned = defense::fine_prune(m, calib, c.defense.pruneFraction, &pm);
    write_json(dir / "prune_manifest.json", pm.to_json());
    const double baseCacc = accuracy(m, test);

    json out;
    out["syntactic"] = {{"template", best.tmpl.id}, {"target", best.target}, {"asr", best.asr},
                        {"maxEntropy", synEnt.to_json()},
                        {"onion", {{"threshold", onionThr}, {"asrBefore", best.asr}, {"asrAfter", synOnionAsr}}},
                        {"finePrune",
                         {{"fraction", c.defense.pruneFraction},
                          {"asrBefore", best.asr},
                          {"asrAfter", victim::attack_eval(pruned, syn, test, best.target).asr},
                          {"caccBefore", baseCacc},
                          {"caccAfter", accuracy(pruned, test)}}}};
    out["rareToken"] = {{"trigger", c.defense.rareTrigger}, {"target", rareTarget}, {"asr", rareAsr},
                        {"cacc", accuracy(rareTask, test)}, {"maxEntropy", rareEnt.to_json()},
                        {"onion", {{"threshold", onionThr}, {"asrBefore", rareAsr}, {"asrAfter", rareOnionAsr}}}};
    // The syntactic trigger judged at the explicit-trigger threshold as well.
    out["syntactic"]["maxEntropy"]["flaggedAtRareThreshold"] =
        flagged_at(synEnt.poisoned, rareEnt.poisoned.threshold);
    write_json(dir / "defense.json", out);
    return {"defend/defense.json", "defend/entropy_syntactic.json", "defend/entropy_rare.json",
            "defend/entropy_clean.json", "defend/prune_manifest.json"};
}

std::vector<std::string> analyze(StageContext& ctx) {
    const auto& c = ctx.config;
    const auto& m = ctx.task_model();
    const auto& test = ctx.test_set();
    const auto& pc = ctx.pretrain();
    const fs::path dir = ctx.runDir / "analyze";
    const auto clean = encoder::load_checkpoint(ctx.runDir / "inject" / "clean.ckpt");
    const auto backdoored = encoder::load_checkpoint(ctx.runDir / "inject" / "backdoored.ckpt");
    const auto best = best_trigger(m, pc, ctx.probe(), test);

    // Frequency decomposition of the recorded fine-tuning logits.
    const json logits = read_json(ctx.runDir / "finetune" / "logits.json");
    const auto group = slice(test, 0, static_cast<std::size_t>(c.analysis.groupSize));
    std::map<std::string, analysis::LogitSeries> series;
    double identity = 0.0;
    for (const auto& [name, rows] : logits.items()) {
        const Matrix l = matrix_from_json(rows);
        const auto split = analysis::frequency_split(l, c.analysis.kernelWidth);
        identity = std::max(identity, (split.low + split.high - l).cwiseAbs().maxCoeff());
        analysis::LogitSeries s;
        s.logits = l;
        s.numClasses = m.head.numClasses;
        for (const auto& smp : group) s.truth.push_back(*smp.taskLabel);
        if (name == "clean") series["clean"] = s;
        if (name == "t" + std::to_string(best.tmpl.id)) {
            std::fill(s.truth.begin(), s.truth.end(), best.target);
            series["poisoned"] = s;
        }
    }
    const auto freq = analysis::frequency_report(series, c.analysis.kernelWidth);
    json fj = freq.to_json();
    fj["reconstructionMaxError"] = identity;
    fj["poisonedTemplate"] = best.tmpl.id;
    fj["lateLowFraction"] = {{"clean", freq.late_low_fraction("clean")},
                             {"poisoned", freq.late_low_fraction("poisoned")}};
    write_json(dir / "frequency.json", fj);

    // Representation geometry on held-out paraphrases.
    const auto n = static_cast<std::size_t>(c.analysis.geometrySize);
    std::vector<corpus::Sample> held, heldClean = slice(test, 0, n);
    std::vector<int> idx;
    for (std::size_t i = 0; i < n && i < test.size(); ++i) {
        held.push_back(corpus::apply_template(test[i], pc.templates[i % pc.templates.size()]));
        idx.push_back(held.back().indexLabel);
    }
    const Matrix pre = reprs_of(clean, held), post = reprs_of(backdoored, held);
    const Matrix dc = reprs_of(backdoored, heldClean) - reprs_of(clean, heldClean);
    write_json(dir / "geometry.json", {{"preRatio", analysis::intra_inter_ratio(pre, idx)},
                                       {"postRatio", analysis::intra_inter_ratio(post, idx)},
                                       {"heldOutCleanMse", dc.squaredNorm() / static_cast<double>(dc.size())},
                                       {"samples", held.size()}});

    // Representation map: poisoned paraphrases plus clean samples as class 0.
    std::vector<corpus::Sample> mapSet = held;
    std::vector<int> mapLabels = idx;
    for (const auto& s : slice(test, n, n / pc.templates.size())) {
        mapSet.push_back(s);
        mapLabels.push_back(0);
    }
    analysis::RepresentationMapOptions mo;
    mo.svm.seed = c.stream("probe");
    const auto rmap = analysis::representation_map(reprs_of(backdoored, mapSet), mapLabels, mo);
    write_json(dir / "representation_map.json", rmap.to_json());
    {
        std::ofstream out(dir / "region_grid.csv");
        out << rmap.grid_csv();
    }

    // Attention of the representation token on triggered inputs.
    json att = json::array();
    std::map<int, double> markerMass, sentimentMass;
    int counted = 0;
    for (const auto& s : test) {
        if (counted == c.analysis.attentionSamples) break;
        if (*s.taskLabel == best.target) continue;
        const auto trig = corpus::apply_template(s, best.tmpl);
        const auto words = corpus::split_words(trig.text);
        std::set<std::string> original, sentiment;
        for (const auto& w : corpus::split_words(s.text)) original.insert(w);
        for (const auto& cl : s.clauses)
            for (const auto& w : corpus::split_words(cl.adjective)) sentiment.insert(w);
        sentiment.erase("and");
        const auto prof = analysis::attention_profile(m, trig);
        json layers = json::object();
        for (const auto& [l, scores] : prof) {
            layers[std::to_string(l)] = scores;
            for (std::size_t i = 0; i < words.size(); ++i) {
                if (!original.count(words[i])) markerMass[l] += scores[i];
                if (sentiment.count(words[i])) sentimentMass[l] += scores[i];
            }
        }
        att.push_back({{"text", trig.text}, {"words", words}, {"layers", layers}});
        ++counted;
    }
    json massJ = json::object();
    for (const auto& [l, v] : markerMass)
        massJ[std::to_string(l)] = {{"marker", v / std::max(1, counted)},
                                    {"sentiment", sentimentMass[l] / std::max(1, counted)}};
    write_json(dir / "attention.json", {{"template", best.tmpl.id}, {"meanMass", massJ}, {"samples", att}});

    // Word-order probing of the released encoders.
    const auto& ref = ctx.reference();
    const auto trainP = analysis::word_order_probe_set(slice(ref, 0, static_cast<std::size_t>(c.analysis.probeTrainSize)),
                                                       c.stream("probe"));
    const auto evalP = analysis::word_order_probe_set(
        slice(ref, static_cast<std::size_t>(c.analysis.probeTrainSize), static_cast<std::size_t>(c.analysis.probeEvalSize)),
        c.stream("probe"));
    analysis::ProbeOptions po;
    po.seed = c.stream("probe");
    json curves;
    curves["backdoored"] = analysis::probe_layers(backdoored, trainP, evalP, po).to_json();
    curves["clean"] = analysis::probe_layers(clean, trainP, evalP, po).to_json();
    write_json(dir / "probe_curve.json", curves);
    return {"analyze/frequency.json",          "analyze/geometry.json",    "analyze/representation_map.json",
            "analyze/region_grid.csv",         "analyze/attention.json",   "analyze/probe_curve.json"};
}

}  // namespace

victim::ProbeReport probe_report_from_json(const json& j) {
    victim::ProbeReport r;
    for (const auto& [k, v] : j.at("hits").items()) r.hits[std::stoi(k)] = v.get<std::vector<long>>();
    for (const auto& [k, v] : j.at("assignedTarget").items()) r.assignedTarget[std::stoi(k)] = v.get<int>();
    r.probeBatchSize = j.at("probeBatchSize").get<int>();
    return r;
}

const corpus::PretrainCorpus& StageContext::pretrain() {
    if (!pretrain_) pretrain_ = corpus::read_pretrain_corpus(runDir / "weaponize" / "pretrain");
    return *pretrain_;
}
const std::vector<corpus::Sample>& StageContext::reference() {
    if (!reference_) reference_ = corpus::read_samples(runDir / "weaponize" / "reference.jsonl");
    return *reference_;
}
const std::vector<corpus::Sample>& StageContext::finetune_set() {
    if (!finetune_) finetune_ = corpus::read_samples(runDir / "weaponize" / "finetune.jsonl");
    return *finetune_;
}
const std::vector<corpus::Sample>& StageContext::test_set() {
    if (!test_) test_ = corpus::read_samples(runDir / "weaponize" / "test.jsonl");
    return *test_;
}
const std::vector<corpus::Sample>& StageContext::collusion_set() {
    if (!collusion_) collusion_ = corpus::read_samples(runDir / "weaponize" / "collusion_test.jsonl");
    return *collusion_;
}
const corpus::BigramLM& StageContext::lm() {
    if (!lm_) lm_ = corpus::train_bigram_lm(reference());
    return *lm_;
}
const victim::TaskModel& StageContext::task_model() {
    if (!task_) task_ = victim::load_task_model(runDir / "finetune" / "task");
    return *task_;
}
const victim::ProbeReport& StageContext::probe() {
    if (!probe_) probe_ = probe_report_from_json(read_json(runDir / "probe" / "probe.json"));
    return *probe_;
}

void StageContext::reset() {
    pretrain_.reset();
    reference_.reset();
    finetune_.reset();
    test_.reset();
    collusion_.reset();
    lm_.reset();
    task_.reset();
    probe_.reset();
}

std::vector<std::string> run_stage(StageContext& ctx, Stage stage) {
    switch (stage) {
        case Stage::Weaponize: {
            auto out = weaponize(ctx);
            ctx.reset();
            return out;
        }
        case Stage::Inject: return inject(ctx);
        case Stage::Finetune: return finetune(ctx);
        case Stage::Probe: return probe(ctx);
        case Stage::Attack: return attack(ctx);
        case Stage::Collude: return collude(ctx);
        case Stage::Defend: return defend(ctx);
        case Stage::Analyze: return analyze(ctx);
    }
    return {};
}

}  // namespace synghost::harness
