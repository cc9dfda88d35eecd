// Acceptance run: one full default-config pipeline plus the extra runs some
// criteria need. Prints one PASS/FAIL line per criterion; exits 1 when any
// criterion fails and 2 when the pipeline itself errors.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include "synghost/common/errors.hpp"
#include "synghost/common/rng.hpp"
#include "synghost/corpus/io.hpp"
#include "synghost/encoder/encoder.hpp"
#include "synghost/harness/config.hpp"
#include "synghost/harness/pipeline.hpp"
#include "synghost/injector/inject.hpp"
#include "synghost/metrics/metrics.hpp"

using namespace synghost;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Verdict {
    std::string id;
    bool pass = false;
    std::string detail;
};

std::vector<Verdict> verdicts;

void report(const std::string& id, bool pass, const std::string& detail) {
    verdicts.push_back({id, pass, detail});
    std::cout << fmt::format("{} {}: {}", pass ? "PASS" : "FAIL", id, detail) << std::endl;
}

json read_json(const fs::path& p) {
    std::ifstream in(p);
    require(in.good(), "cannot read " + p.string());
    return json::parse(in);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::set<harness::Stage> through(harness::Stage last) {
    std::set<harness::Stage> s;
    for (auto st : harness::all_stages()) {
        s.insert(st);
        if (st == last) break;
    }
    return s;
}

// ---- metric oracles, written independently of the library ----

double oracle_match(const std::vector<metrics::Record>& r) {
    long hit = 0;
    for (const auto& rec : r) hit += rec.first == rec.second;
    return static_cast<double>(hit) / static_cast<double>(r.size());
}

double oracle_tacr(const std::vector<double>& asrs, double gamma) {
    long ok = 0;
    for (double a : asrs) ok += !(a < gamma);
    return static_cast<double>(ok) / static_cast<double>(asrs.size());
}

double oracle_lacr(const std::vector<int>& targets, const std::vector<double>& asrs, int numLabels, double beta) {
    const int T = static_cast<int>(targets.size());
    int cap = 0;
    while (cap * numLabels < T) ++cap;
    std::vector<int> slots(static_cast<std::size_t>(numLabels), cap);
    int counted = 0;
    for (int i = 0; i < T; ++i) {
        if (!(asrs[static_cast<std::size_t>(i)] > beta)) continue;
        int& free = slots[static_cast<std::size_t>(targets[static_cast<std::size_t>(i)])];
        if (free > 0) --free, ++counted;
    }
    return static_cast<double>(counted) / static_cast<double>(T);
}

void check_metrics() {
    Rng rng(2024);
    int mismatches = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = 1 + static_cast<int>(rng.below(40));
        const int labels = 2 + static_cast<int>(rng.below(4));
        std::vector<metrics::Record> recs;
        for (int i = 0; i < n; ++i)
            recs.push_back({static_cast<int>(rng.below(static_cast<std::uint64_t>(labels))),
                            static_cast<int>(rng.below(static_cast<std::uint64_t>(labels)))});
        mismatches += metrics::asr(recs) != oracle_match(recs);
        mismatches += metrics::cacc(recs) != oracle_match(recs);

        const int tasks = 1 + static_cast<int>(rng.below(20));
        std::vector<double> asrs;
        std::map<std::string, double> m;
        for (int t = 0; t < tasks; ++t) {
            asrs.push_back(static_cast<double>(rng.below(11)) / 10.0);
            m["t" + std::to_string(t)] = asrs.back();
        }
        const double gamma = static_cast<double>(1 + rng.below(10)) / 10.0;
        mismatches += metrics::t_acr(m, gamma) != oracle_tacr(asrs, gamma);

        const int T = 1 + static_cast<int>(rng.below(8));
        std::vector<int> targets;
        std::vector<double> tasr;
        std::map<int, int> tm;
        std::map<int, double> am;
        for (int i = 0; i < T; ++i) {
            targets.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(labels))));
            tasr.push_back(static_cast<double>(rng.below(11)) / 10.0);
            tm[i + 1] = targets.back();
            am[i + 1] = tasr.back();
        }
        std::set<int> space;
        for (int y = 0; y < labels; ++y) space.insert(y);
        const double beta = static_cast<double>(1 + rng.below(10)) / 10.0;
        mismatches += metrics::l_acr(tm, am, space, beta) != oracle_lacr(targets, tasr, labels, beta);
    }
    const std::vector<double> neuba{46.47, 56.44, 94.06, 60.72, 46.92, 51.60, 92.39, 29.68, 49.10,
                                    76.40, 98.76, 58.35, 65.92, 62.08, 48.30, 61.51, 8.29};
    std::map<std::string, double> nm;
    for (std::size_t i = 0; i < neuba.size(); ++i) nm["task" + std::to_string(i)] = neuba[i] / 100.0;
    const double pct = std::floor(metrics::t_acr(nm, 0.8) * 10000.0) / 100.0;
    report("C4", mismatches == 0 && std::abs(pct - 17.64) < 1e-9,
           fmt::format("{} oracle mismatches over 1000 configs; NeuBA T-ACR {:.2f} (published 17.64)", mismatches, pct));
}

// ---- gradient checks ----

Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c) {
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-1.0, 1.0);
    return m;
}

template <typename F>
double worst_fd(Matrix x, const Matrix& analytic, F f) {
    const double h = 1e-4;
    double worst = 0.0;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double keep = x.data()[i];
        x.data()[i] = keep + h;
        const double up = f(x);
        x.data()[i] = keep - h;
        const double down = f(x);
        x.data()[i] = keep;
        const double num = (up - down) / (2.0 * h), a = analytic.data()[i];
        const double scale = std::max({std::abs(num), std::abs(a)});
        worst = std::max(worst, scale < 1e-6 ? std::abs(num - a) : std::abs(num - a) / scale);
    }
    return worst;
}

void check_gradients() {
    double worstScl = 0.0, worstAware = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        Rng rng(derive_seed(300, static_cast<std::uint64_t>(trial)));
        const int B = 3 + static_cast<int>(rng.below(5)), d = 2 + static_cast<int>(rng.below(5));
        Matrix x = random_matrix(rng, B, d);
        std::vector<int> y(static_cast<std::size_t>(B));
        do {
            for (auto& v : y) v = static_cast<int>(rng.below(3));
        } while (!injector::has_positive_pair(y));
        const double k = rng.uniform(0.2, 1.0);
        Matrix g;
        injector::loss_scl(x, y, k, injector::SclMode::Standard, &g);
        worstScl = std::max(worstScl, worst_fd(x, g, [&](const Matrix& m) { return injector::loss_scl(m, y, k); }));

        const int n = 2 + static_cast<int>(rng.below(3));
        auto gD = encoder::init_head(encoder::HeadRole::SyntaxHead, encoder::HeadArch::Linear, d, n, rng.next());
        auto gP = encoder::init_head(encoder::HeadRole::PoisonHead, encoder::HeadArch::Linear, d, 2, rng.next());
        std::vector<int> z(static_cast<std::size_t>(B));
        for (auto& v : z) v = static_cast<int>(rng.below(static_cast<std::uint64_t>(n + 1)));
        z[0] = 1;
        std::map<int, Matrix> taps{{1, random_matrix(rng, B, d)}, {2, random_matrix(rng, B, d)}};
        injector::AwareGrad ag;
        injector::loss_aware(taps, z, gD, gP, &ag);
        for (auto& [layer, tap] : taps)
            worstAware = std::max(worstAware, worst_fd(tap, ag.dTaps.at(layer), [&](const Matrix& m) {
                                      auto copy = taps;
                                      copy[layer] = m;
                                      return injector::loss_aware(copy, z, gD, gP);
                                  }));
    }
    Rng rng(9);
    double worstLin = 0.0;
    for (int i = 0; i < 200; ++i) {
        const double c = rng.uniform(0, 5), p = rng.uniform(0, 5), a = rng.uniform(0, 5), s = rng.uniform(0, 3);
        injector::ConstraintWeights w1{rng.uniform(0, 2), rng.uniform(0, 2), rng.uniform(0, 2), 0.5};
        injector::ConstraintWeights w2{rng.uniform(0, 2), rng.uniform(0, 2), rng.uniform(0, 2), 0.5};
        injector::ConstraintWeights sum{w1.lambdaC + s * w2.lambdaC, w1.lambdaP + s * w2.lambdaP,
                                        w1.lambdaA + s * w2.lambdaA, 0.5};
        worstLin = std::max(worstLin, std::abs(injector::total_loss(c, p, a, sum) -
                                               (injector::total_loss(c, p, a, w1) +
                                                s * injector::total_loss(c, p, a, w2))));
    }
    report("C5", worstScl < 1e-3 && worstAware < 1e-3 && worstLin <= 1e-12,
           fmt::format("worst FD rel err: scl {:.2e}, aware {:.2e}; linearity err {:.1e}", worstScl, worstAware,
                       worstLin));
}

// Held-out clean representation drift of an L_c-only injection from the
// same clean checkpoint and corpus as the main run.
double alignment_floor(const harness::ExperimentConfig& cfg, const fs::path& runDir) {
    const auto clean = encoder::load_checkpoint(runDir / "inject" / "clean.ckpt");
    const auto pc = corpus::read_pretrain_corpus(runDir / "weaponize" / "pretrain");
    injector::ConstraintWeights w = cfg.weights;
    w.lambdaP = 0.0;
    w.lambdaA = 0.0;
    const auto res = injector::pretrain_inject(clean, pc, w, cfg.inject_options());
    const auto test = corpus::read_samples(runDir / "weaponize" / "test.jsonl");
    encoder::Batch b;
    for (std::size_t i = 0; i < static_cast<std::size_t>(cfg.analysis.geometrySize) && i < test.size(); ++i)
        b.add(encoder::with_cls(test[i].tokens, clean.config.maxLen));
    const Matrix dc = encoder::representation(res.model, b) - encoder::representation(clean, b);
    return dc.squaredNorm() / static_cast<double>(dc.size());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance criteria for the default experiment"};
    std::string out = (fs::temp_directory_path() / "synghost_acceptance").string();
    bool keep = false;
    app.add_option("--out", out, "scratch directory for the runs");
    app.add_flag("--keep", keep, "keep run directories");
    CLI11_PARSE(app, argc, argv);
    spdlog::set_level(spdlog::level::warn);

    try {
        const fs::path root(out), runA = root / "a", runB = root / "b";
        fs::remove_all(root);

        harness::ExperimentConfig cfg;
        cfg.outputDir = runA.string();
        const auto t0 = std::chrono::steady_clock::now();
        const auto man = harness::run_experiment(cfg, through(harness::Stage::Analyze));
        const double total = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        double attackSeconds = 0.0;
        for (auto st : through(harness::Stage::Attack)) attackSeconds += man.stages.at(harness::stage_name(st)).seconds;

        const auto mr = read_json(runA / "attack" / "metric_report.json");
        const auto ft = read_json(runA / "finetune" / "finetune.json");
        const auto def = read_json(runA / "defend" / "defense.json");
        const auto freq = read_json(runA / "analyze" / "frequency.json");
        const auto geo = read_json(runA / "analyze" / "geometry.json");
        const auto col = read_json(runA / "collude" / "collusion.json");

        {
            double best = 0.0;
            std::string per;
            for (const auto& [id, a] : mr.at("asrPerTrigger").items()) {
                best = std::max(best, a.get<double>());
                per += fmt::format("{}t{}={:.3f}", per.empty() ? "" : " ", id, a.get<double>());
            }
            const double drop = ft.at("controlCacc").get<double>() - ft.at("cacc").get<double>();
            report("C1", best >= 0.8 && drop <= 0.10 && attackSeconds < 900.0,
                   fmt::format("ASR {}; best {:.3f}; CACC {:.3f} vs clean {:.3f} (drop {:.3f}); {:.0f}s to attack",
                               per, best, ft.at("cacc").get<double>(), ft.at("controlCacc").get<double>(), drop,
                               attackSeconds));
        }
        {
            const auto& me = def.at("rareToken").at("maxEntropy");
            const double fp = me.at("flaggedPoisoned"), fc = me.at("flaggedClean"), after = me.at("asrAfter");
            report("C2", fp >= 0.9 && fc <= 0.1 && after <= 0.2,
                   fmt::format("rare-token: flagged poisoned {:.3f}, clean {:.3f}, ASR {:.3f} -> {:.3f} (threshold {:.3f})",
                               fp, fc, me.at("asrBefore").get<double>(), after, me.at("threshold").get<double>()));
        }
        {
            const auto& me = def.at("syntactic").at("maxEntropy");
            const double fp = me.at("flaggedPoisoned"), before = me.at("asrBefore"), after = me.at("asrAfter");
            report("C3", fp <= 0.3 && after >= 0.7 * before,
                   fmt::format("syntactic: flagged poisoned {:.3f}, ASR {:.3f} -> {:.3f} (threshold {:.3f}); "
                               "{:.3f} flagged at the rare-token threshold",
                               fp, before, after, me.at("threshold").get<double>(),
                               me.at("flaggedAtRareThreshold").get<double>()));
        }
        check_metrics();
        check_gradients();
        {
            const double pre = geo.at("preRatio"), post = geo.at("postRatio");
            report("C6", pre >= 0.95 && post < 0.8,
                   fmt::format("intra/inter ratio before {:.3f} (needs >= 0.95), after {:.3f} (needs < 0.8)", pre, post));
        }
        {
            const double floor = alignment_floor(cfg, runA);
            const double mse = geo.at("heldOutCleanMse");
            const double bound = 5.0 * std::max(floor, 1e-3);
            report("C7", floor < 1e-3 && mse <= bound,
                   fmt::format("L_c-only floor {:.2e}; default held-out clean MSE {:.4f} vs bound {:.4f}", floor, mse,
                               bound));
        }
        {
            const double rec = freq.at("reconstructionMaxError");
            const double pl = freq.at("lateLowFraction").at("poisoned"), cl = freq.at("lateLowFraction").at("clean");
            report("C8", rec <= 1e-9 && pl > cl,
                   fmt::format("band reconstruction err {:.1e}; late low-band fraction poisoned {:.5f} vs clean {:.5f}",
                               rec, pl, cl));
        }
        {
            const auto& ro = def.at("rareToken").at("onion");
            const auto& so = def.at("syntactic").at("onion");
            const auto& fp = def.at("syntactic").at("finePrune");
            const double rDrop = ro.at("asrBefore").get<double>() - ro.at("asrAfter").get<double>();
            const double sDrop = so.at("asrBefore").get<double>() - so.at("asrAfter").get<double>();
            const double pBefore = fp.at("asrBefore"), pAfter = fp.at("asrAfter");
            const double cDrop = fp.at("caccBefore").get<double>() - fp.at("caccAfter").get<double>();
            report("C9", rDrop >= 0.5 && sDrop <= 0.15 && pAfter >= 0.8 * pBefore && cDrop <= 0.10,
                   fmt::format("onion ASR drop rare {:.3f}, syntactic {:.3f}; prune {:.0f}%: ASR {:.3f} -> {:.3f}, "
                               "CACC drop {:.3f}",
                               rDrop, sDrop, 100.0 * fp.at("fraction").get<double>(), pBefore, pAfter, cDrop));
        }
        {
            bool ok = !col.at("groups").empty();
            std::string d;
            for (const auto& g : col.at("groups")) {
                const double c = g.at("collusionAsr"), b = g.at("bestSingleAsr");
                ok = ok && c >= 0.9 * b;
                d += fmt::format("{}target {}: collusion {:.3f} vs best single {:.3f}", d.empty() ? "" : "; ",
                                 g.at("target").get<int>(), c, b);
            }
            report("C10", ok, d.empty() ? "no templates share a target" : d);
        }
        {
            auto cfgB = cfg;
            cfgB.outputDir = runB.string();
            harness::run_experiment(cfgB, through(harness::Stage::Attack));
            const std::string a = slurp(runA / "attack" / "metric_report.json");
            const std::string b = slurp(runB / "attack" / "metric_report.json");
            report("C11", !a.empty() && a == b,
                   fmt::format("metric report of a fresh rerun is {}byte-identical ({} bytes)", a == b ? "" : "not ",
                               a.size()));
        }
        std::cout << fmt::format("pipeline wall time {:.0f}s", total) << std::endl;
        if (!keep) fs::remove_all(root);
    } catch (const std::exception& e) {
        std::cerr << "acceptance aborted: " << e.what() << std::endl;
        return 2;
    }
    const auto failed = std::count_if(verdicts.begin(), verdicts.end(), [](const Verdict& v) { return !v.pass; });
    std::cout << fmt::format("{}/{} criteria pass", verdicts.size() - static_cast<std::size_t>(failed), verdicts.size())
              << std::endl;
    return failed == 0 ? 0 : 1;
}
