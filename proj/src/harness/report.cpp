#include <fstream>
#include <iomanip>
#include <sstream>

#include "synghost/common/errors.hpp"
#include "synghost/harness/pipeline.hpp"
#include "synghost/metrics/metrics.hpp"

namespace synghost::harness {

namespace fs = std::filesystem;
using nlohmann::json;

ReportFormat parse_report_format(const std::string& name) {
    if (name == "json") return ReportFormat::Json;
    if (name == "csv") return ReportFormat::Csv;
    if (name == "summary-text" || name == "summary") return ReportFormat::SummaryText;
    throw ValidationError("unknown report format: " + name);
}

namespace {

std::optional<json> artifact(const RunManifest& m, const std::string& stage, const std::string& rel) {
    auto it = m.stages.find(stage);
    if (it == m.stages.end() || !it->second.artifacts.count(rel)) return std::nullopt;
    std::ifstream in(m.path_of(rel));
    if (!in) throw std::runtime_error("stale cache: missing " + rel);
    return json::parse(in);
}

fs::path write_text(const fs::path& p, const std::string& text) {
    fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    out << text;
    return p;
}

std::string num(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

std::string pct(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << 100.0 * v;
    return os.str();
}

}  // namespace

std::vector<fs::path> emit_report(const RunManifest& m, ReportFormat format) {
    const auto mj = artifact(m, "attack", "attack/metric_report.json");
    if (!mj) throw ValidationError("report needs the attack stage");
    const auto report = metrics::MetricReport::from_json(*mj);
    const fs::path dir = m.runDir / "report";
    std::vector<fs::path> out;

    if (format == ReportFormat::Json) {
        json j;
        j["configHash"] = m.configHash;
        j["metrics"] = *mj;
        if (auto a = artifact(m, "collude", "collude/collusion.json")) j["collusion"] = *a;
        if (auto a = artifact(m, "defend", "defend/defense.json")) j["defense"] = *a;
        if (auto a = artifact(m, "defend", "defend/entropy_syntactic.json")) j["entropy"]["syntactic"] = *a;
        if (auto a = artifact(m, "defend", "defend/entropy_rare.json")) j["entropy"]["rareToken"] = *a;
        if (auto a = artifact(m, "defend", "defend/entropy_clean.json")) j["entropy"]["clean"] = *a;
        if (auto a = artifact(m, "analyze", "analyze/frequency.json")) j["frequency"] = *a;
        if (auto a = artifact(m, "analyze", "analyze/geometry.json")) j["geometry"] = *a;
        if (auto a = artifact(m, "analyze", "analyze/probe_curve.json")) j["probeCurve"] = *a;
        if (auto a = artifact(m, "analyze", "analyze/attention.json")) j["attention"] = *a;
        if (auto a = artifact(m, "analyze", "analyze/representation_map.json")) j["representation"] = *a;
        out.push_back(write_text(dir / "report.json", j.dump(2) + "\n"));
        return out;
    }

    if (format == ReportFormat::Csv) {
        out.push_back(write_text(dir / "metrics.csv", report.csv_header() + "\n" + report.csv_row() + "\n"));
        std::ostringstream ent;
        ent << "group,sampleId,avgEntropy,flaggedPoisoned,threshold\n";
        bool anyEnt = false;
        for (const auto& [g, rel] : {std::pair<std::string, std::string>{"syntactic", "defend/entropy_syntactic.json"},
                                     {"rareToken", "defend/entropy_rare.json"},
                                     {"clean", "defend/entropy_clean.json"}}) {
            auto a = artifact(m, "defend", rel);
            if (!a) continue;
            anyEnt = true;
            for (const auto& r : (*a)["perSample"])
                ent << g << ',' << r["sampleId"].get<std::uint64_t>() << ',' << num(r["avgEntropy"].get<double>())
                    << ',' << (r["flaggedPoisoned"].get<bool>() ? 1 : 0) << ',' << num((*a)["threshold"].get<double>())
                    << '\n';
        }
        if (anyEnt) out.push_back(write_text(dir / "entropy.csv", ent.str()));
        if (auto a = artifact(m, "analyze", "analyze/frequency.json")) {
            std::ostringstream f;
            f << "group,iteration,lowFraction,highFraction\n";
            for (const auto& [g, v] : (*a)["groups"].items()) {
                const auto& lo = v["lowFraction"];
                const auto& hi = v["highFraction"];
                for (std::size_t i = 0; i < lo.size(); ++i)
                    f << g << ',' << i << ',' << num(lo[i].get<double>()) << ',' << num(hi[i].get<double>()) << '\n';
            }
            out.push_back(write_text(dir / "frequency.csv", f.str()));
        }
        if (auto a = artifact(m, "analyze", "analyze/probe_curve.json")) {
            std::ostringstream p;
            p << "encoder,layer,accuracy,baseline\n";
            for (const auto& [enc, c] : a->items()) {
                const auto& per = c["perLayer"];
                for (std::size_t l = 0; l < per.size(); ++l)
                    p << enc << ',' << l + 1 << ',' << num(per[l].get<double>()) << ','
                      << num(c["baseline"].get<double>()) << '\n';
            }
            out.push_back(write_text(dir / "probe_curve.csv", p.str()));
        }
        if (m.stages.count("analyze")) {
            std::ifstream in(m.path_of("analyze/region_grid.csv"), std::ios::binary);
            std::ostringstream g;
            g << in.rdbuf();
            out.push_back(write_text(dir / "region_grid.csv", g.str()));
        }
        return out;
    }

    std::ostringstream s;
    s << "task,ASR,CACC,CACC-drop,L-ACR,T-ACR\n";
    s << report.task << ',' << pct(report.best_asr()) << ',' << pct(report.cacc) << ',' << pct(report.caccDropVsClean)
      << ',' << pct(report.lAcr) << ',' << pct(report.tAcr) << '\n';
    s << "\ntrigger,ASR\n";
    for (const auto& [id, a] : report.asrPerTrigger) s << 't' << id << ',' << pct(a) << '\n';
    out.push_back(write_text(dir / "summary.txt", s.str()));
    return out;
}

}  // namespace synghost::harness
