#pragma once

// Static flaw quantification: an annotator model lists every trigger it
// finds in a finished response; reports are aggregated per benchmark and
// scored against human labels.

#include <array>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "calm/calm.hpp"
#include "calm/client.hpp"
#include "calm/error.hpp"
#include "calm/model.hpp"
#include "calm/prompts.hpp"
#include "calm/record.hpp"

namespace calm {

inline SamplingConfig annotator_sampling_defaults() { return intervener_sampling_defaults(); }

/// Parses an annotator reply into instances; nullopt when the reply follows
/// neither schema or cites a step outside the response.
inline std::optional<std::vector<FlawInstance>> parse_flaw_report(const std::string& response,
                                                                  std::size_t segment_count) {
    using namespace calm_detail;
    auto found = findings(response);
    if (found.empty()) {
        if (has_marker_line(response, "NO FLAWS") ||
            upper(response).find("NO FLAWS") != std::string::npos)
            return std::vector<FlawInstance>{};
        return std::nullopt;
    }
    std::vector<FlawInstance> out;
    for (const auto& f : found) {
        auto t = trigger_from_number(f.trigger);
        if (!t || f.step >= segment_count) return std::nullopt;
        out.push_back(FlawInstance{*t, f.step, f.text});
    }
    return out;
}

inline FlawReport classify_flaws(const Trajectory& t, const Problem& p, ModelClient& annotator,
                                 const PromptSet& prompts = {},
                                 const SamplingConfig& sampling = annotator_sampling_defaults()) {
    auto prompt = instantiate(prompts.quantification_template,
                              {{"problem", p.description}, {"transcript", render_numbered_transcript(t)}});
    std::vector<ChatMessage> messages{{ChatRole::User, prompt}};
    RequestContext ctx{ModelRole::Annotator, t.id};
    std::string last;
    for (int attempt = 0; attempt < 2; ++attempt) {
        auto c = annotator.complete(messages, sampling, ctx);
        last = c.text;
        if (auto inst = parse_flaw_report(c.text, t.segment_count()))
            return FlawReport{t.id, std::move(*inst)};
    }
    throw Error(ErrorKind::UnparseableReport, "annotator reply matches no report schema: " +
                                                  last.substr(0, 200),
                t.id);
}

// ── Aggregation ─────────────────────────────────────────────────────

struct BenchmarkFlawStats {
    Benchmark benchmark = Benchmark::NL4Opt;
    std::size_t reports = 0;
    /// Mean instances per report, indexed by trigger number - 1.
    std::array<double, 7> trigger_frequency{};
    /// Indexed like kAllCategories; the procedural entry is Trigger 7 alone.
    std::array<double, 3> category_frequency{};
};

struct FlawDistribution {
    std::vector<BenchmarkFlawStats> per_benchmark;
    std::array<double, 7> macro_trigger{};
    std::array<double, 3> macro_category{};

    double trigger(TriggerType t) const { return macro_trigger[trigger_number(t) - 1]; }
    double category(FlawCategory c) const { return macro_category[static_cast<std::size_t>(c)]; }
};

/// Frequencies are mean instances per report within a benchmark; macro
/// values are the unweighted mean over benchmarks that have reports.
inline FlawDistribution aggregate_distribution(const std::vector<FlawReport>& reports,
                                               const std::vector<Problem>& problems) {
    std::map<std::string, Benchmark, std::less<>> bench_of;
    for (const auto& p : problems) bench_of.emplace(p.id, p.benchmark);

    std::map<Benchmark, BenchmarkFlawStats> stats;
    std::map<Benchmark, std::array<std::size_t, 7>> counts;
    for (const auto& r : reports) {
        auto it = bench_of.find(problem_id_of(r.trajectory_id));
        if (it == bench_of.end())
            throw Error(ErrorKind::UnknownTrajectory, "report refers to no known problem",
                        r.trajectory_id);
        auto& s = stats[it->second];
        s.benchmark = it->second;
        ++s.reports;
        auto& c = counts[it->second];
        for (const auto& inst : r.instances) ++c[trigger_number(inst.trigger) - 1];
    }

    FlawDistribution d;
    for (auto b : kAllBenchmarks) {
        auto it = stats.find(b);
        if (it == stats.end()) continue;
        auto s = it->second;
        const auto& c = counts[b];
        for (std::size_t i = 0; i < 7; ++i) {
            s.trigger_frequency[i] = static_cast<double>(c[i]) / static_cast<double>(s.reports);
            auto cat = static_cast<std::size_t>(category_of(kAllTriggers[i]));
            s.category_frequency[cat] += s.trigger_frequency[i];
        }
        d.per_benchmark.push_back(s);
    }
    if (d.per_benchmark.empty()) return d;
    const auto n = static_cast<double>(d.per_benchmark.size());
    for (const auto& s : d.per_benchmark) {
        for (std::size_t i = 0; i < 7; ++i) d.macro_trigger[i] += s.trigger_frequency[i] / n;
        for (std::size_t i = 0; i < 3; ++i) d.macro_category[i] += s.category_frequency[i] / n;
    }
    return d;
}

// ── Agreement ───────────────────────────────────────────────────────

struct AgreementResult {
    std::size_t matched = 0;
    std::size_t human_instances = 0;
    double accuracy = 0.0;
};

/// Instance-level agreement: per trajectory, an LLM instance matches a
/// human instance of the same trigger (step ignored, each used once).
/// The denominator is the number of human-labeled instances.
inline AgreementResult annotator_agreement_detail(const std::vector<FlawReport>& llm,
                                                  const std::vector<FlawReport>& human) {
    auto index = [](const std::vector<FlawReport>& reports, const char* side) {
        std::map<std::string, const FlawReport*> out;
        for (const auto& r : reports)
            if (!out.emplace(r.trajectory_id, &r).second)
                throw Error(ErrorKind::KeyMismatch, "duplicate trajectory id",
                            std::string(side) + ":" + r.trajectory_id);
        return out;
    };
    auto l = index(llm, "llm");
    auto h = index(human, "human");
    for (const auto& [id, _] : h)
        if (!l.count(id)) throw Error(ErrorKind::KeyMismatch, "missing from llm reports", id);
    for (const auto& [id, _] : l)
        if (!h.count(id)) throw Error(ErrorKind::KeyMismatch, "missing from human reports", id);

    AgreementResult res;
    std::size_t llm_instances = 0;
    for (const auto& [id, hr] : h) {
        std::array<std::size_t, 7> hc{}, lc{};
        for (const auto& i : hr->instances) ++hc[trigger_number(i.trigger) - 1];
        for (const auto& i : l[id]->instances) ++lc[trigger_number(i.trigger) - 1];
        for (std::size_t k = 0; k < 7; ++k) {
            res.matched += std::min(hc[k], lc[k]);
            res.human_instances += hc[k];
            llm_instances += lc[k];
        }
    }
    if (res.human_instances > 0)
        res.accuracy = static_cast<double>(res.matched) / static_cast<double>(res.human_instances);
    else
        res.accuracy = llm_instances == 0 ? 1.0 : 0.0;
    return res;
}

inline double annotator_agreement(const std::vector<FlawReport>& llm,
                                  const std::vector<FlawReport>& human) {
    return annotator_agreement_detail(llm, human).accuracy;
}

inline json to_json(const FlawDistribution& d) {
    auto triggers = [](const std::array<double, 7>& a) {
        json j = json::object();
        for (auto t : kAllTriggers) j[std::to_string(trigger_number(t))] = a[trigger_number(t) - 1];
        return j;
    };
    auto categories = [](const std::array<double, 3>& a) {
        json j = json::object();
        for (auto c : kAllCategories) j[std::string(to_string(c))] = a[static_cast<std::size_t>(c)];
        return j;
    };
    json per = json::array();
    for (const auto& s : d.per_benchmark)
        per.push_back(json{{"benchmark", std::string(to_string(s.benchmark))},
                           {"reports", s.reports},
                           {"triggers", triggers(s.trigger_frequency)},
                           {"categories", categories(s.category_frequency)}});
    return json{{"per_benchmark", std::move(per)},
                {"macro_triggers", triggers(d.macro_trigger)},
                {"macro_categories", categories(d.macro_category)}};
}

} // namespace calm
