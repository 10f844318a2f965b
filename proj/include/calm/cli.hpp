#pragma once

// Command-line front end: split, curate, emit-sft, evaluate, annotate,
// agreement, report. Settings resolve as flag > environment > config file
// > default; endpoint URLs and keys are read from the environment only.

#include <array>
#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "calm/annotator.hpp"
#include "calm/calm.hpp"
#include "calm/datasets.hpp"
#include "calm/grader.hpp"
#include "calm/http_client.hpp"
#include "calm/parallel.hpp"
#include "calm/process_runner.hpp"
#include "calm/record.hpp"
#include "calm/scripted_client.hpp"
#include "calm/scripted_runner.hpp"

namespace calm::cli {

enum ExitCode : int { kOk = 0, kRuntime = 1, kUsage = 2, kConfig = 3 };

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using EnvLookup = std::function<std::optional<std::string>(const std::string&)>;

inline EnvLookup process_env() {
    return [](const std::string& name) -> std::optional<std::string> {
        const char* v = std::getenv(name.c_str());
        if (!v) return std::nullopt;
        return std::string(v);
    };
}

constexpr std::array<ModelRole, 3> kRoles = {ModelRole::Reasoner, ModelRole::Intervener,
                                             ModelRole::Annotator};

struct EndpointSettings {
    std::string model = "default";
    std::string path = "/v1/chat/completions";
    bool prefill = true;
    bool stop = true;
    double requests_per_minute = 0.0;
    long timeout_seconds = 600;
    std::size_t retry_attempts = 3;
    long retry_backoff_ms = 1000;
};

struct Settings {
    std::array<EndpointSettings, 3> endpoints;
    std::array<SamplingConfig, 3> sampling = {reasoner_sampling_defaults(),
                                              intervener_sampling_defaults(),
                                              annotator_sampling_defaults()};
    double epsilon = kDefaultEpsilon;
    FlowBudgets budgets;
    std::size_t max_interventions = 5;
    std::size_t workers = 1;
    std::size_t samples = 8;
    std::uint64_t seed = 0;
    bool include_ground_truth = true;
    PromptSet prompts;
    std::string runner_command;
    std::size_t runner_pool = 0;  // 0 = one per worker
};

namespace cli_detail {

inline std::size_t role_index(ModelRole r) { return static_cast<std::size_t>(r); }

inline std::string upper(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return out;
}

inline void check_keys(const json& obj, std::initializer_list<std::string_view> allowed,
                       const std::string& where) {
    if (!obj.is_object()) throw ConfigError(where + ": expected an object");
    for (const auto& [key, _] : obj.items()) {
        bool ok = false;
        for (auto a : allowed) ok = ok || key == a;
        if (key == "base_url" || key == "api_key" || key == "url" || key == "key")
            throw ConfigError(where + "." + key +
                              ": endpoint URLs and credentials are read from environment "
                              "variables, not the config file");
        if (!ok) throw ConfigError(where + ": unknown key '" + key + "'");
    }
}

template <class T>
T get(const json& obj, const char* key, T fallback, const std::string& where) {
    if (!obj.contains(key)) return fallback;
    try {
        return obj.at(key).get<T>();
    } catch (const std::exception&) {
        throw ConfigError(where + "." + key + ": wrong type");
    }
}

inline void apply_sampling(SamplingConfig& s, const json& j, const std::string& where) {
    check_keys(j, {"temperature", "top_p", "max_tokens", "seed"}, where);
    s.temperature = get(j, "temperature", s.temperature, where);
    s.top_p = get(j, "top_p", s.top_p, where);
    s.max_tokens = get(j, "max_tokens", s.max_tokens, where);
    if (j.contains("seed")) s.seed = get<std::int64_t>(j, "seed", 0, where);
}

inline std::string resolve_path(const std::filesystem::path& base, const std::string& p) {
    std::filesystem::path path(p);
    return path.is_absolute() ? p : (base / path).string();
}

inline void apply_config(Settings& s, const json& j, const std::filesystem::path& base) {
    check_keys(j, {"endpoints", "sampling", "epsilon", "budgets", "max_interventions", "workers",
                   "samples", "seed", "include_ground_truth", "prompts", "runner"},
               "config");
    if (j.contains("endpoints")) {
        const auto& e = j["endpoints"];
        check_keys(e, {"reasoner", "intervener", "annotator"}, "endpoints");
        for (auto role : kRoles) {
            auto name = std::string(to_string(role));
            if (!e.contains(name)) continue;
            auto where = "endpoints." + name;
            const auto& ej = e[name];
            check_keys(ej, {"model", "path", "prefill", "stop", "requests_per_minute",
                            "timeout_seconds", "retry_attempts", "retry_backoff_ms"},
                       where);
            auto& ep = s.endpoints[role_index(role)];
            ep.model = get(ej, "model", ep.model, where);
            ep.path = get(ej, "path", ep.path, where);
            ep.prefill = get(ej, "prefill", ep.prefill, where);
            ep.stop = get(ej, "stop", ep.stop, where);
            ep.requests_per_minute = get(ej, "requests_per_minute", ep.requests_per_minute, where);
            ep.timeout_seconds = get(ej, "timeout_seconds", ep.timeout_seconds, where);
            ep.retry_attempts = get(ej, "retry_attempts", ep.retry_attempts, where);
            ep.retry_backoff_ms = get(ej, "retry_backoff_ms", ep.retry_backoff_ms, where);
        }
    }
    if (j.contains("sampling")) {
        const auto& sj = j["sampling"];
        check_keys(sj, {"reasoner", "intervener", "annotator"}, "sampling");
        for (auto role : kRoles) {
            auto name = std::string(to_string(role));
            if (sj.contains(name)) apply_sampling(s.sampling[role_index(role)], sj[name], "sampling." + name);
        }
    }
    s.epsilon = get(j, "epsilon", s.epsilon, "config");
    s.max_interventions = get(j, "max_interventions", s.max_interventions, "config");
    s.workers = get(j, "workers", s.workers, "config");
    s.samples = get(j, "samples", s.samples, "config");
    s.seed = get(j, "seed", s.seed, "config");
    s.include_ground_truth = get(j, "include_ground_truth", s.include_ground_truth, "config");
    if (j.contains("budgets")) {
        const auto& b = j["budgets"];
        check_keys(b, {"max_executions", "max_response_tokens", "wall_time_seconds", "memory_bytes",
                       "output_cap_bytes"},
                   "budgets");
        s.budgets.max_executions = get(b, "max_executions", s.budgets.max_executions, "budgets");
        s.budgets.max_response_tokens =
            get(b, "max_response_tokens", s.budgets.max_response_tokens, "budgets");
        auto& l = s.budgets.limits;
        l.wall_time_seconds = get(b, "wall_time_seconds", l.wall_time_seconds, "budgets");
        l.memory_bytes = get(b, "memory_bytes", l.memory_bytes, "budgets");
        l.output_cap_bytes = get(b, "output_cap_bytes", l.output_cap_bytes, "budgets");
    }
    if (j.contains("prompts")) {
        const auto& p = j["prompts"];
        check_keys(p, {"reasoner_system", "reasoner", "intervener", "quantification"}, "prompts");
        try {
            if (p.contains("reasoner_system"))
                s.prompts.reasoner_system =
                    read_file(resolve_path(base, get<std::string>(p, "reasoner_system", "", "prompts")));
            if (p.contains("reasoner"))
                s.prompts.reasoner_template = load_template(
                    resolve_path(base, get<std::string>(p, "reasoner", "", "prompts")), {"problem"});
            if (p.contains("intervener"))
                s.prompts.intervener_template =
                    load_template(resolve_path(base, get<std::string>(p, "intervener", "", "prompts")),
                                  {"problem", "transcript"});
            if (p.contains("quantification"))
                s.prompts.quantification_template = load_template(
                    resolve_path(base, get<std::string>(p, "quantification", "", "prompts")),
                    {"problem", "transcript"});
        } catch (const Error& e) {
            throw ConfigError(std::string("prompts: ") + e.what());
        }
    }
    if (j.contains("runner")) {
        const auto& r = j["runner"];
        check_keys(r, {"command", "pool_size"}, "runner");
        s.runner_command = get(r, "command", s.runner_command, "runner");
        s.runner_pool = get(r, "pool_size", s.runner_pool, "runner");
    }
}

template <class T>
std::optional<T> env_number(const EnvLookup& env, const std::string& name) {
    auto v = env(name);
    if (!v || v->empty()) return std::nullopt;
    std::istringstream in(*v);
    T out{};
    in >> out;
    if (!in || !in.eof()) throw ConfigError(name + ": not a valid number: '" + *v + "'");
    return out;
}

inline void apply_env(Settings& s, const EnvLookup& env) {
    if (auto v = env_number<double>(env, "CALM_EPSILON")) s.epsilon = *v;
    if (auto v = env_number<std::size_t>(env, "CALM_WORKERS")) s.workers = *v;
    if (auto v = env_number<std::size_t>(env, "CALM_SAMPLES")) s.samples = *v;
    if (auto v = env_number<std::size_t>(env, "CALM_MAX_INTERVENTIONS")) s.max_interventions = *v;
    if (auto v = env_number<std::uint64_t>(env, "CALM_SEED")) s.seed = *v;
    if (auto v = env("CALM_RUNNER_CMD"); v && !v->empty()) s.runner_command = *v;
    for (auto role : kRoles) {
        auto prefix = "CALM_" + upper(to_string(role)) + "_";
        if (auto v = env(prefix + "MODEL"); v && !v->empty())
            s.endpoints[role_index(role)].model = *v;
    }
}

inline void finalize(Settings& s) {
    if (!(s.epsilon > 0.0)) throw ConfigError("epsilon must be positive");
    if (s.workers < 1) throw ConfigError("workers must be >= 1");
    if (s.samples < 1) throw ConfigError("samples must be >= 1");
    if (s.max_interventions < 1) throw ConfigError("max_interventions must be >= 1");
    s.budgets.limits.max_executions_per_trajectory = std::max<std::size_t>(1, s.budgets.max_executions);
    try {
        s.budgets.validate();
        for (const auto& sc : s.sampling) sc.validate();
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
}

class UnconfiguredRunner final : public Runner {
public:
    SandboxResult run(const RunnerRequest&) override {
        throw Error(ErrorKind::RunnerUnavailable,
                    "no runner configured (use --runner, CALM_RUNNER_CMD or runner.command)",
                    "runner");
    }
};

inline std::string pretty(const json& j) { return j.dump(2, ' ', false, json::error_handler_t::replace) + "\n"; }

inline std::string with_suffix(const std::string& path, const std::string& suffix) {
    return path + suffix;
}

} // namespace cli_detail

/// Shared options every model-driven subcommand accepts.
struct CommonOptions {
    std::string config;
    std::optional<double> epsilon;
    std::optional<std::size_t> workers;
    std::optional<std::size_t> samples;
    std::optional<std::size_t> max_interventions;
    std::optional<std::uint64_t> seed;
    std::string reasoner_mock;
    std::string intervener_mock;
    std::string annotator_mock;
    std::string runner_mock;
    std::string runner;
};

class App {
public:
    App(std::ostream& out, std::ostream& err, EnvLookup env)
        : out_(out), err_(err), env_(std::move(env)) {}

    int run(int argc, const char* const* argv);

private:
    Settings load_settings() const {
        Settings s;
        std::string path = opts_.config;
        if (path.empty())
            if (auto v = env_("CALM_CONFIG")) path = *v;
        if (!path.empty()) {
            std::string text;
            try {
                text = read_file(path);
            } catch (const Error& e) {
                throw ConfigError(std::string("config: ") + e.what());
            }
            json j;
            try {
                j = json::parse(text);
            } catch (const std::exception& e) {
                throw ConfigError(path + ": invalid JSON: " + e.what());
            }
            cli_detail::apply_config(s, j, std::filesystem::path(path).parent_path());
        }
        cli_detail::apply_env(s, env_);
        if (opts_.epsilon) s.epsilon = *opts_.epsilon;
        if (opts_.workers) s.workers = *opts_.workers;
        if (opts_.samples) s.samples = *opts_.samples;
        if (opts_.max_interventions) s.max_interventions = *opts_.max_interventions;
        if (opts_.seed) s.seed = *opts_.seed;
        if (!opts_.runner.empty()) s.runner_command = opts_.runner;
        cli_detail::finalize(s);
        return s;
    }

    std::shared_ptr<ModelClient> make_client(ModelRole role, const std::string& mock,
                                             const Settings& s) const {
        if (!mock.empty()) {
            try {
                return std::make_shared<ScriptedClient>(load_script(mock));
            } catch (const Error& e) {
                throw ConfigError(std::string("mock script: ") + e.what());
            }
        }
        auto prefix = "CALM_" + cli_detail::upper(to_string(role)) + "_";
        auto url = env_(prefix + "BASE_URL");
        if (!url || url->empty())
            throw ConfigError(prefix + "BASE_URL is not set and no --" + std::string(to_string(role)) +
                              "-mock was given");
        const auto& ep = s.endpoints[cli_detail::role_index(role)];
        EndpointConfig cfg;
        cfg.base_url = *url;
        cfg.path = ep.path;
        cfg.model = ep.model;
        cfg.api_key = env_(prefix + "API_KEY").value_or("");
        cfg.prefill = ep.prefill;
        cfg.stop = ep.stop;
        cfg.requests_per_minute = ep.requests_per_minute;
        cfg.timeout = std::chrono::seconds(ep.timeout_seconds);
        cfg.retry.attempts = ep.retry_attempts;
        cfg.retry.initial_backoff = std::chrono::milliseconds(ep.retry_backoff_ms);
        try {
            return std::make_shared<HttpModelClient>(cfg);
        } catch (const Error& e) {
            throw ConfigError(e.what());
        }
    }

    std::shared_ptr<Runner> make_runner(const Settings& s) const {
        if (!opts_.runner_mock.empty()) {
            try {
                return std::make_shared<ScriptedRunner>(load_runner_script(opts_.runner_mock));
            } catch (const Error& e) {
                throw ConfigError(std::string("runner mock: ") + e.what());
            }
        }
        if (s.runner_command.empty()) return std::make_shared<cli_detail::UnconfiguredRunner>();
        return RunnerPool::of_command(s.runner_command, s.runner_pool ? s.runner_pool : s.workers);
    }

    int cmd_split(const std::string& corpus, const std::string& out_dir, const std::string& plan_path);
    int cmd_curate(const std::string& problems, const std::string& out, std::string funnel,
                   std::string failures, std::string trajectories);
    int cmd_emit(const std::string& in, const std::string& out, std::string flagged, std::string funnel);
    int cmd_evaluate(const std::string& problems, const std::string& out, std::string table,
                     const std::string& benchmarks, const std::string& trajectories);
    int cmd_annotate(const std::string& in, const std::string& problems, const std::string& out,
                     std::string distribution);
    int cmd_agreement(const std::string& llm, const std::string& human, const std::string& out);
    int cmd_report(const std::string& eval, const std::string& funnel, const std::string& distribution,
                   const std::string& out);

    std::ostream& out_;
    std::ostream& err_;
    EnvLookup env_;
    CommonOptions opts_;
};

inline int App::run(int argc, const char* const* argv) {
    CLI::App app{"Curation, evaluation and flaw analysis for reflective optimization-modeling agents",
                 "calm"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Expand all help");

    auto add_config = [&](CLI::App* sub) {
        sub->add_option("--config", opts_.config, "JSON config file (or CALM_CONFIG)");
    };
    auto add_models = [&](CLI::App* sub) {
        add_config(sub);
        sub->add_option("--workers", opts_.workers, "Parallel workers")->check(CLI::PositiveNumber);
        sub->add_option("--reasoner-mock", opts_.reasoner_mock, "Scripted reasoner responses (JSONL)");
        sub->add_option("--runner-mock", opts_.runner_mock, "Scripted runner responses (JSONL)");
        sub->add_option("--runner", opts_.runner, "Sandbox runner command (or CALM_RUNNER_CMD)");
    };

    std::string corpus, out, in, plan, problems, funnel, failures, flagged, table, benchmarks,
        trajectories, distribution, llm, human, eval;

    auto* split = app.add_subcommand("split", "Partition a corpus into SFT/RL/Test files");
    add_config(split);
    split->add_option("--corpus", corpus, "Corpus JSONL")->required();
    split->add_option("--out", out, "Output directory")->required();
    split->add_option("--seed", opts_.seed, "Shuffle seed (or CALM_SEED)");
    split->add_option("--plan", plan, "Split plan JSON (default: standard counts)");

    auto* curate = app.add_subcommand("curate", "Run the correction loop over problems");
    add_models(curate);
    curate->add_option("--problems", problems, "Problems JSONL")->required();
    curate->add_option("--out", out, "Outcome records (JSONL)")->required();
    curate->add_option("--funnel", funnel, "Funnel summary (default <out>.funnel.json)");
    curate->add_option("--failures", failures, "Failed problems (default <out>.failures.jsonl)");
    curate->add_option("--trajectories", trajectories, "Also write final trajectories (JSONL)");
    curate->add_option("--intervener-mock", opts_.intervener_mock, "Scripted intervener responses (JSONL)");
    curate->add_option("--max-interventions", opts_.max_interventions, "Intervention budget")
        ->check(CLI::PositiveNumber);
    curate->add_option("--epsilon", opts_.epsilon, "Relative error tolerance")->check(CLI::PositiveNumber);

    auto* emit = app.add_subcommand("emit-sft", "Emit SFT records from accepted outcomes");
    emit->add_option("--in", in, "Outcome records (JSONL)")->required();
    emit->add_option("--out", out, "SFT records (JSONL)")->required();
    emit->add_option("--flagged", flagged, "Correct-but-flagged outcomes (default <out>.flagged.jsonl)");
    emit->add_option("--funnel", funnel, "Funnel summary (default <out>.funnel.json)");

    auto* evaluate = app.add_subcommand("evaluate", "pass@1 over test problems");
    add_models(evaluate);
    evaluate->add_option("--problems", problems, "Test problems JSONL")->required();
    evaluate->add_option("--out", out, "Report JSON")->required();
    evaluate->add_option("--table", table, "Markdown table (default <out>.md)");
    evaluate->add_option("--epsilon", opts_.epsilon, "Relative error tolerance")->check(CLI::PositiveNumber);
    evaluate->add_option("--samples", opts_.samples, "Samples per problem")->check(CLI::PositiveNumber);
    evaluate->add_option("--benchmarks", benchmarks, "Comma-separated benchmark names");
    evaluate->add_option("--trajectories", trajectories, "Also write sampled trajectories (JSONL)");

    auto* annotate = app.add_subcommand("annotate", "Classify flaws in finished trajectories");
    add_config(annotate);
    annotate->add_option("--workers", opts_.workers, "Parallel workers")->check(CLI::PositiveNumber);
    annotate->add_option("--in", in, "Trajectory or outcome records (JSONL)")->required();
    annotate->add_option("--problems", problems, "Corpus JSONL")->required();
    annotate->add_option("--out", out, "Flaw reports (JSONL)")->required();
    annotate->add_option("--distribution", distribution,
                         "Aggregated distribution (default <out>.distribution.json)");
    annotate->add_option("--annotator-mock", opts_.annotator_mock, "Scripted annotator responses (JSONL)");

    auto* agreement = app.add_subcommand("agreement", "Instance-level agreement with human labels");
    agreement->add_option("--llm", llm, "Annotator flaw reports (JSONL)")->required();
    agreement->add_option("--human", human, "Human flaw reports (JSONL)")->required();
    agreement->add_option("--out", out, "Result JSON");

    auto* report = app.add_subcommand("report", "Render saved reports as text");
    report->add_option("--eval", eval, "Evaluation report JSON");
    report->add_option("--funnel", funnel, "Funnel summary JSON");
    report->add_option("--distribution", distribution, "Flaw distribution JSON");
    report->add_option("--out", out, "Also write the text to this file");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            out_ << app.help();
            return kOk;
        }
        err_ << "error: " << e.what() << "\n\n" << app.help();
        return kUsage;
    }

    try {
        if (split->parsed()) return cmd_split(corpus, out, plan);
        if (curate->parsed()) return cmd_curate(problems, out, funnel, failures, trajectories);
        if (emit->parsed()) return cmd_emit(in, out, flagged, funnel);
        if (evaluate->parsed()) return cmd_evaluate(problems, out, table, benchmarks, trajectories);
        if (annotate->parsed()) return cmd_annotate(in, problems, out, distribution);
        if (agreement->parsed()) return cmd_agreement(llm, human, out);
        if (report->parsed()) {
            if (eval.empty() && funnel.empty() && distribution.empty()) {
                err_ << "error: report needs --eval, --funnel or --distribution\n\n" << report->help();
                return kUsage;
            }
            return cmd_report(eval, funnel, distribution, out);
        }
    } catch (const ConfigError& e) {
        err_ << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const Error& e) {
        err_ << "error: " << e.what() << "\n";
        return kRuntime;
    } catch (const std::exception& e) {
        err_ << "error: " << e.what() << "\n";
        return kRuntime;
    }
    err_ << app.help();
    return kUsage;
}

inline int App::cmd_split(const std::string& corpus_path, const std::string& out_dir,
                          const std::string& plan_path) {
    auto s = load_settings();
    SplitPlan plan = SplitPlan::defaults(s.seed);
    if (!plan_path.empty()) {
        try {
            plan = split_plan_from_json(json::parse(read_file(plan_path)), plan_path);
        } catch (const std::exception& e) {
            throw ConfigError(std::string("plan: ") + e.what());
        }
        if (opts_.seed || env_("CALM_SEED")) plan.seed = s.seed;
    }
    auto corpus = load_corpus(corpus_path);
    auto parts = split_corpus(corpus, plan);
    std::filesystem::path dir(out_dir);
    write_file_atomic(dir / "sft.jsonl", to_jsonl(parts.sft));
    write_file_atomic(dir / "rl.jsonl", to_jsonl(parts.rl));
    write_file_atomic(dir / "test.jsonl", to_jsonl(parts.test));
    write_file_atomic(dir / "plan.json", cli_detail::pretty(to_json(plan)));
    out_ << "split " << corpus.size() << " problems (seed " << plan.seed << "): " << parts.sft.size()
         << " sft, " << parts.rl.size() << " rl, " << parts.test.size() << " test\n";
    return kOk;
}

inline int App::cmd_curate(const std::string& problems_path, const std::string& out, std::string funnel,
                           std::string failures, std::string trajectories) {
    auto s = load_settings();
    auto reasoner = make_client(ModelRole::Reasoner, opts_.reasoner_mock, s);
    auto intervener = make_client(ModelRole::Intervener, opts_.intervener_mock, s);
    auto runner = make_runner(s);
    if (funnel.empty()) funnel = out + ".funnel.json";
    if (failures.empty()) failures = out + ".failures.jsonl";

    auto problems = load_corpus(problems_path);
    CalmConfig cfg;
    cfg.max_interventions = s.max_interventions;
    cfg.reasoner_sampling = s.sampling[0];
    cfg.intervener_sampling = s.sampling[1];
    cfg.budgets = s.budgets;
    cfg.epsilon = s.epsilon;
    cfg.include_ground_truth = s.include_ground_truth;

    std::vector<std::optional<CalmOutcome>> results(problems.size());
    std::vector<std::optional<json>> errors(problems.size());
    parallel_for(problems.size(), s.workers, [&](std::size_t i) {
        try {
            results[i] = calm_loop(problems[i], *reasoner, *intervener, *runner, cfg, s.prompts);
        } catch (const CalmFailure& f) {
            json j{{"problem_id", problems[i].id},
                   {"error", std::string(to_string(f.kind()))},
                   {"iteration", f.iteration()},
                   {"message", f.what()}};
            if (f.partial()) j["partial_trajectory"] = to_json(*f.partial());
            errors[i] = std::move(j);
        } catch (const Error& e) {
            errors[i] = json{{"problem_id", problems[i].id},
                             {"error", std::string(to_string(e.kind()))},
                             {"message", e.what()}};
        }
    });

    std::vector<CalmOutcome> outcomes;
    std::string failure_lines;
    std::size_t failed = 0;
    for (std::size_t i = 0; i < problems.size(); ++i) {
        if (results[i]) outcomes.push_back(std::move(*results[i]));
        if (errors[i]) {
            ++failed;
            failure_lines += record_detail::dump_line(*errors[i]);
            err_ << "problem " << problems[i].id << " failed: " << (*errors[i])["message"].get<std::string>()
                 << "\n";
        }
    }
    write_file_atomic(out, to_jsonl(outcomes));
    if (!trajectories.empty()) {
        std::vector<Trajectory> ts;
        for (const auto& o : outcomes) ts.push_back(o.trajectory);
        write_file_atomic(trajectories, to_jsonl(ts));
    }
    auto metrics = funnel_metrics(outcomes);
    auto fj = to_json(metrics);
    fj["failed"] = failed;
    write_file_atomic(funnel, cli_detail::pretty(fj));
    write_file_atomic(failures, failure_lines);
    out_ << "curated " << problems.size() << " problems: " << metrics.emitted << " golden, "
         << metrics.flagged_correct << " correct but flagged, " << failed << " failed\n";
    if (failed > 0) {
        err_ << failed << " problem(s) failed; partial results flagged in " << failures << "\n";
        return kRuntime;
    }
    return kOk;
}

inline int App::cmd_emit(const std::string& in, const std::string& out, std::string flagged,
                         std::string funnel) {
    if (flagged.empty()) flagged = out + ".flagged.jsonl";
    if (funnel.empty()) funnel = out + ".funnel.json";
    auto outcomes = read_jsonl<CalmOutcome>(in, [](const json& j, const std::string& where) {
        return outcome_from_json(j, where);
    });
    auto emission = emit_sft_dataset(outcomes);
    write_file_atomic(out, to_jsonl(emission.records));
    write_file_atomic(flagged, to_jsonl(emission.flagged));
    write_file_atomic(funnel, cli_detail::pretty(to_json(emission.funnel)));
    const auto& m = emission.funnel;
    char frac[96];
    std::snprintf(frac, sizeof frac, "%.4f (reference %.3f)", m.token_modification_fraction,
                  m.reference_fraction);
    out_ << "attempted " << m.attempted << ", correct " << m.correct << ", flawless " << m.flawless
         << ", emitted " << m.emitted << "; hint token fraction " << frac << "\n";
    return kOk;
}

inline int App::cmd_evaluate(const std::string& problems_path, const std::string& out, std::string table,
                             const std::string& benchmarks, const std::string& trajectories) {
    auto s = load_settings();
    auto reasoner = make_client(ModelRole::Reasoner, opts_.reasoner_mock, s);
    auto runner = make_runner(s);
    if (table.empty()) table = out + ".md";

    EvalConfig cfg;
    cfg.samples_per_problem = s.samples;
    cfg.epsilon = s.epsilon;
    cfg.sampling = s.sampling[0];
    cfg.budgets = s.budgets;
    cfg.workers = s.workers;
    if (!benchmarks.empty()) {
        std::stringstream ss(benchmarks);
        std::string name;
        while (std::getline(ss, name, ',')) {
            if (name.empty()) continue;
            auto b = parse_benchmark(name);
            if (!b) throw ConfigError("unknown benchmark '" + name + "'");
            cfg.benchmarks.push_back(*b);
        }
    }
    auto problems = load_corpus(problems_path);
    std::vector<Trajectory> sampled;
    auto report = evaluate_suite(problems, *reasoner, *runner, cfg, s.prompts,
                                 [&](const Problem&, const SampleResult& r) {
                                     if (!trajectories.empty()) sampled.push_back(r.trajectory);
                                 });
    write_file_atomic(out, cli_detail::pretty(to_json(report)));
    auto text = render_table(report);
    write_file_atomic(table, text);
    if (!trajectories.empty()) write_file_atomic(trajectories, to_jsonl(sampled));
    out_ << text;
    return kOk;
}

inline int App::cmd_annotate(const std::string& in, const std::string& problems_path, const std::string& out,
                             std::string distribution) {
    auto s = load_settings();
    auto annotator = make_client(ModelRole::Annotator, opts_.annotator_mock, s);
    if (distribution.empty()) distribution = out + ".distribution.json";
    auto problems = load_corpus(problems_path);
    auto trajectories = read_jsonl<Trajectory>(in, [](const json& j, const std::string& where) {
        if (j.is_object() && j.contains("trajectory"))
            return outcome_from_json(j, where).trajectory;
        return trajectory_from_json(j, where);
    });
    std::map<std::string, const Problem*> by_id;
    for (const auto& p : problems) by_id[p.id] = &p;
    for (const auto& t : trajectories)
        if (!by_id.count(t.problem_id))
            throw Error(ErrorKind::UnknownTrajectory, "trajectory refers to no known problem", t.id);

    std::vector<std::optional<FlawReport>> reports(trajectories.size());
    std::vector<std::string> errors(trajectories.size());
    parallel_for(trajectories.size(), s.workers, [&](std::size_t i) {
        try {
            reports[i] = classify_flaws(trajectories[i], *by_id[trajectories[i].problem_id], *annotator,
                                        s.prompts, s.sampling[2]);
        } catch (const Error& e) {
            errors[i] = e.what();
        }
    });
    std::vector<FlawReport> done;
    std::size_t failed = 0;
    for (std::size_t i = 0; i < reports.size(); ++i) {
        if (reports[i]) done.push_back(std::move(*reports[i]));
        else {
            ++failed;
            err_ << "trajectory " << trajectories[i].id << " failed: " << errors[i] << "\n";
        }
    }
    write_file_atomic(out, to_jsonl(done));
    write_file_atomic(distribution, cli_detail::pretty(to_json(aggregate_distribution(done, problems))));
    out_ << "annotated " << done.size() << " of " << trajectories.size() << " trajectories\n";
    return failed > 0 ? kRuntime : kOk;
}

inline int App::cmd_agreement(const std::string& llm_path, const std::string& human_path,
                              const std::string& out) {
    auto parse = [](const json& j, const std::string& where) { return flaw_report_from_json(j, where); };
    auto llm = read_jsonl<FlawReport>(llm_path, parse);
    auto human = read_jsonl<FlawReport>(human_path, parse);
    auto r = annotator_agreement_detail(llm, human);
    char line[160];
    std::snprintf(line, sizeof line, "accuracy %.4f (%zu matched of %zu human-labeled instances)\n",
                  r.accuracy, r.matched, r.human_instances);
    out_ << line;
    if (!out.empty())
        write_file_atomic(out, cli_detail::pretty(json{{"accuracy", r.accuracy},
                                                       {"matched", r.matched},
                                                       {"human_instances", r.human_instances},
                                                       {"denominator", "human-labeled instances"}}));
    return kOk;
}

inline int App::cmd_report(const std::string& eval, const std::string& funnel,
                           const std::string& distribution, const std::string& out) {
    auto load = [](const std::string& path) {
        return record_detail::parse(read_file(path), path);
    };
    std::string text;
    if (!eval.empty()) text += render_table(eval_report_from_json(load(eval), eval));
    if (!funnel.empty()) {
        auto m = funnel_from_json(load(funnel), funnel);
        char buf[512];
        std::snprintf(buf, sizeof buf,
                      "funnel: attempted %zu -> correct %zu -> flawless %zu -> emitted %zu\n"
                      "mean interventions %.2f, mean response tokens %.1f\n"
                      "hint token fraction %.4f vs reference %.3f (%s)\n",
                      m.attempted, m.correct, m.flawless, m.emitted, m.mean_interventions,
                      m.mean_response_tokens, m.token_modification_fraction, m.reference_fraction,
                      m.below_reference() ? "below" : "at or above");
        text += buf;
    }
    if (!distribution.empty()) {
        auto j = load(distribution);
        text += "| Benchmark | Reports | CodeUtilizationDistrust | LackOfOrExpertise | Procedural |\n";
        text += "|---|---|---|---|---|\n";
        auto row = [&](const std::string& name, const std::string& reports, const json& cats) {
            char buf[256];
            std::snprintf(buf, sizeof buf, "| %s | %s | %.3f | %.3f | %.3f |\n", name.c_str(),
                          reports.c_str(), cats.value("CodeUtilizationDistrust", 0.0),
                          cats.value("LackOfOrExpertise", 0.0), cats.value("Procedural", 0.0));
            text += buf;
        };
        try {
            for (const auto& b : j.at("per_benchmark"))
                row(b.at("benchmark").get<std::string>(), std::to_string(b.at("reports").get<std::size_t>()),
                    b.at("categories"));
            row("Macro AVG", "", j.at("macro_categories"));
        } catch (const json::exception& e) {
            throw Error(ErrorKind::MalformedRecord, e.what(), distribution);
        }
    }
    out_ << text;
    if (!out.empty()) write_file_atomic(out, text);
    return kOk;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout,
               std::ostream& err = std::cerr, EnvLookup env = process_env()) {
    App app(out, err, std::move(env));
    return app.run(argc, argv);
}

} // namespace calm::cli
