// featrl: command-line front end for the feature-generation search.
//
//   featrl run      --data d.csv --schema d.schema --out dir [options]
//   featrl evaluate --data d.csv --schema d.schema [--learner rf|logreg] [--metric m]
//   featrl report   --manifest dir
//
// Exit codes: 0 ok, 1 usage/config, 2 data/schema, 3 runtime.

#include <chrono>
#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "featrl/search.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace featrl;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitRuntime = 3;

constexpr const char* kOutEnv = "FEATRL_OUT_DIR";

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return kExitUsage;
    if (dynamic_cast<const SchemaError*>(&e) || dynamic_cast<const DataError*>(&e)) return kExitData;
    return kExitRuntime;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw SchemaError("cannot open '" + p.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string content_hash(const fs::path& p) {
    const std::string bytes = read_file(p);
    detail::Fnv1a h;
    h.bytes(bytes.data(), bytes.size());
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016" PRIx64, h.h);
    return std::string("fnv1a64:") + buf;
}

// Write to a temporary file, then rename into place.
template <class Fn>
void write_atomic(const fs::path& p, Fn&& fn) {
    fs::path tmp = p;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw Error("cannot write '" + tmp.string() + "'");
        fn(out);
        out.flush();
        if (!out) throw Error("write failed for '" + tmp.string() + "'");
    }
    fs::rename(tmp, p);
}

LearnerKind learner_from_string(const std::string& s) {
    if (s == "rf") return LearnerKind::RandomForest;
    if (s == "logreg") return LearnerKind::LogisticRegression;
    throw ConfigError("unknown learner '" + s + "' (expected rf or logreg)");
}

const char* to_string(LearnerKind k) { return k == LearnerKind::RandomForest ? "rf" : "logreg"; }

Ablation ablation_from_string(const std::string& s) {
    if (s.empty() || s == "none") return Ablation::None;
    if (s == "k") return Ablation::NoDiscriminator;
    if (s == "t") return Ablation::NoAttention;
    if (s == "c") return Ablation::NoDiscrete;
    throw ConfigError("unknown ablation '" + s + "' (expected k, t or c)");
}

std::optional<Metric> parse_metric(const std::string& s) {
    if (s.empty()) return std::nullopt;
    auto m = metric_from_string(s);
    if (!m) throw ConfigError("unknown metric '" + s + "' (expected f1-macro, f1-weighted or 1rae)");
    return m;
}

std::string format_score(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

struct RunOptions {
    std::string data, schema, out;
    long long epochs = 200;
    long long steps = 6;
    std::uint64_t seed = 0;
    std::string learner = "rf";
    std::string ablation;
    std::string metric;
    std::size_t cap = 0;
    bool chain_epochs = false;
    std::size_t folds = 5;
    std::size_t trees = 50;
    std::string reward_mode = "unconditional";
};

json config_json(const SearchConfig& cfg, const RunOptions& o) {
    json j;
    j["epochs"] = cfg.epochs;
    j["steps"] = cfg.steps;
    j["seed"] = cfg.seed;
    j["learner"] = to_string(cfg.learner.kind);
    j["trees"] = cfg.learner.trees;
    j["folds"] = cfg.folds;
    j["metric"] = o.metric.empty() ? "default" : o.metric;
    j["ablation"] = to_string(cfg.ablation);
    j["cap"] = cfg.cap;
    j["chain_epochs"] = cfg.chain_epochs;
    j["reward_weights"] = {cfg.weights.alpha, cfg.weights.beta, cfg.weights.gamma, cfg.weights.delta};
    j["reward_mode"] = o.reward_mode;
    j["discount"] = cfg.discount;
    j["epsilon"] = {{"start", cfg.epsilon.start}, {"end", cfg.epsilon.end}, {"reach_fraction", cfg.epsilon.reach_fraction}};
    j["encoding"] = {{"gamma_enc", cfg.encoding.gamma_enc},
                     {"d_model", cfg.encoding.d_model},
                     {"heads", cfg.encoding.heads},
                     {"hidden", cfg.encoding.hidden}};
    j["replay_capacity"] = cfg.replay_capacity;
    j["batch"] = cfg.batch;
    j["learning_rate"] = cfg.adam.lr;
    return j;
}

int cmd_run(const RunOptions& o) {
    const auto started = std::chrono::system_clock::now();
    const auto t0 = std::chrono::steady_clock::now();
    json manifest;
    manifest["command"] = "run";
    manifest["status"] = "error";
    fs::path out = o.out;
    auto write_manifest = [&]() {
        if (out.empty()) return;
        std::error_code ec;
        fs::create_directories(out, ec);
        if (ec) return;
        const auto secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const std::time_t t = std::chrono::system_clock::to_time_t(started);
        char stamp[32];
        std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
        manifest["timing"] = {{"started", stamp}, {"duration_seconds", secs}};
        try {
            write_atomic(out / "manifest.json", [&](std::ostream& s) { s << manifest.dump(2) << '\n'; });
        } catch (const std::exception&) {
        }
    };

    try {
        if (out.empty()) {
            if (const char* env = std::getenv(kOutEnv)) out = env;
        }
        if (out.empty()) throw ConfigError(std::string("--out is required (or set ") + kOutEnv + ")");
        if (o.epochs < 1) throw ConfigError("epochs must be at least 1");
        if (o.steps < 1) throw ConfigError("steps per epoch must be at least 1");

        SearchConfig cfg;
        cfg.epochs = static_cast<std::size_t>(o.epochs);
        cfg.steps = static_cast<std::size_t>(o.steps);
        cfg.seed = o.seed;
        cfg.learner.kind = learner_from_string(o.learner);
        cfg.learner.trees = o.trees;
        cfg.metric = parse_metric(o.metric);
        cfg.ablation = ablation_from_string(o.ablation);
        cfg.cap = o.cap;
        cfg.chain_epochs = o.chain_epochs;
        cfg.folds = o.folds;
        if (o.reward_mode == "masked")
            cfg.reward_mode = RewardMode::Masked;
        else if (o.reward_mode != "unconditional")
            throw ConfigError("unknown reward mode '" + o.reward_mode + "'");
        manifest["config"] = config_json(cfg, o);
        manifest["input"] = {{"data", o.data}, {"schema", o.schema}};

        const SchemaSpec schema = load_schema(o.schema);
        const Dataset data = load_csv(o.data, schema);
        manifest["input"]["data_hash"] = content_hash(o.data);
        manifest["input"]["schema_hash"] = content_hash(o.schema);
        manifest["input"]["rows"] = data.rows();
        manifest["input"]["features"] = data.feature_count();
        manifest["input"]["task"] = to_string(data.task());

        Search search(data, cfg);
        SearchResult res = search.run();
        const WorkingSet best = materialize(res.best.exprs, search.original());

        fs::create_directories(out);
        write_atomic(out / "transformed.csv", [&](std::ostream& s) { write_csv(s, best.data); });
        write_atomic(out / "transformed.schema", [&](std::ostream& s) { write_schema(s, best.data); });
        write_atomic(out / "expressions.txt", [&](std::ostream& s) {
            for (const auto& e : best.exprs) s << e.to_string() << '\n';
        });
        write_atomic(out / "trace.csv", [&](std::ostream& s) { write_trace(s, res.trace); });
        write_atomic(out / "convergence.csv", [&](std::ostream& s) {
            s << "epoch,best\n";
            for (std::size_t e = 0; e < res.epoch_best.size(); ++e)
                s << e + 1 << ',' << detail::format_real(res.epoch_best[e]) << '\n';
        });
        write_atomic(out / "order_report.txt", [&](std::ostream& s) {
            s << "low_order " << res.order.low << '\n'
              << "high_order " << res.order.high << '\n'
              << "high_order_proportion " << detail::format_real(res.order.proportion) << '\n';
        });

        manifest["outputs"] = {"transformed.csv", "transformed.schema", "expressions.txt",
                               "trace.csv",       "convergence.csv",    "order_report.txt"};
        manifest["scores"] = {{"metric", to_string(res.metric)},
                              {"base", res.base_score},
                              {"best", res.best_score},
                              {"delta", res.best_score - res.base_score}};
        manifest["order"] = {{"low", res.order.low}, {"high", res.order.high}, {"proportion", res.order.proportion}};
        manifest["evaluations"] = res.evaluations;
        manifest["status"] = "ok";
        write_manifest();

        std::cout << "metric: " << to_string(res.metric) << '\n'
                  << "base score: " << format_score(res.base_score) << '\n'
                  << "best score: " << format_score(res.best_score) << '\n'
                  << "delta: " << format_score(res.best_score - res.base_score) << '\n'
                  << "features: " << best.exprs.size() << " (high-order " << res.order.high << ")\n"
                  << "output: " << out.string() << '\n';
        return kExitOk;
    } catch (const std::exception& e) {
        manifest["error"] = e.what();
        write_manifest();
        std::cerr << "featrl run: " << e.what() << '\n';
        return exit_code_for(e);
    }
}

struct EvalOptions {
    std::string data, schema;
    std::string learner = "rf";
    std::string metric;
    std::uint64_t seed = 0;
    std::size_t folds = 5;
    std::size_t trees = 50;
};

int cmd_evaluate(const EvalOptions& o) {
    try {
        LearnerConfig lc;
        lc.kind = learner_from_string(o.learner);
        lc.trees = o.trees;
        lc.seed = o.seed;
        lc.validate();
        auto metric = parse_metric(o.metric);
        const Dataset data = load_csv(o.data, load_schema(o.schema));
        const Metric m = metric.value_or(default_metric(data.task()));
        check_metric(m, data.task());
        const FoldPlan folds = split_folds(data, o.folds, o.seed);
        const Score s = evaluate_cv(data, lc, folds, m);
        std::cout << to_string(m) << ": " << detail::format_real(s.value) << '\n';
        return kExitOk;
    } catch (const std::exception& e) {
        std::cerr << "featrl evaluate: " << e.what() << '\n';
        return exit_code_for(e);
    }
}

int cmd_report(const std::string& dir) {
    try {
        const fs::path root(dir);
        json manifest;
        try {
            manifest = json::parse(read_file(root / "manifest.json"));
        } catch (const json::exception& e) {
            throw SchemaError(std::string("corrupt manifest: ") + e.what());
        }
        if (manifest.value("status", "") != "ok") throw DataError("manifest does not describe a completed run");

        std::vector<FeatureExpression> exprs;
        {
            std::istringstream in(read_file(root / "expressions.txt"));
            std::string line;
            while (std::getline(in, line))
                if (!line.empty()) exprs.push_back(parse_expression(line));
        }
        const OrderReport r = order_report(exprs);
        char pct[32];
        std::snprintf(pct, sizeof pct, "%.1f%%", 100.0 * r.proportion);
        std::cout << "order report\n"
                  << "  low-order features   " << r.low << '\n'
                  << "  high-order features  " << r.high << '\n'
                  << "  high-order share     " << pct << '\n';
        if (manifest.contains("scores")) {
            const auto& s = manifest["scores"];
            std::cout << "scores (" << s.value("metric", "") << ")\n"
                      << "  base  " << format_score(s.value("base", 0.0)) << '\n'
                      << "  best  " << format_score(s.value("best", 0.0)) << '\n';
        }
        std::cout << "convergence (epoch,best)\n";
        std::istringstream conv(read_file(root / "convergence.csv"));
        std::string line;
        std::getline(conv, line);
        while (std::getline(conv, line))
            if (!line.empty()) std::cout << line << '\n';
        return kExitOk;
    } catch (const std::exception& e) {
        std::cerr << "featrl report: " << e.what() << '\n';
        return exit_code_for(e);
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Dual-agent reinforcement-learning feature generation"};
    app.require_subcommand(1);

    RunOptions ro;
    auto* run = app.add_subcommand("run", "search for a transformed feature set");
    run->add_option("--data", ro.data, "input CSV")->required();
    run->add_option("--schema", ro.schema, "column schema (name = kind per line)")->required();
    run->add_option("--out", ro.out, std::string("output directory (default: $") + kOutEnv + ")");
    run->add_option("--epochs", ro.epochs, "search epochs")->capture_default_str();
    run->add_option("--steps", ro.steps, "exploration steps per epoch")->capture_default_str();
    run->add_option("--seed", ro.seed, "random seed")->capture_default_str();
    run->add_option("--learner", ro.learner, "downstream learner: rf or logreg")->capture_default_str();
    run->add_option("--ablation", ro.ablation, "k (no discriminator), t (no attention) or c (no discrete)");
    run->add_option("--metric", ro.metric, "f1-macro, f1-weighted or 1rae");
    run->add_option("--cap", ro.cap, "feature cap (0 = 4x original count)")->capture_default_str();
    run->add_flag("--chain-epochs", ro.chain_epochs, "carry the feature set across epochs");
    run->add_option("--folds", ro.folds, "cross-validation folds")->capture_default_str();
    run->add_option("--trees", ro.trees, "random forest size")->capture_default_str();
    run->add_option("--reward-mode", ro.reward_mode, "unconditional or masked")->capture_default_str();

    EvalOptions eo;
    auto* evaluate = app.add_subcommand("evaluate", "cross-validated score of a dataset");
    evaluate->add_option("--data", eo.data, "input CSV")->required();
    evaluate->add_option("--schema", eo.schema, "column schema")->required();
    evaluate->add_option("--learner", eo.learner, "rf or logreg")->capture_default_str();
    evaluate->add_option("--metric", eo.metric, "f1-macro, f1-weighted or 1rae");
    evaluate->add_option("--seed", eo.seed, "random seed")->capture_default_str();
    evaluate->add_option("--folds", eo.folds, "cross-validation folds")->capture_default_str();
    evaluate->add_option("--trees", eo.trees, "random forest size")->capture_default_str();

    std::string manifest_dir;
    auto* report = app.add_subcommand("report", "order report and convergence series of a finished run");
    report->add_option("--manifest", manifest_dir, "run output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitUsage;
    }

    if (*run) return cmd_run(ro);
    if (*evaluate) return cmd_evaluate(eo);
    return cmd_report(manifest_dir);
}
