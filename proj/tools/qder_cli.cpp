#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "qder/qder.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace qder;

namespace {

void log(const std::string& msg) { std::cerr << "[qder] " << msg << "\n"; }

// Files written by one command. On failure everything listed is removed, and
// the output directory too if this command created it and it is now empty.
class Outputs {
public:
    explicit Outputs(fs::path dir) : dir_(std::move(dir)) {
        std::error_code ec;
        created_dir_ = !fs::exists(dir_, ec);
        fs::create_directories(dir_, ec);
        if (ec) throw IoError("cannot create output directory " + dir_.string() + ": " + ec.message());
    }

    fs::path claim(const std::string& name) {
        written_.push_back(name);
        return dir_ / name;
    }

    void text(const std::string& name, std::string_view content) { detail::write_all(claim(name), content, false); }

    void rollback() noexcept {
        std::error_code ec;
        for (const auto& name : written_) fs::remove(dir_ / name, ec);
        for (const auto& name : written_) {
            for (auto p = fs::path(name).parent_path(); !p.empty(); p = p.parent_path()) {
                if (fs::is_empty(dir_ / p, ec)) fs::remove(dir_ / p, ec);
            }
        }
        if (created_dir_ && fs::is_empty(dir_, ec)) fs::remove(dir_, ec);
    }

    void manifest(const std::string& command, const json& config, const std::vector<std::string>& warnings = {}) {
        json j;
        j["command"] = command;
        j["artifacts"] = written_;
        j["config"] = config;
        j["warnings"] = warnings;
        text("manifest.json", j.dump(2) + "\n");
    }

private:
    fs::path dir_;
    std::vector<std::string> written_;
    bool created_dir_ = false;
};

// ---------------------------------------------------------------------------
// Options

struct DataOptions {
    std::string corpus;
    std::string queries;
    std::string run;
    std::string qrels;
};

void add_data_options(CLI::App* sub, DataOptions& d, bool need_qrels = true) {
    sub->add_option("--corpus", d.corpus, "Document embeddings (.ndjson, or .bin/.packed/.qder for packed)")->required();
    sub->add_option("--queries", d.queries, "Query embeddings, same formats as --corpus")->required();
    sub->add_option("--run", d.run, "First-stage run file (TREC 6-column)")->required();
    auto* q = sub->add_option("--qrels", d.qrels, "Relevance judgments (TREC 4-column)");
    if (need_qrels) q->required();
}

struct TrainOptions {
    TrainConfig cfg;
    std::string ops = "multiply,add";
    std::string head = "bilinear";
};

void add_train_options(CLI::App* sub, TrainOptions& t) {
    auto& c = t.cfg;
    sub->add_option("--learning-rate", c.learning_rate, "Adam learning rate");
    sub->add_option("--batch-size", c.batch_size, "Examples per optimizer step");
    sub->add_option("--epochs", c.epochs, "Training epochs per fold");
    sub->add_option("--warmup-steps", c.warmup_steps, "Linear warmup length in optimizer steps (0 disables)");
    sub->add_option("--folds", c.folds, "Cross-validation folds");
    sub->add_option("--seed", c.seed, "Seed for sampling, folds, initialization and shuffling");
    sub->add_option("--adam-beta1", c.adam_beta1, "Adam first-moment decay");
    sub->add_option("--adam-beta2", c.adam_beta2, "Adam second-moment decay");
    sub->add_option("--adam-eps", c.adam_eps, "Adam denominator epsilon");
    sub->add_option("--ops", t.ops, "Interaction ops: comma list of multiply, add, subtract, or none");
    sub->add_option("--use-text", c.ablation.use_text, "Use the token channel");
    sub->add_option("--use-entity", c.ablation.use_entity, "Use the entity channel");
    sub->add_option("--score-scaling", c.ablation.use_score_scaling, "Scale features by the first-stage score");
    sub->add_option("--head", t.head, "Scoring head")->check(CLI::IsMember({"bilinear", "linear"}));
    sub->add_option("--adapter", c.ablation.adapter, "Train a per-channel affine adapter before attention");
}

void apply_ops(const std::string& spec, AblationConfig& cfg) {
    cfg.multiply = cfg.add = cfg.subtract = false;
    if (spec == "none") return;
    std::stringstream ss(spec);
    std::string op;
    while (std::getline(ss, op, ',')) {
        if (op == "multiply") cfg.multiply = true;
        else if (op == "add") cfg.add = true;
        else if (op == "subtract") cfg.subtract = true;
        else throw DataError("unknown interaction op '" + op + "'");
    }
}

TrainConfig resolve(TrainOptions& t, std::size_t threads) {
    TrainConfig cfg = t.cfg;
    apply_ops(t.ops, cfg.ablation);
    cfg.ablation.head = t.head == "linear" ? ScoringHead::linear : ScoringHead::bilinear;
    cfg.threads = threads;
    cfg.validate();
    return cfg;
}

Dataset load_dataset(const DataOptions& d, std::vector<std::string>& warnings) {
    Dataset data;
    data.corpus = load_corpus(d.corpus, format_from_path(d.corpus));
    data.queries = load_queries(d.queries, format_from_path(d.queries));
    data.run = load_run(d.run);
    if (!d.qrels.empty()) data.qrels = index_qrels(load_qrels(d.qrels, &warnings));
    for (const auto& [qid, cands] : data.run) {
        find_record(data.queries, qid, "query");
        for (const auto& c : cands) find_record(data.corpus, c.doc_id, "document");
    }
    log("loaded " + std::to_string(data.queries.size()) + " queries, " + std::to_string(data.corpus.size()) +
        " documents, " + std::to_string(data.run.size()) + " ranked queries");
    return data;
}

// Every option of the subcommand with its effective value, as strings.
json resolved_config(const CLI::App* sub) {
    json j;
    for (const CLI::Option* opt : sub->get_options()) {
        const auto name = opt->get_single_name();
        if (name == "help" || name == "config") continue;
        if (opt->count() > 0) {
            const auto& r = opt->results();
            if (opt->get_items_expected_max() > 1) j[name] = r;
            else j[name] = r.empty() ? std::string() : r.back();
        } else {
            j[name] = opt->get_default_str();
        }
    }
    return j;
}

std::string system_name(const std::string& path, std::set<std::string>& taken) {
    std::string base = fs::path(path).stem().string();
    if (base.empty()) base = "run";
    std::string name = base;
    const auto parent = fs::path(path).parent_path().filename().string();
    if (taken.contains(name) && !parent.empty()) name = parent + "_" + base;
    for (int i = 2; !taken.insert(name).second; ++i) name = base + "_" + std::to_string(i);
    return name;
}

// ---------------------------------------------------------------------------
// Config file: flat `key = value` TOML. Keys name long options of the chosen
// subcommand; command-line flags win over file values.

std::vector<std::string> config_arguments(const CLI::App& app, const std::vector<std::string>& args) {
    std::string path;
    std::string sub_name;
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (sub_name.empty() && !args[i].empty() && args[i][0] != '-') sub_name = args[i];
        if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
        if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
    }
    if (path.empty() || sub_name.empty()) return {};
    const CLI::App* sub = nullptr;
    try {
        sub = app.get_subcommand(sub_name);
    } catch (const CLI::Error&) {
        return {};
    }
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path);
    std::vector<CLI::ConfigItem> items;
    try {
        items = CLI::ConfigTOML().from_config(in);
    } catch (const CLI::Error& e) {
        throw DataError(path + ": " + e.what());
    }
    std::vector<std::string> injected;
    for (const auto& item : items) {
        if (item.name == "++" || item.name == "--") continue;  // section markers
        if (!item.parents.empty()) throw DataError(path + ": sections are not supported (key '" + item.fullname() + "')");
        std::string key = item.name;
        std::replace(key.begin(), key.end(), '_', '-');
        const CLI::Option* opt = sub->get_option_no_throw("--" + key);
        if (opt == nullptr || key == "config" || key == "help") {
            throw DataError(path + ": unknown key '" + item.name + "' for '" + sub_name + "'");
        }
        const bool on_command_line = std::any_of(args.begin(), args.end(), [&](const std::string& a) {
            return a == "--" + key || a.rfind("--" + key + "=", 0) == 0;
        });
        if (on_command_line) continue;
        for (const auto& v : item.inputs) injected.push_back("--" + key + "=" + v);
    }
    return injected;
}

// ---------------------------------------------------------------------------
// Commands

int cmd_validate(const std::string& corpus, const std::string& queries, std::size_t max_seq_len) {
    std::size_t violations = 0;
    std::size_t checked = 0;
    std::size_t dims[2] = {0, 0};
    auto check = [&](const std::string& path, RecordKind kind) {
        const auto file = read_record_file(path, format_from_path(path));
        const bool ndjson = format_from_path(path) == CorpusFormat::ndjson;
        std::set<std::string> seen;
        auto report = [&](std::size_t pos, const std::string& id, const std::string& msg) {
            ++violations;
            std::cout << path << (ndjson ? ":" : ": record ") << pos << ": " << (id.empty() ? "<no id>" : id) << ": "
                      << msg << "\n";
        };
        for (const auto& [rec, pos] : file.records) {
            ++checked;
            for (const auto& v : validate_record(rec, file.token_dim, file.entity_dim, kind, max_seq_len)) {
                report(pos, v.record_id, v.message);
            }
            if (!rec.id.empty() && !seen.insert(rec.id).second) report(pos, rec.id, "duplicate id");
        }
        if (file.token_dim && dims[0] && file.token_dim != dims[0]) {
            report(0, "", "token dimension " + std::to_string(file.token_dim) + " differs from " + std::to_string(dims[0]));
        }
        if (file.entity_dim && dims[1] && file.entity_dim != dims[1]) {
            report(0, "", "entity dimension " + std::to_string(file.entity_dim) + " differs from " + std::to_string(dims[1]));
        }
        if (file.token_dim) dims[0] = file.token_dim;
        if (file.entity_dim) dims[1] = file.entity_dim;
    };
    if (!corpus.empty()) check(corpus, RecordKind::document);
    if (!queries.empty()) check(queries, RecordKind::query);
    if (violations > 0) {
        std::cout << violations << " violation(s) in " << checked << " record(s)\n";
        return static_cast<int>(ExitCode::data_error);
    }
    std::cout << "ok: " << checked << " record(s), d_t=" << dims[0] << ", d_e=" << dims[1] << "\n";
    return 0;
}

void cmd_synth(Outputs& out, const SyntheticSpec& spec, const std::string& format, const json& config) {
    const auto data = make_planted_dataset(spec);
    const bool packed = format == "packed";
    const std::string ext = packed ? ".bin" : ".ndjson";
    const auto fmt = packed ? CorpusFormat::packed : CorpusFormat::ndjson;
    write_records(data.queries, spec.d_t, spec.d_e, out.claim("queries" + ext), fmt);
    write_records(data.corpus, spec.d_t, spec.d_e, out.claim("corpus" + ext), fmt);
    out.text("run.txt", format_run(run_to_rankings(data.run), "first_stage"));
    write_qrels(data.qrels, out.claim("qrels.txt"));
    out.manifest("synth", config);
    log("wrote " + std::to_string(spec.queries) + " queries x " + std::to_string(spec.candidates) + " candidates");
}

void cmd_train(Outputs& out, const DataOptions& d, const TrainConfig& cfg, const json& config) {
    std::vector<std::string> warnings;
    const auto data = load_dataset(d, warnings);
    std::string log_lines;
    auto cv = cross_validate(data, cfg, [&](const EpochLog& e) {
        const auto line = to_ndjson(e);
        log(line);
        log_lines += line + "\n";
    });
    warnings.insert(warnings.end(), cv.warnings.begin(), cv.warnings.end());
    for (const auto& w : warnings) log("warning: " + w);

    json folds = json::array();
    for (const auto& f : cv.folds) {
        save_checkpoint(f.model, out.claim("fold_" + std::to_string(f.split.fold_id) + ".ckpt"));
        json j;
        j["fold"] = f.split.fold_id;
        j["train"] = f.split.train_queries;
        j["validation"] = f.split.validation_queries;
        j["test"] = f.split.test_queries;
        j["best_epoch"] = f.best_epoch;
        j["best_val_map"] = f.best_val_map;
        folds.push_back(j);
    }
    out.text("train_log.ndjson", log_lines);
    out.text("folds.json", folds.dump(2) + "\n");
    out.text("run.txt", format_run(cv.run, "qder"));
    if (!data.qrels.empty()) log("out-of-fold MAP " + format_score(rankings_map(cv.run, data.qrels)));
    out.manifest("train", config, warnings);
}

void cmd_rerank(Outputs& out, const DataOptions& d, const std::string& checkpoint, bool dump_attention,
                std::size_t threads, const json& config) {
    std::vector<std::string> warnings;
    const auto model = load_checkpoint(checkpoint);
    const auto data = load_dataset(d, warnings);
    std::vector<std::string> qids;
    for (const auto& [qid, cands] : data.run) qids.push_back(qid);
    out.text("run.txt", format_run(rerank(data, model, qids, threads), "qder"));
    if (dump_attention) {
        std::string lines;
        for (const auto& [qid, cands] : data.run) {
            const auto& q = data.queries.at(qid);
            for (const auto& c : cands) {
                const auto& doc = data.corpus.at(c.doc_id);
                for (auto ch : {Channel::text, Channel::entity}) {
                    auto att = channel_attention(q, doc, model, ch);
                    if (!att) continue;
                    json j;
                    j["query"] = qid;
                    j["doc"] = c.doc_id;
                    j["channel"] = to_string(ch);
                    if (ch == Channel::entity) {
                        j["query_items"] = q.entities.ids;
                        j["doc_items"] = doc.entities.ids;
                    }
                    json rows = json::array();
                    for (std::size_t r = 0; r < att->weights.rows(); ++r) {
                        auto row = att->weights.row(r);
                        rows.push_back(std::vector<double>(row.begin(), row.end()));
                    }
                    j["weights"] = rows;
                    lines += j.dump() + "\n";
                }
            }
        }
        out.text("attention.ndjson", lines);
    }
    out.manifest("rerank", config, warnings);
}

void cmd_fuse(Outputs& out, const std::string& run_a, const std::string& run_b, const std::string& qrels_path,
              std::optional<double> lambda, double grid_step, const std::string& folds_path, std::size_t threads,
              const json& config) {
    std::vector<std::string> warnings;
    const auto a = run_to_rankings(load_run(run_a));
    const auto b = run_to_rankings(load_run(run_b));
    HybridConfig hc;
    hc.grid_step = grid_step;
    if (lambda) hc.lambda = *lambda;
    hc.validate();

    json summary;
    Rankings fused;
    if (lambda) {
        fused = fuse(a, b, *lambda);
        summary["lambda"] = *lambda;
    } else {
        if (qrels_path.empty()) throw DataError("fitting lambda needs --qrels (or pass --lambda)");
        const auto qrels = index_qrels(load_qrels(qrels_path, &warnings));
        if (folds_path.empty()) {
            auto fit = fit_lambda(a, b, qrels, hc, {}, threads);
            fused = fuse(a, b, fit.lambda);
            summary["lambda"] = fit.lambda;
            summary["fit_map"] = fit.map;
            out.text("lambda_curve.csv", lambda_curve_csv(fit));
        } else {
            std::vector<FoldSplit> folds;
            json fj = json::parse(detail::read_all(folds_path), nullptr, false);
            if (fj.is_discarded() || !fj.is_array()) throw DataError(folds_path + ": not a JSON fold list");
            for (const auto& f : fj) {
                FoldSplit s;
                s.fold_id = f.value("fold", folds.size());
                s.train_queries = f.value("train", std::vector<std::string>{});
                s.validation_queries = f.value("validation", std::vector<std::string>{});
                s.test_queries = f.value("test", std::vector<std::string>{});
                folds.push_back(std::move(s));
            }
            auto cv = fuse_cross_validated(a, b, qrels, folds, hc, threads);
            fused = std::move(cv.run);
            std::string csv = "fold,lambda,map\n";
            json per_fold = json::array();
            for (std::size_t i = 0; i < cv.folds.size(); ++i) {
                for (const auto& [l, m] : cv.folds[i].curve) {
                    csv += std::to_string(folds[i].fold_id) + "," + format_score(l) + "," + format_score(m) + "\n";
                }
                per_fold.push_back({{"fold", folds[i].fold_id}, {"lambda", cv.folds[i].lambda}, {"fit_map", cv.folds[i].map}});
            }
            out.text("lambda_curve.csv", csv);
            summary["folds"] = per_fold;
        }
        summary["fused_map"] = rankings_map(fused, qrels);
        log("fused MAP " + format_score(summary["fused_map"].get<double>()));
    }
    out.text("fused.run", format_run(fused, "hybrid"));
    out.text("fusion.json", summary.dump(2) + "\n");
    out.manifest("fuse", config, warnings);
}

json metrics_json(const QueryMetrics& m) {
    return {{"map", m.ap}, {"ndcg", m.ndcg}, {"p", m.p}, {"mrr", m.rr}};
}

void cmd_eval(Outputs& out, const std::string& qrels_path, const std::string& run_path,
              const std::vector<std::string>& compare, std::size_t k, const std::string& bins_metric,
              const std::vector<double>& edges, const json& config) {
    std::vector<std::string> warnings;
    const auto qrels = index_qrels(load_qrels(qrels_path, &warnings));
    std::set<std::string> taken;
    std::vector<std::pair<std::string, Run>> runs;
    runs.emplace_back(system_name(run_path, taken), load_run(run_path));
    for (const auto& p : compare) runs.emplace_back(system_name(p, taken), load_run(p));

    std::map<std::string, MetricReport> reports;
    std::string csv = "system,query,map,ndcg,p,mrr\n";
    json summary;
    summary["k"] = k;
    json systems;
    for (const auto& [name, run] : runs) {
        auto report = evaluate(run, qrels, k);
        for (const auto& [qid, m] : report.per_query) {
            csv += name + "," + qid + "," + format_score(m.ap) + "," + format_score(m.ndcg) + "," + format_score(m.p) +
                   "," + format_score(m.rr) + "\n";
        }
        json s = metrics_json(report.macro);
        s["queries"] = report.per_query.size();
        systems[name] = s;
        reports[name] = std::move(report);
        log(name + ": MAP " + format_score(reports[name].macro.ap) + ", nDCG@" + std::to_string(k) + " " +
            format_score(reports[name].macro.ndcg));
    }
    summary["systems"] = systems;

    const auto& base_name = runs.front().first;
    const auto& base = reports.at(base_name);
    json tests = json::array();
    for (std::size_t i = 1; i < runs.size(); ++i) {
        for (auto [metric, label] : {std::pair{Metric::ap, "map"}, {Metric::ndcg, "ndcg"}, {Metric::p, "p"}, {Metric::rr, "mrr"}}) {
            if (base.per_query.size() < 2) break;
            auto t = paired_t_test(reports.at(runs[i].first), base, metric);
            tests.push_back({{"system", runs[i].first}, {"baseline", base_name}, {"metric", label}, {"t", t.t},
                             {"p", t.p_two_sided}, {"n", t.n}, {"zero_variance", t.degenerate}});
        }
    }
    summary["significance"] = tests;
    out.text("per_query.csv", csv);

    if (!base.per_query.empty()) {
        const auto metric = parse_metric(bins_metric);
        auto bins = difficulty_bins(base, reports, edges, metric);
        std::string bcsv = "lower_pct,upper_pct,queries,system," + bins_metric + "\n";
        for (const auto& bin : bins.bins) {
            for (const auto& [name, value] : bin.macro) {
                bcsv += format_score(bin.lower_pct) + "," + format_score(bin.upper_pct) + "," +
                        std::to_string(bin.queries.size()) + "," + name + "," + (value ? format_score(*value) : "") + "\n";
            }
        }
        out.text("difficulty_bins.csv", bcsv);
    }
    if (runs.size() > 1) {
        std::string rcsv =
            "system,grade,documents,mean_rank_before,mean_rank_after,top10_before,top10_after,top50_before,"
            "top50_after,beyond100_before,beyond100_after\n";
        for (std::size_t i = 1; i < runs.size(); ++i) {
            for (const auto& [grade, s] : rank_shift_report(runs.front().second, runs[i].second, qrels)) {
                rcsv += runs[i].first + "," + std::to_string(grade) + "," + std::to_string(s.documents) + "," +
                        format_score(s.mean_rank_before) + "," + format_score(s.mean_rank_after) + "," +
                        std::to_string(s.top10_before) + "," + std::to_string(s.top10_after) + "," +
                        std::to_string(s.top50_before) + "," + std::to_string(s.top50_after) + "," +
                        std::to_string(s.beyond100_before) + "," + std::to_string(s.beyond100_after) + "\n";
            }
        }
        out.text("rank_shift.csv", rcsv);
    }
    out.text("summary.json", summary.dump(2) + "\n");
    out.manifest("eval", config, warnings);
}

void cmd_ablate(Outputs& out, const DataOptions& d, const TrainConfig& cfg, const std::vector<std::string>& names,
                const json& config) {
    std::vector<std::string> warnings;
    const auto data = load_dataset(d, warnings);
    auto all = ablation_variants(cfg.ablation);
    std::vector<AblationVariant> chosen;
    if (names.empty()) {
        chosen = all;
    } else {
        for (const auto& n : names) {
            auto it = std::find_if(all.begin(), all.end(), [&](const AblationVariant& v) { return v.name == n; });
            if (it == all.end()) throw DataError("unknown ablation variant '" + n + "'");
            chosen.push_back(*it);
        }
    }
    std::vector<AblationResult> results;
    for (const auto& v : chosen) {
        log("variant " + v.name);
        auto r = ablation_suite(data, cfg, {v});
        results.push_back(std::move(r.front()));
        log(v.name + ": MAP " + format_score(results.back().report.macro.ap));
    }
    const AblationResult* reference = nullptr;
    for (const auto& r : results) {
        if (r.name == "No-Subtract") reference = &r;
    }
    std::string csv = "variant,feature_dim,map,ndcg,p,mrr,t_vs_no_subtract,p_vs_no_subtract\n";
    const auto [d_t, d_e] = dataset_dims(data);
    for (const auto& r : results) {
        csv += r.name + "," + std::to_string(r.config.feature_dim(d_t, d_e)) + "," + format_score(r.report.macro.ap) +
               "," + format_score(r.report.macro.ndcg) + "," + format_score(r.report.macro.p) + "," +
               format_score(r.report.macro.rr);
        if (reference && reference != &r && r.report.per_query.size() >= 2) {
            auto t = paired_t_test(r.report, reference->report, Metric::ap);
            csv += "," + format_score(t.t) + "," + format_score(t.p_two_sided);
        } else {
            csv += ",,";
        }
        csv += "\n";
        out.text("runs/" + r.name + ".run", format_run(r.run, r.name));
    }
    out.text("ablation.csv", csv);

    std::map<std::string, Rankings> single;
    for (const auto& r : results) {
        if (r.name == "Only-Add") single["add"] = r.run;
        if (r.name == "Only-Multiply") single["multiply"] = r.run;
        if (r.name == "Only-Subtract") single["subtract"] = r.run;
    }
    if (single.size() >= 2) out.text("op_correlation.csv", correlation_csv(operation_correlation(single)));
    out.manifest("ablate", config, warnings);
}

void cmd_noise(Outputs& out, const std::vector<std::string>& ops, const std::vector<double>& sigmas,
               std::size_t trials, NoiseInstanceSpec spec, std::uint64_t seed, const std::string& checkpoint,
               std::size_t threads, const json& config) {
    std::optional<BilinearModel> model;
    if (!checkpoint.empty()) {
        model = load_checkpoint(checkpoint);
        spec.d_t = model->d_t();
        spec.d_e = model->d_e();
    }
    std::map<std::string, std::vector<NoiseReport>> by_op;
    for (const auto& name : ops) {
        Op op;
        if (name == "add") op = Op::add;
        else if (name == "multiply") op = Op::multiply;
        else if (name == "subtract") op = Op::subtract;
        else throw DataError("unknown op '" + name + "'");
        by_op[name] = noise_sensitivity(op, sigmas, trials, seed, spec, model ? &*model : nullptr, threads);
    }
    out.text("noise.csv", noise_csv(by_op));
    out.manifest("noise", config);
}

std::vector<EmbeddingPoint> read_embeddings(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::vector<EmbeddingPoint> pts;
    std::string line;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            auto j = json::parse(line);
            EmbeddingPoint p;
            p.id = j.value("id", "");
            const auto& label = j.at("label");
            p.label = label.is_string() ? label.get<std::string>() : label.dump();
            p.vec = j.at("vec").get<Vector>();
            pts.push_back(std::move(p));
        } catch (const json::exception& e) {
            throw DataError(detail::location(path, n) + e.what());
        }
    }
    return pts;
}

void cmd_cluster(Outputs& out, const std::string& embeddings, const DataOptions& d, const std::string& checkpoint,
                 const std::string& mode, const std::vector<std::string>& queries, std::size_t threads,
                 const json& config) {
    std::vector<std::string> warnings;
    std::vector<EmbeddingPoint> pts;
    if (!embeddings.empty()) {
        pts = read_embeddings(embeddings);
    } else {
        if (d.corpus.empty() || d.queries.empty() || d.run.empty() || d.qrels.empty()) {
            throw DataError("cluster needs --embeddings, or --corpus, --queries, --run and --qrels");
        }
        const auto data = load_dataset(d, warnings);
        const auto dump_mode = mode == "static_pool" ? DumpMode::static_pool : DumpMode::query_specific;
        std::optional<BilinearModel> model;
        if (!checkpoint.empty()) {
            model = load_checkpoint(checkpoint);
        } else if (dump_mode == DumpMode::query_specific) {
            throw DataError("query_specific embeddings need --checkpoint");
        } else {
            const auto [d_t, d_e] = dataset_dims(data);
            model = BilinearModel::initialized(d_t, d_e, AblationConfig{}, 0);
        }
        pts = embedding_dump(data, *model, dump_mode, queries, threads);
        out.text("embeddings.ndjson", embedding_ndjson(pts));
    }
    const auto r = clustering_metrics(pts);
    json j;
    j["points"] = r.points;
    j["clusters"] = r.clusters;
    j["dbi"] = r.dbi;
    j["silhouette"] = r.silhouette;
    j["calinski_harabasz"] = r.calinski_harabasz ? json(*r.calinski_harabasz) : json(nullptr);
    out.text("cluster.json", j.dump(2) + "\n");
    log("DBI " + format_score(r.dbi) + ", silhouette " + format_score(r.silhouette));
    out.manifest("cluster", config, warnings);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Re-ranking with attention-guided token and entity interactions"};
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();

    std::size_t threads = default_thread_count();
    std::string out_dir;
    std::string config_path;
    auto common = [&](CLI::App* sub, bool needs_out) {
        sub->add_option("--config", config_path, "Flat TOML file of option values; command-line flags win");
        sub->add_option("--threads", threads, "Worker threads (results do not depend on this)")->check(CLI::PositiveNumber);
        if (needs_out) sub->add_option("--out", out_dir, "Output directory")->required();
    };

    // validate
    auto* validate = app.add_subcommand("validate", "Check embedding files against the record invariants");
    std::string v_corpus;
    std::string v_queries;
    std::size_t max_seq_len = kDefaultMaxSeqLen;
    validate->add_option("--corpus", v_corpus, "Document embeddings");
    validate->add_option("--queries", v_queries, "Query embeddings");
    validate->add_option("--max-seq-len", max_seq_len, "Longest allowed document in tokens");
    common(validate, false);

    // synth
    auto* synth = app.add_subcommand("synth", "Write a planted-signal dataset");
    SyntheticSpec spec;
    spec.queries = 10;
    std::string synth_format = "ndjson";
    synth->add_option("--queries", spec.queries, "Number of queries");
    synth->add_option("--candidates", spec.candidates, "Candidates per query");
    synth->add_option("--d-t", spec.d_t, "Token embedding dimension");
    synth->add_option("--d-e", spec.d_e, "Entity embedding dimension");
    synth->add_option("--doc-tokens", spec.doc_tokens, "Tokens per document");
    synth->add_option("--relevant-min", spec.relevant_min, "Fewest relevant documents per query");
    synth->add_option("--relevant-max", spec.relevant_max, "Most relevant documents per query");
    synth->add_option("--seed", spec.seed, "Generator seed");
    synth->add_option("--format", synth_format, "Embedding file format")->check(CLI::IsMember({"ndjson", "packed"}));
    common(synth, true);

    // train
    auto* train = app.add_subcommand("train", "Cross-validated training; writes checkpoints and an out-of-fold run");
    DataOptions train_data;
    TrainOptions train_opts;
    add_data_options(train, train_data);
    add_train_options(train, train_opts);
    common(train, true);

    // rerank
    auto* rr = app.add_subcommand("rerank", "Rescore a run with a checkpoint");
    DataOptions rr_data;
    std::string rr_ckpt;
    bool dump_attention = false;
    add_data_options(rr, rr_data, false);
    rr->add_option("--checkpoint", rr_ckpt, "Model checkpoint")->required();
    rr->add_flag("--dump-attention", dump_attention, "Also write per-pair attention rows");
    common(rr, true);

    // fuse
    auto* fuse_cmd = app.add_subcommand("fuse", "Interpolate two runs after per-query min-max normalization");
    std::string run_a;
    std::string run_b;
    std::string fuse_qrels;
    std::string folds_file;
    std::optional<double> fixed_lambda;
    double grid_step = 0.01;
    fuse_cmd->add_option("--run-a", run_a, "First-stage run (weight lambda)")->required();
    fuse_cmd->add_option("--run-b", run_b, "Re-ranker run (weight 1 - lambda)")->required();
    fuse_cmd->add_option("--qrels", fuse_qrels, "Judgments for fitting lambda");
    fuse_cmd->add_option("--lambda", fixed_lambda, "Use this lambda instead of fitting one");
    fuse_cmd->add_option("--grid-step", grid_step, "Lambda grid resolution");
    fuse_cmd->add_option("--folds-file", folds_file, "folds.json from train: fit lambda per fold, apply to its test queries");
    common(fuse_cmd, true);

    // eval
    auto* eval = app.add_subcommand("eval", "Metrics, significance, difficulty bins and rank shifts");
    std::string e_qrels;
    std::string e_run;
    std::vector<std::string> e_compare;
    std::size_t depth = kDefaultMetricDepth;
    std::string bins_metric = "ndcg";
    std::vector<double> edges = kDefaultDifficultyEdges;
    eval->add_option("--qrels", e_qrels, "Relevance judgments")->required();
    eval->add_option("--run", e_run, "Baseline run")->required();
    eval->add_option("--compare", e_compare, "Runs compared against the baseline");
    eval->add_option("--k", depth, "Cutoff for nDCG and precision");
    eval->add_option("--bins-metric", bins_metric, "Metric used to stratify queries (map, ndcg, p, mrr)");
    eval->add_option("--bins", edges, "Percentile edges, ending at 100");
    common(eval, true);

    // ablate
    auto* ablate = app.add_subcommand("ablate", "Cross-validate every interaction and architecture variant");
    DataOptions ab_data;
    TrainOptions ab_opts;
    std::vector<std::string> variants;
    add_data_options(ablate, ab_data);
    add_train_options(ablate, ab_opts);
    ablate->add_option("--variants", variants, "Subset of variant names (default: all)");
    common(ablate, true);

    // noise
    auto* noise = app.add_subcommand("noise", "Gaussian input-noise sensitivity of each interaction op");
    std::vector<std::string> noise_ops{"add", "multiply", "subtract"};
    std::vector<double> sigmas = kDefaultNoiseSigmas;
    std::size_t trials = 100;
    std::uint64_t noise_seed = 42;
    NoiseInstanceSpec nspec;
    std::string noise_ckpt;
    noise->add_option("--ops", noise_ops, "Ops to study");
    noise->add_option("--sigmas", sigmas, "Noise standard deviations");
    noise->add_option("--trials", trials, "Random instances per sigma");
    noise->add_option("--candidates", nspec.candidates, "Candidates per instance");
    noise->add_option("--d-t", nspec.d_t, "Token dimension (ignored with --checkpoint)");
    noise->add_option("--d-e", nspec.d_e, "Entity dimension (ignored with --checkpoint)");
    noise->add_option("--seed", noise_seed, "Seed");
    noise->add_option("--checkpoint", noise_ckpt, "Score rankings with this model instead of a random single-op model");
    common(noise, true);

    // cluster
    auto* cluster = app.add_subcommand("cluster", "Clustering quality of labeled embeddings");
    std::string embeddings;
    DataOptions cl_data;
    std::string cl_ckpt;
    std::string mode = "query_specific";
    std::vector<std::string> cl_queries;
    cluster->add_option("--embeddings", embeddings, "NDJSON {id, label, vec} to score directly");
    cluster->add_option("--corpus", cl_data.corpus, "Document embeddings");
    cluster->add_option("--queries", cl_data.queries, "Query embeddings");
    cluster->add_option("--run", cl_data.run, "Candidate run");
    cluster->add_option("--qrels", cl_data.qrels, "Judgments (labels)");
    cluster->add_option("--checkpoint", cl_ckpt, "Model for query_specific features");
    cluster->add_option("--mode", mode, "Embedding kind")->check(CLI::IsMember({"query_specific", "static_pool"}));
    cluster->add_option("--query-ids", cl_queries, "Restrict to these queries");
    common(cluster, true);

    std::vector<std::string> args(argv + 1, argv + argc);
    try {
        auto injected = config_arguments(app, args);
        if (!injected.empty()) {
            auto sub_pos = std::find_if(args.begin(), args.end(), [](const std::string& a) { return !a.empty() && a[0] != '-'; });
            args.insert(sub_pos + 1, injected.begin(), injected.end());
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return static_cast<int>(e.exit_code());
    }
    std::vector<char*> cargs{argv[0]};
    for (auto& a : args) cargs.push_back(a.data());
    try {
        app.parse(static_cast<int>(cargs.size()), cargs.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : static_cast<int>(ExitCode::data_error);
    }

    const CLI::App* active = app.get_subcommands().front();
    const json config = resolved_config(active);
    log(active->get_name() + " " + config.dump());

    std::optional<Outputs> out;
    try {
        if (validate->parsed()) {
            if (v_corpus.empty() && v_queries.empty()) throw DataError("validate needs --corpus and/or --queries");
            return cmd_validate(v_corpus, v_queries, max_seq_len);
        }
        out.emplace(out_dir);
        if (synth->parsed()) cmd_synth(*out, spec, synth_format, config);
        if (train->parsed()) cmd_train(*out, train_data, resolve(train_opts, threads), config);
        if (rr->parsed()) cmd_rerank(*out, rr_data, rr_ckpt, dump_attention, threads, config);
        if (fuse_cmd->parsed()) {
            cmd_fuse(*out, run_a, run_b, fuse_qrels, fixed_lambda, grid_step, folds_file, threads, config);
        }
        if (eval->parsed()) cmd_eval(*out, e_qrels, e_run, e_compare, depth, bins_metric, edges, config);
        if (ablate->parsed()) cmd_ablate(*out, ab_data, resolve(ab_opts, threads), variants, config);
        if (noise->parsed()) cmd_noise(*out, noise_ops, sigmas, trials, nspec, noise_seed, noise_ckpt, threads, config);
        if (cluster->parsed()) cmd_cluster(*out, embeddings, cl_data, cl_ckpt, mode, cl_queries, threads, config);
    } catch (const Error& e) {
        if (out) out->rollback();
        std::cerr << "error: " << e.what() << "\n";
        return static_cast<int>(e.exit_code());
    } catch (const std::exception& e) {
        if (out) out->rollback();
        std::cerr << "error: " << e.what() << "\n";
        return static_cast<int>(ExitCode::data_error);
    }
    return 0;
}
