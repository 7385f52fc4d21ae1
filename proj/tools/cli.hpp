#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sidforge/sidforge.hpp"

namespace sidforge::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

struct DataFlags {
    std::string embeddings;
    std::string format;  ///< empty: guess from the extension
    std::string synth;
};

inline void add_data_flags(CLI::App* cmd, DataFlags& f) {
    cmd->add_option("--embeddings", f.embeddings, "Embedding file (EMB1 binary or TSV)");
    cmd->add_option("--format", f.format, "Embedding format: bin or tsv (default: by extension)")
        ->check(CLI::IsMember({"bin", "tsv"}));
    cmd->add_option("--synth", f.synth, "Synthetic data instead of a file: blobs:N,d,clusters,sep[,seed]");
}

inline EmbeddingDataset load_data(const DataFlags& f, std::uint64_t seed) {
    if (!f.synth.empty() && !f.embeddings.empty()) throw UsageError("give either --embeddings or --synth, not both");
    if (!f.synth.empty()) return make_blobs(parse_blob_spec(f.synth, seed)).dataset;
    if (f.embeddings.empty()) throw UsageError("--embeddings is required (or --synth)");
    const EmbeddingFormat fmt = f.format.empty() ? guess_embedding_format(f.embeddings) : parse_embedding_format(f.format);
    return load_embeddings(f.embeddings, fmt);
}

struct TrainFlags {
    std::string method = "r3";
    std::string init = "kmeans";
    bool no_reference = false;
    bool no_wall_time = false;
    TrainConfig cfg;
};

inline void add_train_flags(CLI::App* cmd, TrainFlags& f, bool with_method) {
    auto& c = f.cfg;
    if (with_method) cmd->add_option("--method", f.method, "r3, rqvae, vqvae, rkmeans, kmeans or an r3_* ablation");
    cmd->add_option("--layers", c.num_layers, "Number of layers L")->capture_default_str();
    cmd->add_option("--codebook-size", c.codebook_size, "Codewords per layer M")->capture_default_str();
    cmd->add_option("--top-k", c.top_k, "Codewords mixed per layer K (0 = M)")->capture_default_str();
    cmd->add_option("--epochs", c.epochs)->capture_default_str();
    cmd->add_option("--batch-size", c.batch_size)->capture_default_str();
    cmd->add_option("--lambda", c.lambda, "Weight of the SC/PD terms")->capture_default_str();
    cmd->add_option("--t", c.t, "PD temperature")->capture_default_str();
    cmd->add_option("--lr", c.lr)->capture_default_str();
    cmd->add_option("--weight-decay", c.weight_decay)->capture_default_str();
    cmd->add_option("--clip-norm", c.clip_norm, "Global gradient-norm clip (0 = off)")->capture_default_str();
    cmd->add_option("--beta", c.beta, "Commitment weight of the STE baselines")->capture_default_str();
    cmd->add_option("--init", f.init, "Codebook init: kmeans or random")->capture_default_str();
    cmd->add_option("--log-every", c.log_every)->capture_default_str();
    cmd->add_option("--eval-subsample", c.eval_subsample)->capture_default_str();
    cmd->add_flag("--no-reference", f.no_reference, "Disable the reference vector (e0 = x)");
    cmd->add_flag("--revive", c.revive, "Re-seed codewords unused for an epoch");
    cmd->add_flag("--no-wall-time", f.no_wall_time, "Write wall_ms = 0 so logs are byte-reproducible");
}

inline TrainConfig resolve_train_config(const TrainFlags& f, std::uint64_t seed) {
    TrainConfig cfg = f.cfg;
    cfg.seed = seed;
    cfg.init = parse_init_mode(f.init);
    cfg = config_for_method(f.method, cfg);
    if (f.no_reference) cfg.use_reference = false;
    if (f.no_wall_time) cfg.record_wall_time = false;
    cfg.validate();
    return cfg;
}

inline nlohmann::json config_to_json(const TrainConfig& c, const std::string& method_name, std::size_t dim) {
    nlohmann::json j;
    j["method"] = method_name;
    j["base_method"] = to_string(c.method);
    j["seed"] = c.seed;
    j["epochs"] = c.epochs;
    j["batch_size"] = c.batch_size;
    j["lambda"] = c.lambda;
    j["t"] = c.t;
    j["K"] = c.effective_top_k();
    j["L"] = c.effective_layers();
    j["M"] = c.codebook_size;
    j["d"] = dim;
    j["lr"] = c.lr;
    j["weight_decay"] = c.weight_decay;
    j["clip_norm"] = c.clip_norm;
    j["init_mode"] = to_string(c.init);
    j["log_every"] = c.log_every;
    j["use_reference"] = c.use_reference;
    j["use_sc"] = c.use_sc;
    j["use_pd"] = c.use_pd;
    j["beta"] = c.beta;
    j["revive"] = c.revive;
    j["record_wall_time"] = c.record_wall_time;
    j["eval_subsample"] = c.eval_subsample;
    return j;
}

struct EvalFlags {
    std::string cluster_by = "level1";
    std::string source = "soft_quantized";
    double t = 2.0;
    std::size_t max_pairs = 1'000'000;
};

inline void add_eval_flags(CLI::App* cmd, EvalFlags& f) {
    cmd->add_option("--cluster-by", f.cluster_by, "level1 or full_sid")->capture_default_str();
    cmd->add_option("--embedding-source", f.source, "soft_quantized, raw or initial_residual")->capture_default_str();
    cmd->add_option("--eval-t", f.t, "PD temperature used for evaluation")->capture_default_str();
    cmd->add_option("--max-pairs", f.max_pairs, "Cluster pairs before PD switches to sampling")->capture_default_str();
}

inline EvalOptions resolve_eval(const EvalFlags& f, std::uint64_t seed) {
    EvalOptions o;
    o.cluster_by = parse_cluster_by(f.cluster_by);
    o.source = parse_embedding_source(f.source);
    o.t = f.t;
    o.max_pairs = f.max_pairs;
    o.seed = seed;
    if (!(o.t > 0.0)) throw UsageError("--t must be positive");
    if (o.max_pairs == 0) throw UsageError("--max-pairs must be >= 1");
    return o;
}

inline std::string fmt_metric(const std::optional<double>& v) {
    if (!v) return "null";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", *v);
    return buf;
}

inline std::string summary_line(const MetricsReport& r) {
    return "SC=" + fmt_metric(r.sc) + " PD=" + fmt_metric(r.pd) + " CR=" + fmt_metric(r.collision_rate) +
           " Gini=" + fmt_metric(r.gini) + " usage=" + fmt_metric(r.mean_usage());
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << text;
    if (!out) throw IoError("write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------

struct CorrelateTable {
    std::vector<std::string> columns;  ///< numeric columns only
    std::vector<std::vector<double>> values;  ///< per column
};

/// CSV with a header row; non-numeric columns (e.g. a method label) are ignored.
inline CorrelateTable read_correlate_table(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    auto split = [](const std::string& line) {
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
            while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
            cells.push_back(cell);
        }
        return cells;
    };
    std::string line;
    if (!std::getline(in, line)) throw FormatError("header", "empty table");
    const auto header = split(line);
    std::vector<std::vector<std::string>> rows;
    std::size_t ln = 1;
    while (std::getline(in, line)) {
        ++ln;
        if (line.empty() || line == "\r") continue;
        auto cells = split(line);
        if (cells.size() != header.size()) {
            throw FormatError("row", "line " + std::to_string(ln) + ": " + std::to_string(cells.size()) +
                                         " cells, header has " + std::to_string(header.size()));
        }
        rows.push_back(std::move(cells));
    }
    CorrelateTable t;
    for (std::size_t c = 0; c < header.size(); ++c) {
        std::vector<double> col;
        bool numeric = !rows.empty();
        for (const auto& r : rows) {
            try {
                std::size_t used = 0;
                const double v = std::stod(r[c], &used);
                if (used != r[c].size()) throw std::invalid_argument("trailing");
                col.push_back(v);
            } catch (const std::exception&) {
                numeric = false;
                break;
            }
        }
        if (numeric) {
            t.columns.push_back(header[c]);
            t.values.push_back(std::move(col));
        }
    }
    if (rows.size() < 3) throw UsageError("correlate needs at least 3 rows, table has " + std::to_string(rows.size()));
    return t;
}

// ---------------------------------------------------------------------------

/// Runs the command line in-process; returns the exit status.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Semantic ID tokenizer: train, encode and evaluate residual quantizers"};
    app.require_subcommand(1);
    std::uint64_t seed = 42;
    unsigned threads = 0;
    bool quiet = false;
    app.add_option("--seed", seed, "Seed for every random choice")->capture_default_str();
    app.add_option("--threads", threads, "Worker cap (0 = SIDFORGE_THREADS or hardware)");
    app.add_flag("--quiet", quiet, "Suppress warnings");
    app.fallthrough();

    DataFlags data;
    TrainFlags train_flags;
    EvalFlags eval_flags;
    std::string out_path;
    std::string model_path;
    std::string sids_path;
    std::string methods;
    std::string table_path;
    std::string target;
    std::string mode;

    auto* train_cmd = app.add_subcommand("train", "Train a quantizer and write model.ckpt, train_log.csv, config.json");
    add_data_flags(train_cmd, data);
    add_train_flags(train_cmd, train_flags, true);
    train_cmd->add_option("--out", out_path, "Output directory")->required();

    auto* encode_cmd = app.add_subcommand("encode", "Write the SID table of every item");
    add_data_flags(encode_cmd, data);
    encode_cmd->add_option("--model", model_path)->required();
    encode_cmd->add_option("--out", out_path, "SID TSV path")->required();

    auto* eval_cmd = app.add_subcommand("eval", "Score a SID table (SC, PD, CR, Gini, usage)");
    add_data_flags(eval_cmd, data);
    add_eval_flags(eval_cmd, eval_flags);
    eval_cmd->add_option("--t", eval_flags.t, "PD temperature")->capture_default_str();
    eval_cmd->add_option("--sids", sids_path)->required();
    eval_cmd->add_option("--model", model_path, "Checkpoint, needed for soft_quantized embeddings");
    eval_cmd->add_option("--out", out_path, "Report JSON path");

    auto* compare_cmd = app.add_subcommand("compare", "Fit several methods and tabulate their SID metrics");
    add_data_flags(compare_cmd, data);
    add_train_flags(compare_cmd, train_flags, false);
    add_eval_flags(compare_cmd, eval_flags);
    compare_cmd->add_option("--methods", methods, "Comma-separated method names")->required();
    compare_cmd->add_option("--out", out_path, "CSV path")->required();

    auto* correlate_cmd = app.add_subcommand("correlate", "Spearman correlation of metric columns with a target");
    correlate_cmd->add_option("--table", table_path)->required();
    correlate_cmd->add_option("--target", target, "Target column (default: last numeric column)");

    auto* export_cmd = app.add_subcommand("export-proj", "Write 3-D PCA or ring projections for plotting");
    add_data_flags(export_cmd, data);
    export_cmd->add_option("--mode", mode, "pca3 or ring2")->required();
    export_cmd->add_option("--out", out_path, "CSV path")->required();
    export_cmd->add_option("--model", model_path, "Also export the residuals after the reference projection");

    std::vector<std::string> argv_store;
    argv_store.push_back("sidforge");
    argv_store.insert(argv_store.end(), args.begin(), args.end());
    std::vector<char*> argv;
    for (auto& s : argv_store) argv.push_back(s.data());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
        err << sub->help();
        return kExitUsage;
    }

    const LogLevel saved_level = static_cast<LogLevel>(log_level_storage().load());
    set_log_level(quiet ? LogLevel::quiet : saved_level);
    const unsigned saved_threads = thread_cap_storage();
    set_thread_count(threads);
    struct Restore {
        LogLevel level;
        unsigned threads;
        ~Restore() {
            set_log_level(level);
            set_thread_count(threads);
        }
    } restore{saved_level, saved_threads};

    try {
        if (train_cmd->parsed()) {
            const TrainConfig cfg = resolve_train_config(train_flags, seed);
            const EmbeddingDataset ds = load_data(data, seed);
            const TrainResult res = train(ds, cfg);
            std::filesystem::create_directories(out_path);
            const std::filesystem::path dir(out_path);
            checkpoint_save(res.params, res.optimizer, (dir / "model.ckpt").string());
            write_train_log(res.log, (dir / "train_log.csv").string());
            nlohmann::json j = config_to_json(cfg, train_flags.method, ds.dim());
            j["data"] = data.synth.empty() ? data.embeddings : "synth:" + data.synth;
            write_text((dir / "config.json").string(), j.dump(2) + "\n");
            if (!res.log.empty()) {
                const auto& last = res.log.back();
                out << "trained " << train_flags.method << ": steps=" << last.step
                    << " loss_rec=" << fmt_metric(last.loss_rec) << " usage=" << fmt_metric(last.codebook_usage)
                    << "\n";
            } else {
                out << "fitted " << train_flags.method << "\n";
            }
        } else if (encode_cmd->parsed()) {
            const Checkpoint ck = checkpoint_load(model_path);
            const EmbeddingDataset ds = load_data(data, seed);
            save_sids(emit_sids(ds, ck.params), out_path);
            out << "encoded " << ds.size() << " items\n";
        } else if (eval_cmd->parsed()) {
            const EvalOptions opt = resolve_eval(eval_flags, seed);
            if (opt.source != EmbeddingSource::raw && model_path.empty()) {
                throw UsageError("--embedding-source " + to_string(opt.source) + " requires --model");
            }
            const EmbeddingDataset ds = load_data(data, seed);
            const SidTable sids = load_sids(sids_path);
            std::optional<Checkpoint> ck;
            if (!model_path.empty()) ck = checkpoint_load(model_path);
            const MetricsReport report = evaluate_sids(ds, sids, ck ? &ck->params : nullptr, opt);
            if (!out_path.empty()) save_report(report, out_path);
            out << summary_line(report) << "\n";
            if (report.pd_pairs_sampled > 0) {
                out << "note: PD estimated from " << report.pd_pairs_sampled << " sampled cluster pairs\n";
            }
        } else if (compare_cmd->parsed()) {
            std::vector<std::string> names;
            std::stringstream ss(methods);
            std::string name;
            while (std::getline(ss, name, ',')) {
                if (!name.empty()) names.push_back(name);
            }
            if (names.empty()) throw UsageError("--methods is empty");
            const TrainConfig base = resolve_train_config(train_flags, seed);
            for (const auto& n : names) config_for_method(n, base).validate();
            const EvalOptions opt = resolve_eval(eval_flags, seed);
            const EmbeddingDataset ds = load_data(data, seed);
            const auto rows = compare_methods(ds, names, base, opt);
            write_text(out_path, format_compare_csv(rows));
            for (const auto& r : rows) out << r.method << ": " << summary_line(r.report) << "\n";
        } else if (correlate_cmd->parsed()) {
            const CorrelateTable t = read_correlate_table(table_path);
            if (t.columns.size() < 2) throw UsageError("correlate needs a target and at least one metric column");
            std::size_t target_col = t.columns.size() - 1;
            if (!target.empty()) {
                const auto it = std::find(t.columns.begin(), t.columns.end(), target);
                if (it == t.columns.end()) throw UsageError("target column '" + target + "' not found");
                target_col = static_cast<std::size_t>(it - t.columns.begin());
            }
            for (std::size_t c = 0; c < t.columns.size(); ++c) {
                if (c == target_col) continue;
                const auto rho = spearman(t.values[c], t.values[target_col]);
                out << t.columns[c] << "\t" << fmt_metric(rho) << "\n";
            }
        } else if (export_cmd->parsed()) {
            const ProjectionMode pm = parse_projection_mode(mode);
            const EmbeddingDataset ds = load_data(data, seed);
            if (model_path.empty()) {
                export_projection(ds.matrix, ds.ids, out_path, pm);
                out << "wrote " << out_path << "\n";
            } else {
                const Checkpoint ck = checkpoint_load(model_path);
                if (ck.params.dim() != ds.dim()) {
                    throw Error("model dimension " + std::to_string(ck.params.dim()) +
                                " does not match embedding dimension " + std::to_string(ds.dim()));
                }
                std::string stem = out_path;
                if (stem.size() > 4 && stem.compare(stem.size() - 4, 4, ".csv") == 0) stem.resize(stem.size() - 4);
                export_projection(ds.matrix, ds.ids, stem + ".before.csv", pm);
                export_projection(initial_residuals(ds.matrix, ck.params), ds.ids, stem + ".after.csv", pm);
                out << "wrote " << stem << ".before.csv and " << stem << ".after.csv\n";
            }
        }
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n";
        err << app.get_subcommands().front()->help();
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitOk;
}

}  // namespace sidforge::cli
