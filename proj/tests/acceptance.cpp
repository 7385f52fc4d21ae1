// Prints one PASS/FAIL line per acceptance criterion and exits nonzero if any
// criterion fails, unless it is listed with --known-failure N.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "cli.hpp"
#include "gradcheck.hpp"
#include "helpers.hpp"

using namespace sidforge;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

// ---------------------------------------------------------------------------

Verdict gradient_correctness() {
    const auto t0 = Clock::now();
    Rng rng(20240501);
    const std::size_t dims[] = {2, 4, 8};
    const std::size_t ms[] = {2, 4};
    double worst = 0.0;
    std::size_t checked = 0;
    for (std::size_t i = 0; i < 20; ++i) {
        const std::size_t d = dims[i % 3];
        const std::size_t m = ms[(i / 3) % 2];
        const std::size_t layers = 1 + i % 3;
        const std::size_t batch = 2 + rng.below(7);
        const double lambda = i % 2 == 0 ? 0.0 : 0.01;
        const auto in = gradcheck::draw(rng, d, m, layers, batch, lambda);
        const auto out = gradcheck::run(in);
        worst = std::max(worst, out.max_rel_error);
        checked += out.checked;
    }
    const double secs = seconds_since(t0);
    return {worst < 1e-4 && secs < 10.0, "20 instances, " + std::to_string(checked) + " partials, max rel err " +
                                             fmt("%.2e", worst) + ", " + fmt("%.2f", secs) + " s"};
}

Verdict telescoping() {
    const auto t0 = Clock::now();
    Rng rng(7);
    ModelParams<float> p;
    p.config = {3, 32, 32, 16};
    for (int j = 0; j < 16; ++j) p.reference.push_back(static_cast<float>(rng.normal() + 0.5));
    for (int l = 0; l < 3; ++l) p.codebooks.push_back(testutil::random_matrix<float>(rng, 32, 16));
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        std::vector<float> x(16);
        for (auto& v : x) v = static_cast<float>(2.0 * rng.normal());
        const auto tr = quantize_full(std::span<const float>(x), p);
        const auto xh = tr.reconstruction(std::span<const float>(p.reference));
        for (std::size_t j = 0; j < 16; ++j) {
            worst = std::max(worst, std::abs(x[j] - (xh[j] + tr.layers.back().output_residual[j])));
        }
    }
    const double secs = seconds_since(t0);
    return {worst < 1e-4 && secs < 1.0, "max |x - (ar + sum q + e_L)| = " + fmt("%.2e", worst) + ", " + fmt("%.3f", secs) + " s"};
}

Matrix<double> rows_of(std::vector<std::vector<double>> rows) {
    Matrix<double> m(rows.size(), rows[0].size());
    for (std::size_t i = 0; i < rows.size(); ++i) std::copy(rows[i].begin(), rows[i].end(), m.row(i).begin());
    return m;
}

ClusterAssignment groups(std::vector<std::vector<std::size_t>> g) {
    ClusterAssignment c;
    c.groups = std::move(g);
    return c;
}

Verdict metric_bounds() {
    std::vector<std::string> broken;
    // Bounds on random embeddings and random SID tables.
    Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 4 + rng.below(60);
        const std::size_t d = 2 + rng.below(6);
        const std::size_t m = 2 + rng.below(8);
        const auto emb = testutil::random_matrix<double>(rng, n, d, 0.1 + 3.0 * rng.uniform());
        SidTable t;
        t.num_layers = 2;
        t.codebook_size = m;
        for (std::size_t i = 0; i < n; ++i) {
            t.ids.push_back("i" + std::to_string(i));
            t.codes.push_back(static_cast<std::uint32_t>(rng.below(m)));
            t.codes.push_back(static_cast<std::uint32_t>(rng.below(m)));
        }
        const auto cl = build_clusters(t, ClusterBy::level1);
        const auto sc = eval_sc(emb, cl).value;
        const auto pd = eval_pd(emb, cl, 2.0).value;
        if (sc && (*sc < -1.0 || *sc > 1.0)) broken.push_back("SC out of [-1,1]");
        if (pd && (*pd < -4.0 || *pd > 0.0)) broken.push_back("PD out of [-4,0]");
        if (collision_rate(t) < 1.0) broken.push_back("CR < 1");
    }
    const auto same = rows_of({{1, 1}, {1, 1}, {1, 1}});
    if (*eval_pd(same, groups({{0}, {1}, {2}}), 2.0).value != 0.0) broken.push_back("PD(identical) != 0");
    const auto orth = rows_of({{1, 0}, {0, 3}});
    if (std::abs(*eval_pd(orth, groups({{0}, {1}}), 2.0).value + 2.0) > 1e-6) broken.push_back("PD(orthogonal) != -2");
    const auto members = rows_of({{1, 2}, {1, 2}, {-3, 1}, {-3, 1}});
    if (std::abs(*eval_sc(members, groups({{0, 1}, {2, 3}})).value - 1.0) > 1e-6) broken.push_back("SC(identical) != 1");
    SidTable inj;
    inj.num_layers = 2;
    inj.codebook_size = 4;
    for (std::uint32_t i = 0; i < 16; ++i) {
        inj.ids.push_back("u" + std::to_string(i));
        inj.codes.push_back(i / 4);
        inj.codes.push_back(i % 4);
    }
    if (collision_rate(inj) != 1.0) broken.push_back("CR(injective) != 1");
    if (std::abs(gini(inj, 4)) > 1e-9) broken.push_back("Gini(uniform) != 0");
    std::string detail = "200 random tables in range; fixed points exact";
    if (!broken.empty()) detail = broken.front() + " (" + std::to_string(broken.size()) + " violations)";
    return {broken.empty(), detail};
}

// ---------------------------------------------------------------------------
// Desk-scale benchmark shared by criteria 4 and 5.

struct Arm {
    double usage = 0.0;
    double rec = 0.0;
};

struct SeedRun {
    std::uint64_t seed = 0;
    std::map<std::string, Arm> arms;
    MetricsReport r3_report, rkmeans_report;
};

EmbeddingDataset benchmark_data(std::uint64_t seed) {
    BlobSpec spec;  // N=10000, d=32, 64 clusters, separation 4
    spec.seed = seed;
    return make_blobs(spec).dataset;
}

TrainConfig benchmark_config(std::uint64_t seed, Method method, InitMode init) {
    TrainConfig cfg;
    cfg.method = method;
    cfg.init = init;
    cfg.seed = seed;
    cfg.num_layers = 2;
    cfg.codebook_size = 64;
    cfg.epochs = 50;
    cfg.batch_size = 256;
    cfg.lr = 5e-3;
    cfg.log_every = 200;
    cfg.record_wall_time = false;
    return cfg;
}

/// Usage and mean reconstruction error over the whole dataset.
Arm measure(const EmbeddingDataset& ds, const ModelParams<float>& p) {
    Arm a;
    a.usage = mean_usage(assign_codes(ds.matrix, p), p.layers(), p.config.codebook_size);
    double sum = 0.0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto tr = quantize_full(ds.row(i), p);
        sum += reconstruction_loss(tr, std::span<const float>(p.reference));
    }
    a.rec = sum / static_cast<double>(ds.size());
    return a;
}

std::vector<SeedRun> run_benchmark() {
    std::vector<SeedRun> runs;
    for (std::uint64_t seed : {42, 43, 44}) {
        const auto t0 = Clock::now();
        SeedRun run;
        run.seed = seed;
        const auto ds = benchmark_data(seed);
        const std::pair<std::string, TrainConfig> arms[] = {
            {"r3_kmeans", benchmark_config(seed, Method::r3, InitMode::kmeans)},
            {"r3_random", benchmark_config(seed, Method::r3, InitMode::random)},
            {"rqvae_random", benchmark_config(seed, Method::rqvae, InitMode::random)},
            {"rqvae_kmeans", benchmark_config(seed, Method::rqvae, InitMode::kmeans)},
            {"rkmeans", benchmark_config(seed, Method::rkmeans, InitMode::kmeans)},
        };
        for (const auto& [name, cfg] : arms) {
            const auto fit = train(ds, cfg);
            run.arms[name] = measure(ds, fit.params);
            if (name == "r3_kmeans" || name == "rkmeans") {
                const auto report = evaluate_sids(ds, emit_sids(ds, fit.params), &fit.params, EvalOptions{});
                (name == "rkmeans" ? run.rkmeans_report : run.r3_report) = report;
            }
        }
        std::fprintf(stderr, "  benchmark seed %llu: %.1f s\n", static_cast<unsigned long long>(seed), seconds_since(t0));
        for (const auto& [name, arm] : run.arms) {
            std::fprintf(stderr, "    %-13s usage %.3f  rec %.5f\n", name.c_str(), arm.usage, arm.rec);
        }
        runs.push_back(std::move(run));
    }
    return runs;
}

Verdict majority(const std::vector<SeedRun>& runs, const std::function<bool(const SeedRun&)>& ok) {
    std::size_t wins = 0;
    std::string per_seed;
    for (const auto& r : runs) {
        const bool w = ok(r);
        wins += w;
        per_seed += (per_seed.empty() ? "" : " ") + std::to_string(r.seed) + (w ? ":ok" : ":no");
    }
    return {2 * wins > runs.size(), per_seed};
}

Verdict training_stability(const std::vector<SeedRun>& runs) {
    const auto a = majority(runs, [](const SeedRun& r) {
        return r.arms.at("r3_kmeans").usage >= 0.9 && r.arms.at("r3_random").usage >= 0.9;
    });
    const auto b = majority(runs, [](const SeedRun& r) {
        const double u = r.arms.at("rqvae_random").usage;
        return u <= 0.5 && u < r.arms.at("r3_kmeans").usage && u < r.arms.at("r3_random").usage;
    });
    const auto c = majority(runs, [](const SeedRun& r) {
        return r.arms.at("r3_kmeans").rec < r.arms.at("rqvae_kmeans").rec;
    });
    return {a.pass && b.pass && c.pass, "(a) " + a.detail + " (b) " + b.detail + " (c) " + c.detail};
}

Verdict metric_ordering(const std::vector<SeedRun>& runs) {
    std::string values;
    for (const auto& r : runs) {
        values += " sc " + fmt("%.3f", r.r3_report.sc.value_or(NAN)) + "/" + fmt("%.3f", r.rkmeans_report.sc.value_or(NAN)) +
                  " pd " + fmt("%.3f", r.r3_report.pd.value_or(NAN)) + "/" + fmt("%.3f", r.rkmeans_report.pd.value_or(NAN)) + ";";
    }
    const auto sc = majority(runs, [](const SeedRun& r) {
        return r.r3_report.sc && r.rkmeans_report.sc && *r.r3_report.sc >= *r.rkmeans_report.sc;
    });
    const auto pd = majority(runs, [](const SeedRun& r) {
        return r.r3_report.pd && r.rkmeans_report.pd && *r.r3_report.pd <= *r.rkmeans_report.pd;
    });
    return {sc.pass && pd.pass, "SC " + sc.detail + ", PD " + pd.detail + " (r3/rkmeans" + values + ")"};
}

// ---------------------------------------------------------------------------

Verdict spearman_oracle() {
    const std::vector<double> x{1, 2, 3, 4, 5}, y{1, 3, 2, 5, 4};
    const auto exact = spearman(x, y);
    std::ifstream in(std::string(SIDFORGE_TEST_DATA_DIR) + "/beauty_sid_quality.csv");
    std::string line;
    std::getline(in, line);
    std::vector<double> recall, sc;
    while (std::getline(in, line)) {
        std::stringstream ss(line);
        std::string cell;
        std::vector<std::string> cells;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        recall.push_back(std::stod(cells.at(1)));
        sc.push_back(std::stod(cells.at(2)));
    }
    const auto rho = sc.size() == 7 ? spearman(sc, recall) : std::nullopt;
    const bool ok = exact && *exact == 0.8 && rho && std::abs(*rho - 0.94) <= 0.02;
    return {ok, "rho(12345,13254) = " + fmt("%.17g", exact.value_or(NAN)) + ", rho(SC, recall) = " + fmt("%.4f", rho.value_or(NAN))};
}

Verdict oracle_equivalences() {
    Rng rng(11);
    double soft_gap = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t m = 2 + rng.below(7);
        const std::size_t d = 2 + rng.below(7);
        const std::size_t layers = 1 + rng.below(3);
        const auto om = testutil::random_model(rng, layers, m, m, d, trial % 2 == 0);
        const auto params = testutil::to_params(om);  // k = m
        oracle::Vec x(d);
        for (auto& v : x) v = 1.5 * rng.normal();
        const auto expect = oracle::forward(om, x);
        const auto got = quantize_full(std::span<const double>(x), params);
        for (std::size_t l = 0; l < layers; ++l) {
            for (std::size_t j = 0; j < d; ++j) {
                soft_gap = std::max(soft_gap, std::abs(got.layers[l].quantized[j] - expect.layers[l].quantized[j]));
            }
        }
    }

    std::size_t rect_ok = 0;
    for (int trial = 0; trial < 30; ++trial) {
        const double w = 2.0 + 10.0 * rng.uniform(), h = 0.1 + 0.9 * rng.uniform();
        const double angle = 6.283185307179586 * rng.uniform();
        const double ox = 5.0 * rng.normal(), oy = 5.0 * rng.normal();
        const double xs[4] = {0, w, 0, w}, ys[4] = {0, 0, h, h};
        Matrix<double> pts(4, 2);
        std::vector<oracle::Vec> corners;
        for (std::size_t i = 0; i < 4; ++i) {
            pts(i, 0) = ox + std::cos(angle) * xs[i] - std::sin(angle) * ys[i];
            pts(i, 1) = oy + std::sin(angle) * xs[i] + std::cos(angle) * ys[i];
            corners.push_back({pts(i, 0), pts(i, 1)});
        }
        std::vector<int> labels;
        const double best = oracle::best_two_partition(corners, labels);
        const auto res = kmeans(pts, KMeansOptions{2, static_cast<std::uint64_t>(trial), 100});
        bool same = std::abs(res.inertia - best) <= 1e-9;
        for (std::size_t i = 0; i < 4; ++i) {
            for (std::size_t j = i + 1; j < 4; ++j) same = same && ((labels[i] == labels[j]) == (res.assignments[i] == res.assignments[j]));
        }
        rect_ok += same;
    }

    std::size_t monotone = 0;
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 20 + rng.below(200), d = 1 + rng.below(6), k = 1 + rng.below(12);
        const auto pts = testutil::random_matrix<double>(rng, n, d, 1.0 + 3.0 * rng.uniform());
        const auto res = kmeans(pts, KMeansOptions{k, static_cast<std::uint64_t>(trial), 100});
        bool ok = true;
        for (std::size_t i = 1; i < res.inertia_history.size(); ++i) {
            ok = ok && res.inertia_history[i] <= res.inertia_history[i - 1] * (1.0 + 1e-12);
        }
        monotone += ok;
    }
    return {soft_gap < 1e-6 && rect_ok == 30 && monotone == 50,
            "K=M max gap " + fmt("%.1e", soft_gap) + ", rectangles " + std::to_string(rect_ok) + "/30, monotone inertia " +
                std::to_string(monotone) + "/50"};
}

template <typename Fn>
bool raises_format_error(Fn&& fn) {
    try {
        fn();
    } catch (const FormatError&) {
        return true;
    } catch (...) {
        return false;
    }
    return false;
}

Verdict determinism_and_serialization() {
    std::vector<std::string> broken;
    testutil::TempDir dir("accept8");
    const auto ds = testutil::small_blobs(600, 8, 8, 5);
    TrainConfig cfg;
    cfg.num_layers = 2;
    cfg.codebook_size = 16;
    cfg.epochs = 3;
    cfg.batch_size = 64;
    cfg.log_every = 5;
    cfg.record_wall_time = false;
    const auto a = train(ds, cfg);
    const auto b = train(ds, cfg);
    if (encode_checkpoint(a.params, a.optimizer) != encode_checkpoint(b.params, b.optimizer)) broken.push_back("checkpoint bytes");
    if (format_train_log(a.log) != format_train_log(b.log)) broken.push_back("train log");
    const auto sids = emit_sids(ds, a.params);
    save_sids(sids, dir.file("a.tsv"));
    save_sids(emit_sids(ds, b.params), dir.file("b.tsv"));
    if (testutil::slurp(dir.file("a.tsv")) != testutil::slurp(dir.file("b.tsv"))) broken.push_back("SID table bytes");

    // Round trips.
    checkpoint_save(a.params, a.optimizer, dir.file("m.ckpt"));
    const auto ck = checkpoint_load(dir.file("m.ckpt"));
    if (!(ck.params == a.params) || !(ck.state == a.optimizer)) broken.push_back("checkpoint round trip");
    if (!(load_sids(dir.file("a.tsv")) == sids)) broken.push_back("SID round trip");
    for (auto fmt_ : {EmbeddingFormat::bin, EmbeddingFormat::tsv}) {
        const std::string path = dir.file(fmt_ == EmbeddingFormat::bin ? "e.bin" : "e.tsv");
        save_embeddings(ds, path, fmt_);
        const auto back = load_embeddings(path);
        if (back.ids != ds.ids || !(back.matrix == ds.matrix)) broken.push_back("embedding round trip");
    }
    const auto report = evaluate_sids(ds, sids, &a.params, EvalOptions{});
    save_report(report, dir.file("r.json"));
    const auto rback = load_report(dir.file("r.json"));
    save_report(rback, dir.file("r2.json"));
    if (testutil::slurp(dir.file("r.json")) != testutil::slurp(dir.file("r2.json"))) broken.push_back("report round trip");

    // Corruption.
    const std::string good = encode_checkpoint(a.params, a.optimizer);
    std::size_t rejected = 0, probes = 0;
    for (std::size_t cut = 0; cut < good.size(); cut += 1 + good.size() / 97) {
        ++probes;
        rejected += raises_format_error([&] { decode_checkpoint(std::string_view(good).substr(0, cut)); });
    }
    for (std::size_t pos : {std::size_t{0}, std::size_t{4}, std::size_t{5}, good.size() - 1}) {
        std::string bad = good;
        bad[pos] ^= 0x5a;
        ++probes;
        rejected += raises_format_error([&] { decode_checkpoint(bad); });
    }
    const std::string bin = testutil::slurp(dir.file("e.bin"));
    testutil::spit(dir.file("cut.bin"), bin.substr(0, bin.size() - 5));
    ++probes;
    rejected += raises_format_error([&] { load_embeddings(dir.file("cut.bin")); });
    testutil::spit(dir.file("bad.tsv"), "#item_id\tcode_1\tM=4\nx\t9\n");
    ++probes;
    rejected += raises_format_error([&] { load_sids(dir.file("bad.tsv")); });
    testutil::spit(dir.file("bad.json"), "{\"sc\": ");
    ++probes;
    rejected += raises_format_error([&] { load_report(dir.file("bad.json")); });
    if (rejected != probes) broken.push_back("corrupt input accepted");

    std::string detail = "bit-identical reruns; 5 round trips exact; " + std::to_string(rejected) + "/" +
                         std::to_string(probes) + " corrupt inputs rejected";
    if (!broken.empty()) detail = "broken: " + broken.front();
    return {broken.empty(), detail};
}

Verdict ablation_harness() {
    testutil::TempDir dir("accept9");
    auto run = [&](const std::string& out) {
        std::vector<std::string> args{"--quiet", "compare", "--synth", "blobs:1000,8,8,4", "--methods",
                                      "r3,r3_noref,r3_nometric", "--layers", "2", "--codebook-size", "16",
                                      "--epochs", "3", "--batch-size", "64", "--out", out};
        std::ostringstream o, e;
        return cli::run_cli(args, o, e);
    };
    const int c1 = run(dir.file("a.csv"));
    const int c2 = run(dir.file("b.csv"));
    const std::string text = testutil::slurp(dir.file("a.csv"));
    std::set<std::string> methods;
    std::stringstream ss(text);
    std::string line;
    std::getline(ss, line);
    while (std::getline(ss, line)) methods.insert(line.substr(0, line.find(',')));
    const bool rows = methods == std::set<std::string>{"r3", "r3_noref", "r3_nometric"};
    const bool same = text == testutil::slurp(dir.file("b.csv"));
    return {c1 == 0 && c2 == 0 && rows && same,
            "exit " + std::to_string(c1) + "/" + std::to_string(c2) + ", rows " + (rows ? "r3 r3_noref r3_nometric" : "missing") +
                ", reruns " + (same ? "identical" : "differ")};
}

}  // namespace

int main(int argc, char** argv) {
    std::set<int> known;
    std::set<int> only;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--known-failure" && i + 1 < argc) {
            known.insert(std::stoi(argv[++i]));
        } else if (a == "--only" && i + 1 < argc) {
            only.insert(std::stoi(argv[++i]));
        } else {
            std::cerr << "usage: sidforge_acceptance [--only N]... [--known-failure N]...\n";
            return 2;
        }
    }
    set_log_level(LogLevel::warning);

    std::vector<SeedRun> bench;
    if (only.empty() || only.count(4) || only.count(5)) bench = run_benchmark();

    const std::vector<std::pair<int, std::function<Verdict()>>> criteria = {
        {1, gradient_correctness},
        {2, telescoping},
        {3, metric_bounds},
        {4, [&] { return training_stability(bench); }},
        {5, [&] { return metric_ordering(bench); }},
        {6, spearman_oracle},
        {7, oracle_equivalences},
        {8, determinism_and_serialization},
        {9, ablation_harness},
    };
    int unexpected = 0;
    for (const auto& [id, fn] : criteria) {
        if (!only.empty() && !only.count(id)) continue;
        Verdict v;
        try {
            v = fn();
        } catch (const std::exception& e) {
            v = {false, std::string("exception: ") + e.what()};
        }
        std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << id << ": " << v.detail;
        if (!v.pass && known.count(id)) std::cout << " [known failure]";
        std::cout << std::endl;
        if (!v.pass && !known.count(id)) ++unexpected;
    }
    return unexpected == 0 ? 0 : 1;
}
