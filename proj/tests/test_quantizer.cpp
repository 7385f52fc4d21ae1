#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"

using namespace sidforge;
using Catch::Approx;

namespace {

Matrix<double> rows_of(std::initializer_list<std::vector<double>> rows) {
    const std::size_t d = rows.begin()->size();
    Matrix<double> m(rows.size(), d);
    std::size_t i = 0;
    for (const auto& r : rows) {
        std::copy(r.begin(), r.end(), m.row(i).begin());
        ++i;
    }
    return m;
}

}  // namespace

TEST_CASE("rating examples", "[quantizer]") {
    const auto cb = rows_of({{1, 0}, {0, 1}});
    const std::vector<double> e{1, 0};
    auto r = rate(std::span<const double>(e), cb);
    CHECK(r.scores[0] == Approx(1.0));
    CHECK(r.scores[1] == Approx(0.0).margin(1e-15));
    CHECK(r.weights[0] == Approx(0.7311).margin(1e-4));
    CHECK(r.weights[1] == Approx(0.2689).margin(1e-4));

    const auto same = rows_of({{1, 2}, {1, 2}, {1, 2}});
    const std::vector<double> x{0.3, -0.2};
    r = rate(std::span<const double>(x), same);
    for (double w : r.weights) CHECK(w == Approx(1.0 / 3.0));

    const std::vector<double> zero{0, 0};
    r = rate(std::span<const double>(zero), cb);
    CHECK(r.scores == std::vector<double>{0, 0});
    CHECK(r.weights[0] == Approx(0.5));
}

TEST_CASE("rating is scale invariant", "[quantizer]") {
    Rng rng(8);
    for (int trial = 0; trial < 100; ++trial) {
        const auto cb = testutil::random_matrix<double>(rng, 6, 5);
        std::vector<double> e(5);
        for (auto& v : e) v = rng.normal();
        std::vector<double> scaled = e;
        const double c = 0.01 + 10.0 * rng.uniform();
        for (auto& v : scaled) v *= c;
        const auto a = rate(std::span<const double>(e), cb);
        const auto b = rate(std::span<const double>(scaled), cb);
        const auto ia = std::max_element(a.weights.begin(), a.weights.end()) - a.weights.begin();
        const auto ib = std::max_element(b.weights.begin(), b.weights.end()) - b.weights.begin();
        CHECK(ia == ib);
        double total = 0.0;
        for (std::size_t k = 0; k < 6; ++k) {
            CHECK(b.weights[k] == Approx(a.weights[k]).margin(1e-6));
            CHECK(a.weights[k] > 0.0);
            total += a.weights[k];
        }
        CHECK(total == Approx(1.0).margin(1e-6));
    }
}

TEST_CASE("quantize_layer examples", "[quantizer]") {
    SECTION("K = 1 picks the matching codeword exactly") {
        const auto cb = rows_of({{0, 2, 0}, {3, 0, 0}, {0, 0, 1}});
        const std::vector<double> e{3, 0, 0};
        const auto tr = quantize_layer(std::span<const double>(e), cb, 1);
        CHECK(tr.selected == std::vector<std::uint32_t>{1});
        CHECK(tr.renormalized_weights == std::vector<double>{1.0});
        CHECK(tr.quantized == std::vector<double>{3, 0, 0});
        CHECK(tr.output_residual == std::vector<double>{0, 0, 0});
    }
    SECTION("ties go to the lowest index") {
        const auto cb = rows_of({{1, 0}, {0, 1}});
        const std::vector<double> e{1, 1};
        const auto tr = quantize_layer(std::span<const double>(e), cb, 1);
        CHECK(tr.selected.front() == 0);
        CHECK(tr.quantized == std::vector<double>{1, 0});
    }
    SECTION("K = M equals the brute-force weighted sum over all codewords") {
        Rng rng(12);
        for (int trial = 0; trial < 100; ++trial) {
            const std::size_t m = 2 + trial % 7;
            const std::size_t d = 1 + trial % 6;
            const auto cb = testutil::random_matrix<double>(rng, m, d);
            std::vector<double> e(d);
            for (auto& v : e) v = rng.normal();
            const auto tr = quantize_layer(std::span<const double>(e), cb, m);
            // Independent evaluation from the oracle's scalar formulas.
            std::vector<double> scores(m);
            for (std::size_t k = 0; k < m; ++k) {
                const auto row = cb.row(k);
                scores[k] = oracle::cosine(e, std::vector<double>(row.begin(), row.end()));
            }
            double z = 0.0;
            for (double s : scores) z += std::exp(s);
            std::vector<double> expect(d, 0.0);
            for (std::size_t k = 0; k < m; ++k) {
                for (std::size_t j = 0; j < d; ++j) expect[j] += std::exp(scores[k]) / z * cb(k, j);
            }
            double wsum = 0.0;
            for (double w : tr.renormalized_weights) wsum += w;
            CHECK(wsum == Approx(1.0).margin(1e-6));
            for (std::size_t j = 0; j < d; ++j) {
                CHECK(tr.quantized[j] == Approx(expect[j]).margin(1e-6));
                CHECK(tr.output_residual[j] == Approx(e[j] - tr.quantized[j]).margin(1e-12));
            }
        }
    }
    SECTION("partial K renormalises the selected weights") {
        Rng rng(13);
        const auto cb = testutil::random_matrix<double>(rng, 8, 4);
        std::vector<double> e{0.5, -1, 2, 0.1};
        const auto tr = quantize_layer(std::span<const double>(e), cb, 3);
        CHECK(tr.selected.size() == 3);
        double mass = 0.0;
        for (auto k : tr.selected) mass += tr.weights[k];
        for (std::size_t s = 0; s < 3; ++s) {
            CHECK(tr.renormalized_weights[s] == Approx(tr.weights[tr.selected[s]] / mass));
            if (s > 0) CHECK(tr.weights[tr.selected[s - 1]] >= tr.weights[tr.selected[s]]);
        }
        CHECK_THROWS_AS(quantize_layer(std::span<const double>(e), cb, 9), UsageError);
    }
}

TEST_CASE("full quantization matches the oracle step by step", "[quantizer]") {
    Rng rng(31);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t layers = 1 + trial % 3;
        const std::size_t m = 2 + trial % 4;
        const std::size_t d = 2 + trial % 5;
        const std::size_t k = 1 + static_cast<std::size_t>(rng.below(m));
        const auto om = testutil::random_model(rng, layers, m, k, d, trial % 2 == 0);
        const auto params = testutil::to_params(om);
        std::vector<double> x(d);
        for (auto& v : x) v = rng.normal() + 1.0;
        const auto expect = oracle::forward(om, x);
        const auto got = quantize_full(std::span<const double>(x), params);
        CHECK(got.projection.alpha == Approx(expect.alpha).margin(1e-12));
        for (std::size_t l = 0; l < layers; ++l) {
            if (expect.layers[l].min_gap < 1e-9) continue;
            CHECK(got.sid[l] == expect.sid[l]);
            for (std::size_t j = 0; j < d; ++j) {
                CHECK(got.layers[l].quantized[j] == Approx(expect.layers[l].quantized[j]).margin(1e-5));
                CHECK(got.layers[l].output_residual[j] == Approx(expect.residuals[l + 1][j]).margin(1e-5));
            }
        }
    }
}

TEST_CASE("hand-built two-layer trace", "[quantizer]") {
    ModelParams<double> p;
    p.config = {2, 2, 2, 2};
    p.reference = {1, 0};
    p.codebooks.push_back(rows_of({{0, 1}, {0, -1}}));
    p.codebooks.push_back(rows_of({{0, 0.5}, {1, 1}}));
    const std::vector<double> x{2, 3};
    const auto tr = quantize_full(std::span<const double>(x), p);
    CHECK(tr.projection.alpha == 2.0);
    CHECK(tr.layers[0].input_residual == std::vector<double>{0, 3});
    // scores (1, -1), weights e/(e+1/e) and (1/e)/(e+1/e)
    const double w0 = std::exp(1.0) / (std::exp(1.0) + std::exp(-1.0));
    CHECK(tr.layers[0].quantized[1] == Approx(w0 - (1 - w0)).margin(1e-12));
    CHECK(tr.sid == std::vector<std::uint32_t>{0, 0});
}

TEST_CASE("telescoping identity", "[quantizer]") {
    Rng rng(4);
    ModelParams<float> p;
    p.config = {3, 16, 16, 12};
    for (int j = 0; j < 12; ++j) p.reference.push_back(static_cast<float>(rng.normal() + 0.5));
    for (int l = 0; l < 3; ++l) p.codebooks.push_back(testutil::random_matrix<float>(rng, 16, 12));
    for (int i = 0; i < 1000; ++i) {
        std::vector<float> x(12);
        for (auto& v : x) v = static_cast<float>(2.0 * rng.normal());
        const auto tr = quantize_full(std::span<const float>(x), p);
        const auto xh = tr.reconstruction(std::span<const float>(p.reference));
        for (std::size_t j = 0; j < 12; ++j) {
            CHECK(std::abs(x[j] - (xh[j] + tr.layers.back().output_residual[j])) < 1e-4);
        }
    }
}

TEST_CASE("forced choice and determinism", "[quantizer]") {
    ModelParams<double> p;
    p.config = {1, 1, 1, 3};
    p.reference = {1, 1, 1};
    p.codebooks.push_back(rows_of({{0.2, -0.1, 0.4}}));
    for (const auto& x : {std::vector<double>{5, -2, 1}, std::vector<double>{-1, 0, 0}}) {
        CHECK(quantize_full(std::span<const double>(x), p).sid == std::vector<std::uint32_t>{0});
    }
    EmbeddingDataset ds;
    ds.ids = {"a", "b", "c", "d"};
    ds.matrix = Matrix<float>(4, 2, std::vector<float>{1, 0.1f, 0.1f, 1, -1, 0.1f, 1, 0.1f});
    ModelParams<float> q;
    q.config = {1, 3, 3, 2};
    q.use_reference = false;
    q.codebooks.push_back(Matrix<float>(3, 2, std::vector<float>{1, 0, 0, 1, -1, 0}));
    const auto t1 = emit_sids(ds, q);
    const auto t2 = emit_sids(ds, q);
    CHECK(t1 == t2);
    CHECK(t1.code(0, 0) == 0);
    CHECK(t1.code(1, 0) == 1);
    CHECK(t1.code(2, 0) == 2);
    CHECK(t1.code(3, 0) == t1.code(0, 0));

    ModelParams<float> wrong = q;
    wrong.config.embedding_dim = 3;
    wrong.codebooks[0] = Matrix<float>(3, 3, 1.0f);
    CHECK_THROWS_AS(emit_sids(ds, wrong), Error);
}

TEST_CASE("industrial codebook shape is accepted", "[quantizer]") {
    QuantizerConfig cfg{3, 8192, 8192, 4};
    CHECK_NOTHROW(cfg.validate());
    ModelParams<float> p;
    p.config = cfg;
    p.reference = {1, 0, 0, 0};
    for (int l = 0; l < 3; ++l) p.codebooks.emplace_back(8192, 4, 0.5f);
    CHECK_NOTHROW(p.validate());
    CHECK(p.parameter_count() == 4 + 3 * 8192 * 4);
}

TEST_CASE("codebook initialisation", "[quantizer]") {
    set_log_level(LogLevel::quiet);
    SECTION("one item per codeword quantizes exactly") {
        Rng rng(5);
        const auto data = testutil::random_matrix<float>(rng, 8, 4);
        ModelParams<float> p;
        p.config = {1, 8, 1, 4};
        p.use_reference = false;
        p.codebooks = init_codebooks(data, p, InitMode::kmeans, 3);
        for (std::size_t i = 0; i < 8; ++i) {
            const auto tr = quantize_full(data.row(i), p);
            for (float v : tr.layers[0].output_residual) CHECK(std::abs(v) < 1e-5);
        }
    }
    SECTION("two blobs recover the blob means") {
        Rng rng(6);
        Matrix<double> data(200, 2);
        for (std::size_t i = 0; i < 200; ++i) {
            const double cx = i < 100 ? -3.0 : 3.0;
            data(i, 0) = cx + 0.2 * rng.normal();
            data(i, 1) = 1.0 + 0.2 * rng.normal();
        }
        ModelParams<double> p;
        p.config = {1, 2, 2, 2};
        p.use_reference = false;
        p.codebooks = init_codebooks(data, p, InitMode::kmeans, 1);
        double m0 = 0.0;
        double m1 = 0.0;
        for (std::size_t i = 0; i < 100; ++i) m0 += data(i, 0) / 100.0;
        for (std::size_t i = 100; i < 200; ++i) m1 += data(i, 0) / 100.0;
        const auto& cb = p.codebooks[0];
        const bool first_left = cb(0, 0) < cb(1, 0);
        CHECK(std::abs(cb(first_left ? 0 : 1, 0) - m0) < 0.1);
        CHECK(std::abs(cb(first_left ? 1 : 0, 0) - m1) < 0.1);
    }
    SECTION("deterministic, no zero codewords, padding when N < M") {
        Rng rng(9);
        const auto data = testutil::random_matrix<float>(rng, 5, 3);
        ModelParams<float> p;
        p.config = {2, 8, 8, 3};
        p.reference = init_reference(data, 1);
        const auto a = init_codebooks(data, p, InitMode::kmeans, 11);
        const auto b = init_codebooks(data, p, InitMode::kmeans, 11);
        CHECK(a == b);
        for (const auto& cb : a) {
            for (std::size_t k = 0; k < 8; ++k) CHECK(l2_norm(cb.row(k)) >= kNormEpsilon);
        }
        const auto c = init_codebooks(data, p, InitMode::random, 11);
        CHECK(c == init_codebooks(data, p, InitMode::random, 11));
        CHECK(c != a);
    }
    set_log_level(LogLevel::warning);
}

TEST_CASE("reference initialisation", "[quantizer]") {
    Matrix<double> data(2, 3, std::vector<double>{1, 2, 3, 3, 2, 1});
    CHECK(init_reference(data, 0) == std::vector<double>{2, 2, 2});
    set_log_level(LogLevel::quiet);
    Matrix<double> centred(2, 3, std::vector<double>{1, 2, 3, -1, -2, -3});
    const auto r = init_reference(centred, 0);
    set_log_level(LogLevel::warning);
    CHECK(l2_norm(r) == Approx(1.0));
}
