#include <doctest.h>

#include <cmath>
#include <cstring>

#include "lpn/decoder.hpp"
#include "lpn/error.hpp"
#include "lpn/ops.hpp"
#include "test_util.hpp"

using namespace lpn;

namespace {

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor& t) {
    Mat m(t.dim(0), std::vector<double>(t.dim(1)));
    for (std::size_t r = 0; r < t.dim(0); ++r) {
        for (std::size_t c = 0; c < t.dim(1); ++c) m[r][c] = t.at(r, c);
    }
    return m;
}

Mat mm(const Mat& a, const Mat& b) {
    Mat out(a.size(), std::vector<double>(b[0].size(), 0.0));
    for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::size_t k = 0; k < b.size(); ++k) {
            for (std::size_t j = 0; j < b[0].size(); ++j) out[i][j] += a[i][k] * b[k][j];
        }
    }
    return out;
}

Mat cols(const Mat& a, std::size_t from, std::size_t to) {
    Mat out;
    for (const auto& row : a) out.emplace_back(row.begin() + from, row.begin() + to);
    return out;
}

Mat scalar_attention(const Mat& q, const Mat& k, const Mat& v) {
    const double s = 1.0 / std::sqrt(static_cast<double>(q[0].size()));
    Mat out(q.size(), std::vector<double>(v[0].size(), 0.0));
    for (std::size_t i = 0; i < q.size(); ++i) {
        std::vector<double> e(k.size());
        double mx = -1e300, z = 0.0;
        for (std::size_t j = 0; j < k.size(); ++j) {
            double dot = 0.0;
            for (std::size_t c = 0; c < q[i].size(); ++c) dot += q[i][c] * k[j][c];
            e[j] = s * dot;
            mx = std::max(mx, e[j]);
        }
        for (double& x : e) z += (x = std::exp(x - mx));
        for (std::size_t j = 0; j < k.size(); ++j) {
            for (std::size_t c = 0; c < v[0].size(); ++c) out[i][c] += e[j] / z * v[j][c];
        }
    }
    return out;
}

Mat scalar_multi_head(const Mat& q, const Mat& k, const Mat& v, const AttentionWeights& w) {
    const Mat qp = mm(q, to_mat(w.wq)), kp = mm(k, to_mat(w.wk)), vp = mm(v, to_mat(w.wv));
    const std::size_t dk = w.head_dim();
    Mat cat(q.size());
    for (std::size_t h = 0; h < w.heads; ++h) {
        Mat part = scalar_attention(cols(qp, h * dk, (h + 1) * dk), cols(kp, h * dk, (h + 1) * dk),
                                    cols(vp, h * dk, (h + 1) * dk));
        for (std::size_t r = 0; r < q.size(); ++r) cat[r].insert(cat[r].end(), part[r].begin(), part[r].end());
    }
    return mm(cat, to_mat(w.wo));
}

std::vector<double> scalar_decode(const LaGDBlock& b, const Tensor& map, const Tensor& g) {
    const std::size_t D = map.dim(0), T = map.dim(1) * map.dim(2);
    Mat tokens(T, std::vector<double>(D));
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t c = 0; c < D; ++c) tokens[t][c] = map.values()[c * T + t];
    }
    const Mat q = to_mat(b.queries);
    const Mat s1 = scalar_multi_head(q, q, q, b.self_attn);
    const Mat s2 = scalar_multi_head(s1, tokens, tokens, b.cross_visual);
    const Mat s3 = mm(s2, to_mat(b.channel_map));
    const Mat gm = to_mat(g);
    const Mat s4 = scalar_multi_head(s3, gm, gm, b.cross_text);
    std::vector<double> out(s4[0].size(), 0.0);
    for (const auto& row : s4) {
        for (std::size_t c = 0; c < row.size(); ++c) out[c] += row[c] / static_cast<double>(s4.size());
    }
    return out;
}

Tensor identity(std::size_t n, double scale = 1.0) {
    std::vector<double> v(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) v[i * n + i] = scale;
    return Tensor({n, n}, v, true);
}

LaGDBlock small_block(std::size_t D, std::size_t d, std::size_t heads, std::size_t queries,
                      std::uint64_t seed, bool residual = false, bool layer_norm = false) {
    DecoderOptions o;
    o.visual_width = D;
    o.text_width = d;
    o.heads = heads;
    o.queries = queries;
    o.residual = residual;
    o.layer_norm = layer_norm;
    Rng rng(seed);
    return LaGDBlock::create(o, rng);
}

void check_rows_stochastic(const std::vector<double>& w, std::size_t rows, std::size_t cols) {
    REQUIRE(w.size() == rows * cols);
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            CHECK(w[r * cols + c] >= 0.0);
            s += w[r * cols + c];
        }
        CHECK(std::abs(s - 1.0) < 1e-9);
    }
}

} // namespace

TEST_CASE("attention over one key returns that value") {
    Rng rng(1);
    Tensor q = test::random_tensor({3, 4}, rng);
    Tensor k = test::random_tensor({1, 4}, rng);
    Tensor v = test::random_tensor({1, 4}, rng);
    Tensor out = attention(q, k, v);
    for (std::size_t r = 0; r < 3; ++r) {
        for (std::size_t c = 0; c < 4; ++c) CHECK(out.at(r, c) == doctest::Approx(v.at(0, c)).epsilon(1e-15));
    }
}

TEST_CASE("identical keys average the values") {
    Tensor q({1, 2}, {0.3, -1.2});
    Tensor k({2, 2}, {0.5, 0.5, 0.5, 0.5});
    Tensor v({2, 2}, {1.0, 4.0, 3.0, -2.0});
    Tensor out = attention(q, k, v);
    CHECK(out.at(0, 0) == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(out.at(0, 1) == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("two key attention example") {
    Tensor w;
    Tensor out = attention(Tensor({1, 2}, {1.0, 0.0}), Tensor({2, 2}, {1.0, 0.0, 0.0, 1.0}),
                           Tensor({2, 2}, {1.0, 0.0, 0.0, 1.0}), &w);
    const double e = std::exp(1.0 / std::sqrt(2.0));
    CHECK(out.at(0, 0) == doctest::Approx(e / (e + 1.0)).epsilon(1e-14));
    CHECK(std::abs(out.at(0, 0) - 0.6698) < 1e-4);
    CHECK(std::abs(out.at(0, 1) - 0.3302) < 1e-4);
    CHECK(w.at(0, 0) + w.at(0, 1) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("attention without keys is rejected") {
    Tensor q({1, 2}, {1.0, 0.0});
    Tensor empty(Shape{0, 2});
    CHECK_THROWS_AS(attention(q, empty, empty), DimensionError);
    CHECK_THROWS_AS(attention(q, Tensor({1, 3}, {1, 2, 3}), Tensor({1, 3}, {1, 2, 3})), DimensionError);
}

TEST_CASE("single head with identity projections is plain attention") {
    Rng rng(2);
    AttentionWeights w;
    w.heads = 1;
    w.wq = w.wk = w.wv = w.wo = identity(5);
    Tensor q = test::random_tensor({2, 5}, rng);
    Tensor k = test::random_tensor({3, 5}, rng);
    Tensor v = test::random_tensor({3, 5}, rng);
    Tensor a = multi_head(q, k, v, w);
    Tensor b = attention(q, k, v);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.values()[i] == doctest::Approx(b.values()[i]).epsilon(1e-14));
}

TEST_CASE("zero output projection gives zero output") {
    Rng rng(3);
    auto w = AttentionWeights::create(4, 2, rng);
    w.wo = Tensor::full({4, 4}, 0.0);
    Tensor out = multi_head(test::random_tensor({2, 4}, rng), test::random_tensor({3, 4}, rng),
                            test::random_tensor({3, 4}, rng), w);
    for (double x : out.values()) CHECK(x == 0.0);
}

TEST_CASE("two head attention matches a head-by-head loop") {
    Rng rng(4);
    auto w = AttentionWeights::create(6, 2, rng);
    Tensor q = test::random_tensor({3, 6}, rng);
    Tensor k = test::random_tensor({4, 6}, rng);
    Tensor v = test::random_tensor({4, 6}, rng);
    std::vector<double> mean_w;
    Tensor out = multi_head(q, k, v, w, &mean_w);
    const Mat ref = scalar_multi_head(to_mat(q), to_mat(k), to_mat(v), w);
    for (std::size_t r = 0; r < 3; ++r) {
        for (std::size_t c = 0; c < 6; ++c) CHECK(out.at(r, c) == doctest::Approx(ref[r][c]).epsilon(1e-12));
    }
    check_rows_stochastic(mean_w, 3, 4);
}

TEST_CASE("head counts that do not divide the width are rejected") {
    Rng rng(5);
    CHECK_THROWS_AS(AttentionWeights::create(6, 4, rng), ConfigError);
    CHECK_THROWS_AS(AttentionWeights::create(6, 0, rng), ConfigError);
    auto w = AttentionWeights::create(6, 2, rng);
    w.heads = 4;
    Tensor x = test::random_tensor({2, 6}, rng);
    CHECK_THROWS_AS(multi_head(x, x, x, w), ConfigError);
    DecoderOptions o;
    o.visual_width = 8;
    o.text_width = 6;
    o.heads = 4;
    CHECK_THROWS_AS(LaGDBlock::create(o, rng), ConfigError);
    o.heads = 2;
    o.queries = 0;
    CHECK_THROWS_AS(LaGDBlock::create(o, rng), ConfigError);
}

TEST_CASE("decode matches a scalar recomputation on a seeded 2-query, 4-token, 3-class instance") {
    auto block = small_block(4, 6, 2, 2, 6);
    Rng rng(7);
    Tensor map = test::random_tensor({4, 2, 2}, rng);
    Tensor g = test::random_tensor({3, 6}, rng);
    Tensor out = decode(block, map, g);
    REQUIRE(out.shape() == Shape{6});
    const auto ref = scalar_decode(block, map, g);
    for (std::size_t c = 0; c < 6; ++c) CHECK(out.at(c) == doctest::Approx(ref[c]).epsilon(1e-12));
}

TEST_CASE("batched decoding equals per-image decoding") {
    auto block = small_block(8, 8, 4, 3, 8);
    Rng rng(9);
    Tensor maps = test::random_tensor({5, 8, 2, 3}, rng);
    Tensor g = test::random_tensor({4, 8}, rng);
    Tensor batch = decode_many(block, maps, g);
    REQUIRE(batch.shape() == Shape{5, 8});
    for (std::size_t b = 0; b < 5; ++b) {
        Tensor one = decode(block, ops::select(maps, b), g);
        for (std::size_t c = 0; c < 8; ++c) CHECK(batch.at(b, c) == doctest::Approx(one.at(c)).epsilon(1e-13));
    }
}

TEST_CASE("one class feature makes every text-stage row that feature mixed by the output map") {
    auto block = small_block(4, 4, 2, 3, 10);
    Rng rng(11);
    Tensor map = test::random_tensor({4, 2, 2}, rng);
    Tensor g = test::random_tensor({1, 4}, rng);
    // With a single key each head returns its projected value, so the output is g Wv Wo.
    const Mat expect = mm(mm(to_mat(g), to_mat(block.cross_text.wv)), to_mat(block.cross_text.wo));
    Tensor out = decode(block, map, g);
    for (std::size_t c = 0; c < 4; ++c) CHECK(out.at(c) == doctest::Approx(expect[0][c]).epsilon(1e-12));
    auto maps = attention_maps(block, map, g);
    for (double w : maps.text) CHECK(w == 1.0);
}

TEST_CASE("a single learnable query is passed through the pooling unchanged") {
    auto block = small_block(4, 4, 1, 1, 12);
    Rng rng(13);
    Tensor map = test::random_tensor({4, 2, 2}, rng);
    Tensor g = test::random_tensor({3, 4}, rng);
    const auto ref = scalar_decode(block, map, g);
    Tensor out = decode(block, map, g);
    for (std::size_t c = 0; c < 4; ++c) CHECK(out.at(c) == doctest::Approx(ref[c]).epsilon(1e-12));
}

TEST_CASE("decoding without class features is rejected") {
    auto block = small_block(4, 4, 2, 2, 14);
    Rng rng(15);
    Tensor map = test::random_tensor({4, 2, 2}, rng);
    CHECK_THROWS_AS(decode(block, map, Tensor(Shape{0, 4})), DimensionError);
    CHECK_THROWS_AS(decode(block, map, test::random_tensor({2, 5}, rng)), DimensionError);
    CHECK_THROWS_AS(decode(block, test::random_tensor({3, 2, 2}, rng), test::random_tensor({2, 4}, rng)),
                    DimensionError);
}

TEST_CASE("exported attention maps are row-stochastic") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(100 + seed);
        const std::size_t heads = 1 + rng.below(2);
        const std::size_t queries = 1 + rng.below(4);
        auto block = small_block(4 * heads, 2 * heads, heads, queries, seed, seed % 2 == 0, seed % 3 == 0);
        const std::size_t h = 1 + rng.below(3), w = 1 + rng.below(3), n = 1 + rng.below(5);
        Tensor map = test::random_tensor({4 * heads, h, w}, rng, 3.0);
        Tensor g = test::random_tensor({n, 2 * heads}, rng, 3.0);
        auto maps = attention_maps(block, map, g);
        CHECK(maps.rows == queries);
        CHECK(maps.tokens == h * w);
        CHECK(maps.classes == n);
        check_rows_stochastic(maps.visual, queries, h * w);
        check_rows_stochastic(maps.text, queries, n);
    }
}

TEST_CASE("identical tokens receive uniform attention") {
    auto block = small_block(4, 4, 2, 3, 16);
    std::vector<double> v(4 * 3 * 3);
    for (std::size_t c = 0; c < 4; ++c) {
        for (std::size_t t = 0; t < 9; ++t) v[c * 9 + t] = 0.5 * static_cast<double>(c) - 0.7;
    }
    Rng rng(17);
    auto maps = attention_maps(block, Tensor({4, 3, 3}, v), test::random_tensor({2, 4}, rng));
    for (double w : maps.visual) CHECK(w == doctest::Approx(1.0 / 9.0).epsilon(1e-14));
}

TEST_CASE("text attention columns follow a permutation of the classes") {
    auto block = small_block(8, 4, 2, 3, 18);
    Rng rng(19);
    Tensor map = test::random_tensor({8, 2, 2}, rng);
    Tensor g = test::random_tensor({4, 4}, rng);
    const std::vector<std::size_t> perm{2, 0, 3, 1};
    Tensor permuted = ops::gather_rows(g, perm);
    auto a = attention_maps(block, map, g);
    auto b = attention_maps(block, map, permuted);
    for (std::size_t r = 0; r < a.rows; ++r) {
        for (std::size_t j = 0; j < 4; ++j) {
            CHECK(b.text[r * 4 + j] == doctest::Approx(a.text[r * 4 + perm[j]]).epsilon(1e-12));
        }
    }
    for (std::size_t i = 0; i < a.visual.size(); ++i) CHECK(a.visual[i] == b.visual[i]);
}

TEST_CASE("a planted signal in one quadrant draws the most attention") {
    // Single head, identity projections and queries along a fixed direction u:
    // the visual attention score of a token is proportional to its alignment with u.
    const std::size_t D = 6;
    DecoderOptions o;
    o.visual_width = D;
    o.text_width = D;
    o.heads = 1;
    o.queries = 2;
    Rng init(20);
    auto block = LaGDBlock::create(o, init);
    std::vector<double> u(D, 0.0);
    u[1] = 1.0;
    u[4] = -1.0;
    std::vector<double> qv;
    for (std::size_t m = 0; m < o.queries; ++m) qv.insert(qv.end(), u.begin(), u.end());
    block.queries = Tensor({o.queries, D}, qv, true);
    block.self_attn.wq = block.self_attn.wk = block.self_attn.wv = block.self_attn.wo = identity(D);
    block.cross_visual.wq = identity(D, 4.0);
    block.cross_visual.wk = block.cross_visual.wv = block.cross_visual.wo = identity(D);

    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(300 + seed);
        const std::size_t H = 4, W = 4;
        Tensor noise = test::random_tensor({D, H, W}, rng, 0.3);
        std::vector<double> img(noise.values().begin(), noise.values().end());
        const std::size_t qr = rng.below(2), qc = rng.below(2);
        for (std::size_t y = 0; y < 2; ++y) {
            for (std::size_t x = 0; x < 2; ++x) {
                const std::size_t cell = (qr * 2 + y) * W + qc * 2 + x;
                for (std::size_t c = 0; c < D; ++c) img[c * H * W + cell] += 1.5 * u[c];
            }
        }
        auto maps = attention_maps(block, Tensor({D, H, W}, img), test::random_tensor({3, D}, rng));
        std::vector<double> per_token(H * W, 0.0);
        for (std::size_t r = 0; r < maps.rows; ++r) {
            for (std::size_t t = 0; t < H * W; ++t) per_token[t] += maps.visual[r * H * W + t];
        }
        double quadrant[2][2] = {};
        for (std::size_t t = 0; t < H * W; ++t) quadrant[(t / W) / 2][(t % W) / 2] += per_token[t] / 4.0;
        const std::size_t best = std::max_element(per_token.begin(), per_token.end()) - per_token.begin();
        CHECK((best / W) / 2 == qr);
        CHECK((best % W) / 2 == qc);
        for (std::size_t a = 0; a < 2; ++a) {
            for (std::size_t b = 0; b < 2; ++b) {
                if (a != qr || b != qc) CHECK(quadrant[qr][qc] > quadrant[a][b]);
            }
        }
    }
}

TEST_CASE("decoding is pure in the image content") {
    auto block = small_block(4, 4, 2, 2, 21);
    Rng rng(22);
    Tensor map = test::random_tensor({4, 2, 2}, rng);
    Tensor copy = map.clone(false);
    Tensor g = test::random_tensor({3, 4}, rng);
    Tensor a = decode(block, map, g);
    Tensor b = decode(block, copy, g);
    Tensor c = decode(block, map, g);
    CHECK(std::memcmp(a.values().data(), b.values().data(), a.numel() * sizeof(double)) == 0);
    CHECK(std::memcmp(a.values().data(), c.values().data(), a.numel() * sizeof(double)) == 0);
}

TEST_CASE("decoder gradients pass finite differences") {
    for (int variant = 0; variant < 2; ++variant) {
        auto block = small_block(4, 6, 2, 2, 23, variant == 1, variant == 1);
        Rng rng(24);
        Tensor maps = test::random_tensor({2, 4, 2, 2}, rng, 1.0, true);
        Tensor g = test::random_tensor({3, 6}, rng, 1.0, true);
        Tensor target = test::random_tensor({2, 6}, rng);
        auto loss = [&] { return ops::sum(ops::mul(decode_many(block, maps, g), target)); };
        auto params = block.parameters("lagd");
        params.push_back({"maps", maps});
        params.push_back({"class_features", g});
        auto report = finite_diff_report(loss, params);
        INFO("variant " << variant);
        CHECK(report.groups.size() == 16);
        CHECK(report.max_rel_error < 1e-4);
    }
}
