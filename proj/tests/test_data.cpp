#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <map>
#include <set>
#include <span>

#include "lpn/data.hpp"
#include "lpn/error.hpp"

using namespace lpn;

namespace {

SyntheticSpec small_spec(std::size_t classes = 20, std::uint64_t seed = 1) {
    SyntheticSpec s;
    s.class_count = classes;
    s.feature_dim = 16;
    s.geometry = {3, 8, 8};
    s.samples_per_class = 20;
    s.separation = 4.0;
    s.noise = 1.0;
    s.anchor_noise = 0.2;
    s.seed = seed;
    return s;
}

// Returns an empty string when the episode is well-formed.
std::string episode_violation(const Episode& ep, std::size_t n, std::size_t k, std::size_t q) {
    const EpisodeTask& t = ep.task;
    if (t.class_names.size() != n) return "class count";
    if (std::set<std::string>(t.class_names.begin(), t.class_names.end()).size() != n) {
        return "duplicate class";
    }
    if (t.support.size() != n * k || t.query.size() != n * q) return "sample count";
    std::map<std::size_t, std::size_t> support_per_label, query_per_label;
    std::set<std::string> support_ids;
    for (std::size_t i = 0; i < t.support.size(); ++i) {
        const auto& s = t.support[i];
        if (s.label >= n || s.label != i / k) return "support label";
        if (s.sample->class_id != t.class_names[s.label]) return "support class";
        support_per_label[s.label]++;
        support_ids.insert(s.sample->sample_id);
    }
    std::set<std::string> query_ids;
    for (const auto& qs : t.query) {
        const std::size_t label = ep.answers.label(qs.sample_id);
        if (label >= n) return "query label";
        query_per_label[label]++;
        if (support_ids.count(qs.sample_id)) return "support/query overlap";
        query_ids.insert(qs.sample_id);
    }
    if (support_ids.size() != n * k || query_ids.size() != n * q) return "repeated sample";
    for (std::size_t j = 0; j < n; ++j) {
        if (support_per_label[j] != k || query_per_label[j] != q) return "per-class count";
    }
    return "";
}

} // namespace

TEST_CASE("synthetic split follows 60/20/20 by class count") {
    auto data = generate_synthetic(small_spec(20));
    CHECK(data.split.classes(Partition::Base).size() == 12);
    CHECK(data.split.classes(Partition::Val).size() == 4);
    CHECK(data.split.classes(Partition::Novel).size() == 4);
    CHECK(split_counts(100).base == 60);
    CHECK(split_counts(100).novel == 20);
    CHECK(data.table.size() == 20);
    CHECK(data.table.dim() == 16);
}

TEST_CASE("synthetic generation rejects bad specs") {
    auto s = small_spec();
    s.geometry = {3, 0, 8};
    CHECK_THROWS_AS(generate_synthetic(s), ConfigError);
    s = small_spec();
    s.class_count = 9;
    CHECK_THROWS_AS(generate_synthetic(s), ConfigError);
    s = small_spec();
    s.separation = 0.0;
    CHECK_THROWS_AS(generate_synthetic(s), ConfigError);
    s = small_spec();
    s.noise = -1.0;
    CHECK_THROWS_AS(generate_synthetic(s), ConfigError);
}

TEST_CASE("zero anchor noise puts class means in the table") {
    auto s = small_spec();
    s.anchor_noise = 0.0;
    auto data = generate_synthetic(s);
    for (const auto& [name, mean] : data.means) CHECK(data.table.at(name) == mean);
}

TEST_CASE("synthetic generation is a pure function of its settings and seed") {
    auto a = generate_synthetic(small_spec(20, 5));
    auto b = generate_synthetic(small_spec(20, 5));
    CHECK(a.table.content_hash() == b.table.content_hash());
    for (const auto& [cls, list] : a.split.all_samples()) {
        const auto& other = b.split.samples(cls);
        REQUIRE(other.size() == list.size());
        for (std::size_t i = 0; i < list.size(); ++i) {
            CHECK(list[i].sample_id == other[i].sample_id);
            CHECK(std::memcmp(list[i].image.data(), other[i].image.data(),
                              list[i].image.size() * sizeof(double)) == 0);
        }
    }
    auto c = generate_synthetic(small_spec(20, 6));
    CHECK(c.table.content_hash() != a.table.content_hash());
}

TEST_CASE("nearest class mean on latents exceeds 95% at separation/noise 4") {
    auto s = small_spec(20);
    s.samples_per_class = 500;  // 10k samples
    auto data = generate_synthetic(s);
    std::size_t hits = 0, total = 0;
    for (const auto& [cls, list] : data.split.all_samples()) {
        for (const auto& smp : list) {
            const auto& z = data.latents.at(smp.sample_id);
            std::string best;
            double best_d = INFINITY;
            for (const auto& [other, mean] : data.means) {
                double d = 0.0;
                for (std::size_t i = 0; i < z.size(); ++i) d += (z[i] - mean[i]) * (z[i] - mean[i]);
                if (d < best_d) {
                    best_d = d;
                    best = other;
                }
            }
            hits += best == cls;
            ++total;
        }
    }
    CHECK(total == 10000);
    CHECK(static_cast<double>(hits) / static_cast<double>(total) > 0.95);
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
    return d;
}

TEST_CASE("smooth rendering is an isometry of the latent") {
    auto data = generate_synthetic(small_spec(10));
    const auto& a = data.split.samples("c000")[0];
    for (const char* other : {"c000", "c003", "c007"}) {
        const auto& b = data.split.samples(other)[1];
        const double dz = squared_distance(data.latents.at(a.sample_id), data.latents.at(b.sample_id));
        CHECK(squared_distance(a.image, b.image) == doctest::Approx(dz).epsilon(1e-10));
    }
}

TEST_CASE("smooth rendering has no energy above the chosen frequencies") {
    auto s = small_spec(10);
    s.geometry = {1, 8, 8};
    s.feature_dim = 4;
    s.frequencies = 2;
    auto data = generate_synthetic(s);
    const double pi = std::acos(-1.0);
    for (const auto& smp : data.split.samples("c001")) {
        for (std::size_t u = 0; u < 8; ++u) {
            for (std::size_t v = 0; v < 8; ++v) {
                double c = 0.0;
                for (std::size_t h = 0; h < 8; ++h) {
                    for (std::size_t w = 0; w < 8; ++w) {
                        c += smp.image[h * 8 + w] * std::cos(pi * u * (h + 0.5) / 8) * std::cos(pi * v * (w + 0.5) / 8);
                    }
                }
                if (u >= 2 || v >= 2) CHECK(std::abs(c) < 1e-10);
            }
        }
    }
}

TEST_CASE("rendering rejects more latent dimensions than directions") {
    auto s = small_spec(10);
    s.frequencies = 2;  // 3 channels x 4 = 12 < 16
    CHECK_THROWS_AS(generate_synthetic(s), ConfigError);
    s.frequencies = 9;
    CHECK_THROWS_AS(generate_synthetic(s), ConfigError);
    s.frequencies = 0;
    s.tile = 2;  // 12 pixels per tile
    CHECK_THROWS_AS(generate_synthetic(s), ConfigError);
}

TEST_CASE("tiled rendering preserves latent distances up to the tile count") {
    auto s = small_spec(10);
    s.frequencies = 0;
    auto data = generate_synthetic(s);
    const double tiles = (8.0 / 4.0) * (8.0 / 4.0);
    const auto& a = data.split.samples("c000")[0];
    for (const char* other : {"c000", "c003", "c007"}) {
        const auto& b = data.split.samples(other)[1];
        double dz = 0.0, dx = 0.0;
        const auto& za = data.latents.at(a.sample_id);
        const auto& zb = data.latents.at(b.sample_id);
        for (std::size_t i = 0; i < za.size(); ++i) dz += (za[i] - zb[i]) * (za[i] - zb[i]);
        for (std::size_t i = 0; i < a.image.size(); ++i) {
            dx += (a.image[i] - b.image[i]) * (a.image[i] - b.image[i]);
        }
        CHECK(dx == doctest::Approx(tiles * dz).epsilon(1e-10));
    }
}

TEST_CASE("sample_episode counting contract") {
    auto s = small_spec(100);
    auto data = generate_synthetic(s);
    Rng rng(7);
    auto ep = sample_episode(data.split, Partition::Novel, 5, 1, 15, rng);
    CHECK(ep.task.support.size() == 5);
    CHECK(ep.task.query.size() == 75);
    CHECK(ep.answers.size() == 75);
    CHECK(episode_violation(ep, 5, 1, 15).empty());
}

TEST_CASE("sample_episode capacity errors name the shortfall") {
    auto data = generate_synthetic(small_spec(20));  // 4 novel classes
    Rng rng(1);
    try {
        sample_episode(data.split, Partition::Novel, 5, 1, 15, rng);
        FAIL("expected a capacity error");
    } catch (const CapacityError& e) {
        CHECK(std::string(e.what()).find("only 4") != std::string::npos);
    }
    try {
        sample_episode(data.split, Partition::Base, 5, 10, 15, rng);  // 20 per class
        FAIL("expected a capacity error");
    } catch (const CapacityError& e) {
        CHECK(std::string(e.what()).find("short by 5") != std::string::npos);
    }
}

TEST_CASE("sample_episode replays under the same seed") {
    auto data = generate_synthetic(small_spec(100));
    Rng a(7), b(7), c(8);
    auto ea = sample_episode(data.split, Partition::Novel, 5, 2, 5, a);
    auto eb = sample_episode(data.split, Partition::Novel, 5, 2, 5, b);
    auto ec = sample_episode(data.split, Partition::Novel, 5, 2, 5, c);
    auto ids = [](const Episode& e) {
        std::multiset<std::string> out;
        for (const auto& s : e.task.support) out.insert(s.sample->sample_id);
        for (const auto& q : e.task.query) out.insert(q.sample_id);
        return out;
    };
    CHECK(ids(ea) == ids(eb));
    CHECK(ea.task.class_names == eb.task.class_names);
    CHECK(ids(ea) != ids(ec));
}

TEST_CASE("episode invariants hold over 1000 sampled episodes") {
    auto data = generate_synthetic(small_spec(100));
    Rng rng(11);
    std::size_t violations = 0;
    for (int i = 0; i < 1000; ++i) {
        const std::size_t n = 2 + rng.below(9);
        const std::size_t k = 1 + rng.below(5);
        const std::size_t q = 1 + rng.below(20 - k);
        const auto part = static_cast<Partition>(rng.below(3));
        const std::size_t available = data.split.classes(part).size();
        if (n > available) continue;
        auto ep = sample_episode(data.split, part, n, k, q, rng);
        const std::string v = episode_violation(ep, n, k, q);
        if (!v.empty()) {
            ++violations;
            MESSAGE(v);
        }
    }
    CHECK(violations == 0);
}

TEST_CASE("class sampling marginals are uniform") {
    auto s = small_spec(100);
    s.samples_per_class = 2;
    s.geometry = {1, 4, 4};
    s.frequencies = 4;
    auto data = generate_synthetic(s);
    REQUIRE(data.split.classes(Partition::Novel).size() == 20);
    std::map<std::string, int> counts;
    Rng rng(3);
    const int episodes = 10000;
    for (int i = 0; i < episodes; ++i) {
        auto ep = sample_episode(data.split, Partition::Novel, 5, 1, 1, rng);
        for (const auto& c : ep.task.class_names) counts[c]++;
    }
    const double p = 5.0 / 20.0;
    const double expected = episodes * p;
    const double se = std::sqrt(episodes * p * (1 - p));
    CHECK(counts.size() == 20);
    for (const auto& [c, n] : counts) {
        INFO(c);
        CHECK(std::abs(n - expected) <= 3.0 * se);
    }
}

TEST_CASE("query views carry no class information beyond the answer key") {
    auto data = generate_synthetic(small_spec(100));
    Rng rng(2);
    auto ep = sample_episode(data.split, Partition::Val, 3, 1, 4, rng);
    for (const auto& q : ep.task.query) {
        const Sample& s = data.split.find(q.sample_id);
        CHECK(ep.task.class_names[ep.answers.label(q.sample_id)] == s.class_id);
        CHECK(q.image.data() == s.image.data());
    }
    CHECK_THROWS_AS(ep.answers.label("nope"), LookupError);
    std::vector<std::size_t> truth = ep.answers.labels_for(ep.task);
    CHECK(episode_accuracy(ep.task, ep.answers, truth) == 1.0);
}

TEST_CASE("confidence interval examples") {
    std::vector<double> flat(10, 0.8);
    auto ci = confidence_interval(flat);
    CHECK(ci.mean == doctest::Approx(80.0));
    CHECK(ci.half_width == doctest::Approx(0.0));
    CHECK(ci.str() == "80.00+-0.00");

    std::vector<double> two{0.0, 1.0};
    ci = confidence_interval(two);
    CHECK(ci.mean == doctest::Approx(50.0).epsilon(1e-12));
    CHECK(std::abs(ci.half_width - 69.30) < 0.01);

    CHECK_THROWS_AS(confidence_interval(std::vector<double>{0.5}), StatisticsError);
    CHECK_THROWS_AS(confidence_interval(std::vector<double>{}), StatisticsError);

    Rng rng(2024);
    std::vector<double> draws(2000);
    for (double& d : draws) d = rng.uniform() < 0.7 ? 1.0 : 0.0;
    ci = confidence_interval(draws);
    CHECK(std::abs(ci.half_width - 2.0) <= 0.3);
    CHECK(std::abs(ci.mean - 70.0) < 4.0);
}

TEST_CASE("dataset directory round-trip keeps float32 pixels") {
    auto s = small_spec(10);
    s.samples_per_class = 3;
    auto data = generate_synthetic(s);
    const auto dir = std::filesystem::temp_directory_path() / "lpn_test_dataset";
    std::filesystem::remove_all(dir);
    save_dataset(data.split, dir);
    DatasetSplit loaded = load_dataset(dir);
    CHECK(loaded.geometry() == data.split.geometry());
    for (Partition p : {Partition::Base, Partition::Val, Partition::Novel}) {
        CHECK(loaded.classes(p) == data.split.classes(p));
    }
    for (const auto& [cls, list] : data.split.all_samples()) {
        for (const auto& smp : list) {
            const Sample& back = loaded.find(smp.sample_id);
            CHECK(back.class_id == cls);
            for (std::size_t i = 0; i < smp.image.size(); ++i) {
                CHECK(back.image[i] == static_cast<double>(static_cast<float>(smp.image[i])));
            }
        }
    }
    std::filesystem::resize_file(dir / "c000" / "c000_s0.f32", 10);
    CHECK_THROWS_AS(load_dataset(dir), FormatError);
    std::filesystem::remove_all(dir);
    CHECK_THROWS_AS(load_dataset(dir), IoError);
}

TEST_CASE("dataset split rejects overlapping partitions") {
    Sample s{"a0", "a", std::vector<double>(4, 0.0)};
    std::map<std::string, std::vector<Sample>> samples{{"a", {s}}};
    CHECK_THROWS_AS(DatasetSplit({1, 2, 2}, {"a"}, {}, {"a"}, samples), FormatError);
    Sample bad{"a1", "a", std::vector<double>(3, 0.0)};
    samples["a"].push_back(bad);
    CHECK_THROWS_AS(DatasetSplit({1, 2, 2}, {"a"}, {}, {}, samples), FormatError);
}
