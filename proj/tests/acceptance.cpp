// Acceptance run: one pass/fail line per criterion, exit 3 if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "lpn/error.hpp"
#include "lpn/experiment.hpp"
#include "lpn/ops.hpp"

using namespace lpn;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* format, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, format, args...);
    return buf;
}

bool same_values(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    const auto x = a.values();
    const auto y = b.values();
    return std::equal(x.begin(), x.end(), y.begin());
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

SyntheticData tiny_data() {
    SyntheticSpec s;
    s.class_count = 20;
    s.feature_dim = 6;
    s.geometry = {3, 8, 8};
    s.samples_per_class = 8;
    return generate_synthetic(s);
}

ModelConfig tiny_model(const std::string& switches) {
    ModelConfig c;
    c.geometry = {3, 8, 8};
    c.plan = {4, 8};
    c.text_dim = 6;
    c.heads = 2;
    c.queries = 2;
    c.switches = ModuleSwitches::parse(switches);
    c.seed = 5;
    return c;
}

// Shared state for the trend criteria: benchmark, pretrained encoder, trained models.
struct Bench {
    Config config;
    std::filesystem::path dir;
    Workspace ws;
    ConvEncoder encoder;

    Config with(std::initializer_list<const char*> overrides) const {
        Config c = config;
        for (const char* o : overrides) c.set(o);
        return c;
    }
    LpnModel untrained(const Config& c) const {
        LpnModel m = LpnModel::create(model_config(c, ws.split.geometry()), ws.table.dim());
        install_encoder(m, encoder);
        return m;
    }
    LpnModel trained(const Config& c, const std::string& name) const {
        const auto sub = dir / name;
        prepare_run_dir(c, sub);
        return train_model(c, ws, encoder, sub, {});
    }
    EvalReport eval(const LpnModel& m, const Config& c) const { return evaluate(m, ws.split, ws.table, eval_config(c)); }
};

double lower(const ConfidenceInterval& c) { return c.mean - c.half_width; }
double upper(const ConfidenceInterval& c) { return c.mean + c.half_width; }

// 1. Gradient oracle, with the finite-difference protocol of `lpn gradcheck`.
Outcome gradient_oracle() {
    const auto data = tiny_data();
    Rng rng(derive_seed(1, {0x9c}));
    const Episode ep = sample_episode(data.split, Partition::Base, 3, 2, 2, rng);
    const auto labels = ep.answers.labels_for(ep.task);
    const Config defaults = Config::defaults();
    GradCheckOptions options;
    options.eps = defaults.get_double("gradcheck.eps");
    options.retry_eps = defaults.get_doubles("gradcheck.retry_eps");
    options.floor = defaults.get_double("gradcheck.floor");
    GradCheckOptions single = options;
    single.retry_eps.clear();
    struct Variant {
        const char* name;
        MetricKind metric;
        AlignMode align;
        bool residual;
    };
    double worst = 0.0, worst_single = 0.0;
    std::string worst_group;
    std::size_t groups = 0, retried = 0;
    bool fault_caught = true;
    for (const Variant& v : {Variant{"prototype", MetricKind::PrototypeCosine, AlignMode::Scalar, false},
                             Variant{"relation", MetricKind::Relation, AlignMode::Scalar, true},
                             Variant{"dn4", MetricKind::Dn4, AlignMode::PerChannel, false}}) {
        ModelConfig cfg = tiny_model("111");
        cfg.metric = v.metric;
        cfg.align_mode = v.align;
        cfg.residual = cfg.layer_norm = v.residual;
        cfg.dn4_k = 2;
        const LpnModel model = LpnModel::create(cfg, data.table.dim());
        auto loss = [&] {
            const ForwardResult r = forward(model, episode_maps(model, ep.task), data.table);
            return episode_loss(model, r, ep.task.shot, labels).total;
        };
        const auto params = model.parameters();
        const GradCheckReport report = finite_diff_report(loss, params, options);
        groups += report.groups.size();
        for (const auto& g : report.groups) {
            retried += g.retried;
            if (g.max_rel_error > worst) {
                worst = g.max_rel_error;
                worst_group = std::string(v.name) + ":" + g.name;
            }
        }
        worst_single = std::max(worst_single, finite_diff_report(loss, params, single).max_rel_error);
        testing::set_gradient_fault("matmul");
        const bool caught = !finite_diff_report(loss, params, options).passed(1e-4);
        testing::clear_gradient_fault();
        fault_caught = fault_caught && caught;
    }
    return {worst < 1e-4 && fault_caught,
            fmt("max rel error %.2e (%s) over %zu groups, %zu coordinates re-measured (single step: %.2e); "
                "injected matmul fault %s",
                worst, worst_group.c_str(), groups, retried, worst_single, fault_caught ? "detected" : "MISSED")};
}

// 2. Reduction identities.
Outcome reduction_identities() {
    const auto data = tiny_data();
    std::size_t failures = 0;

    ModelConfig g1 = tiny_model("111");
    g1.gamma = 1.0;
    const LpnModel a = LpnModel::create(g1, data.table.dim());
    const LpnModel b = LpnModel::create(tiny_model("101"), data.table.dim());
    for (std::uint64_t s = 0; s < 20; ++s) {
        Rng rng(derive_seed(2, {s}));
        const Episode ep = sample_episode(data.split, Partition::Novel, 4, 1 + s % 2, 3, rng);
        const ForwardResult ra = forward(a, episode_maps(a, ep.task), data.table);
        const ForwardResult rb = forward(b, episode_maps(b, ep.task), data.table);
        const Tensor plain = text_logits(ra.query_text, class_means(ra.support_text, 4, ep.task.shot));
        if (!same_values(ra.logits.text, plain) || !same_values(ra.logits.text, rb.logits.text)) ++failures;
    }
    const bool gamma_ok = failures == 0;

    ModelConfig zero = tiny_model("111");
    zero.beta = 0.0;
    ModelConfig none = tiny_model("111");
    none.contrastive = false;
    LpnModel za = LpnModel::create(zero, data.table.dim());
    LpnModel nb = LpnModel::create(none, data.table.dim());
    MetaTrainConfig tc;
    tc.way = 3;
    tc.shot = 2;
    tc.queries = 2;
    tc.epochs = 3;
    tc.episodes_per_epoch = 5;
    tc.val_episodes = 5;
    tc.sgd.lr = 1e-2;
    tc.sgd.decay_epochs = {2};
    const auto ha = meta_train(za, data.split, data.table, tc);
    const auto hb = meta_train(nb, data.split, data.table, tc);
    bool trajectory = ha.size() == hb.size();
    for (std::size_t i = 0; trajectory && i < ha.size(); ++i) {
        trajectory = ha[i].loss == hb[i].loss && ha[i].val.mean == hb[i].val.mean;
    }
    const auto pa = za.parameters(), pb = nb.parameters();
    trajectory = trajectory && pa.size() == pb.size();
    for (std::size_t i = 0; trajectory && i < pa.size(); ++i) trajectory = same_values(pa[i].tensor, pb[i].tensor);
    if (!trajectory) ++failures;

    const LpnModel off = LpnModel::create(tiny_model("000"), data.table.dim());
    std::size_t mismatches = 0, queries = 0;
    for (std::uint64_t s = 0; s < 20; ++s) {
        Rng rng(derive_seed(3, {s}));
        const Episode ep = sample_episode(data.split, Partition::Novel, 4, 2, 3, rng);
        const EpisodePredictions p = predict(off, ep.task, data.table);
        const EpisodeMaps maps = episode_maps(off, ep.task);
        const Tensor protos = class_means(global_pool(maps.support), 4, 2);
        const auto expected = argmax_rows(prototype_logits(global_pool(maps.query), protos));
        for (std::size_t q = 0; q < expected.size(); ++q, ++queries) {
            if (p.fused[q] != expected[q] || p.visual[q] != expected[q]) ++mismatches;
        }
        if (!p.text.empty()) ++mismatches;
    }
    if (mismatches) ++failures;
    return {failures == 0, fmt("gamma=1 text logits %s over 20 episodes; beta=0 trajectory %s; switches "
                               "000 vs prototype baseline %zu/%zu mismatches",
                               gamma_ok ? "bit-exact" : "DIFFER", trajectory ? "bit-identical" : "DIFFERS",
                               mismatches, queries)};
}

// 3. Classification oracle on the pretrained encoder.
Outcome classification_oracle(const Bench& bench) {
    const LpnModel model = bench.untrained(bench.with({"model.switches=000"}));
    std::size_t agree = 0, total = 0;
    for (std::uint64_t i = 0; i < 100; ++i) {
        Rng rng(derive_seed(4, {i}));
        const std::size_t shot = i % 2 ? 5 : 1;
        const Episode ep = sample_episode(bench.ws.split, Partition::Novel, 5, shot, 15, rng);
        const EpisodePredictions p = predict(model, ep.task, bench.ws.table);
        const EpisodeMaps maps = episode_maps(model, ep.task);
        const Tensor sp = global_pool(maps.support), qp = global_pool(maps.query);
        const std::size_t D = sp.dim(1);
        for (std::size_t q = 0; q < qp.dim(0); ++q, ++total) {
            std::size_t best = 0;
            double best_cos = -2.0;
            for (std::size_t j = 0; j < 5; ++j) {
                std::vector<double> proto(D, 0.0);
                for (std::size_t k = 0; k < shot; ++k) {
                    for (std::size_t c = 0; c < D; ++c) proto[c] += sp.at(j * shot + k, c);
                }
                double dot = 0.0, nq = 0.0, np = 0.0;
                for (std::size_t c = 0; c < D; ++c) {
                    dot += qp.at(q, c) * proto[c];
                    nq += qp.at(q, c) * qp.at(q, c);
                    np += proto[c] * proto[c];
                }
                const double cs = dot / std::sqrt(nq * np);
                if (cs > best_cos) {
                    best_cos = cs;
                    best = j;
                }
            }
            if (p.visual[q] == best) ++agree;
        }
    }
    return {agree == total, fmt("argmax agreement %zu/%zu over 100 episodes (5-way, 1 and 5 shot)", agree, total)};
}

// 4. Structural invariants.
Outcome structural_invariants(const Bench& bench, const LpnModel& model) {
    std::size_t violations = 0, checks = 0;
    std::map<std::string, std::size_t> by_kind;
    auto expect = [&](bool ok, const char* kind) {
        ++checks;
        if (!ok) {
            ++violations;
            ++by_kind[kind];
        }
    };
    double worst_row = 0.0, worst_post = 0.0;
    NoGradGuard guard;
    for (std::uint64_t i = 0; i < 50; ++i) {
        Rng rng(derive_seed(5, {i}));
        const Episode ep = sample_episode(bench.ws.split, Partition::Novel, 5, 1 + (i % 2) * 4, 3, rng);
        const EpisodeMaps maps = episode_maps(model, ep.task);
        const ForwardResult r = forward(model, maps, bench.ws.table);
        for (const Tensor* t : {&r.logits.visual, &r.logits.text}) {
            const Tensor v = *t;
            for (double x : v.values()) expect(x >= -1.0 && x <= 1.0, "cosine range");
        }
        const Tensor post = posterior(r.logits.fused, model.config.alpha);
        for (std::size_t q = 0; q < post.dim(0); ++q) {
            double sum = 0.0;
            for (std::size_t j = 0; j < post.dim(1); ++j) sum += post.at(q, j);
            worst_post = std::max(worst_post, std::abs(sum - 1.0));
            expect(std::abs(sum - 1.0) <= 1e-12, "posterior sum");
        }
        for (const Tensor& la : r.alignment) {
            for (double x : la.values()) expect(x > 0.0 && x < 1.0, "alignment range");
        }
        for (std::size_t q = 0; q < maps.query.dim(0); q += 5) {
            const AttentionMaps a = attention_maps(model.decoder, ops::select(maps.query, q), r.class_features);
            auto rows = [&](const std::vector<double>& m, std::size_t cols) {
                for (std::size_t row = 0; row < a.rows; ++row) {
                    double sum = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) {
                        const double x = m[row * cols + c];
                        expect(x >= 0.0, "attention sign");
                        sum += x;
                    }
                    worst_row = std::max(worst_row, std::abs(sum - 1.0));
                    expect(std::abs(sum - 1.0) <= 1e-9, "attention row sum");
                }
            };
            rows(a.visual, a.tokens);
            rows(a.text, a.classes);
        }
    }

    std::size_t episodes = 0;
    const Partition parts[] = {Partition::Base, Partition::Val, Partition::Novel};
    for (std::uint64_t i = 0; i < 1000; ++i, ++episodes) {
        Rng rng(derive_seed(6, {i}));
        const Partition part = parts[i % 3];
        const std::size_t way = 2 + i % 4, shot = 1 + i % 5, queries = 1 + i % 7;
        const Episode ep = sample_episode(bench.ws.split, part, way, shot, queries, rng);
        const auto& t = ep.task;
        const auto& allowed = bench.ws.split.classes(part);
        const std::set<std::string> allowed_set(allowed.begin(), allowed.end());
        const std::set<std::string> names(t.class_names.begin(), t.class_names.end());
        expect(t.way == way && t.shot == shot && t.queries_per_class == queries, "episode size");
        expect(names.size() == way && t.class_names.size() == way, "distinct classes");
        for (const auto& n : t.class_names) expect(allowed_set.count(n) == 1, "partition");
        expect(t.support.size() == way * shot && t.query.size() == way * queries, "episode size");
        std::set<std::string> seen;
        for (std::size_t s = 0; s < t.support.size(); ++s) {
            const auto& ls = t.support[s];
            expect(ls.label == s / shot, "support order");
            expect(ls.sample->class_id == t.class_names[ls.label], "support label");
            expect(seen.insert(ls.sample->sample_id).second, "sample reuse");
        }
        std::vector<std::size_t> per_class(way, 0);
        const auto labels = ep.answers.labels_for(t);
        for (std::size_t q = 0; q < t.query.size(); ++q) {
            expect(seen.insert(t.query[q].sample_id).second, "sample reuse");
            const Sample& s = bench.ws.split.find(t.query[q].sample_id);
            expect(labels[q] < way && s.class_id == t.class_names[labels[q]], "query label");
            if (labels[q] < way) ++per_class[labels[q]];
        }
        for (std::size_t c : per_class) expect(c == queries, "queries per class");
    }
    std::string kinds;
    for (const auto& [kind, n] : by_kind) kinds += fmt(" [%s: %zu]", kind.c_str(), n);
    return {violations == 0,
            kinds + fmt("%zu violations in %zu checks (attention row error %.1e, posterior error %.1e, %zu sampled "
                "episodes)",
                violations, checks, worst_row, worst_post, episodes)};
}

// 5. Fusion trend.
Outcome fusion_trend(const Bench& bench, const EvalReport& fused1) {
    const Config c1 = bench.with({"model.switches=000"});
    const EvalReport base1 = bench.eval(bench.untrained(c1), c1);
    const Config c5 = bench.with({"episode.shot=5", "model.gamma=0.1"});
    const LpnModel lpn5 = bench.trained(c5, "lpn_5shot");
    const EvalReport fused5 = bench.eval(lpn5, c5);
    const Config b5 = bench.with({"episode.shot=5", "model.switches=000"});
    const EvalReport base5 = bench.eval(bench.untrained(b5), b5);
    const double gain1 = fused1.fused.mean - base1.fused.mean;
    const double gain5 = fused5.fused.mean - base5.fused.mean;
    const bool band = base1.fused.mean >= 55.0 && base1.fused.mean <= 75.0;
    return {band && gain1 >= 3.0 && gain1 > gain5,
            fmt("1-shot visual-only %s, LPN %s, gain %+.2f; 5-shot visual-only %s, LPN %s, gain %+.2f",
                base1.fused.str().c_str(), fused1.fused.str().c_str(), gain1, base5.fused.str().c_str(),
                fused5.fused.str().c_str(), gain5)};
}

// 6. Gamma trend.
Outcome gamma_trend(const Bench& bench, const EvalReport& at_001) {
    const Config c = bench.with({"model.gamma=1"});
    const EvalReport at_1 = bench.eval(bench.trained(c, "lpn_gamma1"), c);
    return {lower(at_001.fused) > upper(at_1.fused),
            fmt("gamma 0.01 %s vs gamma 1.0 %s", at_001.fused.str().c_str(), at_1.fused.str().c_str())};
}

// 7. Determinism.
Outcome determinism(const Bench& bench, const LpnModel& model) {
    Config tiny = Config::defaults();
    for (const char* kv : {"synthetic.classes=20", "synthetic.feature_dim=6", "synthetic.geometry=3,8,8",
                           "synthetic.samples_per_class=8", "model.plan=4,8", "model.text_dim=6", "model.heads=2",
                           "model.queries=2", "pretrain.epochs=2", "pretrain.batch_size=16",
                           "pretrain.decay_epochs=", "train.epochs=2", "train.episodes_per_epoch=5",
                           "train.decay_epochs=", "train.val_episodes=10", "train.lr=0.005", "episode.way=3",
                           "episode.queries=3", "eval.episodes=50"}) {
        tiny.set(kv);
    }
    const auto d1 = bench.dir / "det_w1", d3 = bench.dir / "det_w3", d1b = bench.dir / "det_w1_again";
    run_meta_train(tiny, d1);
    run_meta_train(tiny, d1b);
    Config tiny3 = tiny;
    tiny3.set("eval.workers", "3");
    run_meta_train(tiny3, d3);
    std::size_t files = 0, equal = 0;
    for (const char* f : {"metrics.csv", "history.csv", "pretrain_history.csv", "pretrain_metrics.csv"}) {
        const std::string a = slurp(d1 / f);
        files += 2;
        equal += !a.empty() && a == slurp(d1b / f);
        equal += !a.empty() && a == slurp(d3 / f);
    }
    EvalConfig ec = eval_config(bench.config);
    ec.episodes = 300;
    const std::string m1 = metrics_csv(evaluate(model, bench.ws.split, bench.ws.table, ec));
    ec.workers = 4;
    const std::string m4 = metrics_csv(evaluate(model, bench.ws.split, bench.ws.table, ec));
    files += 1;
    equal += m1 == m4;
    return {equal == files, fmt("%zu/%zu metric files byte-identical across repeated runs and 1/3/4 workers",
                                equal, files)};
}

// 8. Metric generalization.
Outcome metric_generalization(const Bench& bench) {
    std::string detail;
    bool ok = true;
    for (const char* metric : {"dn4", "relation"}) {
        const std::string m = std::string("model.metric=") + metric;
        const Config off = bench.with({m.c_str(), "model.switches=000"});
        const Config on = bench.with({m.c_str()});
        const LpnModel base = metric == std::string("dn4") ? bench.untrained(off)
                                                           : bench.trained(off, std::string(metric) + "_000");
        const EvalReport r0 = bench.eval(base, off);
        const EvalReport r1 = bench.eval(bench.trained(on, std::string(metric) + "_111"), on);
        const double gain = r1.fused.mean - r0.fused.mean;
        const double gain_hw = std::hypot(r0.fused.half_width, r1.fused.half_width);
        const bool above_chance = lower(r0.fused) > 20.0 && lower(r1.fused) > 20.0;
        ok = ok && above_chance && gain - gain_hw >= 0.0;
        detail += fmt("%s%s visual-only %s, with text %s, gain %+.2f +- %.2f", detail.empty() ? "" : "; ", metric,
                      r0.fused.str().c_str(), r1.fused.str().c_str(), gain, gain_hw);
    }
    return {ok, detail};
}

} // namespace

int main(int argc, char** argv) {
    const std::filesystem::path config_file = argc > 1 ? argv[1] : LPN_ACCEPTANCE_CONFIG;
    const auto start = std::chrono::steady_clock::now();
    std::size_t failed = 0;
    auto run = [&](int id, const char* name, const std::function<Outcome()>& body) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = body();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (!o.pass) ++failed;
        std::printf("[%s] %d %s: %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), secs);
        std::fflush(stdout);
        return o.pass;
    };

    run(1, "gradient oracle", [&] {
        Outcome o = gradient_oracle();
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        o.pass = o.pass && secs < 120.0;
        return o;
    });
    run(2, "reduction identities", reduction_identities);

    Bench bench;
    bench.config = resolve_config(config_file, {});
    bench.dir = std::filesystem::temp_directory_path() / "lpn_acceptance";
    std::filesystem::remove_all(bench.dir);
    prepare_run_dir(bench.config, bench.dir);
    bench.ws = load_workspace(bench.config);
    bench.encoder = obtain_encoder(bench.config, bench.ws, bench.dir, {});

    run(3, "classification oracle", [&] {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o = classification_oracle(bench);
        o.pass = o.pass && std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() < 60.0;
        return o;
    });

    const auto trend_start = std::chrono::steady_clock::now();
    const LpnModel lpn1 = bench.trained(bench.config, "lpn_1shot");
    const EvalReport fused1 = bench.eval(lpn1, bench.config);

    run(4, "structural invariants", [&] { return structural_invariants(bench, lpn1); });
    run(5, "fusion trend", [&] {
        Outcome o = fusion_trend(bench, fused1);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - trend_start).count();
        o.detail += fmt(", trained in %.0fs incl. the 1-shot model", secs);
        o.pass = o.pass && secs < 1800.0;
        return o;
    });
    run(6, "gamma trend", [&] { return gamma_trend(bench, fused1); });
    run(7, "determinism", [&] { return determinism(bench, lpn1); });
    run(8, "metric generalization", [&] { return metric_generalization(bench); });

    const double total = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("%zu of 8 criteria failed, %.0fs total\n", failed, total);
    return failed == 0 ? 0 : 3;
}
