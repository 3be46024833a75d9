#include "lpn/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"

#include "lpn/error.hpp"

namespace lpn {

namespace {

void shuffle_prefix(std::vector<std::size_t>& v, std::size_t count, Rng& rng) {
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(v.size() - i));
        std::swap(v[i], v[j]);
    }
}

std::string class_name(std::size_t i) {
    std::ostringstream os;
    os << 'c' << std::setw(3) << std::setfill('0') << i;
    return os.str();
}

std::uint32_t to_little(std::uint32_t x) {
    if constexpr (std::endian::native == std::endian::big) {
        x = ((x & 0xffu) << 24) | ((x & 0xff00u) << 8) | ((x >> 8) & 0xff00u) | (x >> 24);
    }
    return x;
}

} // namespace

std::string Geometry::str() const {
    return std::to_string(channels) + "x" + std::to_string(height) + "x" + std::to_string(width);
}

Partition parse_partition(const std::string& name) {
    if (name == "base") return Partition::Base;
    if (name == "val") return Partition::Val;
    if (name == "novel") return Partition::Novel;
    throw ConfigError("unknown partition '" + name + "' (expected base, val or novel)");
}

std::string partition_name(Partition p) {
    switch (p) {
    case Partition::Base: return "base";
    case Partition::Val: return "val";
    case Partition::Novel: return "novel";
    }
    return "?";
}

DatasetSplit::DatasetSplit(Geometry geometry, std::vector<std::string> base,
                           std::vector<std::string> val, std::vector<std::string> novel,
                           std::map<std::string, std::vector<Sample>> samples)
    : geometry_(geometry), base_(std::move(base)), val_(std::move(val)), novel_(std::move(novel)),
      samples_(std::move(samples)) {
    if (geometry_.numel() == 0) throw ConfigError("dataset: degenerate geometry " + geometry_.str());
    std::set<std::string> seen;
    for (const auto* part : {&base_, &val_, &novel_}) {
        for (const auto& c : *part) {
            if (!seen.insert(c).second) {
                throw FormatError("dataset: class '" + c + "' appears in more than one partition");
            }
            auto it = samples_.find(c);
            if (it == samples_.end() || it->second.empty()) {
                throw FormatError("dataset: class '" + c + "' has no samples");
            }
        }
    }
    for (const auto& [cls, list] : samples_) {
        if (!seen.count(cls)) throw FormatError("dataset: class '" + cls + "' is in no partition");
        for (std::size_t i = 0; i < list.size(); ++i) {
            const Sample& s = list[i];
            if (s.class_id != cls) {
                throw FormatError("dataset: sample '" + s.sample_id + "' filed under '" + cls +
                                  "' but labelled '" + s.class_id + "'");
            }
            if (s.image.size() != geometry_.numel()) {
                throw FormatError("dataset: sample '" + s.sample_id + "' has " +
                                  std::to_string(s.image.size()) + " values, geometry " +
                                  geometry_.str() + " needs " + std::to_string(geometry_.numel()));
            }
            for (double v : s.image) {
                if (!std::isfinite(v)) {
                    throw FormatError("dataset: sample '" + s.sample_id + "' has non-finite pixels");
                }
            }
            if (!index_.emplace(s.sample_id, std::make_pair(cls, i)).second) {
                throw FormatError("dataset: duplicate sample id '" + s.sample_id + "'");
            }
        }
    }
}

const std::vector<std::string>& DatasetSplit::classes(Partition p) const {
    switch (p) {
    case Partition::Base: return base_;
    case Partition::Val: return val_;
    case Partition::Novel: return novel_;
    }
    return base_;
}

const std::vector<Sample>& DatasetSplit::samples(const std::string& class_id) const {
    auto it = samples_.find(class_id);
    if (it == samples_.end()) throw LookupError("dataset: unknown class '" + class_id + "'");
    return it->second;
}

const Sample& DatasetSplit::find(const std::string& sample_id) const {
    auto it = index_.find(sample_id);
    if (it == index_.end()) throw LookupError("dataset: unknown sample id '" + sample_id + "'");
    return samples_.at(it->second.first)[it->second.second];
}

std::size_t DatasetSplit::min_samples(Partition p) const {
    std::size_t m = 0;
    bool first = true;
    for (const auto& c : classes(p)) {
        const std::size_t n = samples(c).size();
        m = first ? n : std::min(m, n);
        first = false;
    }
    return m;
}

void AnswerKey::set(const std::string& sample_id, std::size_t label) { labels_[sample_id] = label; }

std::size_t AnswerKey::label(const std::string& sample_id) const {
    auto it = labels_.find(sample_id);
    if (it == labels_.end()) throw LookupError("answer key: no label for '" + sample_id + "'");
    return it->second;
}

std::vector<std::size_t> AnswerKey::labels_for(const EpisodeTask& task) const {
    std::vector<std::size_t> out;
    out.reserve(task.query.size());
    for (const auto& q : task.query) out.push_back(label(q.sample_id));
    return out;
}

Episode sample_episode(const DatasetSplit& split, Partition partition, std::size_t way,
                       std::size_t shot, std::size_t queries, Rng& rng) {
    if (way == 0 || shot == 0 || queries == 0) {
        throw ConfigError("episode: way, shot and queries must be positive");
    }
    const auto& pool = split.classes(partition);
    if (pool.size() < way) {
        throw CapacityError("episode: " + std::to_string(way) + "-way task needs " +
                            std::to_string(way) + " " + partition_name(partition) +
                            " classes, only " + std::to_string(pool.size()) + " available");
    }
    std::vector<std::size_t> class_order(pool.size());
    std::iota(class_order.begin(), class_order.end(), 0);
    shuffle_prefix(class_order, way, rng);

    Episode ep;
    EpisodeTask& task = ep.task;
    task.way = way;
    task.shot = shot;
    task.queries_per_class = queries;
    std::vector<std::pair<const Sample*, std::size_t>> query_items;
    for (std::size_t label = 0; label < way; ++label) {
        const std::string& cls = pool[class_order[label]];
        const auto& list = split.samples(cls);
        if (list.size() < shot + queries) {
            throw CapacityError("episode: class '" + cls + "' has " + std::to_string(list.size()) +
                                " samples, needs " + std::to_string(shot + queries) +
                                " (short by " + std::to_string(shot + queries - list.size()) +
                                ")");
        }
        task.class_names.push_back(cls);
        std::vector<std::size_t> order(list.size());
        std::iota(order.begin(), order.end(), 0);
        shuffle_prefix(order, shot + queries, rng);
        for (std::size_t i = 0; i < shot; ++i) task.support.push_back({&list[order[i]], label});
        for (std::size_t i = shot; i < shot + queries; ++i) {
            query_items.emplace_back(&list[order[i]], label);
        }
    }
    std::vector<std::size_t> perm(query_items.size());
    std::iota(perm.begin(), perm.end(), 0);
    shuffle_prefix(perm, perm.size(), rng);
    for (std::size_t i : perm) {
        const auto& [s, label] = query_items[i];
        task.query.push_back({s->sample_id, s->image});
        ep.answers.set(s->sample_id, label);
    }
    return ep;
}

double episode_accuracy(const EpisodeTask& task, const AnswerKey& key,
                        std::span<const std::size_t> predictions) {
    if (predictions.size() != task.query.size()) {
        throw DimensionError("accuracy: " + std::to_string(predictions.size()) +
                             " predictions for " + std::to_string(task.query.size()) + " queries");
    }
    if (predictions.empty()) throw DimensionError("accuracy: empty query set");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        hits += predictions[i] == key.label(task.query[i].sample_id);
    }
    return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

SplitCounts split_counts(std::size_t class_count) {
    const auto n = static_cast<double>(class_count);
    const auto base = static_cast<std::size_t>(std::llround(0.6 * n));
    const auto val = static_cast<std::size_t>(std::llround(0.2 * n));
    return {base, val, class_count - base - val};
}

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
    const Geometry& g = spec.geometry;
    if (g.numel() == 0) throw ConfigError("synthetic: degenerate geometry " + g.str());
    if (spec.class_count < 10) {
        throw ConfigError("synthetic: class_count must be at least 10 for a 60/20/20 split");
    }
    if (spec.feature_dim == 0) throw ConfigError("synthetic: feature_dim must be positive");
    if (!(spec.separation > 0.0)) throw ConfigError("synthetic: separation must be positive");
    if (!(spec.noise >= 0.0) || !(spec.anchor_noise >= 0.0)) {
        throw ConfigError("synthetic: noise values must be non-negative");
    }
    if (spec.samples_per_class == 0) throw ConfigError("synthetic: samples_per_class must be positive");
    const bool smooth = spec.frequencies > 0;
    const std::size_t t = spec.tile;
    if (!smooth && (t == 0 || t > g.height || t > g.width)) {
        throw ConfigError("synthetic: tile " + std::to_string(t) + " does not fit " + g.str());
    }
    const std::size_t f = spec.frequencies;
    if (smooth && (f > g.height || f > g.width)) {
        throw ConfigError("synthetic: " + std::to_string(f) + " frequencies do not fit " + g.str());
    }
    const std::size_t patch = smooth ? g.numel() : g.channels * t * t;
    const std::size_t basis = smooth ? g.channels * f * f : patch;
    if (spec.feature_dim > basis) {
        throw ConfigError("synthetic: feature_dim " + std::to_string(spec.feature_dim) + " exceeds the " +
                          std::to_string(basis) + " rendering directions");
    }
    const std::size_t d = spec.feature_dim;

    // Smooth mode: orthonormal cosine basis, one block of f*f per channel.
    std::vector<double> cosines;
    if (smooth) {
        cosines.assign(basis * patch, 0.0);
        const double pi = std::acos(-1.0);
        for (std::size_t ch = 0; ch < g.channels; ++ch) {
            for (std::size_t u = 0; u < f; ++u) {
                for (std::size_t v = 0; v < f; ++v) {
                    double* row = cosines.data() + ((ch * f + u) * f + v) * patch;
                    double norm = 0.0;
                    for (std::size_t h = 0; h < g.height; ++h) {
                        for (std::size_t w = 0; w < g.width; ++w) {
                            const double x = std::cos(pi * u * (h + 0.5) / g.height) *
                                             std::cos(pi * v * (w + 0.5) / g.width);
                            row[(ch * g.height + h) * g.width + w] = x;
                            norm += x * x;
                        }
                    }
                    norm = std::sqrt(norm);
                    for (std::size_t j = 0; j < patch; ++j) row[j] /= norm;
                }
            }
        }
    }

    // Orthonormal rendering patterns (Gram-Schmidt over random directions).
    std::vector<double> pattern(d * patch);
    {
        Rng rng(derive_seed(spec.seed, {3}));
        std::vector<double> coeff(basis);
        for (std::size_t i = 0; i < d; ++i) {
            double* row = pattern.data() + i * patch;
            for (;;) {
                if (smooth) {
                    for (double& c : coeff) c = rng.normal();
                    std::fill(row, row + patch, 0.0);
                    for (std::size_t b = 0; b < basis; ++b) {
                        const double* cb = cosines.data() + b * patch;
                        for (std::size_t j = 0; j < patch; ++j) row[j] += coeff[b] * cb[j];
                    }
                } else {
                    for (std::size_t j = 0; j < patch; ++j) row[j] = rng.normal();
                }
                for (std::size_t k = 0; k < i; ++k) {
                    const double* prev = pattern.data() + k * patch;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < patch; ++j) dot += row[j] * prev[j];
                    for (std::size_t j = 0; j < patch; ++j) row[j] -= dot * prev[j];
                }
                double norm = 0.0;
                for (std::size_t j = 0; j < patch; ++j) norm += row[j] * row[j];
                norm = std::sqrt(norm);
                if (norm > 1e-6) {
                    for (std::size_t j = 0; j < patch; ++j) row[j] /= norm;
                    break;
                }
            }
        }
    }

    SyntheticData out;
    const double mean_scale = spec.separation * std::sqrt(2.0 / static_cast<double>(d));
    Rng mean_rng(derive_seed(spec.seed, {1}));
    Rng anchor_rng(derive_seed(spec.seed, {4}));
    out.table = EmbeddingTable(d, "synthetic seed=" + std::to_string(spec.seed));
    std::vector<std::string> names;
    std::map<std::string, std::vector<Sample>> samples;
    for (std::size_t c = 0; c < spec.class_count; ++c) {
        const std::string name = class_name(c);
        names.push_back(name);
        std::vector<double> mean(d);
        for (double& m : mean) m = mean_scale * mean_rng.normal();
        std::vector<double> anchor(mean);
        for (double& a : anchor) a += spec.anchor_noise * anchor_rng.normal();
        out.table.add(name, std::move(anchor));

        Rng sample_rng(derive_seed(spec.seed, {2, c}));
        auto& list = samples[name];
        for (std::size_t s = 0; s < spec.samples_per_class; ++s) {
            std::vector<double> z(mean);
            for (double& v : z) v += spec.noise * sample_rng.normal();
            std::vector<double> tile(patch, 0.0);
            for (std::size_t i = 0; i < d; ++i) {
                const double* row = pattern.data() + i * patch;
                for (std::size_t j = 0; j < patch; ++j) tile[j] += z[i] * row[j];
            }
            Sample smp;
            smp.sample_id = name + "_s" + std::to_string(s);
            smp.class_id = name;
            smp.image.resize(g.numel());
            for (std::size_t ch = 0; ch < g.channels; ++ch) {
                for (std::size_t h = 0; h < g.height; ++h) {
                    for (std::size_t w = 0; w < g.width; ++w) {
                        const std::size_t px = (ch * g.height + h) * g.width + w;
                        smp.image[px] = smooth ? tile[px] : tile[(ch * t + h % t) * t + w % t];
                    }
                }
            }
            out.latents.emplace(smp.sample_id, std::move(z));
            list.push_back(std::move(smp));
        }
        out.means.emplace(name, std::move(mean));
    }
    const SplitCounts counts = split_counts(spec.class_count);
    std::vector<std::string> base(names.begin(), names.begin() + counts.base);
    std::vector<std::string> val(names.begin() + counts.base,
                                 names.begin() + counts.base + counts.val);
    std::vector<std::string> novel(names.begin() + counts.base + counts.val, names.end());
    out.split = DatasetSplit(g, std::move(base), std::move(val), std::move(novel), std::move(samples));
    return out;
}

std::string ConfidenceInterval::str() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << mean << "+-" << half_width;
    return os.str();
}

ConfidenceInterval confidence_interval(std::span<const double> accuracies) {
    if (accuracies.size() < 2) {
        throw StatisticsError("confidence interval: need at least 2 values, got " +
                              std::to_string(accuracies.size()));
    }
    const auto n = static_cast<double>(accuracies.size());
    double sum = 0.0;
    for (double a : accuracies) sum += a;
    const double mean = sum / n;
    double ss = 0.0;
    for (double a : accuracies) ss += (a - mean) * (a - mean);
    const double std_dev = std::sqrt(ss / n);
    return {100.0 * mean, 100.0 * 1.96 * std_dev / std::sqrt(n)};
}

DatasetSplit load_dataset(const std::filesystem::path& dir) {
    using nlohmann::json;
    const auto manifest_path = dir / "manifest.json";
    std::ifstream in(manifest_path);
    if (!in) throw IoError("dataset: cannot open " + manifest_path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError("dataset: " + manifest_path.string() + ": " + e.what());
    }
    Geometry g;
    std::vector<std::string> classes;
    try {
        const auto geo = doc.at("geometry").get<std::vector<std::size_t>>();
        if (geo.size() != 3) throw FormatError("dataset: geometry must be [c,h,w]");
        g = {geo[0], geo[1], geo[2]};
        classes = doc.at("classes").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("dataset: malformed manifest: ") + e.what());
    }
    std::vector<std::string> base, val, novel;
    if (doc.contains("splits")) {
        const auto& s = doc["splits"];
        try {
            base = s.at("base").get<std::vector<std::string>>();
            val = s.at("val").get<std::vector<std::string>>();
            novel = s.at("novel").get<std::vector<std::string>>();
        } catch (const json::exception& e) {
            throw FormatError(std::string("dataset: malformed splits: ") + e.what());
        }
    } else {
        const SplitCounts counts = split_counts(classes.size());
        base.assign(classes.begin(), classes.begin() + counts.base);
        val.assign(classes.begin() + counts.base, classes.begin() + counts.base + counts.val);
        novel.assign(classes.begin() + counts.base + counts.val, classes.end());
    }
    std::map<std::string, std::vector<Sample>> samples;
    for (const auto& cls : classes) {
        const auto class_dir = dir / cls;
        if (!std::filesystem::is_directory(class_dir)) {
            throw IoError("dataset: missing class directory " + class_dir.string());
        }
        std::vector<std::filesystem::path> files;
        for (const auto& entry : std::filesystem::directory_iterator(class_dir)) {
            if (entry.path().extension() == ".f32") files.push_back(entry.path());
        }
        std::sort(files.begin(), files.end());
        auto& list = samples[cls];
        for (const auto& f : files) {
            std::ifstream bin(f, std::ios::binary);
            std::vector<std::uint32_t> raw(g.numel());
            bin.read(reinterpret_cast<char*>(raw.data()),
                     static_cast<std::streamsize>(raw.size() * sizeof(std::uint32_t)));
            if (!bin || bin.peek() != std::char_traits<char>::eof()) {
                throw FormatError("dataset: " + f.string() + " does not hold exactly " +
                                  std::to_string(g.numel()) + " float32 values");
            }
            Sample s;
            s.sample_id = f.stem().string();
            s.class_id = cls;
            s.image.resize(raw.size());
            for (std::size_t i = 0; i < raw.size(); ++i) {
                s.image[i] = static_cast<double>(std::bit_cast<float>(to_little(raw[i])));
            }
            list.push_back(std::move(s));
        }
    }
    return DatasetSplit(g, std::move(base), std::move(val), std::move(novel), std::move(samples));
}

void save_dataset(const DatasetSplit& split, const std::filesystem::path& dir) {
    using nlohmann::json;
    std::filesystem::create_directories(dir);
    const Geometry& g = split.geometry();
    json doc;
    std::vector<std::string> classes;
    for (Partition p : {Partition::Base, Partition::Val, Partition::Novel}) {
        const auto& cs = split.classes(p);
        classes.insert(classes.end(), cs.begin(), cs.end());
        doc["splits"][partition_name(p)] = cs;
    }
    doc["classes"] = classes;
    doc["geometry"] = {g.channels, g.height, g.width};
    {
        std::ofstream out(dir / "manifest.json");
        out << doc.dump(1) << "\n";
        if (!out) throw IoError("dataset: cannot write manifest in " + dir.string());
    }
    for (const auto& cls : classes) {
        std::filesystem::create_directories(dir / cls);
        for (const auto& s : split.samples(cls)) {
            std::vector<std::uint32_t> raw(s.image.size());
            for (std::size_t i = 0; i < raw.size(); ++i) {
                raw[i] = to_little(std::bit_cast<std::uint32_t>(static_cast<float>(s.image[i])));
            }
            std::ofstream out(dir / cls / (s.sample_id + ".f32"), std::ios::binary);
            out.write(reinterpret_cast<const char*>(raw.data()),
                      static_cast<std::streamsize>(raw.size() * sizeof(std::uint32_t)));
            if (!out) throw IoError("dataset: cannot write sample " + s.sample_id);
        }
    }
}

} // namespace lpn
