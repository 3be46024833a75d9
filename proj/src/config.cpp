#include "lpn/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "lpn/error.hpp"

namespace lpn {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
    throw ConfigError("config: '" + key + "' expects " + expected + ", got '" + value + "'");
}

std::uint64_t parse_u64(const std::string& key, const std::string& s) {
    std::uint64_t v = 0;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size()) bad_value(key, s, "an unsigned integer");
    return v;
}

double parse_real(const std::string& key, const std::string& s) {
    double v = 0.0;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size()) bad_value(key, s, "a number");
    return v;
}

} // namespace

Config Config::defaults() {
    Config c;
    c.values_ = {
        {"seed", "1"},
        // data: synthetic unless a dataset directory is given
        {"data.dir", ""},
        {"data.embeddings", ""},
        {"synthetic.classes", "100"},
        {"synthetic.feature_dim", "16"},
        {"synthetic.geometry", "3,16,16"},
        {"synthetic.samples_per_class", "40"},
        {"synthetic.frequencies", "3"},
        {"synthetic.tile", "4"},
        {"synthetic.separation", "4"},
        {"synthetic.noise", "1"},
        {"synthetic.anchor_noise", "0.2"},
        {"synthetic.seed", "1"},
        // model
        {"model.plan", "8,16,16"},
        {"model.kernel", "3"},
        {"model.text_dim", "16"},
        {"model.projector_hidden", "0"},
        {"model.heads", "4"},
        {"model.queries", "4"},
        {"model.residual", "false"},
        {"model.layer_norm", "false"},
        {"model.metric", "prototype-cosine"},
        {"model.dn4_k", "3"},
        {"model.align_mode", "scalar"},
        {"model.switches", "111"},
        {"model.gamma", "0.01"},
        {"model.finetune_encoder", "true"},
        {"model.checkpoint", ""},
        // loss
        {"loss.alpha", "10"},
        {"loss.beta", "0.4"},
        {"loss.contrastive", "true"},
        {"loss.tau", "0.1"},
        {"loss.normalize", "true"},
        {"loss.contrastive_mode", "class"},
        // episodes
        {"episode.way", "5"},
        {"episode.shot", "1"},
        {"episode.queries", "15"},
        // pretraining
        {"pretrain.checkpoint", ""},
        {"pretrain.epochs", "30"},
        {"pretrain.batch_size", "64"},
        {"pretrain.lr", "0.05"},
        {"pretrain.momentum", "0.9"},
        {"pretrain.weight_decay", "1e-4"},
        {"pretrain.decay_epochs", "20,25"},
        {"pretrain.decay_factor", "0.1"},
        // meta-training
        {"train.epochs", "60"},
        {"train.episodes_per_epoch", "100"},
        {"train.lr", "5e-4"},
        {"train.momentum", "0.9"},
        {"train.weight_decay", "1e-4"},
        {"train.decay_epochs", "40,50"},
        {"train.decay_factor", "0.1"},
        {"train.val_episodes", "200"},
        // evaluation
        {"eval.partition", "novel"},
        {"eval.episodes", "2000"},
        {"eval.workers", "1"},
        // experiments
        {"ablate.rows", "000,100,110,111"},
        {"sweep.parameter", "gamma"},
        {"sweep.values", "0.01,0.1,0.5,1.0"},
        {"gradcheck.eps", "1e-5"},
        {"gradcheck.retry_eps", "1e-2,1e-3,1e-4,1e-7"},
        {"gradcheck.floor", "1e-7"},
        {"gradcheck.threshold", "1e-4"},
        {"gradcheck.fault", ""},
        {"attention.samples", ""},
    };
    return c;
}

void Config::load_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("config: cannot read '" + path.string() + "'");
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config: " + path.string() + ":" + std::to_string(number) + ": expected key = value");
        }
        try {
            set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        } catch (const ConfigError& e) {
            throw ConfigError(path.string() + ":" + std::to_string(number) + ": " + e.what());
        }
    }
}

void Config::set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("config: unknown key '" + key + "'");
    it->second = value;
}

void Config::set(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("config: override '" + assignment + "' is not key=value");
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

const std::string& Config::get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("config: unknown key '" + key + "'");
    return it->second;
}

std::size_t Config::get_size(const std::string& key) const {
    return static_cast<std::size_t>(parse_u64(key, get(key)));
}

std::uint64_t Config::get_u64(const std::string& key) const { return parse_u64(key, get(key)); }

double Config::get_double(const std::string& key) const { return parse_real(key, get(key)); }

bool Config::get_bool(const std::string& key) const {
    const std::string& v = get(key);
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    bad_value(key, v, "true or false");
}

std::vector<std::string> Config::get_list(const std::string& key) const {
    std::vector<std::string> out;
    std::stringstream ss(get(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::vector<std::size_t> Config::get_sizes(const std::string& key) const {
    std::vector<std::size_t> out;
    for (const auto& s : get_list(key)) out.push_back(static_cast<std::size_t>(parse_u64(key, s)));
    return out;
}

std::vector<double> Config::get_doubles(const std::string& key) const {
    std::vector<double> out;
    for (const auto& s : get_list(key)) out.push_back(parse_real(key, s));
    return out;
}

std::string Config::text() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
}

std::uint64_t Config::hash() const { return fnv1a64(text()); }

Config resolve_config(const std::filesystem::path& file, const std::vector<std::string>& overrides) {
    Config c = Config::defaults();
    if (!file.empty()) c.load_file(file);
    for (const auto& o : overrides) c.set(o);
    return c;
}

std::uint64_t fnv1a64(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ull;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

} // namespace lpn
