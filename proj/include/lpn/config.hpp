#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace lpn {

/// Flat key/value experiment configuration with dotted keys. Only keys that
/// exist in the defaults are accepted; values are validated when read.
class Config {
public:
    static Config defaults();

    // "key = value" lines, '#' starts a comment. IoError if unreadable,
    // ConfigError (with line number) on syntax errors or unknown keys.
    void load_file(const std::filesystem::path& path);
    void set(const std::string& key, const std::string& value);
    // "key=value"
    void set(const std::string& assignment);

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    const std::string& get(const std::string& key) const;
    std::size_t get_size(const std::string& key) const;
    std::uint64_t get_u64(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    std::vector<std::size_t> get_sizes(const std::string& key) const;  // comma-separated, may be empty
    std::vector<double> get_doubles(const std::string& key) const;
    std::vector<std::string> get_list(const std::string& key) const;

    // Sorted "key = value" lines; loading this text reproduces the config.
    std::string text() const;
    // FNV-1a 64 over text().
    std::uint64_t hash() const;
    const std::map<std::string, std::string>& values() const { return values_; }

private:
    std::map<std::string, std::string> values_;
};

// Applies a file (when non-empty) and then the overrides, on top of the defaults.
Config resolve_config(const std::filesystem::path& file, const std::vector<std::string>& overrides);

std::uint64_t fnv1a64(const std::string& bytes);
std::string hex64(std::uint64_t v);

} // namespace lpn
