#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

namespace msrs {

// Flat key = value text config. '#' starts a comment, blank lines are
// ignored. Unknown keys are hard errors: every consumer passes its allowed
// key set, so a typo fails loudly instead of silently using a default.
class Config {
public:
    Config() = default;

    static Config parse_text(const std::string& text, const std::set<std::string>& allowed_keys);
    static Config parse_file(const std::string& path, const std::set<std::string>& allowed_keys);

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string get_string(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key, double fallback) const;
    int get_int(const std::string& key, int fallback) const;
    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    // comma-separated list; empty or missing key -> empty vector
    std::vector<std::string> get_list(const std::string& key) const;

    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    void set_double(const std::string& key, double value);
    void set_int(const std::string& key, long long value);

    // "key = value" lines, keys sorted.
    std::string to_text() const;

    const std::map<std::string, std::string>& entries() const { return values_; }

private:
    std::map<std::string, std::string> values_;
};

} // namespace msrs
