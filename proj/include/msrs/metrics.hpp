#pragma once

#include <string>
#include <utility>
#include <vector>

namespace msrs {

// Ordered key/value report. Values are kept as their emitted strings, so
// serialization round-trips byte-for-byte; doubles are written with %.17g
// and parse back to identical bits.
struct MetricsReport {
    std::vector<std::pair<std::string, std::string>> entries;

    void put(const std::string& key, const std::string& value);
    void put_double(const std::string& key, double value);
    void put_int(const std::string& key, long long value);

    bool has(const std::string& key) const;
    const std::string& find(const std::string& key) const;
    double find_double(const std::string& key) const;
    long long find_int(const std::string& key) const;

    std::string to_text() const; // "key = value" lines in entry order
    static MetricsReport from_text(const std::string& text);

    void save(const std::string& path) const;
    static MetricsReport load(const std::string& path);

    bool operator==(const MetricsReport&) const = default;
};

} // namespace msrs
