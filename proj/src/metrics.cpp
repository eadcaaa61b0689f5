#include "msrs/metrics.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "msrs/errors.hpp"

namespace msrs {

void MetricsReport::put(const std::string& key, const std::string& value) {
    entries.emplace_back(key, value);
}

void MetricsReport::put_double(const std::string& key, double value) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", value);
    entries.emplace_back(key, buf);
}

void MetricsReport::put_int(const std::string& key, long long value) {
    entries.emplace_back(key, std::to_string(value));
}

bool MetricsReport::has(const std::string& key) const {
    for (const auto& [k, v] : entries) {
        if (k == key) return true;
    }
    return false;
}

const std::string& MetricsReport::find(const std::string& key) const {
    for (const auto& [k, v] : entries) {
        if (k == key) return v;
    }
    throw config_error("report: missing key '" + key + "'");
}

double MetricsReport::find_double(const std::string& key) const {
    const std::string& s = find(key);
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str()) throw config_error("report: key '" + key + "' is not a number");
    return v;
}

long long MetricsReport::find_int(const std::string& key) const {
    return static_cast<long long>(find_double(key));
}

std::string MetricsReport::to_text() const {
    std::string out;
    for (const auto& [k, v] : entries) {
        out += k;
        out += " = ";
        out += v;
        out += "\n";
    }
    return out;
}

MetricsReport MetricsReport::from_text(const std::string& text) {
    MetricsReport r;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const std::size_t eq = line.find(" = ");
        if (eq == std::string::npos) {
            throw io_error("report line " + std::to_string(lineno) + ": expected 'key = value'");
        }
        r.entries.emplace_back(line.substr(0, eq), line.substr(eq + 3));
    }
    return r;
}

void MetricsReport::save(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw io_error("cannot open for writing: " + path);
    out << to_text();
    if (!out) throw io_error("write failed: " + path);
}

MetricsReport MetricsReport::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_text(ss.str());
}

} // namespace msrs
