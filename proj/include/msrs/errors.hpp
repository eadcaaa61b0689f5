#pragma once

#include <stdexcept>
#include <string>

namespace msrs {

// Bad configuration, bad CLI usage, invalid argument values. CLI exit code 1.
class config_error : public std::runtime_error {
public:
    explicit config_error(const std::string& what) : std::runtime_error(what) {}
};

// Numerical failure: non-finite values, degenerate spectra, NaN loss. CLI exit code 2.
class numeric_error : public std::runtime_error {
public:
    explicit numeric_error(const std::string& what) : std::runtime_error(what) {}
};

// I/O failure or corrupted container/dataset files. CLI exit code 3.
class io_error : public std::runtime_error {
public:
    explicit io_error(const std::string& what) : std::runtime_error(what) {}
};

} // namespace msrs
