#pragma once

#include <stdexcept>
#include <string>

namespace roma {

// Invalid arguments to an operation (dimension mismatches, out-of-range areas, ...).
class ArgumentError : public std::invalid_argument {
public:
    explicit ArgumentError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Bad run configuration (unknown keys, malformed lines, invalid layer ids).
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Dataset problems (missing domain directory, empty clips, missing split).
class DatasetError : public std::runtime_error {
public:
    explicit DatasetError(const std::string& msg) : std::runtime_error(msg) {}
};

// Failure to load weights or checkpoints from disk.
class LoadError : public std::runtime_error {
public:
    explicit LoadError(const std::string& msg) : std::runtime_error(msg) {}
};

// Runtime training failures (non-finite losses).
class TrainingError : public std::runtime_error {
public:
    explicit TrainingError(const std::string& msg) : std::runtime_error(msg) {}
};

// Internal contract violations. Enabled in debug builds (NDEBUG off).
class InternalError : public std::logic_error {
public:
    explicit InternalError(const std::string& msg) : std::logic_error(msg) {}
};

#ifdef NDEBUG
#define ROMA_DEBUG_CHECK(cond, msg) ((void)0)
#else
#define ROMA_DEBUG_CHECK(cond, msg) \
    do { if (!(cond)) throw ::roma::InternalError(msg); } while (0)
#endif

} // namespace roma
