#pragma once

#include <stdexcept>
#include <string>

namespace bionas {

// Exit-code contract used by the CLI: 0 success, 2 config error,
// 3 data error, 4 numerical abort.
class Error : public std::runtime_error {
public:
    Error(std::string msg, int exit_code)
        : std::runtime_error(std::move(msg)), exit_code_(exit_code) {}
    int exit_code() const { return exit_code_; }

private:
    int exit_code_;
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg, 2) {}
};

class DataError : public Error {
public:
    explicit DataError(const std::string& msg) : Error(msg, 3) {}
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& msg) : Error(msg, 4) {}
};

class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& msg) : Error(msg, 4) {}
};

}  // namespace bionas
