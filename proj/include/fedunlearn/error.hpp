#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace fedunlearn {

// Error taxonomy. Each category maps onto a distinct failure mode named in
// the operation contracts; the CLI maps them onto exit codes.

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigurationError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class DomainError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

class StateError : public Error {
public:
    using Error::Error;
};

class LookupError : public Error {
public:
    using Error::Error;
};

class PolicyError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Malformed binary artifact. Carries the byte offset where decoding failed.
class FormatError : public Error {
public:
    FormatError(const std::string& what, std::uint64_t offset)
        : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

    std::uint64_t offset() const noexcept { return offset_; }

private:
    std::uint64_t offset_;
};

class VersionError : public FormatError {
public:
    VersionError(std::uint32_t found, std::uint32_t expected)
        : FormatError("unsupported format version " + std::to_string(found) + ", expected " +
                          std::to_string(expected),
                      4),
          found_(found) {}

    std::uint32_t found() const noexcept { return found_; }

private:
    std::uint32_t found_;
};

/// Artifact produced under a different configuration than the current run.
class ArtifactMismatchError : public Error {
public:
    using Error::Error;
};

}  // namespace fedunlearn
