#pragma once

#include <stdexcept>
#include <string>

namespace dialign {

/// Base class for all errors raised by the harness.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// --- corpus ---

class MalformedDocument : public Error {
public:
    using Error::Error;
};

class InvariantViolation : public Error {
public:
    InvariantViolation(const std::string& sample_id, const std::string& detail)
        : Error("sample '" + sample_id + "': " + detail), sample_id_(sample_id) {}
    const std::string& sample_id() const { return sample_id_; }

private:
    std::string sample_id_;
};

class DuplicateId : public Error {
public:
    using Error::Error;
};

class InsufficientSamples : public Error {
public:
    using Error::Error;
};

// --- prompt paths ---

class NotEnoughPoisonedContexts : public Error {
public:
    using Error::Error;
};

class InvalidArrangement : public Error {
public:
    using Error::Error;
};

class EmptyContexts : public Error {
public:
    using Error::Error;
};

class TemplateViolation : public Error {
public:
    using Error::Error;
};

class ConceptParseFailure : public Error {
public:
    using Error::Error;
};

class EmptyConceptList : public Error {
public:
    using Error::Error;
};

class ProtocolViolation : public Error {
public:
    using Error::Error;
};

// --- provider ---

class AuthError : public Error {
public:
    using Error::Error;
};

class RateLimited : public Error {
public:
    using Error::Error;
};

class UpstreamError : public Error {
public:
    using Error::Error;
};

class TimeoutError : public Error {
public:
    using Error::Error;
};

/// Raised instead of silently truncating a transcript that exceeds the
/// configured character budget.
class TranscriptTooLong : public Error {
public:
    using Error::Error;
};

// --- runner / persistence ---

class PersistenceError : public Error {
public:
    using Error::Error;
};

class UnknownTrial : public Error {
public:
    using Error::Error;
};

// --- judge ---

class EmptyField : public Error {
public:
    using Error::Error;
};

// --- dataset generation ---

class MemoryOnlyCell : public Error {
public:
    using Error::Error;
};

class MissingJudgments : public Error {
public:
    using Error::Error;
};

// --- configuration ---

class ConfigError : public Error {
public:
    using Error::Error;
};

}  // namespace dialign
