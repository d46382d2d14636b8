#pragma once

#include <stdexcept>
#include <string>

namespace jepoo {

// Base of every error raised by the library. The CLI maps the three
// categories below onto exit codes 2 (input), 3 (artifact mismatch) and 1.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Caller supplied bad data or configuration.
class InputError : public Error {
public:
    using Error::Error;
};

// A stored artifact (checkpoint, manifest) disagrees with the requested use.
class MismatchError : public Error {
public:
    using Error::Error;
};

class ConfigError : public InputError {
public:
    using InputError::InputError;
};

class InputTooShortError : public InputError {
public:
    using InputError::InputError;
};

class UndefinedSnrError : public InputError {
public:
    using InputError::InputError;
};

class RangeError : public InputError {
public:
    using InputError::InputError;
};

class MalformedNoteError : public InputError {
public:
    using InputError::InputError;
};

class IngestionError : public InputError {
public:
    using InputError::InputError;
};

class ShapeError : public MismatchError {
public:
    using MismatchError::MismatchError;
};

// Internal misuse of an API (e.g. backward from a non-scalar).
class ContractError : public Error {
public:
    using Error::Error;
};

class TrainingDivergedError : public Error {
public:
    using Error::Error;
};

} // namespace jepoo
