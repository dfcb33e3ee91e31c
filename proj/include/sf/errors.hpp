#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

namespace sf {

// Caller broke a documented precondition (shape mismatch, bad label value, ...).
class ContractViolation : public std::logic_error {
  public:
    using std::logic_error::logic_error;
};

// Non-finite values or an undefined numeric result.
class NumericFailure : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// A zero-norm row reached a cosine similarity.
class DegenerateEmbedding : public NumericFailure {
  public:
    using NumericFailure::NumericFailure;
};

// Cosine similarity requested for an all-zero attribution map.
class UndefinedSimilarity : public NumericFailure {
  public:
    using NumericFailure::NumericFailure;
};

// AUC requested over a single class.
class DegenerateClasses : public ContractViolation {
  public:
    using ContractViolation::ContractViolation;
};

// Something the command needs (corpus, checkpoint, enough samples) is absent.
class MissingPrerequisite : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
  public:
    IoError(const std::string& what, std::filesystem::path path)
        : std::runtime_error(what + ": " + path.string()), path_(std::move(path)) {}

    const std::filesystem::path& path() const noexcept { return path_; }

  private:
    std::filesystem::path path_;
};

}  // namespace sf
