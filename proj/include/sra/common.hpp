#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sra {

/// Base class for every error raised by the library. `what()` is a single
/// line so the CLI can print it verbatim.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input file or record. Carries the 1-based line number when known.
class ParseError : public Error {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& msg);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Violated precondition on an argument (shape, bounds, emptiness).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

using Rng = std::mt19937_64;

/// Splits a seed into a deterministic child seed so independent stages do not
/// share a random stream.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view contents);
std::vector<std::string> read_lines(const std::filesystem::path& path);

/// Directory holding the shipped data files (catalog, templates, stop words).
/// Honors $SRA_DATA_DIR, falling back to the install location baked in at
/// build time.
std::filesystem::path data_dir();

inline constexpr std::string_view kVersion = "0.3.1";

}  // namespace sra
