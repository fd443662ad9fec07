#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cistree {

// Error taxonomy. The CLI maps these onto exit codes (config 2, data 3,
// divergence 4); library code throws and never exits.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
  using Error::Error;
};

class DataError : public Error {
public:
  using Error::Error;
};

class LookupError : public DataError {
public:
  using DataError::DataError;
};

class ParseError : public DataError {
public:
  ParseError(const std::string& msg, std::size_t line)
      : DataError(msg + " (line " + std::to_string(line) + ")"), line_(line) {}
  std::size_t line() const { return line_; }

private:
  std::size_t line_;
};

class FormatError : public DataError {
public:
  FormatError(const std::string& msg, std::size_t offset)
      : DataError(msg + " (offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const { return offset_; }

private:
  std::size_t offset_;
};

class DivergenceError : public Error {
public:
  DivergenceError(const std::string& where)
      : Error("non-finite parameter detected in " + where) {}
};

// Violated precondition on a library call.
class ContractError : public Error {
public:
  using Error::Error;
};

// splitmix64 step; used to derive independent sub-seeds from one master seed
// so that resumed runs and parallel workers see identical streams.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed,
                                 std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = mix64(seed ^ 0xc1f651c67c62c6e0ULL);
  for (std::uint64_t p : path) s = mix64(s ^ mix64(p));
  return s;
}

using Rng = std::mt19937_64;

// Base64 of raw little-endian 64-bit floats; parameter blocks in model and
// tree files go through these so round trips are bit-exact.
std::string encode_doubles(std::span<const double> values);
std::vector<double> decode_doubles(const std::string& text);

// Deterministic parallel map: body(i) for i in [0, n), results merged by
// index. With threads <= 1 runs inline.
void parallel_for(std::size_t n, int threads,
                  const std::function<void(std::size_t)>& body);

// FNV-1a over a string; used for config hashes embedded in artifacts.
std::string fnv1a_hex(const std::string& text);

}  // namespace cistree
