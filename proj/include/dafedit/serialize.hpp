#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dafedit/tensor.hpp"

namespace dafedit {

// Self-describing binary container: a JSON metadata block (config, vocab,
// counters) followed by named f64 arrays. Doubles are stored as raw
// little-endian bytes, so save/load round-trips bit-exactly.
struct Checkpoint {
  static constexpr uint32_t kFormatVersion = 1;

  nlohmann::ordered_json meta;
  std::vector<std::pair<std::string, Tensor>> arrays;

  void add(const std::string& name, const Tensor& t) { arrays.emplace_back(name, t); }
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

// FNV-1a over the file bytes; used for provenance stamps.
uint64_t file_hash(const std::string& path);

// Formats a double with enough digits to round-trip; plain C locale.
std::string format_double(double v);

// Writes text atomically (temp file + rename) so failed commands leave no
// partial outputs.
void write_text_file(const std::string& path, const std::string& content);

std::string read_text_file(const std::string& path);

}  // namespace dafedit
