#pragma once

#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mango/tensor.hpp"

namespace mango {

/// Self-describing tensor file: "MNGO", u32 version, u64 header length, a
/// UTF-8 JSON header {kind, config, tensors: [{name, shape, offset}]} and
/// little-endian float64 payloads. Offsets count bytes from the payload start.
struct Container {
  std::string kind;
  nlohmann::json config = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const;
};

inline constexpr std::uint32_t kContainerVersion = 1;

std::string encode_container(const Container& c);
Container decode_container(const std::string& bytes);

void write_container(const std::string& path, const Container& c);
Container read_container(const std::string& path);

/// FNV-1a 64 of the encoded bytes, as 16 hex digits.
std::string content_hash(const std::string& bytes);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& bytes);

}  // namespace mango
