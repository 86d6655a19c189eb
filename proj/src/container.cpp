#include "mango/container.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mango/error.hpp"

namespace mango {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'M', 'N', 'G', 'O'};

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
T take(const std::string& in, std::size_t& pos, const char* what) {
  if (in.size() - pos < sizeof(T)) {
    throw FormatError(std::string("truncated ") + what + " at offset " + std::to_string(pos));
  }
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

const Tensor& Container::get(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw FormatError("container has no tensor named '" + name + "'");
}

bool Container::has(const std::string& name) const {
  for (const auto& entry : tensors)
    if (entry.first == name) return true;
  return false;
}

std::string encode_container(const Container& c) {
  nlohmann::json header;
  header["kind"] = c.kind;
  header["config"] = c.config;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : c.tensors) {
    header["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.numel() * sizeof(double);
  }
  const std::string text = header.dump();
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kContainerVersion);
  put<std::uint64_t>(out, text.size());
  out += text;
  for (const auto& entry : c.tensors)
    out.append(reinterpret_cast<const char*>(entry.second.data().data()), entry.second.numel() * sizeof(double));
  return out;
}

Container decode_container(const std::string& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("bad magic at offset 0");
  std::size_t pos = 4;
  const auto version = take<std::uint32_t>(bytes, pos, "version");
  if (version != kContainerVersion) {
    throw FormatError("unsupported version " + std::to_string(version) + " at offset 4");
  }
  const auto header_len = take<std::uint64_t>(bytes, pos, "header length");
  if (bytes.size() - pos < header_len) {
    throw FormatError("truncated header at offset " + std::to_string(pos) + " (need " +
                      std::to_string(header_len) + " bytes)");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(pos, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed header at offset " + std::to_string(pos) + ": " + e.what());
  }
  const std::size_t payload = pos + header_len;
  Container c;
  try {
    c.kind = header.at("kind").get<std::string>();
    c.config = header.at("config");
    for (const auto& entry : header.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const std::size_t count = shape_numel(shape);
      const std::size_t begin = payload + offset;
      if (offset > bytes.size() || begin > bytes.size() || (bytes.size() - begin) / sizeof(double) < count) {
        throw FormatError("truncated payload for tensor '" + name + "' at offset " + std::to_string(begin));
      }
      std::vector<double> data(count);
      std::memcpy(data.data(), bytes.data() + begin, count * sizeof(double));
      c.tensors.emplace_back(name, Tensor(shape, std::move(data)));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed header at offset " + std::to_string(pos) + ": " + e.what());
  }
  return c;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path);
}

void write_container(const std::string& path, const Container& c) { write_file(path, encode_container(c)); }

Container read_container(const std::string& path) { return decode_container(read_file(path)); }

std::string content_hash(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace mango
