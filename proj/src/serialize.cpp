#include "dafedit/serialize.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace dafedit {

namespace {

constexpr char kMagic[8] = {'D', 'A', 'F', 'E', 'D', 'I', 'T', '\0'};

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

}  // namespace

const Tensor& Checkpoint::get(const std::string& name) const {
  for (const auto& [n, t] : arrays)
    if (n == name) return t;
  throw std::runtime_error("checkpoint: missing array '" + name + "'");
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& [n, t] : arrays)
    if (n == name) return true;
  return false;
}

void Checkpoint::save(const std::string& path) const {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + tmp + " for writing");
    os.write(kMagic, 8);
    write_pod<uint32_t>(os, kFormatVersion);
    const std::string meta_str = meta.dump();
    write_pod<uint64_t>(os, meta_str.size());
    os.write(meta_str.data(), std::streamsize(meta_str.size()));
    write_pod<uint32_t>(os, uint32_t(arrays.size()));
    for (const auto& [name, t] : arrays) {
      write_pod<uint32_t>(os, uint32_t(name.size()));
      os.write(name.data(), std::streamsize(name.size()));
      write_pod<int64_t>(os, t.rows());
      write_pod<int64_t>(os, t.cols());
      os.write(reinterpret_cast<const char*>(t.data().data()),
               std::streamsize(t.numel() * sizeof(double)));
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0) {
    throw std::runtime_error("checkpoint: bad magic in " + path);
  }
  const uint32_t version = read_pod<uint32_t>(is);
  if (version != kFormatVersion) {
    throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const uint64_t meta_len = read_pod<uint64_t>(is);
  std::string meta_str(meta_len, '\0');
  is.read(meta_str.data(), std::streamsize(meta_len));
  if (!is) throw std::runtime_error("checkpoint: truncated metadata in " + path);
  ckpt.meta = nlohmann::ordered_json::parse(meta_str);
  const uint32_t n_arrays = read_pod<uint32_t>(is);
  for (uint32_t i = 0; i < n_arrays; ++i) {
    const uint32_t name_len = read_pod<uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), std::streamsize(name_len));
    const int64_t rows = read_pod<int64_t>(is);
    const int64_t cols = read_pod<int64_t>(is);
    std::vector<double> data(std::size_t(rows) * std::size_t(cols));
    is.read(reinterpret_cast<char*>(data.data()), std::streamsize(data.size() * sizeof(double)));
    if (!is) throw std::runtime_error("checkpoint: truncated array '" + name + "' in " + path);
    ckpt.add(name, Tensor::from_data(int(rows), int(cols), std::move(data)));
  }
  return ckpt;
}

uint64_t file_hash(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("file_hash: cannot open " + path);
  uint64_t h = 0xcbf29ce484222325ULL;
  char buf[4096];
  while (is) {
    is.read(buf, sizeof(buf));
    const std::streamsize got = is.gcount();
    for (std::streamsize i = 0; i < got; ++i) {
      h ^= uint8_t(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

void write_text_file(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + tmp + " for writing");
    os.write(content.data(), std::streamsize(content.size()));
    if (!os) throw std::runtime_error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::string out((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return out;
}

}  // namespace dafedit
