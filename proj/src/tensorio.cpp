#include "dmaudit/tensorio.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "dmaudit/errors.hpp"

namespace dmaudit {

namespace {

constexpr char kMagic[8] = {'D', 'M', 'T', 'C', '0', '0', '0', '1'};

void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw FormatError("tensor file: truncated integer field");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

void write_f64_block(std::ostream& os, const std::vector<double>& v) {
  for (double x : v) write_u64(os, std::bit_cast<std::uint64_t>(x));
}

}  // namespace

nlohmann::json TensorFile::header() const { return nlohmann::json::parse(header_json); }

void save_tensor_file(const std::string& path, const nlohmann::json& header,
                      const std::vector<std::pair<std::string, Matrix>>& tensors) {
  nlohmann::json h = header;
  h["format_version"] = kTensorFormatVersion;
  const std::string hs = h.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("tensor file: cannot open for writing: " + path);
  os.write(kMagic, 8);
  write_u64(os, hs.size());
  os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  write_u64(os, tensors.size());
  for (const auto& [name, m] : tensors) {
    write_u64(os, name.size());
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u64(os, 2);
    write_u64(os, m.rows());
    write_u64(os, m.cols());
    write_f64_block(os, m.raw());
  }
  if (!os) throw FormatError("tensor file: write failed: " + path);
}

TensorFile load_tensor_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifactError("tensor file: cannot open: " + path);

  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    throw FormatError("tensor file: bad magic in " + path);

  TensorFile out;
  const std::uint64_t hlen = read_u64(is);
  if (hlen > (1ull << 30)) throw FormatError("tensor file: implausible header length");
  out.header_json.resize(hlen);
  is.read(out.header_json.data(), static_cast<std::streamsize>(hlen));
  if (!is) throw FormatError("tensor file: truncated header");

  nlohmann::json h;
  try {
    h = nlohmann::json::parse(out.header_json);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("tensor file: header is not valid JSON: ") + e.what());
  }
  if (!h.contains("format_version") || h["format_version"].get<int>() != kTensorFormatVersion)
    throw FormatError("tensor file: unsupported format version in " + path);

  const std::uint64_t count = read_u64(is);
  if (count > (1ull << 24)) throw FormatError("tensor file: implausible tensor count");
  out.tensors.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint64_t nlen = read_u64(is);
    if (nlen > (1ull << 20)) throw FormatError("tensor file: implausible name length");
    std::string name(nlen, '\0');
    is.read(name.data(), static_cast<std::streamsize>(nlen));
    if (!is) throw FormatError("tensor file: truncated tensor name");
    const std::uint64_t rank = read_u64(is);
    if (rank != 1 && rank != 2) throw FormatError("tensor file: unsupported rank for " + name);
    std::uint64_t rows = 1, cols = 1;
    if (rank == 1) {
      cols = read_u64(is);
    } else {
      rows = read_u64(is);
      cols = read_u64(is);
    }
    if (rows * cols > (1ull << 28)) throw FormatError("tensor file: implausible tensor size");
    std::vector<double> data(rows * cols);
    for (auto& x : data) x = std::bit_cast<double>(read_u64(is));
    out.tensors.emplace_back(std::move(name),
                             Matrix(static_cast<std::size_t>(rows),
                                    static_cast<std::size_t>(cols), std::move(data)));
  }
  return out;
}

std::uint64_t hash_bytes(const void* data, std::size_t len, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t hash_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifactError("hash_file: cannot open: " + path);
  std::uint64_t h = 14695981039346656037ull;
  char buf[1 << 16];
  while (is) {
    is.read(buf, sizeof(buf));
    const auto got = is.gcount();
    if (got > 0) h = hash_bytes(buf, static_cast<std::size_t>(got), h);
  }
  return h;
}

std::string hash_hex(std::uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[h & 0xf];
    h >>= 4;
  }
  return s;
}

}  // namespace dmaudit
