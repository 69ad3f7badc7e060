// SPDX-License-Identifier: Apache-2.0
#include "mvlpt/tensor_io.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "mvlpt/errors.hpp"

namespace mvlpt {

const Array& TensorBundle::tensor(std::string_view name) const {
  for (const auto& [n, a] : tensors)
    if (n == name) return a;
  throw FormatError("bundle of kind '" + kind + "' has no tensor '" + std::string(name) + "'");
}

const std::string& TensorBundle::meta_value(std::string_view key) const {
  for (const auto& [k, v] : meta)
    if (k == key) return v;
  throw FormatError("bundle of kind '" + kind + "' has no meta key '" + std::string(key) + "'");
}

bool TensorBundle::has_meta(std::string_view key) const {
  for (const auto& [k, v] : meta)
    if (k == key) return true;
  return false;
}

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t value) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[std::size_t(i)] = digits[value & 0xf];
    value >>= 4;
  }
  return out;
}

std::string format_double(double value) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, ptr);
}

std::string serialize(const TensorBundle& bundle) {
  std::string out;
  out += "mvlpt-tensors " + std::to_string(kTensorFormatVersion) + "\n";
  out += "kind " + bundle.kind + "\n";
  for (const auto& [k, v] : bundle.meta) out += "meta " + k + " " + v + "\n";
  for (const auto& [name, array] : bundle.tensors) {
    out += "tensor " + name + " " + std::to_string(array.rank());
    for (auto d : array.shape()) out += " " + std::to_string(d);
    out += "\n";
    bool first = true;
    for (double v : array.data()) {
      if (!first) out += ' ';
      out += format_double(v);
      first = false;
    }
    out += "\n";
  }
  out += "end\n";
  out += "checksum " + hex64(fnv1a64(out)) + "\n";
  return out;
}

namespace {

[[noreturn]] void fail(std::string_view origin, const std::string& what) {
  throw FormatError(std::string(origin) + ": " + what);
}

}  // namespace

TensorBundle deserialize(std::string_view text, std::string_view origin) {
  const auto marker = text.rfind("checksum ");
  if (marker == std::string_view::npos) throw ChecksumError(std::string(origin) + ": missing checksum line");
  std::string_view stored = text.substr(marker + 9);
  while (!stored.empty() && (stored.back() == '\n' || stored.back() == '\r')) stored.remove_suffix(1);
  if (stored != hex64(fnv1a64(text.substr(0, marker)))) {
    throw ChecksumError(std::string(origin) + ": checksum mismatch (file is corrupted)");
  }

  std::istringstream in{std::string(text.substr(0, marker))};
  std::string word;
  int version = 0;
  if (!(in >> word >> version) || word != "mvlpt-tensors") fail(origin, "not a tensor bundle");
  if (version != kTensorFormatVersion) fail(origin, "unsupported format version " + std::to_string(version));

  TensorBundle bundle;
  if (!(in >> word) || word != "kind" || !(in >> bundle.kind)) fail(origin, "missing kind");
  while (in >> word) {
    if (word == "end") return bundle;
    if (word == "meta") {
      std::string key;
      std::string value;
      in >> key;
      std::getline(in >> std::ws, value);
      bundle.meta.emplace_back(key, value);
    } else if (word == "tensor") {
      std::string name;
      std::size_t rank = 0;
      if (!(in >> name >> rank) || rank == 0) fail(origin, "bad tensor header");
      Shape shape(rank);
      for (auto& d : shape)
        if (!(in >> d)) fail(origin, "bad shape for tensor " + name);
      std::vector<double> values(shape_size(shape));
      for (auto& v : values) {
        std::string token;
        if (!(in >> token)) fail(origin, "truncated tensor " + name);
        auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), v);
        if (ec != std::errc() || ptr != token.data() + token.size()) fail(origin, "bad value in tensor " + name);
      }
      bundle.tensors.emplace_back(name, Array(std::move(shape), std::move(values)));
    } else {
      fail(origin, "unexpected record '" + word + "'");
    }
  }
  fail(origin, "missing end record");
}

void save_bundle(const std::filesystem::path& path, const TensorBundle& bundle) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp);
    out << serialize(bundle);
  }
  std::filesystem::rename(tmp, path);
}

TensorBundle load_bundle(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize(buf.str(), path.string());
}

}  // namespace mvlpt
