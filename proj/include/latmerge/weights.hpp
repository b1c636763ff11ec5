#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"
#include "latmerge/io.hpp"
#include "latmerge/tensor.hpp"

namespace latmerge {

static_assert(std::endian::native == std::endian::little,
              "weight container I/O assumes a little-endian host");

// Named tensors; std::map gives the lexicographic iteration order that every
// RNG-consuming pass relies on.
struct WeightMap {
  std::map<std::string, Tensor> entries;
  std::map<std::string, std::string> metadata;

  const Tensor& at(const std::string& name) const {
    auto it = entries.find(name);
    if (it == entries.end()) fail(ErrorKind::compatibility, "missing tensor '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return entries.count(name) != 0; }

  friend bool operator==(const WeightMap&, const WeightMap&) = default;
};

// Throws a compatibility error naming the first differing tensor.
inline void check_compatible(const WeightMap& a, const WeightMap& b) {
  auto ia = a.entries.begin();
  auto ib = b.entries.begin();
  while (ia != a.entries.end() || ib != b.entries.end()) {
    if (ib == b.entries.end() || (ia != a.entries.end() && ia->first < ib->first))
      fail(ErrorKind::compatibility, "tensor '" + ia->first + "' missing from second map");
    if (ia == a.entries.end() || ib->first < ia->first)
      fail(ErrorKind::compatibility, "tensor '" + ib->first + "' missing from first map");
    if (ia->second.shape() != ib->second.shape())
      fail(ErrorKind::compatibility, "tensor '" + ia->first + "' shape " +
                                         shape_str(ia->second.shape()) + " vs " +
                                         shape_str(ib->second.shape()));
    ++ia;
    ++ib;
  }
}

inline bool compatible(const WeightMap& a, const WeightMap& b) {
  try {
    check_compatible(a, b);
    return true;
  } catch (const Error&) {
    return false;
  }
}

enum class BinaryOp { add, sub };

inline WeightMap map_binary(const WeightMap& a, const WeightMap& b, BinaryOp op) {
  check_compatible(a, b);
  WeightMap out;
  out.metadata = a.metadata;
  for (const auto& [name, ta] : a.entries) {
    const Tensor& tb = b.entries.at(name);
    out.entries.emplace(name, op == BinaryOp::add ? ta + tb : ta - tb);
  }
  return out;
}

inline WeightMap add(const WeightMap& a, const WeightMap& b) { return map_binary(a, b, BinaryOp::add); }
inline WeightMap sub(const WeightMap& a, const WeightMap& b) { return map_binary(a, b, BinaryOp::sub); }

inline WeightMap scale(const WeightMap& a, double c) {
  WeightMap out;
  out.metadata = a.metadata;
  for (const auto& [name, t] : a.entries) out.entries.emplace(name, c * t);
  return out;
}

inline WeightMap zeros_like(const WeightMap& a) { return scale(a, 0.0); }

// --- container format -----------------------------------------------------
// u64 LE header length N, N bytes of JSON, then raw F32 LE data.

inline Bytes serialize_weights(const WeightMap& map) {
  nlohmann::json header = nlohmann::json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : map.entries) {
    if (!t.all_finite()) fail(ErrorKind::numeric, "tensor '" + name + "' holds non-finite values");
    const std::uint64_t len = 4ull * t.numel();
    header[name] = {{"dtype", "F32"}, {"shape", t.shape()}, {"data_offsets", {offset, offset + len}}};
    offset += len;
  }
  if (!map.metadata.empty()) header["__metadata__"] = map.metadata;
  std::string text = header.dump();
  while (text.size() % 8 != 0) text.push_back(' ');

  Bytes out(8 + text.size() + offset);
  const std::uint64_t n = text.size();
  std::memcpy(out.data(), &n, 8);
  std::memcpy(out.data() + 8, text.data(), text.size());
  unsigned char* cursor = out.data() + 8 + text.size();
  for (const auto& [name, t] : map.entries) {
    std::memcpy(cursor, t.data().data(), 4 * t.numel());
    cursor += 4 * t.numel();
  }
  return out;
}

inline WeightMap parse_weights(const Bytes& bytes, const std::string& origin = "<memory>") {
  using nlohmann::json;
  if (bytes.size() < 8) fail(ErrorKind::validation, origin + ": file shorter than the 8-byte header length");
  std::uint64_t n = 0;
  std::memcpy(&n, bytes.data(), 8);
  if (n > bytes.size() - 8)
    fail(ErrorKind::validation, origin + ": header length " + std::to_string(n) + " exceeds file size");
  json header;
  try {
    header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(n));
  } catch (const json::exception& e) {
    fail(ErrorKind::validation, origin + ": malformed header JSON: " + e.what());
  }
  if (!header.is_object()) fail(ErrorKind::validation, origin + ": header is not a JSON object");

  const std::uint64_t data_len = bytes.size() - 8 - n;
  const unsigned char* data = bytes.data() + 8 + n;
  WeightMap out;
  std::vector<std::tuple<std::uint64_t, std::uint64_t, std::string>> spans;

  for (const auto& [name, entry] : header.items()) {
    if (name == "__metadata__") {
      if (!entry.is_object()) fail(ErrorKind::validation, origin + ": __metadata__ is not an object");
      for (const auto& [k, v] : entry.items()) {
        if (!v.is_string()) fail(ErrorKind::validation, origin + ": metadata '" + k + "' is not a string");
        out.metadata[k] = v.get<std::string>();
      }
      continue;
    }
    const std::string where = origin + ": tensor '" + name + "'";
    if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") ||
        !entry.contains("data_offsets"))
      fail(ErrorKind::validation, where + ": entry needs dtype, shape and data_offsets");
    if (!entry["dtype"].is_string() || entry["dtype"] != "F32")
      fail(ErrorKind::validation, where + ": unsupported dtype " + entry["dtype"].dump());
    const json& js = entry["shape"];
    const json& jo = entry["data_offsets"];
    if (!js.is_array() || js.empty() || js.size() > 2)
      fail(ErrorKind::validation, where + ": shape must list 1 or 2 dimensions");
    Shape shape;
    for (const auto& d : js) {
      if (!d.is_number_unsigned()) fail(ErrorKind::validation, where + ": bad dimension " + d.dump());
      shape.push_back(d.get<std::size_t>());
    }
    if (!jo.is_array() || jo.size() != 2 || !jo[0].is_number_unsigned() || !jo[1].is_number_unsigned())
      fail(ErrorKind::validation, where + ": data_offsets must be two unsigned integers");
    const auto begin = jo[0].get<std::uint64_t>();
    const auto end = jo[1].get<std::uint64_t>();
    if (end < begin) fail(ErrorKind::validation, where + ": data_offsets end before begin");
    if (end - begin != 4ull * shape_numel(shape))
      fail(ErrorKind::validation, where + ": byte span " + std::to_string(end - begin) +
                                      " does not match shape " + shape_str(shape));
    if (end > data_len)
      fail(ErrorKind::validation, where + ": data_offsets [" + std::to_string(begin) + "," +
                                      std::to_string(end) + "] exceed data region of " +
                                      std::to_string(data_len) + " bytes (truncated)");
    spans.emplace_back(begin, end, name);
    std::vector<float> values(shape_numel(shape));
    std::memcpy(values.data(), data + begin, end - begin);
    Tensor t(shape, std::move(values));
    if (!t.all_finite()) fail(ErrorKind::numeric, where + ": non-finite values");
    out.entries.emplace(name, std::move(t));
  }

  std::sort(spans.begin(), spans.end());
  for (std::size_t i = 1; i < spans.size(); ++i) {
    const auto& [pb, pe, pn] = spans[i - 1];
    const auto& [cb, ce, cn] = spans[i];
    if (cb < pe && ce > cb && pe > pb)
      fail(ErrorKind::validation,
           origin + ": tensor '" + cn + "' overlaps tensor '" + pn + "' in the data region");
  }
  return out;
}

inline WeightMap load_weights(const std::filesystem::path& path) {
  return parse_weights(read_file(path), path.string());
}

inline void save_weights(const WeightMap& map, const std::filesystem::path& path) {
  atomic_write(path, serialize_weights(map));
}

}  // namespace latmerge
