#pragma once

#include <bit>
#include <cstdint>
#include <string>

#include "json.hpp"
#include "sadi/nn/param_store.hpp"
#include "sadi/util.hpp"

namespace sadi::nn {

// Checkpoint format: <base>.json carries the manifest (parameter names,
// shapes, dtype, offsets, plus a free-form "extra" section for model and
// training metadata); <base>.bin is the flat little-endian float64 blob in
// manifest order. Round trips are bit-exact.

namespace detail {

inline void put_f64_le(std::string& out, double x) {
  uint64_t b = std::bit_cast<uint64_t>(x);
  for (int i = 0; i < 8; ++i) {
    out.push_back(char(b & 0xff));
    b >>= 8;
  }
}

inline double get_f64_le(const unsigned char* p) {
  uint64_t b = 0;
  for (int i = 7; i >= 0; --i) b = (b << 8) | p[i];
  return std::bit_cast<double>(b);
}

}  // namespace detail

struct Checkpoint {
  ParamStore params;
  nlohmann::json extra;
  std::string content_hash;
};

inline std::string checkpoint_manifest_path(const std::string& base) { return base + ".json"; }
inline std::string checkpoint_blob_path(const std::string& base) { return base + ".bin"; }

inline std::string save_checkpoint(const std::string& base, const ParamStore& params,
                                   const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json manifest;
  manifest["format"] = "sadi-checkpoint";
  manifest["format_version"] = 1;
  manifest["dtype"] = "float64";
  manifest["byte_order"] = "little-endian";
  manifest["step"] = params.step;
  manifest["extra"] = extra;
  nlohmann::json plist = nlohmann::json::array();
  std::string blob;
  size_t offset = 0;  // in float64 units
  for (const auto& [name, t] : params.entries) {
    plist.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}, {"offset", offset}});
    for (double x : t.value().v) detail::put_f64_le(blob, x);
    offset += t.value().size();
  }
  manifest["params"] = plist;
  const std::string text = manifest.dump(2) + "\n";
  write_file(checkpoint_manifest_path(base), text);
  write_file(checkpoint_blob_path(base), blob);
  return hex64(fnv1a64(blob, fnv1a64(text)));
}

inline Checkpoint load_checkpoint(const std::string& base) {
  const std::string text = read_file(checkpoint_manifest_path(base));
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint manifest parse error (" + checkpoint_manifest_path(base) + "): " + e.what());
  }
  if (manifest.value("format", "") != "sadi-checkpoint") throw DataError("not a checkpoint manifest: " + base);
  if (manifest.value("dtype", "") != "float64") throw DataError("unsupported checkpoint dtype");
  if (manifest.value("byte_order", "") != "little-endian") throw DataError("unsupported checkpoint byte order");

  const std::string blob = read_file(checkpoint_blob_path(base));
  Checkpoint ck;
  ck.params.step = manifest.value("step", int64_t(0));
  ck.extra = manifest.value("extra", nlohmann::json::object());
  ck.content_hash = hex64(fnv1a64(blob, fnv1a64(text)));
  for (const auto& entry : manifest.at("params")) {
    const std::string name = entry.at("name").get<std::string>();
    const int rows = entry.at("rows").get<int>();
    const int cols = entry.at("cols").get<int>();
    const size_t offset = entry.at("offset").get<size_t>();
    const size_t count = size_t(rows) * size_t(cols);
    if ((offset + count) * 8 > blob.size())
      throw DataError("checkpoint blob truncated at parameter '" + name + "'");
    Matrix m(rows, cols);
    const unsigned char* p = reinterpret_cast<const unsigned char*>(blob.data()) + offset * 8;
    for (size_t i = 0; i < count; ++i) m.v[i] = detail::get_f64_le(p + i * 8);
    ck.params.add(name, std::move(m));
  }
  return ck;
}

}  // namespace sadi::nn
