#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cspec/errors.hpp"
#include "cspec/tensor.hpp"

namespace cspec {

// Binary container for a named-parameter map: magic, json header (names,
// shapes, dtype, offsets plus a caller-supplied manifest), then raw
// little-endian data. Round-trips bit-exactly.
inline constexpr uint32_t kParamMagic = 0x4b505343;  // "CSPK"

template <typename T>
struct NamedTensors {
  std::vector<std::pair<std::string, Tensor<T>>> items;
};

template <typename T>
const char* dtype_name() {
  if constexpr (sizeof(T) == 4) return "f32";
  else return "f64";
}

template <typename T>
void write_param_file(const std::string& path, const nlohmann::json& manifest,
                      const NamedTensors<T>& params) {
  nlohmann::json header;
  header["manifest"] = manifest;
  header["dtype"] = dtype_name<T>();
  uint64_t offset = 0;
  for (const auto& [name, t] : params.items) {
    header["params"].push_back(
        {{"name", name}, {"shape", t.shape}, {"offset", offset}});
    offset += t.numel() * sizeof(T);
  }
  if (params.items.empty()) header["params"] = nlohmann::json::array();
  std::string hs = header.dump();

  // atomic: write temp then rename
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + tmp);
    uint32_t magic = kParamMagic;
    uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&magic), 4);
    f.write(reinterpret_cast<const char*>(&hlen), 8);
    f.write(hs.data(), std::streamsize(hs.size()));
    for (const auto& [name, t] : params.items)
      f.write(reinterpret_cast<const char*>(t.data.data()),
              std::streamsize(t.numel() * sizeof(T)));
    if (!f) throw IoError("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
NamedTensors<T> read_param_file(const std::string& path, nlohmann::json* manifest_out) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path);
  uint32_t magic = 0;
  uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&magic), 4);
  f.read(reinterpret_cast<char*>(&hlen), 8);
  if (!f || magic != kParamMagic) throw IoError("bad parameter file: " + path);
  std::string hs(hlen, '\0');
  f.read(hs.data(), std::streamsize(hlen));
  nlohmann::json header = nlohmann::json::parse(hs);
  if (header.at("dtype").get<std::string>() != dtype_name<T>())
    throw IoError("dtype mismatch in " + path + " (have " +
                  header.at("dtype").get<std::string>() + ", want " +
                  dtype_name<T>() + ")");
  if (manifest_out) *manifest_out = header.at("manifest");
  NamedTensors<T> out;
  for (const auto& p : header.at("params")) {
    Tensor<T> t(p.at("shape").get<std::vector<int>>());
    f.read(reinterpret_cast<char*>(t.data.data()),
           std::streamsize(t.numel() * sizeof(T)));
    out.items.push_back({p.at("name").get<std::string>(), std::move(t)});
  }
  if (!f) throw IoError("truncated parameter file: " + path);
  return out;
}

}  // namespace cspec
