#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "carso/params.hpp"
#include "carso/tensor.hpp"

// Versioned checkpoint container: fixed magic, a UTF-8 JSON header describing
// every tensor (name, shape, dtype) plus free-form metadata, then the raw
// little-endian payloads in header order. Loading then saving again is
// bitwise idempotent.

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian");

namespace carso::ckpt {

constexpr char kMagic[8] = {'C', 'A', 'R', 'S', 'O', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) return "f32";
  else if constexpr (std::is_same_v<T, double>) return "f64";
  else static_assert(sizeof(T) == 0, "unsupported checkpoint dtype");
}

template <typename T>
struct Checkpoint {
  nlohmann::json meta;
  std::vector<std::pair<std::string, TensorData<T>>> tensors;

  const TensorData<T>& tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
  }
  bool has_tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return true;
    return false;
  }
};

template <typename T>
void save(const std::string& path, const Checkpoint<T>& c) {
  nlohmann::json header;
  header["version"] = kVersion;
  header["dtype"] = dtype_name<T>();
  header["meta"] = c.meta;
  header["tensors"] = nlohmann::json::array();
  for (const auto& [name, t] : c.tensors)
    header["tensors"].push_back({{"name", name}, {"shape", t.shape}});
  const std::string hs = header.dump();

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("checkpoint: cannot write '" + path + "'");
  f.write(kMagic, 8);
  std::uint32_t ver = kVersion;
  std::uint64_t hlen = hs.size();
  f.write(reinterpret_cast<const char*>(&ver), 4);
  f.write(reinterpret_cast<const char*>(&hlen), 8);
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& [name, t] : c.tensors)
    f.write(reinterpret_cast<const char*>(t.v.data()),
            static_cast<std::streamsize>(t.v.size() * sizeof(T)));
  if (!f) throw std::runtime_error("checkpoint: short write to '" + path + "'");
}

template <typename T>
Checkpoint<T> load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("checkpoint: '" + path + "' has a bad magic");
  std::uint32_t ver = 0;
  std::uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&ver), 4);
  f.read(reinterpret_cast<char*>(&hlen), 8);
  if (!f || ver != kVersion)
    throw std::runtime_error("checkpoint: '" + path + "' has unsupported version " +
                             std::to_string(ver));
  std::string hs(hlen, '\0');
  f.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!f) throw std::runtime_error("checkpoint: '" + path + "' truncated header");
  nlohmann::json header = nlohmann::json::parse(hs);
  if (header.at("dtype") != dtype_name<T>())
    throw std::runtime_error("checkpoint: dtype mismatch, file holds " +
                             header.at("dtype").get<std::string>());
  Checkpoint<T> c;
  c.meta = header.at("meta");
  for (const auto& tj : header.at("tensors")) {
    TensorData<T> t(tj.at("shape").get<Shape>());
    f.read(reinterpret_cast<char*>(t.v.data()),
           static_cast<std::streamsize>(t.v.size() * sizeof(T)));
    if (!f)
      throw std::runtime_error("checkpoint: '" + path + "' truncated payload for '" +
                               tj.at("name").get<std::string>() + "'");
    c.tensors.emplace_back(tj.at("name").get<std::string>(), std::move(t));
  }
  return c;
}

// ---- ParamStore round trips ----

template <typename T>
void append_store(Checkpoint<T>& c, const ParamStore<T>& store) {
  for (const auto& [name, p] : store.params())
    c.tensors.emplace_back("param:" + name, TensorData<T>(p.shape(), p.value()));
  for (const auto& [name, b] : store.buffers())
    c.tensors.emplace_back("buffer:" + name, TensorData<T>(b.shape(), b.value()));
}

template <typename T>
void restore_store(const Checkpoint<T>& c, ParamStore<T>& store) {
  for (auto& [name, p] : store.params()) {
    const auto& t = c.tensor("param:" + name);
    check_shape(t.shape == p.shape(), "restore_store", t.shape, p.shape());
    p.value() = t.v;
  }
  for (auto& [name, b] : store.buffers()) {
    const auto& t = c.tensor("buffer:" + name);
    check_shape(t.shape == b.shape(), "restore_store", t.shape, b.shape());
    b.value() = t.v;
  }
}

}  // namespace carso::ckpt
