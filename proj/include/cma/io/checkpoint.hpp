#pragma once

// Checkpoints: a JSON metadata header (config echo, step count, seed)
// followed by a flat name -> array map of raw float64 buffers. Round-trips
// bit-exactly.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cma/core/common.hpp"
#include "cma/core/tensor.hpp"

namespace cma::io {

constexpr char kCkptMagic[8] = {'C', 'M', 'A', 'F', 'C', 'K', 'P', 'T'};
constexpr uint32_t kCkptVersion = 1;

struct Checkpoint {
  nlohmann::json meta;
  std::vector<std::pair<std::string, Tensor>> arrays;

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : arrays)
      if (n == name) return &t;
    return nullptr;
  }
};

namespace detail {

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  CMA_CHECK(in.good(), IoError, "truncated checkpoint");
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const nlohmann::json& meta,
                            const std::vector<std::pair<std::string, Tensor*>>& arrays) {
  std::ofstream out(path, std::ios::binary);
  CMA_CHECK(out.good(), IoError, "cannot write checkpoint to " << path);
  out.write(kCkptMagic, sizeof(kCkptMagic));
  detail::write_pod(out, kCkptVersion);
  const std::string meta_str = meta.dump();
  detail::write_pod(out, static_cast<uint64_t>(meta_str.size()));
  out.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
  detail::write_pod(out, static_cast<uint64_t>(arrays.size()));
  for (const auto& [name, t] : arrays) {
    detail::write_pod(out, static_cast<uint64_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod(out, static_cast<uint32_t>(t->ndim()));
    for (int64_t d : t->shape()) detail::write_pod(out, d);
    out.write(reinterpret_cast<const char*>(t->data()),
              static_cast<std::streamsize>(t->numel() * static_cast<int64_t>(sizeof(real))));
  }
  CMA_CHECK(out.good(), IoError, "short write while saving checkpoint " << path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  CMA_CHECK(in.good(), IoError, "cannot open checkpoint " << path);
  char magic[8];
  in.read(magic, sizeof(magic));
  CMA_CHECK(in.good() && std::memcmp(magic, kCkptMagic, sizeof(magic)) == 0, DataError,
            path << " is not a checkpoint file");
  const auto version = detail::read_pod<uint32_t>(in);
  CMA_CHECK(version == kCkptVersion, DataError, "unsupported checkpoint version " << version);
  const auto meta_len = detail::read_pod<uint64_t>(in);
  std::string meta_str(meta_len, '\0');
  in.read(meta_str.data(), static_cast<std::streamsize>(meta_len));
  Checkpoint ckpt;
  try {
    ckpt.meta = nlohmann::json::parse(meta_str);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed checkpoint metadata: " + std::string(e.what()));
  }
  const auto count = detail::read_pod<uint64_t>(in);
  ckpt.arrays.reserve(count);
  for (uint64_t i = 0; i < count; ++i) {
    const auto name_len = detail::read_pod<uint64_t>(in);
    std::string name(name_len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(name_len));
    const auto ndim = detail::read_pod<uint32_t>(in);
    Shape shape(ndim);
    for (auto& d : shape) d = detail::read_pod<int64_t>(in);
    Tensor t = Tensor::zeros(shape);
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * static_cast<int64_t>(sizeof(real))));
    CMA_CHECK(in.good(), IoError, "truncated checkpoint array " << name);
    ckpt.arrays.emplace_back(std::move(name), std::move(t));
  }
  return ckpt;
}

// Copies checkpoint arrays into live tensors by name; every target must be
// present with a matching shape.
inline void restore_state(const Checkpoint& ckpt, const std::string& prefix,
                          const std::vector<std::pair<std::string, Tensor*>>& state) {
  for (auto& [name, t] : state) {
    const Tensor* src = ckpt.find(prefix + name);
    CMA_CHECK(src != nullptr, DataError, "checkpoint missing array " << prefix + name);
    CMA_CHECK(src->shape() == t->shape(), DataError,
              "checkpoint array " << prefix + name << " has shape " << shape_str(src->shape())
                                  << ", expected " << shape_str(t->shape()));
    std::copy_n(src->data(), src->numel(), t->data());
  }
}

}  // namespace cma::io
