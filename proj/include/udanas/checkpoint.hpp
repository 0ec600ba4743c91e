#pragma once

// Weight checkpoints: <stem>.bin holds the raw little-endian arrays back to
// back, <stem>.json indexes them by name, shape, dtype and byte offset.

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "udanas/supernet.hpp"

namespace udanas::nn {

template <typename Scalar>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<Scalar, float>)
    return "float32";
  else
    return "float64";
}

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& stem, const std::vector<NamedTensor<Scalar>>& params,
                     const nlohmann::json& meta = nlohmann::json::object()) {
  const auto bin_path = std::filesystem::path(stem).concat(".bin");
  std::ofstream bin(bin_path, std::ios::binary | std::ios::trunc);
  if (!bin) throw Error("cannot write " + bin_path.string());
  nlohmann::json index = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& p : params) {
    const std::size_t bytes = static_cast<std::size_t>(p.tensor.size()) * sizeof(Scalar);
    bin.write(reinterpret_cast<const char*>(p.tensor.data()), static_cast<std::streamsize>(bytes));
    index.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"offset", offset}, {"bytes", bytes}});
    offset += bytes;
  }
  if (!bin) throw Error("failed writing " + bin_path.string());
  const nlohmann::json doc{{"dtype", dtype_name<Scalar>()},
                           {"binary", bin_path.filename().string()},
                           {"tensors", index},
                           {"meta", meta}};
  std::ofstream(std::filesystem::path(stem).concat(".json")) << doc.dump(2) << '\n';
}

/// Reads the JSON index of a checkpoint.
inline nlohmann::json read_checkpoint_index(const std::filesystem::path& stem) {
  const auto json_path = std::filesystem::path(stem).concat(".json");
  std::ifstream in(json_path);
  if (!in) throw Error("cannot read " + json_path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed checkpoint index " + json_path.string() + ": " + e.what());
  }
}

/// Overwrites the values of `params` in place; names, order, shapes and dtype must match.
template <typename Scalar>
void load_checkpoint(const std::filesystem::path& stem, const std::vector<NamedTensor<Scalar>>& params) {
  const auto doc = read_checkpoint_index(stem);
  if (doc.at("dtype").get<std::string>() != dtype_name<Scalar>()) throw ShapeError("checkpoint dtype mismatch");
  const auto& index = doc.at("tensors");
  if (index.size() != params.size()) throw ShapeError("checkpoint holds a different number of tensors");
  std::ifstream bin(std::filesystem::path(stem).parent_path() / doc.at("binary").get<std::string>(),
                    std::ios::binary);
  if (!bin) throw Error("cannot read checkpoint binary for " + stem.string());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& entry = index[i];
    const auto& p = params[i];
    if (entry.at("name").get<std::string>() != p.name || entry.at("shape").get<Shape>() != p.tensor.shape()) {
      throw ShapeError("checkpoint entry " + entry.at("name").get<std::string>() + " does not match " + p.name);
    }
    bin.seekg(static_cast<std::streamoff>(entry.at("offset").get<std::size_t>()));
    bin.read(reinterpret_cast<char*>(p.tensor.mutable_value().data()),
             static_cast<std::streamsize>(p.tensor.size() * static_cast<Index>(sizeof(Scalar))));
    if (!bin) throw Error("truncated checkpoint binary");
  }
}

}  // namespace udanas::nn
