#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "oommix/corpus.hpp"
#include "oommix/io.hpp"
#include "oommix/oommix.hpp"

namespace oommix {

// Layout: uint64 little-endian header length, JSON header, then the raw
// little-endian parameter buffers at the offsets the header lists (relative
// to the first byte after the header).

namespace detail {

template <typename U>
void put_le(std::string& out, U v) {
  unsigned char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
  out.append(reinterpret_cast<const char*>(b), sizeof(U));
}

template <typename U>
U get_le(const char* p) {
  unsigned char b[sizeof(U)];
  std::memcpy(b, p, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
  U v;
  std::memcpy(&v, b, sizeof(U));
  return v;
}

template <typename T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

}  // namespace detail

inline nlohmann::json to_json(const ModelConfig& mc) {
  const auto& e = mc.encoder;
  return {{"layers", e.layers},     {"dim", e.dim},
          {"heads", e.heads},       {"max_len", e.max_len},
          {"vocab", e.vocab},       {"classes", e.classes},
          {"dropout", e.dropout},   {"ffn_mult", e.ffn_mult},
          {"m_g", mc.m_g},          {"m_d", mc.m_d},
          {"head_hidden", mc.head_hidden},
          {"ld_reduction", mc.ld_reduction == LdReduction::Sum ? "sum" : "mean"}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig mc;
  auto& e = mc.encoder;
  e.layers = j.at("layers");
  e.dim = j.at("dim");
  e.heads = j.at("heads");
  e.max_len = j.at("max_len");
  e.vocab = j.at("vocab");
  e.classes = j.at("classes");
  e.dropout = j.at("dropout");
  e.ffn_mult = j.at("ffn_mult");
  mc.m_g = j.at("m_g");
  mc.m_d = j.at("m_d");
  mc.head_hidden = j.at("head_hidden");
  mc.ld_reduction = j.at("ld_reduction") == "sum" ? LdReduction::Sum : LdReduction::Mean;
  return mc;
}

template <typename T>
std::string serialize_checkpoint(const Model<T>& model, const Vocabulary& vocab,
                                 const std::map<std::string, std::string>& settings) {
  nlohmann::json header;
  header["format"] = "oommix-checkpoint";
  header["version"] = 1;
  header["model"] = to_json(model.config());
  header["settings"] = settings;
  header["vocab"] = vocab.tokens();
  nlohmann::json params = nlohmann::json::array();
  std::string body;
  const auto& store = model.params();
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& p = store[i];
    params.push_back({{"name", p.name},
                      {"group", std::string(group_name(p.group))},
                      {"shape", p.value.shape},
                      {"dtype", detail::dtype_name<T>()},
                      {"offset", body.size()},
                      {"bytes", p.value.size() * sizeof(T)}});
    for (T v : p.value.data) detail::put_le(body, v);
  }
  header["params"] = std::move(params);
  const std::string text = header.dump();
  std::string out;
  detail::put_le<std::uint64_t>(out, text.size());
  out += text;
  out += body;
  return out;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model,
                     const Vocabulary& vocab,
                     const std::map<std::string, std::string>& settings = {}) {
  atomic_write(path, serialize_checkpoint(model, vocab, settings));
}

template <typename T>
struct LoadedCheckpoint {
  Model<T> model;
  Vocabulary vocab;
  std::map<std::string, std::string> settings;
};

template <typename T>
LoadedCheckpoint<T> deserialize_checkpoint(const std::string& bytes) {
  auto fail = [](const std::string& m) { throw std::runtime_error("checkpoint: " + m); };
  if (bytes.size() < 8) fail("truncated file");
  const auto hlen = detail::get_le<std::uint64_t>(bytes.data());
  if (hlen > bytes.size() - 8) fail("header length exceeds file size");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 8,
                                   bytes.begin() + 8 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("bad header: ") + e.what());
  }
  if (header.value("format", "") != "oommix-checkpoint") fail("not an oommix checkpoint");
  const ModelConfig mc = model_config_from_json(header.at("model"));
  Model<T> model(mc, 0, true);
  const char* body = bytes.data() + 8 + hlen;
  const std::size_t body_size = bytes.size() - 8 - hlen;
  std::size_t seen = 0;
  for (const auto& pj : header.at("params")) {
    const std::string name = pj.at("name");
    auto* p = model.params().find(name);
    if (!p) fail("unknown parameter " + name);
    if (pj.at("shape").get<Shape>() != p->value.shape) fail("shape mismatch for " + name);
    const std::string dtype = pj.at("dtype");
    const std::size_t off = pj.at("offset"), n = p->value.size();
    const std::size_t width = dtype == "f32" ? 4 : dtype == "f64" ? 8 : 0;
    if (!width) fail("unsupported dtype " + dtype);
    if (off > body_size || n * width > body_size - off) fail("buffer overrun for " + name);
    for (std::size_t i = 0; i < n; ++i) {
      const char* at = body + off + i * width;
      p->value.data[i] = width == 4 ? static_cast<T>(detail::get_le<float>(at))
                                    : static_cast<T>(detail::get_le<double>(at));
    }
    ++seen;
  }
  if (seen != model.params().size()) fail("missing parameters");
  return {std::move(model), Vocabulary(header.at("vocab").get<std::vector<std::string>>()),
          header.value("settings", std::map<std::string, std::string>{})};
}

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint<T>(read_file(path));
}

}  // namespace oommix
