#pragma once

// Single-file archive of named arrays plus a JSON header.
//
// Layout: 8-byte magic "ATRNCKP1", uint64 little-endian header length, UTF-8
// JSON header, then the raw tensor payloads back to back. The header carries
// user metadata under "meta" and an index under "tensors" with name, dtype
// ("f32" or "u8"), shape, offset and byte count of every entry (offsets are
// relative to the start of the payload section).

#include <torch/torch.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <string>

#include "attrinet/error.hpp"

namespace attrinet {

inline constexpr char kArchiveMagic[8] = {'A', 'T', 'R', 'N', 'C', 'K', 'P', '1'};

struct Archive {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, torch::Tensor> tensors;  // float32 arrays
  std::map<std::string, std::string> blobs;      // opaque bytes (stored as u8 arrays)

  const torch::Tensor& tensor(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw data_error("MissingEntry", "archive has no array '" + name + "'");
    return it->second;
  }
};

inline void save_archive(const std::filesystem::path& path, const Archive& ar) {
  nlohmann::json index = nlohmann::json::array();
  std::string payload;
  for (const auto& [name, t] : ar.tensors) {
    auto c = t.detach().to(torch::kCPU).to(torch::kFloat32).contiguous();
    size_t nbytes = static_cast<size_t>(c.numel()) * sizeof(float);
    index.push_back({{"name", name}, {"dtype", "f32"}, {"shape", c.sizes().vec()}, {"offset", payload.size()},
                     {"nbytes", nbytes}});
    payload.append(reinterpret_cast<const char*>(c.data_ptr<float>()), nbytes);
  }
  for (const auto& [name, bytes] : ar.blobs) {
    index.push_back({{"name", name},
                     {"dtype", "u8"},
                     {"shape", {static_cast<int64_t>(bytes.size())}},
                     {"offset", payload.size()},
                     {"nbytes", bytes.size()}});
    payload.append(bytes);
  }
  nlohmann::json header{{"meta", ar.meta}, {"tensors", index}};
  std::string h = header.dump();

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw data_error("IOError", "cannot write " + tmp.string());
    out.write(kArchiveMagic, 8);
    std::uint64_t len = h.size();
    for (int i = 0; i < 8; ++i) out.put(static_cast<char>((len >> (8 * i)) & 0xff));
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw data_error("IOError", "short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Archive load_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("IOError", "cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kArchiveMagic, 8) != 0)
    throw data_error("BadCheckpoint", path.string() + " is not a checkpoint archive");
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(in.get())) << (8 * i);
  std::string h(len, '\0');
  in.read(h.data(), static_cast<std::streamsize>(len));
  auto header = nlohmann::json::parse(h);
  std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  Archive ar;
  ar.meta = header.at("meta");
  for (const auto& e : header.at("tensors")) {
    auto name = e.at("name").get<std::string>();
    auto off = e.at("offset").get<size_t>();
    auto nbytes = e.at("nbytes").get<size_t>();
    if (off + nbytes > payload.size()) throw data_error("BadCheckpoint", "entry '" + name + "' is truncated");
    if (e.at("dtype") == "u8") {
      ar.blobs[name] = payload.substr(off, nbytes);
      continue;
    }
    auto shape = e.at("shape").get<std::vector<int64_t>>();
    auto t = torch::empty(shape, torch::kFloat32);
    if (static_cast<size_t>(t.numel()) * sizeof(float) != nbytes)
      throw data_error("BadCheckpoint", "entry '" + name + "' has inconsistent size");
    std::memcpy(t.data_ptr<float>(), payload.data() + off, nbytes);
    ar.tensors[name] = t;
  }
  return ar;
}

/// Stores every named parameter of `module` under `prefix/`.
inline void put_module(Archive& ar, const std::string& prefix, const torch::nn::Module& module) {
  for (const auto& p : module.named_parameters(true)) ar.tensors[prefix + "/" + p.key()] = p.value().detach().clone();
}

/// Copies `prefix/<name>` entries back into the module's parameters; every parameter must be present.
inline void get_module(const Archive& ar, const std::string& prefix, torch::nn::Module& module) {
  torch::NoGradGuard no_grad;
  for (auto& p : module.named_parameters(true)) {
    const auto& src = ar.tensor(prefix + "/" + p.key());
    if (src.sizes() != p.value().sizes())
      throw data_error("ShapeMismatch", "checkpoint entry " + prefix + "/" + p.key() + " has the wrong shape");
    p.value().copy_(src.to(p.value().dtype()));
  }
}

}  // namespace attrinet
