#include "nif/serialize.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace nif {

namespace {
constexpr char kMagic[8] = {'N', 'I', 'F', 'D', 'C', 'K', 'P', 'T'};
}

std::map<std::string, Tensor> Checkpoint::with_prefix(const std::string& prefix) const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, t] : tensors)
    if (name.compare(0, prefix.size(), prefix) == 0) out.emplace(name.substr(prefix.size()), t);
  return out;
}

void Checkpoint::put_all(const std::string& prefix, const std::map<std::string, Tensor>& values) {
  for (const auto& [name, t] : values) tensors[prefix + name] = t;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json header;
  header["meta"] = ckpt.meta;
  header["tensors"] = nlohmann::json::array();
  int64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    header["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.numel();
  }
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out.write(kMagic, sizeof(kMagic));
    const uint32_t version = kCheckpointFormatVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : ckpt.tensors)
      out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!out) throw std::runtime_error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error(path.string() + " is not a checkpoint file");
  }
  uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (version != kCheckpointFormatVersion) {
    throw std::runtime_error("unsupported checkpoint format version " + std::to_string(version) + " in " +
                             path.string());
  }
  uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error("truncated checkpoint header in " + path.string());
  const auto header = nlohmann::json::parse(text);

  Checkpoint ckpt;
  ckpt.meta = header.at("meta");
  const auto base = in.tellg();
  for (const auto& entry : header.at("tensors")) {
    Shape shape = entry.at("shape").get<Shape>();
    Tensor t(shape);
    const int64_t off = entry.at("offset").get<int64_t>();
    in.seekg(base + static_cast<std::streamoff>(off * static_cast<int64_t>(sizeof(double))));
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!in) throw std::runtime_error("truncated tensor data in " + path.string());
    ckpt.tensors.emplace(entry.at("name").get<std::string>(), std::move(t));
  }
  return ckpt;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << text;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace nif
