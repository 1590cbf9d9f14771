// Checkpoint files.
//
//   "UNIGEN-CKPT v1 <arch hash, 16 hex digits>\n"
//   "config <n>\n" followed by n bytes of config text
//   u64 entry count
//   per entry: u32 name length, name bytes, u32 rank, u64 extents..., f64 values
//
// Binary integers and floats are little-endian.
#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "unigen/datagen.hpp"
#include "unigen/weavenet.hpp"

namespace unigen {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = char((v >> (8 * i)) & 0xFF);
  os.write(b, 8);
}

inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("unexpected end of file");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

}  // namespace detail

inline void save_checkpoint(std::ostream& os, const Model& model) {
  const RunConfig& cfg = model.config();
  const std::string text = cfg.to_text();
  os << "UNIGEN-CKPT v1 " << hex64(cfg.arch_hash()) << '\n' << "config " << text.size() << '\n' << text;
  const ParamStore& ps = model.params();
  detail::put_u64(os, ps.count());
  for (ParamId id : ps.ids()) {
    const std::string& name = ps.name(id);
    const Tensor& t = ps.value(id);
    detail::put_u32(os, std::uint32_t(name.size()));
    os.write(name.data(), std::streamsize(name.size()));
    detail::put_u32(os, std::uint32_t(t.rank()));
    for (std::size_t e : t.shape()) detail::put_u64(os, e);
    for (double v : t.values()) detail::put_u64(os, std::bit_cast<std::uint64_t>(v));
  }
}

inline void save_checkpoint(const std::filesystem::path& path, const Model& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot write checkpoint " + path.string());
  save_checkpoint(os, model);
  if (!os) throw CheckpointError("I/O error writing checkpoint " + path.string());
}

/// Rebuilds the model from the embedded config and loads every parameter.
/// When `expected` is given its architecture hash must match the file's.
inline Model load_checkpoint(std::istream& is, const RunConfig* expected = nullptr) {
  std::string line;
  if (!std::getline(is, line)) throw CheckpointError("checkpoint: missing header");
  std::istringstream hs(line);
  std::string magic, version, hash;
  hs >> magic >> version >> hash;
  if (magic != "UNIGEN-CKPT" || version != "v1") throw CheckpointError("checkpoint: bad header '" + line + "'");
  std::size_t n = 0;
  if (!std::getline(is, line) || line.rfind("config ", 0) != 0) throw CheckpointError("checkpoint: missing config block");
  n = std::stoul(line.substr(7));
  std::string text(n, '\0');
  if (!is.read(text.data(), std::streamsize(n))) throw CheckpointError("checkpoint: truncated config block");
  RunConfig cfg = RunConfig::parse(text);
  if (hex64(cfg.arch_hash()) != hash) throw CheckpointError("checkpoint: header hash " + hash + " does not match embedded config " + hex64(cfg.arch_hash()));
  if (expected && expected->arch_hash() != cfg.arch_hash())
    throw CheckpointError("checkpoint architecture " + hash + " does not match the requested config " + hex64(expected->arch_hash()));

  Model model(cfg);
  ParamStore& ps = model.params();
  const std::uint64_t count = detail::get_u64(is);
  if (count != ps.count())
    throw CheckpointError("checkpoint: " + std::to_string(count) + " entries, model has " + std::to_string(ps.count()) + " parameters");
  for (std::uint64_t k = 0; k < count; ++k) {
    std::string name(detail::get_u32(is), '\0');
    if (!is.read(name.data(), std::streamsize(name.size()))) throw CheckpointError("checkpoint: truncated entry name");
    const auto id = ps.find(name);
    if (!id) throw CheckpointError("checkpoint: unknown parameter '" + name + "'");
    Shape shape(detail::get_u32(is));
    for (auto& e : shape) e = detail::get_u64(is);
    Tensor& t = ps.value(*id);
    if (shape != t.shape()) throw CheckpointError("checkpoint: parameter '" + name + "' has shape " + shape_str(shape) + ", model expects " + shape_str(t.shape()));
    for (double& v : t.values()) v = std::bit_cast<double>(detail::get_u64(is));
  }
  return model;
}

inline Model load_checkpoint(const std::filesystem::path& path, const RunConfig* expected = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  try {
    return load_checkpoint(is, expected);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  } catch (const std::exception& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

}  // namespace unigen
