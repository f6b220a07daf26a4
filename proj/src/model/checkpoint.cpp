#include "nup/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include <zlib.h>

#include "nup/generator_fpn.hpp"

static_assert(std::endian::native == std::endian::little, "raw tensor bytes are written in host order");

namespace nup::ckpt {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'N', 'U', 'P', 'C', 'K', 'P', 'T', '\0'};
constexpr size_t kPrefix = 8 + 4 + 4 + 8;

const std::map<torch::ScalarType, std::string>& dtype_names() {
  static const std::map<torch::ScalarType, std::string> m{{torch::kFloat, "f32"}, {torch::kDouble, "f64"},
                                                          {torch::kLong, "i64"},  {torch::kInt, "i32"},
                                                          {torch::kByte, "u8"},   {torch::kBool, "bool"}};
  return m;
}

torch::ScalarType dtype_from(const std::string& s) {
  for (const auto& [t, n] : dtype_names())
    if (n == s) return t;
  throw FormatError("unsupported dtype '" + s + "'");
}

template <typename T>
void put(std::string& buf, T v) {
  buf.append(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(const std::string& buf, size_t at) {
  T v;
  std::memcpy(&v, buf.data() + at, sizeof v);
  return v;
}

}  // namespace

const torch::Tensor* Archive::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

std::vector<std::string> Archive::names() const {
  std::vector<std::string> out;
  for (const auto& e : tensors) out.push_back(e.first);
  return out;
}

void Archive::add(const std::string& name, const torch::Tensor& t) {
  if (find(name)) throw std::invalid_argument("duplicate tensor name '" + name + "'");
  tensors.emplace_back(name, t.detach().to(torch::kCPU).contiguous().clone());
}

void write_archive(const fs::path& path, const Archive& a, std::uint32_t major) {
  json entries = json::array();
  std::string data;
  for (const auto& [name, t] : a.tensors) {
    const auto it = dtype_names().find(t.scalar_type());
    if (it == dtype_names().end()) throw FormatError("tensor '" + name + "' has an unsupported dtype");
    const auto c = t.contiguous();
    const size_t nbytes = c.numel() * c.element_size();
    entries.push_back({{"name", name}, {"dtype", it->second}, {"shape", c.sizes().vec()}, {"offset", data.size()}, {"nbytes", nbytes}});
    data.append(static_cast<const char*>(c.data_ptr()), nbytes);
  }
  const std::string header = json{{"meta", a.meta}, {"tensors", entries}}.dump();
  std::string buf(kMagic, sizeof kMagic);
  put<std::uint32_t>(buf, major);
  put<std::uint32_t>(buf, kFormatMinor);
  put<std::uint64_t>(buf, header.size());
  buf += header;
  buf += data;
  const auto crc = static_cast<std::uint32_t>(
      crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size())));
  put<std::uint32_t>(buf, crc);

  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw std::runtime_error("write failed for checkpoint " + tmp.string());
  }
  fs::rename(tmp, path);
}

Archive read_archive(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < sizeof kMagic || std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0)
    throw FormatError(path.string() + " is not a checkpoint archive");
  if (buf.size() >= 12) {
    const auto major = get<std::uint32_t>(buf, 8);
    if (major > kFormatMajor)
      throw VersionError(path.string() + ": format version " + std::to_string(major) + " is newer than supported " +
                         std::to_string(kFormatMajor));
  }
  if (buf.size() < kPrefix + 4) throw ChecksumError(path.string() + ": truncated");
  const auto stored = get<std::uint32_t>(buf, buf.size() - 4);
  const auto crc = static_cast<std::uint32_t>(
      crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size() - 4)));
  if (crc != stored) throw ChecksumError(path.string() + ": checksum mismatch (truncated or corrupt)");

  const auto header_len = get<std::uint64_t>(buf, 16);
  if (kPrefix + header_len > buf.size() - 4) throw FormatError(path.string() + ": header overruns file");
  Archive a;
  json header;
  try {
    header = json::parse(buf.substr(kPrefix, header_len));
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": bad header: " + e.what());
  }
  a.meta = header.value("meta", json::object());
  const size_t data0 = kPrefix + header_len, data_len = buf.size() - 4 - data0;
  for (const auto& e : header.at("tensors")) {
    const auto shape = e.at("shape").get<std::vector<int64_t>>();
    const auto offset = e.at("offset").get<size_t>(), nbytes = e.at("nbytes").get<size_t>();
    if (offset + nbytes > data_len) throw FormatError(path.string() + ": tensor data overruns file");
    auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype_from(e.at("dtype").get<std::string>())));
    if (static_cast<size_t>(t.numel() * t.element_size()) != nbytes)
      throw FormatError(path.string() + ": size mismatch for " + e.at("name").get<std::string>());
    std::memcpy(t.data_ptr(), buf.data() + data0 + offset, nbytes);
    a.tensors.emplace_back(e.at("name").get<std::string>(), std::move(t));
  }
  return a;
}

void add_module(Archive& archive, const std::string& prefix, const torch::nn::Module& module) {
  for (const auto& p : module.named_parameters()) archive.add(prefix + "." + p.key(), p.value());
  for (const auto& b : module.named_buffers()) archive.add(prefix + "." + b.key(), b.value());
}

void load_module(const Archive& archive, const std::string& prefix, torch::nn::Module& module) {
  torch::NoGradGuard ng;
  auto copy = [&](const std::string& key, torch::Tensor& dst) {
    const auto* src = archive.find(prefix + "." + key);
    if (!src) throw FormatError("archive lacks '" + prefix + "." + key + "'");
    if (src->sizes() != dst.sizes())
      throw FormatError("shape mismatch for '" + prefix + "." + key + "'");
    dst.copy_(*src);
  };
  for (auto& p : module.named_parameters()) copy(p.key(), p.value());
  for (auto& b : module.named_buffers()) copy(b.key(), b.value());
}

bool bitwise_equal(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.scalar_type() != b.scalar_type() || a.sizes() != b.sizes()) return false;
  const auto ca = a.detach().contiguous(), cb = b.detach().contiguous();
  return std::memcmp(ca.data_ptr(), cb.data_ptr(), ca.numel() * ca.element_size()) == 0;
}

Scope parse_scope(const std::string& s) {
  if (s == "encoder") return Scope::Encoder;
  if (s == "fpn") return Scope::Fpn;
  if (s == "all" || s == "all_available") return Scope::All;
  throw ScopeError("unknown scope '" + s + "' (expected encoder, fpn or all)");
}

std::string scope_name(Scope s) {
  switch (s) {
    case Scope::Encoder: return "encoder";
    case Scope::Fpn: return "fpn";
    case Scope::All: return "all";
  }
  return "?";
}

std::vector<std::string> scope_groups(Scope s) {
  std::vector<std::string> g{"backbone"};
  if (s == Scope::Encoder) return g;
  g.push_back("fpn");
  if (s == Scope::Fpn) return g;
  for (const auto& h : seg::SegmentationGeneratorImpl::instance_groups()) g.push_back(h);
  return g;
}

Archive export_scope(const Archive& checkpoint, Scope scope) {
  Archive out;
  out.meta = {{"kind", "export"}, {"scope", scope_name(scope)}, {"groups", scope_groups(scope)}};
  if (checkpoint.meta.contains("config")) out.meta["config"] = checkpoint.meta["config"];
  for (const auto& group : scope_groups(scope)) {
    const std::string prefix = "S." + group + ".";
    size_t n = 0;
    for (const auto& [name, t] : checkpoint.tensors)
      if (name.rfind(prefix, 0) == 0) {
        out.tensors.emplace_back(name.substr(2), t);
        ++n;
      }
    if (n == 0) throw ScopeError("checkpoint has no 'S." + group + "' group");
  }
  return out;
}

void export_weights(const fs::path& checkpoint, Scope scope, const fs::path& out) {
  write_archive(out, export_scope(read_archive(checkpoint), scope));
}

std::vector<std::string> load_export(const Archive& exported, seg::SegmentationGeneratorImpl& model, Scope required) {
  if (exported.meta.value("kind", "") != "export") throw ScopeError("not an exported weight file");
  const Scope have = parse_scope(exported.meta.value("scope", ""));
  if (static_cast<int>(have) < static_cast<int>(required))
    throw ScopeError("export scope '" + scope_name(have) + "' does not cover required scope '" + scope_name(required) + "'");
  std::vector<std::string> loaded;
  for (const auto& group : scope_groups(required)) {
    auto child = model.named_children()[group];
    load_module(exported, group, *child);
    for (const auto& p : child->named_parameters()) loaded.push_back(group + "." + p.key());
  }
  return loaded;
}

}  // namespace nup::ckpt
