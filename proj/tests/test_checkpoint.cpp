#include "support/torch_doctest.hpp"

#include <filesystem>
#include <fstream>
#include <set>

#include "nup/checkpoint.hpp"
#include "nup/generator_fpn.hpp"

using namespace nup;
using namespace nup::ckpt;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("nup_ckpt_" + std::to_string(::getpid()));
  fs::create_directories(d);
  return d / name;
}

seg::SegConfig tiny() {
  seg::SegConfig c;
  c.stem_channels = 8;
  c.backbone_channels = {8, 8, 16, 16, 16};
  c.fpn_channels = 16;
  c.head_channels = 16;
  c.box_fc = 32;
  return c;
}

Archive model_checkpoint(seg::SegmentationGenerator& s) {
  Archive a;
  a.meta = {{"iter", 7}};
  add_module(a, "S", *s);
  a.add("G.weight", torch::randn({3, 3}));
  return a;
}

std::set<std::string> name_set(const Archive& a) {
  const auto n = a.names();
  return {n.begin(), n.end()};
}

}  // namespace

TEST_CASE("archive round trip is bitwise") {
  torch::manual_seed(0);
  seg::SegmentationGenerator s(tiny());
  auto a = model_checkpoint(s);
  a.add("misc.f64", torch::randn({2, 5}, torch::kDouble));
  a.add("misc.i64", torch::arange(10));
  a.add("misc.u8", torch::randint(0, 255, {4}, torch::kByte));
  a.add("misc.scalar", torch::tensor(3.5f));
  const auto path = temp_file("rt.nup");
  write_archive(path, a);
  const auto b = read_archive(path);
  CHECK(b.meta["iter"] == 7);
  REQUIRE(b.tensors.size() == a.tensors.size());
  for (size_t i = 0; i < a.tensors.size(); ++i) {
    CHECK(a.tensors[i].first == b.tensors[i].first);
    CHECK(bitwise_equal(a.tensors[i].second, b.tensors[i].second));
  }
  seg::SegmentationGenerator fresh(tiny());
  load_module(b, "S", *fresh);
  for (const auto& p : s->named_parameters()) CHECK(bitwise_equal(p.value(), fresh->named_parameters()[p.key()]));
  CHECK_THROWS_AS(a.add("misc.i64", torch::zeros({1})), std::invalid_argument);
}

TEST_CASE("corrupt, truncated and newer files are rejected") {
  Archive a;
  a.add("x", torch::randn({64}));
  const auto path = temp_file("c.nup");
  write_archive(path, a);
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  for (size_t keep : {bytes.size() - 1, bytes.size() / 2, size_t{30}, size_t{12}}) {
    std::ofstream(path, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(keep));
    CHECK_THROWS_AS(read_archive(path), ChecksumError);
  }
  auto flipped = bytes;
  flipped[bytes.size() - 20] ^= 0x01;
  std::ofstream(path, std::ios::binary).write(flipped.data(), static_cast<std::streamsize>(flipped.size()));
  CHECK_THROWS_AS(read_archive(path), ChecksumError);

  write_archive(path, a, kFormatMajor + 1);
  CHECK_THROWS_AS(read_archive(path), VersionError);
  std::ofstream(path) << "hello";
  CHECK_THROWS_AS(read_archive(path), FormatError);
}

TEST_CASE("export scopes form a strict chain of exact projections") {
  torch::manual_seed(1);
  seg::SegmentationGenerator s(tiny());
  const auto ckpt = model_checkpoint(s);
  const auto enc = export_scope(ckpt, Scope::Encoder);
  const auto fpn = export_scope(ckpt, Scope::Fpn);
  const auto all = export_scope(ckpt, Scope::All);

  std::set<std::string> backbone;
  for (const auto& p : s->backbone->named_parameters()) backbone.insert("backbone." + p.key());
  CHECK(name_set(enc) == backbone);

  const auto se = name_set(enc), sf = name_set(fpn), sa = name_set(all);
  CHECK(std::includes(sf.begin(), sf.end(), se.begin(), se.end()));
  CHECK(std::includes(sa.begin(), sa.end(), sf.begin(), sf.end()));
  CHECK(se.size() < sf.size());
  CHECK(sf.size() < sa.size());
  for (const auto& n : sa) CHECK(n.rfind("decode_head.", 0) != 0);

  for (const auto& [name, t] : all.tensors) CHECK(bitwise_equal(t, *ckpt.find("S." + name)));
  CHECK(parse_scope("all_available") == Scope::All);
  CHECK_THROWS_AS(parse_scope("head"), ScopeError);

  Archive no_fpn;
  add_module(no_fpn, "S.backbone", *s->backbone);
  CHECK_NOTHROW(export_scope(no_fpn, Scope::Encoder));
  CHECK_THROWS_AS(export_scope(no_fpn, Scope::Fpn), ScopeError);
}

TEST_CASE("fpn export loads backbone and fpn and leaves heads fresh") {
  torch::manual_seed(2);
  seg::SegmentationGenerator trained(tiny());
  const auto ckpt = model_checkpoint(trained);
  const auto path = temp_file("ckpt.nup"), out = temp_file("fpn.nup");
  write_archive(path, ckpt);
  export_weights(path, Scope::Fpn, out);
  const auto exported = read_archive(out);

  torch::manual_seed(3);
  seg::SegmentationGenerator fresh(tiny());
  std::map<std::string, torch::Tensor> before;
  for (const auto& p : fresh->named_parameters()) before[p.key()] = p.value().clone();
  const auto loaded = load_export(exported, *fresh, Scope::Fpn);
  CHECK(!loaded.empty());
  for (const auto& p : fresh->named_parameters()) {
    const auto& k = p.key();
    if (k.rfind("backbone.", 0) == 0 || k.rfind("fpn.", 0) == 0) {
      CHECK(bitwise_equal(p.value(), *exported.find(k)));
    } else {
      CHECK(bitwise_equal(p.value(), before[k]));
    }
  }
  const auto enc = export_scope(ckpt, Scope::Encoder);
  CHECK_THROWS_AS(load_export(enc, *fresh, Scope::Fpn), ScopeError);
  CHECK_THROWS_AS(load_export(ckpt, *fresh, Scope::Encoder), ScopeError);
  fs::remove_all(path.parent_path());
}
