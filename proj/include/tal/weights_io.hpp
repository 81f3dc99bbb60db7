#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tal/binio.hpp"
#include "tal/error.hpp"
#include "tal/model.hpp"

namespace tal {

// Weight file layout (all integers u32 little-endian, floats f64 LE):
//   "TALW1" | version u8 | arch (len + bytes) | param count
//   per param: name (len + bytes) | rank | extents[rank] | data
// The input extents, class count and training state travel as an extra
// rank-1 parameter named "__meta": (H, W, C, classes, train_seed, trained).

inline constexpr char kWeightMagic[] = "TALW1";
inline constexpr std::uint8_t kWeightVersion = 1;
inline constexpr char kMetaParam[] = "__meta";

inline std::vector<unsigned char> serialize_weights(const Model& model) {
  binio::Writer w;
  w.bytes(kWeightMagic, 5);
  w.u8(kWeightVersion);
  w.str(std::string(to_string(model.spec().arch)));
  w.u32(static_cast<std::uint32_t>(model.params().size() + 1));
  auto put = [&](const std::string& name, const Tensor& t) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) w.u32(static_cast<std::uint32_t>(e));
    for (double v : t.data()) w.f64(v);
  };
  const auto& s = model.spec();
  put(kMetaParam, Tensor({6}, {static_cast<double>(s.height), static_cast<double>(s.width),
                               static_cast<double>(s.channels), static_cast<double>(s.classes),
                               static_cast<double>(model.train_seed() & 0xffffffffu), model.trained() ? 1.0 : 0.0}));
  for (const auto& p : model.params()) put(p.name, p.value);
  return w.buffer();
}

inline void save_weights(const Model& model, const std::string& path) {
  binio::Writer w;
  const auto bytes = serialize_weights(model);
  w.bytes(bytes.data(), bytes.size());
  w.save(path);
}

inline Model deserialize_weights(binio::Reader& r) {
  if (r.fixed(5, "magic") != std::string(kWeightMagic, 5)) throw FormatError("bad weight-file magic", 0);
  const std::size_t version_at = r.offset();
  if (r.u8("version") != kWeightVersion) throw FormatError("unsupported weight-file version", version_at);
  const std::size_t arch_at = r.offset();
  Arch arch;
  try {
    arch = parse_arch(r.str("arch id"));
  } catch (const ConfigError& e) {
    throw FormatError(e.what(), arch_at);
  }
  const std::size_t count_at = r.offset();
  const std::uint32_t count = r.u32("parameter count");
  if (count == 0 || count > 1024) throw FormatError("implausible parameter count", count_at);

  std::vector<NamedParam> raw;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedParam p;
    p.name = r.str("parameter name");
    const std::size_t rank_at = r.offset();
    const std::uint32_t rank = r.u32("rank");
    if (rank > 8) throw FormatError("implausible rank", rank_at);
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(r.u32("extent"));
    const std::size_t n = shape_size(shape);
    r.need(n * 8, "parameter data");
    std::vector<double> data(n);
    for (double& v : data) v = r.f64("parameter data");
    p.value = Tensor(std::move(shape), std::move(data));
    raw.push_back(std::move(p));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after last parameter", r.offset());

  if (raw.empty() || raw.front().name != kMetaParam || raw.front().value.size() != 6) {
    throw FormatError("missing " + std::string(kMetaParam) + " record", count_at);
  }
  const Tensor& meta = raw.front().value;
  ArchSpec spec{arch, static_cast<std::size_t>(meta[0]), static_cast<std::size_t>(meta[1]),
                static_cast<std::size_t>(meta[2]), static_cast<std::size_t>(meta[3])};
  std::vector<std::pair<std::string, Shape>> layout;
  try {
    layout = parameter_layout(spec);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid meta record: ") + e.what(), count_at);
  }
  if (layout.size() + 1 != raw.size()) throw FormatError("parameter count does not match architecture", count_at);
  std::vector<NamedParam> params;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    NamedParam& p = raw[i + 1];
    if (p.name != layout[i].first || p.value.shape() != layout[i].second) {
      throw FormatError("parameter '" + p.name + "' does not match architecture layout", count_at);
    }
    if (!p.value.all_finite()) throw FormatError("non-finite parameter '" + p.name + "'", count_at);
    params.push_back(std::move(p));
  }
  Model m(spec, std::move(params));
  m.set_train_state(meta[5] != 0.0, static_cast<std::uint64_t>(meta[4]));
  return m;
}

inline Model load_weights(const std::string& path) {
  auto r = binio::Reader::from_file(path);
  return deserialize_weights(r);
}

}  // namespace tal
