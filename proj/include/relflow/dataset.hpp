#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "relflow/core/binio.hpp"
#include "relflow/core/error.hpp"
#include "relflow/scenegen.hpp"

namespace relflow {

/// IXDS container: "IXDS", u32 version, then per sample
///   u64 seed, u32 tensor count, per tensor: u16 name length, name, u8 rank, u32 dims[rank], f32 payload.
/// Scene descriptors are not persisted; only the seed and the five tensors are.
inline constexpr std::string_view kDatasetMagic = "IXDS";
inline constexpr std::uint32_t kDatasetVersion = 1;

namespace detail {

inline void put_tensor(binio::Writer& w, std::string_view name, const ImageF& g, bool drop_channel_dim) {
  w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
  w.put_bytes(name);
  if (drop_channel_dim) {
    w.put<std::uint8_t>(2);
    w.put<std::uint32_t>(g.height);
    w.put<std::uint32_t>(g.width);
  } else {
    w.put<std::uint8_t>(3);
    w.put<std::uint32_t>(g.height);
    w.put<std::uint32_t>(g.width);
    w.put<std::uint32_t>(g.channels);
  }
  w.put_array<float>(g.data);
}

}  // namespace detail

inline std::vector<unsigned char> encode_dataset(const std::vector<SceneSample>& samples) {
  if (samples.empty()) throw ConfigError("write_dataset: refusing to write an empty dataset");
  binio::Writer w;
  w.put_bytes(kDatasetMagic);
  w.put<std::uint32_t>(kDatasetVersion);
  for (const SceneSample& s : samples) {
    w.put<std::uint64_t>(s.seed);
    w.put<std::uint32_t>(5);
    detail::put_tensor(w, "rgb", s.rgb, false);
    detail::put_tensor(w, "albedo", s.gt.albedo, false);
    detail::put_tensor(w, "depth", s.gt.depth, true);
    detail::put_tensor(w, "normals", s.gt.normals, false);
    detail::put_tensor(w, "irradiance", s.gt.irradiance, true);
  }
  return w.bytes();
}

inline void write_dataset(const std::vector<SceneSample>& samples, const std::string& path) {
  const auto bytes = encode_dataset(samples);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

inline std::vector<SceneSample> decode_dataset(binio::Reader& in) {
  if (in.get_bytes(4, "magic") != kDatasetMagic) throw FormatError("bad dataset magic", 0);
  const std::size_t version_at = in.offset();
  if (const auto v = in.get<std::uint32_t>("version"); v != kDatasetVersion)
    throw FormatError("unsupported dataset version " + std::to_string(v), version_at);

  std::vector<SceneSample> samples;
  while (!in.at_end()) {
    SceneSample s;
    s.seed = in.get<std::uint64_t>("seed");
    const std::size_t count_at = in.offset();
    const auto count = in.get<std::uint32_t>("tensor count");
    if (count != 5) throw FormatError("expected 5 tensors, found " + std::to_string(count), count_at);
    std::array<bool, 5> seen{};
    int h = -1, w = -1;
    for (std::uint32_t t = 0; t < count; ++t) {
      const std::size_t tensor_at = in.offset();
      const auto name_len = in.get<std::uint16_t>("tensor name length");
      const std::string name = in.get_bytes(name_len, "tensor name");
      const auto rank = in.get<std::uint8_t>("tensor rank");
      if (rank != 2 && rank != 3) throw FormatError("tensor '" + name + "' has rank " + std::to_string(rank), tensor_at);
      std::array<std::uint32_t, 3> dims{1, 1, 1};
      for (int d = 0; d < rank; ++d) dims[d] = in.get<std::uint32_t>("tensor dims");

      int slot = -1, want_channels = 0;
      ImageF* dst = nullptr;
      if (name == "rgb") slot = 0, want_channels = 3, dst = &s.rgb;
      else if (name == "albedo") slot = 1, want_channels = 3, dst = &s.gt.albedo;
      else if (name == "depth") slot = 2, want_channels = 1, dst = &s.gt.depth;
      else if (name == "normals") slot = 3, want_channels = 3, dst = &s.gt.normals;
      else if (name == "irradiance") slot = 4, want_channels = 1, dst = &s.gt.irradiance;
      if (slot < 0) throw FormatError("unknown tensor '" + name + "'", tensor_at);
      if (seen[slot]) throw FormatError("duplicate tensor '" + name + "'", tensor_at);
      seen[slot] = true;
      const int channels = rank == 3 ? static_cast<int>(dims[2]) : 1;
      if (channels != want_channels || (want_channels == 1 && rank != 2))
        throw FormatError("tensor '" + name + "' has the wrong channel layout", tensor_at);
      if (dims[0] == 0 || dims[1] == 0 || dims[0] > 4096 || dims[1] > 4096)
        throw FormatError("tensor '" + name + "' has implausible dims", tensor_at);
      if (h < 0) h = static_cast<int>(dims[0]), w = static_cast<int>(dims[1]);
      if (static_cast<int>(dims[0]) != h || static_cast<int>(dims[1]) != w)
        throw FormatError("tensor '" + name + "' disagrees on image size", tensor_at);

      dst->height = h;
      dst->width = w;
      dst->channels = channels;
      dst->data = in.get_array<float>(static_cast<std::size_t>(h) * w * channels, "tensor payload");
    }
    samples.push_back(std::move(s));
  }
  if (samples.empty()) throw FormatError("dataset contains no samples", in.offset());
  return samples;
}

inline std::vector<SceneSample> read_dataset(const std::string& path) {
  auto in = binio::Reader::from_file(path);
  return decode_dataset(in);
}

/// Generates `count` scenes with seeds derived from `root_seed`.
inline std::vector<SceneSample> generate_dataset(std::uint64_t root_seed, int count, const SceneGenConfig& cfg) {
  if (count < 1) throw ConfigError("dataset count must be >= 1");
  std::vector<SceneSample> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) out.push_back(generate_scene(derive_seed(root_seed, "scene", i), cfg));
  return out;
}

}  // namespace relflow
