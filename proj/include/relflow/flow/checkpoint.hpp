#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "relflow/core/binio.hpp"
#include "relflow/flow/net.hpp"
#include "relflow/flow/optim.hpp"

namespace relflow {

/// IXCK layout: "IXCK", u32 version, u32 json length, JSON {architecture, meta}, u64 parameter
/// count, f32 parameters, i64 optimizer step, u64 moment count, f32 m, f32 v, u64 root seed,
/// u64 training step.
inline constexpr std::string_view kCheckpointMagic = "IXCK";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Architecture architecture;
  std::vector<double> parameters;
  AdamWState optimizer;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  nlohmann::json meta = nlohmann::json::object();

  VelocityNet net() const {
    VelocityNet n(architecture);
    n.set_parameters(parameters);
    return n;
  }
};

namespace detail {
inline void put_f32_array(binio::Writer& w, const std::vector<double>& v) {
  std::vector<float> f(v.begin(), v.end());
  w.put_array<float>(f);
}
inline std::vector<double> get_f32_array(binio::Reader& r, std::size_t n, const char* what) {
  const auto f = r.get_array<float>(n, what);
  return {f.begin(), f.end()};
}
}  // namespace detail

inline std::vector<unsigned char> encode_checkpoint(const Checkpoint& ck) {
  binio::Writer w;
  w.put_bytes(kCheckpointMagic);
  w.put<std::uint32_t>(kCheckpointVersion);
  nlohmann::json header{{"architecture", ck.architecture.to_json()}, {"meta", ck.meta}};
  const std::string blob = header.dump();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(blob.size()));
  w.put_bytes(blob);
  w.put<std::uint64_t>(ck.parameters.size());
  detail::put_f32_array(w, ck.parameters);
  w.put<std::int64_t>(ck.optimizer.step);
  w.put<std::uint64_t>(ck.optimizer.m.size());
  detail::put_f32_array(w, ck.optimizer.m);
  detail::put_f32_array(w, ck.optimizer.v);
  w.put<std::uint64_t>(ck.seed);
  w.put<std::uint64_t>(ck.step);
  return w.bytes();
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  binio::Writer w;
  const auto bytes = encode_checkpoint(ck);
  w.put_array<unsigned char>(bytes);
  w.save(path);
}

inline Checkpoint decode_checkpoint(binio::Reader& r) {
  if (r.get_bytes(4, "magic") != kCheckpointMagic) throw FormatError("bad checkpoint magic", 0);
  const std::size_t version_at = r.offset();
  if (r.get<std::uint32_t>("version") != kCheckpointVersion) throw FormatError("unsupported checkpoint version", version_at);
  const auto len = r.get<std::uint32_t>("header length");
  const std::size_t header_at = r.offset();
  const std::string blob = r.get_bytes(len, "header");
  Checkpoint ck;
  try {
    const auto header = nlohmann::json::parse(blob);
    ck.architecture = Architecture::from_json(header.at("architecture"));
    ck.meta = header.value("meta", nlohmann::json::object());
  } catch (const std::exception& e) {
    throw FormatError(std::string("bad checkpoint header: ") + e.what(), header_at);
  }
  const std::size_t count_at = r.offset();
  const auto n = r.get<std::uint64_t>("parameter count");
  if (n != ck.architecture.parameter_count())
    throw FormatError("parameter count does not match architecture", count_at);
  ck.parameters = detail::get_f32_array(r, n, "parameters");
  ck.optimizer.step = r.get<std::int64_t>("optimizer step");
  const std::size_t moments_at = r.offset();
  const auto m = r.get<std::uint64_t>("moment count");
  if (m != 0 && m != n) throw FormatError("optimizer moment count mismatch", moments_at);
  ck.optimizer.m = detail::get_f32_array(r, m, "first moments");
  ck.optimizer.v = detail::get_f32_array(r, m, "second moments");
  ck.seed = r.get<std::uint64_t>("seed");
  ck.step = r.get<std::uint64_t>("step");
  if (!r.at_end()) throw FormatError("trailing bytes after checkpoint", r.offset());
  return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  auto r = binio::Reader::from_file(path);
  return decode_checkpoint(r);
}

}  // namespace relflow
