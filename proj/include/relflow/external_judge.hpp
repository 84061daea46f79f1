#pragma once

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>
#include <zlib.h>

#include <chrono>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include <json.hpp>

#include "relflow/judge.hpp"

namespace relflow {

// ---------------------------------------------------------------------------------------------
// Marker overlay and PNG/base64 encoding for the optional image attachment.

inline std::string base64_encode(const std::vector<unsigned char>& in) {
  static constexpr char table[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < in.size(); i += 3) {
    const std::uint32_t v = (in[i] << 16) | (in[i + 1] << 8) | in[i + 2];
    out += table[(v >> 18) & 63];
    out += table[(v >> 12) & 63];
    out += table[(v >> 6) & 63];
    out += table[v & 63];
  }
  if (i + 1 == in.size()) {
    const std::uint32_t v = in[i] << 16;
    out += table[(v >> 18) & 63];
    out += table[(v >> 12) & 63];
    out += "==";
  } else if (i + 2 == in.size()) {
    const std::uint32_t v = (in[i] << 16) | (in[i + 1] << 8);
    out += table[(v >> 18) & 63];
    out += table[(v >> 12) & 63];
    out += table[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

/// 8-bit RGB PNG of a [0,1] float image.
inline std::vector<unsigned char> encode_png(const ImageF& rgb) {
  std::vector<unsigned char> raw;
  raw.reserve(rgb.pixels() * 3 + rgb.height);
  for (int r = 0; r < rgb.height; ++r) {
    raw.push_back(0);
    for (int c = 0; c < rgb.width; ++c)
      for (int k = 0; k < 3; ++k)
        raw.push_back(static_cast<unsigned char>(std::lround(std::clamp(rgb(r, c, k), 0.0f, 1.0f) * 255.0f)));
  }
  uLongf packed_len = compressBound(raw.size());
  std::vector<unsigned char> packed(packed_len);
  if (compress2(packed.data(), &packed_len, raw.data(), raw.size(), 6) != Z_OK)
    throw std::runtime_error("png: deflate failed");
  packed.resize(packed_len);

  std::vector<unsigned char> png{0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  auto be32 = [&](std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) png.push_back(static_cast<unsigned char>(v >> s));
  };
  auto chunk = [&](const char* type, const std::vector<unsigned char>& body) {
    be32(static_cast<std::uint32_t>(body.size()));
    const std::size_t start = png.size();
    png.insert(png.end(), type, type + 4);
    png.insert(png.end(), body.begin(), body.end());
    be32(static_cast<std::uint32_t>(crc32(0, png.data() + start, static_cast<uInt>(png.size() - start))));
  };
  std::vector<unsigned char> ihdr;
  for (std::uint32_t v : {static_cast<std::uint32_t>(rgb.width), static_cast<std::uint32_t>(rgb.height)})
    for (int s = 24; s >= 0; s -= 8) ihdr.push_back(static_cast<unsigned char>(v >> s));
  ihdr.insert(ihdr.end(), {8, 2, 0, 0, 0});
  chunk("IHDR", ihdr);
  chunk("IDAT", packed);
  chunk("IEND", {});
  return png;
}

/// Copy of `rgb` with a red square at p1 and a blue square at p2.
inline ImageF overlay_markers(const ImageF& rgb, const PointPair& pair, int radius = 1) {
  ImageF out = rgb;
  auto stamp = [&](Pixel p, float r, float g, float b) {
    for (int dr = -radius; dr <= radius; ++dr)
      for (int dc = -radius; dc <= radius; ++dc) {
        const int y = p.row + dr, x = p.col + dc;
        if (y < 0 || x < 0 || y >= out.height || x >= out.width) continue;
        if (std::abs(dr) < radius && std::abs(dc) < radius) continue;
        out(y, x, 0) = r, out(y, x, 1) = g, out(y, x, 2) = b;
      }
  };
  stamp(pair.p1, 1.0f, 0.0f, 0.0f);
  stamp(pair.p2, 0.0f, 0.2f, 1.0f);
  return out;
}

// ---------------------------------------------------------------------------------------------
// Line protocol

inline std::string encode_judge_request(std::uint64_t id, const PointPair& pair, int width, int height,
                                        const ImageF* rgb_for_markers) {
  nlohmann::json j;
  j["id"] = id;
  j["modality"] = to_string(pair.modality);
  j["p1"] = {pair.p1.row, pair.p1.col};
  j["p2"] = {pair.p2.row, pair.p2.col};
  j["width"] = width;
  j["height"] = height;
  if (rgb_for_markers != nullptr) j["image_b64"] = base64_encode(encode_png(overlay_markers(*rgb_for_markers, pair)));
  return j.dump();
}

/// Parses one reply line; throws JudgeUnavailable on anything malformed.
inline Judgment decode_judge_reply(const std::string& line, std::uint64_t expected_id, Modality modality) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const std::exception& e) {
    throw JudgeUnavailable(std::string("malformed judge reply: ") + e.what());
  }
  if (!j.is_object() || !j.contains("id") || !j.contains("label") || !j["id"].is_number_integer() ||
      !j["label"].is_string())
    throw JudgeUnavailable("judge reply lacks id/label");
  if (j["id"].get<std::uint64_t>() != expected_id) throw JudgeUnavailable("judge reply id mismatch");
  Label label;
  try {
    label = parse_label(j["label"].get<std::string>());
  } catch (const ConfigError& e) {
    throw JudgeUnavailable(e.what());
  }
  if (!label_legal_for(label, modality)) throw JudgeUnavailable("judge reply label illegal for modality");
  double confidence = 1.0;
  if (j.contains("confidence") && j["confidence"].is_number()) confidence = std::clamp(j["confidence"].get<double>(), 0.0, 1.0);
  return {label, confidence};
}

/// A child process spoken to over newline-delimited stdin/stdout.
class LineSubprocess {
 public:
  explicit LineSubprocess(const std::string& command) {
    int to_child[2], from_child[2];
    if (pipe(to_child) != 0 || pipe(from_child) != 0) throw JudgeUnavailable("pipe() failed");
    pid_ = fork();
    if (pid_ < 0) throw JudgeUnavailable("fork() failed");
    if (pid_ == 0) {
      setpgid(0, 0);
      dup2(to_child[0], STDIN_FILENO);
      dup2(from_child[1], STDOUT_FILENO);
      close(to_child[0]), close(to_child[1]), close(from_child[0]), close(from_child[1]);
      execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
      _exit(127);
    }
    setpgid(pid_, pid_);
    close(to_child[0]);
    close(from_child[1]);
    in_fd_ = to_child[1];
    out_fd_ = from_child[0];
    signal(SIGPIPE, SIG_IGN);
  }

  LineSubprocess(const LineSubprocess&) = delete;
  LineSubprocess& operator=(const LineSubprocess&) = delete;

  ~LineSubprocess() { shutdown(); }

  void shutdown() {
    if (in_fd_ >= 0) close(in_fd_), in_fd_ = -1;
    if (out_fd_ >= 0) close(out_fd_), out_fd_ = -1;
    if (pid_ > 0) {
      kill(-pid_, SIGKILL);
      waitpid(pid_, nullptr, 0);
      pid_ = -1;
    }
  }

  bool running() const noexcept { return pid_ > 0; }

  void write_line(const std::string& line) {
    std::string buf = line + "\n";
    std::size_t off = 0;
    while (off < buf.size()) {
      const ssize_t n = ::write(in_fd_, buf.data() + off, buf.size() - off);
      if (n <= 0) throw JudgeUnavailable("judge subprocess closed its input");
      off += static_cast<std::size_t>(n);
    }
  }

  std::string read_line(double timeout_s) {
    using clock = std::chrono::steady_clock;
    const auto deadline = clock::now() + std::chrono::duration<double>(timeout_s);
    while (true) {
      if (const auto nl = pending_.find('\n'); nl != std::string::npos) {
        std::string line = pending_.substr(0, nl);
        pending_.erase(0, nl + 1);
        return line;
      }
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - clock::now()).count();
      if (left <= 0) throw JudgeUnavailable("judge reply timed out");
      pollfd pfd{out_fd_, POLLIN, 0};
      const int ready = poll(&pfd, 1, static_cast<int>(left));
      if (ready == 0) throw JudgeUnavailable("judge reply timed out");
      if (ready < 0) throw JudgeUnavailable("poll() failed");
      char buf[4096];
      const ssize_t n = ::read(out_fd_, buf, sizeof buf);
      if (n <= 0) throw JudgeUnavailable("judge subprocess exited");
      pending_.append(buf, static_cast<std::size_t>(n));
    }
  }

 private:
  pid_t pid_ = -1;
  int in_fd_ = -1;
  int out_fd_ = -1;
  std::string pending_;
};

/// Forwards every query to a subprocess. After a timeout or a dead pipe the connection is
/// dropped and the judge reports itself as no longer alive.
class ExternalJudge final : public PairJudge {
 public:
  explicit ExternalJudge(JudgeConfig cfg) : cfg_(std::move(cfg)), proc_(cfg_.external_command) {}

  Judgment query(const SceneSample& sample, const PointPair& pair, const QueryKey&) override {
    if (!proc_.running()) throw JudgeUnavailable("external judge is not running");
    const std::uint64_t id = next_id_++;
    std::string line;
    try {
      proc_.write_line(encode_judge_request(id, pair, sample.rgb.width, sample.rgb.height,
                                            cfg_.external_attach_image ? &sample.rgb : nullptr));
      line = proc_.read_line(cfg_.external_timeout_s);
    } catch (const JudgeUnavailable&) {
      proc_.shutdown();
      throw;
    }
    return decode_judge_reply(line, id, pair.modality);
  }
  bool reads_ground_truth() const override { return false; }
  bool alive() const override { return proc_.running(); }

 private:
  JudgeConfig cfg_;
  LineSubprocess proc_;
  std::uint64_t next_id_ = 0;
};

inline std::unique_ptr<PairJudge> make_pair_judge(const JudgeConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  switch (cfg.kind) {
    case JudgeKind::Oracle: return std::make_unique<OracleJudge>(cfg);
    case JudgeKind::Noisy: return std::make_unique<NoisyJudge>(cfg, seed);
    case JudgeKind::External: return std::make_unique<ExternalJudge>(cfg);
  }
  return nullptr;
}

}  // namespace relflow
