#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "relflow/core/error.hpp"
#include "relflow/core/grid.hpp"
#include "relflow/core/rng.hpp"
#include "relflow/flow/codec.hpp"

namespace relflow {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Activation { SiLU, Tanh };

inline const char* to_string(Activation a) { return a == Activation::SiLU ? "silu" : "tanh"; }

inline Activation parse_activation(const std::string& s) {
  if (s == "silu") return Activation::SiLU;
  if (s == "tanh") return Activation::Tanh;
  throw ConfigError("unknown activation '" + s + "'");
}

struct ConvSpec {
  int width = 32;
  int dilation = 1;
  bool operator==(const ConvSpec&) const = default;
};

/// Stack of 3x3 same-padded convolutions. Every layer but the last is followed by the pointwise
/// activation and receives a projected sinusoidal time embedding as a per-channel offset.
/// The input is the flow state, the RGB condition and a constant time plane.
struct Architecture {
  int state_channels = kStateChannels;
  int cond_channels = kCondChannels;
  std::vector<ConvSpec> layers{{32, 1}, {32, 2}, {kStateChannels, 1}};
  int time_frequencies = 4;
  Activation activation = Activation::SiLU;
  bool zero_init_last = true;

  int input_channels() const { return state_channels + cond_channels + 1; }
  int embedding_dim() const { return 2 * time_frequencies; }

  void validate() const {
    if (layers.empty()) throw ConfigError("architecture needs at least one layer");
    if (layers.back().width != state_channels)
      throw ConfigError("last layer width must equal the state channel count");
    for (const auto& l : layers)
      if (l.width < 1 || l.dilation < 1) throw ConfigError("layer width and dilation must be >= 1");
    if (time_frequencies < 0) throw ConfigError("time_frequencies must be >= 0");
  }

  /// Exact parameter count implied by the descriptor.
  std::size_t parameter_count() const {
    std::size_t n = 0;
    int in = input_channels();
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const int out = layers[l].width;
      n += static_cast<std::size_t>(9 * in) * out + out;
      if (l + 1 < layers.size()) n += static_cast<std::size_t>(embedding_dim()) * out;
      in = out;
    }
    return n;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["state_channels"] = state_channels;
    j["cond_channels"] = cond_channels;
    j["time_frequencies"] = time_frequencies;
    j["activation"] = to_string(activation);
    j["zero_init_last"] = zero_init_last;
    j["kernel"] = 3;
    for (const auto& l : layers) j["layers"].push_back({{"width", l.width}, {"dilation", l.dilation}});
    return j;
  }

  static Architecture from_json(const nlohmann::json& j) {
    Architecture a;
    a.state_channels = j.at("state_channels").get<int>();
    a.cond_channels = j.at("cond_channels").get<int>();
    a.time_frequencies = j.at("time_frequencies").get<int>();
    a.activation = parse_activation(j.at("activation").get<std::string>());
    a.zero_init_last = j.value("zero_init_last", true);
    a.layers.clear();
    for (const auto& l : j.at("layers")) a.layers.push_back({l.at("width").get<int>(), l.at("dilation").get<int>()});
    a.validate();
    return a;
  }

  bool operator==(const Architecture&) const = default;
};

/// Activations recorded by a forward pass; consumed by backward.
struct Tape {
  struct Layer {
    RowMatrix cols;  // im2col of the layer input
    RowMatrix pre;   // pre-activation output
  };
  int height = 0;
  int width = 0;
  std::vector<double> time_features;
  std::vector<Layer> layers;

  bool recorded() const noexcept { return !layers.empty(); }
};

namespace detail {

inline void im2col(const double* in, int h, int w, int c, int dilation, RowMatrix& cols) {
  cols.setZero(static_cast<Eigen::Index>(h) * w, 9 * c);
  for (int r = 0; r < h; ++r)
    for (int x = 0; x < w; ++x) {
      double* row = cols.data() + (static_cast<std::size_t>(r) * w + x) * 9 * c;
      for (int ky = 0; ky < 3; ++ky) {
        const int rr = r + (ky - 1) * dilation;
        if (rr < 0 || rr >= h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int cc = x + (kx - 1) * dilation;
          if (cc < 0 || cc >= w) continue;
          const double* src = in + (static_cast<std::size_t>(rr) * w + cc) * c;
          std::copy(src, src + c, row + (ky * 3 + kx) * c);
        }
      }
    }
}

inline void col2im(const RowMatrix& dcols, int h, int w, int c, int dilation, double* out) {
  std::fill(out, out + static_cast<std::size_t>(h) * w * c, 0.0);
  for (int r = 0; r < h; ++r)
    for (int x = 0; x < w; ++x) {
      const double* row = dcols.data() + (static_cast<std::size_t>(r) * w + x) * 9 * c;
      for (int ky = 0; ky < 3; ++ky) {
        const int rr = r + (ky - 1) * dilation;
        if (rr < 0 || rr >= h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int cc = x + (kx - 1) * dilation;
          if (cc < 0 || cc >= w) continue;
          double* dst = out + (static_cast<std::size_t>(rr) * w + cc) * c;
          const double* src = row + (ky * 3 + kx) * c;
          for (int k = 0; k < c; ++k) dst[k] += src[k];
        }
      }
    }
}

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace detail

/// Sinusoidal features [sin(pi 2^k t), cos(pi 2^k t)] for k < frequencies.
inline std::vector<double> time_features(double t, int frequencies) {
  std::vector<double> e(2 * frequencies);
  for (int k = 0; k < frequencies; ++k) {
    const double w = std::numbers::pi * std::ldexp(1.0, k) * t;
    e[2 * k] = std::sin(w);
    e[2 * k + 1] = std::cos(w);
  }
  return e;
}

/// Rounds every entry to the nearest float. Persisted parameters are f32, so training keeps them
/// float-representable to make checkpoints exact.
inline void round_to_float(std::span<double> v) {
  for (double& x : v) x = static_cast<float>(x);
}

/// Conditional velocity field f(x_t, t, c) with a flat parameter vector.
class VelocityNet {
 public:
  VelocityNet() = default;
  explicit VelocityNet(Architecture arch) : arch_(std::move(arch)) {
    arch_.validate();
    params_.assign(arch_.parameter_count(), 0.0);
    build_offsets();
  }

  /// Glorot-uniform weights, zero biases; the last layer is zeroed when the architecture asks for it.
  static VelocityNet initialized(const Architecture& arch, std::uint64_t seed) {
    VelocityNet net(arch);
    Rng rng = Rng::stream(seed, "net-init");
    int in = arch.input_channels();
    for (std::size_t l = 0; l < arch.layers.size(); ++l) {
      const int out = arch.layers[l].width;
      const bool last = l + 1 == arch.layers.size();
      const double bound = std::sqrt(6.0 / (9.0 * in + out));
      double* w = net.params_.data() + net.offsets_[l].weight;
      for (std::size_t i = 0; i < static_cast<std::size_t>(9 * in) * out; ++i)
        w[i] = (last && arch.zero_init_last) ? 0.0 : rng.uniform(-bound, bound);
      if (!last) {
        double* p = net.params_.data() + net.offsets_[l].time;
        const double tb = 1.0 / std::sqrt(std::max(1, arch.embedding_dim()));
        for (std::size_t i = 0; i < static_cast<std::size_t>(arch.embedding_dim()) * out; ++i)
          p[i] = rng.uniform(-tb, tb);
      }
      in = out;
    }
    round_to_float(net.params_);
    return net;
  }

  const Architecture& architecture() const noexcept { return arch_; }
  std::size_t parameter_count() const noexcept { return params_.size(); }
  std::vector<double>& parameters() noexcept { return params_; }
  const std::vector<double>& parameters() const noexcept { return params_; }

  void set_parameters(std::vector<double> p) {
    if (p.size() != params_.size()) throw ShapeError("set_parameters: size mismatch");
    params_ = std::move(p);
  }

  /// Velocity at (state, t) given the RGB condition. Records activations into `tape` when non-null.
  Field forward(const Field& state, double t, const Field& cond, Tape* tape = nullptr) const {
    if (state.channels != arch_.state_channels || cond.channels != arch_.cond_channels ||
        !cond.same_extent(state.height, state.width))
      throw ShapeError("VelocityNet::forward: input shape mismatch");
    if (!std::isfinite(t) || !all_finite(state) || !all_finite(cond))
      throw NumericError("VelocityNet::forward: non-finite input");
    if (t < 0.0 || t > 1.0) throw std::domain_error("VelocityNet::forward: t outside [0,1]");

    const int h = state.height, w = state.width;
    const auto hw = static_cast<std::size_t>(h) * w;
    const int in_c = arch_.input_channels();
    std::vector<double> input(hw * in_c);
    for (std::size_t p = 0; p < hw; ++p) {
      double* dst = input.data() + p * in_c;
      std::copy_n(state.data.data() + p * state.channels, state.channels, dst);
      std::copy_n(cond.data.data() + p * cond.channels, cond.channels, dst + state.channels);
      dst[in_c - 1] = 2.0 * t - 1.0;
    }
    const std::vector<double> e = time_features(t, arch_.time_frequencies);

    Tape local;
    Tape& tp = tape ? *tape : local;
    tp.height = h;
    tp.width = w;
    tp.time_features = e;
    tp.layers.assign(arch_.layers.size(), {});

    const double* cur = input.data();
    int cur_c = in_c;
    RowMatrix act;
    for (std::size_t l = 0; l < arch_.layers.size(); ++l) {
      const int out_c = arch_.layers[l].width;
      auto& rec = tp.layers[l];
      detail::im2col(cur, h, w, cur_c, arch_.layers[l].dilation, rec.cols);
      rec.pre.noalias() = rec.cols * weight(l, cur_c, out_c);
      Eigen::RowVectorXd offset = bias(l, out_c);
      if (l + 1 < arch_.layers.size() && !e.empty())
        offset.noalias() += Eigen::Map<const Eigen::RowVectorXd>(e.data(), e.size()) * time_proj(l, out_c);
      rec.pre.rowwise() += offset;
      if (l + 1 == arch_.layers.size()) break;
      act = rec.pre.unaryExpr([this](double z) { return activate(z); });
      cur = act.data();
      cur_c = out_c;
    }
    Field out(h, w, arch_.state_channels);
    const RowMatrix& last = tp.layers.back().pre;
    std::copy_n(last.data(), out.data.size(), out.data.data());
    return out;
  }

  /// Batched forward; each element is evaluated independently.
  std::vector<Field> forward_batch(std::span<const Field> states, std::span<const double> ts,
                                   std::span<const Field> conds) const {
    if (states.size() != ts.size() || states.size() != conds.size()) throw ShapeError("forward_batch: size mismatch");
    std::vector<Field> out;
    out.reserve(states.size());
    for (std::size_t i = 0; i < states.size(); ++i) out.push_back(forward(states[i], ts[i], conds[i]));
    return out;
  }

  /// Adds dLoss/dtheta for the recorded forward to `grad`, given dLoss/doutput.
  void backward(const Tape& tape, const Field& dout, std::span<double> grad) const {
    if (!tape.recorded()) throw StateError("VelocityNet::backward: no recorded forward pass");
    if (grad.size() != params_.size()) throw ShapeError("VelocityNet::backward: gradient buffer size mismatch");
    if (dout.height != tape.height || dout.width != tape.width || dout.channels != arch_.state_channels)
      throw ShapeError("VelocityNet::backward: output gradient shape mismatch");

    const int h = tape.height, w = tape.width;
    const auto hw = static_cast<Eigen::Index>(h) * w;
    RowMatrix dz = Eigen::Map<const RowMatrix>(dout.data.data(), hw, arch_.state_channels);
    RowMatrix dcols;
    std::vector<double> dinput;
    for (std::size_t li = arch_.layers.size(); li-- > 0;) {
      const int out_c = arch_.layers[li].width;
      const int in_c = li == 0 ? arch_.input_channels() : arch_.layers[li - 1].width;
      const auto& rec = tape.layers[li];
      const Offsets& off = offsets_[li];

      Eigen::Map<RowMatrix>(grad.data() + off.weight, 9 * in_c, out_c).noalias() += rec.cols.transpose() * dz;
      const Eigen::RowVectorXd dbias = dz.colwise().sum();
      Eigen::Map<Eigen::RowVectorXd>(grad.data() + off.bias, out_c) += dbias;
      if (li + 1 < arch_.layers.size() && !tape.time_features.empty()) {
        const Eigen::Map<const Eigen::VectorXd> e(tape.time_features.data(), tape.time_features.size());
        Eigen::Map<RowMatrix>(grad.data() + off.time, arch_.embedding_dim(), out_c).noalias() += e * dbias;
      }
      if (li == 0) break;

      dcols.noalias() = dz * weight(li, in_c, out_c).transpose();
      dinput.resize(static_cast<std::size_t>(hw) * in_c);
      detail::col2im(dcols, h, w, in_c, arch_.layers[li].dilation, dinput.data());
      const RowMatrix& pre = tape.layers[li - 1].pre;
      dz.resize(hw, in_c);
      for (Eigen::Index i = 0; i < dz.size(); ++i) dz.data()[i] = dinput[i] * activate_grad(pre.data()[i]);
    }
  }

  std::vector<double> backward(const Tape& tape, const Field& dout) const {
    std::vector<double> g(params_.size(), 0.0);
    backward(tape, dout, g);
    return g;
  }

 private:
  struct Offsets {
    std::size_t weight = 0, bias = 0, time = 0;
  };

  void build_offsets() {
    offsets_.clear();
    std::size_t pos = 0;
    int in = arch_.input_channels();
    for (std::size_t l = 0; l < arch_.layers.size(); ++l) {
      const int out = arch_.layers[l].width;
      Offsets o;
      o.weight = pos;
      pos += static_cast<std::size_t>(9 * in) * out;
      o.bias = pos;
      pos += out;
      if (l + 1 < arch_.layers.size()) {
        o.time = pos;
        pos += static_cast<std::size_t>(arch_.embedding_dim()) * out;
      }
      offsets_.push_back(o);
      in = out;
    }
  }

  Eigen::Map<const RowMatrix> weight(std::size_t l, int in_c, int out_c) const {
    return {params_.data() + offsets_[l].weight, 9 * in_c, out_c};
  }
  Eigen::Map<const Eigen::RowVectorXd> bias(std::size_t l, int out_c) const {
    return {params_.data() + offsets_[l].bias, out_c};
  }
  Eigen::Map<const RowMatrix> time_proj(std::size_t l, int out_c) const {
    return {params_.data() + offsets_[l].time, arch_.embedding_dim(), out_c};
  }

  double activate(double z) const {
    return arch_.activation == Activation::SiLU ? z * detail::sigmoid(z) : std::tanh(z);
  }
  double activate_grad(double z) const {
    if (arch_.activation == Activation::SiLU) {
      const double s = detail::sigmoid(z);
      return s * (1.0 + z * (1.0 - s));
    }
    const double th = std::tanh(z);
    return 1.0 - th * th;
  }

  Architecture arch_;
  std::vector<double> params_;
  std::vector<Offsets> offsets_;
};

}  // namespace relflow
