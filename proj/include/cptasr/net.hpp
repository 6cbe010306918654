#pragma once

// Small CTC acoustic model with hand-written forward and backward passes:
//
//   features (T x D)
//     -> conv stack: non-overlapping strided windows, tanh; strides multiply to downsample_factor
//     -> linear projection to hidden_dim (+ dropout)
//     -> context blocks: H + dropout(tanh(W [H(u-w) .. H(u+w)] + b)), zero-padded at the edges
//     -> linear head to vocab_size + 1 logits (column 0 = blank)

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cptasr/corpus.hpp"
#include "cptasr/errors.hpp"
#include "cptasr/random.hpp"

namespace cptasr {

struct NetConfig {
  int feature_dim = 16;
  int downsample_factor = 4;
  int conv_layers = 2;
  int conv_channels = 32;
  int context_layers = 2;
  int hidden_dim = 64;
  /// Frames on each side seen by one context block.
  int context_window = 2;
  int vocab_size = 1;
  double dropout_rate = 0.1;

  bool operator==(const NetConfig&) const = default;

  void validate() const {
    if (feature_dim < 1 || downsample_factor < 1 || conv_layers < 1 || conv_channels < 1 || hidden_dim < 1 ||
        vocab_size < 1)
      throw ConfigError("net: feature_dim, downsample_factor, conv_layers, conv_channels, hidden_dim and "
                        "vocab_size must be >= 1");
    if (context_layers < 0 || context_window < 0) throw ConfigError("net: context sizes must be >= 0");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("net: dropout_rate must lie in [0, 1)");
  }

  /// Per-layer strides whose product is downsample_factor. Prime factors are
  /// dealt largest first onto the layer with the smallest running product
  /// (320 over 7 layers gives 5,2,2,2,2,2,2).
  std::vector<int> conv_strides() const {
    std::vector<int> primes;
    int n = downsample_factor;
    for (int p = 2; p * p <= n; ++p)
      while (n % p == 0) primes.push_back(p), n /= p;
    if (n > 1) primes.push_back(n);
    std::sort(primes.rbegin(), primes.rend());
    std::vector<int> strides(static_cast<std::size_t>(conv_layers), 1);
    for (int p : primes) *std::min_element(strides.begin(), strides.end()) *= p;
    std::stable_sort(strides.rbegin(), strides.rend());
    return strides;
  }

  /// Output frame count for T input frames (floor(T / downsample_factor)).
  int output_frames(int input_frames) const {
    int t = input_frames;
    for (int s : conv_strides()) t /= s;
    return t;
  }
};

/// Named tensors (biases are n x 1). Also used for gradients and optimizer moments.
struct Parameters {
  std::map<std::string, Eigen::MatrixXd> tensors;

  Eigen::MatrixXd& operator[](const std::string& name) { return tensors.at(name); }
  const Eigen::MatrixXd& operator[](const std::string& name) const { return tensors.at(name); }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors) n += static_cast<std::size_t>(t.size());
    return n;
  }

  bool same_shape(const Parameters& o) const {
    if (tensors.size() != o.tensors.size()) return false;
    for (auto a = tensors.begin(), b = o.tensors.begin(); a != tensors.end(); ++a, ++b)
      if (a->first != b->first || a->second.rows() != b->second.rows() || a->second.cols() != b->second.cols())
        return false;
    return true;
  }

  bool all_finite() const {
    return std::all_of(tensors.begin(), tensors.end(), [](const auto& kv) { return kv.second.allFinite(); });
  }

  /// Same names and shapes, all zeros.
  Parameters zeros_like() const {
    Parameters z;
    for (const auto& [name, t] : tensors) z.tensors.emplace(name, Eigen::MatrixXd::Zero(t.rows(), t.cols()));
    return z;
  }

  Parameters& operator+=(const Parameters& o) {
    for (auto& [name, t] : tensors) t += o.tensors.at(name);
    return *this;
  }

  Parameters& operator*=(double k) {
    for (auto& [_, t] : tensors) t *= k;
    return *this;
  }

  bool operator==(const Parameters& o) const {
    return same_shape(o) && std::equal(tensors.begin(), tensors.end(), o.tensors.begin(),
                                       [](const auto& a, const auto& b) { return a.second == b.second; });
  }
};

using Gradients = Parameters;

namespace detail {

inline std::string conv_name(std::size_t i, const char* part) { return "conv" + std::to_string(i) + "." + part; }
inline std::string ctx_name(std::size_t i, const char* part) { return "ctx" + std::to_string(i) + "." + part; }

inline int ctx_width(const NetConfig& cfg) { return (2 * cfg.context_window + 1) * cfg.hidden_dim; }

/// Rows [u*s, u*s+s) of x laid side by side; trailing frames that do not fill a window are dropped.
inline Eigen::MatrixXd strided_patches(const Eigen::MatrixXd& x, int stride) {
  const auto out_rows = x.rows() / stride;
  Eigen::MatrixXd p(out_rows, x.cols() * stride);
  for (Eigen::Index u = 0; u < out_rows; ++u)
    for (int k = 0; k < stride; ++k) p.block(u, k * x.cols(), 1, x.cols()) = x.row(u * stride + k);
  return p;
}

inline Eigen::MatrixXd context_windows(const Eigen::MatrixXd& h, int w) {
  const auto rows = h.rows(), cols = h.cols();
  Eigen::MatrixXd z = Eigen::MatrixXd::Zero(rows, (2 * w + 1) * cols);
  for (Eigen::Index u = 0; u < rows; ++u)
    for (int k = -w; k <= w; ++k) {
      const auto src = u + k;
      if (src >= 0 && src < rows) z.block(u, (k + w) * cols, 1, cols) = h.row(src);
    }
  return z;
}

/// Adjoint of context_windows: accumulates each window slot back onto its source frame.
inline void add_context_windows_adjoint(const Eigen::MatrixXd& dz, int w, Eigen::MatrixXd& dh) {
  const auto rows = dh.rows(), cols = dh.cols();
  for (Eigen::Index u = 0; u < rows; ++u)
    for (int k = -w; k <= w; ++k) {
      const auto src = u + k;
      if (src >= 0 && src < rows) dh.row(src) += dz.block(u, (k + w) * cols, 1, cols);
    }
}

inline Eigen::MatrixXd dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng) {
  Eigen::MatrixXd m(rows, cols);
  const double keep_scale = 1.0 / (1.0 - rate);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = uniform01(rng) < rate ? 0.0 : keep_scale;
  return m;
}

inline void add_bias(Eigen::MatrixXd& y, const Eigen::MatrixXd& bias) { y.rowwise() += bias.col(0).transpose(); }

}  // namespace detail

/// Fan-in scaled uniform weights in [-1/sqrt(fan_in), 1/sqrt(fan_in)], zero biases.
inline Parameters init_parameters(const NetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Parameters p;
  Rng rng(derive_seed(seed, 0x1417));
  auto add = [&](const std::string& prefix, int out, int fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Eigen::MatrixXd w(out, fan_in);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = uniform(rng, -bound, bound);
    p.tensors.emplace(prefix + ".weight", std::move(w));
    p.tensors.emplace(prefix + ".bias", Eigen::MatrixXd::Zero(out, 1));
  };
  const auto strides = cfg.conv_strides();
  for (std::size_t i = 0; i < strides.size(); ++i)
    add("conv" + std::to_string(i), cfg.conv_channels, strides[i] * (i == 0 ? cfg.feature_dim : cfg.conv_channels));
  add("proj", cfg.hidden_dim, cfg.conv_channels);
  for (int l = 0; l < cfg.context_layers; ++l) add("ctx" + std::to_string(l), cfg.hidden_dim, detail::ctx_width(cfg));
  add("head", cfg.vocab_size + 1, cfg.hidden_dim);
  return p;
}

/// Checks names and shapes against what init_parameters would produce.
inline void check_parameters(const Parameters& params, const NetConfig& cfg) {
  if (!init_parameters(cfg, 0).same_shape(params))
    throw ConfigError("parameters do not match the network configuration");
}

struct ForwardCache {
  int input_frames = 0;
  std::vector<Eigen::MatrixXd> conv_inputs;   // strided patches fed to each conv layer
  std::vector<Eigen::MatrixXd> conv_outputs;  // tanh outputs
  Eigen::MatrixXd proj_mask;                  // empty when dropout is off
  std::vector<Eigen::MatrixXd> ctx_windows;
  std::vector<Eigen::MatrixXd> ctx_branch;    // tanh outputs before dropout
  std::vector<Eigen::MatrixXd> ctx_masks;     // empty when dropout is off
  Eigen::MatrixXd head_input;
};

struct ForwardResult {
  Eigen::MatrixXd logits;
  ForwardCache cache;
};

/// Dropout is active only in train mode, with masks drawn from `seed`.
inline ForwardResult forward(const Parameters& params, const NetConfig& cfg, const FeatureMatrix& features,
                             bool train_mode, std::uint64_t seed = 0) {
  if (features.cols() != cfg.feature_dim)
    throw ConfigError("forward: feature dim " + std::to_string(features.cols()) + " != configured " +
                      std::to_string(cfg.feature_dim));
  if (features.rows() < cfg.downsample_factor)
    throw InfeasibleError("forward: " + std::to_string(features.rows()) + " frames is shorter than the downsample "
                          "factor " + std::to_string(cfg.downsample_factor));
  const bool dropout = train_mode && cfg.dropout_rate > 0.0;
  Rng rng(derive_seed(seed, 0xd0));

  ForwardResult r;
  auto& c = r.cache;
  c.input_frames = static_cast<int>(features.rows());
  Eigen::MatrixXd x = features.cast<double>();
  const auto strides = cfg.conv_strides();
  for (std::size_t i = 0; i < strides.size(); ++i) {
    c.conv_inputs.push_back(detail::strided_patches(x, strides[i]));
    Eigen::MatrixXd y = c.conv_inputs.back() * params[detail::conv_name(i, "weight")].transpose();
    detail::add_bias(y, params[detail::conv_name(i, "bias")]);
    x = y.array().tanh();
    c.conv_outputs.push_back(x);
  }

  Eigen::MatrixXd h = x * params["proj.weight"].transpose();
  detail::add_bias(h, params["proj.bias"]);
  if (dropout) {
    c.proj_mask = detail::dropout_mask(h.rows(), h.cols(), cfg.dropout_rate, rng);
    h.array() *= c.proj_mask.array();
  }

  for (int l = 0; l < cfg.context_layers; ++l) {
    const auto li = static_cast<std::size_t>(l);
    c.ctx_windows.push_back(detail::context_windows(h, cfg.context_window));
    Eigen::MatrixXd a = c.ctx_windows.back() * params[detail::ctx_name(li, "weight")].transpose();
    detail::add_bias(a, params[detail::ctx_name(li, "bias")]);
    c.ctx_branch.push_back(a.array().tanh());
    if (dropout) {
      c.ctx_masks.push_back(detail::dropout_mask(h.rows(), h.cols(), cfg.dropout_rate, rng));
      h.array() += c.ctx_branch.back().array() * c.ctx_masks.back().array();
    } else {
      c.ctx_masks.emplace_back();
      h += c.ctx_branch.back();
    }
  }

  c.head_input = h;
  r.logits = h * params["head.weight"].transpose();
  detail::add_bias(r.logits, params["head.bias"]);
  return r;
}

/// Gradient of sum(dlogits .* logits) with respect to every parameter.
inline Gradients backward(const Parameters& params, const NetConfig& cfg, const ForwardCache& cache,
                          const Eigen::MatrixXd& dlogits) {
  if (dlogits.rows() != cache.head_input.rows() || dlogits.cols() != cfg.vocab_size + 1)
    throw ConfigError("backward: dlogits shape does not match the forward pass");
  Gradients g = params.zeros_like();

  g["head.weight"] = dlogits.transpose() * cache.head_input;
  g["head.bias"] = dlogits.colwise().sum().transpose();
  Eigen::MatrixXd dh = dlogits * params["head.weight"];

  for (int l = cfg.context_layers - 1; l >= 0; --l) {
    const auto li = static_cast<std::size_t>(l);
    Eigen::MatrixXd db = dh;
    if (cache.ctx_masks[li].size() > 0) db.array() *= cache.ctx_masks[li].array();
    const Eigen::MatrixXd da = db.array() * (1.0 - cache.ctx_branch[li].array().square());
    g[detail::ctx_name(li, "weight")] = da.transpose() * cache.ctx_windows[li];
    g[detail::ctx_name(li, "bias")] = da.colwise().sum().transpose();
    detail::add_context_windows_adjoint(da * params[detail::ctx_name(li, "weight")], cfg.context_window, dh);
  }

  if (cache.proj_mask.size() > 0) dh.array() *= cache.proj_mask.array();
  g["proj.weight"] = dh.transpose() * cache.conv_outputs.back();
  g["proj.bias"] = dh.colwise().sum().transpose();
  Eigen::MatrixXd dx = dh * params["proj.weight"];

  const auto strides = cfg.conv_strides();
  for (std::size_t i = strides.size(); i-- > 0;) {
    const Eigen::MatrixXd da = dx.array() * (1.0 - cache.conv_outputs[i].array().square());
    g[detail::conv_name(i, "weight")] = da.transpose() * cache.conv_inputs[i];
    g[detail::conv_name(i, "bias")] = da.colwise().sum().transpose();
    if (i == 0) break;
    const Eigen::MatrixXd dp = da * params[detail::conv_name(i, "weight")];
    const int s = strides[i];
    const auto in_cols = cache.conv_outputs[i - 1].cols();
    dx = Eigen::MatrixXd::Zero(cache.conv_outputs[i - 1].rows(), in_cols);
    for (Eigen::Index u = 0; u < dp.rows(); ++u)
      for (int k = 0; k < s; ++k) dx.row(u * s + k) = dp.block(u, k * in_cols, 1, in_cols);
  }
  return g;
}

}  // namespace cptasr
