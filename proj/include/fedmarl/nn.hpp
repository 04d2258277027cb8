#pragma once

// Minimal dense MLP kernel: flat parameter vectors, forward/backward passes
// and plain SGD. Shared by the federated task model and the agent Q-networks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedmarl/error.hpp"
#include "fedmarl/rng.hpp"

namespace fedmarl::nn {

struct LayerShape {
  std::string name;
  std::vector<std::size_t> dims;

  std::size_t size() const {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
  }
  bool operator==(const LayerShape&) const = default;
};

using Layout = std::vector<LayerShape>;

inline std::size_t layout_size(const Layout& layout) {
  std::size_t n = 0;
  for (const auto& l : layout) n += l.size();
  return n;
}

// Flat, contiguous model parameters plus the layout that maps them onto layers.
class ParamVector {
 public:
  ParamVector() = default;

  explicit ParamVector(Layout layout)
      : layout_(std::move(layout)), values_(layout_size(layout_), 0.0) {}

  ParamVector(Layout layout, std::vector<double> values)
      : layout_(std::move(layout)), values_(std::move(values)) {
    if (values_.size() != layout_size(layout_))
      throw DimensionError("ParamVector: value count " + std::to_string(values_.size()) +
                           " does not match layout size " +
                           std::to_string(layout_size(layout_)));
  }

  // Unstructured vector with a single layer named "flat".
  static ParamVector flat(std::vector<double> values) {
    Layout l{{"flat", {values.size()}}};
    return ParamVector(std::move(l), std::move(values));
  }

  const Layout& layout() const { return layout_; }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  bool same_layout(const ParamVector& o) const { return layout_ == o.layout_; }

  ParamVector& operator+=(const ParamVector& o) {
    check_layout(o);
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += o.values_[i];
    return *this;
  }
  ParamVector& operator-=(const ParamVector& o) {
    check_layout(o);
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] -= o.values_[i];
    return *this;
  }
  ParamVector& operator*=(double s) {
    for (double& v : values_) v *= s;
    return *this;
  }

  friend ParamVector operator+(ParamVector a, const ParamVector& b) { return a += b; }
  friend ParamVector operator-(ParamVector a, const ParamVector& b) { return a -= b; }
  friend ParamVector operator*(ParamVector a, double s) { return a *= s; }
  friend ParamVector operator*(double s, ParamVector a) { return a *= s; }

  // Bitwise equality of layout and values.
  bool operator==(const ParamVector& o) const {
    return layout_ == o.layout_ && values_.size() == o.values_.size() &&
           (values_.empty() ||
            std::memcmp(values_.data(), o.values_.data(), values_.size() * sizeof(double)) == 0);
  }

  double norm() const {
    double s = 0.0;
    for (double v : values_) s += v * v;
    return std::sqrt(s);
  }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  void check_layout(const ParamVector& o) const {
    if (!same_layout(o)) throw DimensionError("ParamVector: layout mismatch");
  }

 private:
  Layout layout_;
  std::vector<double> values_;
};

inline double distance(const ParamVector& a, const ParamVector& b) {
  a.check_layout(b);
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

// Row-major dense matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
};

struct Batch {
  Matrix inputs;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
};

enum class Activation { relu, tanh };

struct MlpSpec {
  std::size_t input_dim = 1;
  std::vector<std::size_t> hidden_dims{1};
  std::size_t output_dim = 1;
  Activation activation = Activation::relu;

  bool operator==(const MlpSpec&) const = default;

  // Width of every layer boundary, input first.
  std::vector<std::size_t> widths() const {
    std::vector<std::size_t> w{input_dim};
    w.insert(w.end(), hidden_dims.begin(), hidden_dims.end());
    w.push_back(output_dim);
    return w;
  }

  void validate() const {
    if (input_dim == 0 || output_dim == 0) throw ConfigError("MlpSpec: dimensions must be positive");
    if (hidden_dims.empty()) throw ConfigError("MlpSpec: at least one hidden layer required");
    for (auto h : hidden_dims)
      if (h == 0) throw ConfigError("MlpSpec: hidden width must be positive");
  }

  Layout layout() const {
    validate();
    const auto w = widths();
    Layout l;
    for (std::size_t i = 0; i + 1 < w.size(); ++i) {
      l.push_back({"fc" + std::to_string(i) + ".weight", {w[i + 1], w[i]}});
      l.push_back({"fc" + std::to_string(i) + ".bias", {w[i + 1]}});
    }
    return l;
  }

  std::size_t param_count() const { return layout_size(layout()); }
};

// Agent Q-network: state → hidden 256 → two action values.
inline MlpSpec agent_qnet_spec(std::size_t state_dim) {
  return MlpSpec{state_dim, {256}, 2, Activation::relu};
}

// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases zero.
inline ParamVector init_params(const MlpSpec& spec, std::uint64_t seed) {
  ParamVector p(spec.layout());
  Rng rng(seed);
  const auto w = spec.widths();
  std::size_t off = 0;
  for (std::size_t i = 0; i + 1 < w.size(); ++i) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(w[i]));
    const std::size_t nw = w[i] * w[i + 1];
    for (std::size_t k = 0; k < nw; ++k) p[off + k] = (2.0 * uniform01(rng) - 1.0) * bound;
    off += nw + w[i + 1];
  }
  return p;
}

namespace detail {

inline void check_params(const ParamVector& params, const MlpSpec& spec) {
  if (params.layout() != spec.layout()) throw DimensionError("params do not match MlpSpec layout");
}

inline void check_inputs(const Matrix& inputs, const MlpSpec& spec) {
  if (inputs.rows == 0) throw DimensionError("empty batch");
  if (inputs.cols != spec.input_dim)
    throw DimensionError("batch feature dim " + std::to_string(inputs.cols) +
                         " != spec input_dim " + std::to_string(spec.input_dim));
}

// Layer activations a_0 (input) .. a_L (logits).
inline std::vector<Matrix> forward_all(const ParamVector& params, const MlpSpec& spec,
                                       const Matrix& inputs) {
  const auto w = spec.widths();
  const std::size_t layers = w.size() - 1;
  std::vector<Matrix> acts;
  acts.reserve(layers + 1);
  acts.push_back(inputs);
  const double* p = params.values().data();
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t in = w[l], out = w[l + 1];
    const double* W = p;
    const double* b = p + in * out;
    p += in * out + out;
    const Matrix& a = acts.back();
    Matrix z(a.rows, out);
    for (std::size_t r = 0; r < a.rows; ++r) {
      const double* x = a.data.data() + r * in;
      double* zr = z.data.data() + r * out;
      for (std::size_t o = 0; o < out; ++o) {
        const double* wr = W + o * in;
        double s = b[o];
        for (std::size_t i = 0; i < in; ++i) s += wr[i] * x[i];
        zr[o] = s;
      }
    }
    if (l + 1 < layers) {
      if (spec.activation == Activation::relu) {
        for (double& v : z.data) v = v > 0.0 ? v : 0.0;
      } else {
        for (double& v : z.data) v = std::tanh(v);
      }
    }
    acts.push_back(std::move(z));
  }
  return acts;
}

}  // namespace detail

// Network outputs (logits / Q-values) for each input row.
inline Matrix predict(const ParamVector& params, const MlpSpec& spec, const Matrix& inputs) {
  detail::check_params(params, spec);
  detail::check_inputs(inputs, spec);
  return std::move(detail::forward_all(params, spec, inputs).back());
}

// Gradient of sum_{r,o} dout(r,o) * out(r,o) w.r.t. the parameters.
inline ParamVector backward_from_output(const ParamVector& params, const MlpSpec& spec,
                                        const Matrix& inputs, const Matrix& dout) {
  detail::check_params(params, spec);
  detail::check_inputs(inputs, spec);
  if (dout.rows != inputs.rows || dout.cols != spec.output_dim)
    throw DimensionError("output gradient shape mismatch");
  const auto acts = detail::forward_all(params, spec, inputs);
  const auto w = spec.widths();
  const std::size_t layers = w.size() - 1;

  std::vector<std::size_t> offsets(layers);
  {
    std::size_t off = 0;
    for (std::size_t l = 0; l < layers; ++l) {
      offsets[l] = off;
      off += w[l] * w[l + 1] + w[l + 1];
    }
  }

  ParamVector grad(params.layout());
  Matrix delta = dout;
  for (std::size_t li = layers; li-- > 0;) {
    const std::size_t in = w[li], out = w[li + 1];
    const Matrix& a = acts[li];
    double* gW = grad.values().data() + offsets[li];
    double* gb = gW + in * out;
    for (std::size_t r = 0; r < a.rows; ++r) {
      const double* x = a.data.data() + r * in;
      const double* d = delta.data.data() + r * out;
      for (std::size_t o = 0; o < out; ++o) {
        const double dv = d[o];
        if (dv == 0.0) continue;
        double* gwr = gW + o * in;
        for (std::size_t i = 0; i < in; ++i) gwr[i] += dv * x[i];
        gb[o] += dv;
      }
    }
    if (li == 0) break;
    const double* W = params.values().data() + offsets[li];
    Matrix prev(a.rows, in);
    for (std::size_t r = 0; r < a.rows; ++r) {
      const double* d = delta.data.data() + r * out;
      double* pr = prev.data.data() + r * in;
      for (std::size_t o = 0; o < out; ++o) {
        const double dv = d[o];
        if (dv == 0.0) continue;
        const double* wr = W + o * in;
        for (std::size_t i = 0; i < in; ++i) pr[i] += dv * wr[i];
      }
      const double* ar = a.data.data() + r * in;
      if (spec.activation == Activation::relu) {
        for (std::size_t i = 0; i < in; ++i)
          if (ar[i] <= 0.0) pr[i] = 0.0;
      } else {
        for (std::size_t i = 0; i < in; ++i) pr[i] *= 1.0 - ar[i] * ar[i];
      }
    }
    delta = std::move(prev);
  }
  return grad;
}

struct ForwardResult {
  Matrix logits;
  double loss = 0.0;
};

namespace detail {

inline void check_labels(const Batch& batch, const MlpSpec& spec) {
  if (batch.labels.size() != batch.inputs.rows)
    throw DimensionError("label count does not match input rows");
  for (int y : batch.labels)
    if (y < 0 || static_cast<std::size_t>(y) >= spec.output_dim)
      throw DimensionError("label out of range");
}

// Mean softmax cross-entropy; optionally writes d(loss)/d(logits).
inline double softmax_xent(const Matrix& logits, std::span<const int> labels, Matrix* dlogits) {
  const std::size_t n = logits.rows, m = logits.cols;
  const double inv_n = 1.0 / static_cast<double>(n);
  double total = 0.0;
  if (dlogits) *dlogits = Matrix(n, m);
  for (std::size_t r = 0; r < n; ++r) {
    const auto z = logits.row(r);
    const double mx = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double v : z) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    total += lse - z[static_cast<std::size_t>(labels[r])];
    if (dlogits) {
      auto d = dlogits->row(r);
      for (std::size_t c = 0; c < m; ++c) d[c] = std::exp(z[c] - lse) * inv_n;
      d[static_cast<std::size_t>(labels[r])] -= inv_n;
    }
  }
  return total * inv_n;
}

}  // namespace detail

// Logits and mean softmax cross-entropy of the batch.
inline ForwardResult forward(const ParamVector& params, const MlpSpec& spec, const Batch& batch) {
  detail::check_labels(batch, spec);
  ForwardResult res;
  res.logits = predict(params, spec, batch.inputs);
  res.loss = detail::softmax_xent(res.logits, batch.labels, nullptr);
  return res;
}

// Gradient of the mean cross-entropy loss.
inline ParamVector backward(const ParamVector& params, const MlpSpec& spec, const Batch& batch) {
  detail::check_labels(batch, spec);
  const Matrix logits = predict(params, spec, batch.inputs);
  Matrix dlogits;
  detail::softmax_xent(logits, batch.labels, &dlogits);
  return backward_from_output(params, spec, batch.inputs, dlogits);
}

// Loss and gradient in one pass.
inline std::pair<double, ParamVector> loss_and_grad(const ParamVector& params, const MlpSpec& spec,
                                                    const Batch& batch) {
  detail::check_labels(batch, spec);
  const Matrix logits = predict(params, spec, batch.inputs);
  Matrix dlogits;
  const double loss = detail::softmax_xent(logits, batch.labels, &dlogits);
  return {loss, backward_from_output(params, spec, batch.inputs, dlogits)};
}

inline ParamVector sgd_step(const ParamVector& params, const ParamVector& gradient, double lr) {
  params.check_layout(gradient);
  if (!(lr >= 0.0)) throw ConfigError("learning rate must be nonnegative");
  ParamVector out = params;
  auto v = out.values();
  const auto g = gradient.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
  return out;
}

// Fraction of rows whose argmax logit equals the label.
inline double accuracy(const ParamVector& params, const MlpSpec& spec, const Batch& batch) {
  detail::check_labels(batch, spec);
  const Matrix logits = predict(params, spec, batch.inputs);
  std::size_t hit = 0;
  for (std::size_t r = 0; r < logits.rows; ++r) {
    const auto z = logits.row(r);
    const auto best = static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
    if (best == batch.labels[r]) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(logits.rows);
}

// Rows `idx` of a batch, in the given order.
inline Batch gather(const Batch& src, std::span<const std::size_t> idx) {
  Batch b;
  b.inputs = Matrix(idx.size(), src.inputs.cols);
  b.labels.resize(idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto r = src.inputs.row(idx[k]);
    std::copy(r.begin(), r.end(), b.inputs.row(k).begin());
    b.labels[k] = src.labels[idx[k]];
  }
  return b;
}

// Binary record: "FMPV", u32 version, u32 layer count, per layer
// (u32 name length, name bytes, u32 rank, u64 dims...), u64 value count,
// then little-endian IEEE-754 doubles. All integers little-endian.
namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}
inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw ArtifactError("ParamVector: truncated record");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}
inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw ArtifactError("ParamVector: truncated record");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline void write_params(std::ostream& os, const ParamVector& p) {
  os.write("FMPV", 4);
  detail::put_u32(os, 1);
  detail::put_u32(os, static_cast<std::uint32_t>(p.layout().size()));
  for (const auto& l : p.layout()) {
    detail::put_u32(os, static_cast<std::uint32_t>(l.name.size()));
    os.write(l.name.data(), static_cast<std::streamsize>(l.name.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(l.dims.size()));
    for (auto d : l.dims) detail::put_u64(os, d);
  }
  detail::put_u64(os, p.size());
  for (double v : p.values()) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    detail::put_u64(os, bits);
  }
}

inline ParamVector read_params(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "FMPV", 4) != 0)
    throw ArtifactError("ParamVector: bad magic");
  if (detail::get_u32(is) != 1) throw ArtifactError("ParamVector: unsupported version");
  const std::uint32_t nl = detail::get_u32(is);
  if (nl > 4096) throw ArtifactError("ParamVector: implausible layer count");
  Layout layout;
  for (std::uint32_t k = 0; k < nl; ++k) {
    LayerShape l;
    const std::uint32_t len = detail::get_u32(is);
    if (len > 4096) throw ArtifactError("ParamVector: implausible layer name");
    l.name.resize(len);
    if (len && !is.read(l.name.data(), len)) throw ArtifactError("ParamVector: truncated record");
    const std::uint32_t rank = detail::get_u32(is);
    if (rank > 16) throw ArtifactError("ParamVector: implausible rank");
    for (std::uint32_t r = 0; r < rank; ++r) l.dims.push_back(detail::get_u64(is));
    layout.push_back(std::move(l));
  }
  const std::uint64_t n = detail::get_u64(is);
  if (n != layout_size(layout)) throw ArtifactError("ParamVector: value count mismatch");
  std::vector<double> vals(n);
  for (auto& v : vals) {
    const std::uint64_t bits = detail::get_u64(is);
    std::memcpy(&v, &bits, 8);
  }
  ParamVector p(std::move(layout), std::move(vals));
  if (!p.all_finite()) throw ArtifactError("ParamVector: non-finite values");
  return p;
}

}  // namespace fedmarl::nn
