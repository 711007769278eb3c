#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "iteach/error.hpp"
#include "iteach/nn.hpp"
#include "iteach/tensor.hpp"

namespace iteach {

/// Emotion context changing encoder settings.
struct EcceParams {
  std::size_t window = 7;     // F_local kernel width, odd
  std::size_t max_span = 30;  // cap on |i - j| for populated cells
  std::size_t d_in = 0;       // width of the (projected) modality features
  std::size_t d_z = 0;        // local feature width
  std::size_t d_e = 8;        // bias channels, one per attention head

  void validate() const {
    if (window % 2 == 0) throw ConfigError("ecce.window must be odd, got " + std::to_string(window));
    if (max_span < 1) throw ConfigError("ecce.max_span must be >= 1");
    if (d_in < 1 || d_z < 1 || d_e < 1) throw ConfigError("ecce widths must be >= 1");
  }
};

/// Symmetric pairwise bias map plus its per-head [L x L] slices.
struct ContextChangeMap {
  Tensor E;                   // [L x L x d_e]
  std::size_t length = 0;     // true sequence length
  std::vector<Tensor> heads;  // heads[h] = E[:, :, h]

  std::size_t channels() const { return E.dim(2); }
};

/// Mean of Z rows over the span starting at i, for every pair with
/// i <= j < min(length, i + max_span), mirrored to (j, i). The span for
/// (i, j) covers rows i .. j-1; the diagonal covers row i alone. Cells outside
/// the band, or touching rows beyond `length`, are zero.
inline Tensor span_mean(const Tensor& z, std::size_t length, std::size_t max_span) {
  if (z.rank() != 2) throw DimensionError("span_mean: expected [L x d], got " + shape_string(z.shape()));
  const std::size_t L = z.dim(0), d = z.dim(1);
  if (length > L) throw DimensionError("span_mean: length exceeds rows");
  // prefix[r] = sum of rows < r
  std::vector<double> prefix((L + 1) * d, 0.0);
  const auto zd = z.data();
  for (std::size_t r = 0; r < L; ++r)
    for (std::size_t c = 0; c < d; ++c) prefix[(r + 1) * d + c] = prefix[r * d + c] + zd[r * d + c];
  std::vector<double> out(L * L * d, 0.0);
  auto span_end = [](std::size_t i, std::size_t j) { return j == i ? i + 1 : j; };
  for (std::size_t i = 0; i < length; ++i) {
    const std::size_t stop = std::min(length, i + max_span);
    for (std::size_t j = i; j < stop; ++j) {
      const std::size_t e = span_end(i, j);
      const double inv = 1.0 / static_cast<double>(e - i);
      for (std::size_t c = 0; c < d; ++c) {
        const double v = (prefix[e * d + c] - prefix[i * d + c]) * inv;
        out[(i * L + j) * d + c] = v;
        out[(j * L + i) * d + c] = v;
      }
    }
  }
  return detail::make_result({L, L, d}, std::move(out), {z}, [L, d, length, max_span, span_end](detail::TensorImpl& self) {
    auto& pz = self.parent(0);
    // Each cell spreads g / count over rows [i, e); a difference array turns
    // that into one prefix sum over rows.
    std::vector<double> diff((L + 1) * d, 0.0);
    for (std::size_t i = 0; i < length; ++i) {
      const std::size_t stop = std::min(length, i + max_span);
      for (std::size_t j = i; j < stop; ++j) {
        const std::size_t e = span_end(i, j);
        const double inv = 1.0 / static_cast<double>(e - i);
        for (std::size_t c = 0; c < d; ++c) {
          double g = self.grad[(i * L + j) * d + c];
          if (j != i) g += self.grad[(j * L + i) * d + c];
          diff[i * d + c] += g * inv;
          diff[e * d + c] -= g * inv;
        }
      }
    }
    std::vector<double> run(d, 0.0);
    for (std::size_t r = 0; r < L; ++r)
      for (std::size_t c = 0; c < d; ++c) {
        run[c] += diff[r * d + c];
        pz.grad[r * d + c] += run[c];
      }
  });
}

/// Local window encoder (1-D conv), span-mean global encoder and the final
/// d_z -> d_e projection. Teacher and student each own one per modality.
class Ecce {
 public:
  Ecce() = default;
  Ecce(ParamRegistry& reg, const std::string& name, EcceParams params, Rng& rng) : params_(params) {
    params_.validate();
    const std::size_t fan_in = params_.window * params_.d_in;
    kernel_ = reg.add(name + ".local.kernel", fan_in_uniform({params_.window, params_.d_in, params_.d_z}, fan_in, rng));
    kernel_bias_ = reg.add(name + ".local.bias", fan_in_uniform({params_.d_z}, fan_in, rng));
    fc_ = Linear(reg, name + ".fc", params_.d_z, params_.d_e, rng);
  }

  const EcceParams& params() const { return params_; }
  Tensor& kernel() { return kernel_; }
  Tensor& kernel_bias() { return kernel_bias_; }
  Linear& fc() { return fc_; }

  /// x: [L x d_in] with rows at or beyond the true length already zeroed.
  Tensor encode_local(const Tensor& x) const {
    return add_rowvec(conv1d(x, kernel_, (params_.window - 1) / 2), kernel_bias_);
  }

  Tensor encode_global(const Tensor& z, std::size_t length) const { return span_mean(z, length, params_.max_span); }

  ContextChangeMap project(const Tensor& eraw, std::size_t length) const {
    const std::size_t L = eraw.dim(0);
    const Tensor flat = reshape(eraw, {L * L, params_.d_z});
    ContextChangeMap map;
    map.E = reshape(fc_(flat), {L, L, params_.d_e});
    map.length = length;
    for (std::size_t h = 0; h < params_.d_e; ++h) map.heads.push_back(channel(map.E, h));
    return map;
  }

  ContextChangeMap operator()(const Tensor& x, std::size_t length) const {
    if (x.rank() != 2 || x.dim(1) != params_.d_in)
      throw DimensionError("ecce: expected [L x " + std::to_string(params_.d_in) + "], got " + shape_string(x.shape()));
    return project(encode_global(encode_local(x), length), length);
  }

 private:
  EcceParams params_;
  Tensor kernel_;
  Tensor kernel_bias_;
  Linear fc_;
};

}  // namespace iteach
