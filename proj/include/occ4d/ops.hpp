// Copyright 2026 The occ4d Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Differentiable operations over Tensor. Feature maps are [C,H,W].
// No broadcasting except conv bias over channels.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "occ4d/errors.hpp"
#include "occ4d/tensor.hpp"

namespace occ4d {

namespace detail {

inline void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* name) {
  require(t.defined(), std::string(op) + ": " + name + " is undefined");
  require(t.rank() == rank, std::string(op) + ": " + name + " must have rank " + std::to_string(rank) +
                                ", got shape " + shape_string(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return;
  for (std::size_t d = 0; d < std::min(a.rank(), b.rank()); ++d) {
    require(a.dim(d) == b.dim(d), std::string(op) + ": dimension " + std::to_string(d) + " differs (" +
                                      std::to_string(a.dim(d)) + " vs " + std::to_string(b.dim(d)) + ")");
  }
  contract_fail(std::string(op) + ": rank differs (" + shape_string(a.shape()) + " vs " +
                shape_string(b.shape()) + ")");
}

}  // namespace detail

/// Cross-correlation of a [C_in,H,W] map with [C_out,C_in,k,k] weights.
/// Output is [C_out, H+2p-k+1, W+2p-k+1]; taps outside the input read zero.
inline Tensor conv2d(const Tensor& input, const Tensor& weights, const Tensor& bias, std::size_t padding) {
  detail::require_rank(input, 3, "conv2d", "input");
  detail::require_rank(weights, 4, "conv2d", "weights");
  detail::require_rank(bias, 1, "conv2d", "bias");
  const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t cout = weights.dim(0), k = weights.dim(2);
  detail::require(weights.dim(1) == cin, "conv2d: weights input-channel dimension " +
                                             std::to_string(weights.dim(1)) + " != input channels " +
                                             std::to_string(cin));
  detail::require(weights.dim(3) == k, "conv2d: kernel must be square, got " + std::to_string(k) + "x" +
                                           std::to_string(weights.dim(3)));
  detail::require(k % 2 == 1, "conv2d: kernel size " + std::to_string(k) + " must be odd");
  detail::require(bias.dim(0) == cout, "conv2d: bias length " + std::to_string(bias.dim(0)) +
                                           " != output channels " + std::to_string(cout));
  detail::require(h + 2 * padding >= k, "conv2d: output height would be < 1 (H=" + std::to_string(h) + ")");
  detail::require(w + 2 * padding >= k, "conv2d: output width would be < 1 (W=" + std::to_string(w) + ")");
  const std::size_t oh = h + 2 * padding - k + 1, ow = w + 2 * padding - k + 1;
  const auto p = static_cast<std::ptrdiff_t>(padding);

  Tensor out(Shape{cout, oh, ow});
  auto o = out.mutable_data();
  const auto x = input.data();
  const auto wt = weights.data();
  const auto b = bias.data();

  // Valid output range [lo, hi) along one axis for kernel offset `kk`.
  auto span_for = [p](std::size_t kk, std::size_t in_len, std::size_t out_len) {
    const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(kk) - p;
    const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -shift);
    const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(out_len),
                                                       static_cast<std::ptrdiff_t>(in_len) - shift);
    return std::pair{lo, std::max(lo, hi)};
  };

  for (std::size_t oc = 0; oc < cout; ++oc) {
    double* oplane = o.data() + oc * oh * ow;
    std::fill(oplane, oplane + oh * ow, b[oc]);
    for (std::size_t ic = 0; ic < cin; ++ic) {
      const double* iplane = x.data() + ic * h * w;
      for (std::size_t ky = 0; ky < k; ++ky) {
        const auto [ylo, yhi] = span_for(ky, h, oh);
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - p;
        for (std::size_t kx = 0; kx < k; ++kx) {
          const double wv = wt[((oc * cin + ic) * k + ky) * k + kx];
          const auto [xlo, xhi] = span_for(kx, w, ow);
          const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - p;
          for (std::ptrdiff_t y = ylo; y < yhi; ++y) {
            double* orow = oplane + y * static_cast<std::ptrdiff_t>(ow);
            const double* irow = iplane + (y + dy) * static_cast<std::ptrdiff_t>(w) + dx;
            for (std::ptrdiff_t xx = xlo; xx < xhi; ++xx) orow[xx] += wv * irow[xx];
          }
        }
      }
    }
  }

  detail::record_op({&input, &weights, &bias}, out,
                    [input, weights, bias, cin, h, w, cout, k, oh, ow, p, span_for](
                        std::span<const double> g, Adjoints& adj) {
                      const auto x = input.data();
                      const auto wt = weights.data();
                      if (Adjoints::wants(bias)) {
                        auto gb = adj.of(bias);
                        for (std::size_t oc = 0; oc < cout; ++oc) {
                          double s = 0.0;
                          for (std::size_t i = 0; i < oh * ow; ++i) s += g[oc * oh * ow + i];
                          gb[oc] += s;
                        }
                      }
                      const bool want_w = Adjoints::wants(weights);
                      const bool want_x = Adjoints::wants(input);
                      if (!want_w && !want_x) return;
                      std::span<double> gw = want_w ? adj.of(weights) : std::span<double>{};
                      std::span<double> gx = want_x ? adj.of(input) : std::span<double>{};
                      for (std::size_t oc = 0; oc < cout; ++oc) {
                        const double* gplane = g.data() + oc * oh * ow;
                        for (std::size_t ic = 0; ic < cin; ++ic) {
                          const double* iplane = x.data() + ic * h * w;
                          for (std::size_t ky = 0; ky < k; ++ky) {
                            const auto [ylo, yhi] = span_for(ky, h, oh);
                            const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - p;
                            for (std::size_t kx = 0; kx < k; ++kx) {
                              const std::size_t widx = ((oc * cin + ic) * k + ky) * k + kx;
                              const auto [xlo, xhi] = span_for(kx, w, ow);
                              const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - p;
                              double acc = 0.0;
                              const double wv = wt[widx];
                              for (std::ptrdiff_t y = ylo; y < yhi; ++y) {
                                const double* grow = gplane + y * static_cast<std::ptrdiff_t>(ow);
                                const std::ptrdiff_t ioff = (y + dy) * static_cast<std::ptrdiff_t>(w) + dx;
                                if (want_w) {
                                  const double* irow = iplane + ioff;
                                  for (std::ptrdiff_t xx = xlo; xx < xhi; ++xx) acc += grow[xx] * irow[xx];
                                }
                                if (want_x) {
                                  double* girow = gx.data() + ic * h * w + ioff;
                                  for (std::ptrdiff_t xx = xlo; xx < xhi; ++xx) girow[xx] += wv * grow[xx];
                                }
                              }
                              if (want_w) gw[widx] += acc;
                            }
                          }
                        }
                      }
                    });
  return out;
}

inline Tensor sigmoid(const Tensor& x) {
  Tensor out(x.shape());
  auto y = out.mutable_data();
  const auto in = x.data();
  for (std::size_t i = 0; i < in.size(); ++i) {
    // Split by sign so exp never overflows.
    if (in[i] >= 0.0) {
      y[i] = 1.0 / (1.0 + std::exp(-in[i]));
    } else {
      const double e = std::exp(in[i]);
      y[i] = e / (1.0 + e);
    }
  }
  detail::record_op({&x}, out, [x, out](std::span<const double> g, Adjoints& adj) {
    auto gx = adj.of(x);
    const auto y = out.data();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
  });
  return out;
}

/// max(x, slope*x) for slope in [0,1); derivative at 0 taken as slope.
inline Tensor leaky_relu(const Tensor& x, double slope) {
  Tensor out(x.shape());
  auto y = out.mutable_data();
  const auto in = x.data();
  for (std::size_t i = 0; i < in.size(); ++i) y[i] = in[i] > 0.0 ? in[i] : slope * in[i];
  detail::record_op({&x}, out, [x, slope](std::span<const double> g, Adjoints& adj) {
    auto gx = adj.of(x);
    const auto in = x.data();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += in[i] > 0.0 ? g[i] : slope * g[i];
  });
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out(a.shape());
  auto y = out.mutable_data();
  const auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = da[i] + db[i];
  detail::record_op({&a, &b}, out, [a, b](std::span<const double> g, Adjoints& adj) {
    for (const Tensor* t : {&a, &b}) {
      if (!Adjoints::wants(*t)) continue;
      auto gt = adj.of(*t);
      for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
    }
  });
  return out;
}

inline Tensor scale(const Tensor& x, double factor) {
  Tensor out(x.shape());
  auto y = out.mutable_data();
  const auto in = x.data();
  for (std::size_t i = 0; i < in.size(); ++i) y[i] = factor * in[i];
  detail::record_op({&x}, out, [x, factor](std::span<const double> g, Adjoints& adj) {
    auto gx = adj.of(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
  });
  return out;
}

/// Sum of all elements as a one-element tensor.
inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor out = Tensor::scalar(s);
  detail::record_op({&x}, out, [x](std::span<const double> g, Adjoints& adj) {
    auto gx = adj.of(x);
    for (double& v : gx) v += g[0];
  });
  return out;
}

/// Stacks [C_i,H,W] maps along the channel axis, in order.
inline Tensor concat_channels(std::span<const Tensor> parts) {
  detail::require(!parts.empty(), "concat_channels: no inputs");
  for (const Tensor& t : parts) detail::require_rank(t, 3, "concat_channels", "input");
  const std::size_t h = parts[0].dim(1), w = parts[0].dim(2);
  std::size_t channels = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    detail::require(parts[i].dim(1) == h, "concat_channels: input " + std::to_string(i) + " dimension 1 is " +
                                              std::to_string(parts[i].dim(1)) + ", expected " + std::to_string(h));
    detail::require(parts[i].dim(2) == w, "concat_channels: input " + std::to_string(i) + " dimension 2 is " +
                                              std::to_string(parts[i].dim(2)) + ", expected " + std::to_string(w));
    channels += parts[i].dim(0);
  }
  Tensor out(Shape{channels, h, w});
  auto y = out.mutable_data();
  std::size_t offset = 0;
  for (const Tensor& t : parts) {
    std::copy(t.data().begin(), t.data().end(), y.begin() + static_cast<std::ptrdiff_t>(offset));
    offset += t.numel();
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  detail::record_op_dynamic(inputs, out, [inputs](std::span<const double> g, Adjoints& adj) {
    std::size_t offset = 0;
    for (const Tensor& t : inputs) {
      if (Adjoints::wants(t)) {
        auto gt = adj.of(t);
        for (std::size_t i = 0; i < gt.size(); ++i) gt[i] += g[offset + i];
      }
      offset += t.numel();
    }
  });
  return out;
}

inline Tensor concat_channels(std::initializer_list<Tensor> parts) {
  return concat_channels(std::span<const Tensor>(parts.begin(), parts.size()));
}

/// [C,H,W] -> [C,2H,2W] by duplicating each cell into a 2x2 block.
inline Tensor upsample_nearest2x(const Tensor& x) {
  detail::require_rank(x, 3, "upsample_nearest2x", "input");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor out(Shape{c, 2 * h, 2 * w});
  auto y = out.mutable_data();
  const auto in = x.data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t r = 0; r < 2 * h; ++r)
      for (std::size_t col = 0; col < 2 * w; ++col)
        y[(ch * 2 * h + r) * 2 * w + col] = in[(ch * h + r / 2) * w + col / 2];
  detail::record_op({&x}, out, [x, c, h, w](std::span<const double> g, Adjoints& adj) {
    auto gx = adj.of(x);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t r = 0; r < 2 * h; ++r)
        for (std::size_t col = 0; col < 2 * w; ++col)
          gx[(ch * h + r / 2) * w + col / 2] += g[(ch * 2 * h + r) * 2 * w + col];
  });
  return out;
}

/// Per-channel max over factor x factor blocks. Gradient goes to the first
/// maximal element of each block in row-major order.
inline Tensor max_pool(const Tensor& x, std::size_t factor) {
  detail::require_rank(x, 3, "max_pool", "input");
  detail::require(factor >= 1, "max_pool: factor must be >= 1");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  detail::require(h % factor == 0, "max_pool: dimension 1 (" + std::to_string(h) + ") not divisible by " +
                                       std::to_string(factor));
  detail::require(w % factor == 0, "max_pool: dimension 2 (" + std::to_string(w) + ") not divisible by " +
                                       std::to_string(factor));
  const std::size_t oh = h / factor, ow = w / factor;
  Tensor out(Shape{c, oh, ow});
  auto y = out.mutable_data();
  std::vector<std::size_t> argmax(y.size());
  const auto in = x.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t r = 0; r < oh; ++r) {
      for (std::size_t col = 0; col < ow; ++col) {
        std::size_t best = (ch * h + r * factor) * w + col * factor;
        for (std::size_t dy = 0; dy < factor; ++dy) {
          for (std::size_t dx = 0; dx < factor; ++dx) {
            const std::size_t idx = (ch * h + r * factor + dy) * w + col * factor + dx;
            if (in[idx] > in[best]) best = idx;
          }
        }
        const std::size_t o = (ch * oh + r) * ow + col;
        y[o] = in[best];
        argmax[o] = best;
      }
    }
  }
  detail::record_op({&x}, out, [x, argmax = std::move(argmax)](std::span<const double> g, Adjoints& adj) {
    auto gx = adj.of(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[argmax[i]] += g[i];
  });
  return out;
}

/// Same data under a new shape of equal element count.
inline Tensor reshape(const Tensor& x, Shape shape) {
  detail::require(shape_numel(shape) == x.numel(), "reshape: " + shape_string(x.shape()) + " -> " +
                                                       shape_string(shape) + " changes element count");
  Tensor out(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
  detail::record_op({&x}, out, [x](std::span<const double> g, Adjoints& adj) {
    auto gx = adj.of(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
  return out;
}

}  // namespace occ4d
