#include "samc/graph.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <random>

#include "samc/bytes.hpp"

namespace samc {

// ---------------------------------------------------------------------------
// ParamSet

void ParamSet::add(std::string name, Tensor value) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.emplace_back(std::move(name), std::move(value));
}

Tensor& ParamSet::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter '" + name + "'");
  return entries_[it->second].second;
}

const Tensor& ParamSet::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter '" + name + "'");
  return entries_[it->second].second;
}

std::size_t ParamSet::flat_size() const {
  std::size_t n = 0;
  for (const auto& [_, t] : entries_) n += t.size();
  return n;
}

std::vector<double> ParamSet::flatten() const {
  std::vector<double> out;
  out.reserve(flat_size());
  for (const auto& [_, t] : entries_) out.insert(out.end(), t.vec().begin(), t.vec().end());
  return out;
}

void ParamSet::unflatten(std::span<const double> flat) {
  if (flat.size() != flat_size())
    throw ShapeError("unflatten: expected " + std::to_string(flat_size()) + " values, got " +
                     std::to_string(flat.size()));
  std::size_t off = 0;
  for (auto& [_, t] : entries_) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), t.size(), t.vec().begin());
    off += t.size();
  }
}

ParamSet ParamSet::zeros_like() const {
  ParamSet z;
  for (const auto& [name, t] : entries_) z.add(name, Tensor(t.shape(), 0.0));
  return z;
}

bool ParamSet::same_layout(const ParamSet& other) const {
  if (count() != other.count()) return false;
  for (std::size_t i = 0; i < count(); ++i)
    if (name(i) != other.name(i) || at(i).shape() != other.at(i).shape()) return false;
  return true;
}

// ---------------------------------------------------------------------------
// ComputeGraph

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Input: return "input";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::ConvTranspose2d: return "conv_transpose2d";
    case OpKind::MaxPool2d: return "max_pool2d";
    case OpKind::GlobalAvgPool: return "global_avg_pool";
    case OpKind::Relu: return "relu";
    case OpKind::LeakyRelu: return "leaky_relu";
    case OpKind::BatchNorm2d: return "batch_norm2d";
    case OpKind::Linear: return "linear";
    case OpKind::BilinearUpsample: return "bilinear_upsample";
    case OpKind::Clamp: return "clamp";
    case OpKind::Add: return "add";
  }
  return "?";
}

ComputeGraph::ComputeGraph(Shape input_shape) {
  if (input_shape.empty()) throw ShapeError("graph input shape must be non-empty");
  Node in;
  in.kind = OpKind::Input;
  in.out_shape = std::move(input_shape);
  nodes_.push_back(std::move(in));
}

const Node& ComputeGraph::checked(NodeId id) const {
  if (id >= nodes_.size()) throw std::out_of_range("unknown node id " + std::to_string(id));
  return nodes_[id];
}

NodeId ComputeGraph::push(Node node) {
  nodes_.push_back(std::move(node));
  return nodes_.size() - 1;
}

namespace {

const Shape& spatial(const Node& n, NodeId id) {
  if (n.out_shape.size() != 3)
    throw ShapeError("node " + std::to_string(id) + " (" + op_name(n.kind) +
                     ") is not spatial: " + shape_str(n.out_shape));
  return n.out_shape;
}

}  // namespace

NodeId ComputeGraph::conv2d(NodeId in, const std::string& prefix, std::size_t out_channels,
                            std::size_t kernel, std::size_t stride, std::size_t pad) {
  const Shape& s = spatial(checked(in), in);
  if (kernel == 0 || stride == 0 || s[1] + 2 * pad < kernel || s[2] + 2 * pad < kernel)
    throw ShapeError("conv2d: kernel " + std::to_string(kernel) + " does not fit " + shape_str(s));
  Node n;
  n.kind = OpKind::Conv2d;
  n.input = in;
  n.kernel = kernel;
  n.stride = stride;
  n.pad = pad;
  n.out_shape = {out_channels, (s[1] + 2 * pad - kernel) / stride + 1,
                 (s[2] + 2 * pad - kernel) / stride + 1};
  n.weight = prefix + ".weight";
  n.bias = prefix + ".bias";
  params_.push_back({n.weight, {out_channels, s[0], kernel, kernel}});
  params_.push_back({n.bias, {out_channels}});
  return push(std::move(n));
}

NodeId ComputeGraph::conv_transpose2d(NodeId in, const std::string& prefix,
                                      std::size_t out_channels, std::size_t kernel,
                                      std::size_t stride, std::size_t pad, std::size_t out_pad) {
  const Shape& s = spatial(checked(in), in);
  if (kernel == 0 || stride == 0 || out_pad >= stride)
    throw ShapeError("conv_transpose2d: invalid kernel/stride/output padding");
  const auto size = [&](std::size_t x) -> std::size_t {
    const long v = static_cast<long>((x - 1) * stride + kernel + out_pad) - 2 * static_cast<long>(pad);
    if (v <= 0) throw ShapeError("conv_transpose2d: empty output for " + shape_str(s));
    return static_cast<std::size_t>(v);
  };
  Node n;
  n.kind = OpKind::ConvTranspose2d;
  n.input = in;
  n.kernel = kernel;
  n.stride = stride;
  n.pad = pad;
  n.out_pad = out_pad;
  n.out_shape = {out_channels, size(s[1]), size(s[2])};
  n.weight = prefix + ".weight";
  n.bias = prefix + ".bias";
  params_.push_back({n.weight, {s[0], out_channels, kernel, kernel}});
  params_.push_back({n.bias, {out_channels}});
  return push(std::move(n));
}

NodeId ComputeGraph::max_pool2d(NodeId in, std::size_t kernel, std::size_t stride) {
  const Shape& s = spatial(checked(in), in);
  if (kernel == 0 || stride == 0 || s[1] < kernel || s[2] < kernel)
    throw ShapeError("max_pool2d: window does not fit " + shape_str(s));
  Node n;
  n.kind = OpKind::MaxPool2d;
  n.input = in;
  n.kernel = kernel;
  n.stride = stride;
  n.out_shape = {s[0], (s[1] - kernel) / stride + 1, (s[2] - kernel) / stride + 1};
  return push(std::move(n));
}

NodeId ComputeGraph::global_avg_pool(NodeId in) {
  const Shape& s = spatial(checked(in), in);
  Node n;
  n.kind = OpKind::GlobalAvgPool;
  n.input = in;
  n.out_shape = {s[0]};
  return push(std::move(n));
}

NodeId ComputeGraph::relu(NodeId in) {
  Node n;
  n.kind = OpKind::Relu;
  n.input = in;
  n.out_shape = checked(in).out_shape;
  return push(std::move(n));
}

NodeId ComputeGraph::leaky_relu(NodeId in, double slope) {
  Node n;
  n.kind = OpKind::LeakyRelu;
  n.input = in;
  n.slope = slope;
  n.out_shape = checked(in).out_shape;
  return push(std::move(n));
}

NodeId ComputeGraph::batch_norm2d(NodeId in, const std::string& prefix, double momentum,
                                  double eps) {
  const Shape& s = spatial(checked(in), in);
  Node n;
  n.kind = OpKind::BatchNorm2d;
  n.input = in;
  n.momentum = momentum;
  n.eps = eps;
  n.out_shape = s;
  n.weight = prefix + ".weight";
  n.bias = prefix + ".bias";
  n.running_mean = prefix + ".running_mean";
  n.running_var = prefix + ".running_var";
  params_.push_back({n.weight, {s[0]}});
  params_.push_back({n.bias, {s[0]}});
  buffers_.push_back({n.running_mean, {s[0]}});
  buffers_.push_back({n.running_var, {s[0]}});
  return push(std::move(n));
}

NodeId ComputeGraph::linear(NodeId in, const std::string& prefix, std::size_t out_features) {
  const std::size_t fan_in = shape_numel(checked(in).out_shape);
  Node n;
  n.kind = OpKind::Linear;
  n.input = in;
  n.out_shape = {out_features};
  n.weight = prefix + ".weight";
  n.bias = prefix + ".bias";
  params_.push_back({n.weight, {out_features, fan_in}});
  params_.push_back({n.bias, {out_features}});
  return push(std::move(n));
}

NodeId ComputeGraph::bilinear_upsample(NodeId in, std::size_t out_h, std::size_t out_w) {
  const Shape& s = spatial(checked(in), in);
  if (out_h == 0 || out_w == 0) throw ShapeError("bilinear_upsample: empty output");
  Node n;
  n.kind = OpKind::BilinearUpsample;
  n.input = in;
  n.out_shape = {s[0], out_h, out_w};
  return push(std::move(n));
}

NodeId ComputeGraph::clamp(NodeId in, double lo, double hi) {
  if (!(lo < hi)) throw std::invalid_argument("clamp: lo must be < hi");
  Node n;
  n.kind = OpKind::Clamp;
  n.input = in;
  n.lo = lo;
  n.hi = hi;
  n.out_shape = checked(in).out_shape;
  return push(std::move(n));
}

NodeId ComputeGraph::add(NodeId a, NodeId b) {
  if (checked(a).out_shape != checked(b).out_shape)
    throw ShapeError("add: " + shape_str(nodes_[a].out_shape) + " vs " + shape_str(nodes_[b].out_shape));
  Node n;
  n.kind = OpKind::Add;
  n.input = a;
  n.input2 = b;
  n.out_shape = nodes_[a].out_shape;
  return push(std::move(n));
}

void ComputeGraph::tap(NodeId id) {
  checked(id);
  if (std::find(taps_.begin(), taps_.end(), id) == taps_.end()) taps_.push_back(id);
}

// ---------------------------------------------------------------------------
// Kernels

namespace {

struct Interp {
  std::size_t i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<Interp> interp_axis(std::size_t in, std::size_t out) {
  std::vector<Interp> r(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    auto i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    r[o] = {i0, i1, i1 == i0 ? 0.0 : src - static_cast<double>(i0)};
  }
  return r;
}

// planes: number of independent h x w planes
void upsample_fwd(const double* in, double* out, std::size_t planes, std::size_t h,
                  std::size_t w, std::size_t oh, std::size_t ow) {
  const auto ry = interp_axis(h, oh);
  const auto rx = interp_axis(w, ow);
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = in + p * h * w;
    double* dst = out + p * oh * ow;
    for (std::size_t y = 0; y < oh; ++y) {
      const auto& a = ry[y];
      for (std::size_t x = 0; x < ow; ++x) {
        const auto& b = rx[x];
        const double top = src[a.i0 * w + b.i0] * (1 - b.w1) + src[a.i0 * w + b.i1] * b.w1;
        const double bot = src[a.i1 * w + b.i0] * (1 - b.w1) + src[a.i1 * w + b.i1] * b.w1;
        dst[y * ow + x] = top * (1 - a.w1) + bot * a.w1;
      }
    }
  }
}

void upsample_bwd(const double* dout, double* din, std::size_t planes, std::size_t h,
                  std::size_t w, std::size_t oh, std::size_t ow) {
  const auto ry = interp_axis(h, oh);
  const auto rx = interp_axis(w, ow);
  for (std::size_t p = 0; p < planes; ++p) {
    const double* g = dout + p * oh * ow;
    double* d = din + p * h * w;
    for (std::size_t y = 0; y < oh; ++y) {
      const auto& a = ry[y];
      for (std::size_t x = 0; x < ow; ++x) {
        const auto& b = rx[x];
        const double v = g[y * ow + x];
        d[a.i0 * w + b.i0] += v * (1 - a.w1) * (1 - b.w1);
        d[a.i0 * w + b.i1] += v * (1 - a.w1) * b.w1;
        d[a.i1 * w + b.i0] += v * a.w1 * (1 - b.w1);
        d[a.i1 * w + b.i1] += v * a.w1 * b.w1;
      }
    }
  }
}

struct ConvDims {
  std::size_t n, ci, h, w, co, oh, ow, k, s;
  long p;
};

// Output positions o in [lo, hi) whose input index o*s + k - p is in [0, n).
std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t n, std::size_t s,
                                                std::size_t k, long p) {
  const long off = static_cast<long>(k) - p;
  const long ls = static_cast<long>(s);
  long lo = off >= 0 ? 0 : (-off + ls - 1) / ls;
  long hi = (static_cast<long>(n) - 1 - off) / ls + 1;
  if (static_cast<long>(n) - 1 - off < 0) hi = 0;
  hi = std::min(hi, static_cast<long>(out));
  lo = std::min(lo, hi);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// col[(c*k + ky)*k + kx][oy*ow + ox] = in[c][oy*s + ky - p][ox*s + kx - p], 0 off-image
void im2col(const ConvDims& d, const double* src, double* col) {
  const std::size_t hw = d.oh * d.ow;
  for (std::size_t c = 0; c < d.ci; ++c)
    for (std::size_t ky = 0; ky < d.k; ++ky) {
      const auto [y0, y1] = valid_range(d.oh, d.h, d.s, ky, d.p);
      for (std::size_t kx = 0; kx < d.k; ++kx) {
        const auto [x0, x1] = valid_range(d.ow, d.w, d.s, kx, d.p);
        double* dst = col + ((c * d.k + ky) * d.k + kx) * hw;
        std::fill(dst, dst + hw, 0.0);
        const std::size_t len = x1 - x0, ix0 = x0 * d.s + kx - static_cast<std::size_t>(d.p);
        for (std::size_t oy = y0; oy < y1; ++oy) {
          const double* row = src + (c * d.h + oy * d.s + ky - static_cast<std::size_t>(d.p)) * d.w + ix0;
          double* orow = dst + oy * d.ow + x0;
          for (std::size_t j = 0; j < len; ++j) orow[j] = row[j * d.s];
        }
      }
    }
}

// adjoint of im2col: scatter-adds col back onto the image
void col2im(const ConvDims& d, const double* col, double* dst) {
  const std::size_t hw = d.oh * d.ow;
  for (std::size_t c = 0; c < d.ci; ++c)
    for (std::size_t ky = 0; ky < d.k; ++ky) {
      const auto [y0, y1] = valid_range(d.oh, d.h, d.s, ky, d.p);
      for (std::size_t kx = 0; kx < d.k; ++kx) {
        const auto [x0, x1] = valid_range(d.ow, d.w, d.s, kx, d.p);
        const double* src = col + ((c * d.k + ky) * d.k + kx) * hw;
        const std::size_t len = x1 - x0, ix0 = x0 * d.s + kx - static_cast<std::size_t>(d.p);
        for (std::size_t oy = y0; oy < y1; ++oy) {
          double* row = dst + (c * d.h + oy * d.s + ky - static_cast<std::size_t>(d.p)) * d.w + ix0;
          const double* crow = src + oy * d.ow + x0;
          for (std::size_t j = 0; j < len; ++j) row[j * d.s] += crow[j];
        }
      }
    }
}

std::vector<double>& scratch(int slot, std::size_t n) {
  thread_local std::vector<double> bufs[2];
  auto& b = bufs[slot];
  if (b.size() < n) b.resize(n);
  return b;
}

void conv_fwd(const ConvDims& d, const double* in, const double* wt, const double* bias,
              double* out) {
  const std::size_t hw = d.oh * d.ow, kk = d.ci * d.k * d.k;
  double* col = scratch(0, kk * hw).data();
  for (std::size_t n = 0; n < d.n; ++n) {
    im2col(d, in + n * d.ci * d.h * d.w, col);
    for (std::size_t o = 0; o < d.co; ++o) {
      double* dst = out + (n * d.co + o) * hw;
      std::fill(dst, dst + hw, bias[o]);
      const double* w = wt + o * kk;
      for (std::size_t r = 0; r < kk; ++r) {
        const double wv = w[r];
        const double* cr = col + r * hw;
        for (std::size_t i = 0; i < hw; ++i) dst[i] += wv * cr[i];
      }
    }
  }
}

void conv_bwd(const ConvDims& d, const double* in, const double* wt, const double* gout,
              double* gin, double* gw, double* gb) {
  const std::size_t hw = d.oh * d.ow, kk = d.ci * d.k * d.k;
  double* col = scratch(0, kk * hw).data();
  double* gcol = scratch(1, kk * hw).data();
  for (std::size_t n = 0; n < d.n; ++n) {
    im2col(d, in + n * d.ci * d.h * d.w, col);
    std::fill(gcol, gcol + kk * hw, 0.0);
    for (std::size_t o = 0; o < d.co; ++o) {
      const double* g = gout + (n * d.co + o) * hw;
      double bsum = 0.0;
      for (std::size_t i = 0; i < hw; ++i) bsum += g[i];
      gb[o] += bsum;
      const double* w = wt + o * kk;
      double* gwo = gw + o * kk;
      for (std::size_t r = 0; r < kk; ++r) {
        const double* cr = col + r * hw;
        double* gr = gcol + r * hw;
        const double wv = w[r];
        double acc = 0.0;
        for (std::size_t i = 0; i < hw; ++i) {
          acc += g[i] * cr[i];
          gr[i] += wv * g[i];
        }
        gwo[r] += acc;
      }
    }
    col2im(d, gcol, gin + n * d.ci * d.h * d.w);
  }
}

// Transposed convolution: weight [ci, co, k, k]; input pixel (iy, ix) scatters
// to output (iy*s - p + ky, ix*s - p + kx).
void convt_fwd(const ConvDims& d, const double* in, const double* wt, const double* bias,
               double* out) {
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t o = 0; o < d.co; ++o) {
      double* dst = out + (n * d.co + o) * d.oh * d.ow;
      std::fill(dst, dst + d.oh * d.ow, bias[o]);
    }
    for (std::size_t c = 0; c < d.ci; ++c) {
      const double* src = in + (n * d.ci + c) * d.h * d.w;
      for (std::size_t o = 0; o < d.co; ++o) {
        double* dst = out + (n * d.co + o) * d.oh * d.ow;
        for (std::size_t ky = 0; ky < d.k; ++ky)
          for (std::size_t kx = 0; kx < d.k; ++kx) {
            const double wv = wt[((c * d.co + o) * d.k + ky) * d.k + kx];
            for (std::size_t iy = 0; iy < d.h; ++iy) {
              const long oy = static_cast<long>(iy * d.s + ky) - d.p;
              if (oy < 0 || oy >= static_cast<long>(d.oh)) continue;
              double* orow = dst + static_cast<std::size_t>(oy) * d.ow;
              const double* row = src + iy * d.w;
              for (std::size_t ix = 0; ix < d.w; ++ix) {
                const long ox = static_cast<long>(ix * d.s + kx) - d.p;
                if (ox < 0 || ox >= static_cast<long>(d.ow)) continue;
                orow[ox] += wv * row[ix];
              }
            }
          }
      }
    }
  }
}

void convt_bwd(const ConvDims& d, const double* in, const double* wt, const double* gout,
               double* gin, double* gw, double* gb) {
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t o = 0; o < d.co; ++o) {
      const double* g = gout + (n * d.co + o) * d.oh * d.ow;
      double bsum = 0.0;
      for (std::size_t i = 0; i < d.oh * d.ow; ++i) bsum += g[i];
      gb[o] += bsum;
    }
    for (std::size_t c = 0; c < d.ci; ++c) {
      const double* src = in + (n * d.ci + c) * d.h * d.w;
      double* gsrc = gin + (n * d.ci + c) * d.h * d.w;
      for (std::size_t o = 0; o < d.co; ++o) {
        const double* g = gout + (n * d.co + o) * d.oh * d.ow;
        for (std::size_t ky = 0; ky < d.k; ++ky)
          for (std::size_t kx = 0; kx < d.k; ++kx) {
            const std::size_t wi = ((c * d.co + o) * d.k + ky) * d.k + kx;
            const double wv = wt[wi];
            double acc = 0.0;
            for (std::size_t iy = 0; iy < d.h; ++iy) {
              const long oy = static_cast<long>(iy * d.s + ky) - d.p;
              if (oy < 0 || oy >= static_cast<long>(d.oh)) continue;
              const double* orow = g + static_cast<std::size_t>(oy) * d.ow;
              const double* row = src + iy * d.w;
              double* grow = gsrc + iy * d.w;
              for (std::size_t ix = 0; ix < d.w; ++ix) {
                const long ox = static_cast<long>(ix * d.s + kx) - d.p;
                if (ox < 0 || ox >= static_cast<long>(d.ow)) continue;
                acc += orow[ox] * row[ix];
                grow[ix] += wv * orow[ox];
              }
            }
            gw[wi] += acc;
          }
      }
    }
  }
}

Shape batched(std::size_t n, const Shape& s) {
  Shape out;
  out.reserve(s.size() + 1);
  out.push_back(n);
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

const Tensor& param_checked(const ParamSet& params, const std::string& name, const Shape& shape,
                            NodeId id) {
  if (!params.contains(name))
    throw ShapeError("node " + std::to_string(id) + ": missing parameter '" + name + "'");
  const Tensor& t = params.get(name);
  if (t.shape() != shape)
    throw ShapeError("node " + std::to_string(id) + ": parameter '" + name + "' has shape " +
                     shape_str(t.shape()) + ", expected " + shape_str(shape));
  return t;
}

ConvDims conv_dims(const Node& node, const Shape& in_shape, std::size_t batch) {
  return {batch,          in_shape[0],      in_shape[1], in_shape[2],
          node.out_shape[0], node.out_shape[1], node.out_shape[2], node.kernel,
          node.stride,    static_cast<long>(node.pad)};
}

}  // namespace

Tensor bilinear_resize(const Tensor& src, std::size_t out_h, std::size_t out_w) {
  if (src.rank() < 2 || out_h == 0 || out_w == 0)
    throw ShapeError("bilinear_resize: need at least 2 dims, got " + shape_str(src.shape()));
  const std::size_t h = src.dim(src.rank() - 2);
  const std::size_t w = src.dim(src.rank() - 1);
  Shape s = src.shape();
  s[s.size() - 2] = out_h;
  s[s.size() - 1] = out_w;
  Tensor out(s);
  upsample_fwd(src.data().data(), out.data().data(), src.size() / (h * w), h, w, out_h, out_w);
  return out;
}

// ---------------------------------------------------------------------------
// forward / backward

struct TapeAccess {
  static Tape& init(Tape& t, const ComputeGraph& g, const ParamSet& p, Mode m, std::size_t n) {
    t.graph_ = &g;
    t.params_ = &p;
    t.mode_ = m;
    t.batch_ = n;
    t.values_.assign(g.nodes().size(), Tensor());
    t.argmax_.assign(g.nodes().size(), {});
    t.xhat_.assign(g.nodes().size(), Tensor());
    t.inv_std_.assign(g.nodes().size(), {});
    return t;
  }
  static std::vector<Tensor>& values(Tape& t) { return t.values_; }
  static std::vector<std::size_t>& argmax(Tape& t, NodeId i) { return t.argmax_[i]; }
  static Tensor& xhat(Tape& t, NodeId i) { return t.xhat_[i]; }
  static std::vector<double>& inv_std(Tape& t, NodeId i) { return t.inv_std_[i]; }
  static const ComputeGraph* graph(const Tape& t) { return t.graph_; }
  static const ParamSet* params(const Tape& t) { return t.params_; }
  static Mode mode(const Tape& t) { return t.mode_; }
  static const std::vector<std::size_t>& argmax(const Tape& t, NodeId i) { return t.argmax_[i]; }
  static const Tensor& xhat(const Tape& t, NodeId i) { return t.xhat_[i]; }
  static const std::vector<double>& inv_std(const Tape& t, NodeId i) { return t.inv_std_[i]; }
};

ForwardResult forward(const ComputeGraph& graph, const ParamSet& params, const Tensor& input,
                      Mode mode, ParamSet* buffers) {
  const auto& nodes = graph.nodes();
  if (input.rank() != graph.input_shape().size() + 1 ||
      !std::equal(graph.input_shape().begin(), graph.input_shape().end(),
                  input.shape().begin() + 1))
    throw ShapeError("node 0: input shape " + shape_str(input.shape()) + " does not match [N]+" +
                     shape_str(graph.input_shape()));
  const std::size_t batch = input.dim(0);

  ForwardResult result;
  Tape& tape = TapeAccess::init(result.tape, graph, params, mode, batch);
  auto& vals = TapeAccess::values(tape);
  vals[0] = input;

  for (NodeId id = 1; id < nodes.size(); ++id) {
    const Node& node = nodes[id];
    const Tensor& x = vals[node.input];
    const Shape& in_shape = nodes[node.input].out_shape;
    Tensor y(batched(batch, node.out_shape));
    switch (node.kind) {
      case OpKind::Input:
        throw ContractError("input node in graph body");
      case OpKind::Conv2d:
      case OpKind::ConvTranspose2d: {
        const ConvDims d = conv_dims(node, in_shape, batch);
        const Shape wshape = node.kind == OpKind::Conv2d
                                 ? Shape{d.co, d.ci, d.k, d.k}
                                 : Shape{d.ci, d.co, d.k, d.k};
        const Tensor& w = param_checked(params, node.weight, wshape, id);
        const Tensor& b = param_checked(params, node.bias, {d.co}, id);
        if (node.kind == OpKind::Conv2d)
          conv_fwd(d, x.data().data(), w.data().data(), b.data().data(), y.data().data());
        else
          convt_fwd(d, x.data().data(), w.data().data(), b.data().data(), y.data().data());
        break;
      }
      case OpKind::MaxPool2d: {
        const std::size_t c = in_shape[0], h = in_shape[1], w = in_shape[2];
        const std::size_t oh = node.out_shape[1], ow = node.out_shape[2];
        auto& arg = TapeAccess::argmax(tape, id);
        arg.resize(y.size());
        for (std::size_t p = 0; p < batch * c; ++p)
          for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
              std::size_t best = p * h * w + oy * node.stride * w + ox * node.stride;
              for (std::size_t ky = 0; ky < node.kernel; ++ky)
                for (std::size_t kx = 0; kx < node.kernel; ++kx) {
                  const std::size_t idx =
                      p * h * w + (oy * node.stride + ky) * w + ox * node.stride + kx;
                  if (x[idx] > x[best]) best = idx;
                }
              const std::size_t o = (p * oh + oy) * ow + ox;
              y[o] = x[best];
              arg[o] = best;
            }
        break;
      }
      case OpKind::GlobalAvgPool: {
        const std::size_t hw = in_shape[1] * in_shape[2];
        for (std::size_t p = 0; p < batch * in_shape[0]; ++p) {
          double s = 0.0;
          for (std::size_t i = 0; i < hw; ++i) s += x[p * hw + i];
          y[p] = s / static_cast<double>(hw);
        }
        break;
      }
      case OpKind::Relu:
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
        break;
      case OpKind::LeakyRelu:
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : node.slope * x[i];
        break;
      case OpKind::Clamp:
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::clamp(x[i], node.lo, node.hi);
        break;
      case OpKind::Add: {
        const Tensor& x2 = vals[node.input2];
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] + x2[i];
        break;
      }
      case OpKind::BatchNorm2d: {
        const std::size_t c = in_shape[0], hw = in_shape[1] * in_shape[2];
        const Tensor& gamma = param_checked(params, node.weight, {c}, id);
        const Tensor& beta = param_checked(params, node.bias, {c}, id);
        if (buffers == nullptr)
          throw ContractError("node " + std::to_string(id) + ": batch norm needs buffers");
        param_checked(*buffers, node.running_mean, {c}, id);
        param_checked(*buffers, node.running_var, {c}, id);
        Tensor& rmean = buffers->get(node.running_mean);
        Tensor& rvar = buffers->get(node.running_var);
        Tensor& xhat = TapeAccess::xhat(tape, id);
        xhat = Tensor(y.shape());
        auto& inv = TapeAccess::inv_std(tape, id);
        inv.assign(c, 0.0);
        const double count = static_cast<double>(batch * hw);
        for (std::size_t ch = 0; ch < c; ++ch) {
          double mean = 0.0, var = 0.0;
          if (mode == Mode::Train) {
            for (std::size_t n = 0; n < batch; ++n)
              for (std::size_t i = 0; i < hw; ++i) mean += x[(n * c + ch) * hw + i];
            mean /= count;
            for (std::size_t n = 0; n < batch; ++n)
              for (std::size_t i = 0; i < hw; ++i) {
                const double dv = x[(n * c + ch) * hw + i] - mean;
                var += dv * dv;
              }
            var /= count;
            const double unbiased = count > 1 ? var * count / (count - 1) : var;
            rmean[ch] = (1 - node.momentum) * rmean[ch] + node.momentum * mean;
            rvar[ch] = (1 - node.momentum) * rvar[ch] + node.momentum * unbiased;
          } else {
            mean = rmean[ch];
            var = rvar[ch];
          }
          const double is = 1.0 / std::sqrt(var + node.eps);
          inv[ch] = is;
          for (std::size_t n = 0; n < batch; ++n)
            for (std::size_t i = 0; i < hw; ++i) {
              const std::size_t k = (n * c + ch) * hw + i;
              xhat[k] = (x[k] - mean) * is;
              y[k] = gamma[ch] * xhat[k] + beta[ch];
            }
        }
        break;
      }
      case OpKind::Linear: {
        const std::size_t fin = shape_numel(in_shape), fout = node.out_shape[0];
        const Tensor& w = param_checked(params, node.weight, {fout, fin}, id);
        const Tensor& b = param_checked(params, node.bias, {fout}, id);
        for (std::size_t n = 0; n < batch; ++n)
          for (std::size_t o = 0; o < fout; ++o) {
            double s = b[o];
            const double* wr = w.data().data() + o * fin;
            const double* xr = x.data().data() + n * fin;
            for (std::size_t i = 0; i < fin; ++i) s += wr[i] * xr[i];
            y[n * fout + o] = s;
          }
        break;
      }
      case OpKind::BilinearUpsample:
        upsample_fwd(x.data().data(), y.data().data(), batch * in_shape[0], in_shape[1],
                     in_shape[2], node.out_shape[1], node.out_shape[2]);
        break;
    }
    vals[id] = std::move(y);
  }
  result.output = vals.back();
  return result;
}

Gradients backward(const Tape& tape, const Tensor& loss_grad) {
  if (!tape.valid()) throw ContractError("backward called without a forward tape");
  const ComputeGraph& graph = *TapeAccess::graph(tape);
  const ParamSet& params = *TapeAccess::params(tape);
  const auto& nodes = graph.nodes();
  if (loss_grad.shape() != tape.output().shape())
    throw ShapeError("loss gradient shape " + shape_str(loss_grad.shape()) +
                     " does not match output " + shape_str(tape.output().shape()));

  const std::size_t batch = tape.batch();
  Gradients out;
  out.params = params.zeros_like();
  std::vector<Tensor> grads(nodes.size());
  grads.back() = loss_grad;

  for (NodeId id = nodes.size() - 1; id >= 1; --id) {
    const Node& node = nodes[id];
    if (grads[id].empty()) continue;  // no path from the output
    const Tensor& gy = grads[id];
    const Tensor& x = tape.value(node.input);
    const Tensor& y = tape.value(id);
    const Shape& in_shape = nodes[node.input].out_shape;
    Tensor& gx = grads[node.input];
    if (gx.empty()) gx = Tensor(x.shape(), 0.0);

    switch (node.kind) {
      case OpKind::Input:
        break;
      case OpKind::Conv2d:
      case OpKind::ConvTranspose2d: {
        const ConvDims d = conv_dims(node, in_shape, batch);
        const Tensor& w = params.get(node.weight);
        Tensor& gw = out.params.get(node.weight);
        Tensor& gb = out.params.get(node.bias);
        if (node.kind == OpKind::Conv2d)
          conv_bwd(d, x.data().data(), w.data().data(), gy.data().data(), gx.data().data(),
                   gw.data().data(), gb.data().data());
        else
          convt_bwd(d, x.data().data(), w.data().data(), gy.data().data(), gx.data().data(),
                    gw.data().data(), gb.data().data());
        break;
      }
      case OpKind::MaxPool2d: {
        const auto& arg = TapeAccess::argmax(tape, id);
        for (std::size_t o = 0; o < gy.size(); ++o) gx[arg[o]] += gy[o];
        break;
      }
      case OpKind::GlobalAvgPool: {
        const std::size_t hw = in_shape[1] * in_shape[2];
        for (std::size_t p = 0; p < gy.size(); ++p)
          for (std::size_t i = 0; i < hw; ++i) gx[p * hw + i] += gy[p] / static_cast<double>(hw);
        break;
      }
      case OpKind::Relu:
        for (std::size_t i = 0; i < gy.size(); ++i)
          if (x[i] > 0.0) gx[i] += gy[i];
        break;
      case OpKind::LeakyRelu:
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += x[i] > 0.0 ? gy[i] : node.slope * gy[i];
        break;
      case OpKind::Clamp:
        for (std::size_t i = 0; i < gy.size(); ++i)
          if (x[i] >= node.lo && x[i] <= node.hi) gx[i] += gy[i];
        break;
      case OpKind::Add: {
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
        Tensor& gx2 = grads[node.input2];
        if (gx2.empty()) gx2 = Tensor(tape.value(node.input2).shape(), 0.0);
        for (std::size_t i = 0; i < gy.size(); ++i) gx2[i] += gy[i];
        break;
      }
      case OpKind::BatchNorm2d: {
        const std::size_t c = in_shape[0], hw = in_shape[1] * in_shape[2];
        const Tensor& gamma = params.get(node.weight);
        Tensor& ggamma = out.params.get(node.weight);
        Tensor& gbeta = out.params.get(node.bias);
        const Tensor& xhat = TapeAccess::xhat(tape, id);
        const auto& inv = TapeAccess::inv_std(tape, id);
        const double count = static_cast<double>(batch * hw);
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sg = 0.0, sgx = 0.0;
          for (std::size_t n = 0; n < batch; ++n)
            for (std::size_t i = 0; i < hw; ++i) {
              const std::size_t k = (n * c + ch) * hw + i;
              sg += gy[k];
              sgx += gy[k] * xhat[k];
            }
          ggamma[ch] += sgx;
          gbeta[ch] += sg;
          const double scale = gamma[ch] * inv[ch];
          for (std::size_t n = 0; n < batch; ++n)
            for (std::size_t i = 0; i < hw; ++i) {
              const std::size_t k = (n * c + ch) * hw + i;
              if (TapeAccess::mode(tape) == Mode::Train)
                gx[k] += scale * (gy[k] - sg / count - xhat[k] * sgx / count);
              else
                gx[k] += scale * gy[k];
            }
        }
        break;
      }
      case OpKind::Linear: {
        const std::size_t fin = shape_numel(in_shape), fout = node.out_shape[0];
        const Tensor& w = params.get(node.weight);
        Tensor& gw = out.params.get(node.weight);
        Tensor& gb = out.params.get(node.bias);
        for (std::size_t n = 0; n < batch; ++n)
          for (std::size_t o = 0; o < fout; ++o) {
            const double g = gy[n * fout + o];
            if (g == 0.0) continue;
            gb[o] += g;
            double* gwr = gw.data().data() + o * fin;
            const double* wr = w.data().data() + o * fin;
            const double* xr = x.data().data() + n * fin;
            double* gxr = gx.data().data() + n * fin;
            for (std::size_t i = 0; i < fin; ++i) {
              gwr[i] += g * xr[i];
              gxr[i] += g * wr[i];
            }
          }
        break;
      }
      case OpKind::BilinearUpsample:
        upsample_bwd(gy.data().data(), gx.data().data(), batch * in_shape[0], in_shape[1],
                     in_shape[2], node.out_shape[1], node.out_shape[2]);
        break;
    }
    (void)y;
  }

  for (NodeId t : graph.taps())
    out.taps.emplace(t, grads[t].empty() ? Tensor(tape.value(t).shape(), 0.0) : grads[t]);
  out.input = grads[0].empty() ? Tensor(tape.value(0).shape(), 0.0) : std::move(grads[0]);
  return out;
}

void sgd_step(ParamSet& params, const ParamSet& grads, double step_size) {
  if (!(step_size > 0.0)) throw std::invalid_argument("sgd_step: step size must be positive");
  if (!params.same_layout(grads)) throw ShapeError("sgd_step: gradient layout mismatch");
  for (std::size_t i = 0; i < params.count(); ++i) {
    auto p = params.at(i).data();
    auto g = grads.at(i).data();
    for (std::size_t k = 0; k < p.size(); ++k) p[k] -= step_size * g[k];
  }
}

LossResult softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw ShapeError("softmax_cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  LossResult r{0.0, Tensor(logits.shape(), 0.0)};
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k)
      throw std::out_of_range("label " + std::to_string(labels[i]) + " outside [0," +
                              std::to_string(k) + ")");
    const double* row = logits.data().data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    r.value += lse - row[labels[i]];
    for (std::size_t j = 0; j < k; ++j) {
      const double p = std::exp(row[j] - lse);
      r.grad[i * k + j] = (p - (static_cast<int>(j) == labels[i] ? 1.0 : 0.0)) / static_cast<double>(n);
    }
  }
  r.value /= static_cast<double>(n);
  return r;
}

LossResult mean_squared_error(const Tensor& prediction, const Tensor& target) {
  if (prediction.shape() != target.shape())
    throw ShapeError("mean_squared_error: " + shape_str(prediction.shape()) + " vs " +
                     shape_str(target.shape()));
  LossResult r{0.0, Tensor(prediction.shape(), 0.0)};
  const double n = static_cast<double>(prediction.size());
  for (std::size_t i = 0; i < prediction.size(); ++i) {
    const double d = prediction[i] - target[i];
    r.value += d * d;
    r.grad[i] = 2.0 * d / n;
  }
  r.value /= n;
  return r;
}

void init_params(const ComputeGraph& graph, ParamSet& params, ParamSet* buffers,
                 std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (const auto& spec : graph.param_specs()) {
    if (params.contains(spec.name)) continue;
    Tensor t(spec.shape, 0.0);
    const bool is_bias = spec.name.ends_with(".bias");
    const bool is_bn_scale = spec.shape.size() == 1 && !is_bias;
    if (is_bn_scale) {
      t.fill(1.0);
    } else if (!is_bias) {
      // fan-in: every dim except the leading one (for transposed conv the
      // leading dim is the input channel count, so use dims 1.. as well)
      std::size_t fan_in = 1;
      for (std::size_t i = 1; i < spec.shape.size(); ++i) fan_in *= spec.shape[i];
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
      for (auto& v : t.vec()) v = dist(rng);
    }
    params.add(spec.name, std::move(t));
  }
  if (buffers == nullptr) return;
  for (const auto& spec : graph.buffer_specs()) {
    if (buffers->contains(spec.name)) continue;
    buffers->add(spec.name, Tensor(spec.shape, spec.name.ends_with("running_var") ? 1.0 : 0.0));
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

std::vector<std::uint8_t> encode_checkpoint(const ParamSet& params) {
  ByteWriter w;
  w.raw("SAMC");
  w.u32(kCheckpointVersion);
  for (std::size_t i = 0; i < params.count(); ++i) {
    const auto& name = params.name(i);
    const auto& t = params.at(i);
    w.u64(name.size());
    w.raw(name);
    w.u64(t.rank());
    for (auto d : t.shape()) w.u64(d);
    for (double v : t.data()) w.f64(v);
  }
  return std::move(w.bytes());
}

ParamSet decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.raw(4) != "SAMC") throw FormatError("checkpoint: bad magic");
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  ParamSet params;
  while (!r.done()) {
    const auto len = r.u64();
    if (len > r.remaining()) throw FormatError("checkpoint: name length exceeds file");
    std::string name = r.raw(len);
    const auto rank = r.u64();
    if (rank == 0 || rank > 8) throw FormatError("checkpoint: bad rank for '" + name + "'");
    Shape shape(rank);
    for (auto& d : shape) {
      d = r.u64();
      if (d == 0) throw FormatError("checkpoint: zero dimension in '" + name + "'");
    }
    const std::size_t n = shape_numel(shape);
    if (n > r.remaining() / 8) throw FormatError("checkpoint: data for '" + name + "' truncated");
    std::vector<double> data(n);
    for (auto& v : data) v = r.f64();
    params.add(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return params;
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void save_checkpoint(const std::filesystem::path& path, const ParamSet& params) {
  write_file(path.string(), encode_checkpoint(params));
}

ParamSet load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path.string()));
}

}  // namespace samc
