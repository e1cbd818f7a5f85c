#include "hmeta/graph.hpp"

#include <cmath>
#include <limits>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "hmeta/errors.hpp"
#include "hmeta/tensor_ops.hpp"
#include "detail_matmul.hpp"

namespace hmeta {

namespace {

// Graph buffers are allocated and freed once per forward/backward pass. With
// default glibc settings the freed pages go straight back to the kernel and
// every pass re-faults them in, which roughly doubles training time. Keep
// freed blocks in the arena instead.
#if defined(__GLIBC__)
[[maybe_unused]] const int kMallocTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, std::numeric_limits<int>::max());
  return 0;
}();
#endif

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

std::int64_t rows_before_last(const Tensor& t) {
  return t.size() / t.shape().back();
}

}  // namespace

int Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Graph::Node& Graph::at(Val v) {
  if (v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
    throw ContractError("graph handle out of range");
  return nodes_[v.id];
}

const Tensor* Graph::grad(Val v) const {
  const Node& n = nodes_[v.id];
  return n.grad.empty() ? nullptr : &n.grad;
}

Val Graph::leaf(Parameter& p) {
  Node n;
  n.op = Op::kLeaf;
  n.needs_grad = true;
  n.value = p.value;
  n.param = &p;
  return {push(std::move(n))};
}

Val Graph::constant(Tensor t) {
  Node n;
  n.op = Op::kConstant;
  n.value = std::move(t);
  return {push(std::move(n))};
}

Val Graph::add(Val a, Val b) {
  Node& na = at(a);
  Node& nb = at(b);
  if (!na.value.same_shape(nb.value))
    throw ShapeError("add shapes differ: " + na.value.shape_str() + " vs " +
                     nb.value.shape_str());
  Node n;
  n.op = Op::kAdd;
  n.needs_grad = na.needs_grad || nb.needs_grad;
  n.in0 = a.id;
  n.in1 = b.id;
  n.value = na.value;
  const double* pb = nb.value.data();
  double* po = n.value.data();
  for (std::int64_t i = 0; i < n.value.size(); ++i) po[i] += pb[i];
  return {push(std::move(n))};
}

Val Graph::sub(Val a, Val b) {
  Node& na = at(a);
  Node& nb = at(b);
  if (!na.value.same_shape(nb.value))
    throw ShapeError("sub shapes differ: " + na.value.shape_str() + " vs " +
                     nb.value.shape_str());
  Node n;
  n.op = Op::kSub;
  n.needs_grad = na.needs_grad || nb.needs_grad;
  n.in0 = a.id;
  n.in1 = b.id;
  n.value = na.value;
  const double* pb = nb.value.data();
  double* po = n.value.data();
  for (std::int64_t i = 0; i < n.value.size(); ++i) po[i] -= pb[i];
  return {push(std::move(n))};
}

Val Graph::mul(Val a, Val b) {
  Node& na = at(a);
  Node& nb = at(b);
  if (!na.value.same_shape(nb.value))
    throw ShapeError("mul shapes differ: " + na.value.shape_str() + " vs " +
                     nb.value.shape_str());
  Node n;
  n.op = Op::kMul;
  n.needs_grad = na.needs_grad || nb.needs_grad;
  n.in0 = a.id;
  n.in1 = b.id;
  n.value = na.value;
  const double* pb = nb.value.data();
  double* po = n.value.data();
  for (std::int64_t i = 0; i < n.value.size(); ++i) po[i] *= pb[i];
  return {push(std::move(n))};
}

Val Graph::neg(Val a) {
  Node& na = at(a);
  Node n;
  n.op = Op::kNeg;
  n.needs_grad = na.needs_grad;
  n.in0 = a.id;
  n.value = na.value;
  for (double& v : n.value.values()) v = -v;
  return {push(std::move(n))};
}

Val Graph::scale(Val a, double c) {
  Node& na = at(a);
  Node n;
  n.op = Op::kScale;
  n.needs_grad = na.needs_grad;
  n.in0 = a.id;
  n.a0 = c;
  n.value = na.value;
  for (double& v : n.value.values()) v *= c;
  return {push(std::move(n))};
}

Val Graph::add_scalar(Val a, double c) {
  Node& na = at(a);
  Node n;
  n.op = Op::kAddScalar;
  n.needs_grad = na.needs_grad;
  n.in0 = a.id;
  n.a0 = c;
  n.value = na.value;
  for (double& v : n.value.values()) v += c;
  return {push(std::move(n))};
}

Val Graph::vmin(Val a, Val b) {
  Node& na = at(a);
  Node& nb = at(b);
  if (!na.value.same_shape(nb.value))
    throw ShapeError("vmin shapes differ");
  Node n;
  n.op = Op::kMin;
  n.needs_grad = na.needs_grad || nb.needs_grad;
  n.in0 = a.id;
  n.in1 = b.id;
  n.value = na.value;
  const double* pb = nb.value.data();
  double* po = n.value.data();
  for (std::int64_t i = 0; i < n.value.size(); ++i)
    if (pb[i] < po[i]) po[i] = pb[i];
  return {push(std::move(n))};
}

Val Graph::clamp(Val a, double lo, double hi) {
  Node& na = at(a);
  Node n;
  n.op = Op::kClamp;
  n.needs_grad = na.needs_grad;
  n.in0 = a.id;
  n.a0 = lo;
  n.a1 = hi;
  n.value = na.value;
  for (double& v : n.value.values()) {
    if (v < lo) v = lo;
    if (v > hi) v = hi;
  }
  return {push(std::move(n))};
}

Val Graph::gelu(Val a) {
  Node& na = at(a);
  Node n;
  n.op = Op::kGelu;
  n.needs_grad = na.needs_grad;
  n.in0 = a.id;
  n.value = na.value;
  for (double& v : n.value.values())
    v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  return {push(std::move(n))};
}

Val Graph::tanh(Val a) {
  Node& na = at(a);
  Node n;
  n.op = Op::kTanh;
  n.needs_grad = na.needs_grad;
  n.in0 = a.id;
  n.value = na.value;
  for (double& v : n.value.values()) v = std::tanh(v);
  return {push(std::move(n))};
}

Val Graph::sigmoid(Val a) {
  Node& na = at(a);
  Node n;
  n.op = Op::kSigmoid;
  n.needs_grad = na.needs_grad;
  n.in0 = a.id;
  n.value = na.value;
  for (double& v : n.value.values()) v = 1.0 / (1.0 + std::exp(-v));
  return {push(std::move(n))};
}

Val Graph::exp(Val a) {
  Node& na = at(a);
  Node n;
  n.op = Op::kExp;
  n.needs_grad = na.needs_grad;
  n.in0 = a.id;
  n.value = na.value;
  for (double& v : n.value.values()) v = std::exp(v);
  return {push(std::move(n))};
}

Val Graph::matmul(Val a, Val b) {
  Node& na = at(a);
  Node& nb = at(b);
  Node n;
  n.op = Op::kMatmul;
  n.needs_grad = na.needs_grad || nb.needs_grad;
  n.in0 = a.id;
  n.in1 = b.id;
  n.value = ops::matmul(na.value, nb.value);
  return {push(std::move(n))};
}

Val Graph::bmm_nn(Val a, Val b) {
  Node& na = at(a);
  Node& nb = at(b);
  const auto& sa = na.value.shape();
  const auto& sb = nb.value.shape();
  if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[2] != sb[1])
    throw ShapeError("bmm_nn shapes: " + na.value.shape_str() + " x " +
                     nb.value.shape_str());
  Node n;
  n.op = Op::kBmmNN;
  n.needs_grad = na.needs_grad || nb.needs_grad;
  n.in0 = a.id;
  n.in1 = b.id;
  n.value = Tensor({sa[0], sa[1], sb[2]});
  const std::int64_t B = sa[0], m = sa[1], k = sa[2], nn = sb[2];
  for (std::int64_t i = 0; i < B; ++i)
    detail::mm(na.value.data() + i * m * k, false,
               nb.value.data() + i * k * nn, false,
               n.value.data() + i * m * nn, m, nn, k, false);
  return {push(std::move(n))};
}

Val Graph::bmm_nt(Val a, Val b) {
  Node& na = at(a);
  Node& nb = at(b);
  const auto& sa = na.value.shape();
  const auto& sb = nb.value.shape();
  if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[2] != sb[2])
    throw ShapeError("bmm_nt shapes: " + na.value.shape_str() + " x " +
                     nb.value.shape_str());
  Node n;
  n.op = Op::kBmmNT;
  n.needs_grad = na.needs_grad || nb.needs_grad;
  n.in0 = a.id;
  n.in1 = b.id;
  n.value = Tensor({sa[0], sa[1], sb[1]});
  const std::int64_t B = sa[0], m = sa[1], k = sa[2], nn = sb[1];
  for (std::int64_t i = 0; i < B; ++i)
    detail::mm(na.value.data() + i * m * k, false,
               nb.value.data() + i * nn * k, true,
               n.value.data() + i * m * nn, m, nn, k, false);
  return {push(std::move(n))};
}

Val Graph::add_bias(Val x, Val b) {
  Node& nx = at(x);
  Node& nb = at(b);
  const std::int64_t d = nx.value.shape().back();
  if (nb.value.ndim() != 1 || nb.value.size() != d)
    throw ShapeError("add_bias bias must be [last extent]");
  Node n;
  n.op = Op::kAddBias;
  n.needs_grad = nx.needs_grad || nb.needs_grad;
  n.in0 = x.id;
  n.in1 = b.id;
  n.value = nx.value;
  const std::int64_t rows = rows_before_last(n.value);
  const double* pb = nb.value.data();
  double* po = n.value.data();
  for (std::int64_t r = 0; r < rows; ++r, po += d)
    for (std::int64_t j = 0; j < d; ++j) po[j] += pb[j];
  return {push(std::move(n))};
}

Val Graph::broadcast_row(Val v, std::int64_t rows) {
  Node& nv = at(v);
  if (nv.value.ndim() != 1) throw ShapeError("broadcast_row expects 1-d input");
  const std::int64_t d = nv.value.size();
  Node n;
  n.op = Op::kBroadcastRow;
  n.needs_grad = nv.needs_grad;
  n.in0 = v.id;
  n.value = Tensor({rows, d});
  double* po = n.value.data();
  const double* pv = nv.value.data();
  for (std::int64_t r = 0; r < rows; ++r, po += d)
    for (std::int64_t j = 0; j < d; ++j) po[j] = pv[j];
  return {push(std::move(n))};
}

Val Graph::reshape(Val a, std::vector<std::int64_t> shape) {
  Node& na = at(a);
  Node n;
  n.op = Op::kReshape;
  n.needs_grad = na.needs_grad;
  n.in0 = a.id;
  n.value = na.value.reshaped(std::move(shape));
  return {push(std::move(n))};
}

Val Graph::split_heads(Val x, std::int64_t heads) {
  Node& nx = at(x);
  const auto& s = nx.value.shape();
  if (s.size() != 3 || s[2] % heads != 0)
    throw ShapeError("split_heads expects [N,T,H*hd]");
  const std::int64_t N = s[0], T = s[1], hd = s[2] / heads;
  Node n;
  n.op = Op::kSplitHeads;
  n.needs_grad = nx.needs_grad;
  n.in0 = x.id;
  n.i0 = heads;
  n.value = Tensor({N * heads, T, hd});
  for (std::int64_t a = 0; a < N; ++a)
    for (std::int64_t h = 0; h < heads; ++h)
      for (std::int64_t t = 0; t < T; ++t) {
        const double* src = nx.value.data() + (a * T + t) * s[2] + h * hd;
        double* dst = n.value.data() + ((a * heads + h) * T + t) * hd;
        for (std::int64_t c = 0; c < hd; ++c) dst[c] = src[c];
      }
  return {push(std::move(n))};
}

Val Graph::merge_heads(Val x, std::int64_t heads) {
  Node& nx = at(x);
  const auto& s = nx.value.shape();
  if (s.size() != 3 || s[0] % heads != 0)
    throw ShapeError("merge_heads expects [N*H,T,hd]");
  const std::int64_t N = s[0] / heads, T = s[1], hd = s[2];
  Node n;
  n.op = Op::kMergeHeads;
  n.needs_grad = nx.needs_grad;
  n.in0 = x.id;
  n.i0 = heads;
  n.value = Tensor({N, T, heads * hd});
  for (std::int64_t a = 0; a < N; ++a)
    for (std::int64_t h = 0; h < heads; ++h)
      for (std::int64_t t = 0; t < T; ++t) {
        const double* src = nx.value.data() + ((a * heads + h) * T + t) * hd;
        double* dst = n.value.data() + (a * T + t) * heads * hd + h * hd;
        for (std::int64_t c = 0; c < hd; ++c) dst[c] = src[c];
      }
  return {push(std::move(n))};
}

Val Graph::concat_last(Val a, Val b) {
  Node& na = at(a);
  Node& nb = at(b);
  const auto& sa = na.value.shape();
  const auto& sb = nb.value.shape();
  if (sa.size() != sb.size() || sa.empty())
    throw ShapeError("concat_last rank mismatch");
  for (std::size_t i = 0; i + 1 < sa.size(); ++i)
    if (sa[i] != sb[i]) throw ShapeError("concat_last leading extents differ");
  const std::int64_t p = sa.back(), q = sb.back();
  std::vector<std::int64_t> so = sa;
  so.back() = p + q;
  Node n;
  n.op = Op::kConcatLast;
  n.needs_grad = na.needs_grad || nb.needs_grad;
  n.in0 = a.id;
  n.in1 = b.id;
  n.value = Tensor(so);
  const std::int64_t rows = rows_before_last(na.value);
  for (std::int64_t r = 0; r < rows; ++r) {
    double* dst = n.value.data() + r * (p + q);
    const double* pa = na.value.data() + r * p;
    const double* pb = nb.value.data() + r * q;
    for (std::int64_t j = 0; j < p; ++j) dst[j] = pa[j];
    for (std::int64_t j = 0; j < q; ++j) dst[p + j] = pb[j];
  }
  return {push(std::move(n))};
}

Val Graph::concat_rows(Val a, Val b) {
  Node& na = at(a);
  Node& nb = at(b);
  const auto& sa = na.value.shape();
  const auto& sb = nb.value.shape();
  if (sa.size() != sb.size() || sa.empty())
    throw ShapeError("concat_rows rank mismatch");
  for (std::size_t i = 1; i < sa.size(); ++i)
    if (sa[i] != sb[i]) throw ShapeError("concat_rows trailing extents differ");
  std::vector<std::int64_t> so = sa;
  so[0] = sa[0] + sb[0];
  Node n;
  n.op = Op::kConcatRows;
  n.needs_grad = na.needs_grad || nb.needs_grad;
  n.in0 = a.id;
  n.in1 = b.id;
  n.value = Tensor(so);
  double* dst = n.value.data();
  for (std::int64_t i = 0; i < na.value.size(); ++i) dst[i] = na.value[i];
  dst += na.value.size();
  for (std::int64_t i = 0; i < nb.value.size(); ++i) dst[i] = nb.value[i];
  return {push(std::move(n))};
}

Val Graph::take_last(Val x) {
  Node& nx = at(x);
  const auto& s = nx.value.shape();
  if (s.size() != 3) throw ShapeError("take_last expects [N,T,d]");
  const std::int64_t N = s[0], T = s[1], d = s[2];
  Node n;
  n.op = Op::kTakeLast;
  n.needs_grad = nx.needs_grad;
  n.in0 = x.id;
  n.value = Tensor({N, d});
  for (std::int64_t a = 0; a < N; ++a) {
    const double* src = nx.value.data() + (a * T + T - 1) * d;
    double* dst = n.value.data() + a * d;
    for (std::int64_t j = 0; j < d; ++j) dst[j] = src[j];
  }
  return {push(std::move(n))};
}

Val Graph::take_last_valid(Val x, Val mask) {
  Node& nx = at(x);
  Node& nm = at(mask);
  const auto& s = nx.value.shape();
  if (s.size() != 3) throw ShapeError("take_last_valid expects [N,T,d]");
  const std::int64_t N = s[0], T = s[1], d = s[2];
  if (nm.value.ndim() != 2 || nm.value.extent(0) != N || nm.value.extent(1) != T)
    throw ShapeError("take_last_valid mask must be [N,T]");
  Node n;
  n.op = Op::kTakeLastValid;
  n.needs_grad = nx.needs_grad;
  n.in0 = x.id;
  n.in1 = mask.id;
  n.value = Tensor({N, d});
  n.aux = Tensor({N});
  for (std::int64_t a = 0; a < N; ++a) {
    std::int64_t last = -1;
    for (std::int64_t t = T - 1; t >= 0; --t)
      if (nm.value.at(a, t) > 0.5) { last = t; break; }
    if (last < 0)
      throw ContractError("take_last_valid: sequence with no valid slots");
    n.aux[a] = static_cast<double>(last);
    const double* src = nx.value.data() + (a * T + last) * d;
    double* dst = n.value.data() + a * d;
    for (std::int64_t j = 0; j < d; ++j) dst[j] = src[j];
  }
  return {push(std::move(n))};
}

Val Graph::add_positional(Val x, Val mask, const Tensor& table) {
  Node& nx = at(x);
  Node& nm = at(mask);
  const auto& s = nx.value.shape();
  if (s.size() != 3) throw ShapeError("add_positional expects [N,T,d]");
  const std::int64_t N = s[0], T = s[1], d = s[2];
  if (nm.value.ndim() != 2 || nm.value.extent(0) != N || nm.value.extent(1) != T)
    throw ShapeError("add_positional mask must be [N,T]");
  if (table.ndim() != 2 || table.extent(0) < T || table.extent(1) != d)
    throw ShapeError("positional table too small for sequence");
  Node n;
  n.op = Op::kAddPositional;
  n.needs_grad = nx.needs_grad;
  n.in0 = x.id;
  n.in1 = mask.id;
  n.value = nx.value;
  for (std::int64_t a = 0; a < N; ++a) {
    std::int64_t first = -1;
    for (std::int64_t t = 0; t < T; ++t)
      if (nm.value.at(a, t) > 0.5) { first = t; break; }
    if (first < 0) continue;
    for (std::int64_t t = first; t < T; ++t) {
      double* dst = n.value.data() + (a * T + t) * d;
      const double* pe = table.data() + (t - first) * d;
      for (std::int64_t j = 0; j < d; ++j) dst[j] += pe[j];
    }
  }
  return {push(std::move(n))};
}

Val Graph::softmax_masked(Val scores, Val mask) {
  Node& ns = at(scores);
  Node& nm = at(mask);
  const auto& s = ns.value.shape();
  if (s.size() != 3) throw ShapeError("softmax_masked expects [B,T,S]");
  const std::int64_t B = s[0], T = s[1], S = s[2];
  if (nm.value.ndim() != 2 || nm.value.extent(1) != S ||
      nm.value.extent(0) == 0 || B % nm.value.extent(0) != 0)
    throw ShapeError("softmax_masked mask must be [Bm,S] with Bm dividing B");
  const std::int64_t heads = B / nm.value.extent(0);
  Node n;
  n.op = Op::kSoftmaxMasked;
  n.needs_grad = ns.needs_grad;
  n.in0 = scores.id;
  n.in1 = mask.id;
  n.i0 = heads;
  n.value = ns.value;
  for (std::int64_t b = 0; b < B; ++b) {
    const double* mrow = nm.value.data() + (b / heads) * S;
    for (std::int64_t t = 0; t < T; ++t) {
      double* p = n.value.data() + (b * T + t) * S;
      double mx = -1e300;
      for (std::int64_t j = 0; j < S; ++j)
        if (mrow[j] > 0.5 && p[j] > mx) mx = p[j];
      if (mx == -1e300)
        throw ContractError("softmax_masked: row with no valid keys");
      double sum = 0.0;
      for (std::int64_t j = 0; j < S; ++j) {
        if (mrow[j] > 0.5) {
          p[j] = std::exp(p[j] - mx);
          sum += p[j];
        } else {
          p[j] = 0.0;
        }
      }
      const double inv = 1.0 / sum;
      for (std::int64_t j = 0; j < S; ++j) p[j] *= inv;
    }
  }
  return {push(std::move(n))};
}

Val Graph::layer_norm(Val x, Val gain, Val bias) {
  Node& nx = at(x);
  Node& ng = at(gain);
  Node& nb = at(bias);
  const std::int64_t d = nx.value.shape().back();
  if (ng.value.size() != d || nb.value.size() != d)
    throw ShapeError("layer_norm gain/bias must have length " + std::to_string(d));
  Node n;
  n.op = Op::kLayerNorm;
  n.needs_grad = nx.needs_grad || ng.needs_grad || nb.needs_grad;
  n.in0 = x.id;
  n.in1 = gain.id;
  n.in2 = bias.id;
  n.value = nx.value;
  const std::int64_t rows = rows_before_last(n.value);
  n.aux = Tensor({rows, 2});
  const double* pg = ng.value.data();
  const double* pb = nb.value.data();
  double* p = n.value.data();
  for (std::int64_t r = 0; r < rows; ++r, p += d) {
    double mean = 0.0;
    for (std::int64_t j = 0; j < d; ++j) mean += p[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double c = p[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + ops::kLayerNormEps);
    n.aux.at(r, 0) = mean;
    n.aux.at(r, 1) = inv;
    for (std::int64_t j = 0; j < d; ++j)
      p[j] = (p[j] - mean) * inv * pg[j] + pb[j];
  }
  return {push(std::move(n))};
}

Val Graph::sum_last(Val a) {
  Node& na = at(a);
  if (na.value.ndim() < 1) throw ShapeError("sum_last needs an axis");
  const std::int64_t d = na.value.shape().back();
  std::vector<std::int64_t> so(na.value.shape().begin(),
                               na.value.shape().end() - 1);
  Node n;
  n.op = Op::kSumLast;
  n.needs_grad = na.needs_grad;
  n.in0 = a.id;
  n.value = Tensor(so);
  const std::int64_t rows = n.value.size();
  const double* src = na.value.data();
  for (std::int64_t r = 0; r < rows; ++r, src += d) {
    double s = 0.0;
    for (std::int64_t j = 0; j < d; ++j) s += src[j];
    n.value[r] = s;
  }
  return {push(std::move(n))};
}

Val Graph::mean_all(Val a) {
  Node& na = at(a);
  if (na.value.size() == 0) throw ShapeError("mean_all on empty tensor");
  Node n;
  n.op = Op::kMeanAll;
  n.needs_grad = na.needs_grad;
  n.in0 = a.id;
  double s = 0.0;
  for (double v : na.value.values()) s += v;
  n.value = Tensor::scalar(s / static_cast<double>(na.value.size()));
  return {push(std::move(n))};
}

Val Graph::sum_all(Val a) {
  Node& na = at(a);
  Node n;
  n.op = Op::kSumAll;
  n.needs_grad = na.needs_grad;
  n.in0 = a.id;
  double s = 0.0;
  for (double v : na.value.values()) s += v;
  n.value = Tensor::scalar(s);
  return {push(std::move(n))};
}

Tensor& Graph::grad_buf(int id) {
  Node& n = nodes_[id];
  if (n.grad.empty() && n.value.size() > 0)
    n.grad = Tensor::zeros(n.value.shape());
  return n.grad;
}

void Graph::accumulate(int id, const Tensor& g) {
  Node& n = nodes_[id];
  if (n.grad.empty()) {  // first contribution: skip the zero-fill pass
    n.grad = g;
    return;
  }
  Tensor& dst = n.grad;
  double* pd = dst.data();
  const double* ps = g.data();
  for (std::int64_t i = 0; i < dst.size(); ++i) pd[i] += ps[i];
}

void Graph::backward(Val loss) {
  Node& ln = at(loss);
  if (ln.value.size() != 1)
    throw ContractError("backward: loss must be scalar, got " +
                        ln.value.shape_str());
  if (!ln.needs_grad) return;
  // drop any grads from a previous call so replays are identical
  for (Node& n : nodes_) n.grad = Tensor();
  grad_buf(loss.id).fill(1.0);

  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.needs_grad || n.grad.empty()) continue;
    const Tensor& gy = n.grad;
    switch (n.op) {
      case Op::kLeaf: {
        double* pd = n.param->grad.data();
        const double* ps = gy.data();
        for (std::int64_t i = 0; i < gy.size(); ++i) pd[i] += ps[i];
        break;
      }
      case Op::kConstant:
        break;
      case Op::kAdd: {
        if (nodes_[n.in0].needs_grad) accumulate(n.in0, gy);
        if (nodes_[n.in1].needs_grad) accumulate(n.in1, gy);
        break;
      }
      case Op::kSub: {
        if (nodes_[n.in0].needs_grad) accumulate(n.in0, gy);
        if (nodes_[n.in1].needs_grad) {
          Tensor& gb = grad_buf(n.in1);
          for (std::int64_t i = 0; i < gb.size(); ++i) gb[i] -= gy[i];
        }
        break;
      }
      case Op::kMul: {
        const Tensor& va = nodes_[n.in0].value;
        const Tensor& vb = nodes_[n.in1].value;
        if (nodes_[n.in0].needs_grad) {
          Tensor& ga = grad_buf(n.in0);
          for (std::int64_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * vb[i];
        }
        if (nodes_[n.in1].needs_grad) {
          Tensor& gb = grad_buf(n.in1);
          for (std::int64_t i = 0; i < gb.size(); ++i) gb[i] += gy[i] * va[i];
        }
        break;
      }
      case Op::kNeg: {
        Tensor& ga = grad_buf(n.in0);
        for (std::int64_t i = 0; i < ga.size(); ++i) ga[i] -= gy[i];
        break;
      }
      case Op::kScale: {
        Tensor& ga = grad_buf(n.in0);
        for (std::int64_t i = 0; i < ga.size(); ++i) ga[i] += n.a0 * gy[i];
        break;
      }
      case Op::kAddScalar:
        accumulate(n.in0, gy);
        break;
      case Op::kMin: {
        const Tensor& va = nodes_[n.in0].value;
        const Tensor& vb = nodes_[n.in1].value;
        // ties route to the first argument
        if (nodes_[n.in0].needs_grad) {
          Tensor& ga = grad_buf(n.in0);
          for (std::int64_t i = 0; i < ga.size(); ++i)
            if (va[i] <= vb[i]) ga[i] += gy[i];
        }
        if (nodes_[n.in1].needs_grad) {
          Tensor& gb = grad_buf(n.in1);
          for (std::int64_t i = 0; i < gb.size(); ++i)
            if (vb[i] < va[i]) gb[i] += gy[i];
        }
        break;
      }
      case Op::kClamp: {
        const Tensor& vx = nodes_[n.in0].value;
        Tensor& gx = grad_buf(n.in0);
        for (std::int64_t i = 0; i < gx.size(); ++i)
          if (vx[i] > n.a0 && vx[i] < n.a1) gx[i] += gy[i];
        break;
      }
      case Op::kGelu: {
        const Tensor& vx = nodes_[n.in0].value;
        Tensor& gx = grad_buf(n.in0);
        for (std::int64_t i = 0; i < gx.size(); ++i) {
          const double x = vx[i];
          const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
          const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
          gx[i] += gy[i] * (cdf + x * pdf);
        }
        break;
      }
      case Op::kTanh: {
        Tensor& gx = grad_buf(n.in0);
        for (std::int64_t i = 0; i < gx.size(); ++i)
          gx[i] += gy[i] * (1.0 - n.value[i] * n.value[i]);
        break;
      }
      case Op::kSigmoid: {
        Tensor& gx = grad_buf(n.in0);
        for (std::int64_t i = 0; i < gx.size(); ++i)
          gx[i] += gy[i] * n.value[i] * (1.0 - n.value[i]);
        break;
      }
      case Op::kExp: {
        Tensor& gx = grad_buf(n.in0);
        for (std::int64_t i = 0; i < gx.size(); ++i)
          gx[i] += gy[i] * n.value[i];
        break;
      }
      case Op::kMatmul: {
        const Tensor& va = nodes_[n.in0].value;
        const Tensor& vb = nodes_[n.in1].value;
        const std::int64_t m = va.extent(0), k = va.extent(1), nn = vb.extent(1);
        if (nodes_[n.in0].needs_grad)
          detail::mm(gy.data(), false, vb.data(), true,
                     grad_buf(n.in0).data(), m, k, nn, true);
        if (nodes_[n.in1].needs_grad)
          detail::mm(va.data(), true, gy.data(), false,
                     grad_buf(n.in1).data(), k, nn, m, true);
        break;
      }
      case Op::kBmmNN: {
        const Tensor& va = nodes_[n.in0].value;
        const Tensor& vb = nodes_[n.in1].value;
        const std::int64_t B = va.extent(0), m = va.extent(1), k = va.extent(2),
                           nn = vb.extent(2);
        for (std::int64_t i = 0; i < B; ++i) {
          if (nodes_[n.in0].needs_grad)
            detail::mm(gy.data() + i * m * nn, false,
                       vb.data() + i * k * nn, true,
                       grad_buf(n.in0).data() + i * m * k, m, k, nn, true);
          if (nodes_[n.in1].needs_grad)
            detail::mm(va.data() + i * m * k, true,
                       gy.data() + i * m * nn, false,
                       grad_buf(n.in1).data() + i * k * nn, k, nn, m, true);
        }
        break;
      }
      case Op::kBmmNT: {
        const Tensor& va = nodes_[n.in0].value;
        const Tensor& vb = nodes_[n.in1].value;
        const std::int64_t B = va.extent(0), m = va.extent(1), k = va.extent(2),
                           nn = vb.extent(1);
        for (std::int64_t i = 0; i < B; ++i) {
          if (nodes_[n.in0].needs_grad)
            detail::mm(gy.data() + i * m * nn, false,
                       vb.data() + i * nn * k, false,
                       grad_buf(n.in0).data() + i * m * k, m, k, nn, true);
          if (nodes_[n.in1].needs_grad)
            detail::mm(gy.data() + i * m * nn, true,
                       va.data() + i * m * k, false,
                       grad_buf(n.in1).data() + i * nn * k, nn, k, m, true);
        }
        break;
      }
      case Op::kAddBias: {
        const std::int64_t d = n.value.shape().back();
        const std::int64_t rows = rows_before_last(n.value);
        if (nodes_[n.in0].needs_grad) accumulate(n.in0, gy);
        if (nodes_[n.in1].needs_grad) {
          Tensor& gb = grad_buf(n.in1);
          const double* ps = gy.data();
          for (std::int64_t r = 0; r < rows; ++r, ps += d)
            for (std::int64_t j = 0; j < d; ++j) gb[j] += ps[j];
        }
        break;
      }
      case Op::kBroadcastRow: {
        const std::int64_t rows = n.value.extent(0), d = n.value.extent(1);
        Tensor& gv = grad_buf(n.in0);
        const double* ps = gy.data();
        for (std::int64_t r = 0; r < rows; ++r, ps += d)
          for (std::int64_t j = 0; j < d; ++j) gv[j] += ps[j];
        break;
      }
      case Op::kReshape: {
        Tensor& gx = grad_buf(n.in0);
        for (std::int64_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
        break;
      }
      case Op::kSplitHeads: {
        const auto& si = nodes_[n.in0].value.shape();
        const std::int64_t N = si[0], T = si[1], H = n.i0, hd = si[2] / H;
        Tensor& gx = grad_buf(n.in0);
        for (std::int64_t a = 0; a < N; ++a)
          for (std::int64_t h = 0; h < H; ++h)
            for (std::int64_t t = 0; t < T; ++t) {
              const double* src = gy.data() + ((a * H + h) * T + t) * hd;
              double* dst = gx.data() + (a * T + t) * si[2] + h * hd;
              for (std::int64_t c = 0; c < hd; ++c) dst[c] += src[c];
            }
        break;
      }
      case Op::kMergeHeads: {
        const auto& si = nodes_[n.in0].value.shape();
        const std::int64_t H = n.i0, N = si[0] / H, T = si[1], hd = si[2];
        Tensor& gx = grad_buf(n.in0);
        for (std::int64_t a = 0; a < N; ++a)
          for (std::int64_t h = 0; h < H; ++h)
            for (std::int64_t t = 0; t < T; ++t) {
              const double* src = gy.data() + (a * T + t) * H * hd + h * hd;
              double* dst = gx.data() + ((a * H + h) * T + t) * hd;
              for (std::int64_t c = 0; c < hd; ++c) dst[c] += src[c];
            }
        break;
      }
      case Op::kConcatLast: {
        const std::int64_t p = nodes_[n.in0].value.shape().back();
        const std::int64_t q = nodes_[n.in1].value.shape().back();
        const std::int64_t rows = rows_before_last(n.value);
        if (nodes_[n.in0].needs_grad) {
          Tensor& ga = grad_buf(n.in0);
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < p; ++j)
              ga[r * p + j] += gy[r * (p + q) + j];
        }
        if (nodes_[n.in1].needs_grad) {
          Tensor& gb = grad_buf(n.in1);
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < q; ++j)
              gb[r * q + j] += gy[r * (p + q) + p + j];
        }
        break;
      }
      case Op::kConcatRows: {
        const std::int64_t na_sz = nodes_[n.in0].value.size();
        if (nodes_[n.in0].needs_grad) {
          Tensor& ga = grad_buf(n.in0);
          for (std::int64_t i = 0; i < na_sz; ++i) ga[i] += gy[i];
        }
        if (nodes_[n.in1].needs_grad) {
          Tensor& gb = grad_buf(n.in1);
          for (std::int64_t i = 0; i < gb.size(); ++i) gb[i] += gy[na_sz + i];
        }
        break;
      }
      case Op::kTakeLast: {
        const auto& si = nodes_[n.in0].value.shape();
        const std::int64_t N = si[0], T = si[1], d = si[2];
        Tensor& gx = grad_buf(n.in0);
        for (std::int64_t a = 0; a < N; ++a) {
          double* dst = gx.data() + (a * T + T - 1) * d;
          const double* src = gy.data() + a * d;
          for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
        }
        break;
      }
      case Op::kTakeLastValid: {
        const auto& si = nodes_[n.in0].value.shape();
        const std::int64_t N = si[0], T = si[1], d = si[2];
        Tensor& gx = grad_buf(n.in0);
        for (std::int64_t a = 0; a < N; ++a) {
          const std::int64_t last = static_cast<std::int64_t>(n.aux[a]);
          double* dst = gx.data() + (a * T + last) * d;
          const double* src = gy.data() + a * d;
          for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
        }
        break;
      }
      case Op::kAddPositional:
        accumulate(n.in0, gy);
        break;
      case Op::kSoftmaxMasked: {
        const auto& s = n.value.shape();
        const std::int64_t B = s[0], T = s[1], S = s[2];
        Tensor& gx = grad_buf(n.in0);
        for (std::int64_t b = 0; b < B; ++b)
          for (std::int64_t t = 0; t < T; ++t) {
            const double* y = n.value.data() + (b * T + t) * S;
            const double* g = gy.data() + (b * T + t) * S;
            double* dx = gx.data() + (b * T + t) * S;
            double dot = 0.0;
            for (std::int64_t j = 0; j < S; ++j) dot += y[j] * g[j];
            for (std::int64_t j = 0; j < S; ++j)
              dx[j] += y[j] * (g[j] - dot);
          }
        break;
      }
      case Op::kLayerNorm: {
        const Tensor& vx = nodes_[n.in0].value;
        const Tensor& vg = nodes_[n.in1].value;
        const std::int64_t d = vx.shape().back();
        const std::int64_t rows = rows_before_last(vx);
        const bool need_x = nodes_[n.in0].needs_grad;
        const bool need_g = nodes_[n.in1].needs_grad;
        const bool need_b = nodes_[n.in2].needs_grad;
        Tensor* gx = need_x ? &grad_buf(n.in0) : nullptr;
        Tensor* gg = need_g ? &grad_buf(n.in1) : nullptr;
        Tensor* gb = need_b ? &grad_buf(n.in2) : nullptr;
        for (std::int64_t r = 0; r < rows; ++r) {
          const double mean = n.aux.at(r, 0);
          const double inv = n.aux.at(r, 1);
          const double* x = vx.data() + r * d;
          const double* g = gy.data() + r * d;
          double s1 = 0.0, s2 = 0.0;
          for (std::int64_t j = 0; j < d; ++j) {
            const double xh = (x[j] - mean) * inv;
            const double gj = g[j] * vg[j];
            s1 += gj;
            s2 += gj * xh;
            if (gg) (*gg)[j] += g[j] * xh;
            if (gb) (*gb)[j] += g[j];
          }
          if (gx) {
            const double id = 1.0 / static_cast<double>(d);
            double* dx = gx->data() + r * d;
            for (std::int64_t j = 0; j < d; ++j) {
              const double xh = (x[j] - mean) * inv;
              dx[j] += inv * (g[j] * vg[j] - s1 * id - xh * s2 * id);
            }
          }
        }
        break;
      }
      case Op::kSumLast: {
        const std::int64_t d = nodes_[n.in0].value.shape().back();
        const std::int64_t rows = n.value.size();
        Tensor& gx = grad_buf(n.in0);
        for (std::int64_t r = 0; r < rows; ++r)
          for (std::int64_t j = 0; j < d; ++j) gx[r * d + j] += gy[r];
        break;
      }
      case Op::kMeanAll: {
        Tensor& gx = grad_buf(n.in0);
        const double g = gy[0] / static_cast<double>(gx.size());
        for (std::int64_t i = 0; i < gx.size(); ++i) gx[i] += g;
        break;
      }
      case Op::kSumAll: {
        Tensor& gx = grad_buf(n.in0);
        for (std::int64_t i = 0; i < gx.size(); ++i) gx[i] += gy[0];
        break;
      }
    }
  }
}

}  // namespace hmeta
