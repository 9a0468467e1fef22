#include "ipa/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <sstream>
#include <stdexcept>

#include "ipa/rng.hpp"

namespace ipa {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

namespace {

template <typename T>
void check_finite(const std::vector<T>& v, const char* op) {
  for (const T& x : v) {
    if (!std::isfinite(x)) {
      throw std::runtime_error(std::string("ndgrad: op '") + op +
                               "' produced a non-finite value");
    }
  }
}

int normalize_axis(int axis, size_t rank, const char* op) {
  int r = static_cast<int>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw std::invalid_argument(std::string(op) + ": axis out of range");
  }
  return axis;
}

// Decomposes a shape around `axis` into (outer, dim, inner) strides for
// row-major iteration.
struct AxisSplit {
  int64_t outer, dim, inner;
};

AxisSplit split_axis(const Shape& s, int axis) {
  AxisSplit sp{1, s[static_cast<size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) sp.outer *= s[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i)
    sp.inner *= s[i];
  return sp;
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  size_t off = big.size() - small.size();
  for (size_t i = 0; i < small.size(); ++i)
    if (small[i] != big[off + i]) return false;
  return true;
}

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T  (dot of contiguous rows)
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = 0;
      for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      T* crow = c + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
Graph<T>& common_graph(const Tensor<T>& a, const Tensor<T>& b,
                       const char* op) {
  if (!a.defined() || !b.defined())
    throw std::invalid_argument(std::string(op) + ": undefined tensor");
  if (a.graph() != b.graph())
    throw std::invalid_argument(std::string(op) +
                                ": operands belong to different graphs");
  return *a.graph();
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

template <typename T>
const Shape& Tensor<T>::shape() const {
  return graph_->node(id_).shape;
}
template <typename T>
const std::vector<T>& Tensor<T>::values() const {
  return graph_->node(id_).values;
}
template <typename T>
int64_t Tensor<T>::numel() const {
  return static_cast<int64_t>(values().size());
}
template <typename T>
bool Tensor<T>::requires_grad() const {
  return graph_->node(id_).requires_grad;
}
template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1)
    throw std::invalid_argument("item: tensor is not scalar, shape " +
                                shape_str(shape()));
  return values()[0];
}

// ---- Graph -----------------------------------------------------------------

template <typename T>
Tensor<T> Graph<T>::emit(
    Shape shape, std::vector<T> values, std::vector<int32_t> parents,
    std::function<void(Graph<T>&, const Node<T>&)> backward, const char* op) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size()))
    throw std::invalid_argument(std::string(op) + ": value count " +
                                std::to_string(values.size()) +
                                " does not match shape " + shape_str(shape));
  check_finite(values, op);
  Node<T> n;
  n.shape = std::move(shape);
  n.values = std::move(values);
  n.parents = std::move(parents);
  n.op = op;
  for (int32_t p : n.parents) {
    if (node(p).requires_grad) n.requires_grad = true;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Tensor<T>(this, static_cast<int32_t>(nodes_.size() - 1));
}

template <typename T>
Tensor<T> Graph<T>::input(Shape shape, std::vector<T> values,
                          bool requires_grad) {
  Tensor<T> t = emit(std::move(shape), std::move(values), {}, nullptr, "leaf");
  node(t.id()).requires_grad = requires_grad;
  return t;
}

template <typename T>
Tensor<T> Graph<T>::constant(Shape shape, std::vector<T> values) {
  return input(std::move(shape), std::move(values), false);
}

template <typename T>
Tensor<T> Graph<T>::constant_scalar(T v) {
  return constant({1}, {v});
}

template <typename T>
void Graph<T>::backward(const Tensor<T>& seed) {
  if (!seed.defined() || seed.graph() != this)
    throw std::invalid_argument("backward: seed is not a tensor of this graph");
  if (seed.numel() != 1)
    throw std::invalid_argument("backward: seed must be scalar, got shape " +
                                shape_str(seed.shape()));
  if (!seed.requires_grad())
    throw std::invalid_argument(
        "backward: seed is detached (no requires_grad input reaches it)");

  // Mark ancestors along requires_grad edges; those are the only nodes that
  // can receive gradient.
  std::vector<uint8_t> reach(nodes_.size(), 0);
  std::vector<int32_t> stack{seed.id()};
  reach[static_cast<size_t>(seed.id())] = 1;
  while (!stack.empty()) {
    int32_t u = stack.back();
    stack.pop_back();
    for (int32_t p : node(u).parents) {
      if (!reach[static_cast<size_t>(p)] && node(p).requires_grad) {
        reach[static_cast<size_t>(p)] = 1;
        stack.push_back(p);
      }
    }
  }
  for (size_t i = 0; i < nodes_.size(); ++i) {
    Node<T>& n = nodes_[i];
    if (reach[i]) {
      n.grad.assign(n.values.size(), T(0));
    } else {
      n.grad.clear();
    }
  }
  node(seed.id()).grad[0] = T(1);

  // Creation order is topological, so one reverse pass suffices and the
  // accumulation order is fixed.
  for (int32_t id = seed.id(); id >= 0; --id) {
    const Node<T>& n = nodes_[static_cast<size_t>(id)];
    if (reach[static_cast<size_t>(id)] && n.backward) n.backward(*this, n);
  }
}

template <typename T>
const std::vector<T>* Graph<T>::grad_ptr(const Tensor<T>& t) const {
  const Node<T>& n = node(t.id());
  if (n.grad.size() != n.values.size()) return nullptr;
  return &n.grad;
}

template <typename T>
std::vector<T> Graph<T>::grad(const Tensor<T>& t) const {
  const std::vector<T>* g = grad_ptr(t);
  if (g) return *g;
  return std::vector<T>(t.values().size(), T(0));
}

// ---- helpers shared by closures --------------------------------------------

namespace {

template <typename T>
void accum(Graph<T>& g, int32_t pid, const std::vector<T>& contrib) {
  Node<T>& p = g.node(pid);
  if (!p.requires_grad || p.grad.empty()) return;
  for (size_t i = 0; i < contrib.size(); ++i) p.grad[i] += contrib[i];
}

}  // namespace

// ---- add / mul / scale -----------------------------------------------------

template <typename T>
static void check_broadcast(const Tensor<T>& a, const Tensor<T>& b,
                            const char* op) {
  if (b.numel() == 1) return;
  if (!is_suffix(b.shape(), a.shape()))
    throw std::invalid_argument(std::string(op) + ": shape " +
                                shape_str(b.shape()) +
                                " does not broadcast onto " +
                                shape_str(a.shape()));
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  Graph<T>& g = common_graph(a, b, "add");
  check_broadcast(a, b, "add");
  const auto& av = a.values();
  const auto& bv = b.values();
  const int64_t inner = b.numel();
  std::vector<T> out(av.size());
  for (size_t i = 0; i < av.size(); ++i)
    out[i] = av[i] + bv[static_cast<size_t>(static_cast<int64_t>(i) % inner)];
  int32_t aid = a.id(), bid = b.id();
  return g.emit(a.shape(), std::move(out), {aid, bid},
                [aid, bid, inner](Graph<T>& gr, const Node<T>& n) {
                  Node<T>& pa = gr.node(aid);
                  if (pa.requires_grad && !pa.grad.empty())
                    for (size_t i = 0; i < n.grad.size(); ++i)
                      pa.grad[i] += n.grad[i];
                  Node<T>& pb = gr.node(bid);
                  if (pb.requires_grad && !pb.grad.empty())
                    for (size_t i = 0; i < n.grad.size(); ++i)
                      pb.grad[static_cast<size_t>(static_cast<int64_t>(i) %
                                                  inner)] += n.grad[i];
                },
                "add");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  Graph<T>& g = common_graph(a, b, "mul");
  check_broadcast(a, b, "mul");
  const auto& av = a.values();
  const auto& bv = b.values();
  const int64_t inner = b.numel();
  std::vector<T> out(av.size());
  for (size_t i = 0; i < av.size(); ++i)
    out[i] = av[i] * bv[static_cast<size_t>(static_cast<int64_t>(i) % inner)];
  int32_t aid = a.id(), bid = b.id();
  return g.emit(a.shape(), std::move(out), {aid, bid},
                [aid, bid, inner](Graph<T>& gr, const Node<T>& n) {
                  const auto& av2 = gr.node(aid).values;
                  const auto& bv2 = gr.node(bid).values;
                  Node<T>& pa = gr.node(aid);
                  if (pa.requires_grad && !pa.grad.empty())
                    for (size_t i = 0; i < n.grad.size(); ++i)
                      pa.grad[i] +=
                          n.grad[i] *
                          bv2[static_cast<size_t>(static_cast<int64_t>(i) %
                                                  inner)];
                  Node<T>& pb = gr.node(bid);
                  if (pb.requires_grad && !pb.grad.empty())
                    for (size_t i = 0; i < n.grad.size(); ++i)
                      pb.grad[static_cast<size_t>(static_cast<int64_t>(i) %
                                                  inner)] +=
                          n.grad[i] * av2[i];
                },
                "mul");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  Graph<T>& g = *x.graph();
  std::vector<T> out(x.values());
  for (T& v : out) v *= c;
  int32_t xid = x.id();
  return g.emit(x.shape(), std::move(out), {xid},
                [xid, c](Graph<T>& gr, const Node<T>& n) {
                  Node<T>& p = gr.node(xid);
                  if (p.requires_grad && !p.grad.empty())
                    for (size_t i = 0; i < n.grad.size(); ++i)
                      p.grad[i] += n.grad[i] * c;
                },
                "scale");
}

// ---- matmul ----------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  Graph<T>& g = common_graph(a, b, "matmul");
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2)
    throw std::invalid_argument("matmul: operands must have rank >= 2, got " +
                                shape_str(as) + " and " + shape_str(bs));
  const int64_t m = as[as.size() - 2], k = as[as.size() - 1];
  const int64_t k2 = bs[bs.size() - 2], n = bs[bs.size() - 1];
  Shape abatch(as.begin(), as.end() - 2), bbatch(bs.begin(), bs.end() - 2);
  if (k != k2 || (!abatch.empty() && !bbatch.empty() && abatch != bbatch))
    throw std::invalid_argument("matmul: incompatible shapes " +
                                shape_str(as) + " and " + shape_str(bs));
  const Shape& batch = abatch.empty() ? bbatch : abatch;
  const int64_t nb = shape_numel(batch);
  const int64_t astride = abatch.empty() ? 0 : m * k;
  const int64_t bstride = bbatch.empty() ? 0 : k * n;

  Shape oshape = batch;
  oshape.push_back(m);
  oshape.push_back(n);
  std::vector<T> out(static_cast<size_t>(nb * m * n), T(0));
  const T* ap = a.values().data();
  const T* bp = b.values().data();
  for (int64_t i = 0; i < nb; ++i)
    gemm_nn(ap + i * astride, bp + i * bstride, out.data() + i * m * n, m, k,
            n);

  int32_t aid = a.id(), bid = b.id();
  return g.emit(
      std::move(oshape), std::move(out), {aid, bid},
      [aid, bid, m, k, n, nb, astride, bstride](Graph<T>& gr,
                                                const Node<T>& node) {
        const T* dy = node.grad.data();
        Node<T>& pa = gr.node(aid);
        Node<T>& pb = gr.node(bid);
        if (pa.requires_grad && !pa.grad.empty()) {
          const T* bv = pb.values.data();
          for (int64_t i = 0; i < nb; ++i)
            gemm_nt(dy + i * m * n, bv + i * bstride,
                    pa.grad.data() + i * astride, m, n, k);
        }
        if (pb.requires_grad && !pb.grad.empty()) {
          const T* av = pa.values.data();
          for (int64_t i = 0; i < nb; ++i)
            gemm_tn(av + i * astride, dy + i * m * n,
                    pb.grad.data() + i * bstride, m, k, n);
        }
      },
      "matmul");
}

// ---- transpose / reshape ---------------------------------------------------

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  Graph<T>& g = *x.graph();
  const Shape& s = x.shape();
  if (s.size() < 2)
    throw std::invalid_argument("transpose: rank >= 2 required, got " +
                                shape_str(s));
  const int64_t m = s[s.size() - 2], n = s[s.size() - 1];
  const int64_t nb = x.numel() / (m * n);
  Shape os = s;
  std::swap(os[os.size() - 2], os[os.size() - 1]);
  std::vector<T> out(x.values().size());
  const T* xp = x.values().data();
  for (int64_t b = 0; b < nb; ++b)
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j)
        out[static_cast<size_t>(b * m * n + j * m + i)] =
            xp[b * m * n + i * n + j];
  int32_t xid = x.id();
  return g.emit(std::move(os), std::move(out), {xid},
                [xid, m, n, nb](Graph<T>& gr, const Node<T>& node) {
                  Node<T>& p = gr.node(xid);
                  if (!p.requires_grad || p.grad.empty()) return;
                  const T* dy = node.grad.data();
                  for (int64_t b = 0; b < nb; ++b)
                    for (int64_t j = 0; j < n; ++j)
                      for (int64_t i = 0; i < m; ++i)
                        p.grad[static_cast<size_t>(b * m * n + i * n + j)] +=
                            dy[b * m * n + j * m + i];
                },
                "transpose");
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  Graph<T>& g = *x.graph();
  if (shape_numel(shape) != x.numel())
    throw std::invalid_argument("reshape: cannot view " +
                                shape_str(x.shape()) + " as " +
                                shape_str(shape));
  int32_t xid = x.id();
  return g.emit(std::move(shape), x.values(), {xid},
                [xid](Graph<T>& gr, const Node<T>& node) {
                  Node<T>& p = gr.node(xid);
                  if (!p.requires_grad || p.grad.empty()) return;
                  for (size_t i = 0; i < node.grad.size(); ++i)
                    p.grad[i] += node.grad[i];
                },
                "reshape");
}

// ---- concat / slice --------------------------------------------------------

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  Graph<T>& g = *parts[0].graph();
  const Shape& s0 = parts[0].shape();
  int ax = normalize_axis(axis, s0.size(), "concat");
  int64_t total = 0;
  for (const auto& p : parts) {
    if (p.graph() != &g)
      throw std::invalid_argument("concat: operands belong to different graphs");
    const Shape& s = p.shape();
    if (s.size() != s0.size())
      throw std::invalid_argument("concat: rank mismatch");
    for (size_t i = 0; i < s.size(); ++i)
      if (static_cast<int>(i) != ax && s[i] != s0[i])
        throw std::invalid_argument("concat: shape mismatch " + shape_str(s) +
                                    " vs " + shape_str(s0));
    total += s[static_cast<size_t>(ax)];
  }
  Shape os = s0;
  os[static_cast<size_t>(ax)] = total;
  AxisSplit sp = split_axis(os, ax);
  std::vector<T> out(static_cast<size_t>(shape_numel(os)));
  std::vector<int32_t> pids;
  std::vector<int64_t> dims;
  int64_t off = 0;
  for (const auto& p : parts) {
    const int64_t d = p.shape()[static_cast<size_t>(ax)];
    const T* src = p.values().data();
    for (int64_t o = 0; o < sp.outer; ++o)
      std::copy(src + o * d * sp.inner, src + (o + 1) * d * sp.inner,
                out.data() + (o * total + off) * sp.inner);
    pids.push_back(p.id());
    dims.push_back(d);
    off += d;
  }
  return g.emit(std::move(os), std::move(out), pids,
                [pids, dims, sp, total](Graph<T>& gr, const Node<T>& node) {
                  const T* dy = node.grad.data();
                  int64_t off2 = 0;
                  for (size_t pi = 0; pi < pids.size(); ++pi) {
                    Node<T>& p = gr.node(pids[pi]);
                    const int64_t d = dims[pi];
                    if (p.requires_grad && !p.grad.empty()) {
                      for (int64_t o = 0; o < sp.outer; ++o) {
                        const T* s = dy + (o * total + off2) * sp.inner;
                        T* dst = p.grad.data() + o * d * sp.inner;
                        for (int64_t i = 0; i < d * sp.inner; ++i) dst[i] += s[i];
                      }
                    }
                    off2 += d;
                  }
                },
                "concat");
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, int64_t start, int64_t len) {
  Graph<T>& g = *x.graph();
  const Shape& s = x.shape();
  int ax = normalize_axis(axis, s.size(), "slice");
  const int64_t dim = s[static_cast<size_t>(ax)];
  if (start < 0 || len < 1 || start + len > dim)
    throw std::invalid_argument(
        "slice: range [" + std::to_string(start) + "," +
        std::to_string(start + len) + ") invalid for axis size " +
        std::to_string(dim));
  Shape os = s;
  os[static_cast<size_t>(ax)] = len;
  AxisSplit sp = split_axis(s, ax);
  std::vector<T> out(static_cast<size_t>(shape_numel(os)));
  const T* xp = x.values().data();
  for (int64_t o = 0; o < sp.outer; ++o)
    std::copy(xp + (o * dim + start) * sp.inner,
              xp + (o * dim + start + len) * sp.inner,
              out.data() + o * len * sp.inner);
  int32_t xid = x.id();
  return g.emit(std::move(os), std::move(out), {xid},
                [xid, sp, dim, start, len](Graph<T>& gr, const Node<T>& node) {
                  Node<T>& p = gr.node(xid);
                  if (!p.requires_grad || p.grad.empty()) return;
                  const T* dy = node.grad.data();
                  for (int64_t o = 0; o < sp.outer; ++o) {
                    T* dst = p.grad.data() + (o * dim + start) * sp.inner;
                    const T* src = dy + o * len * sp.inner;
                    for (int64_t i = 0; i < len * sp.inner; ++i)
                      dst[i] += src[i];
                  }
                },
                "slice");
}

// ---- reductions ------------------------------------------------------------

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x) {
  Graph<T>& g = *x.graph();
  T acc = 0;
  for (T v : x.values()) acc += v;
  int32_t xid = x.id();
  return g.emit({1}, {acc}, {xid},
                [xid](Graph<T>& gr, const Node<T>& node) {
                  Node<T>& p = gr.node(xid);
                  if (!p.requires_grad || p.grad.empty()) return;
                  const T dy = node.grad[0];
                  for (T& gv : p.grad) gv += dy;
                },
                "reduce_sum");
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& x) {
  return scale(reduce_sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x, int axis, bool keepdim) {
  Graph<T>& g = *x.graph();
  const Shape& s = x.shape();
  int ax = normalize_axis(axis, s.size(), "reduce_sum");
  AxisSplit sp = split_axis(s, ax);
  Shape os = s;
  if (keepdim)
    os[static_cast<size_t>(ax)] = 1;
  else
    os.erase(os.begin() + ax);
  std::vector<T> out(static_cast<size_t>(sp.outer * sp.inner), T(0));
  const T* xp = x.values().data();
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t d = 0; d < sp.dim; ++d)
      for (int64_t i = 0; i < sp.inner; ++i)
        out[static_cast<size_t>(o * sp.inner + i)] +=
            xp[(o * sp.dim + d) * sp.inner + i];
  int32_t xid = x.id();
  return g.emit(std::move(os), std::move(out), {xid},
                [xid, sp](Graph<T>& gr, const Node<T>& node) {
                  Node<T>& p = gr.node(xid);
                  if (!p.requires_grad || p.grad.empty()) return;
                  const T* dy = node.grad.data();
                  for (int64_t o = 0; o < sp.outer; ++o)
                    for (int64_t d = 0; d < sp.dim; ++d)
                      for (int64_t i = 0; i < sp.inner; ++i)
                        p.grad[static_cast<size_t>((o * sp.dim + d) * sp.inner +
                                                   i)] += dy[o * sp.inner + i];
                },
                "reduce_sum");
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& x, int axis, bool keepdim) {
  const Shape& s = x.shape();
  int ax = normalize_axis(axis, s.size(), "reduce_mean");
  return scale(reduce_sum(x, ax, keepdim),
               T(1) / static_cast<T>(s[static_cast<size_t>(ax)]));
}

// ---- elementwise exp/log ---------------------------------------------------

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  Graph<T>& g = *x.graph();
  std::vector<T> out(x.values());
  for (T& v : out) v = std::exp(v);
  int32_t xid = x.id();
  return g.emit(x.shape(), std::move(out), {xid},
                [xid](Graph<T>& gr, const Node<T>& node) {
                  Node<T>& p = gr.node(xid);
                  if (!p.requires_grad || p.grad.empty()) return;
                  for (size_t i = 0; i < node.grad.size(); ++i)
                    p.grad[i] += node.grad[i] * node.values[i];
                },
                "exp");
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  Graph<T>& g = *x.graph();
  std::vector<T> out(x.values());
  for (T& v : out) v = std::log(v);
  int32_t xid = x.id();
  return g.emit(x.shape(), std::move(out), {xid},
                [xid](Graph<T>& gr, const Node<T>& node) {
                  Node<T>& p = gr.node(xid);
                  if (!p.requires_grad || p.grad.empty()) return;
                  for (size_t i = 0; i < node.grad.size(); ++i)
                    p.grad[i] += node.grad[i] / p.values[i];
                },
                "log");
}

// ---- log_softmax -----------------------------------------------------------

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, int axis) {
  Graph<T>& g = *x.graph();
  const Shape& s = x.shape();
  int ax = normalize_axis(axis, s.size(), "log_softmax");
  AxisSplit sp = split_axis(s, ax);
  if (sp.dim < 1)
    throw std::invalid_argument("log_softmax: empty axis");
  std::vector<T> out(x.values().size());
  const T* xp = x.values().data();
  for (int64_t o = 0; o < sp.outer; ++o) {
    for (int64_t i = 0; i < sp.inner; ++i) {
      const int64_t base = o * sp.dim * sp.inner + i;
      T mx = xp[base];
      for (int64_t d = 1; d < sp.dim; ++d)
        mx = std::max(mx, xp[base + d * sp.inner]);
      T sum = 0;
      for (int64_t d = 0; d < sp.dim; ++d)
        sum += std::exp(xp[base + d * sp.inner] - mx);
      const T lz = mx + std::log(sum);
      for (int64_t d = 0; d < sp.dim; ++d)
        out[static_cast<size_t>(base + d * sp.inner)] =
            xp[base + d * sp.inner] - lz;
    }
  }
  int32_t xid = x.id();
  return g.emit(s, std::move(out), {xid},
                [xid, sp](Graph<T>& gr, const Node<T>& node) {
                  // dx = dy - softmax * sum(dy) along the axis
                  Node<T>& p = gr.node(xid);
                  if (!p.requires_grad || p.grad.empty()) return;
                  const T* dy = node.grad.data();
                  const T* y = node.values.data();
                  for (int64_t o = 0; o < sp.outer; ++o) {
                    for (int64_t i = 0; i < sp.inner; ++i) {
                      const int64_t base = o * sp.dim * sp.inner + i;
                      T gsum = 0;
                      for (int64_t d = 0; d < sp.dim; ++d)
                        gsum += dy[base + d * sp.inner];
                      for (int64_t d = 0; d < sp.dim; ++d) {
                        const int64_t k = base + d * sp.inner;
                        p.grad[static_cast<size_t>(k)] +=
                            dy[k] - std::exp(y[k]) * gsum;
                      }
                    }
                  }
                },
                "log_softmax");
}

// ---- layer_norm ------------------------------------------------------------

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, T eps) {
  Graph<T>& g = common_graph(x, gain, "layer_norm");
  common_graph(x, bias, "layer_norm");
  const Shape& s = x.shape();
  if (s.empty()) throw std::invalid_argument("layer_norm: rank >= 1 required");
  const int64_t d = s.back();
  if (gain.numel() != d || bias.numel() != d)
    throw std::invalid_argument(
        "layer_norm: gain/bias must match last dimension " +
        std::to_string(d) + ", got " + shape_str(gain.shape()) + " and " +
        shape_str(bias.shape()));
  const int64_t rows = x.numel() / d;
  std::vector<T> out(x.values().size());
  auto xhat = std::make_shared<std::vector<T>>(x.values().size());
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
  const T* xp = x.values().data();
  const T* gp = gain.values().data();
  const T* bp = bias.values().data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = xp + r * d;
    T mean = 0;
    for (int64_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<T>(d);
    T var = 0;
    for (int64_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(r)] = is;
    for (int64_t j = 0; j < d; ++j) {
      const T xh = (row[j] - mean) * is;
      (*xhat)[static_cast<size_t>(r * d + j)] = xh;
      out[static_cast<size_t>(r * d + j)] = xh * gp[j] + bp[j];
    }
  }
  int32_t xid = x.id(), gid = gain.id(), bid = bias.id();
  return g.emit(
      s, std::move(out), {xid, gid, bid},
      [xid, gid, bid, d, rows, xhat, inv_std](Graph<T>& gr,
                                              const Node<T>& node) {
        const T* dy = node.grad.data();
        Node<T>& px = gr.node(xid);
        Node<T>& pg = gr.node(gid);
        Node<T>& pb = gr.node(bid);
        const T* gv = pg.values.data();
        for (int64_t r = 0; r < rows; ++r) {
          const T* dyr = dy + r * d;
          const T* xh = xhat->data() + r * d;
          if (pg.requires_grad && !pg.grad.empty())
            for (int64_t j = 0; j < d; ++j) pg.grad[static_cast<size_t>(j)] += dyr[j] * xh[j];
          if (pb.requires_grad && !pb.grad.empty())
            for (int64_t j = 0; j < d; ++j) pb.grad[static_cast<size_t>(j)] += dyr[j];
          if (px.requires_grad && !px.grad.empty()) {
            T sum_dxh = 0, sum_dxh_xh = 0;
            for (int64_t j = 0; j < d; ++j) {
              const T dxh = dyr[j] * gv[j];
              sum_dxh += dxh;
              sum_dxh_xh += dxh * xh[j];
            }
            const T is = (*inv_std)[static_cast<size_t>(r)];
            for (int64_t j = 0; j < d; ++j) {
              const T dxh = dyr[j] * gv[j];
              px.grad[static_cast<size_t>(r * d + j)] +=
                  is * (dxh - sum_dxh / static_cast<T>(d) -
                        xh[j] * sum_dxh_xh / static_cast<T>(d));
            }
          }
        }
      },
      "layer_norm");
}

// ---- embedding_lookup ------------------------------------------------------

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table,
                           const std::vector<int64_t>& ids) {
  Graph<T>& g = *table.graph();
  const Shape& s = table.shape();
  if (s.size() != 2)
    throw std::invalid_argument("embedding_lookup: table must be rank 2, got " +
                                shape_str(s));
  const int64_t v = s[0], w = s[1];
  for (int64_t id : ids)
    if (id < 0 || id >= v)
      throw std::invalid_argument("embedding_lookup: id " + std::to_string(id) +
                                  " outside vocabulary of size " +
                                  std::to_string(v));
  std::vector<T> out(ids.size() * static_cast<size_t>(w));
  const T* tp = table.values().data();
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy(tp + ids[i] * w, tp + (ids[i] + 1) * w, out.data() + i * w);
  int32_t tid = table.id();
  auto idv = std::make_shared<std::vector<int64_t>>(ids);
  return g.emit({static_cast<int64_t>(ids.size()), w}, std::move(out), {tid},
                [tid, idv, w](Graph<T>& gr, const Node<T>& node) {
                  Node<T>& p = gr.node(tid);
                  if (!p.requires_grad || p.grad.empty()) return;
                  const T* dy = node.grad.data();
                  for (size_t i = 0; i < idv->size(); ++i) {
                    T* dst = p.grad.data() + (*idv)[i] * w;
                    const T* src = dy + static_cast<int64_t>(i) * w;
                    for (int64_t j = 0; j < w; ++j) dst[j] += src[j];
                  }
                },
                "embedding_lookup");
}

// ---- dropout / masked_fill -------------------------------------------------

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, uint64_t seed) {
  if (rate < 0.0 || rate >= 1.0)
    throw std::invalid_argument("dropout: rate must be in [0,1)");
  Graph<T>& g = *x.graph();
  auto mask = std::make_shared<std::vector<T>>(x.values().size());
  CounterRng rng(seed);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  for (size_t i = 0; i < mask->size(); ++i)
    (*mask)[i] = rng.uniform() < rate ? T(0) : keep_scale;
  std::vector<T> out(x.values().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] * (*mask)[i];
  int32_t xid = x.id();
  return g.emit(x.shape(), std::move(out), {xid},
                [xid, mask](Graph<T>& gr, const Node<T>& node) {
                  Node<T>& p = gr.node(xid);
                  if (!p.requires_grad || p.grad.empty()) return;
                  for (size_t i = 0; i < node.grad.size(); ++i)
                    p.grad[i] += node.grad[i] * (*mask)[i];
                },
                "dropout");
}

template <typename T>
Tensor<T> masked_fill(const Tensor<T>& x, const std::vector<uint8_t>& mask,
                      T value) {
  Graph<T>& g = *x.graph();
  if (static_cast<int64_t>(mask.size()) != x.numel())
    throw std::invalid_argument("masked_fill: mask size " +
                                std::to_string(mask.size()) +
                                " does not match tensor " +
                                shape_str(x.shape()));
  std::vector<T> out(x.values());
  for (size_t i = 0; i < out.size(); ++i)
    if (mask[i]) out[i] = value;
  int32_t xid = x.id();
  auto m = std::make_shared<std::vector<uint8_t>>(mask);
  return g.emit(x.shape(), std::move(out), {xid},
                [xid, m](Graph<T>& gr, const Node<T>& node) {
                  Node<T>& p = gr.node(xid);
                  if (!p.requires_grad || p.grad.empty()) return;
                  for (size_t i = 0; i < node.grad.size(); ++i)
                    if (!(*m)[i]) p.grad[i] += node.grad[i];
                },
                "masked_fill");
}

// ---- composites ------------------------------------------------------------

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, scale(b, T(-1)));
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  return exp(log_softmax(x, axis));
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<uint8_t> neg(x.values().size());
  for (size_t i = 0; i < neg.size(); ++i) neg[i] = x.values()[i] < T(0);
  return masked_fill(x, neg, T(0));
}

// Stable logsumexp built from primitives: picks the per-line argmax k and
// evaluates x[k] - log_softmax(x)[k], whose gradient is exactly softmax(x).
template <typename T>
Tensor<T> logsumexp(const Tensor<T>& x, int axis, bool keepdim) {
  const Shape& s = x.shape();
  int ax = normalize_axis(axis, s.size(), "logsumexp");
  AxisSplit sp = split_axis(s, ax);
  std::vector<T> onehot(x.values().size(), T(0));
  const T* xp = x.values().data();
  for (int64_t o = 0; o < sp.outer; ++o) {
    for (int64_t i = 0; i < sp.inner; ++i) {
      const int64_t base = o * sp.dim * sp.inner + i;
      int64_t best = 0;
      for (int64_t d = 1; d < sp.dim; ++d)
        if (xp[base + d * sp.inner] > xp[base + best * sp.inner]) best = d;
      onehot[static_cast<size_t>(base + best * sp.inner)] = T(1);
    }
  }
  Tensor<T> pick = x.graph()->constant(s, std::move(onehot));
  Tensor<T> px = reduce_sum(mul(x, pick), ax, keepdim);
  Tensor<T> pl = reduce_sum(mul(log_softmax(x, ax), pick), ax, keepdim);
  return sub(px, pl);
}

// ---- grad_check ------------------------------------------------------------

template <typename T>
double grad_check(
    const std::function<Tensor<T>(Graph<T>&, const std::vector<Tensor<T>>&)>&
        f,
    const std::vector<GradCheckInput<T>>& inputs, double eps) {
  if (!(eps > 0.0 && eps <= 1e-2))
    throw std::invalid_argument("grad_check: eps must be in (0, 1e-2]");

  auto eval = [&](const std::vector<GradCheckInput<T>>& pts) -> double {
    Graph<T> g;
    std::vector<Tensor<T>> leaves;
    leaves.reserve(pts.size());
    for (const auto& in : pts)
      leaves.push_back(g.constant(in.shape, in.values));
    Tensor<T> y = f(g, leaves);
    return static_cast<double>(y.item());
  };

  // Analytic pass.
  Graph<T> g;
  std::vector<Tensor<T>> leaves;
  for (const auto& in : inputs)
    leaves.push_back(g.input(in.shape, in.values, true));
  Tensor<T> y = f(g, leaves);
  if (y.numel() != 1)
    throw std::invalid_argument("grad_check: f must return a scalar");
  g.backward(y);
  std::vector<std::vector<T>> analytic;
  for (const auto& l : leaves) analytic.push_back(g.grad(l));

  double worst = 0.0;
  std::vector<GradCheckInput<T>> pts = inputs;
  for (size_t i = 0; i < inputs.size(); ++i) {
    for (size_t c = 0; c < inputs[i].values.size(); ++c) {
      const T orig = pts[i].values[c];
      pts[i].values[c] = orig + static_cast<T>(eps);
      const double fp = eval(pts);
      pts[i].values[c] = orig - static_cast<T>(eps);
      const double fm = eval(pts);
      pts[i].values[c] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = static_cast<double>(analytic[i][c]);
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1.0});
      worst = std::max(worst, std::fabs(a - numeric) / denom);
    }
  }
  return worst;
}

// ---- explicit instantiations -----------------------------------------------

#define IPA_INSTANTIATE(T)                                                     \
  template class Tensor<T>;                                                    \
  template class Graph<T>;                                                     \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> scale(const Tensor<T>&, T);                               \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> transpose(const Tensor<T>&);                              \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                         \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);               \
  template Tensor<T> slice(const Tensor<T>&, int, int64_t, int64_t);           \
  template Tensor<T> reduce_sum(const Tensor<T>&);                             \
  template Tensor<T> reduce_sum(const Tensor<T>&, int, bool);                  \
  template Tensor<T> reduce_mean(const Tensor<T>&);                            \
  template Tensor<T> reduce_mean(const Tensor<T>&, int, bool);                 \
  template Tensor<T> exp(const Tensor<T>&);                                    \
  template Tensor<T> log(const Tensor<T>&);                                    \
  template Tensor<T> log_softmax(const Tensor<T>&, int);                       \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&,            \
                                const Tensor<T>&, T);                          \
  template Tensor<T> embedding_lookup(const Tensor<T>&,                        \
                                      const std::vector<int64_t>&);            \
  template Tensor<T> dropout(const Tensor<T>&, double, uint64_t);              \
  template Tensor<T> masked_fill(const Tensor<T>&,                             \
                                 const std::vector<uint8_t>&, T);              \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> softmax(const Tensor<T>&, int);                           \
  template Tensor<T> relu(const Tensor<T>&);                                   \
  template Tensor<T> logsumexp(const Tensor<T>&, int, bool);                   \
  template double grad_check(                                                  \
      const std::function<Tensor<T>(Graph<T>&,                                 \
                                    const std::vector<Tensor<T>>&)>&,          \
      const std::vector<GradCheckInput<T>>&, double);

IPA_INSTANTIATE(float)
IPA_INSTANTIATE(double)

#undef IPA_INSTANTIATE

}  // namespace ipa
