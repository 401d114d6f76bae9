#include "panoptes/tensorcore.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <new>
#include <fmt/format.h>
#include <fstream>
#include <numeric>
#include <unordered_set>

namespace panoptes::tc {

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d < 0) throw DimensionError("negative dimension in " + shape_str(s));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<Mat<T>>;
template <typename T>
using CMapM = Eigen::Map<const Mat<T>>;

[[noreturn]] void mismatch(const char* op, const Shape& a, const Shape& b) {
  throw DimensionError(fmt::format("{}: incompatible shapes {} and {}", op, shape_str(a), shape_str(b)));
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::vector<std::shared_ptr<Node<T>>> parents,
                      std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  n->requires_grad = rg;
  if (rg) {
    n->parents = std::move(parents);
    n->backward = std::move(backward);
  }
  return Tensor<T>::from_node(std::move(n));
}

template <typename T>
std::vector<T>& grad_of(Node<T>& n) {
  if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), T(0));
  return n.grad;
}

template <typename T>
void require_2d(const char* op, const Tensor<T>& x) {
  if (x.rank() != 2) throw DimensionError(fmt::format("{}: expected a 2-D tensor, got {}", op, shape_str(x.shape())));
}

}  // namespace

// ---------------------------------------------------------------- Tensor

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad) {
  if (shape_numel(shape) != values.size())
    throw DimensionError(fmt::format("tensor: {} values for shape {}", values.size(), shape_str(shape)));
  node_ = std::make_shared<Node<T>>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T v, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, v), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from_node(std::shared_ptr<Node<T>> n) {
  Tensor t;
  t.node_ = std::move(n);
  return t;
}

template <typename T>
int Tensor<T>::dim(int i) const {
  if (i < 0) i += rank();
  if (i < 0 || i >= rank()) throw DimensionError(fmt::format("axis {} out of range for {}", i, shape_str(shape())));
  return node_->shape[static_cast<std::size_t>(i)];
}

template <typename T>
int Tensor<T>::cols() const {
  return node_->shape.empty() ? 1 : node_->shape.back();
}

template <typename T>
int Tensor<T>::rows() const {
  const int c = cols();
  return c == 0 ? 0 : static_cast<int>(numel() / static_cast<std::size_t>(c));
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw DimensionError("item() on a tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

template <typename T>
void Tensor<T>::zero_grad() {
  node_->grad.assign(node_->value.size(), T(0));
}

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) throw DimensionError("backward() needs a scalar loss, got shape " + shape_str(shape()));
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node<T>* p = n->parents[i++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node<T>* n : order) {
    if (n->backward) n->grad.assign(n->value.size(), T(0));
  }
  grad_of(*node_)[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(node_->shape, node_->value, false);
}

// ---------------------------------------------------------------- ops

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_2d("matmul", a);
  require_2d("matmul", b);
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) mismatch("matmul", a.shape(), b.shape());
  std::vector<T> out(static_cast<std::size_t>(m) * n);
  MapM<T>(out.data(), m, n).noalias() = CMapM<T>(a.values().data(), m, k) * CMapM<T>(b.values().data(), k, n);
  return make_result<T>({m, n}, std::move(out), {a.node(), b.node()}, [m, k, n](Node<T>& self) {
    CMapM<T> g(self.grad.data(), m, n);
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad)
      MapM<T>(grad_of(pa).data(), m, k).noalias() += g * CMapM<T>(pb.value.data(), k, n).transpose();
    if (pb.requires_grad)
      MapM<T>(grad_of(pb).data(), k, n).noalias() += CMapM<T>(pa.value.data(), m, k).transpose() * g;
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() == b.shape()) {
    std::vector<T> out(a.values());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.values()[i];
    return make_result<T>(a.shape(), std::move(out), {a.node(), b.node()}, [](Node<T>& self) {
      for (auto& p : self.parents) {
        if (!p->requires_grad) continue;
        auto& g = grad_of(*p);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
    });
  }
  // Row-vector bias broadcast over a's last axis.
  if (b.rank() == 1 && b.dim(0) == a.cols()) {
    const int r = a.rows(), c = a.cols();
    std::vector<T> out(a.values());
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) out[static_cast<std::size_t>(i) * c + j] += b.values()[static_cast<std::size_t>(j)];
    return make_result<T>(a.shape(), std::move(out), {a.node(), b.node()}, [r, c](Node<T>& self) {
      auto& pa = *self.parents[0];
      auto& pb = *self.parents[1];
      if (pa.requires_grad) {
        auto& g = grad_of(pa);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
      if (pb.requires_grad) {
        auto& g = grad_of(pb);
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) g[static_cast<std::size_t>(j)] += self.grad[static_cast<std::size_t>(i) * c + j];
      }
    });
  }
  mismatch("add", a.shape(), b.shape());
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) mismatch("sub", a.shape(), b.shape());
  std::vector<T> out(a.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.values()[i];
  return make_result<T>(a.shape(), std::move(out), {a.node(), b.node()}, [](Node<T>& self) {
    if (self.parents[0]->requires_grad) {
      auto& g = grad_of(*self.parents[0]);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& g = grad_of(*self.parents[1]);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) mismatch("mul", a.shape(), b.shape());
  std::vector<T> out(a.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.values()[i];
  return make_result<T>(a.shape(), std::move(out), {a.node(), b.node()}, [](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = grad_of(pa);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = grad_of(pb);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.values());
  for (auto& v : out) v *= s;
  return make_result<T>(a.shape(), std::move(out), {a.node()}, [s](Node<T>& self) {
    auto& g = grad_of(*self.parents[0]);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

template <typename T>
Tensor<T> add_tiled(const Tensor<T>& x, const Tensor<T>& p) {
  require_2d("add_tiled", x);
  require_2d("add_tiled", p);
  const int l = p.dim(0), d = p.dim(1);
  if (x.dim(1) != d || l == 0 || x.dim(0) % l != 0) mismatch("add_tiled", x.shape(), p.shape());
  const std::size_t blk = static_cast<std::size_t>(l) * d;
  std::vector<T> out(x.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += p.values()[i % blk];
  return make_result<T>(x.shape(), std::move(out), {x.node(), p.node()}, [blk](Node<T>& self) {
    if (self.parents[0]->requires_grad) {
      auto& g = grad_of(*self.parents[0]);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& g = grad_of(*self.parents[1]);
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % blk] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> row_scale(const Tensor<T>& x, const Tensor<T>& s) {
  const int r = x.rows(), c = x.cols();
  if (static_cast<int>(s.numel()) != r) mismatch("row_scale", x.shape(), s.shape());
  std::vector<T> out(x.values());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<std::size_t>(i) * c + j] *= s.values()[static_cast<std::size_t>(i)];
  return make_result<T>(x.shape(), std::move(out), {x.node(), s.node()}, [r, c](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& ps = *self.parents[1];
    for (int i = 0; i < r; ++i) {
      for (int j = 0; j < c; ++j) {
        const std::size_t k = static_cast<std::size_t>(i) * c + j;
        if (px.requires_grad) grad_of(px)[k] += self.grad[k] * ps.value[static_cast<std::size_t>(i)];
        if (ps.requires_grad) grad_of(ps)[static_cast<std::size_t>(i)] += self.grad[k] * px.value[k];
      }
    }
  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  const int r = x.rows(), c = x.cols();
  std::vector<T> out(x.numel());
  for (int i = 0; i < r; ++i) {
    const T* in = x.values().data() + static_cast<std::size_t>(i) * c;
    T* o = out.data() + static_cast<std::size_t>(i) * c;
    const T mx = *std::max_element(in, in + c);
    T s = 0;
    for (int j = 0; j < c; ++j) s += (o[j] = std::exp(in[j] - mx));
    for (int j = 0; j < c; ++j) o[j] /= s;
  }
  return make_result<T>(x.shape(), std::move(out), {x.node()}, [r, c](Node<T>& self) {
    auto& g = grad_of(*self.parents[0]);
    for (int i = 0; i < r; ++i) {
      const std::size_t o = static_cast<std::size_t>(i) * c;
      T dot = 0;
      for (int j = 0; j < c; ++j) dot += self.grad[o + j] * self.value[o + j];
      for (int j = 0; j < c; ++j) g[o + j] += self.value[o + j] * (self.grad[o + j] - dot);
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const int r = x.rows(), c = x.cols();
  if (gamma.numel() != static_cast<std::size_t>(c) || beta.numel() != static_cast<std::size_t>(c))
    mismatch("layer_norm", x.shape(), gamma.shape());
  std::vector<T> out(x.numel());
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto rstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    const std::size_t o = static_cast<std::size_t>(i) * c;
    T mu = 0;
    for (int j = 0; j < c; ++j) mu += x.values()[o + j];
    mu /= c;
    T var = 0;
    for (int j = 0; j < c; ++j) var += (x.values()[o + j] - mu) * (x.values()[o + j] - mu);
    var /= c;
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[static_cast<std::size_t>(i)] = rs;
    for (int j = 0; j < c; ++j) {
      const T h = (x.values()[o + j] - mu) * rs;
      (*xhat)[o + j] = h;
      out[o + j] = h * gamma.values()[static_cast<std::size_t>(j)] + beta.values()[static_cast<std::size_t>(j)];
    }
  }
  return make_result<T>(x.shape(), std::move(out), {x.node(), gamma.node(), beta.node()},
                        [r, c, xhat, rstd](Node<T>& self) {
                          auto& px = *self.parents[0];
                          auto& pg = *self.parents[1];
                          auto& pb = *self.parents[2];
                          for (int i = 0; i < r; ++i) {
                            const std::size_t o = static_cast<std::size_t>(i) * c;
                            if (pg.requires_grad || pb.requires_grad) {
                              for (int j = 0; j < c; ++j) {
                                if (pg.requires_grad) grad_of(pg)[static_cast<std::size_t>(j)] += self.grad[o + j] * (*xhat)[o + j];
                                if (pb.requires_grad) grad_of(pb)[static_cast<std::size_t>(j)] += self.grad[o + j];
                              }
                            }
                            if (!px.requires_grad) continue;
                            T s1 = 0, s2 = 0;
                            for (int j = 0; j < c; ++j) {
                              const T dh = self.grad[o + j] * pg.value[static_cast<std::size_t>(j)];
                              s1 += dh;
                              s2 += dh * (*xhat)[o + j];
                            }
                            auto& g = grad_of(px);
                            const T rs = (*rstd)[static_cast<std::size_t>(i)];
                            for (int j = 0; j < c; ++j) {
                              const T dh = self.grad[o + j] * pg.value[static_cast<std::size_t>(j)];
                              g[o + j] += rs * (dh - s1 / c - (*xhat)[o + j] * s2 / c);
                            }
                          }
                        });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  // tanh approximation
  const T k = static_cast<T>(std::sqrt(2.0 / kPi));
  const T a = T(0.044715);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x.values()[i];
    out[i] = T(0.5) * v * (T(1) + std::tanh(k * (v + a * v * v * v)));
  }
  return make_result<T>(x.shape(), std::move(out), {x.node()}, [k, a](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& g = grad_of(px);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = px.value[i];
      const T t = std::tanh(k * (v + a * v * v * v));
      const T dt = (T(1) - t * t) * k * (T(1) + T(3) * a * v * v);
      g[i] += self.grad[i] * (T(0.5) * (T(1) + t) + T(0.5) * v * dt);
    }
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require_2d("linear", w);
  const int in = w.dim(0), outd = w.dim(1);
  if (x.cols() != in) mismatch("linear", x.shape(), w.shape());
  if (b.numel() != static_cast<std::size_t>(outd)) mismatch("linear", w.shape(), b.shape());
  const int m = x.rows();
  std::vector<T> out(static_cast<std::size_t>(m) * outd);
  MapM<T> o(out.data(), m, outd);
  o.noalias() = CMapM<T>(x.values().data(), m, in) * CMapM<T>(w.values().data(), in, outd);
  o.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.values().data(), outd);
  Shape shape = x.shape();
  shape.back() = outd;
  return make_result<T>(std::move(shape), std::move(out), {x.node(), w.node(), b.node()},
                        [m, in, outd](Node<T>& self) {
                          CMapM<T> g(self.grad.data(), m, outd);
                          auto& px = *self.parents[0];
                          auto& pw = *self.parents[1];
                          auto& pb = *self.parents[2];
                          if (px.requires_grad)
                            MapM<T>(grad_of(px).data(), m, in).noalias() +=
                                g * CMapM<T>(pw.value.data(), in, outd).transpose();
                          if (pw.requires_grad)
                            MapM<T>(grad_of(pw).data(), in, outd).noalias() +=
                                CMapM<T>(px.value.data(), m, in).transpose() * g;
                          if (pb.requires_grad)
                            Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(grad_of(pb).data(), outd) +=
                                g.colwise().sum();
                        });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis) {
  if (xs.empty()) throw DimensionError("concat of nothing");
  if (axis != 0 && axis != 1) throw DimensionError("concat: axis must be 0 or 1");
  for (const auto& x : xs) require_2d("concat", x);
  const int other = xs[0].dim(1 - axis);
  int total = 0;
  for (const auto& x : xs) {
    if (x.dim(1 - axis) != other) mismatch("concat", xs[0].shape(), x.shape());
    total += x.dim(axis);
  }
  std::vector<std::shared_ptr<Node<T>>> parents;
  for (const auto& x : xs) parents.push_back(x.node());
  if (axis == 0) {
    std::vector<T> out;
    out.reserve(static_cast<std::size_t>(total) * other);
    for (const auto& x : xs) out.insert(out.end(), x.values().begin(), x.values().end());
    return make_result<T>({total, other}, std::move(out), std::move(parents), [](Node<T>& self) {
      std::size_t off = 0;
      for (auto& p : self.parents) {
        if (p->requires_grad) {
          auto& g = grad_of(*p);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[off + i];
        }
        off += p->value.size();
      }
    });
  }
  const int rows = other;
  std::vector<T> out(static_cast<std::size_t>(rows) * total);
  int off = 0;
  for (const auto& x : xs) {
    const int c = x.dim(1);
    for (int i = 0; i < rows; ++i)
      std::copy_n(x.values().data() + static_cast<std::size_t>(i) * c, c,
                  out.data() + static_cast<std::size_t>(i) * total + off);
    off += c;
  }
  return make_result<T>({rows, total}, std::move(out), std::move(parents), [rows, total](Node<T>& self) {
    int off = 0;
    for (auto& p : self.parents) {
      const int c = p->shape[1];
      if (p->requires_grad) {
        auto& g = grad_of(*p);
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < c; ++j)
            g[static_cast<std::size_t>(i) * c + j] += self.grad[static_cast<std::size_t>(i) * total + off + j];
      }
      off += c;
    }
  });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, int start, int len) {
  require_2d("slice", x);
  if (axis != 0 && axis != 1) throw DimensionError("slice: axis must be 0 or 1");
  if (start < 0 || len < 0 || start + len > x.dim(axis))
    throw DimensionError(fmt::format("slice: [{}, {}) outside axis {} of {}", start, start + len, axis,
                                     shape_str(x.shape())));
  const int r = x.dim(0), c = x.dim(1);
  const int orow = axis == 0 ? len : r, ocol = axis == 0 ? c : len;
  const int r0 = axis == 0 ? start : 0, c0 = axis == 0 ? 0 : start;
  std::vector<T> out(static_cast<std::size_t>(orow) * ocol);
  for (int i = 0; i < orow; ++i)
    std::copy_n(x.values().data() + static_cast<std::size_t>(i + r0) * c + c0, ocol,
                out.data() + static_cast<std::size_t>(i) * ocol);
  return make_result<T>({orow, ocol}, std::move(out), {x.node()}, [orow, ocol, r0, c0, c](Node<T>& self) {
    auto& g = grad_of(*self.parents[0]);
    for (int i = 0; i < orow; ++i)
      for (int j = 0; j < ocol; ++j)
        g[static_cast<std::size_t>(i + r0) * c + c0 + j] += self.grad[static_cast<std::size_t>(i) * ocol + j];
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.values()) s += v;
  return make_result<T>({1}, {s}, {x.node()}, [](Node<T>& self) {
    auto& g = grad_of(*self.parents[0]);
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) mismatch("reshape", x.shape(), shape);
  return make_result<T>(std::move(shape), x.values(), {x.node()}, [](Node<T>& self) {
    auto& g = grad_of(*self.parents[0]);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<int>& idx) {
  require_2d("gather_rows", table);
  const int n = table.dim(0), d = table.dim(1);
  for (int i : idx) {
    if (i < 0 || i >= n) throw DimensionError(fmt::format("gather_rows: index {} outside {} rows", i, n));
  }
  std::vector<T> out(idx.size() * static_cast<std::size_t>(d));
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy_n(table.values().data() + static_cast<std::size_t>(idx[r]) * d, d, out.data() + r * d);
  return make_result<T>({static_cast<int>(idx.size()), d}, std::move(out), {table.node()}, [idx, d](Node<T>& self) {
    auto& g = grad_of(*self.parents[0]);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (int j = 0; j < d; ++j) g[static_cast<std::size_t>(idx[r]) * d + j] += self.grad[r * d + j];
  });
}

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, int batch, int heads) {
  require_2d("attention", q);
  require_2d("attention", k);
  require_2d("attention", v);
  const int d = q.dim(1);
  if (batch <= 0 || heads <= 0 || d % heads != 0) throw DimensionError("attention: bad batch/head split");
  if (k.dim(1) != d || v.dim(1) != d) mismatch("attention", q.shape(), k.shape());
  if (k.dim(0) != v.dim(0)) mismatch("attention", k.shape(), v.shape());
  if (q.dim(0) % batch != 0 || k.dim(0) % batch != 0) mismatch("attention", q.shape(), k.shape());
  const int lq = q.dim(0) / batch, lk = k.dim(0) / batch, dh = d / heads;
  const T inv = T(1) / std::sqrt(static_cast<T>(dh));
  using Strided = Eigen::Map<const Mat<T>, 0, Eigen::OuterStride<>>;
  using StridedMut = Eigen::Map<Mat<T>, 0, Eigen::OuterStride<>>;

  // probabilities kept for the backward pass: batch × heads × lq × lk
  auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(batch) * heads * lq * lk);
  std::vector<T> out(static_cast<std::size_t>(batch) * lq * d);
  Mat<T> s(lq, lk);
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      Strided qh(q.values().data() + static_cast<std::size_t>(b) * lq * d + h * dh, lq, dh, Eigen::OuterStride<>(d));
      Strided kh(k.values().data() + static_cast<std::size_t>(b) * lk * d + h * dh, lk, dh, Eigen::OuterStride<>(d));
      Strided vh(v.values().data() + static_cast<std::size_t>(b) * lk * d + h * dh, lk, dh, Eigen::OuterStride<>(d));
      s.noalias() = (qh * kh.transpose()) * inv;
      for (int i = 0; i < lq; ++i) {
        const T mx = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() - mx).exp();
        s.row(i) /= s.row(i).sum();
      }
      MapM<T>(probs->data() + (static_cast<std::size_t>(b) * heads + h) * lq * lk, lq, lk) = s;
      StridedMut oh(out.data() + static_cast<std::size_t>(b) * lq * d + h * dh, lq, dh, Eigen::OuterStride<>(d));
      oh.noalias() = s * vh;
    }
  }
  return make_result<T>(q.shape(), std::move(out), {q.node(), k.node(), v.node()},
                        [=](Node<T>& self) {
                          auto& pq = *self.parents[0];
                          auto& pk = *self.parents[1];
                          auto& pv = *self.parents[2];
                          T* gq = pq.requires_grad ? grad_of(pq).data() : nullptr;
                          T* gk = pk.requires_grad ? grad_of(pk).data() : nullptr;
                          T* gv = pv.requires_grad ? grad_of(pv).data() : nullptr;
                          Mat<T> dp(lq, lk), ds(lq, lk);
                          for (int b = 0; b < batch; ++b) {
                            for (int h = 0; h < heads; ++h) {
                              const std::size_t qo = static_cast<std::size_t>(b) * lq * d + h * dh;
                              const std::size_t ko = static_cast<std::size_t>(b) * lk * d + h * dh;
                              Strided go(self.grad.data() + qo, lq, dh, Eigen::OuterStride<>(d));
                              Strided qh(pq.value.data() + qo, lq, dh, Eigen::OuterStride<>(d));
                              Strided kh(pk.value.data() + ko, lk, dh, Eigen::OuterStride<>(d));
                              Strided vh(pv.value.data() + ko, lk, dh, Eigen::OuterStride<>(d));
                              CMapM<T> p(probs->data() + (static_cast<std::size_t>(b) * heads + h) * lq * lk, lq, lk);
                              if (gv) StridedMut(gv + ko, lk, dh, Eigen::OuterStride<>(d)).noalias() += p.transpose() * go;
                              dp.noalias() = go * vh.transpose();
                              for (int i = 0; i < lq; ++i) {
                                const T dot = dp.row(i).dot(p.row(i));
                                ds.row(i) = p.row(i).array() * (dp.row(i).array() - dot);
                              }
                              ds *= inv;
                              if (gq) StridedMut(gq + qo, lq, dh, Eigen::OuterStride<>(d)).noalias() += ds * kh;
                              if (gk) StridedMut(gk + ko, lk, dh, Eigen::OuterStride<>(d)).noalias() += ds.transpose() * qh;
                            }
                          }
                        });
}

// ---------------------------------------------------------------- params

template <typename T>
Tensor<T>& ParamSet<T>::add(const std::string& name, Tensor<T> t) {
  if (index_.count(name)) throw InvalidInput("duplicate parameter name: " + name);
  if (name.size() > 0xFFFF) throw InvalidInput("parameter name too long");
  t.node()->requires_grad = true;
  index_[name] = items_.size();
  items_.emplace_back(name, std::move(t));
  return items_.back().second;
}

template <typename T>
Tensor<T>& ParamSet<T>::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw InvalidInput("unknown parameter: " + name);
  return items_[it->second].second;
}

template <typename T>
const Tensor<T>& ParamSet<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw InvalidInput("unknown parameter: " + name);
  return items_[it->second].second;
}

template <typename T>
std::size_t ParamSet<T>::count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : items_) n += t.numel();
  return n;
}

template <typename T>
void ParamSet<T>::zero_grad() {
  for (auto& [_, t] : items_) t.zero_grad();
}

template <typename T>
Tensor<T> glorot(int fan_in, int fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / (fan_in + fan_out));
  std::vector<T> v(static_cast<std::size_t>(fan_in) * fan_out);
  for (auto& x : v) x = static_cast<T>(rng.uniform(-a, a));
  return Tensor<T>({fan_in, fan_out}, std::move(v), true);
}

// ---------------------------------------------------------------- Adam

template <typename T>
Adam<T>::Adam(ParamSet<T>& params, AdamConfig cfg) : params_(params), cfg_(cfg) {
  for (const auto& [name, t] : params_.items()) {
    State s;
    s.m.assign(t.numel(), 0.0);
    s.v.assign(t.numel(), 0.0);
    state_.emplace(name, std::move(s));
  }
}

template <typename T>
void Adam<T>::step() {
  skipped_.clear();
  for (auto& [name, t] : params_.items()) {
    auto& g = t.grad();
    if (g.size() != t.numel()) continue;  // never touched by backward
    if (!std::all_of(g.begin(), g.end(), [](T x) { return std::isfinite(static_cast<double>(x)); })) {
      skipped_.push_back(name);
      continue;
    }
    State& s = state_.at(name);
    s.t += 1;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(s.t));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(s.t));
    auto& w = t.values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * gi;
      s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * gi * gi;
      const double mh = s.m[i] / bc1;
      const double vh = s.v[i] / bc2;
      double upd = cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
      if (cfg_.weight_decay > 0) upd += cfg_.lr * cfg_.weight_decay * static_cast<double>(w[i]);
      w[i] = static_cast<T>(static_cast<double>(w[i]) - upd);
    }
  }
}

template <typename T>
const typename Adam<T>::State& Adam<T>::state(const std::string& name) const {
  auto it = state_.find(name);
  if (it == state_.end()) throw InvalidInput("unknown parameter: " + name);
  return it->second;
}

// ---------------------------------------------------------------- checkpoint

namespace {

constexpr char kMagic[5] = {'P', 'N', 'P', 'T', '1'};
constexpr std::uint32_t kVersion = 1;

template <typename U>
void put_le(std::ostream& out, U v) {
  static_assert(std::is_integral_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.put(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(std::istream& in) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    const int c = in.get();
    if (c == EOF) throw CheckpointError("checkpoint truncated");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return static_cast<U>(v);
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ParamSet<T>& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write " + path.string());
  out.write(kMagic, 5);
  put_le<std::uint32_t>(out, kVersion);
  for (const auto& [name, t] : params.items()) {
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (int d : t.shape()) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (T v : t.values()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  if (!out) throw CheckpointError("write failed for " + path.string());
}

std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  char magic[5];
  if (!in.read(magic, 5) || std::memcmp(magic, kMagic, 5) != 0) throw CheckpointError("bad checkpoint magic");
  const auto version = get_le<std::uint32_t>(in);
  if (version != kVersion) throw CheckpointError(fmt::format("unsupported checkpoint version {}", version));
  std::vector<CheckpointEntry> out;
  while (in.peek() != EOF) {
    CheckpointEntry e;
    const auto len = get_le<std::uint16_t>(in);
    e.name.resize(len);
    if (!in.read(e.name.data(), len)) throw CheckpointError("checkpoint truncated");
    const auto rank = get_le<std::uint8_t>(in);
    for (int i = 0; i < rank; ++i) e.shape.push_back(static_cast<int>(get_le<std::uint32_t>(in)));
    const auto n = shape_numel(e.shape);
    e.values.resize(n);
    for (auto& v : e.values) v = std::bit_cast<float>(get_le<std::uint32_t>(in));
    out.push_back(std::move(e));
  }
  return out;
}

template <typename T>
void load_checkpoint(const std::filesystem::path& path, ParamSet<T>& params) {
  const auto entries = read_checkpoint(path);
  if (entries.size() != params.items().size())
    throw CheckpointError(fmt::format("checkpoint has {} tensors, model has {}", entries.size(), params.items().size()));
  for (const auto& e : entries) {
    if (!params.contains(e.name)) throw CheckpointError("checkpoint tensor not in model: " + e.name);
    Tensor<T>& t = params.get(e.name);
    if (t.shape() != e.shape)
      throw CheckpointError(fmt::format("shape mismatch for {}: {} vs {}", e.name, shape_str(e.shape), shape_str(t.shape())));
    for (std::size_t i = 0; i < e.values.size(); ++i) t.values()[i] = static_cast<T>(e.values[i]);
  }
}

// ---------------------------------------------------------------- instantiation

#define PANOPTES_TC_INSTANTIATE(T)                                                                       \
  template class Tensor<T>;                                                                              \
  template class ParamSet<T>;                                                                            \
  template class Adam<T>;                                                                                \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> scale(const Tensor<T>&, T);                                                         \
  template Tensor<T> add_tiled(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> row_scale(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> softmax(const Tensor<T>&);                                                          \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                \
  template Tensor<T> gelu(const Tensor<T>&);                                                             \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                                         \
  template Tensor<T> slice(const Tensor<T>&, int, int, int);                                             \
  template Tensor<T> mean(const Tensor<T>&);                                                             \
  template Tensor<T> sum(const Tensor<T>&);                                                              \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                   \
  template Tensor<T> gather_rows(const Tensor<T>&, const std::vector<int>&);                             \
  template Tensor<T> attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);          \
  template Tensor<T> glorot<T>(int, int, Rng&);                                                          \
  template void save_checkpoint(const std::filesystem::path&, const ParamSet<T>&);                       \
  template void load_checkpoint(const std::filesystem::path&, ParamSet<T>&);

PANOPTES_TC_INSTANTIATE(float)
PANOPTES_TC_INSTANTIATE(double)

}  // namespace panoptes::tc

// Eigen's vectorised reductions peel unaligned heads, so their summation
// order depends on where a buffer happens to start. Giving every heap block
// cache-line alignment makes results independent of the allocator's history.
namespace {
constexpr std::size_t kHeapAlign = 64;

void* aligned_new(std::size_t n) {
  const std::size_t size = (std::max<std::size_t>(n, 1) + kHeapAlign - 1) & ~(kHeapAlign - 1);
  if (void* p = std::aligned_alloc(kHeapAlign, size)) return p;
  throw std::bad_alloc();
}
}  // namespace

void* operator new(std::size_t n) { return aligned_new(n); }
void* operator new[](std::size_t n) { return aligned_new(n); }
void* operator new(std::size_t n, const std::nothrow_t&) noexcept {
  try {
    return aligned_new(n);
  } catch (...) {
    return nullptr;
  }
}
void* operator new[](std::size_t n, const std::nothrow_t& t) noexcept { return operator new(n, t); }
void operator delete(void* p) noexcept { std::free(p); }
void operator delete[](void* p) noexcept { std::free(p); }
void operator delete(void* p, std::size_t) noexcept { std::free(p); }
void operator delete[](void* p, std::size_t) noexcept { std::free(p); }
void operator delete(void* p, const std::nothrow_t&) noexcept { std::free(p); }
void operator delete[](void* p, const std::nothrow_t&) noexcept { std::free(p); }
