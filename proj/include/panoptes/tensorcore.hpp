#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "panoptes/common.hpp"

namespace panoptes::tc {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
};

/// Dense row-major tensor handle. Copies share storage; results of ops keep
/// their inputs alive until the graph is dropped.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T v, bool requires_grad = false);
  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const;
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::size_t numel() const { return node_->value.size(); }
  /// Leading dimensions collapsed; the last axis is the row length.
  int rows() const;
  int cols() const;

  std::vector<T>& values() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }
  std::vector<T>& grad() { return node_->grad; }
  const std::vector<T>& grad() const { return node_->grad; }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void zero_grad();

  /// Reverse-mode sweep from a scalar. Leaf gradients accumulate; interior
  /// gradients are recomputed from zero on every call.
  void backward() const;

  /// Same values, no graph history.
  Tensor detach() const;

  const std::shared_ptr<Node<T>>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<Node<T>> n);

 private:
  std::shared_ptr<Node<T>> node_;
};

// Ops. Shapes are checked; mismatches throw DimensionError naming both.
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// Elementwise sum; b may also be a row vector matching a's last axis.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T s);
/// Adds p (L×D) to every block of L consecutive rows of x ((B·L)×D).
template <typename T> Tensor<T> add_tiled(const Tensor<T>& x, const Tensor<T>& p);
/// Multiplies each row of x by the matching entry of s (one per row).
template <typename T> Tensor<T> row_scale(const Tensor<T>& x, const Tensor<T>& s);
template <typename T> Tensor<T> softmax(const Tensor<T>& x);
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5));
template <typename T> Tensor<T> gelu(const Tensor<T>& x);
/// x (m×in) · W (in×out) + b (out).
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);
/// Concatenation of 2-D tensors along axis 0 (rows) or 1 (columns).
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis);
/// Columns or rows [start, start+len) of a 2-D tensor.
template <typename T> Tensor<T> slice(const Tensor<T>& x, int axis, int start, int len);
template <typename T> Tensor<T> mean(const Tensor<T>& x);
template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
/// Rows of table picked by index.
template <typename T> Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<int>& idx);
/// Multi-head scaled dot-product attention, batched over B independent
/// sequences: q is (B·Lq)×D, k and v are (B·Lk)×D.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, int batch, int heads);

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, b);
}
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  return sub(a, b);
}
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
  return mul(a, b);
}

/// Named trainable tensors, kept in insertion order.
template <typename T>
class ParamSet {
 public:
  Tensor<T>& add(const std::string& name, Tensor<T> t);
  Tensor<T>& get(const std::string& name);
  const Tensor<T>& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  const std::vector<std::pair<std::string, Tensor<T>>>& items() const { return items_; }
  std::vector<std::pair<std::string, Tensor<T>>>& items() { return items_; }
  std::size_t count() const;
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor<T>>> items_;
  std::map<std::string, std::size_t> index_;
};

/// Uniform Glorot initialisation for a fan_in × fan_out weight.
template <typename T>
Tensor<T> glorot(int fan_in, int fan_out, Rng& rng);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Adam with bias correction. A parameter whose gradient has a non-finite
/// entry is left untouched for that step and reported in skipped().
template <typename T>
class Adam {
 public:
  Adam(ParamSet<T>& params, AdamConfig cfg);
  void step();
  void set_lr(double lr) { cfg_.lr = lr; }
  const std::vector<std::string>& skipped() const { return skipped_; }

  struct State {
    std::vector<double> m, v;
    std::int64_t t = 0;
  };
  const State& state(const std::string& name) const;

 private:
  ParamSet<T>& params_;
  AdamConfig cfg_;
  std::map<std::string, State> state_;
  std::vector<std::string> skipped_;
};

/// Binary checkpoint: "PNPT1", u32 version, then per tensor a u16 name
/// length, the name, u8 rank, u32 dims and little-endian f32 values.
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ParamSet<T>& params);
/// Loads into an existing parameter set; names and shapes must match.
template <typename T>
void load_checkpoint(const std::filesystem::path& path, ParamSet<T>& params);

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};
std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path);

}  // namespace panoptes::tc
