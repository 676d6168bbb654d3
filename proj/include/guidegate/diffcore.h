// Copyright 2026 The GuideGate Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef GUIDEGATE_DIFFCORE_H_
#define GUIDEGATE_DIFFCORE_H_

// Tape-based reverse-mode differentiation over batched row-major matrices.
//
// Every value is a 2-D matrix whose rows are batch entries. Images are stored
// flattened in (row, col, channel) order so a B x (H*W*C) matrix holds B
// images. Ops append a node to the tape; backward() walks the tape once in
// reverse creation order, which is a valid topological order.

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <deque>
#include <unordered_map>
#include <vector>

namespace guidegate::diffcore {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
struct Parameter {
  std::string name;
  Matrix<T> value;
  Matrix<T> grad;
  Matrix<T> adam_m;
  Matrix<T> adam_v;
};

// Named parameters in insertion order.
template <typename T>
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) = default;
  ParameterStore& operator=(ParameterStore&&) = default;

  // Adds a zero-initialized parameter. Names must be unique.
  Parameter<T>& add(const std::string& name, Eigen::Index rows, Eigen::Index cols);
  Parameter<T>* find(const std::string& name);
  const Parameter<T>* find(const std::string& name) const;
  Parameter<T>& at(const std::string& name);

  std::size_t size() const { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }
  std::size_t num_scalars() const;

  void zero_grad();

  // Copies values (cast to T) for every parameter whose name exists in both.
  template <typename U>
  void copy_values_from(const ParameterStore<U>& other) {
    for (std::size_t i = 0; i < other.size(); ++i) {
      if (auto* p = find(other[i].name)) {
        p->value = other[i].value.template cast<T>();
      }
    }
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Checkpoint format (little-endian):
//   "GGCKPT\0\0" | u32 version | u32 scalar bytes | u64 count |
//   count x (u32 name length | name | u64 rows | u64 cols | raw values)
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Writes parameters whose name starts with `prefix` (all when empty).
template <typename T>
void save_checkpoint(const ParameterStore<T>& store, const std::filesystem::path& path,
                     const std::string& prefix = "");

// Loads every parameter of the file whose name exists in `store`; values are
// cast to T. Returns the number of parameters loaded. Shape mismatches throw.
template <typename T>
std::size_t load_checkpoint(ParameterStore<T>& store, const std::filesystem::path& path);

// Whether straight-through ops emit their hard value or the smooth surrogate
// they differentiate. kSmooth makes whole graphs differentiable, which is how
// finite differences can check them.
enum class SurrogateMode { kHard, kSmooth };

template <typename T>
class Tape;

// Handle to a node on a tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, int id) : tape_(tape), id_(id) {}
  const Matrix<T>& value() const;
  // Gradient after backward(); a zero matrix if nothing flowed here.
  Matrix<T> grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  T scalar() const { return value()(0, 0); }
  Tape<T>* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  int id_ = -1;
};

template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, int)>;

  struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
    Backward backward;
    Parameter<T>* param = nullptr;
    const char* op = "";
  };

  explicit Tape(SurrogateMode mode = SurrogateMode::kHard) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  SurrogateMode mode() const { return mode_; }

  Var<T> constant(Matrix<T> value);
  // A leaf that receives gradients (used for inputs under test).
  Var<T> variable(Matrix<T> value);
  // The parameter's value as a leaf; backward() adds into param.grad.
  // Repeated calls on one tape return the same node.
  Var<T> param(Parameter<T>& p);

  // Seeds d(loss)/d(loss) = 1 for a 1x1 loss and propagates to every node.
  void backward(const Var<T>& loss);

  Node& node(int id) { return nodes_[id]; }
  const Node& node(int id) const { return nodes_[id]; }
  std::size_t size() const { return nodes_.size(); }

  // Op-author API.
  Var<T> push(Matrix<T> value, bool requires_grad, Backward backward, const char* op);
  template <typename Expr>
  void accumulate(int id, const Expr& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.has_grad) {
      n.grad += g;
    } else {
      n.grad = g;
      n.has_grad = true;
    }
  }
  bool needs(int id) const { return nodes_[id].requires_grad; }

 private:
  SurrogateMode mode_;
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter<T>*, int> param_nodes_;
};

template <typename T>
const Matrix<T>& Var<T>::value() const {
  return tape_->node(id_).value;
}

template <typename T>
Matrix<T> Var<T>::grad() const {
  const auto& n = tape_->node(id_);
  if (n.has_grad) return n.grad;
  return Matrix<T>::Zero(n.value.rows(), n.value.cols());
}

// x * W + b, with b a 1 x out row broadcast over the batch.
template <typename T>
Var<T> affine(const Var<T>& x, const Var<T>& w, const Var<T>& b);
// x * W.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w);

struct ImageShape {
  int height = 0;
  int width = 0;
  int channels = 0;
};

// Stride-1 "same" convolution with an odd square kernel. W is
// (k*k*in_channels) x out_channels, rows ordered (ky, kx, in_channel).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, ImageShape shape,
              int kernel);

// Feature-wise affine modulation: x[b, s*C + c] * gamma[b, c] + beta[b, c].
template <typename T>
Var<T> film(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta);

template <typename T>
Var<T> relu(const Var<T>& x);
template <typename T>
Var<T> tanh(const Var<T>& x);
template <typename T>
Var<T> sigmoid(const Var<T>& x);
// Row-wise.
template <typename T>
Var<T> softmax(const Var<T>& x);
template <typename T>
Var<T> log_softmax(const Var<T>& x);

// Column-wise concatenation; all inputs share the row count.
template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts);
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> add_n(const std::vector<Var<T>>& terms);
// Elementwise product.
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale(const Var<T>& x, T factor);
// Multiplies row i of x by s(i, 0).
template <typename T>
Var<T> row_scale(const Var<T>& x, const Var<T>& s);
// 1x1 sum and mean over all entries.
template <typename T>
Var<T> sum(const Var<T>& x);
template <typename T>
Var<T> mean(const Var<T>& x);
// First n rows.
template <typename T>
Var<T> top_rows(const Var<T>& x, Eigen::Index n);

// Rows of `table` selected by `ids`.
template <typename T>
Var<T> embedding(const Var<T>& table, const std::vector<int>& ids);

// GRU cell, gates ordered (reset, update, candidate):
//   r = s(x Wi_r + bi_r + h Wh_r + bh_r)
//   z = s(x Wi_z + bi_z + h Wh_z + bh_z)
//   n = tanh(x Wi_n + bi_n + r * (h Wh_n + bh_n))
//   h' = (1 - z) * n + z * h
template <typename T>
Var<T> gru_cell(const Var<T>& x, const Var<T>& h, const Var<T>& wi, const Var<T>& wh,
                const Var<T>& bi, const Var<T>& bh);

// Per-row -log softmax(logits)[label], as a B x 1 column.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& labels);

// Forward: 1 where sigmoid(score) > 0.5 (so a score of exactly 0 gives 0).
// Backward: upstream * sigmoid'(score).
template <typename T>
Var<T> straight_through_threshold(const Var<T>& score);

// Forward: one-hot of the row argmax, lowest index on ties.
// Backward: the softmax Jacobian-vector product.
template <typename T>
Var<T> straight_through_argmax(const Var<T>& logits);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adaptive moment estimation with bias correction.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}
  // Applies one update from each parameter's grad. Throws NonFiniteError,
  // naming the parameter, before touching anything if a gradient is not finite.
  void step(ParameterStore<T>& store);
  long steps() const { return steps_; }

 private:
  AdamConfig config_;
  long steps_ = 0;
};

}  // namespace guidegate::diffcore

#endif  // GUIDEGATE_DIFFCORE_H_
