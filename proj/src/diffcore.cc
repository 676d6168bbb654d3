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

#include "guidegate/diffcore.h"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "guidegate/errors.h"

namespace guidegate::diffcore {

namespace {

template <typename M>
std::string dims(const M& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

[[noreturn]] void shape_error(const std::string& op, const std::string& detail) {
  throw std::invalid_argument(op + ": shape mismatch: " + detail);
}

template <typename T>
void require_same_shape(const char* op, const Matrix<T>& a, const Matrix<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    shape_error(op, "operands are " + dims(a) + " and " + dims(b));
  }
}

template <typename T>
bool any_needs(const std::initializer_list<Var<T>>& vars) {
  for (const auto& v : vars) {
    if (v.tape()->needs(v.id())) return true;
  }
  return false;
}

template <typename T>
Tape<T>* tape_of(const Var<T>& v, const char* op) {
  if (!v.valid()) throw std::invalid_argument(std::string(op) + ": invalid Var");
  return v.tape();
}

template <typename T>
Matrix<T> row_softmax(const Matrix<T>& x) {
  Matrix<T> y = (x.colwise() - x.rowwise().maxCoeff()).array().exp().matrix();
  y.array().colwise() /= y.rowwise().sum().array();
  return y;
}

}  // namespace

// ---------------------------------------------------------------------------
// ParameterStore

template <typename T>
Parameter<T>& ParameterStore<T>::add(const std::string& name, Eigen::Index rows,
                                     Eigen::Index cols) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
  auto p = std::make_unique<Parameter<T>>();
  p->name = name;
  p->value = Matrix<T>::Zero(rows, cols);
  p->grad = Matrix<T>::Zero(rows, cols);
  p->adam_m = Matrix<T>::Zero(rows, cols);
  p->adam_v = Matrix<T>::Zero(rows, cols);
  index_[name] = params_.size();
  params_.push_back(std::move(p));
  return *params_.back();
}

template <typename T>
Parameter<T>* ParameterStore<T>::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : params_[it->second].get();
}

template <typename T>
const Parameter<T>* ParameterStore<T>::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : params_[it->second].get();
}

template <typename T>
Parameter<T>& ParameterStore<T>::at(const std::string& name) {
  auto* p = find(name);
  if (p == nullptr) throw std::out_of_range("no parameter named " + name);
  return *p;
}

template <typename T>
std::size_t ParameterStore<T>::num_scalars() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
  return n;
}

template <typename T>
void ParameterStore<T>::zero_grad() {
  for (auto& p : params_) p->grad.setZero();
}

namespace {
constexpr char kMagic[8] = {'G', 'G', 'C', 'K', 'P', 'T', 0, 0};

template <typename V>
void write_pod(std::ostream& out, V v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::istream& in, const std::filesystem::path& path) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!in) throw CorruptData("truncated checkpoint " + path.string(), 0);
  return v;
}
}  // namespace

template <typename T>
void save_checkpoint(const ParameterStore<T>& store, const std::filesystem::path& path,
                     const std::string& prefix) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  std::vector<const Parameter<T>*> selected;
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (store[i].name.rfind(prefix, 0) == 0) selected.push_back(&store[i]);
  }
  out.write(kMagic, sizeof(kMagic));
  write_pod<std::uint32_t>(out, kCheckpointVersion);
  write_pod<std::uint32_t>(out, sizeof(T));
  write_pod<std::uint64_t>(out, selected.size());
  for (const auto* p : selected) {
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(p->name.size()));
    out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(p->value.rows()));
    write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(p->value.cols()));
    out.write(reinterpret_cast<const char*>(p->value.data()),
              static_cast<std::streamsize>(p->value.size() * sizeof(T)));
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

template <typename T>
std::size_t load_checkpoint(ParameterStore<T>& store, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingPrerequisite("checkpoint not found: " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw CorruptData("not a checkpoint: " + path.string(), 0);
  }
  auto version = read_pod<std::uint32_t>(in, path);
  if (version != kCheckpointVersion) {
    throw CorruptData("unsupported checkpoint version " + std::to_string(version), 0);
  }
  auto scalar_bytes = read_pod<std::uint32_t>(in, path);
  if (scalar_bytes != 4 && scalar_bytes != 8) {
    throw CorruptData("bad scalar width in " + path.string(), 0);
  }
  auto count = read_pod<std::uint64_t>(in, path);
  std::size_t loaded = 0;
  for (std::uint64_t i = 0; i < count; ++i) {
    auto len = read_pod<std::uint32_t>(in, path);
    std::string name(len, '\0');
    in.read(name.data(), len);
    auto rows = static_cast<Eigen::Index>(read_pod<std::uint64_t>(in, path));
    auto cols = static_cast<Eigen::Index>(read_pod<std::uint64_t>(in, path));
    Matrix<T> value(rows, cols);
    if (scalar_bytes == 4) {
      Matrix<float> raw(rows, cols);
      in.read(reinterpret_cast<char*>(raw.data()),
              static_cast<std::streamsize>(raw.size() * 4));
      value = raw.template cast<T>();
    } else {
      Matrix<double> raw(rows, cols);
      in.read(reinterpret_cast<char*>(raw.data()),
              static_cast<std::streamsize>(raw.size() * 8));
      value = raw.template cast<T>();
    }
    if (!in) throw CorruptData("truncated checkpoint " + path.string(), 0);
    if (auto* p = store.find(name)) {
      if (p->value.rows() != rows || p->value.cols() != cols) {
        throw std::invalid_argument("checkpoint parameter " + name + " is " +
                                    std::to_string(rows) + "x" + std::to_string(cols) +
                                    " but the model expects " + dims(p->value));
      }
      p->value = std::move(value);
      ++loaded;
    }
  }
  return loaded;
}

// ---------------------------------------------------------------------------
// Tape

template <typename T>
Var<T> Tape<T>::push(Matrix<T> value, bool requires_grad, Backward backward,
                     const char* op) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(backward);
  n.op = op;
  nodes_.push_back(std::move(n));
  return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
}

template <typename T>
Var<T> Tape<T>::constant(Matrix<T> value) {
  return push(std::move(value), false, nullptr, "constant");
}

template <typename T>
Var<T> Tape<T>::variable(Matrix<T> value) {
  return push(std::move(value), true, nullptr, "variable");
}

template <typename T>
Var<T> Tape<T>::param(Parameter<T>& p) {
  auto it = param_nodes_.find(&p);
  if (it != param_nodes_.end()) return Var<T>(this, it->second);
  Var<T> v = push(p.value, true, nullptr, "param");
  nodes_[v.id()].param = &p;
  param_nodes_[&p] = v.id();
  return v;
}

template <typename T>
void Tape<T>::backward(const Var<T>& loss) {
  if (loss.tape() != this) throw std::invalid_argument("backward: loss is on another tape");
  if (loss.rows() != 1 || loss.cols() != 1) {
    shape_error("backward", "loss must be 1x1, got " + dims(loss.value()));
  }
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad.resize(0, 0);
  }
  accumulate(loss.id(), Matrix<T>::Ones(1, 1));
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.has_grad) continue;
    if (n.backward) n.backward(*this, id);
    if (n.param != nullptr) n.param->grad += n.grad;
  }
}

// ---------------------------------------------------------------------------
// Ops

template <typename T>
Var<T> affine(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  Tape<T>* tape = tape_of(x, "affine");
  const auto& xv = x.value();
  const auto& wv = w.value();
  const auto& bv = b.value();
  if (xv.cols() != wv.rows() || bv.rows() != 1 || bv.cols() != wv.cols()) {
    shape_error("affine", "x " + dims(xv) + ", W " + dims(wv) + ", b " + dims(bv));
  }
  Matrix<T> y = xv * wv;
  y.rowwise() += bv.row(0);
  const int xi = x.id(), wi = w.id(), bi = b.id();
  return tape->push(std::move(y), any_needs({x, w, b}),
                    [xi, wi, bi](Tape<T>& t, int self) {
                      const auto& g = t.node(self).grad;
                      if (t.needs(xi)) t.accumulate(xi, g * t.node(wi).value.transpose());
                      if (t.needs(wi)) t.accumulate(wi, t.node(xi).value.transpose() * g);
                      if (t.needs(bi)) t.accumulate(bi, g.colwise().sum());
                    },
                    "affine");
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w) {
  Tape<T>* tape = tape_of(x, "linear");
  const auto& xv = x.value();
  const auto& wv = w.value();
  if (xv.cols() != wv.rows()) shape_error("linear", "x " + dims(xv) + ", W " + dims(wv));
  const int xi = x.id(), wi = w.id();
  return tape->push(xv * wv, any_needs({x, w}),
                    [xi, wi](Tape<T>& t, int self) {
                      const auto& g = t.node(self).grad;
                      if (t.needs(xi)) t.accumulate(xi, g * t.node(wi).value.transpose());
                      if (t.needs(wi)) t.accumulate(wi, t.node(xi).value.transpose() * g);
                    },
                    "linear");
}

namespace {

// (B*H*W) x (k*k*C) patch matrix, zero outside the image.
template <typename T>
Matrix<T> im2col(const Matrix<T>& x, ImageShape s, int k) {
  const int half = k / 2;
  const Eigen::Index batch = x.rows();
  Matrix<T> cols = Matrix<T>::Zero(batch * s.height * s.width, k * k * s.channels);
  for (Eigen::Index b = 0; b < batch; ++b) {
    const T* img = x.row(b).data();
    for (int r = 0; r < s.height; ++r) {
      for (int c = 0; c < s.width; ++c) {
        T* dst = cols.row((b * s.height + r) * s.width + c).data();
        for (int ky = 0; ky < k; ++ky) {
          const int rr = r + ky - half;
          if (rr < 0 || rr >= s.height) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int cc = c + kx - half;
            if (cc < 0 || cc >= s.width) continue;
            std::memcpy(dst + (ky * k + kx) * s.channels,
                        img + (rr * s.width + cc) * s.channels, sizeof(T) * s.channels);
          }
        }
      }
    }
  }
  return cols;
}

template <typename T>
Matrix<T> col2im(const Matrix<T>& cols, Eigen::Index batch, ImageShape s, int k) {
  const int half = k / 2;
  Matrix<T> x = Matrix<T>::Zero(batch, s.height * s.width * s.channels);
  for (Eigen::Index b = 0; b < batch; ++b) {
    T* img = x.row(b).data();
    for (int r = 0; r < s.height; ++r) {
      for (int c = 0; c < s.width; ++c) {
        const T* src = cols.row((b * s.height + r) * s.width + c).data();
        for (int ky = 0; ky < k; ++ky) {
          const int rr = r + ky - half;
          if (rr < 0 || rr >= s.height) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int cc = c + kx - half;
            if (cc < 0 || cc >= s.width) continue;
            T* dst = img + (rr * s.width + cc) * s.channels;
            const T* patch = src + (ky * k + kx) * s.channels;
            for (int ch = 0; ch < s.channels; ++ch) dst[ch] += patch[ch];
          }
        }
      }
    }
  }
  return x;
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, ImageShape shape,
              int kernel) {
  Tape<T>* tape = tape_of(x, "conv2d");
  const auto& xv = x.value();
  const auto& wv = w.value();
  const auto& bv = b.value();
  if (kernel < 1 || kernel % 2 == 0) shape_error("conv2d", "kernel must be odd");
  const Eigen::Index pixels = Eigen::Index(shape.height) * shape.width;
  if (xv.cols() != pixels * shape.channels ||
      wv.rows() != Eigen::Index(kernel) * kernel * shape.channels || bv.rows() != 1 ||
      bv.cols() != wv.cols()) {
    shape_error("conv2d", "x " + dims(xv) + " for image " + std::to_string(shape.height) +
                              "x" + std::to_string(shape.width) + "x" +
                              std::to_string(shape.channels) + ", W " + dims(wv) +
                              ", b " + dims(bv));
  }
  const Eigen::Index batch = xv.rows();
  const Eigen::Index out_ch = wv.cols();
  auto cols = std::make_shared<Matrix<T>>(im2col(xv, shape, kernel));
  Matrix<T> flat = (*cols) * wv;
  flat.rowwise() += bv.row(0);
  Matrix<T> y = Eigen::Map<Matrix<T>>(flat.data(), batch, pixels * out_ch);
  const int xi = x.id(), wi = w.id(), bi = b.id();
  return tape->push(
      std::move(y), any_needs({x, w, b}),
      [xi, wi, bi, cols, shape, kernel, batch, pixels, out_ch](Tape<T>& t, int self) {
        const auto& g = t.node(self).grad;
        Eigen::Map<const Matrix<T>> gflat(g.data(), batch * pixels, out_ch);
        if (t.needs(wi)) t.accumulate(wi, cols->transpose() * gflat);
        if (t.needs(bi)) t.accumulate(bi, gflat.colwise().sum());
        if (t.needs(xi)) {
          Matrix<T> dcols = gflat * t.node(wi).value.transpose();
          t.accumulate(xi, col2im(dcols, batch, shape, kernel));
        }
      },
      "conv2d");
}

template <typename T>
Var<T> film(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta) {
  Tape<T>* tape = tape_of(x, "film");
  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  const Eigen::Index c = gv.cols();
  if (gv.rows() != xv.rows() || bv.rows() != xv.rows() || bv.cols() != c || c == 0 ||
      xv.cols() % c != 0) {
    shape_error("film", "x " + dims(xv) + ", gamma " + dims(gv) + ", beta " + dims(bv));
  }
  const Eigen::Index s = xv.cols() / c;
  Matrix<T> y(xv.rows(), xv.cols());
  for (Eigen::Index b = 0; b < xv.rows(); ++b) {
    Eigen::Map<const Matrix<T>> xin(xv.row(b).data(), s, c);
    Eigen::Map<Matrix<T>> out(y.row(b).data(), s, c);
    out = (xin.array().rowwise() * gv.row(b).array()).rowwise() + bv.row(b).array();
  }
  const int xi = x.id(), gi = gamma.id(), bi = beta.id();
  return tape->push(std::move(y), any_needs({x, gamma, beta}),
                    [xi, gi, bi, s, c](Tape<T>& t, int self) {
                      const auto& g = t.node(self).grad;
                      const auto& xv = t.node(xi).value;
                      const auto& gv = t.node(gi).value;
                      const Eigen::Index batch = g.rows();
                      Matrix<T> dx(batch, s * c), dgamma(batch, c), dbeta(batch, c);
                      for (Eigen::Index b = 0; b < batch; ++b) {
                        Eigen::Map<const Matrix<T>> gin(g.row(b).data(), s, c);
                        Eigen::Map<const Matrix<T>> xin(xv.row(b).data(), s, c);
                        Eigen::Map<Matrix<T>> dxo(dx.row(b).data(), s, c);
                        dxo = gin.array().rowwise() * gv.row(b).array();
                        dgamma.row(b) = (gin.array() * xin.array()).colwise().sum();
                        dbeta.row(b) = gin.colwise().sum();
                      }
                      t.accumulate(xi, dx);
                      t.accumulate(gi, dgamma);
                      t.accumulate(bi, dbeta);
                    },
                    "film");
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tape<T>* tape = tape_of(x, "relu");
  Matrix<T> y = x.value().cwiseMax(T(0));
  const int xi = x.id();
  return tape->push(std::move(y), any_needs({x}),
                    [xi](Tape<T>& t, int self) {
                      const auto& g = t.node(self).grad;
                      const auto& xv = t.node(xi).value;
                      t.accumulate(xi, (xv.array() > T(0)).select(g, T(0)).matrix());
                    },
                    "relu");
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
  Tape<T>* tape = tape_of(x, "tanh");
  Matrix<T> y = x.value().array().tanh().matrix();
  const int xi = x.id();
  return tape->push(std::move(y), any_needs({x}),
                    [xi](Tape<T>& t, int self) {
                      const auto& n = t.node(self);
                      t.accumulate(xi, (n.grad.array() * (T(1) - n.value.array().square()))
                                           .matrix());
                    },
                    "tanh");
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  Tape<T>* tape = tape_of(x, "sigmoid");
  Matrix<T> y = (T(1) / (T(1) + (-x.value().array()).exp())).matrix();
  const int xi = x.id();
  return tape->push(std::move(y), any_needs({x}),
                    [xi](Tape<T>& t, int self) {
                      const auto& n = t.node(self);
                      t.accumulate(
                          xi, (n.grad.array() * n.value.array() * (T(1) - n.value.array()))
                                  .matrix());
                    },
                    "sigmoid");
}

template <typename T>
Var<T> softmax(const Var<T>& x) {
  Tape<T>* tape = tape_of(x, "softmax");
  Matrix<T> y = row_softmax(x.value());
  const int xi = x.id();
  return tape->push(std::move(y), any_needs({x}),
                    [xi](Tape<T>& t, int self) {
                      const auto& n = t.node(self);
                      auto dot = (n.grad.array() * n.value.array()).rowwise().sum();
                      t.accumulate(
                          xi, (n.value.array() * (n.grad.array().colwise() - dot)).matrix());
                    },
                    "softmax");
}

template <typename T>
Var<T> log_softmax(const Var<T>& x) {
  Tape<T>* tape = tape_of(x, "log_softmax");
  const auto& xv = x.value();
  Matrix<T> shifted = xv.colwise() - xv.rowwise().maxCoeff();
  auto lse = shifted.array().exp().rowwise().sum().log();
  Matrix<T> y = (shifted.array().colwise() - lse).matrix();
  const int xi = x.id();
  return tape->push(std::move(y), any_needs({x}),
                    [xi](Tape<T>& t, int self) {
                      const auto& n = t.node(self);
                      auto total = n.grad.rowwise().sum();
                      Matrix<T> p = n.value.array().exp().matrix();
                      t.accumulate(xi, n.grad - (p.array().colwise() * total.array()).matrix());
                    },
                    "log_softmax");
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  Tape<T>* tape = tape_of(parts.front(), "concat");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  bool needs = false;
  std::vector<int> ids;
  std::vector<Eigen::Index> widths;
  for (const auto& p : parts) {
    if (p.rows() != rows) {
      shape_error("concat", "row counts " + std::to_string(rows) + " and " +
                                std::to_string(p.rows()));
    }
    cols += p.cols();
    needs = needs || tape->needs(p.id());
    ids.push_back(p.id());
    widths.push_back(p.cols());
  }
  Matrix<T> y(rows, cols);
  Eigen::Index offset = 0;
  for (const auto& p : parts) {
    y.middleCols(offset, p.cols()) = p.value();
    offset += p.cols();
  }
  return tape->push(std::move(y), needs,
                    [ids, widths](Tape<T>& t, int self) {
                      const auto& g = t.node(self).grad;
                      Eigen::Index off = 0;
                      for (std::size_t i = 0; i < ids.size(); ++i) {
                        t.accumulate(ids[i], g.middleCols(off, widths[i]));
                        off += widths[i];
                      }
                    },
                    "concat");
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  Tape<T>* tape = tape_of(a, "add");
  require_same_shape("add", a.value(), b.value());
  const int ai = a.id(), bi = b.id();
  return tape->push(a.value() + b.value(), any_needs({a, b}),
                    [ai, bi](Tape<T>& t, int self) {
                      t.accumulate(ai, t.node(self).grad);
                      t.accumulate(bi, t.node(self).grad);
                    },
                    "add");
}

template <typename T>
Var<T> add_n(const std::vector<Var<T>>& terms) {
  if (terms.empty()) throw std::invalid_argument("add_n: no inputs");
  Tape<T>* tape = tape_of(terms.front(), "add_n");
  Matrix<T> y = terms.front().value();
  bool needs = tape->needs(terms.front().id());
  std::vector<int> ids{terms.front().id()};
  for (std::size_t i = 1; i < terms.size(); ++i) {
    require_same_shape("add_n", y, terms[i].value());
    y += terms[i].value();
    needs = needs || tape->needs(terms[i].id());
    ids.push_back(terms[i].id());
  }
  return tape->push(std::move(y), needs,
                    [ids](Tape<T>& t, int self) {
                      for (int id : ids) t.accumulate(id, t.node(self).grad);
                    },
                    "add_n");
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  Tape<T>* tape = tape_of(a, "mul");
  require_same_shape("mul", a.value(), b.value());
  const int ai = a.id(), bi = b.id();
  return tape->push(a.value().cwiseProduct(b.value()), any_needs({a, b}),
                    [ai, bi](Tape<T>& t, int self) {
                      const auto& g = t.node(self).grad;
                      if (t.needs(ai)) t.accumulate(ai, g.cwiseProduct(t.node(bi).value));
                      if (t.needs(bi)) t.accumulate(bi, g.cwiseProduct(t.node(ai).value));
                    },
                    "mul");
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
  Tape<T>* tape = tape_of(x, "scale");
  const int xi = x.id();
  return tape->push(x.value() * factor, any_needs({x}),
                    [xi, factor](Tape<T>& t, int self) {
                      t.accumulate(xi, t.node(self).grad * factor);
                    },
                    "scale");
}

template <typename T>
Var<T> row_scale(const Var<T>& x, const Var<T>& s) {
  Tape<T>* tape = tape_of(x, "row_scale");
  const auto& xv = x.value();
  const auto& sv = s.value();
  if (sv.cols() != 1 || sv.rows() != xv.rows()) {
    shape_error("row_scale", "x " + dims(xv) + ", scale " + dims(sv));
  }
  Matrix<T> y = (xv.array().colwise() * sv.col(0).array()).matrix();
  const int xi = x.id(), si = s.id();
  return tape->push(std::move(y), any_needs({x, s}),
                    [xi, si](Tape<T>& t, int self) {
                      const auto& g = t.node(self).grad;
                      if (t.needs(xi)) {
                        t.accumulate(
                            xi, (g.array().colwise() * t.node(si).value.col(0).array()).matrix());
                      }
                      if (t.needs(si)) {
                        t.accumulate(si, g.cwiseProduct(t.node(xi).value).rowwise().sum());
                      }
                    },
                    "row_scale");
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  Tape<T>* tape = tape_of(x, "sum");
  Matrix<T> y(1, 1);
  y(0, 0) = x.value().sum();
  const int xi = x.id();
  const Eigen::Index r = x.rows(), c = x.cols();
  return tape->push(std::move(y), any_needs({x}),
                    [xi, r, c](Tape<T>& t, int self) {
                      t.accumulate(xi, Matrix<T>::Constant(r, c, t.node(self).grad(0, 0)));
                    },
                    "sum");
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  const Eigen::Index n = x.value().size();
  if (n == 0) shape_error("mean", "empty input");
  return scale(sum(x), T(1) / static_cast<T>(n));
}

template <typename T>
Var<T> top_rows(const Var<T>& x, Eigen::Index n) {
  Tape<T>* tape = tape_of(x, "top_rows");
  if (n < 0 || n > x.rows()) {
    shape_error("top_rows", "asked for " + std::to_string(n) + " rows of " + dims(x.value()));
  }
  if (n == x.rows()) return x;
  const int xi = x.id();
  const Eigen::Index rows = x.rows(), cols = x.cols();
  return tape->push(x.value().topRows(n), any_needs({x}),
                    [xi, n, rows, cols](Tape<T>& t, int self) {
                      Matrix<T> g = Matrix<T>::Zero(rows, cols);
                      g.topRows(n) = t.node(self).grad;
                      t.accumulate(xi, g);
                    },
                    "top_rows");
}

template <typename T>
Var<T> embedding(const Var<T>& table, const std::vector<int>& ids) {
  Tape<T>* tape = tape_of(table, "embedding");
  const auto& tv = table.value();
  Matrix<T> y(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows()) {
      shape_error("embedding", "id " + std::to_string(ids[i]) + " outside table " + dims(tv));
    }
    y.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
  }
  const int ti = table.id();
  const Eigen::Index rows = tv.rows(), cols = tv.cols();
  return tape->push(std::move(y), any_needs({table}),
                    [ti, ids, rows, cols](Tape<T>& t, int self) {
                      const auto& g = t.node(self).grad;
                      Matrix<T> d = Matrix<T>::Zero(rows, cols);
                      for (std::size_t i = 0; i < ids.size(); ++i) {
                        d.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
                      }
                      t.accumulate(ti, d);
                    },
                    "embedding");
}

template <typename T>
Var<T> gru_cell(const Var<T>& x, const Var<T>& h, const Var<T>& wi, const Var<T>& wh,
                const Var<T>& bi, const Var<T>& bh) {
  Tape<T>* tape = tape_of(x, "gru_cell");
  const auto& xv = x.value();
  const auto& hv = h.value();
  const Eigen::Index hidden = hv.cols();
  if (wi.rows() != xv.cols() || wi.cols() != 3 * hidden || wh.rows() != hidden ||
      wh.cols() != 3 * hidden || bi.rows() != 1 || bi.cols() != 3 * hidden ||
      bh.rows() != 1 || bh.cols() != 3 * hidden || hv.rows() != xv.rows()) {
    shape_error("gru_cell", "x " + dims(xv) + ", h " + dims(hv) + ", Wi " +
                                dims(wi.value()) + ", Wh " + dims(wh.value()) + ", bi " +
                                dims(bi.value()) + ", bh " + dims(bh.value()));
  }
  Matrix<T> gi = xv * wi.value();
  gi.rowwise() += bi.value().row(0);
  Matrix<T> gh = hv * wh.value();
  gh.rowwise() += bh.value().row(0);
  auto sig = [](const auto& a) { return (T(1) / (T(1) + (-a).exp())).matrix(); };
  auto saved = std::make_shared<std::array<Matrix<T>, 4>>();
  auto& [r, z, n, ghn] = *saved;
  r = sig(gi.leftCols(hidden).array() + gh.leftCols(hidden).array());
  z = sig(gi.middleCols(hidden, hidden).array() + gh.middleCols(hidden, hidden).array());
  ghn = gh.rightCols(hidden);
  n = (gi.rightCols(hidden).array() + r.array() * ghn.array()).tanh().matrix();
  Matrix<T> y = ((T(1) - z.array()) * n.array() + z.array() * hv.array()).matrix();
  const int xi = x.id(), hi = h.id(), wii = wi.id(), whi = wh.id(), bii = bi.id(),
            bhi = bh.id();
  return tape->push(
      std::move(y), any_needs({x, h, wi, wh, bi, bh}),
      [=](Tape<T>& t, int self) {
        const auto& g = t.node(self).grad;
        const auto& [r, z, n, ghn] = *saved;
        const auto& hv = t.node(hi).value;
        Matrix<T> dpre_n = (g.array() * (T(1) - z.array()) * (T(1) - n.array().square())).matrix();
        Matrix<T> dr = dpre_n.cwiseProduct(ghn);
        const Eigen::Index rows = g.rows();
        Matrix<T> dgi(rows, 3 * hidden), dgh(rows, 3 * hidden);
        dgi.leftCols(hidden) = (dr.array() * r.array() * (T(1) - r.array())).matrix();
        dgi.middleCols(hidden, hidden) =
            (g.array() * (hv.array() - n.array()) * z.array() * (T(1) - z.array())).matrix();
        dgi.rightCols(hidden) = dpre_n;
        dgh.leftCols(2 * hidden) = dgi.leftCols(2 * hidden);
        dgh.rightCols(hidden) = dpre_n.cwiseProduct(r);
        if (t.needs(wii)) t.accumulate(wii, t.node(xi).value.transpose() * dgi);
        if (t.needs(bii)) t.accumulate(bii, dgi.colwise().sum());
        if (t.needs(whi)) t.accumulate(whi, hv.transpose() * dgh);
        if (t.needs(bhi)) t.accumulate(bhi, dgh.colwise().sum());
        if (t.needs(xi)) t.accumulate(xi, dgi * t.node(wii).value.transpose());
        if (t.needs(hi)) {
          t.accumulate(hi, dgh * t.node(whi).value.transpose() + g.cwiseProduct(z));
        }
      },
      "gru_cell");
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
  Tape<T>* tape = tape_of(logits, "cross_entropy");
  const auto& lv = logits.value();
  if (static_cast<Eigen::Index>(labels.size()) != lv.rows()) {
    shape_error("cross_entropy", "logits " + dims(lv) + " with " +
                                     std::to_string(labels.size()) + " labels");
  }
  Matrix<T> shifted = lv.colwise() - lv.rowwise().maxCoeff();
  Matrix<T> lse = shifted.array().exp().rowwise().sum().log().matrix();
  Matrix<T> y(lv.rows(), 1);
  for (Eigen::Index i = 0; i < lv.rows(); ++i) {
    const int label = labels[static_cast<std::size_t>(i)];
    if (label < 0 || label >= lv.cols()) {
      shape_error("cross_entropy", "label " + std::to_string(label) + " for " +
                                       std::to_string(lv.cols()) + " classes");
    }
    y(i, 0) = lse(i, 0) - shifted(i, label);
  }
  const int li = logits.id();
  return tape->push(std::move(y), any_needs({logits}),
                    [li, labels](Tape<T>& t, int self) {
                      const auto& g = t.node(self).grad;
                      Matrix<T> d = row_softmax(t.node(li).value);
                      for (Eigen::Index i = 0; i < d.rows(); ++i) {
                        d(i, labels[static_cast<std::size_t>(i)]) -= T(1);
                      }
                      t.accumulate(li, (d.array().colwise() * g.col(0).array()).matrix());
                    },
                    "cross_entropy");
}

template <typename T>
Var<T> straight_through_threshold(const Var<T>& score) {
  Tape<T>* tape = tape_of(score, "straight_through_threshold");
  const auto& sv = score.value();
  if (sv.cols() != 1) shape_error("straight_through_threshold", "score is " + dims(sv));
  auto prob = std::make_shared<Matrix<T>>((T(1) / (T(1) + (-sv.array()).exp())).matrix());
  Matrix<T> y = tape->mode() == SurrogateMode::kSmooth
                    ? *prob
                    : (prob->array() > T(0.5)).template cast<T>().matrix();
  const int si = score.id();
  return tape->push(std::move(y), any_needs({score}),
                    [si, prob](Tape<T>& t, int self) {
                      const auto& g = t.node(self).grad;
                      t.accumulate(si,
                                   (g.array() * prob->array() * (T(1) - prob->array())).matrix());
                    },
                    "straight_through_threshold");
}

template <typename T>
Var<T> straight_through_argmax(const Var<T>& logits) {
  Tape<T>* tape = tape_of(logits, "straight_through_argmax");
  const auto& lv = logits.value();
  if (lv.cols() == 0) shape_error("straight_through_argmax", "no columns");
  auto prob = std::make_shared<Matrix<T>>(row_softmax(lv));
  Matrix<T> y;
  if (tape->mode() == SurrogateMode::kSmooth) {
    y = *prob;
  } else {
    y = Matrix<T>::Zero(lv.rows(), lv.cols());
    for (Eigen::Index i = 0; i < lv.rows(); ++i) {
      Eigen::Index best = 0;
      for (Eigen::Index j = 1; j < lv.cols(); ++j) {
        if (lv(i, j) > lv(i, best)) best = j;
      }
      y(i, best) = T(1);
    }
  }
  const int li = logits.id();
  return tape->push(std::move(y), any_needs({logits}),
                    [li, prob](Tape<T>& t, int self) {
                      const auto& g = t.node(self).grad;
                      const auto& p = *prob;
                      auto dot = (g.array() * p.array()).rowwise().sum();
                      t.accumulate(li, (p.array() * (g.array().colwise() - dot)).matrix());
                    },
                    "straight_through_argmax");
}

// ---------------------------------------------------------------------------
// Adam

template <typename T>
void Adam<T>::step(ParameterStore<T>& store) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& p = store[i];
    if (!p.grad.allFinite()) {
      std::ostringstream msg;
      msg << "non-finite gradient in parameter " << p.name << " (" << dims(p.grad)
          << ", max |g| = " << p.grad.cwiseAbs().maxCoeff() << ") at optimizer step "
          << steps_ + 1;
      throw NonFiniteError(msg.str());
    }
  }
  ++steps_;
  const T lr = static_cast<T>(config_.lr);
  const T b1 = static_cast<T>(config_.beta1);
  const T b2 = static_cast<T>(config_.beta2);
  const T eps = static_cast<T>(config_.eps);
  const T c1 = static_cast<T>(1.0 - std::pow(config_.beta1, static_cast<double>(steps_)));
  const T c2 = static_cast<T>(1.0 - std::pow(config_.beta2, static_cast<double>(steps_)));
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto& p = store[i];
    p.adam_m = b1 * p.adam_m + (T(1) - b1) * p.grad;
    p.adam_v = b2 * p.adam_v + (T(1) - b2) * p.grad.cwiseAbs2();
    p.value.array() -=
        lr * (p.adam_m.array() / c1) / ((p.adam_v.array() / c2).sqrt() + eps);
  }
}

// ---------------------------------------------------------------------------
// Instantiations

#define GUIDEGATE_INSTANTIATE(T)                                                         \
  template class ParameterStore<T>;                                                      \
  template class Tape<T>;                                                                \
  template class Adam<T>;                                                                \
  template void save_checkpoint<T>(const ParameterStore<T>&, const std::filesystem::path&, \
                                   const std::string&);                                  \
  template std::size_t load_checkpoint<T>(ParameterStore<T>&,                            \
                                          const std::filesystem::path&);                 \
  template Var<T> affine<T>(const Var<T>&, const Var<T>&, const Var<T>&);                \
  template Var<T> linear<T>(const Var<T>&, const Var<T>&);                               \
  template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, ImageShape, int); \
  template Var<T> film<T>(const Var<T>&, const Var<T>&, const Var<T>&);                  \
  template Var<T> relu<T>(const Var<T>&);                                                \
  template Var<T> tanh<T>(const Var<T>&);                                                \
  template Var<T> sigmoid<T>(const Var<T>&);                                             \
  template Var<T> softmax<T>(const Var<T>&);                                             \
  template Var<T> log_softmax<T>(const Var<T>&);                                         \
  template Var<T> concat<T>(const std::vector<Var<T>>&);                                 \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                  \
  template Var<T> add_n<T>(const std::vector<Var<T>>&);                                  \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                  \
  template Var<T> scale<T>(const Var<T>&, T);                                            \
  template Var<T> row_scale<T>(const Var<T>&, const Var<T>&);                            \
  template Var<T> sum<T>(const Var<T>&);                                                 \
  template Var<T> mean<T>(const Var<T>&);                                                \
  template Var<T> top_rows<T>(const Var<T>&, Eigen::Index);                              \
  template Var<T> embedding<T>(const Var<T>&, const std::vector<int>&);                  \
  template Var<T> gru_cell<T>(const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&, \
                              const Var<T>&, const Var<T>&);                             \
  template Var<T> cross_entropy<T>(const Var<T>&, const std::vector<int>&);              \
  template Var<T> straight_through_threshold<T>(const Var<T>&);                          \
  template Var<T> straight_through_argmax<T>(const Var<T>&);

GUIDEGATE_INSTANTIATE(float)
GUIDEGATE_INSTANTIATE(double)

#undef GUIDEGATE_INSTANTIATE

}  // namespace guidegate::diffcore
