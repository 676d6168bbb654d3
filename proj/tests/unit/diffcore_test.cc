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

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "doctest.h"
#include "gradcheck.h"
#include "guidegate/diffcore.h"
#include "guidegate/errors.h"
#include "temp_dir.h"

namespace dc = guidegate::diffcore;
using dc::Matrix;
using dc::SurrogateMode;
using dc::Tape;
using dc::Var;
using guidegate::testing::TempDir;

namespace {

Matrix<double> row(std::initializer_list<double> v) {
  Matrix<double> m(1, static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) m(0, i++) = x;
  return m;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

bool bit_equal(const Matrix<float>& a, const Matrix<float>& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())) == 0;
}

}  // namespace

TEST_CASE("every op matches central finite differences on 20 random instances") {
  const auto results = guidegate::testing::check_all_ops(20, 2024);
  CHECK(results.size() >= 20);
  for (const auto& r : results) {
    INFO(r.name << " max relative error " << r.max_rel_error);
    CHECK(r.instances == 20);
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("the gradient checker catches a wrong backward pass") {
  namespace gt = guidegate::testing;
  // y = x^2 with a backward pass that forgets the factor 2.
  auto broken_square = [](const Var<double>& x) {
    Tape<double>* tape = x.tape();
    const int xi = x.id();
    return tape->push(x.value().array().square().matrix(), true,
                      [xi](Tape<double>& t, int self) {
                        t.accumulate(xi, (t.node(self).grad.array() * t.node(xi).value.array())
                                             .matrix());
                      },
                      "broken_square");
  };
  const std::vector<Matrix<double>> inputs = {row({0.7, -1.3, 2.0})};
  const auto r = gt::check_input_gradients(
      inputs, [&](Tape<double>&, const std::vector<Var<double>>& v) {
        return gt::project(broken_square(v[0]), 3);
      });
  CHECK(r.max_rel_error > 0.4);
  CHECK(r.probes == 3);
}

TEST_CASE("stencils across a ReLU kink use a smaller step") {
  namespace gt = guidegate::testing;
  // The middle entry sits 1e-7 above the kink.
  const std::vector<Matrix<double>> inputs = {row({0.5, 1e-7, -0.4})};
  const auto r = gt::check_input_gradients(
      inputs, [](Tape<double>&, const std::vector<Var<double>>& v) {
        return gt::project(dc::relu(v[0]), 5);
      });
  CHECK(r.max_rel_error < 1e-6);
  CHECK(r.reduced_step == 1);
}

TEST_CASE("softmax of equal logits is uniform") {
  Tape<double> tape;
  auto p = dc::softmax(tape.constant(Matrix<double>::Constant(1, 7, 0.25)));
  for (int i = 0; i < 7; ++i) CHECK(p.value()(0, i) == doctest::Approx(1.0 / 7.0).epsilon(1e-15));
}

TEST_CASE("GRU with zero weights halves the state") {
  // r = z = sigmoid(0) = 1/2 and n = tanh(0) = 0, so h' = h / 2.
  Tape<double> tape;
  const int h = 4;
  auto x = tape.constant(Matrix<double>::Constant(2, 3, 0.7));
  Matrix<double> h0(2, h);
  h0 << 1, -2, 0.5, 0, 3, 0.25, -1, 8;
  auto hv = tape.constant(h0);
  auto out = dc::gru_cell(x, hv, tape.constant(Matrix<double>::Zero(3, 3 * h)),
                          tape.constant(Matrix<double>::Zero(h, 3 * h)),
                          tape.constant(Matrix<double>::Zero(1, 3 * h)),
                          tape.constant(Matrix<double>::Zero(1, 3 * h)));
  CHECK((out.value() - 0.5 * h0).cwiseAbs().maxCoeff() == 0.0);
  auto zero = dc::gru_cell(x, tape.constant(Matrix<double>::Zero(2, h)),
                           tape.constant(Matrix<double>::Zero(3, 3 * h)),
                           tape.constant(Matrix<double>::Zero(h, 3 * h)),
                           tape.constant(Matrix<double>::Zero(1, 3 * h)),
                           tape.constant(Matrix<double>::Zero(1, 3 * h)));
  CHECK(zero.value().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("the bias gradient of an affine map is the summed upstream gradient") {
  Tape<double> tape;
  auto x = tape.constant(Matrix<double>::Random(3, 2));
  auto w = tape.variable(Matrix<double>::Random(2, 4));
  auto b = tape.variable(Matrix<double>::Zero(1, 4));
  Matrix<double> upstream = Matrix<double>::Random(3, 4);
  auto loss = dc::sum(dc::mul(dc::affine(x, w, b), tape.constant(upstream)));
  tape.backward(loss);
  CHECK((b.grad() - upstream.colwise().sum()).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("cross entropy of uniform logits is ln 7 and of a confident hit is 0") {
  Tape<double> tape;
  auto uniform = dc::cross_entropy(tape.constant(Matrix<double>::Zero(2, 7)), {0, 6});
  CHECK(uniform.value()(0, 0) == doctest::Approx(std::log(7.0)).epsilon(1e-15));
  CHECK(uniform.value()(1, 0) == doctest::Approx(1.94591014905531).epsilon(1e-12));
  Matrix<double> onehot = Matrix<double>::Zero(1, 7);
  onehot(0, 3) = 1000.0;
  auto sure = dc::cross_entropy(tape.constant(onehot), {3});
  CHECK(sure.value()(0, 0) == doctest::Approx(0.0));
  CHECK_THROWS_AS(dc::cross_entropy(tape.constant(onehot), {7}), std::invalid_argument);
  CHECK_THROWS_AS(dc::cross_entropy(tape.constant(onehot), {1, 2}), std::invalid_argument);
}

TEST_CASE("straight-through threshold is hard forward and sigmoid-shaped backward") {
  Tape<double> tape;
  Matrix<double> s(4, 1);
  s << 2.0, 0.0, -0.1, 0.5;
  auto score = tape.variable(s);
  auto g = dc::straight_through_threshold(score);
  CHECK(g.value()(0, 0) == 1.0);
  CHECK(g.value()(1, 0) == 0.0);  // sigmoid(0) = 0.5 is not above the threshold
  CHECK(g.value()(2, 0) == 0.0);
  CHECK(g.value()(3, 0) == 1.0);
  Matrix<double> up(4, 1);
  up << 1.0, -2.0, 0.5, 3.0;
  tape.backward(dc::sum(dc::mul(g, tape.constant(up))));
  for (int i = 0; i < 4; ++i) {
    // Central difference of the smooth surrogate.
    const double h = 1e-5;
    const double fd = (sigmoid(s(i, 0) + h) - sigmoid(s(i, 0) - h)) / (2 * h);
    CHECK(score.grad()(i, 0) == doctest::Approx(up(i, 0) * fd).epsilon(1e-9));
  }
}

TEST_CASE("straight-through argmax picks the lowest index on ties") {
  Tape<double> tape;
  Matrix<double> l(2, 3);
  l << 0.1, 2.0, -1.0, 1.0, 1.0, 0.0;
  auto logits = tape.variable(l);
  auto onehot = dc::straight_through_argmax(logits);
  CHECK(onehot.value().row(0) == row({0, 1, 0}));
  CHECK(onehot.value().row(1) == row({1, 0, 0}));
  // The hard-mode gradient is the softmax Jacobian-vector product.
  Matrix<double> up = Matrix<double>::Random(2, 3);
  tape.backward(dc::sum(dc::mul(onehot, tape.constant(up))));
  Tape<double> smooth(SurrogateMode::kSmooth);
  auto l2 = smooth.variable(l);
  smooth.backward(dc::sum(dc::mul(dc::softmax(l2), smooth.constant(up))));
  CHECK((logits.grad() - l2.grad()).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("smooth mode forwards the surrogates") {
  Tape<double> tape(SurrogateMode::kSmooth);
  Matrix<double> s(1, 3);
  s << 0.3, -1.0, 2.0;
  auto st = dc::straight_through_argmax(tape.constant(s));
  auto sm = dc::softmax(tape.constant(s));
  CHECK((st.value() - sm.value()).cwiseAbs().maxCoeff() == 0.0);
  auto th = dc::straight_through_threshold(tape.constant(s.transpose()));
  CHECK(th.value()(0, 0) == doctest::Approx(sigmoid(0.3)).epsilon(1e-15));
}

TEST_CASE("a node used twice accumulates both gradients") {
  Tape<double> tape;
  auto x = tape.variable(Matrix<double>::Constant(2, 2, 3.0));
  tape.backward(dc::sum(dc::add(x, dc::mul(x, x))));
  CHECK((x.grad().array() == 7.0).all());
}

TEST_CASE("mismatched shapes name the offending op") {
  Tape<double> tape;
  auto a = tape.constant(Matrix<double>::Zero(2, 3));
  auto b = tape.constant(Matrix<double>::Zero(3, 2));
  CHECK_THROWS_WITH_AS(dc::add(a, b), doctest::Contains("add"), std::invalid_argument);
  CHECK_THROWS_AS(dc::affine(a, tape.constant(Matrix<double>::Zero(2, 2)),
                             tape.constant(Matrix<double>::Zero(1, 2))),
                  std::invalid_argument);
  CHECK_THROWS_AS(dc::top_rows(a, 3), std::invalid_argument);
  CHECK_THROWS_AS(dc::embedding(b, {3}), std::invalid_argument);
  CHECK_THROWS_AS(dc::conv2d(a, b, tape.constant(Matrix<double>::Zero(1, 2)), {1, 1, 3}, 2),
                  std::invalid_argument);
}

TEST_CASE("parameters appear once per tape and receive gradients") {
  dc::ParameterStore<double> store;
  auto& p = store.add("w", 2, 2);
  p.value.setConstant(2.0);
  Tape<double> tape;
  auto a = tape.param(p);
  auto b = tape.param(p);
  CHECK(a.id() == b.id());
  store.zero_grad();
  tape.backward(dc::sum(dc::mul(a, b)));
  CHECK((p.grad.array() == 4.0).all());
  CHECK_THROWS_AS(store.add("w", 1, 1), std::invalid_argument);
  CHECK(store.num_scalars() == 4);
}

TEST_CASE("adam leaves parameters alone under zero gradients") {
  dc::ParameterStore<float> store;
  auto& p = store.add("w", 3, 3);
  p.value.setRandom();
  const Matrix<float> before = p.value;
  dc::Adam<float> adam;
  for (int i = 0; i < 5; ++i) {
    store.zero_grad();
    adam.step(store);
  }
  CHECK(bit_equal(p.value, before));
  CHECK(adam.steps() == 5);
}

TEST_CASE("adam with a constant gradient moves by the learning rate per step") {
  dc::ParameterStore<double> store;
  auto& p = store.add("x", 1, 1);
  dc::AdamConfig cfg;
  cfg.lr = 0.01;
  dc::Adam<double> adam(cfg);
  const double g = 0.37;
  double m = 0.0, v = 0.0, x = 0.0;
  for (int t = 1; t <= 200; ++t) {
    p.grad = Matrix<double>::Constant(1, 1, g);
    const double before = p.value(0, 0);
    adam.step(store);
    // Closed form of the update.
    m = cfg.beta1 * m + (1 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1 - cfg.beta2) * g * g;
    const double mh = m / (1 - std::pow(cfg.beta1, t));
    const double vh = v / (1 - std::pow(cfg.beta2, t));
    x -= cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
    CHECK(p.value(0, 0) == doctest::Approx(x).epsilon(1e-12));
    CHECK(before - p.value(0, 0) == doctest::Approx(cfg.lr).epsilon(1e-6));
  }
}

TEST_CASE("adam refuses non-finite gradients and names the parameter") {
  dc::ParameterStore<float> store;
  auto& a = store.add("fine", 1, 2);
  auto& b = store.add("broken", 1, 2);
  a.grad = Matrix<float>::Ones(1, 2);
  b.grad = Matrix<float>::Ones(1, 2);
  b.grad(0, 1) = std::numeric_limits<float>::quiet_NaN();
  const Matrix<float> before = a.value;
  dc::Adam<float> adam;
  CHECK_THROWS_WITH_AS(adam.step(store), doctest::Contains("broken"), guidegate::NonFiniteError);
  CHECK(bit_equal(a.value, before));
}

TEST_CASE("adam is deterministic") {
  auto run = [] {
    dc::ParameterStore<float> store;
    auto& p = store.add("w", 4, 4);
    std::mt19937_64 rng(3);
    std::normal_distribution<float> n;
    for (int i = 0; i < 16; ++i) p.value.data()[i] = n(rng);
    dc::Adam<float> adam;
    p.grad = Matrix<float>::Zero(4, 4);
    for (int s = 0; s < 20; ++s) {
      for (int i = 0; i < 16; ++i) p.grad.data()[i] = n(rng);
      adam.step(store);
    }
    return Matrix<float>(p.value);
  };
  CHECK(bit_equal(run(), run()));
}

TEST_CASE("checkpoints round-trip bit-exactly and honour prefixes") {
  TempDir dir;
  dc::ParameterStore<float> store;
  store.add("guide.a", 2, 3).value.setRandom();
  store.add("gate.b", 1, 4).value.setRandom();
  dc::save_checkpoint(store, dir.path() / "all.ckpt");
  dc::save_checkpoint(store, dir.path() / "guide.ckpt", "guide.");

  dc::ParameterStore<float> other;
  other.add("guide.a", 2, 3);
  other.add("gate.b", 1, 4);
  CHECK(dc::load_checkpoint(other, dir.path() / "all.ckpt") == 2);
  CHECK(bit_equal(other.at("guide.a").value, store.at("guide.a").value));
  CHECK(bit_equal(other.at("gate.b").value, store.at("gate.b").value));

  dc::ParameterStore<float> fresh;
  fresh.add("guide.a", 2, 3);
  fresh.add("gate.b", 1, 4);
  CHECK(dc::load_checkpoint(fresh, dir.path() / "guide.ckpt") == 1);
  CHECK(fresh.at("gate.b").value.isZero());

  dc::ParameterStore<double> wide;
  wide.add("guide.a", 2, 3);
  dc::load_checkpoint(wide, dir.path() / "guide.ckpt");
  CHECK(wide.at("guide.a").value == store.at("guide.a").value.cast<double>());
}

TEST_CASE("checkpoint loading rejects bad files") {
  TempDir dir;
  dc::ParameterStore<float> store;
  store.add("p", 2, 2).value.setRandom();
  dc::save_checkpoint(store, dir.path() / "p.ckpt");

  dc::ParameterStore<float> wrong;
  wrong.add("p", 3, 2);
  CHECK_THROWS_AS(dc::load_checkpoint(wrong, dir.path() / "p.ckpt"), std::invalid_argument);
  CHECK_THROWS_AS(dc::load_checkpoint(wrong, dir.path() / "missing.ckpt"),
                  guidegate::MissingPrerequisite);
  {
    std::ofstream out(dir.path() / "junk.ckpt", std::ios::binary);
    out << "not a checkpoint at all";
  }
  CHECK_THROWS_AS(dc::load_checkpoint(wrong, dir.path() / "junk.ckpt"), guidegate::CorruptData);
  {
    std::ifstream in(dir.path() / "p.ckpt", std::ios::binary);
    std::string bytes{std::istreambuf_iterator<char>(in), {}};
    std::ofstream out(dir.path() / "cut.ckpt", std::ios::binary);
    out << bytes.substr(0, bytes.size() - 3);
  }
  dc::ParameterStore<float> same;
  same.add("p", 2, 2);
  CHECK_THROWS_AS(dc::load_checkpoint(same, dir.path() / "cut.ckpt"), guidegate::CorruptData);
}
