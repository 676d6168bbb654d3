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

#include <cstring>
#include <random>
#include <set>

#include "doctest.h"
#include "gradcheck.h"
#include "guidegate/agents.h"
#include "guidegate/gridworld.h"

namespace ag = guidegate::agents;
namespace dc = guidegate::diffcore;
namespace gw = guidegate::gridworld;
using dc::Matrix;
using dc::Tape;

namespace {

// Observations and instructions of `n` freshly reset GoToObj missions that
// share an instruction length.
struct Inputs {
  std::vector<std::vector<int>> tokens;
  std::vector<gw::EnvState> states;
};

Inputs random_inputs(int n, std::uint64_t seed, gw::Level level = gw::Level::kGoToObj) {
  Inputs in;
  for (int i = 0; i < n; ++i) {
    auto s = gw::reset(gw::generate_mission(level, gw::derive_seed(seed, 9, i)));
    in.tokens.push_back(gw::tokenize(s.spec.instruction));
    in.states.push_back(std::move(s));
  }
  return in;
}

template <typename T>
Matrix<T> observations(const std::vector<gw::EnvState>& states) {
  std::vector<gw::Observation> obs;
  for (const auto& s : states) obs.push_back(gw::observe(s));
  std::vector<const gw::Observation*> ptrs;
  for (const auto& o : obs) ptrs.push_back(&o);
  return ag::encode_observations<T>(ptrs);
}

// Advances every state by one fixed action so later steps see new views.
void advance(std::vector<gw::EnvState>& states, int step) {
  for (auto& s : states) {
    if (!s.done) gw::step_in_place(s, step % 3);
  }
}

template <typename T>
bool bit_equal(const Matrix<T>& a, const Matrix<T>& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(T) * static_cast<std::size_t>(a.size())) == 0;
}

ag::Dims small_dims() {
  ag::Dims d;
  d.word_embedding = 4;
  d.instruction = 6;
  d.conv1 = 3;
  d.conv2 = 4;
  d.memory = 8;
  d.message_embedding = 3;
  d.encoding = 5;
  d.hidden = 6;
  return d;
}

}  // namespace

TEST_CASE("default dimensions give the documented shapes") {
  ag::GatedAgent<float> agent;
  agent.initialize(1, 2.0);
  auto in = random_inputs(3, 1);
  Tape<float> tape;
  auto mem = agent.begin(tape, in.tokens);
  auto out = agent.forward_gated(tape, mem, observations<float>(in.states));
  CHECK(out.r.cols() == 128);
  CHECK(out.encoding.cols() == 64);
  CHECK(out.logits.cols() == 7);
  CHECK(out.g.cols() == 1);
  CHECK(out.messages.size() == 3);
  CHECK(agent.params().find("learner.memory_gru.wi")->value.rows() ==
        gw::kViewCells * agent.dims().conv2);
  for (std::size_t i = 0; i < agent.params().size(); ++i) {
    const auto& name = agent.params()[i].name;
    const bool known = name.rfind("learner.", 0) == 0 || name.rfind("guide.", 0) == 0 ||
                       name.rfind("encoder.", 0) == 0 || name.rfind("gate.", 0) == 0 ||
                       name.rfind("policy.", 0) == 0;
    CHECK_MESSAGE(known, name);
  }
}

TEST_CASE("representations are deterministic") {
  ag::GatedAgent<float> agent;
  agent.initialize(4, 2.0);
  auto in = random_inputs(4, 2);
  const Matrix<float> obs = observations<float>(in.states);
  Tape<float> t1, t2;
  auto m1 = agent.begin(t1, in.tokens);
  auto m2 = agent.begin(t2, in.tokens);
  auto r1 = agent.learner().represent(t1, obs, m1.learner);
  auto r2 = agent.learner().represent(t2, obs, m2.learner);
  CHECK(bit_equal(r1.value(), r2.value()));
}

TEST_CASE("a zero-weight representation unit ignores the observation") {
  // Zero weights: FiLM gives gamma = beta = 0, the conv features vanish and a
  // zero-weight GRU from a zero state stays at zero.
  ag::GatedAgent<double> agent;
  agent.initialize(5, 2.0);
  for (std::size_t i = 0; i < agent.params().size(); ++i) agent.params()[i].value.setZero();
  auto a = random_inputs(2, 3);
  auto b = random_inputs(2, 4);
  for (auto& t : b.tokens) t = a.tokens[0];
  for (auto& t : a.tokens) t = a.tokens[0];
  Tape<double> tape;
  auto ma = agent.begin(tape, a.tokens);
  auto mb = agent.begin(tape, b.tokens);
  auto ra = agent.learner().represent(tape, observations<double>(a.states), ma.learner);
  auto rb = agent.learner().represent(tape, observations<double>(b.states), mb.learner);
  CHECK(bit_equal(ra.value(), rb.value()));
  CHECK(ra.value().isZero());
}

TEST_CASE("message words come from the per-word argmax") {
  ag::GatedAgent<float> agent;
  agent.initialize(6, 2.0);
  Tape<float> tape;
  Matrix<float> l0(2, 3), l1(2, 3);
  l0 << 0.1f, 2.0f, -1.0f, 0, 0, 0;
  l1 << 3.0f, 0.0f, 0.0f, 0, 0, 0;
  auto out = agent.guide().discretize(tape, tape.constant(l0), tape.constant(l1));
  CHECK(out.messages[0] == ag::Message{1, 0});
  CHECK(out.messages[1] == ag::Message{0, 0});
  CHECK(out.messages[0].index() == 3);
  CHECK(out.word0.value().row(0).sum() == 1.0f);
  CHECK(out.word0.value()(0, 1) == 1.0f);
}

TEST_CASE("the guide only emits the nine messages") {
  std::set<int> seen;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    ag::GatedAgent<float> agent;
    agent.initialize(seed, 2.0);
    auto in = random_inputs(16, seed);
    Tape<float> tape;
    auto mem = agent.guide().begin(tape, in.tokens);
    for (int t = 0; t < 4; ++t) {
      auto out = agent.guide().guide_message(tape, observations<float>(in.states), mem);
      for (const auto& m : out.messages) {
        CHECK(m.word0 >= 0);
        CHECK(m.word0 < 3);
        CHECK(m.word1 >= 0);
        CHECK(m.word1 < 3);
        seen.insert(m.index());
      }
      advance(in.states, t);
    }
  }
  CHECK(seen.size() <= 9);
}

TEST_CASE("message encodings are 64-wide, deterministic and zero for zero tables") {
  ag::GatedAgent<float> agent;
  agent.initialize(7, 2.0);
  std::vector<ag::Message> all;
  for (int w0 = 0; w0 < 3; ++w0)
    for (int w1 = 0; w1 < 3; ++w1) all.push_back({w0, w1});
  Tape<float> tape;
  auto a = agent.encoder().encode_message(tape, all);
  auto b = agent.encoder().encode_message(tape, all);
  CHECK(a.rows() == 9);
  CHECK(a.cols() == 64);
  CHECK(bit_equal(a.value(), b.value()));
  agent.params().at("encoder.word0_embedding").value.setZero();
  agent.params().at("encoder.word1_embedding").value.setZero();
  Tape<float> tape2;
  CHECK(agent.encoder().encode_message(tape2, all).value().isZero());
}

TEST_CASE("a fresh gate is open on random representations") {
  ag::GatedAgent<float> agent;
  agent.initialize(8, 2.0);
  std::mt19937_64 rng(1);
  std::normal_distribution<float> n(0.0f, 1.0f);
  Matrix<float> r(1000, 128);
  for (Eigen::Index i = 0; i < r.size(); ++i) r.data()[i] = n(rng);
  Tape<float> tape;
  auto d = agent.gate().gate_decide(tape, tape.constant(r));
  CHECK(d.g.value().sum() >= 990.0f);
  // The zero-initialized output layer makes every score equal the bias.
  CHECK((d.score.value().array() == 2.0f).all());
  CHECK((d.prob.array() > 0.88f).all());
}

TEST_CASE("a zero score closes the gate") {
  ag::GatedAgent<float> agent;
  agent.initialize(9, 0.0);
  Tape<float> tape;
  auto d = agent.gate().gate_decide(tape, tape.constant(Matrix<float>::Random(5, 128)));
  CHECK((d.score.value().array() == 0.0f).all());
  CHECK(d.g.value().isZero());
}

TEST_CASE("the penalty gradient reaches the gate through the straight-through path") {
  ag::GatedAgent<double> agent;
  agent.initialize(10, 2.0);
  Tape<double> tape;
  auto d = agent.gate().gate_decide(tape, tape.constant(Matrix<double>::Random(4, 128)));
  agent.params().zero_grad();
  const double lambda = 0.3;
  tape.backward(dc::scale(dc::sum(d.g), lambda));
  const double s = 1.0 / (1.0 + std::exp(-2.0));
  const auto& bias = agent.params().at("gate.fc2.b");
  CHECK(bias.grad(0, 0) == doctest::Approx(4 * lambda * s * (1 - s)).epsilon(1e-12));
  CHECK(agent.params().at("gate.fc2.w").grad.cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("forcing the gate reproduces the two branches of the policy input") {
  ag::GatedAgent<float> agent;
  agent.initialize(11, 2.0);
  auto in = random_inputs(5, 11);
  const Matrix<float> obs = observations<float>(in.states);
  for (int forced : {0, 1}) {
    Tape<float> tape;
    auto mem = agent.begin(tape, in.tokens);
    auto out = agent.forward_forced(tape, mem, obs, forced);
    // Direct evaluation of P(r, 0) and P(r, Enc(m)).
    Matrix<float> second = forced ? out.encoding.value()
                                  : Matrix<float>::Zero(5, agent.dims().encoding);
    auto direct = agent.policy().logits(
        tape, dc::concat<float>({tape.constant(out.r.value()), tape.constant(second)}));
    CHECK(bit_equal(out.logits.value(), direct.value()));
    const Matrix<float> p = ag::probabilities(out.logits);
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      CHECK(std::abs(p.row(i).sum() - 1.0f) < 1e-6f);
      CHECK((p.row(i).array() >= 0.0f).all());
    }
  }
  Tape<float> tape;
  auto mem = agent.begin(tape, in.tokens);
  CHECK_THROWS_AS(agent.forward_forced(tape, mem, obs, 2), std::invalid_argument);
}

TEST_CASE("forcing the natural gate value matches the gated pass bitwise") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    ag::GatedAgent<float> agent(small_dims());
    agent.initialize(rng(), std::uniform_real_distribution<double>(-0.3, 0.3)(rng));
    // Random output weights so the natural gate varies across inputs.
    agent.params().at("gate.fc2.w").value.setRandom();
    auto in = random_inputs(1, rng());
    Tape<float> ta, tb;
    auto ma = agent.begin(ta, in.tokens);
    auto mb = agent.begin(tb, in.tokens);
    for (int t = 0; t < 3; ++t) {
      const Matrix<float> obs = observations<float>(in.states);
      auto gated = agent.forward_gated(ta, ma, obs);
      const int g = gated.g.value()(0, 0) > 0.5f ? 1 : 0;
      auto forced = agent.forward_forced(tb, mb, obs, g);
      CHECK(bit_equal(gated.logits.value(), forced.logits.value()));
      CHECK(bit_equal(ma.learner.h.value(), mb.learner.h.value()));
      CHECK(bit_equal(ma.guide.h.value(), mb.guide.h.value()));
      advance(in.states, t);
    }
  }
}

TEST_CASE("flipping the forced gate changes the distribution") {
  ag::GatedAgent<float> agent;
  agent.initialize(13, 2.0);
  auto in = random_inputs(8, 13);
  const Matrix<float> obs = observations<float>(in.states);
  Tape<float> tape;
  auto m0 = agent.begin(tape, in.tokens);
  auto m1 = agent.begin(tape, in.tokens);
  auto closed = agent.forward_forced(tape, m0, obs, 0);
  auto open = agent.forward_forced(tape, m1, obs, 1);
  REQUIRE_FALSE(open.encoding.value().isZero());
  for (Eigen::Index i = 0; i < 8; ++i) {
    CHECK_FALSE(bit_equal<float>(closed.logits.value().row(i), open.logits.value().row(i)));
  }
}

TEST_CASE("a closed gate cuts the encoder off from the loss") {
  ag::GatedAgent<double> agent;
  agent.initialize(14, 2.0);
  auto in = random_inputs(3, 14);
  Tape<double> tape;
  auto mem = agent.begin(tape, in.tokens);
  auto out = agent.forward_forced(tape, mem, observations<double>(in.states), 0);
  agent.params().zero_grad();
  tape.backward(dc::sum(dc::cross_entropy(out.logits, {0, 1, 2})));
  for (std::size_t i = 0; i < agent.params().size(); ++i) {
    const auto& p = agent.params()[i];
    if (p.name.rfind("encoder.", 0) == 0 || p.name.rfind("guide.", 0) == 0) {
      CHECK_MESSAGE(p.grad.isZero(), p.name);
    }
  }
  CHECK_FALSE(agent.params().at("policy.fc1.w").grad.isZero());
}

TEST_CASE("learner and guide memories stay isolated") {
  ag::GatedAgent<double> agent;
  agent.initialize(15, 2.0);
  auto in = random_inputs(2, 15);
  Tape<double> tape;
  auto mem = agent.begin(tape, in.tokens);
  ag::StepOutput<double> out;
  for (int t = 0; t < 3; ++t) {
    out = agent.forward_gated(tape, mem, observations<double>(in.states));
    advance(in.states, t);
  }
  auto grads_of = [&](const dc::Var<double>& probe) {
    agent.params().zero_grad();
    tape.backward(guidegate::testing::project(probe, 3));
  };
  auto nonzero = [&](const std::string& prefix) {
    bool any = false;
    for (std::size_t i = 0; i < agent.params().size(); ++i) {
      const auto& p = agent.params()[i];
      if (p.name.rfind(prefix, 0) == 0 && p.grad.size() && !p.grad.isZero()) any = true;
    }
    return any;
  };
  grads_of(mem.learner.h);
  CHECK(nonzero("learner."));
  CHECK_FALSE(nonzero("guide."));
  CHECK_FALSE(nonzero("encoder."));
  // A second backward on the same tape would double-count, so rebuild.
  Tape<double> tape2;
  auto in2 = random_inputs(2, 15);
  auto mem2 = agent.begin(tape2, in2.tokens);
  for (int t = 0; t < 3; ++t) {
    agent.forward_gated(tape2, mem2, observations<double>(in2.states));
    advance(in2.states, t);
  }
  agent.params().zero_grad();
  tape2.backward(guidegate::testing::project(mem2.guide.h, 4));
  CHECK(nonzero("guide."));
  CHECK_FALSE(nonzero("learner."));
  CHECK_FALSE(nonzero("gate."));
  CHECK_FALSE(nonzero("policy."));
}

TEST_CASE("learner-alone steps never touch the guide") {
  ag::GatedAgent<float> agent;
  agent.initialize(16, 2.0);
  auto in = random_inputs(2, 16);
  Tape<float> tape;
  auto mem = agent.begin(tape, in.tokens, false);
  auto out = agent.step(tape, mem, observations<float>(in.states), ag::GateMode::kNoGuide);
  CHECK(out.messages.empty());
  CHECK(out.g.value().isZero());
  CHECK_THROWS_AS(agent.step(tape, mem, observations<float>(in.states), ag::GateMode::kNatural),
                  std::logic_error);
}

TEST_CASE("full agent passes match finite differences") {
  for (const auto& r : guidegate::testing::check_agent_passes(5, 77)) {
    INFO(r.name << " max relative error " << r.max_rel_error);
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("initialization is a deterministic function of the seed") {
  ag::GatedAgent<float> a, b, c;
  a.initialize(3, 2.0);
  b.initialize(3, 2.0);
  c.initialize(4, 2.0);
  bool differs = false;
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    CHECK(bit_equal(a.params()[i].value, b.params()[i].value));
    if (!bit_equal(a.params()[i].value, c.params()[i].value)) differs = true;
  }
  CHECK(differs);
}
