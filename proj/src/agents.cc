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

#include "guidegate/agents.h"

#include <cmath>
#include <stdexcept>

namespace guidegate::agents {

namespace dc = guidegate::diffcore;

template <typename T>
Matrix<T> encode_observations(const std::vector<const gridworld::Observation*>& obs) {
  Matrix<T> x = Matrix<T>::Zero(static_cast<Eigen::Index>(obs.size()), kObservationFeatures);
  constexpr int kColorOffset = gridworld::kNumKindIds;
  constexpr int kStateOffset = kColorOffset + gridworld::kNumColorIds;
  for (std::size_t b = 0; b < obs.size(); ++b) {
    T* row = x.row(static_cast<Eigen::Index>(b)).data();
    for (int cell = 0; cell < gridworld::kViewCells; ++cell) {
      const auto* ch = &obs[b]->grid[cell * gridworld::kViewChannels];
      T* out = row + cell * kCellFeatures;
      out[ch[0]] = T(1);
      out[kColorOffset + ch[1]] = T(1);
      out[kStateOffset + ch[2]] = T(1);
    }
  }
  return x;
}

template <typename T>
void init_uniform(Parameter<T>& p, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Eigen::Index i = 0; i < p.value.size(); ++i) {
    p.value.data()[i] = static_cast<T>(dist(rng));
  }
}

namespace {

template <typename T>
void init_normal(Parameter<T>& p, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  for (Eigen::Index i = 0; i < p.value.size(); ++i) {
    p.value.data()[i] = static_cast<T>(dist(rng));
  }
}

double fan_in_bound(Eigen::Index fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

template <typename T>
std::array<Parameter<T>*, 4> add_gru(ParameterStore<T>& s, const std::string& prefix, int input,
                                     int hidden) {
  return {&s.add(prefix + ".wi", input, 3 * hidden), &s.add(prefix + ".wh", hidden, 3 * hidden),
          &s.add(prefix + ".bi", 1, 3 * hidden), &s.add(prefix + ".bh", 1, 3 * hidden)};
}

template <typename T>
void init_gru(const std::array<Parameter<T>*, 4>& gru, std::mt19937_64& rng) {
  const double bound = fan_in_bound(gru[1]->value.rows());
  for (auto* p : gru) init_uniform(*p, bound, rng);
}

template <typename T>
std::array<Parameter<T>*, 4> add_film(ParameterStore<T>& s, const std::string& prefix, int cond,
                                      int channels) {
  return {&s.add(prefix + ".gamma_w", cond, channels), &s.add(prefix + ".gamma_b", 1, channels),
          &s.add(prefix + ".beta_w", cond, channels), &s.add(prefix + ".beta_b", 1, channels)};
}

template <typename T>
void init_film(const std::array<Parameter<T>*, 4>& film, std::mt19937_64& rng) {
  const double bound = fan_in_bound(film[0]->value.rows());
  init_uniform(*film[0], bound, rng);
  film[1]->value.setOnes();
  init_uniform(*film[2], bound, rng);
  film[3]->value.setZero();
}

template <typename T>
void init_affine(Parameter<T>& w, Parameter<T>& b, std::mt19937_64& rng) {
  const double bound = fan_in_bound(w.value.rows());
  init_uniform(w, bound, rng);
  init_uniform(b, bound, rng);
}

template <typename T>
Var<T> gru(Tape<T>& tape, const std::array<Parameter<T>*, 4>& p, const Var<T>& x,
           const Var<T>& h) {
  return dc::gru_cell(x, h, tape.param(*p[0]), tape.param(*p[1]), tape.param(*p[2]),
                      tape.param(*p[3]));
}

template <typename T>
Var<T> rows_of(const Var<T>& v, Eigen::Index n) {
  return dc::top_rows(v, n);
}

}  // namespace

// ---------------------------------------------------------------------------
// RepresentationUnit

template <typename T>
RepresentationUnit<T>::RepresentationUnit(ParameterStore<T>& s, const std::string& prefix,
                                          const Dims& dims)
    : dims_(dims) {
  const int vocab = static_cast<int>(gridworld::vocabulary().size());
  word_table_ = &s.add(prefix + ".word_embedding", vocab, dims.word_embedding);
  instr_gru_ = add_gru(s, prefix + ".instr_gru", dims.word_embedding, dims.instruction);
  conv1_w_ = &s.add(prefix + ".conv1.w", 9 * kCellFeatures, dims.conv1);
  conv1_b_ = &s.add(prefix + ".conv1.b", 1, dims.conv1);
  film1_ = add_film(s, prefix + ".film1", dims.instruction, dims.conv1);
  conv2_w_ = &s.add(prefix + ".conv2.w", 9 * dims.conv1, dims.conv2);
  conv2_b_ = &s.add(prefix + ".conv2.b", 1, dims.conv2);
  film2_ = add_film(s, prefix + ".film2", dims.instruction, dims.conv2);
  mem_gru_ = add_gru(s, prefix + ".memory_gru", gridworld::kViewCells * dims.conv2, dims.memory);
}

template <typename T>
void RepresentationUnit<T>::initialize(std::mt19937_64& rng) {
  init_normal(*word_table_, rng);
  init_gru(instr_gru_, rng);
  init_affine(*conv1_w_, *conv1_b_, rng);
  init_film(film1_, rng);
  init_affine(*conv2_w_, *conv2_b_, rng);
  init_film(film2_, rng);
  init_gru(mem_gru_, rng);
}

template <typename T>
UnitMemory<T> RepresentationUnit<T>::begin(Tape<T>& tape,
                                           const std::vector<std::vector<int>>& tokens) const {
  if (tokens.empty()) throw std::invalid_argument("begin: empty batch");
  const std::size_t length = tokens.front().size();
  for (const auto& t : tokens) {
    if (t.size() != length) throw std::invalid_argument("begin: instruction lengths differ");
  }
  const auto batch = static_cast<Eigen::Index>(tokens.size());
  Var<T> q = tape.constant(Matrix<T>::Zero(batch, dims_.instruction));
  Var<T> table = tape.param(*word_table_);
  std::vector<int> ids(tokens.size());
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t b = 0; b < tokens.size(); ++b) ids[b] = tokens[b][pos];
    q = gru(tape, instr_gru_, dc::embedding(table, ids), q);
  }
  auto head = [&](Parameter<T>* w, Parameter<T>* b) {
    return dc::affine(q, tape.param(*w), tape.param(*b));
  };
  UnitMemory<T> mem;
  mem.gamma1 = head(film1_[0], film1_[1]);
  mem.beta1 = head(film1_[2], film1_[3]);
  mem.gamma2 = head(film2_[0], film2_[1]);
  mem.beta2 = head(film2_[2], film2_[3]);
  mem.h = tape.constant(Matrix<T>::Zero(batch, dims_.memory));
  return mem;
}

template <typename T>
Var<T> RepresentationUnit<T>::represent(Tape<T>& tape, const Matrix<T>& obs,
                                        UnitMemory<T>& mem) const {
  const Eigen::Index n = obs.rows();
  if (obs.cols() != kObservationFeatures) {
    throw std::invalid_argument("represent: observation batch has " +
                                std::to_string(obs.cols()) + " features, expected " +
                                std::to_string(kObservationFeatures));
  }
  constexpr int kSide = gridworld::kViewSize;
  Var<T> x = tape.constant(obs);
  Var<T> c1 = dc::conv2d(x, tape.param(*conv1_w_), tape.param(*conv1_b_),
                         {kSide, kSide, kCellFeatures}, 3);
  Var<T> f1 = dc::relu(dc::film(c1, rows_of(mem.gamma1, n), rows_of(mem.beta1, n)));
  Var<T> c2 = dc::conv2d(f1, tape.param(*conv2_w_), tape.param(*conv2_b_),
                         {kSide, kSide, dims_.conv1}, 3);
  Var<T> f2 = dc::relu(dc::film(c2, rows_of(mem.gamma2, n), rows_of(mem.beta2, n)));
  mem.h = gru(tape, mem_gru_, f2, rows_of(mem.h, n));
  return mem.h;
}

// ---------------------------------------------------------------------------
// Guide

template <typename T>
Guide<T>::Guide(ParameterStore<T>& s, const std::string& prefix, const Dims& dims)
    : unit_(s, prefix, dims) {
  word0_w_ = &s.add(prefix + ".word0.w", dims.memory, kTokensPerWord);
  word0_b_ = &s.add(prefix + ".word0.b", 1, kTokensPerWord);
  word1_w_ = &s.add(prefix + ".word1.w", dims.memory, kTokensPerWord);
  word1_b_ = &s.add(prefix + ".word1.b", 1, kTokensPerWord);
}

template <typename T>
void Guide<T>::initialize(std::mt19937_64& rng) {
  unit_.initialize(rng);
  init_affine(*word0_w_, *word0_b_, rng);
  init_affine(*word1_w_, *word1_b_, rng);
}

template <typename T>
GuideOutput<T> Guide<T>::discretize(Tape<T>&, const Var<T>& logits0,
                                    const Var<T>& logits1) const {
  GuideOutput<T> out;
  out.logits0 = logits0;
  out.logits1 = logits1;
  out.word0 = dc::straight_through_argmax(logits0);
  out.word1 = dc::straight_through_argmax(logits1);
  // Token ids from the hard argmax (also under smooth surrogates).
  const auto& l0 = logits0.value();
  const auto& l1 = logits1.value();
  out.messages.resize(static_cast<std::size_t>(l0.rows()));
  for (Eigen::Index i = 0; i < l0.rows(); ++i) {
    Eigen::Index w0 = 0, w1 = 0;
    for (Eigen::Index j = 1; j < kTokensPerWord; ++j) {
      if (l0(i, j) > l0(i, w0)) w0 = j;
      if (l1(i, j) > l1(i, w1)) w1 = j;
    }
    out.messages[static_cast<std::size_t>(i)] = {static_cast<int>(w0), static_cast<int>(w1)};
  }
  return out;
}

template <typename T>
GuideOutput<T> Guide<T>::guide_message(Tape<T>& tape, const Matrix<T>& obs,
                                       UnitMemory<T>& mem) const {
  Var<T> h = unit_.represent(tape, obs, mem);
  Var<T> l0 = dc::affine(h, tape.param(*word0_w_), tape.param(*word0_b_));
  Var<T> l1 = dc::affine(h, tape.param(*word1_w_), tape.param(*word1_b_));
  return discretize(tape, l0, l1);
}

// ---------------------------------------------------------------------------
// MessageEncoder

template <typename T>
MessageEncoder<T>::MessageEncoder(ParameterStore<T>& s, const std::string& prefix,
                                  const Dims& dims) {
  table0_ = &s.add(prefix + ".word0_embedding", kTokensPerWord, dims.message_embedding);
  table1_ = &s.add(prefix + ".word1_embedding", kTokensPerWord, dims.message_embedding);
  mix_ = &s.add(prefix + ".mix", 2 * dims.message_embedding, dims.encoding);
}

template <typename T>
void MessageEncoder<T>::initialize(std::mt19937_64& rng) {
  init_normal(*table0_, rng);
  init_normal(*table1_, rng);
  init_uniform(*mix_, fan_in_bound(mix_->value.rows()), rng);
}

template <typename T>
Var<T> MessageEncoder<T>::encode(Tape<T>& tape, const Var<T>& word0,
                                 const Var<T>& word1) const {
  Var<T> e0 = dc::linear(word0, tape.param(*table0_));
  Var<T> e1 = dc::linear(word1, tape.param(*table1_));
  return dc::tanh(dc::linear(dc::concat<T>({e0, e1}), tape.param(*mix_)));
}

template <typename T>
Var<T> MessageEncoder<T>::encode_message(Tape<T>& tape,
                                         const std::vector<Message>& messages) const {
  const auto n = static_cast<Eigen::Index>(messages.size());
  Matrix<T> w0 = Matrix<T>::Zero(n, kTokensPerWord);
  Matrix<T> w1 = Matrix<T>::Zero(n, kTokensPerWord);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Message& m = messages[static_cast<std::size_t>(i)];
    if (m.word0 < 0 || m.word0 >= kTokensPerWord || m.word1 < 0 || m.word1 >= kTokensPerWord) {
      throw std::invalid_argument("encode_message: token id out of range");
    }
    w0(i, m.word0) = T(1);
    w1(i, m.word1) = T(1);
  }
  return encode(tape, tape.constant(std::move(w0)), tape.constant(std::move(w1)));
}

// ---------------------------------------------------------------------------
// Gate and policy

template <typename T>
Gate<T>::Gate(ParameterStore<T>& s, const std::string& prefix, const Dims& dims) {
  fc1_w_ = &s.add(prefix + ".fc1.w", dims.memory, dims.hidden);
  fc1_b_ = &s.add(prefix + ".fc1.b", 1, dims.hidden);
  fc2_w_ = &s.add(prefix + ".fc2.w", dims.hidden, 1);
  fc2_b_ = &s.add(prefix + ".fc2.b", 1, 1);
}

template <typename T>
void Gate<T>::initialize(std::mt19937_64& rng, double bias) {
  init_affine(*fc1_w_, *fc1_b_, rng);
  // The score starts at exactly `bias` for every input.
  fc2_w_->value.setZero();
  fc2_b_->value.setConstant(static_cast<T>(bias));
}

template <typename T>
GateDecision<T> Gate<T>::gate_decide(Tape<T>& tape, const Var<T>& r) const {
  Var<T> hidden = dc::tanh(dc::affine(r, tape.param(*fc1_w_), tape.param(*fc1_b_)));
  GateDecision<T> d;
  d.score = dc::affine(hidden, tape.param(*fc2_w_), tape.param(*fc2_b_));
  d.prob = (T(1) / (T(1) + (-d.score.value().array()).exp())).matrix();
  d.g = dc::straight_through_threshold(d.score);
  return d;
}

template <typename T>
Policy<T>::Policy(ParameterStore<T>& s, const std::string& prefix, int input, const Dims& dims) {
  fc1_w_ = &s.add(prefix + ".fc1.w", input, dims.hidden);
  fc1_b_ = &s.add(prefix + ".fc1.b", 1, dims.hidden);
  fc2_w_ = &s.add(prefix + ".fc2.w", dims.hidden, gridworld::kNumActions);
  fc2_b_ = &s.add(prefix + ".fc2.b", 1, gridworld::kNumActions);
}

template <typename T>
void Policy<T>::initialize(std::mt19937_64& rng) {
  init_affine(*fc1_w_, *fc1_b_, rng);
  init_affine(*fc2_w_, *fc2_b_, rng);
}

template <typename T>
Var<T> Policy<T>::logits(Tape<T>& tape, const Var<T>& input) const {
  Var<T> hidden = dc::tanh(dc::affine(input, tape.param(*fc1_w_), tape.param(*fc1_b_)));
  return dc::affine(hidden, tape.param(*fc2_w_), tape.param(*fc2_b_));
}

// ---------------------------------------------------------------------------
// GatedAgent

template <typename T>
GatedAgent<T>::GatedAgent(const Dims& dims)
    : dims_(dims),
      learner_(store_, "learner", dims),
      guide_(store_, "guide", dims),
      encoder_(store_, "encoder", dims),
      gate_(store_, "gate", dims),
      policy_(store_, "policy", dims.memory + dims.encoding, dims) {}

template <typename T>
void GatedAgent<T>::initialize(std::uint64_t seed, double gate_bias) {
  std::mt19937_64 rng(seed);
  learner_.initialize(rng);
  guide_.initialize(rng);
  encoder_.initialize(rng);
  gate_.initialize(rng, gate_bias);
  policy_.initialize(rng);
}

template <typename T>
EpisodeMemory<T> GatedAgent<T>::begin(Tape<T>& tape, const std::vector<std::vector<int>>& tokens,
                                      bool with_guide) const {
  EpisodeMemory<T> mem;
  mem.learner = learner_.begin(tape, tokens);
  mem.has_guide = with_guide;
  if (with_guide) mem.guide = guide_.begin(tape, tokens);
  return mem;
}

template <typename T>
Var<T> GatedAgent<T>::policy_logits(Tape<T>& tape, const Var<T>& r, const Var<T>& encoding,
                                    const Var<T>& g) const {
  return policy_.logits(tape, dc::concat<T>({r, dc::row_scale(encoding, g)}));
}

template <typename T>
StepOutput<T> GatedAgent<T>::step(Tape<T>& tape, EpisodeMemory<T>& mem, const Matrix<T>& obs,
                                  GateMode mode) const {
  StepOutput<T> out;
  const Eigen::Index n = obs.rows();
  out.r = learner_.represent(tape, obs, mem.learner);
  if (mode == GateMode::kNoGuide) {
    out.encoding = tape.constant(Matrix<T>::Zero(n, dims_.encoding));
    out.g = tape.constant(Matrix<T>::Zero(n, 1));
    out.logits = policy_logits(tape, out.r, out.encoding, out.g);
    return out;
  }
  if (!mem.has_guide) throw std::logic_error("step: episode memory has no guide state");
  GuideOutput<T> message = guide_.guide_message(tape, obs, mem.guide);
  out.messages = std::move(message.messages);
  out.encoding = encoder_.encode(tape, message.word0, message.word1);
  out.decision = gate_.gate_decide(tape, out.r);
  switch (mode) {
    case GateMode::kNatural:
      out.g = out.decision.g;
      break;
    case GateMode::kForcedOpen:
      out.g = tape.constant(Matrix<T>::Ones(n, 1));
      break;
    default:
      out.g = tape.constant(Matrix<T>::Zero(n, 1));
      break;
  }
  out.logits = policy_logits(tape, out.r, out.encoding, out.g);
  return out;
}

template <typename T>
StepOutput<T> GatedAgent<T>::forward_forced(Tape<T>& tape, EpisodeMemory<T>& mem,
                                            const Matrix<T>& obs, int g_forced) const {
  if (g_forced != 0 && g_forced != 1) throw std::invalid_argument("g_forced must be 0 or 1");
  return step(tape, mem, obs, g_forced == 1 ? GateMode::kForcedOpen : GateMode::kForcedClosed);
}

// ---------------------------------------------------------------------------
// GuidePretrainModel

template <typename T>
GuidePretrainModel<T>::GuidePretrainModel(const Dims& dims)
    : dims_(dims),
      guide_(store_, "guide", dims),
      encoder_(store_, "pretrain_encoder", dims),
      policy_(store_, "pretrain_policy", dims.encoding, dims) {}

template <typename T>
void GuidePretrainModel<T>::initialize(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  guide_.initialize(rng);
  encoder_.initialize(rng);
  policy_.initialize(rng);
}

template <typename T>
typename GuidePretrainModel<T>::StepOutput GuidePretrainModel<T>::step(
    Tape<T>& tape, UnitMemory<T>& mem, const Matrix<T>& obs) const {
  StepOutput out;
  out.message = guide_.guide_message(tape, obs, mem);
  out.logits = policy_.logits(tape, encoder_.encode(tape, out.message.word0, out.message.word1));
  return out;
}

template <typename T>
Matrix<T> probabilities(const Var<T>& logits) {
  const auto& l = logits.value();
  Matrix<T> p = (l.colwise() - l.rowwise().maxCoeff()).array().exp().matrix();
  p.array().colwise() /= p.rowwise().sum().array();
  return p;
}

#define GUIDEGATE_INSTANTIATE(T)                                                          \
  template Matrix<T> encode_observations<T>(const std::vector<const gridworld::Observation*>&); \
  template void init_uniform<T>(Parameter<T>&, double, std::mt19937_64&);                 \
  template class RepresentationUnit<T>;                                                   \
  template class Guide<T>;                                                                \
  template class MessageEncoder<T>;                                                       \
  template class Gate<T>;                                                                 \
  template class Policy<T>;                                                               \
  template class GatedAgent<T>;                                                           \
  template class GuidePretrainModel<T>;                                                   \
  template Matrix<T> probabilities<T>(const Var<T>&);

GUIDEGATE_INSTANTIATE(float)
GUIDEGATE_INSTANTIATE(double)

#undef GUIDEGATE_INSTANTIATE

}  // namespace guidegate::agents
