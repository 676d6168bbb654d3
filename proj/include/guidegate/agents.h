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

#ifndef GUIDEGATE_AGENTS_H_
#define GUIDEGATE_AGENTS_H_

// The learner that can ask for guidance:
//
//   r_t = L(o_t, i)              representation unit with FiLM + memory GRU
//   m_t = Guide(o_t, i)          two words, three tokens each
//   g_t = [sigmoid(Gate(r_t)) > 0.5]
//   a_t ~ P(r_t, g_t * Enc(m_t))
//
// All functions operate on a batch of episodes advanced in lockstep. Batches
// are ordered by descending episode length so that the episodes still running
// at step t are always the first `active` rows.

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "guidegate/diffcore.h"
#include "guidegate/gridworld.h"

namespace guidegate::agents {

using diffcore::Matrix;
using diffcore::Parameter;
using diffcore::ParameterStore;
using diffcore::Tape;
using diffcore::Var;

inline constexpr int kMessageWords = 2;
inline constexpr int kTokensPerWord = 3;
inline constexpr int kNumMessages = 9;
// One-hot cell features: kind (5) + color (7) + held flag (2).
inline constexpr int kCellFeatures =
    gridworld::kNumKindIds + gridworld::kNumColorIds + gridworld::kNumStateIds;
inline constexpr int kObservationFeatures = gridworld::kViewCells * kCellFeatures;

struct Dims {
  int word_embedding = 32;
  int instruction = 64;
  int conv1 = 16;
  int conv2 = 32;
  int memory = 128;
  int message_embedding = 16;
  int encoding = 64;
  int hidden = 64;
};

struct Message {
  int word0 = 0;
  int word1 = 0;
  int index() const { return word0 * kTokensPerWord + word1; }
  friend bool operator==(const Message&, const Message&) = default;
};

// B x kObservationFeatures one-hot rows.
template <typename T>
Matrix<T> encode_observations(const std::vector<const gridworld::Observation*>& obs);

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
template <typename T>
void init_uniform(Parameter<T>& p, double bound, std::mt19937_64& rng);

// Per-episode state of one representation unit on a tape: the FiLM
// coefficients derived from the instruction, and the memory.
template <typename T>
struct UnitMemory {
  Var<T> gamma1, beta1, gamma2, beta2;
  Var<T> h;
};

template <typename T>
class RepresentationUnit {
 public:
  RepresentationUnit(ParameterStore<T>& store, const std::string& prefix, const Dims& dims);
  void initialize(std::mt19937_64& rng);

  // Encodes the instruction (all rows must share a length) and returns a
  // zeroed memory for `tokens.size()` episodes.
  UnitMemory<T> begin(Tape<T>& tape, const std::vector<std::vector<int>>& tokens) const;

  // r_t for the first `obs.rows()` episodes; updates mem.h and returns it.
  Var<T> represent(Tape<T>& tape, const Matrix<T>& obs, UnitMemory<T>& mem) const;

 private:
  Dims dims_;
  Parameter<T>* word_table_;
  std::array<Parameter<T>*, 4> instr_gru_;  // wi, wh, bi, bh
  Parameter<T>* conv1_w_;
  Parameter<T>* conv1_b_;
  Parameter<T>* conv2_w_;
  Parameter<T>* conv2_b_;
  // film{1,2}: gamma weight, gamma bias, beta weight, beta bias
  std::array<Parameter<T>*, 4> film1_;
  std::array<Parameter<T>*, 4> film2_;
  std::array<Parameter<T>*, 4> mem_gru_;
};

template <typename T>
struct GuideOutput {
  Var<T> logits0, logits1;
  // Straight-through one-hot words.
  Var<T> word0, word1;
  std::vector<Message> messages;
};

template <typename T>
class Guide {
 public:
  Guide(ParameterStore<T>& store, const std::string& prefix, const Dims& dims);
  void initialize(std::mt19937_64& rng);
  UnitMemory<T> begin(Tape<T>& tape, const std::vector<std::vector<int>>& tokens) const {
    return unit_.begin(tape, tokens);
  }
  GuideOutput<T> guide_message(Tape<T>& tape, const Matrix<T>& obs, UnitMemory<T>& mem) const;
  // Message from given word logits, as guide_message would emit it.
  GuideOutput<T> discretize(Tape<T>& tape, const Var<T>& logits0, const Var<T>& logits1) const;

 private:
  RepresentationUnit<T> unit_;
  Parameter<T>* word0_w_;
  Parameter<T>* word0_b_;
  Parameter<T>* word1_w_;
  Parameter<T>* word1_b_;
};

// Enc(m): per-word embedding lookup, concatenated, mixed by a bias-free
// affine map and squashed with tanh.
template <typename T>
class MessageEncoder {
 public:
  MessageEncoder(ParameterStore<T>& store, const std::string& prefix, const Dims& dims);
  void initialize(std::mt19937_64& rng);
  Var<T> encode(Tape<T>& tape, const Var<T>& word0, const Var<T>& word1) const;
  Var<T> encode_message(Tape<T>& tape, const std::vector<Message>& messages) const;

 private:
  Parameter<T>* table0_;
  Parameter<T>* table1_;
  Parameter<T>* mix_;
};

template <typename T>
struct GateDecision {
  Var<T> score;
  Matrix<T> prob;
  // Straight-through binary gate, B x 1.
  Var<T> g;
};

template <typename T>
class Gate {
 public:
  Gate(ParameterStore<T>& store, const std::string& prefix, const Dims& dims);
  void initialize(std::mt19937_64& rng, double bias);
  GateDecision<T> gate_decide(Tape<T>& tape, const Var<T>& r) const;

 private:
  Parameter<T>* fc1_w_;
  Parameter<T>* fc1_b_;
  Parameter<T>* fc2_w_;
  Parameter<T>* fc2_b_;
};

// Two-layer tanh MLP producing 7 action logits.
template <typename T>
class Policy {
 public:
  Policy(ParameterStore<T>& store, const std::string& prefix, int input, const Dims& dims);
  void initialize(std::mt19937_64& rng);
  Var<T> logits(Tape<T>& tape, const Var<T>& input) const;

 private:
  Parameter<T>* fc1_w_;
  Parameter<T>* fc1_b_;
  Parameter<T>* fc2_w_;
  Parameter<T>* fc2_b_;
};

enum class GateMode {
  kNatural,       // g from the gate module
  kForcedOpen,    // g = 1 (always-guided baseline, interventions)
  kForcedClosed,  // g = 0
  kNoGuide,       // learner alone: the guide is not evaluated at all
};

template <typename T>
struct EpisodeMemory {
  UnitMemory<T> learner;
  UnitMemory<T> guide;
  bool has_guide = true;
};

template <typename T>
struct StepOutput {
  Var<T> r;
  Var<T> encoding;  // Enc(m_t); invalid under kNoGuide
  GateDecision<T> decision;  // natural gate; invalid under kNoGuide
  Var<T> g;          // gate value fed to the policy
  Var<T> logits;
  std::vector<Message> messages;
};

// The combined model. Parameter names are prefixed learner., guide.,
// encoder., gate. and policy.
template <typename T>
class GatedAgent {
 public:
  explicit GatedAgent(const Dims& dims = {});
  GatedAgent(const GatedAgent&) = delete;
  GatedAgent& operator=(const GatedAgent&) = delete;

  // Fresh weights for every component. The gate's output layer starts with
  // zero weights and bias `gate_bias`, so every initial score equals it.
  void initialize(std::uint64_t seed, double gate_bias);

  ParameterStore<T>& params() { return store_; }
  const ParameterStore<T>& params() const { return store_; }
  const Dims& dims() const { return dims_; }
  const RepresentationUnit<T>& learner() const { return learner_; }
  const Guide<T>& guide() const { return guide_; }
  const MessageEncoder<T>& encoder() const { return encoder_; }
  const Gate<T>& gate() const { return gate_; }
  const Policy<T>& policy() const { return policy_; }

  EpisodeMemory<T> begin(Tape<T>& tape, const std::vector<std::vector<int>>& tokens,
                         bool with_guide = true) const;

  // Advances the first obs.rows() episodes by one step.
  StepOutput<T> step(Tape<T>& tape, EpisodeMemory<T>& mem, const Matrix<T>& obs,
                     GateMode mode) const;
  // Natural gate.
  StepOutput<T> forward_gated(Tape<T>& tape, EpisodeMemory<T>& mem,
                              const Matrix<T>& obs) const {
    return step(tape, mem, obs, GateMode::kNatural);
  }
  // Gate overridden by `g_forced` (0 or 1); memories advance identically.
  StepOutput<T> forward_forced(Tape<T>& tape, EpisodeMemory<T>& mem, const Matrix<T>& obs,
                               int g_forced) const;

  // P(r, g * enc) for a B x 1 gate column.
  Var<T> policy_logits(Tape<T>& tape, const Var<T>& r, const Var<T>& encoding,
                       const Var<T>& g) const;

 private:
  Dims dims_;
  ParameterStore<T> store_;
  RepresentationUnit<T> learner_;
  Guide<T> guide_;
  MessageEncoder<T> encoder_;
  Gate<T> gate_;
  Policy<T> policy_;
};

// The guide with the encoder and policy it is pretrained with. Only the
// guide.* parameters are kept afterwards.
template <typename T>
class GuidePretrainModel {
 public:
  explicit GuidePretrainModel(const Dims& dims = {});
  void initialize(std::uint64_t seed);
  ParameterStore<T>& params() { return store_; }
  const Guide<T>& guide() const { return guide_; }

  struct StepOutput {
    GuideOutput<T> message;
    Var<T> logits;
  };
  UnitMemory<T> begin(Tape<T>& tape, const std::vector<std::vector<int>>& tokens) const {
    return guide_.begin(tape, tokens);
  }
  StepOutput step(Tape<T>& tape, UnitMemory<T>& mem, const Matrix<T>& obs) const;

 private:
  Dims dims_;
  ParameterStore<T> store_;
  Guide<T> guide_;
  MessageEncoder<T> encoder_;
  Policy<T> policy_;
};

// Row-wise softmax of logits, for reading distributions off a step.
template <typename T>
Matrix<T> probabilities(const Var<T>& logits);

}  // namespace guidegate::agents

#endif  // GUIDEGATE_AGENTS_H_
