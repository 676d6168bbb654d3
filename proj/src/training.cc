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

#include "guidegate/training.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>

#include "guidegate/errors.h"
#include "guidegate/parallel.h"

namespace guidegate::training {
namespace {

namespace dc = diffcore;
namespace gw = gridworld;
using agents::EpisodeMemory;
using agents::UnitMemory;
using diffcore::Matrix;
using diffcore::Tape;
using diffcore::Var;

inline constexpr std::uint64_t kShuffleStream = 3;
inline constexpr std::uint64_t kPretrainShuffleStream = 4;
inline constexpr std::uint64_t kPretrainInitStream = 5;
inline constexpr std::uint64_t kAgentInitStream = 6;

const char* const kConfigKeys[] = {
    "level", "lambda", "epochs", "batch_episodes", "lr", "seed", "demo_count",
    "validation_episodes", "gate_bias_init", "pretrain_epochs", "runs", "heatmap_rollouts",
    "name",
};

double get_real(const nlohmann::json& j, const char* key, double fallback) {
  auto it = j.find(key);
  if (it == j.end()) return fallback;
  if (!it->is_number()) throw ConfigError(std::string("config: \"") + key + "\" must be a number");
  return it->get<double>();
}

long long get_integer(const nlohmann::json& j, const char* key, long long fallback) {
  auto it = j.find(key);
  if (it == j.end()) return fallback;
  if (!it->is_number_integer()) {
    throw ConfigError(std::string("config: \"") + key + "\" must be an integer");
  }
  return it->get<long long>();
}

int get_count(const nlohmann::json& j, const char* key, int fallback) {
  long long v = get_integer(j, key, fallback);
  if (v < 0 || v > 100000000) {
    throw ConfigError(std::string("config: \"") + key + "\" out of range");
  }
  return static_cast<int>(v);
}

template <typename T>
UnitMemory<T> carry(Tape<T>& dst, const UnitMemory<T>& m) {
  return {dst.constant(m.gamma1.value()), dst.constant(m.beta1.value()),
          dst.constant(m.gamma2.value()), dst.constant(m.beta2.value()),
          dst.constant(m.h.value())};
}

template <typename T>
EpisodeMemory<T> carry(Tape<T>& dst, const EpisodeMemory<T>& m) {
  EpisodeMemory<T> out;
  out.learner = carry(dst, m.learner);
  out.has_guide = m.has_guide;
  if (m.has_guide) out.guide = carry(dst, m.guide);
  return out;
}

analysis::Distribution row_distribution(const Matrix<float>& p, Eigen::Index row) {
  analysis::Distribution d{};
  for (int a = 0; a < gw::kNumActions; ++a) d[a] = static_cast<double>(p(row, a));
  return d;
}

int row_argmax(const Matrix<float>& m, Eigen::Index row) {
  int best = 0;
  for (int a = 1; a < m.cols(); ++a) {
    if (m(row, a) > m(row, best)) best = a;
  }
  return best;
}

Matrix<float> observation_matrix(const std::vector<gw::Observation>& obs) {
  std::vector<const gw::Observation*> ptrs;
  ptrs.reserve(obs.size());
  for (const auto& o : obs) ptrs.push_back(&o);
  return agents::encode_observations<float>(ptrs);
}

// Episodes of `data` selected by `idx`, longest first (stable).
std::vector<int> sorted_batch(const std::vector<Episode>& data, std::vector<int> idx) {
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return data[a].length() > data[b].length();
  });
  return idx;
}

int active_rows(const std::vector<Episode>& data, const std::vector<int>& batch, int t) {
  int n = 0;
  while (n < static_cast<int>(batch.size()) && data[batch[n]].length() > t) ++n;
  return n;
}

Matrix<float> step_inputs(const std::vector<Episode>& data, const std::vector<int>& batch,
                          int active, int t, std::vector<int>& labels) {
  std::vector<const gw::Observation*> ptrs(active);
  labels.resize(active);
  for (int i = 0; i < active; ++i) {
    ptrs[i] = &data[batch[i]].observations[t];
    labels[i] = data[batch[i]].labels[t];
  }
  return agents::encode_observations<float>(ptrs);
}

std::vector<std::vector<int>> batch_tokens(const std::vector<Episode>& data,
                                           const std::vector<int>& batch) {
  std::vector<std::vector<int>> tokens;
  tokens.reserve(batch.size());
  for (int i : batch) tokens.push_back(data[i].tokens);
  return tokens;
}

std::vector<int> shuffled_order(std::size_t n, std::uint64_t seed, std::uint64_t stream,
                                std::uint64_t index) {
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(gw::derive_seed(seed, stream, index));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

void require_finite(double loss, const std::string& where) {
  if (!std::isfinite(loss)) throw NonFiniteError("non-finite loss " + where);
}

}  // namespace

TrainConfig default_config(gw::Level level) {
  TrainConfig c;
  c.level = level;
  if (level == gw::Level::kPutNextLocal) {
    c.lambda = 0.05;
    c.demo_count = 50000;
    c.name = "putnextlocal";
  }
  return c;
}

TrainConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
  for (const auto& item : j.items()) {
    if (std::find(std::begin(kConfigKeys), std::end(kConfigKeys), item.key()) ==
        std::end(kConfigKeys)) {
      throw ConfigError("config: unknown key \"" + item.key() + "\"");
    }
  }
  gw::Level level = gw::Level::kGoToObj;
  if (auto it = j.find("level"); it != j.end()) {
    if (!it->is_string()) throw ConfigError("config: \"level\" must be a string");
    auto parsed = gw::parse_level(it->get<std::string>());
    if (!parsed) throw ConfigError("config: unknown level \"" + it->get<std::string>() + "\"");
    level = *parsed;
  }
  TrainConfig c = default_config(level);
  c.lambda = get_real(j, "lambda", c.lambda);
  c.epochs = get_count(j, "epochs", c.epochs);
  c.batch_episodes = get_count(j, "batch_episodes", c.batch_episodes);
  c.lr = get_real(j, "lr", c.lr);
  if (auto it = j.find("seed"); it != j.end()) {
    if (!it->is_number_unsigned()) throw ConfigError("config: \"seed\" must be a non-negative integer");
    c.seed = it->get<std::uint64_t>();
  }
  c.demo_count = get_count(j, "demo_count", c.demo_count);
  c.validation_episodes = get_count(j, "validation_episodes", c.validation_episodes);
  c.gate_bias_init = get_real(j, "gate_bias_init", c.gate_bias_init);
  c.pretrain_epochs = get_count(j, "pretrain_epochs", c.pretrain_epochs);
  c.runs = get_count(j, "runs", c.runs);
  c.heatmap_rollouts = get_count(j, "heatmap_rollouts", c.heatmap_rollouts);
  if (auto it = j.find("name"); it != j.end()) {
    if (!it->is_string()) throw ConfigError("config: \"name\" must be a string");
    c.name = it->get<std::string>();
  }
  validate_config(c);
  return c;
}

void validate_config(const TrainConfig& c) {
  if (!std::isfinite(c.lambda) || c.lambda < 0.0) {
    throw ConfigError("config: lambda must be a finite number >= 0");
  }
  if (c.epochs < 1) throw ConfigError("config: epochs must be >= 1");
  if (c.batch_episodes < 1) throw ConfigError("config: batch_episodes must be >= 1");
  if (!std::isfinite(c.lr) || c.lr <= 0.0) throw ConfigError("config: lr must be > 0");
  if (c.demo_count < 1) throw ConfigError("config: demo_count must be >= 1");
  if (c.validation_episodes < 1) throw ConfigError("config: validation_episodes must be >= 1");
  if (!std::isfinite(c.gate_bias_init)) throw ConfigError("config: gate_bias_init must be finite");
  if (c.runs < 1) throw ConfigError("config: runs must be >= 1");
  if (c.name.empty() || c.name.size() > 128 ||
      !std::all_of(c.name.begin(), c.name.end(), [](char ch) {
        return std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-' || ch == '.';
      }) ||
      c.name.front() == '.') {
    throw ConfigError("config: name must be 1-128 characters from [A-Za-z0-9_.-], not starting with '.'");
  }
}

nlohmann::ordered_json config_to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["level"] = gw::level_name(c.level);
  j["lambda"] = c.lambda;
  j["epochs"] = c.epochs;
  j["batch_episodes"] = c.batch_episodes;
  j["lr"] = c.lr;
  j["seed"] = c.seed;
  j["demo_count"] = c.demo_count;
  j["validation_episodes"] = c.validation_episodes;
  j["gate_bias_init"] = c.gate_bias_init;
  j["pretrain_epochs"] = c.pretrain_epochs;
  j["runs"] = c.runs;
  j["heatmap_rollouts"] = c.heatmap_rollouts;
  j["name"] = c.name;
  return j;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config file not found: " + path.string());
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config file is not valid JSON: " + path.string());
  return config_from_json(j);
}

std::uint64_t guide_init_seed(const TrainConfig& config) {
  return gw::derive_seed(config.seed, kPretrainInitStream, 0);
}

std::uint64_t agent_init_seed(std::uint64_t run_seed) {
  return gw::derive_seed(run_seed, kAgentInitStream, 0);
}

std::vector<std::uint64_t> run_seeds(const TrainConfig& config) {
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < config.runs; ++i) seeds.push_back(config.seed + static_cast<std::uint64_t>(i));
  return seeds;
}

double gated_loss(double l_ce, int g, double lambda) {
  if (lambda < 0.0) throw ConfigError("lambda must be >= 0");
  return l_ce + lambda * static_cast<double>(g);
}

std::string metrics_csv_header() {
  return "run_seed,epoch,success_rate,accuracy,guidance_rate,acc_gate_open,acc_gate_closed,"
         "acc_forced_open,acc_forced_closed,loss_open_factual,loss_open_counterfactual,"
         "loss_closed_factual,loss_closed_counterfactual,entropy_open_factual,"
         "entropy_open_counterfactual,entropy_closed_factual,entropy_closed_counterfactual,"
         "mean_total_loss,mean_ce";
}

std::string metrics_csv_row(std::uint64_t run_seed, const EpochMetrics& m) {
  using analysis::format_number;
  using analysis::format_optional;
  std::ostringstream out;
  out << run_seed << ',' << m.epoch << ',' << format_optional(m.success_rate) << ','
      << format_number(m.accuracy) << ',' << format_number(m.guidance_rate) << ','
      << format_optional(m.acc_gate_open) << ',' << format_optional(m.acc_gate_closed) << ','
      << format_optional(m.acc_forced_open) << ',' << format_optional(m.acc_forced_closed);
  for (const auto* q : {&m.loss, &m.entropy}) {
    out << ',' << format_optional(q->open_factual) << ',' << format_optional(q->open_counterfactual)
        << ',' << format_optional(q->closed_factual) << ','
        << format_optional(q->closed_counterfactual);
  }
  out << ',' << format_number(m.mean_total_loss) << ',' << format_number(m.mean_ce);
  return out.str();
}

std::vector<Episode> build_dataset(const std::vector<expert::Demonstration>& demos, int jobs) {
  std::vector<Episode> data(demos.size());
  parallel_for(static_cast<int>(demos.size()), jobs, [&](int i) {
    const auto& demo = demos[i];
    gw::EnvState state = gw::reset(gw::generate_mission(demo.level, demo.spec_seed));
    Episode& ep = data[i];
    ep.observations.reserve(demo.actions.size());
    ep.labels = demo.actions;
    for (int a : demo.actions) {
      gw::Observation obs = gw::observe(state);
      if (ep.tokens.empty()) ep.tokens = obs.instruction;
      obs.instruction.clear();
      ep.observations.push_back(std::move(obs));
      gw::step_in_place(state, a);
    }
    if (!state.success) {
      throw CorruptData("demonstration with seed " + std::to_string(demo.spec_seed) +
                            " does not replay to success",
                        i + 1);
    }
  });
  return data;
}

std::string_view run_mode_name(RunMode mode) {
  switch (mode) {
    case RunMode::kGated:
      return "gated";
    case RunMode::kAlone:
      return "alone";
    case RunMode::kGuided:
      return "guided";
  }
  return "";
}

GateMode gate_mode(RunMode mode) {
  switch (mode) {
    case RunMode::kAlone:
      return GateMode::kNoGuide;
    case RunMode::kGuided:
      return GateMode::kForcedOpen;
    default:
      return GateMode::kNatural;
  }
}

double effective_lambda(RunMode mode, const TrainConfig& config) {
  return mode == RunMode::kGated ? config.lambda : 0.0;
}

EpochMetrics train_gated_epoch(GatedAgent<float>& agent, dc::Adam<float>& adam,
                               const std::vector<Episode>& data, const TrainConfig& config,
                               RunMode mode, int epoch, std::uint64_t run_seed,
                               std::vector<BatchLog>* log) {
  const GateMode gmode = gate_mode(mode);
  const double lambda = effective_lambda(mode, config);
  const auto order = shuffled_order(data.size(), run_seed, kShuffleStream,
                                    static_cast<std::uint64_t>(epoch));
  const int batch_size = config.batch_episodes;
  const int n_batches = static_cast<int>((data.size() + batch_size - 1) / batch_size);

  double epoch_ce = 0.0, epoch_total = 0.0;
  long epoch_frames = 0, epoch_open = 0, epoch_correct = 0;
  for (int b = 0; b < n_batches; ++b) {
    auto first = order.begin() + static_cast<long>(b) * batch_size;
    auto last = order.begin() + std::min<long>(static_cast<long>(b + 1) * batch_size,
                                               static_cast<long>(order.size()));
    const auto batch = sorted_batch(data, std::vector<int>(first, last));
    const int max_len = data[batch.front()].length();

    Tape<float> tape;
    auto mem = agent.begin(tape, batch_tokens(data, batch), gmode != GateMode::kNoGuide);
    std::vector<Var<float>> terms;
    double ce_sum = 0.0, total_sum = 0.0;
    long frames = 0, open = 0, correct = 0;
    std::vector<int> labels;
    for (int t = 0; t < max_len; ++t) {
      const int active = active_rows(data, batch, t);
      Matrix<float> x = step_inputs(data, batch, active, t, labels);
      auto out = agent.step(tape, mem, x, gmode);
      Var<float> ce = dc::cross_entropy(out.logits, labels);
      terms.push_back(dc::sum(ce));
      if (mode == RunMode::kGated) {
        terms.push_back(dc::scale(dc::sum(out.g), static_cast<float>(lambda)));
      }
      const auto& ce_v = ce.value();
      const auto& g_v = out.g.value();
      const auto& logits = out.logits.value();
      for (int i = 0; i < active; ++i) {
        const double ce_i = static_cast<double>(ce_v(i, 0));
        const int g_i = g_v(i, 0) > 0.5f ? 1 : 0;
        ce_sum += ce_i;
        total_sum += gated_loss(ce_i, g_i, lambda);
        open += g_i;
        correct += row_argmax(logits, i) == labels[i] ? 1 : 0;
      }
      frames += active;
    }
    Var<float> loss = dc::scale(dc::add_n(terms), 1.0f / static_cast<float>(frames));
    std::ostringstream where;
    where << "in epoch " << epoch << " batch " << b << " (" << frames
          << " frames, mean ce " << ce_sum / frames << ", guidance " << double(open) / frames << ")";
    require_finite(loss.scalar(), where.str());
    require_finite(total_sum, where.str());
    agent.params().zero_grad();
    tape.backward(loss);
    adam.step(agent.params());

    if (log) {
      BatchLog entry;
      entry.epoch = epoch;
      entry.batch = b;
      entry.frames = frames;
      entry.loss = total_sum / static_cast<double>(frames);
      entry.ce = ce_sum / static_cast<double>(frames);
      entry.guidance_rate = static_cast<double>(open) / static_cast<double>(frames);
      entry.tape_loss = static_cast<double>(loss.scalar());
      log->push_back(entry);
    }
    epoch_ce += ce_sum;
    epoch_total += total_sum;
    epoch_frames += frames;
    epoch_open += open;
    epoch_correct += correct;
  }

  EpochMetrics m;
  m.epoch = epoch;
  if (epoch_frames > 0) {
    const double n = static_cast<double>(epoch_frames);
    m.accuracy = static_cast<double>(epoch_correct) / n;
    m.guidance_rate = static_cast<double>(epoch_open) / n;
    m.mean_ce = epoch_ce / n;
    m.mean_total_loss = epoch_total / n;
  }
  return m;
}

RolloutResult rollout(const GatedAgent<float>& agent, const std::vector<gw::EnvState>& starts,
                      GateMode mode, int batch_size, int jobs) {
  if (batch_size < 1) throw std::invalid_argument("rollout: batch_size must be >= 1");
  const int n = static_cast<int>(starts.size());
  const int n_chunks = (n + batch_size - 1) / batch_size;
  std::vector<RolloutResult> parts(n_chunks);
  const bool with_guide = mode != GateMode::kNoGuide;

  parallel_for(n_chunks, jobs, [&](int chunk) {
    const int begin = chunk * batch_size;
    const int rows = std::min(batch_size, n - begin);
    std::vector<gw::EnvState> states(starts.begin() + begin, starts.begin() + begin + rows);
    std::vector<bool> alive(rows), success(rows, false);
    std::vector<std::vector<FrameRecord>> frames(rows);
    std::vector<std::vector<int>> tokens(rows);
    for (int i = 0; i < rows; ++i) {
      alive[i] = !states[i].done;
      success[i] = states[i].success;
      tokens[i] = gw::observe(states[i]).instruction;
    }
    auto tape = std::make_unique<Tape<float>>();
    auto mem = agent.begin(*tape, tokens, with_guide);
    const Matrix<float> ones = Matrix<float>::Ones(rows, 1);
    const Matrix<float> zeros = Matrix<float>::Zero(rows, 1);
    std::vector<gw::Observation> obs(rows);

    while (std::find(alive.begin(), alive.end(), true) != alive.end()) {
      for (int i = 0; i < rows; ++i) obs[i] = gw::observe(states[i]);
      auto out = agent.step(*tape, mem, observation_matrix(obs), mode);
      const Matrix<float> p_nat = agents::probabilities(out.logits);
      Matrix<float> p_open = p_nat, p_closed = p_nat;
      if (with_guide) {
        p_open = agents::probabilities(
            agent.policy_logits(*tape, out.r, out.encoding, tape->constant(ones)));
        p_closed = agents::probabilities(
            agent.policy_logits(*tape, out.r, out.encoding, tape->constant(zeros)));
      }
      const auto& g = out.g.value();
      for (int i = 0; i < rows; ++i) {
        if (!alive[i]) continue;
        gw::EnvState& s = states[i];
        FrameRecord f;
        try {
          f.expert = expert::expert_action(s);
        } catch (const PlannerFailure&) {
          alive[i] = false;
          continue;
        }
        f.ep = begin + i;
        f.t = static_cast<int>(frames[i].size()) + 1;
        f.agent_pos = s.agent_pos;
        f.action = row_argmax(p_nat, i);
        f.g = g(i, 0) > 0.5f ? 1 : 0;
        if (with_guide) {
          f.msg = {out.messages[i].word0, out.messages[i].word1};
        } else {
          f.msg = {-1, -1};
        }
        f.p_nat = row_distribution(p_nat, i);
        f.p_open = row_distribution(p_open, i);
        f.p_closed = row_distribution(p_closed, i);
        const auto type = analysis::observation_type(s);
        f.obs_type = {type.d1, type.d2};
        frames[i].push_back(f);
        gw::step_in_place(s, f.action);
        if (s.done) {
          alive[i] = false;
          success[i] = s.success;
        }
      }
      auto next = std::make_unique<Tape<float>>();
      mem = carry(*next, mem);
      tape = std::move(next);
    }

    RolloutResult& part = parts[chunk];
    for (int i = 0; i < rows; ++i) {
      const int len = static_cast<int>(frames[i].size());
      for (auto& f : frames[i]) {
        f.len = len;
        part.frames.push_back(f);
      }
      part.success.push_back(success[i]);
      part.length.push_back(len);
    }
  });

  RolloutResult result;
  for (auto& part : parts) {
    result.success.insert(result.success.end(), part.success.begin(), part.success.end());
    result.length.insert(result.length.end(), part.length.begin(), part.length.end());
    result.frames.insert(result.frames.end(), part.frames.begin(), part.frames.end());
  }
  return result;
}

std::vector<gw::EnvState> validation_starts(const TrainConfig& config) {
  std::vector<gw::EnvState> starts;
  starts.reserve(config.validation_episodes);
  for (int i = 0; i < config.validation_episodes; ++i) {
    starts.push_back(gw::reset(gw::generate_mission(
        config.level, gw::derive_seed(config.seed, expert::kValidationStream, i))));
  }
  return starts;
}

EpochMetrics summarize(const RolloutResult& result, double lambda, int epoch) {
  EpochMetrics m;
  m.epoch = epoch;
  if (!result.success.empty()) {
    long wins = std::count(result.success.begin(), result.success.end(), true);
    m.success_rate = static_cast<double>(wins) / static_cast<double>(result.success.size());
  }
  long n = 0, open = 0, correct = 0, correct_open = 0, correct_closed = 0;
  long forced_open = 0, forced_closed = 0;
  double ce = 0.0, total = 0.0;
  double loss[4] = {0, 0, 0, 0}, ent[4] = {0, 0, 0, 0};
  for (const auto& f : result.frames) {
    ++n;
    const bool ok = f.action == f.expert;
    correct += ok;
    if (f.g == 1) {
      ++open;
      correct_open += ok;
      loss[0] += analysis::cross_entropy_of(f.p_open, f.expert);
      loss[1] += analysis::cross_entropy_of(f.p_closed, f.expert);
      ent[0] += analysis::entropy_of(f.p_open);
      ent[1] += analysis::entropy_of(f.p_closed);
    } else {
      correct_closed += ok;
      loss[2] += analysis::cross_entropy_of(f.p_closed, f.expert);
      loss[3] += analysis::cross_entropy_of(f.p_open, f.expert);
      ent[2] += analysis::entropy_of(f.p_closed);
      ent[3] += analysis::entropy_of(f.p_open);
    }
    forced_open += analysis::argmax_of(f.p_open) == f.expert;
    forced_closed += analysis::argmax_of(f.p_closed) == f.expert;
    const double ce_f = analysis::cross_entropy_of(f.p_nat, f.expert);
    ce += ce_f;
    total += gated_loss(ce_f, f.g, lambda);
  }
  if (n == 0) return m;
  const long closed = n - open;
  auto ratio = [](double num, long den) -> std::optional<double> {
    if (den == 0) return std::nullopt;
    return num / static_cast<double>(den);
  };
  m.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  m.guidance_rate = static_cast<double>(open) / static_cast<double>(n);
  m.acc_gate_open = ratio(static_cast<double>(correct_open), open);
  m.acc_gate_closed = ratio(static_cast<double>(correct_closed), closed);
  m.acc_forced_open = ratio(static_cast<double>(forced_open), n);
  m.acc_forced_closed = ratio(static_cast<double>(forced_closed), n);
  m.loss = {ratio(loss[0], open), ratio(loss[1], open), ratio(loss[2], closed), ratio(loss[3], closed)};
  m.entropy = {ratio(ent[0], open), ratio(ent[1], open), ratio(ent[2], closed), ratio(ent[3], closed)};
  m.mean_ce = ce / static_cast<double>(n);
  m.mean_total_loss = total / static_cast<double>(n);
  return m;
}

ValidationResult validate(const GatedAgent<float>& agent, const TrainConfig& config, GateMode mode,
                          double lambda, int epoch, int jobs) {
  auto result = rollout(agent, validation_starts(config), mode, config.batch_episodes, jobs);
  ValidationResult out;
  out.metrics = summarize(result, lambda, epoch);
  out.frames = std::move(result.frames);
  return out;
}

gw::MissionSpec heatmap_mission(const TrainConfig& config) {
  return gw::generate_mission(config.level, gw::derive_seed(config.seed, expert::kHeatmapStream, 0));
}

analysis::HeatmapGrid build_heatmap(const GatedAgent<float>& agent, const gw::MissionSpec& spec,
                                    int n_rollouts, std::uint64_t seed, GateMode mode,
                                    int batch_size, int jobs) {
  if (n_rollouts < 1) throw std::invalid_argument("build_heatmap: n_rollouts must be >= 1");
  std::vector<gw::EnvState> starts;
  starts.reserve(n_rollouts);
  for (int i = 0; i < n_rollouts; ++i) {
    starts.push_back(gw::reset(spec, gw::derive_seed(seed, expert::kHeatmapStream, i + 1)));
  }
  auto result = rollout(agent, starts, mode, batch_size, jobs);
  return analysis::heatmap_from_frames(spec.grid_size, result.frames);
}

std::pair<double, double> evaluate_pretrained(const GuidePretrainModel<float>& model,
                                              const TrainConfig& config, int jobs) {
  const auto starts = validation_starts(config);
  const int n = static_cast<int>(starts.size());
  const int batch_size = config.batch_episodes;
  const int n_chunks = (n + batch_size - 1) / batch_size;
  std::vector<long> frames(n_chunks, 0), correct(n_chunks, 0), wins(n_chunks, 0);

  parallel_for(n_chunks, jobs, [&](int chunk) {
    const int begin = chunk * batch_size;
    const int rows = std::min(batch_size, n - begin);
    std::vector<gw::EnvState> states(starts.begin() + begin, starts.begin() + begin + rows);
    std::vector<bool> alive(rows, true);
    std::vector<std::vector<int>> tokens(rows);
    for (int i = 0; i < rows; ++i) tokens[i] = gw::observe(states[i]).instruction;
    auto tape = std::make_unique<Tape<float>>();
    auto mem = model.begin(*tape, tokens);
    std::vector<gw::Observation> obs(rows);
    while (std::find(alive.begin(), alive.end(), true) != alive.end()) {
      for (int i = 0; i < rows; ++i) obs[i] = gw::observe(states[i]);
      auto out = model.step(*tape, mem, observation_matrix(obs));
      const auto& logits = out.logits.value();
      for (int i = 0; i < rows; ++i) {
        if (!alive[i]) continue;
        int label;
        try {
          label = expert::expert_action(states[i]);
        } catch (const PlannerFailure&) {
          alive[i] = false;
          continue;
        }
        const int action = row_argmax(logits, i);
        ++frames[chunk];
        correct[chunk] += action == label;
        gw::step_in_place(states[i], action);
        if (states[i].done) {
          alive[i] = false;
          wins[chunk] += states[i].success;
        }
      }
      auto next = std::make_unique<Tape<float>>();
      mem = carry(*next, mem);
      tape = std::move(next);
    }
  });

  const long total_frames = std::accumulate(frames.begin(), frames.end(), 0L);
  const long total_correct = std::accumulate(correct.begin(), correct.end(), 0L);
  const long total_wins = std::accumulate(wins.begin(), wins.end(), 0L);
  const double accuracy =
      total_frames > 0 ? static_cast<double>(total_correct) / static_cast<double>(total_frames) : 0.0;
  return {accuracy, static_cast<double>(total_wins) / static_cast<double>(n)};
}

std::vector<PretrainEpoch> pretrain_guide(GuidePretrainModel<float>& model,
                                          const std::vector<Episode>& data,
                                          const TrainConfig& config, int jobs,
                                          const std::function<void(const PretrainEpoch&)>& progress) {
  dc::Adam<float> adam(dc::AdamConfig{config.lr});
  const int batch_size = config.batch_episodes;
  const int n_batches = static_cast<int>((data.size() + batch_size - 1) / batch_size);
  std::vector<PretrainEpoch> history;
  for (int epoch = 0; epoch < config.pretrain_epochs; ++epoch) {
    const auto order = shuffled_order(data.size(), config.seed, kPretrainShuffleStream,
                                      static_cast<std::uint64_t>(epoch));
    double loss_sum = 0.0;
    long frame_sum = 0;
    for (int b = 0; b < n_batches; ++b) {
      auto first = order.begin() + static_cast<long>(b) * batch_size;
      auto last = order.begin() + std::min<long>(static_cast<long>(b + 1) * batch_size,
                                                 static_cast<long>(order.size()));
      const auto batch = sorted_batch(data, std::vector<int>(first, last));
      const int max_len = data[batch.front()].length();
      Tape<float> tape;
      auto mem = model.begin(tape, batch_tokens(data, batch));
      std::vector<Var<float>> terms;
      std::vector<int> labels;
      long frames = 0;
      double ce_sum = 0.0;
      for (int t = 0; t < max_len; ++t) {
        const int active = active_rows(data, batch, t);
        Matrix<float> x = step_inputs(data, batch, active, t, labels);
        auto out = model.step(tape, mem, x);
        Var<float> ce = dc::cross_entropy(out.logits, labels);
        terms.push_back(dc::sum(ce));
        ce_sum += ce.value().template cast<double>().sum();
        frames += active;
      }
      Var<float> loss = dc::scale(dc::add_n(terms), 1.0f / static_cast<float>(frames));
      require_finite(loss.scalar(), "in guide pretraining epoch " + std::to_string(epoch) +
                                        " batch " + std::to_string(b));
      model.params().zero_grad();
      tape.backward(loss);
      adam.step(model.params());
      loss_sum += ce_sum;
      frame_sum += frames;
    }
    PretrainEpoch record;
    record.epoch = epoch;
    record.loss = frame_sum > 0 ? loss_sum / static_cast<double>(frame_sum) : 0.0;
    std::tie(record.validation_accuracy, record.validation_success) =
        evaluate_pretrained(model, config, jobs);
    history.push_back(record);
    if (progress) progress(record);
  }
  return history;
}

}  // namespace guidegate::training
