/// @file qpolicy.hpp
/// @brief Lane-agent Q-network (dense + LSTM + graph attention branches), epsilon-greedy
///        selection, shared replay and the DQN update with online/target parameter sets.

#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "parkrl/netmodel.hpp"
#include "parkrl/simcore.hpp"
#include "parkrl/tensornet.hpp"

namespace parkrl {

inline constexpr int kSeqLen = 10;
inline constexpr int kEmbed = 32;
inline constexpr int kGatHeads = 2;
inline constexpr int kHeadHidden = 128;
inline constexpr int kActions = 3;

enum Action : int { increase = 0, decrease = 1, keep = 2 };

const char* action_name(int a);

struct Ablation {
  bool use_lstm = true;
  bool use_gat = true;

  /// "dqn", "dqn_lstm" or "full".
  static Ablation parse(const std::string& name);
  std::string name() const;
  bool operator==(const Ablation&) const = default;
};

// ---------------------------------------------------------------- parameters

struct QNetParams {
  DenseParams fcn;     // 2 -> 32
  LstmParams lstm;     // 1 -> 32, two layers
  GatLayerParams gat1; // 32 -> 2 x 32, concat
  GatLayerParams gat2; // 64 -> 2 x 32, average
  DenseParams hidden;  // 96 -> 128
  DenseParams out;     // 128 -> 3

  static QNetParams zeros(double dropout = 0.2);
  static QNetParams initialized(std::uint64_t seed, double dropout = 0.2);

  /// Calls f(name, matrix) for every parameter in a fixed manifest order.
  template <class F>
  void visit(F&& f) {
    f("fcn.W", fcn.W);
    f("fcn.b", fcn.b);
    for (auto [tag, l] : {std::pair{"lstm.l1", &lstm.l1}, std::pair{"lstm.l2", &lstm.l2}}) {
      const std::string t(tag);
      f(t + ".Wx", l->Wx);
      f(t + ".Wh", l->Wh);
      f(t + ".b", l->b);
    }
    for (auto [tag, g] : {std::pair{"gat1", &gat1}, std::pair{"gat2", &gat2}}) {
      for (std::size_t m = 0; m < g->heads.size(); ++m) {
        const std::string t = std::string(tag) + ".h" + std::to_string(m);
        f(t + ".Ws", g->heads[m].Ws);
        f(t + ".Wt", g->heads[m].Wt);
        f(t + ".as", g->heads[m].as);
        f(t + ".at", g->heads[m].at);
      }
    }
    f("hidden.W", hidden.W);
    f("hidden.b", hidden.b);
    f("out.W", out.W);
    f("out.b", out.b);
  }
  template <class F>
  void visit(F&& f) const {
    const_cast<QNetParams*>(this)->visit([&](const std::string& n, Matrix& m) {
      f(n, static_cast<const Matrix&>(m));
    });
  }

  std::vector<Matrix*> tensors();
  std::size_t parameter_count() const;
  /// Same shapes, all zeros (gradient accumulator).
  QNetParams zeros_like() const;
};

// ---------------------------------------------------------------- observations

/// Ten most recent congestion samples per lane, oldest first.
using HistorySnapshot = std::vector<std::array<double, kSeqLen>>;

/// Ring buffers of sampled lane congestion.
class CongestionHistory {
public:
  explicit CongestionHistory(std::size_t lanes = 0) : m_buf(lanes) {}
  void push(const std::vector<double>& sample);
  void sample(const Simulation& sim);
  std::array<double, kSeqLen> sequence(LaneId lane) const { return m_buf.at(static_cast<std::size_t>(lane)); }
  std::shared_ptr<const HistorySnapshot> snapshot() const {
    return std::make_shared<const HistorySnapshot>(m_buf);
  }
  std::size_t pushes() const noexcept { return m_pushes; }

private:
  HistorySnapshot m_buf;
  std::size_t m_pushes = 0;
};

/// A lane and its neighbourhood as a small graph; node 0 is the lane itself.
struct LocalGraph {
  std::vector<LaneId> nodes;
  Graph graph;
};

LocalGraph build_local_graph(const RoadNetwork& net, LaneId lane);
std::vector<std::shared_ptr<const LocalGraph>> build_local_graphs(const RoadNetwork& net);

struct Observation {
  LaneId lane = -1;
  double c_norm = 0.0;      ///< cleared spaces / spaces on the lane
  double congestion = 0.0;  ///< veh/m right now
  std::shared_ptr<const HistorySnapshot> history;
  std::shared_ptr<const LocalGraph> local;

  std::array<double, kSeqLen> own_sequence() const {
    return (*history)[static_cast<std::size_t>(lane)];
  }
};

Observation encode_observation(const Simulation& sim, LaneId lane,
                               std::shared_ptr<const HistorySnapshot> history,
                               std::shared_ptr<const LocalGraph> local);

// ---------------------------------------------------------------- forward / backward

struct QForwardCache {
  Ablation ablation;
  long batch = 0;
  std::vector<long> roots;  // row of each observation's own lane in the node stack
  DenseCache fcn, hidden, out;
  LstmCache lstm;
  GatCache gat1, gat2;
  bool valid = false;
};

/// Q-values [B, 3] for a batch of observations.
Matrix q_forward(const std::vector<const Observation*>& batch, const QNetParams& p,
                 Ablation ablation, LstmMode mode = {}, QForwardCache* cache = nullptr);
/// Accumulates d(loss)/d(params) given d(loss)/dQ.
void q_backward(const Matrix& dq, const QNetParams& p, const QForwardCache& cache,
                QNetParams& grad);

std::array<double, kActions> q_values(const Observation& obs, const QNetParams& p,
                                      Ablation ablation);

// ---------------------------------------------------------------- acting

/// Epsilon-greedy; greedy ties go to the lowest action index.
int select_action(const std::array<double, kActions>& q, double epsilon, std::mt19937_64& rng);
int greedy_action(const std::array<double, kActions>& q);
int apply_action(int cleared, int action, int max_spaces);

/// -alpha * mean time loss - beta * mean walking distance over the lane's interval.
double compute_reward(const LaneStats& stats, double alpha, double beta);

// ---------------------------------------------------------------- training

struct TrainingConfig {
  double alpha = 1.0;
  double beta = 0.1;
  double gamma = 0.95;
  double lr = 1e-3;
  int batch = 64;
  std::size_t replay_capacity = 50000;
  double eps_start = 1.0;
  double eps_end = 0.05;
  long eps_decay = 20000;
  long target_sync = 500;
  int updates_per_epoch = 1;  ///< gradient steps after each lane epoch
  double reward_scale = 0.02; ///< multiplies rewards before they enter the replay
  double dropout = 0.2;
  Ablation ablation;
  std::uint64_t seed = 1;

  void validate() const;
  double epsilon(long decisions) const;
};

struct Transition {
  Observation s;
  int action = keep;
  double reward = 0.0;
  Observation s_next;
  bool terminal = false;
};

class ReplayBuffer {
public:
  explicit ReplayBuffer(std::size_t capacity) : m_capacity(capacity) {}
  void push(Transition t);
  std::size_t size() const noexcept { return m_items.size(); }
  std::size_t capacity() const noexcept { return m_capacity; }
  const Transition& at(std::size_t i) const { return m_items.at(i); }
  /// Uniform sample with replacement.
  std::vector<const Transition*> sample(std::size_t n, std::mt19937_64& rng) const;

private:
  std::size_t m_capacity;
  std::size_t m_next = 0;
  std::vector<Transition> m_items;
};

/// y = R for terminal transitions, R + gamma * max_a Q(S', a; target) otherwise.
Matrix compute_targets(const std::vector<const Transition*>& batch, const QNetParams& target,
                       Ablation ablation, double gamma);

class CheckpointError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Ablation flags recorded in a checkpoint header.
Ablation checkpoint_ablation(const std::string& path);

/// Shared policy with its replay, optimiser and counters.
class DqnAgent {
public:
  explicit DqnAgent(TrainingConfig cfg);

  const TrainingConfig& config() const noexcept { return m_cfg; }
  QNetParams& online() noexcept { return m_online; }
  const QNetParams& online() const noexcept { return m_online; }
  const QNetParams& target() const noexcept { return m_target; }
  ReplayBuffer& replay() noexcept { return m_replay; }
  std::mt19937_64& rng() noexcept { return m_rng; }

  double epsilon() const { return m_cfg.epsilon(m_decisions); }
  long decisions() const noexcept { return m_decisions; }
  long grad_steps() const noexcept { return m_grad_steps; }
  long syncs() const noexcept { return m_syncs; }
  long epoch() const noexcept { return m_epoch; }
  void set_epoch(long e) noexcept { m_epoch = e; }

  /// Greedy (or epsilon-greedy when `explore`) actions for a batch of observations.
  std::vector<int> act(const std::vector<const Observation*>& obs, bool explore);

  /// One Adam step on a uniform replay batch; nullopt when the replay is too small.
  std::optional<double> train_step();
  void sync_target();

  void save(std::ostream& os) const;
  void save(const std::string& path) const;
  void load(std::istream& is);
  void load(const std::string& path);

private:
  TrainingConfig m_cfg;
  QNetParams m_online;
  QNetParams m_target;
  AdamState m_adam;
  ReplayBuffer m_replay;
  std::mt19937_64 m_rng;
  long m_decisions = 0;
  long m_grad_steps = 0;
  long m_syncs = 0;
  long m_epoch = 0;
};

}  // namespace parkrl
