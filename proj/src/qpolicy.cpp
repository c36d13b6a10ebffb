#include "parkrl/qpolicy.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace parkrl {

const char* action_name(int a) {
  switch (a) {
    case increase: return "increase";
    case decrease: return "decrease";
    case keep: return "keep";
  }
  return "?";
}

Ablation Ablation::parse(const std::string& name) {
  if (name == "dqn") return {false, false};
  if (name == "dqn_lstm") return {true, false};
  if (name == "full") return {true, true};
  throw ConfigError("ablation", "unknown variant '" + name + "' (dqn, dqn_lstm, full)");
}

std::string Ablation::name() const {
  if (use_lstm && use_gat) return "full";
  if (use_lstm) return "dqn_lstm";
  if (!use_gat) return "dqn";
  return "gat_only";
}

// ---------------------------------------------------------------- parameters

QNetParams QNetParams::zeros(double dropout) {
  QNetParams p;
  p.fcn = DenseParams::zeros(2, kEmbed);
  p.lstm = LstmParams::zeros(1, kEmbed, dropout);
  p.gat1 = GatLayerParams::zeros(kEmbed, kEmbed, kGatHeads, Combine::concat);
  p.gat2 = GatLayerParams::zeros(kEmbed * kGatHeads, kEmbed, kGatHeads, Combine::average);
  p.hidden = DenseParams::zeros(3 * kEmbed, kHeadHidden);
  p.out = DenseParams::zeros(kHeadHidden, kActions);
  return p;
}

QNetParams QNetParams::initialized(std::uint64_t seed, double dropout) {
  QNetParams p = zeros(dropout);
  std::mt19937_64 rng(seed);
  p.fcn.init(rng);
  p.lstm.init(rng);
  p.gat1.init(rng);
  p.gat2.init(rng);
  p.hidden.init(rng);
  p.out.init(rng);
  return p;
}

std::vector<Matrix*> QNetParams::tensors() {
  std::vector<Matrix*> out;
  visit([&](const std::string&, Matrix& m) { out.push_back(&m); });
  return out;
}

std::size_t QNetParams::parameter_count() const {
  std::size_t n = 0;
  visit([&](const std::string&, const Matrix& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

QNetParams QNetParams::zeros_like() const {
  QNetParams z = *this;
  z.visit([](const std::string&, Matrix& m) { m.setZero(); });
  return z;
}

// ---------------------------------------------------------------- observations

void CongestionHistory::push(const std::vector<double>& sample) {
  if (sample.size() != m_buf.size())
    throw ContractViolation("congestion sample has " + std::to_string(sample.size()) +
                            " lanes, expected " + std::to_string(m_buf.size()));
  for (std::size_t l = 0; l < m_buf.size(); ++l) {
    auto& b = m_buf[l];
    std::rotate(b.begin(), b.begin() + 1, b.end());
    b.back() = sample[l];
  }
  ++m_pushes;
}

void CongestionHistory::sample(const Simulation& sim) {
  std::vector<double> s(m_buf.size());
  for (std::size_t l = 0; l < s.size(); ++l) s[l] = sim.congestion(static_cast<LaneId>(l));
  push(s);
}

LocalGraph build_local_graph(const RoadNetwork& net, LaneId lane) {
  LocalGraph g;
  g.nodes.push_back(lane);
  for (LaneId n : net.lane(lane).neighbors) g.nodes.push_back(n);
  const std::size_t n = g.nodes.size();
  g.graph.nbrs.resize(n);
  for (std::size_t a = 0; a < n; ++a) {
    const auto& na = net.lane(g.nodes[a]).neighbors;
    for (std::size_t b = 0; b < n; ++b) {
      if (a == b || std::binary_search(na.begin(), na.end(), g.nodes[b]))
        g.graph.nbrs[a].push_back(static_cast<int>(b));
    }
  }
  return g;
}

std::vector<std::shared_ptr<const LocalGraph>> build_local_graphs(const RoadNetwork& net) {
  std::vector<std::shared_ptr<const LocalGraph>> out;
  for (const auto& l : net.lanes()) out.push_back(std::make_shared<const LocalGraph>(build_local_graph(net, l.id)));
  return out;
}

Observation encode_observation(const Simulation& sim, LaneId lane,
                               std::shared_ptr<const HistorySnapshot> history,
                               std::shared_ptr<const LocalGraph> local) {
  Observation o;
  o.lane = lane;
  const int m = sim.network().lane(lane).space_count();
  o.c_norm = m == 0 ? 0.0 : static_cast<double>(sim.cleared(lane)) / m;
  o.congestion = sim.congestion(lane);
  o.history = std::move(history);
  o.local = std::move(local);
  return o;
}

// ---------------------------------------------------------------- forward / backward

Matrix q_forward(const std::vector<const Observation*>& batch, const QNetParams& p,
                 Ablation ablation, LstmMode mode, QForwardCache* cache) {
  const long B = static_cast<long>(batch.size());
  if (B == 0) throw ContractViolation("q_forward: empty batch");
  QForwardCache local_cache;
  QForwardCache& c = cache ? *cache : local_cache;
  c = QForwardCache{};
  c.ablation = ablation;
  c.batch = B;

  Matrix oc(B, 2);
  for (long b = 0; b < B; ++b) {
    oc(b, 0) = batch[static_cast<std::size_t>(b)]->c_norm;
    oc(b, 1) = batch[static_cast<std::size_t>(b)]->congestion;
  }
  Matrix state = Matrix::Zero(B, 3 * kEmbed);
  state.leftCols(kEmbed) = dense_forward(oc, p.fcn, Activation::relu, &c.fcn);

  if (ablation.use_lstm || ablation.use_gat) {
    // Stack every sequence the batch needs: own lane only, or the whole neighbourhood.
    std::vector<std::pair<const Observation*, LaneId>> rows;
    Graph graph;
    for (const Observation* o : batch) {
      const long base = static_cast<long>(rows.size());
      c.roots.push_back(base);
      if (ablation.use_gat) {
        for (LaneId l : o->local->nodes) rows.emplace_back(o, l);
        for (const auto& nb : o->local->graph.nbrs) {
          std::vector<int> shifted(nb);
          for (int& k : shifted) k += static_cast<int>(base);
          graph.nbrs.push_back(std::move(shifted));
        }
      } else {
        rows.emplace_back(o, o->lane);
      }
    }
    const long N = static_cast<long>(rows.size());
    std::vector<Matrix> seq(kSeqLen, Matrix(N, 1));
    for (long r = 0; r < N; ++r) {
      const auto& hist = (*rows[static_cast<std::size_t>(r)].first->history)
          [static_cast<std::size_t>(rows[static_cast<std::size_t>(r)].second)];
      for (int t = 0; t < kSeqLen; ++t) seq[static_cast<std::size_t>(t)](r, 0) = hist[static_cast<std::size_t>(t)];
    }
    Matrix h = lstm_forward(seq, p.lstm, mode, &c.lstm);
    if (ablation.use_lstm)
      for (long b = 0; b < B; ++b) state.block(b, kEmbed, 1, kEmbed) = h.row(c.roots[static_cast<std::size_t>(b)]);
    if (ablation.use_gat) {
      Matrix g1 = gat_forward(h, graph, p.gat1, &c.gat1);
      Matrix g2 = gat_forward(g1, graph, p.gat2, &c.gat2);
      for (long b = 0; b < B; ++b)
        state.block(b, 2 * kEmbed, 1, kEmbed) = g2.row(c.roots[static_cast<std::size_t>(b)]);
    }
  }
  Matrix hid = dense_forward(state, p.hidden, Activation::relu, &c.hidden);
  Matrix q = dense_forward(hid, p.out, Activation::none, &c.out);
  c.valid = true;
  return q;
}

void q_backward(const Matrix& dq, const QNetParams& p, const QForwardCache& c, QNetParams& grad) {
  if (!c.valid) throw UsageError("q_backward called without a recorded forward pass");
  if (dq.rows() != c.batch || dq.cols() != kActions)
    throw ShapeError("q_backward", dq.rows(), dq.cols(), c.batch, kActions);
  Matrix dhid = dense_backward(dq, p.out, c.out, grad.out);
  Matrix dstate = dense_backward(dhid, p.hidden, c.hidden, grad.hidden);
  dense_backward(dstate.leftCols(kEmbed), p.fcn, c.fcn, grad.fcn);
  if (!c.ablation.use_lstm && !c.ablation.use_gat) return;

  const long N = c.lstm.l2.c.back().rows();
  Matrix dh = Matrix::Zero(N, kEmbed);
  if (c.ablation.use_lstm)
    for (long b = 0; b < c.batch; ++b)
      dh.row(c.roots[static_cast<std::size_t>(b)]) += dstate.block(b, kEmbed, 1, kEmbed);
  if (c.ablation.use_gat) {
    Matrix dg2 = Matrix::Zero(N, kEmbed);
    for (long b = 0; b < c.batch; ++b)
      dg2.row(c.roots[static_cast<std::size_t>(b)]) = dstate.block(b, 2 * kEmbed, 1, kEmbed);
    Matrix dg1 = gat_backward(dg2, p.gat2, c.gat2, grad.gat2);
    dh += gat_backward(dg1, p.gat1, c.gat1, grad.gat1);
  }
  lstm_backward(dh, p.lstm, c.lstm, grad.lstm);
}

std::array<double, kActions> q_values(const Observation& obs, const QNetParams& p,
                                      Ablation ablation) {
  const Matrix q = q_forward({&obs}, p, ablation);
  return {q(0, 0), q(0, 1), q(0, 2)};
}

// ---------------------------------------------------------------- acting

int greedy_action(const std::array<double, kActions>& q) {
  int best = 0;
  for (int a = 1; a < kActions; ++a)
    if (q[static_cast<std::size_t>(a)] > q[static_cast<std::size_t>(best)]) best = a;
  return best;
}

int select_action(const std::array<double, kActions>& q, double epsilon, std::mt19937_64& rng) {
  if (epsilon > 0.0) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    if (u(rng) < epsilon) return std::uniform_int_distribution<int>(0, kActions - 1)(rng);
  }
  return greedy_action(q);
}

int apply_action(int cleared, int action, int max_spaces) {
  const int delta = action == increase ? 1 : action == decrease ? -1 : 0;
  return std::clamp(cleared + delta, 0, max_spaces);
}

double compute_reward(const LaneStats& stats, double alpha, double beta) {
  return -alpha * stats.mean_time_loss() - beta * stats.mean_walk();
}

// ---------------------------------------------------------------- training

void TrainingConfig::validate() const {
  if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("gamma", "must be in [0, 1)");
  if (!(lr > 0.0)) throw ConfigError("lr", "must be > 0");
  if (batch < 1) throw ConfigError("batch", "must be >= 1");
  if (!(reward_scale > 0.0)) throw ConfigError("reward_scale", "must be > 0");
  if (replay_capacity < static_cast<std::size_t>(batch))
    throw ConfigError("replay_capacity", "must hold at least one batch");
  if (!(eps_end >= 0.0 && eps_end <= eps_start && eps_start <= 1.0))
    throw ConfigError("epsilon", "need 0 <= end <= start <= 1");
  if (eps_decay < 1) throw ConfigError("eps_decay", "must be >= 1");
  if (target_sync < 1) throw ConfigError("target_sync", "must be >= 1");
  if (updates_per_epoch < 1) throw ConfigError("updates_per_epoch", "must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout", "must be in [0, 1)");
  if (alpha < 0.0 || beta < 0.0) throw ConfigError("alpha/beta", "must be non-negative");
}

double TrainingConfig::epsilon(long decisions) const {
  if (decisions >= eps_decay) return eps_end;
  const double frac = static_cast<double>(decisions) / static_cast<double>(eps_decay);
  return eps_start + (eps_end - eps_start) * frac;
}

void ReplayBuffer::push(Transition t) {
  if (m_capacity == 0) return;
  if (m_items.size() < m_capacity) {
    m_items.push_back(std::move(t));
  } else {
    m_items[m_next] = std::move(t);
  }
  m_next = (m_next + 1) % m_capacity;
}

std::vector<const Transition*> ReplayBuffer::sample(std::size_t n, std::mt19937_64& rng) const {
  if (m_items.empty()) throw ContractViolation("sampling from an empty replay buffer");
  std::uniform_int_distribution<std::size_t> pick(0, m_items.size() - 1);
  std::vector<const Transition*> out(n);
  for (auto& t : out) t = &m_items[pick(rng)];
  return out;
}

Matrix compute_targets(const std::vector<const Transition*>& batch, const QNetParams& target,
                       Ablation ablation, double gamma) {
  const long B = static_cast<long>(batch.size());
  Matrix y(B, 1);
  std::vector<const Observation*> next;
  std::vector<long> rows;
  for (long b = 0; b < B; ++b) {
    y(b, 0) = batch[static_cast<std::size_t>(b)]->reward;
    if (!batch[static_cast<std::size_t>(b)]->terminal) {
      next.push_back(&batch[static_cast<std::size_t>(b)]->s_next);
      rows.push_back(b);
    }
  }
  if (!next.empty()) {
    const Matrix q = q_forward(next, target, ablation);
    for (std::size_t k = 0; k < rows.size(); ++k)
      y(rows[k], 0) += gamma * q.row(static_cast<long>(k)).maxCoeff();
  }
  return y;
}

DqnAgent::DqnAgent(TrainingConfig cfg)
    : m_cfg(cfg),
      m_online(QNetParams::initialized(cfg.seed, cfg.dropout)),
      m_target(m_online),
      m_replay(cfg.replay_capacity),
      m_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL) {
  m_cfg.validate();
  m_adam.lr = cfg.lr;
}

std::vector<int> DqnAgent::act(const std::vector<const Observation*>& obs, bool explore) {
  std::vector<int> out;
  if (obs.empty()) return out;
  const Matrix q = q_forward(obs, m_online, m_cfg.ablation);
  for (long b = 0; b < q.rows(); ++b) {
    const std::array<double, kActions> row{q(b, 0), q(b, 1), q(b, 2)};
    if (explore) {
      out.push_back(select_action(row, epsilon(), m_rng));
      ++m_decisions;
    } else {
      out.push_back(greedy_action(row));
    }
  }
  return out;
}

std::optional<double> DqnAgent::train_step() {
  if (m_replay.size() < static_cast<std::size_t>(m_cfg.batch)) return std::nullopt;
  const auto batch = m_replay.sample(static_cast<std::size_t>(m_cfg.batch), m_rng);
  const Matrix y = compute_targets(batch, m_target, m_cfg.ablation, m_cfg.gamma);

  std::vector<const Observation*> states;
  for (const Transition* t : batch) states.push_back(&t->s);
  QForwardCache cache;
  const Matrix q = q_forward(states, m_online, m_cfg.ablation, {true, &m_rng}, &cache);
  const long B = q.rows();
  Matrix pred(B, 1);
  for (long b = 0; b < B; ++b) pred(b, 0) = q(b, batch[static_cast<std::size_t>(b)]->action);
  const double loss = mse_loss(pred, y);
  const Matrix dpred = mse_grad(pred, y);
  Matrix dq = Matrix::Zero(B, kActions);
  for (long b = 0; b < B; ++b) dq(b, batch[static_cast<std::size_t>(b)]->action) = dpred(b, 0);

  QNetParams grad = m_online.zeros_like();
  q_backward(dq, m_online, cache, grad);
  std::vector<const Matrix*> grads;
  for (Matrix* g : grad.tensors()) grads.push_back(g);
  adam_step(m_online.tensors(), grads, m_adam);
  ++m_grad_steps;
  if (m_grad_steps % m_cfg.target_sync == 0) sync_target();
  return loss;
}

void DqnAgent::sync_target() {
  m_target = m_online;
  ++m_syncs;
}

// ---------------------------------------------------------------- checkpoints

namespace {

constexpr char kMagic[8] = {'P', 'K', 'R', 'L', 'Q', 'N', 'E', 'T'};
constexpr std::uint32_t kVersion = 1;

void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffU);
  os.write(b, 8);
}
void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffU);
  os.write(b, 4);
}
void put_f64(std::ostream& os, double d) { put_u64(os, std::bit_cast<std::uint64_t>(d)); }

std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw CheckpointError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}
std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw CheckpointError("checkpoint truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}
double get_f64(std::istream& is) { return std::bit_cast<double>(get_u64(is)); }

struct ManifestEntry {
  std::string name;
  std::uint32_t rows, cols;
  bool operator==(const ManifestEntry&) const = default;
};

std::vector<ManifestEntry> manifest(const QNetParams& p) {
  std::vector<ManifestEntry> m;
  p.visit([&](const std::string& n, const Matrix& x) {
    m.push_back({n, static_cast<std::uint32_t>(x.rows()), static_cast<std::uint32_t>(x.cols())});
  });
  return m;
}

void write_matrix(std::ostream& os, const Matrix& m) {
  for (long r = 0; r < m.rows(); ++r)
    for (long c = 0; c < m.cols(); ++c) put_f64(os, m(r, c));
}
void read_matrix(std::istream& is, Matrix& m) {
  for (long r = 0; r < m.rows(); ++r)
    for (long c = 0; c < m.cols(); ++c) m(r, c) = get_f64(is);
}

}  // namespace

void DqnAgent::save(std::ostream& os) const {
  os.write(kMagic, 8);
  put_u32(os, kVersion);
  const auto man = manifest(m_online);
  put_u32(os, static_cast<std::uint32_t>(man.size()));
  for (const auto& e : man) {
    put_u32(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put_u32(os, e.rows);
    put_u32(os, e.cols);
  }
  put_u32(os, (m_cfg.ablation.use_lstm ? 1U : 0U) | (m_cfg.ablation.use_gat ? 2U : 0U));
  put_u64(os, static_cast<std::uint64_t>(m_epoch));
  put_u64(os, static_cast<std::uint64_t>(m_grad_steps));
  put_u64(os, static_cast<std::uint64_t>(m_decisions));
  put_u64(os, static_cast<std::uint64_t>(m_syncs));
  put_u64(os, static_cast<std::uint64_t>(m_adam.step));
  m_online.visit([&](const std::string&, const Matrix& x) { write_matrix(os, x); });
  m_target.visit([&](const std::string&, const Matrix& x) { write_matrix(os, x); });
  const bool has_moments = !m_adam.m.empty();
  put_u32(os, has_moments ? 1U : 0U);
  if (has_moments) {
    for (const Matrix& x : m_adam.m) write_matrix(os, x);
    for (const Matrix& x : m_adam.v) write_matrix(os, x);
  }
  if (!os) throw CheckpointError("failed writing checkpoint");
}

void DqnAgent::save(const std::string& path) const {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot open " + tmp);
    save(os);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw CheckpointError("cannot move " + tmp);
}

void DqnAgent::load(std::istream& is) {
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
    throw CheckpointError("not a checkpoint (bad magic)");
  const std::uint32_t version = get_u32(is);
  if (version != kVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto want = manifest(m_online);
  const std::uint32_t n = get_u32(is);
  if (n != want.size()) throw CheckpointError("manifest size mismatch");
  for (std::uint32_t k = 0; k < n; ++k) {
    ManifestEntry e;
    const std::uint32_t len = get_u32(is);
    if (len > 256) throw CheckpointError("corrupt manifest entry");
    e.name.resize(len);
    if (!is.read(e.name.data(), len)) throw CheckpointError("checkpoint truncated");
    e.rows = get_u32(is);
    e.cols = get_u32(is);
    if (!(e == want[k])) throw CheckpointError("manifest mismatch at '" + e.name + "'");
  }
  const std::uint32_t flags = get_u32(is);
  const Ablation abl{(flags & 1U) != 0, (flags & 2U) != 0};
  if (!(abl == m_cfg.ablation))
    throw CheckpointError("checkpoint ablation '" + abl.name() + "' does not match '" +
                          m_cfg.ablation.name() + "'");
  QNetParams online = m_online;
  QNetParams target = m_target;
  AdamState adam = m_adam;
  const auto epoch = static_cast<long>(get_u64(is));
  const auto grad_steps = static_cast<long>(get_u64(is));
  const auto decisions = static_cast<long>(get_u64(is));
  const auto syncs = static_cast<long>(get_u64(is));
  adam.step = static_cast<long>(get_u64(is));
  online.visit([&](const std::string&, Matrix& x) { read_matrix(is, x); });
  target.visit([&](const std::string&, Matrix& x) { read_matrix(is, x); });
  adam.m.clear();
  adam.v.clear();
  if (get_u32(is) == 1U) {
    online.visit([&](const std::string&, const Matrix& x) { adam.m.push_back(Matrix::Zero(x.rows(), x.cols())); });
    adam.v = adam.m;
    for (Matrix& x : adam.m) read_matrix(is, x);
    for (Matrix& x : adam.v) read_matrix(is, x);
  }
  bool finite = true;
  online.visit([&](const std::string&, const Matrix& x) { finite = finite && x.allFinite(); });
  if (!finite) throw CheckpointError("checkpoint holds non-finite parameters");
  m_online = std::move(online);
  m_target = std::move(target);
  m_adam = std::move(adam);
  m_epoch = epoch;
  m_grad_steps = grad_steps;
  m_decisions = decisions;
  m_syncs = syncs;
}

Ablation checkpoint_ablation(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
    throw CheckpointError("not a checkpoint (bad magic)");
  if (get_u32(is) != kVersion) throw CheckpointError("unsupported checkpoint version");
  const std::uint32_t n = get_u32(is);
  if (n > 4096) throw CheckpointError("corrupt manifest");
  for (std::uint32_t k = 0; k < n; ++k) {
    const std::uint32_t len = get_u32(is);
    if (len > 256) throw CheckpointError("corrupt manifest entry");
    is.ignore(len + 8);
  }
  const std::uint32_t flags = get_u32(is);
  return Ablation{(flags & 1U) != 0, (flags & 2U) != 0};
}

void DqnAgent::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path);
  load(is);
}

}  // namespace parkrl
