#include "parkrl/tensornet.hpp"

#include <cmath>

namespace parkrl {

namespace {

Matrix sigmoid(const Matrix& z) { return (1.0 + (-z.array()).exp()).inverse().matrix(); }

Matrix relu(const Matrix& z) { return z.cwiseMax(0.0); }

void check_cols(const std::string& op, const Matrix& x, long want) {
  if (x.cols() != want) throw ShapeError(op, x.rows(), x.cols(), -1, want);
}

void check_same(const std::string& op, const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError(op, a, b);
}

}  // namespace

std::string shape_str(long rows, long cols) {
  return "[" + (rows < 0 ? std::string("*") : std::to_string(rows)) + "x" +
         (cols < 0 ? std::string("*") : std::to_string(cols)) + "]";
}

ShapeError::ShapeError(const std::string& op, const Matrix& a, const Matrix& b)
    : ShapeError(op, a.rows(), a.cols(), b.rows(), b.cols()) {}

ShapeError::ShapeError(const std::string& op, long ar, long ac, long br, long bc)
    : std::invalid_argument(op + ": shape mismatch " + shape_str(ar, ac) + " vs " +
                            shape_str(br, bc)) {}

void init_uniform(Matrix& m, long fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (long c = 0; c < m.cols(); ++c)
    for (long r = 0; r < m.rows(); ++r) m(r, c) = u(rng);
}

// ---------------------------------------------------------------- dense

DenseParams DenseParams::zeros(long in, long out) {
  return {Matrix::Zero(in, out), Matrix::Zero(1, out)};
}

void DenseParams::init(std::mt19937_64& rng) {
  init_uniform(W, W.rows(), rng);
  b.setZero();
}

Matrix dense_forward(const Matrix& x, const DenseParams& p, Activation act, DenseCache* cache) {
  check_cols("dense_forward", x, p.W.rows());
  Matrix y = x * p.W;
  y.rowwise() += p.b.row(0);
  if (act == Activation::relu) y = relu(y);
  if (cache) {
    cache->x = x;
    cache->y = y;
    cache->act = act;
    cache->valid = true;
  }
  return y;
}

Matrix dense_backward(const Matrix& dy, const DenseParams& p, const DenseCache& cache,
                      DenseParams& grad) {
  if (!cache.valid) throw UsageError("dense_backward called without a recorded forward pass");
  check_same("dense_backward", dy, cache.y);
  Matrix dz = dy;
  if (cache.act == Activation::relu) dz.array() *= (cache.y.array() > 0.0).cast<double>();
  grad.W += cache.x.transpose() * dz;
  grad.b += dz.colwise().sum();
  return dz * p.W.transpose();
}

// ---------------------------------------------------------------- lstm

LstmParams LstmParams::zeros(long in, long hidden, double dropout) {
  LstmParams p;
  p.l1 = {Matrix::Zero(in, 4 * hidden), Matrix::Zero(hidden, 4 * hidden), Matrix::Zero(1, 4 * hidden)};
  p.l2 = {Matrix::Zero(hidden, 4 * hidden), Matrix::Zero(hidden, 4 * hidden),
          Matrix::Zero(1, 4 * hidden)};
  p.dropout = dropout;
  return p;
}

void LstmParams::init(std::mt19937_64& rng) {
  for (LstmLayer* l : {&l1, &l2}) {
    init_uniform(l->Wx, l->Wx.rows(), rng);
    init_uniform(l->Wh, l->Wh.rows(), rng);
    l->b.setZero();
  }
}

namespace {

std::vector<Matrix> lstm_layer_forward(const std::vector<Matrix>& xs, const LstmLayer& p,
                                       LstmLayerCache* cache) {
  const long B = xs.front().rows();
  const long H = p.Wh.rows();
  Matrix h = Matrix::Zero(B, H);
  Matrix c = Matrix::Zero(B, H);
  std::vector<Matrix> out;
  out.reserve(xs.size());
  for (const Matrix& x : xs) {
    check_cols("lstm_forward", x, p.Wx.rows());
    if (x.rows() != B) throw ShapeError("lstm_forward", x.rows(), x.cols(), B, x.cols());
    Matrix z = x * p.Wx + h * p.Wh;
    z.rowwise() += p.b.row(0);
    Matrix i = sigmoid(z.middleCols(0, H));
    Matrix f = sigmoid(z.middleCols(H, H));
    Matrix g = z.middleCols(2 * H, H).array().tanh().matrix();
    Matrix o = sigmoid(z.middleCols(3 * H, H));
    Matrix c_new = (f.array() * c.array() + i.array() * g.array()).matrix();
    Matrix tc = c_new.array().tanh().matrix();
    Matrix h_new = (o.array() * tc.array()).matrix();
    if (cache) {
      cache->x.push_back(x);
      cache->h_prev.push_back(h);
      cache->c_prev.push_back(c);
      cache->i.push_back(i);
      cache->f.push_back(f);
      cache->g.push_back(g);
      cache->o.push_back(o);
      cache->c.push_back(c_new);
      cache->tc.push_back(tc);
    }
    h = std::move(h_new);
    c = std::move(c_new);
    out.push_back(h);
  }
  return out;
}

// dh_out[t] is the upstream gradient on h_t (may be empty for "none").
std::vector<Matrix> lstm_layer_backward(const std::vector<Matrix>& dh_out, const LstmLayer& p,
                                        const LstmLayerCache& cache, LstmLayer& grad,
                                        bool want_dx) {
  const std::size_t T = cache.x.size();
  const long B = cache.x.front().rows();
  const long H = p.Wh.rows();
  Matrix dh_next = Matrix::Zero(B, H);
  Matrix dc_next = Matrix::Zero(B, H);
  std::vector<Matrix> dx(want_dx ? T : 0);
  Matrix dz(B, 4 * H);
  for (std::size_t k = T; k-- > 0;) {
    Matrix dh = dh_next;
    if (dh_out[k].size() != 0) dh += dh_out[k];
    const auto& i = cache.i[k].array();
    const auto& f = cache.f[k].array();
    const auto& g = cache.g[k].array();
    const auto& o = cache.o[k].array();
    const auto& tc = cache.tc[k].array();
    Matrix dc = (dc_next.array() + dh.array() * o * (1.0 - tc * tc)).matrix();
    dz.middleCols(0, H) = (dc.array() * g * i * (1.0 - i)).matrix();
    dz.middleCols(H, H) = (dc.array() * cache.c_prev[k].array() * f * (1.0 - f)).matrix();
    dz.middleCols(2 * H, H) = (dc.array() * i * (1.0 - g * g)).matrix();
    dz.middleCols(3 * H, H) = (dh.array() * tc * o * (1.0 - o)).matrix();
    grad.Wx += cache.x[k].transpose() * dz;
    grad.Wh += cache.h_prev[k].transpose() * dz;
    grad.b += dz.colwise().sum();
    if (want_dx) dx[k] = dz * p.Wx.transpose();
    dh_next = dz * p.Wh.transpose();
    dc_next = (dc.array() * f).matrix();
  }
  return dx;
}

}  // namespace

Matrix lstm_forward(const std::vector<Matrix>& seq, const LstmParams& p, LstmMode mode,
                    LstmCache* cache) {
  if (seq.empty()) throw ContractViolation("lstm_forward: empty sequence");
  if (cache) *cache = LstmCache{};
  std::vector<Matrix> h1 = lstm_layer_forward(seq, p.l1, cache ? &cache->l1 : nullptr);
  if (mode.train && p.dropout > 0.0) {
    if (!mode.rng) throw UsageError("lstm_forward: training mode needs an rng");
    std::bernoulli_distribution keep(1.0 - p.dropout);
    const double scale = 1.0 / (1.0 - p.dropout);
    for (Matrix& h : h1) {
      Matrix mask(h.rows(), h.cols());
      for (long c = 0; c < mask.cols(); ++c)
        for (long r = 0; r < mask.rows(); ++r) mask(r, c) = keep(*mode.rng) ? scale : 0.0;
      h.array() *= mask.array();
      if (cache) cache->mask.push_back(std::move(mask));
    }
  }
  std::vector<Matrix> h2 = lstm_layer_forward(h1, p.l2, cache ? &cache->l2 : nullptr);
  if (cache) cache->valid = true;
  return h2.back();
}

void lstm_backward(const Matrix& dh, const LstmParams& p, const LstmCache& cache,
                   LstmParams& grad) {
  if (!cache.valid) throw UsageError("lstm_backward called without a recorded forward pass");
  const std::size_t T = cache.l2.x.size();
  check_same("lstm_backward", dh, cache.l2.c.back());
  std::vector<Matrix> top(T);
  top[T - 1] = dh;
  std::vector<Matrix> dx2 = lstm_layer_backward(top, p.l2, cache.l2, grad.l2, true);
  if (!cache.mask.empty())
    for (std::size_t k = 0; k < T; ++k) dx2[k].array() *= cache.mask[k].array();
  lstm_layer_backward(dx2, p.l1, cache.l1, grad.l1, false);
}

// ---------------------------------------------------------------- graph attention

GatLayerParams GatLayerParams::zeros(long in, long out, int n_heads, Combine combine) {
  GatLayerParams p;
  p.combine = combine;
  for (int m = 0; m < n_heads; ++m)
    p.heads.push_back({Matrix::Zero(in, out), Matrix::Zero(in, out), Matrix::Zero(out, 1),
                       Matrix::Zero(out, 1)});
  return p;
}

void GatLayerParams::init(std::mt19937_64& rng) {
  for (GatHead& h : heads) {
    init_uniform(h.Ws, h.Ws.rows(), rng);
    init_uniform(h.Wt, h.Wt.rows(), rng);
    init_uniform(h.as, h.as.rows(), rng);
    init_uniform(h.at, h.at.rows(), rng);
  }
}

namespace {

void check_graph(const Matrix& x, const Graph& graph) {
  if (x.rows() != graph.size())
    throw ShapeError("gat_forward(graph)", x.rows(), x.cols(), graph.size(), x.cols());
  for (std::size_t i = 0; i < graph.nbrs.size(); ++i)
    if (graph.nbrs[i].empty()) throw ShapeError("gat_forward(empty neighbourhood)", 0, 0, 1, 1);
}

GatHeadCache head_forward(const Matrix& x, const Graph& graph, const GatHead& h, double slope) {
  GatHeadCache hc;
  hc.S = x * h.Ws;
  hc.T = x * h.Wt;
  hc.ss = hc.S * h.as;
  hc.tt = hc.T * h.at;
  const long n = graph.size();
  hc.alpha.resize(static_cast<std::size_t>(n));
  hc.e.resize(static_cast<std::size_t>(n));
  hc.h = Matrix::Zero(n, hc.T.cols());
  for (long i = 0; i < n; ++i) {
    const auto& nb = graph.nbrs[static_cast<std::size_t>(i)];
    auto& e = hc.e[static_cast<std::size_t>(i)];
    auto& a = hc.alpha[static_cast<std::size_t>(i)];
    e.resize(nb.size());
    a.resize(nb.size());
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < nb.size(); ++k) {
      const double z = hc.ss(i, 0) + hc.tt(nb[k], 0);
      e[k] = z;
      const double s = z > 0.0 ? z : slope * z;
      a[k] = s;
      mx = std::max(mx, s);
    }
    double sum = 0.0;
    for (double& v : a) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (std::size_t k = 0; k < nb.size(); ++k) {
      a[k] /= sum;
      hc.h.row(i) += a[k] * hc.T.row(nb[k]);
    }
  }
  hc.h = relu(hc.h);
  return hc;
}

}  // namespace

std::vector<std::vector<double>> gat_attention(const Matrix& x, const Graph& graph,
                                               const GatLayerParams& p, std::size_t head) {
  check_cols("gat_attention", x, p.in_dim());
  check_graph(x, graph);
  return head_forward(x, graph, p.heads.at(head), p.leaky_slope).alpha;
}

Matrix gat_forward(const Matrix& x, const Graph& graph, const GatLayerParams& p, GatCache* cache) {
  check_cols("gat_forward", x, p.in_dim());
  check_graph(x, graph);
  const long d = p.head_dim();
  const long M = static_cast<long>(p.heads.size());
  Matrix out = Matrix::Zero(x.rows(), p.out_dim());
  if (cache) {
    cache->x = x;
    cache->graph = graph;
    cache->heads.clear();
  }
  for (long m = 0; m < M; ++m) {
    GatHeadCache hc = head_forward(x, graph, p.heads[static_cast<std::size_t>(m)], p.leaky_slope);
    if (p.combine == Combine::concat) out.middleCols(m * d, d) = hc.h;
    else out += hc.h / static_cast<double>(M);
    if (cache) cache->heads.push_back(std::move(hc));
  }
  if (cache) cache->valid = true;
  return out;
}

Matrix gat_backward(const Matrix& dy, const GatLayerParams& p, const GatCache& cache,
                    GatLayerParams& grad) {
  if (!cache.valid) throw UsageError("gat_backward called without a recorded forward pass");
  const long n = cache.x.rows();
  if (dy.rows() != n || dy.cols() != p.out_dim())
    throw ShapeError("gat_backward", dy.rows(), dy.cols(), n, p.out_dim());
  const long d = p.head_dim();
  const long M = static_cast<long>(p.heads.size());
  Matrix dx = Matrix::Zero(n, cache.x.cols());
  for (long m = 0; m < M; ++m) {
    const GatHead& h = p.heads[static_cast<std::size_t>(m)];
    GatHead& gh = grad.heads[static_cast<std::size_t>(m)];
    const GatHeadCache& hc = cache.heads[static_cast<std::size_t>(m)];
    Matrix dh = p.combine == Combine::concat ? Matrix(dy.middleCols(m * d, d))
                                             : Matrix(dy / static_cast<double>(M));
    dh.array() *= (hc.h.array() > 0.0).cast<double>();

    Matrix dS = Matrix::Zero(n, d);
    Matrix dT = Matrix::Zero(n, d);
    Matrix dss = Matrix::Zero(n, 1);
    Matrix dtt = Matrix::Zero(n, 1);
    for (long i = 0; i < n; ++i) {
      const auto& nb = cache.graph.nbrs[static_cast<std::size_t>(i)];
      const auto& a = hc.alpha[static_cast<std::size_t>(i)];
      const auto& e = hc.e[static_cast<std::size_t>(i)];
      std::vector<double> da(nb.size());
      double dot = 0.0;
      for (std::size_t k = 0; k < nb.size(); ++k) {
        dT.row(nb[k]) += a[k] * dh.row(i);
        da[k] = dh.row(i).dot(hc.T.row(nb[k]));
        dot += a[k] * da[k];
      }
      for (std::size_t k = 0; k < nb.size(); ++k) {
        double de = a[k] * (da[k] - dot);
        de *= e[k] > 0.0 ? 1.0 : p.leaky_slope;
        dss(i, 0) += de;
        dtt(nb[k], 0) += de;
      }
    }
    dS += dss * h.as.transpose();
    dT += dtt * h.at.transpose();
    gh.as += hc.S.transpose() * dss;
    gh.at += hc.T.transpose() * dtt;
    gh.Ws += cache.x.transpose() * dS;
    gh.Wt += cache.x.transpose() * dT;
    dx += dS * h.Ws.transpose() + dT * h.Wt.transpose();
  }
  return dx;
}

// ---------------------------------------------------------------- loss and optimiser

double mse_loss(const Matrix& pred, const Matrix& target) {
  check_same("mse_loss", pred, target);
  if (pred.size() == 0) throw ContractViolation("mse_loss: empty input");
  return (pred - target).squaredNorm() / static_cast<double>(pred.size());
}

Matrix mse_grad(const Matrix& pred, const Matrix& target) {
  check_same("mse_grad", pred, target);
  if (pred.size() == 0) throw ContractViolation("mse_grad: empty input");
  return 2.0 * (pred - target) / static_cast<double>(pred.size());
}

void adam_step(const std::vector<Matrix*>& params, const std::vector<const Matrix*>& grads,
               AdamState& s) {
  if (params.size() != grads.size())
    throw ShapeError("adam_step(count)", static_cast<long>(params.size()), 1,
                     static_cast<long>(grads.size()), 1);
  if (s.m.empty()) {
    for (const Matrix* p : params) {
      s.m.push_back(Matrix::Zero(p->rows(), p->cols()));
      s.v.push_back(Matrix::Zero(p->rows(), p->cols()));
    }
  }
  if (s.m.size() != params.size())
    throw ShapeError("adam_step(state)", static_cast<long>(s.m.size()), 1,
                     static_cast<long>(params.size()), 1);
  for (std::size_t k = 0; k < params.size(); ++k) {
    check_same("adam_step", *params[k], *grads[k]);
    check_same("adam_step(moment)", *params[k], s.m[k]);
  }
  ++s.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Matrix& g = *grads[k];
    s.m[k] = s.beta1 * s.m[k] + (1.0 - s.beta1) * g;
    s.v[k] = s.beta2 * s.v[k] + (1.0 - s.beta2) * g.cwiseProduct(g);
    params[k]->array() -=
        s.lr * (s.m[k].array() / c1) / ((s.v[k].array() / c2).sqrt() + s.eps);
  }
}

}  // namespace parkrl
