#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

#include "parkrl/tensornet.hpp"

using namespace parkrl;

namespace {

Matrix random_matrix(long r, long c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(r, c);
  for (long j = 0; j < c; ++j)
    for (long i = 0; i < r; ++i) m(i, j) = u(rng);
  return m;
}

double sig(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Central differences over every entry of every parameter; returns the worst relative error.
double fd_check(const std::vector<Matrix*>& params, const std::vector<const Matrix*>& grads,
                const std::function<double()>& loss) {
  const double h = 1e-5;
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    for (long i = 0; i < params[k]->size(); ++i) {
      double* x = params[k]->data() + i;
      const double orig = *x;
      *x = orig + h;
      const double lp = loss();
      *x = orig - h;
      const double lm = loss();
      *x = orig;
      const double num = (lp - lm) / (2 * h);
      const double an = grads[k]->data()[i];
      const double denom = std::max({std::abs(num), std::abs(an), 1e-6});
      worst = std::max(worst, std::abs(num - an) / denom);
    }
  }
  return worst;
}

// Per-gate scalar recursion for one LSTM layer and one sequence.
std::vector<std::vector<double>> lstm_layer_oracle(const std::vector<std::vector<double>>& xs,
                                                   const LstmLayer& p) {
  const long H = p.Wh.rows();
  const long in = p.Wx.rows();
  std::vector<double> h(H, 0.0), c(H, 0.0);
  std::vector<std::vector<double>> out;
  for (const auto& x : xs) {
    std::vector<double> hn(H), cn(H);
    for (long u = 0; u < H; ++u) {
      double z[4];
      for (int g = 0; g < 4; ++g) {
        const long col = g * H + u;
        double s = p.b(0, col);
        for (long d = 0; d < in; ++d) s += x[d] * p.Wx(d, col);
        for (long v = 0; v < H; ++v) s += h[v] * p.Wh(v, col);
        z[g] = s;
      }
      const double ig = sig(z[0]), fg = sig(z[1]), gg = std::tanh(z[2]), og = sig(z[3]);
      cn[u] = fg * c[u] + ig * gg;
      hn[u] = og * std::tanh(cn[u]);
    }
    h = hn;
    c = cn;
    out.push_back(h);
  }
  return out;
}

Graph line_graph() { return Graph{{{0, 1}, {0, 1, 2}, {1, 2}}}; }

}  // namespace

TEST_CASE("dense forward examples") {
  DenseParams p = DenseParams::zeros(2, 2);
  p.W.setIdentity();
  Matrix x(1, 2);
  x << -1, 2;
  Matrix y = dense_forward(x, p, Activation::relu);
  CHECK(y(0, 0) == 0.0);
  CHECK(y(0, 1) == 2.0);

  DenseParams z = DenseParams::zeros(2, 3);
  std::mt19937_64 rng(1);
  CHECK(dense_forward(random_matrix(4, 2, rng), z, Activation::none).isZero(0.0));
}

TEST_CASE("dense forward matches a triple-loop multiply") {
  std::mt19937_64 rng(2);
  DenseParams p = DenseParams::zeros(2, 32);
  p.init(rng);
  p.b = random_matrix(1, 32, rng);
  Matrix x = random_matrix(5, 2, rng);
  for (Activation act : {Activation::none, Activation::relu}) {
    Matrix y = dense_forward(x, p, act);
    for (long r = 0; r < 5; ++r)
      for (long c = 0; c < 32; ++c) {
        double s = p.b(0, c);
        for (long k = 0; k < 2; ++k) s += x(r, k) * p.W(k, c);
        if (act == Activation::relu) s = std::max(s, 0.0);
        CHECK(std::abs(y(r, c) - s) < 1e-12);
      }
  }
}

TEST_CASE("dense shape mismatch names both shapes") {
  DenseParams p = DenseParams::zeros(2, 4);
  Matrix x = Matrix::Zero(1, 3);
  try {
    dense_forward(x, p, Activation::none);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[1x3]") != std::string::npos);
    CHECK(msg.find("x2]") != std::string::npos);
  }
}

TEST_CASE("lstm zero weights give zero hidden state") {
  LstmParams p = LstmParams::zeros(1, 32);
  std::vector<Matrix> seq(10, Matrix::Zero(1, 1));
  CHECK(lstm_forward(seq, p).isZero(0.0));
}

TEST_CASE("lstm matches a per-gate scalar recursion") {
  std::mt19937_64 rng(3);
  LstmParams p = LstmParams::zeros(1, 32);
  p.init(rng);
  p.l1.b = random_matrix(1, 128, rng, -0.5, 0.5);
  p.l2.b = random_matrix(1, 128, rng, -0.5, 0.5);
  const int B = 3;
  std::vector<Matrix> seq;
  for (int t = 0; t < 10; ++t) seq.push_back(random_matrix(B, 1, rng, -2, 2));
  Matrix h = lstm_forward(seq, p);
  REQUIRE(h.rows() == B);
  REQUIRE(h.cols() == 32);
  for (int b = 0; b < B; ++b) {
    std::vector<std::vector<double>> xs;
    for (const Matrix& s : seq) xs.push_back({s(b, 0)});
    auto h1 = lstm_layer_oracle(xs, p.l1);
    auto h2 = lstm_layer_oracle(h1, p.l2);
    for (long u = 0; u < 32; ++u) CHECK(std::abs(h(b, u) - h2.back()[static_cast<std::size_t>(u)]) < 1e-10);
  }
}

TEST_CASE("lstm constant input converges") {
  std::mt19937_64 rng(4);
  LstmParams p = LstmParams::zeros(1, 8);
  p.init(rng);
  Matrix x = Matrix::Constant(1, 1, 0.7);
  double prev = std::numeric_limits<double>::infinity();
  Matrix last = lstm_forward({x}, p);
  int shrinking = 0;
  for (int T = 2; T <= 40; ++T) {
    Matrix cur = lstm_forward(std::vector<Matrix>(static_cast<std::size_t>(T), x), p);
    const double diff = (cur - last).norm();
    if (diff <= prev + 1e-15) ++shrinking;
    prev = diff;
    last = cur;
  }
  CHECK(prev < 1e-3);
  CHECK(shrinking >= 30);
}

TEST_CASE("lstm empty sequence is a contract violation") {
  LstmParams p = LstmParams::zeros(1, 4);
  CHECK_THROWS_AS(lstm_forward({}, p), ContractViolation);
}

TEST_CASE("lstm without dropout is pure") {
  std::mt19937_64 rng(5);
  LstmParams p = LstmParams::zeros(2, 16);
  p.init(rng);
  std::vector<Matrix> seq;
  for (int t = 0; t < 10; ++t) seq.push_back(random_matrix(4, 2, rng));
  Matrix a = lstm_forward(seq, p);
  Matrix b = lstm_forward(seq, p);
  CHECK((a.array() == b.array()).all());
  CHECK(a.allFinite());

  std::mt19937_64 d1(9), d2(10);
  Matrix t1 = lstm_forward(seq, p, {true, &d1});
  Matrix t2 = lstm_forward(seq, p, {true, &d2});
  CHECK_FALSE((t1.array() == t2.array()).all());
}

TEST_CASE("gat attention examples") {
  std::mt19937_64 rng(6);
  GatLayerParams p = GatLayerParams::zeros(3, 4, 2, Combine::concat);
  p.init(rng);
  Matrix x = random_matrix(2, 3, rng);

  Graph single{{{0}, {1}}};
  auto a = gat_attention(x, single, p, 0);
  CHECK(a[0][0] == doctest::Approx(1.0).epsilon(1e-15));

  // Zero attention vectors give equal scores.
  GatLayerParams q = p;
  q.heads[0].as.setZero();
  q.heads[0].at.setZero();
  Graph pair{{{0, 1}, {0, 1}}};
  auto b = gat_attention(x, pair, q, 0);
  CHECK(b[0][0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(b[0][1] == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("gat attention matches a direct softmax") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    GatLayerParams p = GatLayerParams::zeros(5, 6, 2, Combine::concat);
    p.init(rng);
    Matrix x = random_matrix(4, 5, rng, -3, 3);
    Graph g{{{0, 1, 3}, {1, 0}, {2, 0, 1, 3}, {3}}};
    for (std::size_t m = 0; m < 2; ++m) {
      const GatHead& h = p.heads[m];
      auto a = gat_attention(x, g, p, m);
      for (long i = 0; i < 4; ++i) {
        const auto& nb = g.nbrs[static_cast<std::size_t>(i)];
        std::vector<double> ex;
        double sum = 0.0;
        for (int j : nb) {
          double z = (x.row(i) * h.Ws * h.as)(0, 0) + (x.row(j) * h.Wt * h.at)(0, 0);
          z = z > 0 ? z : 0.2 * z;
          ex.push_back(std::exp(z));
          sum += ex.back();
        }
        double total = 0.0;
        for (std::size_t k = 0; k < nb.size(); ++k) {
          CHECK(std::abs(a[static_cast<std::size_t>(i)][k] - ex[k] / sum) < 1e-12);
          CHECK(a[static_cast<std::size_t>(i)][k] >= 0.0);
          total += a[static_cast<std::size_t>(i)][k];
        }
        CHECK(std::abs(total - 1.0) < 1e-12);
      }
    }
  }
}

TEST_CASE("gat isolated node reduces to relu of the target embedding") {
  std::mt19937_64 rng(8);
  GatLayerParams p = GatLayerParams::zeros(3, 5, 1, Combine::concat);
  p.init(rng);
  Matrix x = random_matrix(1, 3, rng);
  Matrix y = gat_forward(x, Graph{{{0}}}, p);
  Matrix want = (x * p.heads[0].Wt).cwiseMax(0.0);
  CHECK((y - want).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("gat concat and average widths") {
  std::mt19937_64 rng(9);
  GatLayerParams hidden = GatLayerParams::zeros(32, 32, 2, Combine::concat);
  hidden.init(rng);
  GatLayerParams out = GatLayerParams::zeros(64, 32, 2, Combine::average);
  out.init(rng);
  Matrix x = random_matrix(3, 32, rng);
  Matrix h = gat_forward(x, line_graph(), hidden);
  CHECK(h.cols() == 64);
  Matrix o = gat_forward(h, line_graph(), out);
  CHECK(o.cols() == 32);
  CHECK(o.allFinite());
  CHECK_THROWS_AS(gat_forward(random_matrix(3, 31, rng), line_graph(), hidden), ShapeError);
  CHECK_THROWS_AS(gat_forward(random_matrix(2, 32, rng), line_graph(), hidden), ShapeError);
}

TEST_CASE("gat layer matches explicit per-edge summation") {
  std::mt19937_64 rng(10);
  for (Combine mode : {Combine::concat, Combine::average}) {
    GatLayerParams p = GatLayerParams::zeros(4, 3, 2, mode);
    p.init(rng);
    Matrix x = random_matrix(3, 4, rng, -2, 2);
    Graph g = line_graph();
    Matrix y = gat_forward(x, g, p);
    for (long i = 0; i < 3; ++i) {
      std::vector<double> combined(static_cast<std::size_t>(p.out_dim()), 0.0);
      for (std::size_t m = 0; m < 2; ++m) {
        const GatHead& h = p.heads[m];
        const auto& nb = g.nbrs[static_cast<std::size_t>(i)];
        std::vector<double> w;
        double sum = 0.0;
        for (int j : nb) {
          double si = 0.0, tj = 0.0;
          for (long o = 0; o < 3; ++o)
            for (long d = 0; d < 4; ++d) {
              si += x(i, d) * h.Ws(d, o) * h.as(o, 0);
              tj += x(j, d) * h.Wt(d, o) * h.at(o, 0);
            }
          const double z = si + tj;
          w.push_back(std::exp(z > 0 ? z : 0.2 * z));
          sum += w.back();
        }
        for (long o = 0; o < 3; ++o) {
          double acc = 0.0;
          for (std::size_t k = 0; k < nb.size(); ++k) {
            double emb = 0.0;
            for (long d = 0; d < 4; ++d) emb += x(nb[k], d) * h.Wt(d, o);
            acc += w[k] / sum * emb;
          }
          acc = std::max(acc, 0.0);
          if (mode == Combine::concat) combined[m * 3 + static_cast<std::size_t>(o)] = acc;
          else combined[static_cast<std::size_t>(o)] += acc / 2.0;
        }
      }
      for (long c = 0; c < p.out_dim(); ++c)
        CHECK(std::abs(y(i, c) - combined[static_cast<std::size_t>(c)]) < 1e-10);
    }
  }
}

TEST_CASE("mse examples") {
  Matrix a(1, 1), b(1, 1);
  a << 0;
  b << 2;
  CHECK(mse_loss(a, b) == 4.0);
  CHECK(mse_loss(b, b) == 0.0);
  std::mt19937_64 rng(11);
  Matrix p = random_matrix(7, 1, rng), t = random_matrix(7, 1, rng);
  double s = 0.0;
  for (long i = 0; i < 7; ++i) s += (p(i, 0) - t(i, 0)) * (p(i, 0) - t(i, 0));
  CHECK(std::abs(mse_loss(p, t) - s / 7) < 1e-15);
  Matrix g = mse_grad(p, t);
  for (long i = 0; i < 7; ++i) CHECK(std::abs(g(i, 0) - 2 * (p(i, 0) - t(i, 0)) / 7) < 1e-15);
  CHECK_THROWS_AS(mse_loss(Matrix(0, 1), Matrix(0, 1)), ContractViolation);
  CHECK_THROWS_AS(mse_loss(Matrix::Zero(2, 1), Matrix::Zero(3, 1)), ShapeError);
}

TEST_CASE("backward before forward is a usage error") {
  DenseParams d = DenseParams::zeros(2, 2), dg = DenseParams::zeros(2, 2);
  CHECK_THROWS_AS(dense_backward(Matrix::Zero(1, 2), d, DenseCache{}, dg), UsageError);
  LstmParams l = LstmParams::zeros(1, 2), lg = LstmParams::zeros(1, 2);
  CHECK_THROWS_AS(lstm_backward(Matrix::Zero(1, 2), l, LstmCache{}, lg), UsageError);
  GatLayerParams g = GatLayerParams::zeros(2, 2, 1, Combine::concat), gg = g;
  CHECK_THROWS_AS(gat_backward(Matrix::Zero(1, 2), g, GatCache{}, gg), UsageError);
}

TEST_CASE("constant loss gives zero gradients") {
  std::mt19937_64 rng(12);
  DenseParams p = DenseParams::zeros(3, 4);
  p.init(rng);
  DenseParams g = DenseParams::zeros(3, 4);
  DenseCache cache;
  Matrix x = random_matrix(5, 3, rng);
  dense_forward(x, p, Activation::relu, &cache);
  Matrix dx = dense_backward(Matrix::Zero(5, 4), p, cache, g);
  CHECK(g.W.isZero(0.0));
  CHECK(g.b.isZero(0.0));
  CHECK(dx.isZero(0.0));
}

TEST_CASE("dense gradients match finite differences") {
  std::mt19937_64 rng(13);
  DenseParams p = DenseParams::zeros(3, 5);
  p.init(rng);
  p.b = random_matrix(1, 5, rng, -0.3, 0.3);
  Matrix x = random_matrix(4, 3, rng);
  Matrix t = random_matrix(4, 5, rng);
  auto loss = [&] { return mse_loss(dense_forward(x, p, Activation::relu), t); };
  DenseCache cache;
  Matrix y = dense_forward(x, p, Activation::relu, &cache);
  DenseParams g = DenseParams::zeros(3, 5);
  Matrix dx = dense_backward(mse_grad(y, t), p, cache, g);
  CHECK(fd_check({&p.W, &p.b, &x}, {&g.W, &g.b, &dx}, loss) < 1e-5);
}

TEST_CASE("lstm gradients match finite differences") {
  std::mt19937_64 rng(14);
  LstmParams p = LstmParams::zeros(2, 6, 0.0);
  p.init(rng);
  p.l1.b = random_matrix(1, 24, rng, -0.3, 0.3);
  p.l2.b = random_matrix(1, 24, rng, -0.3, 0.3);
  std::vector<Matrix> seq;
  for (int t = 0; t < 5; ++t) seq.push_back(random_matrix(3, 2, rng));
  Matrix target = random_matrix(3, 6, rng);
  auto loss = [&] { return mse_loss(lstm_forward(seq, p), target); };
  LstmCache cache;
  Matrix h = lstm_forward(seq, p, {}, &cache);
  LstmParams g = LstmParams::zeros(2, 6, 0.0);
  lstm_backward(mse_grad(h, target), p, cache, g);
  CHECK(fd_check({&p.l1.Wx, &p.l1.Wh, &p.l1.b, &p.l2.Wx, &p.l2.Wh, &p.l2.b},
                 {&g.l1.Wx, &g.l1.Wh, &g.l1.b, &g.l2.Wx, &g.l2.Wh, &g.l2.b}, loss) < 1e-5);
}

TEST_CASE("lstm gradients with a fixed dropout mask") {
  std::mt19937_64 rng(15);
  LstmParams p = LstmParams::zeros(1, 5, 0.3);
  p.init(rng);
  std::vector<Matrix> seq;
  for (int t = 0; t < 4; ++t) seq.push_back(random_matrix(2, 1, rng));
  Matrix target = random_matrix(2, 5, rng);
  // Same rng seed per evaluation replays the same mask.
  auto run = [&](LstmCache* c) {
    std::mt19937_64 d(77);
    return lstm_forward(seq, p, {true, &d}, c);
  };
  auto loss = [&] { return mse_loss(run(nullptr), target); };
  LstmCache cache;
  Matrix h = run(&cache);
  LstmParams g = LstmParams::zeros(1, 5, 0.3);
  lstm_backward(mse_grad(h, target), p, cache, g);
  CHECK(fd_check({&p.l1.Wx, &p.l1.Wh, &p.l2.Wx, &p.l2.Wh},
                 {&g.l1.Wx, &g.l1.Wh, &g.l2.Wx, &g.l2.Wh}, loss) < 1e-5);
}

TEST_CASE("gat gradients match finite differences") {
  std::mt19937_64 rng(16);
  for (Combine mode : {Combine::concat, Combine::average}) {
    GatLayerParams p = GatLayerParams::zeros(4, 3, 2, mode);
    p.init(rng);
    Matrix x = random_matrix(3, 4, rng, -2, 2);
    Matrix target = random_matrix(3, p.out_dim(), rng);
    Graph g = line_graph();
    auto loss = [&] { return mse_loss(gat_forward(x, g, p), target); };
    GatCache cache;
    Matrix y = gat_forward(x, g, p, &cache);
    GatLayerParams grad = GatLayerParams::zeros(4, 3, 2, mode);
    Matrix dx = gat_backward(mse_grad(y, target), p, cache, grad);
    std::vector<Matrix*> ps{&x};
    std::vector<const Matrix*> gs{&dx};
    for (std::size_t m = 0; m < 2; ++m) {
      for (Matrix* t : {&p.heads[m].Ws, &p.heads[m].Wt, &p.heads[m].as, &p.heads[m].at}) ps.push_back(t);
      for (Matrix* t : {&grad.heads[m].Ws, &grad.heads[m].Wt, &grad.heads[m].as, &grad.heads[m].at})
        gs.push_back(t);
    }
    CHECK(fd_check(ps, gs, loss) < 1e-5);
  }
}

TEST_CASE("attention sums to one over random graphs") {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> size(1, 8);
  std::bernoulli_distribution edge(0.4);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = size(rng);
    Graph g;
    g.nbrs.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      g.nbrs[static_cast<std::size_t>(i)].push_back(i);
      for (int j = 0; j < n; ++j)
        if (j != i && edge(rng)) g.nbrs[static_cast<std::size_t>(i)].push_back(j);
    }
    GatLayerParams p = GatLayerParams::zeros(3, 4, 2, Combine::concat);
    p.init(rng);
    Matrix x = random_matrix(n, 3, rng, -10, 10);
    for (std::size_t m = 0; m < 2; ++m) {
      for (const auto& row : gat_attention(x, g, p, m)) {
        double s = 0.0;
        for (double a : row) {
          CHECK(a >= 0.0);
          s += a;
        }
        CHECK(std::abs(s - 1.0) < 1e-9);
      }
    }
  }
}

TEST_CASE("adam examples") {
  Matrix w = Matrix::Constant(2, 2, 0.5);
  Matrix zero = Matrix::Zero(2, 2);
  AdamState s;
  s.lr = 0.01;
  adam_step({&w}, {&zero}, s);
  CHECK((w.array() == 0.5).all());

  Matrix v = Matrix::Constant(1, 3, 1.0);
  Matrix g = Matrix::Constant(1, 3, 3.7);
  AdamState s1;
  s1.lr = 0.01;
  adam_step({&v}, {&g}, s1);
  for (long i = 0; i < 3; ++i) CHECK(std::abs((1.0 - v(0, i)) - 0.01) < 1e-8);

  Matrix x = Matrix::Constant(1, 1, 1.0);
  AdamState s2;
  s2.lr = 0.1;
  for (int k = 0; k < 100; ++k) {
    Matrix grad = 2.0 * x;
    adam_step({&x}, {&grad}, s2);
  }
  CHECK(std::abs(x(0, 0)) < 0.2);

  Matrix bad = Matrix::Zero(1, 2);
  AdamState s3;
  CHECK_THROWS_AS(adam_step({&x}, {&bad}, s3), ShapeError);
}

TEST_CASE("default initialization gives finite outputs") {
  std::mt19937_64 rng(18);
  DenseParams d = DenseParams::zeros(2, 32);
  d.init(rng);
  CHECK(dense_forward(random_matrix(10, 2, rng, -100, 100), d, Activation::relu).allFinite());
  LstmParams l = LstmParams::zeros(1, 32);
  l.init(rng);
  std::vector<Matrix> seq;
  for (int t = 0; t < 10; ++t) seq.push_back(random_matrix(4, 1, rng, -100, 100));
  CHECK(lstm_forward(seq, l).allFinite());
  GatLayerParams g = GatLayerParams::zeros(32, 32, 2, Combine::concat);
  g.init(rng);
  CHECK(gat_forward(random_matrix(3, 32, rng, -100, 100), line_graph(), g).allFinite());
}
