/// @file tensornet.hpp
/// @brief Small differentiable layer set: dense, two-layer LSTM, multi-head graph attention,
///        MSE loss and Adam. Row convention: a batch is a matrix with one sample per row.

#pragma once

#include <Eigen/Dense>

#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "parkrl/errors.hpp"

namespace parkrl {

using Matrix = Eigen::MatrixXd;

class ShapeError : public std::invalid_argument {
public:
  ShapeError(const std::string& op, const Matrix& a, const Matrix& b);
  ShapeError(const std::string& op, long ar, long ac, long br, long bc);
};

/// An operation was called out of order (e.g. backward without a recorded forward).
class UsageError : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

std::string shape_str(long rows, long cols);

/// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))
void init_uniform(Matrix& m, long fan_in, std::mt19937_64& rng);

// ---------------------------------------------------------------- dense

enum class Activation { relu, none };

struct DenseParams {
  Matrix W;  ///< [in, out]
  Matrix b;  ///< [1, out]

  static DenseParams zeros(long in, long out);
  void init(std::mt19937_64& rng);
};

struct DenseCache {
  Matrix x;
  Matrix y;
  Activation act = Activation::none;
  bool valid = false;
};

Matrix dense_forward(const Matrix& x, const DenseParams& p, Activation act,
                     DenseCache* cache = nullptr);
/// Accumulates parameter gradients into `grad`; returns d/dx.
Matrix dense_backward(const Matrix& dy, const DenseParams& p, const DenseCache& cache,
                      DenseParams& grad);

// ---------------------------------------------------------------- lstm

/// Gate blocks are laid out as [input | forget | cell | output] along the columns.
struct LstmLayer {
  Matrix Wx;  ///< [in, 4H]
  Matrix Wh;  ///< [H, 4H]
  Matrix b;   ///< [1, 4H]
};

struct LstmParams {
  LstmLayer l1;
  LstmLayer l2;
  double dropout = 0.2;

  long hidden() const { return l1.Wh.rows(); }
  long input() const { return l1.Wx.rows(); }
  static LstmParams zeros(long in, long hidden, double dropout = 0.2);
  void init(std::mt19937_64& rng);
};

/// `train` turns on inter-layer dropout; the rng is only used in that case.
struct LstmMode {
  bool train = false;
  std::mt19937_64* rng = nullptr;
};

struct LstmLayerCache {
  std::vector<Matrix> x, h_prev, c_prev, i, f, g, o, c, tc;
};

struct LstmCache {
  LstmLayerCache l1, l2;
  std::vector<Matrix> mask;  // dropout masks on layer-1 outputs (already scaled)
  bool valid = false;
};

/// `seq[t]` holds step t for a batch of sequences [B, in]. Returns layer-2 final hidden [B, H].
Matrix lstm_forward(const std::vector<Matrix>& seq, const LstmParams& p, LstmMode mode = {},
                    LstmCache* cache = nullptr);
/// Backpropagates d(final hidden) through time; accumulates into `grad`.
void lstm_backward(const Matrix& dh, const LstmParams& p, const LstmCache& cache,
                   LstmParams& grad);

// ---------------------------------------------------------------- graph attention

/// Adjacency lists; every node lists itself.
struct Graph {
  std::vector<std::vector<int>> nbrs;
  long size() const { return static_cast<long>(nbrs.size()); }
};

struct GatHead {
  Matrix Ws;  ///< [in, out] source embedding
  Matrix Wt;  ///< [in, out] target embedding
  Matrix as;  ///< [out, 1]
  Matrix at;  ///< [out, 1]
};

enum class Combine { concat, average };

struct GatLayerParams {
  std::vector<GatHead> heads;
  Combine combine = Combine::concat;
  double leaky_slope = 0.2;

  long in_dim() const { return heads.front().Ws.rows(); }
  long head_dim() const { return heads.front().Ws.cols(); }
  long out_dim() const {
    return combine == Combine::concat ? head_dim() * static_cast<long>(heads.size()) : head_dim();
  }
  static GatLayerParams zeros(long in, long out, int n_heads, Combine combine);
  void init(std::mt19937_64& rng);
};

struct GatHeadCache {
  Matrix S, T;                             // X Ws, X Wt
  Matrix ss, tt;                           // S as, T at
  std::vector<std::vector<double>> alpha;  // per node, aligned with Graph::nbrs
  std::vector<std::vector<double>> e;      // pre-activation scores
  Matrix h;                                // ReLU output of the head
};

struct GatCache {
  Matrix x;
  Graph graph;
  std::vector<GatHeadCache> heads;
  bool valid = false;
};

/// Softmax-normalised coefficients of one head, aligned with `graph.nbrs`.
std::vector<std::vector<double>> gat_attention(const Matrix& x, const Graph& graph,
                                               const GatLayerParams& p, std::size_t head);
Matrix gat_forward(const Matrix& x, const Graph& graph, const GatLayerParams& p,
                   GatCache* cache = nullptr);
/// Accumulates parameter gradients; returns d/dx.
Matrix gat_backward(const Matrix& dy, const GatLayerParams& p, const GatCache& cache,
                    GatLayerParams& grad);

// ---------------------------------------------------------------- loss and optimiser

double mse_loss(const Matrix& pred, const Matrix& target);
Matrix mse_grad(const Matrix& pred, const Matrix& target);

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<Matrix> m;
  std::vector<Matrix> v;
};

/// One bias-corrected Adam update over matched parameter/gradient lists.
void adam_step(const std::vector<Matrix*>& params, const std::vector<const Matrix*>& grads,
               AdamState& state);

}  // namespace parkrl
