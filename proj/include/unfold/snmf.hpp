#pragma once

// Sparse NMF baseline: multiplicative activation inference, basis training and
// Wiener-mask reconstruction.

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "unfold/numerics.hpp"

namespace unfold::snmf {

struct SnmfConfig {
  double beta1 = 1.0;  // divergence used for inference updates
  double mu = 5.0;     // L1 sparsity weight on activations
  int iters = 25;
  std::uint64_t seed = 0;
  EpsilonPolicy eps{};
};

/// Per-source basis matrices stacked side by side; columns of source l live in
/// [offset(l), offset(l+1)).
struct SourceBases {
  Matrix W;  // F' x sum_l R_l
  std::vector<int> offsets{0};
  std::vector<std::string> names;

  int num_sources() const { return static_cast<int>(offsets.size()) - 1; }
  int rank(int l) const { return offsets[l + 1] - offsets[l]; }
  int total_rank() const { return offsets.back(); }

  void append(const std::string& name, const Matrix& Wl) {
    if (W.size() == 0) W = Wl;
    else {
      require(W.rows() == Wl.rows(), "SourceBases: row mismatch between sources");
      Matrix joined(W.rows(), W.cols() + Wl.cols());
      joined << W, Wl;
      W = std::move(joined);
    }
    offsets.push_back(offsets.back() + static_cast<int>(Wl.cols()));
    names.push_back(name);
  }

  auto block(int l) const { return W.middleCols(offsets[l], rank(l)); }

  /// Same sources restricted to the last `f` rows of each basis.
  SourceBases last_rows(Eigen::Index f) const {
    SourceBases out = *this;
    out.W = W.bottomRows(f);
    return out;
  }
};

/// Scale each column to unit L2 norm. Throws on an all-zero column.
inline Matrix normalize_columns(const NonNegMatrix& W) {
  Matrix out = W.mat();
  for (Eigen::Index c = 0; c < out.cols(); ++c) {
    const double n = out.col(c).norm();
    require(n > 0.0, "normalize_columns: zero column " + std::to_string(c));
    out.col(c) /= n;
  }
  return out;
}

/// One multiplicative activation update for min D_beta(M | W H) + mu |H|_1.
/// The result is floored at eps so later updates cannot get stuck at zero.
inline Matrix h_update_step(const NonNegMatrix& W, const NonNegMatrix& M,
                            const NonNegMatrix& H, double beta1, double mu,
                            EpsilonPolicy eps = {}) {
  require(W.cols() == H.rows() && W.rows() == M.rows() && H.cols() == M.cols(),
          "h_update_step: shape mismatch");
  const Matrix& Wm = W.mat();
  const Matrix lambda = Wm * H.mat();
  Matrix num, den;
  if (beta1 == 1.0) {
    num = Wm.transpose() * (M.mat().array() / (lambda.array() + eps.eps)).matrix();
    den = (Wm.colwise().sum().transpose().array() + mu).matrix().replicate(1, H.cols());
  } else if (beta1 == 2.0) {
    num = Wm.transpose() * M.mat();
    den = Wm.transpose() * lambda;
    den.array() += mu;
  } else {
    throw std::invalid_argument("h_update_step: only beta in {1,2} is supported");
  }
  Matrix out = (H.mat().array() * num.array() / (den.array() + eps.eps)).matrix();
  return out.cwiseMax(eps.eps);
}

/// K multiplicative updates from a uniform(0,1] start drawn from config.seed.
inline Matrix infer_activations(const NonNegMatrix& W, const NonNegMatrix& M,
                                const SnmfConfig& config) {
  require(config.iters >= 1, "infer_activations: iters must be >= 1");
  Matrix H = uniform_open01(W.cols(), M.cols(), config.seed);
  for (int k = 0; k < config.iters; ++k)
    H = h_update_step(W, M, H, config.beta1, config.mu, config.eps);
  return H;
}

/// Sparse-NMF training objective D_beta(S | W H) + mu |H|_1.
inline double snmf_objective(const NonNegMatrix& S, const Matrix& W, const Matrix& H,
                             double beta, double mu) {
  return beta_divergence(S, Matrix(W * H), beta) + mu * H.sum();
}

/// Train column-normalized bases for one source by alternating multiplicative
/// updates; initialized with R exemplar columns of S sampled without replacement.
inline Matrix train_bases(const NonNegMatrix& S, int R, const SnmfConfig& config,
                          std::vector<double>* objective_trace = nullptr) {
  require(R >= 1, "train_bases: R must be >= 1");
  require(R <= S.cols(), "train_bases: R exceeds the number of training columns");
  const double eps = config.eps.eps;

  std::vector<Eigen::Index> cols(static_cast<std::size_t>(S.cols()));
  std::iota(cols.begin(), cols.end(), 0);
  std::mt19937_64 gen(config.seed);
  std::shuffle(cols.begin(), cols.end(), gen);

  Matrix W(S.rows(), R);
  for (int r = 0; r < R; ++r) W.col(r) = S.mat().col(cols[static_cast<std::size_t>(r)]);
  W = normalize_columns(Matrix(W.cwiseMax(eps)));
  Matrix H = uniform_open01(R, S.cols(), derive_seed(config.seed, 1));

  if (objective_trace)
    objective_trace->push_back(snmf_objective(S, W, H, config.beta1, config.mu));

  for (int it = 0; it < config.iters; ++it) {
    H = h_update_step(W, S, H, config.beta1, config.mu, config.eps);

    // multiplicative W update for the column-normalized model; the tangent
    // terms account for the normalization so the renormalization below does
    // not change the reconstruction
    const Matrix lambda = W * H;
    Matrix A, B;
    if (config.beta1 == 1.0) {
      A = (S.mat().array() / (lambda.array() + eps)).matrix() * H.transpose();
      B = H.rowwise().sum().transpose().replicate(W.rows(), 1);
    } else if (config.beta1 == 2.0) {
      A = S.mat() * H.transpose();
      B = lambda * H.transpose();
    } else {
      throw std::invalid_argument("train_bases: only beta in {1,2} is supported");
    }
    const Eigen::RowVectorXd dotA = (A.array() * W.array()).colwise().sum();
    const Eigen::RowVectorXd dotB = (B.array() * W.array()).colwise().sum();
    const Matrix num = A + (W.array().rowwise() * dotB.array()).matrix();
    const Matrix den = B + (W.array().rowwise() * dotA.array()).matrix();
    W = (W.array() * num.array() / (den.array() + eps)).cwiseMax(eps).matrix();
    W = normalize_columns(W);

    if (objective_trace)
      objective_trace->push_back(snmf_objective(S, W, H, config.beta1, config.mu));
  }
  return W;
}

/// Wiener-style reconstruction of source l: (W^l H^l / sum_l' W^l' H^l') o M.
inline Matrix wiener_reconstruct(const SourceBases& bases, const NonNegMatrix& H_all,
                                 const NonNegMatrix& M, int l, EpsilonPolicy eps = {}) {
  require(l >= 0 && l < bases.num_sources(), "wiener_reconstruct: bad source index");
  require(bases.total_rank() == H_all.rows(), "wiener_reconstruct: H row mismatch");
  require(bases.W.rows() == M.rows() && H_all.cols() == M.cols(),
          "wiener_reconstruct: shape mismatch");
  const Matrix& H = H_all.mat();
  const Matrix lambda_l =
      bases.block(l) * H.middleRows(bases.offsets[l], bases.rank(l));
  const Matrix lambda = bases.W * H;
  return (lambda_l.array() / lambda.cwiseMax(eps.eps).array() * M.mat().array()).matrix();
}

/// Baseline separation path: infer activations against the stacked mixture,
/// then mask the final-frame mixture with the last rows of the bases.
inline Matrix separate_last_frame(const SourceBases& bases, const NonNegMatrix& M_stacked,
                                  const NonNegMatrix& M_last, int l,
                                  const SnmfConfig& config) {
  const Matrix H = infer_activations(bases.W, M_stacked, config);
  return wiener_reconstruct(bases.last_rows(M_last.rows()), H, M_last, l, config.eps);
}

}  // namespace unfold::snmf
