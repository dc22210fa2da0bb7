#pragma once

// Unfolded deep NMF: K multiplicative-update layers with the last C layers
// untied and trained by multiplicative backpropagation of split gradients.

#include <cstdint>
#include <utility>
#include <vector>

#include "unfold/numerics.hpp"
#include "unfold/snmf.hpp"

namespace unfold::deepnmf {

using snmf::SourceBases;

/// Matched positive/negative gradient parts; pos - neg is the true gradient.
struct GradPair {
  Matrix pos;
  Matrix neg;
};

struct DeepNmfNetwork {
  int K = 0;           // layer count
  int C = 0;           // trailing discriminatively trained layers, 0 <= C <= K
  int context = 1;     // frames stacked into the tied bases
  double mu = 5.0;
  double beta1 = 1.0;  // inference divergence in every update layer
  double beta2 = 2.0;  // reconstruction divergence in the training loss
  int speech_index = 0;
  std::uint64_t seed = 0;
  EpsilonPolicy eps{};

  SourceBases tied;            // context*F x R, column-normalized
  std::vector<Matrix> untied;  // C matrices, F x R, layers K-C+1 .. K, unnormalized

  int frame_rows() const { return static_cast<int>(tied.W.rows()) / context; }
  int total_rank() const { return tied.total_rank(); }
  bool is_untied(int k) const { return k > K - C; }

  const Matrix& untied_layer(int k) const {
    require(is_untied(k), "deep_nmf: layer " + std::to_string(k) + " is tied");
    return untied[static_cast<std::size_t>(k - (K - C) - 1)];
  }
  Matrix& untied_layer(int k) {
    require(is_untied(k), "deep_nmf: layer " + std::to_string(k) + " is tied");
    return untied[static_cast<std::size_t>(k - (K - C) - 1)];
  }

  /// Bases used for the Wiener reconstruction layer.
  SourceBases reconstruction_bases() const {
    if (C == 0) return tied.last_rows(frame_rows());
    SourceBases out = tied;
    out.W = untied_layer(K);
    return out;
  }
};

/// Forward activations and caches needed for backpropagation.
struct LayerTrace {
  std::vector<Matrix> H;          // H[0..K]
  std::vector<Matrix> lambda_in;  // lambda_in[k] = W^k H^{k-1}, untied layers only
  Matrix Shat;                    // reconstructed speech magnitudes, F x T
};

/// Untied layers start from the last F rows of the trained stacked bases.
inline DeepNmfNetwork build_network(const SourceBases& Wbar, int K, int C, double mu,
                                    int context, std::uint64_t seed = 0,
                                    int speech_index = 0) {
  require(K >= 1, "build_network: K must be >= 1");
  require(C >= 0 && C <= K, "build_network: need 0 <= C <= K");
  require(context >= 1 && Wbar.W.rows() % context == 0,
          "build_network: basis rows not divisible by the context length");
  DeepNmfNetwork net;
  net.K = K;
  net.C = C;
  net.context = context;
  net.mu = mu;
  net.seed = seed;
  net.speech_index = speech_index;
  net.tied = Wbar;
  const Matrix last = Wbar.W.bottomRows(Wbar.W.rows() / context);
  net.untied.assign(static_cast<std::size_t>(C), last);
  return net;
}

/// K update layers from a uniform(0,1] start; tied layers run against the
/// stacked mixture, untied layers against its final-frame rows.
inline LayerTrace forward(const DeepNmfNetwork& net, const NonNegMatrix& M_stacked,
                          const NonNegMatrix& M_last, std::uint64_t seed) {
  require(M_stacked.rows() == net.tied.W.rows(), "forward: stacked mixture row mismatch");
  require(M_last.rows() == net.frame_rows(), "forward: final-frame row mismatch");
  require(M_stacked.cols() == M_last.cols(), "forward: frame count mismatch");

  LayerTrace trace;
  trace.H.resize(static_cast<std::size_t>(net.K) + 1);
  trace.lambda_in.resize(static_cast<std::size_t>(net.K) + 1);
  trace.H[0] = uniform_open01(net.total_rank(), M_stacked.cols(), seed);
  snmf::SnmfConfig cfg{net.beta1, net.mu, 1, seed, net.eps};
  for (int k = 1; k <= net.K; ++k) {
    const auto& prev = trace.H[static_cast<std::size_t>(k - 1)];
    if (net.is_untied(k)) {
      const Matrix& Wk = net.untied_layer(k);
      trace.lambda_in[static_cast<std::size_t>(k)] = Wk * prev;
      trace.H[static_cast<std::size_t>(k)] =
          snmf::h_update_step(Wk, M_last, prev, cfg.beta1, cfg.mu, cfg.eps);
    } else {
      trace.H[static_cast<std::size_t>(k)] =
          snmf::h_update_step(net.tied.W, M_stacked, prev, cfg.beta1, cfg.mu, cfg.eps);
    }
  }
  trace.Shat = snmf::wiener_reconstruct(net.reconstruction_bases(),
                                        trace.H[static_cast<std::size_t>(net.K)], M_last,
                                        net.speech_index, net.eps);
  return trace;
}

inline LayerTrace forward(const DeepNmfNetwork& net, const NonNegMatrix& M_stacked,
                          const NonNegMatrix& M_last) {
  return forward(net, M_stacked, M_last, net.seed);
}

/// Squared-error reconstruction loss of the speech source.
inline double reconstruction_loss(const LayerTrace& trace, const NonNegMatrix& S_target) {
  return beta_divergence(S_target, trace.Shat, 2.0);
}

namespace detail {

struct TopCaches {
  Matrix lambda_e;   // max(W^K H^K, eps)
  Matrix lambda_l;   // speech block product
  Matrix lambda_lb;  // remainder
};

inline TopCaches top_caches(const DeepNmfNetwork& net, const Matrix& HK,
                            const SourceBases& recon) {
  TopCaches c;
  const int l = net.speech_index;
  c.lambda_l = recon.block(l) * HK.middleRows(recon.offsets[l], recon.rank(l));
  const Matrix lambda = recon.W * HK;
  c.lambda_lb = lambda - c.lambda_l;
  c.lambda_e = lambda.cwiseMax(net.eps.eps);
  return c;
}

}  // namespace detail

/// Split gradient of the squared-error Wiener loss with respect to H^K.
inline GradPair top_layer_gradient(const LayerTrace& trace, const NonNegMatrix& S_target,
                                   const DeepNmfNetwork& net, const NonNegMatrix& M_last) {
  const Matrix& HK = trace.H[static_cast<std::size_t>(net.K)];
  const SourceBases recon = net.reconstruction_bases();
  require_same_shape(S_target, trace.Shat, "top_layer_gradient");
  const auto c = detail::top_caches(net, HK, recon);
  const auto& M = M_last.mat().array();
  const auto& S = S_target.mat().array();
  const auto le = c.lambda_e.array();
  const auto ll = c.lambda_l.array();
  const auto lb = c.lambda_lb.array();

  const Matrix own_pos = (2.0 * M.square() * ll * lb / le.cube()).matrix();
  const Matrix own_neg = (2.0 * M * S * lb / le.square()).matrix();
  const Matrix oth_pos = (2.0 * M * S * ll / le.square()).matrix();
  const Matrix oth_neg = (2.0 * M.square() * ll.square() / le.cube()).matrix();

  GradPair g{Matrix::Zero(HK.rows(), HK.cols()), Matrix::Zero(HK.rows(), HK.cols())};
  for (int l = 0; l < recon.num_sources(); ++l) {
    const bool own = l == net.speech_index;
    g.pos.middleRows(recon.offsets[l], recon.rank(l)) =
        recon.block(l).transpose() * (own ? own_pos : oth_pos);
    g.neg.middleRows(recon.offsets[l], recon.rank(l)) =
        recon.block(l).transpose() * (own ? own_neg : oth_neg);
  }
  return g;
}

/// Split gradient pushed through update layer k+1, from H^{k+1} down to H^k.
inline GradPair backprop_h(int k, const GradPair& grad_next, const LayerTrace& trace,
                           const DeepNmfNetwork& net, const NonNegMatrix& M_last) {
  require(net.is_untied(k + 1), "backprop_h: layer above must be untied");
  const Matrix& W = net.untied_layer(k + 1);
  const Matrix& Hin = trace.H[static_cast<std::size_t>(k)];
  const Matrix& lambda = trace.lambda_in[static_cast<std::size_t>(k + 1)];
  const double eps = net.eps.eps;

  const Eigen::ArrayXXd le = lambda.array() + eps;
  const Matrix P = (M_last.mat().array() / le).matrix();
  const Matrix Q = (M_last.mat().array() / le.square()).matrix();
  const Matrix ratio = W.transpose() * P;
  const Vector den = (W.colwise().sum().transpose().array() + net.mu + eps).matrix();

  const auto through = [&](const Matrix& direct, const Matrix& crossed) {
    Matrix out = (direct.array() * ratio.array()).matrix();
    out.array().colwise() /= den.array();
    Matrix scaled = (Hin.array() * crossed.array()).matrix();
    scaled.array().colwise() /= den.array();
    out.noalias() += W.transpose() * (Q.array() * (W * scaled).array()).matrix();
    return out;
  };
  return {through(grad_next.pos, grad_next.neg), through(grad_next.neg, grad_next.pos)};
}

/// Split gradient of the loss with respect to W^k. `grad_out` is the pair over
/// the activations this layer produced; for the top layer the Wiener
/// reconstruction term is included and S_target is required.
inline GradPair grad_w(int k, const GradPair& grad_out, const LayerTrace& trace,
                       const DeepNmfNetwork& net, const NonNegMatrix& M_last,
                       const Matrix* S_target = nullptr) {
  require(net.is_untied(k), "grad_w: tied layers are not trained");
  const Matrix& W = net.untied_layer(k);
  const Matrix& Hin = trace.H[static_cast<std::size_t>(k - 1)];
  const Matrix& lambda = trace.lambda_in[static_cast<std::size_t>(k)];
  const double eps = net.eps.eps;

  const Eigen::ArrayXXd le = lambda.array() + eps;
  const Matrix P = (M_last.mat().array() / le).matrix();
  const Matrix Q = (M_last.mat().array() / le.square()).matrix();
  const Matrix ratio = W.transpose() * P;
  const Vector den = (W.colwise().sum().transpose().array() + net.mu + eps).matrix();

  const auto rowdiv = [&](const Matrix& X) {
    Matrix out = X;
    out.array().colwise() /= den.array();
    return out;
  };
  const Matrix hg_pos = rowdiv((Hin.array() * grad_out.pos.array()).matrix());
  const Matrix hg_neg = rowdiv((Hin.array() * grad_out.neg.array()).matrix());
  const Matrix shared =
      W.array() *
      (Q * rowdiv((Hin.array().square() * (grad_out.pos + grad_out.neg).array()).matrix())
               .transpose())
          .array();
  const auto bias_row = [&](const Matrix& hg) -> Matrix {
    // contribution of the column-sum denominator; constant down each column
    const Vector v =
        ((hg.array() * ratio.array()).matrix().rowwise().sum().array() / den.array())
            .matrix();
    return v.transpose().replicate(W.rows(), 1);
  };
  const auto side = [&](const Matrix& hg_direct, const Matrix& hg_crossed) -> Matrix {
    Matrix out = P * hg_direct.transpose();
    out.noalias() += (Q.array() * (W * hg_crossed).array()).matrix() * Hin.transpose();
    out -= shared;
    out += bias_row(hg_crossed);
    return out.cwiseMax(0.0);
  };
  GradPair g{side(hg_pos, hg_neg), side(hg_neg, hg_pos)};

  if (k == net.K) {
    require(S_target != nullptr, "grad_w: top layer needs the reconstruction target");
    const SourceBases recon = net.reconstruction_bases();
    const Matrix& HK = trace.H[static_cast<std::size_t>(net.K)];
    const auto c = detail::top_caches(net, HK, recon);
    const auto& M = M_last.mat().array();
    const auto& S = S_target->array();
    const auto lee = c.lambda_e.array();
    const auto ll = c.lambda_l.array();
    const auto lb = c.lambda_lb.array();
    const Matrix own_pos = (2.0 * M.square() * ll * lb / lee.cube()).matrix();
    const Matrix own_neg = (2.0 * M * S * lb / lee.square()).matrix();
    const Matrix oth_pos = (2.0 * M * S * ll / lee.square()).matrix();
    const Matrix oth_neg = (2.0 * M.square() * ll.square() / lee.cube()).matrix();
    for (int l = 0; l < recon.num_sources(); ++l) {
      const bool own = l == net.speech_index;
      const auto Hl = HK.middleRows(recon.offsets[l], recon.rank(l));
      g.pos.middleCols(recon.offsets[l], recon.rank(l)) +=
          (own ? own_pos : oth_pos) * Hl.transpose();
      g.neg.middleCols(recon.offsets[l], recon.rank(l)) +=
          (own ? own_neg : oth_neg) * Hl.transpose();
    }
  }
  return g;
}

/// W <- W o (neg + eps) / (pos + eps); equal parts leave W exactly unchanged.
inline Matrix multiplicative_step(const NonNegMatrix& W, const GradPair& g,
                                  EpsilonPolicy eps = {}) {
  require_same_shape(W, g.pos, "multiplicative_step");
  require_same_shape(g.pos, g.neg, "multiplicative_step");
  return (W.mat().array() * (g.neg.array() + eps.eps) / (g.pos.array() + eps.eps))
      .matrix();
}

struct TrainingSample {
  Matrix M_stacked;
  Matrix M_last;
  Matrix S_speech;
};

/// Full-batch multiplicative training of the untied layers. The returned trace
/// holds the loss before each update plus a final evaluation.
inline std::vector<double> train(DeepNmfNetwork& net,
                                 const std::vector<TrainingSample>& dataset, int epochs) {
  require(net.C >= 1, "train: C = 0 leaves nothing to train");
  require(!dataset.empty(), "train: empty dataset");
  std::vector<double> losses;

  const auto epoch_pass = [&](bool update) {
    std::vector<GradPair> acc;
    if (update)
      for (int c = 0; c < net.C; ++c)
        acc.push_back({Matrix::Zero(net.frame_rows(), net.total_rank()),
                       Matrix::Zero(net.frame_rows(), net.total_rank())});
    double loss = 0.0;
    for (std::size_t u = 0; u < dataset.size(); ++u) {
      const auto& sample = dataset[u];
      const auto trace =
          forward(net, sample.M_stacked, sample.M_last, derive_seed(net.seed, u));
      loss += reconstruction_loss(trace, sample.S_speech);
      if (!update) continue;
      GradPair g = top_layer_gradient(trace, sample.S_speech, net, sample.M_last);
      for (int k = net.K; k > net.K - net.C; --k) {
        const Matrix* target = k == net.K ? &sample.S_speech : nullptr;
        const GradPair gw = grad_w(k, g, trace, net, sample.M_last, target);
        auto& slot = acc[static_cast<std::size_t>(k - (net.K - net.C) - 1)];
        slot.pos += gw.pos;
        slot.neg += gw.neg;
        if (k > net.K - net.C + 1) g = backprop_h(k - 1, g, trace, net, sample.M_last);
      }
    }
    if (update)
      for (int k = net.K - net.C + 1; k <= net.K; ++k)
        net.untied_layer(k) = multiplicative_step(
            net.untied_layer(k), acc[static_cast<std::size_t>(k - (net.K - net.C) - 1)],
            net.eps);
    return loss;
  };

  for (int e = 0; e < epochs; ++e) losses.push_back(epoch_pass(true));
  losses.push_back(epoch_pass(false));
  return losses;
}

/// Discriminative and total parameter counts for a (T + C)-layer topology.
inline std::pair<long long, long long> parameter_counts(long long T, long long F,
                                                        long long R, long long C) {
  require(T >= 0 && F >= 0 && R >= 0 && C >= 0, "parameter_counts: negative count");
  return {C * F * R, (T + C) * F * R};
}

}  // namespace unfold::deepnmf
