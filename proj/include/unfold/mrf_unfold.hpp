#pragma once

// Unfolded, untied MRF inference networks: binary MRF <-> sigmoid-network
// conversions, generalized binary and log-domain activations, and gradient
// training of unfolded message-passing layers.

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "unfold/autodiff.hpp"
#include "unfold/mrf.hpp"
#include "unfold/numerics.hpp"

namespace unfold::mrfu {

/// Weights of a sigmoid network p(h|v) ~ exp(h'Ah/2 + h'b + h'Cv).
struct SigmoidNetParams {
  Matrix A;  // N_h x N_h, symmetric, zero diagonal when MRF-derived
  Vector b;  // N_h
  Matrix C;  // N_h x N_v
};

/// Edge structure shared by a sigmoid net and its binary-MRF counterpart.
struct BinaryGraph {
  int n_hidden = 0;
  int n_visible = 0;
  std::vector<std::pair<int, int>> edges_hh;  // i < j
  std::vector<std::pair<int, int>> edges_hv;

  std::vector<int> hidden_degrees() const {
    std::vector<int> deg(static_cast<std::size_t>(n_hidden), 0);
    for (auto [i, j] : edges_hh) {
      deg[static_cast<std::size_t>(i)]++;
      deg[static_cast<std::size_t>(j)]++;
    }
    return deg;
  }
};

inline BinaryGraph graph_of(const mrf::PairwiseMrf& g) {
  BinaryGraph out;
  out.n_hidden = g.num_hidden();
  out.n_visible = g.num_visible();
  for (const auto& e : g.edges_hh) out.edges_hh.push_back({e.i, e.j});
  for (const auto& e : g.edges_hv) out.edges_hv.push_back({e.i, e.l});
  return out;
}

/// Collapse binary potential tables into sigmoid-network weights.
inline SigmoidNetParams mrf_to_sigmoid(const mrf::PairwiseMrf& g) {
  g.validate();
  for (int s : g.hidden_states) require(s == 2, "mrf_to_sigmoid: non-binary hidden node");
  for (int s : g.visible_states)
    require(s == 2, "mrf_to_sigmoid: non-binary visible node");
  SigmoidNetParams p;
  p.A = Matrix::Zero(g.num_hidden(), g.num_hidden());
  p.b = Vector::Zero(g.num_hidden());
  p.C = Matrix::Zero(g.num_hidden(), g.num_visible());
  for (const auto& e : g.edges_hh) {
    const double a = e.psi(1, 1) - e.psi(0, 1) - e.psi(1, 0) + e.psi(0, 0);
    p.A(e.i, e.j) = a;
    p.A(e.j, e.i) = a;
    p.b[e.i] += e.psi(1, 0) - e.psi(0, 0);
    p.b[e.j] += e.psi(0, 1) - e.psi(0, 0);
  }
  for (const auto& e : g.edges_hv) {
    p.C(e.i, e.l) = e.psi(1, 1) - e.psi(0, 1) - e.psi(1, 0) + e.psi(0, 0);
    p.b[e.i] += e.psi(1, 0) - e.psi(0, 0);
  }
  return p;
}

/// Spread sigmoid-network weights back over binary potential tables. Biases
/// ride on the hidden-hidden edges, split across each node's degree.
inline mrf::PairwiseMrf sigmoid_to_mrf(const SigmoidNetParams& p,
                                       const BinaryGraph& graph) {
  require(p.A.rows() == graph.n_hidden && p.A.cols() == graph.n_hidden,
          "sigmoid_to_mrf: A shape mismatch");
  require(p.b.size() == graph.n_hidden, "sigmoid_to_mrf: b size mismatch");
  require(p.C.rows() == graph.n_hidden && p.C.cols() == graph.n_visible,
          "sigmoid_to_mrf: C shape mismatch");
  for (int i = 0; i < graph.n_hidden; ++i)
    require(p.A(i, i) == 0.0, "sigmoid_to_mrf: nonzero self-weight");

  const auto deg = graph.hidden_degrees();
  for (int i = 0; i < graph.n_hidden; ++i)
    require(deg[static_cast<std::size_t>(i)] > 0 || p.b[i] == 0.0,
            "sigmoid_to_mrf: isolated node with nonzero bias");

  mrf::PairwiseMrf g;
  g.hidden_states.assign(static_cast<std::size_t>(graph.n_hidden), 2);
  g.visible_states.assign(static_cast<std::size_t>(graph.n_visible), 2);
  for (auto [i, j] : graph.edges_hh) {
    require(i < j, "sigmoid_to_mrf: edges must be stored with i < j");
    Matrix psi(2, 2);
    const double bi = p.b[i] / deg[static_cast<std::size_t>(i)];
    const double bj = p.b[j] / deg[static_cast<std::size_t>(j)];
    psi << 0.0, bj, bi, p.A(i, j) + bi + bj;
    g.edges_hh.push_back({i, j, psi});
  }
  for (auto [i, l] : graph.edges_hv) {
    Matrix psi = Matrix::Zero(2, 2);
    psi(1, 1) = p.C(i, l);
    g.edges_hv.push_back({i, l, psi});
  }
  return g;
}

/// K synchronous logistic layers mu^k = logistic(A^k mu^{k-1} + b^k + C^k v);
/// returns the whole trace mu^0 .. mu^K.
inline std::vector<Vector> unfolded_mf_forward(const std::vector<SigmoidNetParams>& layers,
                                               const Vector& v, Vector mu0 = Vector()) {
  require(!layers.empty(), "unfolded_mf_forward: no layers");
  const Eigen::Index n = layers.front().b.size();
  if (mu0.size() == 0) mu0 = Vector::Constant(n, 0.5);
  require(mu0.size() == n, "unfolded_mf_forward: mu0 size mismatch");
  std::vector<Vector> trace{mu0};
  for (const auto& layer : layers) {
    const Vector arg = layer.A * trace.back() + layer.b + layer.C * v;
    Vector mu(n);
    for (Eigen::Index i = 0; i < n; ++i) mu[i] = logistic(arg[i]);
    trace.push_back(std::move(mu));
  }
  return trace;
}

/// Generalized binary activation: logistic of per-edge log-ratios of
/// power-means with exponent lambda. Backward messages `msg_back` hold
/// mu_{i->j} per directed edge as an N_h x N_h matrix; empty means uniform.
/// At lambda below the switch threshold this is exactly logistic(A mu + b + Cv).
inline Vector binary_generalized_activation(const SigmoidNetParams& p,
                                            const BinaryGraph& graph, double lambda,
                                            const Vector& mu_prev, const Matrix& msg_back,
                                            const Vector& v) {
  require(lambda >= 0.0 && lambda <= 1.0,
          "binary_generalized_activation: lambda outside [0,1]");
  require(mu_prev.size() == graph.n_hidden,
          "binary_generalized_activation: mu size mismatch");
  const Eigen::Index n = graph.n_hidden;
  Vector out(n);
  if (lambda < mrf::kMfLambdaTol) {
    const Vector arg = p.A * mu_prev + p.b + p.C * v;
    for (Eigen::Index i = 0; i < n; ++i) out[i] = logistic(arg[i]);
    return out;
  }

  const auto deg = graph.hidden_degrees();
  const auto back = [&](int i, int j) {
    return msg_back.size() == 0 ? 0.5 : msg_back(i, j);
  };
  Vector arg = p.C * v;
  for (Eigen::Index i = 0; i < n; ++i)
    if (deg[static_cast<std::size_t>(i)] == 0) arg[i] += p.b[i];

  Vector w(2), zn(2), zd(2);
  for (auto [i, j] : graph.edges_hh) {
    for (int side = 0; side < 2; ++side) {
      const int a = side == 0 ? i : j;  // receiving node
      const int c = side == 0 ? j : i;  // sending node
      const double ba = p.b[a] / deg[static_cast<std::size_t>(a)];
      const double bc = p.b[c] / deg[static_cast<std::size_t>(c)];
      const double mb = back(a, c);
      require(mb > 0.0 && mb < 1.0,
              "binary_generalized_activation: backward message outside (0,1)");
      w << mu_prev[c], 1.0 - mu_prev[c];
      zn << p.A(a, c) + ba + bc - std::log(mb), ba - std::log(1.0 - mb);
      zd << bc - std::log(mb), -std::log(1.0 - mb);
      arg[a] += log_power_mean(w, zn, lambda) - log_power_mean(w, zd, lambda);
    }
  }
  for (Eigen::Index i = 0; i < n; ++i) out[i] = logistic(arg[i]);
  return out;
}

/// Log-domain layer u^k(h_i) = sum_j (1/kappa) log sum_hj (1/N_j)
/// exp(kappa (u^{k-1}(h_j) + psi(h_i,h_j))) + evidence; kappa = inf is the max
/// form. Outputs are log-beliefs, meaningful up to a per-node constant.
inline std::vector<Vector> log_domain_activation(const std::vector<Vector>& u_prev,
                                                 const mrf::PairwiseMrf& layer,
                                                 double kappa,
                                                 const std::vector<int>& v) {
  require(kappa >= 1.0, "log_domain_activation: kappa must be >= 1");
  require(u_prev.size() == static_cast<std::size_t>(layer.num_hidden()),
          "log_domain_activation: state size mismatch");
  const auto ev = mrf::evidence_scores(layer, v);
  std::vector<Vector> u(u_prev.size());
  for (int i = 0; i < layer.num_hidden(); ++i) {
    u[static_cast<std::size_t>(i)] = Vector::Zero(layer.states(i));
    for (int hi = 0; hi < layer.states(i); ++hi)
      u[static_cast<std::size_t>(i)][hi] =
          ev[static_cast<std::size_t>(i)][static_cast<std::size_t>(hi)];
  }
  for (const auto& e : layer.edges_hh) {
    for (int side = 0; side < 2; ++side) {
      const int a = side == 0 ? e.i : e.j;  // receiving node
      const int c = side == 0 ? e.j : e.i;  // sending node
      const int n_c = layer.states(c);
      const Vector wu = Vector::Constant(n_c, 1.0 / n_c);
      for (int hi = 0; hi < layer.states(a); ++hi) {
        Vector z(n_c);
        for (int hj = 0; hj < n_c; ++hj)
          z[hj] = u_prev[static_cast<std::size_t>(c)][hj] +
                  (side == 0 ? e.psi(hi, hj) : e.psi(hj, hi));
        u[static_cast<std::size_t>(a)][hi] += log_power_mean(wu, z, kappa);
      }
    }
  }
  return u;
}

// ---------------------------------------------------------------------------
// unfolded message-passing networks
// ---------------------------------------------------------------------------

struct UnfoldedLayer {
  std::vector<Matrix> psi_hh;  // aligned with base.edges_hh
  std::vector<Matrix> psi_hv;  // aligned with base.edges_hv
  double lambda = 0.0;         // 0 selects the mean-field limit branch
  double kappa = 1.0;
  double rho = 1.0;
  Vector alpha_z;  // gate reparameterization per directed edge; empty -> alpha = 1
};

struct UnfoldedMrfNet {
  mrf::PairwiseMrf base;  // topology, state counts and initial tables
  std::vector<UnfoldedLayer> layers;
  std::vector<int> output_nodes;  // estimator: final beliefs of these nodes

  int K() const { return static_cast<int>(layers.size()); }

  /// Unfold `base` K times with every layer carrying its own table copies.
  static UnfoldedMrfNet tied_copies(const mrf::PairwiseMrf& base, int K,
                                    mrf::MessageStyle style = {0.0, 1.0},
                                    double rho = 1.0) {
    require(K >= 1, "UnfoldedMrfNet: K must be >= 1");
    base.validate();
    UnfoldedMrfNet net;
    net.base = base;
    UnfoldedLayer layer;
    for (const auto& e : base.edges_hh) layer.psi_hh.push_back(e.psi);
    for (const auto& e : base.edges_hv) layer.psi_hv.push_back(e.psi);
    layer.lambda = style.lambda;
    layer.kappa = style.kappa;
    layer.rho = rho;
    net.layers.assign(static_cast<std::size_t>(K), layer);
    for (int i = 0; i < base.num_hidden(); ++i) net.output_nodes.push_back(i);
    return net;
  }
};

namespace detail {

template <class T>
struct LayerTablesT {
  std::vector<std::vector<T>> psi_hh;  // row-major per edge
  std::vector<std::vector<T>> psi_hv;
  T lambda;
  double kappa = 1.0;
  double rho = 1.0;
  std::vector<T> alpha;  // resolved gate values per directed edge; empty -> 1
};

/// Per-layer beliefs of the unfolded network; trace[k] holds the beliefs after
/// layer k+1.
template <class T>
std::vector<std::vector<std::vector<T>>> unfolded_forward_t(
    const mrf::PairwiseMrf& base, const std::vector<LayerTablesT<T>>& layers,
    const std::vector<int>& v) {
  const auto edges = mrf::directed_edges(base);
  const auto rev = mrf::reverse_indices(edges);
  require(v.size() == base.visible_states.size(),
          "unfolded_forward: assignment size mismatch");

  auto messages = mrf::detail::uniform_messages<T>(edges, base.hidden_states);
  auto beliefs = mrf::detail::uniform_beliefs<T>(base.hidden_states);
  std::vector<std::vector<std::vector<T>>> trace;

  for (const auto& layer : layers) {
    const auto psi = [&](int e, int hi, int hj) {
      const auto& de = edges[static_cast<std::size_t>(e)];
      const auto& tab = layer.psi_hh[static_cast<std::size_t>(de.hh_index)];
      const auto& edge = base.edges_hh[static_cast<std::size_t>(de.hh_index)];
      const int cols = base.states(edge.j);
      return de.flipped ? tab[static_cast<std::size_t>(hj * cols + hi)]
                        : tab[static_cast<std::size_t>(hi * cols + hj)];
    };
    const auto ev = [&](int i, int hi) {
      T s(0.0);
      for (std::size_t e = 0; e < base.edges_hv.size(); ++e) {
        const auto& he = base.edges_hv[e];
        if (he.i != i) continue;
        const int cols = base.visible_states[static_cast<std::size_t>(he.l)];
        s = s + layer.psi_hv[e][static_cast<std::size_t>(
                hi * cols + v[static_cast<std::size_t>(he.l)])];
      }
      return s;
    };
    const auto alpha = [&](int e) -> T {
      if (layer.alpha.empty()) return T(1.0);
      return layer.alpha[static_cast<std::size_t>(e)];
    };
    mrf::detail::inference_round_t<T>(
        edges, rev, base.hidden_states, psi, ev, alpha,
        [&](int) { return layer.lambda; }, [&](int) { return layer.kappa; }, layer.rho,
        messages, beliefs);
    trace.push_back(beliefs);
  }
  return trace;
}

inline LayerTablesT<double> to_tables(const UnfoldedLayer& layer) {
  LayerTablesT<double> out;
  for (const auto& t : layer.psi_hh) {
    std::vector<double> flat;
    for (Eigen::Index r = 0; r < t.rows(); ++r)
      for (Eigen::Index c = 0; c < t.cols(); ++c) flat.push_back(t(r, c));
    out.psi_hh.push_back(std::move(flat));
  }
  for (const auto& t : layer.psi_hv) {
    std::vector<double> flat;
    for (Eigen::Index r = 0; r < t.rows(); ++r)
      for (Eigen::Index c = 0; c < t.cols(); ++c) flat.push_back(t(r, c));
    out.psi_hv.push_back(std::move(flat));
  }
  out.lambda = layer.lambda;
  out.kappa = layer.kappa;
  out.rho = layer.rho;
  for (Eigen::Index e = 0; e < layer.alpha_z.size(); ++e)
    out.alpha.push_back(logistic(layer.alpha_z[e]));
  return out;
}

}  // namespace detail

/// Per-layer beliefs for an observed assignment.
inline std::vector<std::vector<std::vector<double>>> unfolded_forward(
    const UnfoldedMrfNet& net, const std::vector<int>& v) {
  std::vector<detail::LayerTablesT<double>> layers;
  for (const auto& l : net.layers) layers.push_back(detail::to_tables(l));
  return detail::unfolded_forward_t<double>(net.base, layers, v);
}

enum class LossKind { kSquaredError, kCrossEntropy };

struct UnfoldedSample {
  std::vector<int> v;
  // target belief distribution per output node, aligned with net.output_nodes
  std::vector<std::vector<double>> targets;
};

struct TrainOptions {
  bool train_psi = true;
  bool train_alpha = false;
  bool train_lambda = false;
};

namespace detail {

template <class T>
T sample_loss_t(const std::vector<std::vector<T>>& final_beliefs,
                const std::vector<int>& output_nodes, const UnfoldedSample& sample,
                LossKind loss) {
  using std::log;
  T acc(0.0);
  for (std::size_t o = 0; o < output_nodes.size(); ++o) {
    const auto& q = final_beliefs[static_cast<std::size_t>(output_nodes[o])];
    const auto& y = sample.targets[o];
    require(y.size() == q.size(), "train_unfolded: target size mismatch");
    for (std::size_t s = 0; s < q.size(); ++s) {
      if (loss == LossKind::kSquaredError) {
        T d = q[s] - y[s];
        acc = acc + d * d;
      } else if (y[s] > 0.0) {
        acc = acc - y[s] * log(q[s]);
      }
    }
  }
  return acc;
}

}  // namespace detail

inline double unfolded_loss(const UnfoldedMrfNet& net,
                            const std::vector<UnfoldedSample>& data, LossKind loss) {
  double acc = 0.0;
  for (const auto& sample : data) {
    const auto trace = unfolded_forward(net, sample.v);
    acc += detail::sample_loss_t(trace.back(), net.output_nodes, sample, loss);
  }
  return acc;
}

/// Full-batch gradient descent on the per-layer tables (and optionally the
/// gates and lambda exponents) by reverse-mode differentiation through the
/// unfolded layers. Returns the loss before each step plus a final evaluation.
inline std::vector<double> train_unfolded(UnfoldedMrfNet& net,
                                          const std::vector<UnfoldedSample>& data,
                                          LossKind loss, int epochs, double step,
                                          TrainOptions opt = {}) {
  require(!data.empty(), "train_unfolded: empty dataset");
  for (const auto& s : data)
    require(s.targets.size() == net.output_nodes.size(),
            "train_unfolded: target count mismatch");
  const int n_directed = static_cast<int>(mrf::directed_edges(net.base).size());

  std::vector<double> losses;
  for (int e = 0; e < epochs; ++e) {
    ad::Tape tape;
    std::vector<detail::LayerTablesT<ad::Rev>> layers;
    std::vector<std::pair<double*, ad::Rev>> bound;  // storage slot, leaf
    // lambda slots live in z-space: (lambda storage, current z, z leaf)
    std::vector<std::tuple<double*, double, ad::Rev>> lambda_bound;

    for (auto& layer : net.layers) {
      detail::LayerTablesT<ad::Rev> lt;
      for (auto& t : layer.psi_hh) {
        std::vector<ad::Rev> flat;
        for (Eigen::Index r = 0; r < t.rows(); ++r)
          for (Eigen::Index c = 0; c < t.cols(); ++c) {
            ad::Rev leaf = ad::Rev::leaf(tape, t(r, c));
            if (opt.train_psi) bound.push_back({&t(r, c), leaf});
            flat.push_back(leaf);
          }
        lt.psi_hh.push_back(std::move(flat));
      }
      for (auto& t : layer.psi_hv) {
        std::vector<ad::Rev> flat;
        for (Eigen::Index r = 0; r < t.rows(); ++r)
          for (Eigen::Index c = 0; c < t.cols(); ++c) {
            ad::Rev leaf = ad::Rev::leaf(tape, t(r, c));
            if (opt.train_psi) bound.push_back({&t(r, c), leaf});
            flat.push_back(leaf);
          }
        lt.psi_hv.push_back(std::move(flat));
      }
      if (opt.train_lambda) {
        // keep lambda in [0,1] through the logistic reparameterization
        const double lam = std::clamp(layer.lambda, 1e-9, 1.0 - 1e-9);
        const double zl = std::log(lam / (1.0 - lam));
        ad::Rev leaf = ad::Rev::leaf(tape, zl);
        lambda_bound.push_back({&layer.lambda, zl, leaf});
        lt.lambda = ad::logistic(leaf);
      } else {
        lt.lambda = ad::Rev(layer.lambda);
      }
      lt.kappa = layer.kappa;
      lt.rho = layer.rho;
      if (opt.train_alpha && layer.alpha_z.size() == 0)
        layer.alpha_z = Vector::Zero(n_directed);
      for (Eigen::Index d = 0; d < layer.alpha_z.size(); ++d) {
        ad::Rev z = ad::Rev::leaf(tape, layer.alpha_z[d]);
        if (opt.train_alpha) bound.push_back({&layer.alpha_z[d], z});
        lt.alpha.push_back(ad::logistic(z));
      }
      layers.push_back(std::move(lt));
    }

    ad::Rev total(0.0);
    for (const auto& sample : data) {
      const auto trace = detail::unfolded_forward_t<ad::Rev>(net.base, layers, sample.v);
      total = total + detail::sample_loss_t(trace.back(), net.output_nodes, sample, loss);
    }
    losses.push_back(total.value());

    const auto grad = ad::gradient(tape, total);
    for (auto& [slot, leaf] : bound) {
      const double g = grad[static_cast<std::size_t>(leaf.index())];
      require(std::isfinite(g), "train_unfolded: non-finite gradient");
      *slot -= step * g;
    }
    for (auto& [slot, z, leaf] : lambda_bound) {
      const double g = grad[static_cast<std::size_t>(leaf.index())];
      require(std::isfinite(g), "train_unfolded: non-finite gradient");
      *slot = logistic(z - step * g);
    }
  }
  losses.push_back(unfolded_loss(net, data, loss));
  return losses;
}

}  // namespace unfold::mrfu
