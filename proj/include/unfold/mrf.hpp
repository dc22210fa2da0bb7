#pragma once

// Pairwise MRFs with tabulated log-potentials: exact enumeration, mean-field
// and belief-propagation messages, and the weighted power-mean family that
// interpolates between them. The message kernels are templated on the scalar
// type so the unfolded networks can differentiate through them.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "unfold/numerics.hpp"

namespace unfold::mrf {

constexpr double kMfLambdaTol = 1e-3;  // below this the exact MF limit is used

struct PairwiseMrf {
  std::vector<int> hidden_states;   // |H_i|
  std::vector<int> visible_states;  // |V_l|

  struct EdgeHH {
    int i, j;    // i < j
    Matrix psi;  // psi(h_i, h_j), |H_i| x |H_j|
  };
  struct EdgeHV {
    int i, l;
    Matrix psi;  // psi(h_i, v_l), |H_i| x |V_l|
  };
  std::vector<EdgeHH> edges_hh;
  std::vector<EdgeHV> edges_hv;

  int num_hidden() const { return static_cast<int>(hidden_states.size()); }
  int num_visible() const { return static_cast<int>(visible_states.size()); }
  int states(int i) const { return hidden_states[static_cast<std::size_t>(i)]; }

  int hidden_degree(int i) const {
    int n = 0;
    for (const auto& e : edges_hh) n += (e.i == i || e.j == i) ? 1 : 0;
    return n;
  }

  void validate() const {
    for (const auto& e : edges_hh) {
      require(e.i >= 0 && e.j >= 0 && e.i < num_hidden() && e.j < num_hidden(),
              "PairwiseMrf: edge node out of range");
      require(e.i != e.j, "PairwiseMrf: self-edge");
      require(e.i < e.j, "PairwiseMrf: hidden edges must be stored with i < j");
      require(e.psi.rows() == states(e.i) && e.psi.cols() == states(e.j),
              "PairwiseMrf: potential table shape mismatch");
      require(e.psi.array().isFinite().all(), "PairwiseMrf: non-finite potential");
    }
    for (const auto& e : edges_hv) {
      require(e.i >= 0 && e.i < num_hidden() && e.l >= 0 && e.l < num_visible(),
              "PairwiseMrf: visible edge out of range");
      require(e.psi.rows() == states(e.i) &&
                  e.psi.cols() == visible_states[static_cast<std::size_t>(e.l)],
              "PairwiseMrf: evidence table shape mismatch");
      require(e.psi.array().isFinite().all(), "PairwiseMrf: non-finite potential");
    }
  }
};

/// Directed message edges in a deterministic order (sorted by node index).
struct DirectedEdge {
  int from, to;
  int hh_index;  // undirected edge this direction belongs to
  bool flipped;  // true when `from` indexes the rows of the stored table
};

inline std::vector<DirectedEdge> directed_edges(const PairwiseMrf& g) {
  std::vector<DirectedEdge> out;
  for (int e = 0; e < static_cast<int>(g.edges_hh.size()); ++e) {
    out.push_back({g.edges_hh[static_cast<std::size_t>(e)].j,
                   g.edges_hh[static_cast<std::size_t>(e)].i, e, false});
    out.push_back({g.edges_hh[static_cast<std::size_t>(e)].i,
                   g.edges_hh[static_cast<std::size_t>(e)].j, e, true});
  }
  std::sort(out.begin(), out.end(), [](const DirectedEdge& a, const DirectedEdge& b) {
    return std::pair(a.from, a.to) < std::pair(b.from, b.to);
  });
  return out;
}

inline std::vector<int> reverse_indices(const std::vector<DirectedEdge>& edges) {
  std::vector<int> rev(edges.size(), -1);
  for (std::size_t e = 0; e < edges.size(); ++e)
    for (std::size_t r = 0; r < edges.size(); ++r)
      if (edges[r].from == edges[e].to && edges[r].to == edges[e].from) {
        rev[e] = static_cast<int>(r);
        break;
      }
  return rev;
}

/// Sum-to-max interpolation style of a message: lambda in [0,1] morphs BP into
/// MF, kappa in [1,inf] morphs sum-product into max-product.
struct MessageStyle {
  double lambda = 1.0;
  double kappa = 1.0;
};

/// Message styles resolved per directed edge; per-edge entries override the
/// global one.
struct StyleMap {
  MessageStyle global{};
  std::map<std::pair<int, int>, MessageStyle> per_edge;

  MessageStyle get(int from, int to) const {
    auto it = per_edge.find({from, to});
    return it == per_edge.end() ? global : it->second;
  }
};

/// Update gates alpha = logistic(z) per directed edge and iteration, plus the
/// power-mean exponent used to blend old and new messages.
struct ScheduleParams {
  double rho = 1.0;
  Matrix z;  // num_directed_edges x iters; empty means alpha = 1 throughout

  static ScheduleParams synchronous(double rho_ = 1.0) { return {rho_, Matrix()}; }
  double alpha(int edge, int iter) const {
    if (z.size() == 0) return 1.0;
    return logistic(z(edge, iter));
  }
};

struct MessageState {
  std::vector<std::vector<double>> message;  // per directed edge, over target states
  std::vector<std::vector<double>> belief;   // per hidden node
};

// ---------------------------------------------------------------------------
// scalar-generic kernels
// ---------------------------------------------------------------------------

namespace detail {

inline double value_of(double x) { return x; }
template <class T>
double value_of(const T& x) {
  return x.value();
}

template <class T>
void normalize_message(std::vector<T>& m) {
  T s = m[0];
  for (std::size_t n = 1; n < m.size(); ++n) s = s + m[n];
  for (auto& x : m) x = x / s;
}

/// m(h_i) = exp(sum_hj q(h_j) psi(h_i, h_j)); unnormalized.
template <class T, class Psi>
std::vector<T> mf_message_t(const std::vector<T>& q_j, int n_i, Psi psi) {
  using std::exp;
  std::vector<T> m;
  m.reserve(static_cast<std::size_t>(n_i));
  for (int hi = 0; hi < n_i; ++hi) {
    T s = q_j[0] * psi(hi, 0);
    for (std::size_t hj = 1; hj < q_j.size(); ++hj)
      s = s + q_j[hj] * psi(hi, static_cast<int>(hj));
    m.push_back(exp(s));
  }
  return m;
}

/// m(h_i) = sum_hj q(h_j)/m_inc(h_j) exp(psi(h_i, h_j)); unnormalized.
template <class T, class Psi>
std::vector<T> bp_message_t(const std::vector<T>& q_j, const std::vector<T>& m_inc,
                            int n_i, Psi psi) {
  using std::exp;
  std::vector<T> m;
  m.reserve(static_cast<std::size_t>(n_i));
  for (int hi = 0; hi < n_i; ++hi) {
    T s = q_j[0] / m_inc[0] * exp(psi(hi, 0));
    for (std::size_t hj = 1; hj < q_j.size(); ++hj)
      s = s + q_j[hj] / m_inc[hj] * exp(psi(hi, static_cast<int>(hj)));
    m.push_back(s);
  }
  return m;
}

/// Power-mean unification: exact BP at lambda = kappa = 1, MF as lambda -> 0,
/// max-product as kappa -> inf. Small lambda switches to the analytic limit.
template <class T, class TS, class Psi>
std::vector<T> generalized_message_t(const std::vector<T>& q_j,
                                     const std::vector<T>& m_inc, int n_i, Psi psi,
                                     const TS& lambda, double kappa) {
  using std::exp;
  using std::log;
  const double lv = value_of(lambda);
  const std::size_t n_j = q_j.size();
  require(lv >= 0.0 && lv <= 1.0, "generalized_message: lambda outside [0,1]");
  require(kappa >= 1.0, "generalized_message: kappa must be >= 1");

  if (lv == 1.0 && kappa == 1.0) return bp_message_t(q_j, m_inc, n_i, psi);

  if (lv < kMfLambdaTol) {
    // exact MF limit; kappa tempers the belief weights
    std::vector<T> w(q_j);
    if (std::isinf(kappa)) {
      std::size_t best = 0;
      for (std::size_t hj = 1; hj < n_j; ++hj)
        if (value_of(q_j[hj]) > value_of(q_j[best])) best = hj;
      for (std::size_t hj = 0; hj < n_j; ++hj) w[hj] = q_j[hj] * (hj == best ? 1.0 : 0.0);
      normalize_message(w);
    } else if (kappa != 1.0) {
      using std::pow;
      for (auto& x : w) x = pow(x, kappa);
      normalize_message(w);
    }
    return mf_message_t(w, n_i, psi);
  }

  std::vector<T> m;
  m.reserve(static_cast<std::size_t>(n_i));
  if (std::isinf(kappa)) {
    for (int hi = 0; hi < n_i; ++hi) {
      T best = log(q_j[0]) / lambda + psi(hi, 0) - log(m_inc[0]);
      for (std::size_t hj = 1; hj < n_j; ++hj) {
        T cand = log(q_j[hj]) / lambda + psi(hi, static_cast<int>(hj)) - log(m_inc[hj]);
        if (value_of(cand) > value_of(best)) best = cand;
      }
      m.push_back(exp(best));
    }
    return m;
  }

  for (int hi = 0; hi < n_i; ++hi) {
    // (1/(lambda kappa)) lse_hj( kappa log q + lambda kappa (psi - log m_inc) )
    std::vector<T> zs;
    zs.reserve(n_j);
    double shift = -kInf;
    for (std::size_t hj = 0; hj < n_j; ++hj) {
      T z = kappa * log(q_j[hj]) +
            lambda * kappa * (psi(hi, static_cast<int>(hj)) - log(m_inc[hj]));
      shift = std::max(shift, value_of(z));
      zs.push_back(z);
    }
    T s = exp(zs[0] - shift);
    for (std::size_t hj = 1; hj < n_j; ++hj) s = s + exp(zs[hj] - shift);
    m.push_back(exp((log(s) + shift) / (lambda * kappa)));
  }
  return m;
}

/// (alpha m_new^rho + (1-alpha) m_old^rho)^(1/rho); geometric for rho -> 0.
template <class T, class TS>
std::vector<T> blend_t(const std::vector<T>& m_old, const std::vector<T>& m_new,
                       const TS& alpha, double rho) {
  const double av = value_of(alpha);
  if (av == 1.0) return m_new;
  if (av == 0.0) return m_old;
  using std::exp;
  using std::log;
  using std::pow;
  std::vector<T> out;
  out.reserve(m_old.size());
  for (std::size_t n = 0; n < m_old.size(); ++n) {
    if (std::abs(rho) < kMeanLimitTol)
      out.push_back(exp(alpha * log(m_new[n]) + (1.0 - alpha) * log(m_old[n])));
    else
      out.push_back(pow(alpha * pow(m_new[n], rho) + (1.0 - alpha) * pow(m_old[n], rho),
                        1.0 / rho));
  }
  return out;
}

/// q(h_i) = softmax over h_i of (evidence(h_i) + sum_j log m_ji(h_i)).
template <class T>
std::vector<T> belief_from_scores_t(std::vector<T> scores) {
  using std::exp;
  double shift = -kInf;
  for (const auto& s : scores) shift = std::max(shift, value_of(s));
  std::vector<T> q;
  q.reserve(scores.size());
  for (const auto& s : scores) q.push_back(exp(s - shift));
  normalize_message(q);
  return q;
}

template <class T, class EvFn>
std::vector<std::vector<T>> beliefs_t(const std::vector<std::vector<T>>& messages,
                                      const std::vector<DirectedEdge>& edges,
                                      const std::vector<int>& hidden_states, EvFn ev) {
  using std::log;
  std::vector<std::vector<T>> beliefs(hidden_states.size());
  for (int i = 0; i < static_cast<int>(hidden_states.size()); ++i) {
    std::vector<T> scores;
    const int n = hidden_states[static_cast<std::size_t>(i)];
    scores.reserve(static_cast<std::size_t>(n));
    for (int hi = 0; hi < n; ++hi) scores.push_back(ev(i, hi));
    for (std::size_t e = 0; e < edges.size(); ++e)
      if (edges[e].to == i)
        for (int hi = 0; hi < n; ++hi)
          scores[static_cast<std::size_t>(hi)] =
              scores[static_cast<std::size_t>(hi)] + log(messages[e][static_cast<std::size_t>(hi)]);
    beliefs[static_cast<std::size_t>(i)] = belief_from_scores_t(std::move(scores));
  }
  return beliefs;
}

/// One synchronous round: every directed message recomputed from the previous
/// state, blended with its old value, renormalized; then fresh beliefs.
template <class T, class PsiFn, class EvFn, class AlphaFn, class LambdaFn, class KappaFn>
void inference_round_t(const std::vector<DirectedEdge>& edges,
                       const std::vector<int>& reverse_index,
                       const std::vector<int>& hidden_states, PsiFn psi, EvFn ev,
                       AlphaFn alpha, LambdaFn lambda, KappaFn kappa, double rho,
                       std::vector<std::vector<T>>& messages,
                       std::vector<std::vector<T>>& beliefs) {
  std::vector<std::vector<T>> next(edges.size());
  for (std::size_t e = 0; e < edges.size(); ++e) {
    const auto& de = edges[e];
    const int n_i = hidden_states[static_cast<std::size_t>(de.to)];
    const auto psi_e = [&](int hi, int hj) { return psi(static_cast<int>(e), hi, hj); };
    auto raw = generalized_message_t(beliefs[static_cast<std::size_t>(de.from)],
                                     messages[static_cast<std::size_t>(
                                         reverse_index[static_cast<std::size_t>(e)])],
                                     n_i, psi_e, lambda(static_cast<int>(e)),
                                     kappa(static_cast<int>(e)));
    auto blended = blend_t(messages[e], raw, alpha(static_cast<int>(e)), rho);
    normalize_message(blended);
    next[e] = std::move(blended);
  }
  messages = std::move(next);
  beliefs = beliefs_t(messages, edges, hidden_states, ev);
}

template <class T>
std::vector<std::vector<T>> uniform_messages(const std::vector<DirectedEdge>& edges,
                                             const std::vector<int>& hidden_states) {
  std::vector<std::vector<T>> m(edges.size());
  for (std::size_t e = 0; e < edges.size(); ++e) {
    const int n = hidden_states[static_cast<std::size_t>(edges[e].to)];
    m[e].assign(static_cast<std::size_t>(n), T(1.0 / n));
  }
  return m;
}

template <class T>
std::vector<std::vector<T>> uniform_beliefs(const std::vector<int>& hidden_states) {
  std::vector<std::vector<T>> q(hidden_states.size());
  for (std::size_t i = 0; i < hidden_states.size(); ++i)
    q[i].assign(static_cast<std::size_t>(hidden_states[i]), T(1.0 / hidden_states[i]));
  return q;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// double-typed public operations
// ---------------------------------------------------------------------------

inline std::vector<double> mf_message(const std::vector<double>& q_j, const Matrix& psi) {
  require(static_cast<Eigen::Index>(q_j.size()) == psi.cols(),
          "mf_message: belief size mismatch");
  return detail::mf_message_t(q_j, static_cast<int>(psi.rows()),
                              [&](int hi, int hj) { return psi(hi, hj); });
}

inline std::vector<double> bp_message(const std::vector<double>& q_j,
                                      const std::vector<double>& m_incoming,
                                      const Matrix& psi) {
  require(static_cast<Eigen::Index>(q_j.size()) == psi.cols(),
          "bp_message: belief size mismatch");
  require(m_incoming.size() == q_j.size(), "bp_message: incoming message size mismatch");
  for (double v : m_incoming) require(v > 0.0, "bp_message: zero incoming message");
  return detail::bp_message_t(q_j, m_incoming, static_cast<int>(psi.rows()),
                              [&](int hi, int hj) { return psi(hi, hj); });
}

inline std::vector<double> generalized_message(const std::vector<double>& q_j,
                                               const std::vector<double>& m_incoming,
                                               const Matrix& psi,
                                               const MessageStyle& style) {
  for (double v : m_incoming)
    require(v > 0.0, "generalized_message: zero incoming message");
  return detail::generalized_message_t(
      q_j, m_incoming, static_cast<int>(psi.rows()),
      [&](int hi, int hj) { return psi(hi, hj); }, style.lambda, style.kappa);
}

inline std::vector<double> schedule_blend(const std::vector<double>& m_old,
                                          const std::vector<double>& m_new, double alpha,
                                          double rho) {
  require(alpha >= 0.0 && alpha <= 1.0, "schedule_blend: alpha outside [0,1]");
  return detail::blend_t(m_old, m_new, alpha, rho);
}

/// Evidence score table ev[i][h_i] = sum over visible neighbors of psi(h_i, v*).
inline std::vector<std::vector<double>> evidence_scores(const PairwiseMrf& g,
                                                        const std::vector<int>& v) {
  require(v.size() == g.visible_states.size(), "evidence: assignment size mismatch");
  for (std::size_t l = 0; l < v.size(); ++l)
    require(v[l] >= 0 && v[l] < g.visible_states[l], "evidence: value out of range");
  std::vector<std::vector<double>> ev(static_cast<std::size_t>(g.num_hidden()));
  for (int i = 0; i < g.num_hidden(); ++i)
    ev[static_cast<std::size_t>(i)].assign(static_cast<std::size_t>(g.states(i)), 0.0);
  for (const auto& e : g.edges_hv)
    for (int hi = 0; hi < g.states(e.i); ++hi)
      ev[static_cast<std::size_t>(e.i)][static_cast<std::size_t>(hi)] +=
          e.psi(hi, v[static_cast<std::size_t>(e.l)]);
  return ev;
}

inline std::vector<std::vector<double>> compute_beliefs(
    const std::vector<std::vector<double>>& messages, const PairwiseMrf& g,
    const std::vector<int>& v) {
  const auto edges = directed_edges(g);
  const auto ev = evidence_scores(g, v);
  return detail::beliefs_t(messages, edges, g.hidden_states, [&](int i, int hi) {
    return ev[static_cast<std::size_t>(i)][static_cast<std::size_t>(hi)];
  });
}

inline MessageState run_inference(const PairwiseMrf& g, const std::vector<int>& v,
                                  const StyleMap& style, const ScheduleParams& schedule,
                                  int iters) {
  g.validate();
  const auto edges = directed_edges(g);
  const auto rev = reverse_indices(edges);
  const auto ev = evidence_scores(g, v);
  require(schedule.z.size() == 0 ||
              (schedule.z.rows() == static_cast<Eigen::Index>(edges.size()) &&
               schedule.z.cols() >= iters),
          "run_inference: schedule shape mismatch");

  MessageState state;
  state.message = detail::uniform_messages<double>(edges, g.hidden_states);
  state.belief = detail::uniform_beliefs<double>(g.hidden_states);

  const auto psi = [&](int e, int hi, int hj) {
    const auto& de = edges[static_cast<std::size_t>(e)];
    const auto& table = g.edges_hh[static_cast<std::size_t>(de.hh_index)].psi;
    return de.flipped ? table(hj, hi) : table(hi, hj);
  };
  const auto evfn = [&](int i, int hi) {
    return ev[static_cast<std::size_t>(i)][static_cast<std::size_t>(hi)];
  };
  for (int it = 0; it < iters; ++it) {
    detail::inference_round_t<double>(
        edges, rev, g.hidden_states, psi, evfn,
        [&](int e) { return schedule.alpha(e, it); },
        [&](int e) {
          const auto& de = edges[static_cast<std::size_t>(e)];
          return style.get(de.from, de.to).lambda;
        },
        [&](int e) {
          const auto& de = edges[static_cast<std::size_t>(e)];
          return style.get(de.from, de.to).kappa;
        },
        schedule.rho, state.message, state.belief);
  }
  return state;
}

/// Exact marginals by full enumeration; the joint state space must not exceed 1e6.
inline std::vector<std::vector<double>> brute_force_marginals(const PairwiseMrf& g,
                                                              const std::vector<int>& v) {
  g.validate();
  double joint = 1.0;
  for (int n : g.hidden_states) joint *= n;
  require(joint <= 1e6, "brute_force_marginals: state space too large");
  const auto ev = evidence_scores(g, v);
  const int N = g.num_hidden();

  std::vector<int> h(static_cast<std::size_t>(N), 0);
  const auto score = [&]() {
    double s = 0.0;
    for (int i = 0; i < N; ++i)
      s += ev[static_cast<std::size_t>(i)]
             [static_cast<std::size_t>(h[static_cast<std::size_t>(i)])];
    for (const auto& e : g.edges_hh)
      s += e.psi(h[static_cast<std::size_t>(e.i)], h[static_cast<std::size_t>(e.j)]);
    return s;
  };
  const auto advance = [&]() {
    for (int i = 0; i < N; ++i) {
      if (++h[static_cast<std::size_t>(i)] < g.states(i)) return true;
      h[static_cast<std::size_t>(i)] = 0;
    }
    return false;
  };

  double max_score = -kInf;
  do max_score = std::max(max_score, score());
  while (advance());

  std::vector<std::vector<double>> marg(static_cast<std::size_t>(N));
  for (int i = 0; i < N; ++i)
    marg[static_cast<std::size_t>(i)].assign(static_cast<std::size_t>(g.states(i)), 0.0);
  double z = 0.0;
  do {
    const double w = std::exp(score() - max_score);
    z += w;
    for (int i = 0; i < N; ++i)
      marg[static_cast<std::size_t>(i)]
          [static_cast<std::size_t>(h[static_cast<std::size_t>(i)])] += w;
  } while (advance());
  for (auto& m : marg)
    for (auto& x : m) x /= z;
  return marg;
}

}  // namespace unfold::mrf
