#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "unfold/deep_nmf.hpp"
#include "unfold/snmf.hpp"

using namespace unfold;
using namespace unfold::deepnmf;

namespace {

Matrix random_positive(Eigen::Index r, Eigen::Index c, std::uint64_t seed,
                       double lo = 0.1, double hi = 1.1) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> U(lo, hi);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = U(gen);
  return m;
}

struct TinyProblem {
  DeepNmfNetwork net;
  Matrix M_stacked, M_last, S;
};

// F=5 features, 2 frames of context, two sources with 2 bases each,
// K=3 layers with the last C=2 untied.
TinyProblem make_tiny(std::uint64_t seed, int K = 3, int C = 2) {
  const int F = 5, ctx = 2, Rl = 2, T = 3;
  snmf::SourceBases bases;
  bases.append("speech", snmf::normalize_columns(random_positive(ctx * F, Rl, seed)));
  bases.append("noise", snmf::normalize_columns(random_positive(ctx * F, Rl, seed + 1)));
  TinyProblem p;
  p.net = build_network(bases, K, C, 0.3, ctx, seed + 2);
  for (int k = p.net.K - p.net.C + 1; k <= p.net.K; ++k)
    p.net.untied_layer(k) = random_positive(F, 2 * Rl, seed + 10 + k);
  p.M_stacked = random_positive(ctx * F, T, seed + 3, 0.3, 1.5);
  p.M_last = p.M_stacked.bottomRows(F);
  p.S = random_positive(F, T, seed + 4, 0.05, 0.9);
  return p;
}

// forward restarted from a replacement H^k; mirrors the layer routing
double loss_from_layer(const TinyProblem& p, int k, const Matrix& Hk) {
  Matrix H = Hk;
  for (int j = k + 1; j <= p.net.K; ++j) {
    if (p.net.is_untied(j))
      H = snmf::h_update_step(p.net.untied_layer(j), p.M_last, H, p.net.beta1, p.net.mu,
                              p.net.eps);
    else
      H = snmf::h_update_step(p.net.tied.W, p.M_stacked, H, p.net.beta1, p.net.mu,
                              p.net.eps);
  }
  const Matrix Shat = snmf::wiener_reconstruct(p.net.reconstruction_bases(), H, p.M_last,
                                               p.net.speech_index, p.net.eps);
  return beta_divergence(p.S, Shat, 2.0);
}

double full_loss(const TinyProblem& p) {
  const auto trace = forward(p.net, p.M_stacked, p.M_last);
  return reconstruction_loss(trace, p.S);
}

double rel_error(const Matrix& a, const Matrix& b) {
  return (a - b).norm() / std::max(b.norm(), 1e-300);
}

Matrix fd_wrt_entries(const std::function<double()>& loss, Matrix& target,
                      double step = 1e-6) {
  Matrix g(target.rows(), target.cols());
  for (Eigen::Index i = 0; i < target.rows(); ++i)
    for (Eigen::Index j = 0; j < target.cols(); ++j) {
      const double saved = target(i, j);
      target(i, j) = saved + step;
      const double up = loss();
      target(i, j) = saved - step;
      const double down = loss();
      target(i, j) = saved;
      g(i, j) = (up - down) / (2.0 * step);
    }
  return g;
}

}  // namespace

TEST_CASE("build_network layer layout") {
  auto p = make_tiny(1, 4, 2);
  CHECK(p.net.K == 4);
  CHECK(p.net.C == 2);
  CHECK_FALSE(p.net.is_untied(1));
  CHECK_FALSE(p.net.is_untied(2));
  CHECK(p.net.is_untied(3));
  CHECK(p.net.is_untied(4));
  CHECK(p.net.untied_layer(3).rows() == 5);
  CHECK(p.net.tied.W.rows() == 10);
  CHECK_THROWS_AS(p.net.untied_layer(2), std::invalid_argument);

  // C=K leaves every layer untied, identically initialized
  auto full = make_tiny(2, 3, 3);
  const Matrix init = full.net.tied.W.bottomRows(5);
  auto fresh = build_network(full.net.tied, 3, 3, 0.3, 2);
  for (int k = 1; k <= 3; ++k)
    CHECK((fresh.untied_layer(k) - init).cwiseAbs().maxCoeff() == 0.0);

  CHECK_THROWS_AS(build_network(full.net.tied, 3, 4, 0.3, 2), std::invalid_argument);
}

TEST_CASE("forward with C=0 is bitwise the baseline pipeline") {
  auto p = make_tiny(3, 4, 0);
  const auto trace = forward(p.net, p.M_stacked, p.M_last, 123);

  snmf::SnmfConfig cfg{p.net.beta1, p.net.mu, p.net.K, 123, p.net.eps};
  const Matrix H = snmf::infer_activations(p.net.tied.W, p.M_stacked, cfg);
  CHECK((trace.H.back() - H).cwiseAbs().maxCoeff() == 0.0);

  const Matrix Shat = snmf::separate_last_frame(p.net.tied, p.M_stacked, p.M_last,
                                                p.net.speech_index, cfg);
  CHECK((trace.Shat - Shat).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("untrained untied layers equal hand-rolled final-frame updates") {
  const int K = 4, C = 2;
  auto p = make_tiny(5, K, C);
  // reset the untied layers to their build_network initialization
  const Matrix last = p.net.tied.W.bottomRows(5);
  for (int k = K - C + 1; k <= K; ++k) p.net.untied_layer(k) = last;

  const auto trace = forward(p.net, p.M_stacked, p.M_last, 7);
  Matrix H = uniform_open01(p.net.total_rank(), p.M_stacked.cols(), 7);
  for (int k = 1; k <= K - C; ++k)
    H = snmf::h_update_step(p.net.tied.W, p.M_stacked, H, 1.0, p.net.mu, p.net.eps);
  for (int k = K - C + 1; k <= K; ++k)
    H = snmf::h_update_step(last, p.M_last, H, 1.0, p.net.mu, p.net.eps);
  CHECK((trace.H.back() - H).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("single-source network reconstructs the mixture") {
  const int F = 4, ctx = 2;
  snmf::SourceBases solo;
  solo.append("only", snmf::normalize_columns(random_positive(ctx * F, 3, 31)));
  auto net = build_network(solo, 2, 1, 0.3, ctx);
  net.untied_layer(2) = random_positive(F, 3, 32);
  const Matrix Ms = random_positive(ctx * F, 5, 33);
  const Matrix Ml = Ms.bottomRows(F);
  const auto trace = forward(net, Ms, Ml, 1);
  CHECK((trace.Shat - Ml).cwiseAbs().maxCoeff() < 1e-9);

  // the mask cannot change, so the split gradient parts cancel exactly
  const auto g = top_layer_gradient(trace, Ml, net, Ml);
  CHECK(g.pos.cwiseAbs().maxCoeff() < 1e-12);
  CHECK(g.neg.cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("top layer gradient vanishes at perfect reconstruction") {
  auto p = make_tiny(9);
  const auto trace = forward(p.net, p.M_stacked, p.M_last);
  const auto g = top_layer_gradient(trace, trace.Shat, p.net, p.M_last);
  CHECK(rel_error(g.pos, g.neg) < 1e-12);
}

TEST_CASE("top layer gradient matches finite differences") {
  for (std::uint64_t seed : {11, 12, 13, 14, 15}) {
    auto p = make_tiny(seed);
    auto trace = forward(p.net, p.M_stacked, p.M_last);
    const auto g = top_layer_gradient(trace, p.S, p.net, p.M_last);

    Matrix HK = trace.H.back();
    const auto loss = [&]() {
      const Matrix Shat = snmf::wiener_reconstruct(p.net.reconstruction_bases(), HK,
                                                   p.M_last, p.net.speech_index,
                                                   p.net.eps);
      return beta_divergence(p.S, Shat, 2.0);
    };
    const Matrix fd = fd_wrt_entries(loss, HK);
    CHECK(rel_error(g.pos - g.neg, fd) < 1e-5);
    CHECK((g.pos.array() >= 0.0).all());
    CHECK((g.neg.array() >= 0.0).all());
  }
}

TEST_CASE("backprop_h hand example") {
  // one basis: the update output is independent of the input activation
  snmf::SourceBases solo;
  solo.append("only", snmf::normalize_columns(Matrix::Constant(2, 1, 1.0)));
  auto net = build_network(solo, 1, 1, 0.0, 1);
  net.untied_layer(1) = Matrix::Constant(2, 1, 1.0);
  const Matrix M = Matrix::Constant(2, 1, 2.0);

  LayerTrace trace;
  trace.H = {Matrix::Constant(1, 1, 1.0), Matrix()};
  trace.lambda_in = {Matrix(), net.untied_layer(1) * trace.H[0]};
  GradPair upstream{Matrix::Constant(1, 1, 1.0), Matrix::Zero(1, 1)};
  const auto g = backprop_h(0, upstream, trace, net, M);
  CHECK(g.pos(0, 0) == Catch::Approx(2.0).epsilon(1e-9));
  CHECK(g.neg(0, 0) == Catch::Approx(2.0).epsilon(1e-9));
}

TEST_CASE("backprop_h is linear in the upstream gradient") {
  auto p = make_tiny(21);
  const auto trace = forward(p.net, p.M_stacked, p.M_last);
  GradPair zero{Matrix::Zero(4, 3), Matrix::Zero(4, 3)};
  const auto g = backprop_h(p.net.K - 1, zero, trace, p.net, p.M_last);
  CHECK(g.pos.cwiseAbs().maxCoeff() == 0.0);
  CHECK(g.neg.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("backprop_h matches finite differences through composed layers") {
  for (std::uint64_t seed : {31, 32, 33, 34, 35}) {
    auto p = make_tiny(seed);
    const auto trace = forward(p.net, p.M_stacked, p.M_last);

    GradPair g = top_layer_gradient(trace, p.S, p.net, p.M_last);
    for (int k = p.net.K - 1; k >= p.net.K - p.net.C; --k) {
      g = backprop_h(k, g, trace, p.net, p.M_last);
      Matrix Hk = trace.H[static_cast<std::size_t>(k)];
      const auto loss = [&]() { return loss_from_layer(p, k, Hk); };
      const Matrix fd = fd_wrt_entries(loss, Hk);
      CHECK(rel_error(g.pos - g.neg, fd) < 1e-5);
      CHECK((g.pos.array() >= 0.0).all());
      CHECK((g.neg.array() >= 0.0).all());
    }
  }
}

TEST_CASE("grad_w matches finite differences of the full loss") {
  for (std::uint64_t seed : {41, 42, 43, 44, 45}) {
    auto p = make_tiny(seed);
    const auto trace = forward(p.net, p.M_stacked, p.M_last);

    GradPair g = top_layer_gradient(trace, p.S, p.net, p.M_last);
    for (int k = p.net.K; k > p.net.K - p.net.C; --k) {
      const Matrix* target = k == p.net.K ? &p.S : nullptr;
      const auto gw = grad_w(k, g, trace, p.net, p.M_last, target);
      CHECK((gw.pos.array() >= 0.0).all());
      CHECK((gw.neg.array() >= 0.0).all());

      const auto loss = [&]() { return full_loss(p); };
      const Matrix fd = fd_wrt_entries(loss, p.net.untied_layer(k));
      CHECK(rel_error(gw.pos - gw.neg, fd) < 1e-5);
      if (k > p.net.K - p.net.C + 1) g = backprop_h(k - 1, g, trace, p.net, p.M_last);
    }
  }
}

TEST_CASE("grad_w split parts stay nonnegative on random instances") {
  for (std::uint64_t seed = 100; seed < 150; ++seed) {
    auto p = make_tiny(seed);
    const auto trace = forward(p.net, p.M_stacked, p.M_last);
    GradPair g = top_layer_gradient(trace, p.S, p.net, p.M_last);
    for (int k = p.net.K; k > p.net.K - p.net.C; --k) {
      const Matrix* target = k == p.net.K ? &p.S : nullptr;
      const auto gw = grad_w(k, g, trace, p.net, p.M_last, target);
      CHECK(gw.pos.minCoeff() >= 0.0);
      CHECK(gw.neg.minCoeff() >= 0.0);
      if (k > p.net.K - p.net.C + 1) g = backprop_h(k - 1, g, trace, p.net, p.M_last);
    }
  }
}

TEST_CASE("multiplicative_step") {
  Matrix W = Matrix::Constant(1, 1, 2.0);
  GradPair g{Matrix::Constant(1, 1, 2.0), Matrix::Constant(1, 1, 1.0)};
  CHECK(multiplicative_step(W, g)(0, 0) == Catch::Approx(1.0).epsilon(1e-9));

  GradPair equal{Matrix::Constant(1, 1, 0.7), Matrix::Constant(1, 1, 0.7)};
  CHECK(multiplicative_step(W, equal)(0, 0) == 2.0);

  GradPair zero{Matrix::Zero(1, 1), Matrix::Zero(1, 1)};
  CHECK(multiplicative_step(W, zero)(0, 0) == 2.0);

  const Matrix Wr = random_positive(4, 5, 9);
  GradPair gr{random_positive(4, 5, 10), random_positive(4, 5, 11)};
  CHECK((multiplicative_step(Wr, gr).array() >= 0.0).all());
}

TEST_CASE("training reduces the loss on synthetic data") {
  auto p = make_tiny(71, 3, 1);
  std::vector<TrainingSample> data;
  for (std::uint64_t s = 0; s < 3; ++s) {
    auto q = make_tiny(80 + s, 3, 1);
    data.push_back({q.M_stacked, q.M_last, q.S});
  }
  const auto losses = train(p.net, data, 20);
  REQUIRE(losses.size() == 21);
  CHECK(losses.back() < losses.front());
}

TEST_CASE("training is deterministic and epochs=0 is a no-op") {
  auto a = make_tiny(91, 3, 2);
  auto b = make_tiny(91, 3, 2);
  std::vector<TrainingSample> data{{a.M_stacked, a.M_last, a.S}};

  const Matrix before = a.net.untied_layer(3);
  train(a.net, data, 0);
  CHECK((a.net.untied_layer(3) - before).cwiseAbs().maxCoeff() == 0.0);

  train(a.net, data, 5);
  train(b.net, data, 5);
  for (int k = 2; k <= 3; ++k)
    CHECK((a.net.untied_layer(k) - b.net.untied_layer(k)).cwiseAbs().maxCoeff() == 0.0);

  auto c = make_tiny(91, 3, 0);
  std::vector<TrainingSample> cd{{c.M_stacked, c.M_last, c.S}};
  CHECK_THROWS_AS(train(c.net, cd, 1), std::invalid_argument);
}

TEST_CASE("weights stay nonnegative through training") {
  auto p = make_tiny(101, 3, 2);
  std::vector<TrainingSample> data{{p.M_stacked, p.M_last, p.S}};
  train(p.net, data, 30);
  for (int k = 2; k <= 3; ++k) CHECK(p.net.untied_layer(k).minCoeff() >= 0.0);
  const auto trace = forward(p.net, p.M_stacked, p.M_last);
  for (const auto& H : trace.H) CHECK(H.minCoeff() >= 0.0);
}

TEST_CASE("parameter counts reproduce the reference table") {
  CHECK(parameter_counts(9, 200, 200, 0) == std::pair<long long, long long>(0, 360000));
  CHECK(parameter_counts(9, 200, 200, 1) ==
        std::pair<long long, long long>(40000, 400000));
  CHECK(parameter_counts(9, 200, 200, 2) ==
        std::pair<long long, long long>(80000, 440000));
  CHECK(parameter_counts(9, 200, 2000, 3) ==
        std::pair<long long, long long>(1200000, 4800000));
  CHECK(parameter_counts(9, 200, 2000, 4) ==
        std::pair<long long, long long>(1600000, 5200000));
}

TEST_CASE("wiener outputs still partition the final-frame mixture") {
  auto p = make_tiny(111);
  const auto trace = forward(p.net, p.M_stacked, p.M_last);
  auto net2 = p.net;
  net2.speech_index = 1;
  const auto trace2 = forward(net2, p.M_stacked, p.M_last);
  CHECK(((trace.Shat + trace2.Shat) - p.M_last).cwiseAbs().maxCoeff() < 1e-9);
}
