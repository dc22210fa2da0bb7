#pragma once

// SDR metric, synthetic two-source fixtures, separation pipeline and the
// experiment grid runner.

#include <cmath>
#include <cstdint>
#include <future>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "unfold/audio.hpp"
#include "unfold/deep_nmf.hpp"
#include "unfold/numerics.hpp"
#include "unfold/snmf.hpp"

namespace unfold::eval {

using audio::Waveform;

/// 10 log10(||ref||^2 / ||ref - est||^2), capped at +100 dB.
inline double sdr(const Waveform& ref, const Waveform& est) {
  require(ref.samples.size() == est.samples.size(), "sdr: length mismatch");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < ref.samples.size(); ++i) {
    num += ref.samples[i] * ref.samples[i];
    const double d = ref.samples[i] - est.samples[i];
    den += d * d;
  }
  require(num > 0.0, "sdr: zero reference");
  if (den == 0.0) return 100.0;
  return std::min(100.0, 10.0 * std::log10(num / den));
}

/// Speech-like source, noise-like source and their sum at an exact SNR.
struct MixtureFixture {
  Waveform speech;
  Waveform noise;  // already scaled to the target SNR
  Waveform mixture;
  double snr_db = 0.0;
  std::uint64_t seed = 0;
};

namespace detail {

inline void normalize_rms(std::vector<double>& x, double target) {
  double s = 0.0;
  for (double v : x) s += v * v;
  const double rms = std::sqrt(s / static_cast<double>(x.size()));
  if (rms > 0.0)
    for (double& v : x) v *= target / rms;
}

inline std::vector<double> speech_like(std::mt19937_64& gen, int n, int rate) {
  std::uniform_real_distribution<double> U(0.0, 1.0);
  std::vector<double> out(static_cast<std::size_t>(n), 0.0);
  for (int c = 0; c < 3; ++c) {
    const double f0 = 110.0 + 220.0 * U(gen);
    const int onset = static_cast<int>(U(gen) * 0.55 * n);
    const int dur = static_cast<int>((0.5 + 0.7 * U(gen)) * rate);
    double phase[5];
    for (auto& p : phase) p = 2.0 * M_PI * U(gen);
    const int attack = rate / 20;
    for (int i = 0; i < dur && onset + i < n; ++i) {
      const double t = static_cast<double>(i) / rate;
      double env = std::exp(-2.5 * i / dur);
      if (i < attack) env *= static_cast<double>(i) / attack;
      double v = 0.0;
      for (int h = 1; h <= 5; ++h)
        v += std::sin(2.0 * M_PI * h * f0 * t + phase[h - 1]) / h;
      out[static_cast<std::size_t>(onset + i)] += env * v;
    }
  }
  normalize_rms(out, 0.08);
  return out;
}

inline std::vector<double> noise_like(std::mt19937_64& gen, int n, int rate) {
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  std::uniform_real_distribution<double> U01(0.0, 1.0);
  const double f_env = 0.3 + 0.5 * U01(gen);
  const double phi = 2.0 * M_PI * U01(gen);
  std::vector<double> out(static_cast<std::size_t>(n), 0.0);
  double y = 0.0;
  for (int i = 0; i < n; ++i) {
    y = 0.85 * y + 0.15 * U(gen);  // one-pole lowpass
    const double t = static_cast<double>(i) / rate;
    const double env = std::max(0.1, 1.0 + 0.7 * std::sin(2.0 * M_PI * f_env * t + phi));
    out[static_cast<std::size_t>(i)] = env * y;
  }
  normalize_rms(out, 0.08);
  return out;
}

}  // namespace detail

/// Deterministic synthetic fixture; the noise is scaled so that the achieved
/// SNR equals the target exactly.
inline MixtureFixture synthesize_mixture(std::uint64_t seed, double snr_db,
                                         double seconds = 3.0, int rate = audio::kRate) {
  const int n = static_cast<int>(seconds * rate);
  std::mt19937_64 gen(seed);
  MixtureFixture fx;
  fx.seed = seed;
  fx.snr_db = snr_db;
  fx.speech.rate = fx.noise.rate = fx.mixture.rate = rate;
  fx.speech.samples = detail::speech_like(gen, n, rate);
  fx.noise.samples = detail::noise_like(gen, n, rate);

  double es = 0.0, en = 0.0;
  for (int i = 0; i < n; ++i) {
    es += fx.speech.samples[static_cast<std::size_t>(i)] *
          fx.speech.samples[static_cast<std::size_t>(i)];
    en += fx.noise.samples[static_cast<std::size_t>(i)] *
          fx.noise.samples[static_cast<std::size_t>(i)];
  }
  const double gain = std::sqrt(es / (en * std::pow(10.0, snr_db / 10.0)));
  fx.mixture.samples.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    fx.noise.samples[static_cast<std::size_t>(i)] *= gain;
    fx.mixture.samples[static_cast<std::size_t>(i)] =
        fx.speech.samples[static_cast<std::size_t>(i)] +
        fx.noise.samples[static_cast<std::size_t>(i)];
  }
  return fx;
}

/// Run a mixture through a trained network and resynthesize the speech
/// estimate with the mixture phases.
inline Waveform separate_waveform(const deepnmf::DeepNmfNetwork& net,
                                  const Waveform& mix, std::uint64_t seed) {
  const auto stack = audio::stack_context(audio::stft_magnitude(mix), net.context);
  const auto trace = deepnmf::forward(net, stack.M_stacked, stack.M_last, seed);
  return audio::reconstruct_wave(trace.Shat, stack.phase, mix.samples.size());
}

struct GridCell {
  int K = 4;
  int C = 0;
  int R_per_source = 100;
};

struct ExperimentConfig {
  std::vector<GridCell> grid{{4, 0, 100}, {4, 1, 100}, {4, 2, 100}, {25, 0, 100}};
  std::vector<double> snrs{-6.0, 0.0, 9.0};
  int n_train = 60;
  int n_eval = 20;  // total, spread over the SNR list
  double seconds = 3.0;
  int context = 9;
  double mu = 5.0;
  double beta1 = 1.0;
  int snmf_iters = 30;
  int epochs = 8;
  std::uint64_t seed = 1;
  int jobs = 1;
};

struct ReportRow {
  int K, C, R;  // R is the total over sources
  double snr_db;
  double sdr_db;
  long long P_D, P;
};

struct ExperimentReport {
  std::vector<ReportRow> rows;
};

inline std::string report_csv(const ExperimentReport& report) {
  std::ostringstream out;
  out << "K,C,R,snr_db,sdr_db,P_D,P\n";
  for (const auto& r : report.rows)
    out << r.K << ',' << r.C << ',' << r.R << ',' << r.snr_db << ','
        << std::setprecision(10) << r.sdr_db << ',' << r.P_D << ',' << r.P << '\n';
  return out.str();
}

inline std::string report_table(const ExperimentReport& report) {
  std::ostringstream out;
  out << std::left << std::setw(6) << "K" << std::setw(6) << "C" << std::setw(8) << "R"
      << std::setw(10) << "SNR[dB]" << std::setw(12) << "SDR[dB]" << std::setw(12)
      << "P_D" << std::setw(12) << "P" << '\n';
  for (const auto& r : report.rows)
    out << std::left << std::setw(6) << r.K << std::setw(6) << r.C << std::setw(8) << r.R
        << std::setw(10) << r.snr_db << std::setw(12) << std::fixed
        << std::setprecision(3) << r.sdr_db << std::setw(12) << r.P_D << std::setw(12)
        << r.P << '\n';
  return out.str();
}

namespace detail {

struct PreparedData {
  std::vector<MixtureFixture> train;
  std::vector<MixtureFixture> eval;  // grouped by SNR, snr-major order
  std::vector<int> eval_per_snr;
  Matrix speech_stacked;  // concatenated stacked clean spectrograms
  Matrix noise_stacked;
  std::vector<deepnmf::TrainingSample> train_samples;
};

inline PreparedData prepare_data(const ExperimentConfig& cfg) {
  PreparedData d;
  for (int i = 0; i < cfg.n_train; ++i) {
    const double snr = cfg.snrs[static_cast<std::size_t>(i) % cfg.snrs.size()];
    d.train.push_back(
        synthesize_mixture(derive_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(i)),
                           snr, cfg.seconds));
  }
  d.eval_per_snr.assign(cfg.snrs.size(), 0);
  for (int i = 0; i < cfg.n_eval; ++i) d.eval_per_snr[static_cast<std::size_t>(i) % cfg.snrs.size()]++;
  for (std::size_t s = 0; s < cfg.snrs.size(); ++s)
    for (int i = 0; i < d.eval_per_snr[s]; ++i)
      d.eval.push_back(synthesize_mixture(
          derive_seed(cfg.seed, 100000 + 1000 * static_cast<std::uint64_t>(s) +
                                    static_cast<std::uint64_t>(i)),
          cfg.snrs[s], cfg.seconds));

  std::vector<Matrix> speech_blocks, noise_blocks;
  Eigen::Index cols = 0;
  for (const auto& fx : d.train) {
    const auto ss = audio::stack_context(audio::stft_magnitude(fx.speech), cfg.context);
    const auto ns = audio::stack_context(audio::stft_magnitude(fx.noise), cfg.context);
    const auto ms = audio::stack_context(audio::stft_magnitude(fx.mixture), cfg.context);
    speech_blocks.push_back(ss.M_stacked);
    noise_blocks.push_back(ns.M_stacked);
    d.train_samples.push_back({ms.M_stacked, ms.M_last, ss.M_last});
    cols += ss.M_stacked.cols();
  }
  d.speech_stacked.resize(speech_blocks.front().rows(), cols);
  d.noise_stacked.resize(noise_blocks.front().rows(), cols);
  Eigen::Index at = 0;
  for (std::size_t i = 0; i < speech_blocks.size(); ++i) {
    d.speech_stacked.middleCols(at, speech_blocks[i].cols()) = speech_blocks[i];
    d.noise_stacked.middleCols(at, noise_blocks[i].cols()) = noise_blocks[i];
    at += speech_blocks[i].cols();
  }
  return d;
}

}  // namespace detail

/// Train per-source bases on the clean fixtures, build and train the network
/// for each grid cell, separate the held-out fixtures and report mean SDR.
inline ExperimentReport run_experiment(const ExperimentConfig& cfg) {
  for (const auto& cell : cfg.grid)
    require(cell.C <= cell.K, "run_experiment: grid cell with C > K");
  require(!cfg.snrs.empty() && cfg.n_eval > 0 && cfg.n_train > 0,
          "run_experiment: empty grid configuration");

  const detail::PreparedData data = detail::prepare_data(cfg);

  // bases depend only on R; train each required rank once
  std::vector<int> ranks;
  for (const auto& cell : cfg.grid)
    if (std::find(ranks.begin(), ranks.end(), cell.R_per_source) == ranks.end())
      ranks.push_back(cell.R_per_source);
  std::map<int, snmf::SourceBases> bases_by_rank;
  for (int R : ranks) {
    snmf::SnmfConfig bcfg{cfg.beta1, cfg.mu, cfg.snmf_iters, derive_seed(cfg.seed, 7), {}};
    snmf::SourceBases bases;
    bases.append("speech", snmf::train_bases(data.speech_stacked, R, bcfg));
    bcfg.seed = derive_seed(cfg.seed, 8);
    bases.append("noise", snmf::train_bases(data.noise_stacked, R, bcfg));
    bases_by_rank[R] = std::move(bases);
  }

  const auto run_cell = [&](const GridCell& cell) {
    auto net = deepnmf::build_network(bases_by_rank.at(cell.R_per_source), cell.K, cell.C,
                                      cfg.mu, cfg.context, derive_seed(cfg.seed, 11));
    if (cell.C > 0) deepnmf::train(net, data.train_samples, cfg.epochs);

    std::vector<ReportRow> rows;
    std::size_t at = 0;
    for (std::size_t s = 0; s < cfg.snrs.size(); ++s) {
      double mean = 0.0;
      for (int i = 0; i < data.eval_per_snr[s]; ++i) {
        const auto& fx = data.eval[at++];
        const auto est = separate_waveform(net, fx.mixture, derive_seed(fx.seed, 3));
        mean += sdr(fx.speech, est);
      }
      mean /= std::max(1, data.eval_per_snr[s]);
      const auto [pd, p] = deepnmf::parameter_counts(cfg.context, net.frame_rows(),
                                                     net.total_rank(), cell.C);
      rows.push_back({cell.K, cell.C, net.total_rank(), cfg.snrs[s], mean, pd, p});
    }
    return rows;
  };

  ExperimentReport report;
  if (cfg.jobs > 1) {
    Eigen::setNbThreads(1);
    std::vector<std::future<std::vector<ReportRow>>> futures;
    for (const auto& cell : cfg.grid)
      futures.push_back(std::async(std::launch::async, run_cell, cell));
    for (auto& f : futures)
      for (const auto& row : f.get()) report.rows.push_back(row);
    Eigen::setNbThreads(0);
  } else {
    for (const auto& cell : cfg.grid)
      for (const auto& row : run_cell(cell)) report.rows.push_back(row);
  }
  return report;
}

}  // namespace unfold::eval
