#pragma once

// WAV ingestion, STFT magnitude features with left-context stacking, and
// weighted overlap-add resynthesis.

#include <unsupported/Eigen/FFT>

#include <complex>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "unfold/numerics.hpp"

namespace unfold::audio {

constexpr int kRate = 16000;
constexpr int kWindow = 400;  // 25 ms at 16 kHz
constexpr int kHop = 160;     // 10 ms shift
constexpr int kBins = 200;    // transform bins kept (Nyquist dropped)

struct Waveform {
  std::vector<double> samples;  // nominally in [-1, 1]
  int rate = kRate;
};

/// Magnitudes and phases of the analysis frames, both kBins x n_frames.
struct Spectrogram {
  Matrix mag;
  Matrix phase;
};

/// Context-stacked features: column t holds frames t-T+1..t concatenated, the
/// leading columns padded by repeating the first frame.
struct SpectroFrameStack {
  Matrix M_stacked;  // T*F x T'
  Matrix M_last;     // F x T', equal to rows (T-1)F..TF-1 of M_stacked
  Matrix phase;      // phases of the target frames
  int T = 9;
  int F = kBins;
};

inline Vector analysis_window() {
  Vector w(kWindow);
  for (int n = 0; n < kWindow; ++n)
    w[n] = std::sqrt(0.5 - 0.5 * std::cos(2.0 * M_PI * n / kWindow));
  return w;
}

inline Spectrogram stft_magnitude(const Waveform& wave) {
  const auto n = static_cast<Eigen::Index>(wave.samples.size());
  require(n >= kWindow, "stft_magnitude: input shorter than one window");
  const int frames = 1 + static_cast<int>((n - kWindow) / kHop);
  const Vector win = analysis_window();

  Spectrogram out;
  out.mag.resize(kBins, frames);
  out.phase.resize(kBins, frames);
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> time(kWindow), freq(kWindow);
  for (int t = 0; t < frames; ++t) {
    for (int i = 0; i < kWindow; ++i)
      time[static_cast<std::size_t>(i)] = {
          wave.samples[static_cast<std::size_t>(t * kHop + i)] * win[i], 0.0};
    fft.fwd(freq, time);
    for (int f = 0; f < kBins; ++f) {
      out.mag(f, t) = std::abs(freq[static_cast<std::size_t>(f)]);
      out.phase(f, t) = std::arg(freq[static_cast<std::size_t>(f)]);
    }
  }
  return out;
}

inline SpectroFrameStack stack_context(const Spectrogram& spec, int T = 9) {
  require(T >= 1, "stack_context: T must be >= 1");
  require(spec.mag.cols() >= 1, "stack_context: empty input");
  const Eigen::Index F = spec.mag.rows();
  const Eigen::Index frames = spec.mag.cols();
  SpectroFrameStack out;
  out.T = T;
  out.F = static_cast<int>(F);
  out.M_stacked.resize(T * F, frames);
  for (Eigen::Index t = 0; t < frames; ++t)
    for (int c = 0; c < T; ++c) {
      const Eigen::Index src = std::max<Eigen::Index>(0, t - (T - 1) + c);
      out.M_stacked.block(c * F, t, F, 1) = spec.mag.col(src);
    }
  out.M_last = spec.mag;
  out.phase = spec.phase;
  return out;
}

/// Inverse transform with the synthesis square-root window; overlap-added
/// frames are divided by the accumulated squared window.
inline Waveform reconstruct_wave(const Matrix& Shat, const Matrix& phase,
                                 std::size_t original_length, EpsilonPolicy eps = {}) {
  require(Shat.rows() == kBins, "reconstruct_wave: expected 200 rows");
  require(Shat.rows() == phase.rows() && Shat.cols() == phase.cols(),
          "reconstruct_wave: shape mismatch");
  const int frames = static_cast<int>(Shat.cols());
  const Vector win = analysis_window();
  const std::size_t span =
      static_cast<std::size_t>((frames - 1) * kHop + kWindow);

  std::vector<double> acc(span, 0.0), norm(span, 0.0);
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> freq(kWindow), time(kWindow);
  for (int t = 0; t < frames; ++t) {
    for (int f = 0; f < kBins; ++f)
      freq[static_cast<std::size_t>(f)] = std::polar(Shat(f, t), phase(f, t));
    freq[kBins] = 0.0;  // Nyquist restored as zero
    for (int f = 1; f < kBins; ++f)
      freq[static_cast<std::size_t>(kWindow - f)] =
          std::conj(freq[static_cast<std::size_t>(f)]);
    fft.inv(time, freq);
    for (int i = 0; i < kWindow; ++i) {
      const auto idx = static_cast<std::size_t>(t * kHop + i);
      acc[idx] += time[static_cast<std::size_t>(i)].real() * win[i];
      norm[idx] += win[i] * win[i];
    }
  }

  Waveform out;
  out.samples.assign(original_length, 0.0);
  const std::size_t copy = std::min(original_length, span);
  for (std::size_t i = 0; i < copy; ++i)
    out.samples[i] = acc[i] / std::max(norm[i], eps.eps);
  return out;
}

// ---------------------------------------------------------------------------
// RIFF PCM (16-bit mono little-endian)
// ---------------------------------------------------------------------------

inline void write_wav(const std::string& path, const Waveform& wave) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_wav: cannot open " + path);
  const auto n = static_cast<std::uint32_t>(wave.samples.size());
  const std::uint32_t data_bytes = n * 2;
  const std::uint32_t rate = static_cast<std::uint32_t>(wave.rate);

  const auto put_u32 = [&](std::uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
  const auto put_u16 = [&](std::uint16_t v) { f.write(reinterpret_cast<const char*>(&v), 2); };

  f.write("RIFF", 4);
  put_u32(36 + data_bytes);
  f.write("WAVE", 4);
  f.write("fmt ", 4);
  put_u32(16);
  put_u16(1);  // PCM
  put_u16(1);  // mono
  put_u32(rate);
  put_u32(rate * 2);
  put_u16(2);
  put_u16(16);
  f.write("data", 4);
  put_u32(data_bytes);
  for (double s : wave.samples) {
    const double scaled = std::round(s * 32768.0);
    const auto v = static_cast<std::int16_t>(std::clamp(scaled, -32768.0, 32767.0));
    f.write(reinterpret_cast<const char*>(&v), 2);
  }
  if (!f) throw std::runtime_error("write_wav: write failed for " + path);
}

inline Waveform read_wav(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_wav: cannot open " + path);
  char tag[5] = {};
  const auto get_u32 = [&]() {
    std::uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    return v;
  };
  const auto get_u16 = [&]() {
    std::uint16_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 2);
    return v;
  };
  f.read(tag, 4);
  if (std::strncmp(tag, "RIFF", 4) != 0) throw std::runtime_error("read_wav: not RIFF");
  get_u32();
  f.read(tag, 4);
  if (std::strncmp(tag, "WAVE", 4) != 0) throw std::runtime_error("read_wav: not WAVE");

  Waveform out;
  bool got_fmt = false;
  while (f.read(tag, 4)) {
    const std::uint32_t size = get_u32();
    if (std::strncmp(tag, "fmt ", 4) == 0) {
      const std::uint16_t format = get_u16();
      const std::uint16_t channels = get_u16();
      const std::uint32_t rate = get_u32();
      get_u32();
      get_u16();
      const std::uint16_t bits = get_u16();
      if (size > 16) f.seekg(size - 16, std::ios::cur);
      if (format != 1 || bits != 16)
        throw std::runtime_error("read_wav: only 16-bit PCM is supported");
      if (channels != 1) throw std::runtime_error("read_wav: only mono is supported");
      out.rate = static_cast<int>(rate);
      got_fmt = true;
    } else if (std::strncmp(tag, "data", 4) == 0) {
      if (!got_fmt) throw std::runtime_error("read_wav: data before fmt");
      const std::uint32_t count = size / 2;
      out.samples.resize(count);
      for (std::uint32_t i = 0; i < count; ++i) {
        std::int16_t v = 0;
        f.read(reinterpret_cast<char*>(&v), 2);
        out.samples[i] = v / 32768.0;
      }
      return out;
    } else {
      f.seekg(size + (size & 1), std::ios::cur);
    }
  }
  throw std::runtime_error("read_wav: no data chunk in " + path);
}

}  // namespace unfold::audio
