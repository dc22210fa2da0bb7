#pragma once

// Model archives: a directory holding manifest.json plus .f64 matrix blobs
// (two little-endian u64 dims, then row-major doubles). All writes go through
// a temp file and a rename.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "unfold/deep_nmf.hpp"
#include "unfold/mrf.hpp"
#include "unfold/mrf_unfold.hpp"
#include "unfold/numerics.hpp"

namespace unfold::archive {

namespace fs = std::filesystem;
using nlohmann::json;

inline void atomic_write(const fs::path& path, const std::string& bytes) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("atomic_write: cannot open " + tmp.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("atomic_write: write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline void write_f64(const fs::path& path, const Matrix& m) {
  std::string bytes;
  bytes.reserve(16 + static_cast<std::size_t>(m.size()) * 8);
  const auto put_u64 = [&](std::uint64_t v) {
    for (int b = 0; b < 8; ++b) bytes.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
  };
  put_u64(static_cast<std::uint64_t>(m.rows()));
  put_u64(static_cast<std::uint64_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      const double v = m(r, c);
      char raw[8];
      std::memcpy(raw, &v, 8);
      bytes.append(raw, 8);
    }
  atomic_write(path, bytes);
}

inline Matrix read_f64(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_f64: cannot open " + path.string());
  const auto get_u64 = [&]() {
    unsigned char raw[8];
    f.read(reinterpret_cast<char*>(raw), 8);
    std::uint64_t v = 0;
    for (int b = 7; b >= 0; --b) v = (v << 8) | raw[b];
    return v;
  };
  const std::uint64_t rows = get_u64(), cols = get_u64();
  if (!f || rows * cols > (1ull << 32))
    throw std::runtime_error("read_f64: bad header in " + path.string());
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (std::uint64_t r = 0; r < rows; ++r)
    for (std::uint64_t c = 0; c < cols; ++c) {
      double v = 0;
      f.read(reinterpret_cast<char*>(&v), 8);
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = v;
    }
  if (!f) throw std::runtime_error("read_f64: truncated blob " + path.string());
  return m;
}

// ---------------------------------------------------------------------------
// NMF model archive
// ---------------------------------------------------------------------------

struct ModelInfo {
  deepnmf::DeepNmfNetwork net;
  double beta1 = 1.0;
  int infer_iters = 25;  // K used when the archive is a plain baseline model
};

inline void save_model(const fs::path& dir, const deepnmf::DeepNmfNetwork& net) {
  fs::create_directories(dir);
  json manifest;
  manifest["format"] = "unfold-model";
  manifest["kind"] = net.C > 0 ? "deep_nmf" : "snmf";
  manifest["F"] = net.frame_rows();
  manifest["T"] = net.context;
  manifest["K"] = net.K;
  manifest["C"] = net.C;
  manifest["mu"] = net.mu;
  manifest["beta1"] = net.beta1;
  manifest["beta2"] = net.beta2;
  manifest["seed"] = net.seed;
  manifest["speech_index"] = net.speech_index;
  json sources = json::array();
  for (int l = 0; l < net.tied.num_sources(); ++l) {
    sources.push_back({{"name", net.tied.names[static_cast<std::size_t>(l)]},
                       {"R", net.tied.rank(l)}});
    write_f64(dir / ("W_" + net.tied.names[static_cast<std::size_t>(l)] + ".f64"),
              net.tied.block(l));
  }
  manifest["sources"] = sources;
  for (int k = net.K - net.C + 1; k <= net.K; ++k)
    write_f64(dir / ("W_layer" + std::to_string(k) + ".f64"), net.untied_layer(k));
  atomic_write(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline deepnmf::DeepNmfNetwork load_model(const fs::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw std::runtime_error("load_model: missing manifest in " + dir.string());
  json manifest = json::parse(f);
  if (manifest.value("format", "") != "unfold-model")
    throw std::runtime_error("load_model: not a model archive");

  snmf::SourceBases bases;
  for (const auto& src : manifest.at("sources")) {
    const std::string name = src.at("name");
    bases.append(name, read_f64(dir / ("W_" + name + ".f64")));
  }
  deepnmf::DeepNmfNetwork net = deepnmf::build_network(
      bases, manifest.at("K"), manifest.at("C"), manifest.at("mu"), manifest.at("T"),
      manifest.at("seed"), manifest.value("speech_index", 0));
  net.beta1 = manifest.value("beta1", 1.0);
  net.beta2 = manifest.value("beta2", 2.0);
  for (int k = net.K - net.C + 1; k <= net.K; ++k)
    net.untied_layer(k) = read_f64(dir / ("W_layer" + std::to_string(k) + ".f64"));
  return net;
}

// ---------------------------------------------------------------------------
// MRF descriptions and unfolded nets
// ---------------------------------------------------------------------------

inline json mrf_to_json(const mrf::PairwiseMrf& g) {
  const auto table = [](const Matrix& m) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      json row = json::array();
      for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
      rows.push_back(row);
    }
    return rows;
  };
  json out;
  out["hidden"] = g.hidden_states;
  out["visible"] = g.visible_states;
  out["edges_hh"] = json::array();
  for (const auto& e : g.edges_hh)
    out["edges_hh"].push_back({{"i", e.i}, {"j", e.j}, {"psi", table(e.psi)}});
  out["edges_hv"] = json::array();
  for (const auto& e : g.edges_hv)
    out["edges_hv"].push_back({{"i", e.i}, {"l", e.l}, {"psi", table(e.psi)}});
  return out;
}

inline Matrix json_to_table(const json& rows) {
  const auto r = rows.size();
  if (r == 0) throw std::runtime_error("mrf json: empty potential table");
  const auto c = rows.at(0).size();
  Matrix m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  for (std::size_t i = 0; i < r; ++i) {
    if (rows.at(i).size() != c) throw std::runtime_error("mrf json: ragged table");
    for (std::size_t j = 0; j < c; ++j) m(static_cast<Eigen::Index>(i),
                                          static_cast<Eigen::Index>(j)) = rows.at(i).at(j);
  }
  return m;
}

inline mrf::PairwiseMrf mrf_from_json(const json& in) {
  mrf::PairwiseMrf g;
  g.hidden_states = in.at("hidden").get<std::vector<int>>();
  g.visible_states = in.value("visible", std::vector<int>{});
  for (const auto& e : in.value("edges_hh", json::array()))
    g.edges_hh.push_back({e.at("i"), e.at("j"), json_to_table(e.at("psi"))});
  for (const auto& e : in.value("edges_hv", json::array()))
    g.edges_hv.push_back({e.at("i"), e.at("l"), json_to_table(e.at("psi"))});
  g.validate();
  return g;
}

inline mrf::PairwiseMrf load_mrf(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_mrf: cannot open " + path.string());
  return mrf_from_json(json::parse(f));
}

inline void save_unfolded_net(const fs::path& dir, const mrfu::UnfoldedMrfNet& net) {
  fs::create_directories(dir);
  json manifest;
  manifest["format"] = "unfold-mrf-net";
  manifest["K"] = net.K();
  manifest["graph"] = mrf_to_json(net.base);
  manifest["output_nodes"] = net.output_nodes;
  json layers = json::array();
  for (int k = 0; k < net.K(); ++k) {
    const auto& layer = net.layers[static_cast<std::size_t>(k)];
    json jl;
    jl["lambda"] = layer.lambda;
    jl["kappa"] = std::isinf(layer.kappa) ? -1.0 : layer.kappa;
    jl["rho"] = layer.rho;
    jl["has_alpha"] = layer.alpha_z.size() > 0;
    layers.push_back(jl);
    for (std::size_t e = 0; e < layer.psi_hh.size(); ++e)
      write_f64(dir / ("psi_hh_" + std::to_string(k) + "_" + std::to_string(e) + ".f64"),
                layer.psi_hh[e]);
    for (std::size_t e = 0; e < layer.psi_hv.size(); ++e)
      write_f64(dir / ("psi_hv_" + std::to_string(k) + "_" + std::to_string(e) + ".f64"),
                layer.psi_hv[e]);
    if (layer.alpha_z.size() > 0)
      write_f64(dir / ("alpha_z_" + std::to_string(k) + ".f64"), Matrix(layer.alpha_z));
  }
  manifest["layers"] = layers;
  atomic_write(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline mrfu::UnfoldedMrfNet load_unfolded_net(const fs::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f)
    throw std::runtime_error("load_unfolded_net: missing manifest in " + dir.string());
  json manifest = json::parse(f);
  if (manifest.value("format", "") != "unfold-mrf-net")
    throw std::runtime_error("load_unfolded_net: not an unfolded-net archive");
  mrfu::UnfoldedMrfNet net;
  net.base = mrf_from_json(manifest.at("graph"));
  net.output_nodes = manifest.at("output_nodes").get<std::vector<int>>();
  const int K = manifest.at("K");
  for (int k = 0; k < K; ++k) {
    const auto& jl = manifest.at("layers").at(static_cast<std::size_t>(k));
    mrfu::UnfoldedLayer layer;
    layer.lambda = jl.at("lambda");
    layer.kappa = jl.at("kappa").get<double>() < 0 ? kInf : jl.at("kappa").get<double>();
    layer.rho = jl.at("rho");
    for (std::size_t e = 0; e < net.base.edges_hh.size(); ++e)
      layer.psi_hh.push_back(read_f64(
          dir / ("psi_hh_" + std::to_string(k) + "_" + std::to_string(e) + ".f64")));
    for (std::size_t e = 0; e < net.base.edges_hv.size(); ++e)
      layer.psi_hv.push_back(read_f64(
          dir / ("psi_hv_" + std::to_string(k) + "_" + std::to_string(e) + ".f64")));
    if (jl.value("has_alpha", false))
      layer.alpha_z = read_f64(dir / ("alpha_z_" + std::to_string(k) + ".f64"));
    net.layers.push_back(std::move(layer));
  }
  return net;
}

}  // namespace unfold::archive
