#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <random>

#include "unfold/archive.hpp"
#include "unfold/config.hpp"

using namespace unfold;
namespace fs = std::filesystem;

namespace {

Matrix random_positive(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> U(0.1, 1.1);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = U(gen);
  return m;
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("unfold_io_test_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("f64 blobs round trip bit exactly") {
  TempDir tmp;
  const Matrix m = random_positive(7, 5, 3);
  archive::write_f64(tmp.path / "m.f64", m);
  const Matrix r = archive::read_f64(tmp.path / "m.f64");
  REQUIRE(r.rows() == 7);
  REQUIRE(r.cols() == 5);
  CHECK((r - m).cwiseAbs().maxCoeff() == 0.0);

  // header layout: two little-endian u64 dims
  std::ifstream f(tmp.path / "m.f64", std::ios::binary);
  unsigned char raw[16];
  f.read(reinterpret_cast<char*>(raw), 16);
  CHECK(raw[0] == 7);
  CHECK(raw[8] == 5);
}

TEST_CASE("model archives round trip") {
  TempDir tmp;
  snmf::SourceBases bases;
  bases.append("speech", snmf::normalize_columns(random_positive(12, 3, 11)));
  bases.append("noise", snmf::normalize_columns(random_positive(12, 2, 12)));
  auto net = deepnmf::build_network(bases, 5, 2, 4.0, 3, 77);
  net.untied_layer(4) = random_positive(4, 5, 13);
  net.untied_layer(5) = random_positive(4, 5, 14);

  archive::save_model(tmp.path / "model", net);
  const auto loaded = archive::load_model(tmp.path / "model");
  CHECK(loaded.K == 5);
  CHECK(loaded.C == 2);
  CHECK(loaded.context == 3);
  CHECK(loaded.mu == 4.0);
  CHECK(loaded.seed == 77);
  CHECK(loaded.tied.names == net.tied.names);
  CHECK((loaded.tied.W - net.tied.W).cwiseAbs().maxCoeff() == 0.0);
  for (int k = 4; k <= 5; ++k)
    CHECK((loaded.untied_layer(k) - net.untied_layer(k)).cwiseAbs().maxCoeff() == 0.0);

  CHECK_THROWS_AS(archive::load_model(tmp.path / "missing"), std::runtime_error);
}

TEST_CASE("mrf json round trip") {
  mrf::PairwiseMrf g;
  g.hidden_states = {2, 3};
  g.visible_states = {2};
  Matrix psi(2, 3);
  psi << 0.1, -0.4, 0.9, 1.2, 0.0, -2.0;
  g.edges_hh.push_back({0, 1, psi});
  Matrix ev(3, 2);
  ev << 0.0, 0.5, -0.5, 0.25, 1.0, 0.0;
  g.edges_hv.push_back({1, 0, ev});

  const auto j = archive::mrf_to_json(g);
  const auto back = archive::mrf_from_json(j);
  CHECK(back.hidden_states == g.hidden_states);
  CHECK(back.visible_states == g.visible_states);
  CHECK((back.edges_hh[0].psi - psi).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back.edges_hv[0].psi - ev).cwiseAbs().maxCoeff() == 0.0);

  CHECK_THROWS(archive::mrf_from_json(nlohmann::json::parse(R"({"hidden": [2],
      "edges_hh": [{"i":0,"j":0,"psi":[[0,0],[0,0]]}]})")));
}

TEST_CASE("unfolded net archives round trip") {
  TempDir tmp;
  mrf::PairwiseMrf g;
  g.hidden_states = {2, 2};
  g.visible_states = {2};
  Matrix psi(2, 2);
  psi << 0.0, 1.0, 2.0, 3.0;
  g.edges_hh.push_back({0, 1, psi});
  g.edges_hv.push_back({0, 0, Matrix::Zero(2, 2)});
  auto net = mrfu::UnfoldedMrfNet::tied_copies(g, 3, {0.5, 2.0}, 0.0);
  net.layers[1].alpha_z = Vector::Constant(2, 0.3);
  net.output_nodes = {1};

  archive::save_unfolded_net(tmp.path / "net", net);
  const auto loaded = archive::load_unfolded_net(tmp.path / "net");
  CHECK(loaded.K() == 3);
  CHECK(loaded.output_nodes == net.output_nodes);
  CHECK(loaded.layers[0].lambda == 0.5);
  CHECK(loaded.layers[0].kappa == 2.0);
  CHECK((loaded.layers[1].alpha_z - net.layers[1].alpha_z).cwiseAbs().maxCoeff() == 0.0);
  CHECK((loaded.layers[2].psi_hh[0] - psi).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("config loading merges and validates") {
  TempDir tmp;
  const auto path = tmp.path / "cfg.json";
  {
    std::ofstream f(path);
    f << R"({"mu": 5.0, "iters": 25, "model": "out"})";
  }
  const std::set<std::string> allowed{"mu", "iters", "model", "seed"};

  const auto cfg = config::load_config(path.string(), {}, allowed);
  CHECK(cfg.get<double>("mu", 0.0) == 5.0);
  CHECK(cfg.get<int>("iters", 0) == 25);
  CHECK(cfg.get<std::string>("model", "") == "out");

  // overrides win over the file
  const auto cfg2 = config::load_config(path.string(), {{"mu", "2.5"}}, allowed);
  CHECK(cfg2.get<double>("mu", 0.0) == 2.5);

  // unknown keys are rejected by name
  try {
    config::load_config(path.string(), {{"betaa1", "1"}}, allowed);
    FAIL("expected an exception");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("betaa1") != std::string::npos);
  }

  {
    std::ofstream f(path);
    f << "{not json";
  }
  CHECK_THROWS_AS(config::load_config(path.string(), {}, allowed), std::runtime_error);
}

TEST_CASE("atomic writes leave no partial files") {
  TempDir tmp;
  archive::atomic_write(tmp.path / "x.txt", "hello");
  std::ifstream f(tmp.path / "x.txt");
  std::string s;
  std::getline(f, s);
  CHECK(s == "hello");
  CHECK_FALSE(fs::exists(tmp.path / "x.txt.tmp"));
}
