// Command-line entry points: NMF base training, deep network training,
// separation, SDR evaluation, the synthetic experiment grid, and MRF
// inference/training.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "unfold/archive.hpp"
#include "unfold/config.hpp"
#include "unfold/deep_nmf.hpp"
#include "unfold/eval.hpp"
#include "unfold/mrf.hpp"
#include "unfold/mrf_unfold.hpp"
#include "unfold/numerics.hpp"
#include "unfold/snmf.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace unfold;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Overrides = std::vector<std::pair<std::string, std::string>>;

Overrides parse_overrides(const std::vector<std::string>& sets) {
  Overrides out;
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0)
      throw UsageError("--set expects key=value, got '" + kv + "'");
    out.push_back({kv.substr(0, eq), kv.substr(eq + 1)});
  }
  return out;
}

void write_wav_atomic(const fs::path& path, const audio::Waveform& wave) {
  const fs::path tmp = path.string() + ".tmp";
  audio::write_wav(tmp.string(), wave);
  fs::rename(tmp, path);
}

Matrix stacked_features_of_wavs(const std::vector<std::string>& paths, int context) {
  std::vector<Matrix> blocks;
  Eigen::Index cols = 0;
  for (const auto& p : paths) {
    const auto stack =
        audio::stack_context(audio::stft_magnitude(audio::read_wav(p)), context);
    cols += stack.M_stacked.cols();
    blocks.push_back(stack.M_stacked);
  }
  if (blocks.empty()) throw std::runtime_error("no input waveforms given");
  Matrix out(blocks.front().rows(), cols);
  Eigen::Index at = 0;
  for (const auto& b : blocks) {
    out.middleCols(at, b.cols()) = b;
    at += b.cols();
  }
  return out;
}

int cmd_param_count(long long T, long long F, long long R, long long C) {
  const auto [pd, p] = deepnmf::parameter_counts(T, F, R, C);
  std::printf("P_D=%lld P=%lld\n", pd, p);
  return kExitOk;
}

int cmd_train_snmf(const std::string& config_path, const Overrides& overrides) {
  const std::set<std::string> keys{"sources", "R",    "mu",   "beta1", "iters",
                                   "context", "K",    "seed", "out"};
  const auto cfg = config::load_config(config_path, overrides, keys);
  const int R = cfg.get_required<int>("R");
  const int context = cfg.get<int>("context", 9);
  snmf::SnmfConfig scfg;
  scfg.mu = cfg.get<double>("mu", 5.0);
  scfg.beta1 = cfg.get<double>("beta1", 1.0);
  scfg.iters = cfg.get<int>("iters", 30);
  scfg.seed = cfg.seed();

  snmf::SourceBases bases;
  for (const auto& src : cfg.values.at("sources")) {
    const std::string name = src.at("name");
    const auto wavs = src.at("wavs").get<std::vector<std::string>>();
    const Matrix S = stacked_features_of_wavs(wavs, context);
    snmf::SnmfConfig per = scfg;
    per.seed = derive_seed(scfg.seed, std::hash<std::string>{}(name));
    bases.append(name, snmf::train_bases(S, R, per));
    std::fprintf(stderr, "trained %s bases: %dx%d\n", name.c_str(),
                 static_cast<int>(bases.W.rows()), R);
  }
  auto net = deepnmf::build_network(bases, cfg.get<int>("K", 25), 0, scfg.mu, context,
                                    scfg.seed);
  net.beta1 = scfg.beta1;
  archive::save_model(cfg.get_required<std::string>("out"), net);
  return kExitOk;
}

int cmd_train_deep(const std::string& config_path, const Overrides& overrides) {
  const std::set<std::string> keys{"model", "out",    "K",    "C",
                                   "mu",    "epochs", "seed", "pairs"};
  const auto cfg = config::load_config(config_path, overrides, keys);
  auto base = archive::load_model(cfg.get_required<std::string>("model"));
  const int K = cfg.get<int>("K", base.K);
  const int C = cfg.get_required<int>("C");
  auto net = deepnmf::build_network(base.tied, K, C, cfg.get<double>("mu", base.mu),
                                    base.context, cfg.seed(), base.speech_index);

  std::vector<deepnmf::TrainingSample> data;
  for (const auto& pair : cfg.values.at("pairs")) {
    const auto mix = audio::read_wav(pair.at("mix"));
    const auto speech = audio::read_wav(pair.at("speech"));
    const auto ms = audio::stack_context(audio::stft_magnitude(mix), base.context);
    const auto ss = audio::stack_context(audio::stft_magnitude(speech), base.context);
    data.push_back({ms.M_stacked, ms.M_last, ss.M_last});
  }
  const int epochs = cfg.get<int>("epochs", 8);
  const auto losses = deepnmf::train(net, data, epochs);
  std::fprintf(stderr, "loss: %.6g -> %.6g over %d epochs\n", losses.front(),
               losses.back(), epochs);
  archive::save_model(cfg.get_required<std::string>("out"), net);
  return kExitOk;
}

int cmd_separate(const std::string& model, const std::string& in, const std::string& out,
                 int source, std::uint64_t seed) {
  auto net = archive::load_model(model);
  net.speech_index = source;
  const auto mix = audio::read_wav(in);
  const auto est = eval::separate_waveform(net, mix, seed == 0 ? net.seed : seed);
  write_wav_atomic(out, est);
  return kExitOk;
}

int cmd_eval(const std::string& ref_path, const std::string& est_path) {
  const double v = eval::sdr(audio::read_wav(ref_path), audio::read_wav(est_path));
  std::printf("SDR_dB=%.6f\n", v);
  return kExitOk;
}

int cmd_experiment(const std::string& config_path, const Overrides& overrides) {
  const std::set<std::string> keys{"grid",       "snrs",   "n_train", "n_eval",
                                   "seconds",    "context", "mu",      "beta1",
                                   "snmf_iters", "epochs",  "seed",    "jobs",
                                   "out_dir"};
  const auto cfg = config::load_config(config_path, overrides, keys);
  eval::ExperimentConfig ecfg;
  if (cfg.has("grid")) {
    ecfg.grid.clear();
    for (const auto& cell : cfg.values.at("grid"))
      ecfg.grid.push_back({cell.at("K"), cell.at("C"), cell.at("R")});
  }
  ecfg.snrs = cfg.get<std::vector<double>>("snrs", ecfg.snrs);
  ecfg.n_train = cfg.get<int>("n_train", ecfg.n_train);
  ecfg.n_eval = cfg.get<int>("n_eval", ecfg.n_eval);
  ecfg.seconds = cfg.get<double>("seconds", ecfg.seconds);
  ecfg.context = cfg.get<int>("context", ecfg.context);
  ecfg.mu = cfg.get<double>("mu", ecfg.mu);
  ecfg.beta1 = cfg.get<double>("beta1", ecfg.beta1);
  ecfg.snmf_iters = cfg.get<int>("snmf_iters", ecfg.snmf_iters);
  ecfg.epochs = cfg.get<int>("epochs", ecfg.epochs);
  if (cfg.seed() != 0) ecfg.seed = cfg.seed();
  ecfg.jobs = cfg.get<int>("jobs", ecfg.jobs);

  const auto report = eval::run_experiment(ecfg);
  const std::string table = eval::report_table(report);
  std::fputs(table.c_str(), stdout);
  if (cfg.has("out_dir")) {
    const fs::path dir = cfg.get_required<std::string>("out_dir");
    fs::create_directories(dir);
    archive::atomic_write(dir / "report.csv", eval::report_csv(report));
    archive::atomic_write(dir / "report.txt", table);
  }
  return kExitOk;
}

int cmd_mrf_infer(const std::string& graph_path, const std::string& observed,
                  double lambda, double kappa, double rho, int iters) {
  const auto g = archive::load_mrf(graph_path);
  std::vector<int> v;
  for (const auto& item : json::parse(observed)) v.push_back(item.get<int>());
  mrf::StyleMap style;
  style.global = {lambda, kappa < 0 ? kInf : kappa};
  const auto state =
      mrf::run_inference(g, v, style, mrf::ScheduleParams::synchronous(rho), iters);
  json out = json::array();
  for (const auto& q : state.belief) out.push_back(q);
  std::printf("%s\n", out.dump().c_str());
  return kExitOk;
}

int cmd_mrf_train(const std::string& config_path, const Overrides& overrides) {
  const std::set<std::string> keys{
      "graph",  "K",    "lambda",      "kappa",        "rho", "loss", "output_nodes",
      "data",   "epochs", "step",      "train_alpha",  "train_lambda", "out", "seed"};
  const auto cfg = config::load_config(config_path, overrides, keys);
  const auto g = archive::load_mrf(cfg.get_required<std::string>("graph"));
  const double kappa_raw = cfg.get<double>("kappa", 1.0);
  auto net = mrfu::UnfoldedMrfNet::tied_copies(
      g, cfg.get<int>("K", 2),
      {cfg.get<double>("lambda", 0.0), kappa_raw < 0 ? kInf : kappa_raw},
      cfg.get<double>("rho", 1.0));
  if (cfg.has("output_nodes"))
    net.output_nodes = cfg.get<std::vector<int>>("output_nodes", {});

  std::vector<mrfu::UnfoldedSample> data;
  for (const auto& item : cfg.values.at("data")) {
    mrfu::UnfoldedSample sample;
    sample.v = item.at("v").get<std::vector<int>>();
    for (const auto& target : item.at("targets"))
      sample.targets.push_back(target.get<std::vector<double>>());
    data.push_back(std::move(sample));
  }
  const std::string loss_name = cfg.get<std::string>("loss", "l2");
  const auto loss = loss_name == "cross_entropy" ? mrfu::LossKind::kCrossEntropy
                                                 : mrfu::LossKind::kSquaredError;
  mrfu::TrainOptions opt;
  opt.train_alpha = cfg.get<bool>("train_alpha", false);
  opt.train_lambda = cfg.get<bool>("train_lambda", false);
  const auto losses = mrfu::train_unfolded(net, data, loss, cfg.get<int>("epochs", 100),
                                           cfg.get<double>("step", 0.5), opt);
  std::printf("loss_initial=%.8g loss_final=%.8g\n", losses.front(), losses.back());
  if (cfg.has("out"))
    archive::save_unfolded_net(cfg.get_required<std::string>("out"), net);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deep unfolding toolkit: deep NMF separation and unfolded MRF nets"};
  app.require_subcommand(0, 1);

  long long T = 0, F = 0, R = 0, C = 0;
  auto* pc = app.add_subcommand("param-count", "parameter counts of a topology");
  pc->add_option("--T", T, "context frames")->required();
  pc->add_option("--F", F, "feature bins")->required();
  pc->add_option("--R", R, "total basis count over sources")->required();
  pc->add_option("--C", C, "discriminatively trained layers")->required();

  std::string config_path, set_model, set_in, set_out, set_ref, set_est;
  std::vector<std::string> sets;
  int source = 0;
  std::uint64_t seed = 0;

  auto* ts = app.add_subcommand("train-snmf", "train per-source bases from WAVs");
  ts->add_option("--config", config_path, "JSON config")->required();
  ts->add_option("--set", sets, "override config key=value");

  auto* td = app.add_subcommand("train-deep", "discriminatively train untied layers");
  td->add_option("--config", config_path, "JSON config")->required();
  td->add_option("--set", sets, "override config key=value");

  auto* sp = app.add_subcommand("separate", "separate a mixture WAV with a model");
  sp->add_option("--model", set_model, "model archive directory")->required();
  sp->add_option("--in", set_in, "mixture WAV")->required();
  sp->add_option("--out", set_out, "estimate WAV")->required();
  sp->add_option("--source", source, "source index to reconstruct");
  sp->add_option("--seed", seed, "activation init seed override");

  auto* ev = app.add_subcommand("eval", "SDR of an estimate against a reference");
  ev->add_option("--ref", set_ref, "reference WAV")->required();
  ev->add_option("--est", set_est, "estimate WAV")->required();

  auto* ex = app.add_subcommand("experiment", "synthetic separation grid");
  ex->add_option("--config", config_path, "JSON config");
  ex->add_option("--set", sets, "override config key=value");

  std::string graph_path, observed = "[]";
  double lambda = 1.0, kappa = 1.0, rho = 1.0;
  int iters = 10;
  auto* mi = app.add_subcommand("mrf-infer", "message-passing inference on an MRF");
  mi->add_option("--graph", graph_path, "MRF JSON description")->required();
  mi->add_option("--observed", observed, "visible assignment as a JSON array");
  mi->add_option("--lambda", lambda, "BP(1) to MF(0) exponent");
  mi->add_option("--kappa", kappa, "sum(1) to max(-1 for inf) exponent");
  mi->add_option("--rho", rho, "schedule blend exponent");
  mi->add_option("--iters", iters, "inference rounds");

  auto* mt = app.add_subcommand("mrf-train", "train an unfolded inference net");
  mt->add_option("--config", config_path, "JSON config")->required();
  mt->add_option("--set", sets, "override config key=value");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    const auto overrides = parse_overrides(sets);
    if (pc->parsed()) return cmd_param_count(T, F, R, C);
    if (ts->parsed()) return cmd_train_snmf(config_path, overrides);
    if (td->parsed()) return cmd_train_deep(config_path, overrides);
    if (sp->parsed()) return cmd_separate(set_model, set_in, set_out, source, seed);
    if (ev->parsed()) return cmd_eval(set_ref, set_est);
    if (ex->parsed()) return cmd_experiment(config_path, overrides);
    if (mi->parsed())
      return cmd_mrf_infer(graph_path, observed, lambda, kappa, rho, iters);
    if (mt->parsed()) return cmd_mrf_train(config_path, overrides);
    std::fputs(app.help().c_str(), stderr);
    return kExitUsage;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitData;
  }
}
