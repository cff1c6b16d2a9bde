// Command-line surface: coupling benchmarks, flow-matching training,
// metric evaluation, the scaling-bound experiment, map generation and
// pair precomputation. All outputs are machine-parseable CSV (header row)
// or JSON with stable key order.
//
// Exit codes: 0 ok, 1 user/configuration error, 2 numerical failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "otfm/bound.hpp"
#include "otfm/coupling.hpp"
#include "otfm/flowmatch.hpp"
#include "otfm/metrics.hpp"
#include "otfm/pairstore.hpp"
#include "otfm/sinkhorn.hpp"
#include "otfm/synthbench.hpp"
#include "otfm/thread_pool.hpp"

namespace {

using namespace otfm;

struct OutStream {
  std::ofstream file;
  std::ostream* os = &std::cout;

  explicit OutStream(const std::string& path) {
    if (!path.empty()) {
      file.open(path);
      if (!file) throw Error("cannot open output file " + path);
      os = &file;
    }
  }
  template <class T>
  OutStream& operator<<(const T& v) {
    (*os) << v;
    return *this;
  }
};

std::vector<double> parse_eps_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    out.push_back(std::stod(tok));
  }
  if (out.empty()) throw Error("empty --relative-eps list");
  return out;
}

std::vector<Index> parse_index_list(const std::string& s) {
  std::vector<Index> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    out.push_back(static_cast<Index>(std::stoll(tok)));
  }
  return out;
}

metrics::SolverSpec parse_solver(const std::string& s) {
  if (s.rfind("euler:", 0) == 0)
    return metrics::SolverSpec::euler(static_cast<Index>(std::stoll(s.substr(6))));
  if (s == "euler") return metrics::SolverSpec::euler(50);
  if (s == "dopri5") return metrics::SolverSpec::dopri5();
  throw Error("unknown solver spec '" + s + "' (expected euler:<k> or dopri5)");
}

synthbench::PiecewiseBrenierMap obtain_map(const std::string& map_path, Index d,
                                           std::optional<std::uint64_t> gen_seed) {
  if (gen_seed) {
    auto map = synthbench::generate_map(d, *gen_seed);
    if (!map_path.empty()) synthbench::save_map(map, map_path);
    return map;
  }
  if (map_path.empty() || !std::filesystem::exists(map_path))
    throw Error("map file not found: '" + map_path + "' (use --gen-map <seed> to create one)");
  return synthbench::load_map(map_path);
}

// ---------------------------------------------------------------------------
// couple
// ---------------------------------------------------------------------------

struct CoupleOpts {
  Index n = 4096;
  Index d = 32;
  std::string eps_list = "0.1";
  std::string task = "gaussian";
  Index pca_k = 0;
  bool warmstart = false;
  Index batches = 1;
  std::uint64_t seed = 0;
  std::string out;
  std::string precision = "f64";
  double tau = 1e-3;
  Index max_iters = 50000;
  Index shard_size = 1024;
};

template <class S>
void run_couple_at(const CoupleOpts& opt, double rel_eps, OutStream& out) {
  synthbench::PiecewiseBrenierMap map;
  bool piecewise = false;
  if (opt.task.rfind("piecewise:", 0) == 0) {
    map = synthbench::load_map(opt.task.substr(10));
    if (map.d != opt.d) throw Error("--d does not match the map dimension");
    piecewise = true;
  } else if (opt.task != "gaussian") {
    throw Error("unknown task '" + opt.task + "'");
  }

  sinkhorn::SinkhornConfig cfg;
  cfg.relative_eps = rel_eps;
  cfg.tau = opt.tau;
  cfg.max_iters = opt.max_iters;
  cfg.shard_size = opt.shard_size;
  cfg.seed = opt.seed;
  if (opt.pca_k > 0) cfg.use_pca = opt.pca_k;

  std::optional<sinkhorn::DualPotentials> prev;
  PointBatch prev_x, prev_y;
  for (Index b = 0; b < opt.batches; ++b) {
    std::uint64_t bkey = rng::derive(opt.seed, static_cast<std::uint64_t>(b));
    PointBatch X = synthbench::gaussian_batch(opt.n, opt.d, rng::derive(bkey, rng::salt::kNoise));
    PointBatch Y = synthbench::gaussian_batch(opt.n, opt.d, rng::derive(bkey, rng::salt::kData));
    if (piecewise) Y = synthbench::apply_map(map, Y);

    std::optional<sinkhorn::DualPotentials> init;
    if (opt.warmstart && prev)
      init = sinkhorn::extend_warmstart(*prev, prev_x, prev_y, X, Y, cfg.shard_size);
    auto res = sinkhorn::solve<S>(X, Y, cfg, init);
    if (!res.report.converged)
      std::cerr << "warning: batch " << b << " not converged (err=" << res.report.final_l1_error
                << ")\n";

    coupling::CouplingStats stats;
    if (res.pca) {
      // entropy and sampling live in the projected space when PCA is on
      PointBatch Xp = geometry::pca_project(*res.pca, X);
      PointBatch Yp = geometry::pca_project(*res.pca, Y);
      stats = coupling::stats(res.duals, Xp, Yp, cfg.shard_size);
    } else {
      stats = coupling::stats(res.duals, X, Y, cfg.shard_size);
    }
    out << coupling::csv_row(stats, rel_eps, res.report) << "\n";

    if (opt.warmstart) {
      prev = std::move(res.duals);
      prev_x = std::move(X);
      prev_y = std::move(Y);
    }
  }
}

int run_couple(const CoupleOpts& opt) {
  auto eps_values = parse_eps_list(opt.eps_list);
  for (double e : eps_values)
    if (e < 0.001 || e > 1.0)
      std::cerr << "warning: relative eps " << e
                << " is outside the recommended grid [0.001, 1.0]\n";
  OutStream out(opt.out);
  out << coupling::csv_header() << "\n";
  for (double e : eps_values) {
    if (opt.precision == "f32")
      run_couple_at<float>(opt, e, out);
    else
      run_couple_at<double>(opt, e, out);
  }
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainOpts {
  Index d = 32;
  std::string mode = "otfm";
  Index ot_n = 4096;
  double relative_eps = 0.01;
  Index steps = 8192;
  double lr = 1e-3;
  Index grad_batch = 2048;
  std::string map_path;
  std::optional<std::uint64_t> gen_map;
  std::string pairs;
  std::string out_ckpt = "model.otvf";
  std::string log_path;
  std::uint64_t seed = 0;
  std::string precision = "f32";
  double tau = 1e-3;
  Index max_iters = 50000;
  Index shard_size = 1024;
  bool no_warmstart = false;
};

template <class S>
int run_train_typed(const TrainOpts& opt, const flowmatch::SyntheticTask& task,
                    const flowmatch::TrainConfig& cfg) {
  auto result = flowmatch::train<S>(task, cfg, opt.seed);
  flowmatch::save_checkpoint(result.net, opt.out_ckpt);
  OutStream log(opt.log_path);
  log << flowmatch::log_csv_header() << "\n";
  for (const auto& row : result.log) log << flowmatch::log_csv_row(row) << "\n";
  return 0;
}

int run_train(const TrainOpts& opt) {
  flowmatch::TrainConfig cfg;
  if (opt.mode == "ifm")
    cfg.mode = flowmatch::CouplingMode::kIndependent;
  else if (opt.mode == "otfm")
    cfg.mode = flowmatch::CouplingMode::kBatchOt;
  else if (opt.mode == "paired")
    cfg.mode = flowmatch::CouplingMode::kPaired;
  else
    throw Error("unknown mode '" + opt.mode + "'");
  if (!opt.pairs.empty() && cfg.mode != flowmatch::CouplingMode::kBatchOt)
    throw Error("--pairs requires --mode otfm");

  cfg.relative_eps = opt.relative_eps;
  cfg.ot_batch_n = opt.ot_n;
  cfg.grad_batch = opt.grad_batch;
  cfg.steps = opt.steps;
  cfg.lr = opt.lr;
  cfg.pairs_path = opt.pairs;
  cfg.warmstart = !opt.no_warmstart;
  cfg.ot.tau = opt.tau;
  cfg.ot.max_iters = opt.max_iters;
  cfg.ot.shard_size = opt.shard_size;
  cfg.validate();

  flowmatch::SyntheticTask task;
  task.map = obtain_map(opt.map_path, opt.d, opt.gen_map);
  if (task.map.d != opt.d) throw Error("--d does not match the map dimension");
  task.seed = opt.seed;

  if (opt.precision == "f32") return run_train_typed<float>(opt, task, cfg);
  return run_train_typed<double>(opt, task, cfg);
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalOpts {
  std::string ckpt;
  std::string map_path;
  std::string solver = "euler:50";
  std::string metrics_list = "curvature,reconstruction,bpd";
  Index n = 1024;
  std::uint64_t seed = 0;
  Index hutchinson_k = 8;
  std::string out;
  std::string run_id = "eval";
};

int run_eval(const EvalOpts& opt) {
  auto net = flowmatch::load_checkpoint(opt.ckpt);
  metrics::MlpField field{&net};
  auto spec = parse_solver(opt.solver);

  bool want_curv = opt.metrics_list.find("curvature") != std::string::npos;
  bool want_rec = opt.metrics_list.find("reconstruction") != std::string::npos;
  bool want_bpd = opt.metrics_list.find("bpd") != std::string::npos;

  std::optional<synthbench::PiecewiseBrenierMap> map;
  if (!opt.map_path.empty()) map = synthbench::load_map(opt.map_path);
  if ((want_rec || want_bpd) && !map)
    throw Error("--map is required for reconstruction and bpd");

  PointBatch X0 = synthbench::gaussian_batch(opt.n, net.d, rng::derive(opt.seed, 1));
  metrics::MetricReport report;
  Index euler_steps = spec.kind == metrics::SolverSpec::Kind::kEuler ? spec.n_steps : 50;

  if (want_curv) {
    report.curvature = metrics::curvature(field, X0, euler_steps);
    report.nfe += euler_steps * X0.n;
  }
  if (want_rec) {
    Index nfe = 0;
    if (spec.kind == metrics::SolverSpec::Kind::kDopri5) {
      for (Index i = 0; i < X0.n; ++i) {
        auto traj = metrics::integrate_dopri5(field, X0.row(i).eval(), spec.rtol, spec.atol);
        nfe += traj.nfe;
      }
    } else {
      nfe = spec.n_steps * X0.n;
    }
    report.reconstruction = metrics::reconstruction_loss(field, *map, X0, spec);
    report.nfe += nfe;
  }
  if (want_bpd) {
    PointBatch X1 = synthbench::apply_map(
        *map, synthbench::gaussian_batch(opt.n, net.d, rng::derive(opt.seed, 2)));
    auto nll = metrics::nll_bpd(field, X1, opt.hutchinson_k, euler_steps, opt.seed);
    report.nll = nll.nll;
    report.bpd = nll.bpd;
    report.nfe += nll.nfe;
  }

  OutStream out(opt.out);
  const bool json = opt.out.size() > 5 && opt.out.substr(opt.out.size() - 5) == ".json";
  if (json) {
    nlohmann::ordered_json j;
    j["run_id"] = opt.run_id;
    j["checkpoint"] = opt.ckpt;
    j["solver"] = opt.solver;
    j["n_steps"] = euler_steps;
    j["curvature"] = report.curvature;
    j["reconstruction"] = report.reconstruction;
    j["nll"] = report.nll;
    j["bpd"] = report.bpd;
    j["nfe"] = report.nfe;
    out << j.dump(2) << "\n";
  } else {
    out << metrics::report_csv_header() << "\n"
        << metrics::report_csv_row(opt.run_id, opt.ckpt, opt.solver, euler_steps, report) << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------
// bound
// ---------------------------------------------------------------------------

struct BoundOpts {
  Index r = 2;
  Index d = 16;
  std::string n_grid = "64,128,256,512,1024,2048,4096";
  Index trials = 50;
  std::uint64_t seed = 0;
  std::string out;
};

int run_bound(const BoundOpts& opt) {
  auto grid = parse_index_list(opt.n_grid);
  bound::ManifoldGenerator gen(opt.r, opt.d, opt.seed);
  auto fit = bound::estimate_scaling(gen, grid, opt.trials, opt.seed);
  OutStream out(opt.out);
  out << bound::csv_rows(fit);
  std::cerr << "slope=" << fit.slope << " (target " << -2.0 / static_cast<double>(opt.r) << ")\n";
  return 0;
}

// ---------------------------------------------------------------------------
// precompute
// ---------------------------------------------------------------------------

struct PrecomputeOpts {
  Index d = 32;
  Index n = 4096;
  Index batches = 1;
  double relative_eps = 0.01;
  std::string map_path;
  std::optional<std::uint64_t> gen_map;
  std::uint64_t seed = 0;
  std::string out = "pairs.otpr";
  bool identity = false;
  std::string precision = "f32";
  double tau = 1e-3;
  Index max_iters = 50000;
  Index shard_size = 1024;
};

int run_precompute(const PrecomputeOpts& opt) {
  flowmatch::SyntheticTask task;
  task.map = obtain_map(opt.map_path, opt.d, opt.gen_map);
  task.seed = opt.seed;
  sinkhorn::SinkhornConfig cfg;
  cfg.relative_eps = opt.relative_eps;
  cfg.tau = opt.tau;
  cfg.max_iters = opt.max_iters;
  cfg.shard_size = opt.shard_size;
  pairstore::PrecomputeSummary summary;
  if (opt.precision == "f32")
    summary = pairstore::precompute<flowmatch::SyntheticTask, float>(
        task, opt.n, cfg, opt.batches, opt.out, opt.seed, opt.identity);
  else
    summary = pairstore::precompute<flowmatch::SyntheticTask, double>(
        task, opt.n, cfg, opt.batches, opt.out, opt.seed, opt.identity);
  std::cerr << "wrote " << summary.header.n_total << " records, mean entropy "
            << summary.mean_entropy << ", unconverged batches " << summary.unconverged_batches
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Shard-parallel entropic OT coupling engine for flow matching"};
  app.require_subcommand(1);
  app.set_config("--config", "", "key=value config file mirroring the flags (flags override)");
  app.allow_config_extras(false);

  int threads = 0;
  app.add_option("--threads", threads, "worker pool cap (OTFM_THREADS env overrides)");

  CoupleOpts copt;
  auto* couple = app.add_subcommand("couple", "run coupling batches, print stats CSV");
  couple->add_option("--n", copt.n, "points per side");
  couple->add_option("--d", copt.d, "ambient dimension");
  couple->add_option("--relative-eps", copt.eps_list, "comma-separated relative eps values");
  couple->add_option("--task", copt.task, "gaussian | piecewise:<mapfile>");
  couple->add_option("--pca-k", copt.pca_k, "project to k PCA dims before solving");
  couple->add_flag("--warmstart", copt.warmstart, "warm-start across batches");
  couple->add_option("--batches", copt.batches, "number of batches");
  couple->add_option("--seed", copt.seed, "RNG seed");
  couple->add_option("--out", copt.out, "output CSV path (default stdout)");
  couple->add_option("--precision", copt.precision)->check(CLI::IsMember({"f32", "f64"}));
  couple->add_option("--tau", copt.tau, "L1 marginal tolerance");
  couple->add_option("--max-iters", copt.max_iters);
  couple->add_option("--shard-size", copt.shard_size);

  TrainOpts topt;
  auto* train = app.add_subcommand("train", "train a velocity field");
  train->add_option("--d", topt.d);
  train->add_option("--mode", topt.mode)->check(CLI::IsMember({"ifm", "otfm", "paired"}));
  train->add_option("--ot-n", topt.ot_n, "OT coupling batch size");
  train->add_option("--relative-eps", topt.relative_eps);
  train->add_option("--steps", topt.steps, "gradient steps");
  train->add_option("--lr", topt.lr);
  train->add_option("--grad-batch", topt.grad_batch);
  train->add_option("--map", topt.map_path, "ground-truth map file");
  std::uint64_t gm_seed = 0;
  auto* gm = train->add_option("--gen-map", gm_seed, "generate the map with this seed");
  train->add_option("--pairs", topt.pairs, "precomputed pair file (otfm only)");
  train->add_option("--out-ckpt", topt.out_ckpt);
  train->add_option("--log", topt.log_path, "training log CSV");
  train->add_option("--seed", topt.seed);
  train->add_option("--precision", topt.precision)->check(CLI::IsMember({"f32", "f64"}));
  train->add_option("--tau", topt.tau);
  train->add_option("--max-iters", topt.max_iters);
  train->add_option("--shard-size", topt.shard_size);
  train->add_flag("--no-warmstart", topt.no_warmstart);

  EvalOpts eopt;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--ckpt", eopt.ckpt)->required();
  eval->add_option("--map", eopt.map_path);
  eval->add_option("--solver", eopt.solver, "euler:<k> | dopri5");
  eval->add_option("--metrics", eopt.metrics_list, "subset of curvature,reconstruction,bpd");
  eval->add_option("--n", eopt.n, "evaluation points");
  eval->add_option("--seed", eopt.seed);
  eval->add_option("--hutchinson-k", eopt.hutchinson_k);
  eval->add_option("--out", eopt.out, "CSV (default) or .json output");
  eval->add_option("--run-id", eopt.run_id);

  BoundOpts bopt;
  auto* bnd = app.add_subcommand("bound", "scaling of the minimum inter-batch distance");
  bnd->add_option("--r", bopt.r, "intrinsic dimension");
  bnd->add_option("--d", bopt.d, "ambient dimension");
  bnd->add_option("--n-grid", bopt.n_grid, "comma-separated batch sizes");
  bnd->add_option("--trials", bopt.trials, "trials per grid point (>= 20)");
  bnd->add_option("--seed", bopt.seed);
  bnd->add_option("--out", bopt.out);

  PrecomputeOpts popt;
  auto* pre = app.add_subcommand("precompute", "persist coupled pairs as (data_id, noise_key)");
  pre->add_option("--d", popt.d);
  pre->add_option("--n", popt.n, "points per batch");
  pre->add_option("--batches", popt.batches);
  pre->add_option("--relative-eps", popt.relative_eps);
  pre->add_option("--map", popt.map_path);
  std::uint64_t pre_gm_seed = 0;
  auto* pre_gm = pre->add_option("--gen-map", pre_gm_seed);
  pre->add_option("--seed", popt.seed);
  pre->add_option("--out", popt.out);
  pre->add_flag("--identity", popt.identity, "identity coupling (I-FM degenerate case)");
  pre->add_option("--precision", popt.precision)->check(CLI::IsMember({"f32", "f64"}));
  pre->add_option("--tau", popt.tau);
  pre->add_option("--max-iters", popt.max_iters);
  pre->add_option("--shard-size", popt.shard_size);

  struct GenmapOpts {
    Index d = 32;
    std::uint64_t seed = 0;
    std::string out = "map.pbmp";
  } gopt;
  auto* genmap = app.add_subcommand("genmap", "generate and save a benchmark map");
  genmap->add_option("--d", gopt.d);
  genmap->add_option("--seed", gopt.seed);
  genmap->add_option("--out", gopt.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  // env var wins over the flag
  if (threads > 0 && std::getenv("OTFM_THREADS") == nullptr)
    setenv("OTFM_THREADS", std::to_string(threads).c_str(), 0);

  try {
    if (couple->parsed()) return run_couple(copt);
    if (train->parsed()) {
      if (gm->count() > 0) topt.gen_map = gm_seed;
      return run_train(topt);
    }
    if (eval->parsed()) return run_eval(eopt);
    if (bnd->parsed()) return run_bound(bopt);
    if (pre->parsed()) {
      if (pre_gm->count() > 0) popt.gen_map = pre_gm_seed;
      return run_precompute(popt);
    }
    if (genmap->parsed()) {
      synthbench::save_map(synthbench::generate_map(gopt.d, gopt.seed), gopt.out);
      std::cerr << "wrote " << gopt.out << " (d=" << gopt.d
                << ", k=" << std::max<Index>(1, gopt.d / 16) << ")\n";
      return 0;
    }
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
