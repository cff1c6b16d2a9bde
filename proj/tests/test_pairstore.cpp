#include <cstdio>
#include <fstream>

#include <catch2/catch_amalgamated.hpp>

#include "otfm/flowmatch.hpp"
#include "otfm/pairstore.hpp"

using namespace otfm;

namespace {

flowmatch::SyntheticTask make_task(Index d, std::uint64_t map_seed, std::uint64_t task_seed) {
  flowmatch::SyntheticTask task;
  task.map = synthbench::generate_map(d, map_seed);
  task.seed = task_seed;
  return task;
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("noise regeneration is deterministic and gaussian", "[pairstore]") {
  auto a = pairstore::noise_from_key(1234, 16);
  auto b = pairstore::noise_from_key(1234, 16);
  REQUIRE(a == b);

  // marginals over many regenerated coordinates
  double sum = 0, sumsq = 0;
  const int keys = 7000;
  for (int k = 0; k < keys; ++k) {
    auto v = pairstore::noise_from_key(rng::derive(777, static_cast<std::uint64_t>(k)), 16);
    sum += v.sum();
    sumsq += v.squaredNorm();
  }
  const double count = keys * 16.0;
  double mean = sum / count;
  double var = sumsq / count - mean * mean;
  REQUIRE(std::abs(mean) <= 0.02);
  REQUIRE(var >= 0.97);
  REQUIRE(var <= 1.03);
}

TEST_CASE("precompute writes a readable file with matching counts", "[pairstore]") {
  auto task = make_task(16, 1, 2);
  sinkhorn::SinkhornConfig ot;
  ot.relative_eps = 0.1;
  std::string path = "test_pairs_basic.otpr";
  auto summary = pairstore::precompute(task, 64, ot, 3, path, 42);
  REQUIRE(summary.header.n_total == 192);

  pairstore::PairFileReader reader(path);
  REQUIRE(reader.header().n_total == 192);
  REQUIRE(reader.header().d == 16);
  REQUIRE(reader.header().relative_eps == 0.1);
  REQUIRE(reader.header().mean_entropy == summary.mean_entropy);

  auto batch = reader.read(0, 192);
  REQUIRE(batch.data_ids.size() == 192);
  REQUIRE(batch.noise.n == 192);
  std::remove(path.c_str());
}

TEST_CASE("identity mode pairs record i with noise key i", "[pairstore]") {
  auto task = make_task(16, 3, 4);
  sinkhorn::SinkhornConfig ot;
  std::string path = "test_pairs_identity.otpr";
  pairstore::precompute(task, 64, ot, 1, path, 5, /*identity_coupling=*/true);
  pairstore::PairFileReader reader(path);
  auto records = reader.read_records(0, 64);
  for (Index i = 0; i < 64; ++i) {
    REQUIRE(records[static_cast<std::size_t>(i)].data_id == static_cast<std::uint64_t>(i));
    REQUIRE(records[static_cast<std::size_t>(i)].noise_key ==
            task.noise_key(static_cast<std::uint64_t>(i)));
  }
  std::remove(path.c_str());
}

TEST_CASE("regenerated noise equals the training-side draw", "[pairstore]") {
  auto task = make_task(16, 6, 7);
  sinkhorn::SinkhornConfig ot;
  ot.relative_eps = 0.1;
  std::string path = "test_pairs_noise.otpr";
  pairstore::precompute(task, 32, ot, 1, path, 8);
  pairstore::PairFileReader reader(path);
  auto batch = reader.read(0, 32);
  for (Index i = 0; i < 32; ++i) {
    Eigen::VectorXd direct = task.noise(static_cast<std::uint64_t>(i));
    REQUIRE(batch.noise.mat().row(i).transpose() == direct);
  }
  std::remove(path.c_str());
}

TEST_CASE("seeded precompute runs are byte-identical", "[pairstore]") {
  auto task = make_task(16, 9, 10);
  sinkhorn::SinkhornConfig ot;
  ot.relative_eps = 0.05;
  pairstore::precompute(task, 64, ot, 2, "test_pairs_a.otpr", 11);
  pairstore::precompute(task, 64, ot, 2, "test_pairs_b.otpr", 11);
  REQUIRE(slurp("test_pairs_a.otpr") == slurp("test_pairs_b.otpr"));
  std::remove("test_pairs_a.otpr");
  std::remove("test_pairs_b.otpr");
}

TEST_CASE("corrupt pair files are rejected", "[pairstore]") {
  auto task = make_task(16, 12, 13);
  sinkhorn::SinkhornConfig ot;
  ot.relative_eps = 0.1;
  std::string path = "test_pairs_corrupt.otpr";
  pairstore::precompute(task, 32, ot, 1, path, 14);

  SECTION("bad magic") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("NOPE", 4);
    f.close();
    REQUIRE_THROWS_AS(pairstore::PairFileReader(path), CorruptFile);
  }
  SECTION("truncated records") {
    auto bytes = slurp(path);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 16));
    f.close();
    REQUIRE_THROWS_AS(pairstore::PairFileReader(path), CorruptFile);
  }
  std::remove(path.c_str());
}

TEST_CASE("reading past the end is rejected", "[pairstore]") {
  auto task = make_task(16, 15, 16);
  sinkhorn::SinkhornConfig ot;
  ot.relative_eps = 0.1;
  std::string path = "test_pairs_range.otpr";
  pairstore::precompute(task, 32, ot, 1, path, 17);
  pairstore::PairFileReader reader(path);
  REQUIRE_THROWS_AS(reader.read(16, 32), InvalidArgument);
  std::remove(path.c_str());
}

TEST_CASE("precomputed pairs reproduce the inline training trace", "[pairstore]") {
  // same task seed drives both paths; the loss traces must agree exactly
  auto task = make_task(16, 18, 19);
  const std::uint64_t train_seed = 20;

  flowmatch::TrainConfig cfg;
  cfg.mode = flowmatch::CouplingMode::kBatchOt;
  cfg.relative_eps = 0.1;
  cfg.ot_batch_n = 128;
  cfg.grad_batch = 64;
  cfg.steps = 6;
  cfg.hidden = {32, 32};

  auto inline_run = flowmatch::train(task, cfg, train_seed);

  std::string path = "test_pairs_roundtrip.otpr";
  sinkhorn::SinkhornConfig ot = cfg.ot;
  ot.relative_eps = cfg.relative_eps;
  pairstore::precompute(task, cfg.ot_batch_n, ot, 3, path, train_seed);

  flowmatch::TrainConfig cfg2 = cfg;
  cfg2.pairs_path = path;
  auto stored_run = flowmatch::train(task, cfg2, train_seed);

  REQUIRE(inline_run.log.size() == stored_run.log.size());
  for (std::size_t i = 0; i < inline_run.log.size(); ++i)
    REQUIRE(inline_run.log[i].loss ==
            Catch::Approx(stored_run.log[i].loss).margin(1e-6));
  std::remove(path.c_str());
}
