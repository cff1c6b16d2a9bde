// Precomputed coupled pairs on disk. A record stores only (data_id,
// noise_key): the noise vector is regenerated from its key, bit-identically,
// via the counter-based stream in rng.hpp (two 64-bit words per Box-Muller
// normal pair, 53-bit mantissa uniforms). File layout, little-endian:
//
//   "OTPR" | u32 version | u64 d | u64 n_total | f64 relative_eps
//   | f64 mean_entropy | u32 tag_len | tag bytes
//   | n_total x (u64 data_id, u64 noise_key)
//
// Records are append-only during precompute; mean_entropy is patched into
// the fixed-offset header slot once all batches are solved. A truncated
// file is detected by the record count disagreeing with the header.
#pragma once

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "otfm/binio.hpp"
#include "otfm/common.hpp"
#include "otfm/coupling.hpp"
#include "otfm/rng.hpp"
#include "otfm/sinkhorn.hpp"

namespace otfm::pairstore {

inline constexpr std::uint32_t kPairFileVersion = 1;
inline constexpr std::streamoff kMeanEntropyOffset = 4 + 4 + 8 + 8 + 8;

/// First d outputs of the standard-normal stream keyed by `key`.
inline Eigen::VectorXd noise_from_key(std::uint64_t key, Index d) {
  rng::Stream s(key);
  Eigen::VectorXd v(d);
  for (Index i = 0; i < d; ++i) v(i) = s.normal();
  return v;
}

struct PairRecord {
  std::uint64_t data_id = 0;
  std::uint64_t noise_key = 0;
};

struct PairFileHeader {
  std::uint32_t version = kPairFileVersion;
  Index d = 0;
  std::uint64_t n_total = 0;
  double relative_eps = 0.0;
  double mean_entropy = 0.0;
  std::string generator_tag;
};

class PairFileWriter {
 public:
  PairFileWriter(const std::string& path, const PairFileHeader& header)
      : path_(path), expected_(header.n_total) {
    os_.open(path, std::ios::binary | std::ios::trunc);
    if (!os_) throw Error("PairFileWriter: cannot open " + path);
    os_.write("OTPR", 4);
    binio::put_u32(os_, header.version);
    binio::put_u64(os_, static_cast<std::uint64_t>(header.d));
    binio::put_u64(os_, header.n_total);
    binio::put_f64(os_, header.relative_eps);
    binio::put_f64(os_, header.mean_entropy);
    binio::put_u32(os_, static_cast<std::uint32_t>(header.generator_tag.size()));
    os_.write(header.generator_tag.data(),
              static_cast<std::streamsize>(header.generator_tag.size()));
  }

  void append(const std::vector<PairRecord>& records) {
    for (const auto& r : records) {
      binio::put_u64(os_, r.data_id);
      binio::put_u64(os_, r.noise_key);
    }
    written_ += records.size();
    if (!os_) throw Error("PairFileWriter: write failed for " + path_);
  }

  // one in-place header update; the record region is untouched
  void finalize(double mean_entropy) {
    if (written_ != expected_)
      throw Error("PairFileWriter: record count does not match the header");
    os_.seekp(kMeanEntropyOffset);
    binio::put_f64(os_, mean_entropy);
    os_.close();
    if (os_.fail()) throw Error("PairFileWriter: finalize failed for " + path_);
  }

 private:
  std::string path_;
  std::ofstream os_;
  std::uint64_t expected_ = 0;
  std::uint64_t written_ = 0;
};

class PairFileReader {
 public:
  explicit PairFileReader(const std::string& path) : path_(path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("PairFileReader: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "OTPR", 4) != 0)
      throw CorruptFile("PairFileReader: bad magic");
    header_.version = binio::get_u32(is);
    if (header_.version != kPairFileVersion)
      throw CorruptFile("PairFileReader: unsupported version");
    header_.d = static_cast<Index>(binio::get_u64(is));
    header_.n_total = binio::get_u64(is);
    header_.relative_eps = binio::get_f64(is);
    header_.mean_entropy = binio::get_f64(is);
    std::uint32_t tag_len = binio::get_u32(is);
    if (!is || tag_len > 4096) throw CorruptFile("PairFileReader: bad header");
    header_.generator_tag.resize(tag_len);
    is.read(header_.generator_tag.data(), tag_len);
    records_offset_ = static_cast<std::streamoff>(4 + 4 + 8 + 8 + 8 + 8 + 4 + tag_len);

    auto size = std::filesystem::file_size(path);
    if (size != static_cast<std::uintmax_t>(records_offset_) + 16 * header_.n_total)
      throw CorruptFile("PairFileReader: record count mismatch (truncated or padded file)");
  }

  const PairFileHeader& header() const { return header_; }

  std::vector<PairRecord> read_records(std::uint64_t start, Index count) const {
    if (start + static_cast<std::uint64_t>(count) > header_.n_total)
      throw InvalidArgument("PairFileReader: range beyond n_total");
    std::vector<PairRecord> out(static_cast<std::size_t>(count));
    std::ifstream is(path_, std::ios::binary);
    is.seekg(records_offset_ + static_cast<std::streamoff>(16 * start));
    for (auto& r : out) {
      r.data_id = binio::get_u64(is);
      r.noise_key = binio::get_u64(is);
    }
    if (!is) throw CorruptFile("PairFileReader: short read");
    return out;
  }

  struct Batch {
    std::vector<std::uint64_t> data_ids;
    PointBatch noise;
  };

  /// Records plus the noise vectors regenerated from their keys.
  Batch read(std::uint64_t start, Index count) const {
    auto records = read_records(start, count);
    Batch out;
    out.noise = PointBatch(count, header_.d);
    out.data_ids.reserve(records.size());
    for (Index i = 0; i < count; ++i) {
      const auto& r = records[static_cast<std::size_t>(i)];
      out.data_ids.push_back(r.data_id);
      out.noise.mat().row(i) = noise_from_key(r.noise_key, header_.d).transpose();
    }
    return out;
  }

 private:
  std::string path_;
  PairFileHeader header_;
  std::streamoff records_offset_ = 0;
};

struct PrecomputeSummary {
  PairFileHeader header;
  Index batches = 0;
  double mean_entropy = 0.0;
  Index unconverged_batches = 0;
};

/// Buffers the coupling stage of training into a pair file: per batch, draw
/// n keyed noise vectors and the next n dataset ids, solve the coupling
/// (warm-started across batches), sample one pair per row and append the
/// records. `Dataset` must provide d(), noise_key(slot), noise(slot) and
/// data(id); seeds mirror the training loop so an inline run and a
/// precomputed run see identical pairs.
template <class Dataset, class S = double>
PrecomputeSummary precompute(const Dataset& ds, Index n_per_batch,
                             const sinkhorn::SinkhornConfig& ot_cfg, Index batches,
                             const std::string& out_path, std::uint64_t seed,
                             bool identity_coupling = false,
                             const std::string& generator_tag = "synthetic") {
  if (n_per_batch < 1 || batches < 1) throw InvalidArgument("precompute: empty plan");
  const Index d = ds.d();

  PairFileHeader header;
  header.d = d;
  header.n_total = static_cast<std::uint64_t>(n_per_batch) * static_cast<std::uint64_t>(batches);
  header.relative_eps = identity_coupling ? 0.0 : ot_cfg.relative_eps;
  header.mean_entropy = 0.0;
  header.generator_tag = generator_tag;
  PairFileWriter writer(out_path, header);

  const std::uint64_t pair_key = rng::derive(seed, rng::salt::kPairs);
  std::optional<sinkhorn::DualPotentials> prev_duals;
  PointBatch prev_x0, prev_x1;
  double entropy_sum = 0.0;
  Index unconverged = 0;

  for (Index b = 0; b < batches; ++b) {
    const std::uint64_t base =
        static_cast<std::uint64_t>(b) * static_cast<std::uint64_t>(n_per_batch);
    PointBatch x0(n_per_batch, d), x1(n_per_batch, d);
    std::vector<std::uint64_t> keys(static_cast<std::size_t>(n_per_batch));
    for (Index i = 0; i < n_per_batch; ++i) {
      const std::uint64_t slot = base + static_cast<std::uint64_t>(i);
      keys[static_cast<std::size_t>(i)] = ds.noise_key(slot);
      x0.mat().row(i) = ds.noise(slot).transpose();
      x1.mat().row(i) = ds.data(slot).transpose();
    }

    std::vector<PairRecord> records(static_cast<std::size_t>(n_per_batch));
    if (identity_coupling) {
      for (Index i = 0; i < n_per_batch; ++i)
        records[static_cast<std::size_t>(i)] = {base + static_cast<std::uint64_t>(i),
                                                keys[static_cast<std::size_t>(i)]};
      entropy_sum += 0.0;
    } else {
      std::optional<sinkhorn::DualPotentials> init;
      if (prev_duals)
        init = sinkhorn::extend_warmstart(*prev_duals, prev_x0, prev_x1, x0, x1,
                                          ot_cfg.shard_size);
      auto solved = sinkhorn::solve<S>(x0, x1, ot_cfg, init);
      if (!solved.report.converged) ++unconverged;
      auto pairs = coupling::sample_pairs(solved.duals, x0, x1,
                                          rng::derive(pair_key, static_cast<std::uint64_t>(b)),
                                          ot_cfg.shard_size);
      entropy_sum += coupling::renormalized_entropy(solved.duals, x0, x1, ot_cfg.shard_size);
      for (Index i = 0; i < n_per_batch; ++i)
        records[static_cast<std::size_t>(i)] = {
            base + static_cast<std::uint64_t>(pairs.pairs[static_cast<std::size_t>(i)]),
            keys[static_cast<std::size_t>(i)]};
      prev_duals = std::move(solved.duals);
      prev_x0 = x0;
      prev_x1 = x1;
    }
    writer.append(records);
  }

  PrecomputeSummary summary;
  summary.batches = batches;
  summary.mean_entropy = entropy_sum / static_cast<double>(batches);
  summary.unconverged_batches = unconverged;
  writer.finalize(summary.mean_entropy);
  header.mean_entropy = summary.mean_entropy;
  summary.header = header;
  return summary;
}

}  // namespace otfm::pairstore
