#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <vector>

#include "nestrq/quantizer.hpp"
#include "oracle_helpers.hpp"

using namespace nestrq;

namespace {

Tensor random_frames(int T, int F, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t = Tensor::zeros({T, F});
  for (auto& v : t.values()) v = rng.normal();
  return t;
}

// A quantizer with identity-ish standardization so tests control the inputs.
RandomProjectionQuantizer unit_standardizer(RandomProjectionQuantizer q) {
  q.mean.assign(static_cast<std::size_t>(q.in_dim()), 0.0);
  q.stddev.assign(static_cast<std::size_t>(q.in_dim()), 1.0);
  return q;
}

}  // namespace

TEST_CASE("stack_frames drops the remainder and concatenates in order") {
  const Tensor f10 = random_frames(10, 3, 1);
  const StackedFrames s = stack_frames(f10, 4);
  CHECK(s.length == 2);
  CHECK(s.dim == 12);

  const StackedFrames s4 = stack_frames(random_frames(4, 3, 2), 4);
  CHECK(s4.length == 1);

  // Ramp input: row 0 must equal the direct concatenation of frames 0..3.
  Tensor ramp = Tensor::zeros({8, 2});
  for (std::size_t i = 0; i < ramp.size(); ++i) ramp.values()[i] = static_cast<double>(i);
  const StackedFrames sr = stack_frames(ramp, 4);
  for (int s_idx = 0; s_idx < 4; ++s_idx)
    for (int f = 0; f < 2; ++f)
      CHECK(sr.at(0, s_idx * 2 + f) == ramp.at(s_idx, f));

  CHECK_THROWS_AS(stack_frames(random_frames(3, 3, 3), 4), InputError);
}

TEST_CASE("init_quantizer is deterministic and normalizes codebook rows") {
  QuantizerConfig cfg;
  cfg.codebook_size = 1024;  // defaults under test
  cfg.codebook_dim = 16;
  const RandomProjectionQuantizer a = init_quantizer(cfg, 80, Rng(12));
  const RandomProjectionQuantizer b = init_quantizer(cfg, 80, Rng(12));
  CHECK(a.projection == b.projection);
  CHECK(a.codebook == b.codebook);

  for (int v = 0; v < a.codebook_size; ++v) {
    double norm = 0.0;
    for (int j = 0; j < a.codebook_dim; ++j) {
      const double c = a.codebook[static_cast<std::size_t>(v) * a.codebook_dim + j];
      norm += c * c;
    }
    CHECK(std::abs(std::sqrt(norm) - 1.0) < 1e-12);
  }

  // Projection entries live inside the Xavier-uniform support.
  const double limit = std::sqrt(6.0 / (a.in_dim() + a.codebook_dim));
  for (double p : a.projection) REQUIRE(std::abs(p) <= limit);
}

TEST_CASE("nearest_code exact match and tie-breaking") {
  QuantizerConfig cfg;
  cfg.codebook_size = 8;
  cfg.codebook_dim = 2;
  cfg.stack = 1;
  RandomProjectionQuantizer q = init_quantizer(cfg, 4, Rng(3));

  // Install a hand-built codebook: row 0 = (1,0), row 1 = (0,1), rest far away.
  std::vector<double> cb(16, -5.0);
  cb[0] = 1.0;
  cb[1] = 0.0;
  cb[2] = 0.0;
  cb[3] = 1.0;
  q = q.with_codebook(cb, 8);
  CHECK(q.nearest_code({1.0, 0.0}) == 0);

  // Equidistant between rows 3 and 7: the lower index wins.
  std::vector<double> tie(16, 9.0);
  tie[3 * 2 + 0] = 1.0;
  tie[3 * 2 + 1] = 0.0;
  tie[7 * 2 + 0] = 0.0;
  tie[7 * 2 + 1] = 1.0;
  q = q.with_codebook(tie, 8);
  const double r = 1.0 / std::sqrt(2.0);
  CHECK(q.nearest_code({r, r}) == 3);
}

TEST_CASE("standardization floors tiny deviations and rejects small samples") {
  // 1200 stacked rows of a constant signal: std must floor at kStdFloor.
  StackedFrames s;
  s.length = 1200;
  s.dim = 4;
  s.data.assign(static_cast<std::size_t>(s.length) * s.dim, 2.5);
  std::vector<double> mean, stddev;
  compute_standardization({s}, mean, stddev);
  REQUIRE(mean.size() == 4);
  for (double m : mean) CHECK(std::abs(m - 2.5) < 1e-12);
  for (double sd : stddev) CHECK(sd == kStdFloor);

  StackedFrames small = s;
  small.length = 999;
  small.data.resize(static_cast<std::size_t>(small.length) * small.dim);
  std::vector<double> m2, s2;
  CHECK_THROWS_AS(compute_standardization({small}, m2, s2), ConfigError);
}

TEST_CASE("quantize matches the exhaustive nearest-neighbor oracle") {
  // Seed 42, V=16, dim=4 on a ramp utterance per the pinned example.
  QuantizerConfig cfg;
  cfg.codebook_size = 16;
  cfg.codebook_dim = 4;
  cfg.stack = 4;
  const int F = 6;
  RandomProjectionQuantizer q = unit_standardizer(init_quantizer(cfg, F, Rng(42)));

  Tensor ramp = Tensor::zeros({40, F});
  for (std::size_t i = 0; i < ramp.size(); ++i)
    ramp.values()[i] = 0.01 * static_cast<double>(i) - 1.0;
  const std::vector<int> tokens = q.quantize(ramp);
  REQUIRE(static_cast<int>(tokens.size()) == 10);

  const StackedFrames stacked = stack_frames(ramp, cfg.stack);
  for (int l = 0; l < stacked.length; ++l) {
    const std::vector<double> p = q.project(stacked, l);
    CHECK(tokens[static_cast<std::size_t>(l)] ==
          oracle::exhaustive_nn(p, q.codebook, q.codebook_size, q.codebook_dim));
  }
}

TEST_CASE("projected vectors are unit length after standardize-project-normalize") {
  QuantizerConfig cfg;
  cfg.codebook_size = 32;
  cfg.codebook_dim = 8;
  RandomProjectionQuantizer q = unit_standardizer(init_quantizer(cfg, 10, Rng(21)));
  const StackedFrames stacked = stack_frames(random_frames(24, 10, 77), cfg.stack);
  for (int l = 0; l < stacked.length; ++l) {
    const auto p = q.project(stacked, l);
    double norm = 0.0;
    for (double v : p) norm += v * v;
    CHECK(std::abs(std::sqrt(norm) - 1.0) < 1e-12);
  }
}

TEST_CASE("token length is floor(T/4) over 100 random lengths") {
  QuantizerConfig cfg;
  cfg.codebook_size = 8;
  cfg.codebook_dim = 4;
  RandomProjectionQuantizer q = unit_standardizer(init_quantizer(cfg, 5, Rng(1)));
  Rng lens(88);
  for (int i = 0; i < 100; ++i) {
    const int T = static_cast<int>(lens.uniform_int(4, 300));
    const auto tokens = q.quantize(random_frames(T, 5, 1000 + static_cast<std::uint64_t>(i)));
    REQUIRE(static_cast<int>(tokens.size()) == T / 4);
  }
}

TEST_CASE("quantize depends only on the utterance itself") {
  QuantizerConfig cfg;
  cfg.codebook_size = 16;
  cfg.codebook_dim = 4;
  RandomProjectionQuantizer q = unit_standardizer(init_quantizer(cfg, 5, Rng(10)));
  const Tensor a = random_frames(20, 5, 500);
  const Tensor b = random_frames(24, 5, 501);
  const auto tokens_a = q.quantize(a);
  const auto tokens_b = q.quantize(b);
  // Permuting the processing order cannot change per-utterance output.
  CHECK(q.quantize(b) == tokens_b);
  CHECK(q.quantize(a) == tokens_a);
}

TEST_CASE("kmeans with one point per cluster recovers the points exactly") {
  const int V = 6, dim = 3;
  Rng rng(14);
  std::vector<double> pts(static_cast<std::size_t>(V) * dim);
  for (auto& v : pts) v = rng.normal();
  Rng krng(15);
  const auto centers = build_kmeans_codebook(pts, V, dim, V, 10, krng);

  double inertia = 0.0;
  for (int i = 0; i < V; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (int c = 0; c < V; ++c) {
      double d = 0.0;
      for (int j = 0; j < dim; ++j) {
        const double diff = pts[static_cast<std::size_t>(i) * dim + j] -
                            centers[static_cast<std::size_t>(c) * dim + j];
        d += diff * diff;
      }
      best = std::min(best, d);
    }
    inertia += best;
  }
  CHECK(inertia < 1e-20);

  Rng krng2(15);
  CHECK_THROWS_AS(build_kmeans_codebook(pts, V, dim, V + 1, 10, krng2), InputError);
}

TEST_CASE("kmeans recovers two well-separated blob means") {
  Rng rng(16);
  const int per = 200, dim = 2;
  std::vector<double> pts;
  double mean_a[2] = {0, 0}, mean_b[2] = {0, 0};
  for (int i = 0; i < per; ++i) {
    const double x = -5.0 + 0.3 * rng.normal(), y = 0.0 + 0.3 * rng.normal();
    pts.push_back(x);
    pts.push_back(y);
    mean_a[0] += x / per;
    mean_a[1] += y / per;
  }
  for (int i = 0; i < per; ++i) {
    const double x = 5.0 + 0.3 * rng.normal(), y = 1.0 + 0.3 * rng.normal();
    pts.push_back(x);
    pts.push_back(y);
    mean_b[0] += x / per;
    mean_b[1] += y / per;
  }
  Rng krng(17);
  const auto centers = build_kmeans_codebook(pts, 2 * per, dim, 2, 25, krng);
  // Match each blob mean to its nearest centroid.
  for (const auto* m : {mean_a, mean_b}) {
    double best = std::numeric_limits<double>::infinity();
    for (int c = 0; c < 2; ++c) {
      const double dx = centers[static_cast<std::size_t>(c) * 2] - m[0];
      const double dy = centers[static_cast<std::size_t>(c) * 2 + 1] - m[1];
      best = std::min(best, std::sqrt(dx * dx + dy * dy));
    }
    CHECK(best < 0.1);
  }
}

TEST_CASE("kmeans accepts the full-size 1024-centroid scale") {
  Rng rng(18);
  const int n = 1100, dim = 4;
  std::vector<double> pts(static_cast<std::size_t>(n) * dim);
  for (auto& v : pts) v = rng.normal();
  Rng krng(19);
  const auto centers = build_kmeans_codebook(pts, n, dim, 1024, 2, krng);
  CHECK(centers.size() == static_cast<std::size_t>(1024 * dim));
}

TEST_CASE("token_stats matches direct counting") {
  TokenRow a{"a", 4, {0, 0, 0}};
  const TokenStats all_same = token_stats({a}, 4);
  CHECK(all_same.num_tokens == 3);
  CHECK(all_same.utilization == 0.25);
  CHECK(all_same.entropy_bits == 0.0);

  // Uniform tokens over V=1024 carry exactly 10 bits.
  TokenRow uniform{"u", 1024, {}};
  for (int v = 0; v < 1024; ++v) uniform.tokens.push_back(v);
  const TokenStats u = token_stats({uniform}, 1024);
  CHECK(u.utilization == 1.0);
  CHECK(std::abs(u.entropy_bits - 10.0) < 1e-12);

  // Seed-42 toy tokens against a direct-count oracle.
  Rng rng(42);
  TokenRow toy{"t", 16, {}};
  for (int i = 0; i < 500; ++i) toy.tokens.push_back(static_cast<int>(rng.uniform_int(0, 15)));
  const TokenStats s = token_stats({toy}, 16);
  std::vector<int> counts(16, 0);
  for (int t : toy.tokens) ++counts[static_cast<std::size_t>(t)];
  int distinct = 0;
  double entropy = 0.0;
  for (int c : counts) {
    if (c == 0) continue;
    ++distinct;
    const double p = static_cast<double>(c) / 500.0;
    entropy -= p * std::log2(p);
  }
  CHECK(s.distinct == distinct);
  CHECK(s.utilization == distinct / 16.0);
  CHECK(std::abs(s.entropy_bits - entropy) < 1e-12);
  CHECK(s.entropy_bits <= std::log2(16.0) + 1e-12);
  for (int v = 0; v < 16; ++v)
    CHECK(static_cast<int>(s.histogram[static_cast<std::size_t>(v)]) ==
          counts[static_cast<std::size_t>(v)]);

  TokenRow bad{"b", 4, {4}};
  CHECK_THROWS_AS(token_stats({bad}, 4), InputError);
}

TEST_CASE("quantizer and token files round-trip") {
  QuantizerConfig cfg;
  cfg.codebook_size = 16;
  cfg.codebook_dim = 4;
  RandomProjectionQuantizer q = init_quantizer(cfg, 6, Rng(77));
  std::vector<StackedFrames> sample{stack_frames(random_frames(4100, 6, 7), 4)};
  compute_standardization(sample, q.mean, q.stddev);

  const auto dir = std::filesystem::temp_directory_path();
  const auto qpath = dir / "nestrq_quant_test.bin";
  write_quantizer_file(qpath, q);
  const RandomProjectionQuantizer r = read_quantizer_file(qpath);
  CHECK(r.codebook_size == q.codebook_size);
  CHECK(r.codebook_dim == q.codebook_dim);
  CHECK(r.stack == q.stack);
  CHECK(r.num_mels == q.num_mels);
  // Values pass through f32: reloading the same file must be byte-stable.
  write_quantizer_file(dir / "nestrq_quant_test2.bin", r);
  CHECK(file_digest(qpath) == file_digest(dir / "nestrq_quant_test2.bin"));

  const std::vector<TokenRow> rows{{"u1", 16, {0, 5, 2}}, {"u2", 16, {15}}};
  const auto tpath = dir / "nestrq_tokens_test.jsonl";
  write_token_file(tpath, rows);
  const auto got = read_token_file(tpath);
  REQUIRE(got.size() == 2);
  CHECK(got[0].utterance_id == "u1");
  CHECK(got[0].tokens == rows[0].tokens);
  CHECK(got[1].codebook_size == 16);
  for (const auto& p : {qpath, dir / "nestrq_quant_test2.bin", tpath})
    std::filesystem::remove(p);
}

TEST_CASE("quantizer is frozen: same tokens before and after unrelated work") {
  QuantizerConfig cfg;
  cfg.codebook_size = 16;
  cfg.codebook_dim = 4;
  RandomProjectionQuantizer q = unit_standardizer(init_quantizer(cfg, 5, Rng(30)));
  const Tensor frames = random_frames(32, 5, 31);
  const auto before = q.quantize(frames);
  const auto proj_before = q.projection;
  // Unrelated quantizer usage cannot mutate state.
  (void)q.quantize(random_frames(16, 5, 32));
  CHECK(q.quantize(frames) == before);
  CHECK(q.projection == proj_before);
}
