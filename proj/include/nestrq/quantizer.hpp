#pragma once

// Frozen random-projection quantizer. Stacks consecutive frames, standardizes
// per input dimension with global corpus statistics, projects through a fixed
// Xavier-uniform matrix, L2-normalizes, and picks the nearest codebook row by
// squared Euclidean distance (ties broken toward the lowest index). Nothing
// here carries gradients; the quantizer is initialized once and never trained.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "nestrq/common.hpp"
#include "nestrq/io.hpp"
#include "nestrq/rng.hpp"
#include "nestrq/tensor.hpp"

namespace nestrq {

inline constexpr double kStdFloor = 1e-8;
inline constexpr std::size_t kMinStandardizationFrames = 1000;

struct QuantizerConfig {
  int codebook_size = 1024;  // V
  int codebook_dim = 16;     // d_c
  int stack = 4;             // frames stacked per target step

  void validate() const {
    if (codebook_size < 1) throw ConfigError("quantizer: codebook_size must be >= 1");
    if (codebook_dim < 1) throw ConfigError("quantizer: codebook_dim must be >= 1");
    if (stack < 1) throw ConfigError("quantizer: stack must be >= 1");
  }
};

// Row-major L x (stack * num_mels) stack of consecutive frames; L = floor(T / stack).
struct StackedFrames {
  int length = 0;  // L
  int dim = 0;     // stack * num_mels
  std::vector<double> data;

  double at(int l, int j) const { return data[static_cast<std::size_t>(l) * dim + j]; }
};

inline StackedFrames stack_frames(const Tensor& frames, int stack) {
  if (stack < 1) throw ConfigError("stack_frames: stack must be >= 1");
  const int T = frames.rows();
  const int F = frames.cols();
  if (T < stack)
    throw InputError("stack_frames: need at least " + std::to_string(stack) + " frames, got " +
                     std::to_string(T));
  StackedFrames out;
  out.length = T / stack;
  out.dim = stack * F;
  out.data.resize(static_cast<std::size_t>(out.length) * out.dim);
  for (int l = 0; l < out.length; ++l)
    for (int s = 0; s < stack; ++s)
      for (int f = 0; f < F; ++f)
        out.data[static_cast<std::size_t>(l) * out.dim + s * F + f] = frames.at(l * stack + s, f);
  return out;
}

struct RandomProjectionQuantizer {
  int codebook_size = 0;  // V
  int codebook_dim = 0;
  int stack = 0;
  int num_mels = 0;
  std::vector<double> mean;        // [in_dim]
  std::vector<double> stddev;      // [in_dim], floored at kStdFloor
  std::vector<double> projection;  // row-major [in_dim x codebook_dim]
  std::vector<double> codebook;    // row-major [V x codebook_dim], rows unit-norm for random init

  int in_dim() const { return stack * num_mels; }

  // Standardize, project and L2-normalize one stacked frame.
  std::vector<double> project(const StackedFrames& stacked, int l) const {
    const int in = in_dim();
    if (stacked.dim != in) throw ShapeError("quantizer: stacked dim mismatch");
    std::vector<double> p(static_cast<std::size_t>(codebook_dim), 0.0);
    for (int i = 0; i < in; ++i) {
      const double z = (stacked.at(l, i) - mean[static_cast<std::size_t>(i)]) /
                       stddev[static_cast<std::size_t>(i)];
      const double* row = projection.data() + static_cast<std::size_t>(i) * codebook_dim;
      for (int j = 0; j < codebook_dim; ++j) p[static_cast<std::size_t>(j)] += z * row[j];
    }
    double norm = 0.0;
    for (double v : p) norm += v * v;
    norm = std::sqrt(norm);
    if (norm < 1e-12) throw NumericError("quantizer: projected vector has zero norm");
    for (double& v : p) v /= norm;
    return p;
  }

  int nearest_code(const std::vector<double>& p) const {
    int best = 0;
    double best_dist = std::numeric_limits<double>::infinity();
    for (int k = 0; k < codebook_size; ++k) {
      const double* row = codebook.data() + static_cast<std::size_t>(k) * codebook_dim;
      double dist = 0.0;
      for (int j = 0; j < codebook_dim; ++j) {
        const double d = p[static_cast<std::size_t>(j)] - row[j];
        dist += d * d;
      }
      if (dist < best_dist) {  // strict: ties keep the lowest index
        best_dist = dist;
        best = k;
      }
    }
    return best;
  }

  std::vector<int> quantize(const Tensor& frames) const {
    const StackedFrames stacked = stack_frames(frames, stack);
    std::vector<int> tokens(static_cast<std::size_t>(stacked.length));
    for (int l = 0; l < stacked.length; ++l)
      tokens[static_cast<std::size_t>(l)] = nearest_code(project(stacked, l));
    return tokens;
  }

  RandomProjectionQuantizer with_codebook(std::vector<double> new_codebook, int new_V) const {
    if (static_cast<int>(new_codebook.size()) != new_V * codebook_dim)
      throw ShapeError("with_codebook: size mismatch");
    RandomProjectionQuantizer out = *this;
    out.codebook = std::move(new_codebook);
    out.codebook_size = new_V;
    return out;
  }
};

// Global per-dimension statistics over every stacked frame in the corpus.
// Population variance; fewer than kMinStandardizationFrames rows is degenerate.
inline void compute_standardization(const std::vector<StackedFrames>& all,
                                    std::vector<double>& mean, std::vector<double>& stddev) {
  int in_dim = 0;
  std::size_t count = 0;
  for (const auto& s : all) {
    if (s.length == 0) continue;
    if (in_dim == 0) in_dim = s.dim;
    if (s.dim != in_dim) throw ShapeError("standardization: inconsistent stacked dims");
    count += static_cast<std::size_t>(s.length);
  }
  if (count < kMinStandardizationFrames)
    throw ConfigError("quantizer standardization requires >= " +
                      std::to_string(kMinStandardizationFrames) + " stacked frames, got " +
                      std::to_string(count));
  mean.assign(static_cast<std::size_t>(in_dim), 0.0);
  stddev.assign(static_cast<std::size_t>(in_dim), 0.0);
  for (const auto& s : all)
    for (int l = 0; l < s.length; ++l)
      for (int i = 0; i < in_dim; ++i) mean[static_cast<std::size_t>(i)] += s.at(l, i);
  for (double& m : mean) m /= static_cast<double>(count);
  for (const auto& s : all)
    for (int l = 0; l < s.length; ++l)
      for (int i = 0; i < in_dim; ++i) {
        const double d = s.at(l, i) - mean[static_cast<std::size_t>(i)];
        stddev[static_cast<std::size_t>(i)] += d * d;
      }
  for (double& v : stddev) v = std::max(std::sqrt(v / static_cast<double>(count)), kStdFloor);
}

// Projection from fork("projection"), codebook rows from fork("codebook");
// standardization stats are filled in separately once corpus features exist.
inline RandomProjectionQuantizer init_quantizer(const QuantizerConfig& cfg, int num_mels,
                                                const Rng& root) {
  cfg.validate();
  if (num_mels < 1) throw ConfigError("quantizer: num_mels must be >= 1");
  RandomProjectionQuantizer q;
  q.codebook_size = cfg.codebook_size;
  q.codebook_dim = cfg.codebook_dim;
  q.stack = cfg.stack;
  q.num_mels = num_mels;
  const int in = q.in_dim();

  Rng proj_rng = root.fork("projection");
  q.projection.resize(static_cast<std::size_t>(in) * cfg.codebook_dim);
  for (auto& w : q.projection) w = proj_rng.xavier_uniform(in, cfg.codebook_dim);

  Rng code_rng = root.fork("codebook");
  q.codebook.resize(static_cast<std::size_t>(cfg.codebook_size) * cfg.codebook_dim);
  for (int k = 0; k < cfg.codebook_size; ++k) {
    double* row = q.codebook.data() + static_cast<std::size_t>(k) * cfg.codebook_dim;
    double norm = 0.0;
    do {
      norm = 0.0;
      for (int j = 0; j < cfg.codebook_dim; ++j) {
        row[j] = code_rng.normal();
        norm += row[j] * row[j];
      }
      norm = std::sqrt(norm);
    } while (norm < 1e-12);
    for (int j = 0; j < cfg.codebook_dim; ++j) row[j] /= norm;
  }

  q.mean.assign(static_cast<std::size_t>(in), 0.0);
  q.stddev.assign(static_cast<std::size_t>(in), 1.0);
  return q;
}

// ---------------------------------------------------------------------------
// k-means codebook (token-quality variant)
// ---------------------------------------------------------------------------

// Lloyd iterations over the projected, normalized vectors with k-means++
// seeding. Empty clusters are reseeded with the point farthest from its
// current centroid. Returns row-major [V x dim] centroids.
inline std::vector<double> build_kmeans_codebook(const std::vector<double>& points, int n, int dim,
                                                 int V, int iters, Rng rng) {
  if (n < V) throw InputError("kmeans: fewer points than clusters");
  if (V < 1 || dim < 1 || iters < 1) throw ConfigError("kmeans: bad V/dim/iters");
  auto point = [&](int i) { return points.data() + static_cast<std::size_t>(i) * dim; };
  auto dist2 = [&](const double* a, const double* b) {
    double d = 0.0;
    for (int j = 0; j < dim; ++j) {
      const double t = a[j] - b[j];
      d += t * t;
    }
    return d;
  };

  std::vector<double> centers(static_cast<std::size_t>(V) * dim);
  std::vector<double> best(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  // k-means++: first center uniform, the rest proportional to squared distance.
  int first = static_cast<int>(rng.uniform_int(0, n - 1));
  std::copy_n(point(first), dim, centers.begin());
  for (int c = 1; c < V; ++c) {
    const double* prev = centers.data() + static_cast<std::size_t>(c - 1) * dim;
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      best[static_cast<std::size_t>(i)] = std::min(best[static_cast<std::size_t>(i)],
                                                   dist2(point(i), prev));
      total += best[static_cast<std::size_t>(i)];
    }
    int pick = n - 1;
    if (total > 0) {
      const double r = rng.uniform() * total;
      double acc = 0.0;
      for (int i = 0; i < n; ++i) {
        acc += best[static_cast<std::size_t>(i)];
        if (acc >= r) {
          pick = i;
          break;
        }
      }
    } else {
      pick = static_cast<int>(rng.uniform_int(0, n - 1));
    }
    std::copy_n(point(pick), dim, centers.begin() + static_cast<std::size_t>(c) * dim);
  }

  std::vector<int> assign(static_cast<std::size_t>(n), 0);
  std::vector<int> counts(static_cast<std::size_t>(V), 0);
  for (int it = 0; it < iters; ++it) {
    for (int i = 0; i < n; ++i) {
      int arg = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (int c = 0; c < V; ++c) {
        const double d = dist2(point(i), centers.data() + static_cast<std::size_t>(c) * dim);
        if (d < bd) {
          bd = d;
          arg = c;
        }
      }
      assign[static_cast<std::size_t>(i)] = arg;
      best[static_cast<std::size_t>(i)] = bd;
    }
    std::fill(centers.begin(), centers.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (int i = 0; i < n; ++i) {
      const int c = assign[static_cast<std::size_t>(i)];
      ++counts[static_cast<std::size_t>(c)];
      double* ctr = centers.data() + static_cast<std::size_t>(c) * dim;
      for (int j = 0; j < dim; ++j) ctr[j] += point(i)[j];
    }
    for (int c = 0; c < V; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) {
        double* ctr = centers.data() + static_cast<std::size_t>(c) * dim;
        for (int j = 0; j < dim; ++j) ctr[j] /= counts[static_cast<std::size_t>(c)];
      } else {
        int far = 0;
        for (int i = 1; i < n; ++i)
          if (best[static_cast<std::size_t>(i)] > best[static_cast<std::size_t>(far)]) far = i;
        std::copy_n(point(far), dim, centers.begin() + static_cast<std::size_t>(c) * dim);
        best[static_cast<std::size_t>(far)] = 0.0;
      }
    }
  }
  return centers;
}

// ---------------------------------------------------------------------------
// Token statistics and files
// ---------------------------------------------------------------------------

struct TokenRow {
  std::string utterance_id;
  int codebook_size = 0;  // V
  std::vector<int> tokens;
};

struct TokenStats {
  std::size_t num_tokens = 0;
  int distinct = 0;
  double utilization = 0.0;   // distinct / V
  double entropy_bits = 0.0;  // empirical token distribution; <= log2(V)
  std::vector<std::size_t> histogram;
};

inline TokenStats token_stats(const std::vector<TokenRow>& rows, int V) {
  if (V < 1) throw ConfigError("token_stats: V must be >= 1");
  TokenStats s;
  s.histogram.assign(static_cast<std::size_t>(V), 0);
  for (const auto& row : rows)
    for (int t : row.tokens) {
      if (t < 0 || t >= V) throw InputError("token_stats: token out of range");
      ++s.histogram[static_cast<std::size_t>(t)];
      ++s.num_tokens;
    }
  for (std::size_t c : s.histogram) {
    if (c == 0) continue;
    ++s.distinct;
    const double p = static_cast<double>(c) / static_cast<double>(s.num_tokens);
    s.entropy_bits -= p * std::log2(p);
  }
  s.utilization = static_cast<double>(s.distinct) / V;
  return s;
}

inline void write_token_file(const std::filesystem::path& path, const std::vector<TokenRow>& rows) {
  std::string buf;
  for (const auto& row : rows) {
    json r;
    r["utterance_id"] = row.utterance_id;
    r["V"] = row.codebook_size;
    r["tokens"] = row.tokens;
    buf += r.dump();
    buf.push_back('\n');
  }
  write_file(path, buf);
}

inline std::vector<TokenRow> read_token_file(const std::filesystem::path& path) {
  std::vector<TokenRow> rows;
  for (const auto& r : read_jsonl(path)) {
    try {
      TokenRow row;
      row.utterance_id = r.at("utterance_id").get<std::string>();
      row.codebook_size = r.at("V").get<int>();
      row.tokens = r.at("tokens").get<std::vector<int>>();
      rows.push_back(std::move(row));
    } catch (const json::exception& e) {
      throw IoError(path.string() + ": bad token row: " + e.what());
    }
  }
  return rows;
}

// Quantizer checkpoint: JSON header line, then an f32 blob holding mean,
// stddev, projection and codebook in that order.
inline void write_quantizer_file(const std::filesystem::path& path,
                                 const RandomProjectionQuantizer& q) {
  json header;
  header["V"] = q.codebook_size;
  header["dim"] = q.codebook_dim;
  header["stack"] = q.stack;
  header["num_mels"] = q.num_mels;
  std::string buf = header.dump();
  buf.push_back('\n');
  io_detail::append_f32(buf, q.mean);
  io_detail::append_f32(buf, q.stddev);
  io_detail::append_f32(buf, q.projection);
  io_detail::append_f32(buf, q.codebook);
  write_file(path, buf);
}

inline RandomProjectionQuantizer read_quantizer_file(const std::filesystem::path& path) {
  const std::string content = read_file(path);
  const auto [header, offset] = read_header_line(content, "quantizer file " + path.string());
  RandomProjectionQuantizer q;
  try {
    q.codebook_size = header.at("V").get<int>();
    q.codebook_dim = header.at("dim").get<int>();
    q.stack = header.at("stack").get<int>();
    q.num_mels = header.at("num_mels").get<int>();
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": bad quantizer header: " + e.what());
  }
  const std::size_t in = static_cast<std::size_t>(q.in_dim());
  std::size_t at = offset;
  q.mean = io_detail::read_f32(content, at, in);
  q.stddev = io_detail::read_f32(content, at, in);
  q.projection = io_detail::read_f32(content, at, in * static_cast<std::size_t>(q.codebook_dim));
  q.codebook = io_detail::read_f32(
      content, at,
      static_cast<std::size_t>(q.codebook_size) * static_cast<std::size_t>(q.codebook_dim));
  if (at != content.size()) throw IoError(path.string() + ": trailing bytes in quantizer file");
  return q;
}

}  // namespace nestrq
