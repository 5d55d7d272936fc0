#pragma once

// Deterministic synthetic-speech corpus. Each utterance is a chain of dwell
// segments; a segment renders the spectral template of one hidden state (a
// fixed trio of sinusoid partials derived from the state index) plus white
// noise. Frame-level state labels give the linear-probe task its ground truth.

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "nestrq/common.hpp"
#include "nestrq/features.hpp"
#include "nestrq/io.hpp"
#include "nestrq/rng.hpp"

namespace nestrq {

struct SyntheticCorpusConfig {
  int num_utterances = 64;
  double min_duration_s = 2.0;
  double max_duration_s = 4.0;
  int num_states = 8;  // S
  double dwell_min_ms = 250.0;
  double dwell_max_ms = 500.0;
  double noise_level = 0.05;
  std::uint64_t seed = 5;
  int sample_rate_hz = 16000;

  void validate() const {
    if (num_utterances < 0) throw ConfigError("corpus: num_utterances must be >= 0");
    if (num_states < 1) throw ConfigError("corpus: num_states must be >= 1");
    if (min_duration_s <= 0 || max_duration_s < min_duration_s)
      throw ConfigError("corpus: bad duration range");
    if (dwell_min_ms <= 0 || dwell_max_ms < dwell_min_ms)
      throw ConfigError("corpus: bad dwell range");
    if (noise_level < 0) throw ConfigError("corpus: noise_level must be >= 0");
  }
};

struct DwellSegment {
  int state = 0;
  std::size_t start_sample = 0;
  std::size_t num_samples = 0;
};

struct SyntheticUtterance {
  std::string utterance_id;
  std::vector<double> waveform;
  std::vector<int> frame_labels;  // aligned with extract_fbank frames
  std::vector<DwellSegment> segments;
  double duration_s = 0.0;
};

namespace corpus_detail {

// Three partials per state, spread so neighboring states overlap but remain
// linearly separable in mel space.
inline void state_partials(int state, int num_states, double partial_hz[3], double amp[3]) {
  const int s = state % num_states;
  partial_hz[0] = 320.0 + 410.0 * s;
  partial_hz[1] = 5300.0 - 360.0 * s;
  partial_hz[2] = 900.0 + 640.0 * ((s * 3) % num_states);
  amp[0] = 1.0;
  amp[1] = 0.6;
  amp[2] = 0.4;
}

inline std::string utterance_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "utt-%05d", index);
  return std::string(buf);
}

}  // namespace corpus_detail

inline SyntheticUtterance generate_utterance(const SyntheticCorpusConfig& cfg,
                                             const FbankConfig& fbank, int index, Rng utt_rng) {
  SyntheticUtterance u;
  u.utterance_id = corpus_detail::utterance_name(index);

  const double duration_s = utt_rng.uniform(cfg.min_duration_s, cfg.max_duration_s);
  const std::size_t total = static_cast<std::size_t>(std::lround(duration_s * cfg.sample_rate_hz));
  u.waveform.assign(total, 0.0);

  // Dwell chain. Consecutive states differ unless S == 1.
  std::size_t at = 0;
  int prev_state = -1;
  while (at < total) {
    int state = static_cast<int>(utt_rng.uniform_int(0, cfg.num_states - 1));
    if (cfg.num_states > 1 && state == prev_state) state = (state + 1) % cfg.num_states;
    const double dwell_ms = utt_rng.uniform(cfg.dwell_min_ms, cfg.dwell_max_ms);
    std::size_t n = static_cast<std::size_t>(std::lround(dwell_ms * cfg.sample_rate_hz / 1000.0));
    n = std::min(n, total - at);
    if (n == 0) break;

    double hz[3], amp[3];
    corpus_detail::state_partials(state, cfg.num_states, hz, amp);
    double phase[3];
    for (auto& p : phase) p = utt_rng.uniform(0.0, 2.0 * M_PI);
    for (std::size_t i = 0; i < n; ++i) {
      const double t = static_cast<double>(i) / cfg.sample_rate_hz;
      double v = 0.0;
      for (int k = 0; k < 3; ++k) v += amp[k] * std::sin(2.0 * M_PI * hz[k] * t + phase[k]);
      if (cfg.noise_level > 0) v += cfg.noise_level * utt_rng.normal();
      u.waveform[at + i] = v;
    }
    u.segments.push_back({state, at, n});
    prev_state = state;
    at += n;
  }

  // Label for frame t = state active at sample t * hop.
  const int win = fbank.window_samples();
  const int hop = fbank.hop_samples();
  if (static_cast<int>(total) >= win) {
    const int T = static_cast<int>((total - static_cast<std::size_t>(win)) / hop) + 1;
    u.frame_labels.resize(static_cast<std::size_t>(T));
    std::size_t seg = 0;
    for (int t = 0; t < T; ++t) {
      const std::size_t sample = static_cast<std::size_t>(t) * hop;
      while (seg + 1 < u.segments.size() &&
             sample >= u.segments[seg].start_sample + u.segments[seg].num_samples)
        ++seg;
      u.frame_labels[static_cast<std::size_t>(t)] = u.segments[seg].state;
    }
  }
  u.duration_s = static_cast<double>(total) / cfg.sample_rate_hz;
  return u;
}

inline std::vector<SyntheticUtterance> generate_corpus(const SyntheticCorpusConfig& cfg,
                                                       const FbankConfig& fbank) {
  cfg.validate();
  fbank.validate();
  const Rng root = Rng(cfg.seed).fork("corpus");
  std::vector<SyntheticUtterance> out;
  out.reserve(static_cast<std::size_t>(cfg.num_utterances));
  for (int i = 0; i < cfg.num_utterances; ++i)
    out.push_back(generate_utterance(cfg, fbank, i, root.fork(corpus_detail::utterance_name(i))));
  return out;
}

// ---------------------------------------------------------------------------
// Corpus files
// ---------------------------------------------------------------------------

struct ManifestEntry {
  std::string id;
  std::filesystem::path feature_path;
  double duration_s = 0.0;
  std::filesystem::path label_path;
};

inline void write_wave_file(const std::filesystem::path& path, const SyntheticUtterance& u,
                            int sample_rate_hz) {
  json header;
  header["utterance_id"] = u.utterance_id;
  header["num_samples"] = u.waveform.size();
  header["sample_rate_hz"] = sample_rate_hz;
  std::string buf = header.dump();
  buf.push_back('\n');
  io_detail::append_f32(buf, u.waveform);
  write_file(path, buf);
}

inline void write_label_file(const std::filesystem::path& path, const SyntheticUtterance& u,
                             int num_states) {
  json doc;
  doc["utterance_id"] = u.utterance_id;
  doc["num_states"] = num_states;
  doc["frame_labels"] = u.frame_labels;
  write_file(path, doc.dump() + "\n");
}

struct LabelFile {
  std::string utterance_id;
  int num_states = 0;
  std::vector<int> frame_labels;
};

inline LabelFile read_label_file(const std::filesystem::path& path) {
  LabelFile out;
  try {
    const json doc = json::parse(read_file(path));
    out.utterance_id = doc.at("utterance_id").get<std::string>();
    out.num_states = doc.at("num_states").get<int>();
    out.frame_labels = doc.at("frame_labels").get<std::vector<int>>();
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": bad label file: " + e.what());
  }
  return out;
}

// Writes features, waves, labels, manifest.jsonl and corpus_meta.json into
// dir. Manifest paths are relative to dir.
inline std::vector<ManifestEntry> write_corpus(const std::filesystem::path& dir,
                                               const std::vector<SyntheticUtterance>& corpus,
                                               const SyntheticCorpusConfig& cfg,
                                               const FbankConfig& fbank,
                                               const std::string& config_digest) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create corpus dir: " + dir.string());

  std::vector<ManifestEntry> entries;
  std::string manifest;
  for (const auto& u : corpus) {
    const std::string feat_name = u.utterance_id + ".feat.bin";
    const std::string wave_name = u.utterance_id + ".wave.bin";
    const std::string label_name = u.utterance_id + ".labels.json";
    const FeatureSequence feats = extract_fbank(u.waveform, fbank, u.utterance_id);
    write_feature_file(dir / feat_name, feats);
    write_wave_file(dir / wave_name, u, cfg.sample_rate_hz);
    write_label_file(dir / label_name, u, cfg.num_states);
    json row;
    row["id"] = u.utterance_id;
    row["path"] = feat_name;
    row["duration_s"] = u.duration_s;
    row["label_path"] = label_name;
    manifest += row.dump();
    manifest.push_back('\n');
    entries.push_back({u.utterance_id, dir / feat_name, u.duration_s, dir / label_name});
  }
  write_file(dir / "manifest.jsonl", manifest);

  json meta;
  meta["config_digest"] = config_digest;
  meta["num_utterances"] = corpus.size();
  meta["num_states"] = cfg.num_states;
  meta["seed"] = cfg.seed;
  write_file(dir / "corpus_meta.json", meta.dump() + "\n");
  return entries;
}

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& manifest_path) {
  const auto rows = read_jsonl(manifest_path);
  const auto base = manifest_path.parent_path();
  std::vector<ManifestEntry> entries;
  entries.reserve(rows.size());
  for (const auto& row : rows) {
    try {
      ManifestEntry e;
      e.id = row.at("id").get<std::string>();
      e.feature_path = base / row.at("path").get<std::string>();
      e.duration_s = row.at("duration_s").get<double>();
      e.label_path = base / row.at("label_path").get<std::string>();
      entries.push_back(std::move(e));
    } catch (const json::exception& ex) {
      throw IoError(manifest_path.string() + ": bad manifest row: " + ex.what());
    }
  }
  return entries;
}

}  // namespace nestrq
