#pragma once

// One JSON config document with sections {corpus, features, quantizer,
// encoder, objective, training, probe}. Every field is optional and falls back
// to the documented default; unknown keys (sections or fields) are rejected so
// typos cannot silently change an experiment. The digest of the fully resolved
// config ties every produced artifact back to its recipe.

#include <initializer_list>
#include <string>

#include "nestrq/common.hpp"
#include "nestrq/corpus.hpp"
#include "nestrq/encoder.hpp"
#include "nestrq/features.hpp"
#include "nestrq/io.hpp"
#include "nestrq/objectives.hpp"
#include "nestrq/quantizer.hpp"
#include "nestrq/training.hpp"

namespace nestrq {

namespace cfg_detail {

inline void reject_unknown(const json& j, const std::string& where,
                           std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ConfigError("config: '" + where + "' must be a JSON object");
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : keys) known = known || item.key() == k;
    if (!known) throw ConfigError("config: unknown key '" + where + "." + item.key() + "'");
  }
}

template <class T>
void get_to(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const json::exception&) {
    throw ConfigError("config: bad value for '" + where + "." + std::string(key) + "'");
  }
}

}  // namespace cfg_detail

struct RunConfig {
  SyntheticCorpusConfig corpus;
  FbankConfig features;
  QuantizerConfig quantizer;
  std::uint64_t quantizer_seed = 11;
  EncoderConfig encoder;
  NtpConfig ntp;  // objective section: N; V mirrors quantizer.codebook_size
  TrainConfig training;
  ProbeConfig probe;

  void validate() const {
    corpus.validate();
    features.validate();
    quantizer.validate();
    encoder.validate();
    ntp.validate();
    training.validate();
    probe.validate();
    if (encoder.input_dim != features.num_mels)
      throw ConfigError("config: encoder.input_dim must equal features.num_mels");
    if (corpus.sample_rate_hz != features.sample_rate_hz)
      throw ConfigError("config: corpus and features sample rates disagree");
  }

  json to_json() const {
    json j;
    j["corpus"] = {{"num_utterances", corpus.num_utterances},
                   {"min_duration_s", corpus.min_duration_s},
                   {"max_duration_s", corpus.max_duration_s},
                   {"num_states", corpus.num_states},
                   {"dwell_min_ms", corpus.dwell_min_ms},
                   {"dwell_max_ms", corpus.dwell_max_ms},
                   {"noise_level", corpus.noise_level},
                   {"seed", corpus.seed},
                   {"sample_rate_hz", corpus.sample_rate_hz}};
    j["features"] = {{"sample_rate_hz", features.sample_rate_hz},
                     {"frame_stride_ms", features.frame_stride_ms},
                     {"frame_length_ms", features.frame_length_ms},
                     {"num_mels", features.num_mels},
                     {"fft_size", features.fft_size},
                     {"fmin_hz", features.fmin_hz},
                     {"fmax_hz", features.fmax_hz}};
    j["quantizer"] = {{"codebook_size", quantizer.codebook_size},
                      {"codebook_dim", quantizer.codebook_dim},
                      {"stack", quantizer.stack},
                      {"seed", quantizer_seed}};
    j["encoder"] = encoder_config_to_json(encoder);
    j["objective"] = {{"name", objective_name(training.objective)},
                      {"num_heads", ntp.num_heads},
                      {"mask_span_ms", training.mask.span_ms},
                      {"mask_start_prob", training.mask.start_prob},
                      {"mask_fill_std", training.mask.fill_std}};
    j["training"] = {{"steps", training.steps},
                     {"batch_utterances", training.batch_utterances},
                     {"peak_lr", training.peak_lr},
                     {"warmup_steps", training.warmup_steps},
                     {"scheduler", scheduler_name(training.scheduler)},
                     {"adam_beta1", training.adam_beta1},
                     {"adam_beta2", training.adam_beta2},
                     {"adam_eps", training.adam_eps},
                     {"clip_norm", training.clip_norm},
                     {"seed", training.seed},
                     {"log_interval", training.log_interval}};
    j["probe"] = {{"split", probe.split},
                  {"epochs", probe.epochs},
                  {"batch_frames", probe.batch_frames},
                  {"lr", probe.lr},
                  {"seed", probe.seed},
                  {"shuffle_labels", probe.shuffle_labels}};
    return j;
  }

  // FNV-1a over the canonical (key-sorted) dump of the resolved config.
  std::string digest() const { return hex64(fnv1a64(to_json().dump())); }

  static RunConfig from_json(const json& j) {
    using cfg_detail::get_to;
    using cfg_detail::reject_unknown;
    reject_unknown(j, "config",
                   {"corpus", "features", "quantizer", "encoder", "objective", "training",
                    "probe"});
    RunConfig c;
    if (j.contains("corpus")) {
      const json& s = j.at("corpus");
      reject_unknown(s, "corpus",
                     {"num_utterances", "min_duration_s", "max_duration_s", "num_states",
                      "dwell_min_ms", "dwell_max_ms", "noise_level", "seed", "sample_rate_hz"});
      get_to(s, "num_utterances", c.corpus.num_utterances, "corpus");
      get_to(s, "min_duration_s", c.corpus.min_duration_s, "corpus");
      get_to(s, "max_duration_s", c.corpus.max_duration_s, "corpus");
      get_to(s, "num_states", c.corpus.num_states, "corpus");
      get_to(s, "dwell_min_ms", c.corpus.dwell_min_ms, "corpus");
      get_to(s, "dwell_max_ms", c.corpus.dwell_max_ms, "corpus");
      get_to(s, "noise_level", c.corpus.noise_level, "corpus");
      get_to(s, "seed", c.corpus.seed, "corpus");
      get_to(s, "sample_rate_hz", c.corpus.sample_rate_hz, "corpus");
    }
    if (j.contains("features")) {
      const json& s = j.at("features");
      reject_unknown(s, "features",
                     {"sample_rate_hz", "frame_stride_ms", "frame_length_ms", "num_mels",
                      "fft_size", "fmin_hz", "fmax_hz"});
      get_to(s, "sample_rate_hz", c.features.sample_rate_hz, "features");
      get_to(s, "frame_stride_ms", c.features.frame_stride_ms, "features");
      get_to(s, "frame_length_ms", c.features.frame_length_ms, "features");
      get_to(s, "num_mels", c.features.num_mels, "features");
      get_to(s, "fft_size", c.features.fft_size, "features");
      get_to(s, "fmin_hz", c.features.fmin_hz, "features");
      get_to(s, "fmax_hz", c.features.fmax_hz, "features");
    }
    if (j.contains("quantizer")) {
      const json& s = j.at("quantizer");
      reject_unknown(s, "quantizer", {"codebook_size", "codebook_dim", "stack", "seed"});
      get_to(s, "codebook_size", c.quantizer.codebook_size, "quantizer");
      get_to(s, "codebook_dim", c.quantizer.codebook_dim, "quantizer");
      get_to(s, "stack", c.quantizer.stack, "quantizer");
      get_to(s, "seed", c.quantizer_seed, "quantizer");
    }
    if (j.contains("encoder")) {
      const json& s = j.at("encoder");
      reject_unknown(s, "encoder",
                     {"num_blocks", "model_dim", "num_heads", "ff_expansion", "attention", "conv",
                      "lookahead_blocks", "conv_half_width"});
      get_to(s, "num_blocks", c.encoder.num_blocks, "encoder");
      get_to(s, "model_dim", c.encoder.model_dim, "encoder");
      get_to(s, "num_heads", c.encoder.num_heads, "encoder");
      get_to(s, "ff_expansion", c.encoder.ff_expansion, "encoder");
      std::string att = attention_mode_name(c.encoder.causality.attention_mode);
      std::string conv = conv_mode_name(c.encoder.causality.conv_mode);
      get_to(s, "attention", att, "encoder");
      get_to(s, "conv", conv, "encoder");
      c.encoder.causality.attention_mode = attention_mode_from_name(att);
      c.encoder.causality.conv_mode = conv_mode_from_name(conv);
      get_to(s, "lookahead_blocks", c.encoder.causality.lookahead_blocks, "encoder");
      get_to(s, "conv_half_width", c.encoder.causality.conv_half_width, "encoder");
    }
    if (j.contains("objective")) {
      const json& s = j.at("objective");
      reject_unknown(s, "objective",
                     {"name", "num_heads", "mask_span_ms", "mask_start_prob", "mask_fill_std"});
      std::string name = objective_name(c.training.objective);
      get_to(s, "name", name, "objective");
      c.training.objective = objective_from_name(name);
      get_to(s, "num_heads", c.ntp.num_heads, "objective");
      get_to(s, "mask_span_ms", c.training.mask.span_ms, "objective");
      get_to(s, "mask_start_prob", c.training.mask.start_prob, "objective");
      get_to(s, "mask_fill_std", c.training.mask.fill_std, "objective");
    }
    if (j.contains("training")) {
      const json& s = j.at("training");
      reject_unknown(s, "training",
                     {"steps", "batch_utterances", "peak_lr", "warmup_steps", "scheduler",
                      "adam_beta1", "adam_beta2", "adam_eps", "clip_norm", "seed",
                      "log_interval"});
      get_to(s, "steps", c.training.steps, "training");
      get_to(s, "batch_utterances", c.training.batch_utterances, "training");
      get_to(s, "peak_lr", c.training.peak_lr, "training");
      get_to(s, "warmup_steps", c.training.warmup_steps, "training");
      std::string sched = scheduler_name(c.training.scheduler);
      get_to(s, "scheduler", sched, "training");
      c.training.scheduler = scheduler_from_name(sched);
      get_to(s, "adam_beta1", c.training.adam_beta1, "training");
      get_to(s, "adam_beta2", c.training.adam_beta2, "training");
      get_to(s, "adam_eps", c.training.adam_eps, "training");
      get_to(s, "clip_norm", c.training.clip_norm, "training");
      get_to(s, "seed", c.training.seed, "training");
      get_to(s, "log_interval", c.training.log_interval, "training");
    }
    if (j.contains("probe")) {
      const json& s = j.at("probe");
      reject_unknown(s, "probe",
                     {"split", "epochs", "batch_frames", "lr", "seed", "shuffle_labels"});
      get_to(s, "split", c.probe.split, "probe");
      get_to(s, "epochs", c.probe.epochs, "probe");
      get_to(s, "batch_frames", c.probe.batch_frames, "probe");
      get_to(s, "lr", c.probe.lr, "probe");
      get_to(s, "seed", c.probe.seed, "probe");
      get_to(s, "shuffle_labels", c.probe.shuffle_labels, "probe");
    }
    // Derived couplings, then full validation.
    c.encoder.input_dim = c.features.num_mels;
    c.ntp.vocab = c.quantizer.codebook_size;
    c.training.mask.frame_stride_ms = c.features.frame_stride_ms;
    c.validate();
    return c;
  }
};

inline RunConfig load_run_config(const std::filesystem::path& path) {
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
  return RunConfig::from_json(doc);
}

}  // namespace nestrq
