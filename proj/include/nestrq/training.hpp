#pragma once

// Deterministic training loop for both objectives, plus the linear-probe
// evaluation that stands in for downstream ASR. Reproducibility contract:
// every random stream is a pure function of (seed, purpose label, step or
// epoch index), so identical (config, seed, corpus) give bit-identical metrics
// and checkpoints, and a loaded checkpoint resumes the exact loss trace.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "nestrq/common.hpp"
#include "nestrq/encoder.hpp"
#include "nestrq/features.hpp"
#include "nestrq/io.hpp"
#include "nestrq/objectives.hpp"
#include "nestrq/quantizer.hpp"
#include "nestrq/rng.hpp"
#include "nestrq/tensor.hpp"

namespace nestrq {

enum class Objective { kBestRq, kNestRq };

inline std::string objective_name(Objective o) {
  return o == Objective::kBestRq ? "bestrq" : "nestrq";
}

inline Objective objective_from_name(const std::string& s) {
  if (s == "bestrq") return Objective::kBestRq;
  if (s == "nestrq") return Objective::kNestRq;
  throw ConfigError("bad objective '" + s + "' (want bestrq|nestrq)");
}

enum class Scheduler { kTransformer, kLinear };

inline std::string scheduler_name(Scheduler s) {
  return s == Scheduler::kTransformer ? "transformer" : "linear";
}

inline Scheduler scheduler_from_name(const std::string& s) {
  if (s == "transformer") return Scheduler::kTransformer;
  if (s == "linear") return Scheduler::kLinear;
  throw ConfigError("bad scheduler '" + s + "' (want transformer|linear)");
}

struct TrainConfig {
  Objective objective = Objective::kNestRq;
  int steps = 2000;
  int batch_utterances = 8;
  double peak_lr = 3e-4;
  int warmup_steps = 8000;  // paper-scale default; desk configs override
  Scheduler scheduler = Scheduler::kTransformer;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-9;
  double clip_norm = 1.0;
  std::uint64_t seed = 1;
  int log_interval = 50;
  MaskConfig mask;  // bestrq only

  void validate() const {
    if (steps < 0) throw ConfigError("training: steps must be >= 0");
    if (batch_utterances < 1) throw ConfigError("training: batch_utterances must be >= 1");
    if (peak_lr <= 0) throw ConfigError("training: peak_lr must be > 0");
    if (warmup_steps < 1) throw ConfigError("training: warmup_steps must be >= 1");
    if (clip_norm <= 0) throw ConfigError("training: clip_norm must be > 0");
    if (log_interval < 1) throw ConfigError("training: log_interval must be >= 1");
    mask.validate();
  }
};

// transformer: peak * min(step/W, (step/W)^-1/2), continuous at step == W.
// linear: ramp to peak over W steps, then decay linearly to 0 at total_steps.
inline double lr_at(std::int64_t step, const TrainConfig& cfg) {
  if (step < 1) throw UsageError("lr_at: step must be >= 1");
  const double W = static_cast<double>(cfg.warmup_steps);
  const double s = static_cast<double>(step);
  if (cfg.scheduler == Scheduler::kTransformer)
    return cfg.peak_lr * std::min(s / W, std::sqrt(W / s));
  if (step <= cfg.warmup_steps) return cfg.peak_lr * s / W;
  const double tail = std::max(1.0, static_cast<double>(cfg.steps - cfg.warmup_steps));
  return cfg.peak_lr * std::max(0.0, static_cast<double>(cfg.steps - step)) / tail;
}

// ---------------------------------------------------------------------------
// Adam with bias correction + global-norm clipping
// ---------------------------------------------------------------------------

struct AdamState {
  std::int64_t t = 0;
  std::vector<std::vector<double>> m;  // aligned with the named-parameter order
  std::vector<std::vector<double>> v;
};

inline AdamState init_adam(const std::vector<std::pair<std::string, Tensor>>& params) {
  AdamState s;
  s.m.reserve(params.size());
  s.v.reserve(params.size());
  for (const auto& [name, p] : params) {
    s.m.emplace_back(p.size(), 0.0);
    s.v.emplace_back(p.size(), 0.0);
  }
  return s;
}

// Scales all gradients so the global L2 norm is at most clip; returns the
// pre-clip norm. Parameters without a populated gradient count as zero.
inline double clip_gradients(const std::vector<std::pair<std::string, Tensor>>& params,
                             double clip) {
  double sq = 0.0;
  for (const auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > clip) {
    const double f = clip / norm;
    for (const auto& [name, p] : params) {
      if (!p.has_grad()) continue;
      for (double& g : p.node()->grad_buf()) g *= f;
    }
  }
  return norm;
}

inline void adam_update(const std::vector<std::pair<std::string, Tensor>>& params,
                        AdamState& state, const TrainConfig& cfg, double lr) {
  if (params.size() != state.m.size()) throw UsageError("adam_update: state/params mismatch");
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i].second;
    auto& m = state.m[i];
    auto& v = state.v[i];
    const bool has = p.has_grad();
    const std::vector<double>* g = has ? &p.grad() : nullptr;
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = has ? (*g)[j] : 0.0;
      m[j] = cfg.adam_beta1 * m[j] + (1.0 - cfg.adam_beta1) * gj;
      v[j] = cfg.adam_beta2 * v[j] + (1.0 - cfg.adam_beta2) * gj * gj;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p.values()[j] -= lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
      if (!std::isfinite(p.values()[j]))
        throw NumericError("adam_update: parameter became non-finite");
    }
    if (has) p.zero_grad();
  }
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

struct TrainItem {
  FeatureSequence features;
  std::vector<int> tokens;  // quantized from the unmasked features
};

struct TrainerState {
  EncoderConfig enc_cfg;
  EncoderParams enc_params;
  PredictionHeads heads;
  RandomProjectionQuantizer quantizer;
  TrainConfig cfg;
  AdamState adam;
  std::int64_t step = 0;  // completed steps

  std::vector<std::pair<std::string, Tensor>> all_params() const {
    auto out = enc_params.named_params();
    for (auto& kv : heads.named_params()) out.push_back(std::move(kv));
    return out;
  }
};

inline TrainerState init_trainer(const EncoderConfig& enc_cfg, const TrainConfig& cfg,
                                 const RandomProjectionQuantizer& quantizer, int ntp_heads) {
  enc_cfg.validate();
  cfg.validate();
  const int num_heads = cfg.objective == Objective::kNestRq ? ntp_heads : 1;
  if (num_heads < 1) throw ConfigError("training: need at least one prediction head");
  TrainerState s;
  s.enc_cfg = enc_cfg;
  s.enc_params = init_encoder(enc_cfg, Rng(cfg.seed));
  s.heads = init_prediction_heads(num_heads, enc_cfg.model_dim, quantizer.codebook_size,
                                  Rng(cfg.seed));
  s.quantizer = quantizer;
  s.cfg = cfg;
  s.adam = init_adam(s.all_params());
  return s;
}

// Deterministic batch schedule: utterances are shuffled once per epoch with a
// stream keyed by the epoch index, then consumed in contiguous chunks. A pure
// function of (seed, step, dataset size), so resume needs no saved rng state.
inline std::vector<int> batch_for_step(std::int64_t step, int num_items, int batch_size,
                                       std::uint64_t seed) {
  if (num_items < 1) throw DegenerateDataError("batch schedule: empty dataset");
  if (step < 1) throw UsageError("batch_for_step: step must be >= 1");
  const std::int64_t per_epoch = (num_items + batch_size - 1) / batch_size;
  const std::int64_t epoch = (step - 1) / per_epoch;
  const std::int64_t slot = (step - 1) % per_epoch;
  std::vector<int> perm(static_cast<std::size_t>(num_items));
  for (int i = 0; i < num_items; ++i) perm[static_cast<std::size_t>(i)] = i;
  Rng rng = Rng(seed).fork("data").fork("epoch-" + std::to_string(epoch));
  rng.shuffle(perm);
  const std::size_t b0 = static_cast<std::size_t>(slot) * batch_size;
  const std::size_t b1 = std::min(b0 + static_cast<std::size_t>(batch_size), perm.size());
  return std::vector<int>(perm.begin() + static_cast<std::ptrdiff_t>(b0),
                          perm.begin() + static_cast<std::ptrdiff_t>(b1));
}

struct StepResult {
  std::int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
  bool skipped = false;                // degenerate batch: no valid loss terms
  std::vector<double> head_accuracy;   // filled only when requested
};

// One optimizer step over a batch of utterances. Losses are summed over valid
// terms of all members and normalized by the total term count. Degenerate
// members are dropped; a fully degenerate batch is skipped (step still
// advances so the schedule position stays a pure function of the step index).
inline StepResult train_step(TrainerState& s, const std::vector<const TrainItem*>& batch,
                             bool want_accuracy = false) {
  const std::int64_t step = s.step + 1;
  StepResult res;
  res.step = step;
  res.lr = lr_at(step, s.cfg);

  // Mask streams are keyed by step and batch slot, not by rng carry-over.
  Rng mask_rng = Rng(s.cfg.seed).fork("mask").fork("step-" + std::to_string(step));

  Tape tape;
  std::vector<Tensor> outputs;  // O per live batch member, for accuracy
  std::vector<const TrainItem*> live;
  std::vector<MaskPlan> plans;  // bestrq only, aligned with live
  Tensor total;
  int count = 0;
  {
    Tape::Scope scope(tape);
    for (const TrainItem* item : batch) {
      try {
        LossTerms terms;
        if (s.cfg.objective == Objective::kBestRq) {
          MaskPlan plan =
              sample_mask(item->features.frames.rows(), s.cfg.mask, mask_rng,
                          s.enc_cfg.subsample_factor);
          const FeatureSequence masked = apply_mask(item->features, plan, s.cfg.mask, mask_rng);
          const EncoderForwardResult fwd = encode(s.enc_cfg, s.enc_params, masked.frames);
          terms = bestrq_loss_terms(fwd.O, item->tokens, plan, s.heads.heads[0]);
          outputs.push_back(fwd.O);
          plans.push_back(std::move(plan));
        } else {
          const EncoderForwardResult fwd = encode(s.enc_cfg, s.enc_params, item->features.frames);
          terms = nestrq_loss_terms(fwd.O, item->tokens, s.heads);
          outputs.push_back(fwd.O);
        }
        total = count == 0 ? terms.sum : add(total, terms.sum);
        count += terms.count;
        live.push_back(item);
      } catch (const DegenerateDataError&) {
        continue;  // member contributes no terms; batch may still proceed
      } catch (const InputError&) {
        continue;  // too short to encode: same treatment as degenerate
      }
    }
    if (count == 0) {
      s.step = step;
      res.skipped = true;
      return res;
    }
    const Tensor loss = div_scalar(total, static_cast<double>(count));
    res.loss = loss.value();
    tape.backward(loss);
  }

  const auto params = s.all_params();
  res.grad_norm = clip_gradients(params, s.cfg.clip_norm);
  adam_update(params, s.adam, s.cfg, res.lr);
  s.step = step;

  // Accuracies come from this step's (pre-update) outputs, outside the tape.
  if (want_accuracy && s.cfg.objective == Objective::kNestRq) {
    const int N = static_cast<int>(s.heads.heads.size());
    res.head_accuracy.assign(static_cast<std::size_t>(N), 0.0);
    for (int n = 1; n <= N; ++n) {
      std::int64_t valid = 0, correct = 0;
      for (std::size_t i = 0; i < live.size(); ++i) {
        const int L = outputs[i].rows();
        if (L - n <= 0) continue;
        const double acc = ntp_token_accuracy(outputs[i], live[i]->tokens, s.heads, n);
        valid += L - n;
        correct += static_cast<std::int64_t>(std::lround(acc * (L - n)));
      }
      res.head_accuracy[static_cast<std::size_t>(n - 1)] =
          valid > 0 ? static_cast<double>(correct) / static_cast<double>(valid) : 0.0;
    }
  } else if (want_accuracy) {
    // bestrq: argmax of the single head vs k_l over masked positions.
    std::int64_t masked = 0, correct = 0;
    const LinearParams& head = s.heads.heads[0];
    for (std::size_t i = 0; i < live.size(); ++i) {
      const Tensor logits = apply_linear(outputs[i], head);
      const int V = logits.cols();
      for (int l = 0; l < outputs[i].rows(); ++l) {
        if (!plans[i].subsampled_mask[static_cast<std::size_t>(l)]) continue;
        int arg = 0;
        for (int j = 1; j < V; ++j)
          if (logits.at(l, j) > logits.at(l, arg)) arg = j;
        ++masked;
        correct += arg == live[i]->tokens[static_cast<std::size_t>(l)];
      }
    }
    res.head_accuracy.assign(1, masked > 0 ? static_cast<double>(correct) / masked : 0.0);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr int kCheckpointFormat = 1;

namespace ckpt_detail {

inline json tensor_index(const std::vector<std::pair<std::string, Tensor>>& params) {
  json list = json::array();
  for (const auto& [name, p] : params) {
    json e;
    e["name"] = name;
    e["rows"] = p.rows();
    e["cols"] = p.cols();
    list.push_back(e);
  }
  return list;
}

inline void check_entry(const json& e, const std::string& name, const Tensor& p,
                        const std::string& what) {
  if (e.at("name").get<std::string>() != name || e.at("rows").get<int>() != p.rows() ||
      e.at("cols").get<int>() != p.cols())
    throw IoError(what + ": tensor index mismatch at '" + name + "'");
}

}  // namespace ckpt_detail

// params.bin / moments.bin use the JSON-header-line + f64 blob layout; f32
// would break bitwise resume, which outranks blob size at desk scale.
inline void write_params_file(const std::filesystem::path& path,
                              const std::vector<std::pair<std::string, Tensor>>& params) {
  json header;
  header["tensors"] = ckpt_detail::tensor_index(params);
  std::string buf = header.dump();
  buf.push_back('\n');
  for (const auto& [name, p] : params) io_detail::append_f64(buf, p.values());
  write_file(path, buf);
}

inline void read_params_file(const std::filesystem::path& path,
                             const std::vector<std::pair<std::string, Tensor>>& params) {
  const std::string content = read_file(path);
  const auto [header, offset] = read_header_line(content, "params file " + path.string());
  const json& list = header.at("tensors");
  if (list.size() != params.size()) throw IoError(path.string() + ": tensor count mismatch");
  std::size_t at = offset;
  for (std::size_t i = 0; i < params.size(); ++i) {
    ckpt_detail::check_entry(list[i], params[i].first, params[i].second, path.string());
    Tensor t = params[i].second;  // shared handle: writes land in the live tensor
    t.values() = io_detail::read_f64(content, at, t.size());
  }
  if (at != content.size()) throw IoError(path.string() + ": trailing bytes");
}

inline void write_moments_file(const std::filesystem::path& path, const AdamState& adam,
                               const std::vector<std::pair<std::string, Tensor>>& params) {
  json header;
  header["t"] = adam.t;
  header["tensors"] = ckpt_detail::tensor_index(params);
  std::string buf = header.dump();
  buf.push_back('\n');
  for (std::size_t i = 0; i < params.size(); ++i) {
    io_detail::append_f64(buf, adam.m[i]);
    io_detail::append_f64(buf, adam.v[i]);
  }
  write_file(path, buf);
}

inline AdamState read_moments_file(const std::filesystem::path& path,
                                   const std::vector<std::pair<std::string, Tensor>>& params) {
  const std::string content = read_file(path);
  const auto [header, offset] = read_header_line(content, "moments file " + path.string());
  AdamState adam;
  adam.t = header.at("t").get<std::int64_t>();
  const json& list = header.at("tensors");
  if (list.size() != params.size()) throw IoError(path.string() + ": tensor count mismatch");
  std::size_t at = offset;
  for (std::size_t i = 0; i < params.size(); ++i) {
    ckpt_detail::check_entry(list[i], params[i].first, params[i].second, path.string());
    adam.m.push_back(io_detail::read_f64(content, at, params[i].second.size()));
    adam.v.push_back(io_detail::read_f64(content, at, params[i].second.size()));
  }
  if (at != content.size()) throw IoError(path.string() + ": trailing bytes");
  return adam;
}

inline void save_checkpoint(const std::filesystem::path& dir, const TrainerState& s,
                            const std::string& config_digest) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint dir: " + dir.string());
  const auto params = s.all_params();
  write_params_file(dir / "params.bin", params);
  write_moments_file(dir / "moments.bin", s.adam, params);
  write_quantizer_file(dir / "quantizer.bin", s.quantizer);
  json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["step"] = s.step;
  manifest["seed"] = s.cfg.seed;
  manifest["objective"] = objective_name(s.cfg.objective);
  manifest["num_heads"] = s.heads.heads.size();
  manifest["vocab"] = s.quantizer.codebook_size;
  manifest["config_digest"] = config_digest;
  manifest["encoder"] = encoder_config_to_json(s.enc_cfg);
  write_file(dir / "manifest.json", manifest.dump() + "\n");
}

struct LoadedCheckpoint {
  EncoderConfig enc_cfg;
  EncoderParams enc_params;
  PredictionHeads heads;
  RandomProjectionQuantizer quantizer;
  Objective objective = Objective::kNestRq;
  std::int64_t step = 0;
  std::uint64_t seed = 0;
  std::string config_digest;
  AdamState adam;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  json manifest;
  try {
    manifest = json::parse(read_file(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw IoError((dir / "manifest.json").string() + ": bad manifest: " + e.what());
  }
  LoadedCheckpoint out;
  try {
    if (manifest.at("format").get<int>() != kCheckpointFormat)
      throw IoError(dir.string() + ": unsupported checkpoint format");
    out.enc_cfg = encoder_config_from_json(manifest.at("encoder"));
    out.step = manifest.at("step").get<std::int64_t>();
    out.seed = manifest.at("seed").get<std::uint64_t>();
    out.objective = objective_from_name(manifest.at("objective").get<std::string>());
    out.config_digest = manifest.at("config_digest").get<std::string>();
  } catch (const json::exception& e) {
    throw IoError(dir.string() + ": bad checkpoint manifest: " + e.what());
  }
  const int num_heads = manifest.at("num_heads").get<int>();
  const int vocab = manifest.at("vocab").get<int>();
  // Structure comes from the config; blob values then overwrite in place.
  out.enc_params = init_encoder(out.enc_cfg, Rng(out.seed));
  out.heads = init_prediction_heads(num_heads, out.enc_cfg.model_dim, vocab, Rng(out.seed));
  auto params = out.enc_params.named_params();
  for (auto& kv : out.heads.named_params()) params.push_back(std::move(kv));
  read_params_file(dir / "params.bin", params);
  out.adam = read_moments_file(dir / "moments.bin", params);
  out.quantizer = read_quantizer_file(dir / "quantizer.bin");
  return out;
}

inline TrainerState resume_trainer(const LoadedCheckpoint& ck, const TrainConfig& cfg) {
  if (cfg.objective != ck.objective)
    throw ConfigError("resume: objective differs from checkpoint");
  TrainerState s;
  s.enc_cfg = ck.enc_cfg;
  s.enc_params = ck.enc_params;
  s.heads = ck.heads;
  s.quantizer = ck.quantizer;
  s.cfg = cfg;
  s.adam = ck.adam;
  s.step = ck.step;
  return s;
}

// ---------------------------------------------------------------------------
// Pretraining driver
// ---------------------------------------------------------------------------

struct MetricsRecord {
  std::int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::vector<double> head_accuracy;
  std::string codebook_digest;  // frozen-quantizer witness, constant per run

  json to_json() const {
    json j;
    j["step"] = step;
    j["loss"] = loss;
    j["lr"] = lr;
    j["head_acc"] = head_accuracy;
    j["codebook_digest"] = codebook_digest;
    return j;
  }
};

inline std::string quantizer_digest(const RandomProjectionQuantizer& q) {
  std::string blob;
  io_detail::append_f32(blob, q.mean);
  io_detail::append_f32(blob, q.stddev);
  io_detail::append_f32(blob, q.projection);
  io_detail::append_f32(blob, q.codebook);
  return hex64(fnv1a64(blob));
}

struct PretrainResult {
  std::vector<MetricsRecord> metrics;
  int skipped_batches = 0;
};

// Runs cfg.steps optimizer steps over the dataset; emits a metrics record
// every log_interval steps and at the final step. With checkpoint_every > 0,
// intermediate checkpoints land in checkpoint_dir/step-<n>; the caller saves
// the final state itself.
template <class LogFn>
inline PretrainResult pretrain(TrainerState& s, const std::vector<TrainItem>& dataset,
                               LogFn&& on_log, int checkpoint_every = 0,
                               const std::filesystem::path& checkpoint_dir = {},
                               const std::string& config_digest = "") {
  if (dataset.empty() && s.cfg.steps > 0)
    throw DegenerateDataError("pretrain: dataset is empty");
  PretrainResult out;
  const std::string qdigest = quantizer_digest(s.quantizer);
  while (s.step < s.cfg.steps) {
    const std::int64_t step = s.step + 1;
    const bool log_now = step % s.cfg.log_interval == 0 || step == s.cfg.steps;
    const std::vector<int> idx = batch_for_step(step, static_cast<int>(dataset.size()),
                                                s.cfg.batch_utterances, s.cfg.seed);
    std::vector<const TrainItem*> batch;
    batch.reserve(idx.size());
    for (int i : idx) batch.push_back(&dataset[static_cast<std::size_t>(i)]);
    const StepResult r = train_step(s, batch, /*want_accuracy=*/log_now);
    if (r.skipped) {
      ++out.skipped_batches;
      continue;
    }
    if (log_now) {
      MetricsRecord rec;
      rec.step = r.step;
      rec.loss = r.loss;
      rec.lr = r.lr;
      rec.head_accuracy = r.head_accuracy;
      rec.codebook_digest = qdigest;
      on_log(rec);
      out.metrics.push_back(std::move(rec));
    }
    if (checkpoint_every > 0 && step % checkpoint_every == 0 && step < s.cfg.steps)
      save_checkpoint(checkpoint_dir / ("step-" + std::to_string(step)), s, config_digest);
  }
  return out;
}

inline void write_metrics_file(const std::filesystem::path& path,
                               const std::vector<MetricsRecord>& metrics) {
  std::string buf;
  for (const auto& m : metrics) {
    buf += m.to_json().dump();
    buf.push_back('\n');
  }
  write_file(path, buf);
}

// ---------------------------------------------------------------------------
// Linear probe
// ---------------------------------------------------------------------------

struct ProbeConfig {
  double split = 0.8;  // fraction of utterances used for probe training
  int epochs = 5;
  int batch_frames = 256;
  double lr = 1e-2;
  std::uint64_t seed = 7;
  bool shuffle_labels = false;

  void validate() const {
    if (split <= 0.0 || split >= 1.0) throw ConfigError("probe: split must be in (0,1)");
    if (epochs < 0) throw ConfigError("probe: epochs must be >= 0");
    if (batch_frames < 1) throw ConfigError("probe: batch_frames must be >= 1");
    if (lr <= 0) throw ConfigError("probe: lr must be > 0");
  }
};

struct ProbeItem {
  FeatureSequence features;
  std::vector<int> frame_labels;
};

struct ProbeResult {
  double accuracy = 0.0;
  double chance = 0.0;
  int num_classes = 0;
  std::int64_t num_train_frames = 0;
  std::int64_t num_test_frames = 0;
};

// Majority label of a 4-frame group; ties resolve to the lowest label id.
inline int pool_group_label(const std::vector<int>& labels, int group, int factor,
                            int num_classes) {
  std::vector<int> counts(static_cast<std::size_t>(num_classes), 0);
  for (int s = 0; s < factor; ++s) {
    const int t = group * factor + s;
    const int lab = labels[static_cast<std::size_t>(t)];
    if (lab < 0 || lab >= num_classes) throw InputError("probe: label id out of range");
    ++counts[static_cast<std::size_t>(lab)];
  }
  int best = 0;
  for (int c = 1; c < num_classes; ++c)
    if (counts[static_cast<std::size_t>(c)] > counts[static_cast<std::size_t>(best)]) best = c;
  return best;
}

// Frozen-encoder linear probe: one affine map model_dim -> S trained with
// cross-entropy on pooled frame labels; utterance-level train/test split.
inline ProbeResult linear_probe(const EncoderConfig& enc_cfg, const EncoderParams& enc_params,
                                const std::vector<ProbeItem>& items, int num_classes,
                                const ProbeConfig& cfg) {
  cfg.validate();
  if (num_classes < 2) throw DomainError("probe: need at least 2 classes");
  if (items.size() < 2) throw DomainError("probe: need at least 2 utterances to split");
  const Rng root = Rng(cfg.seed).fork("probe");

  // Encode every utterance once (frozen encoder, no tape) and pool labels.
  std::vector<std::vector<double>> reps;  // one row per pooled group
  std::vector<int> labels;
  std::vector<std::size_t> utt_of_row;
  const int d = enc_cfg.model_dim;
  for (std::size_t u = 0; u < items.size(); ++u) {
    const auto& it = items[u];
    const int T = it.features.frames.rows();
    if (static_cast<int>(it.frame_labels.size()) != T)
      throw InputError("probe: label length does not match frame count");
    if (T < enc_cfg.subsample_factor) continue;
    const EncoderForwardResult fwd = encode(enc_cfg, enc_params, it.features.frames);
    const int L = fwd.O.rows();
    for (int l = 0; l < L; ++l) {
      std::vector<double> row(static_cast<std::size_t>(d));
      for (int j = 0; j < d; ++j) row[static_cast<std::size_t>(j)] = fwd.O.at(l, j);
      reps.push_back(std::move(row));
      labels.push_back(
          pool_group_label(it.frame_labels, l, enc_cfg.subsample_factor, num_classes));
      utt_of_row.push_back(u);
    }
  }
  if (reps.empty()) throw DegenerateDataError("probe: no encodable utterances");
  {
    const int first = labels[0];
    bool single = true;
    for (int lab : labels) single = single && lab == first;
    if (single) throw DomainError("probe: corpus has a single class");
  }

  if (cfg.shuffle_labels) {
    Rng rng = root.fork("shuffle-labels");
    rng.shuffle(labels);
  }

  // Utterance-level split so test frames come from unseen utterances.
  std::vector<std::size_t> utts(items.size());
  for (std::size_t i = 0; i < utts.size(); ++i) utts[i] = i;
  {
    Rng rng = root.fork("split");
    rng.shuffle(utts);
  }
  std::size_t num_train_utts =
      static_cast<std::size_t>(std::floor(cfg.split * static_cast<double>(items.size())));
  num_train_utts = std::min(std::max<std::size_t>(num_train_utts, 1), items.size() - 1);
  std::vector<std::uint8_t> is_train(items.size(), 0);
  for (std::size_t i = 0; i < num_train_utts; ++i) is_train[utts[i]] = 1;

  std::vector<int> train_rows, test_rows;
  for (std::size_t r = 0; r < reps.size(); ++r)
    (is_train[utt_of_row[r]] ? train_rows : test_rows).push_back(static_cast<int>(r));
  if (train_rows.empty() || test_rows.empty())
    throw DegenerateDataError("probe: empty train or test split");

  // Affine head, Xavier init; minibatch Adam over train rows.
  Rng init_rng = root.fork("head");
  Tensor W = enc_detail::xavier_matrix(d, num_classes, init_rng);
  Tensor b = Tensor::zeros({1, num_classes}, true);
  TrainConfig adam_cfg;  // probe reuses the Adam defaults; schedule unused
  adam_cfg.seed = cfg.seed;
  std::vector<std::pair<std::string, Tensor>> params = {{"probe.W", W}, {"probe.b", b}};
  AdamState adam = init_adam(params);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<int> order = train_rows;
    Rng rng = root.fork("epoch-" + std::to_string(epoch));
    rng.shuffle(order);
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(cfg.batch_frames)) {
      const std::size_t end =
          std::min(order.size(), at + static_cast<std::size_t>(cfg.batch_frames));
      const int B = static_cast<int>(end - at);
      Tensor X = Tensor::zeros({B, d});
      std::vector<int> y(static_cast<std::size_t>(B));
      for (int i = 0; i < B; ++i) {
        const int r = order[at + static_cast<std::size_t>(i)];
        std::copy(reps[static_cast<std::size_t>(r)].begin(),
                  reps[static_cast<std::size_t>(r)].end(), X.data() + static_cast<std::size_t>(i) * d);
        y[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(r)];
      }
      Tape tape;
      {
        Tape::Scope scope(tape);
        const Tensor loss = cross_entropy(apply_linear(X, {W, b}), y, Reduction::kMean);
        tape.backward(loss);
      }
      adam_update(params, adam, adam_cfg, cfg.lr);
    }
  }

  // Held-out accuracy; argmax ties resolve to the lowest class id.
  std::int64_t correct = 0;
  for (int r : test_rows) {
    const auto& x = reps[static_cast<std::size_t>(r)];
    int arg = 0;
    double best = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < num_classes; ++c) {
      double z = b.at(0, c);
      for (int j = 0; j < d; ++j) z += x[static_cast<std::size_t>(j)] * W.at(j, c);
      if (z > best) {
        best = z;
        arg = c;
      }
    }
    if (arg == labels[static_cast<std::size_t>(r)]) ++correct;
  }
  ProbeResult res;
  res.num_classes = num_classes;
  res.chance = 1.0 / num_classes;
  res.num_train_frames = static_cast<std::int64_t>(train_rows.size());
  res.num_test_frames = static_cast<std::int64_t>(test_rows.size());
  res.accuracy = static_cast<double>(correct) / static_cast<double>(test_rows.size());
  return res;
}

// ---------------------------------------------------------------------------
// Causality adaptation of a trained encoder
// ---------------------------------------------------------------------------

struct AdaptedEncoder {
  EncoderConfig cfg;
  EncoderParams params;
};

// Attention modes switch by mask only; convolution modes move via kernel
// truncation (NC-C -> C-C) or Xavier expansion (C-C -> NC-C, seeded).
inline AdaptedEncoder adapt_encoder(const EncoderConfig& cfg, const EncoderParams& params,
                                    const CausalitySpec& target, std::uint64_t expand_seed) {
  CausalitySpec want = target;
  want.conv_half_width = cfg.causality.conv_half_width;
  want.validate(cfg.num_blocks);
  AdaptedEncoder out;
  out.cfg = set_attention_mode(cfg, want);
  if (cfg.causality.conv_mode == want.conv_mode) {
    out.params = clone_params(params);
  } else if (want.conv_mode == ConvMode::kCausal) {
    out.params = truncate_conv_kernels(params);
  } else {
    out.params = expand_conv_kernels(params, Rng(expand_seed));
  }
  return out;
}

inline ProbeResult adapt_and_probe(const EncoderConfig& cfg, const EncoderParams& params,
                                   const CausalitySpec& target, std::uint64_t expand_seed,
                                   const std::vector<ProbeItem>& items, int num_classes,
                                   const ProbeConfig& probe_cfg) {
  const AdaptedEncoder adapted = adapt_encoder(cfg, params, target, expand_seed);
  return linear_probe(adapted.cfg, adapted.params, items, num_classes, probe_cfg);
}

}  // namespace nestrq
