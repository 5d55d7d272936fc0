// nestrq: desk-scale NEST-RQ / BEST-RQ pre-training pipeline.
//
// Verbs: gen-corpus, quantize, pretrain, adapt, probe, inspect-codebook.
// stdout carries exactly one machine-readable JSON document per invocation;
// all human-oriented messages go to stderr. Exit codes: 0 success, 1 I/O,
// 2 config/validation, 3 degenerate data.

#include <cstdint>
#include <cstdlib>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nestrq/nestrq.hpp"

namespace {

using nestrq::json;

constexpr int kExitOk = 0;
constexpr int kExitIo = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDegenerate = 3;

std::optional<std::uint64_t> env_seed() {
  const char* raw = std::getenv("NESTRQ_SEED");
  if (raw == nullptr || *raw == '\0') return std::nullopt;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(raw, &end, 10);
  if (end == nullptr || *end != '\0')
    throw nestrq::ConfigError("NESTRQ_SEED must be an unsigned integer");
  return static_cast<std::uint64_t>(v);
}

// Loads the run config, filling absent per-section seeds from NESTRQ_SEED
// before defaults apply. An empty path means "all defaults".
nestrq::RunConfig load_config(const std::string& path) {
  json doc = json::object();
  if (!path.empty()) {
    try {
      doc = json::parse(nestrq::read_file(path));
    } catch (const json::exception& e) {
      throw nestrq::ConfigError(path + ": invalid JSON: " + e.what());
    }
  }
  if (const auto seed = env_seed()) {
    for (const char* section : {"corpus", "quantizer", "training", "probe"}) {
      if (!doc.contains(section)) doc[section] = json::object();
      if (doc[section].is_object() && !doc[section].contains("seed"))
        doc[section]["seed"] = *seed;
    }
  }
  return nestrq::RunConfig::from_json(doc);
}

void emit(const json& result) { std::cout << result.dump() << "\n"; }

std::string digest_of(const std::filesystem::path& p) {
  return nestrq::hex64(nestrq::file_digest(p));
}

std::vector<nestrq::FeatureSequence> load_features(
    const std::vector<nestrq::ManifestEntry>& entries) {
  std::vector<nestrq::FeatureSequence> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.push_back(nestrq::read_feature_file(e.feature_path));
  return out;
}

// ---------------------------------------------------------------------------
// gen-corpus
// ---------------------------------------------------------------------------

int cmd_gen_corpus(const std::string& config_path, const std::string& out_dir,
                   std::optional<std::uint64_t> seed) {
  nestrq::RunConfig cfg = load_config(config_path);
  if (seed) cfg.corpus.seed = *seed;
  const auto corpus = nestrq::generate_corpus(cfg.corpus, cfg.features);
  nestrq::write_corpus(out_dir, corpus, cfg.corpus, cfg.features, cfg.digest());
  json result;
  result["command"] = "gen-corpus";
  result["out"] = out_dir;
  result["num_utterances"] = corpus.size();
  result["num_states"] = cfg.corpus.num_states;
  result["config_digest"] = cfg.digest();
  result["manifest_digest"] = digest_of(std::filesystem::path(out_dir) / "manifest.jsonl");
  emit(result);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// quantize
// ---------------------------------------------------------------------------

int cmd_quantize(const std::string& config_path, const std::string& manifest_path,
                 const std::string& quantizer_in, const std::string& quantizer_out,
                 const std::string& tokens_out, std::optional<std::uint64_t> seed) {
  nestrq::RunConfig cfg = load_config(config_path);
  if (seed) cfg.quantizer_seed = *seed;
  const auto entries = nestrq::read_manifest(manifest_path);
  const auto features = load_features(entries);
  for (const auto& f : features)
    if (f.frames.cols() != cfg.features.num_mels)
      throw nestrq::InputError(f.utterance_id + ": feature dim does not match config num_mels");

  nestrq::RandomProjectionQuantizer q;
  if (!quantizer_in.empty()) {
    q = nestrq::read_quantizer_file(quantizer_in);
    if (q.num_mels != cfg.features.num_mels)
      throw nestrq::ConfigError("loaded quantizer num_mels does not match config");
  } else {
    q = nestrq::init_quantizer(cfg.quantizer, cfg.features.num_mels,
                               nestrq::Rng(cfg.quantizer_seed));
    std::vector<nestrq::StackedFrames> stacked;
    stacked.reserve(features.size());
    for (const auto& f : features) stacked.push_back(nestrq::stack_frames(f.frames, q.stack));
    nestrq::compute_standardization(stacked, q.mean, q.stddev);
  }
  nestrq::write_quantizer_file(quantizer_out, q);
  // Tokens always come from the f32 file image, so a rerun against the saved
  // quantizer reproduces them byte-for-byte.
  q = nestrq::read_quantizer_file(quantizer_out);

  std::vector<nestrq::TokenRow> rows;
  rows.reserve(features.size());
  for (const auto& f : features)
    rows.push_back({f.utterance_id, q.codebook_size, q.quantize(f.frames)});
  nestrq::write_token_file(tokens_out, rows);
  const nestrq::TokenStats stats = nestrq::token_stats(rows, q.codebook_size);

  json result;
  result["command"] = "quantize";
  result["V"] = q.codebook_size;
  result["dim"] = q.codebook_dim;
  result["stack"] = q.stack;
  result["num_tokens"] = stats.num_tokens;
  result["distinct_tokens"] = stats.distinct;
  result["utilization"] = stats.utilization;
  result["entropy_bits"] = stats.entropy_bits;
  result["quantizer_digest"] = nestrq::quantizer_digest(q);
  result["tokens_digest"] = digest_of(tokens_out);
  result["config_digest"] = cfg.digest();
  emit(result);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

int cmd_pretrain(const std::string& config_path, const std::string& manifest_path,
                 const std::string& quantizer_path, const std::string& tokens_path,
                 const std::string& out_dir, const std::string& objective_flag,
                 std::optional<int> steps_flag, std::optional<std::uint64_t> seed,
                 int checkpoint_every) {
  nestrq::RunConfig cfg = load_config(config_path);
  if (!objective_flag.empty())
    cfg.training.objective = nestrq::objective_from_name(objective_flag);
  if (steps_flag) cfg.training.steps = *steps_flag;
  if (seed) cfg.training.seed = *seed;
  cfg.validate();

  const auto entries = nestrq::read_manifest(manifest_path);
  const nestrq::RandomProjectionQuantizer q = nestrq::read_quantizer_file(quantizer_path);
  if (q.num_mels != cfg.features.num_mels)
    throw nestrq::ConfigError("quantizer num_mels does not match config");

  std::map<std::string, std::vector<int>> tokens_by_id;
  for (auto& row : nestrq::read_token_file(tokens_path)) {
    if (row.codebook_size != q.codebook_size)
      throw nestrq::InputError(row.utterance_id + ": token V does not match quantizer");
    for (int t : row.tokens)
      if (t < 0 || t >= q.codebook_size)
        throw nestrq::InputError(row.utterance_id + ": token id out of range");
    tokens_by_id[row.utterance_id] = std::move(row.tokens);
  }

  std::vector<nestrq::TrainItem> dataset;
  dataset.reserve(entries.size());
  for (const auto& e : entries) {
    const auto it = tokens_by_id.find(e.id);
    if (it == tokens_by_id.end())
      throw nestrq::InputError(e.id + ": no token row in " + tokens_path);
    dataset.push_back({nestrq::read_feature_file(e.feature_path), it->second});
  }

  nestrq::TrainerState trainer =
      nestrq::init_trainer(cfg.encoder, cfg.training, q, cfg.ntp.num_heads);
  const std::string config_digest = cfg.digest();
  const auto result = nestrq::pretrain(
      trainer, dataset,
      [](const nestrq::MetricsRecord& rec) {
        std::cerr << "step " << rec.step << " loss " << rec.loss << " lr " << rec.lr << "\n";
      },
      checkpoint_every, out_dir, config_digest);
  if (result.skipped_batches > 0)
    std::cerr << "skipped " << result.skipped_batches << " degenerate batches\n";

  nestrq::save_checkpoint(out_dir, trainer, config_digest);
  const auto metrics_path = std::filesystem::path(out_dir) / "metrics.jsonl";
  nestrq::write_metrics_file(metrics_path, result.metrics);

  json out;
  out["command"] = "pretrain";
  out["objective"] = nestrq::objective_name(cfg.training.objective);
  out["steps"] = trainer.step;
  out["skipped_batches"] = result.skipped_batches;
  out["final_loss"] = result.metrics.empty() ? json(nullptr) : json(result.metrics.back().loss);
  out["out"] = out_dir;
  out["config_digest"] = config_digest;
  out["metrics_digest"] = digest_of(metrics_path);
  out["params_digest"] = digest_of(std::filesystem::path(out_dir) / "params.bin");
  emit(out);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// adapt
// ---------------------------------------------------------------------------

nestrq::CausalitySpec parse_target_causality(const std::string& s) {
  if (s == "causal") return nestrq::CausalitySpec::causal();
  if (s == "noncausal") return nestrq::CausalitySpec::noncausal();
  const std::string prefix = "lookahead:";
  if (s.rfind(prefix, 0) == 0) {
    try {
      return nestrq::CausalitySpec::lookahead(std::stoi(s.substr(prefix.size())));
    } catch (const std::exception&) {
      throw nestrq::ConfigError("bad lookahead M in --to-causality '" + s + "'");
    }
  }
  throw nestrq::ConfigError("bad --to-causality '" + s +
                            "' (want causal|noncausal|lookahead:M)");
}

int cmd_adapt(const std::string& checkpoint_dir, const std::string& to_causality,
              const std::string& out_dir, std::optional<std::uint64_t> seed) {
  const nestrq::LoadedCheckpoint ck = nestrq::load_checkpoint(checkpoint_dir);
  const nestrq::CausalitySpec target = parse_target_causality(to_causality);
  std::uint64_t expand_seed = 1;
  if (const auto env = env_seed()) expand_seed = *env;
  if (seed) expand_seed = *seed;

  const nestrq::AdaptedEncoder adapted =
      nestrq::adapt_encoder(ck.enc_cfg, ck.enc_params, target, expand_seed);

  nestrq::TrainerState s;
  s.enc_cfg = adapted.cfg;
  s.enc_params = adapted.params;
  s.heads = ck.heads;
  s.quantizer = ck.quantizer;
  s.cfg.objective = ck.objective;
  s.cfg.seed = ck.seed;
  s.adam = nestrq::init_adam(s.all_params());  // kernel shapes changed: moments reset
  s.step = ck.step;
  nestrq::save_checkpoint(out_dir, s, ck.config_digest);

  const std::string transformation =
      nestrq::attention_mode_name(ck.enc_cfg.causality.attention_mode) + "/" +
      nestrq::conv_mode_name(ck.enc_cfg.causality.conv_mode) + "->" +
      nestrq::attention_mode_name(adapted.cfg.causality.attention_mode) + "/" +
      nestrq::conv_mode_name(adapted.cfg.causality.conv_mode);

  json out;
  out["command"] = "adapt";
  out["out"] = out_dir;
  out["transformation"] = transformation;
  out["source_params_digest"] =
      digest_of(std::filesystem::path(checkpoint_dir) / "params.bin");
  out["params_digest"] = digest_of(std::filesystem::path(out_dir) / "params.bin");
  emit(out);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// probe
// ---------------------------------------------------------------------------

int cmd_probe(const std::string& config_path, const std::string& checkpoint_dir,
              const std::string& manifest_path, bool random_init,
              std::optional<double> split_flag, std::optional<int> epochs_flag,
              bool shuffle_labels, std::optional<std::uint64_t> seed) {
  if (checkpoint_dir.empty() && !random_init)
    throw nestrq::UsageError("probe: need --checkpoint or --random-init with --config");

  nestrq::RunConfig cfg = load_config(config_path);
  if (split_flag) cfg.probe.split = *split_flag;
  if (epochs_flag) cfg.probe.epochs = *epochs_flag;
  if (shuffle_labels) cfg.probe.shuffle_labels = true;
  if (seed) cfg.probe.seed = *seed;
  cfg.probe.validate();

  nestrq::EncoderConfig enc_cfg;
  nestrq::EncoderParams enc_params;
  if (random_init) {
    enc_cfg = cfg.encoder;
    enc_params = nestrq::init_encoder(enc_cfg, nestrq::Rng(cfg.training.seed));
  } else {
    nestrq::LoadedCheckpoint ck = nestrq::load_checkpoint(checkpoint_dir);
    enc_cfg = ck.enc_cfg;
    enc_params = ck.enc_params;
  }

  const auto entries = nestrq::read_manifest(manifest_path);
  std::vector<nestrq::ProbeItem> items;
  items.reserve(entries.size());
  int num_states = 0;
  for (const auto& e : entries) {
    const nestrq::LabelFile labels = nestrq::read_label_file(e.label_path);
    if (num_states == 0) num_states = labels.num_states;
    if (labels.num_states != num_states)
      throw nestrq::InputError(e.id + ": inconsistent num_states across label files");
    items.push_back({nestrq::read_feature_file(e.feature_path), labels.frame_labels});
  }
  if (items.empty()) throw nestrq::DegenerateDataError("probe: empty manifest");

  const nestrq::ProbeResult res =
      nestrq::linear_probe(enc_cfg, enc_params, items, num_states, cfg.probe);

  json out;
  out["command"] = "probe";
  out["accuracy"] = res.accuracy;
  out["chance"] = res.chance;
  out["num_classes"] = res.num_classes;
  out["num_train_frames"] = res.num_train_frames;
  out["num_test_frames"] = res.num_test_frames;
  out["shuffle_labels"] = cfg.probe.shuffle_labels;
  out["random_init"] = random_init;
  emit(out);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// inspect-codebook
// ---------------------------------------------------------------------------

int cmd_inspect_codebook(const std::string& quantizer_path, const std::string& tokens_path) {
  const nestrq::RandomProjectionQuantizer q = nestrq::read_quantizer_file(quantizer_path);
  json out;
  out["command"] = "inspect-codebook";
  out["V"] = q.codebook_size;
  out["dim"] = q.codebook_dim;
  out["stack"] = q.stack;
  out["num_mels"] = q.num_mels;
  out["quantizer_digest"] = nestrq::quantizer_digest(q);
  if (!tokens_path.empty()) {
    const auto rows = nestrq::read_token_file(tokens_path);
    const nestrq::TokenStats stats = nestrq::token_stats(rows, q.codebook_size);
    out["num_tokens"] = stats.num_tokens;
    out["distinct_tokens"] = stats.distinct;
    out["utilization"] = stats.utilization;
    out["entropy_bits"] = stats.entropy_bits;
  }
  emit(out);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale NEST-RQ / BEST-RQ speech SSL laboratory"};
  app.require_subcommand(1);

  std::string config_path, out_dir, manifest_path, quantizer_in, quantizer_out, tokens_path;
  std::string checkpoint_dir, to_causality, objective_flag;
  bool shuffle_labels = false, random_init = false;
  int checkpoint_every = 0;
  std::optional<std::uint64_t> seed;
  std::optional<int> steps_flag, epochs_flag;
  std::optional<double> split_flag;

  auto* gen = app.add_subcommand("gen-corpus", "generate the synthetic corpus");
  gen->add_option("--config", config_path, "run config JSON");
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_option("--seed", seed, "override corpus seed");

  auto* quant = app.add_subcommand("quantize", "build/apply the random-projection quantizer");
  quant->add_option("--config", config_path, "run config JSON");
  quant->add_option("--manifest", manifest_path, "corpus manifest.jsonl")->required();
  quant->add_option("--quantizer-in", quantizer_in, "reuse a saved quantizer");
  quant->add_option("--quantizer-out", quantizer_out, "quantizer output file")->required();
  quant->add_option("--tokens-out", tokens_path, "token JSONL output file")->required();
  quant->add_option("--seed", seed, "override quantizer seed");

  auto* pre = app.add_subcommand("pretrain", "run SSL pre-training");
  pre->add_option("--config", config_path, "run config JSON");
  pre->add_option("--manifest", manifest_path, "corpus manifest.jsonl")->required();
  pre->add_option("--quantizer", quantizer_out, "quantizer file")->required();
  pre->add_option("--tokens", tokens_path, "token JSONL file")->required();
  pre->add_option("--out", out_dir, "checkpoint output directory")->required();
  pre->add_option("--objective", objective_flag, "bestrq|nestrq (overrides config)");
  pre->add_option("--steps", steps_flag, "override training steps");
  pre->add_option("--seed", seed, "override training seed");
  pre->add_option("--checkpoint-every", checkpoint_every, "periodic checkpoint interval");

  auto* adapt = app.add_subcommand("adapt", "switch a checkpoint's causality");
  adapt->add_option("--checkpoint", checkpoint_dir, "source checkpoint dir")->required();
  adapt->add_option("--to-causality", to_causality, "causal|noncausal|lookahead:M")->required();
  adapt->add_option("--out", out_dir, "adapted checkpoint dir")->required();
  adapt->add_option("--seed", seed, "kernel expansion seed");

  auto* probe = app.add_subcommand("probe", "linear probe on frame labels");
  probe->add_option("--config", config_path, "run config JSON");
  probe->add_option("--checkpoint", checkpoint_dir, "encoder checkpoint dir");
  probe->add_option("--manifest", manifest_path, "labeled corpus manifest")->required();
  probe->add_flag("--random-init", random_init, "probe a freshly initialized encoder");
  probe->add_option("--split", split_flag, "train fraction of utterances");
  probe->add_option("--epochs", epochs_flag, "probe training epochs");
  probe->add_flag("--shuffle-labels", shuffle_labels, "shuffle pooled labels (chance control)");
  probe->add_option("--seed", seed, "override probe seed");

  auto* inspect = app.add_subcommand("inspect-codebook", "print quantizer/codebook stats");
  inspect->add_option("--quantizer", quantizer_out, "quantizer file")->required();
  inspect->add_option("--tokens", tokens_path, "token JSONL for usage stats");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help / --version
    std::cerr << "nestrq: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    if (gen->parsed()) return cmd_gen_corpus(config_path, out_dir, seed);
    if (quant->parsed())
      return cmd_quantize(config_path, manifest_path, quantizer_in, quantizer_out, tokens_path,
                          seed);
    if (pre->parsed())
      return cmd_pretrain(config_path, manifest_path, quantizer_out, tokens_path, out_dir,
                          objective_flag, steps_flag, seed, checkpoint_every);
    if (adapt->parsed()) return cmd_adapt(checkpoint_dir, to_causality, out_dir, seed);
    if (probe->parsed())
      return cmd_probe(config_path, checkpoint_dir, manifest_path, random_init, split_flag,
                       epochs_flag, shuffle_labels, seed);
    if (inspect->parsed()) return cmd_inspect_codebook(quantizer_out, tokens_path);
    std::cerr << "nestrq: no command\n";
    return kExitConfig;
  } catch (const nestrq::IoError& e) {
    std::cerr << "nestrq: " << e.what() << "\n";
    return kExitIo;
  } catch (const nestrq::DegenerateDataError& e) {
    std::cerr << "nestrq: " << e.what() << "\n";
    return kExitDegenerate;
  } catch (const nestrq::DomainError& e) {
    std::cerr << "nestrq: " << e.what() << "\n";
    return kExitDegenerate;
  } catch (const nestrq::Error& e) {
    std::cerr << "nestrq: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "nestrq: internal error: " << e.what() << "\n";
    return kExitConfig;
  }
}
