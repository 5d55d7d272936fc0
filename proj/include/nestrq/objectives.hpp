#pragma once

// The two SSL objectives. BEST-RQ: mask spans of input frames, fill them with
// Gaussian noise, and predict the tokens of the masked subsampled positions
// from one head. NEST-RQ: no input masking; N distinct heads at position l
// predict tokens k_{l+1} .. k_{l+N}, pairs running past the end are dropped,
// and the loss is the mean over valid (l, n) pairs.

#include <string>
#include <utility>
#include <vector>

#include "nestrq/common.hpp"
#include "nestrq/encoder.hpp"
#include "nestrq/features.hpp"
#include "nestrq/rng.hpp"
#include "nestrq/tensor.hpp"

namespace nestrq {

// ---------------------------------------------------------------------------
// Masking (BEST-RQ)
// ---------------------------------------------------------------------------

struct MaskConfig {
  double span_ms = 400.0;
  double frame_stride_ms = 10.0;
  double start_prob = 0.012;  // p, per frame
  double fill_mean = 0.0;
  double fill_std = 0.1;

  int span_frames() const {
    return static_cast<int>(std::lround(span_ms / frame_stride_ms));
  }

  void validate() const {
    if (span_frames() < 1) throw ConfigError("mask: span must cover at least one frame");
    if (start_prob < 0.0 || start_prob > 1.0) throw ConfigError("mask: start_prob outside [0,1]");
    if (fill_std < 0.0) throw ConfigError("mask: fill_std must be >= 0");
  }
};

struct MaskPlan {
  std::vector<std::uint8_t> frame_mask;       // T entries
  std::vector<std::uint8_t> subsampled_mask;  // floor(T/4) entries

  int num_masked_frames() const {
    int n = 0;
    for (auto b : frame_mask) n += b != 0;
    return n;
  }
  int num_masked_positions() const {
    int n = 0;
    for (auto b : subsampled_mask) n += b != 0;
    return n;
  }
};

// Every frame draws exactly one uniform; a draw < p starts a span of
// min(span_frames, T - t) frames. Spans union. A subsampled position is masked
// iff any of its 4 source frames is.
inline MaskPlan sample_mask(int T, const MaskConfig& cfg, Rng& rng, int subsample_factor = 4) {
  cfg.validate();
  if (T < 1) throw InputError("sample_mask: T must be >= 1");
  MaskPlan plan;
  plan.frame_mask.assign(static_cast<std::size_t>(T), 0);
  const int span = cfg.span_frames();
  for (int t = 0; t < T; ++t) {
    const bool start = rng.uniform() < cfg.start_prob;
    if (!start) continue;
    const int end = std::min(T, t + span);
    for (int u = t; u < end; ++u) plan.frame_mask[static_cast<std::size_t>(u)] = 1;
  }
  const int L = T / subsample_factor;
  plan.subsampled_mask.assign(static_cast<std::size_t>(L), 0);
  for (int l = 0; l < L; ++l)
    for (int s = 0; s < subsample_factor; ++s)
      if (plan.frame_mask[static_cast<std::size_t>(l * subsample_factor + s)])
        plan.subsampled_mask[static_cast<std::size_t>(l)] = 1;
  return plan;
}

// Masked cells are replaced by Gaussian fill draws (row-major over masked
// cells); unmasked cells are bit-identical to the input.
inline FeatureSequence apply_mask(const FeatureSequence& x, const MaskPlan& plan,
                                  const MaskConfig& cfg, Rng& rng) {
  const int T = x.frames.rows();
  const int F = x.frames.cols();
  if (static_cast<int>(plan.frame_mask.size()) != T)
    throw UsageError("apply_mask: plan length does not match frame count");
  FeatureSequence out;
  out.utterance_id = x.utterance_id;
  out.stride_ms = x.stride_ms;
  out.frames = Tensor::from({T, F}, x.frames.values());
  for (int t = 0; t < T; ++t) {
    if (!plan.frame_mask[static_cast<std::size_t>(t)]) continue;
    for (int f = 0; f < F; ++f) out.frames.at(t, f) = rng.normal(cfg.fill_mean, cfg.fill_std);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Prediction heads
// ---------------------------------------------------------------------------

struct NtpConfig {
  int num_heads = 5;  // N
  int vocab = 1024;   // V, must match the quantizer

  void validate() const {
    if (num_heads < 1) throw ConfigError("ntp: num_heads (N) must be >= 1");
    if (vocab < 1) throw ConfigError("ntp: vocab (V) must be >= 1");
  }
};

// N affine maps model_dim -> V (one for BEST-RQ). Heads are distinct
// parameter sets drawn from one fork("heads") stream in index order.
struct PredictionHeads {
  std::vector<LinearParams> heads;

  std::vector<std::pair<std::string, Tensor>> named_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (std::size_t n = 0; n < heads.size(); ++n) {
      out.emplace_back("head" + std::to_string(n) + ".W", heads[n].W);
      out.emplace_back("head" + std::to_string(n) + ".b", heads[n].b);
    }
    return out;
  }
};

inline PredictionHeads init_prediction_heads(int num_heads, int model_dim, int vocab,
                                             const Rng& root) {
  if (num_heads < 1) throw ConfigError("heads: num_heads must be >= 1");
  Rng rng = root.fork("heads");
  PredictionHeads h;
  h.heads.reserve(static_cast<std::size_t>(num_heads));
  for (int n = 0; n < num_heads; ++n)
    h.heads.push_back(enc_detail::init_linear(model_dim, vocab, rng));
  return h;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Unnormalized loss plus its term count, so batches can be averaged over the
// total number of valid terms rather than per utterance.
struct LossTerms {
  Tensor sum;  // scalar
  int count = 0;
};

inline LossTerms bestrq_loss_terms(const Tensor& O, const std::vector<int>& tokens,
                                   const MaskPlan& plan, const LinearParams& head) {
  const int L = O.rows();
  if (static_cast<int>(tokens.size()) != L)
    throw ShapeError("bestrq_loss: |O| and |tokens| disagree");
  if (static_cast<int>(plan.subsampled_mask.size()) != L)
    throw ShapeError("bestrq_loss: mask plan does not match L");
  std::vector<int> positions;
  std::vector<int> targets;
  for (int l = 0; l < L; ++l)
    if (plan.subsampled_mask[static_cast<std::size_t>(l)]) {
      positions.push_back(l);
      targets.push_back(tokens[static_cast<std::size_t>(l)]);
    }
  if (positions.empty())
    throw DegenerateDataError("bestrq_loss: no masked subsampled positions");
  const Tensor logits = apply_linear(select_rows(O, positions), head);
  return {cross_entropy(logits, targets, Reduction::kSum), static_cast<int>(positions.size())};
}

inline Tensor bestrq_loss(const Tensor& O, const std::vector<int>& tokens, const MaskPlan& plan,
                          const LinearParams& head) {
  const LossTerms t = bestrq_loss_terms(O, tokens, plan, head);
  return div_scalar(t.sum, static_cast<double>(t.count));
}

// Head n contributes cross-entropy of head_n(O[l]) vs k_{l+n} for every l with
// l + n <= L (1-based); heads accumulate in ascending n, rows in ascending l.
inline LossTerms nestrq_loss_terms(const Tensor& O, const std::vector<int>& tokens,
                                   const PredictionHeads& heads) {
  const int L = O.rows();
  if (static_cast<int>(tokens.size()) != L)
    throw ShapeError("nestrq_loss: |O| and |tokens| disagree");
  const int N = static_cast<int>(heads.heads.size());
  LossTerms out;
  out.sum = Tensor::scalar(0.0);
  for (int n = 1; n <= N; ++n) {
    const int valid = L - n;
    if (valid <= 0) continue;
    const Tensor logits =
        apply_linear(slice_rows(O, 0, valid), heads.heads[static_cast<std::size_t>(n - 1)]);
    std::vector<int> targets(tokens.begin() + n, tokens.begin() + n + valid);
    const Tensor ce = cross_entropy(logits, targets, Reduction::kSum);
    out.sum = out.count == 0 ? ce : add(out.sum, ce);
    out.count += valid;
  }
  if (out.count == 0)
    throw DegenerateDataError("nestrq_loss: no valid (position, head) pairs (sequence too short)");
  return out;
}

inline Tensor nestrq_loss(const Tensor& O, const std::vector<int>& tokens,
                          const PredictionHeads& heads) {
  const LossTerms t = nestrq_loss_terms(O, tokens, heads);
  return div_scalar(t.sum, static_cast<double>(t.count));
}

// Fraction of valid positions where argmax of head n's logits hits k_{l+n};
// argmax ties resolve to the lowest index. n is 1-based.
inline double ntp_token_accuracy(const Tensor& O, const std::vector<int>& tokens,
                                 const PredictionHeads& heads, int n) {
  const int L = O.rows();
  if (static_cast<int>(tokens.size()) != L)
    throw ShapeError("ntp_token_accuracy: |O| and |tokens| disagree");
  const int N = static_cast<int>(heads.heads.size());
  if (n < 1 || n > N) throw UsageError("ntp_token_accuracy: head index out of range");
  const int valid = L - n;
  if (valid <= 0) throw DegenerateDataError("ntp_token_accuracy: no valid positions");
  const LinearParams& head = heads.heads[static_cast<std::size_t>(n - 1)];
  const Tensor logits = apply_linear(slice_rows(O, 0, valid), head);
  int correct = 0;
  const int V = logits.cols();
  for (int i = 0; i < valid; ++i) {
    int arg = 0;
    for (int j = 1; j < V; ++j)
      if (logits.at(i, j) > logits.at(i, arg)) arg = j;
    if (arg == tokens[static_cast<std::size_t>(i + n)]) ++correct;
  }
  return static_cast<double>(correct) / valid;
}

}  // namespace nestrq
