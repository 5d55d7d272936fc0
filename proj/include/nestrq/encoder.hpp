#pragma once

// Conformer encoder with configurable causality. A 4x causal subsampler feeds
// a stack of blocks (half-FF, masked self-attention, depthwise-conv module,
// half-FF, layernorm). Attention causality is a mask choice; convolution
// causality is a kernel-shape choice, with truncate/expand ops to move between
// the symmetric (2m+1) and causal (m+1) forms while preserving shared taps.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "nestrq/common.hpp"
#include "nestrq/io.hpp"
#include "nestrq/rng.hpp"
#include "nestrq/tensor.hpp"

namespace nestrq {

enum class AttentionMode { kNonCausal, kCausal, kCausalLookahead };
enum class ConvMode { kNonCausal, kCausal };

inline std::string attention_mode_name(AttentionMode m) {
  switch (m) {
    case AttentionMode::kNonCausal: return "noncausal";
    case AttentionMode::kCausal: return "causal";
    case AttentionMode::kCausalLookahead: return "lookahead";
  }
  throw ConfigError("unknown attention mode");
}

inline AttentionMode attention_mode_from_name(const std::string& s) {
  if (s == "noncausal") return AttentionMode::kNonCausal;
  if (s == "causal") return AttentionMode::kCausal;
  if (s == "lookahead") return AttentionMode::kCausalLookahead;
  throw ConfigError("bad attention mode '" + s + "' (want noncausal|causal|lookahead)");
}

inline std::string conv_mode_name(ConvMode m) {
  return m == ConvMode::kNonCausal ? "noncausal" : "causal";
}

inline ConvMode conv_mode_from_name(const std::string& s) {
  if (s == "noncausal") return ConvMode::kNonCausal;
  if (s == "causal") return ConvMode::kCausal;
  throw ConfigError("bad conv mode '" + s + "' (want noncausal|causal)");
}

struct CausalitySpec {
  AttentionMode attention_mode = AttentionMode::kCausal;
  ConvMode conv_mode = ConvMode::kCausal;
  int lookahead_blocks = 0;  // M: bottom blocks that may attend 1 frame ahead
  int conv_half_width = 3;   // m: NC-C kernel is 2m+1 taps, C-C kernel is m+1

  static CausalitySpec causal() { return CausalitySpec{}; }
  static CausalitySpec noncausal() {
    return CausalitySpec{AttentionMode::kNonCausal, ConvMode::kNonCausal, 0, 3};
  }
  static CausalitySpec lookahead(int M) {
    return CausalitySpec{AttentionMode::kCausalLookahead, ConvMode::kCausal, M, 3};
  }

  int kernel_size() const {
    return conv_mode == ConvMode::kNonCausal ? 2 * conv_half_width + 1 : conv_half_width + 1;
  }

  void validate(int num_blocks) const {
    if (conv_half_width < 1) throw ConfigError("causality: conv_half_width (m) must be >= 1");
    if (lookahead_blocks < 0) throw ConfigError("causality: lookahead_blocks (M) must be >= 0");
    if (lookahead_blocks > num_blocks)
      throw ConfigError("causality: lookahead_blocks (M) exceeds num_blocks");
    if (lookahead_blocks > 0 && attention_mode != AttentionMode::kCausalLookahead)
      throw ConfigError("causality: M > 0 requires lookahead attention mode");
  }

  json to_json() const {
    json j;
    j["attention"] = attention_mode_name(attention_mode);
    j["conv"] = conv_mode_name(conv_mode);
    j["lookahead_blocks"] = lookahead_blocks;
    j["conv_half_width"] = conv_half_width;
    return j;
  }

  static CausalitySpec from_json(const json& j) {
    CausalitySpec s;
    s.attention_mode = attention_mode_from_name(j.at("attention").get<std::string>());
    s.conv_mode = conv_mode_from_name(j.at("conv").get<std::string>());
    s.lookahead_blocks = j.at("lookahead_blocks").get<int>();
    s.conv_half_width = j.at("conv_half_width").get<int>();
    return s;
  }
};

struct EncoderConfig {
  int input_dim = 80;  // num_mels
  int num_blocks = 4;
  int model_dim = 64;
  int num_heads = 4;
  int ff_expansion = 4;
  int subsample_factor = 4;  // fixed
  CausalitySpec causality;

  int head_dim() const { return model_dim / num_heads; }

  void validate() const {
    if (input_dim < 1) throw ConfigError("encoder: input_dim must be >= 1");
    if (num_blocks < 1) throw ConfigError("encoder: num_blocks must be >= 1");
    if (model_dim < 1) throw ConfigError("encoder: model_dim must be >= 1");
    if (num_heads < 1 || model_dim % num_heads != 0)
      throw ConfigError("encoder: model_dim must be divisible by num_heads");
    if (ff_expansion < 1) throw ConfigError("encoder: ff_expansion must be >= 1");
    if (subsample_factor != 4) throw ConfigError("encoder: subsample_factor is fixed at 4");
    causality.validate(num_blocks);
  }
};

// Replaces only the causality spec; parameters are untouched by construction.
inline EncoderConfig set_attention_mode(EncoderConfig cfg, const CausalitySpec& spec) {
  cfg.causality = spec;
  cfg.validate();
  return cfg;
}

inline json encoder_config_to_json(const EncoderConfig& cfg) {
  json j;
  j["input_dim"] = cfg.input_dim;
  j["num_blocks"] = cfg.num_blocks;
  j["model_dim"] = cfg.model_dim;
  j["num_heads"] = cfg.num_heads;
  j["ff_expansion"] = cfg.ff_expansion;
  j["subsample_factor"] = cfg.subsample_factor;
  j["causality"] = cfg.causality.to_json();
  return j;
}

inline EncoderConfig encoder_config_from_json(const json& j) {
  EncoderConfig cfg;
  cfg.input_dim = j.at("input_dim").get<int>();
  cfg.num_blocks = j.at("num_blocks").get<int>();
  cfg.model_dim = j.at("model_dim").get<int>();
  cfg.num_heads = j.at("num_heads").get<int>();
  cfg.ff_expansion = j.at("ff_expansion").get<int>();
  cfg.subsample_factor = j.at("subsample_factor").get<int>();
  cfg.causality = CausalitySpec::from_json(j.at("causality"));
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct LinearParams {
  Tensor W;  // [in x out]
  Tensor b;  // [1 x out]
};

struct LayerNormParams {
  Tensor gain;  // [1 x d]
  Tensor bias;  // [1 x d]
};

struct FeedForwardParams {
  LayerNormParams ln;
  LinearParams in;   // d -> ff_expansion * d
  LinearParams out;  // ff_expansion * d -> d
};

struct AttentionParams {
  LayerNormParams ln;
  LinearParams wq, wk, wv, wo;  // all d -> d
};

struct ConvModuleParams {
  LayerNormParams ln;
  LinearParams pointwise_in;  // d -> 2d, split by GLU
  Tensor kernel;              // [Kw x d], row r is tap offset r - (Kw - 1) + right context
  Tensor conv_bias;           // [1 x d]
  LinearParams pointwise_out;  // d -> d
};

struct BlockParams {
  FeedForwardParams ff1;
  AttentionParams att;
  ConvModuleParams conv;
  FeedForwardParams ff2;
  LayerNormParams final_ln;
};

struct SubsamplerParams {
  LinearParams conv1;  // 3 * input_dim -> d (strided kernel-3 conv as gathered linear)
  LinearParams conv2;  // 3 * d -> d
  LinearParams proj;   // d -> d
};

struct EncoderParams {
  SubsamplerParams sub;
  std::vector<BlockParams> blocks;

  // Fixed order shared by initialization, checkpoints and optimizer moments.
  std::vector<std::pair<std::string, Tensor>> named_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    auto lin = [&](const std::string& p, const LinearParams& l) {
      out.emplace_back(p + ".W", l.W);
      out.emplace_back(p + ".b", l.b);
    };
    auto norm = [&](const std::string& p, const LayerNormParams& n) {
      out.emplace_back(p + ".gain", n.gain);
      out.emplace_back(p + ".bias", n.bias);
    };
    auto ff = [&](const std::string& p, const FeedForwardParams& f) {
      norm(p + ".ln", f.ln);
      lin(p + ".in", f.in);
      lin(p + ".out", f.out);
    };
    lin("sub.conv1", sub.conv1);
    lin("sub.conv2", sub.conv2);
    lin("sub.proj", sub.proj);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const std::string p = "block" + std::to_string(b);
      const BlockParams& blk = blocks[b];
      ff(p + ".ff1", blk.ff1);
      norm(p + ".att.ln", blk.att.ln);
      lin(p + ".att.q", blk.att.wq);
      lin(p + ".att.k", blk.att.wk);
      lin(p + ".att.v", blk.att.wv);
      lin(p + ".att.o", blk.att.wo);
      norm(p + ".conv.ln", blk.conv.ln);
      lin(p + ".conv.in", blk.conv.pointwise_in);
      out.emplace_back(p + ".conv.kernel", blk.conv.kernel);
      out.emplace_back(p + ".conv.bias", blk.conv.conv_bias);
      lin(p + ".conv.out", blk.conv.pointwise_out);
      ff(p + ".ff2", blk.ff2);
      norm(p + ".final_ln", blk.final_ln);
    }
    return out;
  }
};

namespace enc_detail {

inline Tensor xavier_matrix(int rows, int cols, Rng& rng) {
  Tensor t = Tensor::zeros({rows, cols}, /*requires_grad=*/true);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) t.at(i, j) = rng.xavier_uniform(rows, cols);
  return t;
}

inline LinearParams init_linear(int in, int out, Rng& rng) {
  return {xavier_matrix(in, out, rng), Tensor::zeros({1, out}, true)};
}

inline LayerNormParams init_norm(int d) {
  return {Tensor::full({1, d}, 1.0, true), Tensor::zeros({1, d}, true)};
}

inline FeedForwardParams init_ff(int d, int expansion, Rng& rng) {
  return {init_norm(d), init_linear(d, expansion * d, rng), init_linear(expansion * d, d, rng)};
}

// Kernel taps always use the full symmetric length (2m+1) as both Xavier fans,
// so fresh causal kernels and truncated non-causal kernels share a scale, and
// expansion draws from the same distribution as initialization.
inline Tensor init_kernel(int kernel_size, int d, int half_width, Rng& rng) {
  const int fan = 2 * half_width + 1;
  Tensor k = Tensor::zeros({kernel_size, d}, true);
  for (int r = 0; r < kernel_size; ++r)
    for (int c = 0; c < d; ++c) k.at(r, c) = rng.xavier_uniform(fan, fan);
  return k;
}

}  // namespace enc_detail

inline EncoderParams init_encoder(const EncoderConfig& cfg, const Rng& root) {
  cfg.validate();
  Rng rng = root.fork("init");
  const int d = cfg.model_dim;
  EncoderParams p;
  p.sub.conv1 = enc_detail::init_linear(3 * cfg.input_dim, d, rng);
  p.sub.conv2 = enc_detail::init_linear(3 * d, d, rng);
  p.sub.proj = enc_detail::init_linear(d, d, rng);
  p.blocks.resize(static_cast<std::size_t>(cfg.num_blocks));
  for (auto& blk : p.blocks) {
    blk.ff1 = enc_detail::init_ff(d, cfg.ff_expansion, rng);
    blk.att.ln = enc_detail::init_norm(d);
    blk.att.wq = enc_detail::init_linear(d, d, rng);
    blk.att.wk = enc_detail::init_linear(d, d, rng);
    blk.att.wv = enc_detail::init_linear(d, d, rng);
    blk.att.wo = enc_detail::init_linear(d, d, rng);
    blk.conv.ln = enc_detail::init_norm(d);
    blk.conv.pointwise_in = enc_detail::init_linear(d, 2 * d, rng);
    blk.conv.kernel =
        enc_detail::init_kernel(cfg.causality.kernel_size(), d, cfg.causality.conv_half_width, rng);
    blk.conv.conv_bias = Tensor::zeros({1, d}, true);
    blk.conv.pointwise_out = enc_detail::init_linear(d, d, rng);
    blk.ff2 = enc_detail::init_ff(d, cfg.ff_expansion, rng);
    blk.final_ln = enc_detail::init_norm(d);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Forward pieces
// ---------------------------------------------------------------------------

inline Tensor apply_linear(const Tensor& x, const LinearParams& l) {
  return add_rowvec(matmul(x, l.W), l.b);
}

inline Tensor apply_layer_norm(const Tensor& x, const LayerNormParams& n) {
  return layer_norm(x, n.gain, n.bias);
}

// Strided causal conv realized as window gathering + linear: output row l sees
// input rows {2l-1, 2l, 2l+1} with zero left-padding, so L = floor(T/2) and no
// future frame leaks in.
inline Tensor subsample(const Tensor& x, const SubsamplerParams& p) {
  if (x.rows() < 4) throw InputError("subsample: need at least 4 frames");
  Tensor h = swish(apply_linear(gather_windows(x, 3, 2, 1), p.conv1));
  h = swish(apply_linear(gather_windows(h, 3, 2, 1), p.conv2));
  return apply_linear(h, p.proj);
}

inline BoolMatrix build_attention_mask(int L, AttentionMode mode, bool lookahead_here = false) {
  if (L < 1) throw ShapeError("build_attention_mask: L must be >= 1");
  BoolMatrix m = BoolMatrix::filled(L, L, false);
  for (int i = 0; i < L; ++i)
    for (int j = 0; j < L; ++j) {
      bool ok = false;
      switch (mode) {
        case AttentionMode::kNonCausal: ok = true; break;
        case AttentionMode::kCausal: ok = j <= i; break;
        case AttentionMode::kCausalLookahead: ok = lookahead_here ? j <= i + 1 : j <= i; break;
      }
      m.set(i, j, ok);
    }
  return m;
}

inline Tensor multi_head_attention(const Tensor& x, const AttentionParams& p, int num_heads,
                                   const BoolMatrix& mask) {
  const int d = x.cols();
  if (d % num_heads != 0) throw ConfigError("attention: dim not divisible by heads");
  const int dh = d / num_heads;
  Tensor y = apply_layer_norm(x, p.ln);
  Tensor q = apply_linear(y, p.wq);
  Tensor k = apply_linear(y, p.wk);
  Tensor v = apply_linear(y, p.wv);
  std::vector<Tensor> heads;
  heads.reserve(static_cast<std::size_t>(num_heads));
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int h = 0; h < num_heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, dh);
    Tensor kh = slice_cols(k, h * dh, dh);
    Tensor vh = slice_cols(v, h * dh, dh);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    Tensor att = softmax_rows_masked(scores, mask);
    heads.push_back(matmul(att, vh));
  }
  return apply_linear(concat_cols(heads), p.wo);
}

inline Tensor conv_module(const Tensor& x, const ConvModuleParams& p, ConvMode mode) {
  Tensor y = apply_layer_norm(x, p.ln);
  y = glu(apply_linear(y, p.pointwise_in));
  const Padding pad = mode == ConvMode::kNonCausal ? Padding::kSymmetric : Padding::kCausal;
  y = add_rowvec(conv1d_depthwise(y, p.kernel, pad), p.conv_bias);
  y = swish(y);
  return apply_linear(y, p.pointwise_out);
}

inline Tensor feed_forward(const Tensor& x, const FeedForwardParams& p) {
  return apply_linear(swish(apply_linear(apply_layer_norm(x, p.ln), p.in)), p.out);
}

inline Tensor conformer_block(const Tensor& x, const BlockParams& p, const BoolMatrix& mask,
                              ConvMode conv_mode, int num_heads) {
  if (mask.rows != x.rows() || mask.cols != x.rows())
    throw ShapeError("conformer_block: mask shape mismatch");
  Tensor y = add(x, scale(feed_forward(x, p.ff1), 0.5));
  y = add(y, multi_head_attention(y, p.att, num_heads, mask));
  y = add(y, conv_module(y, p.conv, conv_mode));
  y = add(y, scale(feed_forward(y, p.ff2), 0.5));
  return apply_layer_norm(y, p.final_ln);
}

// Constant absolute sinusoidal positional encoding, added after subsampling.
inline Tensor sinusoidal_posenc(int L, int d) {
  Tensor pe = Tensor::zeros({L, d}, /*requires_grad=*/false);
  for (int l = 0; l < L; ++l)
    for (int j = 0; j < d; ++j) {
      const double rate = std::pow(10000.0, -2.0 * (j / 2) / static_cast<double>(d));
      pe.at(l, j) = (j % 2 == 0) ? std::sin(l * rate) : std::cos(l * rate);
    }
  return pe;
}

struct EncoderForwardResult {
  Tensor H;  // subsampler output, [L x model_dim]
  Tensor O;  // conformer output states, [L x model_dim]
};

inline EncoderForwardResult encode(const EncoderConfig& cfg, const EncoderParams& params,
                                   const Tensor& x) {
  cfg.validate();
  if (x.cols() != cfg.input_dim) throw ShapeError("encode: input_dim mismatch");
  Tensor H = subsample(x, params.sub);
  const int L = H.rows();
  Tensor z = add(H, sinusoidal_posenc(L, cfg.model_dim));
  for (int b = 0; b < cfg.num_blocks; ++b) {
    const bool lookahead_here = cfg.causality.attention_mode == AttentionMode::kCausalLookahead &&
                                b < cfg.causality.lookahead_blocks;
    const BoolMatrix mask = build_attention_mask(L, cfg.causality.attention_mode, lookahead_here);
    z = conformer_block(z, params.blocks[static_cast<std::size_t>(b)], mask,
                        cfg.causality.conv_mode, cfg.num_heads);
  }
  return {H, z};
}

// ---------------------------------------------------------------------------
// Causality adaptation (kernel surgery)
// ---------------------------------------------------------------------------

inline Tensor clone_tensor(const Tensor& src) {
  return Tensor::from(src.shape(), src.values(), src.requires_grad());
}

// Independent copy of every parameter tensor (values bit-preserved).
inline EncoderParams clone_params(const EncoderParams& params) {
  EncoderParams out = params;
  auto lin = [](LinearParams& l) {
    l.W = clone_tensor(l.W);
    l.b = clone_tensor(l.b);
  };
  auto norm = [](LayerNormParams& n) {
    n.gain = clone_tensor(n.gain);
    n.bias = clone_tensor(n.bias);
  };
  auto ff = [&](FeedForwardParams& f) {
    norm(f.ln);
    lin(f.in);
    lin(f.out);
  };
  lin(out.sub.conv1);
  lin(out.sub.conv2);
  lin(out.sub.proj);
  for (auto& blk : out.blocks) {
    ff(blk.ff1);
    norm(blk.att.ln);
    lin(blk.att.wq);
    lin(blk.att.wk);
    lin(blk.att.wv);
    lin(blk.att.wo);
    norm(blk.conv.ln);
    lin(blk.conv.pointwise_in);
    blk.conv.kernel = clone_tensor(blk.conv.kernel);
    blk.conv.conv_bias = clone_tensor(blk.conv.conv_bias);
    lin(blk.conv.pointwise_out);
    ff(blk.ff2);
    norm(blk.final_ln);
  }
  return out;
}

// NC-C (2m+1 taps) -> C-C (m+1 taps): drop the m future taps, keep past and
// current bit-exactly. Returns independent parameter tensors; input untouched.
inline EncoderParams truncate_conv_kernels(const EncoderParams& params) {
  EncoderParams out = clone_params(params);
  for (auto& blk : out.blocks) {
    const int Kw = blk.conv.kernel.rows();
    if (Kw % 2 == 0)
      throw ConfigError("truncate_conv_kernels: kernel length must be odd (2m+1), got " +
                        std::to_string(Kw));
    const int m = (Kw - 1) / 2;
    const int d = blk.conv.kernel.cols();
    Tensor kept = Tensor::zeros({m + 1, d}, true);
    for (int r = 0; r <= m; ++r)
      for (int c = 0; c < d; ++c) kept.at(r, c) = blk.conv.kernel.at(r, c);
    blk.conv.kernel = kept;
  }
  return out;
}

// C-C (m+1 taps) -> NC-C (2m+1 taps): append m future taps drawn Xavier-uniform
// with fan_in = fan_out = 2m+1; existing taps preserved bit-exactly.
inline EncoderParams expand_conv_kernels(const EncoderParams& params, const Rng& root) {
  Rng rng = root.fork("expand");
  EncoderParams out = clone_params(params);
  for (auto& blk : out.blocks) {
    const int old_Kw = blk.conv.kernel.rows();
    const int m = old_Kw - 1;
    const int fan = 2 * m + 1;
    const int d = blk.conv.kernel.cols();
    Tensor grown = Tensor::zeros({fan, d}, true);
    for (int r = 0; r < old_Kw; ++r)
      for (int c = 0; c < d; ++c) grown.at(r, c) = blk.conv.kernel.at(r, c);
    for (int r = old_Kw; r < fan; ++r)
      for (int c = 0; c < d; ++c) grown.at(r, c) = rng.xavier_uniform(fan, fan);
    blk.conv.kernel = grown;
  }
  return out;
}

}  // namespace nestrq
