#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "sra/common.hpp"
#include "sra/prompt.hpp"
#include "sra/tensor.hpp"
#include "sra/tokenizer.hpp"

namespace sra {

struct ModelConfig {
  std::size_t d = 64;         // embedding width
  std::size_t layers = 4;     // M
  std::size_t heads = 4;      // H
  std::size_t vocab = 2048;   // V
  std::size_t max_len = 512;  // context limit

  std::size_t head_dim() const { return d / heads; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct LayerWeights {
  Mat ln1_gain, ln1_bias;  // 1×d
  Mat wq, wk, wv, wo;      // d×d, applied as W·x
  Mat ln2_gain, ln2_bias;  // 1×d
  Mat w1, b1;              // 4d×d, 1×4d
  Mat w2, b2;              // d×4d, 1×d
};

/// Parameters of the decoder: pre-norm residual blocks, learned positional
/// embeddings, GELU feed-forward of width 4d and an untied output head.
/// Also used as the gradient container (same shapes).
struct Weights {
  ModelConfig config;
  Mat token_embedding;     // V×d
  Mat position_embedding;  // max_len×d
  std::vector<LayerWeights> layers;
  Mat final_gain, final_bias;  // 1×d
  Mat head;                    // V×d

  static Weights zeros(const ModelConfig& cfg);
  static Weights random(const ModelConfig& cfg, std::uint64_t seed);

  /// Visits every tensor with a stable name, in a fixed order.
  void for_each(const std::function<void(const std::string&, Mat&)>& f);
  void for_each(const std::function<void(const std::string&, const Mat&)>& f) const;

  /// Order-dependent digest of all parameter bits.
  std::uint64_t checksum() const;
  bool all_finite() const;

  void save(const std::filesystem::path& path) const;
  static Weights load(const std::filesystem::path& path);
};

/// Result of one scaled-dot-product attention row.
struct AttentionRow {
  std::vector<double> weights;  // one per visible key
  std::vector<double> output;   // head_dim values
};

/// Attention of a single query over the visible keys (rows of `keys`, all
/// with index <= the query position). Keys and values are head_dim wide;
/// logits are scaled by 1/sqrt(d/H).
AttentionRow attention_row(std::span<const double> query, const Eigen::Ref<const Mat>& keys,
                           const Eigen::Ref<const Mat>& values, std::size_t d,
                           std::size_t heads);

/// Activations kept for the backward pass.
struct ForwardCache {
  struct Layer {
    Mat x_in, ln1_hat, xn1;
    RowVec ln1_rstd;
    Mat q, k, v;
    std::vector<Mat> probs;  // per head, T×T (zero above the diagonal)
    Mat attn_concat, x_mid, ln2_hat, xn2;
    RowVec ln2_rstd;
    Mat hidden_pre, hidden_act;
  };
  std::vector<TokenId> ids;
  std::vector<Layer> layers;
  Mat final_hat, final_out;
  RowVec final_rstd;
  std::vector<std::size_t> logit_rows;
};

/// Full causal forward pass. Returns logits (one row per entry of
/// `logit_rows`). When `cache` is non-null it receives everything needed by
/// backward(). When `trace` is non-null it receives the [M,H,T,T] attention.
Mat forward(const Weights& w, std::span<const TokenId> ids, std::span<const std::size_t> logit_rows,
            ForwardCache* cache = nullptr, AttentionTrace* trace = nullptr);

/// Gradients of sum(dlogits ⊙ logits) with respect to every parameter.
Weights backward(const Weights& w, const ForwardCache& cache, const Mat& dlogits);

struct ForwardTrace {
  Mat probabilities;  // T×V next-token distributions
  AttentionTrace trace;
};

/// Processes a whole sequence and returns per-position next-token
/// distributions together with the complete attention trace.
ForwardTrace forward_with_trace(const Weights& w, std::span<const TokenId> ids);

struct GenerationConfig {
  double top_p = 0.9;
  double temperature = 0.7;
  std::size_t max_new_tokens = 48;
  std::uint64_t seed = 0;
  bool stop_at_eos = true;

  void validate() const;
};

struct Generation {
  std::vector<TokenId> tokens;  // response tokens, EOS excluded
  bool hit_eos = false;
  /// Attention of each response token's producing query over the prompt:
  /// [M, H, R, L]. Row r is the query at position L-1+r.
  AttentionTrace prompt_trace;
};

/// Turns logits into a sampling distribution: temperature scaling, nucleus
/// truncation (smallest descending-probability prefix with mass >= top_p,
/// ties by lower id) and renormalization. Temperatures below 1e-6 give a
/// one-hot argmax.
std::vector<double> sampling_distribution(std::span<const double> logits, double temperature, double top_p);

Generation generate(const Weights& w, std::span<const TokenId> prompt, const GenerationConfig& cfg);

/// Teacher-forced trace for a known response: same row convention as
/// generate(), [M, H, R, L].
AttentionTrace response_trace(const Weights& w, std::span<const TokenId> prompt, std::span<const TokenId> response);

}  // namespace sra
