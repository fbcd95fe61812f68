#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "sra/transformer.hpp"

namespace sra {

/// Trainable low-rank update (alpha / r) * B * A for one d×d matrix.
struct LowRankAdapter {
  Mat a;  // r×d
  Mat b;  // d×r
  double alpha = 16.0;

  std::size_t rank() const { return static_cast<std::size_t>(a.rows()); }
  double scale() const { return alpha / static_cast<double>(rank()); }
  Mat delta() const { return scale() * (b * a); }
};

struct AdapterConfig {
  std::size_t rank = 8;
  double alpha = 16.0;
  std::uint64_t seed = 0;
};

/// Adapters on W^q and W^v of every layer.
struct AdapterSet {
  std::vector<LowRankAdapter> query;
  std::vector<LowRankAdapter> value;

  /// A ~ N(0, 1/d), B = 0, so a fresh set leaves the model unchanged.
  static AdapterSet init(const ModelConfig& model, const AdapterConfig& cfg);
  AdapterSet zeros_like() const;

  void for_each(const std::function<void(const std::string&, Mat&)>& f);
  void for_each(const std::function<void(const std::string&, const Mat&)>& f) const;

  void save(const std::filesystem::path& path) const;
  static AdapterSet load(const std::filesystem::path& path);
};

/// Effective weights W + (alpha/r)·B·A; the base is not modified.
Weights apply_adapters(const Weights& base, const AdapterSet& adapters);

/// Mean negative log-likelihood of `targets[i]` given inputs[0..i], over the
/// positions where `mask[i]` is true.
double masked_token_nll(const Weights& w, std::span<const TokenId> inputs, std::span<const TokenId> targets,
                        std::span<const bool> mask);

/// History-masked loss: −(1/R) Σ log p(response_r | prompt, response_<r).
double masked_nll(const Weights& w, std::span<const TokenId> prompt, std::span<const TokenId> response);

struct LossGrad {
  double loss = 0.0;
  Weights grad;
};

/// masked_nll and its gradient with respect to all model weights.
LossGrad masked_nll_grad(const Weights& w, std::span<const TokenId> prompt, std::span<const TokenId> response);

struct AdapterLossGrad {
  double loss = 0.0;
  AdapterSet grad;
};

/// masked_nll of the adapted model and its gradient with respect to the
/// adapter factors only.
AdapterLossGrad masked_nll_adapter_grad(const Weights& base, const AdapterSet& adapters,
                                        std::span<const TokenId> prompt, std::span<const TokenId> response);

enum class LrSchedule { constant, cosine, cosine_restarts };

LrSchedule parse_schedule(std::string_view s);
std::string_view to_string(LrSchedule s);

struct TrainConfig {
  std::size_t batch_size = 16;
  std::size_t epochs = 5;
  double learning_rate = 3e-4;
  LrSchedule schedule = LrSchedule::cosine;
  std::size_t restarts = 1;  // cycles for cosine_restarts
  std::size_t warmup_steps = 0;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 1.0;  // global-norm clip; 0 disables
  std::uint64_t seed = 0;

  void validate() const;
};

/// Learning rate at optimizer step `step` (0-based) out of `total` steps.
double learning_rate_at(const TrainConfig& cfg, std::size_t step, std::size_t total);

struct TrainExample {
  std::vector<TokenId> prompt;
  std::vector<TokenId> response;
};

struct TrainReport {
  double initial_loss = 0.0;
  std::vector<double> epoch_loss;  // mean minibatch loss per epoch
  std::size_t steps = 0;
};

/// Decoupled-weight-decay Adam over a fixed list of tensors.
class AdamW {
 public:
  explicit AdamW(const TrainConfig& cfg) : cfg_(cfg) {}
  void step(const std::vector<Mat*>& params, const std::vector<const Mat*>& grads, double lr);

 private:
  TrainConfig cfg_;
  std::vector<Mat> m_, v_;
  std::size_t t_ = 0;
};

using ProgressFn = std::function<void(std::size_t epoch, double mean_loss)>;

/// Trains adapters only; the base stays frozen. Throws on a non-finite loss.
TrainReport finetune(const Weights& base, AdapterSet& adapters, std::span<const TrainExample> data,
                     const TrainConfig& cfg, const ProgressFn& progress = {});

/// Full-parameter training on the same masked objective; used to build base
/// models from scratch.
TrainReport train_full(Weights& w, std::span<const TrainExample> data, const TrainConfig& cfg,
                       const ProgressFn& progress = {});

/// Mean masked_nll over a dataset.
double mean_loss(const Weights& w, std::span<const TrainExample> data);

}  // namespace sra
