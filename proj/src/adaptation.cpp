#include "sra/adaptation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numbers>
#include <numeric>
#include <spdlog/spdlog.h>

namespace sra {

namespace {

constexpr std::string_view kAdapterTag = "sra-adapter/1";

// Chains dL/dW_eff into the factors of W_eff = W + s·B·A.
void chain_adapter_grad(const LowRankAdapter& ad, const Mat& dw, LowRankAdapter& out) {
  out.a.noalias() += ad.scale() * (ad.b.transpose() * dw);
  out.b.noalias() += ad.scale() * (dw * ad.a.transpose());
}

AdapterSet adapter_grad_from_full(const AdapterSet& adapters, const Weights& full_grad) {
  AdapterSet g = adapters.zeros_like();
  for (std::size_t m = 0; m < adapters.query.size(); ++m) {
    chain_adapter_grad(adapters.query[m], full_grad.layers[m].wq, g.query[m]);
    chain_adapter_grad(adapters.value[m], full_grad.layers[m].wv, g.value[m]);
  }
  return g;
}

struct SequenceLayout {
  std::vector<TokenId> inputs;
  std::vector<std::size_t> rows;
};

SequenceLayout layout_for(std::span<const TokenId> prompt, std::span<const TokenId> response) {
  if (prompt.empty()) throw InvalidArgument("masked_nll: empty prompt");
  if (response.empty()) throw InvalidArgument("masked_nll: empty response");
  SequenceLayout s;
  s.inputs.assign(prompt.begin(), prompt.end());
  s.inputs.insert(s.inputs.end(), response.begin(), response.end() - 1);
  s.rows.resize(response.size());
  std::iota(s.rows.begin(), s.rows.end(), prompt.size() - 1);
  return s;
}

// Mean NLL over logit rows and, optionally, dL/dlogits.
double nll_from_logits(const Mat& logits, std::span<const TokenId> targets, Mat* dlogits) {
  const auto R = logits.rows();
  double loss = 0.0;
  if (dlogits) dlogits->resize(R, logits.cols());
  for (Eigen::Index r = 0; r < R; ++r) {
    const double mx = logits.row(r).maxCoeff();
    const RowVec e = (logits.row(r).array() - mx).exp();
    const double z = e.sum();
    const auto tgt = targets[static_cast<std::size_t>(r)];
    loss -= (logits(r, tgt) - mx) - std::log(z);
    if (dlogits) {
      dlogits->row(r) = e / z;
      (*dlogits)(r, tgt) -= 1.0;
    }
  }
  if (dlogits) *dlogits /= static_cast<double>(R);
  return loss / static_cast<double>(R);
}

double global_norm(const std::vector<const Mat*>& grads) {
  double s = 0.0;
  for (const Mat* g : grads) s += g->squaredNorm();
  return std::sqrt(s);
}

template <typename Params>
std::vector<Mat*> tensor_ptrs(Params& p) {
  std::vector<Mat*> out;
  p.for_each([&](const std::string&, Mat& m) { out.push_back(&m); });
  return out;
}

template <typename Params>
std::vector<const Mat*> const_tensor_ptrs(Params& p) {
  std::vector<const Mat*> out;
  p.for_each([&](const std::string&, Mat& m) { out.push_back(&m); });
  return out;
}

// Shared minibatch loop. `grad_fn(batch)` returns the summed loss and fills
// the gradient container for the batch.
template <typename Params, typename GradFn>
TrainReport run_training(Params& params, std::span<const TrainExample> data, const TrainConfig& cfg,
                         const ProgressFn& progress, double initial_loss, GradFn&& grad_fn) {
  cfg.validate();
  if (data.empty()) throw InvalidArgument("training dataset is empty");
  TrainReport report;
  report.initial_loss = initial_loss;
  const std::size_t per_epoch = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = per_epoch * cfg.epochs;
  Rng rng(derive_seed(cfg.seed, "train-shuffle"));
  AdamW opt(cfg);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_sum = 0.0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::size_t lo = b * cfg.batch_size;
      const std::size_t hi = std::min(lo + cfg.batch_size, data.size());
      std::vector<const TrainExample*> batch;
      for (std::size_t i = lo; i < hi; ++i) batch.push_back(&data[order[i]]);

      auto [loss_sum, grad] = grad_fn(batch);
      const double batch_loss = loss_sum / static_cast<double>(batch.size());
      if (!std::isfinite(batch_loss)) {
        throw Error("training diverged: non-finite loss at epoch " + std::to_string(epoch + 1) + ", step " +
                    std::to_string(report.steps) + " (lr " + std::to_string(learning_rate_at(cfg, report.steps, total)) +
                    ")");
      }
      auto grads = const_tensor_ptrs(grad);
      const double inv = 1.0 / static_cast<double>(batch.size());
      for (auto* g : tensor_ptrs(grad)) *g *= inv;
      if (cfg.grad_clip > 0.0) {
        const double norm = global_norm(grads);
        if (norm > cfg.grad_clip) {
          for (auto* g : tensor_ptrs(grad)) *g *= cfg.grad_clip / norm;
        }
      }
      opt.step(tensor_ptrs(params), grads, learning_rate_at(cfg, report.steps, total));
      ++report.steps;
      epoch_sum += batch_loss;
    }
    report.epoch_loss.push_back(epoch_sum / static_cast<double>(per_epoch));
    if (progress) progress(epoch + 1, report.epoch_loss.back());
  }
  return report;
}

}  // namespace

AdapterSet AdapterSet::init(const ModelConfig& model, const AdapterConfig& cfg) {
  if (cfg.rank == 0 || cfg.rank > model.d) throw InvalidArgument("adapter rank must lie in [1, d]");
  Rng rng(derive_seed(cfg.seed, "adapter-init"));
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(model.d)));
  const auto r = static_cast<Eigen::Index>(cfg.rank);
  const auto d = static_cast<Eigen::Index>(model.d);
  auto make = [&] {
    LowRankAdapter ad;
    ad.a = Mat(r, d);
    for (Eigen::Index i = 0; i < ad.a.size(); ++i) ad.a.data()[i] = normal(rng);
    ad.b = Mat::Zero(d, r);
    ad.alpha = cfg.alpha;
    return ad;
  };
  AdapterSet s;
  for (std::size_t m = 0; m < model.layers; ++m) {
    s.query.push_back(make());
    s.value.push_back(make());
  }
  return s;
}

AdapterSet AdapterSet::zeros_like() const {
  AdapterSet z = *this;
  z.for_each([](const std::string&, Mat& m) { m.setZero(); });
  return z;
}

void AdapterSet::for_each(const std::function<void(const std::string&, Mat&)>& f) {
  for (std::size_t m = 0; m < query.size(); ++m) {
    const std::string p = "layers." + std::to_string(m) + ".";
    f(p + "wq.a", query[m].a);
    f(p + "wq.b", query[m].b);
    f(p + "wv.a", value[m].a);
    f(p + "wv.b", value[m].b);
  }
}

void AdapterSet::for_each(const std::function<void(const std::string&, const Mat&)>& f) const {
  const_cast<AdapterSet*>(this)->for_each([&](const std::string& n, Mat& m) { f(n, m); });
}

void AdapterSet::save(const std::filesystem::path& path) const {
  if (query.empty()) throw InvalidArgument("cannot save an empty adapter set");
  nlohmann::json header{{"format", kAdapterTag},
                        {"rank", query.front().rank()},
                        {"alpha", query.front().alpha},
                        {"layers", query.size()},
                        {"d", query.front().a.cols()},
                        {"targets", {"wq", "wv"}},
                        {"dtype", "float64-le"}};
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write adapter file: " + path.string());
  out << header.dump() << '\n';
  for_each([&](const std::string&, const Mat& m) {
    out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  });
}

AdapterSet AdapterSet::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open adapter file: " + path.string());
  std::string line;
  std::getline(in, line);
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string(), 1, e.what());
  }
  if (h.value("format", "") != kAdapterTag) throw ParseError(path.string(), 1, "not an adapter file");
  const auto r = h.at("rank").get<Eigen::Index>();
  const auto d = h.at("d").get<Eigen::Index>();
  const auto layers = h.at("layers").get<std::size_t>();
  const double alpha = h.at("alpha").get<double>();
  AdapterSet s;
  for (std::size_t m = 0; m < layers; ++m) {
    s.query.push_back({Mat(r, d), Mat(d, r), alpha});
    s.value.push_back({Mat(r, d), Mat(d, r), alpha});
  }
  s.for_each([&](const std::string& name, Mat& m) {
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!in) throw ParseError(path.string(), 1, "truncated adapter data at " + name);
  });
  return s;
}

Weights apply_adapters(const Weights& base, const AdapterSet& adapters) {
  if (adapters.query.size() != base.layers.size() || adapters.value.size() != base.layers.size()) {
    throw InvalidArgument("adapter layer count does not match the model");
  }
  const auto d = static_cast<Eigen::Index>(base.config.d);
  auto check = [&](const LowRankAdapter& ad) {
    if (ad.a.cols() != d || ad.b.rows() != d || ad.a.rows() != ad.b.cols() || ad.a.rows() == 0) {
      throw InvalidArgument("adapter shape does not match the target matrix");
    }
  };
  Weights eff = base;
  for (std::size_t m = 0; m < base.layers.size(); ++m) {
    check(adapters.query[m]);
    check(adapters.value[m]);
    eff.layers[m].wq += adapters.query[m].delta();
    eff.layers[m].wv += adapters.value[m].delta();
  }
  return eff;
}

double masked_token_nll(const Weights& w, std::span<const TokenId> inputs, std::span<const TokenId> targets,
                        std::span<const bool> mask) {
  if (inputs.size() != targets.size() || inputs.size() != mask.size()) {
    throw InvalidArgument("masked_token_nll: inputs, targets and mask differ in length");
  }
  std::vector<std::size_t> rows;
  std::vector<TokenId> tgt;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) {
      rows.push_back(i);
      tgt.push_back(targets[i]);
    }
  }
  if (rows.empty()) throw InvalidArgument("masked_token_nll: mask selects no position");
  return nll_from_logits(forward(w, inputs, rows), tgt, nullptr);
}

double masked_nll(const Weights& w, std::span<const TokenId> prompt, std::span<const TokenId> response) {
  const auto s = layout_for(prompt, response);
  return nll_from_logits(forward(w, s.inputs, s.rows), response, nullptr);
}

LossGrad masked_nll_grad(const Weights& w, std::span<const TokenId> prompt, std::span<const TokenId> response) {
  const auto s = layout_for(prompt, response);
  ForwardCache cache;
  const Mat logits = forward(w, s.inputs, s.rows, &cache);
  Mat dlogits;
  LossGrad out;
  out.loss = nll_from_logits(logits, response, &dlogits);
  out.grad = backward(w, cache, dlogits);
  return out;
}

AdapterLossGrad masked_nll_adapter_grad(const Weights& base, const AdapterSet& adapters,
                                        std::span<const TokenId> prompt, std::span<const TokenId> response) {
  const Weights eff = apply_adapters(base, adapters);
  auto full = masked_nll_grad(eff, prompt, response);
  return {full.loss, adapter_grad_from_full(adapters, full.grad)};
}

LrSchedule parse_schedule(std::string_view s) {
  if (s == "constant") return LrSchedule::constant;
  if (s == "cosine") return LrSchedule::cosine;
  if (s == "cosine_restarts") return LrSchedule::cosine_restarts;
  throw InvalidArgument("unknown learning-rate schedule: " + std::string(s));
}

std::string_view to_string(LrSchedule s) {
  switch (s) {
    case LrSchedule::constant: return "constant";
    case LrSchedule::cosine: return "cosine";
    case LrSchedule::cosine_restarts: return "cosine_restarts";
  }
  return "?";
}

void TrainConfig::validate() const {
  if (batch_size == 0 || epochs == 0) throw InvalidArgument("batch size and epochs must be positive");
  if (!(learning_rate > 0.0)) throw InvalidArgument("learning rate must be positive");
  if (schedule == LrSchedule::cosine_restarts && restarts == 0) throw InvalidArgument("restarts must be positive");
}

double learning_rate_at(const TrainConfig& cfg, std::size_t step, std::size_t total) {
  if (step < cfg.warmup_steps) {
    return cfg.learning_rate * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  }
  if (cfg.schedule == LrSchedule::constant || total <= cfg.warmup_steps) return cfg.learning_rate;
  const double span = static_cast<double>(total - cfg.warmup_steps);
  double progress = static_cast<double>(step - cfg.warmup_steps) / span;
  if (cfg.schedule == LrSchedule::cosine_restarts) {
    const double cycles = static_cast<double>(cfg.restarts);
    progress = std::fmod(progress * cycles, 1.0);
  }
  return cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void AdamW::step(const std::vector<Mat*>& params, const std::vector<const Mat*>& grads, double lr) {
  if (params.size() != grads.size()) throw InvalidArgument("AdamW: parameter/gradient count mismatch");
  if (m_.empty()) {
    for (const Mat* p : params) {
      m_.push_back(Mat::Zero(p->rows(), p->cols()));
      v_.push_back(Mat::Zero(p->rows(), p->cols()));
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Mat& p = *params[i];
    const Mat& g = *grads[i];
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseAbs2();
    if (cfg_.weight_decay > 0.0) p *= 1.0 - lr * cfg_.weight_decay;
    p.array() -= lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + cfg_.eps);
  }
}

double mean_loss(const Weights& w, std::span<const TrainExample> data) {
  if (data.empty()) throw InvalidArgument("mean_loss: empty dataset");
  double s = 0.0;
  for (const auto& ex : data) s += masked_nll(w, ex.prompt, ex.response);
  return s / static_cast<double>(data.size());
}

TrainReport finetune(const Weights& base, AdapterSet& adapters, std::span<const TrainExample> data,
                     const TrainConfig& cfg, const ProgressFn& progress) {
  if (data.empty()) throw InvalidArgument("training dataset is empty");
  const double initial = mean_loss(apply_adapters(base, adapters), data);
  return run_training(adapters, data, cfg, progress, initial, [&](const std::vector<const TrainExample*>& batch) {
    const Weights eff = apply_adapters(base, adapters);
    AdapterSet grad = adapters.zeros_like();
    double loss = 0.0;
    for (const auto* ex : batch) {
      auto full = masked_nll_grad(eff, ex->prompt, ex->response);
      loss += full.loss;
      for (std::size_t m = 0; m < adapters.query.size(); ++m) {
        chain_adapter_grad(adapters.query[m], full.grad.layers[m].wq, grad.query[m]);
        chain_adapter_grad(adapters.value[m], full.grad.layers[m].wv, grad.value[m]);
      }
    }
    return std::pair<double, AdapterSet>{loss, std::move(grad)};
  });
}

TrainReport train_full(Weights& w, std::span<const TrainExample> data, const TrainConfig& cfg,
                       const ProgressFn& progress) {
  if (data.empty()) throw InvalidArgument("training dataset is empty");
  const double initial = mean_loss(w, data);
  return run_training(w, data, cfg, progress, initial, [&](const std::vector<const TrainExample*>& batch) {
    Weights grad = Weights::zeros(w.config);
    double loss = 0.0;
    for (const auto* ex : batch) {
      auto lg = masked_nll_grad(w, ex->prompt, ex->response);
      loss += lg.loss;
      auto dst = tensor_ptrs(grad);
      auto src = tensor_ptrs(lg.grad);
      for (std::size_t i = 0; i < dst.size(); ++i) *dst[i] += *src[i];
    }
    return std::pair<double, Weights>{loss, std::move(grad)};
  });
}

}  // namespace sra
