#include "sra/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>
#include <numeric>

namespace sra {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
constexpr std::string_view kCheckpointTag = "sra-checkpoint/1";

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_grad(double x) {
  return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

// Row-wise layer norm; stores the normalized input and reciprocal std when asked.
Mat layer_norm(const Mat& x, const Mat& gain, const Mat& bias, Mat* hat_out = nullptr, RowVec* rstd_out = nullptr) {
  const auto n = x.rows();
  const auto d = static_cast<double>(x.cols());
  Mat hat(n, x.cols());
  RowVec rstd(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mean = x.row(i).sum() / d;
    const double var = (x.row(i).array() - mean).square().sum() / d;
    rstd(i) = 1.0 / std::sqrt(var + kLayerNormEps);
    hat.row(i) = (x.row(i).array() - mean) * rstd(i);
  }
  Mat y = (hat.array().rowwise() * gain.row(0).array()).rowwise() + bias.row(0).array();
  if (hat_out) *hat_out = std::move(hat);
  if (rstd_out) *rstd_out = std::move(rstd);
  return y;
}

// Returns dL/dx and accumulates gain/bias gradients.
Mat layer_norm_backward(const Mat& dy, const Mat& hat, const RowVec& rstd, const Mat& gain, Mat& dgain, Mat& dbias) {
  dgain.row(0) += (dy.array() * hat.array()).colwise().sum().matrix();
  dbias.row(0) += dy.colwise().sum();
  const Mat dhat = dy.array().rowwise() * gain.row(0).array();
  const double inv_d = 1.0 / static_cast<double>(dy.cols());
  Mat dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const double mean_dhat = dhat.row(i).sum() * inv_d;
    const double mean_dhat_hat = dhat.row(i).dot(hat.row(i)) * inv_d;
    dx.row(i) = rstd(i) * (dhat.row(i).array() - mean_dhat - hat.row(i).array() * mean_dhat_hat);
  }
  return dx;
}

// In-place numerically stable softmax over the first `visible` entries of a
// row; entries beyond are set to exactly zero.
template <typename Row>
void masked_softmax(Row&& row, Eigen::Index visible) {
  double mx = -std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < visible; ++j) mx = std::max(mx, row(j));
  double sum = 0.0;
  for (Eigen::Index j = 0; j < visible; ++j) {
    row(j) = std::exp(row(j) - mx);
    sum += row(j);
  }
  for (Eigen::Index j = 0; j < visible; ++j) row(j) /= sum;
  for (Eigen::Index j = visible; j < row.size(); ++j) row(j) = 0.0;
}

void write_json_header_blob(const std::filesystem::path& path, const nlohmann::json& header,
                            const std::vector<const Mat*>& tensors) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write checkpoint: " + path.string());
  const std::string h = header.dump();
  out << h << '\n';
  for (const Mat* m : tensors) {
    out.write(reinterpret_cast<const char*>(m->data()), static_cast<std::streamsize>(m->size() * sizeof(double)));
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (d == 0 || layers == 0 || heads == 0 || vocab == 0 || max_len == 0) {
    throw InvalidArgument("model dimensions must be positive");
  }
  if (d % heads != 0) throw InvalidArgument("embedding width must be divisible by the head count");
}

Weights Weights::zeros(const ModelConfig& cfg) {
  cfg.validate();
  Weights w;
  w.config = cfg;
  const auto d = static_cast<Eigen::Index>(cfg.d);
  const auto V = static_cast<Eigen::Index>(cfg.vocab);
  w.token_embedding = Mat::Zero(V, d);
  w.position_embedding = Mat::Zero(static_cast<Eigen::Index>(cfg.max_len), d);
  w.layers.resize(cfg.layers);
  for (auto& l : w.layers) {
    l.ln1_gain = Mat::Zero(1, d);
    l.ln1_bias = Mat::Zero(1, d);
    l.wq = l.wk = l.wv = l.wo = Mat::Zero(d, d);
    l.ln2_gain = Mat::Zero(1, d);
    l.ln2_bias = Mat::Zero(1, d);
    l.w1 = Mat::Zero(4 * d, d);
    l.b1 = Mat::Zero(1, 4 * d);
    l.w2 = Mat::Zero(d, 4 * d);
    l.b2 = Mat::Zero(1, d);
  }
  w.final_gain = Mat::Zero(1, d);
  w.final_bias = Mat::Zero(1, d);
  w.head = Mat::Zero(V, d);
  return w;
}

Weights Weights::random(const ModelConfig& cfg, std::uint64_t seed) {
  Weights w = zeros(cfg);
  Rng rng(derive_seed(seed, "weights-init"));
  std::normal_distribution<double> normal(0.0, 0.02);
  const double resid_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.layers));
  auto fill = [&](Mat& m, double scale) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng) * scale;
  };
  fill(w.token_embedding, 1.0);
  fill(w.position_embedding, 1.0);
  for (auto& l : w.layers) {
    l.ln1_gain.setOnes();
    l.ln2_gain.setOnes();
    fill(l.wq, 1.0);
    fill(l.wk, 1.0);
    fill(l.wv, 1.0);
    fill(l.wo, resid_scale);
    fill(l.w1, 1.0);
    fill(l.w2, resid_scale);
  }
  w.final_gain.setOnes();
  fill(w.head, 1.0);
  return w;
}

void Weights::for_each(const std::function<void(const std::string&, Mat&)>& f) {
  f("token_embedding", token_embedding);
  f("position_embedding", position_embedding);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    auto& l = layers[i];
    f(p + "ln1_gain", l.ln1_gain);
    f(p + "ln1_bias", l.ln1_bias);
    f(p + "wq", l.wq);
    f(p + "wk", l.wk);
    f(p + "wv", l.wv);
    f(p + "wo", l.wo);
    f(p + "ln2_gain", l.ln2_gain);
    f(p + "ln2_bias", l.ln2_bias);
    f(p + "w1", l.w1);
    f(p + "b1", l.b1);
    f(p + "w2", l.w2);
    f(p + "b2", l.b2);
  }
  f("final_gain", final_gain);
  f("final_bias", final_bias);
  f("head", head);
}

void Weights::for_each(const std::function<void(const std::string&, const Mat&)>& f) const {
  const_cast<Weights*>(this)->for_each([&](const std::string& name, Mat& m) { f(name, m); });
}

std::uint64_t Weights::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  for_each([&](const std::string&, const Mat& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      std::uint64_t bits;
      std::memcpy(&bits, m.data() + i, sizeof bits);
      h = (h ^ bits) * 1099511628211ULL;
    }
  });
  return h;
}

bool Weights::all_finite() const {
  bool ok = true;
  for_each([&](const std::string&, const Mat& m) { ok = ok && m.allFinite(); });
  return ok;
}

void Weights::save(const std::filesystem::path& path) const {
  nlohmann::json header;
  header["format"] = kCheckpointTag;
  header["config"] = {{"d", config.d},
                      {"layers", config.layers},
                      {"heads", config.heads},
                      {"vocab", config.vocab},
                      {"max_len", config.max_len}};
  header["dtype"] = "float64-le";
  std::vector<const Mat*> tensors;
  auto& list = header["tensors"] = nlohmann::json::array();
  for_each([&](const std::string& name, const Mat& m) {
    list.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}});
    tensors.push_back(&m);
  });
  write_json_header_blob(path, header, tensors);
}

Weights Weights::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint: " + path.string());
  std::string line;
  std::getline(in, line);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string(), 1, e.what());
  }
  if (header.value("format", "") != kCheckpointTag) {
    throw ParseError(path.string(), 1, "not a model checkpoint (format tag mismatch)");
  }
  const auto& c = header.at("config");
  ModelConfig cfg{c.at("d"), c.at("layers"), c.at("heads"), c.at("vocab"), c.at("max_len")};
  Weights w = zeros(cfg);
  const auto& list = header.at("tensors");
  std::size_t idx = 0;
  w.for_each([&](const std::string& name, Mat& m) {
    if (idx >= list.size() || list[idx].at("name") != name || list[idx].at("shape")[0] != m.rows() ||
        list[idx].at("shape")[1] != m.cols()) {
      throw ParseError(path.string(), 1, "tensor layout mismatch at " + name);
    }
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!in) throw ParseError(path.string(), 1, "truncated tensor data at " + name);
    ++idx;
  });
  return w;
}

AttentionRow attention_row(std::span<const double> query, const Eigen::Ref<const Mat>& keys,
                           const Eigen::Ref<const Mat>& values, std::size_t d,
                           std::size_t heads) {
  if (heads == 0 || d % heads != 0) throw InvalidArgument("d must be divisible by the head count");
  const auto dh = static_cast<Eigen::Index>(d / heads);
  if (static_cast<Eigen::Index>(query.size()) != dh || keys.cols() != dh || values.cols() != dh ||
      keys.rows() != values.rows()) {
    throw InvalidArgument("attention_row: dimension mismatch");
  }
  if (keys.rows() == 0) throw InvalidArgument("attention_row: no visible keys");
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Eigen::Map<const RowVec> q(query.data(), dh);
  RowVec logits = (keys * q.transpose()).transpose() * scale;
  masked_softmax(logits, logits.size());
  const RowVec out = logits * values;
  return {{logits.data(), logits.data() + logits.size()}, {out.data(), out.data() + out.size()}};
}

Mat forward(const Weights& w, std::span<const TokenId> ids, std::span<const std::size_t> logit_rows,
            ForwardCache* cache, AttentionTrace* trace) {
  const auto& cfg = w.config;
  const auto T = static_cast<Eigen::Index>(ids.size());
  if (ids.empty()) throw InvalidArgument("forward: empty input");
  if (ids.size() > cfg.max_len) {
    throw InvalidArgument("input length " + std::to_string(ids.size()) + " exceeds max_len " +
                          std::to_string(cfg.max_len));
  }
  const auto d = static_cast<Eigen::Index>(cfg.d);
  const auto H = static_cast<Eigen::Index>(cfg.heads);
  const auto dh = d / H;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Mat x(T, d);
  for (Eigen::Index t = 0; t < T; ++t) {
    const TokenId id = ids[static_cast<std::size_t>(t)];
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab) {
      throw InvalidArgument("token id " + std::to_string(id) + " outside the model vocabulary");
    }
    x.row(t) = w.token_embedding.row(id) + w.position_embedding.row(t);
  }
  if (trace) *trace = AttentionTrace(cfg.layers, cfg.heads, ids.size(), ids.size());
  if (cache) {
    cache->ids.assign(ids.begin(), ids.end());
    cache->layers.assign(cfg.layers, {});
    cache->logit_rows.assign(logit_rows.begin(), logit_rows.end());
  }

  for (std::size_t m = 0; m < cfg.layers; ++m) {
    const auto& L = w.layers[m];
    Mat hat1;
    RowVec rstd1;
    Mat xn1 = layer_norm(x, L.ln1_gain, L.ln1_bias, &hat1, &rstd1);
    Mat q = xn1 * L.wq.transpose();
    Mat k = xn1 * L.wk.transpose();
    Mat v = xn1 * L.wv.transpose();
    Mat concat(T, d);
    std::vector<Mat> probs(cfg.heads);
    for (Eigen::Index h = 0; h < H; ++h) {
      Mat p = (q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose()) * scale;
      for (Eigen::Index i = 0; i < T; ++i) masked_softmax(p.row(i), i + 1);
      concat.middleCols(h * dh, dh) = p * v.middleCols(h * dh, dh);
      if (trace) {
        for (Eigen::Index i = 0; i < T; ++i)
          for (Eigen::Index j = 0; j <= i; ++j)
            (*trace)(m, static_cast<std::size_t>(h), static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = p(i, j);
      }
      probs[static_cast<std::size_t>(h)] = std::move(p);
    }
    Mat x_mid = x + concat * L.wo.transpose();
    Mat hat2;
    RowVec rstd2;
    Mat xn2 = layer_norm(x_mid, L.ln2_gain, L.ln2_bias, &hat2, &rstd2);
    Mat pre = (xn2 * L.w1.transpose()).rowwise() + L.b1.row(0);
    Mat act = pre.unaryExpr([](double z) { return gelu(z); });
    Mat x_out = x_mid + ((act * L.w2.transpose()).rowwise() + L.b2.row(0));
    if (cache) {
      auto& c = cache->layers[m];
      c.x_in = std::move(x);
      c.ln1_hat = std::move(hat1);
      c.ln1_rstd = std::move(rstd1);
      c.xn1 = std::move(xn1);
      c.q = std::move(q);
      c.k = std::move(k);
      c.v = std::move(v);
      c.probs = std::move(probs);
      c.attn_concat = std::move(concat);
      c.x_mid = std::move(x_mid);
      c.ln2_hat = std::move(hat2);
      c.ln2_rstd = std::move(rstd2);
      c.xn2 = std::move(xn2);
      c.hidden_pre = std::move(pre);
      c.hidden_act = std::move(act);
    }
    x = std::move(x_out);
  }

  Mat final_hat;
  RowVec final_rstd;
  Mat xf = layer_norm(x, w.final_gain, w.final_bias, &final_hat, &final_rstd);
  Mat logits(static_cast<Eigen::Index>(logit_rows.size()), static_cast<Eigen::Index>(cfg.vocab));
  for (std::size_t r = 0; r < logit_rows.size(); ++r) {
    if (logit_rows[r] >= ids.size()) throw InvalidArgument("logit row out of range");
    logits.row(static_cast<Eigen::Index>(r)) = w.head * xf.row(static_cast<Eigen::Index>(logit_rows[r])).transpose();
  }
  if (cache) {
    cache->final_hat = std::move(final_hat);
    cache->final_rstd = std::move(final_rstd);
    cache->final_out = std::move(xf);
  }
  return logits;
}

Weights backward(const Weights& w, const ForwardCache& cache, const Mat& dlogits) {
  const auto& cfg = w.config;
  const auto T = static_cast<Eigen::Index>(cache.ids.size());
  const auto d = static_cast<Eigen::Index>(cfg.d);
  const auto H = static_cast<Eigen::Index>(cfg.heads);
  const auto dh = d / H;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  if (dlogits.rows() != static_cast<Eigen::Index>(cache.logit_rows.size()) ||
      dlogits.cols() != static_cast<Eigen::Index>(cfg.vocab)) {
    throw InvalidArgument("backward: dlogits shape mismatch");
  }

  Weights g = Weights::zeros(cfg);
  Mat dxf = Mat::Zero(T, d);
  for (std::size_t r = 0; r < cache.logit_rows.size(); ++r) {
    const auto row = static_cast<Eigen::Index>(cache.logit_rows[r]);
    const auto dl = dlogits.row(static_cast<Eigen::Index>(r));
    g.head.noalias() += dl.transpose() * cache.final_out.row(row);
    dxf.row(row).noalias() += dl * w.head;
  }
  Mat dx = layer_norm_backward(dxf, cache.final_hat, cache.final_rstd, w.final_gain, g.final_gain, g.final_bias);

  for (std::size_t mi = cfg.layers; mi-- > 0;) {
    const auto& L = w.layers[mi];
    const auto& c = cache.layers[mi];
    auto& G = g.layers[mi];

    // Feed-forward branch.
    G.b2.row(0) += dx.colwise().sum();
    G.w2.noalias() += dx.transpose() * c.hidden_act;
    Mat dpre = (dx * L.w2).array() * c.hidden_pre.unaryExpr([](double z) { return gelu_grad(z); }).array();
    G.b1.row(0) += dpre.colwise().sum();
    G.w1.noalias() += dpre.transpose() * c.xn2;
    Mat dxn2 = dpre * L.w1;
    Mat dx_mid = dx + layer_norm_backward(dxn2, c.ln2_hat, c.ln2_rstd, L.ln2_gain, G.ln2_gain, G.ln2_bias);

    // Attention branch.
    G.wo.noalias() += dx_mid.transpose() * c.attn_concat;
    Mat dconcat = dx_mid * L.wo;
    Mat dq(T, d), dk(T, d), dv(T, d);
    for (Eigen::Index h = 0; h < H; ++h) {
      const Mat& p = c.probs[static_cast<std::size_t>(h)];
      const auto dO = dconcat.middleCols(h * dh, dh);
      Mat dp = dO * c.v.middleCols(h * dh, dh).transpose();
      dv.middleCols(h * dh, dh) = p.transpose() * dO;
      Mat ds = p.array() * (dp.array().colwise() - (p.array() * dp.array()).rowwise().sum());
      dq.middleCols(h * dh, dh) = ds * c.k.middleCols(h * dh, dh) * scale;
      dk.middleCols(h * dh, dh) = ds.transpose() * c.q.middleCols(h * dh, dh) * scale;
    }
    G.wq.noalias() += dq.transpose() * c.xn1;
    G.wk.noalias() += dk.transpose() * c.xn1;
    G.wv.noalias() += dv.transpose() * c.xn1;
    Mat dxn1 = dq * L.wq + dk * L.wk + dv * L.wv;
    dx = dx_mid + layer_norm_backward(dxn1, c.ln1_hat, c.ln1_rstd, L.ln1_gain, G.ln1_gain, G.ln1_bias);
  }

  for (Eigen::Index t = 0; t < T; ++t) {
    g.token_embedding.row(cache.ids[static_cast<std::size_t>(t)]) += dx.row(t);
    g.position_embedding.row(t) += dx.row(t);
  }
  return g;
}

ForwardTrace forward_with_trace(const Weights& w, std::span<const TokenId> ids) {
  std::vector<std::size_t> rows(ids.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  ForwardTrace out;
  Mat logits = forward(w, ids, rows, nullptr, &out.trace);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    logits.row(i) = (logits.row(i).array() - mx).exp();
    logits.row(i) /= logits.row(i).sum();
  }
  out.probabilities = std::move(logits);
  return out;
}

void GenerationConfig::validate() const {
  if (!(top_p > 0.0 && top_p <= 1.0)) throw InvalidArgument("top_p must lie in (0, 1]");
  if (!(temperature > 0.0)) throw InvalidArgument("temperature must be positive");
  if (max_new_tokens == 0) throw InvalidArgument("max_new_tokens must be positive");
}

std::vector<double> sampling_distribution(std::span<const double> logits, double temperature, double top_p) {
  const std::size_t n = logits.size();
  std::vector<double> p(n, 0.0);
  if (n == 0) return p;
  if (temperature < 1e-6) {
    p[static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin())] = 1.0;
    return p;
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) sum += p[i] = std::exp((logits[i] - mx) / temperature);
  for (auto& v : p) v /= sum;
  if (top_p >= 1.0) return p;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
  double mass = 0.0;
  std::size_t keep = 0;
  while (keep < n) {
    mass += p[order[keep++]];
    if (mass >= top_p) break;
  }
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < keep; ++i) out[order[i]] = p[order[i]] / mass;
  return out;
}

namespace {

// Key/value cache for incremental decoding, one entry per layer.
struct KvCache {
  std::vector<Mat> k, v;
  Eigen::Index len = 0;
};

// Processes one token at position `pos` against the cache; returns its logits
// and writes attention rows (over columns [0, pos]) into trace row `row`
// when a trace is given.
RowVec decode_step(const Weights& w, TokenId id, Eigen::Index pos, KvCache& kv, AttentionTrace* trace,
                   std::size_t row, std::size_t trace_cols) {
  const auto& cfg = w.config;
  const auto d = static_cast<Eigen::Index>(cfg.d);
  const auto dh = static_cast<Eigen::Index>(cfg.head_dim());
  Mat x = w.token_embedding.row(id) + w.position_embedding.row(pos);
  for (std::size_t m = 0; m < cfg.layers; ++m) {
    const auto& L = w.layers[m];
    Mat xn = layer_norm(x, L.ln1_gain, L.ln1_bias);
    const RowVec q = xn * L.wq.transpose();
    kv.k[m].row(pos) = xn * L.wk.transpose();
    kv.v[m].row(pos) = xn * L.wv.transpose();
    RowVec concat(d);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      const auto off = static_cast<Eigen::Index>(h) * dh;
      const RowVec qh = q.segment(off, dh);
      const auto att = attention_row(std::span<const double>(qh.data(), static_cast<std::size_t>(dh)),
                                     kv.k[m].block(0, off, pos + 1, dh), kv.v[m].block(0, off, pos + 1, dh), cfg.d,
                                     cfg.heads);
      for (Eigen::Index c = 0; c < dh; ++c) concat(off + c) = att.output[static_cast<std::size_t>(c)];
      if (trace) {
        const std::size_t upto = std::min(att.weights.size(), trace_cols);
        for (std::size_t c = 0; c < upto; ++c) (*trace)(m, h, row, c) = att.weights[c];
      }
    }
    Mat x_mid = x + concat * L.wo.transpose();
    Mat xn2 = layer_norm(x_mid, L.ln2_gain, L.ln2_bias);
    Mat act = ((xn2 * L.w1.transpose()) + L.b1).unaryExpr([](double z) { return gelu(z); });
    x = x_mid + act * L.w2.transpose() + L.b2;
  }
  const Mat xf = layer_norm(x, w.final_gain, w.final_bias);
  return (w.head * xf.transpose()).transpose();
}

}  // namespace

Generation generate(const Weights& w, std::span<const TokenId> prompt, const GenerationConfig& cfg) {
  cfg.validate();
  const auto& mc = w.config;
  if (prompt.empty()) throw InvalidArgument("generate: empty prompt");
  if (prompt.size() + cfg.max_new_tokens > mc.max_len) {
    throw InvalidArgument("prompt length " + std::to_string(prompt.size()) + " + max_new_tokens " +
                          std::to_string(cfg.max_new_tokens) + " exceeds max_len " + std::to_string(mc.max_len));
  }
  const std::size_t L = prompt.size();
  const auto cap = static_cast<Eigen::Index>(L + cfg.max_new_tokens);
  KvCache kv;
  kv.k.assign(mc.layers, Mat::Zero(cap, static_cast<Eigen::Index>(mc.d)));
  kv.v.assign(mc.layers, Mat::Zero(cap, static_cast<Eigen::Index>(mc.d)));

  AttentionTrace full(mc.layers, mc.heads, cfg.max_new_tokens, L);
  RowVec logits;
  for (std::size_t t = 0; t < L; ++t) {
    const bool last = t + 1 == L;
    logits = decode_step(w, prompt[t], static_cast<Eigen::Index>(t), kv, last ? &full : nullptr, 0, L);
  }

  Rng rng(cfg.seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Generation out;
  for (std::size_t step = 0; step < cfg.max_new_tokens; ++step) {
    const auto dist = sampling_distribution(std::span<const double>(logits.data(), static_cast<std::size_t>(logits.size())),
                                            cfg.temperature, cfg.top_p);
    const double u = unif(rng);
    double acc = 0.0;
    std::size_t pick = dist.size();
    std::size_t last_nonzero = 0;
    for (std::size_t i = 0; i < dist.size(); ++i) {
      if (dist[i] <= 0.0) continue;
      last_nonzero = i;
      acc += dist[i];
      if (u < acc) {
        pick = i;
        break;
      }
    }
    if (pick == dist.size()) pick = last_nonzero;  // rounding slack at the top of [0, 1)
    const auto token = static_cast<TokenId>(pick);
    if (cfg.stop_at_eos && token == special::eos) {
      out.hit_eos = true;
      break;
    }
    out.tokens.push_back(token);
    if (step + 1 == cfg.max_new_tokens) break;
    logits = decode_step(w, token, static_cast<Eigen::Index>(L + step), kv, &full, step + 1, L);
  }
  out.prompt_trace = full.slice_rows(0, out.tokens.size());
  return out;
}

AttentionTrace response_trace(const Weights& w, std::span<const TokenId> prompt, std::span<const TokenId> response) {
  if (prompt.empty() || response.empty()) throw InvalidArgument("response_trace: empty prompt or response");
  std::vector<TokenId> seq(prompt.begin(), prompt.end());
  seq.insert(seq.end(), response.begin(), response.end() - 1);
  AttentionTrace full;
  forward(w, seq, {}, nullptr, &full);
  return full.slice_rows(prompt.size() - 1, seq.size()).slice_cols(prompt.size());
}

}  // namespace sra
