#include "stm/encoder.hpp"

#include "stm/common.hpp"

#include <cmath>

namespace stm {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

void check_tokens(const TokenSeq& tokens, const EncoderConfig& cfg) {
  if (tokens.empty()) throw std::invalid_argument("empty token sequence");
  if (static_cast<int>(tokens.size()) > cfg.max_len) {
    throw std::invalid_argument("sequence length " +
                                std::to_string(tokens.size()) +
                                " exceeds max_len " + std::to_string(cfg.max_len));
  }
  for (int id : tokens) {
    if (id < 0 || id >= cfg.vocab_size) {
      throw std::invalid_argument("token id " + std::to_string(id) +
                                  " outside vocab of size " +
                                  std::to_string(cfg.vocab_size));
    }
  }
}

Eigen::MatrixXd as_f64(const Tensor& t) { return t.matrix64(); }

}  // namespace

std::string to_string(MaskMode m) {
  return m == MaskMode::kCausal ? "causal" : "bidirectional";
}

std::string to_string(Pooling p) { return p == Pooling::kEos ? "eos" : "mean"; }

MaskMode mask_mode_from_string(const std::string& s) {
  if (s == "causal") return MaskMode::kCausal;
  if (s == "bidirectional") return MaskMode::kBidirectional;
  throw ConfigError("unknown mask mode '" + s + "'");
}

Pooling pooling_from_string(const std::string& s) {
  if (s == "eos") return Pooling::kEos;
  if (s == "mean") return Pooling::kMean;
  throw ConfigError("unknown pooling '" + s + "'");
}

void EncoderConfig::validate() const {
  if (vocab_size <= 0 || dim <= 0 || max_len < 2) {
    throw ConfigError("encoder config requires vocab_size > 0, dim > 0, max_len >= 2");
  }
  if (n_layers < 0 || n_layers > 2) {
    throw ConfigError("encoder supports 0 to 2 layers");
  }
  if (eos_id < 0 || eos_id >= vocab_size) {
    throw ConfigError("eos_id outside vocabulary");
  }
}

void TripletBatch::validate(const EncoderConfig& cfg) const {
  if (items.empty()) throw std::invalid_argument("empty triplet batch");
  for (const Triplet& t : items) {
    for (const TokenSeq* seq : {&t.query, &t.positive, &t.negative}) {
      check_tokens(*seq, cfg);
      if (seq->back() != cfg.eos_id) {
        throw std::invalid_argument("sequence does not end in EOS");
      }
    }
  }
}

Checkpoint init_encoder_params(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  Checkpoint c;
  auto fill = [&rng](Index rows, Index cols, double stddev) {
    Eigen::VectorXf flat(rows * cols);
    for (Index i = 0; i < flat.size(); ++i) {
      flat[i] = static_cast<float>(rng.normal(0.0, stddev));
    }
    return flat;
  };
  const Index d = cfg.dim;
  const Index h = cfg.ffn_dim();
  const double w_std = 0.4 / std::sqrt(static_cast<double>(d));
  c.insert("embed.weight",
           Tensor({cfg.vocab_size, d}, fill(cfg.vocab_size, d, 0.3)));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) {
      c.insert(p + w, Tensor({d, d}, fill(d, d, w_std)));
    }
    c.insert(p + "ffn.w1", Tensor({h, d}, fill(h, d, w_std)));
    c.insert(p + "ffn.b1", Tensor::zeros({h}));
    c.insert(p + "ffn.w2", Tensor({d, h}, fill(d, h, w_std)));
    c.insert(p + "ffn.b2", Tensor::zeros({d}));
  }
  c.meta()["model_id"] = "toy-encoder-d" + std::to_string(cfg.dim);
  c.meta()["seed"] = std::to_string(seed);
  return c;
}

Encoder::Encoder(const Checkpoint& params, const LoraAdapter* adapter,
                 const EncoderConfig& cfg)
    : cfg_(cfg) {
  cfg_.validate();
  auto effective = [&](const std::string& name) -> Eigen::MatrixXd {
    Eigen::MatrixXd w = as_f64(params.at(name));
    if (adapter != nullptr && adapter->has_target(name)) {
      const auto& f = adapter->targets().at(name);
      if (f.b.rows() != w.rows() || f.a.cols() != w.cols()) {
        throw std::invalid_argument("adapter factors for '" + name +
                                    "' do not match parameter shape");
      }
      w.noalias() += adapter->scale() * (f.b * f.a);
    }
    return w;
  };

  embed_ = effective("embed.weight");
  if (embed_.rows() != cfg_.vocab_size || embed_.cols() != cfg_.dim) {
    throw std::invalid_argument("embed.weight shape does not match config");
  }
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    LayerWeights lw;
    lw.wq = effective(p + "attn.wq");
    lw.wk = effective(p + "attn.wk");
    lw.wv = effective(p + "attn.wv");
    lw.wo = effective(p + "attn.wo");
    lw.w1 = effective(p + "ffn.w1");
    lw.w2 = effective(p + "ffn.w2");
    lw.b1 = params.at(p + "ffn.b1").flat64();
    lw.b2 = params.at(p + "ffn.b2").flat64();
    layers_.push_back(std::move(lw));
  }
}

double gelu(double x) {
  return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
}

double gelu_grad(double x) {
  const double phi = kInvSqrt2Pi * std::exp(-0.5 * x * x);
  return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * phi;
}

Eigen::VectorXd Encoder::forward(const TokenSeq& tokens, Cache* cache) const {
  check_tokens(tokens, cfg_);
  const Index t_len = static_cast<Index>(tokens.size());
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg_.dim));

  Eigen::MatrixXd x(t_len, cfg_.dim);
  for (Index i = 0; i < t_len; ++i) {
    x.row(i) = embed_.row(tokens[static_cast<std::size_t>(i)]);
  }
  if (cache != nullptr) {
    cache->tokens = tokens;
    cache->x0 = x;
    cache->layers.clear();
  }

  for (const LayerWeights& lw : layers_) {
    LayerCache lc;
    lc.x_in = x;
    lc.q.noalias() = x * lw.wq.transpose();
    lc.k.noalias() = x * lw.wk.transpose();
    lc.v.noalias() = x * lw.wv.transpose();

    Eigen::MatrixXd scores = inv_sqrt_d * (lc.q * lc.k.transpose());
    lc.probs.resize(t_len, t_len);
    for (Index i = 0; i < t_len; ++i) {
      const Index limit =
          cfg_.mask_mode == MaskMode::kCausal ? i + 1 : t_len;
      double m = scores.row(i).head(limit).maxCoeff();
      double denom = 0.0;
      for (Index j = 0; j < limit; ++j) {
        double e = std::exp(scores(i, j) - m);
        lc.probs(i, j) = e;
        denom += e;
      }
      for (Index j = 0; j < limit; ++j) lc.probs(i, j) /= denom;
      for (Index j = limit; j < t_len; ++j) lc.probs(i, j) = 0.0;
    }

    lc.ctx.noalias() = lc.probs * lc.v;
    x += lc.ctx * lw.wo.transpose();
    lc.x_mid = x;

    lc.z.noalias() = x * lw.w1.transpose();
    lc.z.rowwise() += lw.b1.transpose();
    lc.h = lc.z.unaryExpr([](double v) { return gelu(v); });
    Eigen::MatrixXd f = lc.h * lw.w2.transpose();
    f.rowwise() += lw.b2.transpose();
    x += f;

    if (cache != nullptr) cache->layers.push_back(std::move(lc));
  }

  if (cache != nullptr) cache->x_final = x;
  if (cfg_.pooling == Pooling::kEos) {
    return x.row(t_len - 1).transpose();
  }
  return x.colwise().mean().transpose();
}

Eigen::VectorXd Encoder::encode(const TokenSeq& tokens) const {
  return forward(tokens, nullptr);
}

Eigen::VectorXd encode(const Checkpoint& params, const LoraAdapter* adapter,
                       const TokenSeq& tokens, const EncoderConfig& cfg) {
  return Encoder(params, adapter, cfg).encode(tokens);
}

double cosine_sim(const Eigen::VectorXd& u, const Eigen::VectorXd& v) {
  if (u.size() != v.size()) {
    throw std::invalid_argument("cosine_sim: dimension mismatch");
  }
  const double nu = u.norm();
  const double nv = v.norm();
  if (nu == 0.0 || nv == 0.0) {
    throw std::invalid_argument("cosine_sim: zero-norm vector");
  }
  double s = u.dot(v) / (nu * nv);
  if (s > 1.0) s = 1.0;
  if (s < -1.0) s = -1.0;
  return s;
}

void SimilaritySet::validate() const {
  if (pos.rows() == 0 || pos.rows() != pos.cols()) {
    throw std::invalid_argument("pos similarities must form a square N x N matrix");
  }
  if (neg.size() != pos.rows()) {
    throw std::invalid_argument("neg similarities must have one entry per query");
  }
}

double info_nce_loss(const SimilaritySet& sims, double temperature) {
  return info_nce_loss_grad(sims, temperature, nullptr, nullptr);
}

double info_nce_loss_grad(const SimilaritySet& sims, double temperature,
                          Eigen::MatrixXd* dpos, Eigen::VectorXd* dneg) {
  sims.validate();
  if (!(temperature > 0.0)) {
    throw std::invalid_argument("temperature must be positive");
  }
  const Index n = sims.pos.rows();
  const double inv_t = 1.0 / temperature;
  const double inv_n = 1.0 / static_cast<double>(n);
  if (dpos != nullptr) dpos->setZero(n, n);
  if (dneg != nullptr) dneg->setZero(n);

  double total = 0.0;
  Eigen::VectorXd terms(n + 1);
  for (Index i = 0; i < n; ++i) {
    terms[0] = sims.neg[i] * inv_t;
    for (Index j = 0; j < n; ++j) terms[j + 1] = sims.pos(i, j) * inv_t;
    const double m = terms.maxCoeff();
    const double denom = (terms.array() - m).exp().sum();
    const double lse = m + std::log(denom);
    total += lse - sims.pos(i, i) * inv_t;

    if (dpos != nullptr || dneg != nullptr) {
      Eigen::VectorXd p = (terms.array() - m).exp() / denom;
      if (dneg != nullptr) (*dneg)[i] += inv_n * inv_t * p[0];
      if (dpos != nullptr) {
        for (Index j = 0; j < n; ++j) {
          (*dpos)(i, j) += inv_n * inv_t * p[j + 1];
        }
        (*dpos)(i, i) -= inv_n * inv_t;
      }
    }
  }
  return total * inv_n;
}

}  // namespace stm
