#include "stm/trainer.hpp"

#include "stm/common.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace stm {

namespace {

struct SeqGrad {
  Eigen::MatrixXd d_embed;                         // [vocab x dim]
  std::map<std::string, Eigen::MatrixXd> d_weight; // per targeted matrix
};

// Raw cosine (no clamp) so the training loss is exactly the function the
// backward pass differentiates.
double raw_cosine(const Eigen::VectorXd& u, const Eigen::VectorXd& v) {
  const double nu = u.norm();
  const double nv = v.norm();
  if (nu == 0.0 || nv == 0.0) {
    throw std::invalid_argument("cosine of zero-norm embedding");
  }
  return u.dot(v) / (nu * nv);
}

void cosine_backward(const Eigen::VectorXd& u, const Eigen::VectorXd& v,
                     double g, Eigen::VectorXd& du, Eigen::VectorXd& dv) {
  const double nu = u.norm();
  const double nv = v.norm();
  const double s = u.dot(v) / (nu * nv);
  du += g * (v / (nu * nv) - s * u / (nu * nu));
  dv += g * (u / (nu * nv) - s * v / (nv * nv));
}

// Reverse pass through one encoded sequence. d_pooled is dL/d(embedding).
void sequence_backward(const Encoder& enc, const Encoder::Cache& cache,
                       const Eigen::VectorXd& d_pooled,
                       const std::set<std::string>& targets, SeqGrad& out) {
  const EncoderConfig& cfg = enc.config();
  const Index t_len = static_cast<Index>(cache.tokens.size());
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg.dim));

  Eigen::MatrixXd dx = Eigen::MatrixXd::Zero(t_len, cfg.dim);
  if (cfg.pooling == Pooling::kEos) {
    dx.row(t_len - 1) = d_pooled.transpose();
  } else {
    dx.rowwise() = (d_pooled / static_cast<double>(t_len)).transpose().eval();
  }

  auto accum = [&out](const std::string& name, Eigen::MatrixXd g) {
    auto it = out.d_weight.find(name);
    if (it == out.d_weight.end()) {
      out.d_weight.emplace(name, std::move(g));
    } else {
      it->second += g;
    }
  };

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const auto& lw = enc.layers()[static_cast<std::size_t>(l)];
    const auto& lc = cache.layers[static_cast<std::size_t>(l)];
    const std::string p = "layers." + std::to_string(l) + ".";

    // Feed-forward: x_out = x_mid + gelu(x_mid W1^T + b1) W2^T + b2.
    Eigen::MatrixXd df = dx;
    Eigen::MatrixXd dh = df * lw.w2;
    Eigen::MatrixXd dz =
        dh.array() * lc.z.unaryExpr([](double v) { return gelu_grad(v); }).array();
    if (targets.count(p + "ffn.w2")) {
      accum(p + "ffn.w2", df.transpose() * lc.h);
    }
    if (targets.count(p + "ffn.w1")) {
      accum(p + "ffn.w1", dz.transpose() * lc.x_mid);
    }
    Eigen::MatrixXd dx_mid = dx + dz * lw.w1;

    // Attention: x_mid = x_in + (softmax(QK^T / sqrt(d)) V) Wo^T.
    Eigen::MatrixXd dattn = dx_mid;
    Eigen::MatrixXd dctx = dattn * lw.wo;
    if (targets.count(p + "attn.wo")) {
      accum(p + "attn.wo", dattn.transpose() * lc.ctx);
    }
    Eigen::MatrixXd dprobs = dctx * lc.v.transpose();
    Eigen::MatrixXd dv = lc.probs.transpose() * dctx;

    Eigen::MatrixXd dscores(t_len, t_len);
    for (Index i = 0; i < t_len; ++i) {
      const double row_dot = dprobs.row(i).dot(lc.probs.row(i));
      dscores.row(i) =
          lc.probs.row(i).array() * (dprobs.row(i).array() - row_dot);
    }
    Eigen::MatrixXd dq = inv_sqrt_d * (dscores * lc.k);
    Eigen::MatrixXd dk = inv_sqrt_d * (dscores.transpose() * lc.q);

    if (targets.count(p + "attn.wq")) {
      accum(p + "attn.wq", dq.transpose() * lc.x_in);
    }
    if (targets.count(p + "attn.wk")) {
      accum(p + "attn.wk", dk.transpose() * lc.x_in);
    }
    if (targets.count(p + "attn.wv")) {
      accum(p + "attn.wv", dv.transpose() * lc.x_in);
    }
    dx = dx_mid + dq * lw.wq + dk * lw.wk + dv * lw.wv;
  }

  if (targets.count("embed.weight")) {
    for (Index i = 0; i < t_len; ++i) {
      out.d_embed.row(cache.tokens[static_cast<std::size_t>(i)]) += dx.row(i);
    }
  }
}

struct AdamState {
  RowMatrixXd m = RowMatrixXd();
  RowMatrixXd v = RowMatrixXd();
};

void adamw_update(RowMatrixXd& w, const Eigen::MatrixXd& grad, AdamState& st,
                  const TrainConfig& tc, double lr, int step) {
  if (st.m.size() == 0) {
    st.m = RowMatrixXd::Zero(w.rows(), w.cols());
    st.v = RowMatrixXd::Zero(w.rows(), w.cols());
  }
  st.m = tc.beta1 * st.m + (1.0 - tc.beta1) * grad;
  st.v.array() =
      tc.beta2 * st.v.array() + (1.0 - tc.beta2) * grad.array().square();
  const double bc1 = 1.0 - std::pow(tc.beta1, step);
  const double bc2 = 1.0 - std::pow(tc.beta2, step);
  RowMatrixXd m_hat = st.m / bc1;
  RowMatrixXd v_hat = st.v / bc2;
  w.array() -= lr * (m_hat.array() / (v_hat.array().sqrt() + tc.adam_eps) +
                     tc.weight_decay * w.array());
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (warmup_steps < 0) throw ConfigError("warmup_steps must be >= 0");
  if (lora_rank < 1) throw ConfigError("lora_rank must be >= 1");
  if (!(lora_alpha > 0.0)) throw ConfigError("lora_alpha must be > 0");
}

double batch_loss_and_grads(const Checkpoint& base, const LoraAdapter& adapter,
                            const TripletBatch& batch,
                            const EncoderConfig& enc, double temperature,
                            AdapterGrads* grads) {
  batch.validate(enc);
  Encoder encoder(base, &adapter, enc);
  const Index n = static_cast<Index>(batch.size());

  // Order: queries, positives, negatives.
  std::vector<Encoder::Cache> caches(static_cast<std::size_t>(3 * n));
  std::vector<Eigen::VectorXd> embs(static_cast<std::size_t>(3 * n));
  for (Index i = 0; i < n; ++i) {
    const Triplet& t = batch.items[static_cast<std::size_t>(i)];
    embs[static_cast<std::size_t>(i)] =
        encoder.forward(t.query, grads ? &caches[static_cast<std::size_t>(i)] : nullptr);
    embs[static_cast<std::size_t>(n + i)] = encoder.forward(
        t.positive, grads ? &caches[static_cast<std::size_t>(n + i)] : nullptr);
    embs[static_cast<std::size_t>(2 * n + i)] = encoder.forward(
        t.negative, grads ? &caches[static_cast<std::size_t>(2 * n + i)] : nullptr);
  }

  SimilaritySet sims;
  sims.pos.resize(n, n);
  sims.neg.resize(n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      sims.pos(i, j) = raw_cosine(embs[static_cast<std::size_t>(i)],
                                  embs[static_cast<std::size_t>(n + j)]);
    }
    sims.neg[i] = raw_cosine(embs[static_cast<std::size_t>(i)],
                             embs[static_cast<std::size_t>(2 * n + i)]);
  }

  if (grads == nullptr) {
    return info_nce_loss(sims, temperature);
  }

  Eigen::MatrixXd dpos;
  Eigen::VectorXd dneg;
  const double loss = info_nce_loss_grad(sims, temperature, &dpos, &dneg);

  std::vector<Eigen::VectorXd> d_embs(static_cast<std::size_t>(3 * n));
  for (Index s = 0; s < 3 * n; ++s) {
    d_embs[static_cast<std::size_t>(s)] =
        Eigen::VectorXd::Zero(enc.dim);
  }
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      cosine_backward(embs[static_cast<std::size_t>(i)],
                      embs[static_cast<std::size_t>(n + j)], dpos(i, j),
                      d_embs[static_cast<std::size_t>(i)],
                      d_embs[static_cast<std::size_t>(n + j)]);
    }
    cosine_backward(embs[static_cast<std::size_t>(i)],
                    embs[static_cast<std::size_t>(2 * n + i)], dneg[i],
                    d_embs[static_cast<std::size_t>(i)],
                    d_embs[static_cast<std::size_t>(2 * n + i)]);
  }

  std::set<std::string> targets;
  for (const auto& [name, f] : adapter.targets()) {
    (void)f;
    targets.insert(name);
  }
  SeqGrad seq_grad;
  seq_grad.d_embed = Eigen::MatrixXd::Zero(enc.vocab_size, enc.dim);
  for (Index s = 0; s < 3 * n; ++s) {
    sequence_backward(encoder, caches[static_cast<std::size_t>(s)],
                      d_embs[static_cast<std::size_t>(s)], targets, seq_grad);
  }

  // Chain the dense weight gradients into factor gradients:
  // W_eff = W + s B A  =>  dA = s B^T G, dB = s G A^T.
  grads->per_target.clear();
  const double scale = adapter.scale();
  for (const auto& [name, f] : adapter.targets()) {
    const Eigen::MatrixXd* gw = nullptr;
    Eigen::MatrixXd embed_grad;
    if (name == "embed.weight") {
      gw = &seq_grad.d_embed;
    } else {
      auto it = seq_grad.d_weight.find(name);
      if (it == seq_grad.d_weight.end()) {
        embed_grad = Eigen::MatrixXd::Zero(f.b.rows(), f.a.cols());
        gw = &embed_grad;
      } else {
        gw = &it->second;
      }
    }
    LoraAdapter::Factors g;
    g.a = scale * (f.b.transpose() * (*gw));
    g.b = scale * ((*gw) * f.a.transpose());
    grads->per_target[name] = std::move(g);
  }
  return loss;
}

std::vector<TripletBatch> make_batches(const std::vector<Triplet>& triplets,
                                       int batch_size) {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  std::vector<TripletBatch> batches;
  TripletBatch current;
  for (const Triplet& t : triplets) {
    current.items.push_back(t);
    if (static_cast<int>(current.items.size()) == batch_size) {
      batches.push_back(std::move(current));
      current = TripletBatch{};
    }
  }
  if (!current.items.empty()) batches.push_back(std::move(current));
  return batches;
}

TrainResult train(const Checkpoint& base, const std::vector<TripletBatch>& data,
                  const EncoderConfig& enc, const TrainConfig& tc) {
  enc.validate();
  tc.validate();
  if (data.empty()) throw std::invalid_argument("train: no data");
  for (const TripletBatch& b : data) b.validate(enc);

  TrainResult result;
  result.adapter =
      init_adapter(base, tc.lora_rank, tc.lora_alpha, tc.seed, tc.lora_exclude);

  std::map<std::string, AdamState> state_a;
  std::map<std::string, AdamState> state_b;
  Rng order_rng = Rng(tc.seed).fork(0x0bdeull);

  int step = 0;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    order_rng.shuffle(order);

    for (std::size_t bi : order) {
      AdapterGrads grads;
      const double loss = batch_loss_and_grads(base, result.adapter, data[bi],
                                               enc, tc.temperature, &grads);
      if (!std::isfinite(loss)) {
        throw std::runtime_error("training diverged: non-finite loss at step " +
                                 std::to_string(step));
      }
      ++step;
      result.trace.push_back({step, loss});

      double lr = tc.learning_rate;
      if (tc.warmup_steps > 0 && step <= tc.warmup_steps) {
        lr *= static_cast<double>(step) / static_cast<double>(tc.warmup_steps);
      }
      for (auto& [name, f] : result.adapter.targets()) {
        const auto& g = grads.per_target.at(name);
        adamw_update(f.a, g.a, state_a[name], tc, lr, step);
        adamw_update(f.b, g.b, state_b[name], tc, lr, step);
      }
    }
  }
  return result;
}

double grad_check(const Checkpoint& base, const LoraAdapter& adapter,
                  const TripletBatch& batch, const EncoderConfig& enc,
                  double eps, int n_samples, std::uint64_t seed,
                  double temperature) {
  if (!(eps > 0.0)) throw std::invalid_argument("grad_check: eps must be > 0");
  if (n_samples < 1) throw std::invalid_argument("grad_check: n_samples >= 1");

  AdapterGrads grads;
  batch_loss_and_grads(base, adapter, batch, enc, temperature, &grads);

  // Flat coordinate space over all factors, sampled without replacement.
  struct Coord {
    std::string name;
    bool in_a;
    Index row, col;
  };
  std::vector<Coord> coords;
  for (const auto& [name, f] : adapter.targets()) {
    for (Index i = 0; i < f.a.rows(); ++i)
      for (Index j = 0; j < f.a.cols(); ++j)
        coords.push_back({name, true, i, j});
    for (Index i = 0; i < f.b.rows(); ++i)
      for (Index j = 0; j < f.b.cols(); ++j)
        coords.push_back({name, false, i, j});
  }
  Rng rng(seed);
  rng.shuffle(coords);
  if (static_cast<int>(coords.size()) > n_samples) {
    coords.resize(static_cast<std::size_t>(n_samples));
  }

  LoraAdapter probe = adapter;
  double max_rel = 0.0;
  for (const Coord& c : coords) {
    auto& f = probe.targets().at(c.name);
    double& w = c.in_a ? f.a(c.row, c.col) : f.b(c.row, c.col);
    const double saved = w;
    w = saved + eps;
    const double lp =
        batch_loss_and_grads(base, probe, batch, enc, temperature, nullptr);
    w = saved - eps;
    const double lm =
        batch_loss_and_grads(base, probe, batch, enc, temperature, nullptr);
    w = saved;

    const double numeric = (lp - lm) / (2.0 * eps);
    const auto& g = grads.per_target.at(c.name);
    const double analytic = c.in_a ? g.a(c.row, c.col) : g.b(c.row, c.col);
    const double denom =
        std::max({std::fabs(analytic), std::fabs(numeric), 1e-3});
    max_rel = std::max(max_rel, std::fabs(analytic - numeric) / denom);
  }
  return max_rel;
}

void write_loss_trace_csv(const std::vector<LossTracePoint>& trace,
                          const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw std::runtime_error("cannot write loss trace '" + path.string() + "'");
  }
  out << "step,loss\n";
  char buf[64];
  for (const LossTracePoint& p : trace) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g\n", p.step, p.loss);
    out << buf;
  }
}

}  // namespace stm
