#pragma once

#include "stm/lora.hpp"
#include "stm/tensor_store.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace stm {

enum class MaskMode { kCausal, kBidirectional };
enum class Pooling { kEos, kMean };

std::string to_string(MaskMode m);
std::string to_string(Pooling p);
MaskMode mask_mode_from_string(const std::string& s);
Pooling pooling_from_string(const std::string& s);

// Tiny single-head encoder: embedding lookup, n_layers of
// [self-attention + two-layer feed-forward, residual on both], then EOS or
// mean pooling. n_layers = 0 is a debug configuration that pools raw
// embeddings.
struct EncoderConfig {
  int vocab_size = 512;
  int dim = 32;
  int n_layers = 1;
  int max_len = 24;
  MaskMode mask_mode = MaskMode::kBidirectional;
  Pooling pooling = Pooling::kEos;
  int eos_id = 0;

  int ffn_dim() const { return 4 * dim; }
  void validate() const;
};

using TokenSeq = std::vector<int>;

struct Triplet {
  TokenSeq query;
  TokenSeq positive;
  TokenSeq negative;
};

// N triplets (q_i, p_i+, p_i-), each sequence EOS-terminated, no padding.
struct TripletBatch {
  std::vector<Triplet> items;

  std::size_t size() const { return items.size(); }
  void validate(const EncoderConfig& cfg) const;
};

// Fresh base parameters with the canonical tensor names:
//   embed.weight [vocab, dim]
//   layers.<i>.attn.{wq,wk,wv,wo} [dim, dim]
//   layers.<i>.ffn.w1 [ffn, dim], .b1 [ffn], .w2 [dim, ffn], .b2 [dim]
Checkpoint init_encoder_params(const EncoderConfig& cfg, std::uint64_t seed);

// Effective f64 weights (base plus optionally a folded LoRA delta) compiled
// once so corpora can be embedded without re-folding per call.
class Encoder {
 public:
  struct LayerWeights {
    Eigen::MatrixXd wq, wk, wv, wo;  // [dim x dim], applied as x * W^T
    Eigen::MatrixXd w1;              // [ffn x dim]
    Eigen::MatrixXd w2;              // [dim x ffn]
    Eigen::VectorXd b1, b2;
  };

  // Intermediates captured for reverse-mode differentiation.
  struct LayerCache {
    Eigen::MatrixXd x_in;      // input to attention
    Eigen::MatrixXd q, k, v;
    Eigen::MatrixXd probs;     // softmax rows
    Eigen::MatrixXd ctx;       // probs * v
    Eigen::MatrixXd x_mid;     // post-attention residual, input to ffn
    Eigen::MatrixXd z;         // pre-activation
    Eigen::MatrixXd h;         // gelu(z)
  };
  struct Cache {
    TokenSeq tokens;
    Eigen::MatrixXd x0;        // embedding rows
    std::vector<LayerCache> layers;
    Eigen::MatrixXd x_final;
  };

  Encoder(const Checkpoint& params, const LoraAdapter* adapter,
          const EncoderConfig& cfg);

  const EncoderConfig& config() const { return cfg_; }
  const Eigen::MatrixXd& embedding() const { return embed_; }
  const std::vector<LayerWeights>& layers() const { return layers_; }

  Eigen::VectorXd encode(const TokenSeq& tokens) const;
  Eigen::VectorXd forward(const TokenSeq& tokens, Cache* cache) const;

 private:
  EncoderConfig cfg_;
  Eigen::MatrixXd embed_;
  std::vector<LayerWeights> layers_;
};

// Spec-shaped convenience wrapper; adapter may be null.
Eigen::VectorXd encode(const Checkpoint& params, const LoraAdapter* adapter,
                       const TokenSeq& tokens, const EncoderConfig& cfg);

double cosine_sim(const Eigen::VectorXd& u, const Eigen::VectorXd& v);

// Pairwise similarities for one batch: pos(i, j) = sim(q_i, p_j+),
// neg(i) = sim(q_i, p_i-).
struct SimilaritySet {
  Eigen::MatrixXd pos;
  Eigen::VectorXd neg;

  void validate() const;
};

// L_i = -log( e^{pos(i,i)/T} / ( e^{neg(i)/T} + sum_j e^{pos(i,j)/T} ) ),
// averaged over the batch. The j = i positive term stays in the denominator,
// so the loss is strictly positive. Computed with max-subtraction.
double info_nce_loss(const SimilaritySet& sims, double temperature);

// Same value; additionally writes d(loss)/d(sims) when the pointers are
// non-null.
double info_nce_loss_grad(const SimilaritySet& sims, double temperature,
                          Eigen::MatrixXd* dpos, Eigen::VectorXd* dneg);

double gelu(double x);
double gelu_grad(double x);

}  // namespace stm
