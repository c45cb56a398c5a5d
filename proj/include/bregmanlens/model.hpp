#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "bregmanlens/autograd.hpp"
#include "bregmanlens/geometry.hpp"
#include "bregmanlens/rng.hpp"
#include "bregmanlens/tensor.hpp"

namespace blns {

enum class StreamMode { single, cascade };

// Weighting of the per-layer auxiliary losses. `appendix` is the default:
// aux_lambda * sum_l (l+1)/L * CE(z_l). `linear` interpolates absolute
// weights from 0.1 at the first supervised layer to 0.8 at the deepest one.
enum class AuxSchedule { appendix, linear };

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 4;
  int d_model = 64;
  int vocab_size = 256;
  int context_length = 128;
  StreamMode stream_mode = StreamMode::single;
  bool aux_loss = false;
  double aux_lambda = 0.1;
  AuxSchedule aux_schedule = AuxSchedule::appendix;
  long long seed = 0;

  void validate() const;  // names the violated bound
  std::string variant_name() const;
};

const char* to_string(StreamMode m);

// One transformer block. Attention and FFN read the same block input
// (parallel residual), each behind its own pre-norm.
struct LayerParams {
  Tensor ln_attn_gain, ln_attn_bias;
  Tensor wq, bq, wk, bk, wv, bv;  // projections [d x d], biases [d]
  Tensor wg, bg;                  // sigmoid output gate on attention heads
  Tensor wo, bo;
  Tensor ln_ffn_gain, ln_ffn_bias;
  Tensor w1, b1;  // [d x 4d]
  Tensor w2, b2;  // [4d x d]
};

// All trainable parameters. The embedding matrix is tied: it embeds input
// tokens and, transposed, maps post-LayerNorm representations to logits at
// every layer. Both stream modes instantiate exactly the same tensors, so the
// four factorial variants match in parameter count by construction.
struct ModelState {
  ModelConfig config;
  Tensor embedding;  // [V x d]
  Tensor pos;        // [context_length x d] learned absolute positions
  std::vector<LayerParams> layers;
  Tensor ln_final_gain, ln_final_bias;  // shared readout head LayerNorm

  // Visits every parameter in the fixed serialization order:
  // embedding, pos, per layer (ln_attn.g/b, wq, bq, wk, bk, wv, bv, wg, bg,
  // wo, bo, ln_ffn.g/b, w1, b1, w2, b2), ln_final.g/b.
  template <typename F>
  void for_each_param(F&& f) {
    f("embedding", embedding);
    f("pos", pos);
    for (size_t l = 0; l < layers.size(); ++l) {
      auto& p = layers[l];
      const std::string s = "layer" + std::to_string(l) + ".";
      f(s + "ln_attn_gain", p.ln_attn_gain);
      f(s + "ln_attn_bias", p.ln_attn_bias);
      f(s + "wq", p.wq);
      f(s + "bq", p.bq);
      f(s + "wk", p.wk);
      f(s + "bk", p.bk);
      f(s + "wv", p.wv);
      f(s + "bv", p.bv);
      f(s + "wg", p.wg);
      f(s + "bg", p.bg);
      f(s + "wo", p.wo);
      f(s + "bo", p.bo);
      f(s + "ln_ffn_gain", p.ln_ffn_gain);
      f(s + "ln_ffn_bias", p.ln_ffn_bias);
      f(s + "w1", p.w1);
      f(s + "b1", p.b1);
      f(s + "w2", p.w2);
      f(s + "b2", p.b2);
    }
    f("ln_final_gain", ln_final_gain);
    f("ln_final_bias", ln_final_bias);
  }
  template <typename F>
  void for_each_param(F&& f) const {
    const_cast<ModelState*>(this)->for_each_param(
        [&](const std::string& name, Tensor& t) { f(name, const_cast<const Tensor&>(t)); });
  }

  size_t param_count() const;
};

// Seeded initialization: weight matrices and embeddings ~ N(0, 0.02),
// LayerNorm gains 1, gate bias +4 (training starts near ungated attention),
// all other biases 0. Bit-identical for equal seeds.
ModelState init_model(const ModelConfig& config);

// Everything a forward pass records for one sequence. States are combined
// representations: states[0] is the input state, states[l+1] the state after
// block l. lambdas[l] is the shared-head LayerNorm of states[l+1] (the
// representation the geometry module consumes) and logits[l] its product
// with the tied embedding. logits[L-1] are the model output.
struct ForwardRecord {
  int seq_len = 0;
  std::vector<Tensor> states;   // L+1 of [T x d]
  std::vector<Tensor> lambdas;  // L of [T x d]
  std::vector<Tensor> logits;   // L of [T x V]
  Tensor token_stream;          // cascade only: frozen x_t, [T x d]
  std::vector<Tensor> ctx_streams;  // cascade only: x_e per layer, L+1 of [T x d]
  const Tensor& final_logits() const { return logits.back(); }
};

struct TokenBatch {
  std::vector<int> tokens;   // batch * seq_len, row-major by sequence
  std::vector<int> targets;  // same layout, next-token ids
  int batch = 0;
  int seq_len = 0;
};

// Full-detail single-sequence forward (no gradients). n_blocks limits how
// many transformer blocks run (-1 = all); with 0 blocks the single readout is
// LN_final(input state) W_E^T, the zero-layer ablation.
ForwardRecord forward(const ModelState& state, std::span<const int> tokens, int n_blocks = -1);

// Per-layer post-LayerNorm representations for a batch of sequences, last
// measurement row included implicitly as lambdas[L-1]. lambdas[l] has one row
// per (sequence, position), sequences stacked.
struct MeasuredBatch {
  std::vector<Tensor> lambdas;  // L of [batch*T x d]
  int batch = 0;
  int seq_len = 0;
};
MeasuredBatch forward_measure(const ModelState& state, std::span<const int> tokens, int batch);

// The attention sublayer (heads, causal softmax, sigmoid gate, output
// projection) applied to an already-normalized [T x d] input.
Tensor gated_attention(const ModelState& state, int layer, const Tensor& x);

// Training objective: CE(z_{L-1}, y) plus, when aux_loss is set, the
// weighted per-layer CE terms per the configured schedule.
double composite_loss(const ModelState& state, const TokenBatch& batch);

Representation representation_at(const ForwardRecord& record, const ModelState& state,
                                 int layer, int position);

// ---- taped graph builder (used by the trainer and the free functions) ------

class TapedModel {
 public:
  // Stages every parameter of `state` onto the tape as leaves.
  TapedModel(GradTape& tape, const ModelState& state, bool requires_grad);

  struct Forward {
    std::vector<GradTape::Var> states;   // L+1 combined states [B*T x d]
    std::vector<GradTape::Var> lambdas;  // per readout layer (empty unless requested)
    std::vector<GradTape::Var> logits;   // per readout layer (final always present)
    GradTape::Var token_stream;               // cascade only
    std::vector<GradTape::Var> ctx_streams;   // cascade only: x_e per state
  };

  // tokens.size() must equal batch * seq_len. n_blocks truncates the stack
  // (-1 = all blocks; 0 = readout of the input state only).
  Forward forward(std::span<const int> tokens, int batch, bool all_layer_readouts,
                  int n_blocks = -1);

  GradTape::Var composite_loss(const TokenBatch& batch);

  // Parameter leaves in for_each_param order.
  const std::vector<GradTape::Var>& param_vars() const { return param_vars_; }
  const std::vector<std::string>& param_names() const { return param_names_; }

  // Sublayer builders on already-normalized inputs.
  GradTape::Var attn_sublayer(GradTape::Var normed, int layer, int batch, int seq_len);
  GradTape::Var ffn_sublayer(GradTape::Var normed, int layer);

 private:
  GradTape& tape_;
  const ModelConfig config_;
  std::vector<GradTape::Var> param_vars_;
  std::vector<std::string> param_names_;
  // indices into param_vars_ by role
  int embedding_idx_ = 0, pos_idx_ = 0, ln_final_gain_idx_ = 0, ln_final_bias_idx_ = 0;
  std::vector<std::array<int, 18>> layer_idx_;
};

// Per-layer auxiliary weights for a config (length L-1; empty when L < 2).
std::vector<double> aux_weights(const ModelConfig& config);

}  // namespace blns
