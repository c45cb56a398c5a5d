#include "bregmanlens/model.hpp"

#include <algorithm>
#include <cmath>

namespace blns {

const char* to_string(StreamMode m) {
  return m == StreamMode::single ? "single" : "cascade";
}

void ModelConfig::validate() const {
  if (n_layers < 2) fail(ErrorKind::validation, "n_layers must be >= 2, got ", n_layers);
  if (n_heads < 1) fail(ErrorKind::validation, "n_heads must be >= 1, got ", n_heads);
  if (d_model < 2) fail(ErrorKind::validation, "d_model must be >= 2, got ", d_model);
  if (d_model % n_heads != 0) {
    fail(ErrorKind::validation, "d_model (", d_model, ") must be divisible by n_heads (",
         n_heads, ")");
  }
  if (vocab_size < 2) fail(ErrorKind::validation, "vocab_size must be >= 2, got ", vocab_size);
  if (context_length < 2) {
    fail(ErrorKind::validation, "context_length must be >= 2, got ", context_length);
  }
  if (aux_lambda < 0.0) fail(ErrorKind::validation, "aux_lambda must be >= 0, got ", aux_lambda);
}

std::string ModelConfig::variant_name() const {
  std::string s = stream_mode == StreamMode::cascade ? "cascade" : "single";
  s += aux_loss ? "_aux" : "_control";
  return s;
}

size_t ModelState::param_count() const {
  size_t n = 0;
  for_each_param([&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

ModelState init_model(const ModelConfig& config) {
  config.validate();
  ModelState s;
  s.config = config;
  const int d = config.d_model, v = config.vocab_size, ctx = config.context_length;
  const int hidden = 4 * d;

  s.embedding = Tensor({v, d});
  s.pos = Tensor({ctx, d});
  s.layers.resize(size_t(config.n_layers));
  for (auto& p : s.layers) {
    p.ln_attn_gain = Tensor::full({d}, 1.0);
    p.ln_attn_bias = Tensor({d});
    p.wq = Tensor({d, d});
    p.bq = Tensor({d});
    p.wk = Tensor({d, d});
    p.bk = Tensor({d});
    p.wv = Tensor({d, d});
    p.bv = Tensor({d});
    p.wg = Tensor({d, d});
    p.bg = Tensor::full({d}, 4.0);  // sigmoid(4) ~ 0.982: near-ungated start
    p.wo = Tensor({d, d});
    p.bo = Tensor({d});
    p.ln_ffn_gain = Tensor::full({d}, 1.0);
    p.ln_ffn_bias = Tensor({d});
    p.w1 = Tensor({d, hidden});
    p.b1 = Tensor({hidden});
    p.w2 = Tensor({hidden, d});
    p.b2 = Tensor({d});
  }
  s.ln_final_gain = Tensor::full({d}, 1.0);
  s.ln_final_bias = Tensor({d});

  // Weight matrices and embeddings get N(0, 0.02) from a per-tensor stream,
  // so each tensor's draw is independent of every other tensor's size.
  Rng base(uint64_t(config.seed));
  s.for_each_param([&](const std::string& name, Tensor& t) {
    const bool gaussian = name == "embedding" || name == "pos" ||
                          (t.rank() == 2 && name.find("ln_") == std::string::npos);
    if (!gaussian) return;
    Rng r = base.fork(name);
    for (size_t i = 0; i < t.size(); ++i) t.data()[i] = r.normal(0.0, 0.02);
  });
  return s;
}

std::vector<double> aux_weights(const ModelConfig& config) {
  const int n_aux = config.n_layers - 1;  // layers 0 .. L-2
  std::vector<double> w(size_t(n_aux), 0.0);
  for (int l = 0; l < n_aux; ++l) {
    if (config.aux_schedule == AuxSchedule::appendix) {
      w[size_t(l)] = double(l + 1) / double(config.n_layers);
    } else {
      // absolute weights 0.1 -> 0.8 across the supervised layers
      const double t = n_aux > 1 ? double(l) / double(n_aux - 1) : 0.0;
      w[size_t(l)] = 0.1 + (0.8 - 0.1) * t;
    }
  }
  return w;
}

// ---- TapedModel --------------------------------------------------------------

TapedModel::TapedModel(GradTape& tape, const ModelState& state, bool requires_grad)
    : tape_(tape), config_(state.config) {
  layer_idx_.resize(size_t(config_.n_layers));
  int count = 0;
  int layer_slot = 0;
  int layer_of = -1;
  const_cast<ModelState&>(state).for_each_param([&](const std::string& name, Tensor& t) {
    param_names_.push_back(name);
    param_vars_.push_back(tape_.leaf(t, requires_grad));
    if (name == "embedding") embedding_idx_ = count;
    else if (name == "pos") pos_idx_ = count;
    else if (name == "ln_final_gain") ln_final_gain_idx_ = count;
    else if (name == "ln_final_bias") ln_final_bias_idx_ = count;
    else {
      // layer-scoped tensors arrive in a fixed run of 18 per layer
      if (layer_slot == 0) ++layer_of;
      layer_idx_[size_t(layer_of)][size_t(layer_slot)] = count;
      layer_slot = (layer_slot + 1) % 18;
    }
    ++count;
  });
}

namespace {
// slots in LayerParams serialization order
enum LayerSlot {
  kLnAttnGain = 0, kLnAttnBias, kWq, kBq, kWk, kBk, kWv, kBv,
  kWg, kBg, kWo, kBo, kLnFfnGain, kLnFfnBias, kW1, kB1, kW2, kB2,
};
}  // namespace

GradTape::Var TapedModel::attn_sublayer(GradTape::Var normed, int layer, int batch,
                                        int seq_len) {
  const auto& ix = layer_idx_[size_t(layer)];
  auto P = [&](int slot) { return param_vars_[size_t(ix[size_t(slot)])]; };
  const int d = config_.d_model;
  const int hd = d / config_.n_heads;
  const double inv_sqrt_hd = 1.0 / std::sqrt(double(hd));

  GradTape::Var q = tape_.add_rowvec(tape_.matmul(normed, P(kWq)), P(kBq));
  GradTape::Var k = tape_.add_rowvec(tape_.matmul(normed, P(kWk)), P(kBk));
  GradTape::Var v = tape_.add_rowvec(tape_.matmul(normed, P(kWv)), P(kBv));

  std::vector<GradTape::Var> seq_outputs;
  seq_outputs.reserve(size_t(batch));
  for (int b = 0; b < batch; ++b) {
    GradTape::Var qb = tape_.slice_rows(q, b * seq_len, seq_len);
    GradTape::Var kb = tape_.slice_rows(k, b * seq_len, seq_len);
    GradTape::Var vb = tape_.slice_rows(v, b * seq_len, seq_len);
    std::vector<GradTape::Var> heads;
    heads.reserve(size_t(config_.n_heads));
    for (int h = 0; h < config_.n_heads; ++h) {
      GradTape::Var qh = tape_.slice_cols(qb, h * hd, hd);
      GradTape::Var kh = tape_.slice_cols(kb, h * hd, hd);
      GradTape::Var vh = tape_.slice_cols(vb, h * hd, hd);
      GradTape::Var scores = tape_.matmul_nt(qh, kh);
      GradTape::Var attn = tape_.causal_softmax_scaled(scores, inv_sqrt_hd);
      heads.push_back(tape_.matmul(attn, vh));
    }
    seq_outputs.push_back(tape_.concat_cols(heads));
  }
  GradTape::Var mixed = batch == 1 ? seq_outputs[0] : tape_.concat_rows(seq_outputs);

  GradTape::Var gate = tape_.sigmoid(tape_.add_rowvec(tape_.matmul(normed, P(kWg)), P(kBg)));
  GradTape::Var gated = tape_.mul(mixed, gate);
  return tape_.add_rowvec(tape_.matmul(gated, P(kWo)), P(kBo));
}

GradTape::Var TapedModel::ffn_sublayer(GradTape::Var normed, int layer) {
  const auto& ix = layer_idx_[size_t(layer)];
  auto P = [&](int slot) { return param_vars_[size_t(ix[size_t(slot)])]; };
  GradTape::Var h = tape_.gelu(tape_.add_rowvec(tape_.matmul(normed, P(kW1)), P(kB1)));
  return tape_.add_rowvec(tape_.matmul(h, P(kW2)), P(kB2));
}

TapedModel::Forward TapedModel::forward(std::span<const int> tokens, int batch,
                                        bool all_layer_readouts, int n_blocks) {
  if (batch < 1 || tokens.size() % size_t(batch) != 0) {
    fail(ErrorKind::contract, "token count ", tokens.size(), " not divisible by batch ", batch);
  }
  const int seq_len = int(tokens.size() / size_t(batch));
  if (seq_len < 1 || seq_len > config_.context_length) {
    fail(ErrorKind::validation, "sequence length ", seq_len, " exceeds context_length ",
         config_.context_length);
  }
  const int L = n_blocks < 0 ? config_.n_layers : n_blocks;
  if (L > config_.n_layers) {
    fail(ErrorKind::contract, "n_blocks ", n_blocks, " exceeds n_layers ", config_.n_layers);
  }

  GradTape::Var emb = tape_.embedding_gather(
      param_vars_[size_t(embedding_idx_)], std::vector<int>(tokens.begin(), tokens.end()));
  GradTape::Var pos_rows = tape_.slice_rows(param_vars_[size_t(pos_idx_)], 0, seq_len);

  Forward out;
  out.states.reserve(size_t(L) + 1);

  const bool cascade = config_.stream_mode == StreamMode::cascade;
  const int n_rows = batch * seq_len;
  GradTape::Var combined;  // cascade: x_t + x_e; single: the residual stream
  GradTape::Var ctx_stream;  // cascade only: x_e, all block outputs accumulate here
  if (cascade) {
    out.token_stream = emb;  // frozen across layers by construction
    ctx_stream = tape_.constant(Tensor({n_rows, config_.d_model}));
    combined = tape_.add(emb, ctx_stream);
    out.ctx_streams.push_back(ctx_stream);
  } else {
    combined = tape_.add_tiled_rows(emb, pos_rows, batch);
  }
  out.states.push_back(combined);

  for (int l = 0; l < L; ++l) {
    // In cascade mode positions are visible to the block input but are never
    // folded into the combined representation the readout sees.
    GradTape::Var block_in =
        cascade ? tape_.add_tiled_rows(combined, pos_rows, batch) : combined;
    const auto& ix = layer_idx_[size_t(l)];
    auto P = [&](int slot) { return param_vars_[size_t(ix[size_t(slot)])]; };
    GradTape::Var normed_attn = tape_.layer_norm_rows(block_in, P(kLnAttnGain), P(kLnAttnBias));
    GradTape::Var normed_ffn = tape_.layer_norm_rows(block_in, P(kLnFfnGain), P(kLnFfnBias));
    GradTape::Var a = attn_sublayer(normed_attn, l, batch, seq_len);
    GradTape::Var f = ffn_sublayer(normed_ffn, l);
    GradTape::Var delta = tape_.add(a, f);
    if (cascade) {
      ctx_stream = tape_.add(ctx_stream, delta);
      combined = tape_.add(out.token_stream, ctx_stream);
      out.ctx_streams.push_back(ctx_stream);
    } else {
      combined = tape_.add(combined, delta);
    }
    out.states.push_back(combined);
  }

  // Shared readout head: lambda_l = LN_final(state after block l),
  // z_l = lambda_l W_E^T. z_{L-1} is the model output. A zero-block forward
  // reads the input state directly.
  const int n_readouts = std::max(L, 1);
  out.lambdas.resize(size_t(n_readouts));
  out.logits.resize(size_t(n_readouts));
  for (int l = 0; l < n_readouts; ++l) {
    if (!all_layer_readouts && l != n_readouts - 1) continue;
    GradTape::Var src = L == 0 ? out.states[0] : out.states[size_t(l) + 1];
    GradTape::Var lam = tape_.layer_norm_rows(src,
                                              param_vars_[size_t(ln_final_gain_idx_)],
                                              param_vars_[size_t(ln_final_bias_idx_)]);
    out.lambdas[size_t(l)] = lam;
    out.logits[size_t(l)] = tape_.matmul_nt(lam, param_vars_[size_t(embedding_idx_)]);
  }
  return out;
}

GradTape::Var TapedModel::composite_loss(const TokenBatch& batch) {
  if (batch.batch < 1 || batch.tokens.empty()) {
    fail(ErrorKind::contract, "composite_loss requires a non-empty batch");
  }
  if (batch.tokens.size() != batch.targets.size()) {
    fail(ErrorKind::contract, "batch tokens/targets length mismatch");
  }
  Forward f = forward(batch.tokens, batch.batch, config_.aux_loss);
  GradTape::Var loss = tape_.cross_entropy_mean(f.logits[size_t(config_.n_layers) - 1],
                                                batch.targets);
  if (config_.aux_loss) {
    // appendix schedule: aux_lambda * w_l * CE; linear schedule: absolute w_l
    const double lam = config_.aux_schedule == AuxSchedule::appendix ? config_.aux_lambda : 1.0;
    const std::vector<double> w = aux_weights(config_);
    for (int l = 0; l + 1 < config_.n_layers; ++l) {
      GradTape::Var ce = tape_.cross_entropy_mean(f.logits[size_t(l)], batch.targets);
      loss = tape_.add(loss, tape_.scale(ce, lam * w[size_t(l)]));
    }
  }
  return loss;
}

// ---- free functions ----------------------------------------------------------

ForwardRecord forward(const ModelState& state, std::span<const int> tokens, int n_blocks) {
  if (tokens.empty()) fail(ErrorKind::validation, "forward requires at least one token");
  GradTape tape;
  TapedModel model(tape, state, /*requires_grad=*/false);
  TapedModel::Forward f = model.forward(tokens, /*batch=*/1, /*all_layer_readouts=*/true,
                                        n_blocks);

  ForwardRecord rec;
  rec.seq_len = int(tokens.size());
  for (auto v : f.states) rec.states.push_back(tape.value(v));
  for (auto v : f.lambdas) rec.lambdas.push_back(tape.value(v));
  for (auto v : f.logits) rec.logits.push_back(tape.value(v));
  if (state.config.stream_mode == StreamMode::cascade) {
    rec.token_stream = tape.value(f.token_stream);
    for (auto v : f.ctx_streams) rec.ctx_streams.push_back(tape.value(v));
  }
  return rec;
}

MeasuredBatch forward_measure(const ModelState& state, std::span<const int> tokens, int batch) {
  GradTape tape;
  TapedModel model(tape, state, /*requires_grad=*/false);
  TapedModel::Forward f = model.forward(tokens, batch, /*all_layer_readouts=*/true);
  MeasuredBatch out;
  out.batch = batch;
  out.seq_len = int(tokens.size() / size_t(batch));
  for (auto v : f.lambdas) out.lambdas.push_back(tape.value(v));
  return out;
}

Tensor gated_attention(const ModelState& state, int layer, const Tensor& x) {
  if (layer < 0 || layer >= state.config.n_layers) {
    fail(ErrorKind::contract, "layer ", layer, " out of range");
  }
  if (x.rank() != 2 || x.dim(1) != state.config.d_model) {
    fail(ErrorKind::dimension, "gated_attention input must be [positions x d_model]");
  }
  GradTape tape;
  TapedModel model(tape, state, /*requires_grad=*/false);
  GradTape::Var in = tape.constant(x);
  return tape.value(model.attn_sublayer(in, layer, 1, x.dim(0)));
}

double composite_loss(const ModelState& state, const TokenBatch& batch) {
  GradTape tape;
  TapedModel model(tape, state, /*requires_grad=*/false);
  return tape.value(model.composite_loss(batch)).item();
}

Representation representation_at(const ForwardRecord& record, const ModelState& state,
                                 int layer, int position) {
  if (layer < 0 || layer >= int(record.lambdas.size())) {
    fail(ErrorKind::contract, "layer ", layer, " out of range [0, ",
         record.lambdas.size(), ")");
  }
  if (position < 0 || position >= record.seq_len) {
    fail(ErrorKind::contract, "position ", position, " out of range [0, ", record.seq_len, ")");
  }
  const Tensor& lam = record.lambdas[size_t(layer)];
  const int d = lam.dim(1);
  Representation rep;
  rep.lambda = Tensor({d});
  for (int j = 0; j < d; ++j) rep.lambda(j) = lam(position, j);
  rep.layer = layer;
  rep.model_id = state.config.variant_name();
  return rep;
}

}  // namespace blns
