#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "bregmanlens/model.hpp"

namespace blns {

// Byte corpus with a contiguous train/validation split (deterministic).
struct Corpus {
  std::vector<unsigned char> bytes;
  size_t train_end = 0;  // [0, train_end) train, [train_end, size) validation

  static Corpus from_bytes(std::vector<unsigned char> data, double val_fraction = 0.1);
  static Corpus from_files(const std::vector<std::string>& paths, double val_fraction = 0.1);

  size_t size() const { return bytes.size(); }
  size_t train_size() const { return train_end; }
  size_t val_size() const { return bytes.size() - train_end; }
};

// Byte-level vocabulary: the identity map, V = 256.
std::vector<int> tokenize(std::span<const unsigned char> bytes);
std::vector<int> tokenize(std::string_view text);
std::vector<unsigned char> detokenize(std::span<const int> ids);

struct TrainPlan {
  int steps = 2000;
  int batch_size = 16;
  double learning_rate = 3e-4;  // peak; linear warmup, cosine decay to 10%
  int warmup_steps = 100;
  long long seed = 0;
  int checkpoint_every = 200;  // validation-loss cadence
  double grad_clip = 1.0;      // global gradient-norm ceiling

  void validate() const;
};

// Deterministic function of (corpus, plan.seed, step): batch_size windows
// from the train split; targets are the inputs shifted by one.
TokenBatch next_batch(const Corpus& corpus, const TrainPlan& plan, int context_length,
                      int step);

// Order-sensitive fingerprint of a batch's token/target ids, for the
// factorial-fairness assertion that all variants consume identical streams.
uint64_t batch_fingerprint(const TokenBatch& batch);

struct LossPoint {
  int step = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  bool has_val = false;
};

struct TrainResult {
  std::vector<LossPoint> curve;
  double initial_loss = 0.0;
  double final_smoothed_loss = 0.0;  // mean over the last 5% of steps (>= 1)
};

// One Adam update on a single parameter block (beta1 0.9, beta2 0.95,
// eps 1e-8); t is the 1-based step index, grad_scale folds in clipping.
// A zero gradient with zero moment state leaves the parameters unchanged.
void adam_update(Tensor& param, Tensor& m, Tensor& v, const Tensor& grad, double lr, int t,
                 double grad_scale = 1.0);

// Adam (beta1 0.9, beta2 0.95, eps 1e-8) with warmup+cosine schedule and
// global-norm clipping. Mutates `state` in place; single-threaded and
// bit-exactly reproducible for a fixed (state, corpus, plan). A non-finite
// loss aborts with the step index and parameter norm in the message.
TrainResult train_model(ModelState& state, const Corpus& corpus, const TrainPlan& plan,
                        const std::function<void(int, double)>& progress = {});

// Validation loss over a fixed seeded set of batches from the val split.
double validation_loss(const ModelState& state, const Corpus& corpus, const TrainPlan& plan,
                       int n_batches = 2);

// ---- checkpoints -------------------------------------------------------------
// Format: magic "BLNS", u32 version, serialized ModelConfig, named
// length-prefixed little-endian f64 parameter blocks in for_each_param order,
// trailing FNV-1a checksum of everything before it.

void save_checkpoint(const ModelState& state, const std::string& path);
ModelState load_checkpoint(const std::string& path);
// Rejects checkpoints whose stored config disagrees with `expected`.
ModelState load_checkpoint(const std::string& path, const ModelConfig& expected);

void write_loss_csv(const std::string& path, const std::vector<LossPoint>& curve);

}  // namespace blns
