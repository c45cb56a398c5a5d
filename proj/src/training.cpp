#include "bregmanlens/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>

#include "bregmanlens/io.hpp"
#include "bregmanlens/rng.hpp"

namespace blns {

Corpus Corpus::from_bytes(std::vector<unsigned char> data, double val_fraction) {
  if (val_fraction < 0.0 || val_fraction >= 1.0) {
    fail(ErrorKind::validation, "val_fraction must be in [0, 1), got ", val_fraction);
  }
  Corpus c;
  c.bytes = std::move(data);
  c.train_end = c.bytes.size() - size_t(double(c.bytes.size()) * val_fraction);
  return c;
}

Corpus Corpus::from_files(const std::vector<std::string>& paths, double val_fraction) {
  if (paths.empty()) fail(ErrorKind::validation, "corpus needs at least one source file");
  std::vector<unsigned char> all;
  for (const auto& p : paths) {
    std::vector<unsigned char> b = read_file(p);
    all.insert(all.end(), b.begin(), b.end());
  }
  return from_bytes(std::move(all), val_fraction);
}

std::vector<int> tokenize(std::span<const unsigned char> bytes) {
  std::vector<int> ids(bytes.size());
  for (size_t i = 0; i < bytes.size(); ++i) ids[i] = int(bytes[i]);
  return ids;
}

std::vector<int> tokenize(std::string_view text) {
  std::vector<int> ids(text.size());
  for (size_t i = 0; i < text.size(); ++i) ids[i] = int(static_cast<unsigned char>(text[i]));
  return ids;
}

std::vector<unsigned char> detokenize(std::span<const int> ids) {
  std::vector<unsigned char> bytes(ids.size());
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] > 255) {
      fail(ErrorKind::validation, "token id ", ids[i], " is not a byte");
    }
    bytes[i] = static_cast<unsigned char>(ids[i]);
  }
  return bytes;
}

void TrainPlan::validate() const {
  if (steps < 0) fail(ErrorKind::validation, "steps must be >= 0, got ", steps);
  if (batch_size < 1) fail(ErrorKind::validation, "batch_size must be >= 1, got ", batch_size);
  if (learning_rate <= 0.0) fail(ErrorKind::validation, "learning_rate must be > 0");
  if (warmup_steps < 0) fail(ErrorKind::validation, "warmup_steps must be >= 0");
  if (checkpoint_every < 1) fail(ErrorKind::validation, "checkpoint_every must be >= 1");
  if (grad_clip <= 0.0) fail(ErrorKind::validation, "grad_clip must be > 0");
}

namespace {

TokenBatch windows_from(const Corpus& corpus, size_t lo, size_t hi, int batch_size,
                        int context_length, Rng& rng) {
  // windows of context_length+1 bytes drawn from [lo, hi)
  if (hi < lo + size_t(context_length) + 1) {
    fail(ErrorKind::validation, "corpus region of ", hi - lo,
         " bytes is shorter than context_length+1 = ", context_length + 1);
  }
  const size_t span = hi - lo - size_t(context_length);
  TokenBatch b;
  b.batch = batch_size;
  b.seq_len = context_length;
  b.tokens.reserve(size_t(batch_size) * size_t(context_length));
  b.targets.reserve(b.tokens.capacity());
  for (int i = 0; i < batch_size; ++i) {
    const size_t start = lo + size_t(rng.uniform_below(span));
    for (int t = 0; t < context_length; ++t) {
      b.tokens.push_back(int(corpus.bytes[start + size_t(t)]));
      b.targets.push_back(int(corpus.bytes[start + size_t(t) + 1]));
    }
  }
  return b;
}

double lr_at(const TrainPlan& plan, int step) {
  const double peak = plan.learning_rate;
  if (plan.warmup_steps > 0 && step < plan.warmup_steps) {
    return peak * double(step + 1) / double(plan.warmup_steps);
  }
  const int decay_steps = std::max(1, plan.steps - plan.warmup_steps);
  const double t = std::min(1.0, double(step - plan.warmup_steps) / double(decay_steps));
  const double floor = 0.1 * peak;
  return floor + (peak - floor) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

}  // namespace

TokenBatch next_batch(const Corpus& corpus, const TrainPlan& plan, int context_length,
                      int step) {
  if (step < 0 || (plan.steps > 0 && step >= plan.steps)) {
    fail(ErrorKind::contract, "step ", step, " outside plan of ", plan.steps, " steps");
  }
  Rng rng(splitmix64(uint64_t(plan.seed) ^ fnv1a64("batch") ^ (0x9e3779b97f4a7c15ull * uint64_t(step + 1))));
  return windows_from(corpus, 0, corpus.train_end, plan.batch_size, context_length, rng);
}

uint64_t batch_fingerprint(const TokenBatch& batch) {
  uint64_t h = fnv1a64("tokens");
  for (int id : batch.tokens) h = fnv1a64_bytes(&id, sizeof(id), h);
  h = fnv1a64("targets", h);
  for (int id : batch.targets) h = fnv1a64_bytes(&id, sizeof(id), h);
  return h;
}

void adam_update(Tensor& param, Tensor& m, Tensor& v, const Tensor& grad, double lr, int t,
                 double grad_scale) {
  constexpr double kBeta1 = 0.9, kBeta2 = 0.95, kEps = 1e-8;
  if (!param.same_shape(grad) || !param.same_shape(m) || !param.same_shape(v)) {
    fail(ErrorKind::dimension, "adam_update shape mismatch");
  }
  if (t < 1) fail(ErrorKind::contract, "adam_update step index must be >= 1");
  const double bc1 = 1.0 - std::pow(kBeta1, double(t));
  const double bc2 = 1.0 - std::pow(kBeta2, double(t));
  for (size_t j = 0; j < param.size(); ++j) {
    const double gj = grad.data()[j] * grad_scale;
    m.data()[j] = kBeta1 * m.data()[j] + (1.0 - kBeta1) * gj;
    v.data()[j] = kBeta2 * v.data()[j] + (1.0 - kBeta2) * gj * gj;
    const double mhat = m.data()[j] / bc1;
    const double vhat = v.data()[j] / bc2;
    param.data()[j] -= lr * mhat / (std::sqrt(vhat) + kEps);
  }
}

double validation_loss(const ModelState& state, const Corpus& corpus, const TrainPlan& plan,
                       int n_batches) {
  Rng rng(splitmix64(uint64_t(plan.seed) ^ fnv1a64("validation")));
  double total = 0.0;
  for (int i = 0; i < n_batches; ++i) {
    TokenBatch b = windows_from(corpus, corpus.train_end, corpus.size(), plan.batch_size,
                                state.config.context_length, rng);
    total += composite_loss(state, b);
  }
  return total / double(n_batches);
}

TrainResult train_model(ModelState& state, const Corpus& corpus, const TrainPlan& plan,
                        const std::function<void(int, double)>& progress) {
  plan.validate();
  state.config.validate();

  // Parameter pointers in serialization order, shared with the tape layout.
  std::vector<Tensor*> params;
  state.for_each_param([&](const std::string&, Tensor& t) { params.push_back(&t); });
  std::vector<Tensor> adam_m, adam_v;
  adam_m.reserve(params.size());
  adam_v.reserve(params.size());
  for (Tensor* p : params) {
    adam_m.emplace_back(p->shape());
    adam_v.emplace_back(p->shape());
  }
  TrainResult result;
  result.curve.reserve(size_t(plan.steps));

  for (int step = 0; step < plan.steps; ++step) {
    TokenBatch batch = next_batch(corpus, plan, state.config.context_length, step);

    GradTape tape;
    TapedModel model(tape, state, /*requires_grad=*/true);
    GradTape::Var loss_var = model.composite_loss(batch);
    const double loss = tape.value(loss_var).item();
    if (!std::isfinite(loss)) {
      double pnorm = 0.0;
      for (Tensor* p : params) pnorm += dot(*p, *p);
      fail(ErrorKind::numeric, "non-finite loss at step ", step,
           "; parameter norm ", std::sqrt(pnorm));
    }
    tape.backward(loss_var);

    // global-norm clip
    double sq = 0.0;
    const auto& vars = model.param_vars();
    for (size_t i = 0; i < params.size(); ++i) {
      const Tensor& g = tape.grad(vars[i]);
      sq += dot(g, g);
    }
    const double gnorm = std::sqrt(sq);
    const double clip_scale = gnorm > plan.grad_clip ? plan.grad_clip / gnorm : 1.0;

    const double lr = lr_at(plan, step);
    for (size_t i = 0; i < params.size(); ++i) {
      Tensor& p = *params[i];
      adam_update(p, adam_m[i], adam_v[i], tape.grad(vars[i]), lr, step + 1, clip_scale);
      if (!p.all_finite()) {
        fail(ErrorKind::numeric, "non-finite parameter after step ", step);
      }
    }

    LossPoint point;
    point.step = step;
    point.train_loss = loss;
    if ((step + 1) % plan.checkpoint_every == 0 || step + 1 == plan.steps) {
      point.val_loss = validation_loss(state, corpus, plan);
      point.has_val = true;
    }
    result.curve.push_back(point);
    if (progress) progress(step, loss);
  }

  if (!result.curve.empty()) {
    result.initial_loss = result.curve.front().train_loss;
    const size_t tail = std::max<size_t>(1, result.curve.size() / 20);
    double s = 0.0;
    for (size_t i = result.curve.size() - tail; i < result.curve.size(); ++i) {
      s += result.curve[i].train_loss;
    }
    result.final_smoothed_loss = s / double(tail);
  }
  return result;
}

// ---- checkpoints -------------------------------------------------------------

namespace {
constexpr char kMagic[4] = {'B', 'L', 'N', 'S'};
constexpr uint32_t kVersion = 1;

void write_config(ByteWriter& w, const ModelConfig& c) {
  w.u32(uint32_t(c.n_layers));
  w.u32(uint32_t(c.n_heads));
  w.u32(uint32_t(c.d_model));
  w.u32(uint32_t(c.vocab_size));
  w.u32(uint32_t(c.context_length));
  w.u8(c.stream_mode == StreamMode::cascade ? 1 : 0);
  w.u8(c.aux_loss ? 1 : 0);
  w.u8(c.aux_schedule == AuxSchedule::linear ? 1 : 0);
  w.u8(0);
  w.f64(c.aux_lambda);
  w.i64(c.seed);
}

ModelConfig read_config(ByteReader& r) {
  ModelConfig c;
  c.n_layers = int(r.u32());
  c.n_heads = int(r.u32());
  c.d_model = int(r.u32());
  c.vocab_size = int(r.u32());
  c.context_length = int(r.u32());
  c.stream_mode = r.u8() ? StreamMode::cascade : StreamMode::single;
  c.aux_loss = r.u8() != 0;
  c.aux_schedule = r.u8() ? AuxSchedule::linear : AuxSchedule::appendix;
  r.u8();
  c.aux_lambda = r.f64();
  c.seed = r.i64();
  return c;
}

void check_config_match(const ModelConfig& got, const ModelConfig& expected) {
  auto differ = [&](const char* field) {
    fail(ErrorKind::validation, "checkpoint config disagrees with requested config on ", field);
  };
  if (got.n_layers != expected.n_layers) differ("n_layers");
  if (got.n_heads != expected.n_heads) differ("n_heads");
  if (got.d_model != expected.d_model) differ("d_model");
  if (got.vocab_size != expected.vocab_size) differ("vocab_size");
  if (got.context_length != expected.context_length) differ("context_length");
  if (got.stream_mode != expected.stream_mode) differ("stream_mode");
  if (got.aux_loss != expected.aux_loss) differ("aux_loss");
  if (got.aux_schedule != expected.aux_schedule) differ("aux_schedule");
  if (got.aux_lambda != expected.aux_lambda) differ("aux_lambda");
}
}  // namespace

void save_checkpoint(const ModelState& state, const std::string& path) {
  ByteWriter w;
  w.raw(kMagic, 4);
  w.u32(kVersion);
  write_config(w, state.config);
  uint32_t n_blocks = 0;
  state.for_each_param([&](const std::string&, const Tensor&) { ++n_blocks; });
  w.u32(n_blocks);
  state.for_each_param([&](const std::string& name, const Tensor& t) {
    w.str(name);
    w.u64(t.size());
    w.raw(t.data(), t.size() * sizeof(double));
  });
  const uint64_t checksum = fnv1a64_bytes(w.bytes.data(), w.bytes.size());
  w.u64(checksum);
  write_file_atomic(path, w.bytes.data(), w.bytes.size());
}

ModelState load_checkpoint(const std::string& path) {
  std::vector<unsigned char> bytes = read_file(path);
  if (bytes.size() < 16) fail(ErrorKind::corruption, "checkpoint ", path, " too short");
  const uint64_t stored = [&] {
    uint64_t v;
    std::memcpy(&v, bytes.data() + bytes.size() - 8, 8);
    return v;
  }();
  const uint64_t computed = fnv1a64_bytes(bytes.data(), bytes.size() - 8);
  if (stored != computed) {
    fail(ErrorKind::corruption, "checkpoint ", path, " failed checksum validation");
  }

  ByteReader r{bytes.data(), bytes.size() - 8, 0};
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) {
    fail(ErrorKind::corruption, "checkpoint ", path, " has wrong magic bytes");
  }
  const uint32_t version = r.u32();
  if (version != kVersion) {
    fail(ErrorKind::validation, "checkpoint ", path, " has unsupported format version ",
         version);
  }
  ModelConfig config = read_config(r);
  config.validate();
  ModelState state = init_model(config);  // shapes; values overwritten below
  const uint32_t n_blocks = r.u32();
  uint32_t seen = 0;
  state.for_each_param([&](const std::string& name, Tensor& t) {
    if (seen >= n_blocks) fail(ErrorKind::corruption, "checkpoint missing block ", name);
    const std::string got = r.str();
    if (got != name) {
      fail(ErrorKind::corruption, "checkpoint block order mismatch: expected ", name,
           ", found ", got);
    }
    const uint64_t count = r.u64();
    if (count != t.size()) {
      fail(ErrorKind::corruption, "checkpoint block ", name, " has ", count,
           " values, expected ", t.size());
    }
    r.raw(t.data(), t.size() * sizeof(double));
    ++seen;
  });
  return state;
}

ModelState load_checkpoint(const std::string& path, const ModelConfig& expected) {
  ModelState state = load_checkpoint(path);
  check_config_match(state.config, expected);
  return state;
}

void write_loss_csv(const std::string& path, const std::vector<LossPoint>& curve) {
  std::string out = "step,train_loss,val_loss\n";
  char buf[128];
  for (const auto& p : curve) {
    if (p.has_val) {
      std::snprintf(buf, sizeof(buf), "%d,%.12g,%.12g\n", p.step, p.train_loss, p.val_loss);
    } else {
      std::snprintf(buf, sizeof(buf), "%d,%.12g,\n", p.step, p.train_loss);
    }
    out += buf;
  }
  write_file_atomic(path, out);
}

}  // namespace blns
