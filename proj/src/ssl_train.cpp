#include "eva/ssl_train.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "eva/checkpoint.hpp"
#include "eva/common.hpp"

namespace eva::train {

void HeadShape::validate() const {
  if (channels < 1 || size < 1 || patch < 1 || width < 1) throw Error("head: dimensions must be positive");
  if (size != patch && !upsample())
    throw Error("head: representation size must equal the patch or half of it");
}

HeadParams make_head(const HeadShape& s) {
  s.validate();
  HeadParams p;
  p.conv_w = Matrix<double>::Zero(s.width, s.channels * 9);
  p.conv_b = Matrix<double>::Zero(1, s.width);
  if (s.upsample()) {
    p.up_w = Matrix<double>::Zero(s.width, s.width * 16);
    p.up_b = Matrix<double>::Zero(1, s.width);
  } else {
    p.up_w.resize(0, 0);
    p.up_b.resize(0, 0);
  }
  p.proj_w = Matrix<double>::Zero(2, s.width);
  p.proj_b = Matrix<double>::Zero(1, 2);
  return p;
}

namespace {

void fill_uniform(Matrix<double>& m, Rng& rng, double bound) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
}

}  // namespace

HeadParams init_head(const HeadShape& s, Rng& rng) {
  HeadParams p = make_head(s);
  fill_uniform(p.conv_w, rng, 1.0 / std::sqrt(9.0 * s.channels));
  if (s.upsample()) fill_uniform(p.up_w, rng, 1.0 / std::sqrt(4.0 * s.width));
  fill_uniform(p.proj_w, rng, 1.0 / std::sqrt(static_cast<double>(s.width)));
  return p;
}

namespace {

using ad::Tape;
using ad::Var;

/// Tape leaves keyed by the address of the parameter they mirror.
class Leaves {
 public:
  Leaves(Tape& tape, bool track) : tape_(tape), track_(track) {}

  Var operator()(const Matrix<double>& m) {
    auto it = map_.find(&m);
    if (it != map_.end()) return it->second;
    Var v = track_ ? tape_.variable(m) : tape_.constant(m);
    map_.emplace(&m, v);
    return v;
  }
  Tape& tape() { return tape_; }

 private:
  Tape& tape_;
  bool track_;
  std::unordered_map<const Matrix<double>*, Var> map_;
};

Var lora(Leaves& L, Var x, const la::Lora<double>& p) {
  return ad::add_row(ad::matmul(ad::tanh(ad::matmul(x, L(p.a))), L(p.b)), L(p.lambda));
}

struct Mixer {
  Var x, xx, xxx;
  Var branch(Leaves& L, const la::Lora<double>& l) const { return ad::add(x, ad::mul(xx, lora(L, xxx, l))); }
};

Mixer mixer(Leaves& L, Var x, const Matrix<double>& mu) {
  Mixer m;
  m.x = x;
  m.xx = ad::sub(ad::token_shift(x), x);
  m.xxx = ad::add(x, ad::mul_row(m.xx, L(mu)));
  return m;
}

Var decay_of(Leaves& L, Var branch, const la::Lora<double>& decay) {
  return ad::exp(ad::neg(ad::exp(lora(L, branch, decay))));
}

Var block(Leaves& L, Var x, const la::BlockParams<double>& p, int n_head) {
  const Var a = ad::layer_norm(x, L(p.ln1.scale), L(p.ln1.offset), la::kNormEps);
  const Mixer m = mixer(L, a, p.tm.mu);
  const Var r = ad::matmul(m.branch(L, p.tm.mix_r), L(p.tm.w_r));
  const Var k = ad::matmul(m.branch(L, p.tm.mix_k), L(p.tm.w_k));
  const Var v = ad::matmul(m.branch(L, p.tm.mix_v), L(p.tm.w_v));
  const Var g = ad::matmul(m.branch(L, p.tm.mix_g), L(p.tm.w_g));
  const Var w = decay_of(L, m.branch(L, p.tm.mix_w), p.tm.decay);
  const Var y = ad::wkv(r, k, v, w, L(p.tm.u), n_head);
  const Var o = ad::matmul(ad::mul(ad::silu(g), ad::group_norm(y, n_head, la::kNormEps)), L(p.tm.w_o));
  const Var h = ad::add(x, o);

  const Var b = ad::layer_norm(h, L(p.ln2.scale), L(p.ln2.offset), la::kNormEps);
  const Var bx = ad::sub(ad::token_shift(b), b);
  const Var xr = ad::add(b, ad::mul_row(bx, L(p.cm.mu_r)));
  const Var xk = ad::add(b, ad::mul_row(bx, L(p.cm.mu_k)));
  const Var val = ad::matmul(ad::relu_sq(ad::matmul(xk, L(p.cm.w_k))), L(p.cm.w_v));
  return ad::add(h, ad::mul(ad::sigmoid(ad::matmul(xr, L(p.cm.w_r))), val));
}

std::vector<int> chunk_ends(const io::Sample& s) {
  const int T = static_cast<int>(s.input_events.size());
  if (s.chunk_len < 1 || T % s.chunk_len != 0) throw Error("sample length is not a multiple of the chunk length");
  std::vector<int> ends;
  for (int e = s.chunk_len; e <= T; e += s.chunk_len) ends.push_back(e);
  return ends;
}

/// MVHS snapshots at the chunk ends, n_out heads kept: chunk ends x C*S*S.
Var encode_sample(Leaves& L, const EncoderParams<double>& p, const io::Sample& s) {
  const auto& c = p.config;
  const auto& events = s.input_events;
  if (events.empty()) throw Error("sample has no input events");
  std::vector<int> tokens(events.size());
  Matrix<double> temporal(static_cast<Eigen::Index>(events.size()), c.d_model);
  std::uint64_t last = events.front().t;
  for (std::size_t i = 0; i < events.size(); ++i) {
    if (events[i].t < last) throw Error("sample events are not sorted");
    tokens[i] = embed::tok(events[i], p.embedding.vocab);
    temporal.row(static_cast<Eigen::Index>(i)) = embed::embed_temporal<double>(static_cast<double>(events[i].t - last), c.d_model);
    last = events[i].t;
  }
  Var x = ad::add(ad::gather_rows(L(p.embedding.weights), tokens), L.tape().constant(std::move(temporal)));
  x = ad::layer_norm(x, L(p.ln_in.scale), L(p.ln_in.offset), la::kNormEps);
  for (const auto& b : p.blocks) x = block(L, x, b, c.n_head);
  x = ad::layer_norm(x, L(p.ln_out.scale), L(p.ln_out.offset), la::kNormEps);

  const Mixer m = mixer(L, x, p.mvhs.mu);
  const Var k = ad::matmul(m.branch(L, p.mvhs.mix_k), L(p.mvhs.w_k));
  const Var v = ad::matmul(m.branch(L, p.mvhs.mix_v), L(p.mvhs.w_v));
  const Var w = decay_of(L, m.branch(L, p.mvhs.mix_w), p.mvhs.decay);
  const auto ends = chunk_ends(s);
  return ad::state_snapshots(k, v, w, c.mvhs_heads, c.n_out, ends);
}

Var head(Leaves& L, Var reps, const HeadParams& p, const HeadShape& s) {
  if (reps.cols() != s.in_dim()) throw ShapeError("head: representation shape does not match the head");
  Var h = ad::silu(ad::conv2d(reps, L(p.conv_w), L(p.conv_b), s.channels, s.size, s.size, 3, 1));
  if (s.upsample()) h = ad::silu(ad::conv_transpose2x(h, L(p.up_w), L(p.up_b), s.width, s.size, s.size));
  return ad::conv2d(h, L(p.proj_w), L(p.proj_b), s.width, s.patch, s.patch, 1, 0);
}

struct TapeLoss {
  std::vector<Var> task;
  Var total;
};

TapeLoss build_loss(Leaves& L, const Model& m, std::span<const io::Sample* const> batch) {
  if (batch.empty()) throw Error("empty batch");
  if (m.heads.size() != m.targets.size()) throw Error("model has a head count different from its target count");
  std::vector<Var> reps;
  std::vector<std::vector<Matrix<double>>> targets;
  for (const io::Sample* s : batch) {
    reps.push_back(encode_sample(L, m.encoder, *s));
    targets.push_back(sample_targets(*s, m.targets, m.encoder.config.patch));
  }
  const Var all = reps.size() == 1 ? reps[0] : ad::concat_rows(reps);
  TapeLoss out;
  for (std::size_t k = 0; k < m.targets.size(); ++k) {
    Eigen::Index rows = 0;
    for (const auto& t : targets) rows += t[k].rows();
    Matrix<double> stacked(rows, m.head_shape.out_dim());
    Eigen::Index r = 0;
    for (const auto& t : targets) {
      stacked.middleRows(r, t[k].rows()) = t[k];
      r += t[k].rows();
    }
    out.task.push_back(ad::mse(head(L, all, m.heads[k], m.head_shape), stacked));
  }
  out.total = ad::uncertainty_total(out.task, L(m.log_vars));
  return out;
}

LossReport report_of(const TapeLoss& l) {
  LossReport r;
  for (Var v : l.task) r.task.push_back(v.value()(0, 0));
  r.total = l.total.value()(0, 0);
  return r;
}

}  // namespace

Matrix<double> head_forward(const HeadParams& p, const HeadShape& shape, const Matrix<double>& reps) {
  shape.validate();
  Tape tape;
  Leaves L(tape, false);
  return head(L, tape.constant(reps), p, shape).value();
}

Model init_model(const RunConfig& config, std::uint64_t seed) {
  config.encoder.validate();
  config.train.validate();
  Model m;
  m.encoder = init_encoder(config.encoder, seed);
  m.targets = oracle::targets_from_config(config.train);
  m.head_shape = HeadShape{config.encoder.n_out, config.encoder.mvhs_head_size, config.encoder.patch,
                           config.train.head_width};
  m.head_shape.validate();
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  for (std::size_t i = 0; i < m.targets.size(); ++i) m.heads.push_back(init_head(m.head_shape, rng));
  m.log_vars = Matrix<double>::Zero(1, static_cast<Eigen::Index>(m.targets.size()));
  return m;
}

Model zeros_like(const Model& m) {
  Model z = m;
  visit_model([](const std::string&, Matrix<double>& t) { t.setZero(); }, z);
  return z;
}

double uncertainty_total(std::span<const double> losses, std::span<const double> log_vars) {
  if (losses.size() != log_vars.size()) throw Error("uncertainty_total: one log-variance per loss required");
  double total = 0.0;
  for (std::size_t k = 0; k < losses.size(); ++k) total += std::exp(-log_vars[k]) * losses[k] + log_vars[k];
  return total;
}

std::vector<Matrix<double>> sample_targets(const io::Sample& s, std::span<const oracle::TargetSpec> targets,
                                           int patch) {
  const auto ends = chunk_ends(s);
  std::vector<Matrix<double>> out;
  for (const auto& spec : targets) {
    Matrix<double> m(static_cast<Eigen::Index>(ends.size()), 2 * patch * patch);
    for (std::size_t j = 0; j < ends.size(); ++j) {
      const auto img = oracle::compute_target(spec, s.input_events, static_cast<std::size_t>(ends[j]),
                                              s.future_events, patch);
      std::copy(img.values.begin(), img.values.end(), &m(static_cast<Eigen::Index>(j), 0));
    }
    out.push_back(std::move(m));
  }
  return out;
}

std::vector<Matrix<double>> predict(const Model& m, const io::Sample& s) {
  Tape tape;
  Leaves L(tape, false);
  const Var reps = encode_sample(L, m.encoder, s);
  std::vector<Matrix<double>> out;
  for (const auto& h : m.heads) out.push_back(head(L, reps, h, m.head_shape).value());
  return out;
}

LossReport evaluate(const Model& m, std::span<const io::Sample* const> batch) {
  Tape tape;
  Leaves L(tape, false);
  return report_of(build_loss(L, m, batch));
}

LossReport evaluate(const Model& m, std::span<const io::Sample> samples) {
  std::vector<const io::Sample*> ptrs;
  for (const auto& s : samples) ptrs.push_back(&s);
  return evaluate(m, ptrs);
}

LossReport loss_and_grad(const Model& m, std::span<const io::Sample* const> batch, Model& grads, double loss_scale) {
  Tape tape;
  Leaves L(tape, true);
  visit_model([&L](const std::string&, const Matrix<double>& t) { L(t); }, m);
  const TapeLoss loss = build_loss(L, m, batch);
  tape.backward(ad::scale(loss.total, loss_scale));
  visit_model(
      [&L, &tape](const std::string& name, const Matrix<double>& param, Matrix<double>& g) {
        g = tape.grad(L(param).id);
        if (!g.allFinite()) throw Error("non-finite gradient for parameter '" + name + "'");
      },
      m, grads);
  return report_of(loss);
}

void adam_update(Matrix<double>& param, const Matrix<double>& grad, Matrix<double>& m, Matrix<double>& v, long step,
                 double lr, const AdamOptions& o) {
  if (step < 1) throw Error("adam: step counts from 1");
  m = o.beta1 * m + (1.0 - o.beta1) * grad;
  v = o.beta2 * v + (1.0 - o.beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(step));
  param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + o.eps);
}

Adam::Adam(const Model& shape, AdamOptions opt) : opt_(opt), m_(zeros_like(shape)), v_(zeros_like(shape)) {}

void Adam::step(Model& params, const Model& grads, double lr) {
  ++step_;
  visit_model([&](const std::string&, Matrix<double>& p, const Matrix<double>& g, Matrix<double>& m,
                  Matrix<double>& v) { adam_update(p, g, m, v, step_, lr, opt_); },
              params, grads, m_, v_);
}

PretrainResult pretrain(std::span<const io::Sample> samples, Model model, const TrainConfig& config,
                        const StepCallback& on_step) {
  config.validate();
  if (samples.empty()) throw Error("pretrain: empty dataset");
  PretrainResult result;
  Rng rng(config.seed);
  Adam adam(model);
  Model grads = zeros_like(model);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  double lr = config.lr;
  const std::size_t bs = static_cast<std::size_t>(config.batch_size);
  bool done = false;
  for (int epoch = 1; epoch <= config.epochs && !done; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    std::vector<double> sums(model.targets.size(), 0.0);
    double total = 0.0;
    int batches = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += bs) {
      std::vector<const io::Sample*> batch;
      for (std::size_t i = b0; i < std::min(order.size(), b0 + bs); ++i) batch.push_back(&samples[order[i]]);
      const LossReport r = loss_and_grad(model, batch, grads);
      adam.step(model, grads, lr);
      ++result.steps;
      for (std::size_t k = 0; k < sums.size(); ++k) sums[k] += r.task[k];
      total += r.total;
      ++batches;
      result.step_losses.push_back(r);
      if (on_step) on_step(result.steps, r);
      if (config.max_steps > 0 && result.steps >= config.max_steps) {
        done = true;
        break;
      }
    }
    for (std::size_t k = 0; k < sums.size(); ++k)
      result.history.push_back({epoch, model.targets[k].name(), sums[k] / batches});
    result.history.push_back({epoch, "total", total / batches});
    if (epoch % config.decay_every == 0) lr *= config.lr_decay;
  }
  result.model = std::move(model);
  return result;
}

std::vector<io::Sample> build_samples(std::span<const io::Event> events, const io::SensorGeometry& geometry,
                                      const TrainConfig& config) {
  const auto filtered = io::filter_hot_pixels(events);
  std::vector<io::Sample> out;
  for (const auto& [id, stream] : io::partition_patches(filtered, geometry)) {
    auto s = io::slice_samples(stream, config.seq_len, config.stride, config.future_len, config.chunk_len);
    for (auto& x : s) out.push_back(std::move(x));
  }
  return out;
}

void write_run_directory(const std::string& dir, const RunConfig& config, const PretrainResult& result) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const fs::path root(dir);
  {
    std::ofstream f(root / "config.txt");
    f << to_text(config);
  }
  {
    std::ofstream f(root / "loss.csv");
    f << "epoch,task,loss\n";
    f.precision(17);
    for (const auto& e : result.history) f << e.epoch << ',' << e.task << ',' << e.loss << '\n';
  }
  ckpt::Checkpoint c = ckpt::make_checkpoint(config, result.model.encoder);
  Model copy = result.model;
  for (std::size_t i = 0; i < copy.heads.size(); ++i)
    visit_head(
        [&c](const std::string& name, const Matrix<double>& m) {
          if (m.size() > 0) c.tensors.push_back(ckpt::to_named(name, m));
        },
        "heads." + copy.targets[i].name(), copy.heads[i]);
  c.tensors.push_back(ckpt::to_named("loss.log_vars", copy.log_vars));
  ckpt::save((root / "model.evaw").string(), c);
  {
    std::ofstream f(root / "metrics.txt");
    f.precision(17);
    f << "steps=" << result.steps << '\n';
    f << "params=" << parameter_count(result.model.encoder) << '\n';
    if (!result.step_losses.empty()) {
      const auto& first = result.step_losses.front();
      const auto& last = result.step_losses.back();
      for (std::size_t k = 0; k < result.model.targets.size(); ++k) {
        f << "initial_" << result.model.targets[k].name() << '=' << first.task[k] << '\n';
        f << "final_" << result.model.targets[k].name() << '=' << last.task[k] << '\n';
      }
      f << "initial_total=" << first.total << '\n';
      f << "final_total=" << last.total << '\n';
    }
  }
}

}  // namespace eva::train
