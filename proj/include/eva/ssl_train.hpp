#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "eva/autodiff.hpp"
#include "eva/config.hpp"
#include "eva/encoder.hpp"
#include "eva/oracle_reprs.hpp"
#include "eva/random.hpp"

namespace eva::train {

/// Geometry of a prediction head: channels x size x size in, 2 x patch x
/// patch out. upsample() when size is half the patch.
struct HeadShape {
  int channels = 0;
  int size = 0;
  int patch = 0;
  int width = 32;

  bool upsample() const { return size * 2 == patch; }
  void validate() const;
  int in_dim() const { return channels * size * size; }
  int out_dim() const { return 2 * patch * patch; }
};

/// 3x3 conv + SiLU, optional 2x transposed conv + SiLU, 1x1 projection.
struct HeadParams {
  Matrix<double> conv_w, conv_b;  // width x (C*9), 1 x width
  Matrix<double> up_w, up_b;      // width x (width*16), 1 x width; empty without upsampling
  Matrix<double> proj_w, proj_b;  // 2 x width, 1 x 2
};

template <typename Fn, typename... H>
void visit_head(Fn&& fn, const std::string& prefix, H&... h) {
  fn(prefix + ".conv_w", h.conv_w...);
  fn(prefix + ".conv_b", h.conv_b...);
  fn(prefix + ".up_w", h.up_w...);
  fn(prefix + ".up_b", h.up_b...);
  fn(prefix + ".proj_w", h.proj_w...);
  fn(prefix + ".proj_b", h.proj_b...);
}

HeadParams make_head(const HeadShape& shape);
HeadParams init_head(const HeadShape& shape, Rng& rng);

/// Rows of `reps` (batch x C*size*size) to rows of 2*P*P predictions.
Matrix<double> head_forward(const HeadParams& p, const HeadShape& shape, const Matrix<double>& reps);

/// Encoder, one head per target, and one log-variance per target.
struct Model {
  EncoderParams<double> encoder;
  std::vector<oracle::TargetSpec> targets;
  HeadShape head_shape;
  std::vector<HeadParams> heads;
  Matrix<double> log_vars;  // 1 x targets
};

template <typename Fn, typename First, typename... Rest>
void visit_model(Fn&& fn, First& first, Rest&... rest) {
  visit_encoder(fn, first.encoder, rest.encoder...);
  for (std::size_t i = 0; i < first.heads.size(); ++i)
    visit_head(fn, "heads." + first.targets[i].name(), first.heads[i], rest.heads[i]...);
  fn(std::string("loss.log_vars"), first.log_vars, rest.log_vars...);
}

Model init_model(const RunConfig& config, std::uint64_t seed);
/// Same shapes as `m`, all zeros.
Model zeros_like(const Model& m);

/// sum_k exp(-s_k) L_k + s_k.
double uncertainty_total(std::span<const double> losses, std::span<const double> log_vars);

struct LossReport {
  std::vector<double> task;  // unweighted mean-squared error per target
  double total = 0.0;
};

/// Per-target images (chunk ends x 2*P*P) for one sample.
std::vector<Matrix<double>> sample_targets(const io::Sample& s, std::span<const oracle::TargetSpec> targets, int patch);

/// Per-target predictions (chunk ends x 2*P*P) for one sample.
std::vector<Matrix<double>> predict(const Model& m, const io::Sample& s);

/// Batch loss without gradients.
LossReport evaluate(const Model& m, std::span<const io::Sample* const> batch);
LossReport evaluate(const Model& m, std::span<const io::Sample> samples);

/// Loss and exact gradients of `loss_scale * total`. Throws naming the
/// first parameter whose gradient is not finite.
LossReport loss_and_grad(const Model& m, std::span<const io::Sample* const> batch, Model& grads,
                         double loss_scale = 1.0);

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// In-place bias-corrected Adam update of one tensor at step `step` (1-based).
void adam_update(Matrix<double>& param, const Matrix<double>& grad, Matrix<double>& m, Matrix<double>& v, long step,
                 double lr, const AdamOptions& opt = {});

class Adam {
 public:
  explicit Adam(const Model& shape, AdamOptions opt = {});
  void step(Model& params, const Model& grads, double lr);
  long steps() const { return step_; }

 private:
  AdamOptions opt_;
  Model m_, v_;
  long step_ = 0;
};

struct EpochLoss {
  int epoch = 0;
  std::string task;
  double loss = 0.0;
};

struct PretrainResult {
  Model model;
  std::vector<EpochLoss> history;      // per epoch, per task and "total"
  std::vector<LossReport> step_losses;  // loss of each optimizer step's batch
  long steps = 0;
};

using StepCallback = std::function<void(long step, const LossReport&)>;

/// Shuffled mini-batch Adam training; lr is multiplied by lr_decay every
/// decay_every epochs. Stops after max_steps when it is positive.
PretrainResult pretrain(std::span<const io::Sample> samples, Model model, const TrainConfig& config,
                        const StepCallback& on_step = {});

/// Builds training samples from a global event stream: hot-pixel filtered,
/// split by patch, sliced per config.
std::vector<io::Sample> build_samples(std::span<const io::Event> events, const io::SensorGeometry& geometry,
                                      const TrainConfig& config);

/// config.txt, loss.csv (epoch,task,loss), model.evaw, metrics.txt.
void write_run_directory(const std::string& dir, const RunConfig& config, const PretrainResult& result);

}  // namespace eva::train
