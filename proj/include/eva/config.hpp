#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace eva {

enum class Precision { kF32, kF64 };

Precision parse_precision(std::string_view s);
std::string_view to_string(Precision p);

/// Architecture hyperparameters. The MVHS output layer has its own head
/// geometry, independent of the blocks.
struct EncoderConfig {
  int d_model = 128;
  int n_layer = 3;
  int n_head = 16;
  int d_ffn = 256;
  int d_lora = 16;
  int d_decay_lora = 16;
  int mvhs_heads = 16;
  int mvhs_head_size = 8;
  int n_out = 16;
  int patch = 16;
  Precision precision = Precision::kF32;

  int head_size() const { return d_model / n_head; }
  int mvhs_dim() const { return mvhs_heads * mvhs_head_size; }
  int vocab_size() const { return 2 * patch * patch; }

  void validate() const;

  /// 128-wide, 16 heads of 8, MVHS 16 x 8 x 8 (gesture profile).
  static EncoderConfig dvs();
  /// MVHS 8 heads of 16, half the channels kept: 4 x 16 x 16 per patch.
  static EncoderConfig half_channel();
  /// Desk-scale profile used for pretraining tests: D=32, MVHS 2 x 16 x 16.
  static EncoderConfig small();

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

struct TrainConfig {
  int seq_len = 512;
  int chunk_len = 16;
  int future_len = 256;
  int stride = 512;
  int batch_size = 4;
  double lr = 1e-3;
  double lr_decay = 1.0;  // multiplicative gamma applied every `decay_every` epochs
  int decay_every = 1;
  int epochs = 1;
  int max_steps = 0;  // 0 means run all epochs
  std::uint64_t seed = 0;
  int head_width = 32;

  // SSL targets (microseconds).
  std::vector<std::uint64_t> mrp_ec_windows_us{100000};
  std::uint64_t mrp_ts_tau_us = 100000;
  std::vector<std::uint64_t> nrp_ec_horizons_us{20000};

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct RunConfig {
  EncoderConfig encoder;
  TrainConfig train;
};

/// Parses `key = value` lines ('#' starts a comment). Unknown keys and
/// malformed values throw eva::ParseError. Keys not present keep the values
/// of `base`.
RunConfig parse_run_config(std::string_view text, RunConfig base = {});
RunConfig load_run_config(const std::string& path, RunConfig base = {});

std::string to_text(const EncoderConfig& config);
std::string to_text(const TrainConfig& config);
std::string to_text(const RunConfig& config);

}  // namespace eva
