#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "eva/config.hpp"
#include "eva/encoder.hpp"

namespace eva::ckpt {

struct NamedTensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> values;
};

/// `EVAW` container: u32 metadata length + key=value text, u32 tensor count,
/// then per tensor u16 name length, name, u8 rank, u32 dims, f32 payload.
struct Checkpoint {
  std::string metadata;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const;
};

std::vector<std::uint8_t> encode(const Checkpoint& c);
Checkpoint decode(std::span<const std::uint8_t> bytes);
void save(const std::string& path, const Checkpoint& c);
Checkpoint load(const std::string& path);

/// 1 x n matrices are stored with rank 1.
NamedTensor to_named(const std::string& name, const Matrix<double>& m);
/// Copies a stored tensor into `m`, which must already have the stored shape.
void assign(const NamedTensor& t, Matrix<double>& m);

void append_encoder(Checkpoint& c, const EncoderParams<double>& p);

/// Reads the metadata block as a RunConfig and fills every encoder tensor.
/// Missing tensors or shape mismatches throw FormatError.
EncoderParams<double> read_encoder(const Checkpoint& c);

Checkpoint make_checkpoint(const RunConfig& config, const EncoderParams<double>& p);

}  // namespace eva::ckpt
