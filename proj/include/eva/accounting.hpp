#pragma once

#include <cstdint>

#include "eva/config.hpp"

namespace eva::acct {

/// Learnable parameters of the encoder (embedding, norms, blocks, MVHS
/// output layer). Prediction heads are not part of the deployed model.
std::uint64_t count_params(const EncoderConfig& c);

/// Parameters of the MVHS output layer alone.
std::uint64_t count_output_layer_params(const EncoderConfig& c);

/// Multiply-accumulates of one recurrent event update: every matrix
/// product (projections, lora factors, channel mixing) plus the state
/// read-out and update. Norms and elementwise gates are not counted.
std::uint64_t count_macs_per_event(const EncoderConfig& c);

/// Same encoder with a vector-valued output layer (head size 1) holding the
/// same number of output values as the matrix-valued one.
EncoderConfig vector_output_variant(const EncoderConfig& c);

}  // namespace eva::acct
