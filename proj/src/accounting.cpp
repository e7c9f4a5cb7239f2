#include "eva/accounting.hpp"

namespace eva::acct {

namespace {

using u64 = std::uint64_t;

u64 lora_params(u64 in, u64 rank, u64 out) { return out + in * rank + rank * out; }
u64 lora_macs(u64 in, u64 rank, u64 out) { return in * rank + rank * out; }

}  // namespace

std::uint64_t count_output_layer_params(const EncoderConfig& c) {
  c.validate();
  const u64 d = c.d_model, r = c.d_lora, rw = c.d_decay_lora, dm = c.mvhs_dim();
  return d + 3 * lora_params(d, r, d) + lora_params(d, rw, dm) + 2 * d * dm;
}

std::uint64_t count_params(const EncoderConfig& c) {
  c.validate();
  const u64 d = c.d_model, f = c.d_ffn, r = c.d_lora, rw = c.d_decay_lora;
  const u64 embedding = static_cast<u64>(c.vocab_size()) * d;
  const u64 norms = 2 * (2 * d);
  const u64 tm = d + 5 * lora_params(d, r, d) + lora_params(d, rw, d) + 5 * d * d + d;
  const u64 cm = 2 * d + d * d + 2 * d * f;
  const u64 block = 2 * (2 * d) + tm + cm;
  return embedding + norms + static_cast<u64>(c.n_layer) * block + count_output_layer_params(c);
}

std::uint64_t count_macs_per_event(const EncoderConfig& c) {
  c.validate();
  const u64 d = c.d_model, f = c.d_ffn, r = c.d_lora, rw = c.d_decay_lora;
  const u64 hs = c.head_size();
  const u64 tm = 5 * lora_macs(d, r, d) + lora_macs(d, rw, d) + 5 * d * d + 2 * d * hs;
  const u64 cm = d * d + 2 * d * f;
  const u64 dm = c.mvhs_dim(), mhs = c.mvhs_head_size;
  const u64 out = 3 * lora_macs(d, r, d) + lora_macs(d, rw, dm) + 2 * d * dm + dm * mhs;
  return static_cast<u64>(c.n_layer) * (tm + cm) + out;
}

EncoderConfig vector_output_variant(const EncoderConfig& c) {
  c.validate();
  EncoderConfig v = c;
  const int values = c.n_out * c.mvhs_head_size * c.mvhs_head_size;
  v.mvhs_heads = values;
  v.mvhs_head_size = 1;
  v.n_out = values;
  return v;
}

}  // namespace eva::acct
