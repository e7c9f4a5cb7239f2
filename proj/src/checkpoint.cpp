#include "eva/checkpoint.hpp"

#include <cmath>

namespace eva::ckpt {

const NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

std::vector<std::uint8_t> encode(const Checkpoint& c) {
  ByteWriter w;
  w.text("EVAW");
  w.u32(static_cast<std::uint32_t>(c.metadata.size()));
  w.text(c.metadata);
  w.u32(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    if (t.name.size() > 0xffff) throw FormatError("tensor name too long");
    if (t.dims.size() > 0xff) throw FormatError("tensor rank too large");
    std::size_t n = 1;
    for (auto d : t.dims) n *= d;
    if (n != t.values.size()) throw FormatError("tensor '" + t.name + "' payload does not match its shape");
    w.u16(static_cast<std::uint16_t>(t.name.size()));
    w.text(t.name);
    w.u8(static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) w.u32(d);
    for (float v : t.values) w.f32(v);
  }
  return w.take();
}

Checkpoint decode(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic("EVAW");
  Checkpoint c;
  c.metadata = r.text(r.u32());
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.text(r.u16());
    const int rank = r.u8();
    std::size_t n = 1;
    for (int k = 0; k < rank; ++k) {
      t.dims.push_back(r.u32());
      n *= t.dims.back();
    }
    if (n * 4 > r.remaining()) throw FormatError("tensor '" + t.name + "' truncated");
    t.values.resize(n);
    for (auto& v : t.values) v = r.f32();
    c.tensors.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint");
  return c;
}

void save(const std::string& path, const Checkpoint& c) { write_file_bytes(path, encode(c)); }

Checkpoint load(const std::string& path) { return decode(read_file_bytes(path)); }

NamedTensor to_named(const std::string& name, const Matrix<double>& m) {
  NamedTensor t;
  t.name = name;
  if (m.rows() == 1)
    t.dims = {static_cast<std::uint32_t>(m.cols())};
  else
    t.dims = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
  t.values.resize(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.size(); ++i) t.values[i] = static_cast<float>(m.data()[i]);
  return t;
}

void assign(const NamedTensor& t, Matrix<double>& m) {
  std::uint32_t rows = 1, cols = 0;
  if (t.dims.size() == 1) {
    cols = t.dims[0];
  } else if (t.dims.size() == 2) {
    rows = t.dims[0];
    cols = t.dims[1];
  } else {
    throw FormatError("tensor '" + t.name + "' has unsupported rank");
  }
  if (rows != m.rows() || cols != m.cols())
    throw FormatError("tensor '" + t.name + "' shape mismatch: stored " + std::to_string(rows) + "x" +
                      std::to_string(cols) + ", expected " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    const float v = t.values[i];
    if (!std::isfinite(v)) throw FormatError("tensor '" + t.name + "' holds a non-finite value");
    m.data()[i] = v;
  }
}

void append_encoder(Checkpoint& c, const EncoderParams<double>& p) {
  visit_encoder([&c](const std::string& name, const Matrix<double>& m) { c.tensors.push_back(to_named(name, m)); },
                p);
}

EncoderParams<double> read_encoder(const Checkpoint& c) {
  const RunConfig config = parse_run_config(c.metadata);
  EncoderParams<double> p = make_encoder<double>(config.encoder);
  visit_encoder(
      [&c](const std::string& name, Matrix<double>& m) {
        const NamedTensor* t = c.find(name);
        if (!t) throw FormatError("checkpoint is missing tensor '" + name + "'");
        assign(*t, m);
      },
      p);
  return p;
}

Checkpoint make_checkpoint(const RunConfig& config, const EncoderParams<double>& p) {
  Checkpoint c;
  RunConfig copy = config;
  copy.encoder = p.config;
  c.metadata = to_text(copy);
  append_encoder(c, p);
  return c;
}

}  // namespace eva::ckpt
