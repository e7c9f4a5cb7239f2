#include "eva/event_io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <unordered_map>

#include "eva/random.hpp"

namespace eva {

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::string& path, std::span<const std::uint8_t> data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
}

}  // namespace eva

namespace eva::io {

void SensorGeometry::validate() const {
  if (height <= 0 || width <= 0) throw Error("sensor geometry has zero area");
  if (patch <= 0) throw Error("patch size must be positive");
  if (height > 65535 || width > 65535) throw Error("sensor dimensions exceed u16 range");
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  return s;
}

bool parse_u64(std::string_view s, std::uint64_t& out) {
  s = trim(s);
  if (s.empty()) return false;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

}  // namespace

std::vector<Event> parse_csv(std::istream& in, const SensorGeometry& geometry) {
  std::vector<Event> events;
  std::string line;
  std::size_t line_no = 0;
  bool first_content = true;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view sv = trim(line);
    if (sv.empty()) continue;

    std::uint64_t fields[4];
    int n = 0;
    bool numeric = true;
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = sv.find(',', start);
      const std::string_view field = sv.substr(start, comma == std::string_view::npos ? sv.npos : comma - start);
      if (n < 4) {
        if (!parse_u64(field, fields[n])) numeric = false;
      }
      ++n;
      if (comma == std::string_view::npos) break;
      start = comma + 1;
    }

    if (first_content) {
      first_content = false;
      std::uint64_t dummy;
      const std::string_view head = sv.substr(0, sv.find(','));
      if (!parse_u64(head, dummy)) continue;  // header line
    }
    if (n != 4) throw ParseError(line_no, "expected 4 fields t,x,y,p, got " + std::to_string(n));
    if (!numeric) throw ParseError(line_no, "malformed integer field");

    if (fields[3] > 1) throw ParseError(line_no, "polarity must be 0 or 1");
    if (fields[1] >= static_cast<std::uint64_t>(geometry.width) ||
        fields[2] >= static_cast<std::uint64_t>(geometry.height))
      throw ParseError(line_no, "coordinate out of range");
    if (!events.empty() && fields[0] < events.back().t)
      throw ParseError(line_no, "non-monotonic timestamp");

    events.push_back(Event{fields[0], static_cast<std::uint16_t>(fields[1]), static_cast<std::uint16_t>(fields[2]),
                           static_cast<std::uint8_t>(fields[3])});
  }
  return events;
}

void write_csv(std::ostream& out, std::span<const Event> events) {
  for (const Event& e : events) out << e.t << ',' << e.x << ',' << e.y << ',' << int(e.p) << '\n';
}

namespace {

void append_records(ByteWriter& w, std::span<const Event> events, bool has_prev, std::uint64_t prev_t) {
  for (std::size_t i = 0; i < events.size(); ++i) {
    const Event& e = events[i];
    std::uint64_t dt = 0;
    if (i > 0) {
      if (e.t < events[i - 1].t) throw Error("pack_binary: events not sorted by time");
      dt = e.t - events[i - 1].t;
    } else if (has_prev) {
      if (e.t < prev_t) throw Error("pack_binary: first event precedes prev_t");
      dt = e.t - prev_t;
    }
    w.u16(static_cast<std::uint16_t>(std::min(dt, kMaxDelta)));
    w.u16(e.x);
    w.u16(e.y);
    w.u16(e.p);
  }
}

}  // namespace

std::vector<std::uint8_t> pack_binary(std::span<const Event> events) {
  ByteWriter w;
  append_records(w, events, false, 0);
  return w.take();
}

std::vector<std::uint8_t> pack_binary(std::span<const Event> events, std::uint64_t prev_t) {
  ByteWriter w;
  append_records(w, events, true, prev_t);
  return w.take();
}

void RecordDecoder::decode(std::span<const std::uint8_t> bytes, std::vector<Event>& out) {
  if (bytes.size() % kRecordBytes != 0)
    throw FormatError("record payload length " + std::to_string(bytes.size()) + " is not a multiple of 8");
  ByteReader r(bytes);
  out.reserve(out.size() + bytes.size() / kRecordBytes);
  while (r.remaining() > 0) {
    const std::uint16_t dt = r.u16();
    const std::uint16_t x = r.u16();
    const std::uint16_t y = r.u16();
    const std::uint16_t p = r.u16();
    if (x >= geometry_.width || y >= geometry_.height) throw FormatError("record coordinate outside sensor geometry");
    if (p > 1) throw FormatError("record polarity must be 0 or 1");
    cursor_ += dt;
    out.push_back(Event{cursor_, x, y, static_cast<std::uint8_t>(p)});
  }
}

std::vector<Event> unpack_binary(std::span<const std::uint8_t> bytes, const SensorGeometry& geometry) {
  std::vector<Event> out;
  RecordDecoder dec(geometry);
  dec.decode(bytes, out);
  return out;
}

std::vector<std::uint8_t> encode_event_file(std::span<const Event> events, const SensorGeometry& geometry) {
  geometry.validate();
  ByteWriter w;
  w.text("EVA1");
  w.u16(static_cast<std::uint16_t>(geometry.height));
  w.u16(static_cast<std::uint16_t>(geometry.width));
  append_records(w, events, false, 0);
  return w.take();
}

std::vector<Event> decode_event_file(std::span<const std::uint8_t> bytes, SensorGeometry* geometry_out) {
  ByteReader r(bytes);
  r.expect_magic("EVA1");
  SensorGeometry g;
  g.height = r.u16();
  g.width = r.u16();
  if (geometry_out) {
    geometry_out->height = g.height;
    geometry_out->width = g.width;
    g.patch = geometry_out->patch;
  }
  g.validate();
  return unpack_binary(bytes.subspan(r.position()), g);
}

std::vector<Event> load_events(const std::string& path, SensorGeometry& geometry) {
  const auto bytes = read_file_bytes(path);
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), "EVA1", 4) == 0) return decode_event_file(bytes, &geometry);
  geometry.validate();
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  return parse_csv(in, geometry);
}

void save_events_csv(const std::string& path, std::span<const Event> events) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path + "'");
  write_csv(out, events);
}

void save_events_binary(const std::string& path, std::span<const Event> events, const SensorGeometry& geometry) {
  write_file_bytes(path, encode_event_file(events, geometry));
}

std::vector<Event> filter_hot_pixels(std::span<const Event> events, std::uint64_t window_us, int threshold) {
  std::vector<Event> out;
  if (events.empty()) return out;
  if (window_us == 0) throw Error("filter_hot_pixels: window must be positive");
  out.reserve(events.size());
  const std::uint64_t t0 = events.front().t;
  std::unordered_map<std::uint32_t, int> counts;
  std::size_t begin = 0;
  while (begin < events.size()) {
    const std::uint64_t window = (events[begin].t - t0) / window_us;
    std::size_t end = begin;
    counts.clear();
    while (end < events.size() && (events[end].t - t0) / window_us == window) {
      ++counts[(std::uint32_t{events[end].y} << 16) | events[end].x];
      ++end;
    }
    for (std::size_t i = begin; i < end; ++i) {
      if (counts[(std::uint32_t{events[i].y} << 16) | events[i].x] <= threshold) out.push_back(events[i]);
    }
    begin = end;
  }
  return out;
}

std::map<PatchId, PatchStream> partition_patches(std::span<const Event> events, const SensorGeometry& geometry) {
  geometry.validate();
  std::map<PatchId, PatchStream> out;
  const auto P = static_cast<std::uint16_t>(geometry.patch);
  for (const Event& e : events) {
    const PatchId id{e.y / P, e.x / P};
    auto [it, inserted] = out.try_emplace(id);
    if (inserted) it->second.id = id;
    it->second.events.push_back(Event{e.t, static_cast<std::uint16_t>(e.x % P), static_cast<std::uint16_t>(e.y % P), e.p});
  }
  return out;
}

std::vector<Event> globalize(const PatchStream& stream, const SensorGeometry& geometry) {
  std::vector<Event> out;
  out.reserve(stream.events.size());
  for (const Event& e : stream.events) {
    out.push_back(Event{e.t, static_cast<std::uint16_t>(stream.id.col * geometry.patch + e.x),
                        static_cast<std::uint16_t>(stream.id.row * geometry.patch + e.y), e.p});
  }
  return out;
}

std::vector<Sample> slice_samples(const PatchStream& stream, int seq_len, int stride, int future_len,
                                  int chunk_len) {
  if (seq_len <= 0 || future_len < 0) throw Error("slice_samples: invalid lengths");
  if (stride < 1) throw Error("slice_samples: stride must be >= 1");
  if (chunk_len <= 0 || seq_len % chunk_len != 0) throw Error("slice_samples: T must be a multiple of T_chunk");
  std::vector<Sample> out;
  const auto window = static_cast<std::size_t>(seq_len + future_len);
  const auto& ev = stream.events;
  for (std::size_t start = 0; start + window <= ev.size(); start += static_cast<std::size_t>(stride)) {
    Sample s;
    s.chunk_len = chunk_len;
    s.input_events.assign(ev.begin() + static_cast<std::ptrdiff_t>(start),
                          ev.begin() + static_cast<std::ptrdiff_t>(start + seq_len));
    const std::uint64_t last_t = s.input_events.back().t;
    for (std::size_t i = start + seq_len; i < start + window; ++i) {
      if (ev[i].t > last_t) s.future_events.push_back(ev[i]);
    }
    out.push_back(std::move(s));
  }
  return out;
}

SynthKind parse_synth_kind(std::string_view name) {
  if (name == "uniform_noise") return SynthKind::kUniformNoise;
  if (name == "moving_bar") return SynthKind::kMovingBar;
  if (name == "moving_dot") return SynthKind::kMovingDot;
  throw Error("unknown synthetic stream kind '" + std::string(name) + "'");
}

std::string_view to_string(SynthKind kind) {
  switch (kind) {
    case SynthKind::kUniformNoise: return "uniform_noise";
    case SynthKind::kMovingBar: return "moving_bar";
    case SynthKind::kMovingDot: return "moving_dot";
  }
  return "?";
}

std::vector<Event> synth_generate(SynthKind kind, const SensorGeometry& geometry, std::uint64_t duration_us,
                                  double rate, std::uint64_t seed, const SynthOptions& options) {
  geometry.validate();
  if (!(rate > 0.0)) throw Error("synth_generate: rate must be positive");
  Rng rng(seed);
  const int W = geometry.width;
  const int H = geometry.height;
  const double speed = options.speed_px_per_s > 0.0 ? options.speed_px_per_s : W / 0.25;
  const int bar_width = options.bar_width > 0 ? options.bar_width : std::max(2, W / 8);
  const int dot_radius = options.dot_radius > 0 ? options.dot_radius : std::max(2, std::min(W, H) / 8);

  auto noise = [&](std::uint64_t t) {
    return Event{t, static_cast<std::uint16_t>(rng.below(W)), static_cast<std::uint16_t>(rng.below(H)),
                 static_cast<std::uint8_t>(rng.below(2))};
  };

  std::vector<Event> out;
  out.reserve(static_cast<std::size_t>(rate * duration_us * 1e-6 * 1.1) + 16);
  double t_cont = 0.0;
  const double mean_gap_us = 1e6 / rate;
  while (true) {
    t_cont += -std::log1p(-rng.uniform()) * mean_gap_us;
    const auto t = static_cast<std::uint64_t>(t_cont);
    if (t >= duration_us) break;
    const double ts = t * 1e-6;

    if (kind == SynthKind::kUniformNoise || rng.uniform() < options.noise_fraction) {
      out.push_back(noise(t));
      continue;
    }

    if (kind == SynthKind::kMovingBar) {
      // Bar enters from the left edge and sweeps right, wrapping around.
      const double span = W + bar_width;
      const double left = std::fmod(speed * ts, span) - bar_width;
      const double offset = rng.uniform() * bar_width;
      const auto x = static_cast<int>(std::floor(left + offset));
      if (x < 0 || x >= W) {
        out.push_back(noise(t));
        continue;
      }
      const std::uint8_t p = offset >= 0.5 * bar_width ? 1 : 0;
      out.push_back(Event{t, static_cast<std::uint16_t>(x), static_cast<std::uint16_t>(rng.below(H)), p});
    } else {
      const double orbit = std::max(1.0, std::min(W, H) / 3.0);
      const double omega = speed / orbit;
      const double cx = W / 2.0 + orbit * std::cos(omega * ts);
      const double cy = H / 2.0 + orbit * std::sin(omega * ts);
      const double vx = -std::sin(omega * ts);
      const double vy = std::cos(omega * ts);
      double dx, dy;
      do {
        dx = rng.uniform(-1.0, 1.0) * dot_radius;
        dy = rng.uniform(-1.0, 1.0) * dot_radius;
      } while (dx * dx + dy * dy > double(dot_radius) * dot_radius);
      const auto x = static_cast<int>(std::floor(cx + dx));
      const auto y = static_cast<int>(std::floor(cy + dy));
      if (x < 0 || x >= W || y < 0 || y >= H) {
        out.push_back(noise(t));
        continue;
      }
      const std::uint8_t p = dx * vx + dy * vy >= 0.0 ? 1 : 0;
      out.push_back(Event{t, static_cast<std::uint16_t>(x), static_cast<std::uint16_t>(y), p});
    }
  }
  return out;
}

}  // namespace eva::io
