#include "eva/config.hpp"

#include <algorithm>
#include <charconv>
#include <functional>
#include <sstream>

#include "eva/common.hpp"

namespace eva {

Precision parse_precision(std::string_view s) {
  if (s == "f32") return Precision::kF32;
  if (s == "f64") return Precision::kF64;
  throw Error("precision must be f32 or f64, got '" + std::string(s) + "'");
}

std::string_view to_string(Precision p) { return p == Precision::kF32 ? "f32" : "f64"; }

void EncoderConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v <= 0) throw Error(std::string("config: ") + name + " must be positive");
  };
  positive(d_model, "d_model");
  positive(n_layer, "n_layer");
  positive(n_head, "n_head");
  positive(d_ffn, "d_ffn");
  positive(d_lora, "d_lora");
  positive(d_decay_lora, "d_decay_lora");
  positive(mvhs_heads, "mvhs_heads");
  positive(mvhs_head_size, "mvhs_head_size");
  positive(n_out, "n_out");
  positive(patch, "patch");
  if (d_model % n_head != 0) throw Error("config: d_model must be divisible by n_head");
  if (d_model % 2 != 0) throw Error("config: d_model must be even for the sinusoidal embedding");
  if (n_out > mvhs_heads) throw Error("config: n_out exceeds mvhs_heads");
}

EncoderConfig EncoderConfig::dvs() { return EncoderConfig{}; }

EncoderConfig EncoderConfig::half_channel() {
  EncoderConfig c;
  c.mvhs_heads = 8;
  c.mvhs_head_size = 16;
  c.n_out = 4;
  return c;
}

EncoderConfig EncoderConfig::small() {
  EncoderConfig c;
  c.d_model = 32;
  c.n_layer = 3;
  c.n_head = 4;
  c.d_ffn = 64;
  c.d_lora = 8;
  c.d_decay_lora = 8;
  c.mvhs_heads = 2;
  c.mvhs_head_size = 16;
  c.n_out = 2;
  c.patch = 16;
  c.precision = Precision::kF64;
  return c;
}

void TrainConfig::validate() const {
  if (seq_len <= 0 || chunk_len <= 0 || seq_len % chunk_len != 0)
    throw Error("config: seq_len must be a positive multiple of chunk_len");
  if (future_len < 0 || stride < 1 || batch_size < 1 || epochs < 1 || decay_every < 1 || max_steps < 0)
    throw Error("config: invalid training schedule");
  if (!(lr >= 0.0) || !(lr_decay > 0.0)) throw Error("config: invalid learning rate");
  if (head_width <= 0) throw Error("config: head_width must be positive");
  for (auto w : mrp_ec_windows_us)
    if (w == 0) throw Error("config: EC windows must be positive");
  for (auto w : nrp_ec_horizons_us)
    if (w == 0) throw Error("config: NRP horizons must be positive");
  if (mrp_ts_tau_us == 0) throw Error("config: TS tau must be positive");
}

namespace {

struct Field {
  std::string key;
  std::function<void(std::string_view)> set;
  std::function<std::string()> get;
};

template <typename T>
T parse_number(std::string_view s) {
  T v{};
  if constexpr (std::is_floating_point_v<T>) {
    std::string tmp(s);
    std::size_t used = 0;
    v = static_cast<T>(std::stod(tmp, &used));
    if (used != tmp.size()) throw std::invalid_argument("trailing characters");
  } else {
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) throw std::invalid_argument("not an integer");
  }
  return v;
}

template <typename T>
Field number_field(std::string key, T& ref) {
  return Field{std::move(key), [&ref](std::string_view s) { ref = parse_number<T>(s); },
               [&ref] {
                 std::ostringstream os;
                 os.precision(17);
                 os << ref;
                 return os.str();
               }};
}

Field list_field(std::string key, std::vector<std::uint64_t>& ref) {
  return Field{std::move(key),
               [&ref](std::string_view s) {
                 ref.clear();
                 std::size_t start = 0;
                 while (start <= s.size()) {
                   const auto comma = s.find(',', start);
                   std::string_view item = s.substr(start, comma == s.npos ? s.npos : comma - start);
                   while (!item.empty() && item.front() == ' ') item.remove_prefix(1);
                   while (!item.empty() && item.back() == ' ') item.remove_suffix(1);
                   if (!item.empty()) ref.push_back(parse_number<std::uint64_t>(item));
                   if (comma == s.npos) break;
                   start = comma + 1;
                 }
               },
               [&ref] {
                 std::string out;
                 for (std::size_t i = 0; i < ref.size(); ++i) {
                   if (i) out += ",";
                   out += std::to_string(ref[i]);
                 }
                 return out;
               }};
}

std::vector<Field> encoder_fields(EncoderConfig& c) {
  std::vector<Field> f;
  f.push_back(number_field("d_model", c.d_model));
  f.push_back(number_field("n_layer", c.n_layer));
  f.push_back(number_field("n_head", c.n_head));
  f.push_back(number_field("d_ffn", c.d_ffn));
  f.push_back(number_field("d_lora", c.d_lora));
  f.push_back(number_field("d_decay_lora", c.d_decay_lora));
  f.push_back(number_field("mvhs_heads", c.mvhs_heads));
  f.push_back(number_field("mvhs_head_size", c.mvhs_head_size));
  f.push_back(number_field("n_out", c.n_out));
  f.push_back(number_field("patch", c.patch));
  f.push_back(Field{"precision", [&c](std::string_view s) { c.precision = parse_precision(s); },
                    [&c] { return std::string(to_string(c.precision)); }});
  return f;
}

std::vector<Field> train_fields(TrainConfig& c) {
  std::vector<Field> f;
  f.push_back(number_field("seq_len", c.seq_len));
  f.push_back(number_field("chunk_len", c.chunk_len));
  f.push_back(number_field("future_len", c.future_len));
  f.push_back(number_field("stride", c.stride));
  f.push_back(number_field("batch_size", c.batch_size));
  f.push_back(number_field("lr", c.lr));
  f.push_back(number_field("lr_decay", c.lr_decay));
  f.push_back(number_field("decay_every", c.decay_every));
  f.push_back(number_field("epochs", c.epochs));
  f.push_back(number_field("max_steps", c.max_steps));
  f.push_back(number_field("seed", c.seed));
  f.push_back(number_field("head_width", c.head_width));
  f.push_back(list_field("mrp_ec_windows_us", c.mrp_ec_windows_us));
  f.push_back(number_field("mrp_ts_tau_us", c.mrp_ts_tau_us));
  f.push_back(list_field("nrp_ec_horizons_us", c.nrp_ec_horizons_us));
  return f;
}

std::string render(const std::vector<Field>& fields) {
  std::string out;
  for (const auto& f : fields) out += f.key + " = " + f.get() + "\n";
  return out;
}

}  // namespace

RunConfig parse_run_config(std::string_view text, RunConfig base) {
  RunConfig cfg = std::move(base);
  auto fields = encoder_fields(cfg.encoder);
  for (auto& f : train_fields(cfg.train)) fields.push_back(std::move(f));

  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    const auto nl = text.find('\n', start);
    std::string_view line = text.substr(start, nl == text.npos ? text.npos : nl - start);
    start = nl == text.npos ? text.size() : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != line.npos) line = line.substr(0, hash);
    auto strip = [](std::string_view s) {
      while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
      while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
      return s;
    };
    line = strip(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == line.npos) throw ParseError(line_no, "expected 'key = value'");
    const std::string key(strip(line.substr(0, eq)));
    const std::string_view value = strip(line.substr(eq + 1));
    auto it = std::find_if(fields.begin(), fields.end(), [&](const Field& f) { return f.key == key; });
    if (it == fields.end()) throw ParseError(line_no, "unknown key '" + key + "'");
    try {
      it->set(value);
    } catch (const ParseError&) {
      throw;
    } catch (const std::exception& e) {
      throw ParseError(line_no, "bad value for '" + key + "': " + e.what());
    }
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path, RunConfig base) {
  const auto bytes = read_file_bytes(path);
  return parse_run_config(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()),
                          std::move(base));
}

std::string to_text(const EncoderConfig& config) {
  EncoderConfig copy = config;
  return render(encoder_fields(copy));
}

std::string to_text(const TrainConfig& config) {
  TrainConfig copy = config;
  return render(train_fields(copy));
}

std::string to_text(const RunConfig& config) { return to_text(config.encoder) + to_text(config.train); }

}  // namespace eva
