#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "eva/accounting.hpp"
#include "eva/checkpoint.hpp"
#include "eva/common.hpp"
#include "eva/config.hpp"
#include "eva/encoder.hpp"
#include "eva/event_io.hpp"
#include "eva/oracle_reprs.hpp"
#include "eva/pipeline.hpp"
#include "eva/server.hpp"
#include "eva/snapshot_file.hpp"
#include "eva/ssl_train.hpp"

using namespace eva;

namespace {

struct ModelSource {
  std::string checkpoint;
  std::string profile = "dvs";
  std::string config;
  std::uint64_t seed = 0;

  void add(CLI::App* app) {
    app->add_option("--model", checkpoint, "EVAW checkpoint; without it a seeded random model is used");
    app->add_option("--profile", profile, "encoder profile for a random model: dvs, small, half_channel")
        ->check(CLI::IsMember({"dvs", "small", "half_channel"}));
    app->add_option("--config", config, "key = value config applied on top of the profile");
    app->add_option("--seed", seed, "initialization seed for a random model");
  }

  RunConfig run_config() const {
    RunConfig rc;
    if (profile == "small") rc.encoder = EncoderConfig::small();
    else if (profile == "half_channel") rc.encoder = EncoderConfig::half_channel();
    else rc.encoder = EncoderConfig::dvs();
    if (!config.empty()) rc = load_run_config(config, rc);
    return rc;
  }

  EncoderParams<double> load() const {
    if (!checkpoint.empty()) return ckpt::read_encoder(ckpt::load(checkpoint));
    return init_encoder(run_config().encoder, seed);
  }
};

struct GeometryArgs {
  int height = 0;
  int width = 0;

  void add(CLI::App* app) {
    app->add_option("--height", height, "sensor height (required for CSV input)");
    app->add_option("--width", width, "sensor width (required for CSV input)");
  }

  io::SensorGeometry geometry(int patch) const { return {height, width, patch}; }
};

std::vector<io::Event> read_events(const std::string& path, io::SensorGeometry& g) {
  if (!std::filesystem::exists(path)) throw Error("no such file: " + path);
  const bool csv = std::filesystem::path(path).extension() == ".csv";
  if (csv && (g.height <= 0 || g.width <= 0)) throw Error("CSV input needs --height and --width");
  auto ev = io::load_events(path, g);
  g.validate();
  return ev;
}

void write_events(const std::string& path, const std::vector<io::Event>& ev, const io::SensorGeometry& g) {
  if (std::filesystem::path(path).extension() == ".csv") io::save_events_csv(path, ev);
  else io::save_events_binary(path, ev, g);
}

SnapshotFile quantize(const SnapshotFile& s) {
  SnapshotFile q = s;
  q.kind = SnapshotKind::kQuantized;
  q.quantized = oracle::quantize_repr(std::vector<double>(s.values.begin(), s.values.end()));
  q.values.clear();
  return q;
}

void print_bench(const pipe::BenchReport& r) {
  std::printf("events            %llu\n", static_cast<unsigned long long>(r.events));
  std::printf("seconds           %.6f\n", r.seconds);
  std::printf("events_per_sec    %.1f\n", r.events_per_sec);
  std::printf("mean_latency_us   %.3f\n", r.mean_latency_us);
  std::printf("p99_latency_us    %.3f\n", r.p99_latency_us);
  std::printf("decile_mean_us   ");
  for (double d : r.decile_mean_us) std::printf(" %.3f", d);
  std::printf("\nlast_first_ratio  %.3f\n", r.last_first_ratio);
  std::printf("checksum          %016llx\n", static_cast<unsigned long long>(r.checksum));
}

/// Tiles per-patch target images into one sensor-sized EVAR frame.
SnapshotFile oracle_frame(const std::vector<io::Event>& events, const io::SensorGeometry& g,
                          const oracle::TargetSpec& spec, std::uint64_t t_ref) {
  SnapshotFile out;
  out.kind = spec.kind == oracle::TargetKind::kEventCount ? SnapshotKind::kEventCount : SnapshotKind::kTimeSurface;
  out.channels = 2;
  out.tile = g.patch;
  out.grid_rows = g.grid_rows();
  out.grid_cols = g.grid_cols();
  out.patch_watermarks.assign(g.num_patches(), 0);
  out.values.assign(out.element_count(), 0.0f);
  for (const auto& [id, stream] : io::partition_patches(events, g)) {
    std::vector<io::Event> upto;
    for (const auto& e : stream.events)
      if (e.t <= t_ref) upto.push_back(e);
    if (upto.empty()) continue;
    const auto img = spec.kind == oracle::TargetKind::kEventCount
                         ? oracle::event_count(upto, t_ref >= spec.window_us ? t_ref - spec.window_us : 0, t_ref,
                                               g.patch)
                         : oracle::time_surface(upto, t_ref, static_cast<double>(spec.tau_us), g.patch);
    out.patch_watermarks[id.row * g.grid_cols() + id.col] = upto.back().t;
    for (int p = 0; p < 2; ++p)
      for (int y = 0; y < g.patch; ++y)
        for (int x = 0; x < g.patch; ++x) {
          const std::size_t row = id.row * g.patch + y, col = id.col * g.patch + x;
          out.values[(p * out.height() + row) * out.width() + col] = static_cast<float>(img.at(p, y, x));
        }
  }
  for (auto w : out.patch_watermarks) out.watermark = std::max(out.watermark, w);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Event-camera A2S representation engine"};
  app.require_subcommand(1);

  std::string in, out;
  GeometryArgs geo;
  ModelSource src;

  auto* convert = app.add_subcommand("convert", "convert between CSV (.csv) and binary EVA1 event files");
  convert->add_option("input", in)->required();
  convert->add_option("output", out)->required();
  geo.add(convert);

  std::uint64_t window_us = 10000;
  int threshold = 40;
  auto* filter = app.add_subcommand("filter", "remove hot pixels");
  filter->add_option("input", in)->required();
  filter->add_option("output", out)->required();
  filter->add_option("--window-us", window_us, "counting window");
  filter->add_option("--threshold", threshold, "maximum events per pixel and window");
  geo.add(filter);

  std::string kind = "moving_bar";
  std::uint64_t duration_us = 1000000;
  double rate = 100000;
  std::uint64_t synth_seed = 0;
  auto* synth = app.add_subcommand("synth", "generate a synthetic event stream");
  synth->add_option("output", out)->required();
  synth->add_option("--kind", kind, "uniform_noise, moving_bar or moving_dot");
  synth->add_option("--height", geo.height)->required();
  synth->add_option("--width", geo.width)->required();
  synth->add_option("--duration-us", duration_us);
  synth->add_option("--rate", rate, "mean events per second");
  synth->add_option("--seed", synth_seed);

  std::string run_dir;
  int log_every = 10;
  auto* pretrain = app.add_subcommand("pretrain", "self-supervised pretraining into a run directory");
  pretrain->add_option("input", in)->required();
  pretrain->add_option("--out", run_dir, "run directory")->required();
  pretrain->add_option("--log-every", log_every, "print the batch loss every N steps");
  geo.add(pretrain);
  src.add(pretrain);

  std::uint64_t period_us = 10000;
  bool quantized = false;
  bool recurrent = false;
  auto* encode = app.add_subcommand("encode", "encode an event file into EVAR snapshots at a fixed period");
  encode->add_option("input", in)->required();
  encode->add_option("--out", out, "output directory")->required();
  encode->add_option("--period-us", period_us, "sampling period");
  encode->add_flag("--quantized", quantized, "write uint8 quantized snapshots");
  encode->add_flag("--recurrent", recurrent, "event-by-event recurrence instead of the chunked scan");
  geo.add(encode);
  src.add(encode);

  serve::ServerOptions sopt;
  sopt.port = 7070;
  auto* serve_cmd = app.add_subcommand("serve", "serve INGEST/SNAPSHOT/STATS over TCP until SIGINT or SIGTERM");
  serve_cmd->add_option("--host", sopt.host);
  serve_cmd->add_option("--port", sopt.port, "0 picks an ephemeral port");
  serve_cmd->add_option("--height", geo.height)->required();
  serve_cmd->add_option("--width", geo.width)->required();
  src.add(serve_cmd);

  auto* bench = app.add_subcommand("bench", "time event-by-event ingestion of a stream");
  bench->add_option("input", in, "event file; a synthetic moving bar when omitted");
  std::uint64_t bench_events = 1000000;
  bench->add_option("--events", bench_events, "synthetic stream length");
  geo.add(bench);
  src.add(bench);

  std::string target = "ec";
  std::uint64_t tau_us = 100000;
  std::uint64_t t_ref = 0;
  int oracle_patch = 16;
  auto* oracle_cmd = app.add_subcommand("oracle", "emit event-count or time-surface frames");
  oracle_cmd->add_option("input", in)->required();
  oracle_cmd->add_option("--out", out, "output directory")->required();
  oracle_cmd->add_option("--target", target)->check(CLI::IsMember({"ec", "ts"}));
  std::uint64_t ec_window_us = 100000;
  oracle_cmd->add_option("--window-us", ec_window_us, "trailing count window");
  oracle_cmd->add_option("--tau-us", tau_us, "time-surface decay");
  oracle_cmd->add_option("--t-ref", t_ref, "reference time of a single frame; defaults to the last event");
  oracle_cmd->add_option("--period-us", period_us, "emit frames at this period instead of a single frame");
  oracle_cmd->add_option("--patch", oracle_patch, "tile size");
  geo.add(oracle_cmd);

  auto* inspect = app.add_subcommand("inspect", "parameter and MAC counts of a model");
  src.add(inspect);

  CLI11_PARSE(app, argc, argv);

  try {
    if (convert->parsed()) {
      io::SensorGeometry g = geo.geometry(16);
      const auto ev = read_events(in, g);
      write_events(out, ev, g);
      std::printf("%zu events, %dx%d\n", ev.size(), g.height, g.width);
    } else if (filter->parsed()) {
      io::SensorGeometry g = geo.geometry(16);
      const auto ev = read_events(in, g);
      const auto kept = io::filter_hot_pixels(ev, window_us, threshold);
      write_events(out, kept, g);
      std::printf("kept %zu of %zu events\n", kept.size(), ev.size());
    } else if (synth->parsed()) {
      const io::SensorGeometry g = geo.geometry(16);
      g.validate();
      const auto ev = io::synth_generate(io::parse_synth_kind(kind), g, duration_us, rate, synth_seed);
      write_events(out, ev, g);
      std::printf("%zu events, %dx%d\n", ev.size(), g.height, g.width);
    } else if (pretrain->parsed()) {
      RunConfig rc = src.run_config();
      if (!src.checkpoint.empty()) rc.encoder = ckpt::read_encoder(ckpt::load(src.checkpoint)).config;
      rc.encoder.precision = Precision::kF64;
      io::SensorGeometry g = geo.geometry(rc.encoder.patch);
      const auto ev = read_events(in, g);
      const auto samples = train::build_samples(ev, g, rc.train);
      if (samples.empty()) throw Error("stream too short for one training sample");
      train::Model model = train::init_model(rc, src.seed);
      if (!src.checkpoint.empty()) model.encoder = src.load();
      std::printf("%zu samples, %zu targets\n", samples.size(), model.targets.size());
      const auto result = train::pretrain(samples, model, rc.train, [&](long step, const train::LossReport& r) {
        if (log_every > 0 && step % log_every == 0) std::printf("step %ld loss %.6f\n", step, r.total);
      });
      train::write_run_directory(run_dir, rc, result);
      std::printf("%ld steps, run written to %s\n", result.steps, run_dir.c_str());
    } else if (encode->parsed()) {
      const auto params = src.load();
      io::SensorGeometry g = geo.geometry(params.config.patch);
      const auto ev = read_events(in, g);
      pipe::EncodeOptions opt;
      opt.period_us = period_us;
      opt.precision = pipe::env_precision(Precision::kF32);
      opt.mode = recurrent ? la::Mode::kRecurrent : la::Mode::kParallel;
      opt.threads = pipe::env_threads();
      const auto times = pipe::sample_times(ev, period_us);
      const auto snaps = pipe::encode_offline(ev, g, params, times, opt);
      std::filesystem::create_directories(out);
      for (std::size_t i = 0; i < snaps.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "frame_%06zu.evar", i);
        SnapshotFile f = snaps[i].to_file();
        if (quantized) f = quantize(f);
        write_file_bytes((std::filesystem::path(out) / name).string(), encode_snapshot(f));
      }
      std::printf("%zu frames of %dx%dx%d\n", snaps.size(), params.config.n_out,
                  snaps.empty() ? 0 : snaps[0].height(), snaps.empty() ? 0 : snaps[0].width());
    } else if (serve_cmd->parsed()) {
      const auto params = src.load();
      const io::SensorGeometry g = geo.geometry(params.config.patch);
      g.validate();
      pipe::Pipeline pipeline(g, params, pipe::env_precision(Precision::kF32));
      serve::Server server(pipeline, sopt);
      server.start();
      std::printf("listening on %s:%d\n", sopt.host.c_str(), server.port());
      std::fflush(stdout);
      serve::run_until_signal(server);
    } else if (bench->parsed()) {
      const auto params = src.load();
      io::SensorGeometry g = geo.geometry(params.config.patch);
      std::vector<io::Event> ev;
      if (!in.empty()) {
        ev = read_events(in, g);
      } else {
        if (g.height <= 0 || g.width <= 0) g.height = g.width = 128;
        ev = io::synth_generate(io::SynthKind::kMovingBar, g, bench_events, 1e6, src.seed);
      }
      print_bench(pipe::bench(ev, g, params, pipe::env_precision(Precision::kF32)));
    } else if (oracle_cmd->parsed()) {
      io::SensorGeometry g = geo.geometry(oracle_patch);
      const auto ev = read_events(in, g);
      if (ev.empty()) throw Error("empty event stream");
      oracle::TargetSpec spec;
      spec.kind = target == "ec" ? oracle::TargetKind::kEventCount : oracle::TargetKind::kTimeSurface;
      spec.window_us = ec_window_us;
      spec.tau_us = tau_us;
      spec.validate();
      std::vector<std::uint64_t> times;
      if (oracle_cmd->count("--period-us")) times = pipe::sample_times(ev, period_us);
      else times.push_back(oracle_cmd->count("--t-ref") ? t_ref : ev.back().t);
      std::filesystem::create_directories(out);
      for (std::size_t i = 0; i < times.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "%s_%06zu.evar", target.c_str(), i);
        write_file_bytes((std::filesystem::path(out) / name).string(), encode_snapshot(oracle_frame(ev, g, spec, times[i])));
      }
      std::printf("%zu %s frames\n", times.size(), target.c_str());
    } else if (inspect->parsed()) {
      const EncoderConfig c = src.checkpoint.empty() ? src.run_config().encoder : src.load().config;
      const auto vec = acct::vector_output_variant(c);
      const auto p = acct::count_params(c), pv = acct::count_params(vec);
      std::printf("%s", to_text(c).c_str());
      std::printf("params                 %llu\n", static_cast<unsigned long long>(p));
      std::printf("output_layer_params    %llu\n", static_cast<unsigned long long>(acct::count_output_layer_params(c)));
      std::printf("macs_per_event         %llu\n", static_cast<unsigned long long>(acct::count_macs_per_event(c)));
      std::printf("vector_output_params   %llu\n", static_cast<unsigned long long>(pv));
      std::printf("vector_output_ratio    %.3f\n", static_cast<double>(acct::count_output_layer_params(vec)) /
                                                       static_cast<double>(acct::count_output_layer_params(c)));
      std::printf("frame                  %d x %d x %d per patch\n", c.n_out, c.mvhs_head_size, c.mvhs_head_size);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "eva: %s\n", e.what());
    return 1;
  }
  return 0;
}
