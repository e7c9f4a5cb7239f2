#pragma once

#include <cstdint>
#include <deque>
#include <span>
#include <string>
#include <vector>

#include "eva/config.hpp"
#include "eva/event_io.hpp"

namespace eva::oracle {

enum class TargetKind { kEventCount, kTimeSurface };
enum class TargetRole { kMrp, kNrp };

struct TargetSpec {
  TargetKind kind = TargetKind::kEventCount;
  TargetRole role = TargetRole::kMrp;
  std::uint64_t window_us = 100000;  // EC trailing window (MRP)
  std::uint64_t tau_us = 100000;     // TS decay constant
  std::uint64_t horizon_us = 0;      // NRP look-ahead

  void validate() const;
  std::string name() const;  // e.g. "mrp_ec_100000"
};

/// MRP EC windows, MRP TS and NRP EC horizons, in that order.
std::vector<TargetSpec> targets_from_config(const TrainConfig& config);

/// 2 x P x P image indexed [p][y][x].
struct TargetImage {
  int patch = 0;
  std::vector<double> values;
  std::uint64_t t_ref = 0;

  TargetImage() = default;
  explicit TargetImage(int p) : patch(p), values(2 * static_cast<std::size_t>(p) * p, 0.0) {}

  std::size_t index(int p, int y, int x) const { return (static_cast<std::size_t>(p) * patch + y) * patch + x; }
  double at(int p, int y, int x) const { return values[index(p, y, x)]; }
  double& at(int p, int y, int x) { return values[index(p, y, x)]; }
};

/// Counts events with t in the closed interval [t_s, t_e].
TargetImage event_count(std::span<const io::Event> events, std::uint64_t t_s, std::uint64_t t_e, int patch);

/// exp((t_last - t_ref) / tau) of each cell's latest event, 0 for empty cells.
/// Events after t_ref are rejected.
TargetImage time_surface(std::span<const io::Event> events, std::uint64_t t_ref, double tau_us, int patch);

class StreamingTimeSurface {
 public:
  explicit StreamingTimeSurface(int patch);

  void update(const io::Event& e);
  TargetImage read(std::uint64_t t_ref, double tau_us) const;

 private:
  int patch_;
  std::vector<std::uint64_t> last_t_;
  std::vector<bool> seen_;
  std::uint64_t latest_ = 0;
  bool any_ = false;
};

/// Trailing-window counts [t_ref - window, t_ref] over a FIFO of events that
/// is trimmed at read time. Reads must not go back in time.
class StreamingEventCount {
 public:
  StreamingEventCount(int patch, std::uint64_t window_us);

  void update(const io::Event& e);
  TargetImage read(std::uint64_t t_ref);
  std::size_t buffered() const { return fifo_.size(); }

 private:
  int patch_;
  std::uint64_t window_;
  std::deque<io::Event> fifo_;
  std::vector<double> counts_;
  std::uint64_t latest_ = 0;
  std::uint64_t last_read_ = 0;
  bool any_ = false;
};

/// q = min(255, round(|v| * scale)), rounding half away from zero.
std::vector<std::uint8_t> quantize_repr(std::span<const double> values, double scale = 1.0 / 8.0);

/// Target for a chunk ending at index `end` (exclusive prefix length) of an
/// input sequence. MRP targets look back over input[0, end); NRP targets use
/// the events after the chunk end that fall in (t_end, t_end + horizon],
/// drawn from the rest of the input followed by `future`.
TargetImage compute_target(const TargetSpec& spec, std::span<const io::Event> input, std::size_t end,
                           std::span<const io::Event> future, int patch);

}  // namespace eva::oracle
