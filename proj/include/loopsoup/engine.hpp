#pragma once

#include <algorithm>
#include <atomic>
#include <bit>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "rng.hpp"
#include "stats.hpp"

namespace loopsoup {

inline constexpr std::string_view kLibraryVersion = "1.0.0";

/// FNV-1a, 64 bit. Used as the content hash for result rows and configs.
class Fnv1a {
 public:
  void update(const void* data, std::size_t n) noexcept {
    auto p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= p[i];
      h_ *= 0x100000001B3ull;
    }
  }
  void update(std::string_view s) noexcept { update(s.data(), s.size()); }
  void update(double v) noexcept {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    update(&bits, sizeof bits);
  }
  void update(std::uint64_t v) noexcept { update(&v, sizeof v); }
  std::uint64_t digest() const noexcept { return h_; }

 private:
  std::uint64_t h_ = 0xCBF29CE484222325ull;
};

inline std::uint64_t fnv1a(std::string_view s) {
  Fnv1a h;
  h.update(s);
  return h.digest();
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
  return s;
}

struct ExperimentPlan {
  std::string experiment_id;
  std::uint64_t master_seed = 0;
  std::uint64_t replicas = 0;
  /// Replica indices run are [first_replica, first_replica + replicas); split runs
  /// over disjoint index ranges pool to exactly the full run.
  std::uint64_t first_replica = 0;
  unsigned workers = 0;  // 0: resolve from LOOPSOUP_WORKERS, else hardware concurrency
  std::map<std::string, std::string> payload;
};

/// Worker count: explicit hint wins, then LOOPSOUP_WORKERS, then the hardware.
inline unsigned resolve_workers(unsigned hint) {
  if (hint > 0) return hint;
  if (const char* env = std::getenv("LOOPSOUP_WORKERS"); env && *env) {
    char* end = nullptr;
    const unsigned long v = std::strtoul(env, &end, 10);
    if (end && *end == '\0' && v > 0 && v <= 4096) return static_cast<unsigned>(v);
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? hw : 1;
}

/// Raised when one or more replicas throw. Every failing index is listed.
class ReplicaFailure : public std::runtime_error {
 public:
  struct Entry {
    std::uint64_t replica;
    std::string message;
  };

  explicit ReplicaFailure(std::vector<Entry> entries) : std::runtime_error(format(entries)), entries_(std::move(entries)) {}

  const std::vector<Entry>& entries() const noexcept { return entries_; }

 private:
  static std::string format(const std::vector<Entry>& e) {
    std::ostringstream os;
    os << e.size() << " replica(s) failed:";
    const std::size_t shown = std::min<std::size_t>(e.size(), 8);
    for (std::size_t i = 0; i < shown; ++i) os << " [" << e[i].replica << "] " << e[i].message << ';';
    if (shown < e.size()) os << " ...";
    return os.str();
  }
  std::vector<Entry> entries_;
};

/// Runs `kernel(replicaIndex, stream)` for every replica of the plan and returns
/// the outputs in replica order. Work is handed out through an atomic counter,
/// so scheduling never influences which stream a replica sees or where its
/// result lands.
template <class Kernel>
auto run_indexed(const ExperimentPlan& plan, Kernel&& kernel) {
  using T = std::invoke_result_t<Kernel&, std::uint64_t, RngStream&>;
  const std::uint64_t n = plan.replicas;
  std::vector<std::optional<T>> slots(n);
  std::vector<ReplicaFailure::Entry> failures;
  std::mutex failure_mutex;
  std::atomic<std::uint64_t> next{0};

  auto worker = [&] {
    for (;;) {
      const std::uint64_t i = next.fetch_add(1, std::memory_order_relaxed);
      if (i >= n) return;
      const std::uint64_t replica = plan.first_replica + i;
      try {
        RngStream rng = derive_stream(plan.master_seed, replica);
        slots[i].emplace(kernel(replica, rng));
      } catch (const std::exception& e) {
        std::lock_guard lock(failure_mutex);
        failures.push_back({replica, e.what()});
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        failures.push_back({replica, "unknown exception"});
      }
    }
  };

  const unsigned w = static_cast<unsigned>(std::min<std::uint64_t>(resolve_workers(plan.workers), std::max<std::uint64_t>(n, 1)));
  if (w <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    pool.reserve(w);
    for (unsigned t = 0; t < w; ++t) pool.emplace_back(worker);
  }
  if (!failures.empty()) {
    std::sort(failures.begin(), failures.end(), [](const auto& a, const auto& b) { return a.replica < b.replica; });
    throw ReplicaFailure(std::move(failures));
  }
  std::vector<T> out;
  out.reserve(n);
  for (auto& s : slots) out.push_back(std::move(*s));
  return out;
}

struct AggregateResult {
  double mean = 0.0;
  double std_error = 0.0;
  std::uint64_t replica_count = 0;
  double min = 0.0;
  double max = 0.0;
  double m2 = 0.0;  // sum of squared deviations from the mean; enough to pool
  std::uint64_t manifest_hash = 0;

  friend bool operator==(const AggregateResult&, const AggregateResult&) = default;
};

/// Reduction in index order with compensated sums; the hash covers the
/// exact bit pattern of every input.
inline AggregateResult aggregate(std::span<const double> values) {
  AggregateResult r;
  r.replica_count = values.size();
  if (values.empty()) return r;
  const auto s = summarize(values);
  r.mean = s.mean;
  r.std_error = s.std_error;
  r.min = s.min;
  r.max = s.max;
  r.m2 = s.variance * static_cast<double>(values.size() - 1);
  Fnv1a h;
  for (double v : values) h.update(v);
  r.manifest_hash = h.digest();
  return r;
}

/// Chan et al. pairwise combination of two disjoint aggregates.
inline AggregateResult pool(const AggregateResult& a, const AggregateResult& b) {
  if (a.replica_count == 0) return b;
  if (b.replica_count == 0) return a;
  AggregateResult r;
  const double na = static_cast<double>(a.replica_count), nb = static_cast<double>(b.replica_count);
  const double n = na + nb;
  const double delta = b.mean - a.mean;
  r.replica_count = a.replica_count + b.replica_count;
  r.mean = a.mean + delta * nb / n;
  r.m2 = a.m2 + b.m2 + delta * delta * na * nb / n;
  r.std_error = n > 1 ? std::sqrt(r.m2 / (n - 1) / n) : 0.0;
  r.min = std::min(a.min, b.min);
  r.max = std::max(a.max, b.max);
  Fnv1a h;
  h.update(a.manifest_hash);
  h.update(b.manifest_hash);
  r.manifest_hash = h.digest();
  return r;
}

template <class Kernel>
AggregateResult run_replicated(const ExperimentPlan& plan, Kernel&& kernel) {
  const std::vector<double> v = run_indexed(plan, [&](std::uint64_t i, RngStream& rng) { return static_cast<double>(kernel(i, rng)); });
  return aggregate(v);
}

/// Column-wise aggregation for kernels that return several statistics per replica.
inline std::vector<AggregateResult> aggregate_columns(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) return {};
  const std::size_t c = rows.front().size();
  std::vector<AggregateResult> out;
  out.reserve(c);
  std::vector<double> col(rows.size());
  for (std::size_t j = 0; j < c; ++j) {
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != c) throw std::invalid_argument("aggregate_columns: ragged rows");
      col[i] = rows[i][j];
    }
    out.push_back(aggregate(col));
  }
  return out;
}

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

/// Per-run JSON manifest. Wall time is the only field that varies between
/// otherwise identical runs, so tools comparing manifests should skip it.
inline nlohmann::ordered_json make_manifest(const ExperimentPlan& plan, std::uint64_t rows_hash, double wall_seconds,
                                            const nlohmann::ordered_json& extra = nlohmann::ordered_json::object()) {
  nlohmann::ordered_json j;
  j["experiment"] = plan.experiment_id;
  j["library_version"] = std::string(kLibraryVersion);
  j["seed"] = plan.master_seed;
  j["replicas"] = plan.replicas;
  j["first_replica"] = plan.first_replica;
  nlohmann::ordered_json payload = nlohmann::ordered_json::object();
  for (const auto& [k, v] : plan.payload) payload[k] = v;
  j["plan"] = payload;
  j["content_hash"] = hex64(rows_hash);
  j["wall_time_s"] = wall_seconds;
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  return j;
}

}  // namespace loopsoup
