#include "msfm/common.hpp"

#include <atomic>
#include <exception>
#include <iostream>
#include <mutex>
#include <thread>
#include <vector>

namespace msfm {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kArgument: return "argument";
    case ErrorCode::kFormat: return "format";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kNotRegistered: return "not-registered";
    case ErrorCode::kAlreadyRegistered: return "already-registered";
    case ErrorCode::kConflict: return "conflict";
    case ErrorCode::kInsufficientData: return "insufficient-data";
    case ErrorCode::kDegenerateGeometry: return "degenerate-geometry";
    case ErrorCode::kEpipoleDegenerate: return "epipole-degenerate";
    case ErrorCode::kInvalidLine: return "invalid-line";
    case ErrorCode::kDegeneratePose: return "degenerate-pose";
    case ErrorCode::kDegenerateRay: return "degenerate-ray";
    case ErrorCode::kNoSeed: return "no-seed";
    case ErrorCode::kInsufficientOverlap: return "insufficient-overlap";
    case ErrorCode::kDegenerateAlignment: return "degenerate-alignment";
    case ErrorCode::kStageFailure: return "stage-failure";
  }
  return "unknown";
}

void parallel_for(std::size_t n, int threads,
                  const std::function<void(std::size_t)>& fn) {
  if (n == 0) return;
  const std::size_t workers =
      std::min<std::size_t>(n, static_cast<std::size_t>(std::max(threads, 1)));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

namespace {
std::atomic<bool> g_log_enabled{false};
std::mutex g_log_mutex;
}  // namespace

void set_log_enabled(bool on) { g_log_enabled = on; }

void log_record(const std::string& event, const std::string& fields) {
  if (!g_log_enabled) return;
  std::lock_guard<std::mutex> lock(g_log_mutex);
  std::cerr << "event=" << event;
  if (!fields.empty()) std::cerr << ' ' << fields;
  std::cerr << '\n';
}

}  // namespace msfm
