#pragma once

// Lightweight instrumentation shared by every tensor buffer and kernel:
//
//   AllocationMeter — logical bytes held by tensor buffers. Installed with a
//   Scope, it sees every buffer acquired while active and the matching release
//   even if that happens after the scope ended (each buffer remembers the
//   meter that counted it, so current_bytes always balances).
//
//   FlopCounter — scalar arithmetic performed by kernels. Counting convention,
//   used consistently by kernels and by the analytic attention cost formulas:
//   one count per fused multiply-add in an inner product, one per plain
//   add/sub/mul/div elsewhere; transcendental calls and comparisons are free.
//
// Both are thread-local: concurrent forwards on other threads are invisible
// to a meter installed here.

#include <cstdint>
#include <memory>

namespace linglo {

namespace detail {

struct MeterState {
  std::int64_t current = 0;
  std::int64_t peak = 0;
  std::int64_t total = 0;
  std::int64_t byte_limit = 0;  // 0 = unlimited

  void on_alloc(std::int64_t bytes);
  void on_free(std::int64_t bytes) { current -= bytes; }
};

// Meter that buffers allocated on this thread should report to (may be null).
const std::shared_ptr<MeterState>& active_meter();
void set_active_meter(std::shared_ptr<MeterState> state);

struct FlopState {
  std::int64_t count = 0;
};
FlopState* active_flops();
void set_active_flops(FlopState* state);

}  // namespace detail

class AllocationMeter {
 public:
  AllocationMeter() : state_(std::make_shared<detail::MeterState>()) {}

  std::int64_t current_bytes() const { return state_->current; }
  std::int64_t peak_bytes() const { return state_->peak; }
  std::int64_t total_allocated_bytes() const { return state_->total; }

  void reset() {
    state_->current = 0;
    state_->peak = 0;
    state_->total = 0;
  }

  // Optional budget: an allocation that would push current_bytes past the
  // limit throws std::bad_alloc before touching the heap. 0 disables.
  void set_byte_limit(std::int64_t bytes) { state_->byte_limit = bytes; }

  // Installs the meter on this thread for the lifetime of the scope.
  class Scope {
   public:
    explicit Scope(AllocationMeter& meter) : previous_(detail::active_meter()) {
      detail::set_active_meter(meter.state_);
    }
    ~Scope() { detail::set_active_meter(previous_); }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    std::shared_ptr<detail::MeterState> previous_;
  };

 private:
  std::shared_ptr<detail::MeterState> state_;
};

class FlopCounter {
 public:
  std::int64_t count() const { return state_.count; }
  void reset() { state_.count = 0; }

  class Scope {
   public:
    explicit Scope(FlopCounter& counter) : previous_(detail::active_flops()) {
      detail::set_active_flops(&counter.state_);
    }
    ~Scope() { detail::set_active_flops(previous_); }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    detail::FlopState* previous_;
  };

 private:
  detail::FlopState state_;
};

namespace flops {
// Called by kernels once per call with the op's whole count (bulk add keeps
// hot loops clean).
inline void add(std::int64_t n) {
  if (auto* s = detail::active_flops()) s->count += n;
}
}  // namespace flops

}  // namespace linglo
