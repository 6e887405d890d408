#include "linglo/metering.hpp"

#include <new>

namespace linglo::detail {

void MeterState::on_alloc(std::int64_t bytes) {
  if (byte_limit > 0 && current + bytes > byte_limit) throw std::bad_alloc();
  current += bytes;
  total += bytes;
  if (current > peak) peak = current;
}

namespace {
thread_local std::shared_ptr<MeterState> g_meter;
thread_local FlopState* g_flops = nullptr;
}  // namespace

const std::shared_ptr<MeterState>& active_meter() { return g_meter; }
void set_active_meter(std::shared_ptr<MeterState> state) { g_meter = std::move(state); }

FlopState* active_flops() { return g_flops; }
void set_active_flops(FlopState* state) { g_flops = state; }

}  // namespace linglo::detail
