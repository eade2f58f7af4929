#include <atomic>
#include <cstdlib>
#include <string>

#include "rlrr/kernels.hpp"

#ifndef RLRR_HAVE_AVX2
namespace rlrr::kernels::avx2 {
const Table* table() { return nullptr; }
}  // namespace rlrr::kernels::avx2
#endif

namespace rlrr::kernels {
namespace {

const Table* pick(std::string_view name) {
  if (name == "scalar") return &scalar::table;
  if (name == "avx2") return cpu_has_avx2() ? avx2::table() : nullptr;
  if (name == "auto" || name.empty()) {
    if (const Table* t = cpu_has_avx2() ? avx2::table() : nullptr) return t;
    return &scalar::table;
  }
  return nullptr;
}

const Table* initial() {
  const char* env = std::getenv("RLRR_KERNELS");
  if (const Table* t = pick(env ? env : "auto")) return t;
  return &scalar::table;
}

std::atomic<const Table*>& current() {
  static std::atomic<const Table*> t{initial()};
  return t;
}

}  // namespace

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(__i386__)
  return __builtin_cpu_supports("avx2");
#else
  return false;
#endif
}

const Table& active() { return *current().load(std::memory_order_acquire); }

bool select(std::string_view name) {
  const Table* t = pick(name);
  if (!t) return false;
  current().store(t, std::memory_order_release);
  return true;
}

}  // namespace rlrr::kernels
