#pragma once

#include <atomic>
#include <mutex>
#include <set>
#include <string>

#include "lesionfuse/ops.hpp"

namespace lesionfuse::fault {

// Named fault points let the gradient checker prove it detects a broken backward rule.
// A point is an identity in the forward pass; when enabled, its backward scales the
// incoming gradient by 1.5.

namespace detail {
struct Registry {
  std::mutex mutex;
  std::set<std::string> names;
  std::atomic<int> count{0};
};
inline Registry& registry() {
  static Registry r;
  return r;
}
}  // namespace detail

inline void enable(const std::string& component) {
  auto& r = detail::registry();
  std::lock_guard lock(r.mutex);
  r.names.insert(component);
  r.count = static_cast<int>(r.names.size());
}

inline void disable(const std::string& component) {
  auto& r = detail::registry();
  std::lock_guard lock(r.mutex);
  r.names.erase(component);
  r.count = static_cast<int>(r.names.size());
}

inline bool active(const std::string& component) {
  auto& r = detail::registry();
  if (r.count.load() == 0) return false;
  std::lock_guard lock(r.mutex);
  return r.names.count(component) > 0;
}

inline Tensor point(const char* component, const Tensor& x) {
  return active(component) ? corrupt_gradient(x, 1.5) : x;
}

class ScopedFault {
 public:
  explicit ScopedFault(std::string component) : name_(std::move(component)) { enable(name_); }
  ~ScopedFault() { disable(name_); }
  ScopedFault(const ScopedFault&) = delete;
  ScopedFault& operator=(const ScopedFault&) = delete;

 private:
  std::string name_;
};

}  // namespace lesionfuse::fault
