#include "patchlens/parallel.hpp"

#include <cstdlib>
#include <string>

#include <omp.h>

#include "patchlens/error.hpp"

namespace patchlens {

std::optional<int> parse_thread_cap(const char* value) {
  if (value == nullptr || *value == '\0') return std::nullopt;
  const std::string s(value);
  std::size_t used = 0;
  int n = 0;
  try {
    n = std::stoi(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || n < 1) {
    throw UsageError(std::string(kThreadsEnvVar) + " must be a positive integer, got '" + s + "'");
  }
  return n;
}

int configure_threads_from_env() {
  if (auto cap = parse_thread_cap(std::getenv(std::string(kThreadsEnvVar).c_str()))) set_thread_count(*cap);
  return thread_count();
}

void set_thread_count(int n) { omp_set_num_threads(n); }

int thread_count() { return omp_get_max_threads(); }

}  // namespace patchlens
