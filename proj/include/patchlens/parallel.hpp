#pragma once

#include <optional>
#include <string_view>

namespace patchlens {

inline constexpr std::string_view kThreadsEnvVar = "PATCHLENS_THREADS";

/// Parses a PATCHLENS_THREADS value; nullopt for unset/empty, throws
/// UsageError for anything that is not a positive integer.
std::optional<int> parse_thread_cap(const char* value);

/// Applies PATCHLENS_THREADS to the OpenMP runtime and returns the worker
/// count in effect. Unset means the machine default.
int configure_threads_from_env();

void set_thread_count(int n);
int thread_count();

}  // namespace patchlens
