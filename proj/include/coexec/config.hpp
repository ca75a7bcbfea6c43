#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>

namespace coexec {

inline constexpr std::uint32_t kMaxCores = 256;
inline constexpr std::uint32_t kMaxNumaDomains = 16;
inline constexpr std::uint32_t kMaxProcesses = 64;

// CPUs this process may run on; the default core_count.
std::uint32_t default_core_count();

struct RegionConfig {
	std::string segment_name_seed = "coexec";
	std::size_t segment_size = std::size_t(64) << 20;
	std::uint32_t core_count = default_core_count();
	std::chrono::nanoseconds quantum = std::chrono::milliseconds(20);
	bool user_scoped = true;

	std::uint32_t numa_domains = 1;
	std::uint32_t affinity_skip_limit = 64;
	bool allocator_debug = false;

	// Defaults overridden by the key=value file named by COEXEC_CONFIG,
	// when that variable is set.
	static RegionConfig from_env();

	// Parse key=value text (`#` comments, blank lines ignored). Unknown
	// keys are rejected.
	static RegionConfig parse(const std::string &text);
	static RegionConfig parse(const std::string &text, RegionConfig base);

	// `/<seed>-<uid>-<hash(core_count, size, quantum)>`
	std::string segment_name() const;
};

std::map<std::string, std::string> parse_key_values(const std::string &text);

} // namespace coexec
