#pragma once

#include <atomic>
#include <cstdint>
#include <optional>
#include <vector>

#include <sys/types.h>

// Thin wrappers over the OS facilities the runtime needs: a node-global
// monotonic clock, process-shared futexes, process liveness probes and
// CPU pinning.
namespace coexec::sys {

// CLOCK_MONOTONIC, shared by every process on the node.
std::uint64_t now_ns() noexcept;

pid_t current_pid() noexcept;
pid_t current_tid() noexcept;

// Process-shared futex (no FUTEX_PRIVATE_FLAG): the word may live in a
// segment mapped at different addresses in different processes.
// Returns false on timeout.
bool futex_wait(std::atomic<std::uint32_t> &word, std::uint32_t expected,
	std::optional<std::uint64_t> timeout_ns = std::nullopt) noexcept;
void futex_wake(std::atomic<std::uint32_t> &word, int count = 1) noexcept;
void futex_wake_all(std::atomic<std::uint32_t> &word) noexcept;

// Kernel start time of a process in clock ticks (field 22 of /proc/pid/stat),
// used to detect pid reuse. Empty when the process does not exist.
std::optional<std::uint64_t> process_start_time(pid_t pid);

// A process is alive when it exists, is not a zombie, and (when known)
// still carries the start time recorded at registration.
bool process_alive(pid_t pid, std::uint64_t start_time = 0);

// Physical CPUs this process may run on.
std::vector<int> allowed_cpus();
unsigned machine_cores();

// Pin thread `tid` (any process of the same user) to a physical CPU.
bool pin_thread(pid_t tid, int physical_cpu) noexcept;
bool pin_thread_to_set(pid_t tid, const std::vector<int> &physical_cpus) noexcept;

void cpu_relax() noexcept;

// Exponentially growing pause loop; yields the CPU after a few rounds.
class Backoff {
public:
	void pause() noexcept;
	void reset() noexcept
	{
		_count = 0;
	}

private:
	unsigned _count = 0;
};

} // namespace coexec::sys
