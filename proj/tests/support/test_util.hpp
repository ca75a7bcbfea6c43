#pragma once

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <functional>
#include <string>
#include <thread>

#include <sys/mman.h>
#include <sys/wait.h>
#include <unistd.h>

#include "coexec/config.hpp"
#include "coexec/shm_region.hpp"

namespace coexec::testing {

// A config with a segment name no other test (or test run) shares.
inline RegionConfig unique_config(std::uint32_t cores, std::chrono::milliseconds quantum = std::chrono::milliseconds(20),
	std::size_t segment_size = std::size_t(16) << 20)
{
	static std::atomic<int> counter{0};
	RegionConfig cfg;
	cfg.segment_name_seed = "coexec-test-" + std::to_string(getpid()) + "-" + std::to_string(counter++);
	cfg.core_count = cores;
	cfg.quantum = quantum;
	cfg.segment_size = segment_size;
	return cfg;
}

// Removes the segment name when the test leaves scope.
struct SegmentCleanup {
	std::string name;
	explicit SegmentCleanup(const RegionConfig &cfg) : name(cfg.segment_name()) {}
	~SegmentCleanup() { Region::remove(name); }
};

// Runs `fn` in a forked child; the child's exit code is fn's return value
// (or 100 when it throws).
inline pid_t fork_child(const std::function<int()> &fn)
{
	pid_t pid = fork();
	if (pid == 0) {
		int rc = 100;
		try {
			rc = fn();
		} catch (const std::exception &e) {
			std::fprintf(stderr, "child %d: %s\n", getpid(), e.what());
		}
		std::fflush(nullptr);
		_exit(rc);
	}
	return pid;
}

inline int wait_child(pid_t pid)
{
	int status = 0;
	if (waitpid(pid, &status, 0) != pid)
		return -1;
	if (WIFEXITED(status))
		return WEXITSTATUS(status);
	return 128 + (WIFSIGNALED(status) ? WTERMSIG(status) : 0);
}

// Object in an anonymous shared mapping, visible to forked children.
template <typename T>
T *shared_object()
{
	void *p = mmap(nullptr, sizeof(T), PROT_READ | PROT_WRITE, MAP_SHARED | MAP_ANONYMOUS, -1, 0);
	if (p == MAP_FAILED)
		std::abort();
	return new (p) T();
}

template <typename Pred>
bool wait_until(Pred pred, std::chrono::milliseconds timeout = std::chrono::seconds(10))
{
	auto deadline = std::chrono::steady_clock::now() + timeout;
	while (!pred()) {
		if (std::chrono::steady_clock::now() > deadline)
			return false;
		std::this_thread::sleep_for(std::chrono::milliseconds(1));
	}
	return true;
}

} // namespace coexec::testing
