#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <thread>
#include <vector>

namespace coexec::bench {

enum class IdleMode {
	Passive, // idle threads block in the kernel
	Spin,    // idle threads busy-wait, never yielding
};

// Fork-join pool standing in for an OpenMP runtime: the caller plus
// `threads - 1` helpers share each parallel loop. With `pin` non-empty,
// thread i is pinned to physical CPU pin[i % pin.size()].
class NativePool {
public:
	NativePool(std::uint32_t threads, IdleMode mode, std::vector<int> pin = {});
	~NativePool();
	NativePool(const NativePool &) = delete;
	NativePool &operator=(const NativePool &) = delete;

	// Runs body(0) .. body(n - 1) and returns when all are done.
	void parallel_for(std::size_t n, const std::function<void(std::size_t)> &body);

	std::uint32_t size() const noexcept
	{
		return std::uint32_t(_helpers.size() + 1);
	}

private:
	struct Job {
		const std::function<void(std::size_t)> *body;
		std::size_t count;
		std::atomic<std::size_t> next{0};
		std::atomic<std::size_t> remaining;
	};

	void helper_main(std::uint32_t index);
	void work_on(Job &job);

	IdleMode _mode;
	std::vector<int> _pin;
	std::vector<std::thread> _helpers;

	std::mutex _job_mutex;
	std::shared_ptr<Job> _job;
	std::atomic<std::uint64_t> _generation{0};
	std::atomic<bool> _stop{false};
};

// Physical CPU backing logical core `c` (logical cores beyond the machine
// wrap around).
int physical_cpu_of(std::uint32_t logical);

} // namespace coexec::bench
