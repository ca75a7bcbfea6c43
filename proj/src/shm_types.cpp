#include "coexec/shm_types.hpp"

#include "coexec/sys.hpp"

namespace coexec {

bool RobustSpinLock::try_lock() noexcept
{
	pid_t expected = 0;
	return _owner.compare_exchange_strong(expected, sys::current_pid(), std::memory_order_acquire,
		std::memory_order_relaxed);
}

void RobustSpinLock::lock() noexcept
{
	if (try_lock())
		return;

	const pid_t self = sys::current_pid();
	sys::Backoff backoff;
	std::uint64_t start = sys::now_ns();
	while (true) {
		pid_t seen = _owner.load(std::memory_order_relaxed);
		if (seen == 0) {
			if (_owner.compare_exchange_weak(seen, self, std::memory_order_acquire, std::memory_order_relaxed))
				return;
			continue;
		}
		backoff.pause();
		if (sys::now_ns() - start > kWatchdogNs) {
			if (seen != self && !sys::process_alive(seen)) {
				if (_owner.compare_exchange_strong(seen, self, std::memory_order_acquire,
						std::memory_order_relaxed)) {
					_recoveries.fetch_add(1, std::memory_order_relaxed);
					return;
				}
			}
			start = sys::now_ns();
		}
	}
}

void RobustSpinLock::unlock() noexcept
{
	_owner.store(0, std::memory_order_release);
}

} // namespace coexec
