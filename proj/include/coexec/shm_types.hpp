#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <type_traits>

#include <sys/types.h>

namespace coexec {

inline constexpr std::size_t kCacheLine = 64;

// Offset of a record from the segment base. 0 is the null offset: the
// segment header lives there, so no record can legitimately sit at 0.
using shm_off_t = std::uint64_t;
inline constexpr shm_off_t kNullOff = 0;

// Raw view of a mapped segment. Records inside the segment only ever
// store offsets; each process turns them into pointers through its own
// mapping.
class SegmentView {
public:
	SegmentView() = default;
	SegmentView(std::byte *base, std::size_t size) : _base(base), _size(size) {}

	std::byte *base() const noexcept { return _base; }
	std::size_t size() const noexcept { return _size; }

	template <typename T>
	T *at(shm_off_t off) const noexcept
	{
		return off == kNullOff ? nullptr : reinterpret_cast<T *>(_base + off);
	}

	shm_off_t offset_of(const void *ptr) const noexcept
	{
		return ptr == nullptr ? kNullOff : shm_off_t(static_cast<const std::byte *>(ptr) - _base);
	}

	bool contains(shm_off_t off, std::size_t len = 1) const noexcept
	{
		return off != kNullOff && off < _size && len <= _size - off;
	}

private:
	std::byte *_base = nullptr;
	std::size_t _size = 0;
};

// Test-and-set lock for short critical sections inside the segment. It
// records the owning pid so that a waiter stuck for longer than the
// watchdog can take over from a holder that died.
class RobustSpinLock {
public:
	void lock() noexcept;
	bool try_lock() noexcept;
	void unlock() noexcept;

	pid_t owner() const noexcept
	{
		return _owner.load(std::memory_order_relaxed);
	}

	// Number of times the watchdog broke the lock of a dead owner.
	std::uint32_t recoveries() const noexcept
	{
		return _recoveries.load(std::memory_order_relaxed);
	}

private:
	std::atomic<pid_t> _owner{0};
	std::atomic<std::uint32_t> _recoveries{0};
};

static_assert(std::is_standard_layout_v<RobustSpinLock>);

class SpinGuard {
public:
	explicit SpinGuard(RobustSpinLock &lock) : _lock(lock) { _lock.lock(); }
	~SpinGuard() { _lock.unlock(); }
	SpinGuard(const SpinGuard &) = delete;
	SpinGuard &operator=(const SpinGuard &) = delete;

private:
	RobustSpinLock &_lock;
};

inline constexpr std::uint64_t kWatchdogNs = 1'000'000'000ull;

} // namespace coexec
