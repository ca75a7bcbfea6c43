#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>

#include <sys/types.h>

#include "coexec/config.hpp"
#include "coexec/shm_types.hpp"

// Records that live in the shared segment. Everything here is
// standard-layout, references other records by offset only, and is
// placed by Region at segment creation.
namespace coexec {

inline constexpr std::uint64_t kSegmentMagic = 0x434f455845433031ull; // "COEXEC01"

enum class InitState : std::uint32_t {
	Empty = 0,
	Initializing = 1,
	Ready = 2,
	Destroyed = 3,
};

enum class ProcessState : std::uint32_t {
	Empty = 0,
	Active = 1,
	Leaving = 2, // detaching: owns no new work, still draining its workers
	Dead = 3,
};

const char *process_state_name(ProcessState s) noexcept;

struct SpawnRequest {
	std::int32_t cpu;
	std::uint32_t reserved;
	shm_off_t task;
};

inline constexpr std::uint32_t kMailboxCapacity = 64;

struct alignas(kCacheLine) ProcessEntry {
	std::atomic<std::uint32_t> state;
	std::atomic<pid_t> pid;
	std::uint64_t start_time;
	std::uint64_t registered_at;
	std::atomic<std::int32_t> app_priority;
	std::atomic<std::uint32_t> shutdown;
	std::atomic<std::int64_t> tasks_outstanding;
	std::uint64_t last_served; // scheduler lock

	alignas(kCacheLine) RobustSpinLock mailbox_lock;
	std::uint32_t mailbox_head;
	std::uint32_t mailbox_count;
	std::atomic<std::uint32_t> mailbox_signal;
	SpawnRequest mailbox[kMailboxCapacity];

	alignas(kCacheLine) RobustSpinLock pool_lock;
	std::int32_t idle_head;
	std::uint32_t idle_count;
	std::atomic<std::uint32_t> workers_spawned;

	ProcessState load_state() const noexcept
	{
		return ProcessState(state.load(std::memory_order_acquire));
	}
};

enum class WorkerState : std::uint32_t {
	Free = 0,
	Starting = 1,
	Running = 2,
	ParkedIdle = 3,
	ParkedAttached = 4,
};

enum class WorkerCommand : std::uint32_t {
	Loop = 0,    // take the core and ask the scheduler for work
	RunTask = 1, // take the core and run `task` first
	Exit = 2,
};

struct alignas(kCacheLine) WorkerRecord {
	std::atomic<std::uint32_t> state; // futex word while parked
	std::atomic<std::uint32_t> command;
	std::atomic<std::int32_t> cpu;
	std::atomic<pid_t> tid;
	pid_t pid;
	std::uint32_t owner_slot;
	std::atomic<shm_off_t> task;
	std::atomic<std::uint32_t> woken_by_handoff;
	std::int32_t next_idle; // owner's pool_lock
	std::int32_t next_free; // header worker_lock
};

enum class CpuState : std::uint32_t {
	Unowned = 0, // no worker at all; adopted by the next attach or reap
	Idle = 1,    // designated worker parked waiting for a submit
	Running = 2,
	Handoff = 3, // waiting for a spawned worker of another process
};

struct alignas(kCacheLine) CpuSlot {
	std::atomic<std::uint32_t> state; // futex word for idle parking
	std::atomic<std::int32_t> worker;
	std::atomic<std::uint32_t> owner_slot;
	std::atomic<shm_off_t> task; // dispatched, not yet started
	std::uint32_t numa;
	std::int32_t physical_cpu;

	// Quantum clock, scheduler lock.
	std::uint32_t clock_valid;
	std::uint32_t clock_slot;
	std::uint64_t clock_since;

	CpuState load_state() const noexcept
	{
		return CpuState(state.load(std::memory_order_acquire));
	}
};

struct alignas(kCacheLine) SegmentHeader {
	std::uint64_t magic;
	std::atomic<std::uint32_t> init_state;
	std::atomic<pid_t> initializer;
	std::uint64_t init_started;
	std::uint64_t generation;

	std::uint64_t segment_size;
	std::uint64_t quantum_ns;
	std::uint32_t core_count;
	std::uint32_t numa_domains;
	std::uint32_t affinity_skip_limit;
	std::uint32_t allocator_debug;

	shm_off_t registry_off;
	shm_off_t cpus_off;
	shm_off_t workers_off;
	shm_off_t scheduler_off;
	shm_off_t allocator_off;
	shm_off_t arena_end;
	std::uint32_t worker_capacity;

	std::atomic<std::uint64_t> next_task_id;

	alignas(kCacheLine) RobustSpinLock region_lock;
	alignas(kCacheLine) RobustSpinLock worker_lock;
	std::int32_t worker_free_head;
	std::uint32_t workers_in_use;
};

} // namespace coexec
