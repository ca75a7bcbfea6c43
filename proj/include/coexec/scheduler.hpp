#pragma once

#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

#include "coexec/config.hpp"
#include "coexec/dtlock.hpp"
#include "coexec/layout.hpp"
#include "coexec/shm_types.hpp"
#include "coexec/task.hpp"

namespace coexec {

// Queue index inside one process: the general queue, then strict and
// best-effort queues per core, then per NUMA domain.
inline constexpr std::uint32_t kGeneralQueue = 0;
inline constexpr std::uint32_t kQueuesPerProcess = 1 + 2 * kMaxCores + 2 * kMaxNumaDomains;

std::uint32_t queue_for(const Affinity &a) noexcept;

struct TaskList {
	shm_off_t head;
	shm_off_t tail;
};

struct ProcessQueues {
	std::uint32_t ready;
	std::uint32_t best_effort;
	TaskList lists[kQueuesPerProcess];
};

struct SchedulerState {
	DelegationTicketLock lock;
	alignas(kCacheLine) std::uint64_t submit_counter;
	std::uint64_t serve_counter;
	std::uint64_t dispatched;
	std::uint64_t idle_mask[kMaxCores / 64];
	std::uint32_t idle_cursor;
	// Bit p: process p has ready tasks / ready best-effort tasks. Spares
	// pick() a walk over every process's queue block.
	std::uint64_t ready_mask;
	std::uint64_t best_effort_mask;
	ProcessQueues procs[kMaxProcesses];
};

// View over the shared scheduler. Every public entry point serializes
// through the delegation ticket lock; sched_request is delegated, so the
// current holder may run it on behalf of the requesting core.
class Scheduler {
public:
	static void initialize(SchedulerState &state) noexcept;

	Scheduler() = default;
	Scheduler(SegmentView segment, SegmentHeader *header) noexcept;

	// CREATED or PAUSED -> READY. Returns an idle core claimed for the
	// task, which the caller must wake() after the call, or -1.
	int submit(shm_off_t task);

	// Next task for `cpu`, requested by a worker of process `slot`, or
	// kNullOff after marking the core IDLE.
	shm_off_t request(std::uint32_t cpu, std::uint32_t slot, std::uint64_t now);

	void set_task_affinity(shm_off_t task, Affinity affinity);
	void set_task_priority(shm_off_t task, std::int32_t priority);

	// Futex wake of a core whose IDLE state was claimed.
	void wake(int cpu) noexcept;

	template <typename F>
	decltype(auto) exclusive(F &&fn);

	// The functions below require the lock (see exclusive()).
	int submit_locked(TaskDescriptor &task);
	void purge_locked(std::uint32_t slot, std::vector<shm_off_t> &removed);
	bool claim_idle_locked(std::uint32_t cpu) noexcept;
	void set_idle_locked(std::uint32_t cpu) noexcept;
	bool is_idle_locked(std::uint32_t cpu) const noexcept;
	std::uint32_t ready_locked(std::uint32_t slot) const noexcept;

	DelegationTicketLock::Stats lock_stats() const noexcept;
	std::uint64_t dispatched() const noexcept;

	std::uint64_t operator()(std::uint64_t ticket, const DelegationRequest &req);

private:
	TaskDescriptor &task(shm_off_t off) const noexcept
	{
		return *_segment.at<TaskDescriptor>(off);
	}
	TaskDescriptor *head(std::uint32_t slot, std::uint32_t queue) const noexcept;
	CpuSlot &cpu(std::uint32_t c) const noexcept;
	ProcessEntry &process(std::uint32_t slot) const noexcept;
	std::uint32_t numa_of(std::uint32_t c) const noexcept;

	void link(TaskDescriptor &t);
	void unlink(TaskDescriptor &t);
	void validate(const Affinity &a) const;
	int choose_idle_locked(const TaskDescriptor &t) noexcept;

	shm_off_t pick(std::uint32_t cpu, std::uint32_t slot, std::uint64_t now);

	// Best task of `slot` that may run on `cpu` without deprioritization
	// (tier 1) and best mismatched best-effort head (tier 2).
	void candidates(std::uint32_t slot, std::uint32_t cpu, std::uint32_t numa, TaskDescriptor *&tier1,
		TaskDescriptor *&tier2) const;

	SegmentView _segment;
	SegmentHeader *_header = nullptr;
	SchedulerState *_state = nullptr;
};

template <typename F>
decltype(auto) Scheduler::exclusive(F &&fn)
{
	struct Unlock {
		Scheduler *s;
		~Unlock() { s->_state->lock.unlock(*s); }
	};
	_state->lock.lock(*this);
	Unlock guard{this};
	return std::forward<F>(fn)();
}

} // namespace coexec
