#pragma once

#include <atomic>
#include <cstdint>
#include <string>

#include <sys/types.h>

#include "coexec/shm_types.hpp"

namespace coexec {

enum class TaskState : std::uint32_t {
	Created,
	Ready,
	Running,
	Paused,
	Finished,
	Destroyed,
};

const char *task_state_name(TaskState s) noexcept;

enum class AffinityKind : std::uint8_t {
	None,
	Core,
	Numa,
};

enum class AffinityMode : std::uint8_t {
	Strict,
	BestEffort,
};

struct Affinity {
	AffinityKind kind = AffinityKind::None;
	AffinityMode mode = AffinityMode::Strict;
	std::uint16_t target = 0;

	static Affinity none() noexcept
	{
		return {};
	}
	static Affinity core(std::uint32_t k, AffinityMode mode = AffinityMode::Strict) noexcept
	{
		return {AffinityKind::Core, mode, std::uint16_t(k)};
	}
	static Affinity numa(std::uint32_t d, AffinityMode mode = AffinityMode::Strict) noexcept
	{
		return {AffinityKind::Numa, mode, std::uint16_t(d)};
	}

	bool strict() const noexcept
	{
		return kind != AffinityKind::None && mode == AffinityMode::Strict;
	}

	bool operator==(const Affinity &) const = default;

	// "none", "core:3:strict", "numa:1:best"
	std::string to_string() const;
	static Affinity parse(const std::string &text);
};

// Shared-memory record of a task. The run and completion callbacks are not
// stored here: `type_id` resolves them inside the owner process.
struct alignas(kCacheLine) TaskDescriptor {
	std::uint64_t id;
	pid_t owner_pid;
	std::uint32_t owner_slot;
	std::uint32_t type_id;
	std::atomic<std::uint32_t> state;
	std::int32_t priority;
	Affinity affinity;
	std::uint32_t skips;
	std::atomic<std::int32_t> attached_worker;
	std::uint64_t submit_seq;
	shm_off_t metadata;
	std::uint64_t metadata_size;
	// Ready-queue links, valid while READY.
	shm_off_t prev;
	shm_off_t next;
	std::uint32_t queue;
	std::uint32_t reserved;

	TaskState load_state(std::memory_order order = std::memory_order_acquire) const noexcept
	{
		return TaskState(state.load(order));
	}
	void store_state(TaskState s, std::memory_order order = std::memory_order_release) noexcept
	{
		state.store(std::uint32_t(s), order);
	}
};

} // namespace coexec
