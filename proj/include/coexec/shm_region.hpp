#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>

#include <sys/types.h>

#include "coexec/config.hpp"
#include "coexec/layout.hpp"
#include "coexec/scheduler.hpp"
#include "coexec/shm_types.hpp"
#include "coexec/shmalloc.hpp"

namespace coexec {

// Mapping of the node-wide segment plus registry and worker-table
// operations. One Region per mapping; Runtime builds on top of it.
class Region {
public:
	// Smallest segment_size accepted for `core_count` cores.
	static std::size_t minimum_size(std::uint32_t core_count);

	// Maps the segment named by `cfg`, creating and initializing it when
	// absent. Does not register the caller.
	static Region open(const RegionConfig &cfg);

	// Maps an existing segment only. Empty when it does not exist.
	static std::optional<Region> open_existing(const RegionConfig &cfg);

	static bool exists(const std::string &name);
	// Removes a segment name left behind, e.g. by a crashed run.
	static void remove(const std::string &name);

	Region() = default;
	Region(Region &&other) noexcept;
	Region &operator=(Region &&other) noexcept;
	Region(const Region &) = delete;
	Region &operator=(const Region &) = delete;
	~Region();

	bool mapped() const noexcept
	{
		return _segment.base() != nullptr;
	}
	const std::string &name() const noexcept
	{
		return _name;
	}
	SegmentView segment() const noexcept
	{
		return _segment;
	}
	SegmentHeader &header() const noexcept
	{
		return *reinterpret_cast<SegmentHeader *>(_segment.base());
	}

	ProcessEntry &process(std::uint32_t slot) const noexcept;
	CpuSlot &cpu(std::uint32_t c) const noexcept;
	WorkerRecord &worker(std::int32_t index) const noexcept;
	std::uint32_t core_count() const noexcept
	{
		return header().core_count;
	}

	ShmAllocator allocator() const noexcept;
	Scheduler scheduler() const noexcept;

	// Occupies a registry slot for `pid`. Returns empty when the segment
	// is being destroyed (the caller should reopen).
	std::optional<std::uint32_t> register_process(pid_t pid, std::uint64_t start_time);

	// Frees the slot. When no live registrant remains, marks the segment
	// destroyed and unlinks its name; returns true in that case.
	bool unregister_process(std::uint32_t slot);

	// Number of ACTIVE (or detaching) registry entries.
	std::uint32_t registry_count() const;
	std::optional<std::uint32_t> find_process(pid_t pid) const;

	std::int32_t alloc_worker(std::uint32_t owner_slot, pid_t pid);
	void free_worker(std::int32_t index);
	std::uint32_t workers_in_use() const;

	void unmap() noexcept;

private:
	Region(std::string name, std::byte *base, std::size_t size) : _name(std::move(name)), _segment(base, size) {}

	static void initialize(SegmentHeader &h, SegmentView seg, const RegionConfig &cfg);
	static void validate_config(const RegionConfig &cfg);
	void check_matches(const RegionConfig &cfg) const;

	std::string _name;
	SegmentView _segment;
};

} // namespace coexec
