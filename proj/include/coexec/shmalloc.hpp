#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "coexec/shm_types.hpp"

namespace coexec {

inline constexpr std::size_t kChunkSize = std::size_t(256) << 10;
inline constexpr std::size_t kMinBlock = 64;
inline constexpr std::uint32_t kMaxSizeClasses = 16;
inline constexpr std::uint32_t kCacheBlocks = 64;
inline constexpr std::uint32_t kCacheBatch = 32;

struct AllocatorStats {
	std::uint32_t chunks_used = 0;
	std::uint32_t chunk_count = 0;
	std::uint64_t blocks_live = 0;
	std::vector<std::uint64_t> per_class_counts; // live blocks per size class
	std::uint64_t large_live = 0;
};

// SLAB-style allocator over a fixed range of the shared segment. The range
// is split into fixed-size chunks; a chunk is either free, a slab of
// uniform blocks of one size class, or a single large allocation. Each
// core has a small cache of blocks per size class, refilled from and
// spilled back to a single "home" chunk. All metadata lives in the
// segment, so any attached process may free any block.
class ShmAllocator {
public:
	// Bytes needed at the start of a range for the allocator header.
	static std::size_t header_size() noexcept;

	// Smallest range that holds the metadata and one chunk.
	static std::size_t minimum_size(std::uint32_t cpu_count) noexcept;

	// Lays out the allocator over [begin, end) of the segment. `begin` must
	// be 64-byte aligned.
	static void initialize(SegmentView segment, shm_off_t begin, shm_off_t end, std::uint32_t cpu_count,
		bool debug);

	ShmAllocator() = default;
	ShmAllocator(SegmentView segment, shm_off_t header);

	// Offset of a 64-byte aligned block of at least `size` bytes. A
	// `cpu_hint` inside [0, cpu_count) routes through that core's cache.
	shm_off_t alloc(std::size_t size, int cpu_hint = -1);

	// Legal from any attached process. Debug mode reports DoubleFree.
	void free(shm_off_t block, int cpu_hint = -1);

	// Usable size of an allocated block.
	std::size_t block_size(shm_off_t block) const;

	AllocatorStats stats() const;

	std::uint32_t size_class_count() const noexcept;
	std::size_t size_class_bytes(std::uint32_t cls) const noexcept
	{
		return kMinBlock << cls;
	}
	std::size_t max_small_size() const noexcept;
	bool debug() const noexcept;

	// Range covered by chunks, for tests that check block placement.
	shm_off_t data_begin() const noexcept;
	shm_off_t data_end() const noexcept;

	struct Header;

private:
	struct ChunkInfo;
	struct CpuCache;

	ChunkInfo &chunk(std::uint32_t index) const noexcept;
	CpuCache &cache(std::uint32_t cpu) const noexcept;
	std::atomic<std::uint8_t> *block_states(std::uint32_t chunk_index) const noexcept;
	std::uint32_t class_for(std::size_t size) const noexcept;

	std::int32_t grab_free_chunk(std::uint32_t state, std::uint32_t cls);
	void release_chunk(std::uint32_t index);

	// Under the size-class lock.
	std::uint32_t take_blocks(std::uint32_t cls, shm_off_t *out, std::uint32_t want, std::int32_t &from_chunk);
	void return_block(std::uint32_t cls, std::uint32_t chunk_index, shm_off_t block);
	// Returns cached blocks of a chunk that is otherwise entirely free.
	void reclaim_cached(std::uint32_t cls, std::uint32_t chunk_index);

	void mark_allocated(std::uint32_t chunk_index, std::uint32_t cls, shm_off_t block);
	void mark_freed(std::uint32_t chunk_index, std::uint32_t cls, shm_off_t block);

	SegmentView _segment;
	Header *_header = nullptr;
};

} // namespace coexec
