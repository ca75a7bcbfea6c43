#include "coexec/shmalloc.hpp"

#include <bit>
#include <cstring>
#include <string>

#include "coexec/error.hpp"

namespace coexec {

namespace {

constexpr std::uint32_t kChunkShift = std::countr_zero(kChunkSize);
constexpr std::uint32_t kMaxBlocksPerChunk = kChunkSize / kMinBlock;
constexpr std::uint8_t kCanary = 0xdd;

enum ChunkState : std::uint32_t {
	ChunkFree = 0,
	ChunkSlab = 1,
	ChunkLarge = 2,
};

enum BlockState : std::uint8_t {
	BlockFresh = 0,
	BlockAllocated = 1,
	BlockFreed = 2,
};

constexpr shm_off_t align_up(shm_off_t v, shm_off_t a)
{
	return (v + a - 1) / a * a;
}

} // namespace

struct ShmAllocator::ChunkInfo {
	std::atomic<std::uint32_t> state;
	std::uint32_t size_class;
	std::uint32_t capacity;
	std::atomic<std::uint32_t> free_count;
	// Blocks of this chunk sitting in CPU caches.
	std::atomic<std::uint32_t> cached;
	std::uint32_t carved;
	std::int32_t prev;
	std::int32_t next;
	std::uint32_t in_partial;
	shm_off_t free_head;
};

struct ShmAllocator::CpuCache {
	RobustSpinLock lock;
	std::int32_t home[kMaxSizeClasses];
	std::uint32_t count[kMaxSizeClasses];
	shm_off_t blocks[kMaxSizeClasses][kCacheBlocks];
};

struct ClassState {
	RobustSpinLock lock;
	std::int32_t partial_head;
	// Slab chunks held by the class; the last one is kept even when empty.
	std::atomic<std::uint32_t> slabs;
	std::atomic<std::uint64_t> live;
};

struct ShmAllocator::Header {
	shm_off_t data_off;
	shm_off_t chunks_off;
	shm_off_t states_off;
	shm_off_t caches_off;
	std::uint32_t chunk_count;
	std::uint32_t class_count;
	std::uint32_t cpu_count;
	std::uint32_t debug;

	RobustSpinLock chunk_lock;
	std::uint32_t free_hint;
	std::atomic<std::uint32_t> chunks_used;
	std::atomic<std::uint64_t> live;
	std::atomic<std::uint64_t> large_live;
	ClassState classes[kMaxSizeClasses];
};

std::size_t ShmAllocator::header_size() noexcept
{
	return align_up(sizeof(Header), kCacheLine);
}

std::size_t ShmAllocator::minimum_size(std::uint32_t cpu_count) noexcept
{
	constexpr std::size_t per_chunk = kChunkSize + sizeof(ChunkInfo) + kMaxBlocksPerChunk;
	return align_up(header_size(), kCacheLine) + align_up(sizeof(CpuCache) * cpu_count, kCacheLine) + 2 * 4096 +
		per_chunk + 2 * kCacheLine + 4096;
}

void ShmAllocator::initialize(SegmentView segment, shm_off_t begin, shm_off_t end, std::uint32_t cpu_count,
	bool debug)
{
	shm_off_t cursor = begin + header_size();
	shm_off_t caches_off = align_up(cursor, kCacheLine);
	cursor = caches_off + align_up(sizeof(CpuCache) * cpu_count, kCacheLine);

	// Each chunk costs its data, one ChunkInfo and one state byte per
	// minimum-size block.
	constexpr std::size_t per_chunk = kChunkSize + sizeof(ChunkInfo) + kMaxBlocksPerChunk;
	constexpr std::size_t slack = 2 * 4096;
	if (end <= cursor + slack + per_chunk)
		throw Error(Errc::ConfigMismatch, "segment too small for the allocator arena");
	std::uint32_t chunk_count = std::uint32_t((end - cursor - slack) / per_chunk);

	shm_off_t chunks_off = align_up(cursor, kCacheLine);
	shm_off_t states_off = align_up(chunks_off + sizeof(ChunkInfo) * chunk_count, kCacheLine);
	shm_off_t data_off = align_up(states_off + std::size_t(kMaxBlocksPerChunk) * chunk_count, 4096);
	if (data_off + shm_off_t(chunk_count) * kChunkSize > end)
		--chunk_count;

	auto *h = segment.at<Header>(begin);
	h->data_off = data_off;
	h->chunks_off = chunks_off;
	h->states_off = states_off;
	h->caches_off = caches_off;
	h->chunk_count = chunk_count;
	h->class_count = std::uint32_t(std::countr_zero(kChunkSize / 4) - std::countr_zero(kMinBlock) + 1);
	h->cpu_count = cpu_count;
	h->debug = debug ? 1 : 0;
	h->free_hint = 0;
	h->chunks_used.store(0);
	h->live.store(0);
	h->large_live.store(0);
	for (auto &c : h->classes) {
		c.partial_head = -1;
		c.slabs.store(0);
		c.live.store(0);
	}

	auto *chunks = segment.at<ChunkInfo>(chunks_off);
	for (std::uint32_t i = 0; i < chunk_count; ++i) {
		chunks[i].state.store(ChunkFree);
		chunks[i].prev = chunks[i].next = -1;
		chunks[i].in_partial = 0;
		chunks[i].free_head = kNullOff;
	}
	auto *caches = segment.at<CpuCache>(caches_off);
	for (std::uint32_t c = 0; c < cpu_count; ++c) {
		for (std::uint32_t k = 0; k < kMaxSizeClasses; ++k) {
			caches[c].home[k] = -1;
			caches[c].count[k] = 0;
		}
	}
}

ShmAllocator::ShmAllocator(SegmentView segment, shm_off_t header) :
	_segment(segment),
	_header(segment.at<Header>(header))
{
}

ShmAllocator::ChunkInfo &ShmAllocator::chunk(std::uint32_t index) const noexcept
{
	return _segment.at<ChunkInfo>(_header->chunks_off)[index];
}

ShmAllocator::CpuCache &ShmAllocator::cache(std::uint32_t cpu) const noexcept
{
	return _segment.at<CpuCache>(_header->caches_off)[cpu];
}

std::atomic<std::uint8_t> *ShmAllocator::block_states(std::uint32_t chunk_index) const noexcept
{
	static_assert(sizeof(std::atomic<std::uint8_t>) == 1);
	return _segment.at<std::atomic<std::uint8_t>>(_header->states_off +
		shm_off_t(chunk_index) * kMaxBlocksPerChunk);
}

std::uint32_t ShmAllocator::size_class_count() const noexcept
{
	return _header->class_count;
}

std::size_t ShmAllocator::max_small_size() const noexcept
{
	return size_class_bytes(_header->class_count - 1);
}

bool ShmAllocator::debug() const noexcept
{
	return _header->debug != 0;
}

shm_off_t ShmAllocator::data_begin() const noexcept
{
	return _header->data_off;
}

shm_off_t ShmAllocator::data_end() const noexcept
{
	return _header->data_off + shm_off_t(_header->chunk_count) * kChunkSize;
}

std::uint32_t ShmAllocator::class_for(std::size_t size) const noexcept
{
	if (size <= kMinBlock)
		return 0;
	return std::uint32_t(std::bit_width(size - 1) - std::countr_zero(kMinBlock));
}

std::int32_t ShmAllocator::grab_free_chunk(std::uint32_t state, std::uint32_t cls)
{
	SpinGuard guard(_header->chunk_lock);
	const std::uint32_t n = _header->chunk_count;
	for (std::uint32_t k = 0; k < n; ++k) {
		std::uint32_t i = (_header->free_hint + k) % n;
		ChunkInfo &c = chunk(i);
		if (c.state.load(std::memory_order_relaxed) != ChunkFree)
			continue;
		c.size_class = cls;
		c.capacity = state == ChunkSlab ? std::uint32_t(kChunkSize / size_class_bytes(cls)) : 1;
		c.free_count = c.capacity;
		c.cached.store(0, std::memory_order_relaxed);
		c.carved = 0;
		c.free_head = kNullOff;
		c.prev = c.next = -1;
		c.in_partial = 0;
		c.state.store(state, std::memory_order_release);
		_header->free_hint = (i + 1) % n;
		_header->chunks_used.fetch_add(1, std::memory_order_relaxed);
		return std::int32_t(i);
	}
	return -1;
}

void ShmAllocator::release_chunk(std::uint32_t index)
{
	SpinGuard guard(_header->chunk_lock);
	ChunkInfo &c = chunk(index);
	if (_header->debug)
		std::memset(static_cast<void *>(block_states(index)), 0, kMaxBlocksPerChunk);
	c.state.store(ChunkFree, std::memory_order_release);
	if (index < _header->free_hint)
		_header->free_hint = index;
	_header->chunks_used.fetch_sub(1, std::memory_order_relaxed);
}

std::uint32_t ShmAllocator::take_blocks(std::uint32_t cls, shm_off_t *out, std::uint32_t want,
	std::int32_t &from_chunk)
{
	ClassState &cs = _header->classes[cls];
	std::int32_t idx = cs.partial_head;
	if (idx < 0) {
		idx = grab_free_chunk(ChunkSlab, cls);
		if (idx < 0)
			return 0;
		ChunkInfo &fresh = chunk(std::uint32_t(idx));
		fresh.next = -1;
		fresh.prev = -1;
		fresh.in_partial = 1;
		cs.partial_head = idx;
		cs.slabs.fetch_add(1, std::memory_order_relaxed);
	}
	ChunkInfo &c = chunk(std::uint32_t(idx));
	const shm_off_t base = _header->data_off + (shm_off_t(idx) << kChunkShift);
	const std::size_t bsize = size_class_bytes(cls);

	std::uint32_t got = 0;
	while (got < want && c.free_count > 0) {
		shm_off_t b;
		if (c.free_head != kNullOff) {
			b = c.free_head;
			c.free_head = *_segment.at<shm_off_t>(b);
		} else {
			b = base + shm_off_t(c.carved) * bsize;
			++c.carved;
		}
		--c.free_count;
		out[got++] = b;
	}
	if (c.free_count == 0) {
		// Full chunks leave the partial list until a block comes back.
		cs.partial_head = c.next;
		if (c.next >= 0)
			chunk(std::uint32_t(c.next)).prev = -1;
		c.next = c.prev = -1;
		c.in_partial = 0;
	}
	from_chunk = idx;
	return got;
}

void ShmAllocator::return_block(std::uint32_t cls, std::uint32_t index, shm_off_t block)
{
	ClassState &cs = _header->classes[cls];
	ChunkInfo &c = chunk(index);
	*_segment.at<shm_off_t>(block) = c.free_head;
	c.free_head = block;
	++c.free_count;

	if (c.free_count == c.capacity && cs.slabs.load(std::memory_order_relaxed) > 1) {
		if (c.in_partial) {
			if (c.prev >= 0)
				chunk(std::uint32_t(c.prev)).next = c.next;
			else
				cs.partial_head = c.next;
			if (c.next >= 0)
				chunk(std::uint32_t(c.next)).prev = c.prev;
		}
		c.in_partial = 0;
		c.prev = c.next = -1;
		cs.slabs.fetch_sub(1, std::memory_order_relaxed);
		release_chunk(index);
		return;
	}
	if (!c.in_partial) {
		c.prev = -1;
		c.next = cs.partial_head;
		if (cs.partial_head >= 0)
			chunk(std::uint32_t(cs.partial_head)).prev = std::int32_t(index);
		cs.partial_head = std::int32_t(index);
		c.in_partial = 1;
	}
}

void ShmAllocator::mark_allocated(std::uint32_t index, std::uint32_t cls, shm_off_t block)
{
	if (!_header->debug)
		return;
	const shm_off_t base = _header->data_off + (shm_off_t(index) << kChunkShift);
	const std::size_t bsize = size_class_bytes(cls);
	auto &st = block_states(index)[(block - base) / bsize];
	std::uint8_t prev = st.load(std::memory_order_acquire);
	if (prev == BlockFreed) {
		const auto *p = _segment.at<std::uint8_t>(block);
		for (std::size_t i = sizeof(shm_off_t); i < bsize; ++i) {
			if (p[i] != kCanary)
				throw Error(Errc::Corruption, "write after free detected in block at offset " + std::to_string(block));
		}
	}
	if (prev == BlockAllocated || !st.compare_exchange_strong(prev, BlockAllocated))
		throw Error(Errc::Corruption, "block handed out twice at offset " + std::to_string(block));
}

void ShmAllocator::mark_freed(std::uint32_t index, std::uint32_t cls, shm_off_t block)
{
	if (!_header->debug)
		return;
	const shm_off_t base = _header->data_off + (shm_off_t(index) << kChunkShift);
	const std::size_t bsize = size_class_bytes(cls);
	auto &st = block_states(index)[(block - base) / bsize];
	std::uint8_t expected = BlockAllocated;
	if (!st.compare_exchange_strong(expected, BlockFreed))
		throw Error(Errc::DoubleFree, "block at offset " + std::to_string(block) + " is not allocated");
	std::memset(_segment.at<std::uint8_t>(block) + sizeof(shm_off_t), kCanary, bsize - sizeof(shm_off_t));
}

shm_off_t ShmAllocator::alloc(std::size_t size, int cpu_hint)
{
	if (size == 0)
		size = 1;
	if (size > kChunkSize)
		throw Error(Errc::OutOfSharedMemory, "allocation of " + std::to_string(size) + " bytes exceeds chunk size");

	if (size > max_small_size()) {
		std::int32_t idx = grab_free_chunk(ChunkLarge, 0);
		if (idx < 0)
			throw Error(Errc::OutOfSharedMemory, "no free chunk for a large allocation");
		chunk(std::uint32_t(idx)).free_count = 0;
		_header->live.fetch_add(1, std::memory_order_relaxed);
		_header->large_live.fetch_add(1, std::memory_order_relaxed);
		return _header->data_off + (shm_off_t(idx) << kChunkShift);
	}

	const std::uint32_t cls = class_for(size);
	shm_off_t block = kNullOff;

	if (cpu_hint >= 0 && std::uint32_t(cpu_hint) < _header->cpu_count) {
		CpuCache &cc = cache(std::uint32_t(cpu_hint));
		SpinGuard cache_guard(cc.lock);
		if (cc.count[cls] == 0) {
			std::int32_t from = -1;
			std::uint32_t got;
			{
				SpinGuard class_guard(_header->classes[cls].lock);
				got = take_blocks(cls, cc.blocks[cls], kCacheBatch, from);
			}
			if (got == 0)
				throw Error(Errc::OutOfSharedMemory, "no chunk left for size class " + std::to_string(cls));
			// Pop from the back: keep ascending order for locality.
			for (std::uint32_t i = 0; i < got / 2; ++i)
				std::swap(cc.blocks[cls][i], cc.blocks[cls][got - 1 - i]);
			chunk(std::uint32_t(from)).cached.fetch_add(got, std::memory_order_relaxed);
			cc.count[cls] = got;
			cc.home[cls] = from;
		}
		block = cc.blocks[cls][--cc.count[cls]];
		chunk(std::uint32_t(cc.home[cls])).cached.fetch_sub(1, std::memory_order_relaxed);
	} else {
		std::int32_t from = -1;
		SpinGuard class_guard(_header->classes[cls].lock);
		if (take_blocks(cls, &block, 1, from) == 0)
			throw Error(Errc::OutOfSharedMemory, "no chunk left for size class " + std::to_string(cls));
	}

	mark_allocated(std::uint32_t((block - _header->data_off) >> kChunkShift), cls, block);
	_header->live.fetch_add(1, std::memory_order_relaxed);
	_header->classes[cls].live.fetch_add(1, std::memory_order_relaxed);
	return block;
}

void ShmAllocator::free(shm_off_t block, int cpu_hint)
{
	if (block < _header->data_off || block >= data_end() || block % kMinBlock != 0)
		throw Error(Errc::InvalidArgument, "offset " + std::to_string(block) + " is not an allocator block");

	const std::uint32_t index = std::uint32_t((block - _header->data_off) >> kChunkShift);
	ChunkInfo &c = chunk(index);
	const std::uint32_t state = c.state.load(std::memory_order_acquire);

	if (state == ChunkLarge) {
		const shm_off_t base = _header->data_off + (shm_off_t(index) << kChunkShift);
		if (block != base)
			throw Error(Errc::InvalidArgument, "offset inside a large block");
		{
			SpinGuard guard(_header->chunk_lock);
			std::uint32_t expected = ChunkLarge;
			if (!c.state.compare_exchange_strong(expected, ChunkFree)) {
				if (_header->debug)
					throw Error(Errc::DoubleFree, "large block at offset " + std::to_string(block));
				throw Error(Errc::InvalidArgument, "offset " + std::to_string(block) + " lies in a free chunk");
			}
			if (index < _header->free_hint)
				_header->free_hint = index;
			_header->chunks_used.fetch_sub(1, std::memory_order_relaxed);
		}
		_header->live.fetch_sub(1, std::memory_order_relaxed);
		_header->large_live.fetch_sub(1, std::memory_order_relaxed);
		return;
	}
	if (state != ChunkSlab) {
		if (_header->debug)
			throw Error(Errc::DoubleFree, "block at offset " + std::to_string(block) + " lies in a free chunk");
		throw Error(Errc::InvalidArgument, "offset " + std::to_string(block) + " lies in a free chunk");
	}

	const std::uint32_t cls = c.size_class;
	mark_freed(index, cls, block);
	_header->live.fetch_sub(1, std::memory_order_relaxed);
	_header->classes[cls].live.fetch_sub(1, std::memory_order_relaxed);

	bool cached = false;
	if (cpu_hint >= 0 && std::uint32_t(cpu_hint) < _header->cpu_count) {
		CpuCache &cc = cache(std::uint32_t(cpu_hint));
		SpinGuard cache_guard(cc.lock);
		if (cc.home[cls] == std::int32_t(index)) {
			if (cc.count[cls] == kCacheBlocks) {
				// Spill the oldest half back to the chunk.
				SpinGuard class_guard(_header->classes[cls].lock);
				c.cached.fetch_sub(kCacheBatch, std::memory_order_relaxed);
				for (std::uint32_t i = 0; i < kCacheBatch; ++i)
					return_block(cls, index, cc.blocks[cls][i]);
				std::memmove(cc.blocks[cls], cc.blocks[cls] + kCacheBatch,
					sizeof(shm_off_t) * (kCacheBlocks - kCacheBatch));
				cc.count[cls] -= kCacheBatch;
			}
			cc.blocks[cls][cc.count[cls]++] = block;
			c.cached.fetch_add(1, std::memory_order_relaxed);
			cached = true;
		}
	}
	if (!cached) {
		SpinGuard class_guard(_header->classes[cls].lock);
		return_block(cls, index, block);
	}
	reclaim_cached(cls, index);
}

void ShmAllocator::reclaim_cached(std::uint32_t cls, std::uint32_t index)
{
	// Only chunks whose every block is free or cached, and never the
	// class's last slab. The checks race with other threads; draining a
	// cache is correct at any time, so a stale answer only costs work.
	ChunkInfo &c = chunk(index);
	std::uint32_t cached = c.cached.load(std::memory_order_relaxed);
	if (cached == 0 || c.free_count.load(std::memory_order_relaxed) + cached != c.capacity)
		return;
	if (_header->classes[cls].slabs.load(std::memory_order_relaxed) <= 1)
		return;
	for (std::uint32_t cpu = 0; cpu < _header->cpu_count; ++cpu) {
		CpuCache &cc = cache(cpu);
		SpinGuard cache_guard(cc.lock);
		if (cc.home[cls] != std::int32_t(index) || cc.count[cls] == 0)
			continue;
		SpinGuard class_guard(_header->classes[cls].lock);
		c.cached.fetch_sub(cc.count[cls], std::memory_order_relaxed);
		for (std::uint32_t i = 0; i < cc.count[cls]; ++i)
			return_block(cls, index, cc.blocks[cls][i]);
		cc.count[cls] = 0;
		cc.home[cls] = -1;
	}
}

std::size_t ShmAllocator::block_size(shm_off_t block) const
{
	const std::uint32_t index = std::uint32_t((block - _header->data_off) >> kChunkShift);
	const ChunkInfo &c = chunk(index);
	if (c.state.load(std::memory_order_acquire) == ChunkLarge)
		return kChunkSize;
	return size_class_bytes(c.size_class);
}

AllocatorStats ShmAllocator::stats() const
{
	AllocatorStats s;
	s.chunk_count = _header->chunk_count;
	s.chunks_used = _header->chunks_used.load(std::memory_order_relaxed);
	s.blocks_live = _header->live.load(std::memory_order_relaxed);
	s.large_live = _header->large_live.load(std::memory_order_relaxed);
	s.per_class_counts.resize(_header->class_count);
	for (std::uint32_t k = 0; k < _header->class_count; ++k)
		s.per_class_counts[k] = _header->classes[k].live.load(std::memory_order_relaxed);
	return s;
}

} // namespace coexec
