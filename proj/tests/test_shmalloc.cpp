#include <gtest/gtest.h>

#include <atomic>
#include <set>
#include <thread>

#include "coexec/coexec.hpp"
#include "support/alloc_fuzz.hpp"
#include "support/test_util.hpp"

using namespace coexec;
using coexec::testing::SegmentCleanup;
using coexec::testing::unique_config;

namespace {

RegionConfig alloc_config(bool debug, std::size_t size = std::size_t(64) << 20)
{
	RegionConfig cfg = unique_config(8, std::chrono::milliseconds(20), size);
	cfg.allocator_debug = debug;
	return cfg;
}

Errc code_of(const std::function<void()> &fn)
{
	try {
		fn();
	} catch (const Error &e) {
		return e.code();
	}
	ADD_FAILURE() << "no error raised";
	return Errc::InvalidArgument;
}

} // namespace

TEST(ShmAlloc, TwoSmallAllocsAreDisjoint)
{
	auto cfg = alloc_config(false);
	SegmentCleanup cleanup(cfg);
	Region r = Region::open(cfg);
	ShmAllocator a = r.allocator();
	shm_off_t x = a.alloc(1);
	shm_off_t y = a.alloc(1);
	EXPECT_NE(x, y);
	EXPECT_TRUE(x + a.block_size(x) <= y || y + a.block_size(y) <= x);
	EXPECT_EQ(x % 64, 0u);
	EXPECT_EQ(y % 64, 0u);
}

TEST(ShmAlloc, LiveCountTracksAllocsMinusFrees)
{
	auto cfg = alloc_config(false);
	SegmentCleanup cleanup(cfg);
	Region r = Region::open(cfg);
	ShmAllocator a = r.allocator();
	auto base = a.stats().blocks_live;
	shm_off_t x = a.alloc(10);
	a.alloc(100);
	a.alloc(1000);
	a.free(x);
	EXPECT_EQ(a.stats().blocks_live, base + 2);
}

TEST(ShmAlloc, WholeSegmentRequestIsOutOfSharedMemory)
{
	auto cfg = alloc_config(false);
	SegmentCleanup cleanup(cfg);
	Region r = Region::open(cfg);
	EXPECT_EQ(code_of([&] { r.allocator().alloc(cfg.segment_size); }), Errc::OutOfSharedMemory);
}

TEST(ShmAlloc, ExhaustionIsOutOfSharedMemoryAndRecovers)
{
	auto cfg = alloc_config(false, Region::minimum_size(8) + 4 * kChunkSize);
	SegmentCleanup cleanup(cfg);
	Region r = Region::open(cfg);
	ShmAllocator a = r.allocator();
	std::vector<shm_off_t> blocks;
	try {
		while (true)
			blocks.push_back(a.alloc(kChunkSize / 2 + 1));
	} catch (const Error &e) {
		EXPECT_EQ(e.code(), Errc::OutOfSharedMemory);
	}
	EXPECT_EQ(blocks.size(), a.stats().chunk_count);
	for (auto b : blocks)
		a.free(b);
	EXPECT_EQ(a.stats().chunks_used, 0u);
	EXPECT_NO_THROW(a.free(a.alloc(100)));
}

TEST(ShmAlloc, BlocksStayInsideOneUniformChunk)
{
	auto cfg = alloc_config(false);
	SegmentCleanup cleanup(cfg);
	Region r = Region::open(cfg);
	ShmAllocator a = r.allocator();
	for (std::uint32_t cls = 0; cls < a.size_class_count(); ++cls) {
		std::size_t bytes = a.size_class_bytes(cls);
		for (std::size_t req : {bytes / 2 + 1, bytes}) {
			for (int i = 0; i < 20; ++i) {
				shm_off_t b = a.alloc(req, i % 8);
				EXPECT_EQ(a.block_size(b), bytes);
				std::size_t rel = b - a.data_begin();
				EXPECT_EQ(rel / kChunkSize, (rel + bytes - 1) / kChunkSize) << "class " << cls;
				EXPECT_EQ(rel % kChunkSize % bytes, 0u) << "uniform carving";
				EXPECT_LE(b + bytes, a.data_end());
			}
		}
	}
	shm_off_t big = a.alloc(a.max_small_size() + 1);
	EXPECT_EQ(a.block_size(big), kChunkSize);
	EXPECT_EQ((big - a.data_begin()) % kChunkSize, 0u);
	EXPECT_EQ(a.stats().large_live, 1u);
	EXPECT_EQ(code_of([&] { a.alloc(kChunkSize + 1); }), Errc::OutOfSharedMemory);
}

TEST(ShmAlloc, SecondRoundOfHundredThousandReusesChunks)
{
	auto cfg = alloc_config(false);
	SegmentCleanup cleanup(cfg);
	Region r = Region::open(cfg);
	constexpr int kThreads = 8;
	constexpr int kPerThread = 100000 / kThreads;

	auto round = [&] {
		std::vector<std::vector<shm_off_t>> held(kThreads);
		std::vector<std::thread> ts;
		for (int t = 0; t < kThreads; ++t)
			ts.emplace_back([&, t] {
				ShmAllocator a = r.allocator();
				for (int i = 0; i < kPerThread; ++i)
					held[t].push_back(a.alloc(256, t));
			});
		for (auto &t : ts)
			t.join();
		std::set<shm_off_t> distinct;
		for (auto &v : held)
			distinct.insert(v.begin(), v.end());
		EXPECT_EQ(distinct.size(), std::size_t(kThreads * kPerThread));
		auto peak = r.allocator().stats().chunks_used;
		ts.clear();
		for (int t = 0; t < kThreads; ++t)
			ts.emplace_back([&, t] {
				ShmAllocator a = r.allocator();
				// Free another thread's blocks, through this thread's cache.
				for (shm_off_t b : held[(t + 1) % kThreads])
					a.free(b, t);
			});
		for (auto &t : ts)
			t.join();
		return peak;
	};

	auto first = round();
	EXPECT_EQ(r.allocator().stats().blocks_live, 0u);
	auto second = round();
	EXPECT_LE(second, first);
	EXPECT_EQ(r.allocator().stats().blocks_live, 0u);
}

TEST(ShmAlloc, FragmentationIsBounded)
{
	auto cfg = alloc_config(false);
	SegmentCleanup cleanup(cfg);
	Region r = Region::open(cfg);
	ShmAllocator a = r.allocator();
	for (std::size_t size : {64, 200, 1024, 9000, 70000, 200000}) {
		auto initial = a.stats().chunks_used;
		std::vector<shm_off_t> blocks;
		// Large blocks take a whole chunk each.
		const std::size_t footprint = size > a.max_small_size() ? kChunkSize : size;
		for (int i = 0; i < 3000 && blocks.size() * footprint < (std::size_t(24) << 20); ++i)
			blocks.push_back(a.alloc(size, i % 8));
		for (auto b : blocks)
			a.free(b, int(b % 8));
		EXPECT_LE(a.stats().chunks_used, initial + 1) << "size " << size;
	}
}

TEST(ShmAlloc, DebugModeReportsDoubleFree)
{
	auto cfg = alloc_config(true);
	SegmentCleanup cleanup(cfg);
	Region r = Region::open(cfg);
	ShmAllocator a = r.allocator();
	ASSERT_TRUE(a.debug());
	shm_off_t small = a.alloc(48, 0);
	a.free(small, 0);
	EXPECT_EQ(code_of([&] { a.free(small, 0); }), Errc::DoubleFree);
	EXPECT_EQ(code_of([&] { a.free(small, 3); }), Errc::DoubleFree);
	shm_off_t large = a.alloc(a.max_small_size() + 10);
	a.free(large);
	EXPECT_EQ(code_of([&] { a.free(large); }), Errc::DoubleFree);
	EXPECT_EQ(a.stats().blocks_live, 0u);
}

TEST(ShmAlloc, DebugModeCatchesWriteAfterFree)
{
	auto cfg = alloc_config(true);
	SegmentCleanup cleanup(cfg);
	Region r = Region::open(cfg);
	ShmAllocator a = r.allocator();
	shm_off_t b = a.alloc(128, 2);
	a.free(b, 2);
	*r.segment().at<std::uint64_t>(b + 8) = 0x1234;
	// The per-core cache hands the most recently freed block out first.
	EXPECT_EQ(code_of([&] { a.alloc(128, 2); }), Errc::Corruption);
}

TEST(ShmAlloc, InteriorOffsetIsRejected)
{
	auto cfg = alloc_config(false);
	SegmentCleanup cleanup(cfg);
	Region r = Region::open(cfg);
	ShmAllocator a = r.allocator();
	shm_off_t b = a.alloc(a.max_small_size() + 1);
	EXPECT_EQ(code_of([&] { a.free(b + 64); }), Errc::InvalidArgument);
	EXPECT_EQ(code_of([&] { a.free(8); }), Errc::InvalidArgument);
	a.free(b);
}

TEST(ShmAlloc, FreeByAnotherProcessThenReuse)
{
	auto cfg = alloc_config(true);
	SegmentCleanup cleanup(cfg);
	struct Shared {
		std::atomic<int> stage{0};
		shm_off_t blocks[64];
	};
	auto *sh = coexec::testing::shared_object<Shared>();
	Region r = Region::open(cfg);
	ShmAllocator a = r.allocator();
	for (int i = 0; i < 64; ++i) {
		sh->blocks[i] = a.alloc(512, 1);
		std::memset(r.segment().at<std::byte>(sh->blocks[i]), 0x40 + i, 512);
	}

	pid_t child = coexec::testing::fork_child([&] {
		Region mine = Region::open(cfg);
		ShmAllocator ca = mine.allocator();
		// Free every other block, then allocate the same class again.
		for (int i = 0; i < 64; i += 2)
			ca.free(sh->blocks[i], 5);
		std::set<shm_off_t> reused;
		for (int i = 0; i < 32; ++i)
			reused.insert(ca.alloc(512, 5));
		for (int i = 1; i < 64; i += 2)
			if (reused.count(sh->blocks[i]) != 0)
				return 1;
		return 0;
	});
	ASSERT_EQ(coexec::testing::wait_child(child), 0);
	for (int i = 1; i < 64; i += 2) {
		const auto *p = r.segment().at<std::uint8_t>(sh->blocks[i]);
		for (int j = 0; j < 512; ++j)
			ASSERT_EQ(p[j], 0x40 + i) << "block " << i;
	}
	EXPECT_EQ(a.stats().blocks_live, 64u);
}

TEST(ShmAlloc, MultiProcessFuzzHasNoOverlaps)
{
	auto cfg = alloc_config(true, std::size_t(128) << 20);
	SegmentCleanup cleanup(cfg);
	coexec::testing::AllocFuzzParams p;
	p.ops = 200'000;
	p.processes = 4;
	auto rep = coexec::testing::run_alloc_fuzz(cfg, p);
	EXPECT_EQ(rep.child_failures, 0);
	EXPECT_EQ(rep.overlaps, 0u);
	EXPECT_EQ(rep.unknown_frees, 0u);
	EXPECT_EQ(rep.canary_failures, 0u);
	EXPECT_GT(rep.double_free_attempts, 0u);
	EXPECT_EQ(rep.double_free_escapes, 0u);
	EXPECT_GT(rep.cross_process_frees, 0u);
	EXPECT_EQ(rep.live_by_log, rep.live_by_stats);
}

TEST(ShmAlloc, OverlapOracleDetectsInjectedFaults)
{
	using coexec::testing::FuzzRecord;
	std::vector<FuzzRecord> log = {
		{1, 0, 64, 1},
		{2, 64, 64, 1},
		{4, 256, 128, 1},
		{3, 0, 0, 0},
		{5, 0, 32, 1}, // reuse after free (seq 3): fine
	};
	auto clean = coexec::testing::replay_log(log);
	EXPECT_EQ(clean.overlaps, 0u);
	EXPECT_EQ(clean.unknown_frees, 0u);
	EXPECT_EQ(clean.live, 3u);

	log.push_back({6, 300, 8, 1});  // inside [256, 384)
	log.push_back({7, 96, 64, 1});  // straddles the end of [64, 128)
	log.push_back({8, 4096, 0, 0}); // never allocated
	auto bad = coexec::testing::replay_log(log);
	EXPECT_EQ(bad.overlaps, 2u);
	EXPECT_EQ(bad.unknown_frees, 1u);
}
