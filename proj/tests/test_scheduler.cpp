#include <gtest/gtest.h>

#include <atomic>
#include <random>
#include <set>
#include <thread>

#include "coexec/coexec.hpp"
#include "support/reference_policy.hpp"
#include "support/sched_harness.hpp"

using namespace coexec;
using coexec::testing::BareScheduler;
using coexec::testing::ReferencePolicy;

namespace {

constexpr std::uint64_t kMs = 1'000'000;
constexpr std::uint64_t kQuantum = 20 * kMs;

} // namespace

TEST(Scheduler, QueueOrderIsPriorityThenFifo)
{
	BareScheduler s(1, 1, kQuantum, 64, 1);
	std::uint64_t a = s.submit(0, 1, Affinity::none());
	std::uint64_t b = s.submit(0, 5, Affinity::none());
	std::uint64_t c = s.submit(0, 1, Affinity::none());
	std::uint64_t d = s.submit(0, 5, Affinity::none());
	std::vector<std::uint64_t> got;
	for (int i = 0; i < 4; ++i)
		got.push_back(s.request(0, 0, 0));
	EXPECT_EQ(got, (std::vector<std::uint64_t>{b, d, a, c}));
	EXPECT_EQ(s.request(0, 0, 0), 0u);
}

TEST(Scheduler, RequesterKeepsCoreUntilQuantumExpires)
{
	BareScheduler s(1, 1, kQuantum, 64, 2);
	for (int i = 0; i < 4; ++i) {
		s.submit(0, 0, Affinity::none());
		s.submit(1, 0, Affinity::none());
	}
	// A starts the clock at t=0 and keeps the core within the quantum.
	EXPECT_EQ(s.owner_of(s.request(0, 0, 0)), 0);
	EXPECT_EQ(s.owner_of(s.request(0, 0, 10 * kMs)), 0);
	EXPECT_EQ(s.owner_of(s.request(0, 0, kQuantum - 1)), 0);
	// At the quantum boundary the other process wins and restarts the clock.
	EXPECT_EQ(s.owner_of(s.request(0, 0, kQuantum)), 1);
	EXPECT_EQ(s.owner_of(s.request(0, 1, kQuantum + 5 * kMs)), 1);
	EXPECT_EQ(s.owner_of(s.request(0, 1, 2 * kQuantum)), 0);
}

TEST(Scheduler, OtherProcessesByAppPriorityThenLeastRecentlyServed)
{
	BareScheduler s(1, 1, kQuantum, 64, 4);
	for (int p = 0; p < 4; ++p)
		for (int i = 0; i < 3; ++i)
			s.submit(p, 0, Affinity::none());
	s.set_app_priority(3, 2);

	// Requester 0 with an expired (absent) clock for another process: rule 3.
	EXPECT_EQ(s.owner_of(s.request(0, 0, 0)), 0); // no clock yet: requester's quantum is fresh
	EXPECT_EQ(s.owner_of(s.request(0, 0, kQuantum)), 3) << "highest app priority first";
	EXPECT_EQ(s.owner_of(s.request(0, 3, 2 * kQuantum)), 1) << "then the never-served process with the oldest task";
	EXPECT_EQ(s.owner_of(s.request(0, 1, 3 * kQuantum)), 3);
	EXPECT_EQ(s.owner_of(s.request(0, 3, 4 * kQuantum)), 2);
	EXPECT_EQ(s.owner_of(s.request(0, 2, 5 * kQuantum)), 3);
	// Process 3 is empty now; 0 was served before 1.
	EXPECT_EQ(s.owner_of(s.request(0, 3, 6 * kQuantum)), 0);
	EXPECT_EQ(s.owner_of(s.request(0, 0, 7 * kQuantum)), 1);
}

TEST(Scheduler, RequesterIsLastResortAfterQuantum)
{
	BareScheduler s(1, 1, kQuantum, 64, 2);
	for (int i = 0; i < 3; ++i)
		s.submit(0, 0, Affinity::none());
	EXPECT_EQ(s.owner_of(s.request(0, 0, 0)), 0);
	EXPECT_EQ(s.owner_of(s.request(0, 0, 10 * kQuantum)), 0);
	EXPECT_EQ(s.owner_of(s.request(0, 1, 11 * kQuantum)), 0) << "other requester, nothing of its own";
}

TEST(Scheduler, EmptyMarksIdleAndSubmitClaimsIt)
{
	BareScheduler s(2, 1, kQuantum, 64, 1);
	Scheduler &sched = s.sched();
	EXPECT_EQ(s.request(1, 0, 0), 0u);
	EXPECT_TRUE(sched.exclusive([&] { return sched.is_idle_locked(1); }));
	EXPECT_EQ(CpuState(s.region().cpu(1).state.load()), CpuState::Idle);
	EXPECT_FALSE(sched.exclusive([&] { return sched.is_idle_locked(0); }));

	shm_off_t t = s.make_task(0, 0, Affinity::none());
	EXPECT_EQ(sched.submit(t), 1);
	EXPECT_EQ(CpuState(s.region().cpu(1).state.load()), CpuState::Running);
	// Only one core is claimed per submission.
	shm_off_t u = s.make_task(0, 0, Affinity::none());
	EXPECT_EQ(sched.submit(u), -1);
}

TEST(Scheduler, SubmitClaimsCoreMatchingAffinity)
{
	BareScheduler s(4, 2, kQuantum, 64, 1);
	Scheduler &sched = s.sched();
	for (std::uint32_t c = 0; c < 4; ++c)
		EXPECT_EQ(s.request(c, 0, 0), 0u);
	EXPECT_EQ(sched.submit(s.make_task(0, 0, Affinity::core(2, AffinityMode::Strict))), 2);
	EXPECT_EQ(sched.submit(s.make_task(0, 0, Affinity::core(2, AffinityMode::Strict))), -1);
	EXPECT_EQ(sched.submit(s.make_task(0, 0, Affinity::numa(1, AffinityMode::Strict))), 3);
	EXPECT_EQ(sched.submit(s.make_task(0, 0, Affinity::numa(1, AffinityMode::BestEffort))), 0);
}

TEST(Scheduler, StrictAffinityNeverRunsElsewhere)
{
	BareScheduler s(4, 2, kQuantum, 64, 2);
	std::uint64_t core3 = s.submit(0, 9, Affinity::core(3, AffinityMode::Strict));
	std::uint64_t numa0 = s.submit(1, 9, Affinity::numa(0, AffinityMode::Strict));
	for (std::uint64_t now = 0; now < 50; ++now) {
		EXPECT_EQ(s.request(2, 0, now * kQuantum), 0u);
		EXPECT_EQ(s.request(2, 1, now * kQuantum), 0u);
	}
	EXPECT_EQ(s.request(1, 1, 0), numa0);
	EXPECT_EQ(s.request(3, 0, 0), core3);
}

TEST(Scheduler, BestEffortFallsBackWhenNothingElseFits)
{
	BareScheduler s(2, 1, kQuantum, 64, 1);
	std::uint64_t t = s.submit(0, 0, Affinity::core(1, AffinityMode::BestEffort));
	EXPECT_EQ(s.request(0, 0, 0), t);
}

TEST(Scheduler, BestEffortAgesAfterSkipLimit)
{
	constexpr std::uint32_t kLimit = 3;
	BareScheduler s(2, 1, kQuantum, kLimit, 2);
	std::uint64_t be = s.submit(0, 0, Affinity::core(1, AffinityMode::BestEffort));
	for (int i = 0; i < 10; ++i)
		s.submit(1, 0, Affinity::none());
	// Process 0 requests core 0: process 1's general work comes first...
	for (std::uint32_t i = 0; i < kLimit; ++i)
		EXPECT_EQ(s.owner_of(s.request(0, 0, 0)), 1) << i;
	// ...until the passed-over task ages into the preferred tier.
	EXPECT_EQ(s.request(0, 0, 0), be);
}

TEST(Scheduler, LeavingProcessIsNotScheduled)
{
	BareScheduler s(1, 1, kQuantum, 64, 2);
	s.submit(0, 0, Affinity::none());
	std::uint64_t keep = s.submit(1, 0, Affinity::none());
	s.region().process(s.slot(0)).state.store(std::uint32_t(ProcessState::Leaving));
	EXPECT_EQ(s.request(0, 0, 0), keep);
	EXPECT_EQ(s.request(0, 0, 0), 0u);
}

TEST(Scheduler, AffinityAndPriorityUpdates)
{
	BareScheduler s(2, 1, kQuantum, 64, 1);
	Scheduler &sched = s.sched();
	shm_off_t a = s.make_task(0, 0, Affinity::none());
	shm_off_t b = s.make_task(0, 0, Affinity::none());
	sched.submit(a);
	sched.submit(b);
	sched.set_task_priority(b, 3);
	EXPECT_THROW(sched.set_task_affinity(a, Affinity::core(2)), Error);
	EXPECT_THROW(sched.set_task_affinity(a, Affinity::numa(1)), Error);
	sched.set_task_affinity(a, Affinity::core(1, AffinityMode::Strict));
	EXPECT_EQ(s.request(0, 0, 0), s.desc(b).id);
	EXPECT_EQ(s.request(0, 0, 0), 0u);
	EXPECT_EQ(s.request(1, 0, 0), s.desc(a).id);
}

TEST(Scheduler, PurgeRemovesEveryQueuedTask)
{
	BareScheduler s(4, 2, kQuantum, 64, 2);
	std::set<shm_off_t> mine;
	for (int i = 0; i < 40; ++i) {
		Affinity a = i % 4 == 0 ? Affinity::none()
			: i % 4 == 1        ? Affinity::core(std::uint32_t(i % 4), AffinityMode::Strict)
			: i % 4 == 2        ? Affinity::numa(1, AffinityMode::BestEffort)
								: Affinity::core(3, AffinityMode::BestEffort);
		shm_off_t t = s.make_task(0, i % 3, a);
		s.sched().submit(t);
		mine.insert(t);
	}
	std::uint64_t other = s.submit(1, 0, Affinity::none());
	std::vector<shm_off_t> removed;
	Scheduler &sched = s.sched();
	sched.exclusive([&] { sched.purge_locked(s.slot(0), removed); });
	EXPECT_EQ(std::set<shm_off_t>(removed.begin(), removed.end()), mine);
	EXPECT_EQ(sched.exclusive([&] { return sched.ready_locked(s.slot(0)); }), 0u);
	EXPECT_EQ(s.request(0, 0, 0), other);
}

// Random submit/request sequences against the naive reference model.
class SchedulerModel : public ::testing::TestWithParam<std::tuple<std::uint32_t, std::uint32_t>> {};

TEST_P(SchedulerModel, MatchesReferencePolicy)
{
	const auto [cores, numa] = GetParam();
	constexpr std::uint32_t kLimit = 4;
	for (std::uint64_t seed = 1; seed <= 40; ++seed) {
		std::mt19937_64 rng(seed * 7919 + cores);
		const int procs = 1 + int(rng() % 4);
		BareScheduler real(cores, numa, kQuantum, kLimit, std::uint32_t(procs));
		ReferencePolicy ref(cores, numa, kQuantum, kLimit);
		for (int p = 0; p < procs; ++p) {
			int prio = int(rng() % 3) == 0 ? int(rng() % 3) : 0;
			real.set_app_priority(p, prio);
			ref.set_app_priority(p, prio);
		}

		auto random_affinity = [&] {
			AffinityMode mode = rng() % 2 ? AffinityMode::Strict : AffinityMode::BestEffort;
			switch (rng() % 4) {
				case 0: return Affinity::core(std::uint32_t(rng() % cores), mode);
				case 1: return Affinity::numa(std::uint32_t(rng() % numa), mode);
				default: return Affinity::none();
			}
		};

		std::vector<int> last_owner(cores, 0);
		std::uint64_t now = 0;
		for (int step = 0; step < 600; ++step) {
			if (rng() % 100 < 45) {
				int p = int(rng() % std::uint64_t(procs));
				std::int32_t prio = std::int32_t(rng() % 4);
				Affinity a = random_affinity();
				std::uint64_t id = real.submit(p, prio, a);
				ref.submit(id, p, prio, a);
			} else {
				now += rng() % (kQuantum / 2);
				auto cpu = std::uint32_t(rng() % cores);
				int requester = rng() % 2 ? last_owner[cpu] : int(rng() % std::uint64_t(procs));
				std::uint64_t got = real.request(cpu, requester, now);
				std::optional<std::uint64_t> want = ref.request(cpu, requester, now);
				ASSERT_EQ(got, want.value_or(0)) << "seed " << seed << " step " << step << " cpu " << cpu;
				if (got != 0)
					last_owner[cpu] = real.owner_of(got);
			}
		}
	}
}

INSTANTIATE_TEST_SUITE_P(Topologies, SchedulerModel,
	::testing::Values(std::make_tuple(1u, 1u), std::make_tuple(4u, 2u), std::make_tuple(8u, 4u)));

TEST(Scheduler, ConcurrentRequestersDispatchEachTaskOnce)
{
	constexpr std::uint32_t kCores = 4;
	constexpr int kTasks = 20000;
	BareScheduler s(kCores, 1, kQuantum, 64, 2);
	std::vector<shm_off_t> tasks;
	for (int i = 0; i < kTasks; ++i)
		tasks.push_back(s.make_task(i % 2, i % 5, Affinity::none()));

	std::atomic<int> submitted{0};
	std::vector<std::vector<std::uint64_t>> seen(kCores);
	std::thread producer([&] {
		for (auto t : tasks) {
			s.sched().submit(t);
			submitted.fetch_add(1);
		}
	});
	std::vector<std::thread> consumers;
	std::atomic<int> taken{0};
	for (std::uint32_t c = 0; c < kCores; ++c) {
		consumers.emplace_back([&, c] {
			while (taken.load() < kTasks) {
				std::uint64_t id = s.request(c, int(c % 2), sys::now_ns());
				if (id != 0) {
					seen[c].push_back(id);
					taken.fetch_add(1);
				}
			}
		});
	}
	producer.join();
	for (auto &t : consumers)
		t.join();

	std::set<std::uint64_t> ids;
	std::size_t total = 0;
	for (auto &v : seen) {
		total += v.size();
		ids.insert(v.begin(), v.end());
	}
	EXPECT_EQ(total, std::size_t(kTasks));
	EXPECT_EQ(ids.size(), std::size_t(kTasks));
	EXPECT_GT(s.sched().lock_stats().delegated + s.sched().lock_stats().exclusive, 0u);
}
