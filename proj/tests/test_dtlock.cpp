#include <gtest/gtest.h>

#include <atomic>
#include <csignal>
#include <thread>
#include <vector>

#include "coexec/dtlock.hpp"
#include "support/test_util.hpp"

using namespace coexec;
using coexec::testing::fork_child;
using coexec::testing::shared_object;
using coexec::testing::wait_child;

namespace {

constexpr std::size_t kLogCapacity = 1 << 20;

// Lock, protected counter and a log of served tickets, all in one
// anonymous shared mapping so forked children use the same lock.
struct Shared {
	DelegationTicketLock lock;
	std::uint64_t counter = 0;
	std::uint64_t log_size = 0;
	std::uint64_t log[kLogCapacity];
	std::atomic<int> go{0};
};

struct Server {
	Shared *sh;
	std::uint64_t operator()(std::uint64_t ticket, const DelegationRequest &req)
	{
		if (sh->log_size < kLogCapacity)
			sh->log[sh->log_size++] = ticket;
		sh->counter += req.words[0];
		return sh->counter;
	}
};

Shared *make_shared()
{
	Shared *sh = shared_object<Shared>();
	sh->lock.initialize();
	return sh;
}

// One thread's (or process's) share of the workload: alternating
// exclusive sections and delegated requests.
void hammer(Shared *sh, int iterations, std::vector<std::uint64_t> *responses)
{
	Server server{sh};
	for (int i = 0; i < iterations; ++i) {
		if (i % 3 == 0) {
			sh->lock.lock(server);
			std::uint64_t v = sh->counter;
			std::this_thread::yield();
			sh->counter = v + 1;
			sh->lock.unlock(server);
		} else {
			DelegationRequest req;
			req.words[0] = 1;
			std::uint64_t r = sh->lock.delegate(req, server);
			if (responses != nullptr)
				responses->push_back(r);
		}
	}
}

} // namespace

TEST(DTLock, MutualExclusionAcrossThreads)
{
	Shared *sh = make_shared();
	constexpr int kThreads = 8, kIters = 6000;
	std::vector<std::vector<std::uint64_t>> responses(kThreads);
	std::vector<std::thread> ts;
	for (int t = 0; t < kThreads; ++t)
		ts.emplace_back(hammer, sh, kIters, &responses[t]);
	for (auto &t : ts)
		t.join();
	EXPECT_EQ(sh->counter, std::uint64_t(kThreads * kIters));

	// Every delegated request saw a distinct counter value.
	std::vector<std::uint64_t> all;
	for (auto &r : responses)
		all.insert(all.end(), r.begin(), r.end());
	std::sort(all.begin(), all.end());
	EXPECT_EQ(std::adjacent_find(all.begin(), all.end()), all.end());
}

TEST(DTLock, RequestsAreServedInTicketOrder)
{
	Shared *sh = make_shared();
	std::vector<std::thread> ts;
	for (int t = 0; t < 6; ++t)
		ts.emplace_back(hammer, sh, 4000, nullptr);
	for (auto &t : ts)
		t.join();
	ASSERT_GT(sh->log_size, 0u);
	for (std::uint64_t i = 1; i < sh->log_size; ++i)
		ASSERT_LT(sh->log[i - 1], sh->log[i]) << "at " << i;
	auto st = sh->lock.stats();
	EXPECT_EQ(st.exclusive, 6u * 1334u);
}

TEST(DTLock, SingleThreadDelegateRunsInline)
{
	Shared *sh = make_shared();
	Server server{sh};
	DelegationRequest req;
	req.words[0] = 5;
	EXPECT_EQ(sh->lock.delegate(req, server), 5u);
	EXPECT_EQ(sh->lock.delegate(req, server), 10u);
	EXPECT_EQ(sh->lock.stats().delegated, 0u);
	// Ticket wrap-around: far more acquisitions than slots.
	for (int i = 0; i < int(3 * DelegationTicketLock::kSlots); ++i) {
		sh->lock.lock(server);
		sh->lock.unlock(server);
	}
	EXPECT_EQ(sh->lock.delegate(req, server), 15u);
}

TEST(DTLock, MutualExclusionAcrossProcesses)
{
	Shared *sh = make_shared();
	constexpr int kProcs = 4, kIters = 5000;
	std::vector<pid_t> kids;
	for (int p = 0; p < kProcs; ++p)
		kids.push_back(fork_child([&] {
			while (sh->go.load() == 0)
				std::this_thread::yield();
			hammer(sh, kIters, nullptr);
			return 0;
		}));
	sh->go = 1;
	for (pid_t k : kids)
		EXPECT_EQ(wait_child(k), 0);
	EXPECT_EQ(sh->counter, std::uint64_t(kProcs * kIters));
	for (std::uint64_t i = 1; i < sh->log_size; ++i)
		ASSERT_LT(sh->log[i - 1], sh->log[i]);
}

TEST(DTLock, DeadHolderIsRecovered)
{
	Shared *sh = make_shared();
	pid_t child = fork_child([&] {
		Server server{sh};
		sh->lock.lock(server);
		sh->go = 1;
		while (true)
			std::this_thread::sleep_for(std::chrono::seconds(1));
		return 0;
	});
	while (sh->go.load() == 0)
		std::this_thread::yield();
	kill(child, SIGKILL);
	EXPECT_EQ(wait_child(child), 128 + SIGKILL);

	Server server{sh};
	auto t0 = std::chrono::steady_clock::now();
	DelegationRequest req;
	req.words[0] = 1;
	EXPECT_EQ(sh->lock.delegate(req, server), 1u);
	EXPECT_LT(std::chrono::steady_clock::now() - t0, std::chrono::seconds(5));
	EXPECT_GE(sh->lock.stats().recoveries, 1u);
	// Still a working lock afterwards.
	sh->lock.lock(server);
	sh->lock.unlock(server);
}
