#include <gtest/gtest.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include "coexec/bench/app.hpp"
#include "coexec/bench/audit.hpp"
#include "coexec/bench/pool.hpp"
#include "coexec/bench/runner.hpp"
#include "coexec/bench/score.hpp"
#include "coexec/error.hpp"

using namespace coexec;
using namespace coexec::bench;

namespace {

// Pascal's triangle, independent of the multiplicative formula.
std::uint64_t pascal(std::uint64_t n, std::uint64_t k)
{
	std::vector<std::vector<std::uint64_t>> c(n + 1, std::vector<std::uint64_t>(n + 1, 0));
	for (std::uint64_t i = 0; i <= n; ++i) {
		c[i][0] = 1;
		for (std::uint64_t j = 1; j <= i; ++j)
			c[i][j] = c[i - 1][j - 1] + c[i - 1][j];
	}
	return k > n ? 0 : c[n][k];
}

// k-subsets by filtering bitmasks, then sorted.
std::vector<std::vector<std::size_t>> subsets_by_mask(std::size_t n, std::size_t k)
{
	std::vector<std::vector<std::size_t>> out;
	for (std::uint32_t m = 0; m < (1u << n); ++m) {
		if (std::size_t(__builtin_popcount(m)) != k)
			continue;
		std::vector<std::size_t> s;
		for (std::size_t i = 0; i < n; ++i)
			if (m & (1u << i))
				s.push_back(i);
		out.push_back(s);
	}
	std::sort(out.begin(), out.end());
	return out;
}

TraceEvent ev(std::uint64_t ts, int cpu, pid_t pid, std::uint64_t task, TraceKind kind, pid_t owner = 0,
	Affinity aff = Affinity::none())
{
	TraceEvent e;
	e.ts_ns = ts;
	e.cpu = cpu;
	e.pid = pid;
	e.worker = cpu;
	e.task = task;
	e.kind = kind;
	e.owner_pid = owner ? owner : pid;
	e.affinity = aff;
	return e;
}

SyntheticApp random_app(std::mt19937_64 &rng, int i)
{
	SyntheticApp a;
	a.name = "app" + std::to_string(i);
	a.kind = AppKind(rng() % 3);
	a.task_count = std::uint32_t(1 + rng() % 5000);
	a.granularity_us = std::uint32_t(1 + rng() % 2000);
	a.serial_fraction = double(rng() % 101) / 100.0;
	a.phases = std::uint32_t(1 + rng() % std::min<std::uint32_t>(a.task_count, 40));
	a.priority = int(rng() % 5) - 2;
	a.affinity = AffinityPolicy(rng() % 5);
	a.ws_mb = std::uint32_t(1 + rng() % 64);
	return a;
}

} // namespace

TEST(Score, MinOverMakespan)
{
	auto p = score({10, 12, 15});
	ASSERT_EQ(p.size(), 3u);
	EXPECT_DOUBLE_EQ(p[0], 1.0);
	EXPECT_NEAR(p[1], 10.0 / 12.0, 1e-12);
	EXPECT_NEAR(p[2], 10.0 / 15.0, 1e-12);
	EXPECT_TRUE(score({}).empty());
	EXPECT_THROW(score({1, 0}), Error);
}

TEST(Score, BestScoreIsShortestMakespan)
{
	std::mt19937_64 rng(11);
	for (int trial = 0; trial < 2000; ++trial) {
		std::vector<double> t(1 + rng() % 6);
		for (auto &x : t)
			x = 0.01 + double(rng() % 100000) / 1000.0;
		auto p = score(t);
		auto best = std::max_element(p.begin(), p.end()) - p.begin();
		auto fastest = std::min_element(t.begin(), t.end()) - t.begin();
		ASSERT_EQ(t[std::size_t(best)], t[std::size_t(fastest)]);
		for (std::size_t i = 0; i < t.size(); ++i) {
			ASSERT_GT(p[i], 0.0);
			ASSERT_LE(p[i], 1.0);
			// Scores order inversely to makespans.
			for (std::size_t j = 0; j < t.size(); ++j)
				if (t[i] < t[j])
					ASSERT_GT(p[i], p[j]);
		}
	}
}

TEST(Score, ReportsScoredPerRepetitionWithinCombination)
{
	std::vector<StrategyReport> r(3);
	r[0].combination = {"a", "b"};
	r[0].strategy = Strategy::Exclusive;
	r[0].makespans = {2.0, 4.0};
	r[1].combination = {"a", "b"};
	r[1].strategy = Strategy::Coexec;
	r[1].makespans = {1.0, 8.0};
	r[2].combination = {"a", "c"};
	r[2].strategy = Strategy::Coexec;
	r[2].makespans = {3.0, 3.0};
	score_reports(r);
	EXPECT_EQ(r[0].scores, (std::vector<double>{0.5, 1.0}));
	EXPECT_EQ(r[1].scores, (std::vector<double>{1.0, 0.5}));
	EXPECT_EQ(r[2].scores, (std::vector<double>{1.0, 1.0}));
	EXPECT_EQ(r[0].combination_name(), "a+b");

	r[1].makespans.push_back(1.0);
	EXPECT_THROW(score_reports(r), Error);
}

TEST(Score, SpeedupModelMatchesPublishedFigures)
{
	// HPCCG at 73.3% and N-Body at 98.38% CPU, equal solo times.
	EXPECT_NEAR(estimate_cosched_speedup({0.733, 0.9838}), 1.16, 0.005);
	// HPCCG lowered to 50%.
	EXPECT_NEAR(estimate_cosched_speedup({0.5, 0.9838}), 1.35, 0.005);
	EXPECT_DOUBLE_EQ(estimate_cosched_speedup({1.0, 1.0}), 1.0);
	EXPECT_THROW(estimate_cosched_speedup({}), Error);
	EXPECT_THROW(estimate_cosched_speedup({0.0, 1.0}), Error);
	EXPECT_THROW(estimate_cosched_speedup({1.2}), Error);
}

TEST(Score, SpeedupModelAgainstTimeRatio)
{
	std::mt19937_64 rng(5);
	for (int trial = 0; trial < 500; ++trial) {
		std::vector<double> u(1 + rng() % 4);
		double t_o = 1.0 + double(rng() % 100), combined = 0;
		for (auto &x : u) {
			x = double(1 + rng() % 1000) / 1000.0;
			combined += t_o * x;
		}
		ASSERT_NEAR(estimate_cosched_speedup(u), double(u.size()) * t_o / combined, 1e-9);
	}
}

TEST(Combinatorics, CountsAndEnumeration)
{
	EXPECT_EQ(combination_count(7, 3), 35u);
	EXPECT_EQ(combination_count(7, 2), 21u);
	EXPECT_EQ(combination_count(2, 2), 1u);
	EXPECT_EQ(combination_count(3, 4), 0u);
	for (std::size_t n = 0; n <= 12; ++n)
		for (std::size_t k = 1; k <= n + 1; ++k) {
			ASSERT_EQ(combination_count(n, k), pascal(n, k)) << n << ' ' << k;
			auto c = combinations(n, k);
			ASSERT_EQ(c, subsets_by_mask(n, k)) << n << ' ' << k;
		}
	EXPECT_EQ(combination_count(60, 30), 118264581564861424ull);
}

TEST(Stats, QuantilesInterpolate)
{
	EXPECT_DOUBLE_EQ(median({3, 1, 2}), 2.0);
	EXPECT_DOUBLE_EQ(median({4, 1, 3, 2}), 2.5);
	EXPECT_DOUBLE_EQ(iqr({1, 2, 3, 4, 5}), 2.0);
	EXPECT_DOUBLE_EQ(quantile({10, 20}, 0.25), 12.5);
	EXPECT_DOUBLE_EQ(iqr({7}), 0.0);
	EXPECT_TRUE(std::isnan(median({})));
}

TEST(Stats, SummaryAndCsv)
{
	std::vector<StrategyReport> r(2);
	r[0].combination = {"x", "y"};
	r[0].strategy = Strategy::Exclusive;
	r[0].makespans = {2.0};
	r[1].combination = {"x", "y"};
	r[1].strategy = Strategy::Coexec;
	r[1].makespans = {1.6};
	score_reports(r);
	auto s = summarize(r);
	ASSERT_EQ(s.size(), 2u);
	EXPECT_EQ(s[1].strategy, Strategy::Coexec);
	EXPECT_DOUBLE_EQ(s[1].median_score, 1.0);
	EXPECT_DOUBLE_EQ(s[1].median_speedup_vs_exclusive, 1.25);
	EXPECT_DOUBLE_EQ(s[0].median_score, 0.8);

	std::ostringstream csv;
	write_matrix_csv(csv, r);
	EXPECT_EQ(csv.str(), "combination,strategy,rep,makespan_s,score\nx+y,exclusive,0,2,0.8\nx+y,coexec,0,1.6,1\n");
}

TEST(Strategies, NamesRoundTrip)
{
	EXPECT_EQ(all_strategies().size(), 5u);
	for (Strategy s : all_strategies())
		EXPECT_EQ(parse_strategy(strategy_name(s)), s);
	EXPECT_THROW(parse_strategy("dlb"), Error);
}

TEST(AppSpec, ParsesAndRejects)
{
	auto a = parse_app_spec("mem:memory:100:250:0.25:phases=4:prio=-1:affinity=strict-numa:ws_mb=8");
	EXPECT_EQ(a.name, "mem");
	EXPECT_EQ(a.kind, AppKind::Memory);
	EXPECT_EQ(a.task_count, 100u);
	EXPECT_EQ(a.granularity_us, 250u);
	EXPECT_DOUBLE_EQ(a.serial_fraction, 0.25);
	EXPECT_EQ(a.phases, 4u);
	EXPECT_EQ(a.priority, -1);
	EXPECT_EQ(a.affinity, AffinityPolicy::StrictNuma);
	EXPECT_EQ(a.ws_mb, 8u);

	EXPECT_EQ(parse_app_spec("c:compute_bound:1:1:0").kind, AppKind::Compute);
	for (const char *bad : {"x:compute:10:10", "x:gpu:10:10:0", "x:compute:0:10:0", "x:compute:10:0:0",
			 "x:compute:10:10:1.5", "x:compute:10:10:0:phases=11", "x:compute:10:10:0:colour=red",
			 ":compute:10:10:0", "x:compute:ten:10:0"})
		EXPECT_THROW(parse_app_spec(bad), Error) << bad;
	EXPECT_THROW(parse_app_list(","), Error);
	EXPECT_EQ(parse_app_list("a:compute:1:1:0,b:mixed:2:2:0").size(), 2u);
	EXPECT_EQ(default_apps().size(), 4u);
}

TEST(AppSpec, FormatRoundTrips)
{
	std::mt19937_64 rng(3);
	for (int i = 0; i < 1000; ++i) {
		SyntheticApp a = random_app(rng, i);
		SyntheticApp b = parse_app_spec(format_app_spec(a));
		ASSERT_EQ(b.name, a.name);
		ASSERT_EQ(b.kind, a.kind);
		ASSERT_EQ(b.task_count, a.task_count);
		ASSERT_EQ(b.granularity_us, a.granularity_us);
		ASSERT_EQ(b.serial_fraction, a.serial_fraction) << format_app_spec(a);
		ASSERT_EQ(b.phases, a.phases);
		ASSERT_EQ(b.priority, a.priority);
		ASSERT_EQ(b.affinity, a.affinity);
		ASSERT_EQ(b.ws_mb, a.ws_mb);
	}
}

TEST(Plan, KeepsTaskCountAndSerialShare)
{
	std::mt19937_64 rng(9);
	for (int i = 0; i < 3000; ++i) {
		SyntheticApp a = random_app(rng, i);
		std::uint32_t cores = std::uint32_t(1 + rng() % 64);
		auto plan = plan_workload(a, cores);
		ASSERT_EQ(plan.phases.size(), a.phases);
		ASSERT_EQ(plan.total_tasks(), a.task_count);
		std::uint64_t serial = 0, parallel = 0;
		for (const auto &p : plan.phases) {
			serial += p.serial;
			parallel += p.parallel;
		}
		if (a.serial_fraction == 0.0)
			ASSERT_EQ(serial, 0u);
		if (a.serial_fraction == 1.0)
			ASSERT_EQ(parallel, 0u);
		// Rounding moves at most one task per phase between the two parts.
		double ideal_serial = double(a.task_count) * a.serial_fraction /
			(a.serial_fraction + (1 - a.serial_fraction) * cores);
		ASSERT_LE(std::abs(double(serial) - ideal_serial), double(a.phases) * 1.0 + 1e-9) << format_app_spec(a);
	}
}

TEST(Plan, IdealSpan)
{
	WorkloadPlan p{{Phase{2, 10}, Phase{0, 3}}};
	EXPECT_DOUBLE_EQ(p.ideal_span(4), 2 + 3 + 1);
	EXPECT_DOUBLE_EQ(p.ideal_span(1), 15);
	SyntheticApp a;
	a.name = "half";
	a.task_count = 240;
	a.serial_fraction = 0.5;
	auto plan = plan_workload(a, 8);
	// serial = parallel / 8 and serial + parallel = 240.
	ASSERT_EQ(plan.phases.size(), 1u);
	EXPECT_EQ(plan.phases[0].serial, 27u);
	EXPECT_EQ(plan.phases[0].parallel, 213u);
	EXPECT_THROW(plan_workload(a, 0), Error);
}

TEST(StaticSlice, PartitionsTheNode)
{
	for (std::uint32_t cores = 1; cores <= 16; ++cores)
		for (std::size_t count = 1; count <= 5; ++count) {
			std::vector<int> seen(cores, 0);
			for (std::size_t i = 0; i < count; ++i) {
				auto s = static_slice(cores, count, i);
				ASSERT_FALSE(s.empty());
				for (std::size_t j = 1; j < s.size(); ++j)
					ASSERT_EQ(s[j], s[j - 1] + 1);
				for (auto c : s) {
					ASSERT_LT(c, cores);
					++seen[c];
				}
				if (cores < count)
					ASSERT_EQ(s, std::vector<std::uint32_t>{std::uint32_t(i % cores)});
				else if (i > 0)
					ASSERT_EQ(s.size(), cores / count);
			}
			if (cores >= count)
				for (int n : seen)
					ASSERT_EQ(n, 1) << cores << " cores, " << count << " apps";
		}
	EXPECT_THROW(static_slice(4, 2, 2), Error);
	EXPECT_THROW(static_slice(0, 1, 0), Error);
}

TEST(Pool, EveryIndexRunsOnce)
{
	for (IdleMode mode : {IdleMode::Passive, IdleMode::Spin})
		for (std::uint32_t threads : {1u, 2u, 3u}) {
			NativePool pool(threads, mode);
			for (std::size_t n : {0u, 1u, 7u, 1000u}) {
				std::vector<std::atomic<int>> hits(n);
				pool.parallel_for(n, [&](std::size_t i) { hits[i].fetch_add(1); });
				for (std::size_t i = 0; i < n; ++i)
					ASSERT_EQ(hits[i].load(), 1) << threads << " threads, index " << i;
			}
		}
}

TEST(Kernels, DeterministicAndCalibrated)
{
	EXPECT_EQ(compute_kernel(1000), compute_kernel(1000));
	EXPECT_NE(compute_kernel(1000), compute_kernel(1001));
	std::vector<std::uint64_t> buf(8 * 16);
	for (std::size_t i = 0; i < 16; ++i)
		buf[i * 8] = i;
	// Lines 14, 15, 0, 1 with wrap-around.
	EXPECT_EQ(memory_kernel(buf.data(), 16, 14, 4), 14u + 15u + 0u + 1u);
	const auto &cal = calibration();
	EXPECT_GT(cal.compute_iters_per_us, 0);
	EXPECT_GT(cal.memory_lines_per_us, 0);
}

TEST(Audit, CleanTrace)
{
	std::vector<TraceEvent> t = {
		ev(10, 0, 100, 1, TraceKind::TaskStart),
		ev(20, 0, 100, 1, TraceKind::TaskEnd),
		ev(21, 0, 100, 0, TraceKind::HandoffPark, 200),
		ev(22, 0, 200, 0, TraceKind::HandoffWake, 200),
		ev(23, 0, 200, 2, TraceKind::TaskStart, 200, Affinity::core(0)),
		ev(30, 1, 100, 3, TraceKind::TaskStart),
		ev(33, 0, 200, 2, TraceKind::TaskEnd, 200, Affinity::core(0)),
		ev(40, 1, 100, 3, TraceKind::TaskEnd),
	};
	auto rep = audit_events(t);
	EXPECT_TRUE(rep.clean()) << rep.summary();
	EXPECT_EQ(rep.tasks_started, 3u);
	EXPECT_EQ(rep.busy_ns[100], 20u);
	EXPECT_EQ(rep.busy_ns[200], 10u);
	EXPECT_EQ(rep.handoffs, 1u);
	EXPECT_EQ(rep.cross_process_handoffs, 1u);

	auto window = busy_time_in_window(t, 15, 35);
	EXPECT_EQ(window[100], 5u + 5u);
	EXPECT_EQ(window[200], 10u);
}

TEST(Audit, FlagsEachViolationKind)
{
	auto overlap = audit_events({
		ev(10, 0, 100, 1, TraceKind::TaskStart),
		ev(12, 0, 200, 2, TraceKind::TaskStart),
		ev(20, 0, 100, 1, TraceKind::TaskEnd),
		ev(21, 0, 200, 2, TraceKind::TaskEnd),
	});
	EXPECT_EQ(overlap.count(ViolationKind::CoreOverlap), 1u);

	auto owner = audit_events({
		ev(10, 0, 100, 1, TraceKind::TaskStart, 200),
		ev(20, 0, 100, 1, TraceKind::TaskEnd, 200),
	});
	EXPECT_EQ(owner.count(ViolationKind::OwnerExecution), 2u);

	AuditOptions two_numa;
	two_numa.core_count = 4;
	two_numa.numa_domains = 2;
	auto affinity = audit_events({
		ev(10, 1, 100, 1, TraceKind::TaskStart, 0, Affinity::core(2)),
		ev(20, 1, 100, 1, TraceKind::TaskEnd, 0, Affinity::core(2)),
		ev(30, 1, 100, 2, TraceKind::TaskStart, 0, Affinity::numa(1)),
		ev(40, 1, 100, 2, TraceKind::TaskEnd, 0, Affinity::numa(1)),
		ev(50, 3, 100, 3, TraceKind::TaskStart, 0, Affinity::numa(1)),
		ev(60, 3, 100, 3, TraceKind::TaskEnd, 0, Affinity::numa(1)),
		ev(70, 1, 100, 4, TraceKind::TaskStart, 0, Affinity::core(2, AffinityMode::BestEffort)),
		ev(80, 1, 100, 4, TraceKind::TaskEnd, 0, Affinity::core(2, AffinityMode::BestEffort)),
	}, two_numa);
	EXPECT_EQ(affinity.count(ViolationKind::StrictAffinity), 2u);
	EXPECT_EQ(affinity.violations.size(), 2u);

	auto pairing = audit_events({
		ev(10, 0, 100, 0, TraceKind::HandoffPark),
		ev(11, 0, 100, 0, TraceKind::HandoffPark),
		ev(12, 1, 100, 0, TraceKind::HandoffWake),
	});
	EXPECT_EQ(pairing.count(ViolationKind::HandoffPairing), 3u);
	AuditOptions lenient;
	lenient.check_handoffs = false;
	EXPECT_TRUE(audit_events({ev(10, 0, 100, 0, TraceKind::HandoffPark)}, lenient).clean());

	auto sequence = audit_events({
		ev(10, 0, 100, 1, TraceKind::TaskStart),
		ev(20, 0, 100, 9, TraceKind::TaskEnd),
	});
	EXPECT_EQ(sequence.count(ViolationKind::Sequence), 2u);
}

TEST(Audit, QuantumBound)
{
	const std::uint64_t ms = 1'000'000;
	AuditOptions ao;
	ao.core_count = 1;
	ao.quantum_ns = 20 * ms;
	ao.quantum_slack_ns = 1 * ms;

	// pid 200 waits from t=1ms while pid 100 keeps starting tasks.
	std::vector<TraceEvent> hog = {ev(1 * ms, -1, 200, 99, TraceKind::TaskSubmit)};
	for (std::uint64_t i = 0; i < 40; ++i) {
		hog.push_back(ev(i * ms, 0, 100, i + 1, TraceKind::TaskStart));
		hog.push_back(ev(i * ms + ms / 2, 0, 100, i + 1, TraceKind::TaskEnd));
	}
	hog.push_back(ev(41 * ms, 0, 200, 99, TraceKind::TaskStart));
	hog.push_back(ev(42 * ms, 0, 200, 99, TraceKind::TaskEnd));
	auto bad = audit_events(hog, ao);
	EXPECT_GE(bad.count(ViolationKind::QuantumBound), 1u);

	// The same run with the waiting task served at the quantum boundary.
	std::vector<TraceEvent> fair = {ev(1 * ms, -1, 200, 99, TraceKind::TaskSubmit)};
	for (std::uint64_t i = 0; i < 20; ++i) {
		fair.push_back(ev(i * ms, 0, 100, i + 1, TraceKind::TaskStart));
		fair.push_back(ev(i * ms + ms / 2, 0, 100, i + 1, TraceKind::TaskEnd));
	}
	fair.push_back(ev(20 * ms, 0, 200, 99, TraceKind::TaskStart));
	fair.push_back(ev(21 * ms, 0, 200, 99, TraceKind::TaskEnd));
	EXPECT_TRUE(audit_events(fair, ao).clean()) << audit_events(fair, ao).summary();

	// Without submit events the check is off.
	hog.erase(hog.begin());
	EXPECT_TRUE(audit_events(hog, ao).clean());
}

TEST(Runner, ExclusiveAndCoexecFinishTinyApps)
{
	auto apps = parse_app_list("a:compute:40:50:0,b:mixed:40:50:0.2:phases=4:ws_mb=1");
	RunOptions o;
	o.cores = 2;
	o.trace = true;
	for (Strategy s : all_strategies()) {
		auto res = run_once(apps, s, o);
		EXPECT_GT(res.makespan_s, 0) << strategy_name(s);
		ASSERT_EQ(res.apps.size(), 2u);
		for (const auto &a : res.apps) {
			EXPECT_EQ(a.exit_code, 0) << strategy_name(s) << ' ' << a.name;
			EXPECT_FALSE(a.killed);
		}
		if (s == Strategy::Coexec) {
			EXPECT_EQ(res.apps[0].tasks_run + res.apps[1].tasks_run, 80u);
			AuditOptions ao;
			ao.core_count = 2;
			auto rep = audit_events(res.trace, ao);
			EXPECT_TRUE(rep.clean()) << rep.summary();
			EXPECT_EQ(rep.tasks_started, 80u);
			EXPECT_EQ(rep.busy_ns.size(), 2u);
		} else {
			EXPECT_TRUE(res.trace.empty());
		}
	}
}
