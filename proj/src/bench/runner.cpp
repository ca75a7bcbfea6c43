#include "coexec/bench/runner.hpp"

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <thread>

#include <csignal>
#include <sys/mman.h>
#include <sys/wait.h>
#include <unistd.h>

#include "coexec/bench/pool.hpp"
#include "coexec/error.hpp"
#include "coexec/runtime.hpp"
#include "coexec/sys.hpp"

namespace coexec::bench {

namespace {

using Clock = std::chrono::steady_clock;

// What a child reports back, in an anonymous shared page.
struct ChildSlot {
	std::atomic<std::uint64_t> tasks_run;
	std::atomic<std::uint64_t> trace_drops;
	// Steady-clock time the work ended, before the trace is written out.
	std::atomic<std::int64_t> done_ns;
};

std::int64_t steady_ns(Clock::time_point t)
{
	return std::chrono::duration_cast<std::chrono::nanoseconds>(t.time_since_epoch()).count();
}

double seconds_since(Clock::time_point t0)
{
	return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::vector<int> physical_cpus(const std::vector<std::uint32_t> &cores)
{
	std::vector<int> out;
	for (auto c : cores)
		out.push_back(physical_cpu_of(c));
	return out;
}

std::vector<std::uint32_t> all_cores(std::uint32_t n)
{
	std::vector<std::uint32_t> out(n);
	for (std::uint32_t i = 0; i < n; ++i)
		out[i] = i;
	return out;
}

void run_plan(const WorkloadPlan &plan, const std::function<void(std::uint64_t first, std::size_t n)> &batch)
{
	std::uint64_t next = 0;
	for (const Phase &p : plan.phases) {
		for (std::uint32_t i = 0; i < p.serial; ++i)
			batch(next++, 1);
		batch(next, p.parallel);
		next += p.parallel;
	}
}

Affinity affinity_for(AffinityPolicy policy, std::uint64_t index, const RunOptions &o)
{
	switch (policy) {
		case AffinityPolicy::None: return Affinity::none();
		case AffinityPolicy::StrictCore: return Affinity::core(std::uint32_t(index % o.cores));
		case AffinityPolicy::BestCore: return Affinity::core(std::uint32_t(index % o.cores), AffinityMode::BestEffort);
		case AffinityPolicy::StrictNuma: return Affinity::numa(std::uint32_t(index % o.numa_domains));
		case AffinityPolicy::BestNuma:
			return Affinity::numa(std::uint32_t(index % o.numa_domains), AffinityMode::BestEffort);
	}
	return Affinity::none();
}

int pool_app(const SyntheticApp &app, const WorkloadPlan &plan, std::uint32_t threads, IdleMode mode,
	std::vector<int> pin)
{
	KernelContext ctx(app, calibration());
	NativePool pool(threads, mode, std::move(pin));
	run_plan(plan, [&](std::uint64_t first, std::size_t n) {
		pool.parallel_for(n, [&](std::size_t i) { ctx.run_task(first + i); });
	});
	return 0;
}

int coexec_app(const SyntheticApp &app, const WorkloadPlan &plan, const RunOptions &o, const std::string &seed,
	const std::string &trace_path, ChildSlot &slot)
{
	KernelContext ctx(app, calibration());
	RegionConfig cfg;
	cfg.segment_name_seed = seed;
	cfg.core_count = o.cores;
	cfg.quantum = o.quantum;
	cfg.numa_domains = o.numa_domains;
	cfg.segment_size = o.segment_size;
	AttachOptions ao;
	ao.tracing = o.trace;
	ao.trace_submits = o.trace && o.trace_submits;

	auto rt = Runtime::attach(cfg, ao);
	Runtime *r = rt.get();
	if (app.priority != 0)
		rt->set_app_priority(getpid(), app.priority);
	// Each stage (one serial task, or a parallel batch) is released by the
	// completion of the previous one, on the worker that completed it, as a
	// dependency would be. The main thread only waits for the end.
	std::vector<std::pair<std::uint64_t, std::size_t>> stages;
	run_plan(plan, [&](std::uint64_t first, std::size_t n) {
		if (n > 0)
			stages.emplace_back(first, n);
	});
	std::atomic<std::int64_t> stage_left{0};
	std::size_t stage = 0;
	std::atomic<int> state{0}; // 1 done, 2 failed
	TaskTypeId type = 0;

	auto release = [&](std::size_t i) {
		auto [first, n] = stages[i];
		stage_left = std::int64_t(n);
		for (std::size_t k = 0; k < n; ++k) {
			TaskRef t = r->create_task(type, sizeof(std::uint64_t));
			t.metadata_as<std::uint64_t>() = first + k;
			if (app.affinity != AffinityPolicy::None)
				r->set_task_affinity(t, affinity_for(app.affinity, first + k, o));
			r->submit(t);
		}
	};
	auto finish = [&](int how) {
		state = how;
		state.notify_all();
	};

	type = rt->register_task_type(
		app.name, [&](TaskRef t) { ctx.run_task(t.metadata_as<std::uint64_t>()); },
		[&](TaskRef t) {
			r->destroy(t);
			if (stage_left.fetch_sub(1) != 1)
				return;
			if (++stage == stages.size())
				return finish(1);
			try {
				release(stage);
			} catch (const std::exception &e) {
				std::fprintf(stderr, "%s: %s\n", app.name.c_str(), e.what());
				finish(2);
			}
		});

	release(0);
	int st;
	while ((st = state.load()) == 0)
		state.wait(st);
	if (st != 1)
		return 3;

	slot.tasks_run = rt->stats().tasks_run;
	rt->detach();
	slot.done_ns = steady_ns(Clock::now());
	if (o.trace) {
		// After detach: the handoffs made while leaving are part of the run.
		write_trace(trace_path, rt->tracer().collect());
		slot.trace_drops = rt->tracer().dropped();
	}
	return 0;
}

pid_t spawn(const std::function<int()> &body)
{
	std::cout.flush();
	std::cerr.flush();
	std::fflush(nullptr);
	pid_t pid = fork();
	if (pid < 0)
		throw Error(Errc::SpawnFailure, "fork failed");
	if (pid == 0) {
		int rc = 100;
		try {
			rc = body();
		} catch (const std::exception &e) {
			std::fprintf(stderr, "coexec-bench child %d: %s\n", getpid(), e.what());
		}
		std::fflush(nullptr);
		_exit(rc);
	}
	return pid;
}

int decode_status(int status)
{
	if (WIFEXITED(status))
		return WEXITSTATUS(status);
	if (WIFSIGNALED(status))
		return 128 + WTERMSIG(status);
	return -1;
}

struct Group {
	std::vector<std::size_t> members; // app indices
};

} // namespace

std::vector<std::uint32_t> static_slice(std::uint32_t cores, std::size_t count, std::size_t index)
{
	if (cores == 0 || count == 0 || index >= count)
		throw Error(Errc::InvalidArgument, "bad static slice request");
	if (cores < count)
		return {std::uint32_t(index % cores)};
	std::uint32_t base = cores / std::uint32_t(count), rem = cores % std::uint32_t(count);
	std::uint32_t start = index == 0 ? 0 : base + rem + base * std::uint32_t(index - 1);
	std::uint32_t len = index == 0 ? base + rem : base;
	std::vector<std::uint32_t> out;
	for (std::uint32_t i = 0; i < len; ++i)
		out.push_back(start + i);
	return out;
}

RunResult run_once(const std::vector<SyntheticApp> &apps, Strategy strategy, const RunOptions &o)
{
	if (apps.empty())
		throw Error(Errc::InvalidArgument, "no apps");
	if (o.cores == 0 || o.cores > kMaxCores)
		throw Error(Errc::InvalidArgument, "core count out of range");
	for (const auto &a : apps)
		a.validate();
	calibration(); // once, before forking

	static std::atomic<int> run_counter{0};
	RunResult result;
	result.strategy = strategy;
	result.apps.resize(apps.size());

	std::string seed = "coexec-bench-" + std::to_string(getpid()) + "-" + std::to_string(run_counter++);
	std::filesystem::path trace_dir;
	if (strategy == Strategy::Coexec) {
		RegionConfig probe;
		probe.segment_name_seed = seed;
		probe.core_count = o.cores;
		probe.quantum = o.quantum;
		probe.segment_size = o.segment_size;
		result.segment_name = probe.segment_name();
		result.segment_seed = seed;
		if (o.trace) {
			std::string tmpl = (std::filesystem::temp_directory_path() / "coexec-bench-XXXXXX").string();
			if (mkdtemp(tmpl.data()) == nullptr)
				throw Error(Errc::IoFailure, "cannot create trace directory");
			trace_dir = tmpl;
		}
	}

	auto *slots = static_cast<ChildSlot *>(
		mmap(nullptr, sizeof(ChildSlot) * apps.size(), PROT_READ | PROT_WRITE, MAP_SHARED | MAP_ANONYMOUS, -1, 0));
	if (slots == MAP_FAILED)
		throw Error(Errc::MapFailure, "child report page");
	for (std::size_t i = 0; i < apps.size(); ++i)
		new (&slots[i]) ChildSlot{};

	auto trace_file = [&](std::size_t i) { return (trace_dir / (std::to_string(i) + ".jsonl")).string(); };

	auto child_body = [&](std::size_t i) -> std::function<int()> {
		const SyntheticApp &app = apps[i];
		WorkloadPlan plan = plan_workload(app, o.cores);
		switch (strategy) {
			case Strategy::Exclusive:
				return [=] { return pool_app(app, plan, o.cores, IdleMode::Passive, physical_cpus(all_cores(o.cores))); };
			case Strategy::OversubIdle:
			case Strategy::OversubBusy: {
				IdleMode mode = strategy == Strategy::OversubIdle ? IdleMode::Passive : IdleMode::Spin;
				return [=] {
					// Unpinned threads inside the node's CPUs; helpers inherit the mask.
					sys::pin_thread_to_set(0, physical_cpus(all_cores(o.cores)));
					return pool_app(app, plan, o.cores, mode, {});
				};
			}
			case Strategy::StaticColoc: {
				auto slice = static_slice(o.cores, apps.size(), i);
				return [=] { return pool_app(app, plan, std::uint32_t(slice.size()), IdleMode::Passive, physical_cpus(slice)); };
			}
			case Strategy::Coexec:
				return [=, &o] { return coexec_app(app, plan, o, seed, trace_file(i), slots[i]); };
		}
		return [] { return 100; };
	};

	// Exclusive runs the apps one after the other; the rest start together.
	std::vector<Group> groups;
	if (strategy == Strategy::Exclusive) {
		for (std::size_t i = 0; i < apps.size(); ++i)
			groups.push_back(Group{{i}});
	} else {
		groups.emplace_back();
		for (std::size_t i = 0; i < apps.size(); ++i)
			groups.back().members.push_back(i);
	}

	std::vector<Clock::time_point> started(apps.size());
	const Clock::time_point t0 = Clock::now();
	for (const Group &g : groups) {
		std::vector<pid_t> live;
		for (std::size_t i : g.members) {
			result.apps[i].name = apps[i].name;
			started[i] = Clock::now();
			result.apps[i].pid = spawn(child_body(i));
			live.push_back(result.apps[i].pid);
		}
		auto reap = [&](bool block) {
			int status = 0;
			pid_t pid = waitpid(-1, &status, block ? 0 : WNOHANG);
			if (pid <= 0)
				return false;
			for (std::size_t i : g.members)
				if (result.apps[i].pid == pid) {
					result.apps[i].exit_code = decode_status(status);
					result.apps[i].elapsed_s = seconds_since(started[i]);
					live.erase(std::find(live.begin(), live.end(), pid));
				}
			return true;
		};
		bool kill_here = o.kill_app >= 0 && std::find(g.members.begin(), g.members.end(), std::size_t(o.kill_app)) != g.members.end();
		if (kill_here) {
			auto deadline = started[std::size_t(o.kill_app)] + o.kill_after;
			pid_t victim = result.apps[std::size_t(o.kill_app)].pid;
			while (Clock::now() < deadline && std::find(live.begin(), live.end(), victim) != live.end()) {
				if (!reap(false))
					std::this_thread::sleep_for(std::chrono::microseconds(500));
			}
			if (std::find(live.begin(), live.end(), victim) != live.end() && kill(victim, SIGKILL) == 0)
				result.apps[std::size_t(o.kill_app)].killed = true;
		}
		while (!live.empty())
			if (!reap(true) && errno == ECHILD)
				break;
	}
	result.makespan_s = seconds_since(t0);

	for (std::size_t i = 0; i < apps.size(); ++i) {
		result.apps[i].tasks_run = slots[i].tasks_run.load();
		result.apps[i].trace_drops = slots[i].trace_drops.load();
	}
	bool all_done = std::all_of(slots, slots + apps.size(), [](const ChildSlot &c) { return c.done_ns.load() > 0; });
	if (!trace_dir.empty() && all_done) {
		// Writing the trace out is not part of the run.
		std::int64_t last = 0;
		for (std::size_t i = 0; i < apps.size(); ++i) {
			std::int64_t done = slots[i].done_ns.load();
			result.apps[i].elapsed_s = double(done - steady_ns(started[i])) / 1e9;
			last = std::max(last, done);
		}
		result.makespan_s = double(last - steady_ns(t0)) / 1e9;
	}
	munmap(slots, sizeof(ChildSlot) * apps.size());

	if (!result.segment_name.empty())
		Region::remove(result.segment_name);
	if (!trace_dir.empty()) {
		std::vector<std::string> files;
		for (std::size_t i = 0; i < apps.size(); ++i)
			if (std::filesystem::exists(trace_file(i)))
				files.push_back(trace_file(i));
		result.trace = merge_traces(files);
		std::filesystem::remove_all(trace_dir);
	}

	std::string failures;
	for (const auto &a : result.apps)
		if (a.exit_code != 0 && !a.killed)
			failures += (failures.empty() ? "" : ", ") + a.name + " (pid " + std::to_string(a.pid) + ", status " +
				std::to_string(a.exit_code) + ")";
	if (!failures.empty())
		throw Error(Errc::ChildCrash, std::string(strategy_name(strategy)) + ": " + failures);
	return result;
}

std::vector<StrategyReport> run_combination(const std::vector<SyntheticApp> &apps, const std::vector<Strategy> &strategies,
	const RunOptions &options, std::size_t repetitions, const RunObserver &observer)
{
	std::vector<StrategyReport> reports;
	for (Strategy s : strategies) {
		StrategyReport r;
		for (const auto &a : apps)
			r.combination.push_back(a.name);
		r.strategy = s;
		reports.push_back(std::move(r));
	}
	for (std::size_t rep = 0; rep < repetitions; ++rep)
		for (auto &r : reports) {
			RunResult res = run_once(apps, r.strategy, options);
			r.makespans.push_back(res.makespan_s);
			if (observer)
				observer(r, rep, res);
		}
	score_reports(reports);
	return reports;
}

std::vector<StrategyReport> run_matrix(const std::vector<SyntheticApp> &apps, const std::vector<Strategy> &strategies,
	std::size_t arity, const RunOptions &options, std::size_t repetitions, const RunObserver &observer)
{
	if (arity == 0 || arity > apps.size())
		throw Error(Errc::InvalidArgument, "arity must be in [1, number of apps]");
	std::vector<StrategyReport> all;
	for (const auto &combo : combinations(apps.size(), arity)) {
		std::vector<SyntheticApp> group;
		for (std::size_t i : combo)
			group.push_back(apps[i]);
		auto reports = run_combination(group, strategies, options, repetitions, observer);
		all.insert(all.end(), reports.begin(), reports.end());
	}
	return all;
}

} // namespace coexec::bench
