#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <sys/types.h>

#include "coexec/bench/app.hpp"
#include "coexec/bench/score.hpp"
#include "coexec/trace.hpp"

namespace coexec::bench {

struct RunOptions {
	// Logical cores of the node; beyond the machine's CPUs they wrap.
	std::uint32_t cores = 1;
	std::chrono::nanoseconds quantum = std::chrono::milliseconds(20);
	std::uint32_t numa_domains = 1;
	std::size_t segment_size = std::size_t(64) << 20;
	// Coexec runs: record and return the merged trace of all apps.
	bool trace = false;
	bool trace_submits = true;
	// SIGKILL app `kill_app` this long after it was started.
	int kill_app = -1;
	std::chrono::milliseconds kill_after{0};
};

struct AppOutcome {
	std::string name;
	pid_t pid = 0;
	int exit_code = 0; // 128 + signal when killed by one
	bool killed = false;
	double elapsed_s = 0;
	// Coexec apps only.
	std::uint64_t tasks_run = 0;
	std::uint64_t trace_drops = 0;
};

struct RunResult {
	Strategy strategy = Strategy::Exclusive;
	double makespan_s = 0;
	std::vector<AppOutcome> apps;
	std::vector<TraceEvent> trace;
	// Segment used by a coexec run (removed again before returning), and
	// the name seed it was derived from.
	std::string segment_name;
	std::string segment_seed;
};

// Runs the apps once under `strategy`, each app in its own child process.
// Makespan runs from the first fork to the last exit. Throws ChildCrash
// when an app fails, other than the one killed on purpose. The caller
// must be single-threaded.
RunResult run_once(const std::vector<SyntheticApp> &apps, Strategy strategy, const RunOptions &options);

using RunObserver = std::function<void(const StrategyReport &, std::size_t rep, const RunResult &)>;

// Repetition-major: each repetition runs every strategy once, so drift in
// machine state spreads over all of them. Reports come back scored.
std::vector<StrategyReport> run_combination(const std::vector<SyntheticApp> &apps, const std::vector<Strategy> &strategies,
	const RunOptions &options, std::size_t repetitions, const RunObserver &observer = {});

// Every `arity`-subset of `apps` through run_combination.
std::vector<StrategyReport> run_matrix(const std::vector<SyntheticApp> &apps, const std::vector<Strategy> &strategies,
	std::size_t arity, const RunOptions &options, std::size_t repetitions, const RunObserver &observer = {});

// Cores given to app `index` of `count` under static co-location:
// contiguous equal slices, the remainder to the first app. With fewer cores
// than apps, app i gets core i % cores.
std::vector<std::uint32_t> static_slice(std::uint32_t cores, std::size_t count, std::size_t index);

} // namespace coexec::bench
