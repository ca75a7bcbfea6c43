#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace coexec::bench {

enum class AppKind {
	Compute,
	Memory,
	Mixed,
};

const char *app_kind_name(AppKind k) noexcept;

// How a coexec app sets its tasks' affinity.
enum class AffinityPolicy {
	None,
	StrictCore, // task i -> core i % cores
	BestCore,
	StrictNuma, // task i -> domain i % numa_domains
	BestNuma,
};

const char *affinity_policy_name(AffinityPolicy p) noexcept;

struct SyntheticApp {
	std::string name;
	AppKind kind = AppKind::Compute;
	std::uint32_t task_count = 240;
	std::uint32_t granularity_us = 500;
	double serial_fraction = 0.0;
	std::uint32_t phases = 1;
	std::int32_t priority = 0;
	AffinityPolicy affinity = AffinityPolicy::None;
	// Working set of the memory kernel.
	std::uint32_t ws_mb = 32;

	void validate() const;
};

// `name:kind:tasks:gran_us:serial_frac[:phases=P][:prio=N][:affinity=POLICY][:ws_mb=M]`
// kind is compute|memory|mixed (or compute_bound / memory_bound).
SyntheticApp parse_app_spec(const std::string &spec);
std::string format_app_spec(const SyntheticApp &app);
std::vector<SyntheticApp> parse_app_list(const std::string &comma_separated);

// cpu, serial, mem and sync: a fully parallel compute app, one with a 0.5
// serial fraction, a memory-bound one and one with many short phases.
std::vector<SyntheticApp> default_apps();

struct Phase {
	std::uint32_t serial = 0;   // single tasks, one after the other
	std::uint32_t parallel = 0; // one batch
};

// The task graph of an app on a node of `cores` cores: per phase, a chain
// of serial tasks and then a parallel batch, sized so that with every core
// busy during the batch the serial chain takes `serial_fraction` of the
// solo wall time.
struct WorkloadPlan {
	std::vector<Phase> phases;

	std::uint64_t total_tasks() const;
	// Solo wall time in task durations, with `cores` cores.
	double ideal_span(std::uint32_t cores) const;
};

WorkloadPlan plan_workload(const SyntheticApp &app, std::uint32_t cores);

// Kernel rates measured on this machine, shared by every child forked
// after the first call.
struct Calibration {
	double compute_iters_per_us = 0;
	double memory_lines_per_us = 0;
};

const Calibration &calibration();

// Per-process state of the kernels (the memory kernel's working set).
class KernelContext {
public:
	KernelContext(const SyntheticApp &app, const Calibration &cal);

	// One task's worth of work; `index` spreads memory sweeps over the
	// working set.
	void run_task(std::uint64_t index) const;

	std::uint64_t compute_iterations() const noexcept
	{
		return _compute_iters;
	}
	std::uint64_t memory_lines() const noexcept
	{
		return _memory_lines;
	}

private:
	std::uint64_t _compute_iters = 0;
	std::uint64_t _memory_lines = 0;
	std::size_t _lines_total = 0;
	std::unique_ptr<std::uint64_t[]> _buffer;
};

std::uint64_t compute_kernel(std::uint64_t iterations) noexcept;
std::uint64_t memory_kernel(const std::uint64_t *buffer, std::size_t lines_total, std::size_t first,
	std::uint64_t lines) noexcept;

} // namespace coexec::bench
