#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <sys/types.h>

#include "coexec/trace.hpp"

namespace coexec::bench {

enum class ViolationKind {
	CoreOverlap,    // two tasks running on one core at once
	OwnerExecution, // task run by a worker of another process
	StrictAffinity, // strict task outside its core / NUMA domain
	QuantumBound,   // core kept past the quantum while another process waited
	HandoffPairing, // park without wake (or the reverse) on a core
	Sequence,       // END / PAUSE without a matching START / RESUME
};

const char *violation_kind_name(ViolationKind k) noexcept;

struct Violation {
	ViolationKind kind;
	std::int32_t cpu = -1;
	pid_t pid = 0;
	std::uint64_t task = 0;
	std::uint64_t ts_ns = 0;
	std::string detail;
};

struct AuditOptions {
	// Needed for NUMA-strict checks; 0 infers it from the highest cpu seen.
	std::uint32_t core_count = 0;
	std::uint32_t numa_domains = 1;
	// Quantum-bound check; needs TASK_SUBMIT events. 0 disables it.
	std::uint64_t quantum_ns = 0;
	// Timestamp jitter tolerated by the quantum check (preemption between
	// a decision and its trace event).
	std::uint64_t quantum_slack_ns = 10'000'000;
	// Off when some process's trace is known to be missing (e.g. killed).
	bool check_handoffs = true;
};

struct AuditReport {
	std::vector<Violation> violations;
	std::size_t events = 0;
	std::size_t tasks_started = 0;
	// Core time spent running tasks, by owning pid.
	std::map<pid_t, std::uint64_t> busy_ns;
	std::uint64_t handoffs = 0;
	// Handoffs where the parking and the woken worker belong to different
	// processes.
	std::uint64_t cross_process_handoffs = 0;

	std::size_t count(ViolationKind k) const;
	bool clean() const
	{
		return violations.empty();
	}
	std::string summary() const;
};

AuditReport audit_events(std::vector<TraceEvent> events, const AuditOptions &options = {});
AuditReport audit_trace(const std::string &path, const AuditOptions &options = {});

// Busy time per pid restricted to [from, to).
std::map<pid_t, std::uint64_t> busy_time_in_window(const std::vector<TraceEvent> &events, std::uint64_t from,
	std::uint64_t to);

} // namespace coexec::bench
