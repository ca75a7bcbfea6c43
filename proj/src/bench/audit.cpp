#include "coexec/bench/audit.hpp"

#include <algorithm>
#include <optional>
#include <sstream>
#include <unordered_map>

namespace coexec::bench {

namespace {

bool opens(TraceKind k)
{
	return k == TraceKind::TaskStart || k == TraceKind::TaskResume;
}

bool closes(TraceKind k)
{
	return k == TraceKind::TaskEnd || k == TraceKind::TaskPause;
}

// At equal timestamps, closing events first: back-to-back tasks are not
// overlaps.
int rank(TraceKind k)
{
	if (closes(k))
		return 0;
	if (k == TraceKind::HandoffPark)
		return 1;
	if (k == TraceKind::HandoffWake)
		return 2;
	return 3;
}

struct Open {
	std::uint64_t task;
	pid_t owner;
	std::uint64_t since;
};

struct Tenure {
	pid_t pid = 0;
	std::uint64_t since = 0;
};

struct Pending {
	pid_t owner;
	std::uint64_t submitted;
	Affinity affinity;
};

} // namespace

const char *violation_kind_name(ViolationKind k) noexcept
{
	switch (k) {
		case ViolationKind::CoreOverlap: return "core_overlap";
		case ViolationKind::OwnerExecution: return "owner_execution";
		case ViolationKind::StrictAffinity: return "strict_affinity";
		case ViolationKind::QuantumBound: return "quantum_bound";
		case ViolationKind::HandoffPairing: return "handoff_pairing";
		case ViolationKind::Sequence: return "sequence";
	}
	return "?";
}

std::size_t AuditReport::count(ViolationKind k) const
{
	return std::size_t(std::count_if(violations.begin(), violations.end(), [&](const Violation &v) { return v.kind == k; }));
}

std::string AuditReport::summary() const
{
	std::ostringstream out;
	out << "events=" << events << " tasks=" << tasks_started << " handoffs=" << handoffs
		<< " cross_process_handoffs=" << cross_process_handoffs;
	for (int k = 0; k <= int(ViolationKind::Sequence); ++k)
		out << ' ' << violation_kind_name(ViolationKind(k)) << '=' << count(ViolationKind(k));
	return out.str();
}

AuditReport audit_events(std::vector<TraceEvent> events, const AuditOptions &options)
{
	std::stable_sort(events.begin(), events.end(), [](const TraceEvent &a, const TraceEvent &b) {
		if (a.ts_ns != b.ts_ns)
			return a.ts_ns < b.ts_ns;
		return rank(a.kind) < rank(b.kind);
	});

	AuditReport rep;
	rep.events = events.size();
	std::uint32_t cores = options.core_count;
	if (cores == 0)
		for (const TraceEvent &e : events)
			cores = std::max(cores, std::uint32_t(std::max(e.cpu, 0) + 1));
	auto numa_of = [&](std::int32_t cpu) {
		return cores == 0 ? 0u : std::uint32_t(std::uint64_t(cpu) * options.numa_domains / cores);
	};
	auto violate = [&](ViolationKind k, const TraceEvent &e, std::string detail) {
		rep.violations.push_back(Violation{k, e.cpu, e.pid, e.task, e.ts_ns, std::move(detail)});
	};

	std::unordered_map<std::int32_t, Open> running;
	std::unordered_map<std::int32_t, TraceEvent> parked;
	std::unordered_map<std::int32_t, Tenure> tenure;
	std::unordered_map<std::uint64_t, Pending> pending;
	const bool check_quantum = options.quantum_ns > 0 &&
		std::any_of(events.begin(), events.end(), [](const TraceEvent &e) { return e.kind == TraceKind::TaskSubmit; });

	for (const TraceEvent &e : events) {
		if (opens(e.kind) || closes(e.kind)) {
			if (e.pid != e.owner_pid)
				violate(ViolationKind::OwnerExecution, e,
					"task of pid " + std::to_string(e.owner_pid) + " run by pid " + std::to_string(e.pid));
		}

		if (opens(e.kind)) {
			++rep.tasks_started;
			auto it = running.find(e.cpu);
			if (it != running.end())
				violate(ViolationKind::CoreOverlap, e,
					"task " + std::to_string(e.task) + " starts while task " + std::to_string(it->second.task) +
						" runs since " + std::to_string(it->second.since));
			running[e.cpu] = Open{e.task, e.owner_pid, e.ts_ns};

			const Affinity &a = e.affinity;
			if (a.mode == AffinityMode::Strict) {
				if (a.kind == AffinityKind::Core && std::uint32_t(e.cpu) != a.target)
					violate(ViolationKind::StrictAffinity, e, "strict " + a.to_string() + " ran on cpu " + std::to_string(e.cpu));
				if (a.kind == AffinityKind::Numa && numa_of(e.cpu) != a.target)
					violate(ViolationKind::StrictAffinity, e, "strict " + a.to_string() + " ran on cpu " + std::to_string(e.cpu));
			}

			if (check_quantum) {
				pending.erase(e.task);
				Tenure &t = tenure[e.cpu];
				if (t.pid != e.owner_pid) {
					t.pid = e.owner_pid;
					t.since = e.ts_ns;
				} else if (e.ts_ns >= t.since + options.quantum_ns + options.quantum_slack_ns) {
					for (const auto &[id, p] : pending) {
						if (p.owner == e.owner_pid || p.submitted + options.quantum_slack_ns > e.ts_ns)
							continue;
						const Affinity &pa = p.affinity;
						bool eligible = pa.kind == AffinityKind::None ||
							(pa.kind == AffinityKind::Core && pa.target == std::uint32_t(e.cpu)) ||
							(pa.kind == AffinityKind::Numa && pa.target == numa_of(e.cpu));
						if (eligible) {
							violate(ViolationKind::QuantumBound, e,
								"pid " + std::to_string(e.owner_pid) + " holds the core for " +
									std::to_string((e.ts_ns - t.since) / 1000) + " us while task " + std::to_string(id) +
									" of pid " + std::to_string(p.owner) + " waits");
							break;
						}
					}
				}
			}
		} else if (closes(e.kind)) {
			auto it = running.find(e.cpu);
			if (it == running.end() || it->second.task != e.task) {
				violate(ViolationKind::Sequence, e, std::string(trace_kind_name(e.kind)) + " without a running task");
			} else {
				rep.busy_ns[it->second.owner] += e.ts_ns - it->second.since;
				running.erase(it);
			}
		} else if (e.kind == TraceKind::TaskSubmit) {
			if (check_quantum)
				pending[e.task] = Pending{e.owner_pid, e.ts_ns, e.affinity};
		} else if (e.kind == TraceKind::HandoffPark) {
			++rep.handoffs;
			auto it = parked.find(e.cpu);
			if (it != parked.end() && options.check_handoffs)
				violate(ViolationKind::HandoffPairing, e, "second park before a wake");
			parked[e.cpu] = e;
		} else if (e.kind == TraceKind::HandoffWake) {
			auto it = parked.find(e.cpu);
			if (it == parked.end()) {
				if (options.check_handoffs)
					violate(ViolationKind::HandoffPairing, e, "wake without a park");
			} else {
				if (it->second.pid != e.pid)
					++rep.cross_process_handoffs;
				parked.erase(it);
			}
		}
	}

	if (options.check_handoffs)
		for (const auto &[cpu, e] : parked)
			violate(ViolationKind::HandoffPairing, e, "park never followed by a wake");
	for (const auto &[cpu, o] : running) {
		TraceEvent e;
		e.cpu = cpu;
		e.task = o.task;
		e.pid = o.owner;
		e.ts_ns = o.since;
		violate(ViolationKind::Sequence, e, "task never ended");
	}
	return rep;
}

AuditReport audit_trace(const std::string &path, const AuditOptions &options)
{
	return audit_events(read_trace(path), options);
}

std::map<pid_t, std::uint64_t> busy_time_in_window(const std::vector<TraceEvent> &events, std::uint64_t from,
	std::uint64_t to)
{
	std::map<pid_t, std::uint64_t> busy;
	std::unordered_map<std::int32_t, Open> running;
	for (const TraceEvent &e : events) {
		if (opens(e.kind)) {
			running[e.cpu] = Open{e.task, e.owner_pid, e.ts_ns};
		} else if (closes(e.kind)) {
			auto it = running.find(e.cpu);
			if (it == running.end())
				continue;
			std::uint64_t b = std::max(it->second.since, from);
			std::uint64_t end = std::min(e.ts_ns, to);
			if (end > b)
				busy[it->second.owner] += end - b;
			running.erase(it);
		}
	}
	return busy;
}

} // namespace coexec::bench
