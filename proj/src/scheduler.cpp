#include "coexec/scheduler.hpp"

#include <bit>
#include <cstring>

#include "coexec/error.hpp"
#include "coexec/sys.hpp"

namespace coexec {

namespace {

constexpr std::uint32_t kStrictCoreBase = 1;
constexpr std::uint32_t kBestCoreBase = kStrictCoreBase + kMaxCores;
constexpr std::uint32_t kStrictNumaBase = kBestCoreBase + kMaxCores;
constexpr std::uint32_t kBestNumaBase = kStrictNumaBase + kMaxNumaDomains;

bool is_best_effort_queue(std::uint32_t q) noexcept
{
	return (q >= kBestCoreBase && q < kStrictNumaBase) || q >= kBestNumaBase;
}

// (priority desc, submit order asc)
bool better(const TaskDescriptor &a, const TaskDescriptor &b) noexcept
{
	if (a.priority != b.priority)
		return a.priority > b.priority;
	return a.submit_seq < b.submit_seq;
}

void consider(TaskDescriptor *&best, TaskDescriptor *t) noexcept
{
	if (t != nullptr && (best == nullptr || better(*t, *best)))
		best = t;
}

} // namespace

std::uint32_t queue_for(const Affinity &a) noexcept
{
	switch (a.kind) {
		case AffinityKind::None: return kGeneralQueue;
		case AffinityKind::Core:
			return (a.mode == AffinityMode::Strict ? kStrictCoreBase : kBestCoreBase) + a.target;
		case AffinityKind::Numa:
			return (a.mode == AffinityMode::Strict ? kStrictNumaBase : kBestNumaBase) + a.target;
	}
	return kGeneralQueue;
}

void Scheduler::initialize(SchedulerState &state) noexcept
{
	std::memset(static_cast<void *>(&state), 0, sizeof(state));
	state.lock.initialize();
}

Scheduler::Scheduler(SegmentView segment, SegmentHeader *header) noexcept
	: _segment(segment), _header(header), _state(segment.at<SchedulerState>(header->scheduler_off))
{
}

CpuSlot &Scheduler::cpu(std::uint32_t c) const noexcept
{
	return _segment.at<CpuSlot>(_header->cpus_off)[c];
}

ProcessEntry &Scheduler::process(std::uint32_t slot) const noexcept
{
	return _segment.at<ProcessEntry>(_header->registry_off)[slot];
}

std::uint32_t Scheduler::numa_of(std::uint32_t c) const noexcept
{
	return cpu(c).numa;
}

TaskDescriptor *Scheduler::head(std::uint32_t slot, std::uint32_t queue) const noexcept
{
	return _segment.at<TaskDescriptor>(_state->procs[slot].lists[queue].head);
}

void Scheduler::link(TaskDescriptor &t)
{
	ProcessQueues &pq = _state->procs[t.owner_slot];
	std::uint32_t q = queue_for(t.affinity);
	TaskList &list = pq.lists[q];
	shm_off_t self = _segment.offset_of(&t);

	// Sorted insert, scanning from the tail: new submissions carry the
	// largest sequence number and usually land there.
	shm_off_t after = list.tail;
	while (after != kNullOff && better(t, task(after)))
		after = task(after).prev;

	t.queue = q;
	t.prev = after;
	if (after == kNullOff) {
		t.next = list.head;
		list.head = self;
	} else {
		t.next = task(after).next;
		task(after).next = self;
	}
	if (t.next == kNullOff)
		list.tail = self;
	else
		task(t.next).prev = self;

	const std::uint64_t bit = std::uint64_t(1) << t.owner_slot;
	if (pq.ready++ == 0)
		_state->ready_mask |= bit;
	if (is_best_effort_queue(q) && pq.best_effort++ == 0)
		_state->best_effort_mask |= bit;
}

void Scheduler::unlink(TaskDescriptor &t)
{
	ProcessQueues &pq = _state->procs[t.owner_slot];
	TaskList &list = pq.lists[t.queue];
	if (t.prev == kNullOff)
		list.head = t.next;
	else
		task(t.prev).next = t.next;
	if (t.next == kNullOff)
		list.tail = t.prev;
	else
		task(t.next).prev = t.prev;
	t.prev = t.next = kNullOff;

	const std::uint64_t bit = std::uint64_t(1) << t.owner_slot;
	if (--pq.ready == 0)
		_state->ready_mask &= ~bit;
	if (is_best_effort_queue(t.queue) && --pq.best_effort == 0)
		_state->best_effort_mask &= ~bit;
}

void Scheduler::validate(const Affinity &a) const
{
	if (a.kind == AffinityKind::Core && a.target >= _header->core_count)
		throw Error(Errc::InvalidTarget, "core " + std::to_string(a.target) + " >= core_count");
	if (a.kind == AffinityKind::Numa && a.target >= _header->numa_domains)
		throw Error(Errc::InvalidTarget, "numa domain " + std::to_string(a.target) + " >= numa_domains");
}

bool Scheduler::is_idle_locked(std::uint32_t c) const noexcept
{
	return (_state->idle_mask[c / 64] >> (c % 64)) & 1;
}

void Scheduler::set_idle_locked(std::uint32_t c) noexcept
{
	_state->idle_mask[c / 64] |= 1ull << (c % 64);
	cpu(c).state.store(std::uint32_t(CpuState::Idle), std::memory_order_seq_cst);
}

bool Scheduler::claim_idle_locked(std::uint32_t c) noexcept
{
	if (!is_idle_locked(c))
		return false;
	_state->idle_mask[c / 64] &= ~(1ull << (c % 64));
	cpu(c).state.store(std::uint32_t(CpuState::Running), std::memory_order_seq_cst);
	return true;
}

std::uint32_t Scheduler::ready_locked(std::uint32_t slot) const noexcept
{
	return _state->procs[slot].ready;
}

int Scheduler::choose_idle_locked(const TaskDescriptor &t) noexcept
{
	const std::uint32_t n = _header->core_count;
	const Affinity &a = t.affinity;
	if (a.kind == AffinityKind::Core) {
		if (is_idle_locked(a.target))
			return int(a.target);
		if (a.mode == AffinityMode::Strict)
			return -1;
	}
	std::uint32_t start = _state->idle_cursor;
	if (a.kind == AffinityKind::Numa) {
		for (std::uint32_t i = 0; i < n; ++i) {
			std::uint32_t c = (start + i) % n;
			if (numa_of(c) == a.target && is_idle_locked(c))
				return int(c);
		}
		if (a.mode == AffinityMode::Strict)
			return -1;
	}
	for (std::uint32_t i = 0; i < n; ++i) {
		std::uint32_t c = (start + i) % n;
		if (is_idle_locked(c))
			return int(c);
	}
	return -1;
}

int Scheduler::submit_locked(TaskDescriptor &t)
{
	TaskState st = t.load_state();
	if (st != TaskState::Created && st != TaskState::Paused)
		throw Error(Errc::InvalidState, std::string("submit of a task in state ") + task_state_name(st));
	t.submit_seq = ++_state->submit_counter;
	t.skips = 0;
	t.store_state(TaskState::Ready);
	link(t);

	int c = choose_idle_locked(t);
	if (c >= 0) {
		claim_idle_locked(std::uint32_t(c));
		_state->idle_cursor = (std::uint32_t(c) + 1) % _header->core_count;
	}
	return c;
}

int Scheduler::submit(shm_off_t off)
{
	return exclusive([&] { return submit_locked(task(off)); });
}

void Scheduler::wake(int c) noexcept
{
	if (c >= 0)
		sys::futex_wake(cpu(std::uint32_t(c)).state);
}

shm_off_t Scheduler::request(std::uint32_t c, std::uint32_t slot, std::uint64_t now)
{
	DelegationRequest req;
	req.words[0] = c;
	req.words[1] = slot;
	req.words[2] = now;
	return _state->lock.delegate(req, *this);
}

std::uint64_t Scheduler::operator()(std::uint64_t, const DelegationRequest &req)
{
	return pick(std::uint32_t(req.words[0]), std::uint32_t(req.words[1]), req.words[2]);
}

void Scheduler::set_task_affinity(shm_off_t off, Affinity affinity)
{
	validate(affinity);
	exclusive([&] {
		TaskDescriptor &t = task(off);
		TaskState st = t.load_state();
		if (st == TaskState::Running)
			throw Error(Errc::InvalidState, "affinity change of a running task");
		if (st == TaskState::Ready) {
			unlink(t);
			t.affinity = affinity;
			t.skips = 0;
			link(t);
		} else {
			t.affinity = affinity;
		}
	});
}

void Scheduler::set_task_priority(shm_off_t off, std::int32_t priority)
{
	exclusive([&] {
		TaskDescriptor &t = task(off);
		if (t.load_state() == TaskState::Ready) {
			unlink(t);
			t.priority = priority;
			link(t);
		} else {
			t.priority = priority;
		}
	});
}

void Scheduler::purge_locked(std::uint32_t slot, std::vector<shm_off_t> &removed)
{
	ProcessQueues &pq = _state->procs[slot];
	for (std::uint32_t q = 0; q < kQueuesPerProcess && pq.ready > 0; ++q) {
		while (pq.lists[q].head != kNullOff) {
			shm_off_t off = pq.lists[q].head;
			unlink(task(off));
			removed.push_back(off);
		}
	}
}

void Scheduler::candidates(std::uint32_t slot, std::uint32_t c, std::uint32_t numa, TaskDescriptor *&tier1,
	TaskDescriptor *&tier2) const
{
	tier1 = tier2 = nullptr;
	consider(tier1, head(slot, kGeneralQueue));
	consider(tier1, head(slot, kStrictCoreBase + c));
	consider(tier1, head(slot, kBestCoreBase + c));
	consider(tier1, head(slot, kStrictNumaBase + numa));
	consider(tier1, head(slot, kBestNumaBase + numa));
	if (_state->procs[slot].best_effort == 0)
		return;

	const std::uint32_t limit = _header->affinity_skip_limit;
	auto mismatched = [&](TaskDescriptor *t) {
		if (t == nullptr)
			return;
		if (t->skips >= limit)
			consider(tier1, t);
		else
			consider(tier2, t);
	};
	for (std::uint32_t k = 0; k < _header->core_count; ++k)
		if (k != c)
			mismatched(head(slot, kBestCoreBase + k));
	for (std::uint32_t d = 0; d < _header->numa_domains; ++d)
		if (d != numa)
			mismatched(head(slot, kBestNumaBase + d));
}

shm_off_t Scheduler::pick(std::uint32_t c, std::uint32_t slot, std::uint64_t now)
{
	CpuSlot &core = cpu(c);
	const std::uint32_t numa = numa_of(c);

	// Entries are only valid for processes in `eligible`.
	TaskDescriptor *tier1[kMaxProcesses];
	TaskDescriptor *tier2[kMaxProcesses];
	bool any_tier1 = false;
	std::uint64_t eligible = 0;
	for (std::uint64_t m = _state->ready_mask; m != 0; m &= m - 1) {
		const auto p = std::uint32_t(std::countr_zero(m));
		if (process(p).load_state() != ProcessState::Active)
			continue;
		eligible |= std::uint64_t(1) << p;
		candidates(p, c, numa, tier1[p], tier2[p]);
		any_tier1 |= tier1[p] != nullptr;
	}
	const bool any_best_effort = (_state->best_effort_mask & eligible) != 0;
	TaskDescriptor **cand = any_tier1 ? tier1 : tier2;

	// Rule 2: the requester keeps the core while its quantum lasts.
	std::uint64_t acc = 0;
	if (core.clock_valid && core.clock_slot == slot && now > core.clock_since)
		acc = now - core.clock_since;

	TaskDescriptor *chosen = nullptr;
	std::uint32_t chosen_slot = 0;
	const bool requester_ready = slot < kMaxProcesses && (eligible >> slot & 1) != 0 && cand[slot] != nullptr;
	if (requester_ready && acc < _header->quantum_ns) {
		chosen = cand[slot];
		chosen_slot = slot;
	} else {
		// Rule 3: another process, by app priority, then least recently
		// served, then FIFO.
		for (std::uint64_t m = eligible; m != 0; m &= m - 1) {
			const auto p = std::uint32_t(std::countr_zero(m));
			TaskDescriptor *t = cand[p];
			if (t == nullptr || p == slot)
				continue;
			if (chosen == nullptr) {
				chosen = t;
				chosen_slot = p;
				continue;
			}
			ProcessEntry &a = process(p);
			ProcessEntry &b = process(chosen_slot);
			std::int32_t pa = a.app_priority.load(std::memory_order_relaxed);
			std::int32_t pb = b.app_priority.load(std::memory_order_relaxed);
			bool take;
			if (pa != pb)
				take = pa > pb;
			else if (a.last_served != b.last_served)
				take = a.last_served < b.last_served;
			else
				take = t->submit_seq < chosen->submit_seq;
			if (take) {
				chosen = t;
				chosen_slot = p;
			}
		}
		if (chosen == nullptr && requester_ready) {
			chosen = cand[slot];
			chosen_slot = slot;
		}
	}

	if (any_best_effort) {
		// Every best-effort head passed over here by a core it does not
		// prefer ages by one.
		for (std::uint64_t m = _state->best_effort_mask & eligible; m != 0; m &= m - 1) {
			const auto p = std::uint32_t(std::countr_zero(m));
			for (std::uint32_t k = 0; k < _header->core_count; ++k) {
				TaskDescriptor *t = k == c ? nullptr : head(p, kBestCoreBase + k);
				if (t != nullptr && t != chosen && t->skips < _header->affinity_skip_limit)
					++t->skips;
			}
			for (std::uint32_t d = 0; d < _header->numa_domains; ++d) {
				TaskDescriptor *t = d == numa ? nullptr : head(p, kBestNumaBase + d);
				if (t != nullptr && t != chosen && t->skips < _header->affinity_skip_limit)
					++t->skips;
			}
		}
	}

	if (chosen == nullptr) {
		set_idle_locked(c);
		return kNullOff;
	}

	if (!core.clock_valid || core.clock_slot != chosen_slot) {
		core.clock_valid = 1;
		core.clock_slot = chosen_slot;
		core.clock_since = now;
	}
	process(chosen_slot).last_served = ++_state->serve_counter;
	unlink(*chosen);
	chosen->store_state(TaskState::Running);
	shm_off_t off = _segment.offset_of(chosen);
	core.task.store(off, std::memory_order_release);
	++_state->dispatched;
	return off;
}

DelegationTicketLock::Stats Scheduler::lock_stats() const noexcept
{
	return _state->lock.stats();
}

std::uint64_t Scheduler::dispatched() const noexcept
{
	return _state->dispatched;
}

} // namespace coexec
