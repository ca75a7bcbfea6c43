#include "coexec/runtime.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>

#include <sched.h>

#include "coexec/sys.hpp"

namespace coexec {

namespace {

struct Context {
	Runtime *rt = nullptr;
	std::int32_t worker = -1;
	shm_off_t task = kNullOff;
};

thread_local Context t_ctx;

std::atomic<bool> g_attached{false};

constexpr std::uint64_t kSpinBeforeParkNs = 5'000;

// Bounded spin, then futex wait, until `word` leaves `value`.
void park_while(std::atomic<std::uint32_t> &word, std::uint32_t value)
{
	std::uint64_t start = sys::now_ns();
	while (word.load(std::memory_order_acquire) == value) {
		if (sys::now_ns() - start > kSpinBeforeParkNs) {
			while (word.load(std::memory_order_acquire) == value)
				sys::futex_wait(word, value);
			return;
		}
		sys::cpu_relax();
	}
}

constexpr std::size_t align64(std::size_t v)
{
	return (v + 63) & ~std::size_t(63);
}

} // namespace

std::span<std::byte> TaskRef::metadata() const noexcept
{
	if (_desc == nullptr || _desc->metadata_size == 0)
		return {};
	return {_rt->region().segment().at<std::byte>(_desc->metadata), std::size_t(_desc->metadata_size)};
}

// ---------------------------------------------------------------------------
// Attach / detach

std::unique_ptr<Runtime> Runtime::attach(const RegionConfig &cfg, AttachOptions options)
{
	bool expected = false;
	if (!g_attached.compare_exchange_strong(expected, true))
		throw Error(Errc::InvalidState, "this process is already attached");
	try {
		const pid_t pid = sys::current_pid();
		const std::uint64_t start = sys::process_start_time(pid).value_or(0);
		while (true) {
			Region region = Region::open(cfg);
			auto slot = region.register_process(pid, start);
			if (!slot) {
				region.unmap();
				sched_yield();
				continue;
			}
			std::unique_ptr<Runtime> rt(new Runtime(std::move(region), cfg, *slot, options));
			// Takes over cores nobody holds; for the first registrant that
			// is every core.
			rt->reap_dead();
			rt->_service = std::thread(&Runtime::service_main, rt.get());
			return rt;
		}
	} catch (...) {
		g_attached.store(false);
		throw;
	}
}

Runtime::Runtime(Region region, const RegionConfig &cfg, std::uint32_t slot, AttachOptions options)
	: _region(std::move(region)), _config(cfg), _slot(slot), _pid(sys::current_pid()), _options(options),
	  _tracer(options.tracing, options.trace_submits, options.trace_capacity, options.trace_max_capacity)
{
}

Runtime::~Runtime()
{
	if (_attached.load()) {
		try {
			detach();
		} catch (const Error &e) {
			std::fprintf(stderr, "coexec: detach at teardown: %s\n", e.what());
			if (e.code() == Errc::TasksOutstanding) {
				self().tasks_outstanding.store(0);
				detach();
			}
		}
	}
}

std::int64_t Runtime::tasks_outstanding() const noexcept
{
	return self().tasks_outstanding.load();
}

void Runtime::detach()
{
	if (!_attached.load())
		return;
	if (t_ctx.rt == this)
		throw Error(Errc::InvalidState, "detach from a worker thread");
	if (std::int64_t n = tasks_outstanding(); n > 0)
		throw Error(Errc::TasksOutstanding, std::to_string(n) + " tasks not destroyed");

	ProcessEntry &e = self();
	{
		SpinGuard pool(e.pool_lock);
		SpinGuard mailbox(e.mailbox_lock);
		e.state.store(std::uint32_t(ProcessState::Leaving), std::memory_order_seq_cst);
	}
	e.shutdown.store(1, std::memory_order_seq_cst);

	// No new spawn requests can arrive now; forward the queued ones.
	_service_stop.store(true);
	e.mailbox_signal.fetch_add(1);
	sys::futex_wake_all(e.mailbox_signal);
	if (_service.joinable())
		_service.join();

	{
		SpinGuard pool(e.pool_lock);
		while (e.idle_head >= 0) {
			WorkerRecord &w = _region.worker(e.idle_head);
			e.idle_head = w.next_idle;
			--e.idle_count;
			w.command.store(std::uint32_t(WorkerCommand::Exit));
			w.state.store(std::uint32_t(WorkerState::Running), std::memory_order_seq_cst);
			sys::futex_wake(w.state);
		}
	}

	Scheduler sched = _region.scheduler();
	std::vector<int> woken;
	sched.exclusive([&] {
		for (std::uint32_t c = 0; c < _region.core_count(); ++c)
			if (_region.cpu(c).owner_slot.load() == _slot && sched.claim_idle_locked(c))
				woken.push_back(int(c));
	});
	for (int c : woken)
		sched.wake(c);

	while (true) {
		std::vector<std::unique_ptr<LocalThread>> threads;
		{
			std::lock_guard lock(_threads_mutex);
			threads.swap(_threads);
		}
		if (threads.empty())
			break;
		for (auto &t : threads)
			if (t->thread.joinable())
				t->thread.join();
	}

	_region.unregister_process(_slot);
	_region.unmap();
	_attached.store(false);
	g_attached.store(false);
}

// ---------------------------------------------------------------------------
// Dead registrants

std::size_t Runtime::reap_dead()
{
	std::lock_guard reap_lock(_reap_mutex);
	if (!_attached.load())
		return 0;
	SegmentHeader &h = _region.header();
	ShmAllocator alloc = _region.allocator();
	Scheduler sched = _region.scheduler();

	std::vector<std::uint32_t> dead;
	std::vector<std::uint32_t> adopt;
	std::vector<shm_off_t> freed;
	std::vector<int> woken;
	{
		SpinGuard guard(h.region_lock);
		bool unowned = false;
		for (std::uint32_t c = 0; c < _region.core_count(); ++c)
			unowned |= _region.cpu(c).load_state() == CpuState::Unowned;
		for (std::uint32_t p = 0; p < kMaxProcesses; ++p) {
			ProcessEntry &e = _region.process(p);
			ProcessState s = e.load_state();
			if (p == _slot || (s != ProcessState::Active && s != ProcessState::Leaving))
				continue;
			if (!sys::process_alive(e.pid.load(), e.start_time))
				dead.push_back(p);
		}
		if (dead.empty() && !unowned)
			return 0;

		auto is_dead = [&](std::uint32_t p) {
			return std::find(dead.begin(), dead.end(), p) != dead.end() ||
				_region.process(p).load_state() == ProcessState::Dead;
		};
		for (std::uint32_t p : dead)
			_region.process(p).state.store(std::uint32_t(ProcessState::Dead), std::memory_order_seq_cst);

		sched.exclusive([&] {
			for (std::uint32_t p : dead)
				sched.purge_locked(p, freed);
			for (std::uint32_t c = 0; c < _region.core_count(); ++c) {
				CpuSlot &s = _region.cpu(c);
				CpuState st = s.load_state();
				if (st != CpuState::Unowned && !is_dead(s.owner_slot.load()))
					continue;
				shm_off_t t = s.task.exchange(kNullOff);
				if (t != kNullOff) {
					// Dispatched to the dead process but never started.
					TaskDescriptor &td = desc(t);
					ProcessEntry &owner = _region.process(td.owner_slot);
					if (!is_dead(td.owner_slot) && owner.load_state() == ProcessState::Active &&
						owner.pid.load() == td.owner_pid) {
						td.store_state(td.attached_worker.load() >= 0 ? TaskState::Paused : TaskState::Created);
						int w = sched.submit_locked(td);
						if (w >= 0)
							woken.push_back(w);
					} else {
						freed.push_back(t);
					}
				}
				sched.claim_idle_locked(c);
				s.owner_slot.store(_slot);
				s.worker.store(-1);
				s.clock_valid = 0;
				s.state.store(std::uint32_t(CpuState::Running), std::memory_order_seq_cst);
				adopt.push_back(c);
			}
		});

		for (std::uint32_t i = 0; i < h.worker_capacity; ++i) {
			WorkerRecord &w = _region.worker(std::int32_t(i));
			if (WorkerState(w.state.load()) != WorkerState::Free && is_dead(w.owner_slot) &&
				w.pid != _pid) {
				bool owned_by_dead = false;
				for (std::uint32_t p : dead)
					owned_by_dead |= w.owner_slot == p && w.pid == _region.process(p).pid.load();
				if (owned_by_dead)
					_region.free_worker(std::int32_t(i));
			}
		}
		for (std::uint32_t p : dead) {
			ProcessEntry &e = _region.process(p);
			e.idle_head = -1;
			e.idle_count = 0;
			e.mailbox_count = 0;
			e.mailbox_head = 0;
		}
	}

	for (shm_off_t t : freed) {
		desc(t).store_state(TaskState::Destroyed);
		alloc.free(t);
	}
	for (int c : woken)
		sched.wake(c);
	adopt_cores(adopt);
	return dead.size();
}

void Runtime::adopt_cores(const std::vector<std::uint32_t> &cores)
{
	// Unowned cores: nobody parked, so no handoff to trace.
	for (std::uint32_t c : cores)
		give_core(c, _slot, kNullOff, [] {}, false);
}

// ---------------------------------------------------------------------------
// Task types and the task API

TaskTypeId Runtime::register_task_type(std::string label, TaskCallback run, TaskCallback completed)
{
	if (!run)
		throw Error(Errc::InvalidArgument, "task type needs a run callback");
	std::lock_guard lock(_types_mutex);
	const std::uint32_t n = _type_count.load();
	if (n == kMaxTaskTypes)
		throw Error(Errc::InvalidArgument, "too many task types");
	_types[n] = std::make_unique<TaskType>(TaskType{std::move(label), std::move(run), std::move(completed)});
	_type_count.store(n + 1, std::memory_order_release);
	return TaskTypeId(n);
}

const std::string &Runtime::task_type_label(TaskTypeId type) const
{
	return task_type(type).label;
}

const Runtime::TaskType &Runtime::task_type(TaskTypeId type) const
{
	if (type >= _type_count.load(std::memory_order_acquire))
		throw Error(Errc::UnknownType, "task type " + std::to_string(type) + " is not registered");
	return *_types[type];
}

TaskRef Runtime::checked(TaskRef task) const
{
	if (!task)
		throw Error(Errc::InvalidArgument, "empty task handle");
	if (task._rt != this)
		throw Error(Errc::InvalidOwner, "task handle from another runtime");
	if (task._desc->owner_pid != _pid)
		throw Error(Errc::InvalidOwner, "task " + std::to_string(task.id()) + " belongs to process " +
			std::to_string(task._desc->owner_pid));
	return task;
}

TaskRef Runtime::create_task(TaskTypeId type, std::size_t metadata_size)
{
	task_type(type);
	ShmAllocator alloc = _region.allocator();
	const std::size_t head = align64(sizeof(TaskDescriptor));
	shm_off_t off = alloc.alloc(head + metadata_size, current_cpu());

	auto *td = _region.segment().at<TaskDescriptor>(off);
	std::memset(static_cast<void *>(td), 0, sizeof(TaskDescriptor));
	td->id = _region.header().next_task_id.fetch_add(1);
	td->owner_pid = _pid;
	td->owner_slot = _slot;
	td->type_id = type;
	td->priority = 0;
	td->affinity = Affinity::none();
	td->attached_worker.store(-1);
	td->metadata = metadata_size > 0 ? off + head : kNullOff;
	td->metadata_size = metadata_size;
	if (metadata_size > 0)
		std::memset(_region.segment().at<std::byte>(off + head), 0, metadata_size);
	td->store_state(TaskState::Created);
	self().tasks_outstanding.fetch_add(1);
	return TaskRef(this, off, td);
}

void Runtime::submit(TaskRef task)
{
	checked(task);
	std::uint64_t ts = sys::now_ns();
	Scheduler sched = _region.scheduler();
	int c = sched.submit(task._off);
	if (_tracer.record_submits()) {
		TraceEvent ev{ts, current_cpu(), _pid, current_worker(), task._desc->id, TraceKind::TaskSubmit,
			task._desc->owner_pid, task._desc->affinity};
		_tracer.emit(ev);
	}
	sched.wake(c);
}

void Runtime::destroy(TaskRef task)
{
	checked(task);
	std::uint32_t expected = std::uint32_t(TaskState::Finished);
	if (!task._desc->state.compare_exchange_strong(expected, std::uint32_t(TaskState::Destroyed)))
		throw Error(Errc::InvalidState, std::string("destroy of a task in state ") +
			task_state_name(TaskState(expected)));
	_region.allocator().free(task._off, current_cpu());
	self().tasks_outstanding.fetch_sub(1);
}

void Runtime::set_task_affinity(TaskRef task, Affinity affinity)
{
	checked(task);
	_region.scheduler().set_task_affinity(task._off, affinity);
}

void Runtime::set_task_priority(TaskRef task, std::int32_t priority)
{
	checked(task);
	_region.scheduler().set_task_priority(task._off, priority);
}

void Runtime::set_app_priority(pid_t pid, std::int32_t priority)
{
	auto slot = _region.find_process(pid);
	if (!slot)
		throw Error(Errc::UnknownPid, "process " + std::to_string(pid) + " is not attached");
	_region.process(*slot).app_priority.store(priority);
}

TaskRef Runtime::task_at(shm_off_t offset)
{
	if (!_region.segment().contains(offset, sizeof(TaskDescriptor)))
		throw Error(Errc::InvalidArgument, "offset outside the segment");
	return ref(offset);
}

RuntimeStats Runtime::stats() const
{
	RuntimeStats s;
	s.threads_spawned = _threads_spawned.load();
	s.threads_live = _threads_live.load();
	s.tasks_run = _tasks_run.load();
	s.handoffs_out = _handoffs_out.load();
	s.mailbox_requests = _mailbox_requests.load();
	s.mailbox_full = _mailbox_full.load();
	return s;
}

void Runtime::emit(TraceKind kind, std::int32_t cpu, std::int32_t worker, const TaskDescriptor *task) noexcept
{
	if (!_tracer.enabled())
		return;
	TraceEvent ev;
	ev.ts_ns = sys::now_ns();
	ev.cpu = cpu;
	ev.pid = _pid;
	ev.worker = worker;
	ev.kind = kind;
	if (task != nullptr) {
		ev.task = task->id;
		ev.owner_pid = task->owner_pid;
		ev.affinity = task->affinity;
	}
	_tracer.emit(ev);
}

// ---------------------------------------------------------------------------
// Workers

void Runtime::spawn_worker(std::uint32_t cpu, WorkerCommand cmd, shm_off_t task, bool via_handoff)
{
	std::int32_t idx = _region.alloc_worker(_slot, _pid);
	if (idx < 0)
		throw Error(Errc::SpawnFailure, "worker table is full");
	WorkerRecord &w = _region.worker(idx);
	w.cpu.store(std::int32_t(cpu));
	w.command.store(std::uint32_t(cmd));
	w.task.store(task);
	w.woken_by_handoff.store(via_handoff ? 1 : 0);
	_region.cpu(cpu).worker.store(idx);

	std::lock_guard lock(_threads_mutex);
	auto lt = std::make_unique<LocalThread>();
	lt->worker = idx;
	LocalThread *raw = lt.get();
	try {
		raw->thread = std::thread(&Runtime::worker_main, this, idx, raw);
	} catch (const std::exception &e) {
		_region.free_worker(idx);
		throw Error(Errc::SpawnFailure, std::string("thread creation failed: ") + e.what());
	}
	_threads.push_back(std::move(lt));
	_threads_spawned.fetch_add(1);
	_threads_live.fetch_add(1);
	self().workers_spawned.fetch_add(1);
}

void Runtime::join_finished_threads()
{
	std::vector<std::unique_ptr<LocalThread>> done;
	{
		std::lock_guard lock(_threads_mutex);
		auto it = std::partition(_threads.begin(), _threads.end(),
			[](const std::unique_ptr<LocalThread> &t) { return !t->finished.load(); });
		for (auto i = it; i != _threads.end(); ++i)
			done.push_back(std::move(*i));
		_threads.erase(it, _threads.end());
	}
	for (auto &t : done)
		if (t->thread.joinable())
			t->thread.join();
}

void Runtime::worker_main(std::int32_t index, LocalThread *self_thread)
{
	WorkerRecord &w = _region.worker(index);
	w.tid.store(sys::current_tid());
	t_ctx = Context{this, index, kNullOff};
	try {
		std::int32_t c = w.cpu.load();
		if (c >= 0)
			sys::pin_thread(0, _region.cpu(std::uint32_t(c)).physical_cpu);
		auto cmd = WorkerCommand(w.command.load());
		while (cmd != WorkerCommand::Exit) {
			shm_off_t first = cmd == WorkerCommand::RunTask ? w.task.exchange(kNullOff) : kNullOff;
			if (!core_loop(index, first))
				break;
			cmd = park_idle(index);
		}
	} catch (const std::exception &e) {
		std::fprintf(stderr, "coexec: worker %d of process %d failed: %s\n", index, int(_pid), e.what());
		std::abort();
	}
	t_ctx = Context{};
	_region.free_worker(index);
	_threads_live.fetch_sub(1);
	self_thread->finished.store(true);
}

bool Runtime::core_loop(std::int32_t index, shm_off_t first)
{
	WorkerRecord &w = _region.worker(index);
	Scheduler sched = _region.scheduler();
	{
		CpuSlot &s = _region.cpu(std::uint32_t(w.cpu.load()));
		std::uint32_t handoff = std::uint32_t(CpuState::Handoff);
		s.state.compare_exchange_strong(handoff, std::uint32_t(CpuState::Running));
	}
	if (w.woken_by_handoff.exchange(0) != 0)
		emit(TraceKind::HandoffWake, w.cpu.load(), index, first != kNullOff ? &desc(first) : nullptr);
	if (first != kNullOff)
		run_task(index, first);

	ProcessEntry &me = self();
	while (true) {
		const auto c = std::uint32_t(w.cpu.load());
		if (me.shutdown.load(std::memory_order_seq_cst) != 0) {
			release_core(index, c);
			return false;
		}
		shm_off_t t = sched.request(c, _slot, sys::now_ns());
		if (t == kNullOff) {
			if (me.shutdown.load(std::memory_order_seq_cst) != 0)
				continue;
			emit(TraceKind::SchedIdle, std::int32_t(c), index, nullptr);
			park_while(_region.cpu(c).state, std::uint32_t(CpuState::Idle));
			continue;
		}

		TaskDescriptor &td = desc(t);
		std::int32_t attached = td.attached_worker.load(std::memory_order_acquire);
		if (attached >= 0) {
			resume_attached(index, c, t);
			return true;
		}
		if (td.owner_slot == _slot && td.owner_pid == _pid) {
			run_task(index, t);
			continue;
		}

		ProcessEntry &owner = _region.process(td.owner_slot);
		GiveResult r = GiveResult::TargetGone;
		if (owner.pid.load() == td.owner_pid)
			r = give_core(c, td.owner_slot, t, [&] { emit(TraceKind::HandoffPark, std::int32_t(c), index, &td); });
		if (r == GiveResult::Given) {
			_handoffs_out.fetch_add(1);
			return true;
		}
		_region.cpu(c).task.store(kNullOff);
		if (r == GiveResult::MailboxFull) {
			_mailbox_full.fetch_add(1);
			int woken = sched.exclusive([&] {
				td.store_state(TaskState::Created);
				return sched.submit_locked(td);
			});
			sched.wake(woken);
			sched_yield();
		} else {
			drop_task(t);
		}
	}
}

void Runtime::drop_task(shm_off_t t)
{
	desc(t).store_state(TaskState::Destroyed);
	_region.allocator().free(t);
}

void Runtime::run_task(std::int32_t index, shm_off_t t)
{
	WorkerRecord &w = _region.worker(index);
	TaskDescriptor &td = desc(t);
	std::int32_t c = w.cpu.load();
	_region.cpu(std::uint32_t(c)).task.store(kNullOff);
	td.attached_worker.store(index, std::memory_order_release);
	t_ctx.task = t;

	const TaskType *type = &task_type(td.type_id);
	emit(TraceKind::TaskStart, c, index, &td);
	try {
		type->run(ref(t));
	} catch (const std::exception &e) {
		std::fprintf(stderr, "coexec: task %llu (%s) threw: %s\n", static_cast<unsigned long long>(td.id),
			type->label.c_str(), e.what());
	}
	emit(TraceKind::TaskEnd, w.cpu.load(), index, &td);
	td.attached_worker.store(-1, std::memory_order_release);
	t_ctx.task = kNullOff;
	_tasks_run.fetch_add(1, std::memory_order_relaxed);
	td.store_state(TaskState::Finished);
	if (type->completed)
		type->completed(ref(t));
}

WorkerCommand Runtime::park_idle(std::int32_t index)
{
	ProcessEntry &e = self();
	WorkerRecord &w = _region.worker(index);
	{
		SpinGuard guard(e.pool_lock);
		if (e.shutdown.load() != 0 || e.load_state() != ProcessState::Active ||
			e.idle_count >= _region.core_count())
			return WorkerCommand::Exit;
		w.state.store(std::uint32_t(WorkerState::ParkedIdle), std::memory_order_seq_cst);
		w.next_idle = e.idle_head;
		e.idle_head = index;
		++e.idle_count;
	}
	park_while(w.state, std::uint32_t(WorkerState::ParkedIdle));
	return WorkerCommand(w.command.load());
}

std::int32_t Runtime::pop_idle(std::uint32_t slot)
{
	ProcessEntry &e = _region.process(slot);
	SpinGuard guard(e.pool_lock);
	if (e.load_state() != ProcessState::Active)
		return -2;
	std::int32_t w = e.idle_head;
	if (w < 0)
		return -1;
	e.idle_head = _region.worker(w).next_idle;
	--e.idle_count;
	return w;
}

template <typename BeforeWake>
Runtime::GiveResult Runtime::give_core(std::uint32_t cpu, std::uint32_t target, shm_off_t task,
	BeforeWake &&before_wake, bool handoff)
{
	CpuSlot &s = _region.cpu(cpu);
	const auto cmd = std::uint32_t(task != kNullOff ? WorkerCommand::RunTask : WorkerCommand::Loop);

	std::int32_t w = pop_idle(target);
	if (w == -2)
		return GiveResult::TargetGone;
	if (w >= 0) {
		WorkerRecord &rec = _region.worker(w);
		rec.cpu.store(std::int32_t(cpu));
		rec.command.store(cmd);
		rec.task.store(task);
		rec.woken_by_handoff.store(handoff ? 1 : 0);
		s.owner_slot.store(target);
		s.worker.store(w);
		// Pin before the wake, so the thread never runs on the old core.
		sys::pin_thread(rec.tid.load(), s.physical_cpu);
		before_wake();
		rec.state.store(std::uint32_t(WorkerState::Running), std::memory_order_seq_cst);
		sys::futex_wake(rec.state);
		return GiveResult::Given;
	}

	if (target == _slot) {
		s.owner_slot.store(target);
		before_wake();
		spawn_worker(cpu, WorkerCommand(cmd), task, handoff);
		return GiveResult::Given;
	}

	ProcessEntry &e = _region.process(target);
	{
		SpinGuard guard(e.mailbox_lock);
		if (e.load_state() != ProcessState::Active)
			return GiveResult::TargetGone;
		if (e.mailbox_count == kMailboxCapacity)
			return GiveResult::MailboxFull;
		e.mailbox[(e.mailbox_head + e.mailbox_count) % kMailboxCapacity] = SpawnRequest{std::int32_t(cpu), 0, task};
		++e.mailbox_count;
		s.owner_slot.store(target);
		s.worker.store(-1);
		s.state.store(std::uint32_t(CpuState::Handoff), std::memory_order_seq_cst);
		before_wake();
	}
	e.mailbox_signal.fetch_add(1, std::memory_order_seq_cst);
	sys::futex_wake(e.mailbox_signal);
	_mailbox_requests.fetch_add(1);
	return GiveResult::Given;
}

void Runtime::resume_attached(std::int32_t self_index, std::uint32_t cpu, shm_off_t t)
{
	TaskDescriptor &td = desc(t);
	std::int32_t w = td.attached_worker.load(std::memory_order_acquire);
	WorkerRecord &rec = _region.worker(w);
	CpuSlot &s = _region.cpu(cpu);
	s.task.store(kNullOff);
	s.owner_slot.store(td.owner_slot);
	s.worker.store(w);
	rec.cpu.store(std::int32_t(cpu));
	sys::pin_thread(rec.tid.load(), s.physical_cpu);
	emit(TraceKind::HandoffPark, std::int32_t(cpu), self_index, &td);
	if (td.owner_slot != _slot)
		_handoffs_out.fetch_add(1);
	rec.state.store(std::uint32_t(WorkerState::Running), std::memory_order_seq_cst);
	sys::futex_wake(rec.state);
}

void Runtime::release_core(std::int32_t self_index, std::uint32_t cpu)
{
	Scheduler sched = _region.scheduler();
	sched.exclusive([&] { sched.claim_idle_locked(cpu); });

	for (std::uint32_t i = 1; i < kMaxProcesses; ++i) {
		std::uint32_t q = (_slot + i) % kMaxProcesses;
		if (_region.process(q).load_state() != ProcessState::Active)
			continue;
		GiveResult r = give_core(cpu, q, kNullOff,
			[&] { emit(TraceKind::HandoffPark, std::int32_t(cpu), self_index, nullptr); });
		if (r == GiveResult::Given)
			return;
	}
	// Nobody left to take it; the next attach or reap adopts it.
	sched.exclusive([&] {
		CpuSlot &s = _region.cpu(cpu);
		s.worker.store(-1);
		s.clock_valid = 0;
		s.state.store(std::uint32_t(CpuState::Unowned), std::memory_order_seq_cst);
	});
}

void Runtime::pause_current()
{
	if (t_ctx.rt != this || t_ctx.task == kNullOff)
		throw Error(Errc::NotInTaskContext, "task_pause outside a task");
	const std::int32_t index = t_ctx.worker;
	const shm_off_t t = t_ctx.task;
	WorkerRecord &w = _region.worker(index);
	TaskDescriptor &td = desc(t);
	const auto c = std::uint32_t(w.cpu.load());

	emit(TraceKind::TaskPause, std::int32_t(c), index, &td);
	w.state.store(std::uint32_t(WorkerState::ParkedAttached), std::memory_order_seq_cst);
	// From here on the task may be submitted again and resumed elsewhere.
	td.store_state(TaskState::Paused);

	emit(TraceKind::HandoffPark, std::int32_t(c), index, &td);
	give_core(c, _slot, kNullOff, [] {});

	park_while(w.state, std::uint32_t(WorkerState::ParkedAttached));
	const std::int32_t now_on = w.cpu.load();
	emit(TraceKind::HandoffWake, now_on, index, &td);
	emit(TraceKind::TaskResume, now_on, index, &td);
}

// ---------------------------------------------------------------------------
// Service thread

void Runtime::drain_mailbox(bool leaving)
{
	ProcessEntry &e = self();
	while (true) {
		SpawnRequest req;
		{
			SpinGuard guard(e.mailbox_lock);
			if (e.mailbox_count == 0)
				return;
			req = e.mailbox[e.mailbox_head];
			e.mailbox_head = (e.mailbox_head + 1) % kMailboxCapacity;
			--e.mailbox_count;
		}
		const auto c = std::uint32_t(req.cpu);
		if (!leaving) {
			try {
				spawn_worker(c, req.task != kNullOff ? WorkerCommand::RunTask : WorkerCommand::Loop, req.task,
					true);
				continue;
			} catch (const Error &err) {
				std::fprintf(stderr, "coexec: %s\n", err.what());
			}
		}
		// The core was handed to us; record the receipt before passing it on.
		emit(TraceKind::HandoffWake, std::int32_t(c), -1, req.task != kNullOff ? &desc(req.task) : nullptr);
		if (req.task != kNullOff) {
			Scheduler sched = _region.scheduler();
			_region.cpu(c).task.store(kNullOff);
			int woken = sched.exclusive([&] {
				desc(req.task).store_state(TaskState::Created);
				return sched.submit_locked(desc(req.task));
			});
			sched.wake(woken);
		}
		release_core(-1, c);
	}
}

void Runtime::service_main()
{
	ProcessEntry &e = self();
	std::uint64_t last_reap = sys::now_ns();
	while (true) {
		std::uint32_t seen = e.mailbox_signal.load(std::memory_order_seq_cst);
		bool stop = _service_stop.load();
		drain_mailbox(stop || e.shutdown.load() != 0);
		if (stop)
			break;
		join_finished_threads();
		if (sys::now_ns() - last_reap >= _options.reap_interval_ns) {
			try {
				reap_dead();
			} catch (const std::exception &err) {
				std::fprintf(stderr, "coexec: reap failed: %s\n", err.what());
			}
			last_reap = sys::now_ns();
		}
		sys::futex_wait(e.mailbox_signal, seen, 50'000'000ull);
	}
}

// ---------------------------------------------------------------------------

void task_pause()
{
	if (t_ctx.rt == nullptr || t_ctx.task == kNullOff)
		throw Error(Errc::NotInTaskContext, "task_pause outside a task");
	t_ctx.rt->pause_current();
}

TaskRef current_task()
{
	if (t_ctx.rt == nullptr || t_ctx.task == kNullOff)
		return {};
	return t_ctx.rt->task_at(t_ctx.task);
}

int current_cpu()
{
	if (t_ctx.rt == nullptr || t_ctx.worker < 0)
		return -1;
	return t_ctx.rt->region().worker(t_ctx.worker).cpu.load();
}

int current_worker()
{
	return t_ctx.rt == nullptr ? -1 : t_ctx.worker;
}

} // namespace coexec
