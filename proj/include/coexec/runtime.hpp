#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <sys/types.h>

#include "coexec/config.hpp"
#include "coexec/error.hpp"
#include "coexec/shm_region.hpp"
#include "coexec/task.hpp"
#include "coexec/trace.hpp"

namespace coexec {

class Runtime;

// Handle to a task descriptor in the shared segment.
class TaskRef {
public:
	TaskRef() = default;

	explicit operator bool() const noexcept
	{
		return _desc != nullptr;
	}
	shm_off_t offset() const noexcept
	{
		return _off;
	}
	std::uint64_t id() const noexcept
	{
		return _desc->id;
	}
	pid_t owner_pid() const noexcept
	{
		return _desc->owner_pid;
	}
	TaskState state() const noexcept
	{
		return _desc->load_state();
	}
	std::int32_t priority() const noexcept
	{
		return _desc->priority;
	}
	Affinity affinity() const noexcept
	{
		return _desc->affinity;
	}
	std::int32_t attached_worker() const noexcept
	{
		return _desc->attached_worker.load(std::memory_order_acquire);
	}
	std::span<std::byte> metadata() const noexcept;

	template <typename T>
	T &metadata_as() const
	{
		if (_desc->metadata_size < sizeof(T))
			throw Error(Errc::InvalidArgument, "task metadata smaller than requested type");
		return *reinterpret_cast<T *>(metadata().data());
	}

	TaskDescriptor &descriptor() const noexcept
	{
		return *_desc;
	}

	bool operator==(const TaskRef &o) const noexcept
	{
		return _off == o._off;
	}

private:
	friend class Runtime;
	TaskRef(Runtime *rt, shm_off_t off, TaskDescriptor *desc) : _rt(rt), _off(off), _desc(desc) {}

	Runtime *_rt = nullptr;
	shm_off_t _off = kNullOff;
	TaskDescriptor *_desc = nullptr;
};

using TaskTypeId = std::uint32_t;
using TaskCallback = std::function<void(TaskRef)>;

struct AttachOptions {
	bool tracing = false;
	bool trace_submits = false;
	std::size_t trace_capacity = Tracer::kDefaultCapacity;
	std::size_t trace_max_capacity = Tracer::kDefaultMaxCapacity;
	// Service-thread period for reaping dead registrants.
	std::uint64_t reap_interval_ns = 200'000'000ull;
};

struct RuntimeStats {
	std::uint32_t threads_spawned = 0;
	std::uint32_t threads_live = 0;
	std::uint64_t tasks_run = 0;
	std::uint64_t handoffs_out = 0;
	std::uint64_t mailbox_requests = 0;
	std::uint64_t mailbox_full = 0;
};

// A process's membership in the shared co-execution runtime: its registry
// slot, its workers and its task types. At most one per process.
class Runtime {
public:
	static std::unique_ptr<Runtime> attach(const RegionConfig &cfg, AttachOptions options = {});

	~Runtime();
	Runtime(const Runtime &) = delete;
	Runtime &operator=(const Runtime &) = delete;

	// Leaves the runtime: hands this process's cores over to the others and
	// joins its threads. The last process out removes the segment.
	void detach();
	bool attached() const noexcept
	{
		return _attached.load();
	}

	// Marks registrants whose process died as DEAD, drops their queued
	// tasks and takes over the cores they held.
	std::size_t reap_dead();

	TaskTypeId register_task_type(std::string label, TaskCallback run, TaskCallback completed = {});

	TaskRef create_task(TaskTypeId type, std::size_t metadata_size = 0);
	void submit(TaskRef task);
	void destroy(TaskRef task);

	void set_task_affinity(TaskRef task, Affinity affinity);
	void set_task_priority(TaskRef task, std::int32_t priority);
	void set_app_priority(pid_t pid, std::int32_t priority);

	// Rebuilds a handle from an offset, e.g. one passed by another thread.
	TaskRef task_at(shm_off_t offset);

	Region &region() noexcept
	{
		return _region;
	}
	const RegionConfig &config() const noexcept
	{
		return _config;
	}
	std::uint32_t process_slot() const noexcept
	{
		return _slot;
	}
	pid_t pid() const noexcept
	{
		return _pid;
	}
	Tracer &tracer() noexcept
	{
		return _tracer;
	}
	const std::string &task_type_label(TaskTypeId type) const;

	RuntimeStats stats() const;
	std::uint32_t registry_count() const
	{
		return _region.registry_count();
	}
	std::int64_t tasks_outstanding() const noexcept;

	// Task-context helpers backing task_pause() and friends.
	void pause_current();

private:
	struct TaskType {
		std::string label;
		TaskCallback run;
		TaskCallback completed;
	};

	struct LocalThread {
		std::int32_t worker = -1;
		std::thread thread;
		std::atomic<bool> finished{false};
	};

	enum class GiveResult {
		Given,
		MailboxFull,
		TargetGone,
	};

	Runtime(Region region, const RegionConfig &cfg, std::uint32_t slot, AttachOptions options);

	ProcessEntry &self() const noexcept
	{
		return _region.process(_slot);
	}
	TaskDescriptor &desc(shm_off_t off) const noexcept
	{
		return *_region.segment().at<TaskDescriptor>(off);
	}
	TaskRef ref(shm_off_t off) noexcept
	{
		return TaskRef(this, off, &desc(off));
	}
	TaskRef checked(TaskRef task) const;

	void emit(TraceKind kind, std::int32_t cpu, std::int32_t worker, const TaskDescriptor *task) noexcept;

	// Threads.
	void spawn_worker(std::uint32_t cpu, WorkerCommand cmd, shm_off_t task, bool via_handoff);
	void worker_main(std::int32_t index, LocalThread *self_thread);
	bool core_loop(std::int32_t index, shm_off_t first);
	WorkerCommand park_idle(std::int32_t index);
	void run_task(std::int32_t index, shm_off_t task);
	void service_main();
	void drain_mailbox(bool leaving);
	void join_finished_threads();

	// Core handoff.
	std::int32_t pop_idle(std::uint32_t slot);
	template <typename BeforeWake>
	GiveResult give_core(std::uint32_t cpu, std::uint32_t target, shm_off_t task, BeforeWake &&before_wake,
		bool handoff = true);
	void resume_attached(std::int32_t self_index, std::uint32_t cpu, shm_off_t task);
	void release_core(std::int32_t self_index, std::uint32_t cpu);
	void adopt_cores(const std::vector<std::uint32_t> &cores);
	void drop_task(shm_off_t task);

	Region _region;
	RegionConfig _config;
	std::uint32_t _slot;
	pid_t _pid;
	AttachOptions _options;
	Tracer _tracer;
	std::atomic<bool> _attached{true};

	// Append-only; readers index it without the mutex, up to _type_count.
	static constexpr std::size_t kMaxTaskTypes = 1024;
	std::mutex _types_mutex;
	std::unique_ptr<TaskType> _types[kMaxTaskTypes];
	std::atomic<std::uint32_t> _type_count{0};
	const TaskType &task_type(TaskTypeId type) const;

	std::mutex _threads_mutex;
	std::vector<std::unique_ptr<LocalThread>> _threads;
	std::atomic<std::uint32_t> _threads_spawned{0};
	std::atomic<std::uint32_t> _threads_live{0};

	std::thread _service;
	std::atomic<bool> _service_stop{false};
	std::mutex _reap_mutex;

	std::atomic<std::uint64_t> _tasks_run{0};
	std::atomic<std::uint64_t> _handoffs_out{0};
	std::atomic<std::uint64_t> _mailbox_requests{0};
	std::atomic<std::uint64_t> _mailbox_full{0};
};

// Blocks the calling task until it is submitted again; its worker stays
// attached and the core goes to other work. Throws NotInTaskContext when
// not called from a run callback.
void task_pause();

// Task being run by the calling thread (empty outside task context).
TaskRef current_task();

// Core index the calling worker occupies, or -1.
int current_cpu();

// Worker record index of the calling thread, or -1.
int current_worker();

} // namespace coexec
