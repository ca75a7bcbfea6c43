#include "coexec/shm_region.hpp"

#include <cerrno>
#include <cstring>
#include <sched.h>

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include "coexec/error.hpp"
#include "coexec/sys.hpp"

namespace coexec {

namespace {

constexpr std::size_t align_up(std::size_t v, std::size_t a)
{
	return (v + a - 1) & ~(a - 1);
}

struct Layout {
	std::size_t registry;
	std::size_t cpus;
	std::size_t workers;
	std::uint32_t worker_capacity;
	std::size_t scheduler;
	std::size_t allocator;
};

Layout compute_layout(std::uint32_t core_count)
{
	Layout l{};
	std::size_t off = align_up(sizeof(SegmentHeader), 4096);
	l.registry = off;
	off = align_up(off + sizeof(ProcessEntry) * kMaxProcesses, kCacheLine);
	l.cpus = off;
	off = align_up(off + sizeof(CpuSlot) * core_count, kCacheLine);
	l.worker_capacity = 1024 + 16 * core_count;
	l.workers = off;
	off = align_up(off + sizeof(WorkerRecord) * l.worker_capacity, kCacheLine);
	l.scheduler = off;
	off = align_up(off + sizeof(SchedulerState), 4096);
	l.allocator = off;
	return l;
}

std::string os_error(const char *what, const std::string &name)
{
	return std::string(what) + " " + name + ": " + std::strerror(errno);
}

} // namespace

const char *process_state_name(ProcessState s) noexcept
{
	switch (s) {
		case ProcessState::Empty: return "EMPTY";
		case ProcessState::Active: return "ACTIVE";
		case ProcessState::Leaving: return "LEAVING";
		case ProcessState::Dead: return "DEAD";
	}
	return "?";
}

std::size_t Region::minimum_size(std::uint32_t core_count)
{
	return compute_layout(core_count).allocator + ShmAllocator::minimum_size(core_count);
}

void Region::validate_config(const RegionConfig &cfg)
{
	if (cfg.core_count == 0)
		throw Error(Errc::ConfigMismatch, "core_count must be positive");
	if (cfg.core_count > kMaxCores)
		throw Error(Errc::ConfigMismatch, "core_count above " + std::to_string(kMaxCores));
	if (cfg.numa_domains == 0 || cfg.numa_domains > kMaxNumaDomains || cfg.numa_domains > cfg.core_count)
		throw Error(Errc::ConfigMismatch, "numa_domains must lie in [1, min(core_count, 16)]");
	if (cfg.segment_size < minimum_size(cfg.core_count))
		throw Error(Errc::ConfigMismatch, "segment_size " + std::to_string(cfg.segment_size) +
			" below the minimum layout size " + std::to_string(minimum_size(cfg.core_count)));
	if (cfg.segment_name_seed.empty() || cfg.segment_name_seed.find('/') != std::string::npos)
		throw Error(Errc::InvalidArgument, "segment name seed must be non-empty and contain no '/'");
}

void Region::initialize(SegmentHeader &h, SegmentView seg, const RegionConfig &cfg)
{
	Layout l = compute_layout(cfg.core_count);
	// The mapping of a fresh object is zero-filled; a takeover after a
	// crashed initializer is not, so clear everything past the header.
	std::memset(seg.base() + sizeof(SegmentHeader), 0, l.allocator - sizeof(SegmentHeader));

	h.generation = sys::now_ns();
	h.segment_size = cfg.segment_size;
	h.quantum_ns = std::uint64_t(cfg.quantum.count());
	h.core_count = cfg.core_count;
	h.numa_domains = cfg.numa_domains;
	h.affinity_skip_limit = cfg.affinity_skip_limit;
	h.allocator_debug = cfg.allocator_debug ? 1 : 0;
	h.registry_off = l.registry;
	h.cpus_off = l.cpus;
	h.workers_off = l.workers;
	h.worker_capacity = l.worker_capacity;
	h.scheduler_off = l.scheduler;
	h.allocator_off = l.allocator;
	h.arena_end = cfg.segment_size;
	h.next_task_id.store(1);
	new (&h.region_lock) RobustSpinLock();
	new (&h.worker_lock) RobustSpinLock();

	auto *procs = seg.at<ProcessEntry>(l.registry);
	for (std::uint32_t i = 0; i < kMaxProcesses; ++i) {
		procs[i].state.store(std::uint32_t(ProcessState::Empty));
		procs[i].idle_head = -1;
	}

	std::vector<int> physical = sys::allowed_cpus();
	auto *cpus = seg.at<CpuSlot>(l.cpus);
	for (std::uint32_t c = 0; c < cfg.core_count; ++c) {
		cpus[c].state.store(std::uint32_t(CpuState::Unowned));
		cpus[c].worker.store(-1);
		cpus[c].numa = std::uint32_t(std::uint64_t(c) * cfg.numa_domains / cfg.core_count);
		cpus[c].physical_cpu = physical.empty() ? -1 : physical[c % physical.size()];
	}

	auto *workers = seg.at<WorkerRecord>(l.workers);
	for (std::uint32_t i = 0; i < l.worker_capacity; ++i) {
		workers[i].state.store(std::uint32_t(WorkerState::Free));
		workers[i].cpu.store(-1);
		workers[i].next_idle = -1;
		workers[i].next_free = i + 1 < l.worker_capacity ? std::int32_t(i + 1) : -1;
	}
	h.worker_free_head = 0;
	h.workers_in_use = 0;

	Scheduler::initialize(*seg.at<SchedulerState>(l.scheduler));
	ShmAllocator::initialize(seg, l.allocator, cfg.segment_size, cfg.core_count, cfg.allocator_debug);
	h.magic = kSegmentMagic;
}

void Region::check_matches(const RegionConfig &cfg) const
{
	const SegmentHeader &h = header();
	auto mismatch = [&](const char *what, std::uint64_t have, std::uint64_t want) {
		throw Error(Errc::ConfigMismatch, std::string("segment ") + _name + " has " + what + "=" +
			std::to_string(have) + ", requested " + std::to_string(want));
	};
	if (h.magic != kSegmentMagic)
		throw Error(Errc::ConfigMismatch, "segment " + _name + " has an unknown layout");
	if (h.segment_size != cfg.segment_size)
		mismatch("segment_size", h.segment_size, cfg.segment_size);
	if (h.core_count != cfg.core_count)
		mismatch("core_count", h.core_count, cfg.core_count);
	if (h.quantum_ns != std::uint64_t(cfg.quantum.count()))
		mismatch("quantum_ns", h.quantum_ns, std::uint64_t(cfg.quantum.count()));
	if (h.numa_domains != cfg.numa_domains)
		mismatch("numa_domains", h.numa_domains, cfg.numa_domains);
}

Region Region::open(const RegionConfig &cfg)
{
	validate_config(cfg);
	const std::string name = cfg.segment_name();
	const mode_t mode = cfg.user_scoped ? 0600 : 0666;

	while (true) {
		int fd = shm_open(name.c_str(), O_RDWR | O_CREAT, mode);
		if (fd < 0)
			throw Error(Errc::MapFailure, os_error("shm_open", name));
		struct stat st {};
		if (fstat(fd, &st) != 0) {
			close(fd);
			throw Error(Errc::MapFailure, os_error("fstat", name));
		}
		if (st.st_size == 0) {
			if (ftruncate(fd, off_t(cfg.segment_size)) != 0) {
				close(fd);
				throw Error(Errc::MapFailure, os_error("ftruncate", name));
			}
		} else if (std::size_t(st.st_size) != cfg.segment_size) {
			close(fd);
			throw Error(Errc::ConfigMismatch, "segment " + name + " exists with size " +
				std::to_string(st.st_size) + ", requested " + std::to_string(cfg.segment_size));
		}
		void *base = mmap(nullptr, cfg.segment_size, PROT_READ | PROT_WRITE, MAP_SHARED, fd, 0);
		close(fd);
		if (base == MAP_FAILED)
			throw Error(Errc::MapFailure, os_error("mmap", name));

		Region r(name, static_cast<std::byte *>(base), cfg.segment_size);
		SegmentHeader &h = r.header();
		const pid_t me = sys::current_pid();

		std::uint32_t expected = std::uint32_t(InitState::Empty);
		if (h.init_state.compare_exchange_strong(expected, std::uint32_t(InitState::Initializing))) {
			h.initializer.store(me);
			h.init_started = sys::now_ns();
			initialize(h, r._segment, cfg);
			h.init_state.store(std::uint32_t(InitState::Ready), std::memory_order_release);
		} else {
			sys::Backoff backoff;
			std::uint64_t since = sys::now_ns();
			while (true) {
				auto s = InitState(h.init_state.load(std::memory_order_acquire));
				if (s == InitState::Ready || s == InitState::Destroyed)
					break;
				backoff.pause();
				if (sys::now_ns() - since > kWatchdogNs) {
					// The initializer may have died half-way.
					pid_t owner = h.initializer.load();
					if (owner != 0 && !sys::process_alive(owner) &&
						h.initializer.compare_exchange_strong(owner, me)) {
						initialize(h, r._segment, cfg);
						h.init_state.store(std::uint32_t(InitState::Ready), std::memory_order_release);
						break;
					}
					since = sys::now_ns();
				}
			}
		}

		if (InitState(h.init_state.load(std::memory_order_acquire)) == InitState::Destroyed) {
			// Raced with the last detacher, which is about to unlink the
			// name; try again with a fresh object.
			r.unmap();
			sched_yield();
			continue;
		}
		r.check_matches(cfg);
		return r;
	}
}

std::optional<Region> Region::open_existing(const RegionConfig &cfg)
{
	const std::string name = cfg.segment_name();
	int fd = shm_open(name.c_str(), O_RDWR, 0);
	if (fd < 0)
		return std::nullopt;
	struct stat st {};
	if (fstat(fd, &st) != 0 || st.st_size == 0) {
		close(fd);
		return std::nullopt;
	}
	void *base = mmap(nullptr, std::size_t(st.st_size), PROT_READ | PROT_WRITE, MAP_SHARED, fd, 0);
	close(fd);
	if (base == MAP_FAILED)
		throw Error(Errc::MapFailure, os_error("mmap", name));
	return Region(name, static_cast<std::byte *>(base), std::size_t(st.st_size));
}

bool Region::exists(const std::string &name)
{
	int fd = shm_open(name.c_str(), O_RDONLY, 0);
	if (fd < 0)
		return false;
	close(fd);
	return true;
}

void Region::remove(const std::string &name)
{
	shm_unlink(name.c_str());
}

Region::Region(Region &&other) noexcept : _name(std::move(other._name)), _segment(other._segment)
{
	other._segment = SegmentView();
}

Region &Region::operator=(Region &&other) noexcept
{
	if (this != &other) {
		unmap();
		_name = std::move(other._name);
		_segment = other._segment;
		other._segment = SegmentView();
	}
	return *this;
}

Region::~Region()
{
	unmap();
}

void Region::unmap() noexcept
{
	if (_segment.base() != nullptr)
		munmap(_segment.base(), _segment.size());
	_segment = SegmentView();
}

ProcessEntry &Region::process(std::uint32_t slot) const noexcept
{
	return _segment.at<ProcessEntry>(header().registry_off)[slot];
}

CpuSlot &Region::cpu(std::uint32_t c) const noexcept
{
	return _segment.at<CpuSlot>(header().cpus_off)[c];
}

WorkerRecord &Region::worker(std::int32_t index) const noexcept
{
	return _segment.at<WorkerRecord>(header().workers_off)[index];
}

ShmAllocator Region::allocator() const noexcept
{
	return ShmAllocator(_segment, header().allocator_off);
}

Scheduler Region::scheduler() const noexcept
{
	return Scheduler(_segment, &header());
}

std::optional<std::uint32_t> Region::register_process(pid_t pid, std::uint64_t start_time)
{
	SegmentHeader &h = header();
	SpinGuard guard(h.region_lock);
	if (InitState(h.init_state.load()) != InitState::Ready)
		return std::nullopt;

	std::int32_t free_slot = -1;
	for (std::uint32_t i = 0; i < kMaxProcesses; ++i) {
		ProcessEntry &e = process(i);
		ProcessState s = e.load_state();
		if ((s == ProcessState::Active || s == ProcessState::Leaving) && e.pid.load() == pid &&
			e.start_time == start_time)
			throw Error(Errc::InvalidState, "process " + std::to_string(pid) + " is already attached");
		if ((s == ProcessState::Empty || s == ProcessState::Dead) && free_slot < 0)
			free_slot = std::int32_t(i);
	}
	if (free_slot < 0)
		throw Error(Errc::RegistryFull, "all " + std::to_string(kMaxProcesses) + " process slots are taken");

	ProcessEntry &e = process(std::uint32_t(free_slot));
	e.pid.store(pid);
	e.start_time = start_time;
	e.registered_at = sys::now_ns();
	e.app_priority.store(0);
	e.shutdown.store(0);
	e.tasks_outstanding.store(0);
	e.last_served = 0;
	e.mailbox_head = 0;
	e.mailbox_count = 0;
	e.mailbox_signal.store(0);
	e.idle_head = -1;
	e.idle_count = 0;
	e.workers_spawned.store(0);
	e.state.store(std::uint32_t(ProcessState::Active), std::memory_order_release);
	return std::uint32_t(free_slot);
}

bool Region::unregister_process(std::uint32_t slot)
{
	SegmentHeader &h = header();
	SpinGuard guard(h.region_lock);
	process(slot).state.store(std::uint32_t(ProcessState::Empty), std::memory_order_release);
	process(slot).pid.store(0);
	for (std::uint32_t i = 0; i < kMaxProcesses; ++i) {
		ProcessState s = process(i).load_state();
		if (s == ProcessState::Active || s == ProcessState::Leaving)
			return false;
	}
	h.init_state.store(std::uint32_t(InitState::Destroyed), std::memory_order_release);
	shm_unlink(_name.c_str());
	return true;
}

std::uint32_t Region::registry_count() const
{
	std::uint32_t n = 0;
	for (std::uint32_t i = 0; i < kMaxProcesses; ++i) {
		ProcessState s = process(i).load_state();
		n += s == ProcessState::Active || s == ProcessState::Leaving;
	}
	return n;
}

std::optional<std::uint32_t> Region::find_process(pid_t pid) const
{
	for (std::uint32_t i = 0; i < kMaxProcesses; ++i) {
		const ProcessEntry &e = process(i);
		if (e.load_state() == ProcessState::Active && e.pid.load() == pid)
			return i;
	}
	return std::nullopt;
}

std::int32_t Region::alloc_worker(std::uint32_t owner_slot, pid_t pid)
{
	SegmentHeader &h = header();
	SpinGuard guard(h.worker_lock);
	std::int32_t idx = h.worker_free_head;
	if (idx < 0)
		return -1;
	WorkerRecord &w = worker(idx);
	h.worker_free_head = w.next_free;
	++h.workers_in_use;
	w.next_free = -1;
	w.next_idle = -1;
	w.pid = pid;
	w.owner_slot = owner_slot;
	w.tid.store(0);
	w.cpu.store(-1);
	w.task.store(kNullOff);
	w.woken_by_handoff.store(0);
	w.command.store(std::uint32_t(WorkerCommand::Loop));
	w.state.store(std::uint32_t(WorkerState::Starting), std::memory_order_release);
	return idx;
}

void Region::free_worker(std::int32_t index)
{
	SegmentHeader &h = header();
	SpinGuard guard(h.worker_lock);
	WorkerRecord &w = worker(index);
	if (WorkerState(w.state.load()) == WorkerState::Free)
		return;
	w.state.store(std::uint32_t(WorkerState::Free));
	w.pid = 0;
	w.tid.store(0);
	w.next_free = h.worker_free_head;
	h.worker_free_head = index;
	--h.workers_in_use;
}

std::uint32_t Region::workers_in_use() const
{
	return header().workers_in_use;
}

} // namespace coexec
