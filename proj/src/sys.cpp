#include "coexec/sys.hpp"

#include <atomic>
#include <cerrno>
#include <climits>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>

#include <linux/futex.h>
#include <pthread.h>
#include <sched.h>
#include <signal.h>
#include <sys/syscall.h>
#include <unistd.h>

namespace coexec::sys {

std::uint64_t now_ns() noexcept
{
	timespec ts;
	clock_gettime(CLOCK_MONOTONIC, &ts);
	return std::uint64_t(ts.tv_sec) * 1'000'000'000ull + std::uint64_t(ts.tv_nsec);
}

namespace {

// getpid() is a syscall and sits on the lock paths. Forked children drop
// the cached value in the atfork handler.
std::atomic<pid_t> cached_pid{0};

void forget_pid() noexcept
{
	cached_pid.store(0, std::memory_order_relaxed);
}

} // namespace

pid_t current_pid() noexcept
{
	pid_t pid = cached_pid.load(std::memory_order_relaxed);
	if (pid != 0)
		return pid;
	static const int registered = pthread_atfork(nullptr, nullptr, forget_pid);
	(void)registered;
	pid = getpid();
	cached_pid.store(pid, std::memory_order_relaxed);
	return pid;
}

pid_t current_tid() noexcept
{
	return pid_t(syscall(SYS_gettid));
}

bool futex_wait(std::atomic<std::uint32_t> &word, std::uint32_t expected,
	std::optional<std::uint64_t> timeout_ns) noexcept
{
	static_assert(sizeof(std::atomic<std::uint32_t>) == sizeof(std::uint32_t));
	timespec ts;
	timespec *tsp = nullptr;
	if (timeout_ns) {
		ts.tv_sec = time_t(*timeout_ns / 1'000'000'000ull);
		ts.tv_nsec = long(*timeout_ns % 1'000'000'000ull);
		tsp = &ts;
	}
	long rc = syscall(SYS_futex, reinterpret_cast<std::uint32_t *>(&word), FUTEX_WAIT, expected, tsp, nullptr, 0);
	return !(rc == -1 && errno == ETIMEDOUT);
}

void futex_wake(std::atomic<std::uint32_t> &word, int count) noexcept
{
	syscall(SYS_futex, reinterpret_cast<std::uint32_t *>(&word), FUTEX_WAKE, count, nullptr, nullptr, 0);
}

void futex_wake_all(std::atomic<std::uint32_t> &word) noexcept
{
	futex_wake(word, INT_MAX);
}

namespace {

// Fields after the parenthesised comm, which may itself contain spaces.
std::optional<std::vector<std::string>> read_stat_fields(pid_t pid)
{
	std::ifstream in("/proc/" + std::to_string(pid) + "/stat");
	if (!in)
		return std::nullopt;
	std::string line;
	std::getline(in, line);
	auto close = line.rfind(')');
	if (close == std::string::npos)
		return std::nullopt;
	std::istringstream rest(line.substr(close + 1));
	std::vector<std::string> fields;
	std::string f;
	while (rest >> f)
		fields.push_back(f);
	return fields;
}

} // namespace

std::optional<std::uint64_t> process_start_time(pid_t pid)
{
	auto fields = read_stat_fields(pid);
	// fields[0] is field 3 (state); starttime is field 22.
	if (!fields || fields->size() < 20)
		return std::nullopt;
	return std::stoull((*fields)[19]);
}

bool process_alive(pid_t pid, std::uint64_t start_time)
{
	if (pid <= 0)
		return false;
	auto fields = read_stat_fields(pid);
	if (!fields) {
		if (kill(pid, 0) == 0)
			return true;
		return errno == EPERM;
	}
	if (fields->empty())
		return false;
	const std::string &state = (*fields)[0];
	if (state == "Z" || state == "X" || state == "x")
		return false;
	if (start_time != 0 && fields->size() >= 20 && std::stoull((*fields)[19]) != start_time)
		return false;
	return true;
}

std::vector<int> allowed_cpus()
{
	cpu_set_t set;
	CPU_ZERO(&set);
	std::vector<int> cpus;
	if (sched_getaffinity(0, sizeof(set), &set) == 0) {
		for (int c = 0; c < CPU_SETSIZE; ++c)
			if (CPU_ISSET(c, &set))
				cpus.push_back(c);
	}
	if (cpus.empty())
		cpus.push_back(0);
	return cpus;
}

unsigned machine_cores()
{
	return unsigned(allowed_cpus().size());
}

bool pin_thread(pid_t tid, int physical_cpu) noexcept
{
	cpu_set_t set;
	CPU_ZERO(&set);
	CPU_SET(physical_cpu, &set);
	return sched_setaffinity(tid, sizeof(set), &set) == 0;
}

bool pin_thread_to_set(pid_t tid, const std::vector<int> &physical_cpus) noexcept
{
	cpu_set_t set;
	CPU_ZERO(&set);
	for (int c : physical_cpus)
		CPU_SET(c, &set);
	return sched_setaffinity(tid, sizeof(set), &set) == 0;
}

void cpu_relax() noexcept
{
#if defined(__x86_64__) || defined(__i386__)
	__builtin_ia32_pause();
#elif defined(__aarch64__)
	asm volatile("yield" ::: "memory");
#endif
}

void Backoff::pause() noexcept
{
	// A handful of pause instructions, then yield: on an oversubscribed
	// node the lock holder may need our CPU to make progress.
	if (++_count < 8) {
		for (unsigned i = 0; i < (1u << _count) && i < 256; ++i)
			cpu_relax();
	} else {
		sched_yield();
	}
}

} // namespace coexec::sys
