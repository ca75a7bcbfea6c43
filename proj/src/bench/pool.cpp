#include "coexec/bench/pool.hpp"

#include "coexec/error.hpp"
#include "coexec/sys.hpp"

namespace coexec::bench {

int physical_cpu_of(std::uint32_t logical)
{
	static const std::vector<int> cpus = sys::allowed_cpus();
	return cpus.empty() ? 0 : cpus[logical % cpus.size()];
}

NativePool::NativePool(std::uint32_t threads, IdleMode mode, std::vector<int> pin) : _mode(mode), _pin(std::move(pin))
{
	if (threads == 0)
		throw Error(Errc::InvalidArgument, "pool without threads");
	if (!_pin.empty())
		sys::pin_thread(0, _pin[0]);
	for (std::uint32_t i = 1; i < threads; ++i)
		_helpers.emplace_back([this, i] { helper_main(i); });
}

NativePool::~NativePool()
{
	_stop = true;
	_generation.fetch_add(1);
	_generation.notify_all();
	for (auto &t : _helpers)
		t.join();
}

void NativePool::work_on(Job &job)
{
	std::size_t i;
	while ((i = job.next.fetch_add(1)) < job.count) {
		(*job.body)(i);
		if (job.remaining.fetch_sub(1) == 1 && _mode == IdleMode::Passive)
			job.remaining.notify_all();
	}
}

void NativePool::helper_main(std::uint32_t index)
{
	if (!_pin.empty())
		sys::pin_thread(0, _pin[index % _pin.size()]);
	std::uint64_t seen = 0;
	while (true) {
		if (_mode == IdleMode::Passive) {
			_generation.wait(seen);
		} else {
			while (_generation.load(std::memory_order_acquire) == seen)
				sys::cpu_relax();
		}
		if (_stop.load())
			return;
		seen = _generation.load();
		std::shared_ptr<Job> job;
		{
			std::lock_guard lock(_job_mutex);
			job = _job;
		}
		if (job)
			work_on(*job);
	}
}

void NativePool::parallel_for(std::size_t n, const std::function<void(std::size_t)> &body)
{
	if (n == 0)
		return;
	if (n == 1 || _helpers.empty()) {
		for (std::size_t i = 0; i < n; ++i)
			body(i);
		return;
	}
	auto job = std::make_shared<Job>();
	job->body = &body;
	job->count = n;
	job->remaining = n;
	{
		std::lock_guard lock(_job_mutex);
		_job = job;
	}
	_generation.fetch_add(1);
	if (_mode == IdleMode::Passive)
		_generation.notify_all();
	work_on(*job);
	std::size_t left;
	while ((left = job->remaining.load()) != 0) {
		if (_mode == IdleMode::Passive)
			job->remaining.wait(left);
		else
			sys::cpu_relax();
	}
}

} // namespace coexec::bench
