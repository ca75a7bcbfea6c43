#include "coexec/bench/app.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "coexec/error.hpp"

namespace coexec::bench {

namespace {

constexpr std::size_t kLine = 64;
constexpr std::size_t kWordsPerLine = kLine / sizeof(std::uint64_t);

std::vector<std::string> split(const std::string &s, char sep)
{
	std::vector<std::string> out;
	std::string cur;
	std::istringstream in(s);
	while (std::getline(in, cur, sep))
		out.push_back(cur);
	if (!s.empty() && s.back() == sep)
		out.emplace_back();
	return out;
}

template <typename T>
T parse_number(const std::string &text, const std::string &what)
{
	try {
		std::size_t used = 0;
		T v;
		if constexpr (std::is_floating_point_v<T>)
			v = T(std::stod(text, &used));
		else if constexpr (std::is_signed_v<T>)
			v = T(std::stoll(text, &used));
		else {
			if (!text.empty() && text[0] == '-')
				throw std::invalid_argument(text);
			v = T(std::stoull(text, &used));
		}
		if (used != text.size())
			throw std::invalid_argument(text);
		return v;
	} catch (const std::logic_error &) {
		throw Error(Errc::InvalidArgument, "bad " + what + " '" + text + "'");
	}
}

AppKind parse_kind(const std::string &s)
{
	if (s == "compute" || s == "compute_bound")
		return AppKind::Compute;
	if (s == "memory" || s == "memory_bound")
		return AppKind::Memory;
	if (s == "mixed")
		return AppKind::Mixed;
	throw Error(Errc::InvalidArgument, "unknown app kind '" + s + "'");
}

AffinityPolicy parse_policy(const std::string &s)
{
	for (auto p : {AffinityPolicy::None, AffinityPolicy::StrictCore, AffinityPolicy::BestCore, AffinityPolicy::StrictNuma,
			 AffinityPolicy::BestNuma})
		if (s == affinity_policy_name(p))
			return p;
	throw Error(Errc::InvalidArgument, "unknown affinity policy '" + s + "'");
}

// Median of three timed runs of `fn(n)`, in units per microsecond.
template <typename Fn>
double measure_rate(Fn &&fn, std::uint64_t n)
{
	std::vector<double> rates;
	for (int i = 0; i < 3; ++i) {
		auto t0 = std::chrono::steady_clock::now();
		fn(n);
		double us = std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0).count();
		rates.push_back(double(n) / std::max(us, 1.0));
	}
	std::sort(rates.begin(), rates.end());
	return rates[1];
}

volatile std::uint64_t g_sink;

} // namespace

const char *app_kind_name(AppKind k) noexcept
{
	switch (k) {
		case AppKind::Compute: return "compute";
		case AppKind::Memory: return "memory";
		case AppKind::Mixed: return "mixed";
	}
	return "?";
}

const char *affinity_policy_name(AffinityPolicy p) noexcept
{
	switch (p) {
		case AffinityPolicy::None: return "none";
		case AffinityPolicy::StrictCore: return "strict-core";
		case AffinityPolicy::BestCore: return "best-core";
		case AffinityPolicy::StrictNuma: return "strict-numa";
		case AffinityPolicy::BestNuma: return "best-numa";
	}
	return "?";
}

void SyntheticApp::validate() const
{
	if (name.empty())
		throw Error(Errc::InvalidArgument, "app without a name");
	if (!(serial_fraction >= 0.0 && serial_fraction <= 1.0))
		throw Error(Errc::InvalidArgument, name + ": serial_fraction outside [0, 1]");
	if (granularity_us == 0)
		throw Error(Errc::InvalidArgument, name + ": task granularity must be positive");
	if (task_count == 0)
		throw Error(Errc::InvalidArgument, name + ": no tasks");
	if (phases == 0 || phases > task_count)
		throw Error(Errc::InvalidArgument, name + ": phases must be in [1, tasks]");
	if (ws_mb == 0)
		throw Error(Errc::InvalidArgument, name + ": empty working set");
}

SyntheticApp parse_app_spec(const std::string &spec)
{
	auto parts = split(spec, ':');
	if (parts.size() < 5)
		throw Error(Errc::InvalidArgument, "app spec '" + spec + "' needs name:kind:tasks:gran_us:serial_frac");
	SyntheticApp app;
	app.name = parts[0];
	app.kind = parse_kind(parts[1]);
	app.task_count = parse_number<std::uint32_t>(parts[2], "task count");
	app.granularity_us = parse_number<std::uint32_t>(parts[3], "granularity");
	app.serial_fraction = parse_number<double>(parts[4], "serial fraction");
	for (std::size_t i = 5; i < parts.size(); ++i) {
		auto eq = parts[i].find('=');
		if (eq == std::string::npos)
			throw Error(Errc::InvalidArgument, "expected key=value, got '" + parts[i] + "'");
		std::string key = parts[i].substr(0, eq), value = parts[i].substr(eq + 1);
		if (key == "phases")
			app.phases = parse_number<std::uint32_t>(value, "phases");
		else if (key == "prio" || key == "priority")
			app.priority = parse_number<std::int32_t>(value, "priority");
		else if (key == "affinity")
			app.affinity = parse_policy(value);
		else if (key == "ws_mb")
			app.ws_mb = parse_number<std::uint32_t>(value, "ws_mb");
		else
			throw Error(Errc::InvalidArgument, "unknown app option '" + key + "'");
	}
	app.validate();
	return app;
}

std::string format_app_spec(const SyntheticApp &app)
{
	std::ostringstream out;
	out << app.name << ':' << app_kind_name(app.kind) << ':' << app.task_count << ':' << app.granularity_us << ':'
		<< app.serial_fraction;
	if (app.phases != 1)
		out << ":phases=" << app.phases;
	if (app.priority != 0)
		out << ":prio=" << app.priority;
	if (app.affinity != AffinityPolicy::None)
		out << ":affinity=" << affinity_policy_name(app.affinity);
	if (app.ws_mb != 32)
		out << ":ws_mb=" << app.ws_mb;
	return out.str();
}

std::vector<SyntheticApp> parse_app_list(const std::string &comma_separated)
{
	std::vector<SyntheticApp> apps;
	for (const std::string &s : split(comma_separated, ','))
		if (!s.empty())
			apps.push_back(parse_app_spec(s));
	if (apps.empty())
		throw Error(Errc::InvalidArgument, "no apps given");
	return apps;
}

std::vector<SyntheticApp> default_apps()
{
	return {
		parse_app_spec("cpu:compute:240:500:0"),
		parse_app_spec("serial:compute:240:500:0.5"),
		parse_app_spec("mem:memory:240:500:0.1"),
		parse_app_spec("sync:mixed:240:500:0.2:phases=20"),
	};
}

std::uint64_t WorkloadPlan::total_tasks() const
{
	std::uint64_t n = 0;
	for (const Phase &p : phases)
		n += p.serial + p.parallel;
	return n;
}

double WorkloadPlan::ideal_span(std::uint32_t cores) const
{
	double span = 0;
	for (const Phase &p : phases)
		span += p.serial + std::ceil(double(p.parallel) / std::max(cores, 1u));
	return span;
}

WorkloadPlan plan_workload(const SyntheticApp &app, std::uint32_t cores)
{
	app.validate();
	if (cores == 0)
		throw Error(Errc::InvalidArgument, "plan for zero cores");
	WorkloadPlan plan;
	const double f = app.serial_fraction;
	for (std::uint32_t i = 0; i < app.phases; ++i) {
		std::uint32_t tasks = app.task_count / app.phases + (i < app.task_count % app.phases ? 1 : 0);
		// serial / (serial + parallel / cores) = f
		std::uint32_t parallel = f >= 1.0 ? 0 : std::uint32_t(std::lround(tasks / (1.0 + f / (cores * (1.0 - f)))));
		parallel = std::min(parallel, tasks);
		plan.phases.push_back(Phase{tasks - parallel, parallel});
	}
	return plan;
}

std::uint64_t compute_kernel(std::uint64_t iterations) noexcept
{
	std::uint64_t x = iterations | 1;
	for (std::uint64_t i = 0; i < iterations; ++i)
		x = x * 6364136223846793005ull + 1442695040888963407ull;
	return x;
}

std::uint64_t memory_kernel(const std::uint64_t *buffer, std::size_t lines_total, std::size_t first,
	std::uint64_t lines) noexcept
{
	std::uint64_t sum = 0;
	std::size_t line = first % lines_total;
	for (std::uint64_t i = 0; i < lines; ++i) {
		sum += buffer[line * kWordsPerLine];
		if (++line == lines_total)
			line = 0;
	}
	return sum;
}

const Calibration &calibration()
{
	static const Calibration cal = [] {
		Calibration c;
		compute_kernel(1 << 20);
		c.compute_iters_per_us = measure_rate([](std::uint64_t n) { g_sink = compute_kernel(n); }, 20'000'000);

		const std::size_t lines = (std::size_t(32) << 20) / kLine;
		std::unique_ptr<std::uint64_t[]> buf(new std::uint64_t[lines * kWordsPerLine]);
		for (std::size_t i = 0; i < lines * kWordsPerLine; ++i)
			buf[i] = i;
		std::size_t pos = 0;
		c.memory_lines_per_us = measure_rate(
			[&](std::uint64_t n) {
				g_sink = memory_kernel(buf.get(), lines, pos, n);
				pos += n;
			},
			4 * lines);
		return c;
	}();
	return cal;
}

KernelContext::KernelContext(const SyntheticApp &app, const Calibration &cal)
{
	const double us = app.granularity_us;
	switch (app.kind) {
		case AppKind::Compute:
			_compute_iters = std::uint64_t(us * cal.compute_iters_per_us);
			break;
		case AppKind::Memory:
			_memory_lines = std::uint64_t(us * cal.memory_lines_per_us);
			break;
		case AppKind::Mixed:
			_compute_iters = std::uint64_t(us / 2 * cal.compute_iters_per_us);
			_memory_lines = std::uint64_t(us / 2 * cal.memory_lines_per_us);
			break;
	}
	if (_memory_lines > 0) {
		_lines_total = (std::size_t(app.ws_mb) << 20) / kLine;
		_buffer.reset(new std::uint64_t[_lines_total * kWordsPerLine]);
		for (std::size_t i = 0; i < _lines_total * kWordsPerLine; ++i)
			_buffer[i] = i;
	}
}

void KernelContext::run_task(std::uint64_t index) const
{
	std::uint64_t r = 0;
	if (_compute_iters > 0)
		r += compute_kernel(_compute_iters);
	if (_memory_lines > 0)
		r += memory_kernel(_buffer.get(), _lines_total, std::size_t(index * _memory_lines), _memory_lines);
	g_sink = r;
}

} // namespace coexec::bench
