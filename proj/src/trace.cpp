#include "coexec/trace.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "coexec/error.hpp"

namespace coexec {

namespace {

constexpr const char *kCsvHeader = "ts_ns,cpu,pid,worker,task,kind,owner_pid,affinity";

std::atomic<std::uint64_t> g_tracer_ids{1};

struct LocalSlot {
	std::uint64_t tracer = 0;
	void *buffer = nullptr;
};

thread_local LocalSlot t_local;

bool ends_with(const std::string &s, const std::string &suffix)
{
	return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::vector<std::string> split(const std::string &line, char sep)
{
	std::vector<std::string> out;
	std::string cur;
	std::istringstream in(line);
	while (std::getline(in, cur, sep))
		out.push_back(cur);
	if (!line.empty() && line.back() == sep)
		out.emplace_back();
	return out;
}

TraceKind kind_or_throw(const std::string &name)
{
	auto k = parse_trace_kind(name);
	if (!k)
		throw Error(Errc::IoFailure, "unknown trace event kind: " + name);
	return *k;
}

} // namespace

const char *trace_kind_name(TraceKind k) noexcept
{
	switch (k) {
		case TraceKind::TaskStart: return "TASK_START";
		case TraceKind::TaskEnd: return "TASK_END";
		case TraceKind::TaskPause: return "TASK_PAUSE";
		case TraceKind::TaskResume: return "TASK_RESUME";
		case TraceKind::HandoffPark: return "HANDOFF_PARK";
		case TraceKind::HandoffWake: return "HANDOFF_WAKE";
		case TraceKind::SchedIdle: return "SCHED_IDLE";
		case TraceKind::TaskSubmit: return "TASK_SUBMIT";
	}
	return "?";
}

std::optional<TraceKind> parse_trace_kind(const std::string &name) noexcept
{
	for (int i = 0; i <= int(TraceKind::TaskSubmit); ++i)
		if (name == trace_kind_name(TraceKind(i)))
			return TraceKind(i);
	return std::nullopt;
}

TraceFormat trace_format_for(const std::string &path)
{
	return ends_with(path, ".csv") ? TraceFormat::Csv : TraceFormat::Jsonl;
}

Tracer::Tracer(bool enabled, bool record_submits, std::size_t capacity, std::size_t max_capacity)
	: _enabled(enabled), _record_submits(record_submits), _capacity(capacity),
	  _max_capacity(std::max(capacity, max_capacity)), _id(g_tracer_ids.fetch_add(1))
{
}

Tracer::~Tracer() = default;

Tracer::Buffer *Tracer::local_buffer() noexcept
{
	if (t_local.tracer == _id)
		return static_cast<Buffer *>(t_local.buffer);
	try {
		auto b = std::make_unique<Buffer>();
		b->events.resize(_capacity);
		Buffer *raw = b.get();
		std::lock_guard lock(_mutex);
		_buffers.push_back(std::move(b));
		t_local.tracer = _id;
		t_local.buffer = raw;
		return raw;
	} catch (...) {
		return nullptr;
	}
}

void Tracer::emit(const TraceEvent &ev) noexcept
{
	if (!_enabled)
		return;
	Buffer *b = local_buffer();
	if (b == nullptr)
		return;
	if (b->used == b->events.size()) {
		std::size_t grown = std::min(b->events.size() + _capacity, _max_capacity);
		if (grown == b->events.size()) {
			++b->dropped;
			return;
		}
		try {
			b->events.resize(grown);
		} catch (...) {
			++b->dropped;
			return;
		}
	}
	b->events[b->used++] = ev;
}

std::vector<TraceEvent> Tracer::collect() const
{
	std::vector<TraceEvent> out;
	std::lock_guard lock(_mutex);
	for (const auto &b : _buffers)
		out.insert(out.end(), b->events.begin(), b->events.begin() + std::ptrdiff_t(b->used));
	sort_events(out);
	return out;
}

std::uint64_t Tracer::dropped() const noexcept
{
	std::lock_guard lock(_mutex);
	std::uint64_t n = 0;
	for (const auto &b : _buffers)
		n += b->dropped;
	return n;
}

void sort_events(std::vector<TraceEvent> &events)
{
	std::stable_sort(events.begin(), events.end(),
		[](const TraceEvent &a, const TraceEvent &b) { return a.ts_ns < b.ts_ns; });
}

void write_trace(const std::string &path, const std::vector<TraceEvent> &events, TraceFormat format)
{
	std::ofstream out(path, std::ios::trunc);
	if (!out)
		throw Error(Errc::IoFailure, "cannot write trace " + path);
	if (format == TraceFormat::Csv) {
		out << kCsvHeader << '\n';
		for (const auto &e : events)
			out << e.ts_ns << ',' << e.cpu << ',' << e.pid << ',' << e.worker << ',' << e.task << ','
				<< trace_kind_name(e.kind) << ',' << e.owner_pid << ',' << e.affinity.to_string() << '\n';
	} else {
		for (const auto &e : events) {
			nlohmann::json j = {
				{"ts_ns", e.ts_ns},
				{"cpu", e.cpu},
				{"pid", e.pid},
				{"worker", e.worker},
				{"task", e.task},
				{"kind", trace_kind_name(e.kind)},
				{"owner_pid", e.owner_pid},
				{"affinity", e.affinity.to_string()},
			};
			out << j.dump() << '\n';
		}
	}
	if (!out)
		throw Error(Errc::IoFailure, "error writing trace " + path);
}

void write_trace(const std::string &path, const std::vector<TraceEvent> &events)
{
	write_trace(path, events, trace_format_for(path));
}

std::vector<TraceEvent> read_trace(const std::string &path)
{
	std::ifstream in(path);
	if (!in)
		throw Error(Errc::IoFailure, "cannot read trace " + path);
	std::vector<TraceEvent> events;
	std::string line;
	std::size_t lineno = 0;
	const bool csv = trace_format_for(path) == TraceFormat::Csv;
	try {
		while (std::getline(in, line)) {
			++lineno;
			if (line.empty())
				continue;
			TraceEvent e;
			if (csv) {
				if (lineno == 1 && line.rfind("ts_ns", 0) == 0)
					continue;
				auto f = split(line, ',');
				if (f.size() != 8)
					throw Error(Errc::IoFailure, "expected 8 fields");
				e.ts_ns = std::stoull(f[0]);
				e.cpu = std::stoi(f[1]);
				e.pid = std::stoi(f[2]);
				e.worker = std::stoi(f[3]);
				e.task = std::stoull(f[4]);
				e.kind = kind_or_throw(f[5]);
				e.owner_pid = std::stoi(f[6]);
				e.affinity = Affinity::parse(f[7]);
			} else {
				auto j = nlohmann::json::parse(line);
				e.ts_ns = j.at("ts_ns").get<std::uint64_t>();
				e.cpu = j.at("cpu").get<std::int32_t>();
				e.pid = j.at("pid").get<pid_t>();
				e.worker = j.at("worker").get<std::int32_t>();
				e.task = j.at("task").get<std::uint64_t>();
				e.kind = kind_or_throw(j.at("kind").get<std::string>());
				e.owner_pid = j.value("owner_pid", pid_t(0));
				e.affinity = Affinity::parse(j.value("affinity", std::string("none")));
			}
			events.push_back(e);
		}
	} catch (const Error &err) {
		throw Error(Errc::IoFailure, path + ":" + std::to_string(lineno) + ": " + err.what());
	} catch (const std::exception &err) {
		throw Error(Errc::IoFailure, path + ":" + std::to_string(lineno) + ": " + err.what());
	}
	return events;
}

std::vector<TraceEvent> merge_traces(const std::vector<std::string> &paths)
{
	std::vector<TraceEvent> all;
	for (const auto &p : paths) {
		auto part = read_trace(p);
		all.insert(all.end(), part.begin(), part.end());
	}
	sort_events(all);
	return all;
}

} // namespace coexec
