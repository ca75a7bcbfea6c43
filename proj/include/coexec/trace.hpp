#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <sys/types.h>

#include "coexec/task.hpp"

namespace coexec {

enum class TraceKind : std::uint8_t {
	TaskStart,
	TaskEnd,
	TaskPause,
	TaskResume,
	HandoffPark,
	HandoffWake,
	SchedIdle,
	TaskSubmit,
};

const char *trace_kind_name(TraceKind k) noexcept;
std::optional<TraceKind> parse_trace_kind(const std::string &name) noexcept;

struct TraceEvent {
	std::uint64_t ts_ns = 0;
	std::int32_t cpu = -1;
	pid_t pid = 0;
	std::int32_t worker = -1;
	std::uint64_t task = 0;
	TraceKind kind = TraceKind::TaskStart;
	// Extra columns: the task's owner and its affinity at the time of the
	// event, so that audits need no side information.
	pid_t owner_pid = 0;
	Affinity affinity;

	bool operator==(const TraceEvent &) const = default;
};

enum class TraceFormat {
	Jsonl,
	Csv,
};

TraceFormat trace_format_for(const std::string &path);

// Per-thread append buffers. Each thread that emits gets its own buffer
// on first use; appends are lock-free. A full buffer grows by `capacity`
// events up to `max_capacity`, after which events are counted as dropped.
class Tracer {
public:
	static constexpr std::size_t kDefaultCapacity = std::size_t(64) << 10;
	static constexpr std::size_t kDefaultMaxCapacity = std::size_t(1) << 20;

	explicit Tracer(bool enabled = false, bool record_submits = false,
		std::size_t capacity = kDefaultCapacity, std::size_t max_capacity = kDefaultMaxCapacity);
	~Tracer();

	bool enabled() const noexcept
	{
		return _enabled;
	}
	bool record_submits() const noexcept
	{
		return _enabled && _record_submits;
	}

	void emit(const TraceEvent &ev) noexcept;

	// All events so far, sorted by timestamp. Call once emitters are quiet.
	std::vector<TraceEvent> collect() const;
	std::uint64_t dropped() const noexcept;

private:
	struct Buffer {
		std::vector<TraceEvent> events;
		std::size_t used = 0;
		std::uint64_t dropped = 0;
	};

	Buffer *local_buffer() noexcept;

	bool _enabled;
	bool _record_submits;
	std::size_t _capacity;
	std::size_t _max_capacity;
	std::uint64_t _id;
	mutable std::mutex _mutex;
	std::vector<std::unique_ptr<Buffer>> _buffers;
};

void sort_events(std::vector<TraceEvent> &events);

void write_trace(const std::string &path, const std::vector<TraceEvent> &events, TraceFormat format);
void write_trace(const std::string &path, const std::vector<TraceEvent> &events);
std::vector<TraceEvent> read_trace(const std::string &path);

// Reads every trace file in `paths`, merges them in timestamp order.
std::vector<TraceEvent> merge_traces(const std::vector<std::string> &paths);

} // namespace coexec
