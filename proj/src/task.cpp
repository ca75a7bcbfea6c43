#include "coexec/task.hpp"

#include "coexec/error.hpp"

namespace coexec {

const char *task_state_name(TaskState s) noexcept
{
	switch (s) {
		case TaskState::Created: return "CREATED";
		case TaskState::Ready: return "READY";
		case TaskState::Running: return "RUNNING";
		case TaskState::Paused: return "PAUSED";
		case TaskState::Finished: return "FINISHED";
		case TaskState::Destroyed: return "DESTROYED";
	}
	return "?";
}

std::string Affinity::to_string() const
{
	if (kind == AffinityKind::None)
		return "none";
	std::string s = kind == AffinityKind::Core ? "core:" : "numa:";
	s += std::to_string(target);
	s += mode == AffinityMode::Strict ? ":strict" : ":best";
	return s;
}

Affinity Affinity::parse(const std::string &text)
{
	if (text.empty() || text == "none" || text == "-")
		return none();
	auto c1 = text.find(':');
	auto c2 = text.find(':', c1 == std::string::npos ? c1 : c1 + 1);
	if (c1 == std::string::npos)
		throw Error(Errc::InvalidArgument, "bad affinity: " + text);
	std::string kind = text.substr(0, c1);
	std::string target = text.substr(c1 + 1, c2 == std::string::npos ? std::string::npos : c2 - c1 - 1);
	std::string mode = c2 == std::string::npos ? "strict" : text.substr(c2 + 1);

	Affinity a;
	if (kind == "core")
		a.kind = AffinityKind::Core;
	else if (kind == "numa")
		a.kind = AffinityKind::Numa;
	else
		throw Error(Errc::InvalidArgument, "bad affinity kind: " + text);
	if (mode == "strict")
		a.mode = AffinityMode::Strict;
	else if (mode == "best" || mode == "best_effort")
		a.mode = AffinityMode::BestEffort;
	else
		throw Error(Errc::InvalidArgument, "bad affinity mode: " + text);
	try {
		a.target = std::uint16_t(std::stoul(target));
	} catch (const std::exception &) {
		throw Error(Errc::InvalidArgument, "bad affinity target: " + text);
	}
	return a;
}

} // namespace coexec
