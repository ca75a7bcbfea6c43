#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace coexec {

enum class Errc {
	ConfigMismatch,
	RegistryFull,
	MapFailure,
	TasksOutstanding,
	OutOfSharedMemory,
	DoubleFree,
	Corruption,
	InvalidState,
	InvalidTarget,
	InvalidOwner,
	UnknownPid,
	UnknownType,
	NotInTaskContext,
	SpawnFailure,
	IoFailure,
	ChildCrash,
	InvalidArgument,
};

constexpr std::string_view errc_name(Errc code)
{
	switch (code) {
		case Errc::ConfigMismatch: return "ConfigMismatch";
		case Errc::RegistryFull: return "RegistryFull";
		case Errc::MapFailure: return "MapFailure";
		case Errc::TasksOutstanding: return "TasksOutstanding";
		case Errc::OutOfSharedMemory: return "OutOfSharedMemory";
		case Errc::DoubleFree: return "DoubleFree";
		case Errc::Corruption: return "Corruption";
		case Errc::InvalidState: return "InvalidState";
		case Errc::InvalidTarget: return "InvalidTarget";
		case Errc::InvalidOwner: return "InvalidOwner";
		case Errc::UnknownPid: return "UnknownPid";
		case Errc::UnknownType: return "UnknownType";
		case Errc::NotInTaskContext: return "NotInTaskContext";
		case Errc::SpawnFailure: return "SpawnFailure";
		case Errc::IoFailure: return "IoFailure";
		case Errc::ChildCrash: return "ChildCrash";
		case Errc::InvalidArgument: return "InvalidArgument";
	}
	return "Unknown";
}

class Error : public std::runtime_error {
public:
	Error(Errc code, const std::string &what) :
		std::runtime_error(std::string(errc_name(code)) + ": " + what),
		_code(code)
	{
	}

	Errc code() const noexcept
	{
		return _code;
	}

private:
	Errc _code;
};

} // namespace coexec
