#include "coexec/config.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "coexec/error.hpp"
#include "coexec/sys.hpp"

namespace coexec {

namespace {

std::string trim(const std::string &s)
{
	auto b = s.find_first_not_of(" \t\r\n");
	if (b == std::string::npos)
		return {};
	auto e = s.find_last_not_of(" \t\r\n");
	return s.substr(b, e - b + 1);
}

bool parse_bool(const std::string &key, const std::string &v)
{
	if (v == "true" || v == "1" || v == "yes")
		return true;
	if (v == "false" || v == "0" || v == "no")
		return false;
	throw Error(Errc::InvalidArgument, "bad boolean for " + key + ": " + v);
}

std::uint64_t parse_uint(const std::string &key, const std::string &v)
{
	try {
		std::size_t pos = 0;
		auto n = std::stoull(v, &pos);
		if (pos != v.size())
			throw std::invalid_argument(v);
		return n;
	} catch (const std::exception &) {
		throw Error(Errc::InvalidArgument, "bad integer for " + key + ": " + v);
	}
}

std::uint64_t fnv1a(std::uint64_t h, std::uint64_t v)
{
	for (int i = 0; i < 8; ++i) {
		h ^= (v >> (8 * i)) & 0xff;
		h *= 0x100000001b3ull;
	}
	return h;
}

} // namespace

std::map<std::string, std::string> parse_key_values(const std::string &text)
{
	std::map<std::string, std::string> out;
	std::istringstream in(text);
	std::string line;
	int lineno = 0;
	while (std::getline(in, line)) {
		++lineno;
		auto hash = line.find('#');
		if (hash != std::string::npos)
			line.resize(hash);
		line = trim(line);
		if (line.empty())
			continue;
		auto eq = line.find('=');
		if (eq == std::string::npos)
			throw Error(Errc::InvalidArgument, "line " + std::to_string(lineno) + ": expected key=value");
		out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
	}
	return out;
}

RegionConfig RegionConfig::parse(const std::string &text)
{
	return parse(text, RegionConfig{});
}

RegionConfig RegionConfig::parse(const std::string &text, RegionConfig cfg)
{
	for (const auto &[key, value] : parse_key_values(text)) {
		if (key == "segment_size")
			cfg.segment_size = parse_uint(key, value);
		else if (key == "quantum_ms")
			cfg.quantum = std::chrono::milliseconds(parse_uint(key, value));
		else if (key == "core_count")
			cfg.core_count = std::uint32_t(parse_uint(key, value));
		else if (key == "name_seed")
			cfg.segment_name_seed = value;
		else if (key == "numa_domains")
			cfg.numa_domains = std::uint32_t(parse_uint(key, value));
		else if (key == "affinity_skip_limit")
			cfg.affinity_skip_limit = std::uint32_t(parse_uint(key, value));
		else if (key == "allocator_debug")
			cfg.allocator_debug = parse_bool(key, value);
		else if (key == "user_scoped")
			cfg.user_scoped = parse_bool(key, value);
		else
			throw Error(Errc::InvalidArgument, "unknown config key: " + key);
	}
	return cfg;
}

RegionConfig RegionConfig::from_env()
{
	const char *path = std::getenv("COEXEC_CONFIG");
	if (path == nullptr || *path == '\0')
		return {};
	std::ifstream in(path);
	if (!in)
		throw Error(Errc::IoFailure, std::string("cannot read COEXEC_CONFIG file ") + path);
	std::stringstream ss;
	ss << in.rdbuf();
	return parse(ss.str());
}

std::uint32_t default_core_count()
{
	return std::uint32_t(sys::allowed_cpus().size());
}

std::string RegionConfig::segment_name() const
{
	std::uint64_t h = 0xcbf29ce484222325ull;
	h = fnv1a(h, core_count);
	h = fnv1a(h, segment_size);
	h = fnv1a(h, std::uint64_t(quantum.count()));

	char buf[32];
	std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
	std::string uid = user_scoped ? std::to_string(getuid()) : std::string("all");
	return "/" + segment_name_seed + "-" + uid + "-" + buf;
}

} // namespace coexec
