#include "coexec/bench/score.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <ostream>

#include "coexec/error.hpp"

namespace coexec::bench {

const char *strategy_name(Strategy s) noexcept
{
	switch (s) {
		case Strategy::Exclusive: return "exclusive";
		case Strategy::OversubIdle: return "oversub_idle";
		case Strategy::OversubBusy: return "oversub_busy";
		case Strategy::StaticColoc: return "static_coloc";
		case Strategy::Coexec: return "coexec";
	}
	return "?";
}

std::vector<Strategy> all_strategies()
{
	return {Strategy::Exclusive, Strategy::OversubIdle, Strategy::OversubBusy, Strategy::StaticColoc, Strategy::Coexec};
}

Strategy parse_strategy(const std::string &name)
{
	for (Strategy s : all_strategies())
		if (name == strategy_name(s))
			return s;
	throw Error(Errc::InvalidArgument, "unknown strategy '" + name + "'");
}

std::string StrategyReport::combination_name() const
{
	std::string out;
	for (const auto &n : combination)
		out += (out.empty() ? "" : "+") + n;
	return out;
}

double StrategyReport::median_makespan() const
{
	return median(makespans);
}

double StrategyReport::iqr_makespan() const
{
	return iqr(makespans);
}

double StrategyReport::median_score() const
{
	return median(scores);
}

std::vector<double> score(const std::vector<double> &makespans)
{
	std::vector<double> out;
	if (makespans.empty())
		return out;
	for (double t : makespans)
		if (!(t > 0))
			throw Error(Errc::InvalidArgument, "makespans must be positive");
	double best = *std::min_element(makespans.begin(), makespans.end());
	for (double t : makespans)
		out.push_back(best / t);
	return out;
}

void score_reports(std::vector<StrategyReport> &reports)
{
	std::map<std::string, std::vector<StrategyReport *>> groups;
	for (auto &r : reports)
		groups[r.combination_name()].push_back(&r);
	for (auto &[name, group] : groups) {
		std::size_t reps = group.front()->makespans.size();
		for (auto *r : group) {
			if (r->makespans.size() != reps)
				throw Error(Errc::InvalidArgument, name + ": strategies have different repetition counts");
			r->scores.assign(reps, 0.0);
		}
		for (std::size_t i = 0; i < reps; ++i) {
			std::vector<double> t;
			for (auto *r : group)
				t.push_back(r->makespans[i]);
			auto p = score(t);
			for (std::size_t j = 0; j < group.size(); ++j)
				group[j]->scores[i] = p[j];
		}
	}
}

double estimate_cosched_speedup(const std::vector<double> &utilizations)
{
	if (utilizations.empty())
		throw Error(Errc::InvalidArgument, "no utilizations");
	double sum = 0;
	for (double u : utilizations) {
		if (!(u > 0 && u <= 1))
			throw Error(Errc::InvalidArgument, "utilization outside (0, 1]");
		sum += u;
	}
	return double(utilizations.size()) / sum;
}

std::uint64_t combination_count(std::uint64_t n, std::uint64_t k)
{
	if (k > n)
		return 0;
	k = std::min(k, n - k);
	std::uint64_t c = 1;
	for (std::uint64_t i = 1; i <= k; ++i)
		c = c * (n - k + i) / i;
	return c;
}

std::vector<std::vector<std::size_t>> combinations(std::size_t n, std::size_t k)
{
	std::vector<std::vector<std::size_t>> out;
	if (k == 0 || k > n)
		return out;
	std::vector<std::size_t> idx(k);
	for (std::size_t i = 0; i < k; ++i)
		idx[i] = i;
	while (true) {
		out.push_back(idx);
		std::size_t i = k;
		while (i > 0 && idx[i - 1] == n - k + i - 1)
			--i;
		if (i == 0)
			break;
		++idx[i - 1];
		for (std::size_t j = i; j < k; ++j)
			idx[j] = idx[j - 1] + 1;
	}
	return out;
}

double quantile(std::vector<double> v, double q)
{
	if (v.empty())
		return std::nan("");
	std::sort(v.begin(), v.end());
	double pos = q * double(v.size() - 1);
	auto lo = std::size_t(std::floor(pos));
	auto hi = std::min(lo + 1, v.size() - 1);
	return v[lo] + (v[hi] - v[lo]) * (pos - double(lo));
}

double median(std::vector<double> v)
{
	return quantile(std::move(v), 0.5);
}

double iqr(std::vector<double> v)
{
	return quantile(v, 0.75) - quantile(v, 0.25);
}

void write_matrix_csv(std::ostream &out, const std::vector<StrategyReport> &reports)
{
	out << "combination,strategy,rep,makespan_s,score\n";
	for (const auto &r : reports)
		for (std::size_t i = 0; i < r.makespans.size(); ++i) {
			out << r.combination_name() << ',' << strategy_name(r.strategy) << ',' << i << ',' << std::setprecision(6)
				<< r.makespans[i] << ',';
			if (i < r.scores.size())
				out << std::setprecision(4) << r.scores[i];
			out << '\n';
		}
}

std::vector<StrategySummary> summarize(const std::vector<StrategyReport> &reports)
{
	std::map<std::string, double> exclusive;
	for (const auto &r : reports)
		if (r.strategy == Strategy::Exclusive)
			exclusive[r.combination_name()] = r.median_makespan();

	std::vector<StrategySummary> out;
	for (Strategy s : all_strategies()) {
		std::vector<double> scores, speedups;
		for (const auto &r : reports) {
			if (r.strategy != s)
				continue;
			scores.push_back(r.median_score());
			auto it = exclusive.find(r.combination_name());
			if (it != exclusive.end())
				speedups.push_back(it->second / r.median_makespan());
		}
		if (scores.empty())
			continue;
		StrategySummary sum{s};
		sum.combinations = scores.size();
		sum.median_score = median(scores);
		sum.min_score = *std::min_element(scores.begin(), scores.end());
		sum.median_speedup_vs_exclusive = speedups.empty() ? std::nan("") : median(speedups);
		out.push_back(sum);
	}
	return out;
}

void write_summary(std::ostream &out, const std::vector<StrategySummary> &summary)
{
	out << std::left << std::setw(14) << "strategy" << std::right << std::setw(8) << "combos" << std::setw(14)
		<< "median_score" << std::setw(11) << "min_score" << std::setw(16) << "speedup_vs_excl" << '\n';
	for (const auto &s : summary)
		out << std::left << std::setw(14) << strategy_name(s.strategy) << std::right << std::setw(8) << s.combinations
			<< std::fixed << std::setprecision(4) << std::setw(14) << s.median_score << std::setw(11) << s.min_score
			<< std::setw(16) << s.median_speedup_vs_exclusive << std::defaultfloat << '\n';
}

} // namespace coexec::bench
