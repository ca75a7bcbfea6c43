#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace coexec::bench {

enum class Strategy {
	Exclusive,
	OversubIdle,
	OversubBusy,
	StaticColoc,
	Coexec,
};

const char *strategy_name(Strategy s) noexcept;
Strategy parse_strategy(const std::string &name);
std::vector<Strategy> all_strategies();

// Makespans of one strategy on one app combination, with per-repetition
// Performance Scores once score_reports() has run over all strategies.
struct StrategyReport {
	std::vector<std::string> combination;
	Strategy strategy = Strategy::Exclusive;
	std::vector<double> makespans; // seconds, one per repetition
	std::vector<double> scores;

	std::string combination_name() const; // "a+b+c"
	double median_makespan() const;
	double iqr_makespan() const;
	double median_score() const;
};

// p_s = min over strategies of t / t_s.
std::vector<double> score(const std::vector<double> &makespans);

// Fills `scores` of every report; reports are grouped by combination and
// scored repetition by repetition.
void score_reports(std::vector<StrategyReport> &reports);

// Speedup of running n applications together over running them one after
// the other, when each alone keeps only `utilization` of the node busy and
// their solo times are equal: n / sum(utilization).
double estimate_cosched_speedup(const std::vector<double> &utilizations);

std::uint64_t combination_count(std::uint64_t n, std::uint64_t k);
// All k-subsets of {0 .. n-1} in lexicographic order.
std::vector<std::vector<std::size_t>> combinations(std::size_t n, std::size_t k);

double median(std::vector<double> v);
// Interquartile range, linear interpolation between order statistics.
double iqr(std::vector<double> v);
double quantile(std::vector<double> v, double q);

// Long form: combination,strategy,rep,makespan_s,score
void write_matrix_csv(std::ostream &out, const std::vector<StrategyReport> &reports);

struct StrategySummary {
	Strategy strategy;
	std::size_t combinations = 0;
	// Median over combinations of each combination's median score.
	double median_score = 0;
	double min_score = 0;
	// Median over combinations of t_exclusive / t_s (median makespans).
	double median_speedup_vs_exclusive = 0;
};

std::vector<StrategySummary> summarize(const std::vector<StrategyReport> &reports);
void write_summary(std::ostream &out, const std::vector<StrategySummary> &summary);

} // namespace coexec::bench
