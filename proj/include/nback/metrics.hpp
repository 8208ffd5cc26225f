#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "nback/protocols.hpp"

namespace nback {

struct Count {
  int correct = 0;
  int total = 0;
  double value() const { return total ? static_cast<double>(correct) / total : 0.0; }
  Count& operator+=(const Count& o) {
    correct += o.correct;
    total += o.total;
    return *this;
  }
  bool operator==(const Count&) const = default;
};

struct AccuracySummary {
  int target_lag = 0;  // m of the retrieval accuracy
  int instructed_lag = 0;
  Count retrieval;     // steps i > m of every trial
  Count task;          // label vs lag-n truth, every step
  /// Retrieval accuracy at other lags, keyed by m (1 .. n+1).
  std::map<int, Count> by_lag;
  std::vector<double> per_trial_retrieval, per_trial_task;
  int trials = 0;

  double retrieval_accuracy() const { return retrieval.value(); }
  double task_accuracy() const { return task.value(); }
};

/// Retrieval of a step (an empty MaybeLetter for "none"); nullopt when the
/// reply is malformed.
std::optional<MaybeLetter> step_retrieval(const StepRecord& s);

/// Fraction of steps i > m whose retrieval equals test[i-m]; malformed or
/// missing steps count as wrong. Task accuracy grades labels against the
/// instructed lag over all steps. Free-run records of one lag and length.
AccuracySummary retrieval_accuracy(const std::vector<RunRecord>& records, int target_lag);

struct CurvePoint {
  int step = 0;
  Count count;
  double value() const { return count.value(); }
};

struct MaintenanceCurve {
  int lag = 0;                    // m
  std::vector<CurvePoint> points; // steps m+1 .. L
  /// Value at step i, if defined.
  std::optional<double> at(int step) const;
};

/// A(m, i) for m = 1..n over free-run records sharing one configuration.
std::vector<MaintenanceCurve> maintenance_curves(const std::vector<RunRecord>& records, int n);

/// First step i with A(to, i) = 1 and A(from, i) < 1, if any.
std::optional<int> detect_switch_step(const std::vector<MaintenanceCurve>& curves, int from_lag, int to_lag);

struct ForcedPrefixPoint {
  int forced_lag = 0;
  int prefix = 0;
  Count count;  // free steps i > prefix whose retrieval is forced_lag-consistent
};

/// A_{n,m}(m, i+1:L) per (forced lag, prefix length) over history records.
std::vector<ForcedPrefixPoint> forced_prefix_accuracy(const std::vector<RunRecord>& records);

/// P[n][m]; absent cells are gaps, never zero.
class LogprobTable {
 public:
  void add(int n, int m, double trial_mean);
  std::optional<double> at(int n, int m) const;
  int trials(int n, int m) const;
  const std::map<int, std::map<int, std::pair<double, int>>>& cells() const { return sums_; }
  /// Rows n = 1..max_n, columns m = 1..max_m.
  std::vector<std::vector<std::optional<double>>> dense(int max_n, int max_m) const;
  /// Rows where max_m P[n][m] is attained at m = n (only complete rows).
  bool diagonal_dominant(int n) const;

 private:
  std::map<int, std::map<int, std::pair<double, int>>> sums_;  // n -> m -> (sum of trial means, trials)
};

struct LogprobTables {
  LogprobTable with_demo;     // P
  LogprobTable without_demo;  // P-minus
};

/// Builds P and P-minus from score records.
LogprobTables counterfactual_logprob_table(const std::vector<RunRecord>& records);

enum class Tier { T1, T2, T3 };
std::string to_string(Tier t);

struct TierThresholds {
  double low = 0.20;   // both <= low: T3
  double high = 0.80;  // both > high: T1
};

struct TierLabel {
  Tier tier = Tier::T2;
  double acc2 = 0, acc3 = 0;
};

TierLabel classify_tier(double acc2, double acc3, TierThresholds thresholds = {});

}  // namespace nback
