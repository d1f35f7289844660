#pragma once

#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "aftune/verifier.hpp"

namespace aftune {

enum class Strategy : std::uint8_t {
  uniform,    // m distinct blocks from the whole grid
  input_row,  // m distinct blocks from layer block 0 (one per step block)
  per_step,   // m distinct step blocks, one random layer block in each
  list,       // an explicit list
};

std::string to_string(Strategy s);
Strategy strategy_from_string(const std::string& s);

struct AuditPlan {
  std::size_t layer_blocks = 1;
  std::size_t step_blocks = 1;
  std::size_t m = 1;
  Strategy strategy = Strategy::uniform;
  std::uint64_t seed = 0;  // kept secret until audit time
  std::vector<BlockId> explicit_ids;

  static AuditPlan for_grid(const BlockGrid& grid, Strategy s, std::size_t m, std::uint64_t seed);

  std::size_t n_blocks() const { return layer_blocks * step_blocks; }
  /// Candidate pool the strategy draws from.
  std::size_t pool_size() const;
  void validate() const;
};

/// Hash commitment to an audit seed, published before the provider commits.
Digest commit_seed(std::uint64_t seed, HashAlgo algo = HashAlgo::blake3);
bool reveal_matches(const Digest& commitment, std::uint64_t seed);

/// The blocks to verify in audit round `round` (0 for a single audit).
std::vector<BlockId> sample(const AuditPlan& plan, std::uint64_t round = 0);

/// ∏_{i<m} (N−k−i)/(N−i), evaluated in extended precision.
long double p_evade_exact(std::uint64_t n, std::uint64_t k, std::uint64_t m);

struct DetectionApprox {
  double binomial = 0.0;     // 1 − (1−ρ)^m
  double exponential = 0.0;  // 1 − e^{−ρm}
};

DetectionApprox p_detect_approx(double rho, std::uint64_t m);

/// Exact probability that one audit under `plan` samples at least one block of `compromised`.
double predicted_detection(const AuditPlan& plan, const std::set<BlockId>& compromised);

struct CurvePoint {
  std::size_t m = 0;
  double exact = 0.0;
  double binomial = 0.0;
  double exponential = 0.0;
};

std::vector<CurvePoint> detection_curve(std::uint64_t n, std::uint64_t k,
                                        const std::vector<std::size_t>& ms);
std::string curve_csv(const std::vector<CurvePoint>& curve);
std::string curve_svg(const std::vector<CurvePoint>& curve, const std::string& title);

/// Does verifying this block expose tampering?
using BlockOracle = std::function<bool(BlockId)>;

/// Runs real verification once per block and remembers the verdict.
class VerificationOracle {
 public:
  VerificationOracle(const RunLedger& ledger, const TensorStore& store, PrepareOptions opts = {},
                     VerifierConfig cfg = {});
  bool operator()(BlockId id);
  const VerificationReport& report(BlockId id);
  /// Blocks whose verification fails; verifies every block.
  std::set<BlockId> failing_blocks();
  std::size_t verifications() const { return reports_.size(); }

 private:
  const RunLedger& ledger_;
  const TensorStore& store_;
  PrepareOptions opts_;
  VerifierConfig cfg_;
  std::map<BlockId, VerificationReport> reports_;
};

struct CampaignReport {
  AuditPlan plan;
  std::size_t trials = 0;
  std::size_t rounds = 1;
  std::size_t detected = 0;
  double empirical = 0.0;
  double predicted = 0.0;    // 1 − P_evade^rounds
  double ci_half_width = 0.0;  // 3σ of the predicted rate over `trials`
  std::vector<bool> per_trial;

  bool within_ci() const;
  nlohmann::json to_json() const;
  std::string summary() const;
};

/// Independent seeded audits: trial t uses rounds derived from (plan.seed, t).
/// `compromised` supplies the exact prediction; `oracle` decides detection.
CampaignReport run_campaign(const AuditPlan& plan, const BlockOracle& oracle,
                            const std::set<BlockId>& compromised, std::size_t trials,
                            std::size_t rounds = 1);

/// Campaign against a recorded run using real (memoized) verification.
CampaignReport run_campaign(const RunLedger& ledger, const TensorStore& store,
                            const AuditPlan& plan, std::size_t trials, std::size_t rounds = 1,
                            const PrepareOptions& opts = {});

}  // namespace aftune
