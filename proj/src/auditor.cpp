#include "aftune/auditor.hpp"

#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "aftune/rng.hpp"

namespace aftune {

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::uniform: return "uniform";
    case Strategy::input_row: return "input-row";
    case Strategy::per_step: return "per-step";
    case Strategy::list: return "list";
  }
  return "?";
}

Strategy strategy_from_string(const std::string& s) {
  if (s == "uniform") return Strategy::uniform;
  if (s == "input-row") return Strategy::input_row;
  if (s == "per-step") return Strategy::per_step;
  if (s == "list") return Strategy::list;
  throw ConfigError("unknown audit strategy '" + s + "'");
}

AuditPlan AuditPlan::for_grid(const BlockGrid& grid, Strategy s, std::size_t m, std::uint64_t seed) {
  AuditPlan p;
  p.layer_blocks = grid.num_layer_blocks();
  p.step_blocks = grid.num_step_blocks();
  p.strategy = s;
  p.m = m;
  p.seed = seed;
  return p;
}

std::size_t AuditPlan::pool_size() const {
  switch (strategy) {
    case Strategy::uniform: return n_blocks();
    case Strategy::input_row:
    case Strategy::per_step: return step_blocks;
    case Strategy::list: return explicit_ids.size();
  }
  return 0;
}

void AuditPlan::validate() const {
  if (layer_blocks < 1 || step_blocks < 1) throw ConfigError("audit plan needs a non-empty grid");
  if (strategy == Strategy::list) {
    std::set<BlockId> seen;
    for (const auto& id : explicit_ids) {
      if (id.i >= layer_blocks || id.j >= step_blocks) {
        throw ConfigError("listed block " + to_string(id) + " is outside the grid");
      }
      if (!seen.insert(id).second) throw ConfigError("listed block " + to_string(id) + " repeats");
    }
    return;
  }
  if (m > pool_size()) {
    throw ConfigError("sample size " + std::to_string(m) + " exceeds the " + to_string(strategy) +
                      " candidate pool of " + std::to_string(pool_size()));
  }
}

Digest commit_seed(std::uint64_t seed, HashAlgo algo) {
  Hasher h(algo);
  h.update(std::string("aftune-audit-seed"));
  h.update_u64(seed);
  return h.finish();
}

bool reveal_matches(const Digest& commitment, std::uint64_t seed) {
  return commit_seed(seed, commitment.algo) == commitment;
}

namespace {

/// m distinct indices from [0, n) by a partial Fisher-Yates shuffle.
std::vector<std::size_t> draw_distinct(CounterRng& rng, std::size_t n, std::size_t m) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t k = 0; k < m; ++k) {
    const std::size_t pick = k + static_cast<std::size_t>(rng.below(n - k));
    std::swap(idx[k], idx[pick]);
  }
  idx.resize(m);
  return idx;
}

long double hypergeometric_evade(std::uint64_t n, std::uint64_t k, std::uint64_t m) {
  return p_evade_exact(n, k, m);
}

}  // namespace

std::vector<BlockId> sample(const AuditPlan& plan, std::uint64_t round) {
  plan.validate();
  if (plan.strategy == Strategy::list) return plan.explicit_ids;
  CounterRng rng(plan.seed, RngPurpose::audit, round);
  std::vector<BlockId> out;
  const auto nlb = static_cast<std::uint32_t>(plan.layer_blocks);
  switch (plan.strategy) {
    case Strategy::uniform:
      for (std::size_t k : draw_distinct(rng, plan.n_blocks(), plan.m)) {
        out.push_back({static_cast<std::uint32_t>(k % nlb), static_cast<std::uint32_t>(k / nlb)});
      }
      break;
    case Strategy::input_row:
      for (std::size_t j : draw_distinct(rng, plan.step_blocks, plan.m)) {
        out.push_back({0, static_cast<std::uint32_t>(j)});
      }
      break;
    case Strategy::per_step:
      for (std::size_t j : draw_distinct(rng, plan.step_blocks, plan.m)) {
        out.push_back({static_cast<std::uint32_t>(rng.below(nlb)), static_cast<std::uint32_t>(j)});
      }
      break;
    case Strategy::list: break;
  }
  return out;
}

long double p_evade_exact(std::uint64_t n, std::uint64_t k, std::uint64_t m) {
  if (k > n || m > n) {
    throw ConfigError("need 0 <= k, m <= N (got N=" + std::to_string(n) + ", k=" +
                      std::to_string(k) + ", m=" + std::to_string(m) + ")");
  }
  if (k == 0) return 1.0L;
  if (m > n - k) return 0.0L;
  long double p = 1.0L;
  for (std::uint64_t i = 0; i < m; ++i) {
    p *= static_cast<long double>(n - k - i) / static_cast<long double>(n - i);
  }
  return std::clamp(p, 0.0L, 1.0L);
}

DetectionApprox p_detect_approx(double rho, std::uint64_t m) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("compromise ratio must be in [0, 1]");
  const double md = static_cast<double>(m);
  return {1.0 - std::pow(1.0 - rho, md), 1.0 - std::exp(-rho * md)};
}

double predicted_detection(const AuditPlan& plan, const std::set<BlockId>& compromised) {
  plan.validate();
  switch (plan.strategy) {
    case Strategy::uniform: {
      std::size_t k = 0;
      for (const auto& id : compromised) k += id.i < plan.layer_blocks && id.j < plan.step_blocks;
      return static_cast<double>(1.0L - hypergeometric_evade(plan.n_blocks(), k, plan.m));
    }
    case Strategy::input_row: {
      std::size_t k = 0;
      for (const auto& id : compromised) k += id.i == 0 && id.j < plan.step_blocks;
      return static_cast<double>(1.0L - hypergeometric_evade(plan.step_blocks, k, plan.m));
    }
    case Strategy::per_step: {
      // Rows are a uniform m-subset S; P_evade = E[∏_{j∈S} a_j] = e_m(a) / C(R, m)
      // with a_j the chance that row j's single pick is clean.
      std::vector<std::size_t> bad(plan.step_blocks, 0);
      for (const auto& id : compromised) {
        if (id.i < plan.layer_blocks && id.j < plan.step_blocks) ++bad[id.j];
      }
      std::vector<long double> e(plan.m + 1, 0.0L);
      e[0] = 1.0L;
      for (std::size_t j = 0; j < plan.step_blocks; ++j) {
        const long double a = 1.0L - static_cast<long double>(bad[j]) / plan.layer_blocks;
        for (std::size_t r = std::min(plan.m, j + 1); r >= 1; --r) e[r] += e[r - 1] * a;
      }
      long double choose = 1.0L;
      for (std::size_t r = 0; r < plan.m; ++r) {
        choose = choose * static_cast<long double>(plan.step_blocks - r) / static_cast<long double>(r + 1);
      }
      return static_cast<double>(1.0L - std::clamp(e[plan.m] / choose, 0.0L, 1.0L));
    }
    case Strategy::list:
      for (const auto& id : plan.explicit_ids) {
        if (compromised.count(id)) return 1.0;
      }
      return 0.0;
  }
  return 0.0;
}

std::vector<CurvePoint> detection_curve(std::uint64_t n, std::uint64_t k,
                                        const std::vector<std::size_t>& ms) {
  std::vector<CurvePoint> out;
  const double rho = n ? static_cast<double>(k) / static_cast<double>(n) : 0.0;
  for (auto m : ms) {
    const auto a = p_detect_approx(rho, m);
    out.push_back({m, static_cast<double>(1.0L - p_evade_exact(n, k, m)), a.binomial, a.exponential});
  }
  return out;
}

std::string curve_csv(const std::vector<CurvePoint>& curve) {
  std::ostringstream o;
  o << "m,p_detect_exact,p_detect_binomial,p_detect_exponential\n" << std::setprecision(10);
  for (const auto& p : curve) o << p.m << ',' << p.exact << ',' << p.binomial << ',' << p.exponential << '\n';
  return o.str();
}

std::string curve_svg(const std::vector<CurvePoint>& curve, const std::string& title) {
  const double w = 640, h = 400, left = 60, right = 20, top = 40, bottom = 50;
  std::size_t mmax = 1;
  for (const auto& p : curve) mmax = std::max(mmax, p.m);
  auto x = [&](double m) { return left + (w - left - right) * m / static_cast<double>(mmax); };
  auto y = [&](double v) { return top + (h - top - bottom) * (1.0 - v); };
  std::ostringstream o;
  o << std::fixed << std::setprecision(2);
  o << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "'>\n";
  o << "<rect width='100%' height='100%' fill='white'/>\n";
  o << "<text x='" << w / 2 << "' y='22' text-anchor='middle' font-family='sans-serif' font-size='14'>"
    << title << "</text>\n";
  o << "<line x1='" << left << "' y1='" << y(0) << "' x2='" << w - right << "' y2='" << y(0)
    << "' stroke='black'/>\n";
  o << "<line x1='" << left << "' y1='" << y(0) << "' x2='" << left << "' y2='" << y(1)
    << "' stroke='black'/>\n";
  for (double v : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    o << "<text x='" << left - 8 << "' y='" << y(v) + 4 << "' text-anchor='end' font-size='11'>" << v
      << "</text>\n";
  }
  o << "<text x='" << w / 2 << "' y='" << h - 12 << "' text-anchor='middle' font-size='12'>sampled blocks m (max "
    << mmax << ")</text>\n";
  const struct {
    double CurvePoint::*field;
    const char* colour;
    const char* name;
  } series[] = {{&CurvePoint::exact, "#1f77b4", "exact"},
                {&CurvePoint::binomial, "#ff7f0e", "1-(1-rho)^m"},
                {&CurvePoint::exponential, "#2ca02c", "1-exp(-rho m)"}};
  int row = 0;
  for (const auto& s : series) {
    o << "<polyline fill='none' stroke='" << s.colour << "' stroke-width='2' points='";
    for (const auto& p : curve) o << x(static_cast<double>(p.m)) << ',' << y(p.*(s.field)) << ' ';
    o << "'/>\n";
    o << "<text x='" << w - right - 150 << "' y='" << y(0.2) + 16 * row++ << "' fill='" << s.colour
      << "' font-size='12'>" << s.name << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

VerificationOracle::VerificationOracle(const RunLedger& ledger, const TensorStore& store,
                                       PrepareOptions opts, VerifierConfig cfg)
    : ledger_(ledger), store_(store), opts_(opts), cfg_(cfg) {}

const VerificationReport& VerificationOracle::report(BlockId id) {
  auto it = reports_.find(id);
  if (it != reports_.end()) return it->second;
  VerificationReport rep;
  try {
    rep = verify_block(prepare_request(ledger_, store_, id, opts_), cfg_);
  } catch (const EvidenceReleased& e) {
    rep.id = id;
    rep.mode = ledger_.manifest().mode;
    rep.verdict = Verdict::evidence_released;
    rep.message = e.what();
  } catch (const RefusedError& e) {
    rep.id = id;
    rep.mode = ledger_.manifest().mode;
    rep.verdict = Verdict::refused;
    rep.message = e.what();
  }
  return reports_.emplace(id, std::move(rep)).first->second;
}

bool VerificationOracle::operator()(BlockId id) { return report(id).verdict == Verdict::fail; }

std::set<BlockId> VerificationOracle::failing_blocks() {
  std::set<BlockId> out;
  for (const auto& id : ledger_.grid().blocks()) {
    if ((*this)(id)) out.insert(id);
  }
  return out;
}

bool CampaignReport::within_ci() const {
  // Exactly 0 or 1 predictions have no spread: the outcome must match exactly.
  return std::abs(empirical - predicted) <= ci_half_width + 1e-12;
}

nlohmann::json CampaignReport::to_json() const {
  return {{"strategy", to_string(plan.strategy)},
          {"m", plan.m},
          {"n_blocks", plan.n_blocks()},
          {"trials", trials},
          {"rounds", rounds},
          {"detected", detected},
          {"empirical_rate", empirical},
          {"predicted_rate", predicted},
          {"ci_half_width", ci_half_width},
          {"within_ci", within_ci()}};
}

std::string CampaignReport::summary() const {
  std::ostringstream o;
  o << std::fixed << std::setprecision(4);
  o << to_string(plan.strategy) << " m=" << plan.m << " rounds=" << rounds << ": detected " << detected
    << "/" << trials << " = " << empirical << " (predicted " << predicted << " +/- " << ci_half_width
    << ")";
  return o.str();
}

CampaignReport run_campaign(const AuditPlan& plan, const BlockOracle& oracle,
                            const std::set<BlockId>& compromised, std::size_t trials,
                            std::size_t rounds) {
  plan.validate();
  if (trials == 0 || rounds == 0) throw ConfigError("campaign needs trials >= 1 and rounds >= 1");
  CampaignReport rep;
  rep.plan = plan;
  rep.trials = trials;
  rep.rounds = rounds;
  const double evade_once = 1.0 - predicted_detection(plan, compromised);
  rep.predicted = 1.0 - std::pow(evade_once, static_cast<double>(rounds));
  rep.ci_half_width = 3.0 * std::sqrt(rep.predicted * (1.0 - rep.predicted) / static_cast<double>(trials));
  for (std::size_t t = 0; t < trials; ++t) {
    bool hit = false;
    for (std::size_t r = 0; r < rounds && !hit; ++r) {
      for (const auto& id : sample(plan, static_cast<std::uint64_t>(t) * rounds + r)) {
        if (oracle(id)) {
          hit = true;
          break;
        }
      }
    }
    rep.per_trial.push_back(hit);
    rep.detected += hit;
  }
  rep.empirical = static_cast<double>(rep.detected) / static_cast<double>(trials);
  return rep;
}

CampaignReport run_campaign(const RunLedger& ledger, const TensorStore& store, const AuditPlan& plan,
                            std::size_t trials, std::size_t rounds, const PrepareOptions& opts) {
  VerificationOracle oracle(ledger, store, opts);
  const auto failing = oracle.failing_blocks();
  return run_campaign(plan, [&](BlockId id) { return oracle(id); }, failing, trials, rounds);
}

}  // namespace aftune
