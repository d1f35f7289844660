#include "aftune/verifier.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

#include "aftune/rng.hpp"
#include "aftune/wire.hpp"

namespace aftune {

using nlohmann::json;

std::string to_string(Verdict v) {
  switch (v) {
    case Verdict::pass: return "pass";
    case Verdict::fail: return "fail";
    case Verdict::evidence_released: return "evidence-released";
    case Verdict::refused: return "refused";
  }
  return "?";
}

std::string to_string(FailureKind k) {
  return k == FailureKind::hash_mismatch ? "hash-mismatch" : "numerical-mismatch";
}

namespace {

Verdict verdict_from(const std::string& s) {
  if (s == "pass") return Verdict::pass;
  if (s == "fail") return Verdict::fail;
  if (s == "evidence-released") return Verdict::evidence_released;
  if (s == "refused") return Verdict::refused;
  throw ConfigError("unknown verdict '" + s + "'");
}

json num(double v) {
  // JSON has no infinity; keep the report parseable.
  if (std::isfinite(v)) return v;
  return std::isnan(v) ? json("nan") : json(v > 0 ? "inf" : "-inf");
}

double num_from(const json& j) {
  if (j.is_number()) return j.get<double>();
  const auto s = j.get<std::string>();
  if (s == "inf") return INFINITY;
  if (s == "-inf") return -INFINITY;
  return NAN;
}

}  // namespace

json VerificationReport::to_json() const {
  json fs = json::array();
  for (const auto& f : failures) {
    fs.push_back({{"kind", aftune::to_string(f.kind)},
                  {"key", aftune::to_string(f.key)},
                  {"detail", f.detail},
                  {"measured", num(f.measured)},
                  {"tolerance", f.tolerance}});
  }
  json cs = json::array();
  for (const auto& c : checks) {
    cs.push_back({{"key", aftune::to_string(c.key)},
                  {"what", c.what},
                  {"relative_error", num(c.relative_error)},
                  {"bitwise", c.bitwise}});
  }
  return {{"block", aftune::to_string(id)},
          {"mode", aftune::to_string(mode)},
          {"verdict", aftune::to_string(verdict)},
          {"failures", fs},
          {"checks", cs},
          {"tolerance", tolerance},
          {"max_error", num(max_error)},
          {"replay_seconds", replay_seconds},
          {"message", message}};
}

VerificationReport VerificationReport::from_json(const json& j) {
  VerificationReport r;
  r.id = parse_block_id(j.at("block").get<std::string>());
  r.mode = j.at("mode").get<std::string>() == "inference" ? RunMode::inference : RunMode::training;
  r.verdict = verdict_from(j.at("verdict").get<std::string>());
  for (const auto& f : j.at("failures")) {
    Failure x;
    x.kind = f.at("kind").get<std::string>() == "hash-mismatch" ? FailureKind::hash_mismatch
                                                                 : FailureKind::numerical_mismatch;
    x.key = key_from_token(f.at("key").get<std::string>());
    x.detail = f.at("detail").get<std::string>();
    x.measured = num_from(f.at("measured"));
    x.tolerance = f.at("tolerance").get<double>();
    r.failures.push_back(x);
  }
  for (const auto& c : j.at("checks")) {
    r.checks.push_back({key_from_token(c.at("key").get<std::string>()),
                        c.at("what").get<std::string>(), num_from(c.at("relative_error")),
                        c.at("bitwise").get<bool>()});
  }
  r.tolerance = j.at("tolerance").get<double>();
  r.max_error = num_from(j.at("max_error"));
  r.replay_seconds = j.value("replay_seconds", 0.0);
  r.message = j.at("message").get<std::string>();
  return r;
}

std::string VerificationReport::summary() const {
  std::ostringstream o;
  o << "block " << aftune::to_string(id) << " (" << aftune::to_string(mode)
    << "): " << aftune::to_string(verdict);
  if (const auto* c = cause()) {
    o << " - " << aftune::to_string(c->kind) << " at " << aftune::to_string(c->key);
    if (c->kind == FailureKind::numerical_mismatch) {
      o << " (relative L2 " << c->measured << " > tau " << c->tolerance << ")";
    }
    if (!c->detail.empty()) o << ": " << c->detail;
    if (failures.size() > 1) o << " [+" << failures.size() - 1 << " more]";
  }
  if (!message.empty()) o << " - " << message;
  if (verdict == Verdict::pass) {
    o << " - " << checks.size() << " replay checks, max relative error " << max_error;
  }
  return o.str();
}

// ---------------------------------------------------------------------------
// wire format

namespace {

void put_key(ByteWriter& w, const BoundaryKey& k) {
  w.u8(static_cast<std::uint8_t>(k.kind));
  w.u32(k.index);
  w.u32(k.step);
}

BoundaryKey get_key(ByteReader& r) {
  BoundaryKey k;
  const auto kind = r.u8();
  if (kind > 3) throw RefusedError("malformed request: bad key kind");
  k.kind = static_cast<BoundaryKind>(kind);
  k.index = r.u32();
  k.step = r.u32();
  return k;
}

void put_digest(ByteWriter& w, const Digest& d) {
  w.u8(static_cast<std::uint8_t>(d.algo));
  w.bytes(d.bytes);
}

Digest get_digest(ByteReader& r) {
  Digest d;
  const auto a = r.u8();
  if (a != 1 && a != 2) throw RefusedError("malformed request: bad hash tag");
  d.algo = static_cast<HashAlgo>(a);
  const auto b = r.bytes(32);
  std::copy(b.begin(), b.end(), d.bytes.begin());
  return d;
}

void put_tensor(ByteWriter& w, const AnyTensor& t) {
  w.u8(static_cast<std::uint8_t>(precision_of(t)));
  const auto& s = shape_of(t);
  w.u32(static_cast<std::uint32_t>(s.size()));
  for (auto d : s) w.u64(d);
  w.blob(to_le_bytes(t));
}

AnyTensor get_tensor(ByteReader& r) {
  const auto p = r.u8();
  if (p != 4 && p != 8) throw RefusedError("malformed request: bad precision");
  Shape s(r.u32());
  for (auto& d : s) d = static_cast<std::size_t>(r.u64());
  const auto bytes = r.blob();
  return tensor_from_le_bytes(static_cast<Precision>(p), s, bytes);
}

void put_digest_map(ByteWriter& w, const std::map<std::uint32_t, Digest>& m) {
  w.u32(static_cast<std::uint32_t>(m.size()));
  for (const auto& [k, d] : m) {
    w.u32(k);
    put_digest(w, d);
  }
}

std::map<std::uint32_t, Digest> get_digest_map(ByteReader& r) {
  std::map<std::uint32_t, Digest> m;
  const auto n = r.u32();
  for (std::uint32_t k = 0; k < n; ++k) {
    const auto idx = r.u32();
    m[idx] = get_digest(r);
  }
  return m;
}

constexpr std::uint32_t kRequestMagic = 0x51524641;  // "AFRQ"

}  // namespace

std::uint64_t VerificationRequest::payload_bytes() const {
  std::uint64_t n = 0;
  for (const auto& [k, t] : tensors) n += element_count(shape_of(t)) * static_cast<unsigned>(precision_of(t));
  for (const auto& [k, t] : labels) n += element_count(shape_of(t)) * static_cast<unsigned>(precision_of(t));
  return n;
}

std::vector<std::uint8_t> VerificationRequest::serialize() const {
  ByteWriter w;
  w.u32(kRequestMagic);
  w.u32(kSchemaVersion);
  w.u32(id.i);
  w.u32(id.j);
  w.u8(static_cast<std::uint8_t>(mode));
  w.f64(tolerance);
  w.u8(static_cast<std::uint8_t>(replay_precision));
  w.u8(full_scan ? 1 : 0);
  w.f64(replay_noise);
  w.u64(noise_seed);
  w.u64(first_layer);
  w.u32(static_cast<std::uint32_t>(layers.size()));
  for (const auto& l : layers) {
    w.u8(static_cast<std::uint8_t>(l.kind));
    for (auto v : {l.in, l.out, l.features, l.seq, l.dim, l.classes}) w.u64(v);
    w.u8(l.deterministic ? 1 : 0);
  }
  w.u8(static_cast<std::uint8_t>(optimizer.kind));
  for (double v : {optimizer.lr, optimizer.momentum, optimizer.beta1, optimizer.beta2, optimizer.eps,
                   optimizer.weight_decay}) {
    w.f64(v);
  }
  w.u32(boundary_in);
  w.u32(boundary_out);
  w.u32(last_boundary);
  w.u32(static_cast<std::uint32_t>(steps.size()));
  for (auto t : steps) w.u32(t);
  w.u32(entry_step);
  w.u32(exit_step);
  w.u64(chunk_size);
  w.u8(static_cast<std::uint8_t>(algo));
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [k, t] : tensors) {
    put_key(w, k);
    put_tensor(w, t);
  }
  w.u32(static_cast<std::uint32_t>(labels.size()));
  for (const auto& [s, t] : labels) {
    w.u32(s);
    put_tensor(w, t);
  }
  w.u32(commitment.id().i);
  w.u32(commitment.id().j);
  w.u32(static_cast<std::uint32_t>(commitment.size()));
  for (const auto& [k, d] : commitment.digests()) {
    put_key(w, k);
    put_digest(w, d);
  }
  put_digest_map(w, input_anchors);
  put_digest_map(w, label_anchors);
  put_digest_map(w, param_anchors);
  put_digest_map(w, opt_anchors);
  return w.take();
}

VerificationRequest VerificationRequest::deserialize(std::span<const std::uint8_t> bytes) {
  try {
    ByteReader r(bytes);
    if (r.u32() != kRequestMagic) throw RefusedError("malformed request: bad magic");
    if (r.u32() != kSchemaVersion) throw RefusedError("request schema version mismatch");
    VerificationRequest q;
    q.id.i = r.u32();
    q.id.j = r.u32();
    const auto mode = r.u8();
    if (mode > 1) throw RefusedError("malformed request: bad mode");
    q.mode = static_cast<RunMode>(mode);
    q.tolerance = r.f64();
    const auto prec = r.u8();
    if (prec != 4 && prec != 8) throw RefusedError("malformed request: bad precision");
    q.replay_precision = static_cast<Precision>(prec);
    q.full_scan = r.u8() != 0;
    q.replay_noise = r.f64();
    q.noise_seed = r.u64();
    q.first_layer = static_cast<std::size_t>(r.u64());
    q.layers.resize(r.u32());
    for (auto& l : q.layers) {
      const auto kind = r.u8();
      if (kind > 4) throw RefusedError("malformed request: bad layer kind");
      l.kind = static_cast<LayerKind>(kind);
      for (std::size_t* v : {&l.in, &l.out, &l.features, &l.seq, &l.dim, &l.classes}) {
        *v = static_cast<std::size_t>(r.u64());
      }
      l.deterministic = r.u8() != 0;
    }
    const auto ok = r.u8();
    if (ok > 1) throw RefusedError("malformed request: bad optimizer kind");
    q.optimizer.kind = static_cast<OptimizerKind>(ok);
    for (double* v : {&q.optimizer.lr, &q.optimizer.momentum, &q.optimizer.beta1, &q.optimizer.beta2,
                      &q.optimizer.eps, &q.optimizer.weight_decay}) {
      *v = r.f64();
    }
    q.boundary_in = r.u32();
    q.boundary_out = r.u32();
    q.last_boundary = r.u32();
    q.steps.resize(r.u32());
    for (auto& t : q.steps) t = r.u32();
    q.entry_step = r.u32();
    q.exit_step = r.u32();
    q.chunk_size = static_cast<std::size_t>(r.u64());
    const auto algo = r.u8();
    if (algo != 1 && algo != 2) throw RefusedError("malformed request: bad hash algorithm");
    q.algo = static_cast<HashAlgo>(algo);
    const auto nt = r.u32();
    for (std::uint32_t k = 0; k < nt; ++k) {
      const auto key = get_key(r);
      q.tensors.emplace(key, get_tensor(r));
    }
    const auto nl = r.u32();
    for (std::uint32_t k = 0; k < nl; ++k) {
      const auto s = r.u32();
      q.labels.emplace(s, get_tensor(r));
    }
    BlockId cid{r.u32(), r.u32()};
    std::map<BoundaryKey, Digest> ds;
    const auto nc = r.u32();
    for (std::uint32_t k = 0; k < nc; ++k) {
      const auto key = get_key(r);
      ds.emplace(key, get_digest(r));
    }
    q.commitment = CommitmentSet::sealed_from(cid, std::move(ds));
    q.input_anchors = get_digest_map(r);
    q.label_anchors = get_digest_map(r);
    q.param_anchors = get_digest_map(r);
    q.opt_anchors = get_digest_map(r);
    if (!r.done()) throw RefusedError("malformed request: trailing bytes");
    return q;
  } catch (const RefusedError&) {
    throw;
  } catch (const Error& e) {
    throw RefusedError(std::string("malformed request: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// replay

namespace {

struct Scan {
  const VerificationRequest& req;
  VerificationReport& rep;

  bool stop() const { return !req.full_scan && !rep.failures.empty(); }

  void fail(FailureKind kind, const BoundaryKey& key, std::string detail, double measured = 0.0) {
    rep.failures.push_back({kind, key, std::move(detail), measured, rep.tolerance});
  }

  const AnyTensor& tensor(const BoundaryKey& key) const {
    auto it = req.tensors.find(key);
    if (it == req.tensors.end()) throw RefusedError("request lacks tensor " + to_string(key));
    return it->second;
  }

  template <typename Real>
  void compare(const BasicTensor<Real>& replayed, const BoundaryKey& key, const std::string& what) {
    const AnyTensor& provided = tensor(key);
    const double err = std::visit([&](const auto& p) { return relative_l2_error(replayed, p); }, provided);
    bool bitwise = false;
    if (precision_of<Real>() == precision_of(provided) && req.commitment.contains(key)) {
      bitwise = chunked_hash(replayed, req.chunk_size, req.algo) == req.commitment.at(key);
    }
    rep.checks.push_back({key, what, err, bitwise});
    if (!(err <= rep.max_error)) rep.max_error = err;
    if (!(err <= rep.tolerance)) fail(FailureKind::numerical_mismatch, key, what, err);
  }
};

std::vector<BoundaryKey> expected_training_keys(const VerificationRequest& q) {
  std::vector<BoundaryKey> keys;
  for (auto t : q.steps) {
    for (auto kind : {BoundaryKind::activation, BoundaryKind::gradient}) {
      keys.push_back({kind, q.boundary_in, t});
      keys.push_back({kind, q.boundary_out, t});
    }
  }
  for (auto step : {q.entry_step, q.exit_step}) {
    for (std::size_t k = 0; k < q.layers.size(); ++k) {
      if (!q.layers[k].has_params()) continue;
      const auto l = static_cast<std::uint32_t>(q.first_layer + k);
      keys.push_back({BoundaryKind::parameter, l, step});
      keys.push_back({BoundaryKind::optimizer, l, step});
    }
  }
  return keys;
}

void check_request_shape(const VerificationRequest& q) {
  if (q.layers.empty()) throw RefusedError("request names no layers");
  if (q.steps.empty()) throw RefusedError("request names no steps");
  if (q.chunk_size < 1) throw RefusedError("chunk size must be at least 1");
  if (q.boundary_in >= q.boundary_out || q.boundary_out > q.last_boundary) {
    throw RefusedError("request boundaries are inconsistent");
  }
  if (!(q.tolerance > 0.0)) throw RefusedError("tolerance must be positive");
}

/// Step 1: the provided tensors must be the committed ones.
void hash_phase(Scan& s, const std::vector<BoundaryKey>& keys) {
  const auto& q = s.req;
  for (const auto& key : keys) {
    if (!q.commitment.contains(key)) {
      throw RefusedError("commitment for block " + to_string(q.id) + " lacks " + to_string(key));
    }
    const Digest d = chunked_hash(s.tensor(key), q.chunk_size, q.algo);
    if (d != q.commitment.at(key)) {
      s.fail(FailureKind::hash_mismatch, key, "provided tensor does not match the ledger digest");
      if (s.stop()) return;
    }
  }
}

template <typename Real>
BasicTensor<Real> with_noise(BasicTensor<Real> x, const VerificationRequest& q, std::uint64_t tag) {
  if (q.replay_noise <= 0.0) return x;
  CounterRng rng(q.noise_seed, RngPurpose::replay_noise, tag);
  for (auto& v : x.data) v = static_cast<Real>(v * (1.0 + q.replay_noise * rng.uniform(-1.0, 1.0)));
  return x;
}

template <typename Real>
std::vector<Layer<Real>> build_layers(const VerificationRequest& q, std::uint32_t param_step) {
  std::vector<Layer<Real>> layers;
  for (std::size_t k = 0; k < q.layers.size(); ++k) {
    auto layer = init_layer<Real>(q.layers[k], 0, q.first_layer + k);
    if (q.layers[k].has_params()) {
      const BoundaryKey key{BoundaryKind::parameter, static_cast<std::uint32_t>(q.first_layer + k),
                            param_step};
      auto it = q.tensors.find(key);
      if (it == q.tensors.end()) throw RefusedError("request lacks tensor " + to_string(key));
      const auto flat = convert<Real>(it->second);
      if (flat.size() != layer.param_count()) {
        throw RefusedError("parameter tensor " + to_string(key) + " has the wrong size");
      }
      unflatten_params(layer, flat);
    }
    layers.push_back(std::move(layer));
  }
  return layers;
}

template <typename Real>
void replay_training(Scan& s) {
  const auto& q = s.req;
  auto layers = build_layers<Real>(q, q.entry_step);
  std::vector<LayerOptState<Real>> opt;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    auto st = init_layer_opt_state(q.optimizer, layers[k]);
    if (q.layers[k].has_params()) {
      const BoundaryKey key{BoundaryKind::optimizer, static_cast<std::uint32_t>(q.first_layer + k),
                            q.entry_step};
      const auto flat = convert<Real>(s.tensor(key));
      if (flat.size() != st.element_count()) {
        throw RefusedError("optimizer tensor " + to_string(key) + " has the wrong size");
      }
      st.unflatten(flat);
    }
    opt.push_back(std::move(st));
  }
  const bool last = q.boundary_out == q.last_boundary;
  for (auto t : q.steps) {
    const BoundaryKey in_act{BoundaryKind::activation, q.boundary_in, t};
    const BoundaryKey out_act{BoundaryKind::activation, q.boundary_out, t};
    const BoundaryKey in_grad{BoundaryKind::gradient, q.boundary_in, t};
    const BoundaryKey out_grad{BoundaryKind::gradient, q.boundary_out, t};
    const auto x = with_noise(convert<Real>(s.tensor(in_act)), q, t);
    const auto dy = convert<Real>(s.tensor(out_grad));
    BasicTensor<Real> labels;
    if (last) {
      auto it = q.labels.find(t);
      if (it == q.labels.end()) throw RefusedError("request lacks labels for step " + std::to_string(t));
      labels = convert<Real>(it->second);
    }
    BlockStep<Real> r;
    try {
      r = block_train_step<Real>(layers, opt, q.optimizer, t, q.first_layer, x, dy,
                                 last ? &labels : nullptr);
    } catch (const Error& e) {
      s.fail(FailureKind::numerical_mismatch, out_act, std::string("replay failed: ") + e.what(),
             INFINITY);
      return;
    }
    s.compare(r.output, out_act, "block output");
    if (s.stop()) return;
    s.compare(r.input_grad, in_grad, "block input gradient");
    if (s.stop()) return;
  }
  for (std::size_t k = 0; k < layers.size(); ++k) {
    if (!q.layers[k].has_params()) continue;
    const auto l = static_cast<std::uint32_t>(q.first_layer + k);
    s.compare(flatten_params(layers[k]), {BoundaryKind::parameter, l, q.exit_step},
              "updated parameters");
    if (s.stop()) return;
    s.compare(opt[k].flatten(), {BoundaryKind::optimizer, l, q.exit_step}, "updated optimizer state");
    if (s.stop()) return;
  }
}

template <typename Real>
void replay_inference(Scan& s) {
  const auto& q = s.req;
  const auto layers = build_layers<Real>(q, 0);
  for (auto r : q.steps) {
    const BoundaryKey in_act{BoundaryKind::activation, q.boundary_in, r};
    const BoundaryKey out_act{BoundaryKind::activation, q.boundary_out, r};
    const auto x = with_noise(convert<Real>(s.tensor(in_act)), q, r);
    BasicTensor<Real> y;
    try {
      y = forward_block<Real>(layers, q.first_layer, x, nullptr).final_output();
    } catch (const Error& e) {
      s.fail(FailureKind::numerical_mismatch, out_act, std::string("replay failed: ") + e.what(),
             INFINITY);
      return;
    }
    s.compare(y, out_act, "segment output");
    if (s.stop()) return;
  }
}

double effective_tolerance(const VerificationRequest& q) {
  // Replaying in a different precision than the record can only be as exact as
  // the coarser of the two.
  for (const auto& [k, t] : q.tensors) {
    if (precision_of(t) != q.replay_precision) {
      return std::max(q.tolerance, default_tolerance(Precision::f32));
    }
  }
  return q.tolerance;
}

template <typename Fn>
VerificationReport run_checked(const VerificationRequest& q, const VerifierConfig& cfg, RunMode mode,
                               Fn&& body) {
  VerificationReport rep;
  rep.id = q.id;
  rep.mode = mode;
  rep.tolerance = q.tolerance;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    if (q.mode != mode) throw RefusedError("request mode is " + to_string(q.mode));
    if (cfg.memory_budget && q.payload_bytes() > cfg.memory_budget) {
      throw RefusedError("payload of " + std::to_string(q.payload_bytes()) +
                         " bytes exceeds the verifier memory budget of " +
                         std::to_string(cfg.memory_budget));
    }
    check_request_shape(q);
    rep.tolerance = effective_tolerance(q);
    Scan s{q, rep};
    body(s);
    rep.verdict = rep.failures.empty() ? Verdict::pass : Verdict::fail;
  } catch (const RefusedError& e) {
    rep.verdict = Verdict::refused;
    rep.failures.clear();
    rep.message = e.what();
  }
  rep.replay_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

void anchor_phase_training(Scan& s) {
  const auto& q = s.req;
  if (q.boundary_in == 0) {
    for (auto t : q.steps) {
      const BoundaryKey key{BoundaryKind::activation, 0, t};
      auto it = q.input_anchors.find(t);
      if (it == q.input_anchors.end()) throw RefusedError("no client input anchor for step " + std::to_string(t));
      if (q.commitment.at(key) != it->second) {
        s.fail(FailureKind::hash_mismatch, key, "committed input does not match the client input anchor");
        if (s.stop()) return;
      }
    }
  }
  if (q.boundary_out == q.last_boundary) {
    for (auto t : q.steps) {
      const BoundaryKey act{BoundaryKind::activation, q.boundary_out, t};
      auto it = q.label_anchors.find(t);
      auto lt = q.labels.find(t);
      if (it == q.label_anchors.end() || lt == q.labels.end()) {
        throw RefusedError("no label anchor or labels for step " + std::to_string(t));
      }
      if (chunked_hash(lt->second, q.chunk_size, q.algo) != it->second) {
        s.fail(FailureKind::hash_mismatch, act, "labels do not match the client label anchor");
        if (s.stop()) return;
      }
      // The loss gradient seed is fixed by the protocol.
      const BoundaryKey g{BoundaryKind::gradient, q.boundary_out, t};
      const double err = relative_l2_error(convert<double>(s.tensor(g)), Tensor64({1}, {1.0}));
      if (!(err == 0.0)) {
        s.fail(FailureKind::numerical_mismatch, g, "loss gradient seed must be [1]", err);
        if (s.stop()) return;
      }
    }
  }
  if (q.entry_step == 0) {
    for (std::size_t k = 0; k < q.layers.size(); ++k) {
      if (!q.layers[k].has_params()) continue;
      const auto l = static_cast<std::uint32_t>(q.first_layer + k);
      auto pa = q.param_anchors.find(l);
      auto oa = q.opt_anchors.find(l);
      if (pa == q.param_anchors.end() || oa == q.opt_anchors.end()) {
        throw RefusedError("no base-model anchor for layer " + std::to_string(l));
      }
      const BoundaryKey pk{BoundaryKind::parameter, l, 0};
      const BoundaryKey ok{BoundaryKind::optimizer, l, 0};
      if (q.commitment.at(pk) != pa->second) {
        s.fail(FailureKind::hash_mismatch, pk, "initial parameters do not match the base-model anchor");
        if (s.stop()) return;
      }
      if (q.commitment.at(ok) != oa->second) {
        s.fail(FailureKind::hash_mismatch, ok, "initial optimizer state does not match the base-model anchor");
        if (s.stop()) return;
      }
    }
  }
}

}  // namespace

VerificationReport verify_training_block(const VerificationRequest& q, const VerifierConfig& cfg) {
  return run_checked(q, cfg, RunMode::training, [&](Scan& s) {
    hash_phase(s, expected_training_keys(q));
    if (s.stop()) return;
    anchor_phase_training(s);
    if (s.stop()) return;
    if (q.replay_precision == Precision::f64) {
      replay_training<double>(s);
    } else {
      replay_training<float>(s);
    }
  });
}

VerificationReport verify_inference_block(const VerificationRequest& q, const VerifierConfig& cfg) {
  return run_checked(q, cfg, RunMode::inference, [&](Scan& s) {
    std::vector<BoundaryKey> keys;
    for (auto r : q.steps) {
      keys.push_back({BoundaryKind::activation, q.boundary_in, r});
      keys.push_back({BoundaryKind::activation, q.boundary_out, r});
    }
    hash_phase(s, keys);
    if (s.stop()) return;
    // Served parameters are bound by the published model digest.
    for (std::size_t k = 0; k < q.layers.size(); ++k) {
      if (!q.layers[k].has_params()) continue;
      const auto l = static_cast<std::uint32_t>(q.first_layer + k);
      const BoundaryKey pk{BoundaryKind::parameter, l, 0};
      auto pa = q.param_anchors.find(l);
      if (pa == q.param_anchors.end()) throw RefusedError("no model anchor for layer " + std::to_string(l));
      if (chunked_hash(s.tensor(pk), q.chunk_size, q.algo) != pa->second) {
        s.fail(FailureKind::hash_mismatch, pk, "served parameters do not match the committed model");
        if (s.stop()) return;
      }
    }
    if (q.boundary_in == 0) {
      for (auto r : q.steps) {
        const BoundaryKey key{BoundaryKind::activation, 0, r};
        auto it = q.input_anchors.find(r);
        if (it == q.input_anchors.end()) throw RefusedError("no client input anchor for request " + std::to_string(r));
        if (q.commitment.at(key) != it->second) {
          s.fail(FailureKind::hash_mismatch, key, "committed input does not match the client request");
          if (s.stop()) return;
        }
      }
    }
    if (q.replay_precision == Precision::f64) {
      replay_inference<double>(s);
    } else {
      replay_inference<float>(s);
    }
  });
}

VerificationReport verify_block(const VerificationRequest& req, const VerifierConfig& cfg) {
  return req.mode == RunMode::training ? verify_training_block(req, cfg)
                                       : verify_inference_block(req, cfg);
}

}  // namespace aftune
