#include "aftune/recorder.hpp"

#include <algorithm>
#include <fstream>

namespace aftune {

namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw StoreError("cannot write " + p.string());
  out << text << "\n";
}

void init_run_dir(const RecordOptions& opts) {
  if (opts.run_dir.empty()) return;
  const RunPaths paths{opts.run_dir};
  if (fs::exists(paths.ledger())) {
    throw ConfigError("run directory " + opts.run_dir.string() + " already holds a ledger");
  }
  fs::create_directories(opts.run_dir);
}

RunLedger open_ledger(const Manifest& m, const RecordOptions& opts) {
  if (opts.run_dir.empty()) return RunLedger(m);
  const RunPaths paths{opts.run_dir};
  write_text(paths.manifest(), to_json(m).dump(2));
  return RunLedger::create(paths.ledger(), m);
}

/// Hashes (and, when scheduled, stores) the θ/s keys of every layer at step-block boundary j.
template <typename Real>
void commit_state(const BlockGrid& grid, std::size_t j, const ModelState<Real>& state,
                  const Manifest& m, const RecordOptions& opts, TensorStore& store,
                  std::map<BoundaryKey, Digest>& digests) {
  const auto step = static_cast<std::uint32_t>(grid.boundary_step(j));
  for (std::size_t i = 0; i < grid.num_layer_blocks(); ++i) {
    const bool stored = grid.checkpoint_stored(i, j);
    const auto& lb = grid.layer_block(i);
    for (std::size_t l = lb.first; l <= lb.last; ++l) {
      if (!m.model.layers[l].has_params()) continue;
      const auto idx = static_cast<std::uint32_t>(l);
      const BoundaryKey pk{BoundaryKind::parameter, idx, step};
      const BoundaryKey ok{BoundaryKind::optimizer, idx, step};
      const AnyTensor theta = flatten_params(state.layers[l]);
      const AnyTensor s = state.opt.layers[l].flatten();
      digests[pk] = chunked_hash(theta, m.grid.chunk_size, m.algo, opts.pool);
      digests[ok] = chunked_hash(s, m.grid.chunk_size, m.algo, opts.pool);
      if (stored) {
        store.put(pk, theta, digests[pk]);
        store.put(ok, s, digests[ok]);
      }
    }
  }
}

void seal_row(const BlockGrid& grid, std::size_t j, RunMode mode, const std::vector<bool>& has,
              const std::map<BoundaryKey, Digest>& digests, RunLedger& ledger) {
  for (std::size_t i = 0; i < grid.num_layer_blocks(); ++i) {
    const BlockId id{static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j)};
    ledger.append(seal_block(grid, id, mode, has, digests));
  }
}

}  // namespace

template <typename Real>
Manifest prepare_training_manifest(Manifest m, bool auto_isolate) {
  m.mode = RunMode::training;
  if (m.grid.precision != precision_of<Real>()) {
    throw ConfigError("manifest precision " + to_string(m.grid.precision) +
                      " does not match the engine instantiation");
  }
  if (m.grid.layers != m.model.num_layers()) {
    throw ConfigError("grid has L = " + std::to_string(m.grid.layers) + " but the model has " +
                      std::to_string(m.model.num_layers()) + " layers");
  }
  if (m.model.layers.back().kind != LayerKind::softmax_xent) {
    throw ConfigError("training needs a softmax-xent head as the last layer");
  }
  if (auto_isolate) {
    for (std::size_t l : m.model.nondeterministic_layers()) {
      if (std::find(m.grid.isolated_layers.begin(), m.grid.isolated_layers.end(), l) ==
          m.grid.isolated_layers.end()) {
        m.grid.isolated_layers.push_back(l);
      }
    }
    std::sort(m.grid.isolated_layers.begin(), m.grid.isolated_layers.end());
  }
  if (m.grid.zero_storage && !m.model.nondeterministic_layers().empty()) {
    throw ConfigError("zero-storage mode cannot be replayed with non-deterministic layers");
  }
  m.grid.validate();
  if (m.anchors.step_inputs.empty()) m.anchors = compute_training_anchors<Real>(m);
  return m;
}

template <typename Real>
TrainingRecord<Real> record_training(Manifest manifest, const RecordOptions& opts,
                                     RecordingHooks<Real>* hooks) {
  RecordingHooks<Real> honest;
  if (!hooks) hooks = &honest;
  init_run_dir(opts);
  const Manifest m = prepare_training_manifest<Real>(std::move(manifest), opts.auto_isolate);
  TrainingRecord<Real> rec{open_ledger(m, opts),
                           opts.run_dir.empty() ? TensorStore() : TensorStore::create(opts.run_dir),
                           init_model<Real>(m.model, m.optimizer),
                           {},
                           {}};
  const BlockGrid& grid = rec.ledger.grid();
  const auto has = m.layer_has_params();
  const auto data = make_dataset<Real>(m.dataset);
  const bool blobs = !m.grid.zero_storage;
  auto& state = rec.final_state;

  hooks->on_boundary(0, state);
  commit_state(grid, 0, state, m, opts, rec.store, rec.digests);

  std::optional<StepTrace<Real>> previous;
  for (std::size_t j = 0; j < grid.num_step_blocks(); ++j) {
    const auto& sb = grid.step_block(j);
    for (std::size_t t = sb.first; t <= sb.last; ++t) {
      auto batch = batch_for_step(data, m.data_seed, t, m.batch_size);
      hooks->on_batch(t, batch);
      StepTrace<Real> trace;
      if (auto custom = hooks->custom_step(t, state, batch)) {
        trace = std::move(*custom);
      } else if (hooks->skip_step(t)) {
        if (previous) {
          trace = *previous;
        } else {
          auto scratch = state;
          trace = train_step(scratch, batch);
        }
        ++state.opt.step;  // the provider claims the step happened
      } else {
        trace = train_step(state, batch);
      }
      hooks->on_trace(t, trace);
      rec.losses.push_back(trace.loss);
      const auto ts = static_cast<std::uint32_t>(t);
      for (std::size_t b = 0; b <= grid.num_layer_blocks(); ++b) {
        const std::size_t l = grid.boundary_layer(b);
        const auto bi = static_cast<std::uint32_t>(b);
        for (auto kind : {BoundaryKind::activation, BoundaryKind::gradient}) {
          const BoundaryKey key{kind, bi, ts};
          const AnyTensor x = kind == BoundaryKind::activation ? trace.activations[l]
                                                                : trace.gradients[l];
          rec.digests[key] = chunked_hash(x, m.grid.chunk_size, m.algo, opts.pool);
          if (blobs) rec.store.put(key, x, rec.digests[key]);
        }
      }
      previous = std::move(trace);
    }
    hooks->on_boundary(j + 1, state);
    commit_state(grid, j + 1, state, m, opts, rec.store, rec.digests);
    rec.store.flush();
    seal_row(grid, j, RunMode::training, has, rec.digests, rec.ledger);
  }
  return rec;
}

template <typename Real>
std::vector<BasicTensor<Real>> inference_requests(const Manifest& m) {
  const auto data = make_dataset<Real>(m.dataset);
  std::vector<BasicTensor<Real>> out;
  for (std::size_t r = 0; r < m.grid.steps; ++r) {
    out.push_back(batch_for_step(data, m.data_seed, r, m.batch_size).inputs);
  }
  return out;
}

template <typename Real>
InferenceRecord<Real> record_inference(Manifest manifest, const ModelState<Real>& model,
                                       const RecordOptions& opts, InferenceHooks<Real>* hooks) {
  InferenceHooks<Real> honest;
  if (!hooks) hooks = &honest;
  Manifest& m = manifest;
  m.mode = RunMode::inference;
  if (m.grid.precision != precision_of<Real>()) {
    throw ConfigError("manifest precision does not match the engine instantiation");
  }
  if (m.grid.step_block != 1) throw ConfigError("inference treats each request as one step (B_S = 1)");
  if (m.grid.layers != model.num_layers() || m.model.num_layers() != model.num_layers()) {
    throw ConfigError("grid, model spec and served model disagree on L");
  }
  m.grid.checkpoint_interval = std::nullopt;
  m.grid.validate();
  init_run_dir(opts);
  const auto requests = inference_requests<Real>(m);
  m.anchors = compute_inference_anchors(model, requests, m.grid.chunk_size, m.algo);

  InferenceRecord<Real> rec{open_ledger(m, opts),
                            opts.run_dir.empty() ? TensorStore() : TensorStore::create(opts.run_dir),
                            {},
                            {}};
  const BlockGrid& grid = rec.ledger.grid();
  const auto has = m.layer_has_params();

  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    if (!has[l]) continue;
    const BoundaryKey pk{BoundaryKind::parameter, static_cast<std::uint32_t>(l), 0};
    rec.store.put(pk, AnyTensor(flatten_params(model.layers[l])), m.anchors.base_params[l]);
  }

  const auto bounds = grid.recorded_boundaries(RunMode::inference);
  for (std::size_t r = 0; r < requests.size(); ++r) {
    ModelState<Real> served = model;
    hooks->before_request(r, served);
    auto fwd = forward_block<Real>(served.layers, 0, requests[r], nullptr);
    std::vector<BasicTensor<Real>> acts;
    acts.reserve(fwd.outputs.size() + 1);
    acts.push_back(requests[r]);
    for (auto& o : fwd.outputs) acts.push_back(std::move(o));
    hooks->on_outputs(r, acts);
    for (std::size_t b : bounds) {
      const BoundaryKey key{BoundaryKind::activation, static_cast<std::uint32_t>(b),
                            static_cast<std::uint32_t>(r)};
      const AnyTensor x = acts[grid.boundary_layer(b)];
      rec.digests[key] = chunked_hash(x, m.grid.chunk_size, m.algo, opts.pool);
      if (!m.grid.zero_storage) rec.store.put(key, x, rec.digests[key]);
    }
    rec.outputs.push_back(acts.back());
    rec.store.flush();
    seal_row(grid, r, RunMode::inference, has, rec.digests, rec.ledger);
  }
  return rec;
}

namespace {

template <typename Real>
StorageSizes measure(const Manifest& m) {
  const auto grid = BlockGrid::partition(m.grid);
  const auto model = init_model<Real>(m.model, m.optimizer);
  const auto data = make_dataset<Real>(m.dataset);
  const auto batch = batch_for_step(data, m.data_seed, 0, m.batch_size);
  auto fwd = forward_block<Real>(model.layers, 0, batch.inputs, &batch.labels);
  std::vector<std::size_t> widths{batch.inputs.size()};
  for (const auto& o : fwd.outputs) widths.push_back(o.size());

  StorageSizes s;
  const std::uint64_t w = sizeof(Real);
  const std::uint64_t slots = m.optimizer.slots_per_param();
  for (std::size_t i = 0; i < grid.num_layer_blocks(); ++i) {
    std::uint64_t bytes = 0;
    const auto& lb = grid.layer_block(i);
    for (std::size_t l = lb.first; l <= lb.last; ++l) bytes += model.layers[l].param_count() * w * (1 + slots);
    s.checkpoint_bytes.push_back(bytes);
  }
  for (std::size_t b = 0; b <= grid.num_layer_blocks(); ++b) {
    const std::uint64_t bytes = widths[grid.boundary_layer(b)] * w;
    s.activation_bytes.push_back(bytes);
    s.gradient_bytes.push_back(bytes);
  }
  return s;
}

}  // namespace

StorageSizes measured_storage_sizes(const Manifest& m) {
  return m.grid.precision == Precision::f64 ? measure<double>(m) : measure<float>(m);
}

std::set<BoundaryKey> evidence_closure(const BlockGrid& grid, BlockId id, RunMode mode,
                                       const std::vector<bool>& has) {
  const auto keys = block_keys(grid, id, mode, has);
  std::set<BoundaryKey> out(keys.begin(), keys.end());
  if (mode == RunMode::inference) {
    const auto seg = grid.inference_segment(id.i);
    for (std::size_t l = grid.boundary_layer(seg.first); l < grid.boundary_layer(seg.last); ++l) {
      if (has[l]) out.insert({BoundaryKind::parameter, static_cast<std::uint32_t>(l), 0});
    }
    return out;
  }
  const auto j0 = grid.prior_checkpoint(id.i, id.j);
  const std::size_t from = j0 ? grid.boundary_step(*j0) : 0;
  const std::size_t to = grid.boundary_step(id.j);
  const auto& lb = grid.layer_block(id.i);
  if (j0 && *j0 != id.j) {
    for (std::size_t l = lb.first; l <= lb.last; ++l) {
      if (!has[l]) continue;
      out.insert({BoundaryKind::parameter, static_cast<std::uint32_t>(l),
                  static_cast<std::uint32_t>(from)});
      out.insert({BoundaryKind::optimizer, static_cast<std::uint32_t>(l),
                  static_cast<std::uint32_t>(from)});
    }
  }
  for (std::size_t t = from; t < to; ++t) {
    out.insert({BoundaryKind::activation, id.i, static_cast<std::uint32_t>(t)});
    out.insert({BoundaryKind::gradient, id.i + 1, static_cast<std::uint32_t>(t)});
  }
  return out;
}

void prune_after_verification(TensorStore& store, const RunLedger& ledger,
                              const std::set<BlockId>& verified,
                              const std::set<BlockId>& requested) {
  const auto& grid = ledger.grid();
  for (const auto& id : verified) {
    if (!grid.contains(id)) throw ConfigError("block " + to_string(id) + " is outside the grid");
    if (requested.count(id)) {
      throw ConfigError("block " + to_string(id) + " was requested by the client and cannot be pruned");
    }
  }
  const auto has = ledger.manifest().layer_has_params();
  std::set<BoundaryKey> keep;
  for (const auto& id : grid.blocks()) {
    if (verified.count(id)) continue;
    const auto c = evidence_closure(grid, id, ledger.manifest().mode, has);
    keep.insert(c.begin(), c.end());
  }
  std::set<BoundaryKey> present;
  for (const auto& k : store.keys()) {
    if (keep.count(k)) present.insert(k);
  }
  store.retain_only(present);
}

#define AFTUNE_INSTANTIATE(Real)                                                               \
  template Manifest prepare_training_manifest<Real>(Manifest, bool);                           \
  template TrainingRecord<Real> record_training<Real>(Manifest, const RecordOptions&,          \
                                                      RecordingHooks<Real>*);                  \
  template std::vector<BasicTensor<Real>> inference_requests<Real>(const Manifest&);           \
  template InferenceRecord<Real> record_inference<Real>(Manifest, const ModelState<Real>&,     \
                                                        const RecordOptions&,                  \
                                                        InferenceHooks<Real>*);

AFTUNE_INSTANTIATE(float)
AFTUNE_INSTANTIATE(double)

#undef AFTUNE_INSTANTIATE

}  // namespace aftune
