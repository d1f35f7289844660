#include <algorithm>

#include "aftune/verifier.hpp"

namespace aftune {

namespace {

bool block_has_nondeterminism(const Manifest& m, const IndexRange& lb) {
  for (std::size_t l = lb.first; l <= lb.last; ++l) {
    if (!m.model.layers[l].deterministic) return true;
  }
  return false;
}

template <typename Real>
BasicTensor<Real> load(const TensorStore& store, const BoundaryKey& key) {
  return convert<Real>(store.get(key));
}

template <typename Real>
BlockState<Real> load_block_state(const Manifest& m, const TensorStore& store, const IndexRange& lb,
                                  std::size_t step) {
  BlockState<Real> st;
  for (std::size_t l = lb.first; l <= lb.last; ++l) {
    auto layer = init_layer<Real>(m.model.layers[l], m.model.init_seed, l);
    auto opt = init_layer_opt_state(m.optimizer, layer);
    if (layer.spec.has_params()) {
      const auto li = static_cast<std::uint32_t>(l);
      const auto ts = static_cast<std::uint32_t>(step);
      unflatten_params(layer, load<Real>(store, {BoundaryKind::parameter, li, ts}));
      opt.unflatten(load<Real>(store, {BoundaryKind::optimizer, li, ts}));
    }
    st.layers.push_back(std::move(layer));
    st.opt.push_back(std::move(opt));
  }
  return st;
}

template <typename Real>
BlockState<Real> base_block_state(const Manifest& m, const IndexRange& lb) {
  BlockState<Real> st;
  for (std::size_t l = lb.first; l <= lb.last; ++l) {
    st.layers.push_back(init_layer<Real>(m.model.layers[l], m.model.init_seed, l));
    st.opt.push_back(init_layer_opt_state(m.optimizer, st.layers.back()));
  }
  return st;
}

/// Labels are client data: regenerated from the dataset spec, never taken from the provider.
template <typename Real>
BasicTensor<Real> client_labels(const Manifest& m, const Dataset<Real>& data, std::size_t t) {
  return batch_for_step(data, m.data_seed, t, m.batch_size).labels;
}

/// Replays layer block i over steps [from, to) from its recorded boundaries.
template <typename Real>
void advance_block(const RunLedger& ledger, const TensorStore& store, std::size_t i,
                   BlockState<Real>& st, std::size_t from, std::size_t to) {
  if (from >= to) return;
  const auto& m = ledger.manifest();
  const auto& grid = ledger.grid();
  const auto& lb = grid.layer_block(i);
  const bool last = i + 1 == grid.num_layer_blocks();
  std::optional<Dataset<Real>> data;
  if (last) data = make_dataset<Real>(m.dataset);
  for (std::size_t t = from; t < to; ++t) {
    const auto ts = static_cast<std::uint32_t>(t);
    const auto x = load<Real>(store, {BoundaryKind::activation, static_cast<std::uint32_t>(i), ts});
    const auto dy =
        load<Real>(store, {BoundaryKind::gradient, static_cast<std::uint32_t>(i + 1), ts});
    BasicTensor<Real> labels;
    if (last) labels = client_labels(m, *data, t);
    block_train_step<Real>(st.layers, st.opt, m.optimizer, t, lb.first, x, dy,
                           last ? &labels : nullptr);
  }
}

/// Deterministic rerun of the whole training from the base model, for
/// zero-storage runs. Calls visit(t, trace) for each step t < to and
/// snapshot(j, state) at each step-block boundary up to the one at `to`.
template <typename Real, typename Visit, typename Snap>
void rerun_training(const RunLedger& ledger, std::size_t to, Visit&& visit, Snap&& snapshot) {
  const auto& m = ledger.manifest();
  const auto& grid = ledger.grid();
  if (!m.model.nondeterministic_layers().empty()) {
    throw RefusedError("a full rerun cannot reproduce non-deterministic layers bitwise");
  }
  auto state = init_model<Real>(m.model, m.optimizer);
  const auto data = make_dataset<Real>(m.dataset);
  for (std::size_t t = 0; t <= to && t <= m.grid.steps; ++t) {
    if (t % m.grid.step_block == 0 || t == m.grid.steps) {
      const std::size_t j = t == m.grid.steps ? grid.num_step_blocks() : t / m.grid.step_block;
      snapshot(j, state);
    }
    if (t == to || t == m.grid.steps) break;
    const auto batch = batch_for_step(data, m.data_seed, t, m.batch_size);
    const auto trace = train_step(state, batch);
    visit(t, trace);
  }
}

void refuse_if_unreproducible(const RunLedger& ledger, std::size_t i) {
  const auto& m = ledger.manifest();
  const auto& grid = ledger.grid();
  if (block_has_nondeterminism(m, grid.layer_block(i)) && grid.checkpoint_interval(i) != 1u) {
    throw RefusedError("layer block " + std::to_string(i) +
                       " contains a non-deterministic layer but is not isolated with I_C = 1; "
                       "its state cannot be reconstructed bitwise");
  }
}

template <typename Real>
void put_state(VerificationRequest& q, const BlockState<Real>& st, const IndexRange& lb,
               std::size_t step) {
  for (std::size_t k = 0; k < st.layers.size(); ++k) {
    if (!st.layers[k].spec.has_params()) continue;
    const auto l = static_cast<std::uint32_t>(lb.first + k);
    const auto ts = static_cast<std::uint32_t>(step);
    q.tensors[{BoundaryKind::parameter, l, ts}] = flatten_params(st.layers[k]);
    q.tensors[{BoundaryKind::optimizer, l, ts}] = st.opt[k].flatten();
  }
}

template <typename Real>
void fill_training(VerificationRequest& q, const RunLedger& ledger, const TensorStore& store) {
  const auto& m = ledger.manifest();
  const auto& grid = ledger.grid();
  const std::size_t i = q.id.i;
  const std::size_t j = q.id.j;
  const auto& lb = grid.layer_block(i);
  const auto& sb = grid.step_block(j);
  const bool last = i + 1 == grid.num_layer_blocks();

  if (m.grid.zero_storage) {
    rerun_training<Real>(
        ledger, grid.boundary_step(j + 1),
        [&](std::size_t t, const StepTrace<Real>& tr) {
          if (!sb.contains(t)) return;
          const auto ts = static_cast<std::uint32_t>(t);
          for (std::uint32_t b : {q.boundary_in, q.boundary_out}) {
            const std::size_t l = grid.boundary_layer(b);
            q.tensors[{BoundaryKind::activation, b, ts}] = tr.activations[l];
            q.tensors[{BoundaryKind::gradient, b, ts}] = tr.gradients[l];
          }
        },
        [&](std::size_t jj, const ModelState<Real>& s) {
          if (jj != j && jj != j + 1) return;
          BlockState<Real> st;
          for (std::size_t l = lb.first; l <= lb.last; ++l) {
            st.layers.push_back(s.layers[l]);
            st.opt.push_back(s.opt.layers[l]);
          }
          put_state(q, st, lb, grid.boundary_step(jj));
        });
  } else {
    for (std::size_t t = sb.first; t <= sb.last; ++t) {
      const auto ts = static_cast<std::uint32_t>(t);
      for (std::uint32_t b : {q.boundary_in, q.boundary_out}) {
        for (auto kind : {BoundaryKind::activation, BoundaryKind::gradient}) {
          q.tensors[{kind, b, ts}] = store.get({kind, b, ts});
        }
      }
    }
    if (grid.checkpoint_stored(i, j)) {
      put_state(q, load_block_state<Real>(m, store, lb, grid.boundary_step(j)), lb,
                grid.boundary_step(j));
    } else {
      put_state(q, reconstruct_block_state<Real>(ledger, store, i, j), lb, grid.boundary_step(j));
    }
    if (grid.checkpoint_stored(i, j + 1)) {
      put_state(q, load_block_state<Real>(m, store, lb, grid.boundary_step(j + 1)), lb,
                grid.boundary_step(j + 1));
    } else {
      refuse_if_unreproducible(ledger, i);
      BlockState<Real> st;
      if (grid.checkpoint_stored(i, j)) {
        st = load_block_state<Real>(m, store, lb, grid.boundary_step(j));
      } else {
        st = reconstruct_block_state<Real>(ledger, store, i, j);
      }
      advance_block(ledger, store, i, st, grid.boundary_step(j), grid.boundary_step(j + 1));
      put_state(q, st, lb, grid.boundary_step(j + 1));
    }
  }
  if (last) {
    const auto data = make_dataset<Real>(m.dataset);
    for (std::size_t t = sb.first; t <= sb.last; ++t) {
      q.labels[static_cast<std::uint32_t>(t)] = client_labels(m, data, t);
    }
  }
}

}  // namespace

template <typename Real>
BlockState<Real> reconstruct_block_state(const RunLedger& ledger, const TensorStore& store,
                                         std::size_t i, std::size_t j) {
  const auto& m = ledger.manifest();
  const auto& grid = ledger.grid();
  if (m.mode != RunMode::training) throw ConfigError("state reconstruction applies to training runs");
  if (i >= grid.num_layer_blocks() || j > grid.num_step_blocks()) {
    throw ConfigError("reconstruction target outside the grid");
  }
  if (m.grid.precision != precision_of<Real>()) {
    throw ConfigError("reconstruction must run in the recorded precision");
  }
  const auto& lb = grid.layer_block(i);
  if (grid.checkpoint_stored(i, j)) return load_block_state<Real>(m, store, lb, grid.boundary_step(j));
  refuse_if_unreproducible(ledger, i);
  if (m.grid.zero_storage) {
    BlockState<Real> out;
    rerun_training<Real>(
        ledger, grid.boundary_step(j), [](std::size_t, const StepTrace<Real>&) {},
        [&](std::size_t jj, const ModelState<Real>& s) {
          if (jj != j) return;
          for (std::size_t l = lb.first; l <= lb.last; ++l) {
            out.layers.push_back(s.layers[l]);
            out.opt.push_back(s.opt.layers[l]);
          }
        });
    return out;
  }
  const auto j0 = grid.prior_checkpoint(i, j);
  BlockState<Real> st = j0 ? load_block_state<Real>(m, store, lb, grid.boundary_step(*j0))
                           : base_block_state<Real>(m, lb);
  advance_block(ledger, store, i, st, j0 ? grid.boundary_step(*j0) : 0, grid.boundary_step(j));
  return st;
}

template <typename Real>
ModelState<Real> reconstruct_state(const RunLedger& ledger, const TensorStore& store, std::size_t j) {
  const auto& m = ledger.manifest();
  const auto& grid = ledger.grid();
  ModelState<Real> out;
  out.opt.config = m.optimizer;
  out.opt.step = grid.boundary_step(j);
  for (std::size_t i = 0; i < grid.num_layer_blocks(); ++i) {
    auto st = reconstruct_block_state<Real>(ledger, store, i, j);
    for (auto& l : st.layers) out.layers.push_back(std::move(l));
    for (auto& o : st.opt) out.opt.layers.push_back(std::move(o));
  }
  return out;
}

VerificationRequest prepare_request(const RunLedger& ledger, const TensorStore& store, BlockId id,
                                    const PrepareOptions& opts) {
  const auto& m = ledger.manifest();
  const auto& grid = ledger.grid();
  if (!grid.contains(id)) throw ConfigError("block " + to_string(id) + " is outside the grid");
  VerificationRequest q;
  q.id = id;
  q.mode = m.mode;
  q.replay_precision = opts.replay_precision.value_or(m.grid.precision);
  q.tolerance = opts.tolerance.value_or(opts.replay_precision && *opts.replay_precision != m.grid.precision
                                            ? std::max(m.grid.tolerance, default_tolerance(Precision::f32))
                                            : m.grid.tolerance);
  q.full_scan = opts.full_scan;
  q.replay_noise = opts.replay_noise;
  q.noise_seed = opts.noise_seed;
  q.optimizer = m.optimizer;
  q.chunk_size = m.grid.chunk_size;
  q.algo = m.algo;
  q.last_boundary = static_cast<std::uint32_t>(grid.num_layer_blocks());
  q.commitment = ledger.at(id);
  const auto& sb = grid.step_block(id.j);
  for (std::size_t t = sb.first; t <= sb.last; ++t) q.steps.push_back(static_cast<std::uint32_t>(t));
  const auto& a = m.anchors;

  std::size_t first = 0, end = 0;
  if (m.mode == RunMode::training) {
    q.boundary_in = id.i;
    q.boundary_out = id.i + 1;
    q.entry_step = static_cast<std::uint32_t>(grid.boundary_step(id.j));
    q.exit_step = static_cast<std::uint32_t>(grid.boundary_step(id.j + 1));
  } else {
    const auto seg = grid.inference_segment(id.i);
    q.boundary_in = static_cast<std::uint32_t>(seg.first);
    q.boundary_out = static_cast<std::uint32_t>(seg.last);
  }
  first = grid.boundary_layer(q.boundary_in);
  end = grid.boundary_layer(q.boundary_out);
  q.first_layer = first;
  q.layers.assign(m.model.layers.begin() + static_cast<std::ptrdiff_t>(first),
                  m.model.layers.begin() + static_cast<std::ptrdiff_t>(end));

  if (q.boundary_in == 0) {
    for (auto t : q.steps) {
      if (t < a.step_inputs.size()) q.input_anchors[t] = a.step_inputs[t];
    }
  }
  if (m.mode == RunMode::training) {
    if (q.boundary_out == q.last_boundary) {
      for (auto t : q.steps) {
        if (t < a.step_labels.size()) q.label_anchors[t] = a.step_labels[t];
      }
    }
    if (id.j == 0) {
      for (std::size_t l = first; l < end; ++l) {
        if (l < a.base_params.size()) q.param_anchors[static_cast<std::uint32_t>(l)] = a.base_params[l];
        if (l < a.base_opt.size()) q.opt_anchors[static_cast<std::uint32_t>(l)] = a.base_opt[l];
      }
    }
    if (m.grid.precision == Precision::f64) {
      fill_training<double>(q, ledger, store);
    } else {
      fill_training<float>(q, ledger, store);
    }
  } else {
    for (auto r : q.steps) {
      for (std::uint32_t b : {q.boundary_in, q.boundary_out}) {
        q.tensors[{BoundaryKind::activation, b, r}] = store.get({BoundaryKind::activation, b, r});
      }
    }
    for (std::size_t l = first; l < end; ++l) {
      if (!m.model.layers[l].has_params()) continue;
      const auto li = static_cast<std::uint32_t>(l);
      if (l < a.base_params.size()) q.param_anchors[li] = a.base_params[l];
      q.tensors[{BoundaryKind::parameter, li, 0}] = store.get({BoundaryKind::parameter, li, 0});
    }
  }
  return q;
}

nlohmann::json ChainReport::to_json() const {
  nlohmann::json is = nlohmann::json::array();
  for (const auto& x : issues) {
    is.push_back({{"block", to_string(x.block)}, {"key", to_string(x.key)}, {"reason", x.reason}});
  }
  return {{"ok", ok()},
          {"blocks_checked", blocks_checked},
          {"digests_checked", digests_checked},
          {"issues", is}};
}

ChainReport check_trust_chain(const RunLedger& ledger, const TrustAnchors& anchors,
                              const std::vector<BlockId>& blocks) {
  const auto& m = ledger.manifest();
  const auto& grid = ledger.grid();
  const auto has = m.layer_has_params();
  ChainReport rep;
  auto issue = [&](BlockId b, const BoundaryKey& k, std::string why) {
    rep.issues.push_back({b, k, std::move(why)});
  };
  // Digest must appear identically in the producing neighbor's sealed set.
  auto from_neighbor = [&](BlockId self, const BoundaryKey& key, const Digest& d, BlockId producer,
                           const char* role) {
    const auto* ns = ledger.find(producer);
    if (!ns) {
      issue(self, key, std::string(role) + " neighbor " + to_string(producer) + " has no sealed commitment");
    } else if (!ns->contains(key)) {
      issue(self, key, std::string(role) + " neighbor " + to_string(producer) + " does not commit this key");
    } else if (ns->at(key) != d) {
      issue(self, key, std::string("digest differs from the one sealed by ") + role + " neighbor " +
                           to_string(producer));
    }
  };
  auto from_anchor = [&](BlockId self, const BoundaryKey& key, const Digest& d,
                         const std::vector<Digest>& list, std::size_t idx, const char* what) {
    if (idx >= list.size()) {
      issue(self, key, std::string("no ") + what + " anchor");
    } else if (list[idx] != d) {
      issue(self, key, std::string("digest does not match the ") + what + " anchor");
    }
  };

  for (const auto& id : blocks) {
    const auto* set = ledger.find(id);
    ++rep.blocks_checked;
    if (!set) {
      issue(id, {}, "block has no sealed commitment");
      continue;
    }
    const auto& sb = grid.step_block(id.j);
    if (m.mode == RunMode::inference) {
      const auto seg = grid.inference_segment(id.i);
      for (std::size_t t = sb.first; t <= sb.last; ++t) {
        const BoundaryKey key{BoundaryKind::activation, static_cast<std::uint32_t>(seg.first),
                              static_cast<std::uint32_t>(t)};
        if (!set->contains(key)) continue;
        ++rep.digests_checked;
        if (seg.first == 0) {
          from_anchor(id, key, set->at(key), anchors.step_inputs, t, "client input");
        } else {
          from_neighbor(id, key, set->at(key), {static_cast<std::uint32_t>(seg.first - 1), id.j},
                        "left");
        }
      }
      const auto last = grid.boundary_layer(seg.last);
      for (std::size_t l = grid.boundary_layer(seg.first); l < last; ++l) {
        if (!has[l]) continue;
        ++rep.digests_checked;
        if (l >= anchors.base_params.size()) {
          issue(id, {BoundaryKind::parameter, static_cast<std::uint32_t>(l), 0}, "no model anchor");
        }
      }
      continue;
    }
    const bool last = id.i + 1 == grid.num_layer_blocks();
    for (std::size_t t = sb.first; t <= sb.last; ++t) {
      const auto ts = static_cast<std::uint32_t>(t);
      const BoundaryKey in{BoundaryKind::activation, id.i, ts};
      const BoundaryKey gout{BoundaryKind::gradient, id.i + 1, ts};
      rep.digests_checked += 2;
      if (!set->contains(in) || !set->contains(gout)) {
        issue(id, set->contains(in) ? gout : in, "key missing from the block's own commitment");
        continue;
      }
      if (id.i == 0) {
        from_anchor(id, in, set->at(in), anchors.step_inputs, t, "client input");
      } else {
        from_neighbor(id, in, set->at(in), {id.i - 1, id.j}, "left");
      }
      if (last) {
        // The output gradient is the fixed loss seed; the labels anchor binds the loss.
        if (t >= anchors.step_labels.size()) issue(id, gout, "no label anchor");
        Digest seed;
        if (m.grid.precision == Precision::f64) {
          seed = chunked_hash(Tensor64({1}, {1.0}), m.grid.chunk_size, m.algo);
        } else {
          seed = chunked_hash(Tensor({1}, {1.0f}), m.grid.chunk_size, m.algo);
        }
        if (set->at(gout) != seed) issue(id, gout, "output gradient is not the loss seed");
      } else {
        from_neighbor(id, gout, set->at(gout), {id.i + 1, id.j}, "right");
      }
    }
    const auto& lb = grid.layer_block(id.i);
    const auto entry = static_cast<std::uint32_t>(grid.boundary_step(id.j));
    for (std::size_t l = lb.first; l <= lb.last; ++l) {
      if (!has[l]) continue;
      const auto li = static_cast<std::uint32_t>(l);
      for (auto kind : {BoundaryKind::parameter, BoundaryKind::optimizer}) {
        const BoundaryKey key{kind, li, entry};
        ++rep.digests_checked;
        if (!set->contains(key)) {
          issue(id, key, "key missing from the block's own commitment");
          continue;
        }
        if (id.j == 0) {
          from_anchor(id, key, set->at(key),
                      kind == BoundaryKind::parameter ? anchors.base_params : anchors.base_opt, l,
                      "base-model");
        } else {
          from_neighbor(id, key, set->at(key), {id.i, id.j - 1}, "above");
        }
      }
    }
  }
  return rep;
}

#define AFTUNE_INSTANTIATE(Real)                                                                \
  template BlockState<Real> reconstruct_block_state<Real>(const RunLedger&, const TensorStore&, \
                                                          std::size_t, std::size_t);            \
  template ModelState<Real> reconstruct_state<Real>(const RunLedger&, const TensorStore&,       \
                                                    std::size_t);

AFTUNE_INSTANTIATE(float)
AFTUNE_INSTANTIATE(double)

#undef AFTUNE_INSTANTIATE

}  // namespace aftune
