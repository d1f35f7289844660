#include "aftune/manifest.hpp"

namespace aftune {

using nlohmann::json;

namespace {

json digest_json(const Digest& d) { return d.hex(); }

Digest digest_from(const json& j, HashAlgo algo) {
  return Digest::from_hex(algo, j.get<std::string>());
}

json digests_json(const std::vector<Digest>& ds) {
  json a = json::array();
  for (const auto& d : ds) a.push_back(d.hex());
  return a;
}

std::vector<Digest> digests_from(const json& j, HashAlgo algo) {
  std::vector<Digest> out;
  for (const auto& x : j) out.push_back(digest_from(x, algo));
  return out;
}

template <typename T>
T need(const json& j, const char* key) {
  if (!j.contains(key)) throw ConfigError(std::string("manifest is missing '") + key + "'");
  return j.at(key).get<T>();
}

}  // namespace

std::vector<bool> Manifest::layer_has_params() const {
  std::vector<bool> out;
  for (const auto& l : model.layers) out.push_back(l.has_params());
  return out;
}

json grid_to_json(const GridConfig& g) {
  json j;
  j["layers"] = g.layers;
  j["steps"] = g.steps;
  j["layer_block"] = g.layer_block;
  j["step_block"] = g.step_block;
  j["checkpoint_interval"] = g.checkpoint_interval ? json(*g.checkpoint_interval) : json("inf");
  j["activation_interval"] = g.activation_interval;
  j["chunk_size"] = g.chunk_size;
  j["tolerance"] = g.tolerance;
  j["precision"] = to_string(g.precision);
  j["isolated_layers"] = g.isolated_layers;
  j["zero_storage"] = g.zero_storage;
  return j;
}

GridConfig grid_from_json(const json& j) {
  GridConfig g;
  g.layers = need<std::size_t>(j, "layers");
  g.steps = need<std::size_t>(j, "steps");
  g.layer_block = need<std::size_t>(j, "layer_block");
  g.step_block = need<std::size_t>(j, "step_block");
  const auto& ic = j.at("checkpoint_interval");
  if (ic.is_string()) {
    if (ic.get<std::string>() != "inf") throw ConfigError("checkpoint_interval must be a number or 'inf'");
    g.checkpoint_interval = std::nullopt;
  } else {
    g.checkpoint_interval = ic.get<std::uint32_t>();
  }
  g.activation_interval = need<std::uint32_t>(j, "activation_interval");
  g.chunk_size = need<std::size_t>(j, "chunk_size");
  g.tolerance = need<double>(j, "tolerance");
  g.precision = precision_from_string(need<std::string>(j, "precision"));
  g.isolated_layers = need<std::vector<std::size_t>>(j, "isolated_layers");
  g.zero_storage = need<bool>(j, "zero_storage");
  return g;
}

json model_to_json(const ModelSpec& m) {
  json layers = json::array();
  for (const auto& l : m.layers) {
    json x;
    x["kind"] = to_string(l.kind);
    x["in"] = l.in;
    x["out"] = l.out;
    x["features"] = l.features;
    x["seq"] = l.seq;
    x["dim"] = l.dim;
    x["classes"] = l.classes;
    x["deterministic"] = l.deterministic;
    layers.push_back(x);
  }
  return json{{"layers", layers}, {"init_seed", m.init_seed}};
}

ModelSpec model_from_json(const json& j) {
  ModelSpec m;
  m.init_seed = need<std::uint64_t>(j, "init_seed");
  for (const auto& x : j.at("layers")) {
    LayerSpec l;
    l.kind = layer_kind_from_string(need<std::string>(x, "kind"));
    l.in = need<std::size_t>(x, "in");
    l.out = need<std::size_t>(x, "out");
    l.features = need<std::size_t>(x, "features");
    l.seq = need<std::size_t>(x, "seq");
    l.dim = need<std::size_t>(x, "dim");
    l.classes = need<std::size_t>(x, "classes");
    l.deterministic = need<bool>(x, "deterministic");
    m.layers.push_back(l);
  }
  return m;
}

json to_json(const Manifest& m) {
  json j;
  j["schema_version"] = m.schema_version;
  j["mode"] = to_string(m.mode);
  j["grid"] = grid_to_json(m.grid);
  j["model"] = model_to_json(m.model);
  const auto& o = m.optimizer;
  j["optimizer"] = {{"kind", to_string(o.kind)},   {"lr", o.lr},     {"momentum", o.momentum},
                    {"beta1", o.beta1},             {"beta2", o.beta2}, {"eps", o.eps},
                    {"weight_decay", o.weight_decay}};
  const auto& d = m.dataset;
  j["dataset"] = {{"kind", to_string(d.kind)}, {"samples", d.samples}, {"input_dim", d.input_dim},
                  {"classes", d.classes},      {"noise", d.noise},     {"seed", d.seed}};
  j["batch_size"] = m.batch_size;
  j["data_seed"] = m.data_seed;
  j["hash"] = to_string(m.algo);
  const auto& a = m.anchors;
  j["anchors"] = {{"base_params", digests_json(a.base_params)},
                  {"base_opt", digests_json(a.base_opt)},
                  {"base_model", digest_json(a.base_model)},
                  {"dataset", digest_json(a.dataset)},
                  {"step_inputs", digests_json(a.step_inputs)},
                  {"step_labels", digests_json(a.step_labels)}};
  return j;
}

Manifest manifest_from_json(const json& j) {
  Manifest m;
  m.schema_version = need<std::uint32_t>(j, "schema_version");
  if (m.schema_version != kSchemaVersion) {
    throw ConfigError("run schema version " + std::to_string(m.schema_version) +
                      " is not supported (expected " + std::to_string(kSchemaVersion) + ")");
  }
  const auto mode = need<std::string>(j, "mode");
  if (mode != "training" && mode != "inference") throw ConfigError("unknown run mode '" + mode + "'");
  m.mode = mode == "training" ? RunMode::training : RunMode::inference;
  m.grid = grid_from_json(j.at("grid"));
  m.model = model_from_json(j.at("model"));
  const auto& o = j.at("optimizer");
  m.optimizer.kind = optimizer_kind_from_string(need<std::string>(o, "kind"));
  m.optimizer.lr = need<double>(o, "lr");
  m.optimizer.momentum = need<double>(o, "momentum");
  m.optimizer.beta1 = need<double>(o, "beta1");
  m.optimizer.beta2 = need<double>(o, "beta2");
  m.optimizer.eps = need<double>(o, "eps");
  m.optimizer.weight_decay = need<double>(o, "weight_decay");
  const auto& d = j.at("dataset");
  m.dataset.kind = dataset_kind_from_string(need<std::string>(d, "kind"));
  m.dataset.samples = need<std::size_t>(d, "samples");
  m.dataset.input_dim = need<std::size_t>(d, "input_dim");
  m.dataset.classes = need<std::size_t>(d, "classes");
  m.dataset.noise = need<double>(d, "noise");
  m.dataset.seed = need<std::uint64_t>(d, "seed");
  m.batch_size = need<std::size_t>(j, "batch_size");
  m.data_seed = need<std::uint64_t>(j, "data_seed");
  m.algo = hash_algo_from_string(need<std::string>(j, "hash"));
  const auto& a = j.at("anchors");
  m.anchors.base_params = digests_from(a.at("base_params"), m.algo);
  m.anchors.base_opt = digests_from(a.at("base_opt"), m.algo);
  m.anchors.base_model = digest_from(a.at("base_model"), m.algo);
  m.anchors.dataset = digest_from(a.at("dataset"), m.algo);
  m.anchors.step_inputs = digests_from(a.at("step_inputs"), m.algo);
  m.anchors.step_labels = digests_from(a.at("step_labels"), m.algo);
  return m;
}

std::string Manifest::canonical_json() const { return to_json(*this).dump(); }

Manifest Manifest::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("manifest is not valid JSON: ") + e.what());
  }
  try {
    return manifest_from_json(j);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed manifest: ") + e.what());
  }
}

template <typename Real>
Digest layer_param_digest(const Layer<Real>& layer, std::size_t chunk, HashAlgo algo,
                          WorkerPool* pool) {
  return chunked_hash(flatten_params(layer), chunk, algo, pool);
}

template <typename Real>
Digest layer_opt_digest(const LayerOptState<Real>& state, std::size_t chunk, HashAlgo algo,
                        WorkerPool* pool) {
  return chunked_hash(state.flatten(), chunk, algo, pool);
}

Digest aggregate_digest(HashAlgo algo, const std::vector<Digest>& parts) {
  Hasher h(algo);
  for (const auto& p : parts) h.update(p.bytes);
  return h.finish();
}

template <typename Real>
Digest dataset_digest(const Dataset<Real>& data, std::size_t chunk, HashAlgo algo) {
  return aggregate_digest(algo, {chunked_hash(data.inputs, chunk, algo),
                                 chunked_hash(data.labels, chunk, algo)});
}

template <typename Real>
TrustAnchors compute_training_anchors(const Manifest& m) {
  TrustAnchors a;
  const std::size_t c = m.grid.chunk_size;
  const auto base = init_model<Real>(m.model, m.optimizer);
  for (std::size_t l = 0; l < base.layers.size(); ++l) {
    a.base_params.push_back(layer_param_digest(base.layers[l], c, m.algo));
    a.base_opt.push_back(layer_opt_digest(base.opt.layers[l], c, m.algo));
  }
  a.base_model = aggregate_digest(m.algo, a.base_params);
  const auto data = make_dataset<Real>(m.dataset);
  a.dataset = dataset_digest(data, c, m.algo);
  for (std::size_t t = 0; t < m.grid.steps; ++t) {
    const auto batch = batch_for_step(data, m.data_seed, t, m.batch_size);
    a.step_inputs.push_back(chunked_hash(batch.inputs, c, m.algo));
    a.step_labels.push_back(chunked_hash(batch.labels, c, m.algo));
  }
  return a;
}

template <typename Real>
TrustAnchors compute_inference_anchors(const ModelState<Real>& model,
                                       const std::vector<BasicTensor<Real>>& requests,
                                       std::size_t chunk, HashAlgo algo) {
  TrustAnchors a;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    a.base_params.push_back(layer_param_digest(model.layers[l], chunk, algo));
    a.base_opt.push_back(layer_opt_digest(model.opt.layers[l], chunk, algo));
  }
  a.base_model = aggregate_digest(algo, a.base_params);
  a.dataset = aggregate_digest(algo, {});
  for (const auto& r : requests) a.step_inputs.push_back(chunked_hash(r, chunk, algo));
  return a;
}

#define AFTUNE_INSTANTIATE(Real)                                                              \
  template Digest layer_param_digest<Real>(const Layer<Real>&, std::size_t, HashAlgo,         \
                                           WorkerPool*);                                      \
  template Digest layer_opt_digest<Real>(const LayerOptState<Real>&, std::size_t, HashAlgo,   \
                                         WorkerPool*);                                        \
  template Digest dataset_digest<Real>(const Dataset<Real>&, std::size_t, HashAlgo);          \
  template TrustAnchors compute_training_anchors<Real>(const Manifest&);                      \
  template TrustAnchors compute_inference_anchors<Real>(                                      \
      const ModelState<Real>&, const std::vector<BasicTensor<Real>>&, std::size_t, HashAlgo);

AFTUNE_INSTANTIATE(float)
AFTUNE_INSTANTIATE(double)

#undef AFTUNE_INSTANTIATE

}  // namespace aftune
