#include "sdir/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include "json.hpp"

namespace sdir {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

// ---------------------------------------------------------------------------
// Config fields.

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\"");
  const auto e = s.find_last_not_of(" \t\"");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

[[noreturn]] void bad(const std::string& key, const std::string& what, const std::string& value) {
  throw ConfigError("config: " + key + ": " + what + ", got '" + value + "'");
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t x = 0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), x);
  if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size()) {
    bad(key, "expected a non-negative integer", v);
  }
  return x;
}

double to_real(const std::string& key, const std::string& v) {
  double x = 0.0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), x);
  if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size() || !std::isfinite(x)) {
    bad(key, "expected a finite number", v);
  }
  return x;
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string join(const std::vector<std::string>& items) {
  std::string s;
  for (std::size_t i = 0; i < items.size(); ++i) s += (i ? "," : "") + items[i];
  return s;
}

struct Field {
  std::string key;  // section.name
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <class T>
Field size_field(std::string key, T ExperimentConfig::*member) {
  return {key, [key, member](ExperimentConfig& c, const std::string& v) { c.*member = to_u64(key, v); },
          [member](const ExperimentConfig& c) { return std::to_string(c.*member); }};
}

Field bool_field(std::string key, bool ExperimentConfig::*member) {
  return {key,
          [key, member](ExperimentConfig& c, const std::string& v) {
            if (v == "true" || v == "1") c.*member = true;
            else if (v == "false" || v == "0") c.*member = false;
            else bad(key, "expected true or false", v);
          },
          [member](const ExperimentConfig& c) { return std::string(c.*member ? "true" : "false"); }};
}

template <class Get>
Field size_ref(std::string key, Get ref) {
  return {key, [key, ref](ExperimentConfig& c, const std::string& v) { ref(c) = to_u64(key, v); },
          [ref](const ExperimentConfig& c) { return std::to_string(ref(const_cast<ExperimentConfig&>(c))); }};
}

template <class Get>
Field real_ref(std::string key, Get ref) {
  return {key, [key, ref](ExperimentConfig& c, const std::string& v) { ref(c) = to_real(key, v); },
          [ref](const ExperimentConfig& c) { return format_number(ref(const_cast<ExperimentConfig&>(c))); }};
}

Field lambdas_field(std::string key, std::size_t index) {
  return {key,
          [key, index](ExperimentConfig& c, const std::string& v) {
            std::vector<double> out;
            for (const auto& item : split_list(v)) out.push_back(to_real(key, item));
            c.saes[index].lambdas = std::move(out);
          },
          [index](const ExperimentConfig& c) {
            std::vector<std::string> items;
            for (double l : c.saes[index].lambdas) items.push_back(format_number(l));
            return join(items);
          }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back({"meta.schema_version",
                 [](ExperimentConfig& c, const std::string& v) {
                   c.schema_version = static_cast<int>(to_u64("meta.schema_version", v));
                 },
                 [](const ExperimentConfig& c) { return std::to_string(c.schema_version); }});
    f.push_back({"meta.seed", [](ExperimentConfig& c, const std::string& v) { c.seed = to_u64("meta.seed", v); },
                 [](const ExperimentConfig& c) { return std::to_string(c.seed); }});
    f.push_back({"corpus.path", [](ExperimentConfig& c, const std::string& v) { c.corpus_path = v; },
                 [](const ExperimentConfig& c) { return c.corpus_path.string(); }});
    f.push_back(size_field("corpus.synthetic_bytes", &ExperimentConfig::synthetic_bytes));
    f.push_back(size_ref("model.n_layers", [](ExperimentConfig& c) -> auto& { return c.model.n_layers; }));
    f.push_back(size_ref("model.d_model", [](ExperimentConfig& c) -> auto& { return c.model.d_model; }));
    f.push_back(size_ref("model.n_heads", [](ExperimentConfig& c) -> auto& { return c.model.n_heads; }));
    f.push_back(size_ref("model.d_head", [](ExperimentConfig& c) -> auto& { return c.model.d_head; }));
    f.push_back(size_ref("model.d_ff", [](ExperimentConfig& c) -> auto& { return c.model.d_ff; }));
    f.push_back(size_ref("model.seq_len", [](ExperimentConfig& c) -> auto& { return c.model.max_seq_len; }));
    f.push_back(size_ref("train.steps", [](ExperimentConfig& c) -> auto& { return c.train.steps; }));
    f.push_back(size_ref("train.batch_size", [](ExperimentConfig& c) -> auto& { return c.train.batch_size; }));
    f.push_back(real_ref("train.learning_rate", [](ExperimentConfig& c) -> auto& { return c.train.learning_rate; }));
    f.push_back(size_ref("train.warmup_steps", [](ExperimentConfig& c) -> auto& { return c.train.warmup_steps; }));
    f.push_back(real_ref("train.weight_decay", [](ExperimentConfig& c) -> auto& { return c.train.weight_decay; }));
    f.push_back(size_field("capture.hook_layer", &ExperimentConfig::hook_layer));
    f.push_back(size_field("capture.token_budget", &ExperimentConfig::capture_budget));
    f.push_back(size_field("capture.stride", &ExperimentConfig::capture_stride));
    f.push_back(bool_field("capture.exclude_position_zero", &ExperimentConfig::capture_exclude_position_zero));
    f.push_back(size_field("gaussian.distance_pairs", &ExperimentConfig::distance_pairs));
    f.push_back(size_ref("sae.n_features", [](ExperimentConfig& c) -> auto& { return c.sae.n_features; }));
    f.push_back(real_ref("sae.learning_rate", [](ExperimentConfig& c) -> auto& { return c.sae.learning_rate; }));
    f.push_back(size_ref("sae.batch_rows", [](ExperimentConfig& c) -> auto& { return c.sae.batch_rows; }));
    f.push_back(size_ref("sae.batch_sequences", [](ExperimentConfig& c) -> auto& { return c.sae.batch_sequences; }));
    f.push_back(size_ref("sae.warmup_steps", [](ExperimentConfig& c) -> auto& { return c.sae.warmup_steps; }));
    f.push_back(real_ref("sae.beta", [](ExperimentConfig& c) -> auto& { return c.sae.beta; }));
    f.push_back(size_ref("sae.dead_steps", [](ExperimentConfig& c) -> auto& { return c.sae.dead_steps; }));
    f.push_back(real_ref("sae.alive_rate", [](ExperimentConfig& c) -> auto& { return c.sae.alive_rate; }));
    f.push_back(size_ref("sae.local_steps", [](ExperimentConfig& c) -> auto& { return c.saes[0].steps; }));
    f.push_back(size_ref("sae.e2e_steps", [](ExperimentConfig& c) -> auto& { return c.saes[1].steps; }));
    f.push_back(size_ref("sae.e2e_ds_steps", [](ExperimentConfig& c) -> auto& { return c.saes[2].steps; }));
    f.push_back(lambdas_field("sae.local_lambdas", 0));
    f.push_back(lambdas_field("sae.e2e_lambdas", 1));
    f.push_back(lambdas_field("sae.e2e_ds_lambdas", 2));
    f.push_back(size_field("sae.figure2_local_index", &ExperimentConfig::figure2_local_index));
    f.push_back({"sweep.kinds",
                 [](ExperimentConfig& c, const std::string& v) {
                   c.sweep_kinds.clear();
                   for (const auto& item : split_list(v)) {
                     try {
                       c.sweep_kinds.push_back(parse_direction_kind(item));
                     } catch (const InputError&) {
                       bad("sweep.kinds", "unknown direction kind", item);
                     }
                   }
                 },
                 [](const ExperimentConfig& c) {
                   std::vector<std::string> items;
                   for (auto k : c.sweep_kinds) items.push_back(to_string(k));
                   return join(items);
                 }});
    f.push_back(size_field("sweep.alpha_points", &ExperimentConfig::alpha_points));
    f.push_back(real_ref("sweep.alpha_curvature", [](ExperimentConfig& c) -> auto& { return c.alpha_curvature; }));
    f.push_back(real_ref("sweep.alpha_max_ratio", [](ExperimentConfig& c) -> auto& { return c.alpha_max_ratio; }));
    f.push_back(size_field("sweep.stride", &ExperimentConfig::sweep_stride));
    f.push_back(size_field("sweep.max_tokens", &ExperimentConfig::sweep_max_tokens));
    f.push_back({"sweep.downstream_layer",
                 [](ExperimentConfig& c, const std::string& v) {
                   if (v.empty() || v == "auto") c.downstream_layer.reset();
                   else c.downstream_layer = to_u64("sweep.downstream_layer", v);
                 },
                 [](const ExperimentConfig& c) {
                   return c.downstream_layer ? std::to_string(*c.downstream_layer) : std::string("auto");
                 }});
    f.push_back(bool_field("sweep.patch_all_positions", &ExperimentConfig::sweep_patch_all_positions));
    f.push_back(size_field("substitute.stride", &ExperimentConfig::substitute_stride));
    f.push_back(size_field("substitute.max_tokens", &ExperimentConfig::substitute_max_tokens));
    return f;
  }();
  return table;
}

// Sections each stage depends on; a stage is reused only if these agree.
const std::map<std::string, std::set<std::string>>& stage_sections() {
  static const std::map<std::string, std::set<std::string>> deps{
      {"model", {"meta", "corpus", "model", "train"}},
      {"store", {"meta", "corpus", "model", "train", "capture"}},
      {"gaussian", {"meta", "corpus", "model", "train", "capture", "gaussian"}},
      {"sae", {"meta", "corpus", "model", "train", "capture", "sae"}},
  };
  return deps;
}

std::uint64_t stage_hash(const ExperimentConfig& c, const std::string& stage) {
  const auto& sections = stage_sections().at(stage);
  std::uint64_t h = kFnvOffset;
  for (const auto& f : fields()) {
    const std::string section = f.key.substr(0, f.key.find('.'));
    if (!sections.count(section)) continue;
    h = fnv1a(f.key + "=" + f.get(c) + "\n", h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Sidecars.

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

std::uint64_t file_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::uint64_t h = kFnvOffset;
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) h = fnv1a(buf, static_cast<std::size_t>(in.gcount()), h);
  return h;
}

json sidecar(const ExperimentConfig& c, const std::string& stage) {
  json j;
  j["artifact"] = stage;
  j["config_hash"] = hex64(c.hash());
  j["stage_hash"] = hex64(stage_hash(c, stage));
  j["seed"] = c.seed;
  return j;
}

json config_json(const ExperimentConfig& c) {
  json j = json::object();
  for (const auto& f : fields()) j[f.key] = f.get(c);
  return j;
}

json skips_json(const SkipCounters& s) {
  json j = json::object();
  for (const auto& [reason, n] : s.by_reason) j[reason] = n;
  return j;
}

std::string sae_stem(SaeVariant v, std::size_t i) { return "sae_" + to_string(v) + "_" + std::to_string(i); }

}  // namespace

// ---------------------------------------------------------------------------

std::size_t ExperimentConfig::downstream() const {
  return downstream_layer.value_or(model.n_layers > 0 ? model.n_layers - 1 : 0);
}

std::string ExperimentConfig::canonical() const {
  std::string s;
  for (const auto& f : fields()) s += f.key + "=" + f.get(*this) + "\n";
  return s;
}

std::uint64_t ExperimentConfig::hash() const { return fnv1a(canonical()); }

void ExperimentConfig::validate() const {
  if (schema_version != kConfigSchemaVersion) {
    throw ConfigError("config: meta.schema_version: unsupported version " + std::to_string(schema_version) +
                      " (this build reads version " + std::to_string(kConfigSchemaVersion) + ")");
  }
  ModelConfig probe = model;
  probe.vocab_size = 1;
  try {
    probe.validate();
  } catch (const InputError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("config: " + msg);
  };
  require(corpus_path.empty() ? synthetic_bytes >= 2 * (model.max_seq_len + 1) : true,
          "corpus.synthetic_bytes: too small for one training window");
  require(train.steps >= 1, "train.steps must be >= 1");
  require(train.batch_size >= 1, "train.batch_size must be >= 1");
  require(train.learning_rate > 0, "train.learning_rate must be > 0");
  require(hook_layer <= model.n_layers, "capture.hook_layer must be <= model.n_layers");
  require(capture_budget >= 2, "capture.token_budget must be >= 2");
  require(capture_stride >= 1, "capture.stride must be >= 1");
  require(distance_pairs >= 2, "gaussian.distance_pairs must be >= 2");
  require(sae.n_features >= model.d_model, "sae.n_features must be >= model.d_model");
  require(sae.learning_rate > 0, "sae.learning_rate must be > 0");
  require(sae.batch_rows >= 1, "sae.batch_rows must be >= 1");
  require(sae.batch_sequences >= 1, "sae.batch_sequences must be >= 1");
  require(sae.beta >= 0, "sae.beta must be >= 0");
  require(sae.alive_rate > 0 && sae.alive_rate <= 1, "sae.alive_rate must lie in (0, 1]");
  for (const auto& s : saes) {
    for (double l : s.lambdas) require(l >= 0, "sae." + to_string(s.variant) + "_lambdas must be >= 0");
    if (!s.lambdas.empty()) require(s.steps >= 1, "sae." + to_string(s.variant) + "_steps must be >= 1");
  }
  require(figure2_local_index < std::max<std::size_t>(1, saes[0].lambdas.size()),
          "sae.figure2_local_index is beyond sae.local_lambdas");
  require(alpha_points >= 1, "sweep.alpha_points must be >= 1");
  require(alpha_curvature > 0, "sweep.alpha_curvature must be > 0");
  require(alpha_max_ratio > 0, "sweep.alpha_max_ratio must be > 0");
  require(sweep_stride >= 1, "sweep.stride must be >= 1");
  require(substitute_stride >= 1, "substitute.stride must be >= 1");
  require(downstream() >= hook_layer && downstream() <= model.n_layers,
          "sweep.downstream_layer must lie between capture.hook_layer and model.n_layers");
}

ExperimentConfig default_config() {
  ExperimentConfig c;
  c.train.steps = 800;
  c.sae.n_features = 256;
  c.sae.learning_rate = 1e-3;
  c.sae.batch_rows = 256;
  c.sae.batch_sequences = 4;
  c.saes = {{SaeVariant::local, {0.2, 0.4, 1.0}, 10000},
            {SaeVariant::e2e, {0.01, 0.02, 0.05}, 1500},
            {SaeVariant::e2e_ds, {0.5, 1.0, 2.0}, 1500}};
  c.figure2_local_index = 1;
  c.sweep_kinds = {DirectionKind::isotropic_random, DirectionKind::cov_random_difference,
                   DirectionKind::cov_random_mixture, DirectionKind::real_difference,
                   DirectionKind::real_mixture};
  return c;
}

ExperimentConfig parse_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    std::istringstream in(text);
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config: line " + std::to_string(e.line()) + ": " + e.message());
  }
  std::map<std::string, const Field*> by_key;
  for (const auto& f : fields()) by_key[f.key] = &f;

  ExperimentConfig c = default_config();
  bool have_version = false, have_seed = false;
  for (const auto& [section, entries] : tree) {
    if (entries.empty() && !entries.data().empty()) {
      throw ConfigError("config: key '" + section + "' must appear inside a [section]");
    }
    for (const auto& [name, value] : entries) {
      const std::string key = section + "." + name;
      const auto it = by_key.find(key);
      if (it == by_key.end()) throw ConfigError("config: unknown key " + key);
      it->second->set(c, trim(value.data()));
      have_version |= key == "meta.schema_version";
      have_seed |= key == "meta.seed";
    }
  }
  if (!have_version) throw ConfigError("config: meta.schema_version is required");
  if (!have_seed) throw ConfigError("config: meta.seed is required");
  c.validate();
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

// ---------------------------------------------------------------------------

Pipeline::Pipeline(ExperimentConfig config, RunOptions options)
    : config_(std::move(config)), opt_(std::move(options)) {
  config_.validate();
  if (opt_.out_dir.empty()) throw ConfigError("an output directory is required");
  fs::create_directories(opt_.out_dir);
}

void Pipeline::log(const std::string& line) const {
  if (opt_.log) opt_.log(line);
}

bool Pipeline::up_to_date(const fs::path& sidecar_path) const {
  if (!fs::exists(sidecar_path)) return false;
  const json j = read_json(sidecar_path);
  const std::string stage = j.value("artifact", "");
  if (!stage_sections().count(stage)) return false;
  return j.value("stage_hash", "") == hex64(stage_hash(config_, stage));
}

const std::string& Pipeline::corpus_text() const {
  if (!text_) {
    text_ = config_.corpus_path.empty()
                ? synthetic_corpus(config_.synthetic_bytes, derive_seed(config_.seed, "corpus"))
                : read_text_file(config_.corpus_path);
    if (text_->empty()) throw InputError("corpus is empty");
    tokenizer_ = Tokenizer::fit(*text_);
  }
  return *text_;
}

std::vector<TokenSequence> Pipeline::windows() const {
  const TransformerModel model = load_model();
  return split_windows(model.tokenizer().encode(corpus_text()), config_.model.max_seq_len);
}

fs::path Pipeline::train_model() {
  const fs::path bin = opt_.out_dir / "model.bin", meta = opt_.out_dir / "model.json";
  if (fs::exists(bin) && up_to_date(meta)) {
    log("model: reusing " + bin.string());
    return bin;
  }
  const std::string& text = corpus_text();
  ModelConfig mc = config_.model;
  mc.vocab_size = tokenizer_->vocab_size();
  LmTrainOptions lo = config_.train;
  lo.workers = opt_.workers;
  log("model: training " + std::to_string(lo.steps) + " steps on " + std::to_string(text.size()) + " bytes");
  LmTrainReport report;
  const auto model = train_toy_lm(tokenizer_->encode(text), mc, *tokenizer_, lo,
                                  derive_seed(config_.seed, "lm"), &report);
  model.save(bin);
  json j = sidecar(config_, "model");
  j["model_fingerprint"] = hex64(model.fingerprint());
  j["vocab_size"] = mc.vocab_size;
  j["parameter_count"] = report.parameter_count;
  j["final_train_loss"] = report.final_train_loss;
  j["held_out_loss"] = report.held_out_loss;
  j["uniform_loss"] = report.uniform_loss;
  json curve = json::array();
  for (auto [step, loss] : report.loss_curve) curve.push_back({step, loss});
  j["loss_curve"] = curve;
  write_json(meta, j);
  log("model: held-out loss " + format_number(report.held_out_loss) + " nats (uniform " +
      format_number(report.uniform_loss) + ")");
  return bin;
}

TransformerModel Pipeline::load_model() const {
  const fs::path bin = opt_.out_dir / "model.bin";
  if (!fs::exists(bin)) throw InputError("no model in " + opt_.out_dir.string() + "; run train-model first");
  return TransformerModel::load(bin);
}

fs::path Pipeline::capture_store() {
  train_model();
  const fs::path bin = opt_.out_dir / "store.act", meta = opt_.out_dir / "store.json";
  if (fs::exists(bin) && up_to_date(meta)) {
    log("capture: reusing " + bin.string());
    return bin;
  }
  const auto model = load_model();
  const auto seqs = windows();
  CaptureOptions co{{config_.hook_layer}, config_.capture_budget, config_.capture_stride,
                    config_.capture_exclude_position_zero,
                    derive_seed(config_.seed, "capture"), opt_.workers};
  CaptureOutcome outcome;
  const auto store = capture(model, seqs, co, &outcome);
  store.save(bin);
  json j = sidecar(config_, "store");
  j["model_fingerprint"] = hex64(model.fingerprint());
  j["hook_layer"] = config_.hook_layer;
  j["rows"] = store.size();
  j["sequences_used"] = outcome.sequences_used;
  j["content_hash"] = hex64(store.content_hash());
  j["warning"] = outcome.warning;
  write_json(meta, j);
  if (outcome.partial) warnings_.push_back(outcome.warning);
  log("capture: " + std::to_string(store.size()) + " rows at " + HookPoint{config_.hook_layer}.name());
  return bin;
}

ActivationStore Pipeline::load_store() const {
  const fs::path bin = opt_.out_dir / "store.act";
  if (!fs::exists(bin)) throw InputError("no activation store in " + opt_.out_dir.string() + "; run capture first");
  auto store = ActivationStore::load(bin);
  if (store.model_fingerprint() != load_model().fingerprint()) {
    throw InputError("activation store was captured from a different model; rerun capture");
  }
  return store;
}

fs::path Pipeline::fit_gaussian_model() {
  capture_store();
  const fs::path bin = opt_.out_dir / "gaussian.bin", meta = opt_.out_dir / "gaussian.json";
  if (fs::exists(bin) && up_to_date(meta)) {
    log("gaussian: reusing " + bin.string());
    return bin;
  }
  const auto store = load_store();
  std::string warning;
  const auto gm = fit_gaussian(store, &warning);
  gm.save(bin);
  Rng rng(derive_seed(config_.seed, "distance"));
  const auto dist = estimate_pairwise_distance(store, config_.distance_pairs, rng);
  json j = sidecar(config_, "gaussian");
  j["model_fingerprint"] = hex64(store.model_fingerprint());
  j["jitter"] = gm.jitter;
  j["n_samples"] = gm.n_samples;
  j["covariance_trace"] = gm.covariance.trace();
  j["mean_pairwise_distance"] = dist.mean;
  j["mean_pairwise_distance_se"] = dist.standard_error;
  j["distance_pairs"] = dist.n_pairs;
  j["warning"] = warning;
  write_json(meta, j);
  if (!warning.empty()) warnings_.push_back(warning);
  log("gaussian: mean pairwise distance " + format_number(dist.mean) + ", jitter " + format_number(gm.jitter));
  return bin;
}

GaussianModel Pipeline::load_gaussian() const {
  const fs::path bin = opt_.out_dir / "gaussian.bin";
  if (!fs::exists(bin)) throw InputError("no Gaussian model in " + opt_.out_dir.string() + "; run fit-gaussian first");
  auto gm = GaussianModel::load(bin);
  if (gm.model_fingerprint != load_model().fingerprint()) {
    throw InputError("Gaussian model was fitted for a different model; rerun fit-gaussian");
  }
  return gm;
}

DistanceSummary Pipeline::load_distance() const {
  const json j = read_json(opt_.out_dir / "gaussian.json");
  return {j.at("mean_pairwise_distance").get<double>(), j.at("mean_pairwise_distance_se").get<double>(),
          j.at("distance_pairs").get<std::size_t>()};
}

AlphaGrid Pipeline::alpha_grid() const {
  return AlphaGrid::geometric(config_.alpha_points, config_.alpha_max_ratio * load_distance().mean,
                              config_.alpha_curvature);
}

std::vector<fs::path> Pipeline::train_saes(std::optional<SaeVariant> only) {
  capture_store();
  std::vector<fs::path> out;
  std::optional<TransformerModel> model;
  std::optional<ActivationStore> store;
  std::vector<TokenSequence> seqs;
  for (std::size_t v = 0; v < config_.saes.size(); ++v) {
    const SaeSetup& setup = config_.saes[v];
    if (only && setup.variant != *only) continue;
    for (std::size_t i = 0; i < setup.lambdas.size(); ++i) {
      const std::string stem = sae_stem(setup.variant, i);
      const fs::path bin = opt_.out_dir / (stem + ".bin"), meta = opt_.out_dir / (stem + ".json");
      out.push_back(bin);
      if (fs::exists(bin) && up_to_date(meta)) {
        log("sae: reusing " + bin.string());
        continue;
      }
      if (!model) {
        model = load_model();
        store = load_store();
        seqs = windows();
      }
      SaeTrainOptions so = config_.sae;
      so.steps = setup.steps;
      so.workers = opt_.workers;
      log("sae: training " + stem + " (lambda " + format_number(setup.lambdas[i]) + ", " +
          std::to_string(so.steps) + " steps)");
      const std::uint64_t seed = derive_seed(config_.seed, "sae", v, i);
      auto [sae, report] = train_sae(*model, *store, seqs, setup.variant, setup.lambdas[i], so, seed);
      sae.save(bin);
      json j = sidecar(config_, "sae");
      j["model_fingerprint"] = hex64(model->fingerprint());
      j["sae_fingerprint"] = hex64(sae.fingerprint());
      j["variant"] = to_string(report.variant);
      j["lambda"] = report.sparsity_coeff;
      j["beta"] = so.beta;
      j["hook_layer"] = sae.hook.layer;
      j["n_features"] = report.n_features;
      j["steps"] = report.steps;
      j["training_seed"] = report.seed;
      j["final_loss"] = {{"total", report.final_loss.total},
                         {"reconstruction", report.final_loss.reconstruction},
                         {"kl", report.final_loss.kl},
                         {"downstream", report.final_loss.downstream},
                         {"sparsity", report.final_loss.sparsity}};
      j["mean_l0"] = report.mean_l0;
      j["fvu"] = report.fvu;
      j["alive_count"] = report.alive_count;
      j["alive_rate_threshold"] = so.alive_rate;
      j["dead_steps"] = so.dead_steps;
      j["resampled_features"] = report.resampled;
      j["held_out_rows"] = report.held_out_rows;
      write_json(meta, j);
      log("sae: " + stem + " L0 " + format_number(report.mean_l0) + ", FVU " + format_number(report.fvu) +
          ", alive " + std::to_string(report.alive_count));
    }
  }
  return out;
}

std::vector<std::uint32_t> Pipeline::evaluation_sequences() const {
  // Windows the store never saw, in a seeded order; the store's own sequences
  // when the corpus is fully used.
  const auto store = load_store();
  const auto n_windows = static_cast<std::uint32_t>(windows().size());
  std::vector<std::uint8_t> used(n_windows, 0);
  for (auto id : store.sequence_ids()) {
    if (id < n_windows) used[id] = 1;
  }
  std::vector<std::uint32_t> ids;
  for (std::uint32_t i = 0; i < n_windows; ++i) {
    if (!used[i]) ids.push_back(i);
  }
  if (ids.empty()) return store.sequence_ids();
  Rng rng(derive_seed(config_.seed, "evaluation"));
  std::shuffle(ids.begin(), ids.end(), rng.engine());
  return ids;
}

namespace {

struct LoadedSae {
  std::string stem;
  Sae sae;
};

json manifest_base(const ExperimentConfig& c, const std::string& name, const TransformerModel& model,
                   const ActivationStore& store, const fs::path& gaussian_bin) {
  json m;
  m["experiment"] = name;
  m["config_hash"] = hex64(c.hash());
  m["seed"] = c.seed;
  m["config"] = config_json(c);
  m["model_fingerprint"] = hex64(model.fingerprint());
  m["store_content_hash"] = hex64(store.content_hash());
  m["gaussian_file_hash"] = hex64(file_hash(gaussian_bin));
  m["feature_active_threshold"] = kFeatureActiveThreshold;
  return m;
}

}  // namespace

fs::path Pipeline::run_sweep(const std::string& name, std::span<const DirectionKind> kinds) {
  fit_gaussian_model();
  const bool needs_sae = std::any_of(kinds.begin(), kinds.end(), [](DirectionKind k) {
    return k == DirectionKind::sae_error || k == DirectionKind::sae_feature;
  });
  std::vector<LoadedSae> saes;
  if (needs_sae) {
    for (const auto& p : train_saes()) saes.push_back({p.stem().string(), Sae::load(p)});
    if (saes.empty()) throw ConfigError("config: SAE directions requested but no sae.*_lambdas are set");
  }
  const auto model = load_model();
  const auto store = load_store();
  const auto gm = load_gaussian();
  const auto seqs = windows();
  const auto ids = evaluation_sequences();
  const auto grid = alpha_grid();
  const SweepOptions so{{config_.hook_layer}, config_.downstream(), config_.sweep_stride,
                        config_.sweep_max_tokens, derive_seed(config_.seed, "sweep"), opt_.workers,
                        config_.sweep_patch_all_positions};

  std::vector<CsvRow> rows;
  json curves = json::array();
  auto record = [&](const SweepResult& r, const std::string& id, const std::string& sae_stem_name) {
    for (auto& row : csv_rows(r, id)) rows.push_back(std::move(row));
    json cj{{"experiment_id", id},
            {"direction_kind", to_string(r.kind)},
            {"sae", sae_stem_name},
            {"tokens_visited", r.tokens_visited},
            {"skips", skips_json(r.skips)},
            {"warnings", r.warnings}};
    curves.push_back(cj);
    for (const auto& w : r.warnings) {
      warnings_.push_back(name + ": " + w);
      log("warning: " + w);
    }
  };
  for (DirectionKind kind : kinds) {
    if (kind == DirectionKind::sae_error || kind == DirectionKind::sae_feature) {
      for (const auto& s : saes) {
        log(name + ": sweeping " + to_string(kind) + " for " + s.stem);
        const DirectionSpec spec{kind, &gm, &store, &s.sae};
        record(sweep(model, seqs, ids, spec, grid, so), name + "." + s.stem, s.stem);
      }
    } else {
      log(name + ": sweeping " + to_string(kind));
      const DirectionSpec spec{kind, &gm, &store, nullptr};
      record(sweep(model, seqs, ids, spec, grid, so), name, "");
    }
  }
  const fs::path csv = opt_.out_dir / (name + ".csv");
  write_csv(csv, rows);
  json m = manifest_base(config_, name, model, store, opt_.out_dir / "gaussian.bin");
  m["kind"] = "sweep";
  m["alpha"] = grid.values;
  m["mean_pairwise_distance"] = load_distance().mean;
  m["hook_layer"] = config_.hook_layer;
  m["downstream_layer"] = config_.downstream();
  m["stride"] = so.stride;
  m["max_tokens"] = so.max_tokens;
  m["sweep_seed"] = so.seed;
  json sae_fps = json::object();
  for (const auto& s : saes) sae_fps[s.stem] = hex64(s.sae.fingerprint());
  m["sae_fingerprints"] = sae_fps;
  m["curves"] = curves;
  write_json(opt_.out_dir / (name + ".manifest.json"), m);
  log(name + ": wrote " + csv.string());
  return csv;
}

fs::path Pipeline::run_substitute(const std::string& name) {
  fit_gaussian_model();
  std::vector<LoadedSae> saes;
  const auto paths = train_saes();
  if (paths.empty()) throw ConfigError("config: substitution needs at least one SAE (sae.*_lambdas)");
  if (name == "fig2") {
    if (config_.saes[0].lambdas.empty()) throw ConfigError("config: figure 2 needs sae.local_lambdas");
    const fs::path p = opt_.out_dir / (sae_stem(SaeVariant::local, config_.figure2_local_index) + ".bin");
    saes.push_back({p.stem().string(), Sae::load(p)});
  } else {
    for (const auto& p : paths) saes.push_back({p.stem().string(), Sae::load(p)});
  }
  const auto model = load_model();
  const auto store = load_store();
  const auto gm = load_gaussian();
  const auto seqs = windows();
  const auto ids = evaluation_sequences();
  const SweepOptions so{{config_.hook_layer}, std::nullopt, config_.substitute_stride,
                        config_.substitute_max_tokens, derive_seed(config_.seed, "substitute"), opt_.workers};
  std::vector<CsvRow> rows;
  json results = json::array();
  for (const auto& s : saes) {
    log(name + ": substitution for " + s.stem);
    const auto r = substitute(model, seqs, ids, s.sae, gm, store, so);
    for (auto& row : csv_rows(r, name + "." + s.stem)) rows.push_back(std::move(row));
    results.push_back({{"experiment_id", name + "." + s.stem},
                       {"sae", s.stem},
                       {"sae_fingerprint", hex64(s.sae.fingerprint())},
                       {"mean_epsilon", r.mean_epsilon},
                       {"max_distance_error", r.max_distance_error},
                       {"tokens_visited", r.tokens_visited},
                       {"skips", skips_json(r.skips)}});
  }
  const fs::path csv = opt_.out_dir / (name + ".csv");
  write_csv(csv, rows);
  json m = manifest_base(config_, name, model, store, opt_.out_dir / "gaussian.bin");
  m["kind"] = "substitution";
  m["hook_layer"] = config_.hook_layer;
  m["stride"] = so.stride;
  m["max_tokens"] = so.max_tokens;
  m["substitute_seed"] = so.seed;
  m["results"] = results;
  write_json(opt_.out_dir / (name + ".manifest.json"), m);
  log(name + ": wrote " + csv.string());
  return csv;
}

fs::path Pipeline::run_figure(int figure) {
  using K = DirectionKind;
  switch (figure) {
    case 1: {
      const std::vector<K> kinds{K::isotropic_random, K::cov_random_difference, K::cov_random_mixture,
                                 K::real_difference, K::real_mixture};
      return run_sweep("fig1", kinds);
    }
    case 2: return run_substitute("fig2");
    case 3: {
      const std::vector<K> kinds{K::isotropic_random, K::cov_random_mixture, K::sae_error};
      return run_sweep("fig3", kinds);
    }
    case 4: {
      const std::vector<K> kinds{K::isotropic_random, K::cov_random_mixture, K::sae_feature};
      return run_sweep("fig4", kinds);
    }
    case 5: return run_substitute("fig5");
    default: throw ConfigError("figure must be one of 1, 2, 3, 4, 5");
  }
}

fs::path Pipeline::run_report() {
  std::vector<fs::path> manifests;
  for (const auto& entry : fs::directory_iterator(opt_.out_dir)) {
    const std::string file = entry.path().filename().string();
    const std::string suffix = ".manifest.json";
    if (file.size() > suffix.size() && file.ends_with(suffix) && file != "report.manifest.json") {
      manifests.push_back(entry.path());
    }
  }
  std::sort(manifests.begin(), manifests.end());
  if (manifests.empty()) throw InputError("no experiment manifests in " + opt_.out_dir.string());

  std::string fingerprint;
  std::vector<CsvRow> rows;
  json inputs = json::array();
  for (const auto& path : manifests) {
    const json m = read_json(path);
    const std::string fp = m.at("model_fingerprint").get<std::string>();
    if (fingerprint.empty()) fingerprint = fp;
    if (fp != fingerprint) {
      throw InputError("refusing to merge " + path.filename().string() + ": model fingerprint " + fp +
                       " differs from " + fingerprint);
    }
    const std::string name = m.at("experiment").get<std::string>();
    const fs::path csv = opt_.out_dir / (name + ".csv");
    for (auto& r : read_csv(csv)) rows.push_back(std::move(r));
    inputs.push_back({{"experiment", name},
                      {"config_hash", m.at("config_hash")},
                      {"csv_hash", hex64(file_hash(csv))}});
  }
  const fs::path out = opt_.out_dir / "report.csv";
  write_csv(out, rows);
  json m;
  m["experiment"] = "report";
  m["config_hash"] = hex64(config_.hash());
  m["model_fingerprint"] = fingerprint;
  m["inputs"] = inputs;
  write_json(opt_.out_dir / "report.manifest.json", m);
  log("report: merged " + std::to_string(manifests.size()) + " experiments into " + out.string());
  return out;
}

}  // namespace sdir
