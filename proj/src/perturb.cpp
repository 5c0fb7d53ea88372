#include "sdir/perturb.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "sdir/parallel.hpp"

namespace sdir {

namespace {

using Index = Eigen::Index;

// Clean distribution at one position, prepared once for many comparisons.
struct CleanDistribution {
  Vec logp;
  Vec p;

  explicit CleanDistribution(std::span<const double> logits) {
    const Vec l = as_vec(logits);
    const double m = l.maxCoeff();
    const double lse = m + std::log((l.array() - m).exp().sum());
    logp = l.array() - lse;
    p = logp.array().exp();
  }

  double kl_to(std::span<const double> q_logits) const {
    const Vec q = as_vec(q_logits);
    const double m = q.maxCoeff();
    const double lse = m + std::log((q.array() - m).exp().sum());
    double kl = 0.0;
    for (Index i = 0; i < q.size(); ++i) {
      if (p[i] > 0.0) kl += p[i] * (logp[i] - (q[i] - lse));
    }
    return std::max(kl, 0.0);
  }
};

struct Moments {
  double mean = 0.0;
  double se = 0.0;
};

// Fixed-order two-pass mean and standard error of the mean.
Moments moments(const std::vector<double>& v) {
  Moments m;
  if (v.empty()) return m;
  double sum = 0.0;
  for (double x : v) sum += x;
  m.mean = sum / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - m.mean) * (x - m.mean);
    m.se = std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
  }
  return m;
}

struct WorkItem {
  std::uint32_t sequence_id = 0;
  std::vector<std::size_t> positions;
};

std::vector<WorkItem> plan_tokens(std::span<const TokenSequence> corpus,
                                  std::span<const std::uint32_t> ids, const SweepOptions& o) {
  if (o.stride == 0) throw InputError("stride must be >= 1");
  std::vector<WorkItem> plan;
  std::size_t budget = o.max_tokens == 0 ? static_cast<std::size_t>(-1) : o.max_tokens;
  for (std::uint32_t id : ids) {
    if (budget == 0) break;
    if (id >= corpus.size()) throw InputError("sequence id " + std::to_string(id) + " is not in the corpus");
    WorkItem w{id, {}};
    for (std::size_t t = 0; t < corpus[id].size() && budget > 0; t += o.stride) {
      w.positions.push_back(t);
      --budget;
    }
    if (!w.positions.empty()) plan.push_back(std::move(w));
  }
  if (plan.empty()) throw InputError("no tokens selected for the experiment");
  return plan;
}

void check_sources(const TransformerModel& model, const DirectionSpec& spec, HookPoint hook) {
  const std::uint64_t fp = model.fingerprint();
  if (spec.store && (spec.store->model_fingerprint() != fp || spec.store->hook() != hook)) {
    throw InputError("activation store does not match the model fingerprint and hook");
  }
  if (spec.gaussian && (spec.gaussian->model_fingerprint != fp || spec.gaussian->hook != hook)) {
    throw InputError("Gaussian model does not match the model fingerprint and hook");
  }
  if (spec.sae && (spec.sae->model_fingerprint != fp || spec.sae->hook != hook)) {
    throw InputError("SAE does not match the model fingerprint and hook");
  }
}

std::string skip_reason(DirectionKind kind) {
  return kind == DirectionKind::sae_feature ? "no_candidate_feature" : "exact_reconstruction";
}

}  // namespace

double kl_divergence(std::span<const double> p_logits, std::span<const double> q_logits) {
  if (p_logits.size() != q_logits.size() || p_logits.empty()) {
    throw InputError("kl_divergence: logit vectors must be non-empty and of equal length");
  }
  if (!all_finite(p_logits) || !all_finite(q_logits)) {
    throw InputError("kl_divergence: logits must be finite");
  }
  return CleanDistribution(p_logits).kl_to(q_logits);
}

AlphaGrid AlphaGrid::geometric(std::size_t n, double max_alpha, double curvature) {
  if (n == 0) throw InputError("alpha grid needs at least one point");
  if (n == 1) return AlphaGrid{{0.0}};
  if (!(max_alpha > 0.0) || !std::isfinite(max_alpha)) throw InputError("alpha grid maximum must be positive");
  if (!(curvature > 0.0)) throw InputError("alpha grid curvature must be positive");
  AlphaGrid g;
  g.values.resize(n);
  const double denom = std::expm1(curvature);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = static_cast<double>(i) / static_cast<double>(n - 1);
    g.values[i] = max_alpha * std::expm1(curvature * u) / denom;
  }
  g.values.front() = 0.0;
  g.values.back() = max_alpha;
  return g;
}

AlphaGrid AlphaGrid::from_values(std::vector<double> values) {
  AlphaGrid g{std::move(values)};
  g.validate();
  return g;
}

void AlphaGrid::validate() const {
  if (values.empty() || values.front() != 0.0) throw InputError("alpha grid must start at 0");
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (!(values[i] > values[i - 1]) || !std::isfinite(values[i])) {
      throw InputError("alpha grid must be finite and strictly increasing");
    }
  }
}

std::size_t SkipCounters::total() const {
  std::size_t n = 0;
  for (const auto& [reason, count] : by_reason) n += count;
  return n;
}

std::uint64_t token_seed(std::uint64_t seed, std::uint32_t sequence_id, std::size_t position,
                         std::string_view label) {
  return derive_seed(seed, label, sequence_id, position);
}

SweepResult sweep(const TransformerModel& model, std::span<const TokenSequence> corpus,
                  std::span<const std::uint32_t> sequence_ids, const DirectionSpec& spec,
                  const AlphaGrid& grid, const SweepOptions& options) {
  grid.validate();
  spec.validate();
  const ModelConfig& c = model.config();
  if (options.hook.layer > c.n_layers) throw InputError("hook layer is beyond the model");
  if (options.downstream_layer &&
      (*options.downstream_layer < options.hook.layer || *options.downstream_layer > c.n_layers)) {
    throw InputError("downstream layer must lie between the hook and the final residual");
  }
  check_sources(model, spec, options.hook);
  const auto plan = plan_tokens(corpus, sequence_ids, options);
  const std::size_t m = grid.values.size();
  const std::string label = "sweep." + to_string(spec.kind);

  struct TokenRecord {
    std::vector<double> kl, l2;
  };
  struct SequenceRecord {
    std::vector<TokenRecord> tokens;
    std::size_t skipped = 0;
  };
  std::vector<SequenceRecord> records(plan.size());

  parallel_for(plan.size(), options.workers, [&](std::size_t w) {
    const WorkItem& item = plan[w];
    const TokenSequence& tokens = corpus[item.sequence_id];
    const PrefixCache cache = PrefixCache::build(model, tokens, options.hook);
    const Mat& resid = cache.resid_at(options.hook.layer);
    BaseActivation base;
    if (spec.kind == DirectionKind::sae_feature) {
      base.active_in_sequence = sequence_feature_activity(*spec.sae, resid);
    }
    std::vector<std::pair<std::size_t, Vec>> drawn;  // all-positions mode
    for (std::size_t t : item.positions) {
      Rng rng(token_seed(options.seed, item.sequence_id, t, label));
      base.activation = resid.row(static_cast<Index>(t)).transpose();
      base.store_index = spec.store ? spec.store->find({item.sequence_id, static_cast<std::uint32_t>(t)})
                                    : std::nullopt;
      const auto dir = make_direction(spec, &base, rng);
      if (!dir) {
        ++records[w].skipped;
        continue;
      }
      if (options.patch_all_positions) {
        drawn.emplace_back(t, dir->vector);
        continue;
      }
      Mat reps(static_cast<Index>(m), static_cast<Index>(c.d_model));
      for (std::size_t j = 0; j < m; ++j) {
        reps.row(static_cast<Index>(j)) = (base.activation + grid.values[j] * dir->vector).transpose();
      }
      const auto alt = resume_alternatives(model, cache, t, reps, options.downstream_layer);
      const CleanDistribution clean(row_span(cache.logits, static_cast<Index>(t)));
      TokenRecord rec;
      rec.kl.resize(m);
      for (std::size_t j = 0; j < m; ++j) rec.kl[j] = clean.kl_to(row_span(alt.logits, static_cast<Index>(j)));
      if (options.downstream_layer) {
        const auto orig = cache.resid_at(*options.downstream_layer).row(static_cast<Index>(t));
        rec.l2.resize(m);
        for (std::size_t j = 0; j < m; ++j) rec.l2[j] = (alt.downstream.row(static_cast<Index>(j)) - orig).norm();
      }
      records[w].tokens.push_back(std::move(rec));
    }
    if (drawn.empty()) return;
    // Every drawn direction is applied at once, one forward per alpha.
    std::vector<TokenRecord> recs(drawn.size());
    for (std::size_t j = 0; j < m; ++j) {
      Mat patched = resid;
      for (const auto& [t, v] : drawn) patched.row(static_cast<Index>(t)) += grid.values[j] * v.transpose();
      Activations acts;
      const Mat logits = forward_from(model, options.hook.layer, std::move(patched),
                                      options.downstream_layer ? &acts : nullptr);
      for (std::size_t k = 0; k < drawn.size(); ++k) {
        const auto row = static_cast<Index>(drawn[k].first);
        const CleanDistribution clean(row_span(cache.logits, row));
        recs[k].kl.push_back(clean.kl_to(row_span(logits, row)));
        if (options.downstream_layer) {
          const auto& ds = *options.downstream_layer;
          recs[k].l2.push_back((acts.resid_at(ds).row(row) - cache.resid_at(ds).row(row)).norm());
        }
      }
    }
    for (auto& r : recs) records[w].tokens.push_back(std::move(r));
  });

  SweepResult result;
  result.kind = spec.kind;
  result.hook = options.hook;
  result.downstream_layer = options.downstream_layer;
  if (spec.sae && (spec.kind == DirectionKind::sae_error || spec.kind == DirectionKind::sae_feature)) {
    result.sae_variant = to_string(spec.sae->variant);
    result.sae_l0 = spec.sae->mean_l0;
  }
  std::size_t skipped = 0;
  for (const auto& r : records) {
    skipped += r.skipped;
    result.tokens_visited += r.tokens.size() + r.skipped;
  }
  if (skipped > 0) result.skips.add(skip_reason(spec.kind), skipped);

  std::vector<double> kl, l2;
  for (std::size_t j = 0; j < m; ++j) {
    kl.clear();
    l2.clear();
    for (const auto& r : records) {
      for (const auto& t : r.tokens) {
        kl.push_back(t.kl[j]);
        if (!t.l2.empty()) l2.push_back(t.l2[j]);
      }
    }
    if (kl.empty()) break;
    const Moments mk = moments(kl);
    CurvePoint p{grid.values[j], mk.mean, mk.se, std::nullopt, kl.size()};
    if (options.downstream_layer) p.mean_downstream_l2 = moments(l2).mean;
    result.points.push_back(p);
  }
  if (result.points.empty()) {
    result.warnings.push_back("every selected token was skipped; no curve produced");
  }
  for (std::size_t j = 1; j < result.points.size(); ++j) {
    if (result.points[j].mean_kl < result.points[j - 1].mean_kl) {
      std::ostringstream w;
      w << to_string(spec.kind) << ": mean KL decreases from alpha=" << result.points[j - 1].alpha
        << " to alpha=" << result.points[j].alpha;
      result.warnings.push_back(w.str());
    }
  }
  return result;
}

SubstitutionResult substitute(const TransformerModel& model, std::span<const TokenSequence> corpus,
                              std::span<const std::uint32_t> sequence_ids, const Sae& sae,
                              const GaussianModel& gm, const ActivationStore& store,
                              const SweepOptions& options) {
  const DirectionSpec iso{DirectionKind::isotropic_random, &gm, &store, &sae};
  const DirectionSpec covmix{DirectionKind::cov_random_mixture, &gm, &store, &sae};
  const DirectionSpec realmix{DirectionKind::real_mixture, &gm, &store, &sae};
  realmix.validate();
  check_sources(model, iso, options.hook);
  const auto plan = plan_tokens(corpus, sequence_ids, options);
  const std::size_t n_types = substitution_types().size();
  const auto d = static_cast<Index>(model.config().d_model);

  struct TokenRecord {
    std::vector<double> kl;
    double eps = 0.0;
    double distance_error = 0.0;
  };
  struct SequenceRecord {
    std::vector<TokenRecord> tokens;
    std::size_t skipped = 0;
  };
  std::vector<SequenceRecord> records(plan.size());

  parallel_for(plan.size(), options.workers, [&](std::size_t w) {
    const WorkItem& item = plan[w];
    const PrefixCache cache = PrefixCache::build(model, corpus[item.sequence_id], options.hook);
    const Mat& resid = cache.resid_at(options.hook.layer);
    for (std::size_t t : item.positions) {
      BaseActivation base;
      base.activation = resid.row(static_cast<Index>(t)).transpose();
      base.store_index = store.find({item.sequence_id, static_cast<std::uint32_t>(t)});
      const Vec x_hat = reconstruct(sae, {base.activation.data(), static_cast<std::size_t>(d)});
      const double eps = (x_hat - base.activation).norm();
      if (eps < kExactReconstructionEpsilon) {
        ++records[w].skipped;
        continue;
      }
      Mat points(static_cast<Index>(n_types), d);
      points.row(0) = x_hat.transpose();
      Index row = 1;
      for (const DirectionSpec* spec : {&iso, &covmix, &realmix}) {
        Rng rng(token_seed(options.seed, item.sequence_id, t, "substitute." + to_string(spec->kind)));
        const auto dir = make_direction(*spec, &base, rng);
        points.row(row++) = (base.activation + eps * dir->vector).transpose();
      }
      TokenRecord rec;
      rec.eps = eps;
      for (Index r = 1; r < points.rows(); ++r) {
        const double dist = (points.row(r).transpose() - base.activation).norm();
        rec.distance_error = std::max(rec.distance_error, std::abs(dist - eps));
      }
      const auto alt = resume_alternatives(model, cache, t, points);
      const CleanDistribution clean(row_span(cache.logits, static_cast<Index>(t)));
      rec.kl.resize(n_types);
      for (std::size_t j = 0; j < n_types; ++j) rec.kl[j] = clean.kl_to(row_span(alt.logits, static_cast<Index>(j)));
      records[w].tokens.push_back(std::move(rec));
    }
  });

  SubstitutionResult result;
  result.hook = options.hook;
  result.sae_variant = to_string(sae.variant);
  result.sae_l0 = sae.mean_l0;
  std::size_t skipped = 0;
  std::vector<double> eps;
  for (const auto& r : records) {
    skipped += r.skipped;
    result.tokens_visited += r.tokens.size() + r.skipped;
    for (const auto& t : r.tokens) {
      eps.push_back(t.eps);
      result.max_distance_error = std::max(result.max_distance_error, t.distance_error);
    }
  }
  if (skipped > 0) result.skips.add("exact_reconstruction", skipped);
  result.mean_epsilon = moments(eps).mean;
  std::vector<double> kl;
  for (std::size_t j = 0; j < n_types; ++j) {
    kl.clear();
    for (const auto& r : records) {
      for (const auto& t : r.tokens) kl.push_back(t.kl[j]);
    }
    const Moments mk = moments(kl);
    result.stats.push_back({substitution_types()[j], mk.mean, mk.se, kl.size()});
  }
  return result;
}

// ---------------------------------------------------------------------------

const std::vector<std::string>& csv_columns() {
  static const std::vector<std::string> cols{
      "experiment_id", "direction_kind", "sae_variant",        "sae_l0",  "alpha_or_subst_type",
      "mean_kl",       "se_kl",          "mean_downstream_l2", "n_tokens"};
  return cols;
}

std::string format_number(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::vector<CsvRow> csv_rows(const SweepResult& r, const std::string& experiment_id) {
  std::vector<CsvRow> rows;
  for (const auto& p : r.points) {
    rows.push_back({experiment_id, to_string(r.kind), r.sae_variant, r.sae_l0, format_number(p.alpha),
                    p.mean_kl, p.se_kl, p.mean_downstream_l2, p.n_tokens});
  }
  return rows;
}

std::vector<CsvRow> csv_rows(const SubstitutionResult& r, const std::string& experiment_id) {
  std::vector<CsvRow> rows;
  for (const auto& s : r.stats) {
    rows.push_back({experiment_id, "substitution", r.sae_variant, r.sae_l0, s.type, s.mean_kl,
                    s.se_kl, std::nullopt, s.n_tokens});
  }
  return rows;
}

namespace {

void check_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") != std::string::npos) {
    throw InputError("CSV field contains a reserved character: '" + s + "'");
  }
}

std::string optional_number(const std::optional<double>& v) { return v ? format_number(*v) : ""; }

double parse_number(const std::string& s, const std::filesystem::path& path) {
  double v = 0.0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw InputError(path.string() + ": malformed number '" + s + "'");
  }
  return v;
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(line.substr(start, comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

}  // namespace

void write_csv(const std::filesystem::path& path, std::span<const CsvRow> rows) {
  std::ostringstream out;
  for (std::size_t i = 0; i < csv_columns().size(); ++i) out << (i ? "," : "") << csv_columns()[i];
  out << '\n';
  for (const auto& r : rows) {
    for (const auto* f : {&r.experiment_id, &r.direction_kind, &r.sae_variant, &r.alpha_or_subst_type}) {
      check_field(*f);
    }
    out << r.experiment_id << ',' << r.direction_kind << ',' << r.sae_variant << ','
        << optional_number(r.sae_l0) << ',' << r.alpha_or_subst_type << ','
        << format_number(r.mean_kl) << ',' << format_number(r.se_kl) << ','
        << optional_number(r.mean_downstream_l2) << ',' << r.n_tokens << '\n';
  }
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw std::runtime_error("cannot open " + path.string() + " for writing");
  const std::string text = out.str();
  file.write(text.data(), static_cast<std::streamsize>(text.size()));
  file.close();
  if (!file) throw std::runtime_error("failed writing " + path.string());
}

std::vector<CsvRow> read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || split(line) != csv_columns()) {
    throw InputError(path.string() + ": header does not match the expected CSV schema");
  }
  std::vector<CsvRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split(line);
    if (f.size() != csv_columns().size()) {
      throw InputError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                       std::to_string(csv_columns().size()) + " fields");
    }
    CsvRow r;
    r.experiment_id = f[0];
    r.direction_kind = f[1];
    r.sae_variant = f[2];
    if (!f[3].empty()) r.sae_l0 = parse_number(f[3], path);
    r.alpha_or_subst_type = f[4];
    r.mean_kl = parse_number(f[5], path);
    r.se_kl = parse_number(f[6], path);
    if (!f[7].empty()) r.mean_downstream_l2 = parse_number(f[7], path);
    const double n = parse_number(f[8], path);
    if (n < 0 || n != std::floor(n)) throw InputError(path.string() + ": n_tokens must be a count");
    r.n_tokens = static_cast<std::size_t>(n);
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace sdir
