#include "sdir/store.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sdir/parallel.hpp"
#include "sdir/tensor_file.hpp"

namespace sdir {

namespace {

constexpr char kStoreMagic[] = "SDIRACT1";
constexpr std::uint32_t kStoreVersion = 1;

std::uint64_t key(RowMeta m) {
  return (static_cast<std::uint64_t>(m.sequence_id) << 32) | m.position;
}

}  // namespace

ActivationStore::ActivationStore(HookPoint hook, std::size_t d_model, std::uint64_t model_fingerprint)
    : hook_(hook), d_model_(d_model), model_fingerprint_(model_fingerprint) {
  if (d_model == 0) throw InputError("store width must be positive");
}

void ActivationStore::append(std::span<const double> row, RowMeta meta) {
  if (row.size() != d_model_) throw InputError("store row width mismatch");
  if (!all_finite(row)) throw InputError("non-finite activation row");
  data_.insert(data_.end(), row.begin(), row.end());
  index_.emplace(key(meta), meta_.size());
  meta_.push_back(meta);
}

std::span<const float> ActivationStore::row(std::size_t i) const {
  if (i >= size()) throw InputError("store row index out of range");
  return {data_.data() + i * d_model_, d_model_};
}

Vec ActivationStore::row_vec(std::size_t i) const {
  const auto r = row(i);
  Vec v(static_cast<Eigen::Index>(d_model_));
  for (std::size_t k = 0; k < d_model_; ++k) v[static_cast<Eigen::Index>(k)] = r[k];
  return v;
}

std::optional<std::size_t> ActivationStore::find(RowMeta where) const {
  auto it = index_.find(key(where));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

Mat ActivationStore::slice(std::size_t begin, std::size_t end) const {
  if (begin > end || end > size()) throw InputError("store slice out of range");
  Mat m(static_cast<Eigen::Index>(end - begin), static_cast<Eigen::Index>(d_model_));
  std::copy(data_.begin() + static_cast<std::ptrdiff_t>(begin * d_model_),
            data_.begin() + static_cast<std::ptrdiff_t>(end * d_model_), m.data());
  return m;
}

Mat ActivationStore::gather(std::span<const std::size_t> indices) const {
  Mat m(static_cast<Eigen::Index>(indices.size()), static_cast<Eigen::Index>(d_model_));
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto src = row(indices[r]);
    std::copy(src.begin(), src.end(), m.data() + r * d_model_);
  }
  return m;
}

std::uint64_t ActivationStore::content_hash() const {
  const std::uint64_t header[] = {hook_.layer, d_model_, model_fingerprint_, meta_.size()};
  std::uint64_t h = fnv1a(header, sizeof header);
  h = fnv1a(data_.data(), data_.size() * sizeof(float), h);
  return fnv1a(meta_.data(), meta_.size() * sizeof(RowMeta), h);
}

std::vector<std::uint32_t> ActivationStore::sequence_ids() const {
  std::vector<std::uint32_t> out;
  std::unordered_map<std::uint32_t, bool> seen;
  for (const auto& m : meta_) {
    if (seen.emplace(m.sequence_id, true).second) out.push_back(m.sequence_id);
  }
  return out;
}

void ActivationStore::save(const std::filesystem::path& path) const {
  static_assert(sizeof(RowMeta) == 8);
  io::BinaryWriter w(path);
  w.bytes(kStoreMagic, 8);
  w.u32(kStoreVersion);
  w.u32(static_cast<std::uint32_t>(hook_.layer));
  w.u64(meta_.size());
  w.u64(d_model_);
  w.u64(model_fingerprint_);
  w.pad_to(64);
  w.bytes(data_.data(), data_.size() * sizeof(float));
  w.bytes(meta_.data(), meta_.size() * sizeof(RowMeta));
  w.close();
}

ActivationStore ActivationStore::load(const std::filesystem::path& path) {
  io::BinaryReader r(path);
  r.expect_magic(kStoreMagic);
  if (r.u32() != kStoreVersion) throw InputError(path.string() + ": unsupported store version");
  const HookPoint hook{r.u32()};
  const std::uint64_t n = r.u64();
  const std::uint64_t d = r.u64();
  const std::uint64_t fp = r.u64();
  if (d == 0 || d > (1u << 20) || n > (1ULL << 34) / d) throw InputError(path.string() + ": corrupt header");
  r.skip_to(64);
  ActivationStore store(hook, d, fp);
  store.data_.resize(n * d);
  r.bytes(store.data_.data(), store.data_.size() * sizeof(float));
  store.meta_.resize(n);
  r.bytes(store.meta_.data(), n * sizeof(RowMeta));
  for (std::size_t i = 0; i < n; ++i) store.index_.emplace(key(store.meta_[i]), i);
  return store;
}

ActivationStore capture(const TransformerModel& model, std::span<const TokenSequence> sequences,
                        const CaptureOptions& options, CaptureOutcome* outcome) {
  if (options.token_budget < 2) throw InputError("capture.token_budget must be >= 2");
  if (options.stride < 1) throw InputError("capture.stride must be >= 1");
  if (options.hook.layer > model.config().n_layers) throw InputError("capture hook out of range");

  std::vector<std::size_t> order(sequences.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(options.seed, "capture.order"));
  std::shuffle(order.begin(), order.end(), rng.engine());

  ActivationStore store(options.hook, model.config().d_model, model.fingerprint());
  CaptureOutcome out;
  const std::size_t chunk = std::max<std::size_t>(1, options.workers) * 8;
  for (std::size_t begin = 0; begin < order.size() && store.size() < options.token_budget;
       begin += chunk) {
    const std::size_t end = std::min(order.size(), begin + chunk);
    std::vector<Mat> resid(end - begin);
    parallel_for(end - begin, options.workers, [&](std::size_t i) {
      resid[i] = residual_at(model, sequences[order[begin + i]], options.hook.layer);
    });
    for (std::size_t i = 0; i < resid.size() && store.size() < options.token_budget; ++i) {
      ++out.sequences_used;
      const auto seq_id = static_cast<std::uint32_t>(order[begin + i]);
      for (std::size_t p = 0; p < static_cast<std::size_t>(resid[i].rows()); p += options.stride) {
        if (p == 0 && options.exclude_position_zero) continue;
        if (store.size() >= options.token_budget) break;
        store.append(row_span(resid[i], static_cast<Eigen::Index>(p)),
                     {seq_id, static_cast<std::uint32_t>(p)});
      }
    }
  }
  if (store.size() < options.token_budget) {
    out.partial = true;
    out.warning = "corpus exhausted after " + std::to_string(store.size()) + " of " +
                  std::to_string(options.token_budget) + " requested activations";
  }
  if (outcome != nullptr) *outcome = out;
  return store;
}

SampledRow sample_row(const ActivationStore& store, Rng& rng) {
  if (store.empty()) throw InputError("cannot sample from an empty store");
  const std::size_t i = rng.index(store.size());
  return {i, store.row_vec(i), store.meta(i)};
}

std::pair<SampledRow, SampledRow> sample_pair_distinct(const ActivationStore& store, Rng& rng) {
  if (store.size() < 2) throw InputError("need at least two stored rows for a distinct pair");
  const std::size_t i = rng.index(store.size());
  std::size_t j = rng.index(store.size() - 1);
  if (j >= i) ++j;
  return {{i, store.row_vec(i), store.meta(i)}, {j, store.row_vec(j), store.meta(j)}};
}

DistanceEstimate estimate_pairwise_distance(const ActivationStore& store, std::size_t n_pairs,
                                            Rng& rng) {
  if (store.size() < 2) throw InputError("need at least two stored rows");
  if (n_pairs == 0) throw InputError("n_pairs must be positive");
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t k = 0; k < n_pairs; ++k) {
    const auto [a, b] = sample_pair_distinct(store, rng);
    const double dist = (a.activation - b.activation).norm();
    sum += dist;
    sum_sq += dist * dist;
  }
  const double n = static_cast<double>(n_pairs);
  DistanceEstimate e;
  e.mean = sum / n;
  e.n_pairs = n_pairs;
  if (n_pairs > 1) {
    const double var = std::max(0.0, (sum_sq - n * e.mean * e.mean) / (n - 1.0));
    e.standard_error = std::sqrt(var / n);
  }
  return e;
}

double mean_pairwise_distance(const ActivationStore& store, std::size_t n_pairs, Rng& rng) {
  return estimate_pairwise_distance(store, n_pairs, rng).mean;
}

std::size_t held_out_begin(const ActivationStore& store, double fraction) {
  const auto n_held = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(store.size())));
  return store.size() - std::min(n_held, store.size());
}

}  // namespace sdir
