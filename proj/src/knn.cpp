#include "crawlcurate/knn.hpp"

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <limits>
#include <queue>
#include <thread>
#include <unordered_set>

#include "crawlcurate/error.hpp"
#include "crawlcurate/hash.hpp"
#include "crawlcurate/util.hpp"

namespace crawlcurate::knn {

void PqParams::validate(std::size_t dim) const {
  if (m == 0 || dim % m != 0)
    throw Error(ErrorCode::Config, "dimension " + std::to_string(dim) + " not divisible by m=" + std::to_string(m));
  if (k == 0 || k > 256) throw Error(ErrorCode::Config, "k must be in [1,256]");
}

PqCodebook::PqCodebook(std::uint32_t dim, std::uint32_t m, std::uint32_t k, std::vector<float> centroids)
    : dim_(dim), m_(m), k_(k), centroids_(std::move(centroids)) {
  PqParams{m, k, 0, 0}.validate(dim);
  if (centroids_.size() != std::size_t(m) * k * sub_dim())
    throw Error(ErrorCode::InvariantViolation, "codebook size does not match m*k*d/m");
  for (float c : centroids_)
    if (!std::isfinite(c)) throw Error(ErrorCode::InvariantViolation, "non-finite centroid");
}

std::span<const float> PqCodebook::centroid(std::size_t subspace, std::size_t j) const {
  std::size_t ds = sub_dim();
  return std::span<const float>(centroids_).subspan((subspace * k_ + j) * ds, ds);
}

namespace {

inline float sq_dist(const float* a, const float* b, std::size_t n) {
  float s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    float d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

inline double sq_dist_d(const float* a, const double* b, std::size_t n) {
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double d = double(a[i]) - b[i];
    s += d * d;
  }
  return s;
}

double uniform01(std::uint64_t& state) { return double(splitmix64(state) >> 11) * 0x1.0p-53; }

struct SubspaceResult {
  std::vector<double> centroids;  // k * ds
  std::vector<double> trace;      // total squared error per assignment step
};

// Lloyd's k-means on one subspace. `points` holds n rows of ds floats.
SubspaceResult kmeans(const std::vector<float>& points, std::size_t n, std::size_t ds, std::size_t k,
                      std::uint32_t iters, std::uint64_t seed) {
  SubspaceResult res;
  auto& c = res.centroids;
  c.assign(k * ds, 0.0);
  auto pt = [&](std::size_t i) { return points.data() + i * ds; };

  // k-means++ seeding.
  std::uint64_t rng = seed;
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::size_t first = std::size_t(uniform01(rng) * double(n));
  std::copy(pt(first), pt(first) + ds, c.begin());
  for (std::size_t j = 1; j < k; ++j) {
    double total = 0;
    const double* prev = c.data() + (j - 1) * ds;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], sq_dist_d(pt(i), prev, ds));
      total += d2[i];
    }
    std::size_t pick = n - 1;
    if (total > 0) {
      double target = uniform01(rng) * total, acc = 0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (d2[i] > 0 && acc > target) {
          pick = i;
          break;
        }
      }
      if (d2[pick] == 0)  // rounding at the tail
        for (std::size_t i = n; i-- > 0;)
          if (d2[i] > 0) {
            pick = i;
            break;
          }
    } else {
      pick = j % n;
    }
    std::copy(pt(pick), pt(pick) + ds, c.begin() + std::ptrdiff_t(j * ds));
  }

  std::vector<std::uint32_t> assign(n);
  std::vector<double> err(n);
  std::vector<double> sums(k * ds);
  std::vector<std::size_t> counts(k);
  auto assign_step = [&] {
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      std::uint32_t arg = 0;
      for (std::size_t j = 0; j < k; ++j) {
        double d = sq_dist_d(pt(i), c.data() + j * ds, ds);
        if (d < best) {
          best = d;
          arg = std::uint32_t(j);
        }
      }
      assign[i] = arg;
      err[i] = best;
      total += best;
    }
    res.trace.push_back(total);
  };

  for (std::uint32_t it = 0; it < iters; ++it) {
    assign_step();
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      counts[assign[i]]++;
      for (std::size_t t = 0; t < ds; ++t) sums[assign[i] * ds + t] += pt(i)[t];
    }
    double movement = 0;
    std::vector<double> next(k * ds);
    for (std::size_t j = 0; j < k; ++j) {
      if (counts[j] == 0) continue;
      double moved = 0;
      for (std::size_t t = 0; t < ds; ++t) {
        next[j * ds + t] = sums[j * ds + t] / double(counts[j]);
        double delta = next[j * ds + t] - c[j * ds + t];
        moved += delta * delta;
      }
      movement = std::max(movement, std::sqrt(moved));
    }
    // Empty clusters take the worst-fit point of the largest cluster.
    for (std::size_t j = 0; j < k; ++j) {
      if (counts[j] != 0) continue;
      std::size_t largest = std::size_t(std::max_element(counts.begin(), counts.end()) - counts.begin());
      std::size_t worst = n;
      for (std::size_t i = 0; i < n; ++i)
        if (assign[i] == largest && (worst == n || err[i] > err[worst])) worst = i;
      if (worst == n || counts[largest] < 2) {
        std::copy(c.begin() + std::ptrdiff_t(j * ds), c.begin() + std::ptrdiff_t((j + 1) * ds),
                  next.begin() + std::ptrdiff_t(j * ds));
        continue;
      }
      std::copy(pt(worst), pt(worst) + ds, next.begin() + std::ptrdiff_t(j * ds));
      assign[worst] = std::uint32_t(j);
      err[worst] = 0;
      counts[largest]--;
      counts[j] = 1;
      movement = std::numeric_limits<double>::infinity();
    }
    c.swap(next);
    if (movement < 1e-6) break;
  }
  assign_step();
  return res;
}

}  // namespace

PqCodebook train_pq(Matrix vectors, const PqParams& params, TrainTrace* trace) {
  params.validate(vectors.dim);
  if (vectors.dim == 0 || vectors.data.size() % vectors.dim != 0)
    throw Error(ErrorCode::DimensionMismatch, "training data is not a whole number of vectors");
  const std::size_t n = vectors.rows(), d = vectors.dim, m = params.m, k = params.k, ds = d / m;
  if (n < k)
    throw Error(ErrorCode::TooFewVectors,
                "need at least " + std::to_string(k) + " training vectors, got " + std::to_string(n));

  std::vector<SubspaceResult> results(m);
  auto run = [&](std::size_t s) {
    std::vector<float> sub(n * ds);
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(vectors.data.data() + i * d + s * ds, ds, sub.data() + i * ds);
    std::uint64_t seed_state = params.seed ^ (0x5851f42d4c957f2dULL * (s + 1));
    results[s] = kmeans(sub, n, ds, k, params.kmeans_iters, splitmix64(seed_state));
  };
  std::size_t workers = std::min<std::size_t>(m, std::max(1u, std::thread::hardware_concurrency()));
  if (workers <= 1) {
    for (std::size_t s = 0; s < m; ++s) run(s);
  } else {
    std::vector<std::thread> pool;
    std::atomic<std::size_t> next{0};
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t s; (s = next.fetch_add(1)) < m;) run(s);
      });
    for (auto& t : pool) t.join();
  }

  std::vector<float> centroids;
  centroids.reserve(m * k * ds);
  for (const auto& r : results)
    for (double v : r.centroids) centroids.push_back(float(v));
  if (trace) {
    std::size_t steps = 0;
    for (const auto& r : results) steps = std::max(steps, r.trace.size());
    trace->mean_error.assign(steps, 0.0);
    for (const auto& r : results)
      for (std::size_t t = 0; t < steps; ++t)
        trace->mean_error[t] += r.trace[std::min(t, r.trace.size() - 1)] / double(n);
  }
  return PqCodebook(std::uint32_t(d), std::uint32_t(m), std::uint32_t(k), std::move(centroids));
}

std::vector<std::uint8_t> PqCodebook::encode(std::span<const float> vector) const {
  if (vector.size() != dim_)
    throw Error(ErrorCode::DimensionMismatch,
                "expected dimension " + std::to_string(dim_) + ", got " + std::to_string(vector.size()));
  std::size_t ds = sub_dim();
  std::vector<std::uint8_t> code(m_);
  for (std::size_t s = 0; s < m_; ++s) {
    const float* x = vector.data() + s * ds;
    float best = std::numeric_limits<float>::infinity();
    std::size_t arg = 0;
    for (std::size_t j = 0; j < k_; ++j) {
      float dd = sq_dist(x, centroids_.data() + (s * k_ + j) * ds, ds);
      if (dd < best) {
        best = dd;
        arg = j;
      }
    }
    code[s] = std::uint8_t(arg);
  }
  return code;
}

std::vector<float> PqCodebook::reconstruct(std::span<const std::uint8_t> code) const {
  if (code.size() != m_) throw Error(ErrorCode::DimensionMismatch, "code length differs from m");
  std::vector<float> out;
  out.reserve(dim_);
  for (std::size_t s = 0; s < m_; ++s) {
    if (code[s] >= k_) throw Error(ErrorCode::InvariantViolation, "code byte out of range");
    auto c = centroid(s, code[s]);
    out.insert(out.end(), c.begin(), c.end());
  }
  return out;
}

// ---- index ----------------------------------------------------------------

struct PqIndex::Storage {
  PqCodebook codebook;
  std::size_t n = 0;
  const std::uint8_t* codes = nullptr;
  const std::uint64_t* ids = nullptr;
  std::vector<std::uint8_t> owned_codes;
  std::vector<std::uint64_t> owned_ids;
  void* map = nullptr;
  std::size_t map_size = 0;

  Storage() = default;
  Storage(const Storage&) = delete;
  Storage& operator=(const Storage&) = delete;
  ~Storage() {
    if (map) munmap(map, map_size);
  }
};

PqIndex PqIndex::build(PqCodebook codebook, Matrix vectors, std::span<const std::uint64_t> ids) {
  if (!codebook.trained()) throw Error(ErrorCode::InvariantViolation, "codebook is not trained");
  if (vectors.dim != codebook.dim())
    throw Error(ErrorCode::DimensionMismatch, "vectors do not match codebook dimension");
  if (ids.size() != vectors.rows()) throw Error(ErrorCode::InvariantViolation, "id count differs from row count");
  std::unordered_set<std::uint64_t> seen;
  for (auto id : ids)
    if (!seen.insert(id).second) throw Error(ErrorCode::InvariantViolation, "duplicate id " + std::to_string(id));
  auto st = std::make_shared<Storage>();
  st->n = ids.size();
  st->owned_codes.reserve(st->n * codebook.m());
  for (std::size_t i = 0; i < st->n; ++i) {
    auto c = codebook.encode(vectors.row(i));
    st->owned_codes.insert(st->owned_codes.end(), c.begin(), c.end());
  }
  st->owned_ids.assign(ids.begin(), ids.end());
  st->codes = st->owned_codes.data();
  st->ids = st->owned_ids.data();
  st->codebook = std::move(codebook);
  PqIndex idx;
  idx.storage_ = std::move(st);
  return idx;
}

void PqIndex::require_open() const {
  if (!storage_) throw Error(ErrorCode::IndexClosed, "index is closed");
}

std::size_t PqIndex::size() const {
  require_open();
  return storage_->n;
}

std::uint32_t PqIndex::dim() const {
  require_open();
  return storage_->codebook.dim();
}

const PqCodebook& PqIndex::codebook() const {
  require_open();
  return storage_->codebook;
}

std::span<const std::uint8_t> PqIndex::code(std::size_t row) const {
  require_open();
  std::size_t m = storage_->codebook.m();
  return {storage_->codes + row * m, m};
}

std::uint64_t PqIndex::id(std::size_t row) const {
  require_open();
  return storage_->ids[row];
}

std::vector<float> PqIndex::reconstruct(std::size_t row) const { return codebook().reconstruct(code(row)); }

void PqIndex::close() { storage_.reset(); }

std::vector<float> PqIndex::distance_table(std::span<const float> query) const {
  const auto& cb = codebook();
  if (query.size() != cb.dim())
    throw Error(ErrorCode::DimensionMismatch,
                "expected dimension " + std::to_string(cb.dim()) + ", got " + std::to_string(query.size()));
  std::size_t m = cb.m(), k = cb.k(), ds = cb.sub_dim();
  std::vector<float> table(m * k);
  for (std::size_t s = 0; s < m; ++s)
    for (std::size_t j = 0; j < k; ++j)
      table[s * k + j] = sq_dist(query.data() + s * ds, cb.data().data() + (s * k + j) * ds, ds);
  return table;
}

namespace {

struct HeapLess {
  bool operator()(const Neighbor& a, const Neighbor& b) const {
    return a.distance < b.distance || (a.distance == b.distance && a.id < b.id);
  }
};

class TopK {
 public:
  explicit TopK(std::size_t k) : k_(k) {}
  void push(Neighbor nb) {
    if (heap_.size() < k_) {
      heap_.push(nb);
    } else if (HeapLess{}(nb, heap_.top())) {
      heap_.pop();
      heap_.push(nb);
    }
  }
  QueryResult take() {
    QueryResult out;
    out.reserve(heap_.size());
    while (!heap_.empty()) {
      out.push_back(heap_.top());
      heap_.pop();
    }
    std::reverse(out.begin(), out.end());
    return out;
  }

 private:
  std::size_t k_;
  std::priority_queue<Neighbor, std::vector<Neighbor>, HeapLess> heap_;
};

}  // namespace

QueryResult PqIndex::search(std::span<const float> query, std::size_t k_nn, const IdFilter& filter) const {
  auto storage = storage_;
  if (!storage) throw Error(ErrorCode::IndexClosed, "index is closed");
  if (k_nn == 0) throw Error(ErrorCode::InvariantViolation, "k_nn must be at least 1");
  auto table = distance_table(query);
  const std::size_t m = storage->codebook.m(), k = storage->codebook.k();
  TopK top(k_nn);
  for (std::size_t row = 0; row < storage->n; ++row) {
    std::uint64_t id = storage->ids[row];
    if (filter && !filter(id)) continue;
    const std::uint8_t* c = storage->codes + row * m;
    float d = 0;
    for (std::size_t s = 0; s < m; ++s) d += table[s * k + c[s]];
    top.push({id, d});
  }
  return top.take();
}

// ---- persistence ----------------------------------------------------------

namespace {

std::size_t align_up(std::size_t v) { return (v + kIndexAlignment - 1) / kIndexAlignment * kIndexAlignment; }

}  // namespace

IndexLayout index_layout(std::uint32_t dim, std::uint32_t m, std::uint32_t k, std::uint64_t n) {
  IndexLayout l;
  l.codebook_offset = kIndexAlignment;
  l.codes_offset = align_up(l.codebook_offset + std::size_t(k) * dim * sizeof(float));
  l.ids_offset = align_up(l.codes_offset + std::size_t(n) * m);
  l.file_size = l.ids_offset + std::size_t(n) * sizeof(std::uint64_t);
  return l;
}

std::string index_header(std::uint32_t dim, std::uint32_t m, std::uint32_t k, std::uint64_t n) {
  std::string h = "PQIX";
  put_le<std::uint32_t>(h, kIndexVersion);
  put_le<std::uint32_t>(h, dim);
  put_le<std::uint32_t>(h, m);
  put_le<std::uint32_t>(h, k);
  put_le<std::uint32_t>(h, 0);
  put_le<std::uint64_t>(h, n);
  h.resize(kIndexAlignment, '\0');
  return h;
}

std::string serialize_index(const PqIndex& index) {
  const auto& cb = index.codebook();
  std::size_t n = index.size();
  auto layout = index_layout(cb.dim(), cb.m(), cb.k(), n);
  std::string out = index_header(cb.dim(), cb.m(), cb.k(), n);
  for (float v : cb.data()) put_le<float>(out, v);
  out.resize(layout.codes_offset, '\0');
  for (std::size_t i = 0; i < n; ++i) {
    auto c = index.code(i);
    out.append(reinterpret_cast<const char*>(c.data()), c.size());
  }
  out.resize(layout.ids_offset, '\0');
  for (std::size_t i = 0; i < n; ++i) put_le<std::uint64_t>(out, index.id(i));
  return out;
}

void save_index(const PqIndex& index, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_index(index));
}

PqIndex load_index(const std::filesystem::path& path, LoadMode mode) {
  int fd = ::open(path.c_str(), O_RDONLY | O_CLOEXEC);
  if (fd < 0) throw Error(ErrorCode::Io, "cannot open index " + path.string() + ": " + std::strerror(errno));
  struct Closer {
    int fd;
    ~Closer() { ::close(fd); }
  } closer{fd};
  struct stat st {};
  if (fstat(fd, &st) != 0) throw Error(ErrorCode::Io, "cannot stat index " + path.string());
  std::size_t size = std::size_t(st.st_size);

  char header[kIndexAlignment];
  if (size < kIndexAlignment || pread(fd, header, kIndexAlignment, 0) != ssize_t(kIndexAlignment) ||
      std::memcmp(header, "PQIX", 4) != 0)
    throw Error(ErrorCode::BadMagic, "not a PQ index: " + path.string());
  auto version = get_le<std::uint32_t>(header + 4);
  if (version != kIndexVersion)
    throw Error(ErrorCode::VersionMismatch, "index version " + std::to_string(version) + " unsupported");
  auto dim = get_le<std::uint32_t>(header + 8);
  auto m = get_le<std::uint32_t>(header + 12);
  auto k = get_le<std::uint32_t>(header + 16);
  auto n = get_le<std::uint64_t>(header + 24);
  if (m == 0 || k == 0 || k > 256 || dim == 0 || dim % m != 0 || n > (std::uint64_t(1) << 48))
    throw Error(ErrorCode::Malformed, "index header has invalid parameters");
  auto layout = index_layout(dim, m, k, n);
  if (size != layout.file_size)
    throw Error(ErrorCode::Malformed, "index file size " + std::to_string(size) + " does not match header (" +
                                          std::to_string(layout.file_size) + ")");

  std::vector<float> centroids(std::size_t(k) * dim);
  std::size_t cb_bytes = centroids.size() * sizeof(float);
  if (pread(fd, centroids.data(), cb_bytes, off_t(layout.codebook_offset)) != ssize_t(cb_bytes))
    throw Error(ErrorCode::Io, "short read on index codebook");

  auto storage = std::make_shared<PqIndex::Storage>();
  storage->codebook = PqCodebook(dim, m, k, std::move(centroids));
  storage->n = n;
  if (mode == LoadMode::Mmap) {
    void* p = mmap(nullptr, size, PROT_READ, MAP_SHARED, fd, 0);
    if (p == MAP_FAILED) throw Error(ErrorCode::Io, "mmap failed: " + std::string(std::strerror(errno)));
    storage->map = p;
    storage->map_size = size;
    storage->codes = static_cast<const std::uint8_t*>(p) + layout.codes_offset;
    storage->ids = reinterpret_cast<const std::uint64_t*>(static_cast<const char*>(p) + layout.ids_offset);
  } else {
    storage->owned_codes.resize(std::size_t(n) * m);
    storage->owned_ids.resize(n);
    auto read_all = [&](void* dst, std::size_t bytes, std::size_t offset) {
      auto* out = static_cast<char*>(dst);
      while (bytes > 0) {
        ssize_t r = pread(fd, out, std::min<std::size_t>(bytes, 1 << 30), off_t(offset));
        if (r <= 0) throw Error(ErrorCode::Io, "short read on index " + path.string());
        out += r;
        offset += std::size_t(r);
        bytes -= std::size_t(r);
      }
    };
    read_all(storage->owned_codes.data(), storage->owned_codes.size(), layout.codes_offset);
    read_all(storage->owned_ids.data(), storage->owned_ids.size() * sizeof(std::uint64_t), layout.ids_offset);
    if (k < 256)
      for (auto c : storage->owned_codes)
        if (c >= k) throw Error(ErrorCode::Malformed, "code byte out of range");
    storage->codes = storage->owned_codes.data();
    storage->ids = storage->owned_ids.data();
  }
  PqIndex idx;
  idx.storage_ = std::move(storage);
  return idx;
}

QueryResult brute_force_search(Matrix vectors, std::span<const float> query, std::size_t k_nn,
                               std::span<const std::uint64_t> ids) {
  if (query.size() != vectors.dim) throw Error(ErrorCode::DimensionMismatch, "query dimension mismatch");
  std::size_t n = vectors.rows();
  if (!ids.empty() && ids.size() != n) throw Error(ErrorCode::InvariantViolation, "id count differs from row count");
  if (k_nn == 0) return {};
  TopK top(k_nn);
  for (std::size_t i = 0; i < n; ++i)
    top.push({ids.empty() ? std::uint64_t(i) : ids[i], sq_dist(query.data(), vectors.row(i).data(), vectors.dim)});
  return top.take();
}

double recall_at(const QueryResult& approximate, const QueryResult& exact, std::size_t k) {
  std::size_t truth = std::min(k, exact.size());
  if (truth == 0) return 1.0;
  std::unordered_set<std::uint64_t> want;
  for (std::size_t i = 0; i < truth; ++i) want.insert(exact[i].id);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < std::min(k, approximate.size()); ++i) hit += want.count(approximate[i].id);
  return double(hit) / double(truth);
}

}  // namespace crawlcurate::knn
