#include <doctest.h>

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "crawlcurate/error.hpp"
#include "crawlcurate/knn.hpp"
#include "crawlcurate/util.hpp"
#include "test_support.hpp"

using namespace crawlcurate;
using namespace crawlcurate::knn;

namespace {

std::vector<float> gaussian(std::size_t n, std::size_t d, std::uint64_t seed) {
  cc_test::Rng rng(seed);
  std::vector<float> v(n * d);
  for (std::size_t i = 0; i < v.size(); i += 2) {
    double u1 = std::max(rng.uniform(), 1e-300), u2 = rng.uniform();
    double r = std::sqrt(-2 * std::log(u1));
    v[i] = float(r * std::cos(2 * M_PI * u2));
    if (i + 1 < v.size()) v[i + 1] = float(r * std::sin(2 * M_PI * u2));
  }
  return v;
}

std::vector<std::uint64_t> iota_ids(std::size_t n, std::uint64_t base = 1000) {
  std::vector<std::uint64_t> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = base + i;
  return ids;
}

double sq(std::span<const float> a, std::span<const float> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (double(a[i]) - b[i]) * (double(a[i]) - b[i]);
  return s;
}

PqIndex small_index(std::size_t n = 2000, std::size_t d = 16, std::uint32_t m = 4, std::uint32_t k = 16) {
  static std::vector<float> data;
  data = gaussian(n, d, 11);
  Matrix mat{data, d};
  auto cb = train_pq(mat, PqParams{m, k, 10, 3});
  auto ids = iota_ids(n);
  return PqIndex::build(cb, mat, ids);
}

}  // namespace

TEST_CASE("parameter validation") {
  CHECK_THROWS_AS(PqParams({3, 16, 5, 1}).validate(16), Error);
  CHECK_THROWS_AS(PqParams({4, 0, 5, 1}).validate(16), Error);
  CHECK_THROWS_AS(PqParams({4, 257, 5, 1}).validate(16), Error);
  CHECK_NOTHROW(PqParams({4, 256, 5, 1}).validate(16));
  auto data = gaussian(10, 4, 1);
  try {
    train_pq(Matrix{data, 4}, PqParams{2, 16, 5, 1});
    FAIL("expected TooFewVectors");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::TooFewVectors);
  }
}

TEST_CASE("k distinct training vectors are their own centroids") {
  auto data = gaussian(16, 8, 5);
  auto cb = train_pq(Matrix{data, 8}, PqParams{2, 16, 10, 9});
  for (std::size_t i = 0; i < 16; ++i) {
    std::span<const float> v(data.data() + i * 8, 8);
    CHECK(cb.reconstruct(cb.encode(v)) == std::vector<float>(v.begin(), v.end()));
  }
}

TEST_CASE("training is deterministic and its objective never increases") {
  auto data = gaussian(10000, 16, 21);
  TrainTrace trace;
  auto a = train_pq(Matrix{data, 16}, PqParams{4, 64, 15, 7}, &trace);
  auto b = train_pq(Matrix{data, 16}, PqParams{4, 64, 15, 7});
  CHECK(a == b);
  REQUIRE(trace.mean_error.size() >= 2);
  for (std::size_t t = 1; t < trace.mean_error.size(); ++t)
    CHECK(trace.mean_error[t] <= trace.mean_error[t - 1] + 1e-9);
  auto c = train_pq(Matrix{data, 16}, PqParams{4, 64, 15, 8});
  CHECK_FALSE(a == c);
}

TEST_CASE("encode picks the nearest centroid per subspace") {
  // Centroid j of every subspace is (j, j); subspace s of x is (s, s).
  const std::uint32_t d = 8, m = 4, k = 6;
  std::vector<float> c;
  for (std::uint32_t s = 0; s < m; ++s)
    for (std::uint32_t j = 0; j < k; ++j) c.insert(c.end(), {float(j), float(j)});
  PqCodebook cb(d, m, k, c);
  std::vector<float> x = {0, 0, 1, 1, 2, 2, 3, 3};
  CHECK(cb.encode(x) == std::vector<std::uint8_t>{0, 1, 2, 3});
  CHECK(cb.reconstruct(cb.encode(x)) == x);
  std::vector<float> tie = {0.5f, 0.5f, 0, 0, 0, 0, 0, 0};
  CHECK(cb.encode(tie)[0] == 0);
  auto y = gaussian(1, d, 2);
  auto once = cb.encode(y);
  CHECK(cb.encode(cb.reconstruct(once)) == once);
  CHECK_THROWS_AS(cb.encode(std::vector<float>(7)), Error);
}

TEST_CASE("encode equals exhaustive search over all codes") {
  // d = 4, m = 2, k = 2: four possible codes, full-vector argmin.
  cc_test::Rng rng(4);
  for (int t = 0; t < 200; ++t) {
    auto c = gaussian(4, 2, 100 + std::uint64_t(t));
    PqCodebook cb(4, 2, 2, c);
    auto x = gaussian(1, 4, 500 + std::uint64_t(t));
    double best = std::numeric_limits<double>::infinity();
    std::vector<std::uint8_t> arg;
    for (std::uint8_t a = 0; a < 2; ++a)
      for (std::uint8_t b = 0; b < 2; ++b) {
        std::vector<std::uint8_t> code = {a, b};
        double dd = sq(x, cb.reconstruct(code));
        if (dd < best) best = dd, arg = code;
      }
    CHECK(cb.encode(x) == arg);
  }
}

TEST_CASE("search basics") {
  auto idx = small_index();
  CHECK(idx.size() == 2000);
  auto q = idx.reconstruct(17);
  auto r = idx.search(q, 5);
  REQUIRE(r.size() == 5);
  CHECK(r[0].distance == doctest::Approx(0.0).epsilon(1e-5));
  bool found = false;
  for (auto& n : r) found |= n.id == idx.id(17) && n.distance < 1e-5f;
  CHECK(found);
  for (std::size_t i = 1; i < r.size(); ++i)
    CHECK((r[i - 1].distance < r[i].distance || (r[i - 1].distance == r[i].distance && r[i - 1].id < r[i].id)));
  CHECK_THROWS_AS(idx.search(q, 0), Error);
  CHECK(idx.search(q, 5000).size() == 2000);
  CHECK_THROWS_AS(idx.search(std::vector<float>(3), 1), Error);
}

TEST_CASE("filtered rows never appear") {
  auto idx = small_index();
  auto q = gaussian(1, 16, 77);
  auto blocked = [](std::uint64_t id) { return id % 2 == 0; };
  auto r = idx.search(q, 50, [&](std::uint64_t id) { return !blocked(id); });
  REQUIRE(r.size() == 50);
  for (auto& n : r) CHECK_FALSE(blocked(n.id));
  auto none = idx.search(q, 10, [](std::uint64_t) { return false; });
  CHECK(none.empty());
  // Filtering equals post-filtering the unfiltered full ranking.
  auto all = idx.search(q, idx.size());
  QueryResult expected;
  for (auto& n : all)
    if (!blocked(n.id) && expected.size() < 50) expected.push_back(n);
  CHECK(r == expected);
}

TEST_CASE("brute force on hand examples") {
  std::vector<float> v = {0, 0, 1, 0, 0, 2, 3, 3};
  auto r = brute_force_search(Matrix{v, 2}, std::vector<float>{0, 0}, 3);
  REQUIRE(r.size() == 3);
  CHECK(r[0] == Neighbor{0, 0.f});
  CHECK(r[1] == Neighbor{1, 1.f});
  CHECK(r[2] == Neighbor{2, 4.f});
  std::vector<std::uint64_t> ids = {9, 8, 7, 6};
  auto tie = brute_force_search(Matrix{v, 2}, std::vector<float>{0.5f, 0}, 2, ids);
  CHECK(tie[0].id == 8);
  CHECK(tie[1].id == 9);
  QueryResult exact = {{1, 0}, {2, 0}, {3, 0}, {4, 0}};
  QueryResult approx = {{1, 0}, {5, 0}, {3, 0}, {6, 0}};
  CHECK(recall_at(approx, exact, 4) == 0.5);
  CHECK(recall_at(approx, exact, 1) == 1.0);
}

TEST_CASE("m equal to d with k covering every value is exact") {
  // Each coordinate takes one of 8 values, so 1-d codebooks reproduce the data.
  const std::size_t n = 500, d = 4;
  cc_test::Rng rng(6);
  std::vector<float> data(n * d);
  for (auto& x : data) x = float(rng.below(8));
  auto cb = train_pq(Matrix{data, d}, PqParams{4, 8, 20, 1});
  auto ids = iota_ids(n, 0);
  auto idx = PqIndex::build(cb, Matrix{data, d}, ids);
  for (int t = 0; t < 20; ++t) {
    auto q = gaussian(1, d, 900 + std::uint64_t(t));
    for (auto& x : q) x = x * 3 + 3;
    auto a = idx.search(q, 10), b = brute_force_search(Matrix{data, d}, q, 10);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].id == b[i].id);
      CHECK(a[i].distance == doctest::Approx(b[i].distance).epsilon(1e-5));
    }
  }
}

TEST_CASE("asymmetric distances match reconstruction distances") {
  auto idx = small_index();
  for (int t = 0; t < 50; ++t) {
    auto q = gaussian(1, 16, 300 + std::uint64_t(t));
    for (auto& n : idx.search(q, 20)) {
      std::size_t row = std::size_t(n.id - 1000);
      CHECK(std::abs(double(n.distance) - sq(q, idx.reconstruct(row))) <= 1e-4);
    }
  }
}

TEST_CASE("recall does not decrease with k") {
  auto data = gaussian(3000, 16, 12);
  Matrix mat{data, 16};
  auto idx = PqIndex::build(train_pq(mat, PqParams{4, 32, 10, 2}), mat, iota_ids(3000, 0));
  for (int t = 0; t < 20; ++t) {
    auto q = gaussian(1, 16, 700 + std::uint64_t(t));
    auto exact = brute_force_search(mat, q, 10);
    double prev = 0;
    for (std::size_t kk : {10, 20, 50, 100, 500}) {
      auto approx = idx.search(q, kk);
      std::set<std::uint64_t> got;
      for (auto& n : approx) got.insert(n.id);
      std::size_t hit = 0;
      for (auto& n : exact) hit += got.count(n.id);
      double rec = double(hit) / 10;
      CHECK(rec >= prev);
      prev = rec;
    }
  }
}

TEST_CASE("build rejects bad input") {
  auto data = gaussian(100, 8, 1);
  Matrix mat{data, 8};
  auto cb = train_pq(mat, PqParams{2, 16, 5, 1});
  auto ids = iota_ids(100);
  ids[50] = ids[10];
  CHECK_THROWS_AS(PqIndex::build(cb, mat, ids), Error);
  CHECK_THROWS_AS(PqIndex::build(cb, mat, iota_ids(99)), Error);
}

TEST_CASE("persistence round trip and byte-identical builds") {
  cc_test::TempDir dir;
  auto idx = small_index();
  save_index(idx, dir / "a.pqix");
  auto bytes = read_file(dir / "a.pqix");
  CHECK(bytes.size() == index_layout(16, 4, 16, 2000).file_size);
  CHECK(bytes.substr(0, 64) == index_header(16, 4, 16, 2000));
  CHECK(serialize_index(small_index()) == bytes);
  auto q = gaussian(1, 16, 5);
  for (auto mode : {LoadMode::Mmap, LoadMode::InCore}) {
    auto back = load_index(dir / "a.pqix", mode);
    CHECK(back.codebook() == idx.codebook());
    CHECK(back.search(q, 10) == idx.search(q, 10));
    CHECK(serialize_index(back) == bytes);
    back.close();
    CHECK_FALSE(back.is_open());
    try {
      back.search(q, 1);
      FAIL("expected IndexClosed");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::IndexClosed);
    }
  }
}

TEST_CASE("corrupt index files") {
  cc_test::TempDir dir;
  auto bytes = serialize_index(small_index());
  auto code_after = [&](const std::string& content) {
    write_file_atomic(dir / "x.pqix", content);
    try {
      load_index(dir / "x.pqix", LoadMode::InCore);
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::Config;
  };
  CHECK(code_after(bytes.substr(0, bytes.size() - 8)) == ErrorCode::Malformed);
  CHECK(code_after(bytes.substr(0, 10)) == ErrorCode::BadMagic);
  auto magic = bytes;
  magic[0] = 'X';
  CHECK(code_after(magic) == ErrorCode::BadMagic);
  auto version = bytes;
  version[4] = 9;
  CHECK(code_after(version) == ErrorCode::VersionMismatch);
  try {
    load_index(dir / "missing.pqix", LoadMode::Mmap);
    FAIL("expected Io");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Io);
  }
}

TEST_CASE("memory-mapped open of a 1 GB index is fast") {
  cc_test::TempDir dir("cc-big");
  const std::uint32_t d = 64, m = 8, k = 256;
  const std::uint64_t n = (std::uint64_t(1) << 30) / 16;
  auto layout = index_layout(d, m, k, n);
  REQUIRE(layout.file_size >= (std::uint64_t(1) << 30));
  auto path = dir / "big.pqix";
  {
    int fd = ::open(path.c_str(), O_CREAT | O_WRONLY | O_TRUNC, 0644);
    REQUIRE(fd >= 0);
    auto header = index_header(d, m, k, n);
    REQUIRE(::pwrite(fd, header.data(), header.size(), 0) == ssize_t(header.size()));
    REQUIRE(::ftruncate(fd, off_t(layout.file_size)) == 0);
    ::close(fd);
  }
  cc_test::Stopwatch mm;
  auto mapped = load_index(path, LoadMode::Mmap);
  double mmap_s = mm.seconds();
  CHECK(mapped.size() == n);
  cc_test::Stopwatch ic;
  auto loaded = load_index(path, LoadMode::InCore);
  double incore_s = ic.seconds();
  MESSAGE("mmap open " << mmap_s << " s, in-core load " << incore_s << " s");
  CHECK(mmap_s < 0.1);
  CHECK(incore_s >= 10 * mmap_s);
  CHECK(mapped.code(n - 1)[0] == loaded.code(n - 1)[0]);
}
