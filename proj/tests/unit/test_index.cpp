#include <gtest/gtest.h>

#include <random>

#include "support/oracles.hpp"
#include "support/synth.hpp"

using namespace vsearch;

namespace {

constexpr CodebookId kId = 0xabcdef;
constexpr ImageId kA = 10, kB = 20;

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::kIoError;
}

Signature sig(std::vector<SignatureEntry> e, CodebookId id = kId) { return Signature(id, std::move(e)); }

std::vector<std::pair<ImageId, Signature>> toy() {
  return {{kA, sig({{1, 2}, {3, 1}})}, {kB, sig({{1, 1}, {2, 4}})}};
}

std::vector<std::pair<ImageId, Signature>> random_corpus(std::size_t n, std::uint32_t k, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::pair<ImageId, Signature>> out;
  for (std::size_t i = 0; i < n; ++i) out.emplace_back(1000 + 7 * i, synth::random_signature(rng, kId, k, 1 + rng() % 30));
  return out;
}

}  // namespace

TEST(BuildIndex, HandConstructedLayout) {
  const auto idx = build_index(toy(), {0, 4});
  const std::vector<std::uint64_t> offsets(idx.offsets().begin(), idx.offsets().end());
  EXPECT_EQ(offsets, (std::vector<std::uint64_t>{0, 0, 2, 3, 4}));
  ASSERT_EQ(idx.posting_count(), 4u);
  EXPECT_EQ(idx.posting(0), (Posting{kA, 2.0 / 3.0}));
  EXPECT_EQ(idx.posting(1), (Posting{kB, 1.0 / 5.0}));
  EXPECT_EQ(idx.posting(2), (Posting{kB, 4.0 / 5.0}));
  EXPECT_EQ(idx.posting(3), (Posting{kA, 1.0 / 3.0}));
  EXPECT_EQ(idx.image_norms(), (std::map<ImageId, std::uint64_t>{{kA, 3}, {kB, 5}}));
  EXPECT_EQ(idx.codebook_id(), kId);
}

TEST(BuildIndex, InputOrderIrrelevant) {
  auto sigs = toy();
  std::swap(sigs[0], sigs[1]);
  EXPECT_EQ(build_index(sigs, {0, 4}), build_index(toy(), {0, 4}));
}

TEST(BuildIndex, SubRangeKeepsOnlyItsWords) {
  const auto idx = build_index(toy(), {2, 4});
  const std::vector<std::uint64_t> offsets(idx.offsets().begin(), idx.offsets().end());
  EXPECT_EQ(offsets, (std::vector<std::uint64_t>{0, 1, 2}));
  EXPECT_EQ(idx.postings(2), (std::vector<Posting>{{kB, 0.8}}));
  EXPECT_EQ(idx.postings(3), (std::vector<Posting>{{kA, 1.0 / 3.0}}));
  EXPECT_TRUE(idx.postings(1).empty());
}

TEST(BuildIndex, Empty) {
  const auto idx = build_index(std::vector<std::pair<ImageId, Signature>>{}, {0, 4});
  const std::vector<std::uint64_t> offsets(idx.offsets().begin(), idx.offsets().end());
  EXPECT_EQ(offsets, (std::vector<std::uint64_t>(5, 0)));
  EXPECT_EQ(idx.posting_count(), 0u);
}

TEST(BuildIndex, Errors) {
  auto dup = toy();
  dup.push_back({kA, sig({{0, 1}})});
  EXPECT_EQ(code_of([&] { build_index(dup, {0, 4}); }), ErrorCode::kDuplicateImageId);
  auto mixed = toy();
  mixed.push_back({30, sig({{0, 1}}, kId + 1)});
  EXPECT_EQ(code_of([&] { build_index(mixed, {0, 4}); }), ErrorCode::kCodebookMismatch);
}

TEST(BuildIndex, PostingsConserveNonzeros) {
  const auto corpus = random_corpus(300, 128, 4);
  std::size_t entries = 0;
  for (const auto& [_, s] : corpus) entries += s.size();
  EXPECT_EQ(build_index(corpus, {0, 128}).posting_count(), entries);
  std::size_t split = 0;
  for (auto r : make_shard_ranges(128, 5)) split += build_index(corpus, r).posting_count();
  EXPECT_EQ(split, entries);
}

TEST(BuildIndex, LayoutInvariants) {
  const auto idx = build_index(random_corpus(200, 64, 5), {0, 64});
  const auto off = idx.offsets();
  EXPECT_EQ(off.back(), idx.posting_count());
  for (std::size_t w = 0; w + 1 < off.size(); ++w) {
    EXPECT_LE(off[w], off[w + 1]);
    for (auto i = off[w]; i + 1 < off[w + 1]; ++i) EXPECT_LT(idx.posting(i).image_id, idx.posting(i + 1).image_id);
  }
  for (std::size_t i = 0; i < idx.posting_count(); ++i) {
    EXPECT_GT(idx.posting(i).weight, 0.0);
    EXPECT_LE(idx.posting(i).weight, 1.0);
  }
}

TEST(QueryShard, NoWordsInRange) {
  const auto idx = build_index(toy(), {2, 4});
  EXPECT_TRUE(query_shard(idx, sig({{0, 1}, {1, 5}})).empty());
}

TEST(QueryShard, SelfMatchIsHalf) {
  const auto idx = build_index(toy(), {0, 4});
  for (const auto& [id, s] : toy()) {
    const auto p = query_shard(idx, s);
    const auto it = std::find_if(p.begin(), p.end(), [&](const PartialScore& x) { return x.image_id == id; });
    ASSERT_NE(it, p.end());
    EXPECT_NEAR(it->value(), 0.5, 1e-15);
  }
}

TEST(QueryShard, MatchesDenseOracle) {
  std::vector<std::pair<ImageId, Signature>> corpus = {
      {1, sig({{0, 3}, {2, 1}, {5, 2}})}, {2, sig({{1, 1}, {2, 2}})}, {3, sig({{4, 7}})}};
  const auto idx = build_index(corpus, {0, 6});
  const auto q = sig({{0, 1}, {2, 3}, {4, 1}});
  const auto p = query_shard(idx, q);
  ASSERT_EQ(p.size(), 3u);
  const auto qd = oracle::dense(q, 6);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(p[i].image_id, corpus[i].first);
    const auto dd = oracle::dense(corpus[i].second, 6);
    double want = 0;
    for (std::size_t w = 0; w < 6; ++w) {
      if (qd[w] > 0 && dd[w] > 0) want += qd[w] * dd[w] / (qd[w] + dd[w]);
    }
    EXPECT_NEAR(p[i].value(), want, 1e-15);
  }
}

TEST(QueryShard, CodebookMismatch) {
  const auto idx = build_index(toy(), {0, 4});
  EXPECT_EQ(code_of([&] { query_shard(idx, sig({{1, 1}}, kId + 1)); }), ErrorCode::kCodebookMismatch);
}

TEST(Serialization, RoundTrip) {
  for (auto range : {WordRange{0, 128}, WordRange{40, 90}}) {
    const auto idx = build_index(random_corpus(150, 128, 6), range);
    const auto bytes = serialize(idx);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "CXIX");
    EXPECT_EQ(deserialize_index(bytes), idx);
  }
  const auto empty = build_index(std::vector<std::pair<ImageId, Signature>>{}, {0, 10});
  EXPECT_EQ(deserialize_index(serialize(empty)), empty);
}

TEST(Serialization, TruncationAndBitFlipsDetected) {
  const auto bytes = serialize(build_index(random_corpus(20, 32, 7), {0, 32}));
  for (std::size_t n = 0; n < bytes.size(); n += 3) {
    EXPECT_EQ(code_of([&] { deserialize_index(std::span(bytes).first(n)); }), ErrorCode::kCorruptIndex) << n;
  }
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    auto bad = bytes;
    bad[i] ^= 0x04;
    EXPECT_EQ(code_of([&] { deserialize_index(bad); }), ErrorCode::kCorruptIndex) << i;
  }
}

TEST(Serialization, FileRoundTripAndCrossCodebookQuery) {
  const auto path = std::filesystem::temp_directory_path() / "vsearch_index_test.cxix";
  const auto idx = build_index(toy(), {0, 4});
  save_index(idx, path);
  const auto back = load_index(path);
  EXPECT_EQ(back, idx);
  EXPECT_EQ(code_of([&] { query_shard(back, sig({{1, 1}}, 777)); }), ErrorCode::kCodebookMismatch);
  {
    std::ofstream trunc(path, std::ios::binary | std::ios::trunc);
    trunc << "CXIX";
  }
  EXPECT_EQ(code_of([&] { load_index(path); }), ErrorCode::kCorruptIndex);
  std::filesystem::remove(path);
}

TEST(Score, FixedPointDistance) {
  EXPECT_EQ(distance_from_score(to_score(0.5)), 0.0);
  EXPECT_EQ(distance_from_score(0), 2.0);
  EXPECT_NEAR(distance_from_score(to_score(1.0 / 3.0)), 2.0 / 3.0, 1e-12);
}
