#pragma once

// Implementations behind the `vsearch` subcommands. Each returns the process
// exit code: 0 success, 1 operational error, 2 usage error.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <fmt/core.h>
#include <fmt/ostream.h>
#include <json.hpp>

#include "vsearch/vsearch.hpp"

namespace vsearch::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitUsage = 2;

enum class Format { kText, kJson };

struct CorpusEntry {
  ImageId id = 0;
  std::filesystem::path path;
  std::string category;
};

/// `id<TAB>path[<TAB>category]` per line; paths relative to the manifest.
inline std::vector<CorpusEntry> read_corpus_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoError, "cannot open corpus manifest " + path.string());
  std::vector<CorpusEntry> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    for (std::string f; std::getline(ss, f, '\t');) fields.push_back(f);
    if (fields.size() < 2 || fields.size() > 3) {
      throw Error(ErrorCode::kInvalidArgument, path.string() + ":" + std::to_string(line_no) + ": expected id<TAB>path[<TAB>category]");
    }
    CorpusEntry e;
    try {
      std::size_t used = 0;
      e.id = std::stoull(fields[0], &used);
      if (used != fields[0].size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw Error(ErrorCode::kInvalidArgument, path.string() + ":" + std::to_string(line_no) + ": bad image id '" + fields[0] + "'");
    }
    e.path = path.parent_path() / fields[1];
    if (fields.size() == 3) e.category = fields[2];
    out.push_back(std::move(e));
  }
  std::vector<ImageId> ids;
  for (const auto& e : out) ids.push_back(e.id);
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) {
    throw Error(ErrorCode::kDuplicateImageId, path.string() + " lists an image id twice");
  }
  return out;
}

inline RgbImage load_image(const std::filesystem::path& path) { return decode_image(read_file(path)); }

// --- build-codebook ---------------------------------------------------------

struct BuildCodebookOptions {
  std::filesystem::path manifest;
  std::filesystem::path out;
  std::size_t k = kDefaultCodebookSize;
  std::uint64_t seed = 1;
  std::size_t sample_cap = 200000;
  unsigned threads = detail::default_workers();
  Format format = Format::kText;
};

inline int build_codebook(const BuildCodebookOptions& o, std::ostream& out, std::ostream& err) {
  const auto corpus = read_corpus_manifest(o.manifest);
  if (corpus.empty()) {
    fmt::print(err, "error: manifest {} lists no images\n", o.manifest.string());
    return kExitError;
  }
  const FilterBank bank;
  std::vector<std::vector<PatchDescriptor>> per_image(corpus.size());
  std::vector<std::string> failures(corpus.size());
  detail::parallel_for(
      corpus.size(),
      [&](std::size_t i) {
        try {
          per_image[i] = describe_image(load_image(corpus[i].path), bank);
        } catch (const Error& e) {
          failures[i] = e.what();
        }
      },
      o.threads);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (!failures[i].empty()) fmt::print(err, "warning: skipping {}: {}\n", corpus[i].path.string(), failures[i]);
  }

  // Reservoir sample (algorithm R) in manifest order, independent of scheduling.
  std::mt19937_64 rng(o.seed);
  std::vector<PatchDescriptor> samples;
  std::uint64_t seen = 0;
  for (const auto& descs : per_image) {
    for (const auto& d : descs) {
      ++seen;
      if (samples.size() < o.sample_cap) {
        samples.push_back(d);
      } else {
        const auto j = std::uniform_int_distribution<std::uint64_t>(0, seen - 1)(rng);
        if (j < o.sample_cap) samples[j] = d;
      }
    }
  }
  try {
    const auto result = fit_kmeans(samples, o.k, o.seed);
    save_codebook(result.codebook, o.out);
    if (o.format == Format::kJson) {
      out << nlohmann::json{{"k", result.codebook.k()},
                            {"samples", samples.size()},
                            {"inertia", result.inertia},
                            {"iterations", result.iterations},
                            {"codebook_id", format_codebook_id(result.codebook.id())}}
                 .dump()
          << "\n";
    } else {
      fmt::print(out, "k\t{}\nsamples\t{}\ninertia\t{:.6f}\niterations\t{}\ncodebook_id\t{}\n", result.codebook.k(),
                 samples.size(), result.inertia, result.iterations, format_codebook_id(result.codebook.id()));
    }
  } catch (const Error& e) {
    fmt::print(err, "error: {}\n", e.what());
    return kExitError;
  }
  return kExitOk;
}

// --- index ------------------------------------------------------------------

struct IndexOptions {
  std::filesystem::path manifest;
  std::filesystem::path codebook;
  std::filesystem::path out_dir;
  std::uint32_t shards = 1;
  std::string category;  // when set, only manifest rows with this label
  unsigned threads = detail::default_workers();
  Format format = Format::kText;
};

inline int index(const IndexOptions& o, std::ostream& out, std::ostream& err) {
  auto corpus = read_corpus_manifest(o.manifest);
  if (!o.category.empty()) {
    std::erase_if(corpus, [&](const CorpusEntry& e) { return e.category != o.category; });
  }
  const auto cb = load_codebook(o.codebook);
  if (o.shards == 0 || o.shards > cb.k()) {
    fmt::print(err, "error: --shards must be in [1, {}]\n", cb.k());
    return kExitUsage;
  }
  const FilterBank bank;
  std::vector<std::optional<Signature>> sigs(corpus.size());
  std::vector<std::string> failures(corpus.size());
  detail::parallel_for(
      corpus.size(),
      [&](std::size_t i) {
        try {
          sigs[i] = quantize(describe_image(load_image(corpus[i].path), bank), cb);
        } catch (const Error& e) {
          failures[i] = e.what();
        }
      },
      o.threads);
  std::vector<std::pair<ImageId, Signature>> indexed;
  std::size_t skipped = 0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (sigs[i]) {
      indexed.emplace_back(corpus[i].id, std::move(*sigs[i]));
    } else {
      ++skipped;
      fmt::print(err, "warning: skipping {}: {}\n", corpus[i].path.string(), failures[i]);
    }
  }
  if (skipped * 10 > corpus.size()) {
    fmt::print(err, "error: {} of {} images could not be indexed (limit 10%)\n", skipped, corpus.size());
    return kExitError;
  }
  std::filesystem::create_directories(o.out_dir);
  const auto k = static_cast<std::uint32_t>(cb.k());
  ShardManifest manifest{cb.id(), k, {}};
  std::size_t postings = 0;
  const auto ranges = make_shard_ranges(k, o.shards);
  for (std::size_t i = 0; i < ranges.size(); ++i) {
    const auto idx = build_index(indexed, ranges[i]);
    const auto name = fmt::format("shard_{:03}.cxix", i);
    save_index(idx, o.out_dir / name);
    manifest.shards.push_back({ranges[i], name, ""});
    postings += idx.posting_count();
  }
  write_shard_manifest(manifest, o.out_dir / "shards.manifest");
  if (o.format == Format::kJson) {
    out << nlohmann::json{{"images", indexed.size()},
                          {"skipped", skipped},
                          {"shards", ranges.size()},
                          {"postings", postings},
                          {"manifest", (o.out_dir / "shards.manifest").string()}}
               .dump()
        << "\n";
  } else {
    fmt::print(out, "images\t{}\nskipped\t{}\nshards\t{}\npostings\t{}\nmanifest\t{}\n", indexed.size(), skipped,
               ranges.size(), postings, (o.out_dir / "shards.manifest").string());
  }
  return kExitOk;
}

// --- query ------------------------------------------------------------------

struct QueryOptions {
  std::filesystem::path image;
  std::filesystem::path shard_manifest;
  std::filesystem::path codebook;
  std::size_t top_k = 10;
  Format format = Format::kText;
};

inline int query(const QueryOptions& o, std::ostream& out, std::ostream& err) {
  if (o.top_k == 0) {
    fmt::print(err, "error: --top-k must be at least 1\n");
    return kExitUsage;
  }
  try {
    Database db{"query", load_shard_set(o.shard_manifest), std::make_shared<const Codebook>(load_codebook(o.codebook))};
    if (db.shards.codebook_id() != db.codebook->id()) throw Error(ErrorCode::kCodebookMismatch, "index was built with another codebook");
    const FilterBank bank;
    const auto result = retrieve(load_image(o.image), db, bank, o.top_k);
    if (o.format == Format::kJson) {
      nlohmann::json results = nlohmann::json::array();
      for (const auto& r : result.ranked) results.push_back({{"image_id", r.image_id}, {"distance", r.distance}});
      out << nlohmann::json{{"degraded", result.degraded}, {"results", results}}.dump() << "\n";
    } else {
      for (std::size_t i = 0; i < result.ranked.size(); ++i) {
        fmt::print(out, "{}\t{}\t{:.6f}\n", i + 1, result.ranked[i].image_id, result.ranked[i].distance);
      }
      if (result.degraded) fmt::print(err, "warning: some shards were unavailable; results are degraded\n");
    }
  } catch (const Error& e) {
    fmt::print(err, "error: {}\n", e.what());
    return kExitError;
  }
  return kExitOk;
}

// --- evaluate ---------------------------------------------------------------

struct EvaluateOptions {
  std::filesystem::path detections;
  std::filesystem::path ground_truth;
  double iou_threshold = 0.5;
  Format format = Format::kText;
};

inline int evaluate(const EvaluateOptions& o, std::ostream& out, std::ostream& err) {
  try {
    const auto dets = flatten_detections(load_annotations(o.detections));
    const auto gt = load_annotations(o.ground_truth);
    const auto report = vsearch::evaluate(dets, gt, o.iou_threshold);
    if (o.format == Format::kJson) {
      nlohmann::json rows = nlohmann::json::array();
      for (const auto& c : report.per_category) rows.push_back({{"category", c.category}, {"ap", c.ap}});
      out << nlohmann::json{{"categories", rows}, {"map", report.map}}.dump() << "\n";
    } else {
      fmt::print(out, "{:<12}{:>8}\n", "category", "AP");
      for (const auto& c : report.per_category) fmt::print(out, "{:<12}{:>8.4f}\n", c.category, c.ap);
      fmt::print(out, "{:<12}{:>8.4f}\n", "mAP", report.map);
    }
  } catch (const Error& e) {
    fmt::print(err, "error: {}\n", e.what());
    return kExitError;
  }
  return kExitOk;
}

// --- serve ------------------------------------------------------------------

struct ServeOptions {
  std::filesystem::path config;
  std::optional<int> port;  // overrides the config
};

/// Serves until SIGTERM or SIGINT; in-flight requests finish before exit.
inline int serve(const ServeOptions& o, std::ostream& out, std::ostream& err) {
  std::optional<Service> service;
  try {
    auto config = ServiceConfig::load(o.config);
    if (o.port) config.port = *o.port;
    service.emplace(Service::from_config(config));
  } catch (const Error& e) {
    fmt::print(err, "error: {}\n", e.what());
    return kExitError;
  }
  HttpServer server(*service);
  const int port = server.bind(service->config().host, service->config().port);
  if (port < 0) {
    fmt::print(err, "error: cannot bind {}:{}\n", service->config().host, service->config().port);
    return kExitError;
  }
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGTERM);
  sigaddset(&signals, SIGINT);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);
  std::jthread watcher([&] {
    int sig = 0;
    sigwait(&signals, &sig);
    server.stop();
  });
  fmt::print(out, "listening on {}:{}\n", service->config().host, port);
  out.flush();
  const bool ok = server.listen();
  // Wake the watcher if the server stopped for another reason.
  if (!ok) pthread_kill(watcher.native_handle(), SIGTERM);
  return ok ? kExitOk : kExitError;
}

// --- bench ------------------------------------------------------------------

struct BenchOptions {
  std::filesystem::path shard_manifest;
  std::size_t queries = 200;
  std::size_t words = 256;  // distinct words per synthetic query
  std::size_t top_k = 10;
  std::uint64_t seed = 1;
  Format format = Format::kText;
};

/// Latency percentiles of query fan-out over random query signatures.
inline int bench(const BenchOptions& o, std::ostream& out, std::ostream& err) {
  try {
    const auto set = load_shard_set(o.shard_manifest);
    std::mt19937_64 rng(o.seed);
    std::vector<double> ms;
    for (std::size_t n = 0; n < o.queries; ++n) {
      std::vector<std::uint32_t> words(std::min<std::size_t>(o.words, set.k()));
      std::vector<std::uint32_t> all(set.k());
      for (std::uint32_t i = 0; i < set.k(); ++i) all[i] = i;
      std::sample(all.begin(), all.end(), words.begin(), words.size(), rng);
      std::vector<SignatureEntry> entries;
      for (auto w : words) entries.push_back({w, 1 + static_cast<std::uint32_t>(rng() % 4)});
      const Signature q(set.codebook_id(), std::move(entries));
      const auto t0 = std::chrono::steady_clock::now();
      const auto r = vsearch::query(set, q, o.top_k);
      ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
      (void)r;
    }
    std::sort(ms.begin(), ms.end());
    auto pct = [&](double p) { return ms.empty() ? 0.0 : ms[std::min(ms.size() - 1, static_cast<std::size_t>(p * ms.size()))]; };
    if (o.format == Format::kJson) {
      out << nlohmann::json{{"queries", ms.size()}, {"p50_ms", pct(0.5)}, {"p90_ms", pct(0.9)},
                            {"p99_ms", pct(0.99)}, {"max_ms", ms.empty() ? 0.0 : ms.back()}}
                 .dump()
          << "\n";
    } else {
      fmt::print(out, "queries\t{}\np50_ms\t{:.3f}\np90_ms\t{:.3f}\np99_ms\t{:.3f}\nmax_ms\t{:.3f}\n", ms.size(), pct(0.5),
                 pct(0.9), pct(0.99), ms.empty() ? 0.0 : ms.back());
    }
  } catch (const Error& e) {
    fmt::print(err, "error: {}\n", e.what());
    return kExitError;
  }
  return kExitOk;
}

// --- hash -------------------------------------------------------------------

/// Prints the content hash that keys fixture annotations.
inline int hash(const std::filesystem::path& image, std::ostream& out, std::ostream& err) {
  try {
    out << content_hash(load_image(image)) << "\n";
  } catch (const Error& e) {
    fmt::print(err, "error: {}\n", e.what());
    return kExitError;
  }
  return kExitOk;
}

}  // namespace vsearch::cli
