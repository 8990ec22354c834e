#include <gtest/gtest.h>

#include <csignal>
#include <future>
#include <sstream>
#include <thread>

#include <boost/process.hpp>

#include "commands.hpp"
#include "support/synth.hpp"

using namespace vsearch;
namespace fs = std::filesystem;
namespace bp = boost::process;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag)
      : path(fs::temp_directory_path() / ("vsearch_cli_" + tag + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void write_png(const RgbImage& img, const fs::path& path) {
  const auto bytes = encode_png(img);
  std::ofstream(path, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

/// Writes n class images (class i % 10) and a manifest listing them with ids 1..n.
fs::path write_corpus(const fs::path& dir, std::size_t n, const std::string& name, int side = 64) {
  fs::create_directories(dir / "img");
  std::ofstream m(dir / name);
  for (std::size_t i = 0; i < n; ++i) {
    const auto file = fmt::format("img/{:04}.png", i);
    if (!fs::exists(dir / file)) write_png(synth::class_image(i % 10, i / 10 + 1, side, side), dir / file);
    m << (i + 1) << '\t' << file << '\t' << "c" << (i % 10) << '\n';
  }
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

struct Proc {
  int code = -1;
  std::string out, err;
};

Proc run_cli(const std::vector<std::string>& args) {
  bp::ipstream out, err;
  bp::child c(VSEARCH_CLI, bp::args(args), bp::std_out > out, bp::std_err > err);
  Proc p;
  p.out.assign(std::istreambuf_iterator<char>(out), {});
  p.err.assign(std::istreambuf_iterator<char>(err), {});
  c.wait();
  p.code = c.exit_code();
  return p;
}

}  // namespace

TEST(Cli, CodebookIndexQueryWorkflow) {
  TempDir dir("workflow");
  const auto m200 = write_corpus(dir.path, 200, "small.tsv");
  const auto m1000 = write_corpus(dir.path, 1000, "large.tsv");
  std::ostringstream out, err;

  // build-codebook: k echoed, deterministic file.
  cli::BuildCodebookOptions bo{m200, dir.path / "a.cxcb", 64, 3, 200000, 1, cli::Format::kText};
  ASSERT_EQ(cli::build_codebook(bo, out, err), cli::kExitOk) << err.str();
  EXPECT_NE(out.str().find("k\t64\n"), std::string::npos);
  const auto cb = load_codebook(dir.path / "a.cxcb");
  EXPECT_EQ(cb.k(), 64u);
  EXPECT_EQ(cb.dim(), kDescriptorDim);
  bo.out = dir.path / "b.cxcb";
  ASSERT_EQ(cli::build_codebook(bo, out, err), cli::kExitOk);
  EXPECT_EQ(slurp(dir.path / "a.cxcb"), slurp(dir.path / "b.cxcb"));

  // index: 1000 images over 4 shards partition [0, k).
  cli::IndexOptions io{m1000, dir.path / "a.cxcb", dir.path / "large4", 4, "", 1, cli::Format::kText};
  ASSERT_EQ(cli::index(io, out, err), cli::kExitOk) << err.str();
  const auto manifest = read_shard_manifest(dir.path / "large4" / "shards.manifest");
  ASSERT_EQ(manifest.shards.size(), 4u);
  std::uint32_t next = 0;
  std::set<ImageId> seen;
  for (const auto& s : manifest.shards) {
    const auto idx = load_index(dir.path / "large4" / s.path);
    EXPECT_EQ(idx.word_range(), s.range);
    EXPECT_EQ(s.range.lo, next);
    next = s.range.hi;
    for (const auto& [id, _] : idx.image_norms()) seen.insert(id);
  }
  EXPECT_EQ(next, 64u);
  EXPECT_EQ(seen.size(), 1000u);

  // shards=1: one full-range index.
  io = {m200, dir.path / "a.cxcb", dir.path / "small1", 1, "", 1, cli::Format::kText};
  ASSERT_EQ(cli::index(io, out, err), cli::kExitOk);
  const auto single = read_shard_manifest(dir.path / "small1" / "shards.manifest");
  ASSERT_EQ(single.shards.size(), 1u);
  EXPECT_EQ(single.shards[0].range, (WordRange{0, 64}));
  io.out_dir = dir.path / "small4";
  io.shards = 4;
  ASSERT_EQ(cli::index(io, out, err), cli::kExitOk);

  // query: self at rank 1 with distance 0, identical across shard counts, top_k respected.
  for (std::size_t i : {0u, 37u, 155u}) {
    const auto image = dir.path / fmt::format("img/{:04}.png", i);
    std::ostringstream a, b, e;
    ASSERT_EQ(cli::query({image, dir.path / "small1" / "shards.manifest", dir.path / "a.cxcb", 10, cli::Format::kText}, a, e),
              cli::kExitOk)
        << e.str();
    ASSERT_EQ(cli::query({image, dir.path / "small4" / "shards.manifest", dir.path / "a.cxcb", 10, cli::Format::kText}, b, e),
              cli::kExitOk);
    EXPECT_EQ(a.str(), b.str());
    const auto rows = lines(a.str());
    ASSERT_FALSE(rows.empty());
    EXPECT_LE(rows.size(), 10u);
    // Ties at zero are possible only for identical histograms; the image itself must be among them.
    EXPECT_EQ(rows[0].substr(0, 2), "1\t");
    EXPECT_TRUE(rows[0].ends_with("\t0.000000"));
    const bool self = std::any_of(rows.begin(), rows.end(), [&](const std::string& r) {
      return r.find(fmt::format("\t{}\t0.000000", i + 1)) != std::string::npos;
    });
    EXPECT_TRUE(self) << a.str();

    std::ostringstream top5;
    ASSERT_EQ(cli::query({image, dir.path / "large4" / "shards.manifest", dir.path / "a.cxcb", 5, cli::Format::kText}, top5, e),
              cli::kExitOk);
    EXPECT_LE(lines(top5.str()).size(), 5u);
  }

  // JSON output matches the service's retrieve body.
  {
    std::ofstream(dir.path / "db.conf") << "all small4/shards.manifest a.cxcb\n";
    Service service(ServiceConfig{}, load_databases(dir.path / "db.conf"), nullptr);
    const auto image = dir.path / "img/0042.png";
    std::ostringstream js, e;
    ASSERT_EQ(cli::query({image, dir.path / "small4" / "shards.manifest", dir.path / "a.cxcb", 7, cli::Format::kJson}, js, e),
              cli::kExitOk);
    const auto reply = service.retrieve({slurp(image), R"({"database": "all", "top_k": 7})"});
    ASSERT_EQ(reply.status, 200);
    const auto cli_json = nlohmann::json::parse(js.str());
    const auto svc_json = nlohmann::json::parse(reply.body);
    EXPECT_EQ(cli_json.at("results"), svc_json.at("results"));
    EXPECT_EQ(cli_json.at("degraded"), svc_json.at("degraded"));
  }

  // Foreign codebook at query time.
  Codebook other(kDescriptorDim, std::vector<float>(64 * kDescriptorDim, 0.25f));
  save_codebook(other, dir.path / "other.cxcb");
  std::ostringstream e;
  EXPECT_EQ(cli::query({dir.path / "img/0001.png", dir.path / "small4" / "shards.manifest", dir.path / "other.cxcb", 5,
                        cli::Format::kText},
                       out, e),
            cli::kExitError);
  EXPECT_NE(e.str().find("CodebookMismatch"), std::string::npos);
}

TEST(Cli, InsufficientSamples) {
  TempDir dir("insufficient");
  fs::create_directories(dir.path / "img");
  std::ofstream m(dir.path / "m.tsv");
  for (int i = 0; i < 100; ++i) {
    auto img = synth::solid(64, 64, {20, 20, 20});
    synth::fill_rect(img, 30, 30, 4, 4, {240, 240, 240});  // a handful of keypoints
    write_png(img, dir.path / fmt::format("img/{}.png", i));
    m << i << "\timg/" << i << ".png\n";
  }
  m.close();
  std::ostringstream out, err;
  EXPECT_EQ(cli::build_codebook({dir.path / "m.tsv", dir.path / "cb.cxcb", 5000, 1, 200000, 1, cli::Format::kText}, out, err),
            cli::kExitError);
  EXPECT_NE(err.str().find("InsufficientSamples"), std::string::npos) << err.str();
  EXPECT_FALSE(fs::exists(dir.path / "cb.cxcb"));
}

TEST(Cli, IndexSkipsFailuresUpToTenPercent) {
  TempDir dir("skips");
  const auto m = write_corpus(dir.path, 20, "m.tsv");
  std::ostringstream out, err;
  ASSERT_EQ(cli::build_codebook({m, dir.path / "cb.cxcb", 8, 1, 200000, 1, cli::Format::kText}, out, err), cli::kExitOk);
  std::ofstream(dir.path / "img/0003.png") << "not an image";
  ASSERT_EQ(cli::index({m, dir.path / "cb.cxcb", dir.path / "ok", 2, "", 1, cli::Format::kJson}, out, err), cli::kExitOk);
  EXPECT_NE(err.str().find("warning: skipping"), std::string::npos);
  EXPECT_EQ(nlohmann::json::parse(lines(out.str()).back()).at("skipped"), 1);

  std::ofstream(dir.path / "img/0004.png") << "";
  std::ofstream(dir.path / "img/0005.png") << "";
  std::ostringstream out2, err2;
  EXPECT_EQ(cli::index({m, dir.path / "cb.cxcb", dir.path / "bad", 2, "", 1, cli::Format::kText}, out2, err2), cli::kExitError);
  EXPECT_FALSE(fs::exists(dir.path / "bad"));

  // Category filter keeps only the labelled rows.
  std::ostringstream out3;
  ASSERT_EQ(cli::index({m, dir.path / "cb.cxcb", dir.path / "c1", 1, "c1", 1, cli::Format::kJson}, out3, err), cli::kExitOk);
  EXPECT_EQ(nlohmann::json::parse(out3.str()).at("images"), 2);
}

TEST(Cli, CorpusManifestErrors) {
  TempDir dir("manifest");
  std::ofstream(dir.path / "dup.tsv") << "1\ta.png\n1\tb.png\n";
  EXPECT_THROW(cli::read_corpus_manifest(dir.path / "dup.tsv"), Error);
  std::ofstream(dir.path / "bad.tsv") << "x1\ta.png\n";
  EXPECT_THROW(cli::read_corpus_manifest(dir.path / "bad.tsv"), Error);
  std::ofstream(dir.path / "ok.tsv") << "# comment\n7\tsub/a.png\tshoe\n";
  const auto e = cli::read_corpus_manifest(dir.path / "ok.tsv");
  ASSERT_EQ(e.size(), 1u);
  EXPECT_EQ(e[0].id, 7u);
  EXPECT_EQ(e[0].path, dir.path / "sub/a.png");
  EXPECT_EQ(e[0].category, "shoe");
}

TEST(Cli, Evaluate) {
  TempDir dir("evaluate");
  std::ofstream(dir.path / "gt.json") << R"({"img": [{"category": "top", "box": {"x": 0, "y": 0, "w": 10, "h": 10}}],
                                            "img2": [{"category": "dress", "box": {"x": 0, "y": 0, "w": 10, "h": 10}}]})";
  std::ofstream(dir.path / "det.json")
      << R"({"img": [{"category": "top", "confidence": 0.9, "box": {"x": 50, "y": 50, "w": 10, "h": 10}},
                     {"category": "top", "confidence": 0.8, "box": {"x": 2.5, "y": 0, "w": 10, "h": 10}}]})";
  std::ofstream(dir.path / "none.json") << "{}";
  std::ostringstream out, err;
  ASSERT_EQ(cli::evaluate({dir.path / "det.json", dir.path / "gt.json", 0.5, cli::Format::kText}, out, err), cli::kExitOk);
  EXPECT_EQ(out.str(),
            "category          AP\n"
            "dress         0.0000\n"
            "top           0.5000\n"
            "mAP           0.2500\n");
  std::ostringstream js;
  ASSERT_EQ(cli::evaluate({dir.path / "none.json", dir.path / "gt.json", 0.5, cli::Format::kJson}, js, err), cli::kExitOk);
  const auto j = nlohmann::json::parse(js.str());
  for (const auto& row : j.at("categories")) EXPECT_EQ(row.at("ap"), 0.0);
  EXPECT_EQ(j.at("map"), 0.0);
  EXPECT_EQ(cli::evaluate({dir.path / "missing.json", dir.path / "gt.json", 0.5, cli::Format::kText}, out, err),
            cli::kExitError);
}

TEST(Cli, Bench) {
  TempDir dir("bench");
  std::vector<std::pair<ImageId, Signature>> sigs;
  std::mt19937_64 rng(1);
  for (ImageId i = 0; i < 300; ++i) sigs.emplace_back(i, synth::random_signature(rng, 77, 128, 40));
  ShardManifest m{77, 128, {}};
  for (auto r : make_shard_ranges(128, 2)) {
    const auto name = fmt::format("s{}.cxix", r.lo);
    save_index(build_index(sigs, r), dir.path / name);
    m.shards.push_back({r, name, ""});
  }
  write_shard_manifest(m, dir.path / "m");
  std::ostringstream out, err;
  ASSERT_EQ(cli::bench({dir.path / "m", 20, 64, 10, 1, cli::Format::kJson}, out, err), cli::kExitOk) << err.str();
  const auto j = nlohmann::json::parse(out.str());
  EXPECT_EQ(j.at("queries"), 20);
  EXPECT_LE(j.at("p50_ms").get<double>(), j.at("max_ms").get<double>());
}

TEST(CliBinary, UsageErrors) {
  EXPECT_EQ(run_cli({}).code, cli::kExitUsage);
  EXPECT_EQ(run_cli({"frobnicate"}).code, cli::kExitUsage);
  EXPECT_EQ(run_cli({"query"}).code, cli::kExitUsage);
  EXPECT_EQ(run_cli({"build-codebook", "--manifest", "m", "--out", "o", "-k", "abc"}).code, cli::kExitUsage);
  const auto help = run_cli({"--help"});
  EXPECT_EQ(help.code, cli::kExitOk);
  EXPECT_NE(help.out.find("build-codebook"), std::string::npos);
}

TEST(CliBinary, HashAndMissingFiles) {
  TempDir dir("hash");
  const auto img = synth::class_image(2, 1);
  write_png(img, dir.path / "a.png");
  const auto h = run_cli({"hash", (dir.path / "a.png").string()});
  EXPECT_EQ(h.code, cli::kExitOk);
  EXPECT_EQ(h.out, content_hash(img) + "\n");
  const auto missing = run_cli({"query", (dir.path / "nope.png").string(), "--index", "x", "--codebook", "y"});
  EXPECT_EQ(missing.code, cli::kExitError);
  EXPECT_FALSE(missing.err.empty());
}

TEST(CliBinary, ServeRejectsBadConfig) {
  const auto r = run_cli({"serve", "--config", "/nonexistent/service.json"});
  EXPECT_EQ(r.code, cli::kExitError);
  EXPECT_NE(r.err.find("cannot open"), std::string::npos);
}

TEST(CliBinary, ServeHealthAndGracefulShutdown) {
  TempDir dir("serve");
  // A slow remote detector keeps one request in flight across the shutdown signal.
  httplib::Server slow;
  slow.Post("/v1/localise", [](const httplib::Request&, httplib::Response& res) {
    std::this_thread::sleep_for(std::chrono::milliseconds(800));
    res.set_content(R"({"detections": [{"category": "top", "confidence": 0.9, "box": {"x": 0, "y": 0, "w": 8, "h": 8}}]})",
                    "application/json");
  });
  const int slow_port = slow.bind_to_any_port("127.0.0.1");
  std::thread slow_thread([&] { slow.listen_after_bind(); });
  slow.wait_until_ready();

  std::ofstream(dir.path / "detectors.json")
      << fmt::format(R"({{"detectors": [{{"name": "slow", "type": "remote", "url": "http://127.0.0.1:{}"}}]}})", slow_port);
  std::ofstream(dir.path / "service.json") << R"({"host": "127.0.0.1", "port": 0, "detectors": "detectors.json"})";

  bp::ipstream out;
  bp::child child(VSEARCH_CLI, "serve", "--config", (dir.path / "service.json").string(), bp::std_out > out,
                  bp::std_err > bp::null);
  std::string line;
  ASSERT_TRUE(std::getline(out, line));
  ASSERT_TRUE(line.starts_with("listening on 127.0.0.1:")) << line;
  const int port = std::stoi(line.substr(line.rfind(':') + 1));

  httplib::Client cli("127.0.0.1", port);
  cli.set_read_timeout(10, 0);
  const auto health = cli.Get("/v1/health");
  ASSERT_TRUE(health);
  EXPECT_EQ(health->status, 503);  // detectors but no databases configured
  EXPECT_EQ(nlohmann::json::parse(health->body).at("detectors"), nlohmann::json::array({"slow"}));

  const auto png = encode_png(synth::class_image(1, 1));
  auto in_flight = std::async(std::launch::async, [&] {
    httplib::Client c("127.0.0.1", port);
    c.set_read_timeout(10, 0);
    return c.Post("/v1/localise", httplib::MultipartFormDataItems{{"image", std::string(png.begin(), png.end()), "a.png", "image/png"}});
  });
  std::this_thread::sleep_for(std::chrono::milliseconds(300));
  ::kill(child.id(), SIGTERM);
  const auto res = in_flight.get();
  ASSERT_TRUE(res) << httplib::to_string(res.error());
  EXPECT_EQ(res->status, 200);
  EXPECT_EQ(nlohmann::json::parse(res->body).at("detections").size(), 1u);
  child.wait();
  EXPECT_EQ(child.exit_code(), 0);
  EXPECT_FALSE(cli.Get("/v1/health"));

  slow.stop();
  slow_thread.join();
}
