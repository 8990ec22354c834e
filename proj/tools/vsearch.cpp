#include <iostream>

#include <CLI11.hpp>

#include "commands.hpp"

namespace cli = vsearch::cli;

int main(int argc, char** argv) {
  CLI::App app{"vsearch: content-based visual search"};
  app.require_subcommand(1);

  const std::map<std::string, cli::Format> formats{{"text", cli::Format::kText}, {"json", cli::Format::kJson}};
  auto add_format = [&](CLI::App* sub, cli::Format& f) {
    sub->add_option("--format", f, "Output format")->transform(CLI::CheckedTransformer(formats, CLI::ignore_case));
  };

  cli::BuildCodebookOptions cb;
  auto* build = app.add_subcommand("build-codebook", "Train a visual-word codebook from a corpus");
  build->add_option("--manifest", cb.manifest, "Corpus manifest (id<TAB>path[<TAB>category])")->required();
  build->add_option("--out", cb.out, "Output codebook file")->required();
  build->add_option("-k,--words", cb.k, "Number of visual words")->check(CLI::Range(2, 1 << 20));
  build->add_option("--seed", cb.seed, "Sampling and seeding RNG seed");
  build->add_option("--samples", cb.sample_cap, "Maximum descriptors sampled for training")->check(CLI::PositiveNumber);
  build->add_option("--threads", cb.threads, "Worker threads")->check(CLI::PositiveNumber);
  add_format(build, cb.format);

  cli::IndexOptions ix;
  auto* index = app.add_subcommand("index", "Build sharded inverted-index files for a corpus");
  index->add_option("--manifest", ix.manifest, "Corpus manifest")->required();
  index->add_option("--codebook", ix.codebook, "Codebook file")->required();
  index->add_option("--out", ix.out_dir, "Output directory")->required();
  index->add_option("--shards", ix.shards, "Number of word-range shards");
  index->add_option("--category", ix.category, "Only index manifest rows with this category");
  index->add_option("--threads", ix.threads, "Worker threads")->check(CLI::PositiveNumber);
  add_format(index, ix.format);

  cli::QueryOptions q;
  auto* query = app.add_subcommand("query", "Rank indexed images against a query image");
  query->add_option("image", q.image, "Query image (PNG or JPEG)")->required();
  query->add_option("--index", q.shard_manifest, "Shard manifest")->required();
  query->add_option("--codebook", q.codebook, "Codebook file")->required();
  query->add_option("--top-k", q.top_k, "Number of results");
  add_format(query, q.format);

  cli::EvaluateOptions ev;
  auto* evaluate = app.add_subcommand("evaluate", "Per-category AP and mAP of localiser output");
  evaluate->add_option("--detections", ev.detections, "Detections JSON")->required();
  evaluate->add_option("--ground-truth", ev.ground_truth, "Ground-truth JSON")->required();
  evaluate->add_option("--iou", ev.iou_threshold, "IoU threshold")->check(CLI::Range(0.0, 1.0));
  add_format(evaluate, ev.format);

  cli::ServeOptions sv;
  auto* serve = app.add_subcommand("serve", "Run the REST service");
  serve->add_option("--config", sv.config, "Service config JSON")->required();
  serve->add_option("--port", sv.port, "Override the configured port");

  cli::BenchOptions bn;
  auto* bench = app.add_subcommand("bench", "Query latency over random signatures");
  bench->add_option("--index", bn.shard_manifest, "Shard manifest")->required();
  bench->add_option("--queries", bn.queries, "Number of queries")->check(CLI::PositiveNumber);
  bench->add_option("--words", bn.words, "Distinct words per query")->check(CLI::PositiveNumber);
  bench->add_option("--top-k", bn.top_k, "Number of results")->check(CLI::PositiveNumber);
  bench->add_option("--seed", bn.seed, "RNG seed");
  add_format(bench, bn.format);

  std::filesystem::path hash_image;
  auto* hash = app.add_subcommand("hash", "Print an image's content hash");
  hash->add_option("image", hash_image, "Image file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? cli::kExitOk : cli::kExitUsage;
  }

  try {
    if (*build) return cli::build_codebook(cb, std::cout, std::cerr);
    if (*index) return cli::index(ix, std::cout, std::cerr);
    if (*query) return cli::query(q, std::cout, std::cerr);
    if (*evaluate) return cli::evaluate(ev, std::cout, std::cerr);
    if (*serve) return cli::serve(sv, std::cout, std::cerr);
    if (*bench) return cli::bench(bn, std::cout, std::cerr);
    if (*hash) return cli::hash(hash_image, std::cout, std::cerr);
  } catch (const vsearch::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code() == vsearch::ErrorCode::kInvalidArgument ? cli::kExitUsage : cli::kExitError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return cli::kExitError;
  }
  return cli::kExitUsage;
}
