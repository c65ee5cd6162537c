// SPDX-License-Identifier: Apache-2.0
//
// rsparse: synth | train | detect | eval | oracle | bench
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "rsparse/rsparse.hpp"

namespace fs = std::filesystem;
using namespace rsparse;
using json = nlohmann::json;

namespace {

using Real = float;
constexpr const char* kAnnotationFile = "annotations.txt";

void print_config(const std::string& command, const json& cfg) {
  std::cout << "config " << json{{"command", command}, {"config", cfg}}.dump() << '\n';
}

std::pair<int, int> parse_range(const std::string& s) {
  const auto dots = s.find("..");
  if (dots == std::string::npos) throw Error("expected MIN..MAX, got '" + s + "'");
  return {detail::parse_number<int>(std::string_view(s).substr(0, dots), "range", 1),
          detail::parse_number<int>(std::string_view(s).substr(dots + 2), "range", 1)};
}

// `path` is a dataset directory or the annotation file itself.
std::vector<GroundTruthScene> load_annotations(const fs::path& path) {
  const auto file = fs::is_directory(path) ? path / kAnnotationFile : path;
  return group_annotations(parse_annotations(read_file(file.string())));
}

fs::path pyramid_path(const fs::path& dir, const std::string& scene_id) { return dir / (scene_id + ".rsrc"); }

std::vector<LabeledScene<Real>> load_dataset(const fs::path& dir) {
  std::vector<LabeledScene<Real>> out;
  for (auto& truth : load_annotations(dir)) {
    auto pyr = load_pyramid<Real>(pyramid_path(dir, truth.scene_id).string());
    out.push_back({std::move(pyr), std::move(truth)});
  }
  return out;
}

// Scenes with no ships never appear in the annotation file; pick up every
// pyramid archive in the directory instead.
std::vector<std::string> scene_ids(const fs::path& dir) {
  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".rsrc") ids.push_back(e.path().stem().string());
  std::sort(ids.begin(), ids.end());
  return ids;
}

// ----------------------------------------------------------------------- synth

struct SynthArgs {
  std::string out;
  std::size_t scenes = 8;
  std::uint64_t seed = 0;
  double clutter = 0.1;
  std::string ships = "1..4";
  std::vector<int> size{256, 256};
  std::size_t channels = 256;
};

int run_synth(const SynthArgs& a) {
  SyntheticSceneConfig cfg;
  cfg.seed = a.seed;
  cfg.clutter = a.clutter;
  std::tie(cfg.min_ships, cfg.max_ships) = parse_range(a.ships);
  cfg.image_width = a.size.at(0);
  cfg.image_height = a.size.at(1);
  cfg.channels = a.channels;
  cfg.validate();
  print_config("synth", {{"out", a.out},
                         {"scenes", a.scenes},
                         {"seed", a.seed},
                         {"clutter", cfg.clutter},
                         {"ships", {cfg.min_ships, cfg.max_ships}},
                         {"size", {cfg.image_width, cfg.image_height}},
                         {"channels", cfg.channels}});
  fs::create_directories(a.out);
  std::vector<AnnotationRecord> records;
  for (std::size_t i = 0; i < a.scenes; ++i) {
    auto c = cfg;
    c.seed = mix_seed(cfg.seed, i);
    auto s = generate_synthetic_scene<Real>(c);
    char id[32];
    std::snprintf(id, sizeof id, "scene%04zu", i);
    s.truth.scene_id = id;
    save_pyramid(s.pyramid, pyramid_path(a.out, id).string());
    for (auto& r : scene_annotations(s.truth)) records.push_back(std::move(r));
  }
  write_file((fs::path(a.out) / kAnnotationFile).string(), write_annotations(records));
  std::cout << "wrote " << a.scenes << " scenes, " << records.size() << " ships to " << a.out << '\n';
  return 0;
}

// ----------------------------------------------------------------------- train

struct TrainArgs {
  std::string data, out, log;
  std::size_t proposals = 100, stages = 6, iters = 2000, hidden = 64, heads = 8, batch = 1, eval_every = 0;
  std::string alpha = "13/7", init = "center", fusion = "xattn", pooling = "dcp";
  double lr = 7.5e-5, dropout = kDefaultDropout;
  std::uint64_t seed = 0;
};

int run_train(const TrainArgs& a) {
  const auto data = load_dataset(a.data);
  if (data.empty()) throw Error("train: no annotated scenes in " + a.data);
  TrainConfig tc;
  auto& m = tc.model;
  m.num_proposals = a.proposals;
  m.stages = a.stages;
  m.alpha = parse_ratio(a.alpha);
  m.init = parse_init(a.init);
  m.fusion = parse_fusion(a.fusion);
  m.pooling = parse_pooling(a.pooling);
  m.hidden = a.hidden;
  m.heads = a.heads;
  m.dropout = a.dropout;
  m.seed = a.seed;
  m.channels = data[0].pyramid.levels.at(0).values.last_dim();
  m.image_width = data[0].truth.image_width;
  m.image_height = data[0].truth.image_height;
  tc.optim.lr = a.lr;
  tc.iterations = a.iters;
  tc.batch_size = a.batch;
  tc.eval_every = a.eval_every;
  tc.seed = a.seed;
  json cfg{{"data", a.data}, {"out", a.out}, {"scenes", data.size()}, {"model", config_to_json(m)},
           {"iters", tc.iterations}, {"lr", tc.optim.lr}, {"batch", tc.batch_size}, {"seed", a.seed}};
  print_config("train", cfg);
  std::ofstream log_file;
  if (!a.log.empty()) log_file.open(a.log);
  std::ostream* log = a.log.empty() ? &std::cout : static_cast<std::ostream*>(&log_file);
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = train_toy<Real>(tc, data, log);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  save_weights(r.model, a.out);
  std::cout << "train " << json{{"seconds", secs}, {"ap", r.final_eval.ap}, {"ap50", r.final_eval.ap50},
                                {"ap75", r.final_eval.ap75}, {"config_hash", config_hash(m)}}
                               .dump()
            << '\n';
  return 0;
}

// ---------------------------------------------------------------------- detect

struct DetectArgs {
  std::string model, data, out;
  std::optional<double> threshold;
};

int run_detect(const DetectArgs& a) {
  const auto model = load_weights<Real>(a.model);
  json cfg{{"model", a.model}, {"data", a.data}, {"out", a.out}, {"config", config_to_json(model.config)}};
  cfg["threshold"] = a.threshold ? json(*a.threshold) : json(nullptr);
  print_config("detect", cfg);
  const std::string hash = config_hash(model.config);
  std::vector<SceneDetections> all;
  for (const auto& id : scene_ids(a.data)) {
    const auto pyr = load_pyramid<Real>(pyramid_path(a.data, id).string());
    all.push_back({id, hash, infer(pyr, model, a.threshold)});
  }
  write_file(a.out, write_detections(all));
  std::cout << "wrote detections for " << all.size() << " scenes to " << a.out << '\n';
  return 0;
}

// ------------------------------------------------------------------------ eval

struct EvalArgs {
  std::string dets, ann, split = "all";
};

int run_eval(const EvalArgs& a) {
  print_config("eval", {{"dets", a.dets}, {"ann", a.ann}, {"split", a.split}});
  auto truths = load_annotations(a.ann);
  const auto dets = parse_detections(read_file(a.dets));
  std::vector<EvalScene> scenes;
  for (const auto& sd : dets) {
    EvalScene e{sd.detections, {sd.scene_id, 0, 0, {}, ""}};
    for (const auto& t : truths)
      if (t.scene_id == sd.scene_id) e.truth = t;
    scenes.push_back(std::move(e));
  }
  for (const auto& t : truths) {
    const bool seen = std::any_of(dets.begin(), dets.end(), [&](const auto& d) { return d.scene_id == t.scene_id; });
    if (!seen) scenes.push_back({{}, t});
  }
  const auto sel = select_split(scenes, a.split);
  const auto s = coco_summary(sel);
  std::cout << "eval " << json{{"split", a.split}, {"scenes", sel.size()}, {"ap", s.ap}, {"ap50", s.ap50},
                               {"ap75", s.ap75}, {"per_threshold", s.per_threshold}}
                              .dump()
            << '\n';
  return 0;
}

// ---------------------------------------------------------------------- oracle

struct OracleArgs {
  std::string suite = "all";
  std::size_t trials = 0;  // 0: suite default
  std::uint64_t seed = 0;
};

int run_oracle(const OracleArgs& a) {
  print_config("oracle", {{"suite", a.suite}, {"trials", a.trials}, {"seed", a.seed}});
  auto pick = [&](std::size_t d) { return a.trials ? a.trials : d; };
  std::vector<OracleReport> reports;
  const bool all = a.suite == "all";
  if (all || a.suite == "iou") reports.push_back(iou_oracle(pick(200), a.seed));
  if (all || a.suite == "match") reports.push_back(match_oracle(pick(500), a.seed));
  if (all || a.suite == "grad") reports.push_back(grad_oracle(a.seed));
  if (all || a.suite == "pool") reports.push_back(pool_oracle(pick(10000), a.seed));
  if (reports.empty()) throw Error("oracle: unknown suite '" + a.suite + "'");
  bool ok = true;
  for (const auto& r : reports) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << " trials=" << r.trials << " max_error=" << r.max_error
              << " tolerance=" << r.tolerance << '\n';
    ok = ok && r.passed;
  }
  return ok ? 0 : 1;
}

// ----------------------------------------------------------------------- bench

int run_bench(const std::string& suite) {
  print_config("bench", {{"suite", suite}});
  using clock = std::chrono::steady_clock;
  auto report = [](const std::string& what, std::size_t n, clock::time_point t0) {
    const double s = std::chrono::duration<double>(clock::now() - t0).count();
    std::cout << "bench " << json{{"suite", what}, {"ops", n}, {"seconds", s}, {"ops_per_second", n / s}}.dump()
              << '\n';
  };
  std::mt19937_64 rng(0);
  if (suite == "iou") {
    std::vector<std::pair<OrientedBox, OrientedBox>> pairs;
    for (int i = 0; i < 100000; ++i) pairs.emplace_back(random_box(rng), random_box(rng));
    double sink = 0;
    const auto t0 = clock::now();
    for (const auto& [a, b] : pairs) sink += rotated_iou(a, b);
    report("iou", pairs.size(), t0);
    return sink < 0;
  }
  SyntheticSceneConfig sc;
  sc.seed = 1;
  const auto scene = generate_synthetic_scene<Real>(sc);
  if (suite == "pool") {
    const std::size_t n = 2000;
    const auto t0 = clock::now();
    for (std::size_t i = 0; i < n; ++i) (void)dual_context_pool(scene.pyramid, random_box(rng, 256.0));
    report("pool", n, t0);
    return 0;
  }
  if (suite == "pipeline") {
    const auto model = make_model<Real>(ModelConfig{});
    const std::size_t n = 3;
    const auto t0 = clock::now();
    for (std::size_t i = 0; i < n; ++i) (void)infer(scene.pyramid, model);
    report("pipeline", n, t0);
    return 0;
  }
  throw Error("bench: unknown suite '" + suite + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse oriented-box detection head: synthetic data, training, inference and evaluation"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate synthetic scenes (annotations + pyramid archives)");
  synth->add_option("--out", sa.out, "Output directory")->required();
  synth->add_option("--scenes", sa.scenes, "Number of scenes")->required();
  synth->add_option("--seed", sa.seed, "RNG seed")->required();
  synth->add_option("--clutter", sa.clutter, "Clutter noise level")->capture_default_str();
  synth->add_option("--ships", sa.ships, "Ship count range MIN..MAX")->capture_default_str();
  synth->add_option("--size", sa.size, "Image width and height")->expected(2)->capture_default_str();
  synth->add_option("--channels", sa.channels, "Pyramid channels")->capture_default_str();

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train on a synthetic directory");
  train->add_option("--data", ta.data, "Scene directory")->required();
  train->add_option("--out", ta.out, "Weights archive to write")->required();
  train->add_option("--proposals", ta.proposals)->capture_default_str();
  train->add_option("--stages", ta.stages)->capture_default_str();
  train->add_option("--alpha", ta.alpha, "Context ratio, decimal or a/b")->capture_default_str();
  train->add_option("--init", ta.init)->check(CLI::IsMember({"center", "random", "grid"}))->capture_default_str();
  train->add_option("--fusion", ta.fusion)->check(CLI::IsMember({"xattn", "add", "mul"}))->capture_default_str();
  train->add_option("--pooling", ta.pooling)->check(CLI::IsMember({"dcp", "separate"}))->capture_default_str();
  train->add_option("--iters", ta.iters)->capture_default_str();
  train->add_option("--lr", ta.lr)->capture_default_str();
  train->add_option("--seed", ta.seed)->capture_default_str();
  train->add_option("--hidden", ta.hidden, "Dynamic kernel width")->capture_default_str();
  train->add_option("--heads", ta.heads, "Attention heads")->capture_default_str();
  train->add_option("--batch", ta.batch, "Scenes per iteration")->capture_default_str();
  train->add_option("--dropout", ta.dropout)->capture_default_str();
  train->add_option("--eval-every", ta.eval_every, "Evaluate every K iterations (0: end only)")->capture_default_str();
  train->add_option("--log", ta.log, "Metrics log file (default stdout)");

  DetectArgs da;
  double threshold = 0;
  auto* detect = app.add_subcommand("detect", "Run inference on every pyramid in a directory");
  detect->add_option("--model", da.model)->required();
  detect->add_option("--data", da.data)->required();
  detect->add_option("--out", da.out)->required();
  auto* thr = detect->add_option("--threshold", threshold, "Score threshold for the keep flag");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "COCO-style AP of a detection file");
  eval->add_option("--dets", ea.dets)->required();
  eval->add_option("--ann", ea.ann, "Annotation file, or a directory holding annotations.txt")->required();
  eval->add_option("--split", ea.split)->check(CLI::IsMember({"inshore", "offshore", "all"}))->capture_default_str();

  OracleArgs oa;
  auto* oracle = app.add_subcommand("oracle", "Self-checks against independent references");
  oracle->add_option("--suite", oa.suite)->check(CLI::IsMember({"iou", "match", "grad", "pool", "all"}))
      ->capture_default_str();
  oracle->add_option("--trials", oa.trials, "Trials per suite (0: default)")->capture_default_str();
  oracle->add_option("--seed", oa.seed)->capture_default_str();

  std::string bench_suite = "pipeline";
  auto* bench = app.add_subcommand("bench", "Throughput");
  bench->add_option("--suite", bench_suite)->check(CLI::IsMember({"iou", "pool", "pipeline"}))->capture_default_str();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*synth) return run_synth(sa);
    if (*train) return run_train(ta);
    if (*detect) {
      if (*thr) da.threshold = threshold;
      return run_detect(da);
    }
    if (*eval) return run_eval(ea);
    if (*oracle) return run_oracle(oa);
    if (*bench) return run_bench(bench_suite);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
