// Command-line front end: gen-data, train, eval, propose, bench.
// Exit codes: 0 ok, 2 input error, 3 state error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <selattn/selattn.hpp>

namespace fs = std::filesystem;
using namespace selattn;

namespace {

RunConfig config_or_default(const std::string& path) {
  return path.empty() ? preset("paper") : load_run_config(path);
}

void require_file(const std::string& path, const char* what) {
  if (!fs::exists(path)) throw InputError(std::string(what) + " not found: " + path);
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot write " + path.string());
  return os;
}

int cmd_gen_data(const std::string& config, const std::string& out, std::size_t count,
                 std::optional<std::uint64_t> seed) {
  const RunConfig cfg = config_or_default(config);
  const std::uint64_t s = resolve_seed(seed, cfg.seed);
  write_dataset(generate_dataset(cfg.scene, count, s), out);
  std::cout << nlohmann::json{{"out", out}, {"count", count}, {"seed", s}}.dump() << "\n";
  return 0;
}

int cmd_train(const std::string& config, const std::string& data, const std::string& out,
              std::optional<std::size_t> steps, std::optional<std::uint64_t> seed) {
  RunConfig cfg = config_or_default(config);
  if (steps) {
    if (*steps == 0) throw InputError("--steps: must be a positive integer");
    cfg.steps = *steps;
  }
  cfg.seed = resolve_seed(seed, cfg.seed);
  require_file(data, "data directory");
  const std::vector<Sample> samples = read_dataset(data);
  if (samples.empty()) throw InputError(data + ": no training samples");

  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw InputError("cannot create " + out + ": " + ec.message());
  std::ofstream log = open_out(fs::path(out) / "loss_log.jsonl");
  TrainHooks hooks;
  hooks.log = &log;
  hooks.checkpoint_dir = fs::path(out) / "checkpoints";
  Model<PatchBackbone> model = train_run(cfg, samples, hooks);
  save_checkpoint(make_checkpoint(model.params, to_json(cfg)),
                  fs::path(out) / "final");
  std::cout << nlohmann::json{{"out", out}, {"steps", cfg.steps}, {"seed", cfg.seed}}.dump() << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data) {
  require_file(data, "data directory");
  const LoadedModel m = load_model(checkpoint);
  const std::vector<Sample> samples = read_dataset(data);
  if (samples.empty()) throw InputError(data + ": no samples to evaluate");
  std::cout << to_json(evaluate(m, samples)).dump(2) << "\n";
  return 0;
}

int cmd_propose(const std::string& checkpoint, const std::string& image, const std::string& out) {
  require_file(image, "image");
  const LoadedModel m = load_model(checkpoint);
  if (std::holds_alternative<OracleModel>(m)) throw StateError("the oracle checkpoint has no proposal network");
  const auto& model = std::get<Model<PatchBackbone>>(m);
  const auto [img, factor] = rescale_image(read_pgm(image), model.config.short_side);
  const ProposalSet ps = propose(img, model);
  nlohmann::json list = nlohmann::json::array();
  for (const Proposal& p : ps.proposals) {
    // Report boxes in the coordinates of the input file.
    const Box b = scale_box(p.box, 1.0 / factor);
    list.push_back({{"x", b.x()}, {"y", b.y()}, {"w", b.w()}, {"h", b.h()}, {"score", p.score}});
  }
  if (out.empty()) {
    std::cout << list.dump(2) << "\n";
  } else {
    open_out(out) << list.dump(2) << "\n";
  }
  return 0;
}

Model<PatchBackbone> bench_model(const RunConfig& cfg, const std::string& checkpoint) {
  if (checkpoint.empty()) {
    Model<PatchBackbone> m = build_model(cfg);
    Rng rng(cfg.seed);
    init_params(m.params, rng, cfg.train.optimizer);
    return m;
  }
  LoadedModel loaded = load_model(checkpoint);
  if (std::holds_alternative<OracleModel>(loaded)) throw StateError("cannot benchmark the oracle checkpoint");
  return std::get<Model<PatchBackbone>>(std::move(loaded));
}

int cmd_bench(const std::string& config, const std::string& baseline_config, const std::string& checkpoint,
              const std::string& baseline_checkpoint, const std::string& data, std::size_t count,
              std::size_t reps, const std::string& out, std::optional<std::uint64_t> seed) {
  if (reps < 1) throw InputError("--reps: must be at least 1");
  RunConfig restricted = config_or_default(config);
  RunConfig baseline = baseline_config.empty() ? preset("baseline") : load_run_config(baseline_config);
  restricted.seed = baseline.seed = resolve_seed(seed, restricted.seed);

  std::vector<Sample> samples;
  if (!data.empty()) {
    require_file(data, "data directory");
    samples = read_dataset(data);
  } else {
    samples = generate_dataset(restricted.scene, count, restricted.seed);
  }
  if (samples.empty()) throw InputError("bench: no images");

  const Model<PatchBackbone> a = bench_model(restricted, checkpoint);
  const Model<PatchBackbone> b = bench_model(baseline, baseline_checkpoint);
  const auto data_a = prepare(samples, a.config.short_side);
  const auto data_b = prepare(samples, b.config.short_side);
  std::vector<Image> images_a, images_b;
  for (const Sample& s : data_a) images_a.push_back(s.image);
  for (const Sample& s : data_b) images_b.push_back(s.image);

  std::vector<BenchReport> reports = bench_configs<PatchBackbone>({{"restricted", &a}}, images_a, reps);
  reports.push_back(bench_configs<PatchBackbone>({{"baseline", &b}}, images_b, reps).front());
  const EvalReport ea = evaluate(a, data_a);
  const EvalReport eb = evaluate(b, data_b);
  reports[0].dice_mean = ea.overall.mean;
  reports[0].dice_std = ea.overall.std;
  reports[1].dice_mean = eb.overall.mean;
  reports[1].dice_std = eb.overall.std;
  const WilcoxonResult w = wilcoxon_rank_sum(ea.overall.values, eb.overall.values);

  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw InputError("cannot create " + out + ": " + ec.message());
  {
    std::ofstream csv = open_out(fs::path(out) / "bench.csv");
    write_bench_csv(csv, reports);
  }
  nlohmann::json j;
  j["configs"] = nlohmann::json::array();
  for (const BenchReport& r : reports) j["configs"].push_back(to_json(r));
  const double pa = static_cast<double>(reports[0].positions), pb = static_cast<double>(reports[1].positions);
  const double na = static_cast<double>(reports[0].anchors), nb = static_cast<double>(reports[1].anchors);
  j["position_reduction"] = pb > 0 ? 1.0 - pa / pb : 0.0;
  j["anchor_reduction"] = nb > 0 ? 1.0 - na / nb : 0.0;
  j["wilcoxon"] = {{"u", w.u}, {"p_value", w.p_value}, {"exact", w.exact}, {"all_tied", w.all_tied}};
  j["images"] = samples.size();
  j["repetitions"] = reps;
  open_out(fs::path(out) / "bench.json") << j.dump(2) << "\n";
  std::cout << j.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Selective-attention region proposals and contextual organ detection"};
  app.require_subcommand(1);

  std::string config, out, data, checkpoint, image, baseline_config, baseline_checkpoint;
  std::size_t count = 10, reps = 5;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic dataset (PGM images + annotations.jsonl)");
  gen->add_option("--config", config, "Run config JSON");
  gen->add_option("--out", out, "Output directory")->required();
  gen->add_option("--count", count, "Number of samples");
  gen->add_option("--seed", seed, "Random seed (default: SELATTN_SEED, then config)");

  auto* train = app.add_subcommand("train", "Train the joint model");
  train->add_option("--config", config, "Run config JSON");
  train->add_option("--data", data, "Dataset directory")->required();
  train->add_option("--out", out, "Output directory")->required();
  train->add_option("--steps", steps, "Override config steps");
  train->add_option("--seed", seed, "Random seed");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint (JSON report on stdout)");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
  eval->add_option("--data", data, "Dataset directory")->required();

  auto* prop = app.add_subcommand("propose", "Print scored proposals for one PGM image");
  prop->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
  prop->add_option("--image", image, "PGM image")->required();
  prop->add_option("--out", out, "Write the JSON list here instead of stdout");

  auto* bench = app.add_subcommand("bench", "Compare restricted and baseline pipelines");
  bench->add_option("--config", config, "Restricted config (default: paper preset)");
  bench->add_option("--baseline-config", baseline_config, "Baseline config (default: baseline preset)");
  bench->add_option("--checkpoint", checkpoint, "Trained restricted model");
  bench->add_option("--baseline-checkpoint", baseline_checkpoint, "Trained baseline model");
  bench->add_option("--data", data, "Dataset directory (default: generate --count images)");
  bench->add_option("--count", count, "Generated images when --data is absent");
  bench->add_option("--reps", reps, "Timed repetitions (after 2 warmups)");
  bench->add_option("--out", out, "Output directory for bench.csv and bench.json")->required();
  bench->add_option("--seed", seed, "Random seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_gen_data(config, out, count, seed);
    if (*train) return cmd_train(config, data, out, steps, seed);
    if (*eval) return cmd_eval(checkpoint, data);
    if (*prop) return cmd_propose(checkpoint, image, out);
    if (*bench)
      return cmd_bench(config, baseline_config, checkpoint, baseline_checkpoint, data, count, reps, out, seed);
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const StateError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
