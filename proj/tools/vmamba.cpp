// Command-line front end: synth, split, train, eval, grad-check, scan-check,
// bench.
//
// Exit codes: 0 success, 1 validation failure, 2 I/O or format error,
// 3 numerical divergence.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "vmamba/bench.hpp"
#include "vmamba/checks.hpp"
#include "vmamba/dataset.hpp"
#include "vmamba/error.hpp"
#include "vmamba/kernels.hpp"
#include "vmamba/training.hpp"
#include "vmamba/volume.hpp"

namespace fs = std::filesystem;
using namespace vmamba;

namespace {

enum Exit { kOk = 0, kValidation = 1, kIo = 2, kDivergence = 3 };

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::string precision = "double";
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "JSON file overriding built-in defaults");
  cmd->add_option("--seed", c.seed, "RNG seed");
  cmd->add_option("--out", c.out, "Output directory")->capture_default_str();
  cmd->add_option("--precision", c.precision, "single or double")
      ->check(CLI::IsMember({"single", "double"}))
      ->capture_default_str();
}

// Top-level JSON config: {"model": {...}, "train": {...}, "synth": {...}, "bench": {...}}.
nlohmann::json load_config(const std::string& path) {
  if (path.empty()) return nlohmann::json::object();
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("config '" + path + "': " + e.what());
  }
  if (!doc.is_object()) throw ValidationError("config '" + path + "' must be a JSON object");
  for (const auto& [key, _] : doc.items())
    if (key != "model" && key != "train" && key != "synth" && key != "bench")
      throw ValidationError("config '" + path + "': unknown section '" + key + "'");
  return doc;
}

nlohmann::json section(const nlohmann::json& doc, const char* key) {
  return doc.contains(key) ? doc.at(key) : nlohmann::json::object();
}

fs::path ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());
  return fs::path(dir);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

model::ModelConfig profile_config(const std::string& profile) {
  if (profile == "tiny") return model::ModelConfig::tiny_profile();
  if (profile == "reference") return model::ModelConfig::reference_profile();
  throw ValidationError("unknown profile '" + profile + "' (expected tiny or reference)");
}

std::string utc_timestamp(std::optional<std::int64_t> fixed) {
  std::time_t t = 0;
  if (fixed) {
    t = static_cast<std::time_t>(*fixed);
  } else if (const char* epoch = std::getenv("SOURCE_DATE_EPOCH")) {
    t = static_cast<std::time_t>(std::strtoll(epoch, nullptr, 10));
  } else {
    t = std::time(nullptr);
  }
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// --------------------------------------------------------------- synth --

struct SynthArgs {
  std::size_t count = 10;
  std::vector<std::size_t> dims;
  std::string domain = "A";
};

int cmd_synth(const Common& c, const SynthArgs& a) {
  const auto doc = load_config(c.config_path);
  const auto js = section(doc, "synth");
  volume::Dims dims{32, 32, 16};
  std::uint64_t seed = 0;
  std::string domain = a.domain;
  volume::SynthSpec overrides;
  for (const auto& [key, _] : js.items())
    if (key != "dims" && key != "seed" && key != "domain" && key != "noise_sigma" && key != "intensity_bias" &&
        key != "base_radius")
      throw ValidationError("synth config: unknown key '" + key + "'");
  if (js.contains("dims")) dims = js.at("dims").get<volume::Dims>();
  if (js.contains("seed")) seed = js.at("seed").get<std::uint64_t>();
  if (js.contains("domain") && domain == "A") domain = js.at("domain").get<std::string>();
  if (!a.dims.empty()) {
    if (a.dims.size() != 3) throw ValidationError("--dims takes three extents");
    dims = {a.dims[0], a.dims[1], a.dims[2]};
  }
  if (c.seed) seed = *c.seed;

  volume::SynthSpec base = volume::domain_spec(volume::parse_domain(domain), dims, 0);
  if (js.contains("noise_sigma")) base.noise_sigma = js.at("noise_sigma").get<double>();
  if (js.contains("intensity_bias")) base.intensity_bias = js.at("intensity_bias").get<double>();
  if (js.contains("base_radius")) base.base_radius = js.at("base_radius").get<double>();
  base.validate();

  const fs::path out = ensure_dir(c.out);
  ensure_dir((out / "volumes").string());
  dataset::DatasetManifest manifest;
  for (std::size_t i = 0; i < a.count; ++i) {
    for (auto label : volume::kAllLabels) {
      volume::SynthSpec spec = base;
      spec.seed = seed * 0x9E3779B97F4A7C15ULL + i;
      char name[64];
      std::snprintf(name, sizeof name, "volumes/%s_%04zu.nii", volume::to_string(label).c_str(), i);
      volume::save_nifti(out / name, volume::synth_generate(label, spec));
      manifest.entries.push_back({name, label, "all"});
    }
  }
  dataset::save_manifest(out / "manifest.tsv", manifest);
  std::cout << "wrote " << manifest.entries.size() << " volumes and " << (out / "manifest.tsv").string() << "\n";
  return kOk;
}

// --------------------------------------------------------------- split --

struct SplitArgs {
  std::string manifest;
  double fraction = 0.8;
};

int cmd_split(const Common& c, const SplitArgs& a) {
  const fs::path src(a.manifest);
  auto m = dataset::load_manifest(src);
  const fs::path out = ensure_dir(c.out);
  // Re-anchor relative paths to the output directory.
  const fs::path src_dir = fs::absolute(src).parent_path();
  const fs::path out_dir = fs::absolute(out);
  for (auto& e : m.entries) {
    fs::path p(e.path);
    if (p.is_relative()) e.path = fs::relative(src_dir / p, out_dir).generic_string();
  }
  const std::uint64_t seed = c.seed.value_or(0);
  auto [train, test] = dataset::stratified_split(m, a.fraction, seed);
  dataset::save_manifest(out / "train.tsv", train);
  dataset::save_manifest(out / "test.tsv", test);
  const auto tc = train.class_counts(), sc = test.class_counts();
  std::cout << "train " << train.entries.size() << " (AD " << tc[0] << ", MCI " << tc[1] << ", CN " << tc[2]
            << ")\ntest  " << test.entries.size() << " (AD " << sc[0] << ", MCI " << sc[1] << ", CN " << sc[2]
            << ")\n";
  return kOk;
}

// --------------------------------------------------------------- train --

struct TrainArgs {
  std::string train_manifest;
  std::string eval_manifest;
  std::string profile = "reference";
  std::string resume;
  std::optional<std::size_t> epochs, batch_size, state_dim;
  std::optional<double> lr;
  std::optional<std::string> scan;
  bool resize = false;
  bool quiet = false;
};

int cmd_train(const Common& c, const TrainArgs& a) {
  if (c.precision == "single")
    throw ValidationError("train runs in double precision; --precision single applies to bench and scan-check");
  const auto doc = load_config(c.config_path);

  std::optional<training::Trainer> trainer;
  if (!a.resume.empty()) {
    trainer.emplace(training::checkpoint_load(volume::read_file(a.resume)));
    if (a.epochs) trainer->config().epochs = *a.epochs;
  } else {
    auto mc = model::ModelConfig::from_json(section(doc, "model"), profile_config(a.profile));
    auto tc = training::TrainConfig::from_json(section(doc, "train"));
    if (c.seed) mc.seed = tc.seed = *c.seed;
    if (a.state_dim) mc.state_dim = *a.state_dim;
    if (a.epochs) tc.epochs = *a.epochs;
    if (a.batch_size) tc.batch_size = *a.batch_size;
    if (a.lr) tc.learning_rate = *a.lr;
    if (a.scan) tc.scan = ssm::parse_scan_mode(*a.scan);
    mc.validate();
    tc.validate();
    trainer.emplace(mc, tc);
  }

  const auto dims = trainer->model().config().input_dims;
  auto load = [&](const std::string& path) {
    const auto m = dataset::load_manifest(path);
    if (m.entries.empty()) throw ValidationError("manifest '" + path + "' is empty");
    return dataset::load_samples(m, fs::path(path).parent_path(), dims, a.resize);
  };
  const auto train = load(a.train_manifest);
  const auto eval = load(a.eval_manifest);

  const fs::path out = ensure_dir(c.out);
  trainer->run(train, eval, [&](const training::EpochRecord& r) {
    // Checkpoint every epoch so an interrupted run can resume.
    volume::write_file(out / "checkpoint.bin", training::checkpoint_save(trainer->checkpoint()));
    write_text(out / "history.csv", training::history_csv(trainer->history()));
    if (!a.quiet)
      std::printf("epoch %zu  train_loss %.6f  eval_loss %.6f  eval_accuracy %.4f\n", r.epoch, r.train_loss,
                  r.eval_loss, r.eval_accuracy);
  });
  volume::write_file(out / "checkpoint.bin", training::checkpoint_save(trainer->checkpoint()));
  write_text(out / "history.csv", training::history_csv(trainer->history()));
  std::cout << "wrote " << (out / "checkpoint.bin").string() << " and " << (out / "history.csv").string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------- eval --

struct EvalArgs {
  std::string checkpoint;
  std::string manifest;
  std::string dataset_id;
  std::optional<std::int64_t> timestamp;
  std::optional<std::string> scan;
  bool resize = false;
};

int cmd_eval(const Common& c, const EvalArgs& a) {
  if (c.precision == "single") throw ValidationError("eval runs in double precision");
  const auto bytes = volume::read_file(a.checkpoint);
  const auto ckpt = training::checkpoint_load(bytes);
  auto model = training::restore_model(ckpt);
  const auto m = dataset::load_manifest(a.manifest);
  if (m.entries.empty()) throw ValidationError("manifest '" + a.manifest + "' is empty");
  const auto samples = dataset::load_samples(m, fs::path(a.manifest).parent_path(), ckpt.model_config.input_dims,
                                             a.resize);
  const auto scan = a.scan ? ssm::parse_scan_mode(*a.scan) : ckpt.train_config.scan;
  const auto ev = training::evaluate(model, samples, scan);
  const std::string id = a.dataset_id.empty() ? fs::path(a.manifest).stem().string() : a.dataset_id;
  const auto report =
      metrics::EvalReport::build(id, ev.confusion, training::checkpoint_id(bytes), utc_timestamp(a.timestamp));
  const fs::path out = ensure_dir(c.out);
  write_text(out / "report.json", metrics::report_json(report));
  write_text(out / "report.csv", metrics::report_csv(report));
  std::printf("accuracy %.4f  macro_f1 %.4f  (%zu samples)\n", report.metrics.accuracy, report.metrics.macro.f1,
              samples.size());
  std::cout << "wrote " << (out / "report.json").string() << " and " << (out / "report.csv").string() << "\n";
  return kOk;
}

// ---------------------------------------------------------- grad-check --

struct GradArgs {
  std::string profile = "tiny";
  std::string fault;
};

int cmd_grad_check(const Common& c, const GradArgs& a) {
  if (c.precision == "single") std::cerr << "note: gradient checks always run in double precision\n";
  if (a.profile != "tiny" && a.profile != "ops")
    throw ValidationError("grad-check profile must be tiny or ops");
  if (!a.fault.empty()) {
    const auto eq = a.fault.find('=');
    if (eq == std::string::npos) throw ValidationError("--inject-fault expects op=factor");
    set_backward_fault(a.fault.substr(0, eq), std::stod(a.fault.substr(eq + 1)));
  }
  const auto rows = checks::run_grad_checks(checks::grad_cases(a.profile == "tiny"));
  set_backward_fault("", 1.0);
  std::cout << checks::format_grad_table(rows);
  const auto failed = std::count_if(rows.begin(), rows.end(), [](const auto& r) { return !r.pass; });
  std::cout << (failed == 0 ? "all " + std::to_string(rows.size()) + " checks passed\n"
                            : std::to_string(failed) + " of " + std::to_string(rows.size()) + " checks failed\n");
  return failed == 0 ? kOk : kValidation;
}

// ---------------------------------------------------------- scan-check --

int cmd_scan_check(const Common& c, checks::ScanCheckConfig cfg) {
  if (c.seed) cfg.seed = *c.seed;
  cfg.single_precision = c.precision == "single";
  const auto r = checks::run_scan_check(cfg);
  std::printf("%zu trials (%s precision): max |parallel - sequential| %.3e, max |sequential - %s| %.3e, "
              "tolerance %.0e\n",
              r.trials, c.precision.c_str(), r.max_parallel_dev, cfg.single_precision ? "double" : "oracle",
              r.max_oracle_dev, r.tolerance);
  for (const auto& f : r.failures)
    std::printf("FAIL seed=%llu L=%zu N_s=%zu deviation=%.3e (%s)\n", static_cast<unsigned long long>(f.seed),
                f.length, f.state, f.deviation, f.what.c_str());
  std::cout << (r.passed() ? "PASS\n" : "FAIL\n");
  return r.passed() ? kOk : kValidation;
}

// --------------------------------------------------------------- bench --

struct BenchArgs {
  std::vector<std::size_t> lengths;
  std::optional<std::size_t> dim, state_dim, reps;
  bool check = false;
};

int cmd_bench(const Common& c, const BenchArgs& a) {
  const auto doc = load_config(c.config_path);
  const auto js = section(doc, "bench");
  bench::BenchConfig cfg;
  for (const auto& [key, _] : js.items())
    if (key != "lengths" && key != "model_dim" && key != "state_dim" && key != "repetitions")
      throw ValidationError("bench config: unknown key '" + key + "'");
  if (js.contains("lengths")) cfg.lengths = js.at("lengths").get<std::vector<std::size_t>>();
  if (js.contains("model_dim")) cfg.model_dim = js.at("model_dim").get<std::size_t>();
  if (js.contains("state_dim")) cfg.state_dim = js.at("state_dim").get<std::size_t>();
  if (js.contains("repetitions")) cfg.repetitions = js.at("repetitions").get<std::size_t>();
  if (!a.lengths.empty()) cfg.lengths = a.lengths;
  if (a.dim) cfg.model_dim = *a.dim;
  if (a.state_dim) cfg.state_dim = *a.state_dim;
  if (a.reps) cfg.repetitions = *a.reps;
  if (c.seed) cfg.seed = *c.seed;
  cfg.single_precision = c.precision == "single";

  const auto records = bench::run_bench(cfg);
  const fs::path out = ensure_dir(c.out);
  write_text(out / "bench.csv", bench::bench_csv(records));
  std::cout << bench::bench_csv(records);
  const double att = bench::fitted_slope(records, bench::Mechanism::attention);
  const double seq = bench::fitted_slope(records, bench::Mechanism::scan_sequential);
  const double par = bench::fitted_slope(records, bench::Mechanism::scan_parallel);
  std::printf("log-log slope (upper half of lengths, isa %s): attention %.3f, scan_sequential %.3f, "
              "scan_parallel %.3f\n",
              std::string(kernels::to_string(kernels::active_isa())).c_str(), att, seq, par);
  if (a.check) {
    const bool ok = att >= 1.8 && seq <= 1.3;
    std::cout << (ok ? "PASS" : "FAIL") << ": attention >= 1.8 and scan_sequential <= 1.3\n";
    return ok ? kOk : kValidation;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Volumetric SS-Conv-SSM classifier toolkit"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  Common common;

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate synthetic labelled volumes and a manifest");
  add_common(s, common);
  s->add_option("--count", synth.count, "Volumes per class")->capture_default_str();
  s->add_option("--dims", synth.dims, "Volume extents D H W (default 32 32 16)")->expected(3);
  s->add_option("--domain", synth.domain, "Domain analogue A, B or C")->capture_default_str();

  SplitArgs split;
  auto* sp = app.add_subcommand("split", "Stratified train/test split of a manifest");
  add_common(sp, common);
  sp->add_option("--manifest", split.manifest, "Input manifest")->required();
  sp->add_option("--fraction", split.fraction, "Training fraction per class")->capture_default_str();

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a model; writes checkpoint.bin and history.csv");
  add_common(t, common);
  t->add_option("--train", train.train_manifest, "Training manifest")->required();
  t->add_option("--eval", train.eval_manifest, "Evaluation manifest")->required();
  t->add_option("--profile", train.profile, "Model profile: reference or tiny")->capture_default_str();
  t->add_option("--epochs", train.epochs, "Total epochs");
  t->add_option("--batch-size", train.batch_size, "Batch size");
  t->add_option("--lr", train.lr, "Adam learning rate");
  t->add_option("--state-dim", train.state_dim, "SSM state size N_s");
  t->add_option("--scan", train.scan, "sequential or parallel");
  t->add_option("--resume", train.resume, "Continue from a checkpoint");
  t->add_flag("--resize", train.resize, "Resample volumes whose extents differ from the model input");
  t->add_flag("--quiet", train.quiet, "No per-epoch output");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint; writes report.json and report.csv");
  add_common(e, common);
  e->add_option("--checkpoint", eval.checkpoint, "Checkpoint file")->required();
  e->add_option("--manifest", eval.manifest, "Manifest to evaluate")->required();
  e->add_option("--dataset-id", eval.dataset_id, "Dataset name recorded in the report");
  e->add_option("--timestamp", eval.timestamp, "Report time as Unix seconds (default SOURCE_DATE_EPOCH or now)");
  e->add_option("--scan", eval.scan, "sequential or parallel");
  e->add_flag("--resize", eval.resize, "Resample volumes whose extents differ from the model input");

  GradArgs grad;
  auto* g = app.add_subcommand("grad-check", "Analytic vs finite-difference gradients for every op");
  add_common(g, common);
  g->add_option("--profile", grad.profile, "tiny (ops, components, end to end) or ops")->capture_default_str();
  g->add_option("--inject-fault", grad.fault, "Scale one op's backward rule, e.g. linear=1.01 (harness hook)");

  checks::ScanCheckConfig scan;
  auto* sc = app.add_subcommand("scan-check", "Sequential vs parallel vs closed-form scan agreement");
  add_common(sc, common);
  sc->add_option("--trials", scan.trials, "Random trials")->capture_default_str();
  sc->add_option("--max-length", scan.max_length, "Largest sequence length")->capture_default_str();
  sc->add_option("--max-state", scan.max_state, "Largest state size")->capture_default_str();
  sc->add_option("--tolerance", scan.tolerance, "Absolute tolerance (0 picks the precision default)");

  BenchArgs bench_args;
  auto* b = app.add_subcommand("bench", "Attention vs selective scan scaling benchmark");
  add_common(b, common);
  b->add_option("--lengths", bench_args.lengths, "Sequence lengths (default 256 512 1024 2048 4096)");
  b->add_option("--dim", bench_args.dim, "Model dim E (default 16)");
  b->add_option("--state-dim", bench_args.state_dim, "State size N_s (default 16)");
  b->add_option("--reps", bench_args.reps, "Repetitions per point, median taken (default 5)");
  b->add_flag("--check", bench_args.check, "Exit 1 unless the slope thresholds hold");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return kValidation;
  }

  try {
    if (*s) return cmd_synth(common, synth);
    if (*sp) return cmd_split(common, split);
    if (*t) return cmd_train(common, train);
    if (*e) return cmd_eval(common, eval);
    if (*g) return cmd_grad_check(common, grad);
    if (*sc) return cmd_scan_check(common, scan);
    if (*b) return cmd_bench(common, bench_args);
  } catch (const DivergenceError& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return kDivergence;
  } catch (const NumericError& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return kDivergence;
  } catch (const IoError& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return kIo;
  } catch (const FormatError& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return kIo;
  } catch (const nlohmann::json::exception& ex) {
    std::cerr << "error: config: " << ex.what() << "\n";
    return kValidation;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return kValidation;
  }
  return kValidation;
}
