#include "commands.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "lens/config.hpp"
#include "lens/data.hpp"
#include "lens/diversity.hpp"
#include "lens/errors.hpp"
#include "lens/gradcheck.hpp"
#include "lens/io.hpp"
#include "lens/metrics.hpp"
#include "lens/model_io.hpp"
#include "lens/predict.hpp"
#include "lens/training.hpp"
#include "lens/vit.hpp"

namespace lens::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

/// A failed check whose inputs were well-formed.
struct VerificationFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

constexpr const char* kCheckpointFile = "model.lens";
constexpr const char* kConfigFile = "config.json";
constexpr const char* kHistoryFile = "history.jsonl";

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> jobs;
  std::optional<std::size_t> members;
  std::optional<std::size_t> rank;
  std::optional<double> gain;
};

void add_override_flags(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--seed", o.seed, "Run seed");
  cmd->add_option("--out", o.out, "Output directory");
  cmd->add_option("--jobs", o.jobs, "Member parallelism")->check(CLI::PositiveNumber);
  cmd->add_option("--members", o.members, "Ensemble size")->check(CLI::PositiveNumber);
  cmd->add_option("--rank", o.rank, "LoRA rank")->check(CLI::PositiveNumber);
  cmd->add_option("--gain", o.gain, "LoRA A init gain (xavier) or std (gaussian)");
}

void apply(const Overrides& o, RunConfig& cfg) {
  if (o.seed) cfg.seed = *o.seed;
  if (o.out) cfg.out_dir = *o.out;
  if (o.jobs) cfg.jobs = *o.jobs;
  if (o.members) cfg.model.ensemble_size = *o.members;
  if (o.rank) cfg.model.rank = *o.rank;
  if (o.gain) cfg.model.init.value = *o.gain;
  cfg.validate();
}

RunConfig read_config(const fs::path& path) {
  const std::string text = read_file(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

void write_json(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

/// Config of a checkpoint: `explicit_config` if given, else config.json beside it.
RunConfig config_for(const fs::path& checkpoint, const std::string& explicit_config) {
  const fs::path p = explicit_config.empty() ? checkpoint.parent_path() / kConfigFile : fs::path(explicit_config);
  return read_config(p);
}

EnsembleVit<float> load_trained(const fs::path& checkpoint, const RunConfig& cfg) {
  EnsembleVit<float> model(cfg.model, cfg.seed);
  load_model(checkpoint, model);
  return model;
}

void check_geometry(const ModelConfig& m, const Dataset& d, const std::string& what) {
  if (d.height() != m.image_size || d.width() != m.image_size || d.channels() != m.channels) {
    throw DimensionError(what + " has images " + std::to_string(d.height()) + "x" + std::to_string(d.width()) + "x" +
                         std::to_string(d.channels()) + ", model expects " + std::to_string(m.image_size) + "x" +
                         std::to_string(m.image_size) + "x" + std::to_string(m.channels));
  }
  if (d.num_classes != m.num_classes) {
    throw DimensionError(what + " has " + std::to_string(d.num_classes) + " classes, model has " +
                         std::to_string(m.num_classes));
  }
}

/// Prints to stdout and, when `path` is nonempty, writes the same JSON there.
void emit(std::ostream& out, const json& j, const std::string& path) {
  out << j.dump(2) << "\n";
  if (!path.empty()) write_json(path, j);
}

int cmd_train(const std::string& config_path, const Overrides& o) {
  RunConfig cfg = read_config(config_path);
  apply(o, cfg);
  if (cfg.train_data.empty()) throw ConfigError("config has no train_data");
  const Dataset train = load_dataset(cfg.train_data);
  check_geometry(cfg.model, train, cfg.train_data);

  std::optional<EnsembleVit<float>> initial;
  if (!cfg.backbone_checkpoint.empty()) {
    initial.emplace(cfg.model, cfg.seed);
    const auto stored = load_checkpoint(cfg.backbone_checkpoint);
    std::map<std::string, Tensor<float>> values(stored.begin(), stored.end());
    initial->load_backbone(values);
  }

  const fs::path out_dir = cfg.out_dir;
  fs::create_directories(out_dir);
  write_json(out_dir / kConfigFile, to_json(cfg));

  std::ostringstream history;
  TrainHooks hooks;
  hooks.on_record = [&history](const HistoryRecord& r) { history << to_json(r).dump() << "\n"; };
  auto result = train_run<float>(cfg, train, hooks, std::move(initial));
  save_model(out_dir / kCheckpointFile, result.model);
  write_file_atomic(out_dir / kHistoryFile, history.str());
  spdlog::info("wrote {} ({} steps)", (out_dir / kCheckpointFile).string(), result.steps);
  return kOk;
}

struct EvalArgs {
  std::string checkpoint, dataset, config, out;
  double temperature = 1.0;
  std::size_t jobs = 1;
};

PredictOptions predict_options(const RunConfig& cfg, std::size_t jobs) {
  PredictOptions p;
  p.jobs = jobs;
  p.mc_seed = CounterRng(cfg.seed).fork(0xE7A1).key();
  return p;
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const RunConfig cfg = config_for(a.checkpoint, a.config);
  const auto model = load_trained(a.checkpoint, cfg);
  const Dataset data = load_dataset(a.dataset);
  check_geometry(cfg.model, data, a.dataset);
  if (!(a.temperature > 0.0)) throw ConfigError("temperature must be positive");
  const auto ps = predict(model, data, a.temperature, predict_options(cfg, a.jobs));
  const auto agg = ensemble_aggregate(ps.probs);
  auto j = to_json(calibration_report(agg.mean, ps.labels, a.temperature));
  emit(out, j, a.out);
  return kOk;
}

struct OodArgs {
  std::string checkpoint, in_dataset, out_dataset, config, out;
  double temperature = 1.0;
  std::size_t jobs = 1;
};

int cmd_ood_eval(const OodArgs& a, std::ostream& out) {
  const RunConfig cfg = config_for(a.checkpoint, a.config);
  const auto model = load_trained(a.checkpoint, cfg);
  const Dataset in = load_dataset(a.in_dataset);
  const Dataset ood = load_dataset(a.out_dataset);
  check_geometry(cfg.model, in, a.in_dataset);
  if (ood.height() != in.height() || ood.width() != in.width() || ood.channels() != in.channels()) {
    throw DimensionError("OOD dataset geometry differs from the in-distribution dataset");
  }
  const auto opts = predict_options(cfg, a.jobs);
  const auto p_in = ensemble_aggregate(predict(model, in, a.temperature, opts).probs).mean;
  const auto p_out = ensemble_aggregate(ensemble_probs(member_logits(model, ood.images, opts), a.temperature)).mean;
  const auto s = ood_scores(p_in, p_out);
  emit(out, json{{"auroc", s.auroc}, {"auprc", s.auprc}, {"fpr95", s.fpr95}, {"temperature", a.temperature}}, a.out);
  return kOk;
}

struct ShiftArgs {
  std::string checkpoint, dataset, config, out;
  std::optional<int> severity;
  double temperature = 1.0;
  std::size_t jobs = 1;
};

int cmd_shift_eval(const ShiftArgs& a, std::ostream& out) {
  const RunConfig cfg = config_for(a.checkpoint, a.config);
  const auto model = load_trained(a.checkpoint, cfg);
  const Dataset data = load_dataset(a.dataset);
  check_geometry(cfg.model, data, a.dataset);
  std::vector<int> severities;
  if (a.severity) {
    corruption_magnitude(CorruptionKind::gaussian_noise, *a.severity);  // range check
    severities.push_back(*a.severity);
  } else {
    severities = {1, 2, 3, 4, 5};
  }
  const auto opts = predict_options(cfg, a.jobs);
  json rows = json::array();
  for (int sev : severities) {
    double mean_acc = 0;
    json kinds = json::object();
    for (auto kind : kCorruptionKinds) {
      const auto images = corrupt(data.images, {kind, sev}, CounterRng(cfg.seed).fork(0x5F17).key());
      const auto probs = ensemble_aggregate(ensemble_probs(member_logits(model, images, opts), a.temperature)).mean;
      const auto rep = calibration_report(probs, data.labels, a.temperature);
      kinds[to_string(kind)] = {{"accuracy", rep.accuracy}, {"ece", rep.ece}, {"nll", rep.nll}};
      mean_acc += rep.accuracy;
    }
    mean_acc /= static_cast<double>(std::size(kCorruptionKinds));
    rows.push_back({{"severity", sev}, {"mean_accuracy", mean_acc}, {"kinds", kinds}});
  }
  emit(out, json{{"temperature", a.temperature}, {"severities", rows}}, a.out);
  return kOk;
}

int cmd_calibrate(const EvalArgs& a, std::ostream& out) {
  const RunConfig cfg = config_for(a.checkpoint, a.config);
  const auto model = load_trained(a.checkpoint, cfg);
  const Dataset data = load_dataset(a.dataset);
  check_geometry(cfg.model, data, a.dataset);
  const auto logits = member_logits(model, data.images, predict_options(cfg, a.jobs));
  const double t = fit_temperature(logits, data.labels);
  const auto before = ensemble_aggregate(ensemble_probs(logits, 1.0)).mean;
  const auto after = ensemble_aggregate(ensemble_probs(logits, t)).mean;
  emit(out,
       json{{"temperature", t},
            {"nll_before", nll(before, data.labels)},
            {"nll_after", nll(after, data.labels)},
            {"ece_before", ece(before, data.labels)},
            {"ece_after", ece(after, data.labels)}},
       a.out);
  return kOk;
}

json count_row(const ModelConfig& m) {
  const auto pc = count_parameters(m);
  const auto backbone = backbone_parameter_count(m);
  return {{"method", to_string(m.method)},
          {"members", m.ensemble_size},
          {"rank", m.rank},
          {"total", pc.total},
          {"trainable", pc.trainable},
          {"per_member_overhead", pc.per_member_overhead},
          {"backbone", backbone},
          {"overhead_ratio", static_cast<double>(pc.total) / static_cast<double>(backbone)}};
}

struct ParamArgs {
  std::string config, profile, method;
  std::optional<std::size_t> members, rank, classes;
  std::string out;
};

int cmd_param_count(const ParamArgs& a, std::ostream& out) {
  ModelConfig m;
  if (!a.config.empty()) m = read_config(a.config).model;
  if (a.profile == "vit-b32") {
    const auto method = m.method;
    m = ModelConfig::vit_base_32(a.classes.value_or(100));
    m.method = a.config.empty() ? Method::lora : method;
  } else if (!a.profile.empty()) {
    throw ConfigError("unknown profile '" + a.profile + "' (expected vit-b32)");
  }
  if (!a.method.empty()) m.method = parse_method(a.method);
  if (a.members) m.ensemble_size = *a.members;
  if (a.rank) m.rank = *a.rank;
  if (m.method == Method::single) m.ensemble_size = 1;
  const json row = count_row(m);
  if (!a.out.empty()) write_json(a.out, row);
  out << std::left << std::setw(22) << "method" << row["method"].get<std::string>() << "\n"
      << std::setw(22) << "members" << m.ensemble_size << "\n"
      << std::setw(22) << "rank" << m.rank << "\n"
      << std::setw(22) << "total" << row["total"].get<std::uint64_t>() << "\n"
      << std::setw(22) << "trainable" << row["trainable"].get<std::uint64_t>() << "\n"
      << std::setw(22) << "per_member_overhead" << row["per_member_overhead"].get<std::uint64_t>() << "\n"
      << std::setw(22) << "backbone" << row["backbone"].get<std::uint64_t>() << "\n"
      << std::setw(22) << "overhead_ratio" << std::fixed << std::setprecision(4)
      << row["overhead_ratio"].get<double>() << "\n";
  return kOk;
}

int cmd_gradcheck(std::uint64_t seed, std::ostream& out) {
  const auto results = run_gradcheck_suite(gradcheck_cases(), 100, 1e-4, seed);
  std::vector<std::string> failed;
  for (const auto& r : results) {
    out << (r.passed ? "PASS " : "FAIL ") << std::left << std::setw(32) << r.name << " max_rel_err "
        << std::scientific << std::setprecision(3) << r.max_error << " probes " << r.probes << "\n";
    if (!r.passed) failed.push_back(r.name);
  }
  if (!failed.empty()) {
    std::string list;
    for (const auto& n : failed) list += (list.empty() ? "" : ", ") + n;
    throw VerificationFailure("gradient check failed for: " + list);
  }
  return kOk;
}

struct DiversityArgs {
  std::vector<std::string> checkpoints;
  std::string dataset, config, out;
  std::size_t top_k = kDefaultTopK;
  std::size_t jobs = 1;
  bool function_space = true;
};

int cmd_analyze_diversity(const DiversityArgs& a, std::ostream& out) {
  std::vector<Tensor<double>> member_probs;  // each [S, C]
  std::vector<std::vector<Tensor<double>>> updates;
  std::vector<Tensor<double>> initial;
  std::size_t models_with_updates = 0;
  std::string dataset = a.dataset;
  std::vector<int> labels;
  for (const auto& ck : a.checkpoints) {
    const RunConfig cfg = config_for(ck, a.config);
    if (dataset.empty()) dataset = cfg.test_data;
    if (dataset.empty()) throw ConfigError("no --data given and the config has no test_data");
    const auto model = load_trained(ck, cfg);
    const Dataset data = load_dataset(dataset);
    check_geometry(cfg.model, data, dataset);
    labels = data.labels;
    const auto ps = predict(model, data, 1.0, predict_options(cfg, a.jobs));
    for (std::size_t i = 0; i < ps.members(); ++i) member_probs.push_back(ps.member(i));
    auto u = value_updates(model);
    if (!u.empty()) {
      ++models_with_updates;
      if (initial.empty()) initial = value_initial(model);
      for (auto& m : u) updates.push_back(std::move(m));
    }
  }
  if (member_probs.size() < 2) throw ConfigError("diversity analysis needs at least 2 ensemble members");
  // weight-space statistics only when every member carries an update
  if (models_with_updates != a.checkpoints.size() || updates.size() != member_probs.size()) {
    updates.clear();
    initial.clear();
  }
  const std::size_t s = member_probs[0].dim(0), c = member_probs[0].dim(1);
  Tensor<double> probs({member_probs.size(), s, c});
  for (std::size_t i = 0; i < member_probs.size(); ++i) {
    if (member_probs[i].shape() != member_probs[0].shape()) throw DimensionError("checkpoints disagree on classes");
    std::copy(member_probs[i].data().begin(), member_probs[i].data().end(), probs.data().begin() + i * s * c);
  }
  const auto summary = summarize_diversity(probs, updates, initial, a.top_k);
  emit(out, to_json(summary, a.function_space), a.out);
  return kOk;
}

struct GenArgs {
  std::string out = "data";
  std::uint64_t seed = 0;
  SyntheticSpec spec;
  std::size_t ood_samples = 500;
  std::optional<int> severity;
};

int cmd_gen_data(const GenArgs& a) {
  const fs::path dir = a.out;
  fs::create_directories(dir);
  const Dataset train = gen_synthetic(a.spec, Split::train, a.seed);
  const Dataset test = gen_synthetic(a.spec, Split::test, a.seed);
  save_dataset(dir / "train.lds", train);
  save_dataset(dir / "test.lds", test);
  save_dataset(dir / "ood.lds", gen_ood(a.spec, a.ood_samples, a.seed));
  if (a.severity) {
    for (auto kind : kCorruptionKinds) {
      Dataset shifted = test;
      shifted.images = corrupt(test.images, {kind, *a.severity}, CounterRng(a.seed).fork(0x5F17).key());
      save_dataset(dir / ("test_" + to_string(kind) + "_s" + std::to_string(*a.severity) + ".lds"), shifted);
    }
  }
  spdlog::info("wrote datasets to {}", dir.string());
  return kOk;
}

}  // namespace

void configure_logging() {
  const char* level = std::getenv("LENS_LOG");
  spdlog::set_level(level ? spdlog::level::from_str(level) : spdlog::level::info);
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Low-rank adapter ensembles on a micro vision transformer", "lens"};
  app.require_subcommand(1);

  std::string config_path;
  Overrides overrides;
  auto* train = app.add_subcommand("train", "Train a model from a JSON config");
  train->add_option("--config", config_path, "Run config")->required()->check(CLI::ExistingFile);
  add_override_flags(train, overrides);

  EvalArgs eval_args;
  auto* eval = app.add_subcommand("eval", "Calibration report of a checkpoint on a dataset");
  eval->add_option("checkpoint", eval_args.checkpoint)->required();
  eval->add_option("dataset", eval_args.dataset)->required();
  eval->add_option("--config", eval_args.config, "Config (default: config.json beside the checkpoint)");
  eval->add_option("--temperature", eval_args.temperature, "Softmax temperature");
  eval->add_option("--out", eval_args.out, "Also write the report here");
  eval->add_option("--jobs", eval_args.jobs)->check(CLI::PositiveNumber);

  OodArgs ood_args;
  auto* ood = app.add_subcommand("ood-eval", "Max-probability OOD detection metrics");
  ood->add_option("checkpoint", ood_args.checkpoint)->required();
  ood->add_option("in_dataset", ood_args.in_dataset)->required();
  ood->add_option("out_dataset", ood_args.out_dataset)->required();
  ood->add_option("--config", ood_args.config);
  ood->add_option("--temperature", ood_args.temperature);
  ood->add_option("--out", ood_args.out);
  ood->add_option("--jobs", ood_args.jobs)->check(CLI::PositiveNumber);

  ShiftArgs shift_args;
  auto* shift = app.add_subcommand("shift-eval", "Accuracy under graded corruptions");
  shift->add_option("checkpoint", shift_args.checkpoint)->required();
  shift->add_option("dataset", shift_args.dataset)->required();
  shift->add_option("--config", shift_args.config);
  shift->add_option("--severity", shift_args.severity, "Single severity 0..5 (default: 1..5)");
  shift->add_option("--temperature", shift_args.temperature);
  shift->add_option("--out", shift_args.out);
  shift->add_option("--jobs", shift_args.jobs)->check(CLI::PositiveNumber);

  EvalArgs cal_args;
  auto* calibrate = app.add_subcommand("calibrate", "Fit a temperature on a validation dataset");
  calibrate->add_option("checkpoint", cal_args.checkpoint)->required();
  calibrate->add_option("dataset", cal_args.dataset)->required();
  calibrate->add_option("--config", cal_args.config);
  calibrate->add_option("--out", cal_args.out);
  calibrate->add_option("--jobs", cal_args.jobs)->check(CLI::PositiveNumber);

  ParamArgs param_args;
  auto* params = app.add_subcommand("param-count", "Parameter accounting");
  params->add_option("--config", param_args.config);
  params->add_option("--profile", param_args.profile, "vit-b32 for the ViT-Base/32 geometry");
  params->add_option("--method", param_args.method);
  params->add_option("--members", param_args.members)->check(CLI::PositiveNumber);
  params->add_option("--rank", param_args.rank)->check(CLI::PositiveNumber);
  params->add_option("--classes", param_args.classes)->check(CLI::PositiveNumber);
  params->add_option("--out", param_args.out);

  std::uint64_t gradcheck_seed = 0;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  gradcheck->add_option("--seed", gradcheck_seed);

  DiversityArgs div_args;
  bool no_function_space = false;
  auto* diversity = app.add_subcommand("analyze-diversity", "Function- and weight-space diversity");
  diversity->add_option("checkpoints", div_args.checkpoints)->required();
  diversity->add_option("--data", div_args.dataset, "Dataset (default: test_data of the config)");
  diversity->add_option("--config", div_args.config);
  diversity->add_option("--top-k", div_args.top_k)->check(CLI::PositiveNumber);
  diversity->add_option("--out", div_args.out);
  diversity->add_option("--jobs", div_args.jobs)->check(CLI::PositiveNumber);
  diversity->add_flag("--no-function-space", no_function_space);

  GenArgs gen_args;
  auto* gen = app.add_subcommand("gen-data", "Write synthetic train/test/OOD datasets");
  gen->add_option("--out", gen_args.out);
  gen->add_option("--seed", gen_args.seed);
  gen->add_option("--classes", gen_args.spec.num_classes);
  gen->add_option("--image-size", gen_args.spec.image_size);
  gen->add_option("--channels", gen_args.spec.channels);
  gen->add_option("--train", gen_args.spec.train_samples);
  gen->add_option("--test", gen_args.spec.test_samples);
  gen->add_option("--ood", gen_args.ood_samples);
  gen->add_option("--noise", gen_args.spec.noise_std);
  gen->add_option("--severity", gen_args.severity, "Also write corrupted test sets at this severity");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << e.what() << "\n";
    return kUsageError;
  }

  try {
    if (*train) return cmd_train(config_path, overrides);
    if (*eval) return cmd_eval(eval_args, out);
    if (*ood) return cmd_ood_eval(ood_args, out);
    if (*shift) return cmd_shift_eval(shift_args, out);
    if (*calibrate) return cmd_calibrate(cal_args, out);
    if (*params) return cmd_param_count(param_args, out);
    if (*gradcheck) return cmd_gradcheck(gradcheck_seed, out);
    if (*diversity) {
      div_args.function_space = !no_function_space;
      return cmd_analyze_diversity(div_args, out);
    }
    if (*gen) return cmd_gen_data(gen_args);
  } catch (const VerificationFailure& e) {
    err << "error: " << e.what() << "\n";
    return kVerificationFailure;
  } catch (const RunError& e) {
    err << "error: training diverged: " << e.what() << "\n";
    return kDivergence;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << "\n";
    return kDivergence;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kUsageError;
  }
  return kUsageError;
}

}  // namespace lens::cli
