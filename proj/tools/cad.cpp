// Command-line front end: synth | train | eval | predict | gradcheck.
//
// Exit codes: 0 success, 1 usage or contract violation, 2 data error,
// 3 numeric failure.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "cad/cad.hpp"

namespace fs = std::filesystem;
using namespace cad;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

// FNV-1a over the dataset manifest followed by every listed file in order.
std::uint64_t dataset_hash(const fs::path& dir) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&](const std::string& bytes) {
    for (unsigned char c : bytes) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
  };
  const std::string manifest = read_text_file(dir / kDatasetManifest);
  feed(manifest);
  for (const Json& f : Json::parse(manifest).at("files"))
    feed(read_text_file(dir / f.at("file").get<std::string>()));
  return h;
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw ContractError(std::string("missing required option ") + flag);
}

struct SynthArgs {
  GeneratorConfig gen;
  double train_fraction = 0.875;
  std::string out;
};

int run_synth(const SynthArgs& a) {
  require(a.out, "--out");
  const Dataset ds = synthesize_dataset(a.gen);
  const Split s = split(ds, a.train_fraction, a.gen.seed);
  std::vector<std::string> tags(ds.recordings.size(), "train");
  for (std::size_t i : s.test_indices) tags[i] = "test";
  save_dataset(ds, a.out, tags);
  std::cout << Json{{"out", a.out},
                    {"recordings", ds.recordings.size()},
                    {"train", s.train_indices.size()},
                    {"test", s.test_indices.size()},
                    {"student_duration_share", student_duration_share(ds)},
                    {"dataset_hash", hex(dataset_hash(a.out))}}
                   .dump(2)
            << "\n";
  return kOk;
}

struct TrainArgs {
  std::string data, split = "train", out;
  ModelConfig model;
  std::string arch = "full";
  TrainConfig train;
  std::size_t max_seq_len = 0;  // 0 = whole recordings
};

Json train_config_json(const TrainConfig& t) {
  return Json{{"learning_rate", t.learning_rate},
              {"batch_size", t.batch_size},
              {"epochs", t.epochs},
              {"adam", {{"beta1", t.adam.beta1}, {"beta2", t.adam.beta2}, {"epsilon", t.adam.epsilon}}},
              {"seed", t.seed},
              {"max_sequence_length",
               t.max_sequence_length ? Json(*t.max_sequence_length) : Json(nullptr)}};
}

int run_train(TrainArgs a) {
  require(a.data, "--data");
  require(a.out, "--out");
  a.model.architecture = parse_architecture(a.arch);
  if (a.max_seq_len > 0) a.train.max_sequence_length = a.max_seq_len;
  a.train.validate();

  const Dataset ds = load_dataset(a.data, a.split);
  a.model.d_a = ds.d_a;
  a.model.d_t = ds.d_t;
  CadModel model = build_model(a.model);

  const fs::path out = a.out;
  fs::create_directories(out);
  Json manifest = {{"command", "train"},
                   {"status", "running"},
                   {"model_config", to_json(model.config())},
                   {"train_config", train_config_json(a.train)},
                   {"seed", a.train.seed},
                   {"data", {{"dir", a.data}, {"split", a.split}, {"hash", hex(dataset_hash(a.data))}}},
                   {"checkpoint", "checkpoint"},
                   {"history", "history.jsonl"}};
  write_text_file(out / "run_manifest.json", manifest.dump(2));

  std::ofstream history(out / "history.jsonl", std::ios::trunc);
  try {
    const FitResult r = fit(model, ds, a.train, [&](const BatchRecord& rec) {
      history << format_record(rec) << "\n";
    });
    history.close();
    save_checkpoint(model, out / "checkpoint");
    manifest["status"] = "complete";
    manifest["final_loss"] = r.history.back().total;
  } catch (const std::exception& e) {
    manifest["status"] = "failed";
    manifest["error"] = e.what();
    write_text_file(out / "run_manifest.json", manifest.dump(2));
    throw;
  }
  write_text_file(out / "run_manifest.json", manifest.dump(2));
  std::cout << "trained " << architecture_tag(model.config().architecture) << " on "
            << ds.recordings.size() << " recordings; final loss "
            << manifest["final_loss"].get<double>() << "; checkpoint " << (out / "checkpoint").string()
            << "\n";
  return kOk;
}

struct EvalArgs {
  std::string checkpoint, data, split = "test", out;
  bool pooled = false;
  std::size_t threads = 1;
};

int run_eval(const EvalArgs& a) {
  require(a.checkpoint, "--checkpoint");
  require(a.data, "--data");
  const CadModel model = load_checkpoint(a.checkpoint);
  const Dataset ds = load_dataset(a.data, a.split);
  const MetricsReport report = evaluate_dataset(
      model, ds, a.pooled ? Aggregation::Pooled : Aggregation::Macro, a.threads);
  Json j = to_json(report);
  j["architecture"] = architecture_tag(model.config().architecture);
  j["data_hash"] = hex(dataset_hash(a.data));
  if (!a.out.empty()) write_text_file(a.out, j.dump(2));
  std::cout << j.dump(2) << "\n";
  return kOk;
}

struct PredictArgs {
  std::string checkpoint, input, out;
};

int run_predict(const PredictArgs& a) {
  require(a.checkpoint, "--checkpoint");
  require(a.input, "--input");
  const CadModel model = load_checkpoint(a.checkpoint);
  const Recording rec = load_recording(a.input);
  const Recording labeled = predict_sequence(model, rec);

  Json j = to_json(make_timeline(labeled));
  Json segments = Json::array();
  for (const Segment& s : labeled.segments) {
    segments.push_back({{"id", s.id},
                        {"start_ms", s.start_ms},
                        {"end_ms", s.end_ms},
                        {"label", label_name(*s.label)}});
  }
  j["segments"] = segments;
  if (rec.labeled()) {
    const RecordingMetrics m = recording_metrics(rec, gold_labels(labeled));
    j["accuracy"] = m.accuracy;
    std::cout << "duration-weighted accuracy " << m.accuracy << "\n";
  }
  if (a.out.empty()) {
    std::cout << j.dump(2) << "\n";
  } else {
    write_text_file(a.out, j.dump(2));
    std::cout << "timeline with " << j["runs"].size() << " runs written to " << a.out << "\n";
  }
  return kOk;
}

struct GradcheckArgs {
  std::uint64_t seed = 1;
  std::size_t segments = 6;
  double tol = 1e-4;
  double h = 1e-5;
  std::string arch;  // empty = all
};

int run_gradcheck(const GradcheckArgs& a) {
  bool all_passed = true;
  std::mt19937_64 rng(a.seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (Architecture arch : kAllArchitectures) {
    if (!a.arch.empty() && parse_architecture(a.arch) != arch) continue;
    ModelConfig cfg;
    cfg.d_a = 8;
    cfg.d_t = 8;
    cfg.d_q = cfg.d_v = cfg.d_b = 4;
    cfg.fcn_hidden = 8;
    cfg.architecture = arch;
    cfg.seed = a.seed;
    CadModel model = build_model(cfg);
    Matrix x_a(a.segments, cfg.d_a), x_t(a.segments, cfg.d_t);
    for (std::size_t i = 0; i < x_a.size(); ++i) x_a[i] = nd(rng);
    for (std::size_t i = 0; i < x_t.size(); ++i) x_t[i] = nd(rng);
    std::vector<Label> labels(a.segments);
    for (std::size_t i = 0; i < a.segments; ++i) labels[i] = i % 3 == 1 ? Label::Student : Label::Teacher;

    const GradCheckReport report = grad_check(
        [&](Tape& t, const BoundParameters& b) {
          return loss(model, forward(model, b, t.constant(x_a), t.constant(x_t)), labels).total;
        },
        model.parameters(), a.h, a.tol);
    all_passed = all_passed && report.passed;
    std::cout << (report.passed ? "PASS " : "FAIL ") << architecture_tag(arch)
              << " max_rel_error=" << report.max_rel_error << "\n";
    for (const ParameterCheck& p : report.parameters)
      std::cout << "  " << p.name << " " << p.max_rel_error << "\n";
  }
  return all_passed ? kOk : kNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Classroom activity detection: teacher/student segment labeling"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "Read options from a TOML/INI file; flags override it");
  bool dump_config = false;
  app.add_flag("--dump-config", dump_config, "Print the effective configuration and exit");

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic labeled dataset")->configurable();
  s->add_option("--out", synth.out, "Output dataset directory");
  s->add_option("--recordings", synth.gen.n_recordings)->capture_default_str();
  s->add_option("--mean-segments", synth.gen.mean_segments)->capture_default_str();
  s->add_option("--student-ratio", synth.gen.student_ratio)->capture_default_str();
  s->add_option("--voices", synth.gen.n_student_voices)->capture_default_str();
  s->add_option("--separation", synth.gen.cluster_separation)->capture_default_str();
  s->add_option("--acoustic-noise", synth.gen.acoustic_noise)->capture_default_str();
  s->add_option("--ambiguity", synth.gen.text_ambiguity)->capture_default_str();
  s->add_option("--text-separation", synth.gen.text_separation)->capture_default_str();
  s->add_option("--text-noise", synth.gen.text_noise)->capture_default_str();
  s->add_option("--mean-student-run", synth.gen.mean_student_run)->capture_default_str();
  s->add_option("--d-a", synth.gen.d_a)->capture_default_str();
  s->add_option("--d-t", synth.gen.d_t)->capture_default_str();
  s->add_option("--train-fraction", synth.train_fraction)->capture_default_str();
  s->add_option("--seed", synth.gen.seed)->capture_default_str();

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train one architecture on a dataset split")->configurable();
  t->add_option("--data", train.data, "Dataset directory");
  t->add_option("--split", train.split, "Split tag to train on ('' = all)")->capture_default_str();
  t->add_option("--out", train.out, "Run directory");
  t->add_option("--arch", train.arch,
                "full | acoustic-only | text-only | self-attn-acoustic | self-attn-text | concat")
      ->capture_default_str();
  t->add_option("--d-q", train.model.d_q)->capture_default_str();
  t->add_option("--d-v", train.model.d_v)->capture_default_str();
  t->add_option("--d-b", train.model.d_b)->capture_default_str();
  t->add_option("--fcn-hidden", train.model.fcn_hidden)->capture_default_str();
  t->add_option("--beta", train.model.beta)->capture_default_str();
  t->add_option("--lr", train.train.learning_rate)->capture_default_str();
  t->add_option("--batch-size", train.train.batch_size)->capture_default_str();
  t->add_option("--epochs", train.train.epochs)->capture_default_str();
  t->add_option("--max-seq-len", train.max_seq_len, "Chunk longer recordings (0 = off)")
      ->capture_default_str();
  t->add_option("--seed", train.train.seed, "Shuffling seed")->capture_default_str();
  t->add_option("--init-seed", train.model.seed, "Weight initialization seed")->capture_default_str();
  t->add_option("--threads", train.train.threads)->capture_default_str();

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Duration-weighted metrics of a checkpoint")->configurable();
  e->add_option("--checkpoint", eval.checkpoint);
  e->add_option("--data", eval.data);
  e->add_option("--split", eval.split)->capture_default_str();
  e->add_flag("--pooled", eval.pooled, "Pool segments across recordings instead of macro-averaging");
  e->add_option("--threads", eval.threads)->capture_default_str();
  e->add_option("--out", eval.out, "Also write the report to this file");

  PredictArgs pred;
  auto* p = app.add_subcommand("predict", "Label one recording and emit its timeline")->configurable();
  p->add_option("--checkpoint", pred.checkpoint);
  p->add_option("--input", pred.input, "Recording JSON file");
  p->add_option("--out", pred.out, "Timeline JSON path (default: stdout)");

  GradcheckArgs gc;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference check of every architecture")
                ->configurable();
  g->add_option("--seed", gc.seed)->capture_default_str();
  g->add_option("--segments", gc.segments)->capture_default_str();
  g->add_option("--tol", gc.tol)->capture_default_str();
  g->add_option("--fd-step", gc.h, "Central-difference step")->capture_default_str();
  g->add_option("--arch", gc.arch, "Check only this architecture");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return kUsage;
  }

  if (dump_config) {
    // One section per subcommand, loadable again through --config.
    for (const CLI::App* sub : app.get_subcommands())
      std::cout << "[" << sub->get_name() << "]\n" << sub->config_to_str(true, false);
    return kOk;
  }

  try {
    if (*s) return run_synth(synth);
    if (*t) return run_train(train);
    if (*e) return run_eval(eval);
    if (*p) return run_predict(pred);
    if (*g) return run_gradcheck(gc);
  } catch (const NumericError& ex) {
    std::cerr << "numeric error: " << ex.what() << "\n";
    return kNumeric;
  } catch (const DataError& ex) {
    std::cerr << "data error: " << ex.what() << "\n";
    return kData;
  } catch (const DimensionError& ex) {
    std::cerr << "dimension error: " << ex.what() << "\n";
    return kData;
  } catch (const fs::filesystem_error& ex) {
    std::cerr << "file error: " << ex.what() << "\n";
    return kData;
  } catch (const ContractError& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
