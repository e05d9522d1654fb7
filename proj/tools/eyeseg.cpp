// eyeseg: synthetic data, training, inference, filtering and scoring for the
// eye-segmentation network.
//
// Exit codes: 0 success, 2 usage error or missing input, 3 runtime/data error.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <regex>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "eyeseg/dataset.hpp"
#include "eyeseg/filter.hpp"
#include "eyeseg/gradcheck.hpp"
#include "eyeseg/metrics.hpp"
#include "eyeseg/model.hpp"
#include "eyeseg/training.hpp"
#include "eyeseg/weights_io.hpp"

namespace fs = std::filesystem;
using namespace eyeseg;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 2;
constexpr int kRuntime = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::pair<std::size_t, std::size_t> parse_dims(const std::string& s) {
  static const std::regex re(R"((\d+)[xX](\d+))");
  std::smatch m;
  if (!std::regex_match(s, m, re)) throw UsageError("--dims must look like HxW, got '" + s + "'");
  const std::size_t h = std::stoul(m[1]), w = std::stoul(m[2]);
  if (h == 0 || w == 0) throw UsageError("--dims must be positive");
  return {h, w};
}

std::string fixed(double v, int decimals) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(decimals) << v;
  return os.str();
}

Split split_or_usage(const std::string& s) {
  try {
    return parse_split(s);
  } catch (const FormatError& e) {
    throw UsageError(e.what());
  }
}

std::vector<ManifestEntry> selected_entries(const Manifest& m, const std::string& split) {
  if (split == "all") return m.entries;
  return m.split(split_or_usage(split));
}

void write_json(const fs::path& p, const nlohmann::json& j) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + p.string() + " for writing");
  out << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::size_t n = 20;
  std::string dims = "640x400";
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_synth(const SynthArgs& a) {
  const auto [h, w] = parse_dims(a.dims);
  const Manifest m = synth_dataset(a.n, h, w, a.seed, a.out);
  std::cout << (fs::path(a.out) / "manifest.jsonl").string() << '\n';
  const auto sizes = split_sizes(a.n);
  std::cout << m.entries.size() << " samples (train " << sizes[0] << ", val " << sizes[1] << ", test " << sizes[2]
            << ")\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string manifest;
  std::string out;
  std::string variant;
  std::optional<std::size_t> epochs, batch_size, swa_start;
  std::optional<std::uint64_t> seed;
  bool no_augment = false;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
  TrainConfig tc;
  Variant variant = Variant::N3;
  if (!a.config.empty()) {
    std::ifstream in(a.config);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
      tc = j.get<TrainConfig>();
    } catch (const nlohmann::json::exception& e) {
      throw UsageError(a.config + ": " + e.what());
    }
    if (j.contains("variant")) variant = parse_variant(j["variant"].get<std::string>());
  }
  if (!a.variant.empty()) variant = parse_variant(a.variant);
  if (a.epochs) tc.epochs = *a.epochs;
  if (a.batch_size) tc.batch_size = *a.batch_size;
  if (a.swa_start) tc.swa_start_epoch = *a.swa_start;
  if (a.seed) tc.seed = *a.seed;
  if (a.no_augment) tc.augment = false;
  try {
    tc.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  const Manifest m = load_manifest(a.manifest);
  Dataset data{load_split(m, Split::train), load_split(m, Split::val)};
  if (data.train.empty() || data.val.empty()) {
    throw FormatError(a.manifest + ": manifest needs at least one train and one val sample");
  }
  const std::size_t h = data.train.front().image.height, w = data.train.front().image.width;
  const ModelConfig cfg = ModelConfig::for_variant(variant, h, w);
  const std::size_t T = param_count(build(cfg, tc.seed));
  std::cout << "T=" << T << ", S=" << fixed(size_score(T), 4) << '\n';
  std::cout << to_string(variant) << " at " << h << "x" << w << ", " << data.train.size() << " train / "
            << data.val.size() << " val samples, " << tc.epochs << " epochs" << std::endl;

  const fs::path out(a.out);
  fs::create_directories(out);
  nlohmann::json effective = tc;
  effective["variant"] = to_string(variant);
  write_json(out / "config.json", effective);
  std::ofstream history(out / "history.jsonl", std::ios::trunc);
  const TrainResult r = train(cfg, tc, data, [&](const EpochRecord& rec) {
    history << to_json(rec).dump() << '\n';
    history.flush();
    if (!a.quiet) {
      std::cout << "epoch " << rec.epoch << "/" << tc.epochs << " lr=" << std::scientific << std::setprecision(4)
                << rec.lr << std::defaultfloat << " train=" << fixed(rec.train_loss, 5)
                << " val=" << fixed(rec.val_loss, 5) << (rec.swa_active ? " swa" : "") << std::endl;
    }
  });
  save_weights(r.final_params, out / "final.eyew");
  save_weights(r.best_params, out / "best.eyew");
  save_weights(r.swa_params, out / "swa.eyew");
  std::cout << "final train GDL=" << fixed(r.history.back().train_loss, 5) << " best val GDL="
            << fixed(r.best_val_loss, 5) << " (epoch " << r.best_epoch << "), SWA snapshots=" << r.swa.count << '\n';
  std::cout << "wrote " << (out / "final.eyew").string() << ", best.eyew, swa.eyew, history.jsonl\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct InferArgs {
  std::string weights;
  std::string manifest;
  std::string image;
  std::string split = "all";
  std::string out;
  bool filter = false;
};

struct Loaded {
  ParameterStore params;
  Variant variant;
};

Loaded load_model(const std::string& path) {
  ParameterStore p = load_weights(path);
  const Variant v = infer_variant(p);
  validate_store(ModelConfig::for_variant(v), p);
  return {std::move(p), v};
}

// input | raw prediction | filtered prediction, labels scaled to gray levels.
void save_triptych(const GrayImage& img, const Mask& raw, const Mask& filtered, const fs::path& p) {
  const std::size_t H = img.height, W = img.width;
  PgmData t{H, 3 * W, 255, std::vector<std::uint8_t>(H * 3 * W)};
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      t.values[r * 3 * W + c] = static_cast<std::uint8_t>(std::lround(std::clamp(img.at(r, c), 0.0, 1.0) * 255.0));
      t.values[r * 3 * W + W + c] = static_cast<std::uint8_t>(raw.at(r, c) * kVisualLabelScale);
      t.values[r * 3 * W + 2 * W + c] = static_cast<std::uint8_t>(filtered.at(r, c) * kVisualLabelScale);
    }
  write_pgm(p, t);
}

int cmd_infer(const InferArgs& a) {
  if (a.manifest.empty() == a.image.empty()) throw UsageError("infer needs exactly one of --manifest or --image");
  const Loaded model = load_model(a.weights);
  std::vector<Sample> samples;
  if (!a.image.empty()) {
    GrayImage img = load_image(a.image);
    samples.push_back({fs::path(a.image).stem().string(), std::move(img), {}});
  } else {
    const Manifest m = load_manifest(a.manifest);
    for (const auto& e : selected_entries(m, a.split)) samples.push_back({e.id, load_image(m.image_file(e)), {}});
  }
  if (samples.empty()) throw FormatError("no images selected for inference");

  const fs::path out(a.out);
  fs::create_directories(out / "pred");
  fs::create_directories(out / "triptych");
  if (a.filter) fs::create_directories(out / "filtered");
  std::cout << to_string(model.variant) << ", T=" << param_count(model.params) << '\n';
  double total_ms = 0.0;
  NoGradGuard no_grad;
  for (const auto& s : samples) {
    const ModelConfig cfg = ModelConfig::for_variant(model.variant, s.image.height, s.image.width);
    const EyeNet net(cfg, model.params);
    const auto t0 = std::chrono::steady_clock::now();
    const Mask raw = predict_mask(net.forward(make_batch({&s.image}), BnMode::eval));
    const Mask filtered = filter_mask(raw);
    total_ms += std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    save_mask(raw, out / "pred" / (s.id + ".pgm"));
    if (a.filter) save_mask(filtered, out / "filtered" / (s.id + ".pgm"));
    save_triptych(s.image, raw, filtered, out / "triptych" / (s.id + ".pgm"));
  }
  std::cout << samples.size() << " images, " << fixed(total_ms / static_cast<double>(samples.size()), 2)
            << " ms/image (forward + filter)\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct FilterArgs {
  std::string in;
  std::string out;
  bool visual = false;
};

int cmd_filter(const FilterArgs& a) {
  auto one = [&](const fs::path& src, const fs::path& dst) {
    const Mask f = filter_mask(load_mask(src));
    if (a.visual) {
      save_mask_visual(f, dst);
    } else {
      save_mask(f, dst);
    }
  };
  if (fs::is_directory(a.in)) {
    fs::create_directories(a.out);
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(a.in))
      if (e.is_regular_file() && e.path().extension() == ".pgm") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) one(f, fs::path(a.out) / f.filename());
    std::cout << files.size() << " masks filtered into " << a.out << '\n';
  } else {
    one(a.in, a.out);
    std::cout << a.out << '\n';
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string pred_dir;
  std::string manifest;
  std::string split = "test";
  std::optional<std::size_t> t;
  std::string weights;
  std::string out;
  std::string policy = "exclude";
};

void print_row(const EvalReport& r) {
  std::cout << "mIoU=" << fixed(r.miou, 4) << " T=" << r.param_count << " S=" << fixed(r.size_mb, 4)
            << " M=" << fixed(r.overall, 3) << " M_normalized=" << fixed(r.overall_normalized, 5) << '\n';
}

int cmd_eval(const EvalArgs& a) {
  if (a.t.has_value() == !a.weights.empty()) throw UsageError("eval needs exactly one of --t or --weights");
  AbsentClassPolicy policy;
  if (a.policy == "exclude") {
    policy = AbsentClassPolicy::exclude;
  } else if (a.policy == "one") {
    policy = AbsentClassPolicy::count_as_one;
  } else {
    throw UsageError("--policy must be 'exclude' or 'one'");
  }
  const std::size_t T = a.t ? *a.t : param_count(load_model(a.weights).params);
  const Manifest m = load_manifest(a.manifest);
  const auto entries = selected_entries(m, a.split);
  if (entries.empty()) throw FormatError("no samples in split '" + a.split + "'");
  std::vector<Mask> preds, gts;
  std::vector<std::string> ids;
  for (const auto& e : entries) {
    const fs::path p = fs::path(a.pred_dir) / (e.id + ".pgm");
    if (!fs::exists(p)) throw UsageError("missing prediction for sample " + e.id + ": " + p.string());
  }
  for (const auto& e : entries) {
    Mask pred = load_mask(fs::path(a.pred_dir) / (e.id + ".pgm"));
    Mask gt = load_mask(m.mask_file(e));
    if (pred.height != gt.height || pred.width != gt.width) {
      throw ShapeError("sample " + e.id + ": prediction is " + std::to_string(pred.height) + "x" +
                       std::to_string(pred.width) + ", ground truth is " + std::to_string(gt.height) + "x" +
                       std::to_string(gt.width));
    }
    preds.push_back(std::move(pred));
    gts.push_back(std::move(gt));
    ids.push_back(e.id);
  }
  const EvalReport r = evaluate(preds, gts, ids, T, policy);
  const fs::path out = a.out.empty() ? fs::path(a.pred_dir).parent_path() / "eval_report.json" : fs::path(a.out);
  write_json(out, to_json(r));
  print_row(r);
  std::cout << "report: " << out.string() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------

int cmd_summary(std::size_t T, double miou_value) {
  EvalReport r;
  r.miou = miou_value;
  r.param_count = T;
  r.size_mb = size_score(T);
  const auto m = overall_score(miou_value, r.size_mb);
  r.overall = m.raw;
  r.overall_normalized = m.normalized;
  print_row(r);
  if (T == 400000) {
    std::cout << "note: S=" << fixed(r.size_mb, 4) << " needs T=400000; M_normalized=" << fixed(m.normalized, 5)
              << " is commonly printed truncated as " << fixed(std::trunc(m.normalized * 1e4) / 1e4, 4)
              << ", and a T of 40000 would give S=" << fixed(size_score(40000), 4) << " instead\n";
  }
  return kOk;
}

int cmd_gradcheck(std::uint64_t seed, std::size_t seeds, double tolerance) {
  bool ok = true;
  for (std::uint64_t s = seed; s < seed + seeds; ++s) {
    std::cout << "seed " << s << '\n';
    for (const auto& r : gradcheck_suite(s)) {
      const bool pass = r.passed(tolerance);
      ok = ok && pass;
      std::cout << "  " << std::left << std::setw(28) << r.op << std::right << " max_rel_error=" << std::scientific
                << std::setprecision(3) << r.max_rel_error << std::defaultfloat << " probes=" << r.probes
                << " rejected=" << r.rejected << (pass ? "" : "  FAIL") << '\n';
    }
  }
  std::cout << (ok ? "all ops below " : "some ops at or above ") << tolerance << '\n';
  return ok ? kOk : kRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lightweight eye segmentation: synth, train, infer, filter, eval, summary, gradcheck"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic eye dataset with a manifest");
  synth->add_option("--n", sa.n, "Number of samples")->check(CLI::PositiveNumber);
  synth->add_option("--dims", sa.dims, "Image size HxW")->capture_default_str();
  synth->add_option("--seed", sa.seed, "Generator seed");
  synth->add_option("--out", sa.out, "Output directory")->required();

  TrainArgs ta;
  auto* trn = app.add_subcommand("train", "Train a model on the train split of a manifest");
  trn->add_option("--config", ta.config, "Training config JSON (flags override it)")->check(CLI::ExistingFile);
  trn->add_option("--manifest", ta.manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  trn->add_option("--out", ta.out, "Output directory")->required();
  trn->add_option("--variant", ta.variant, "N1, N2 or N3");
  trn->add_option("--epochs", ta.epochs, "Epoch count");
  trn->add_option("--batch-size", ta.batch_size, "Batch size");
  trn->add_option("--swa-start", ta.swa_start, "First epoch averaged by SWA");
  trn->add_option("--seed", ta.seed, "Seed for init, shuffling and augmentation");
  trn->add_flag("--no-augment", ta.no_augment, "Disable brightness augmentation");
  trn->add_flag("--quiet", ta.quiet, "Only print the summary lines");

  InferArgs ia;
  auto* inf = app.add_subcommand("infer", "Predict masks for a manifest split or a single image");
  inf->add_option("--weights", ia.weights, "EYEW weight file")->required()->check(CLI::ExistingFile);
  inf->add_option("--manifest", ia.manifest, "Dataset manifest")->check(CLI::ExistingFile);
  inf->add_option("--image", ia.image, "Single PGM image")->check(CLI::ExistingFile);
  inf->add_option("--split", ia.split, "train, val, test or all")->capture_default_str();
  inf->add_option("--out", ia.out, "Output directory")->required();
  inf->add_flag("--filter", ia.filter, "Also write connected-component filtered masks");

  FilterArgs fa;
  auto* flt = app.add_subcommand("filter", "Apply the connected-component filter to mask files");
  flt->add_option("--in", fa.in, "Mask PGM or directory of masks")->required()->check(CLI::ExistingPath);
  flt->add_option("--out", fa.out, "Output file or directory")->required();
  flt->add_flag("--visual", fa.visual, "Write labels scaled by 85");

  EvalArgs ea;
  auto* evl = app.add_subcommand("eval", "Score predicted masks against a manifest");
  evl->add_option("--pred-dir", ea.pred_dir, "Directory of <id>.pgm predictions")
      ->required()
      ->check(CLI::ExistingDirectory);
  evl->add_option("--manifest", ea.manifest, "Ground-truth manifest")->required()->check(CLI::ExistingFile);
  evl->add_option("--split", ea.split, "train, val, test or all")->capture_default_str();
  evl->add_option("--t", ea.t, "Trainable parameter count");
  evl->add_option("--weights", ea.weights, "Take the parameter count from a weight file")
      ->check(CLI::ExistingFile);
  evl->add_option("--out", ea.out, "Report path (default: eval_report.json next to --pred-dir)");
  evl->add_option("--policy", ea.policy, "Absent classes: exclude or one")->capture_default_str();

  std::size_t sum_t = 0;
  double sum_miou = 0;
  auto* sum = app.add_subcommand("summary", "Print S, M and M_normalized for a parameter count and mIoU");
  sum->add_option("--t", sum_t, "Trainable parameter count")->required();
  sum->add_option("--miou", sum_miou, "Mean IoU")->required()->check(CLI::Range(0.0, 1.0));

  std::uint64_t gc_seed = 0;
  std::size_t gc_seeds = 1;
  double gc_tol = 1e-4;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every op and the network");
  gc->add_option("--seed", gc_seed, "First seed");
  gc->add_option("--seeds", gc_seeds, "Number of consecutive seeds")->check(CLI::PositiveNumber);
  gc->add_option("--tolerance", gc_tol, "Maximum relative error")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    if (*synth) return cmd_synth(sa);
    if (*trn) return cmd_train(ta);
    if (*inf) return cmd_infer(ia);
    if (*flt) return cmd_filter(fa);
    if (*evl) return cmd_eval(ea);
    if (*sum) return cmd_summary(sum_t, sum_miou);
    if (*gc) return cmd_gradcheck(gc_seed, gc_seeds, gc_tol);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const TrainingDiverged& e) {
    std::cerr << "training diverged: " << e.what() << '\n';
    return kRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kUsage;
}
