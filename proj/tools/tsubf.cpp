// Command-line surface: synthetic data generation, toy training, sliding
// window evaluation, finite-difference gradient checking, and the lambda
// ablation harness. Exit codes: 0 success, 1 verification failure, 2
// usage/config error. Numeric outputs are CSV; timestamps go to a separate
// run.log so reruns produce byte-identical CSVs.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "CLI11.hpp"
#include "tsubf/gradcheck.hpp"
#include "tsubf/train.hpp"

using namespace tsubf;
namespace fs = std::filesystem;

namespace {

// Distinguishes failed verification (exit 1) from bad usage (exit 2).
class VerificationFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void log_line(const std::string& out_dir, const std::string& msg) {
  std::ofstream log(out_dir + "/run.log", std::ios::app);
  const auto now = std::chrono::system_clock::now();
  log << std::chrono::duration_cast<std::chrono::seconds>(
             now.time_since_epoch())
             .count()
      << " " << msg << "\n";
}

void write_resolved_config(const std::string& out_dir,
                           const std::map<std::string, std::string>& extra,
                           const ModelConfig* model = nullptr) {
  fs::create_directories(out_dir);
  std::ofstream os(out_dir + "/resolved_config.txt");
  if (!os) throw IoError("cannot write " + out_dir + "/resolved_config.txt");
  for (const auto& [k, v] : extra) os << k << " " << v << "\n";
  if (model) write_model_config(os, *model);
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

// ---- synth ----

struct SynthArgs {
  int n = 20;
  std::string out;
  std::uint64_t seed = 7;
  std::vector<int> dims{64, 64, 64};
  std::vector<double> radii{14, 14, 14};
  double jitter = 0.25;
  double blur = 0;
  double noise = 30;
  std::vector<double> spacing{1, 1, 1};
};

int cmd_synth(const SynthArgs& a) {
  fs::create_directories(a.out);
  Rng jitter_rng(a.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> jit(1.0 - a.jitter, 1.0 + a.jitter);
  std::vector<ManifestEntry> entries;
  for (int i = 0; i < a.n; ++i) {
    SyntheticSpec spec;
    spec.dims = {a.dims[0], a.dims[1], a.dims[2]};
    spec.radii = {a.radii[0] * jit(jitter_rng), a.radii[1] * jit(jitter_rng),
                  a.radii[2] * jit(jitter_rng)};
    spec.blur_sigma = a.blur;
    spec.noise_sigma = a.noise;
    spec.spacing = {a.spacing[0], a.spacing[1], a.spacing[2]};
    auto sample = make_synthetic(spec, a.seed + static_cast<std::uint64_t>(i));
    char name[32];
    std::snprintf(name, sizeof(name), "case%03d", i);
    write_sample(a.out + "/" + name, sample);
    entries.push_back({name, ""});
  }
  // split: floor(0.1 n) validation, floor(0.2 n) test, remainder train
  const int n_val = a.n / 10, n_test = a.n / 5;
  const int n_train = a.n - n_val - n_test;
  for (int i = 0; i < a.n; ++i)
    entries[static_cast<size_t>(i)].split =
        i < n_train ? "train" : (i < n_train + n_val ? "val" : "test");
  write_manifest(a.out + "/manifest.txt", entries);
  if (a.n == 0)
    std::cerr << "warning: n=0, wrote an empty manifest\n";
  write_resolved_config(
      a.out, {{"command", "synth"},
              {"n", std::to_string(a.n)},
              {"seed", std::to_string(a.seed)},
              {"dims", std::to_string(a.dims[0]) + " " +
                           std::to_string(a.dims[1]) + " " +
                           std::to_string(a.dims[2])},
              {"radii", fmt(a.radii[0]) + " " + fmt(a.radii[1]) + " " +
                            fmt(a.radii[2])},
              {"jitter", fmt(a.jitter)},
              {"blur", fmt(a.blur)},
              {"noise", fmt(a.noise)}});
  log_line(a.out, "synth wrote " + std::to_string(a.n) + " samples");
  std::cout << "wrote " << a.n << " samples to " << a.out << " ("
            << n_train << " train / " << n_val << " val / " << n_test
            << " test)\n";
  return 0;
}

// ---- shared dataset loading ----

std::vector<VolumeSample> load_split(const std::string& data_dir,
                                     const std::string& split,
                                     bool normalize = true) {
  std::vector<VolumeSample> out;
  for (const auto& e : read_manifest(data_dir + "/manifest.txt")) {
    if (e.split != split) continue;
    auto s = read_sample(data_dir + "/" + e.name);
    out.push_back(normalize && s.units == Units::hounsfield ? normalize_hu(s)
                                                            : s);
  }
  return out;
}

// ---- train ----

struct TrainArgs {
  std::string data, out, resume;
  ModelConfig model;
  TrainConfig train;
  double lambda = 0.1;
};

int cmd_train(const TrainArgs& a) {
  a.model.validate();
  fs::create_directories(a.out);
  auto train_set = load_split(a.data, "train");
  auto val_set = load_split(a.data, "val");
  if (train_set.empty()) throw UsageError("train: no 'train' split samples");
  LossConfig lc;
  lc.lambda = a.lambda;
  TsubfNet<float> net(a.model);
  Trainer<float> trainer(net, a.train, lc);
  if (!a.resume.empty()) trainer.load_state(a.resume);
  write_resolved_config(a.out,
                        {{"command", "train"},
                         {"data", a.data},
                         {"steps", std::to_string(a.train.max_steps)},
                         {"val_interval", std::to_string(a.train.val_interval)},
                         {"train_seed", std::to_string(a.train.seed)},
                         {"lr", fmt(a.train.adam.lr)},
                         {"weight_decay", fmt(a.train.adam.weight_decay)},
                         {"lambda", fmt(a.lambda)}},
                        &a.model);
  log_line(a.out, "train start");
  auto rows = trainer.run(train_set, val_set, a.out);
  std::ofstream csv(a.out + "/loss.csv");
  write_train_csv(csv, rows);
  log_line(a.out, "train done, " + std::to_string(rows.size()) + " steps");
  std::cout << "trained " << trainer.step_count() << " steps, best val DSC "
            << trainer.best_val_dsc() << "\n";
  return 0;
}

// ---- eval ----

struct EvalArgs {
  std::string checkpoint, data, out, split = "test";
  bool oracle = false;
};

int cmd_eval(const EvalArgs& a) {
  fs::create_directories(a.out);
  auto net = load_checkpoint<float>(a.checkpoint);
  const int l = net.config().num_classes;
  write_resolved_config(a.out,
                        {{"command", "eval"},
                         {"checkpoint", a.checkpoint},
                         {"data", a.data},
                         {"split", a.split},
                         {"oracle", a.oracle ? "1" : "0"}},
                        &net.config());
  std::vector<std::pair<LabelVolume, LabelVolume>> pairs;
  std::vector<std::string> ids;
  std::vector<std::string> error_rows;
  for (const auto& e : read_manifest(a.data + "/manifest.txt")) {
    if (e.split != a.split) continue;
    try {
      auto s = read_sample(a.data + "/" + e.name);
      if (!s.label)
        throw IoError("sample '" + e.name + "' has no label volume");
      if (s.units == Units::hounsfield) s = normalize_hu(s);
      Tensor<float> img({1, s.image.dim(0), s.image.dim(1), s.image.dim(2)});
      for (long long i = 0; i < s.image.size(); ++i)
        img.data()[i] = s.image.data()[i];
      LabelVolume y{s.label->clone(), s.spacing};
      y.validate(l);
      LabelVolume p{argmax_labels(sliding_window_infer(net, img)), s.spacing};
      pairs.emplace_back(std::move(y), std::move(p));
      ids.push_back(e.name);
    } catch (const std::exception& ex) {
      error_rows.push_back(e.name + ",error,,,,,");
      log_line(a.out, "eval error on " + e.name + ": " + ex.what());
    }
  }
  auto report = evaluate_volumes(pairs, l, ids);
  if (a.oracle) {
    Hd95Options ap;
    ap.all_pairs = true;
    for (size_t i = 0; i < pairs.size(); ++i) {
      const auto& [y, p] = pairs[i];
      if (y.labels.dim(0) > 32 || y.labels.dim(1) > 32 ||
          y.labels.dim(2) > 32)
        continue;
      for (int c = 1; c < l; ++c) {
        const auto& fast =
            report.volumes[i].per_class[static_cast<size_t>(c - 1)];
        if (hd95(y, p, c, ap).value != fast.hd95 || dsc(y, p, c) != fast.dsc ||
            iou(y, p, c) != fast.iou)
          throw VerificationFailure("oracle disagreement on '" + ids[i] +
                                    "' class " + std::to_string(c));
      }
    }
  }
  {
    std::ofstream csv(a.out + "/report.csv");
    csv.precision(17);
    write_report_csv(csv, report);
    for (const auto& r : error_rows) csv << r << "\n";
    std::ofstream summary(a.out + "/summary.txt");
    write_report_summary(summary, report);
  }
  std::cout << "evaluated " << report.volumes.size() << " volumes, mean DSC "
            << report.aggregate.mean_dsc << ", mean HD95 "
            << report.aggregate.mean_hd95 << "\n";
  if (!error_rows.empty())
    throw VerificationFailure(std::to_string(error_rows.size()) +
                              " volume(s) failed evaluation; see report.csv");
  return 0;
}

// ---- gradcheck ----

struct GradcheckArgs {
  std::vector<std::string> blocks{"tsp", "bscf", "losses", "network"};
  std::uint64_t seed = 7;
  bool inject_error = false;  // test hook: corrupt the tracked pass
};

// The analytic pass tracks leaves on the tape; finite-difference passes do
// not. The injection hook exploits that to emulate a wrong-gradient bug.
GradCheckFn maybe_corrupt(GradCheckFn f, bool inject) {
  if (!inject) return f;
  return [f](Tape<double>& tape, std::vector<Tensor<double>>& ls) {
    auto loss = f(tape, ls);
    if (ls[0].tracked()) loss = add(loss, mul_scalar(sum(ls[0]), 1e-2));
    return loss;
  };
}

double gradcheck_block(const std::string& block, std::uint64_t seed,
                       bool inject) {
  Rng rng(seed);
  if (block == "tsp") {
    TspParams<double> p(8, rng);
    auto w = random_uniform<double>({8, 4, 4, 4}, rng);
    auto f = maybe_corrupt(
        [&p, w](Tape<double>&, std::vector<Tensor<double>>& v) {
          return sum(mul(p.forward(v[0]), w));
        },
        inject);
    return check_gradients(f, {random_uniform<double>({8, 4, 4, 4}, rng)},
                           1e-5, 120, seed)
        .max_rel_err;
  }
  if (block == "bscf") {
    BscfParams<double> p(8, rng);
    auto w = random_uniform<double>({8, 4, 4, 4}, rng);
    auto f = maybe_corrupt(
        [&p, w](Tape<double>&, std::vector<Tensor<double>>& v) {
          return sum(mul(p.forward(v[0], v[1]), w));
        },
        inject);
    return check_gradients(f,
                           {random_uniform<double>({8, 4, 4, 4}, rng),
                            random_uniform<double>({8, 4, 4, 4}, rng)},
                           1e-5, 100, seed)
        .max_rel_err;
  }
  if (block == "losses") {
    Tensor<double> y({2, 6, 6, 6});
    for (int v = 0; v < 216; ++v)
      y.data()[(rng() % 2) * 216 + v] = 1.0;
    LossConfig lc;
    lc.lambda = 0.1;
    auto f = maybe_corrupt(
        [y, lc](Tape<double>&, std::vector<Tensor<double>>& v) {
          return total_loss(y, v[0], lc);
        },
        inject);
    return check_gradients(
               f, {random_uniform<double>({2, 6, 6, 6}, rng, 0.05, 0.95)},
               1e-5, 200, seed)
        .max_rel_err;
  }
  if (block == "network") {
    ModelConfig cfg;
    cfg.schedule = {4, 8, 16, 32};
    cfg.patch = {64, 64, 64};
    cfg.seed = seed;
    TsubfNet<double> net(cfg);
    auto x = random_uniform<double>({1, 64, 64, 64}, rng, 0.0, 1.0);
    Tensor<double> y({2, 64, 64, 64});
    const long long vox = 64LL * 64 * 64;
    for (long long v = 0; v < vox; ++v) y.data()[(rng() % 2) * vox + v] = 1.0;
    LossConfig lc;
    lc.lambda = 0.1;
    Tape<double> tape;
    net.watch_params(tape);
    auto loss = total_loss(y, net.forward(x), lc);
    tape.backward(loss);
    auto params = net.collect();
    std::vector<std::string> picks = {"embed.conv_a.kernel",
                                      "enc1.tsp.q_s.weight",
                                      "bscf1.conv3_s.kernel",
                                      "head_conv.kernel"};
    const double h = 1e-7;  // small step keeps rectifier-kink noise down
    double worst = 0;
    for (const auto& want : picks) {
      ParamRef<double>* p = nullptr;
      for (auto& cand : params)
        if (cand.name == want) p = &cand;
      if (!p) throw UsageError("gradcheck: unknown parameter " + want);
      auto g = tape.grad_or_zero(*p->tensor);
      const long long idx = static_cast<long long>(
          rng() % static_cast<std::uint64_t>(p->tensor->size()));
      const double saved = p->tensor->data()[idx];
      auto fd_at = [&](double step) {
        p->tensor->data()[idx] = saved + step;
        const double up = total_loss(y, net.forward(x), lc).item();
        p->tensor->data()[idx] = saved - step;
        const double down = total_loss(y, net.forward(x), lc).item();
        p->tensor->data()[idx] = saved;
        return (up - down) / (2 * step);
      };
      const double fd = fd_at(h);
      // rectifier kinks inside the difference step leave noise that varies
      // with the step size, while a genuine gradient bug does not, so the
      // cross-step spread calibrates a per-coordinate noise floor
      const double noise = std::fabs(fd - fd_at(10 * h));
      double an = g.data()[idx];
      if (inject) an += 1e-2;
      const double err = std::fabs(an - fd);
      const double rel = err / std::max(std::fabs(an), std::fabs(fd));
      if (err >= 1e-6 + 3 * noise) worst = std::max(worst, rel);
    }
    return worst;
  }
  throw UsageError("gradcheck: unknown block '" + block +
                   "' (valid: tsp, bscf, losses, network)");
}

int cmd_gradcheck(const GradcheckArgs& a) {
  bool ok = true;
  for (const auto& block : a.blocks) {
    const double tol = block == "network" ? 1e-5 : 1e-6;
    const double err = gradcheck_block(block, a.seed, a.inject_error);
    const bool pass = err < tol;
    ok = ok && pass;
    std::cout << block << ": max rel err " << err << " (tolerance " << tol
              << ") " << (pass ? "PASS" : "FAIL") << "\n";
  }
  if (!ok) throw VerificationFailure("gradient check failed");
  return 0;
}

// ---- ablate ----

struct AblateArgs {
  std::string data, out;
  std::vector<double> lambdas{0.0, 0.1, 0.5, 1.0};
  ModelConfig model;
  TrainConfig train;
};

int cmd_ablate(const AblateArgs& a) {
  a.model.validate();
  fs::create_directories(a.out);
  auto train_set = load_split(a.data, "train");
  auto val_set = load_split(a.data, "val");
  if (train_set.empty() || val_set.empty())
    throw UsageError("ablate: need non-empty train and val splits");
  write_resolved_config(a.out,
                        {{"command", "ablate"},
                         {"data", a.data},
                         {"steps", std::to_string(a.train.max_steps)},
                         {"train_seed", std::to_string(a.train.seed)}},
                        &a.model);
  const int l = a.model.num_classes;
  std::ofstream csv(a.out + "/ablation.csv");
  csv.precision(17);
  csv << "lambda,dsc,hd95,smoothness\n";
  std::cout << "lambda,dsc,hd95,smoothness\n";
  for (double lambda : a.lambdas) {
    TsubfNet<float> net(a.model);  // same init seed for every lambda
    LossConfig lc;
    lc.lambda = lambda;
    Trainer<float> trainer(net, a.train, lc);
    trainer.run(train_set, val_set);
    double mean_dsc = 0, mean_hd95 = 0, mean_smooth = 0;
    for (const auto& s : val_set) {
      Tensor<float> img({1, s.image.dim(0), s.image.dim(1), s.image.dim(2)});
      for (long long i = 0; i < s.image.size(); ++i)
        img.data()[i] = s.image.data()[i];
      LabelVolume y{s.label->clone(), s.spacing};
      LabelVolume p{argmax_labels(sliding_window_infer(net, img)), s.spacing};
      double d = 0, h = 0;
      for (int c = 1; c < l; ++c) {
        d += dsc(y, p, c);
        h += hd95(y, p, c).value;
      }
      mean_dsc += d / (l - 1);
      mean_hd95 += h / (l - 1);
      mean_smooth += smoothness_score(one_hot_volume(p, l));
    }
    const double n = static_cast<double>(val_set.size());
    mean_dsc /= n;
    mean_hd95 /= n;
    mean_smooth /= n;
    csv << lambda << "," << mean_dsc << "," << mean_hd95 << ","
        << mean_smooth << "\n";
    std::cout << lambda << "," << mean_dsc << "," << mean_hd95 << ","
              << mean_smooth << "\n";
  }
  log_line(a.out, "ablate done over " + std::to_string(a.lambdas.size()) +
                      " lambda values");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"volumetric segmentation toolkit"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  synth->add_option("--n", sa.n, "number of volumes");
  synth->add_option("--out", sa.out, "output directory")->required();
  synth->add_option("--seed", sa.seed, "generator seed");
  synth->add_option("--dims", sa.dims, "volume extents")->expected(3);
  synth->add_option("--radii", sa.radii, "ellipsoid radii")->expected(3);
  synth->add_option("--jitter", sa.jitter, "radius jitter fraction");
  synth->add_option("--blur", sa.blur, "boundary blur sigma");
  synth->add_option("--noise", sa.noise, "intensity noise sigma (HU)");
  synth->add_option("--spacing", sa.spacing, "voxel spacing (mm)")->expected(3);

  auto add_model_flags = [](CLI::App* cmd, ModelConfig& m) {
    cmd->add_option("--schedule", m.schedule, "channel schedule");
    cmd->add_option("--patch", m.patch, "patch size")->expected(3);
    cmd->add_option("--classes", m.num_classes, "number of classes");
    cmd->add_option("--model-seed", m.seed, "weight init seed");
    cmd->add_flag("--no-decoder-tsp{false}", m.decoder_tsp,
                  "disable decoder attention blocks");
  };
  auto add_train_flags = [](CLI::App* cmd, TrainConfig& t) {
    cmd->add_option("--steps", t.max_steps, "maximum training steps");
    cmd->add_option("--val-interval", t.val_interval, "validation interval");
    cmd->add_option("--early-stop-dsc", t.early_stop_dsc,
                    "stop once validation DSC reaches this");
    cmd->add_option("--train-seed", t.seed, "training seed");
    cmd->add_option("--lr", t.adam.lr, "learning rate");
    cmd->add_option("--weight-decay", t.adam.weight_decay, "L2 weight decay");
  };

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train on a dataset");
  train->add_option("--data", ta.data, "dataset directory")->required();
  train->add_option("--out", ta.out, "output directory")->required();
  train->add_option("--resume", ta.resume, "state directory to resume from");
  train->add_option("--lambda", ta.lambda, "smoothness weight");
  add_model_flags(train, ta.model);
  add_train_flags(train, ta.train);

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", ea.checkpoint, "checkpoint directory")
      ->required();
  eval->add_option("--data", ea.data, "dataset directory")->required();
  eval->add_option("--out", ea.out, "output directory")->required();
  eval->add_option("--split", ea.split, "manifest split to evaluate");
  eval->add_flag("--oracle", ea.oracle,
                 "re-verify metrics with brute-force oracles (volumes <= 32^3)");

  GradcheckArgs ga;
  auto* gradcheck =
      app.add_subcommand("gradcheck", "finite-difference gradient checks");
  gradcheck->add_option("--block", ga.blocks,
                        "blocks to check (tsp, bscf, losses, network)");
  gradcheck->add_option("--seed", ga.seed, "probe seed");
  gradcheck->add_flag("--inject-gradient-error", ga.inject_error,
                      "test hook: corrupt the analytic pass; must fail");

  AblateArgs aa;
  auto* ablate = app.add_subcommand("ablate", "lambda ablation study");
  ablate->add_option("--data", aa.data, "dataset directory")->required();
  ablate->add_option("--out", aa.out, "output directory")->required();
  ablate->add_option("--lambdas", aa.lambdas, "lambda grid");
  add_model_flags(ablate, aa.model);
  add_train_flags(ablate, aa.train);
  aa.train.max_steps = 120;

  try {
    app.parse(argc, argv);
    if (synth->parsed()) return cmd_synth(sa);
    if (train->parsed()) return cmd_train(ta);
    if (eval->parsed()) return cmd_eval(ea);
    if (gradcheck->parsed()) return cmd_gradcheck(ga);
    if (ablate->parsed()) return cmd_ablate(aa);
    return 2;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const VerificationFailure& e) {
    std::cerr << "verification failure: " << e.what() << "\n";
    return 1;
  } catch (const DomainError& e) {
    std::cerr << "verification failure: " << e.what() << "\n";
    return 1;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
