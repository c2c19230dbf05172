#pragma once

#include <CLI11.hpp>

#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "nfres/checkpoint.hpp"
#include "nfres/data.hpp"
#include "nfres/error.hpp"
#include "nfres/gradcheck_suite.hpp"
#include "nfres/manifest.hpp"
#include "nfres/resnet.hpp"
#include "nfres/sigprop.hpp"
#include "nfres/train.hpp"

namespace nfres::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

struct SppOptions {
  std::string arch = "resnet50";
  std::string variant = "idshort";
  std::string init = "fanout";
  std::size_t batch = 64;
  std::uint64_t seed = 0;
  std::string backward = "inject";
  std::string out;
};

struct TrainOptions {
  std::string data;
  std::size_t synthetic = 0;  // > 0: generated stand-in records per split instead of --data
  std::string arch = "resnet18";
  std::string variant = "idshort";
  std::string init = "fanout";
  std::size_t epochs = 1;
  std::size_t batch = 128;
  double lr = 0.01;
  double momentum = 0.9;
  double label_smoothing = 0.0;
  bool no_augment = false;
  bool per_step_cosine = false;
  std::uint64_t seed = 0;
  std::size_t train_size = 0;
  std::size_t test_size = 0;
  std::string out;
};

struct GradcheckOptions {
  int precision = 64;
  std::size_t instances = 20;
  std::uint64_t seed = 0;
  std::string inject_fault;
};

struct ParamsOptions {
  std::string arch = "resnet18";
  std::string variant;  // empty: every variant
  std::size_t resolution = 32;
  bool csv = false;
};

inline std::vector<std::string> variant_names() {
  std::vector<std::string> v;
  for (Variant x : kAllVariants) v.emplace_back(to_string(x));
  return v;
}

inline RunManifest spp_manifest(const SppOptions& o) {
  RunManifest m;
  m.command = "spp";
  m.master_seed = o.seed;
  m.flags = {{"arch", o.arch},   {"variant", o.variant},          {"init", o.init},
             {"batch", std::to_string(o.batch)}, {"seed", std::to_string(o.seed)},
             {"backward", o.backward}, {"out", o.out}};
  return m;
}

inline int cmd_spp(const SppOptions& o, std::ostream& out) {
  if (o.batch < 2) throw InvalidArgument("--batch must be >= 2");
  SppConfig cfg;
  cfg.arch = ArchDescription{parse_depth(o.arch), parse_variant(o.variant), parse_init(o.init), o.seed, 10};
  cfg.batch_size = o.batch;
  cfg.seed = o.seed;
  cfg.mode = parse_backward_mode(o.backward);
  const SppSeries series = spp_run<float>(cfg);
  const RunManifest m = spp_manifest(o);
  spp_to_csv(series, o.out, &m);
  out << "wrote " << series.records.size() << " blocks to " << o.out << '\n';
  return kExitOk;
}

inline RunManifest train_manifest(const TrainOptions& o) {
  RunManifest m;
  m.command = "train";
  m.master_seed = o.seed;
  if (o.synthetic) {
    m.flags.emplace_back("synthetic", std::to_string(o.synthetic));
  } else {
    m.flags.emplace_back("data", o.data);
  }
  m.flags.insert(m.flags.end(), {{"arch", o.arch},
                                 {"variant", o.variant},
                                 {"init", o.init},
                                 {"epochs", std::to_string(o.epochs)},
                                 {"batch", std::to_string(o.batch)},
                                 {"lr", format_real(o.lr)},
                                 {"momentum", format_real(o.momentum)},
                                 {"label-smoothing", format_real(o.label_smoothing)},
                                 {"seed", std::to_string(o.seed)},
                                 {"train-size", std::to_string(o.train_size)},
                                 {"test-size", std::to_string(o.test_size)}});
  if (o.no_augment) m.flags.emplace_back("no-augment", "");
  if (o.per_step_cosine) m.flags.emplace_back("per-step-cosine", "");
  m.flags.emplace_back("out", o.out);
  return m;
}

inline std::pair<Dataset, Dataset> load_training_data(const TrainOptions& o) {
  if (o.synthetic) {
    RawImages train = synthetic_cifar(o.train_size ? std::min(o.train_size, o.synthetic) : o.synthetic, o.seed * 2 + 1);
    RawImages test = synthetic_cifar(o.test_size ? std::min(o.test_size, o.synthetic) : o.synthetic, o.seed * 2 + 2);
    const ChannelStats stats = channel_stats(train);
    return {make_dataset(train, stats, "train"), make_dataset(test, stats, "test")};
  }
  return load_cifar10(o.data, o.train_size, o.test_size);
}

/// Writes <out>/history.csv and <out>/checkpoint.bin. A diverged run keeps
/// the rows completed so far, closes the CSV with a `# diverged:` line and
/// returns a runtime failure.
inline int cmd_train(const TrainOptions& o, std::ostream& out, std::ostream& err) {
  if (o.data.empty() == (o.synthetic == 0)) throw InvalidArgument("exactly one of --data and --synthetic is required");
  TrainConfig cfg;
  cfg.lr_max = o.lr;
  cfg.momentum = o.momentum;
  cfg.batch_size = o.batch;
  cfg.epochs = o.epochs;
  cfg.label_smoothing = o.label_smoothing;
  cfg.augment = !o.no_augment;
  cfg.per_step_cosine = o.per_step_cosine;
  cfg.seed = o.seed;
  TrainConfig checked = cfg;
  checked.epochs = std::max<std::size_t>(1, cfg.epochs);  // 0 means evaluation only
  checked.validate();
  const ArchDescription arch{parse_depth(o.arch), parse_variant(o.variant), parse_init(o.init), o.seed, 10};

  auto [train_set, test_set] = load_training_data(o);
  std::filesystem::create_directories(o.out);
  const std::filesystem::path csv_path = std::filesystem::path(o.out) / "history.csv";
  const RunManifest manifest = train_manifest(o);

  Network<float> net = build_resnet<float>(arch);
  out << arch_manifest(arch) << ": " << count_params(net) << " parameters, " << train_set.size() << " train / "
      << test_set.size() << " test examples\n";
  TrainHistory partial;
  auto log = [&](const EpochRecord& r) {
    partial.epochs.push_back(r);
    out << "epoch " << r.epoch << " lr " << format_real(r.lr) << " train_loss " << format_real(r.train_loss)
        << " train_acc " << format_real(r.train_acc) << " test_acc " << format_real(r.test_acc) << std::endl;
  };
  auto write_history = [&](const std::string& trailer) {
    std::ofstream os(csv_path, std::ios::binary);
    if (!os) throw FormatError("cannot open '" + csv_path.string() + "' for writing");
    history_write_csv(partial, os, arch_manifest(arch), &manifest);
    if (!trailer.empty()) os << "# " << trailer << '\n';
  };
  if (cfg.epochs == 0) {
    EpochRecord r;
    r.lr = cfg.lr_max;
    const EvalResult tr = evaluate(net, train_set, cfg.eval_batch);
    r.train_loss = tr.loss;
    r.train_acc = tr.accuracy;
    r.test_acc = evaluate(net, test_set, cfg.eval_batch).accuracy;
    log(r);
  } else {
    try {
      train(net, train_set, test_set, cfg, log);
    } catch (const TrainingDiverged& e) {
      write_history(std::string("diverged: ") + e.what());
      err << "error: " << e.what() << '\n';
      return kExitRuntime;
    }
  }
  write_history("");
  save_checkpoint(net, std::filesystem::path(o.out) / "checkpoint.bin");
  out << "wrote " << csv_path.string() << '\n';
  return kExitOk;
}

inline int cmd_gradcheck(const GradcheckOptions& o, std::ostream& out, std::ostream& err) {
  if (o.precision != 64) throw InvalidArgument("--precision must be 64");
  if (!o.inject_fault.empty() && o.inject_fault != "conv") throw InvalidArgument("--inject-fault accepts only 'conv'");
  GradSuiteOptions opt;
  opt.instances = o.instances;
  opt.seed = o.seed;
  opt.perturb_conv = o.inject_fault == "conv";
  const GradSuiteReport report = run_gradcheck_suite(opt, [&](const GradCaseResult& c) {
    out << std::left << std::setw(6) << c.group << std::setw(30) << c.name << " instances " << c.instances
        << " checked " << c.checked << " kinks " << c.kinks_skipped << " max_rel_error " << format_real(c.max_rel_error)
        << (c.passed ? "  ok" : "  FAIL") << '\n';
  });
  out << report.count("layer") << " layer cases, " << report.count("block") << " block cases\n";
  if (report.all_passed()) return kExitOk;
  err << "gradient check failed:";
  for (const auto& c : report.cases) {
    if (!c.passed) err << ' ' << c.name;
  }
  err << '\n';
  return kExitRuntime;
}

inline int cmd_params(const ParamsOptions& o, std::ostream& out) {
  const std::size_t depth = parse_depth(o.arch);
  if (o.resolution < 1) throw InvalidArgument("--resolution must be positive");
  std::vector<Variant> variants;
  if (o.variant.empty()) {
    variants.assign(std::begin(kAllVariants), std::end(kAllVariants));
  } else {
    variants.push_back(parse_variant(o.variant));
  }
  if (o.csv) out << "arch,variant,blocks,params,macs,flops_mac2,flops_mac1\n";
  for (Variant v : variants) {
    const ArchDescription arch{depth, v, InitScheme::fan_out(), 0, 10};
    std::size_t params = 0;
    for (const auto& s : network_param_specs(arch)) params += shape_size(s.shape);
    const FlopCount f = count_flops(arch, o.resolution);
    const std::size_t blocks = build_block_specs(depth, v).size();
    if (o.csv) {
      out << o.arch << ',' << to_string(v) << ',' << blocks << ',' << params << ',' << f.macs << ','
          << f.flops_mac_as_2() << ',' << f.flops_mac_as_1() << '\n';
    } else {
      out << std::left << std::setw(10) << o.arch << std::setw(12) << to_string(v) << " blocks " << std::setw(3)
          << blocks << " params " << std::setw(9) << params << " (" << std::fixed << std::setprecision(2)
          << params / 1e6 << "M)  FLOPs " << f.flops_mac_as_2() / 1e9 << "G (MAC=2), " << f.flops_mac_as_1() / 1e9
          << "G (MAC=1)" << std::defaultfloat << std::setprecision(6) << '\n';
    }
  }
  return kExitOk;
}

/// Parses `args` (without the program name) and runs one command.
/// Exit codes: 0 success, 1 runtime failure, 2 usage error.
inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Normalization-free residual networks: signal propagation and training"};
  app.name("nfres");
  app.require_subcommand(1);
  const auto arches = std::vector<std::string>{"resnet18", "resnet50", "resnet101"};
  const auto inits = std::vector<std::string>{"fanin", "fanout", "brock"};

  SppOptions spp;
  auto* spp_cmd = app.add_subcommand("spp", "Signal propagation plot data (CSV)");
  spp_cmd->add_option("--arch", spp.arch)->check(CLI::IsMember(arches));
  spp_cmd->add_option("--variant", spp.variant)->check(CLI::IsMember(variant_names()));
  spp_cmd->add_option("--init", spp.init)->check(CLI::IsMember(inits));
  spp_cmd->add_option("--batch", spp.batch, "Input batch size");
  spp_cmd->add_option("--seed", spp.seed, "Master seed (weights and data)");
  spp_cmd->add_option("--backward", spp.backward)->check(CLI::IsMember({"inject", "loss"}));
  spp_cmd->add_option("--out", spp.out, "Output CSV")->required();

  TrainOptions tr;
  auto* train_cmd = app.add_subcommand("train", "Train and write history.csv and checkpoint.bin");
  train_cmd->add_option("--data", tr.data, "Directory with the binary CIFAR-10 batches");
  train_cmd->add_option("--synthetic", tr.synthetic, "Use N generated examples per split instead of --data");
  train_cmd->add_option("--arch", tr.arch)->check(CLI::IsMember(arches));
  train_cmd->add_option("--variant", tr.variant)->check(CLI::IsMember(variant_names()));
  train_cmd->add_option("--init", tr.init)->check(CLI::IsMember(inits));
  train_cmd->add_option("--epochs", tr.epochs);
  train_cmd->add_option("--batch", tr.batch);
  train_cmd->add_option("--lr", tr.lr, "Initial learning rate");
  train_cmd->add_option("--momentum", tr.momentum);
  train_cmd->add_option("--label-smoothing", tr.label_smoothing);
  train_cmd->add_flag("--no-augment", tr.no_augment);
  train_cmd->add_flag("--per-step-cosine", tr.per_step_cosine);
  train_cmd->add_option("--seed", tr.seed);
  train_cmd->add_option("--train-size", tr.train_size, "Training subset size (0 = all)");
  train_cmd->add_option("--test-size", tr.test_size, "Held-out subset size (0 = all)");
  train_cmd->add_option("--out", tr.out, "Output directory")->required();

  GradcheckOptions gc;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every layer and block variant");
  gc_cmd->add_option("--precision", gc.precision);
  gc_cmd->add_option("--instances", gc.instances);
  gc_cmd->add_option("--seed", gc.seed);
  gc_cmd->add_option("--inject-fault", gc.inject_fault)->group("");

  ParamsOptions pr;
  auto* params_cmd = app.add_subcommand("params", "Parameter and FLOP counts");
  params_cmd->add_option("--arch", pr.arch)->check(CLI::IsMember(arches));
  params_cmd->add_option("--variant", pr.variant)->check(CLI::IsMember(variant_names()));
  params_cmd->add_option("--resolution", pr.resolution);
  params_cmd->add_flag("--csv", pr.csv);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (*spp_cmd) return cmd_spp(spp, out);
    if (*train_cmd) return cmd_train(tr, out, err);
    if (*gc_cmd) return cmd_gradcheck(gc, out, err);
    return cmd_params(pr, out);
  } catch (const InvalidArgument& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace nfres::cli
