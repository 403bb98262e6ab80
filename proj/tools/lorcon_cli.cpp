// lorcon: preprocess, train, infer, eval, gradcheck and synth subcommands.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lorcon/commands.hpp"

namespace {

using lorcon::ExitCode;

struct CommonArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<int> workers;
  std::optional<std::string> output;
  bool quiet = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("-c,--config", args.config, "JSON run configuration");
  cmd->add_option("-s,--set", args.overrides, "Override a config value, e.g. train.epochs=10");
  cmd->add_option("-w,--workers", args.workers, "Worker threads (default 1)");
  cmd->add_option("-o,--output", args.output, "Output directory");
  cmd->add_flag("-q,--quiet", args.quiet, "Suppress progress messages");
}

lorcon::RunConfig load_config(const CommonArgs& args) {
  lorcon::Json j = args.config.empty() ? lorcon::Json::object() : lorcon::read_config_json(args.config);
  for (const auto& o : args.overrides) lorcon::apply_override(j, o);
  if (args.workers) j["workers"] = *args.workers;
  if (args.output) j["output_dir"] = *args.output;
  return lorcon::parse_config(j);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LiDAR odometry with a recurrent convolutional network"};
  app.require_subcommand(1);
  CommonArgs common;

  auto* synth = app.add_subcommand("synth", "Write a synthetic dataset in the KITTI layout");
  auto* preprocess = app.add_subcommand("preprocess", "Project scans into cached 5-channel frames");
  auto* train = app.add_subcommand("train", "Train the network on the training sequences");
  auto* infer = app.add_subcommand("infer", "Predict relative poses and a trajectory for one sequence");
  auto* eval = app.add_subcommand("eval", "Segment and instantaneous errors of a predicted trajectory");
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  for (auto* cmd : {synth, preprocess, train, infer, eval, gradcheck}) add_common(cmd, common);

  std::string resume;
  train->add_option("--resume", resume, "Checkpoint to resume from")->check(CLI::ExistingFile);

  std::string checkpoint;
  int sequence = 0;
  infer->add_option("--checkpoint", checkpoint, "Trained checkpoint")->required();
  infer->add_option("--sequence", sequence, "Sequence id")->required();

  std::string gt, pred;
  eval->add_option("--gt", gt, "Ground-truth trajectory (KITTI format)")->required();
  eval->add_option("--pred", pred, "Predicted trajectory (KITTI format)")->required();

  lorcon::GradCheckSuiteOptions gc;
  gradcheck->add_option("--seeds", gc.seeds, "Random seeds per op")->check(CLI::PositiveNumber);
  gradcheck->add_option("--seed-base", gc.base_seed, "First seed");
  gradcheck->add_option("--inject-fault", gc.inject_fault,
                        "Scale the analytic gradient of this op by 1.01 (self-test)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ExitCode::kUsage);
  }

  try {
    lorcon::log::quiet() = common.quiet;
    const lorcon::RunConfig cfg = load_config(common);
    std::ostream* progress = common.quiet ? nullptr : &std::cerr;
    if (*synth) {
      for (const auto& s : lorcon::cli::cmd_synth(cfg))
        std::cout << "sequence " << lorcon::sequence_name(s.sequence) << ": " << s.frames << " frames\n";
    } else if (*preprocess) {
      for (const auto& e : lorcon::cli::cmd_preprocess(cfg))
        std::cout << lorcon::sequence_name(e.sequence) << ',' << e.frames << ',' << e.checksum << '\n';
    } else if (*train) {
      const auto r = lorcon::cli::cmd_train(cfg, resume.empty() ? std::nullopt : std::optional<std::filesystem::path>(resume),
                                            progress);
      if (!r.epochs.empty())
        std::cout << "final loss " << lorcon::format_real(r.epochs.back().mean_loss, 8) << '\n';
      std::cout << "checkpoint " << r.checkpoint.string() << '\n';
    } else if (*infer) {
      const auto r = lorcon::cli::cmd_infer(cfg, checkpoint, sequence);
      std::cout << r.motions.size() << " relative poses -> " << r.relative_csv.string() << '\n'
                << r.trajectory.size() << " poses -> " << r.kitti.string() << '\n';
    } else if (*eval) {
      lorcon::cli::cmd_eval(cfg, gt, pred, std::cout);
    } else if (*gradcheck) {
      if (!lorcon::cli::cmd_gradcheck(gc, std::cout)) {
        std::cerr << "gradcheck failed\n";
        return static_cast<int>(ExitCode::kNumerical);
      }
    }
  } catch (const lorcon::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kData);
  }
  return 0;
}
