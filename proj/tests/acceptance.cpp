// End-to-end acceptance run: one PASS/FAIL line per criterion.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "lorcon/dataset_io.hpp"
#include "lorcon/evaluation.hpp"
#include "lorcon/geometry.hpp"
#include "lorcon/gradcheck_suite.hpp"
#include "lorcon/model.hpp"
#include "lorcon/synthetic.hpp"
#include "support.hpp"

using namespace lorcon;
using Clock = std::chrono::steady_clock;

namespace {

struct Verdict {
  bool pass = true;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int precision = 3) {
  std::ostringstream ss;
  ss << std::setprecision(precision) << v;
  return ss.str();
}

Verdict gradient_checks() {
  const auto t0 = Clock::now();
  GradCheckSuiteOptions opts;
  opts.seeds = 20;
  const auto rows = run_gradcheck_suite(opts);
  const double elapsed = seconds_since(t0);
  Verdict v;
  double worst = 0;
  std::string worst_op;
  for (const auto& r : rows) {
    v.pass = v.pass && r.passed && r.max_rel_error < kGradCheckTolerance;
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      worst_op = r.op;
    }
  }
  v.pass = v.pass && elapsed < 300.0 && rows.size() == gradcheck_cases().size();
  v.detail = std::to_string(rows.size()) + " ops x " + std::to_string(opts.seeds) + " seeds, worst " + fmt(worst) +
             " (" + worst_op + "), " + fmt(elapsed, 4) + " s";
  return v;
}

Verdict projection_exactness() {
  ProjectionConfig cfg;  // 64 x 900
  const synthetic::LidarModel lidar = synthetic::LidarModel::matching(cfg);
  const synthetic::World world = synthetic::default_world(11);
  std::size_t points = 0, agree = 0;
  for (const Pose& pose : synthetic::generate_trajectory({3, synthetic::Motion::kArc, 2.0, 4.0, 11})) {
    const PointCloud cloud = synthetic::simulate_scan(world, pose, lidar);
    const ProjectedFrame frame = build_range_image(cloud, cfg);
    std::size_t k = 0;
    for (int v = 0; v < cfg.height; ++v) {
      for (int u = 0; u < cfg.width; ++u) {
        if (!synthetic::cast_ray(world, pose.translation, pose.rotation * lidar.beam_direction(v, u), lidar.max_range))
          continue;
        ++points;
        if (k < cloud.points.size() && frame.source_index[frame.index(v, u)] == static_cast<std::int64_t>(k)) ++agree;
        ++k;
      }
    }
    if (k != cloud.points.size()) points += cloud.points.size();  // count strays as disagreements
  }

  synthetic::World ground;
  ground.ground = synthetic::World::ground_at(-1.73);
  const ProjectedFrame g = project_scan(synthetic::simulate_scan(ground, Pose::identity(), lidar), cfg);
  std::size_t interior = 0;
  double worst = 0;
  for (int v = 0; v + 1 < cfg.height; ++v) {
    for (int u = 0; u < cfg.width; ++u) {
      if (!g.is_valid(v, u) || !g.is_valid(v + 1, u) || !g.is_valid(v, (u + 1) % cfg.width)) continue;
      ++interior;
      worst = std::max(worst, (g.normal_at(v, u) - Eigen::Vector3d::UnitZ()).norm());
    }
  }
  Verdict out;
  out.pass = points > 0 && agree == points && interior > 0 && worst <= 1e-6;
  out.detail = std::to_string(agree) + "/" + std::to_string(points) + " points in their pixel; " +
               std::to_string(interior) + " ground pixels, worst normal error " + fmt(worst);
  return out;
}

Verdict loss_weight_identity() {
  using T = nn::Tensor<double>;
  const T target({1, 1, 6}, 0.0);
  auto loss = [&](std::vector<double> residual) {
    return nn::weighted_mse_loss(T({1, 1, 6}, std::move(residual)), target, 100.0).total.item();
  };
  // Unit residual on every component of one group: both means are exact.
  const double rot = loss({0, 0, 0, 1, 1, 1}), trans = loss({1, 1, 1, 0, 0, 0});
  // A single unit component: each loss carries one rounding of 1/3.
  const double rot1 = loss({0, 0, 0, 1, 0, 0}), trans1 = loss({1, 0, 0, 0, 0, 0});
  const double single = rot1 / trans1;
  const bool ok = rot / trans == 100.0 && std::abs(single - 100.0) <= 4 * 100.0 * 2.220446049250313e-16;
  return {ok, "all-axis " + fmt(rot, 17) + " / " + fmt(trans, 17) + " = " + fmt(rot / trans, 17) + "; single-axis " +
                  fmt(single, 17)};
}

Verdict shape_contract() {
  const ModelConfig cfg = ModelConfig::full();
  const auto shapes = infer_shapes(cfg);
  // Hand-evaluated output extents: floor((n + 2*pad - kernel) / stride) + 1.
  const int heights[] = {64, 64, 32, 32, 16, 16, 8, 8};
  const int widths[] = {900, 450, 225, 113, 57, 29, 15, 15};
  bool ok = shapes.size() == 8;
  for (std::size_t i = 0; ok && i < shapes.size(); ++i)
    ok = shapes[i].height == heights[i] && shapes[i].width == widths[i] && shapes[i].channels == cfg.channels[i == 0 ? 0 : i - 1];
  for (int i = 0; i < 5; ++i) ok = ok && cfg.strides[i].horizontal > 1;
  ok = ok && cfg.strides[5].horizontal == 1;
  LorconNet<float> net(cfg, 1);
  const auto enc = net.encode(nn::Tensor<float>({1, 10, 64, 900}, 0.0f));
  ok = ok && enc.shape() == nn::Shape{1, 256, 8, 15};
  std::string table;
  for (const auto& s : shapes) table += (table.empty() ? "" : " -> ") + std::to_string(s.height) + "x" + std::to_string(s.width);
  return {ok, table};
}

struct TrainRun {
  std::vector<EpochRecord> log;
  std::vector<unsigned char> final_bytes;
  std::vector<unsigned char> midpoint_bytes;
  double seconds = 0;
};

std::vector<SequenceSample> overfit_samples() {
  const auto ds = testing_support::desk_dataset(24, synthetic::Motion::kArc, 3);
  return make_samples(ds.frames, ds.poses, ModelConfig::desk().sequence_length);
}

TrainRun desk_run(const std::vector<SequenceSample>& samples, int midpoint) {
  const ModelConfig mcfg = ModelConfig::desk();
  TrainConfig tcfg = TrainConfig::desk();
  tcfg.checkpoint_every = midpoint;
  LorconNet<float> model(mcfg, tcfg.seed);
  nn::Adagrad<float> opt(tcfg.learning_rate);
  TrainRun run;
  TrainCallbacks cb;
  cb.on_checkpoint = [&](int epoch) {
    if (epoch == midpoint) run.midpoint_bytes = make_checkpoint(model, &opt, epoch).serialize();
  };
  const auto t0 = Clock::now();
  run.log = train(model, opt, samples, tcfg, 0, cb);
  run.seconds = seconds_since(t0);
  run.final_bytes = make_checkpoint(model, &opt, tcfg.epochs).serialize();
  return run;
}

std::vector<unsigned char> resumed_run(const std::vector<SequenceSample>& samples,
                                       const std::vector<unsigned char>& midpoint) {
  const TrainConfig tcfg = TrainConfig::desk();
  LorconNet<float> model(ModelConfig::desk(), tcfg.seed + 99);
  nn::Adagrad<float> opt(tcfg.learning_rate);
  const int start = static_cast<int>(restore_checkpoint(model, &opt, nn::Checkpoint::deserialize(midpoint, "midpoint")));
  train(model, opt, samples, tcfg, start);
  return make_checkpoint(model, &opt, tcfg.epochs).serialize();
}

Verdict overfit(const TrainRun& run, std::size_t samples) {
  const double first = run.log.front().mean_loss, last = run.log.back().mean_loss;
  const double ratio = last / first;
  return {samples == 20 && run.log.size() == 500 && ratio <= 0.05 && run.seconds < 900.0,
          std::to_string(samples) + " samples, " + std::to_string(run.log.size()) + " epochs, loss " + fmt(first, 4) +
              " -> " + fmt(last, 4) + " (" + fmt(100 * ratio, 3) + "% of epoch 1), " + fmt(run.seconds, 4) + " s"};
}

Verdict metric_oracle() {
  const auto gt = testing_support::straight_line(900, 1.0), pred = testing_support::straight_line(900, 1.01);
  const auto rep = segment_errors(gt, pred);
  bool ok = std::abs(rep.t_rel(Aggregation::kMean) - 1.0) <= 0.01 && std::abs(rep.t_rel(Aggregation::kRmse) - 1.0) <= 0.01 &&
            rep.r_rel(Aggregation::kMean) == 0.0 && rep.r_rel(Aggregation::kRmse) == 0.0;
  std::size_t compared = 0;
  double worst = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto g = testing_support::wandering_trajectory(200, seed);
    std::mt19937_64 gen(seed + 50);
    std::normal_distribution<double> n(0.0, 0.02);
    std::vector<Pose> p = g;
    for (std::size_t i = 1; i < p.size(); ++i) {
      p[i].translation += Eigen::Vector3d(n(gen), n(gen), n(gen)) * static_cast<double>(i);
      p[i].rotation = p[i].rotation * euler_to_rotation(n(gen), n(gen), n(gen));
    }
    const auto segs = enumerate_segments(g, p);
    const auto oracle = testing_support::brute_force_segments(g, p, SegmentOptions{}.lengths);
    ok = ok && segs.size() == oracle.size() && !segs.empty();
    for (std::size_t k = 0; ok && k < segs.size(); ++k) {
      ok = segs[k].first_frame == oracle[k].first && segs[k].length == oracle[k].length;
      worst = std::max({worst, std::abs(segs[k].t_err - oracle[k].t_err), std::abs(segs[k].r_err - oracle[k].r_err)});
    }
    compared += segs.size();
  }
  ok = ok && worst <= 1e-9;
  return {ok, "t_rel " + fmt(rep.t_rel(), 6) + "% (rmse " + fmt(rep.t_rel(Aggregation::kRmse), 6) + "%), r_rel " +
                  fmt(rep.r_rel()) + "; " + std::to_string(compared) + " segments vs brute force, worst diff " + fmt(worst)};
}

Verdict geometry_oracle() {
  std::mt19937_64 gen(2024);
  double worst_pose = 0, worst_euler = 0;
  for (int k = 0; k < 1000; ++k) {
    const Pose p = testing_support::random_pose(gen, 100.0);
    worst_pose = std::max(worst_pose, (testing_support::homogeneous(sixdof_to_pose(pose_to_6dof(p))) -
                                       testing_support::homogeneous(p)).norm());
    const Eigen::Matrix3d r = testing_support::random_rotation(gen);
    const auto e = rotation_to_euler(r);
    worst_euler = std::max(worst_euler, (euler_to_rotation(e.roll, e.pitch, e.yaw) - r).norm());
  }
  std::vector<Pose> gt{testing_support::random_pose(gen)};
  std::uniform_real_distribution<double> small(-0.05, 0.05);
  for (int i = 0; i < 1000; ++i) {
    Pose step = Pose::from_rotation(euler_to_rotation(small(gen), small(gen), small(gen)));
    step.translation = {1.0 + small(gen), small(gen), small(gen)};
    gt.push_back(gt.back() * step);
  }
  const auto rebuilt = accumulate(gt[0], consecutive_motions(gt));
  double worst_acc = 0;
  for (std::size_t i = 0; i < gt.size(); ++i)
    worst_acc = std::max(worst_acc, (testing_support::homogeneous(rebuilt[i]) - testing_support::homogeneous(gt[i])).norm());
  return {worst_pose <= 1e-9 && worst_euler <= 1e-9 && worst_acc <= 1e-6,
          "6dof " + fmt(worst_pose) + ", euler " + fmt(worst_euler) + ", accumulate over 1000 steps " + fmt(worst_acc)};
}

Verdict determinism(const TrainRun& a, const TrainRun& b, const std::vector<unsigned char>& resumed) {
  const bool same = a.final_bytes == b.final_bytes;
  const bool resume_same = resumed == a.final_bytes;
  return {same && resume_same && !a.final_bytes.empty(),
          std::string("repeat run ") + (same ? "bit-identical" : "differs") + ", resumed at epoch 250 " +
              (resume_same ? "bit-identical" : "differs") + " (" + std::to_string(a.final_bytes.size()) + " bytes)"};
}

Verdict data_round_trips() {
  testing_support::TempDir dir("acceptance_io");
  std::mt19937_64 gen(5);
  std::uniform_real_distribution<float> coord(-80.0f, 80.0f), inten(0.0f, 1.0f);
  PointCloud cloud;
  for (int i = 0; i < 20000; ++i) cloud.points.push_back({coord(gen), coord(gen), coord(gen), inten(gen)});
  write_velodyne_bin(dir.path() / "scan.bin", cloud);
  const auto back = read_velodyne_bin(dir.path() / "scan.bin").cloud;
  bool bin_ok = back.points.size() == cloud.points.size();
  for (std::size_t i = 0; bin_ok && i < back.points.size(); ++i) {
    const Point &a = cloud.points[i], &b = back.points[i];
    bin_ok = a.x == b.x && a.y == b.y && a.z == b.z && a.intensity == b.intensity;
  }

  const auto poses = testing_support::wandering_trajectory(500, 6);
  export_trajectory(poses, dir.path() / "poses.txt", TrajectoryFormat::kKitti);
  const auto parsed = read_kitti_poses(dir.path() / "poses.txt");
  double worst = parsed.size() == poses.size() ? 0.0 : 1.0;
  for (std::size_t i = 0; i < std::min(parsed.size(), poses.size()); ++i)
    worst = std::max(worst, (testing_support::homogeneous(parsed[i]) - testing_support::homogeneous(poses[i])).norm());
  return {bin_ok && worst < 1e-6, std::to_string(cloud.points.size()) + " points " +
                                      (bin_ok ? "bit-exact" : "differ") + "; 500 poses, worst matrix error " + fmt(worst)};
}

}  // namespace

int main() {
  log::quiet() = true;
  int failures = 0;
  auto report = [&](int id, const std::string& name, const std::function<Verdict()>& fn) {
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    std::cout << (v.pass ? "[PASS]" : "[FAIL]") << " criterion " << id << ": " << name << " -- " << v.detail << std::endl;
    failures += v.pass ? 0 : 1;
  };

  report(1, "gradient checks", gradient_checks);
  report(2, "projection exactness", projection_exactness);
  report(3, "loss weight 100:1", loss_weight_identity);
  report(4, "shape contract", shape_contract);

  const auto samples = overfit_samples();
  TrainRun first, second;
  std::vector<unsigned char> resumed;
  report(5, "overfit convergence", [&] {
    first = desk_run(samples, 250);
    return overfit(first, samples.size());
  });
  report(6, "segment metric oracle", metric_oracle);
  report(7, "geometry oracle", geometry_oracle);
  report(8, "training determinism", [&] {
    if (first.final_bytes.empty()) first = desk_run(samples, 250);
    second = desk_run(samples, 250);
    resumed = resumed_run(samples, first.midpoint_bytes);
    return determinism(first, second, resumed);
  });
  report(9, "data round trips", data_round_trips);

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
