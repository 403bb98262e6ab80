#pragma once

// KITTI-style odometry errors: relative translation (%) and rotation
// (deg/100m) over path segments, plus per-frame (instantaneous) RMSE.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "lorcon/dataset_io.hpp"
#include "lorcon/errors.hpp"
#include "lorcon/geometry.hpp"

namespace lorcon {

inline std::vector<double> path_lengths(const std::vector<Pose>& poses) {
  if (poses.empty()) throw ShapeError("path_lengths: empty trajectory");
  std::vector<double> dist(poses.size(), 0.0);
  for (std::size_t i = 1; i < poses.size(); ++i)
    dist[i] = dist[i - 1] + (poses[i].translation - poses[i - 1].translation).norm();
  return dist;
}

enum class Aggregation { kMean, kRmse };

struct SegmentOptions {
  std::vector<double> lengths = {100, 200, 300, 400, 500, 600, 700, 800};
  std::size_t start_stride = 1;
};

// Errors of one (start frame, length) segment. t_err is a fraction,
// r_err radians per meter.
struct SegmentError {
  std::size_t first_frame = 0;
  double length = 0;
  double t_err = 0;
  double r_err = 0;
};

struct LengthRecord {
  double length = 0;
  std::size_t count = 0;
  double t_err_mean = 0, r_err_mean = 0;
  double t_err_rmse = 0, r_err_rmse = 0;
};

struct SegmentErrorReport {
  std::vector<LengthRecord> per_length;
  std::size_t count = 0;
  // Aggregates over all segments, fractions and rad/m.
  double t_err_mean = 0, r_err_mean = 0;
  double t_err_rmse = 0, r_err_rmse = 0;

  // Translation in %, rotation in deg/100m.
  double t_rel(Aggregation a = Aggregation::kMean) const {
    return 100.0 * (a == Aggregation::kMean ? t_err_mean : t_err_rmse);
  }
  double r_rel(Aggregation a = Aggregation::kMean) const {
    return 100.0 * 180.0 / std::numbers::pi * (a == Aggregation::kMean ? r_err_mean : r_err_rmse);
  }
};

inline SegmentError segment_error(const Pose& gt_i, const Pose& gt_j, const Pose& pred_i,
                                  const Pose& pred_j, std::size_t first, double length) {
  const Pose e = relative_pose(relative_pose(gt_i, gt_j), relative_pose(pred_i, pred_j));
  return {first, length, e.translation.norm() / length, rotation_angle(e.rotation) / length};
}

// Every segment contributing to the benchmark numbers, in (start, length)
// order. A segment from frame i of length L ends at the first frame j whose
// ground-truth path distance from i reaches L. Start frames are split across
// `workers` threads; the output order does not depend on the worker count.
inline std::vector<SegmentError> enumerate_segments(const std::vector<Pose>& gt,
                                                    const std::vector<Pose>& pred,
                                                    const SegmentOptions& opts = {}, int workers = 1) {
  if (gt.size() != pred.size())
    throw ShapeError("segment_errors: ground truth has " + std::to_string(gt.size()) +
                     " poses, prediction " + std::to_string(pred.size()));
  if (opts.start_stride == 0) throw ConfigError("segment_errors: start stride must be >= 1");
  if (gt.size() < 2) return {};
  const std::vector<double> dist = path_lengths(gt);
  std::vector<std::size_t> starts;
  for (std::size_t i = 0; i < gt.size(); i += opts.start_stride) starts.push_back(i);

  auto run = [&](std::size_t lo, std::size_t hi, std::vector<SegmentError>& out) {
    for (std::size_t s = lo; s < hi; ++s) {
      const std::size_t i = starts[s];
      for (double len : opts.lengths) {
        const auto it = std::partition_point(dist.begin() + static_cast<std::ptrdiff_t>(i), dist.end(),
                                             [&](double d) { return d - dist[i] < len; });
        if (it == dist.end()) continue;
        const auto j = static_cast<std::size_t>(it - dist.begin());
        out.push_back(segment_error(gt[i], gt[j], pred[i], pred[j], i, len));
      }
    }
  };
  const std::size_t n_workers =
      std::clamp<std::size_t>(static_cast<std::size_t>(std::max(workers, 1)), 1, starts.size());
  std::vector<std::vector<SegmentError>> parts(n_workers);
  if (n_workers == 1) {
    run(0, starts.size(), parts[0]);
  } else {
    std::vector<std::thread> threads;
    const std::size_t chunk = (starts.size() + n_workers - 1) / n_workers;
    for (std::size_t w = 0; w < n_workers; ++w) {
      const std::size_t lo = std::min(starts.size(), w * chunk);
      const std::size_t hi = std::min(starts.size(), lo + chunk);
      threads.emplace_back(run, lo, hi, std::ref(parts[w]));
    }
    for (auto& t : threads) t.join();
  }
  std::vector<SegmentError> out;
  for (auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

inline SegmentErrorReport summarize_segments(const std::vector<SegmentError>& segs,
                                             const std::vector<double>& lengths) {
  SegmentErrorReport rep;
  double ts = 0, rs = 0, ts2 = 0, rs2 = 0;
  for (double len : lengths) {
    LengthRecord rec;
    rec.length = len;
    double t = 0, r = 0, t2 = 0, r2 = 0;
    for (const auto& s : segs) {
      if (s.length != len) continue;
      ++rec.count;
      t += s.t_err;
      r += s.r_err;
      t2 += s.t_err * s.t_err;
      r2 += s.r_err * s.r_err;
    }
    if (rec.count > 0) {
      const double n = static_cast<double>(rec.count);
      rec.t_err_mean = t / n;
      rec.r_err_mean = r / n;
      rec.t_err_rmse = std::sqrt(t2 / n);
      rec.r_err_rmse = std::sqrt(r2 / n);
    }
    rep.count += rec.count;
    ts += t;
    rs += r;
    ts2 += t2;
    rs2 += r2;
    rep.per_length.push_back(rec);
  }
  if (rep.count > 0) {
    const double n = static_cast<double>(rep.count);
    rep.t_err_mean = ts / n;
    rep.r_err_mean = rs / n;
    rep.t_err_rmse = std::sqrt(ts2 / n);
    rep.r_err_rmse = std::sqrt(rs2 / n);
  }
  return rep;
}

inline SegmentErrorReport segment_errors(const std::vector<Pose>& gt, const std::vector<Pose>& pred,
                                         const SegmentOptions& opts = {}, int workers = 1) {
  return summarize_segments(enumerate_segments(gt, pred, opts, workers), opts.lengths);
}

struct InstantaneousReport {
  double translation_rmse = 0;      // meters
  double rotation_rmse = 0;         // radians
  std::array<double, 6> per_axis{}; // tx, ty, tz, roll, pitch, yaw
};

// RMSE of per-frame relative-pose residuals, without accumulation. Angle
// residuals are wrapped to (-pi, pi].
inline InstantaneousReport instantaneous_rmse(const std::vector<RelPose6D>& gt,
                                              const std::vector<RelPose6D>& pred) {
  if (gt.size() != pred.size())
    throw ShapeError("instantaneous_rmse: " + std::to_string(gt.size()) + " ground-truth vs " +
                     std::to_string(pred.size()) + " predicted motions");
  if (gt.empty()) throw ShapeError("instantaneous_rmse: no motions");
  InstantaneousReport rep;
  double t2 = 0, r2 = 0;
  std::array<double, 6> axis2{};
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const auto g = gt[i].as_array();
    const auto p = pred[i].as_array();
    for (int k = 0; k < 6; ++k) {
      double d = p[k] - g[k];
      if (k >= 3) d = wrap_angle(d);
      axis2[k] += d * d;
      (k < 3 ? t2 : r2) += d * d;
    }
  }
  const double n = static_cast<double>(gt.size());
  rep.translation_rmse = std::sqrt(t2 / n);
  rep.rotation_rmse = std::sqrt(r2 / n);
  for (int k = 0; k < 6; ++k) rep.per_axis[k] = std::sqrt(axis2[k] / n);
  return rep;
}

// ---------------------------------------------------------------------------
// Export

enum class TrajectoryFormat { kKitti, kCsv };

inline std::string format_real(double v, int precision = 12) {
  std::ostringstream ss;
  ss << std::setprecision(precision) << (v == 0.0 ? 0.0 : v);
  return ss.str();
}

inline void write_kitti_poses(std::ostream& out, const std::vector<Pose>& poses, int precision = 12) {
  for (const Pose& p : poses) {
    const auto v = p.to_row_major();
    for (std::size_t k = 0; k < v.size(); ++k) out << (k ? " " : "") << format_real(v[k], precision);
    out << '\n';
  }
}

inline void write_motion_csv(std::ostream& out, const std::vector<RelPose6D>& motions) {
  out << "frame,tx,ty,tz,roll,pitch,yaw\n";
  for (std::size_t i = 0; i < motions.size(); ++i) {
    out << i;
    for (double v : motions[i].as_array()) out << ',' << format_real(v);
    out << '\n';
  }
}

inline void export_trajectory(const std::vector<Pose>& poses, const std::filesystem::path& path,
                              TrajectoryFormat format) {
  if (poses.empty()) throw ShapeError("export_trajectory: empty trajectory");
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  if (format == TrajectoryFormat::kKitti) {
    write_kitti_poses(out, poses);
  } else {
    std::vector<RelPose6D> absolute;
    for (const Pose& p : poses) absolute.push_back(pose_to_6dof(p));
    write_motion_csv(out, absolute);
  }
  if (!out) throw DataError("write failure on " + path.string());
}

inline void write_report_csv(std::ostream& out, const SegmentErrorReport& rep) {
  constexpr double kDeg = 180.0 / std::numbers::pi;
  out << "length_m,segments,t_err_mean_pct,r_err_mean_deg_per_100m,t_err_rmse_pct,r_err_rmse_deg_per_100m\n";
  for (const auto& r : rep.per_length) {
    out << format_real(r.length) << ',' << r.count << ',' << format_real(100 * r.t_err_mean) << ','
        << format_real(100 * kDeg * r.r_err_mean) << ',' << format_real(100 * r.t_err_rmse) << ','
        << format_real(100 * kDeg * r.r_err_rmse) << '\n';
  }
  out << "all," << rep.count << ',' << format_real(rep.t_rel(Aggregation::kMean)) << ','
      << format_real(rep.r_rel(Aggregation::kMean)) << ',' << format_real(rep.t_rel(Aggregation::kRmse))
      << ',' << format_real(rep.r_rel(Aggregation::kRmse)) << '\n';
}

inline void write_instantaneous_csv(std::ostream& out, const InstantaneousReport& rep) {
  out << "translation_rmse_m,rotation_rmse_rad,tx,ty,tz,roll,pitch,yaw\n";
  out << format_real(rep.translation_rmse) << ',' << format_real(rep.rotation_rmse);
  for (double v : rep.per_axis) out << ',' << format_real(v);
  out << '\n';
}

inline std::string fixed2(double v) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(2) << (v == 0.0 ? 0.0 : v);
  return ss.str();
}

// The first summary line uses `primary`; the other aggregation follows.
inline void print_report_table(std::ostream& out, const SegmentErrorReport& rep, const InstantaneousReport& inst,
                               Aggregation primary = Aggregation::kMean) {
  constexpr double kDeg = 180.0 / std::numbers::pi;
  const bool mean = primary == Aggregation::kMean;
  out << "  length   segments   t_err[%]   r_err[deg/100m]\n";
  for (const auto& r : rep.per_length) {
    out << std::setw(8) << format_real(r.length) << std::setw(11) << r.count << std::setw(11)
        << fixed2(100 * (mean ? r.t_err_mean : r.t_err_rmse)) << std::setw(18)
        << fixed2(100 * kDeg * (mean ? r.r_err_mean : r.r_err_rmse)) << '\n';
  }
  const Aggregation other = mean ? Aggregation::kRmse : Aggregation::kMean;
  out << "t_rel " << fixed2(rep.t_rel(primary)) << " % r_rel " << fixed2(rep.r_rel(primary)) << " deg/100m ("
      << (mean ? "mean" : "rmse") << ")\n";
  out << (mean ? "rmse" : "mean") << ": t_rel " << fixed2(rep.t_rel(other)) << " % r_rel "
      << fixed2(rep.r_rel(other)) << " deg/100m\n";
  out << "instantaneous rmse: translation " << format_real(inst.translation_rmse) << " m, rotation "
      << format_real(inst.rotation_rmse) << " rad\n";
}

}  // namespace lorcon
