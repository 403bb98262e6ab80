#pragma once

// Subcommand implementations behind the command-line tool. Each takes a
// validated RunConfig and writes into the output directory:
//
//   cache/         frame blobs, lidar-frame poses, manifest.csv
//   checkpoints/   epoch_NNNN.ckpt, latest.ckpt
//   logs/          train_log.csv
//   reports/       segment_errors.csv, instantaneous.csv
//   trajectories/  NN.txt (KITTI), NN_relative.csv, NN_gt.txt

#include <algorithm>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "lorcon/config.hpp"
#include "lorcon/dataset_io.hpp"
#include "lorcon/errors.hpp"
#include "lorcon/evaluation.hpp"
#include "lorcon/gradcheck_suite.hpp"
#include "lorcon/model.hpp"
#include "lorcon/projection.hpp"
#include "lorcon/synthetic.hpp"

namespace lorcon::cli {

namespace fs = std::filesystem;

struct OutputLayout {
  fs::path root;

  fs::path cache() const { return root / "cache"; }
  fs::path checkpoints() const { return root / "checkpoints"; }
  fs::path logs() const { return root / "logs"; }
  fs::path reports() const { return root / "reports"; }
  fs::path trajectories() const { return root / "trajectories"; }
  fs::path manifest() const { return cache() / "manifest.csv"; }
  fs::path sequence_cache(int seq) const { return cache() / sequence_name(seq); }
  fs::path cached_poses(int seq) const { return sequence_cache(seq) / "poses.txt"; }
  fs::path frame_blob(int seq, std::size_t frame) const {
    char name[32];
    std::snprintf(name, sizeof name, "%06zu.lrf", frame);
    return sequence_cache(seq) / name;
  }
  fs::path checkpoint(int epoch) const {
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%04d.ckpt", epoch);
    return checkpoints() / name;
  }
  fs::path latest_checkpoint() const { return checkpoints() / "latest.ckpt"; }
  fs::path train_log() const { return logs() / "train_log.csv"; }

  void create() const {
    for (const auto& d : {cache(), checkpoints(), logs(), reports(), trajectories()}) fs::create_directories(d);
  }
};

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("write failure on " + path.string());
}

inline void write_effective_config(const RunConfig& cfg, const std::string& command) {
  fs::create_directories(cfg.output_dir);
  write_text(cfg.output_dir / ("effective_config." + command + ".json"), to_json(cfg).dump(2) + "\n");
}

// 64-bit FNV-1a.
inline std::uint64_t fnv1a(const unsigned char* data, std::size_t n,
                           std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Runs body(i) for i in [0, n) on `workers` threads and rethrows the error of
// the lowest failing index.
template <typename F>
void parallel_for(std::size_t n, int workers, F body) {
  const std::size_t nw = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(workers, 1)), 1, std::max<std::size_t>(n, 1));
  std::vector<std::exception_ptr> errors(n);
  auto run = [&](std::size_t w) {
    for (std::size_t i = w; i < n; i += nw) {
      try {
        body(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (nw == 1) {
    run(0);
  } else {
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < nw; ++w) threads.emplace_back(run, w);
    for (auto& t : threads) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// synth

// A KITTI-like camera<-lidar extrinsic, so the synthetic data exercises the
// pose conjugation path.
inline Pose synthetic_extrinsic() {
  Pose tr;
  tr.rotation << 0, -1, 0, 0, 0, -1, 1, 0, 0;
  tr.translation = {0.0, -0.08, -0.27};
  return tr;
}

inline void write_calibration(const fs::path& path, const Pose& tr) {
  std::ostringstream ss;
  ss << "Tr:";
  for (double v : tr.to_row_major()) ss << ' ' << format_real(v, 17);
  ss << '\n';
  write_text(path, ss.str());
}

struct SynthSummary {
  int sequence = 0;
  std::size_t frames = 0;
};

// Writes a synthetic dataset in the KITTI odometry layout under dataset_root.
inline std::vector<SynthSummary> cmd_synth(const RunConfig& cfg) {
  const KittiLayout layout{cfg.dataset_root};
  const synthetic::LidarModel lidar = synthetic::LidarModel::matching(cfg.projection);
  const Pose tr = synthetic_extrinsic();
  std::vector<SynthSummary> out;
  fs::create_directories(layout.root / "poses");
  for (int seq : cfg.synthetic.sequences) {
    const std::uint64_t seed = cfg.synthetic.seed + static_cast<std::uint64_t>(seq);
    const synthetic::World world = synthetic::default_world(seed);
    synthetic::TrajectorySpec spec;
    spec.frames = cfg.synthetic.frames;
    spec.motion = cfg.synthetic.motion;
    spec.step = cfg.synthetic.step;
    spec.seed = seed;
    const std::vector<Pose> poses = synthetic::generate_trajectory(spec);
    fs::create_directories(layout.velodyne_dir(seq));
    parallel_for(poses.size(), cfg.workers, [&](std::size_t i) {
      PointCloud cloud = synthetic::simulate_scan(world, poses[i], lidar);
      write_velodyne_bin(layout.scan_file(seq, i), cloud);
    });
    write_calibration(layout.calib_file(seq), tr);
    std::vector<Pose> camera;
    for (const Pose& p : poses) camera.push_back(tr * p * tr.inverse());
    std::ostringstream ss;
    write_kitti_poses(ss, camera, 17);
    write_text(layout.pose_file(seq), ss.str());
    out.push_back({seq, poses.size()});
  }
  return out;
}

// ---------------------------------------------------------------------------
// preprocess

struct ManifestEntry {
  int sequence = 0;
  std::size_t frames = 0;
  std::string checksum;
};

inline std::vector<int> split_sequences(const RunConfig& cfg) {
  const SequenceSplit split = sequence_split(cfg.split);
  std::set<int> all(split.train.begin(), split.train.end());
  all.insert(split.test.begin(), split.test.end());
  return {all.begin(), all.end()};
}

inline void require_file(const fs::path& p, const std::string& what, int seq) {
  if (!fs::exists(p))
    throw DataError("sequence " + sequence_name(seq) + ": missing " + what + " " + p.string());
}

inline std::vector<Pose> lidar_poses(const KittiLayout& layout, int seq) {
  require_file(layout.pose_file(seq), "pose file", seq);
  require_file(layout.calib_file(seq), "calibration", seq);
  return poses_to_lidar_frame(read_kitti_poses(layout.pose_file(seq)), read_calibration(layout.calib_file(seq)));
}

inline void export_frame_images(const fs::path& dir, std::size_t frame, const ProjectedFrame& f) {
  fs::create_directories(dir);
  char stem[32];
  std::snprintf(stem, sizeof stem, "%06zu", frame);
  write_pgm(dir / (std::string(stem) + "_depth.pgm"), f.height, f.width, f.depth);
  write_pgm(dir / (std::string(stem) + "_intensity.pgm"), f.height, f.width, f.intensity);
  write_ppm(dir / (std::string(stem) + "_normals.ppm"), f.height, f.width, normals_to_rgb(f));
}

inline ManifestEntry preprocess_sequence(const RunConfig& cfg, int seq) {
  const KittiLayout layout{cfg.dataset_root};
  const OutputLayout out{cfg.output_dir};
  if (!fs::is_directory(layout.velodyne_dir(seq)))
    throw DataError("sequence " + sequence_name(seq) + ": missing velodyne directory " +
                    layout.velodyne_dir(seq).string());
  const std::vector<Pose> poses = lidar_poses(layout, seq);
  const std::size_t n = layout.scan_count(seq);
  if (n == 0) throw DataError("sequence " + sequence_name(seq) + ": no scans in " + layout.velodyne_dir(seq).string());
  if (poses.size() != n)
    throw DataError("sequence " + sequence_name(seq) + ": " + std::to_string(n) + " scans but " +
                    std::to_string(poses.size()) + " poses in " + layout.pose_file(seq).string());
  fs::create_directories(out.sequence_cache(seq));
  std::vector<std::uint64_t> sums(n);
  parallel_for(n, cfg.workers, [&](std::size_t i) {
    const fs::path scan = layout.scan_file(seq, i);
    LoadedScan loaded = read_velodyne_bin(scan);
    loaded.cloud.frame_index = i;
    const ProjectedFrame frame = project_scan(loaded.cloud, cfg.projection);
    const auto bytes = encode_frame_blob(to_channels(frame));
    sums[i] = fnv1a(bytes.data(), bytes.size());
    std::ofstream blob(out.frame_blob(seq, i), std::ios::binary | std::ios::trunc);
    blob.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!blob) throw DataError("write failure on " + out.frame_blob(seq, i).string());
    if (cfg.export_images) export_frame_images(out.sequence_cache(seq) / "images", i, frame);
  });
  std::ostringstream ps;
  write_kitti_poses(ps, poses, 17);
  write_text(out.cached_poses(seq), ps.str());
  std::uint64_t h = fnv1a(nullptr, 0);
  for (std::uint64_t s : sums) {
    unsigned char b[8];
    for (int k = 0; k < 8; ++k) b[k] = static_cast<unsigned char>(s >> (8 * k));
    h = fnv1a(b, 8, h);
  }
  const std::string pose_text = ps.str();
  h = fnv1a(reinterpret_cast<const unsigned char*>(pose_text.data()), pose_text.size(), h);
  return {seq, n, hex64(h)};
}

inline std::vector<ManifestEntry> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  std::vector<ManifestEntry> out;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string seq, frames, sum;
    std::getline(ss, seq, ',');
    std::getline(ss, frames, ',');
    std::getline(ss, sum, ',');
    try {
      out.push_back({std::stoi(seq), static_cast<std::size_t>(std::stoull(frames)), sum});
    } catch (const std::exception&) {
      throw DataError(path.string() + ": malformed manifest line '" + line + "'");
    }
  }
  return out;
}

inline std::vector<ManifestEntry> cmd_preprocess(const RunConfig& cfg) {
  const OutputLayout out{cfg.output_dir};
  out.create();
  write_effective_config(cfg, "preprocess");
  std::vector<ManifestEntry> entries;
  for (int seq : split_sequences(cfg)) {
    entries.push_back(preprocess_sequence(cfg, seq));
    log::info("preprocessed sequence " + sequence_name(seq) + ": " + std::to_string(entries.back().frames) + " frames");
  }
  std::ostringstream ms;
  ms << "sequence,frames,checksum\n";
  for (const auto& e : entries) ms << sequence_name(e.sequence) << ',' << e.frames << ',' << e.checksum << '\n';
  write_text(out.manifest(), ms.str());
  return entries;
}

struct CachedSequence {
  std::shared_ptr<const std::vector<FrameChannels>> frames;
  std::vector<Pose> poses;
};

inline CachedSequence load_cached_sequence(const RunConfig& cfg, int seq, std::size_t frames) {
  const OutputLayout out{cfg.output_dir};
  auto channels = std::make_shared<std::vector<FrameChannels>>(frames);
  parallel_for(frames, cfg.workers, [&](std::size_t i) {
    const fs::path p = out.frame_blob(seq, i);
    if (!fs::exists(p)) throw DataError("sequence " + sequence_name(seq) + ": missing cached frame " + p.string());
    (*channels)[i] = read_frame_blob(p);
    if ((*channels)[i].height != cfg.projection.height || (*channels)[i].width != cfg.projection.width)
      throw DataError(p.string() + ": cached frame is " + std::to_string((*channels)[i].height) + "x" +
                      std::to_string((*channels)[i].width) + ", config expects " +
                      std::to_string(cfg.projection.height) + "x" + std::to_string(cfg.projection.width));
  });
  return {channels, read_kitti_poses(out.cached_poses(seq))};
}

// Cached frames of every split sequence; preprocesses first when the cache is absent.
inline std::map<int, CachedSequence> load_cache(const RunConfig& cfg) {
  const OutputLayout out{cfg.output_dir};
  if (!fs::exists(out.manifest())) cmd_preprocess(cfg);
  std::map<int, ManifestEntry> manifest;
  for (const auto& e : read_manifest(out.manifest())) manifest[e.sequence] = e;
  std::map<int, CachedSequence> result;
  for (int seq : split_sequences(cfg)) {
    if (!manifest.count(seq)) {
      manifest[seq] = preprocess_sequence(cfg, seq);
    }
    result[seq] = load_cached_sequence(cfg, seq, manifest[seq].frames);
  }
  return result;
}

// ---------------------------------------------------------------------------
// train

struct TrainOutcome {
  std::vector<EpochRecord> epochs;
  fs::path checkpoint;
  std::size_t samples = 0;
};

inline std::string epoch_row(const EpochRecord& r) {
  return std::to_string(r.epoch) + "," + format_real(r.mean_loss, 17) + "," + format_real(r.translation_loss, 17) +
         "," + format_real(r.rotation_loss, 17) + "," + format_real(r.wall_seconds, 6) + "\n";
}

inline std::vector<SequenceSample> training_samples(const RunConfig& cfg) {
  const auto cache = load_cache(cfg);
  std::vector<SequenceSample> samples;
  for (int seq : sequence_split(cfg.split).train) {
    const CachedSequence& c = cache.at(seq);
    auto s = make_samples(c.frames, c.poses, cfg.model.sequence_length);
    samples.insert(samples.end(), s.begin(), s.end());
  }
  return samples;
}

inline TrainOutcome cmd_train(const RunConfig& cfg, const std::optional<fs::path>& resume = std::nullopt,
                              std::ostream* progress = nullptr) {
  const OutputLayout out{cfg.output_dir};
  out.create();
  write_effective_config(cfg, "train");
  TrainOutcome outcome;
  const std::vector<SequenceSample> samples = training_samples(cfg);
  outcome.samples = samples.size();
  if (samples.empty()) throw DataError("train: the training sequences yield no samples");

  LorconNet<float> model(cfg.model, cfg.train.seed);
  nn::Adagrad<float> opt(cfg.train.learning_rate);
  int start_epoch = 0;
  if (resume) {
    start_epoch = static_cast<int>(restore_checkpoint(model, &opt, nn::Checkpoint::load(*resume)));
    log::info("resuming after epoch " + std::to_string(start_epoch) + " from " + resume->string());
  }

  std::ofstream logf;
  if (resume && fs::exists(out.train_log())) {
    // Keep the rows up to the resumed epoch so the log reads like one run.
    std::ifstream in(out.train_log());
    std::string line, kept;
    while (std::getline(in, line)) {
      if (!line.empty() && line[0] != '#' && line.rfind("epoch,", 0) != 0 && std::stoi(line) > start_epoch) break;
      kept += line + "\n";
    }
    in.close();
    logf.open(out.train_log(), std::ios::trunc);
    logf << kept;
  } else {
    logf.open(out.train_log(), std::ios::trunc);
    std::istringstream cfg_text(to_json(cfg).dump(2));
    std::string line;
    while (std::getline(cfg_text, line)) logf << "# " << line << '\n';
    logf << "epoch,mean_loss,translation_loss,rotation_loss,wall_seconds\n";
  }
  if (!logf) throw DataError("cannot write " + out.train_log().string());

  auto save = [&](int epoch) {
    const nn::Checkpoint ck = make_checkpoint(model, &opt, epoch);
    ck.save(out.checkpoint(epoch));
    ck.save(out.latest_checkpoint());
    outcome.checkpoint = out.checkpoint(epoch);
  };
  if (start_epoch >= cfg.train.epochs) {
    save(start_epoch);
    return outcome;
  }

  TrainCallbacks cb;
  const int report_every = std::max(1, cfg.train.epochs / 20);
  cb.on_epoch = [&](const EpochRecord& r) {
    logf << epoch_row(r) << std::flush;
    if (progress && (r.epoch % report_every == 0 || r.epoch == cfg.train.epochs))
      *progress << "epoch " << r.epoch << " loss " << format_real(r.mean_loss, 6) << '\n' << std::flush;
  };
  cb.on_checkpoint = save;
  try {
    outcome.epochs = train(model, opt, samples, cfg.train, start_epoch, cb);
  } catch (const NumericalError& e) {
    const std::string kept = fs::exists(out.latest_checkpoint()) ? out.latest_checkpoint().string() : "none";
    throw NumericalError(std::string(e.what()) + " (last good checkpoint: " + kept + ")");
  }
  if (progress && !outcome.epochs.empty())
    *progress << "final epoch " << outcome.epochs.back().epoch << " loss "
              << format_real(outcome.epochs.back().mean_loss, 8) << '\n';
  return outcome;
}

// ---------------------------------------------------------------------------
// infer

struct InferOutcome {
  std::vector<RelPose6D> motions;
  std::vector<Pose> trajectory;
  fs::path relative_csv;
  fs::path kitti;
};

// Frames of one sequence: from the cache when present, else projected from the raw scans.
inline std::shared_ptr<const std::vector<FrameChannels>> sequence_frames(const RunConfig& cfg, int seq) {
  const OutputLayout out{cfg.output_dir};
  if (fs::exists(out.frame_blob(seq, 0))) {
    std::size_t n = 0;
    while (fs::exists(out.frame_blob(seq, n))) ++n;
    return load_cached_sequence(cfg, seq, n).frames;
  }
  const KittiLayout layout{cfg.dataset_root};
  const std::size_t n = layout.scan_count(seq);
  if (n == 0)
    throw DataError("sequence " + sequence_name(seq) + ": no cached frames and no scans in " +
                    layout.velodyne_dir(seq).string());
  auto frames = std::make_shared<std::vector<FrameChannels>>(n);
  parallel_for(n, cfg.workers, [&](std::size_t i) {
    (*frames)[i] = to_channels(project_scan(read_velodyne_bin(layout.scan_file(seq, i)).cloud, cfg.projection));
  });
  return frames;
}

inline InferOutcome cmd_infer(const RunConfig& cfg, const fs::path& checkpoint, int seq) {
  const OutputLayout out{cfg.output_dir};
  out.create();
  write_effective_config(cfg, "infer");
  LorconNet<float> model(cfg.model, cfg.train.seed);
  restore_checkpoint<float>(model, nullptr, nn::Checkpoint::load(checkpoint));
  const auto frames = sequence_frames(cfg, seq);

  InferOutcome r;
  r.motions = infer_sequence(model, frames, cfg.model.sequence_length, cfg.train.batch_size);
  r.trajectory = accumulate(Pose::identity(), r.motions);
  r.relative_csv = out.trajectories() / (sequence_name(seq) + "_relative.csv");
  r.kitti = out.trajectories() / (sequence_name(seq) + ".txt");
  std::ostringstream rel;
  write_motion_csv(rel, r.motions);
  write_text(r.relative_csv, rel.str());
  export_trajectory(r.trajectory, r.kitti, TrajectoryFormat::kKitti);

  // Ground truth in the same (lidar, first-frame) coordinates, for eval.
  const KittiLayout layout{cfg.dataset_root};
  if (fs::exists(layout.pose_file(seq)) && fs::exists(layout.calib_file(seq))) {
    std::vector<Pose> gt = lidar_poses(layout, seq);
    if (gt.size() == r.trajectory.size()) {
      const Pose origin = gt.front().inverse();
      for (Pose& p : gt) p = origin * p;
      export_trajectory(gt, out.trajectories() / (sequence_name(seq) + "_gt.txt"), TrajectoryFormat::kKitti);
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOutcome {
  SegmentErrorReport segments;
  InstantaneousReport instantaneous;
};

inline EvalOutcome cmd_eval(const RunConfig& cfg, const fs::path& gt_path, const fs::path& pred_path,
                            std::ostream& out) {
  for (const auto& p : {gt_path, pred_path})
    if (!fs::exists(p)) throw DataError("cannot open trajectory " + p.string());
  const std::vector<Pose> gt = read_kitti_poses(gt_path);
  const std::vector<Pose> pred = read_kitti_poses(pred_path);
  if (gt.size() != pred.size())
    throw DataError("eval: ground truth " + gt_path.string() + " has " + std::to_string(gt.size()) +
                    " poses, prediction " + pred_path.string() + " has " + std::to_string(pred.size()));
  if (gt.size() < 2) throw DataError("eval: trajectories need at least 2 poses");
  const OutputLayout layout{cfg.output_dir};
  layout.create();
  write_effective_config(cfg, "eval");

  EvalOutcome r;
  r.segments = segment_errors(gt, pred, cfg.eval.segments, cfg.workers);
  r.instantaneous = instantaneous_rmse(consecutive_motions(gt), consecutive_motions(pred));
  std::ostringstream seg, inst;
  write_report_csv(seg, r.segments);
  write_instantaneous_csv(inst, r.instantaneous);
  write_text(layout.reports() / "segment_errors.csv", seg.str());
  write_text(layout.reports() / "instantaneous.csv", inst.str());
  print_report_table(out, r.segments, r.instantaneous, cfg.eval.aggregation);
  return r;
}

// ---------------------------------------------------------------------------
// gradcheck

inline bool cmd_gradcheck(const GradCheckSuiteOptions& opts, std::ostream& out) {
  const auto rows = run_gradcheck_suite(opts);
  return print_gradcheck_report(out, rows);
}

}  // namespace lorcon::cli
