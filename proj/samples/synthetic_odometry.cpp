// Train the desk-scale network on a synthetic arc, predict the trajectory of a
// held-out sequence and print its errors.
//
//   synthetic_odometry [epochs]

#include <cstdlib>
#include <iostream>

#include "lorcon/evaluation.hpp"
#include "lorcon/model.hpp"
#include "lorcon/synthetic.hpp"

using namespace lorcon;

namespace {

synthetic::SyntheticDataset make_sequence(std::uint64_t seed, std::size_t frames, const ProjectionConfig& cfg) {
  synthetic::TrajectorySpec spec;
  spec.frames = frames;
  spec.motion = synthetic::Motion::kArc;
  spec.seed = seed;
  return synthetic::make_synthetic_dataset(synthetic::default_world(seed), synthetic::generate_trajectory(spec),
                                           synthetic::LidarModel::matching(cfg), cfg);
}

}  // namespace

int main(int argc, char** argv) {
  const ModelConfig mcfg = ModelConfig::desk();
  TrainConfig tcfg = TrainConfig::desk();
  tcfg.epochs = argc > 1 ? std::atoi(argv[1]) : 100;

  ProjectionConfig pcfg;
  pcfg.height = mcfg.height;
  pcfg.width = mcfg.width;

  const auto train_seq = make_sequence(1, 40, pcfg);
  const auto test_seq = make_sequence(2, 24, pcfg);
  const auto samples = make_samples(train_seq.frames, train_seq.poses, mcfg.sequence_length);

  LorconNet<float> model(mcfg, tcfg.seed);
  nn::Adagrad<float> opt(tcfg.learning_rate);
  TrainCallbacks cb;
  cb.on_epoch = [&](const EpochRecord& r) {
    if (r.epoch == 1 || r.epoch % 20 == 0) std::cout << "epoch " << r.epoch << " loss " << r.mean_loss << '\n';
  };
  train(model, opt, samples, tcfg, 0, cb);

  auto channels = std::make_shared<std::vector<FrameChannels>>();
  for (const auto& f : test_seq.frames) channels->push_back(to_channels(f));
  const auto motions = infer_sequence(model, channels, mcfg.sequence_length);
  const auto predicted = accumulate(test_seq.poses.front(), motions);

  const auto truth = consecutive_motions(test_seq.poses);
  const auto inst = instantaneous_rmse(truth, motions);
  std::cout << "frames " << predicted.size() << ", final position error "
            << (predicted.back().translation - test_seq.poses.back().translation).norm() << " m\n"
            << "instantaneous rmse: translation " << inst.translation_rmse << " m, rotation " << inst.rotation_rmse
            << " rad\n";
  return 0;
}
