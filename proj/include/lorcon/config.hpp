#pragma once

// Run configuration: a JSON document with one section per module. Unknown
// keys are rejected so that typos cannot silently fall back to defaults.

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "lorcon/dataset_io.hpp"
#include "lorcon/errors.hpp"
#include "lorcon/evaluation.hpp"
#include "lorcon/model.hpp"
#include "lorcon/projection.hpp"
#include "lorcon/synthetic.hpp"

namespace lorcon {

using Json = nlohmann::ordered_json;

struct SyntheticConfig {
  std::vector<int> sequences = {0, 1};
  std::size_t frames = 24;
  synthetic::Motion motion = synthetic::Motion::kArc;
  double step = 1.0;
  std::uint64_t seed = 7;
};

struct EvalConfig {
  SegmentOptions segments;
  Aggregation aggregation = Aggregation::kMean;
};

struct RunConfig {
  std::filesystem::path dataset_root = "data";
  std::filesystem::path output_dir = "out";
  int workers = 1;
  bool export_images = false;
  ProjectionConfig projection;
  std::string model_preset = "full";
  ModelConfig model;
  TrainConfig train;
  SplitConfig split;
  EvalConfig eval;
  SyntheticConfig synthetic;

  void validate() const {
    projection.validate();
    model.validate();
    train.validate();
    sequence_split(split);
    if (workers < 1) throw ConfigError("workers must be >= 1");
    if (model.height != projection.height || model.width != projection.width)
      throw ConfigError("model image " + std::to_string(model.height) + "x" + std::to_string(model.width) +
                        " differs from projection " + std::to_string(projection.height) + "x" +
                        std::to_string(projection.width));
    if (eval.segments.lengths.empty()) throw ConfigError("eval.lengths must not be empty");
    if (eval.segments.start_stride < 1) throw ConfigError("eval.stride must be >= 1");
  }
};

namespace detail {

inline void reject_unknown(const Json& obj, const std::string& section,
                           const std::set<std::string>& allowed) {
  if (!obj.is_object()) throw ConfigError("config section '" + section + "' must be an object");
  for (const auto& [key, _] : obj.items()) {
    if (!allowed.count(key))
      throw ConfigError("unknown config key '" + (section.empty() ? key : section + "." + key) + "'");
  }
}

template <typename T>
void read_key(const Json& obj, const std::string& section, const char* key, T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key '" + section + "." + key + "' has the wrong type");
  }
}

inline std::string motion_name(synthetic::Motion m) {
  switch (m) {
    case synthetic::Motion::kStraight: return "straight";
    case synthetic::Motion::kArc: return "arc";
    case synthetic::Motion::kSquare: return "square";
  }
  return "straight";
}

inline synthetic::Motion parse_motion(const std::string& s) {
  if (s == "straight") return synthetic::Motion::kStraight;
  if (s == "arc") return synthetic::Motion::kArc;
  if (s == "square") return synthetic::Motion::kSquare;
  throw ConfigError("synthetic.motion must be straight, arc or square, got '" + s + "'");
}

}  // namespace detail

inline ModelConfig model_preset(const std::string& name) {
  if (name == "full") return ModelConfig::full();
  if (name == "desk") return ModelConfig::desk();
  throw ConfigError("model.preset must be 'full' or 'desk', got '" + name + "'");
}

inline RunConfig parse_config(const Json& j) {
  using detail::read_key;
  RunConfig c;
  detail::reject_unknown(j, "", {"dataset", "output_dir", "workers", "export_images", "projection",
                                 "model", "train", "eval", "synthetic"});
  if (j.contains("dataset")) {
    const Json& d = j.at("dataset");
    detail::reject_unknown(d, "dataset", {"root"});
    std::string root = c.dataset_root.string();
    read_key(d, "dataset", "root", root);
    c.dataset_root = root;
  }
  {
    std::string out = c.output_dir.string();
    read_key(j, "", "output_dir", out);
    c.output_dir = out;
    read_key(j, "", "workers", c.workers);
    read_key(j, "", "export_images", c.export_images);
  }
  // The preset supplies defaults for the model, its image size and training.
  if (j.contains("model") && j.at("model").is_object()) read_key(j.at("model"), "model", "preset", c.model_preset);
  c.model = model_preset(c.model_preset);
  c.train = c.model_preset == "desk" ? TrainConfig::desk() : TrainConfig::full();
  c.projection.height = c.model.height;
  c.projection.width = c.model.width;
  if (j.contains("projection")) {
    const Json& p = j.at("projection");
    detail::reject_unknown(p, "projection", {"width", "height", "fov_up_deg", "fov_down_deg", "max_range"});
    read_key(p, "projection", "width", c.projection.width);
    read_key(p, "projection", "height", c.projection.height);
    double up = c.projection.fov_up * 180.0 / std::numbers::pi;
    double down = c.projection.fov_down * 180.0 / std::numbers::pi;
    read_key(p, "projection", "fov_up_deg", up);
    read_key(p, "projection", "fov_down_deg", down);
    c.projection.fov_up = deg_to_rad(up);
    c.projection.fov_down = deg_to_rad(down);
    read_key(p, "projection", "max_range", c.projection.max_range);
  }
  if (j.contains("model")) {
    const Json& m = j.at("model");
    detail::reject_unknown(m, "model", {"preset", "height", "width", "channels", "strides", "kernel",
                                        "padding", "embed", "hidden", "lstm_layers", "bidirectional",
                                        "dropout", "sequence_length"});
    read_key(m, "model", "height", c.model.height);
    read_key(m, "model", "width", c.model.width);
    read_key(m, "model", "channels", c.model.channels);
    if (m.contains("strides")) {
      std::vector<std::array<int, 2>> s;
      read_key(m, "model", "strides", s);
      c.model.strides.clear();
      for (const auto& p : s) c.model.strides.push_back({p[0], p[1]});
    }
    read_key(m, "model", "kernel", c.model.kernel);
    if (m.contains("padding")) {
      std::array<int, 2> p{};
      read_key(m, "model", "padding", p);
      c.model.padding = {p[0], p[1]};
    }
    read_key(m, "model", "embed", c.model.embed);
    read_key(m, "model", "hidden", c.model.hidden);
    read_key(m, "model", "lstm_layers", c.model.lstm_layers);
    read_key(m, "model", "bidirectional", c.model.bidirectional);
    read_key(m, "model", "dropout", c.model.dropout);
    read_key(m, "model", "sequence_length", c.model.sequence_length);
  }
  if (j.contains("train")) {
    const Json& t = j.at("train");
    detail::reject_unknown(t, "train", {"batch_size", "learning_rate", "epochs", "rotation_weight", "seed",
                                        "checkpoint_every", "loss_steps", "train_sequences", "test_sequences"});
    read_key(t, "train", "batch_size", c.train.batch_size);
    read_key(t, "train", "learning_rate", c.train.learning_rate);
    read_key(t, "train", "epochs", c.train.epochs);
    read_key(t, "train", "rotation_weight", c.train.rotation_weight);
    read_key(t, "train", "seed", c.train.seed);
    read_key(t, "train", "checkpoint_every", c.train.checkpoint_every);
    std::string steps = "all";
    read_key(t, "train", "loss_steps", steps);
    if (steps == "all") c.train.loss_steps = nn::LossSteps::kAll;
    else if (steps == "last") c.train.loss_steps = nn::LossSteps::kLast;
    else throw ConfigError("train.loss_steps must be 'all' or 'last'");
    read_key(t, "train", "train_sequences", c.split.train);
    read_key(t, "train", "test_sequences", c.split.test);
  }
  if (j.contains("eval")) {
    const Json& e = j.at("eval");
    detail::reject_unknown(e, "eval", {"lengths", "aggregation", "stride"});
    read_key(e, "eval", "lengths", c.eval.segments.lengths);
    read_key(e, "eval", "stride", c.eval.segments.start_stride);
    std::string agg = "mean";
    read_key(e, "eval", "aggregation", agg);
    if (agg == "mean") c.eval.aggregation = Aggregation::kMean;
    else if (agg == "rmse") c.eval.aggregation = Aggregation::kRmse;
    else throw ConfigError("eval.aggregation must be 'mean' or 'rmse'");
  }
  if (j.contains("synthetic")) {
    const Json& s = j.at("synthetic");
    detail::reject_unknown(s, "synthetic", {"sequences", "frames", "motion", "step", "seed"});
    read_key(s, "synthetic", "sequences", c.synthetic.sequences);
    read_key(s, "synthetic", "frames", c.synthetic.frames);
    std::string motion = detail::motion_name(c.synthetic.motion);
    read_key(s, "synthetic", "motion", motion);
    c.synthetic.motion = detail::parse_motion(motion);
    read_key(s, "synthetic", "step", c.synthetic.step);
    read_key(s, "synthetic", "seed", c.synthetic.seed);
  }
  c.validate();
  return c;
}

// Effective configuration with every default filled in.
inline Json to_json(const RunConfig& c) {
  Json j;
  j["dataset"] = {{"root", c.dataset_root.string()}};
  j["output_dir"] = c.output_dir.string();
  j["workers"] = c.workers;
  j["export_images"] = c.export_images;
  j["projection"] = {{"width", c.projection.width},
                     {"height", c.projection.height},
                     {"fov_up_deg", c.projection.fov_up * 180.0 / std::numbers::pi},
                     {"fov_down_deg", c.projection.fov_down * 180.0 / std::numbers::pi},
                     {"max_range", c.projection.max_range}};
  Json strides = Json::array();
  for (const auto& s : c.model.strides) strides.push_back({s.vertical, s.horizontal});
  j["model"] = {{"preset", c.model_preset},
                {"height", c.model.height},
                {"width", c.model.width},
                {"channels", c.model.channels},
                {"strides", strides},
                {"kernel", c.model.kernel},
                {"padding", {c.model.padding.vertical, c.model.padding.horizontal}},
                {"embed", c.model.embed},
                {"hidden", c.model.hidden},
                {"lstm_layers", c.model.lstm_layers},
                {"bidirectional", c.model.bidirectional},
                {"dropout", c.model.dropout},
                {"sequence_length", c.model.sequence_length}};
  j["train"] = {{"batch_size", c.train.batch_size},
                {"learning_rate", c.train.learning_rate},
                {"epochs", c.train.epochs},
                {"rotation_weight", c.train.rotation_weight},
                {"seed", c.train.seed},
                {"checkpoint_every", c.train.checkpoint_every},
                {"loss_steps", c.train.loss_steps == nn::LossSteps::kAll ? "all" : "last"},
                {"train_sequences", c.split.train},
                {"test_sequences", c.split.test}};
  j["eval"] = {{"lengths", c.eval.segments.lengths},
               {"aggregation", c.eval.aggregation == Aggregation::kMean ? "mean" : "rmse"},
               {"stride", c.eval.segments.start_stride}};
  j["synthetic"] = {{"sequences", c.synthetic.sequences},
                    {"frames", c.synthetic.frames},
                    {"motion", detail::motion_name(c.synthetic.motion)},
                    {"step", c.synthetic.step},
                    {"seed", c.synthetic.seed}};
  return j;
}

// Applies "section.key=value" overrides. Values are parsed as JSON when
// possible and taken as strings otherwise.
inline void apply_override(Json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(raw);
  } catch (const nlohmann::json::exception&) {
    value = raw;
  }
  Json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string part = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override '" + assignment + "' has an empty key");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      break;
    }
    if (!node->contains(part)) (*node)[part] = Json::object();
    node = &(*node)[part];
    start = dot + 1;
  }
}

inline Json read_config_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config " + path.string());
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
}

}  // namespace lorcon
