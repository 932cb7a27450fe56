#include "hicl/config.hpp"

#include <algorithm>
#include <fstream>
#include <initializer_list>

namespace hicl {

namespace {

void require_keys(const nlohmann::json& j, const char* section, std::initializer_list<const char*> known) {
  if (!j.is_object()) throw ConfigError(std::string(section) + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(known.begin(), known.end(), [&key](const char* k) { return key == k; })) {
      throw ConfigError("unknown key '" + key + "' in " + section);
    }
  }
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

DataKind parse_data_kind(const std::string& s) {
  if (s == "synthetic") return DataKind::synthetic;
  if (s == "idx") return DataKind::idx;
  if (s == "csv") return DataKind::csv;
  throw ConfigError("data.kind must be synthetic, idx or csv, got '" + s + "'");
}

std::string to_string(DataKind k) {
  switch (k) {
    case DataKind::synthetic: return "synthetic";
    case DataKind::idx: return "idx";
    case DataKind::csv: return "csv";
  }
  return "synthetic";
}

LossWeights weights_from_json(const nlohmann::json& j) {
  require_keys(j, "weights",
               {"alpha_intra", "alpha_rep", "alpha_dist", "alpha_ewc", "alpha_s", "alpha_contrastive", "lambda1",
                "lambda2", "lambda3", "lambda4", "m_intra", "m_contrastive", "lambda_push", "ewc_floor",
                "sparsity_temperature", "intra_pair_mean", "phase2_cross_form"});
  LossWeights w;
  read(j, "alpha_intra", w.alpha_intra);
  read(j, "alpha_rep", w.alpha_rep);
  read(j, "alpha_dist", w.alpha_dist);
  read(j, "alpha_ewc", w.alpha_ewc);
  read(j, "alpha_s", w.alpha_s);
  read(j, "alpha_contrastive", w.alpha_contrastive);
  read(j, "lambda1", w.lambda1);
  read(j, "lambda2", w.lambda2);
  read(j, "lambda3", w.lambda3);
  read(j, "lambda4", w.lambda4);
  read(j, "m_intra", w.m_intra);
  read(j, "m_contrastive", w.m_contrastive);
  read(j, "lambda_push", w.lambda_push);
  read(j, "ewc_floor", w.ewc_floor);
  read(j, "sparsity_temperature", w.sparsity_temperature);
  read(j, "intra_pair_mean", w.intra_pair_mean);
  read(j, "phase2_cross_form", w.phase2_cross_form);
  return w;
}

TrainSchedule schedule_from_json(const nlohmann::json& j) {
  require_keys(j, "schedule",
               {"epochs_phase1", "epochs_phase2", "batch_size", "replay_batch_size", "fisher_samples", "lr", "beta1",
                "beta2", "eps", "phase2_lr", "phase2_current", "phase2_replay"});
  TrainSchedule s;
  read(j, "epochs_phase1", s.epochs_phase1);
  read(j, "epochs_phase2", s.epochs_phase2);
  read(j, "batch_size", s.batch_size);
  read(j, "replay_batch_size", s.replay_batch_size);
  read(j, "fisher_samples", s.fisher_samples);
  read(j, "lr", s.adam.lr);
  read(j, "beta1", s.adam.beta1);
  read(j, "beta2", s.adam.beta2);
  read(j, "eps", s.adam.eps);
  read(j, "phase2_lr", s.phase2_lr);
  read(j, "phase2_current", s.phase2_current);
  read(j, "phase2_replay", s.phase2_replay);
  return s;
}

DataConfig data_from_json(const nlohmann::json& j, const std::filesystem::path& base, std::uint64_t run_seed) {
  require_keys(j, "data",
               {"kind", "n_tasks", "classes_per_task", "dim", "separation", "noise", "train_per_class",
                "test_per_class", "seed", "train_images", "train_labels", "test_images", "test_labels", "train",
                "test"});
  DataConfig d;
  d.kind = parse_data_kind(j.value("kind", std::string("synthetic")));
  read(j, "n_tasks", d.n_tasks);
  SyntheticSpec& s = d.synthetic;
  s.seed = run_seed;
  s.n_tasks = d.n_tasks;
  read(j, "classes_per_task", s.classes_per_task);
  read(j, "dim", s.dim);
  read(j, "separation", s.separation);
  read(j, "noise", s.noise);
  read(j, "train_per_class", s.train_per_class);
  read(j, "test_per_class", s.test_per_class);
  read(j, "seed", s.seed);
  if (d.n_tasks == 0) throw ConfigError("data.n_tasks must be positive");

  auto path = [&](const char* key, std::filesystem::path& out, bool required) {
    if (j.contains(key)) {
      out = resolve(base, j.at(key).get<std::string>());
    } else if (required) {
      throw ConfigError(std::string("data.") + key + " is required for kind " + to_string(d.kind));
    }
  };
  if (d.kind == DataKind::synthetic) {
    if (!(s.separation > 0.0)) throw ConfigError("data.separation must be > 0");
    if (!(s.noise >= 0.0)) throw ConfigError("data.noise must be >= 0");
    if (s.classes_per_task == 0 || s.dim == 0) throw ConfigError("data.classes_per_task and data.dim must be positive");
  } else if (d.kind == DataKind::idx) {
    path("train_images", d.train_images, true);
    path("train_labels", d.train_labels, true);
    path("test_images", d.test_images, false);
    path("test_labels", d.test_labels, false);
    if (d.test_images.empty() != d.test_labels.empty()) {
      throw ConfigError("data.test_images and data.test_labels must be given together");
    }
  } else {
    path("train", d.train_csv, true);
    path("test", d.test_csv, false);
  }
  return d;
}

nlohmann::json data_to_json(const DataConfig& d) {
  nlohmann::json j{{"kind", to_string(d.kind)}, {"n_tasks", d.n_tasks}};
  if (d.kind == DataKind::synthetic) {
    const SyntheticSpec& s = d.synthetic;
    j.update({{"classes_per_task", s.classes_per_task},
              {"dim", s.dim},
              {"separation", s.separation},
              {"noise", s.noise},
              {"train_per_class", s.train_per_class},
              {"test_per_class", s.test_per_class},
              {"seed", s.seed}});
  } else if (d.kind == DataKind::idx) {
    j["train_images"] = d.train_images.generic_string();
    j["train_labels"] = d.train_labels.generic_string();
    if (!d.test_images.empty()) {
      j["test_images"] = d.test_images.generic_string();
      j["test_labels"] = d.test_labels.generic_string();
    }
  } else {
    j["train"] = d.train_csv.generic_string();
    if (!d.test_csv.empty()) j["test"] = d.test_csv.generic_string();
  }
  return j;
}

}  // namespace

nlohmann::json to_json(const LossWeights& w) {
  return nlohmann::json{{"alpha_intra", w.alpha_intra},
                        {"alpha_rep", w.alpha_rep},
                        {"alpha_dist", w.alpha_dist},
                        {"alpha_ewc", w.alpha_ewc},
                        {"alpha_s", w.alpha_s},
                        {"alpha_contrastive", w.alpha_contrastive},
                        {"lambda1", w.lambda1},
                        {"lambda2", w.lambda2},
                        {"lambda3", w.lambda3},
                        {"lambda4", w.lambda4},
                        {"m_intra", w.m_intra},
                        {"m_contrastive", w.m_contrastive},
                        {"lambda_push", w.lambda_push},
                        {"ewc_floor", w.ewc_floor},
                        {"sparsity_temperature", w.sparsity_temperature},
                        {"intra_pair_mean", w.intra_pair_mean},
                        {"phase2_cross_form", w.phase2_cross_form}};
}

nlohmann::json to_json(const TrainSchedule& s) {
  return nlohmann::json{{"epochs_phase1", s.epochs_phase1},
                        {"epochs_phase2", s.epochs_phase2},
                        {"batch_size", s.batch_size},
                        {"replay_batch_size", s.replay_batch_size},
                        {"fisher_samples", s.fisher_samples},
                        {"lr", s.adam.lr},
                        {"beta1", s.adam.beta1},
                        {"beta2", s.adam.beta2},
                        {"eps", s.adam.eps},
                        {"phase2_lr", s.phase2_lr},
                        {"phase2_current", s.phase2_current},
                        {"phase2_replay", s.phase2_replay}};
}

RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  require_keys(j, "config",
               {"seed", "model", "weights", "schedule", "buffer_per_task", "alpha_per", "gate_mode",
                "strict_paper_objective", "data", "output_dir"});
  RunConfig c;
  TrainerConfig& t = c.trainer;
  try {
    read(j, "seed", t.seed);
    nlohmann::json model = j.value("model", nlohmann::json::object());
    if (!model.is_object()) throw ConfigError("model must be a JSON object");
    c.data = data_from_json(j.value("data", nlohmann::json::object()), base_dir, t.seed);
    c.infer_input_dim = !model.contains("input_dim");
    c.infer_num_classes = !model.contains("num_classes");
    if (c.data.kind == DataKind::synthetic) {
      if (c.infer_input_dim) model["input_dim"] = c.data.synthetic.dim;
      if (c.infer_num_classes) model["num_classes"] = c.data.synthetic.classes_per_task;
      c.infer_input_dim = c.infer_num_classes = false;
    }
    t.model = model_config_from_json(model);
    const nlohmann::json weights = j.value("weights", nlohmann::json::object());
    t.weights = weights_from_json(weights);
    read(j, "strict_paper_objective", c.strict_paper_objective);
    if (c.strict_paper_objective) {
      if (!weights.contains("lambda3")) t.weights.lambda3 = 1.0;
      if (!weights.contains("lambda4")) t.weights.lambda4 = 1.0;
    }
    t.schedule = schedule_from_json(j.value("schedule", nlohmann::json::object()));
    read(j, "buffer_per_task", t.buffer_per_task);
    read(j, "alpha_per", t.alpha_per);
    if (j.contains("gate_mode")) t.gate_mode = parse_gate_mode(j.at("gate_mode").get<std::string>());
    if (j.contains("output_dir")) c.output_dir = resolve(base_dir, j.at("output_dir").get<std::string>());
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("config: ") + ex.what());
  }
  if (c.data.kind == DataKind::synthetic) t.validate();
  return c;
}

nlohmann::json to_json(const RunConfig& c) {
  const TrainerConfig& t = c.trainer;
  nlohmann::json j{{"seed", t.seed},
                   {"model", to_json(t.model)},
                   {"weights", to_json(t.weights)},
                   {"schedule", to_json(t.schedule)},
                   {"buffer_per_task", t.buffer_per_task},
                   {"alpha_per", t.alpha_per},
                   {"gate_mode", to_string(t.gate_mode)},
                   {"strict_paper_objective", c.strict_paper_objective},
                   {"data", data_to_json(c.data)}};
  if (!c.output_dir.empty()) j["output_dir"] = c.output_dir.generic_string();
  return j;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& ex) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + ex.what());
  }
  return run_config_from_json(j, path.parent_path());
}

TaskStream load_stream(const DataConfig& data) {
  switch (data.kind) {
    case DataKind::synthetic: {
      SyntheticSpec spec = data.synthetic;
      spec.n_tasks = data.n_tasks;
      return make_synthetic_stream(spec);
    }
    case DataKind::idx: {
      const LabeledData train = load_idx(data.train_images, data.train_labels);
      const LabeledData test = data.test_images.empty() ? LabeledData{} : load_idx(data.test_images, data.test_labels);
      return split_dataset(train, test, data.n_tasks, Provenance::idx_dataset);
    }
    case DataKind::csv: {
      const LabeledData train = load_csv(data.train_csv);
      const LabeledData test = data.test_csv.empty() ? LabeledData{} : load_csv(data.test_csv);
      return split_dataset(train, test, data.n_tasks, Provenance::csv_dataset);
    }
  }
  throw ConfigError("unknown data kind");
}

TaskStream prepare(RunConfig& config) {
  TaskStream stream = load_stream(config.data);
  stream.validate();
  EncoderConfig& e = config.trainer.model.encoder;
  if (config.infer_input_dim) e.input_dim = stream.input_dim();
  if (config.infer_num_classes) e.num_classes = stream.classes_per_task();
  config.infer_input_dim = config.infer_num_classes = false;
  config.trainer.validate();
  return stream;
}

}  // namespace hicl
