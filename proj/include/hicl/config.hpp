#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "hicl/data.hpp"
#include "hicl/trainer.hpp"

namespace hicl {

enum class DataKind { synthetic, idx, csv };

/// Where a run's tasks come from. Relative paths are resolved against the
/// directory of the config file that named them.
struct DataConfig {
  DataKind kind = DataKind::synthetic;
  SyntheticSpec synthetic;
  std::size_t n_tasks = 5;
  std::filesystem::path train_images, train_labels, test_images, test_labels;  // idx
  std::filesystem::path train_csv, test_csv;                                   // csv
};

struct RunConfig {
  TrainerConfig trainer;
  DataConfig data;
  /// Count the EWC and replay terms a second time through lambda3/lambda4.
  bool strict_paper_objective = false;
  std::filesystem::path output_dir;
  /// Set when the config omitted the value, so it is taken from the data.
  bool infer_input_dim = true;
  bool infer_num_classes = true;
};

/// Parses a run config. Unknown keys raise ConfigError. model.input_dim and
/// model.num_classes default to the values implied by the data section.
RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
nlohmann::json to_json(const RunConfig& config);

/// Reads and parses a config file; a missing or unreadable file raises IoError.
RunConfig load_run_config(const std::filesystem::path& path);

/// Builds the task stream described by `data`; file problems raise IoError or FormatError.
TaskStream load_stream(const DataConfig& data);

/// Loads the stream and fills the inferred model dimensions from it.
TaskStream prepare(RunConfig& config);

nlohmann::json to_json(const LossWeights& w);
nlohmann::json to_json(const TrainSchedule& s);

}  // namespace hicl
