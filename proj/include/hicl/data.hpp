#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hicl/tensor.hpp"

namespace hicl {

enum class Provenance { synthetic, idx_dataset, csv_dataset };

std::string to_string(Provenance p);

/// Flattened inputs [n x dim] with integer labels.
struct LabeledData {
  Tensor inputs;
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
};

/// One task of a split stream. Labels are task-local (0..classes.size()-1);
/// `classes` maps them back to the global label space.
struct TaskData {
  std::size_t task_id = 0;
  LabeledData train;
  LabeledData test;
  std::vector<std::size_t> classes;

  std::size_t global_label(std::size_t local) const { return classes.at(local); }
};

struct TaskStream {
  std::vector<TaskData> tasks;
  Provenance provenance = Provenance::synthetic;

  std::size_t input_dim() const;
  std::size_t classes_per_task() const;
  /// Disjoint class lists and label ranges; throws DataError otherwise.
  void validate() const;
};

struct SyntheticSpec {
  std::size_t n_tasks = 5;
  std::size_t classes_per_task = 2;
  std::size_t dim = 64;
  double separation = 4.0;
  double noise = 1.0;
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 100;
  std::uint64_t seed = 0;
};

/// Isotropic Gaussian blob per class, means drawn uniformly on the sphere of
/// radius `separation`, then all values min-max scaled into [0, 1] with one
/// global affine map. Deterministic per seed.
TaskStream make_synthetic_stream(const SyntheticSpec& spec);

/// Sorts the distinct classes ascending and gives each task a contiguous chunk.
/// `test` may be empty, in which case every task's test split is empty too.
TaskStream split_dataset(const LabeledData& train, const LabeledData& test, std::size_t n_tasks,
                         Provenance provenance = Provenance::idx_dataset);

// IDX files: big-endian magic 0x00000803 (u8 images, 3 dims) or 0x00000801 (u8 labels, 1 dim).
struct IdxArray {
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> bytes;
};

IdxArray read_idx(const std::filesystem::path& path);
void write_idx(const std::filesystem::path& path, const IdxArray& array);

/// Images scaled to [0, 1] and flattened row-major; labels validated against `num_classes` when nonzero.
LabeledData load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                     std::size_t num_classes = 0);

/// CSV rows "label,v1,v2,..." with values already in [0, 1]. A non-numeric first line is skipped as a header.
LabeledData load_csv(const std::filesystem::path& path);

}  // namespace hicl
