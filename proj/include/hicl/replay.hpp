#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "hicl/data.hpp"
#include "hicl/rng.hpp"

namespace hicl {

/// One stored example. `label` is task-local.
struct ReplayItem {
  std::vector<double> input;
  std::size_t label = 0;
  std::size_t task_id = 0;
  double priority = 1.0;
  double last_loss = 0.0;
};

/// Position of an item inside a ReplayBuffer.
struct ReplaySlot {
  std::size_t task = 0;
  std::size_t index = 0;

  bool operator==(const ReplaySlot&) const = default;
};

/// Indices of a uniform sample of min(capacity, population) elements drawn
/// with reservoir sampling (Algorithm R), returned ascending.
std::vector<std::size_t> reservoir_sample(std::size_t population, std::size_t capacity, Rng& rng);

/// Per-task episodic memory sampled in proportion to priority^alpha.
class ReplayBuffer {
 public:
  static constexpr double kPriorityFloor = 1e-3;

  ReplayBuffer(std::size_t capacity_per_task, double alpha, std::uint64_t seed);

  std::size_t capacity_per_task() const noexcept { return capacity_; }
  double alpha() const noexcept { return alpha_; }
  std::size_t size() const;
  bool empty() const { return size() == 0; }
  std::size_t task_count() const noexcept { return tasks_.size(); }
  const std::vector<ReplayItem>& items(std::size_t task) const { return tasks_.at(task); }
  const ReplayItem& at(const ReplaySlot& slot) const { return tasks_.at(slot.task).at(slot.index); }

  /// Reservoir-samples the task's training rows. Priorities start at
  /// losses[row] + 1e-3. Tasks must arrive in order.
  void populate(const LabeledData& data, std::size_t task_id, std::span<const double> losses);

  /// n distinct slots, drawn without replacement with probability proportional
  /// to priority^alpha (exponential-key weighted sampling). Returns every slot
  /// when n >= size(). Ascending (task, index) order.
  std::vector<ReplaySlot> sample(std::size_t n);

  std::vector<ReplayItem> gather(std::span<const ReplaySlot> slots) const;

  /// priority <- |loss| + 1e-3 for each sampled slot.
  void update_priorities(std::span<const ReplaySlot> slots, std::span<const double> losses);

  /// Single-draw probability of `slot`, normalized over the whole buffer.
  double probability(const ReplaySlot& slot) const;

 private:
  std::size_t capacity_;
  double alpha_;
  std::vector<std::vector<ReplayItem>> tasks_;
  Rng rng_;
};

}  // namespace hicl
