#include "hicl/replay.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace hicl {

std::vector<std::size_t> reservoir_sample(std::size_t population, std::size_t capacity, Rng& rng) {
  std::vector<std::size_t> reservoir;
  reservoir.reserve(std::min(population, capacity));
  for (std::size_t i = 0; i < population; ++i) {
    if (reservoir.size() < capacity) {
      reservoir.push_back(i);
      continue;
    }
    std::uniform_int_distribution<std::size_t> pick(0, i);
    const std::size_t j = pick(rng);
    if (j < capacity) reservoir[j] = i;
  }
  std::sort(reservoir.begin(), reservoir.end());
  return reservoir;
}

ReplayBuffer::ReplayBuffer(std::size_t capacity_per_task, double alpha, std::uint64_t seed)
    : capacity_(capacity_per_task), alpha_(alpha), rng_(make_rng(seed, "replay")) {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ParameterError("replay priority exponent must be >= 0");
}

std::size_t ReplayBuffer::size() const {
  std::size_t n = 0;
  for (const auto& t : tasks_) n += t.size();
  return n;
}

void ReplayBuffer::populate(const LabeledData& data, std::size_t task_id, std::span<const double> losses) {
  if (task_id != tasks_.size()) {
    throw ProtocolError("replay buffer expected task " + std::to_string(tasks_.size()) + ", got " +
                        std::to_string(task_id));
  }
  if (losses.size() != data.size()) throw DimensionError("populate: one loss per training row is required");
  std::vector<ReplayItem> stored;
  for (std::size_t row : reservoir_sample(data.size(), capacity_, rng_)) {
    const auto x = data.inputs.row(row);
    const double loss = std::abs(losses[row]);
    stored.push_back(ReplayItem{{x.begin(), x.end()}, data.labels[row], task_id, loss + kPriorityFloor, loss});
  }
  tasks_.push_back(std::move(stored));
}

std::vector<ReplaySlot> ReplayBuffer::sample(std::size_t n) {
  std::vector<std::pair<double, ReplaySlot>> keyed;
  keyed.reserve(size());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t t = 0; t < tasks_.size(); ++t) {
    for (std::size_t i = 0; i < tasks_[t].size(); ++i) {
      // Key log(u)/w: the n largest keys form a weighted sample without replacement.
      double u = unit(rng_);
      if (u <= 0.0) u = std::numeric_limits<double>::min();
      const double w = std::pow(tasks_[t][i].priority, alpha_);
      keyed.push_back({std::log(u) / w, ReplaySlot{t, i}});
    }
  }
  if (n < keyed.size()) {
    std::nth_element(keyed.begin(), keyed.begin() + static_cast<std::ptrdiff_t>(n), keyed.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    keyed.resize(n);
  }
  std::vector<ReplaySlot> slots;
  slots.reserve(keyed.size());
  for (const auto& [key, slot] : keyed) slots.push_back(slot);
  std::sort(slots.begin(), slots.end(),
            [](const ReplaySlot& a, const ReplaySlot& b) { return a.task != b.task ? a.task < b.task : a.index < b.index; });
  return slots;
}

std::vector<ReplayItem> ReplayBuffer::gather(std::span<const ReplaySlot> slots) const {
  std::vector<ReplayItem> out;
  out.reserve(slots.size());
  for (const ReplaySlot& s : slots) out.push_back(at(s));
  return out;
}

void ReplayBuffer::update_priorities(std::span<const ReplaySlot> slots, std::span<const double> losses) {
  if (slots.size() != losses.size()) throw DimensionError("update_priorities: one loss per slot is required");
  for (std::size_t i = 0; i < slots.size(); ++i) {
    ReplayItem& item = tasks_.at(slots[i].task).at(slots[i].index);
    item.last_loss = losses[i];
    item.priority = std::abs(losses[i]) + kPriorityFloor;
  }
}

double ReplayBuffer::probability(const ReplaySlot& slot) const {
  double total = 0.0;
  for (const auto& t : tasks_) {
    for (const ReplayItem& item : t) total += std::pow(item.priority, alpha_);
  }
  return std::pow(at(slot).priority, alpha_) / total;
}

}  // namespace hicl
