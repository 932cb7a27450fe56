#include "hicl/analysis.hpp"

#include <algorithm>
#include <iterator>
#include <sstream>

namespace hicl {

double jaccard(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  std::size_t shared = 0;
  auto i = a.begin();
  auto j = b.begin();
  while (i != a.end() && j != b.end()) {
    if (*i < *j) {
      ++i;
    } else if (*j < *i) {
      ++j;
    } else {
      ++shared;
      ++i;
      ++j;
    }
  }
  const std::size_t uni = a.size() + b.size() - shared;
  return uni == 0 ? 1.0 : static_cast<double>(shared) / static_cast<double>(uni);
}

JaccardAnalysis jaccard_analysis(const HiclModel& model, const TaskStream& stream, std::size_t tasks,
                                 std::size_t pairs_per_cell, std::uint64_t seed) {
  if (tasks == 0 || tasks > stream.tasks.size()) throw ProtocolError("jaccard_analysis: invalid task count");
  for (std::size_t t = 0; t < tasks; ++t) {
    if (stream.tasks[t].test.size() < 2) throw DataError("jaccard_analysis needs at least 2 test samples per task");
  }
  Rng rng = make_rng(seed, "jaccard");
  JaccardAnalysis out;
  out.matrix = Tensor(Shape{tasks, tasks});
  for (std::size_t i = 0; i < tasks; ++i) {
    const std::size_t expert = model.expert_for_task(i);
    std::vector<std::vector<DgCode>> codes;
    for (std::size_t j = 0; j < tasks; ++j) codes.push_back(model.dg_codes(stream.tasks[j].test.inputs, expert));
    for (std::size_t j = 0; j < tasks; ++j) {
      std::uniform_int_distribution<std::size_t> pick_a(0, codes[i].size() - 1);
      std::uniform_int_distribution<std::size_t> pick_b(0, codes[j].size() - 1);
      double total = 0.0;
      for (std::size_t p = 0; p < pairs_per_cell; ++p) {
        const std::size_t a = pick_a(rng);
        std::size_t b = pick_b(rng);
        while (i == j && b == a) b = pick_b(rng);
        total += jaccard(codes[i][a].active_set, codes[j][b].active_set);
      }
      out.matrix.at(i, j) = pairs_per_cell == 0 ? 0.0 : total / static_cast<double>(pairs_per_cell);
    }
  }
  double diag = 0.0, off = 0.0;
  for (std::size_t i = 0; i < tasks; ++i) {
    for (std::size_t j = 0; j < tasks; ++j) (i == j ? diag : off) += out.matrix.at(i, j);
  }
  out.intra = diag / static_cast<double>(tasks);
  out.inter = tasks > 1 ? off / static_cast<double>(tasks * (tasks - 1)) : 0.0;
  return out;
}

Tensor prototype_similarity_matrix(const HiclModel& model) {
  const std::size_t n = model.num_experts();
  Tensor m(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) {
    if (model.prototypes[i].cold()) continue;
    for (std::size_t j = 0; j < n; ++j) {
      if (model.prototypes[j].cold()) continue;
      m.at(i, j) = i == j ? 1.0 : cosine_similarity(model.prototypes[i].vector.data(), model.prototypes[j].vector.data());
    }
  }
  return m;
}

RoutingMatrix routing_matrix(const HiclModel& model, const TaskStream& stream, std::size_t tasks) {
  if (tasks > stream.tasks.size()) throw ProtocolError("routing_matrix: more tasks than the stream holds");
  RoutingMatrix out;
  out.counts = Tensor(Shape{tasks, model.num_experts()});
  out.normalized = out.counts;
  for (std::size_t t = 0; t < tasks; ++t) {
    const LabeledData& test = stream.tasks[t].test;
    if (test.size() == 0) continue;
    for (const GateDecision& g : model.route(test.inputs, GateMode::hard)) out.counts.at(t, g.top()) += 1.0;
    for (std::size_t e = 0; e < model.num_experts(); ++e) {
      out.normalized.at(t, e) = out.counts.at(t, e) / static_cast<double>(test.size());
    }
  }
  return out;
}

std::string matrix_csv(const Tensor& m, const std::string& corner, const std::string& row_prefix,
                       const std::string& col_prefix) {
  std::ostringstream out;
  out.precision(17);
  const std::size_t rows = m.rank() == 2 ? m.shape()[0] : 0;
  const std::size_t cols = m.rank() == 2 ? m.shape()[1] : 0;
  out << corner;
  for (std::size_t c = 0; c < cols; ++c) out << ',' << col_prefix << c;
  out << '\n';
  for (std::size_t r = 0; r < rows; ++r) {
    out << row_prefix << r;
    for (std::size_t c = 0; c < cols; ++c) out << ',' << m.at(r, c);
    out << '\n';
  }
  return out.str();
}

}  // namespace hicl
