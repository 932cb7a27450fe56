#include "hicl/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "hicl/rng.hpp"

namespace hicl {

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::synthetic: return "synthetic";
    case Provenance::idx_dataset: return "idx-dataset";
    case Provenance::csv_dataset: return "csv-dataset";
  }
  return "unknown";
}

std::size_t TaskStream::input_dim() const { return tasks.empty() ? 0 : tasks.front().train.inputs.cols(); }

std::size_t TaskStream::classes_per_task() const { return tasks.empty() ? 0 : tasks.front().classes.size(); }

void TaskStream::validate() const {
  std::set<std::size_t> seen;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const TaskData& task = tasks[t];
    if (task.task_id != t) throw DataError("task " + std::to_string(t) + " carries id " + std::to_string(task.task_id));
    for (std::size_t c : task.classes) {
      if (!seen.insert(c).second) throw DataError("class " + std::to_string(c) + " appears in more than one task");
    }
    for (const LabeledData* part : {&task.train, &task.test}) {
      if (part->inputs.rows() != part->labels.size() && !part->labels.empty()) {
        throw DataError("task " + std::to_string(t) + ": input rows and label count differ");
      }
      for (std::size_t y : part->labels) {
        if (y >= task.classes.size()) {
          throw DataError("task " + std::to_string(t) + ": local label " + std::to_string(y) + " outside class list");
        }
      }
    }
  }
}

TaskStream make_synthetic_stream(const SyntheticSpec& spec) {
  if (spec.separation < 0.0 || spec.noise < 0.0) throw ConfigError("synthetic stream: separation and noise must be >= 0");
  if (spec.n_tasks == 0 || spec.classes_per_task == 0 || spec.dim == 0) {
    throw ConfigError("synthetic stream: tasks, classes and dim must be positive");
  }
  Rng rng = make_rng(spec.seed, "data");
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t n_classes = spec.n_tasks * spec.classes_per_task;

  std::vector<std::vector<double>> means(n_classes, std::vector<double>(spec.dim));
  for (auto& mu : means) {
    double norm = 0.0;
    for (double& v : mu) {
      v = normal(rng);
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (double& v : mu) v = norm > 0.0 ? v / norm * spec.separation : 0.0;
  }

  auto draw = [&](std::size_t cls, std::size_t count, LabeledData& out, std::size_t local, std::size_t& row) {
    for (std::size_t i = 0; i < count; ++i, ++row) {
      auto dst = out.inputs.row(row);
      for (std::size_t d = 0; d < spec.dim; ++d) dst[d] = means[cls][d] + spec.noise * normal(rng);
      out.labels[row] = local;
    }
  };

  TaskStream stream;
  stream.provenance = Provenance::synthetic;
  for (std::size_t t = 0; t < spec.n_tasks; ++t) {
    TaskData task;
    task.task_id = t;
    task.train.inputs = Tensor(Shape{spec.classes_per_task * spec.train_per_class, spec.dim});
    task.train.labels.resize(spec.classes_per_task * spec.train_per_class);
    task.test.inputs = Tensor(Shape{spec.classes_per_task * spec.test_per_class, spec.dim});
    task.test.labels.resize(spec.classes_per_task * spec.test_per_class);
    std::size_t train_row = 0, test_row = 0;
    for (std::size_t c = 0; c < spec.classes_per_task; ++c) {
      const std::size_t cls = t * spec.classes_per_task + c;
      task.classes.push_back(cls);
      draw(cls, spec.train_per_class, task.train, c, train_row);
      draw(cls, spec.test_per_class, task.test, c, test_row);
    }
    // Interleave classes so sequential batches are mixed.
    std::vector<std::size_t> order(task.train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    LabeledData shuffled{task.train.inputs.gather_rows(order), {}};
    for (std::size_t i : order) shuffled.labels.push_back(task.train.labels[i]);
    task.train = std::move(shuffled);
    stream.tasks.push_back(std::move(task));
  }

  double lo = INFINITY, hi = -INFINITY;
  for (const auto& task : stream.tasks) {
    for (const Tensor* x : {&task.train.inputs, &task.test.inputs}) {
      for (double v : x->data()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
  }
  const double range = hi > lo ? hi - lo : 1.0;
  for (auto& task : stream.tasks) {
    for (Tensor* x : {&task.train.inputs, &task.test.inputs}) {
      for (double& v : x->data()) v = (v - lo) / range;
    }
  }
  return stream;
}

namespace {

LabeledData select_classes(const LabeledData& data, const std::map<std::size_t, std::size_t>& local_of) {
  std::vector<std::size_t> rows;
  LabeledData out;
  for (std::size_t i = 0; i < data.labels.size(); ++i) {
    auto it = local_of.find(data.labels[i]);
    if (it == local_of.end()) continue;
    rows.push_back(i);
    out.labels.push_back(it->second);
  }
  out.inputs = rows.empty() ? Tensor(Shape{0, data.inputs.cols()}) : data.inputs.gather_rows(rows);
  return out;
}

}  // namespace

TaskStream split_dataset(const LabeledData& train, const LabeledData& test, std::size_t n_tasks, Provenance provenance) {
  if (n_tasks == 0) throw ConfigError("split_dataset: n_tasks must be positive");
  if (train.inputs.rows() != train.labels.size()) throw DataError("split_dataset: input rows and label count differ");
  const std::set<std::size_t> distinct(train.labels.begin(), train.labels.end());
  const std::vector<std::size_t> classes(distinct.begin(), distinct.end());
  if (classes.empty() || classes.size() % n_tasks != 0) {
    throw ConfigError("split_dataset: " + std::to_string(classes.size()) + " classes not divisible into " +
                      std::to_string(n_tasks) + " tasks");
  }
  const std::size_t per_task = classes.size() / n_tasks;
  TaskStream stream;
  stream.provenance = provenance;
  for (std::size_t t = 0; t < n_tasks; ++t) {
    TaskData task;
    task.task_id = t;
    std::map<std::size_t, std::size_t> local_of;
    for (std::size_t c = 0; c < per_task; ++c) {
      const std::size_t cls = classes[t * per_task + c];
      task.classes.push_back(cls);
      local_of[cls] = c;
    }
    task.train = select_classes(train, local_of);
    task.test = test.labels.empty() ? LabeledData{Tensor(Shape{0, train.inputs.cols()}), {}} : select_classes(test, local_of);
    stream.tasks.push_back(std::move(task));
  }
  return stream;
}

IdxArray read_idx(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open IDX file: " + path.string());
  const std::vector<std::uint8_t> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (raw.size() < 4) throw FormatError("IDX file too short for magic number", raw.size());
  if (raw[0] != 0 || raw[1] != 0 || raw[2] != 0x08) throw FormatError("bad IDX magic (expected unsigned-byte data)", 0);
  const std::size_t ndims = raw[3];
  if (ndims != 1 && ndims != 3) throw FormatError("unsupported IDX rank " + std::to_string(ndims), 3);
  IdxArray out;
  std::size_t offset = 4;
  std::size_t count = 1;
  for (std::size_t d = 0; d < ndims; ++d) {
    if (offset + 4 > raw.size()) throw FormatError("IDX header truncated", raw.size());
    const std::uint32_t dim = (std::uint32_t{raw[offset]} << 24) | (std::uint32_t{raw[offset + 1]} << 16) |
                              (std::uint32_t{raw[offset + 2]} << 8) | std::uint32_t{raw[offset + 3]};
    out.dims.push_back(dim);
    count *= dim;
    offset += 4;
  }
  if (raw.size() - offset < count) {
    throw FormatError("IDX payload truncated: header declares " + std::to_string(count) + " bytes, found " +
                          std::to_string(raw.size() - offset),
                      raw.size());
  }
  out.bytes.assign(raw.begin() + static_cast<std::ptrdiff_t>(offset),
                   raw.begin() + static_cast<std::ptrdiff_t>(offset + count));
  return out;
}

void write_idx(const std::filesystem::path& path, const IdxArray& array) {
  if (array.dims.size() != 1 && array.dims.size() != 3) throw DataError("IDX arrays must have 1 or 3 dims");
  std::size_t count = 1;
  for (auto d : array.dims) count *= d;
  if (count != array.bytes.size()) throw DataError("IDX dims do not match payload size");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write IDX file: " + path.string());
  const char magic[4] = {0, 0, 0x08, static_cast<char>(array.dims.size())};
  out.write(magic, 4);
  for (std::uint32_t d : array.dims) {
    const char be[4] = {static_cast<char>(d >> 24), static_cast<char>((d >> 16) & 0xff), static_cast<char>((d >> 8) & 0xff),
                        static_cast<char>(d & 0xff)};
    out.write(be, 4);
  }
  out.write(reinterpret_cast<const char*>(array.bytes.data()), static_cast<std::streamsize>(array.bytes.size()));
}

LabeledData load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, std::size_t num_classes) {
  const IdxArray img = read_idx(images);
  const IdxArray lab = read_idx(labels);
  if (img.dims.size() != 3) throw FormatError("image file must have magic 0x00000803", 3);
  if (lab.dims.size() != 1) throw FormatError("label file must have magic 0x00000801", 3);
  if (img.dims[0] != lab.dims[0]) {
    throw DataError("image count " + std::to_string(img.dims[0]) + " differs from label count " + std::to_string(lab.dims[0]));
  }
  const std::size_t n = img.dims[0];
  const std::size_t dim = std::size_t{img.dims[1]} * img.dims[2];
  LabeledData out;
  out.inputs = Tensor(Shape{n, dim});
  for (std::size_t i = 0; i < img.bytes.size(); ++i) out.inputs[i] = static_cast<double>(img.bytes[i]) / 255.0;
  for (std::uint8_t y : lab.bytes) {
    if (num_classes != 0 && y >= num_classes) {
      throw DataError("label " + std::to_string(y) + " outside range [0, " + std::to_string(num_classes) + ")");
    }
    out.labels.push_back(y);
  }
  return out;
}

LabeledData load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open CSV file: " + path.string());
  std::vector<double> values;
  LabeledData out;
  std::size_t dim = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> row;
    bool numeric = true;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(cell, &used));
      } catch (const std::exception&) {
        numeric = false;
        break;
      }
    }
    if (!numeric) {
      if (line_no == 1) continue;
      throw DataError("non-numeric CSV cell on line " + std::to_string(line_no));
    }
    if (row.size() < 2) throw DataError("CSV line " + std::to_string(line_no) + " has no features");
    if (dim == 0) dim = row.size() - 1;
    if (row.size() - 1 != dim) throw DataError("CSV line " + std::to_string(line_no) + " has inconsistent width");
    if (row[0] < 0.0 || row[0] != std::floor(row[0])) throw DataError("CSV label on line " + std::to_string(line_no) + " is not a class index");
    out.labels.push_back(static_cast<std::size_t>(row[0]));
    values.insert(values.end(), row.begin() + 1, row.end());
  }
  out.inputs = Tensor(Shape{out.labels.size(), dim}, std::move(values));
  return out;
}

}  // namespace hicl
