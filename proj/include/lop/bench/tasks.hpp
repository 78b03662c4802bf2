#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lop/core/common.hpp"
#include "lop/core/json.hpp"
#include "lop/core/network.hpp"

namespace lop {

/// One task of a class-incremental sequence. `labels` are indices into
/// `classes` (0 .. classes.size() - 1), so a learner needs only
/// classes_per_task outputs; `classes` holds the global class ids.
struct Task {
  std::vector<int> classes;
  Matrix x;
  std::vector<int> labels;
};

/// Gaussian-cluster classification tasks: class means on a sphere of radius
/// `separation`, unit-variance clusters, disjoint class sets per task.
struct TaskSequence {
  int n_tasks = 0;
  int classes_per_task = 0;
  int dim = 0;
  Matrix means;  // (n_tasks * classes_per_task) x dim
  std::vector<Task> tasks;
};

struct TaskConfig {
  int n_tasks = 10;
  int classes_per_task = 2;
  int dim = 16;
  int samples_per_class = 200;
  double separation = 3.0;
};

inline TaskSequence make_task_sequence(int n_tasks, int classes_per_task, int dim, int samples_per_class, double separation,
                                       std::uint64_t seed) {
  if (n_tasks < 1 || classes_per_task < 1) throw ValidationError("need at least one task and one class", "benchmark");
  if (dim < 1) throw ValidationError("dimension must be positive", "benchmark.d");
  if (samples_per_class < 1) throw ValidationError("samples_per_class must be positive", "benchmark.samples_per_class");
  if (separation < 0.0) throw ValidationError("separation must be non-negative", "benchmark.separation");
  Rng rng(seed);
  TaskSequence s;
  s.n_tasks = n_tasks;
  s.classes_per_task = classes_per_task;
  s.dim = dim;
  const int n_classes = n_tasks * classes_per_task;
  s.means.resize(n_classes, dim);
  for (int c = 0; c < n_classes; ++c) {
    const Vector d = gaussian_matrix(rng, dim, 1);
    const double norm = d.norm();
    s.means.row(c) = (norm > 0.0 ? Vector(separation / norm * d) : Vector(Vector::Zero(dim))).transpose();
  }
  for (int t = 0; t < n_tasks; ++t) {
    Task task;
    const int n = classes_per_task * samples_per_class;
    task.x.resize(n, dim);
    for (int k = 0; k < classes_per_task; ++k) task.classes.push_back(t * classes_per_task + k);
    for (int i = 0; i < n; ++i) {
      const int k = i % classes_per_task;
      task.labels.push_back(k);
      task.x.row(i) = s.means.row(task.classes[static_cast<std::size_t>(k)]) + gaussian_matrix(rng, 1, dim);
    }
    s.tasks.push_back(std::move(task));
  }
  return s;
}

inline TaskSequence make_task_sequence(const TaskConfig& c, std::uint64_t seed) {
  return make_task_sequence(c.n_tasks, c.classes_per_task, c.dim, c.samples_per_class, c.separation, seed);
}

inline Matrix one_hot(const std::vector<int>& labels, int classes) {
  Matrix y = Matrix::Zero(static_cast<Eigen::Index>(labels.size()), classes);
  for (std::size_t i = 0; i < labels.size(); ++i) y(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
  return y;
}

/// Rows `rows` of a task as an (x, one-hot y) batch.
inline std::pair<Matrix, Matrix> task_batch(const Task& t, const std::vector<int>& rows, int classes) {
  Matrix x(static_cast<Eigen::Index>(rows.size()), t.x.cols());
  std::vector<int> labels;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    x.row(static_cast<Eigen::Index>(i)) = t.x.row(rows[i]);
    labels.push_back(t.labels[static_cast<std::size_t>(rows[i])]);
  }
  return {x, one_hot(labels, classes)};
}

/// Share of rows whose largest output matches the one-hot target.
inline double accuracy(const Matrix& out, const Matrix& y) {
  if (out.rows() == 0) return 0.0;
  long hit = 0;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    Eigen::Index a = 0, b = 0;
    out.row(i).maxCoeff(&a);
    y.row(i).maxCoeff(&b);
    hit += a == b;
  }
  return static_cast<double>(hit) / static_cast<double>(out.rows());
}

/// Zeroes the parameters of the last parameterized module (the task head)
/// before a new task; a trailing softmax has none.
inline void reset_output_layer(Network& net) {
  for (std::size_t i = net.modules().size(); i-- > 0;) {
    if (net.modules()[i].params.empty()) continue;
    for (auto& p : net.module(i).params) p.setZero();
    return;
  }
}

inline TaskConfig tasks_from_json(const Json& j, const std::string& where = "benchmark") {
  TaskConfig c;
  try {
    c.n_tasks = j.value("n_tasks", c.n_tasks);
    c.classes_per_task = j.value("classes_per_task", c.classes_per_task);
    c.dim = j.value("d", c.dim);
    c.samples_per_class = j.value("samples_per_class", c.samples_per_class);
    c.separation = j.value("separation", c.separation);
  } catch (const Json::exception& e) {
    throw ValidationError(e.what(), where);
  }
  if (c.n_tasks < 1) throw ValidationError("n_tasks must be positive", where + ".n_tasks");
  if (c.classes_per_task < 2) throw ValidationError("classes_per_task must be at least 2", where + ".classes_per_task");
  if (c.dim < 1) throw ValidationError("d must be positive", where + ".d");
  if (c.samples_per_class < 1) throw ValidationError("samples_per_class must be positive", where + ".samples_per_class");
  if (c.separation < 0.0) throw ValidationError("separation must be non-negative", where + ".separation");
  return c;
}

inline Json tasks_to_json(const TaskConfig& c) {
  return Json{{"kind", "tasks"},
              {"n_tasks", c.n_tasks},
              {"classes_per_task", c.classes_per_task},
              {"d", c.dim},
              {"samples_per_class", c.samples_per_class},
              {"separation", c.separation}};
}

}  // namespace lop
