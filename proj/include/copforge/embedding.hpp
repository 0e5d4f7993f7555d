#ifndef COPFORGE_EMBEDDING_HPP_
#define COPFORGE_EMBEDDING_HPP_

#include <string>

#include <Eigen/Dense>

namespace copforge {

using FloatMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Frozen text embeddings of one instance: one row per node text plus the
// task-description embedding.
struct EmbeddingMatrix {
  FloatMatrix nodes;         // n x d_o
  Eigen::RowVectorXf task;   // d_o
  std::string provider_id;
  std::string template_version;

  int dim() const { return static_cast<int>(task.size()); }
  int rows() const { return static_cast<int>(nodes.rows()); }

  // Throws DimensionMismatch or NonFiniteValue.
  void Validate(int expected_dim, int expected_rows) const;
};

}  // namespace copforge

#endif  // COPFORGE_EMBEDDING_HPP_
