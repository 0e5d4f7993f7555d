#include "copforge/embedding.hpp"

#include "copforge/errors.hpp"

namespace copforge {

void EmbeddingMatrix::Validate(int expected_dim, int expected_rows) const {
  if (dim() != expected_dim || nodes.cols() != expected_dim) {
    throw DimensionMismatch("embedding dimension " + std::to_string(nodes.cols()) +
                            " does not match expected d_o " + std::to_string(expected_dim));
  }
  if (expected_rows >= 0 && rows() != expected_rows) {
    throw DimensionMismatch("embedding has " + std::to_string(rows()) + " node rows, expected " +
                            std::to_string(expected_rows));
  }
  if (!nodes.allFinite() || !task.allFinite()) {
    throw NonFiniteValue("embedding contains non-finite entries");
  }
}

}  // namespace copforge
