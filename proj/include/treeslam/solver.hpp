#pragma once

#include <cstddef>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "treeslam/factor.hpp"
#include "treeslam/manifold.hpp"
#include "treeslam/tree.hpp"

namespace treeslam
{

struct SolverOptions
{
  int max_iterations{20};
  double lambda_init{1e-4};
  double lambda_up{10.0};
  double lambda_down{10.0};
  double lambda_max{1e8};
  double tol_dx{1e-10};
  double tol_grad{1e-10};
};

enum class Termination
{
  ConvergedDx,
  ConvergedGrad,
  MaxIter,
};

const char * to_string(Termination t);

struct SolveReport
{
  int iterations{0};
  double initial_cost{0.0};
  double final_cost{0.0};
  Termination termination{Termination::MaxIter};
  int accepted_steps{0};
  /// Structurally non-zero 1x1 entries of the assembled normal matrix.
  std::size_t hessian_nonzeros{0};
  Eigen::Index columns{0};
};

/// One state block as seen by the solver.
struct SolverBlock
{
  BlockRef ref;
  Eigen::Index tangent_dim{0};
  bool fixed{false};
  /// Column offset among active blocks; -1 when fixed or untouched by any factor.
  Eigen::Index offset{-1};
};

struct SolverFactor
{
  NodeId id;
  Factor factor;
  std::vector<std::size_t> slots;  // indices into SolverProblem::blocks()
};

/**
 * The factor graph mirrored from the tree through notifications.
 *
 * Active columns are laid out contiguously over blocks that are unfixed and
 * referenced by at least one factor, in block insertion order.
 */
class SolverProblem
{
public:
  SolverProblem() = default;
  explicit SolverProblem(SolverOptions options) : options(options) {}

  SolverOptions options;

  /// Drain the tree's notifications and mirror them. Caller holds the problem lock.
  void sync(Tree & tree);
  /// Re-read fixed flags from the tree and recompute column offsets.
  void refresh_layout(const Tree & tree);

  const std::vector<SolverBlock> & blocks() const { return blocks_; }
  const std::vector<SolverFactor> & factors() const { return factors_; }
  bool has_factor(NodeId id) const;
  Eigen::Index active_dim() const { return active_dim_; }

  /// Current values of all mirrored blocks, in blocks() order.
  std::vector<StateBlock> snapshot(const Tree & tree) const;
  void write_back(Tree & tree, const std::vector<StateBlock> & values) const;

private:
  void rebuild_slots();
  void recompute_offsets();

  std::vector<SolverBlock> blocks_;
  std::vector<SolverFactor> factors_;
  std::map<BlockRef, std::size_t> slot_of_;
  Eigen::Index active_dim_{0};
};

/// Sum over factors of rho(|r|^2) / 2.
double total_cost(const SolverProblem & problem, const std::vector<StateBlock> & values);

/// Step every active block by its slice of dx. Fixed blocks are left untouched.
void apply_step(const SolverProblem & problem, std::vector<StateBlock> & values, const Eigen::VectorXd & dx);

/**
 * Levenberg-Marquardt over the active blocks; writes the result back to the tree.
 * When `lock` is given it is held only while reading and writing the tree.
 */
SolveReport lm_solve(SolverProblem & problem, Tree & tree, std::mutex * lock = nullptr);

}  // namespace treeslam
