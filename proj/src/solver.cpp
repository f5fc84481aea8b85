#include "treeslam/solver.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/SparseCholesky>
#include <Eigen/SparseCore>

#include "treeslam/factors.hpp"

namespace treeslam
{

const char * to_string(Termination t)
{
  switch (t) {
    case Termination::ConvergedDx: return "converged_dx";
    case Termination::ConvergedGrad: return "converged_grad";
    case Termination::MaxIter: return "max_iter";
  }
  return "?";
}

bool SolverProblem::has_factor(NodeId id) const
{
  return std::any_of(factors_.begin(), factors_.end(), [id](const SolverFactor & f) { return f.id == id; });
}

void SolverProblem::sync(Tree & tree)
{
  for (const Notification & n : tree.drain_notifications()) {
    switch (n.action) {
      case NotificationAction::AddBlock: {
        const BlockRef ref{n.node.index, n.block};
        if (slot_of_.count(ref)) {
          throw Error(ErrorKind::Consistency, "block " + to_string(n.node) + "." + n.block + " added twice");
        }
        const StateBlock & b = tree.block(ref);
        slot_of_[ref] = blocks_.size();
        blocks_.push_back({ref, b.tangent_dim(), b.fixed(), -1});
        break;
      }
      case NotificationAction::RemoveBlock: {
        const BlockRef ref{n.node.index, n.block};
        auto it = std::find_if(blocks_.begin(), blocks_.end(), [&](const SolverBlock & b) { return b.ref == ref; });
        if (it == blocks_.end()) {
          throw Error(ErrorKind::Consistency, "removal of unknown block " + to_string(n.node) + "." + n.block);
        }
        blocks_.erase(it);
        rebuild_slots();
        break;
      }
      case NotificationAction::AddFactor: {
        if (has_factor(n.node)) {
          throw Error(ErrorKind::Consistency, "factor " + to_string(n.node) + " added twice");
        }
        factors_.push_back({n.node, tree.factor(n.node), {}});
        break;
      }
      case NotificationAction::RemoveFactor: {
        auto it = std::find_if(factors_.begin(), factors_.end(), [&](const SolverFactor & f) { return f.id == n.node; });
        if (it == factors_.end()) {
          throw Error(ErrorKind::Consistency, "removal of unknown factor " + to_string(n.node));
        }
        factors_.erase(it);
        break;
      }
    }
  }
  rebuild_slots();
  for (auto & f : factors_) {
    f.slots.clear();
    for (const auto & ref : f.factor.constrained) {
      auto it = slot_of_.find(ref);
      if (it == slot_of_.end()) {
        throw Error(
          ErrorKind::Consistency, "factor " + to_string(f.id) + " references unmirrored block " +
          std::to_string(ref.node) + "." + ref.name);
      }
      f.slots.push_back(it->second);
    }
  }
  refresh_layout(tree);
}

void SolverProblem::rebuild_slots()
{
  slot_of_.clear();
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    slot_of_[blocks_[i].ref] = i;
  }
}

void SolverProblem::refresh_layout(const Tree & tree)
{
  for (auto & b : blocks_) {
    b.fixed = tree.block(b.ref).fixed();
  }
  recompute_offsets();
}

void SolverProblem::recompute_offsets()
{
  std::vector<bool> touched(blocks_.size(), false);
  for (const auto & f : factors_) {
    for (std::size_t s : f.slots) {
      touched[s] = true;
    }
  }
  active_dim_ = 0;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    if (!blocks_[i].fixed && touched[i]) {
      blocks_[i].offset = active_dim_;
      active_dim_ += blocks_[i].tangent_dim;
    } else {
      blocks_[i].offset = -1;
    }
  }
}

std::vector<StateBlock> SolverProblem::snapshot(const Tree & tree) const
{
  std::vector<StateBlock> out;
  out.reserve(blocks_.size());
  for (const auto & b : blocks_) {
    out.push_back(tree.block(b.ref));
  }
  return out;
}

void SolverProblem::write_back(Tree & tree, const std::vector<StateBlock> & values) const
{
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    if (blocks_[i].offset >= 0) {
      tree.set_block_values(blocks_[i].ref, values[i].values());
    }
  }
}

namespace
{

struct Linearization
{
  double cost{0.0};
  Eigen::SparseMatrix<double> H;
  Eigen::VectorXd g;  // -Jᵀr
};

std::vector<const StateBlock *> gather(const SolverFactor & f, const std::vector<StateBlock> & values)
{
  std::vector<const StateBlock *> ptrs;
  ptrs.reserve(f.slots.size());
  for (std::size_t s : f.slots) {
    ptrs.push_back(&values[s]);
  }
  return ptrs;
}

/// Returns the scaled residual's loss value and the sqrt of its IRLS weight.
std::pair<double, double> robustify(const Factor & f, double squared_norm)
{
  if (!f.loss) {
    return {squared_norm, 1.0};
  }
  const auto hw = huber(*f.loss, squared_norm);
  return {hw.rho, std::sqrt(hw.weight)};
}

/// d rho for a change of squared norm from s0 to s1, where ds = s1 - s0 is computed accurately.
double loss_change(const Factor & f, double s0, double s1, double ds)
{
  if (!f.loss) {
    return ds;
  }
  const double k2 = f.loss->k * f.loss->k;
  if (s0 <= k2 && s1 <= k2) {
    return ds;
  }
  if (s0 > k2 && s1 > k2) {
    return 2.0 * f.loss->k * ds / (std::sqrt(s0) + std::sqrt(s1));
  }
  return huber(*f.loss, s1).rho - huber(*f.loss, s0).rho;
}

/**
 * Cost difference between two value sets, summed per factor from residual
 * differences so that it stays accurate when the total cost is large.
 */
double cost_change(
  const SolverProblem & problem, const std::vector<StateBlock> & from, const std::vector<StateBlock> & to)
{
  double change = 0.0;
  for (const auto & f : problem.factors()) {
    const Eigen::VectorXd r0 = evaluate(f.factor, gather(f, from)).r;
    const Eigen::VectorXd r1 = evaluate(f.factor, gather(f, to)).r;
    const double ds = (r1 - r0).dot(r1 + r0);
    change += 0.5 * loss_change(f.factor, r0.squaredNorm(), r1.squaredNorm(), ds);
  }
  return change;
}

Linearization linearize(const SolverProblem & problem, const std::vector<StateBlock> & values)
{
  const Eigen::Index n = problem.active_dim();
  const auto & blocks = problem.blocks();
  std::vector<Eigen::Triplet<double>> triplets;
  Linearization lin;
  lin.g = Eigen::VectorXd::Zero(n);

  for (const auto & f : problem.factors()) {
    Residual res = evaluate(f.factor, gather(f, values));
    const auto [rho, scale] = robustify(f.factor, res.r.squaredNorm());
    lin.cost += 0.5 * rho;
    if (scale != 1.0) {
      res.r *= scale;
      for (auto & J : res.J) {
        J *= scale;
      }
    }
    for (std::size_t a = 0; a < f.slots.size(); ++a) {
      const SolverBlock & ba = blocks[f.slots[a]];
      if (ba.offset < 0) {
        continue;
      }
      lin.g.segment(ba.offset, ba.tangent_dim) -= res.J[a].transpose() * res.r;
      for (std::size_t b = 0; b < f.slots.size(); ++b) {
        const SolverBlock & bb = blocks[f.slots[b]];
        if (bb.offset < 0) {
          continue;
        }
        const Eigen::MatrixXd Hab = res.J[a].transpose() * res.J[b];
        for (Eigen::Index i = 0; i < Hab.rows(); ++i) {
          for (Eigen::Index j = 0; j < Hab.cols(); ++j) {
            triplets.emplace_back(ba.offset + i, bb.offset + j, Hab(i, j));
          }
        }
      }
    }
  }
  lin.H.resize(n, n);
  lin.H.setFromTriplets(triplets.begin(), triplets.end());
  return lin;
}

/// Rank test on the undamped normal matrix after Jacobi scaling.
bool numerically_singular(const Eigen::SparseMatrix<double> & H)
{
  const Eigen::VectorXd d = H.diagonal();
  if (d.size() == 0) {
    return true;
  }
  if (!(d.minCoeff() > 0.0)) {
    return true;
  }
  const Eigen::VectorXd s = d.cwiseSqrt().cwiseInverse();
  Eigen::SparseMatrix<double> S = s.asDiagonal() * H * s.asDiagonal();
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt(S);
  if (ldlt.info() != Eigen::Success) {
    return true;
  }
  return !(ldlt.vectorD().minCoeff() > 1e-10);
}

}  // namespace

double total_cost(const SolverProblem & problem, const std::vector<StateBlock> & values)
{
  double cost = 0.0;
  for (const auto & f : problem.factors()) {
    const Residual res = evaluate(f.factor, gather(f, values));
    cost += 0.5 * robustify(f.factor, res.r.squaredNorm()).first;
  }
  return cost;
}

void apply_step(const SolverProblem & problem, std::vector<StateBlock> & values, const Eigen::VectorXd & dx)
{
  if (dx.size() != problem.active_dim()) {
    throw Error(
      ErrorKind::Contract, "step of length " + std::to_string(dx.size()) + " for " +
      std::to_string(problem.active_dim()) + " active columns");
  }
  const auto & blocks = problem.blocks();
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (blocks[i].offset >= 0) {
      values[i].set_values(block_plus(values[i], dx.segment(blocks[i].offset, blocks[i].tangent_dim)));
    }
  }
}

SolveReport lm_solve(SolverProblem & problem, Tree & tree, std::mutex * lock)
{
  std::unique_lock<std::mutex> guard;
  if (lock) {
    guard = std::unique_lock<std::mutex>(*lock);
  }
  problem.refresh_layout(tree);
  std::vector<StateBlock> values = problem.snapshot(tree);
  if (guard.owns_lock()) {
    guard.unlock();
  }
  const SolverOptions & opt = problem.options;

  if (problem.active_dim() == 0 || problem.factors().empty()) {
    throw Error(ErrorKind::Contract, "lm_solve needs at least one unfixed block touched by a factor");
  }

  SolveReport report;
  report.columns = problem.active_dim();
  Linearization lin = linearize(problem, values);
  report.initial_cost = lin.cost;
  report.hessian_nonzeros = static_cast<std::size_t>(lin.H.nonZeros());
  if (!std::isfinite(lin.cost)) {
    throw Error(ErrorKind::Divergence, "initial cost is not finite");
  }
  if (numerically_singular(lin.H)) {
    throw Error(ErrorKind::SingularSystem, "normal equations are rank deficient (unconstrained gauge or unobservable block)");
  }

  double lambda = opt.lambda_init;
  report.termination = Termination::MaxIter;
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt;
  bool pattern_ready = false;

  for (int iter = 0; iter < opt.max_iterations; ++iter) {
    report.iterations = iter + 1;
    if (lin.g.lpNorm<Eigen::Infinity>() < opt.tol_grad) {
      report.termination = Termination::ConvergedGrad;
      break;
    }
    const Eigen::VectorXd diag = lin.H.diagonal();
    bool accepted = false;
    bool stalled = false;
    while (!accepted) {
      Eigen::SparseMatrix<double> A = lin.H;
      for (Eigen::Index i = 0; i < A.rows(); ++i) {
        A.coeffRef(i, i) += lambda * diag(i);
      }
      if (!pattern_ready) {
        ldlt.analyzePattern(A);
        pattern_ready = true;
      }
      ldlt.factorize(A);
      Eigen::VectorXd dx;
      if (ldlt.info() == Eigen::Success) {
        dx = ldlt.solve(lin.g);
      }
      if (ldlt.info() != Eigen::Success || !dx.allFinite()) {
        lambda *= opt.lambda_up;
        if (lambda > opt.lambda_max) {
          throw Error(ErrorKind::SingularSystem, "damped normal equations not solvable up to lambda_max");
        }
        continue;
      }
      if (dx.lpNorm<Eigen::Infinity>() < opt.tol_dx) {
        report.termination = Termination::ConvergedDx;
        stalled = true;
        break;
      }
      std::vector<StateBlock> trial = values;
      apply_step(problem, trial, dx);
      const double change = cost_change(problem, values, trial);
      // Near the optimum the true decrease drops below the round-off of the cost itself;
      // such steps still follow the damped model and are kept.
      const double resolution = 16.0 * std::numeric_limits<double>::epsilon() * lin.cost;
      if (std::isfinite(change) && change < resolution) {
        values = std::move(trial);
        lambda = std::max(lambda / opt.lambda_down, 1e-15);
        ++report.accepted_steps;
        accepted = true;
        lin = linearize(problem, values);
        if (dx.lpNorm<Eigen::Infinity>() < opt.tol_dx) {
          report.termination = Termination::ConvergedDx;
          stalled = true;
        }
      } else {
        lambda *= opt.lambda_up;
        if (lambda > opt.lambda_max) {
          // No descent left at this linearization point.
          stalled = true;
          break;
        }
      }
    }
    if (stalled) {
      break;
    }
  }
  if (!std::isfinite(lin.cost)) {
    throw Error(ErrorKind::Divergence, "cost is not finite");
  }
  report.final_cost = lin.cost;

  if (lock) {
    guard.lock();
  }
  problem.write_back(tree, values);
  return report;
}

}  // namespace treeslam
