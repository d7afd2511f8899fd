#include "bilevel/outer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "bilevel/io.hpp"

namespace bilevel {

HyperVector project_box(const HyperVector& h) {
  return h.with_values(h.values().cwiseMax(h.lower()).cwiseMin(h.upper()));
}

void validate(const OuterConfig& config) {
  if (!(config.beta > 0.0) || !std::isfinite(config.beta)) {
    throw Error(ErrorCode::BadParams, "outer step size beta must be positive");
  }
  if (config.max_steps <= 0) throw Error(ErrorCode::BadParams, "max_steps must be positive");
  if (!(config.tolerance >= 0.0)) throw Error(ErrorCode::BadParams, "tolerance must be >= 0");
  if (config.meta_batch < 0) throw Error(ErrorCode::BadParams, "meta_batch must be >= 0");
  if (config.divergence_window <= 0 || !(config.divergence_factor > 0.0)) {
    throw Error(ErrorCode::BadParams, "divergence guard parameters must be positive");
  }
  if (config.mode == HypergradMode::FiniteDifference) {
    throw Error(ErrorCode::BadParams, "outer loop runs in reverse or forward mode");
  }
}

std::string_view to_string(StopReason reason) {
  return reason == StopReason::Converged ? "converged" : "max_steps";
}

HypergradResult compute_hypergrad(const BilevelProblem& problem, const HyperVector& h,
                                  HypergradMode mode, const WarmStartState* warm) {
  switch (mode) {
    case HypergradMode::Reverse: return reverse_hypergrad(problem, unroll(problem, h, warm));
    case HypergradMode::Forward: return forward_hypergrad(problem, h, warm);
    case HypergradMode::FiniteDifference: return fd_hypergrad(problem, h, std::nullopt, warm);
  }
  throw Error(ErrorCode::BadParams, "unknown hypergradient mode");
}

HypergradResult ProblemSource::evaluate(const HyperVector& h, int, HypergradMode mode,
                                        const WarmStartState* warm) const {
  return compute_hypergrad(problem_, h, mode, warm);
}

MetaSource::MetaSource(std::shared_ptr<const MetaDataset> meta, ProblemOptions options,
                       Index batch, std::uint64_t seed)
    : meta_(std::move(meta)), options_(std::move(options)), batch_(batch), seed_(seed) {
  if (!meta_ || meta_->episodes.empty()) throw Error(ErrorCode::EmptyTrainingSet, "no episodes");
  if (batch_ > meta_->size()) {
    throw Error(ErrorCode::BatchTooLarge, "meta-batch " + std::to_string(batch_) + " > " +
                                              std::to_string(meta_->size()) + " episodes");
  }
}

namespace {

std::vector<Index> permutation(Index n, std::uint64_t seed) {
  std::vector<Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Index{0});
  std::mt19937_64 rng(seed);
  for (Index i = 0; i + 1 < n; ++i) {
    std::uniform_int_distribution<Index> pick(i, n - 1);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
  }
  return idx;
}

}  // namespace

std::vector<Index> MetaSource::batch_for_step(int step) const {
  const Index n = meta_->size();
  std::vector<Index> batch;
  if (batch_ == 0 || batch_ == n) {
    batch.resize(static_cast<std::size_t>(n));
    std::iota(batch.begin(), batch.end(), Index{0});
    return batch;
  }
  // Epochs of n / batch disjoint batches over a fresh shuffle; leftover episodes
  // of an epoch are skipped so no batch repeats an episode.
  const Index per_epoch = n / batch_;
  const auto epoch = static_cast<std::uint64_t>(step / per_epoch);
  const Index slot = static_cast<Index>(step) % per_epoch;
  const std::vector<Index> order = permutation(n, seed_ * 0x9E3779B97F4A7C15ULL + epoch);
  batch.assign(order.begin() + slot * batch_, order.begin() + (slot + 1) * batch_);
  std::sort(batch.begin(), batch.end());
  return batch;
}

HypergradResult MetaSource::average(const HyperVector& h, std::span<const Index> episodes,
                                    HypergradMode mode) const {
  HypergradResult acc;
  acc.mode = mode;
  acc.grad = Vector::Zero(h.size());
  Scalar inner_final = 0.0;
  for (Index e : episodes) {
    const std::span<const Episode> one(&meta_->episodes[static_cast<std::size_t>(e)], 1);
    const BilevelProblem p = hyperrepr_problem_for(one, h, options_);
    const HypergradResult r = compute_hypergrad(p, h, mode);
    acc.f_value += r.f_value;
    acc.grad += r.grad;
    acc.wall_ms += r.wall_ms;
    inner_final += r.inner_losses.back();
  }
  const auto n = static_cast<Scalar>(episodes.size());
  acc.f_value /= n;
  acc.grad /= n;
  acc.inner_losses = {inner_final / n};
  return acc;
}

HypergradResult MetaSource::full(const HyperVector& h, HypergradMode mode) const {
  std::vector<Index> all(static_cast<std::size_t>(meta_->size()));
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<Index>(i);
  return average(h, all, mode);
}

Scalar MetaSource::mean_objective(const HyperVector& h) const {
  Scalar total = 0.0;
  for (const Episode& e : meta_->episodes) {
    const BilevelProblem p = hyperrepr_problem_for(std::span<const Episode>(&e, 1), h, options_);
    total += truncated_objective(p, h);
  }
  return total / static_cast<Scalar>(meta_->size());
}

HypergradResult MetaSource::evaluate(const HyperVector& h, int step, HypergradMode mode,
                                     const WarmStartState*) const {
  const auto batch = batch_for_step(step);
  return average(h, batch, mode);
}

OuterResult run_outer(const HypergradSource& source, const OuterConfig& config,
                      const HyperVector& initial) {
  validate(config);
  if (!initial.is_feasible()) throw Error(ErrorCode::BadParams, "initial lambda is infeasible");
  if (config.warm_restart && !source.supports_warm_start()) {
    throw Error(ErrorCode::BadParams, "warm restart is not supported for this problem");
  }
  OuterResult result;
  result.hyper = initial;
  result.iterates.push_back(initial);
  WarmStartState warm{config.warm_restart, std::nullopt};
  Scalar f_initial = 0.0;
  Scalar f_previous = 0.0;
  int rising = 0;

  for (int s = 0; s < config.max_steps; ++s) {
    const auto start = std::chrono::steady_clock::now();
    const HypergradResult hg = source.evaluate(result.hyper, s, config.mode, &warm);
    if (config.warm_restart) warm.carried = hg.final_state;

    OuterRecord rec;
    rec.step = s;
    rec.f_value = hg.f_value;
    rec.hypergrad_inf_norm = hg.grad.size() ? hg.grad.lpNorm<Eigen::Infinity>() : 0.0;
    rec.lambda_hash = result.hyper.hash();
    rec.inner_final_loss = hg.inner_losses.empty() ? 0.0 : hg.inner_losses.back();

    if (s == 0) {
      f_initial = hg.f_value;
    } else if (hg.f_value > f_previous &&
               hg.f_value > config.divergence_factor * std::max(std::abs(f_initial), 1e-300)) {
      ++rising;
    } else {
      rising = 0;
    }
    f_previous = hg.f_value;

    HyperVector next = project_box(result.hyper.with_values(result.hyper.values() -
                                                            config.beta * hg.grad));
    const Scalar residual =
        (result.hyper.values() - next.values()).lpNorm<Eigen::Infinity>() / config.beta;
    result.hyper = std::move(next);
    result.iterates.push_back(result.hyper);
    rec.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    result.trace.records.push_back(rec);

    if (rising >= config.divergence_window) {
      throw Error(ErrorCode::DivergenceDetected,
                  "f_T rose for " + std::to_string(rising) + " consecutive steps above " +
                      format_scalar(config.divergence_factor) + "x its initial value (step " +
                      std::to_string(s) + ")");
    }
    if (residual <= config.tolerance) {
      result.stop = StopReason::Converged;
      return result;
    }
  }
  result.stop = StopReason::MaxSteps;
  return result;
}

OuterResult run_outer(const BilevelProblem& problem, const OuterConfig& config,
                      const HyperVector& initial) {
  return run_outer(ProblemSource(problem), config, initial);
}

std::string trace_csv(const OuterTrace& trace) {
  std::ostringstream out;
  out << "step,f_value,hypergrad_inf_norm,inner_final_loss,lambda_hash\n";
  for (const auto& r : trace.records) {
    out << r.step << ',' << format_scalar(r.f_value) << ',' << format_scalar(r.hypergrad_inf_norm)
        << ',' << format_scalar(r.inner_final_loss) << ',' << r.lambda_hash << '\n';
  }
  return out.str();
}

std::string timing_csv(const OuterTrace& trace) {
  std::ostringstream out;
  out << "step,wall_ms\n";
  for (const auto& r : trace.records) out << r.step << ',' << format_scalar(r.wall_ms) << '\n';
  return out.str();
}

}  // namespace bilevel
