#include "bilevel/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cerrno>
#include <cstdlib>
#include <ctime>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <Eigen/Eigenvalues>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

#include "bilevel/hypergrad.hpp"
#include "bilevel/io.hpp"
#include "bilevel/oracle.hpp"

namespace bilevel::cli {

using json = nlohmann::ordered_json;
namespace pt = boost::property_tree;

// ---------------------------------------------------------------------------
// Names

std::string_view to_string(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::HyperClean: return "hyperclean";
    case ExperimentKind::HyperRepr: return "hyperrepr";
    case ExperimentKind::RidgeVerify: return "ridge-verify";
    case ExperimentKind::GradCheck: return "gradcheck";
    case ExperimentKind::Convergence: return "convergence";
  }
  return "unknown";
}

ExperimentKind parse_experiment_kind(std::string_view name) {
  for (const auto& e : experiments()) {
    if (to_string(e.kind) == name) return e.kind;
  }
  throw Error(ErrorCode::ConfigError,
              "experiment.kind: unknown experiment '" + std::string(name) + "'");
}

std::string_view to_string(ProblemKind kind) {
  switch (kind) {
    case ProblemKind::HyperClean: return "hyperclean";
    case ProblemKind::Ridge: return "ridge";
    case ProblemKind::HyperRepr: return "hyperrepr";
  }
  return "unknown";
}

const std::vector<ExperimentInfo>& experiments() {
  static const std::vector<ExperimentInfo> list{
      {ExperimentKind::HyperClean,
       "learn per-example weights (and optionally the inner learning rate) on label-corrupted "
       "Gaussian data"},
      {ExperimentKind::HyperRepr,
       "learn a shared linear representation across synthetic few-shot episodes"},
      {ExperimentKind::RidgeVerify,
       "ridge regression checked against closed-form minimizers and implicit hypergradients"},
      {ExperimentKind::GradCheck,
       "transpose, reverse/forward and finite-difference agreement on one problem"},
      {ExperimentKind::Convergence,
       "decay of the truncated hypergradient error with the unroll length on ridge"},
  };
  return list;
}

// ---------------------------------------------------------------------------
// Config parsing

namespace {

[[noreturn]] void config_error(const std::string& what) {
  throw Error(ErrorCode::ConfigError, what);
}

const std::map<std::string, std::set<std::string>>& known_fields() {
  static const std::map<std::string, std::set<std::string>> fields{
      {"experiment", {"kind", "seed", "output_dir", "write_data", "problem"}},
      {"hyperclean",
       {"n_train", "n_validation", "n_test", "features", "classes", "separation", "corruption",
        "l2"}},
      {"ridge", {"n_train", "n_validation", "features", "noise", "l2"}},
      {"hyperrepr",
       {"tasks", "heldout_tasks", "features", "true_rank", "classes", "shots", "validation_shots",
        "k", "repr_init_scale"}},
      {"dynamics", {"kind", "eta", "mu", "T", "init", "init_scale", "inner_batch"}},
      {"outer",
       {"beta", "max_steps", "mode", "warm_restart", "meta_batch", "tolerance",
        "divergence_window", "divergence_factor"}},
      {"checks",
       {"lambda_samples", "unroll_lengths", "mode_tolerance", "fd_tolerance", "transpose_probes",
        "oracle_T", "oracle_tolerance", "convergence_T_max", "ratio_tolerance", "weight_gap",
        "stationarity_tolerance"}},
  };
  return fields;
}

class Fields {
 public:
  explicit Fields(const pt::ptree& tree) : tree_(tree) {}

  std::optional<std::string> raw(const std::string& section, const std::string& key) const {
    const auto sec = tree_.get_child_optional(section);
    if (!sec) return std::nullopt;
    const auto value = sec->get_optional<std::string>(pt::ptree::path_type(key, '\0'));
    if (!value) return std::nullopt;
    return *value;
  }

  template <typename T>
  void read(const std::string& section, const std::string& key, T& out) const {
    const auto text = raw(section, key);
    if (!text) return;
    out = convert<T>(*text, section + "." + key);
  }

  template <typename T>
  static T convert(const std::string& text, const std::string& field) {
    if constexpr (std::is_same_v<T, bool>) {
      if (text == "true" || text == "1" || text == "yes") return true;
      if (text == "false" || text == "0" || text == "no") return false;
      config_error(field + ": expected true/false, got '" + text + "'");
    } else if constexpr (std::is_floating_point_v<T>) {
      char* end = nullptr;
      const double v = std::strtod(text.c_str(), &end);
      if (text.empty() || *end != '\0' || !std::isfinite(v)) {
        config_error(field + ": expected a finite number, got '" + text + "'");
      }
      return static_cast<T>(v);
    } else if constexpr (std::is_integral_v<T>) {
      char* end = nullptr;
      errno = 0;
      const long long v = std::strtoll(text.c_str(), &end, 10);
      if (text.empty() || *end != '\0' || errno != 0) {
        config_error(field + ": expected an integer, got '" + text + "'");
      }
      if constexpr (std::is_unsigned_v<T>) {
        if (v < 0) config_error(field + ": must be non-negative");
      }
      return static_cast<T>(v);
    } else {
      return text;
    }
  }

 private:
  const pt::ptree& tree_;
};

void check_structure(const pt::ptree& tree) {
  const auto& known = known_fields();
  for (const auto& [section, body] : tree) {
    if (body.empty()) {
      config_error("field '" + section + "' appears outside a [section]");
    }
    const auto it = known.find(section);
    if (it == known.end()) config_error("unknown section [" + section + "]");
    for (const auto& [key, value] : body) {
      (void)value;
      if (!it->second.count(key)) config_error("unknown field " + section + "." + key);
    }
  }
}

std::vector<int> parse_int_list(const std::string& text, const std::string& field) {
  std::vector<int> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    out.push_back(Fields::convert<int>(item, field));
  }
  if (out.empty()) config_error(field + ": empty list");
  return out;
}

void require(bool ok, const std::string& field, const std::string& rule) {
  if (!ok) config_error(field + ": " + rule);
}

void validate_config(const RunConfig& c) {
  require(c.T >= 0, "dynamics.T", "must be >= 0");
  require(c.dynamics.mu >= 0.0 && c.dynamics.mu < 1.0, "dynamics.mu", "must be in [0, 1)");
  require(c.eta_auto || c.dynamics.eta > 0.0, "dynamics.eta", "must be positive or 'auto'");
  require(c.init_scale >= 0.0, "dynamics.init_scale", "must be >= 0");
  require(c.inner_batch >= 0, "dynamics.inner_batch", "must be >= 0");

  require(c.outer.beta > 0.0, "outer.beta", "must be positive");
  require(c.outer.max_steps > 0, "outer.max_steps", "must be positive");
  require(c.outer.tolerance >= 0.0, "outer.tolerance", "must be >= 0");
  require(c.outer.meta_batch >= 0, "outer.meta_batch", "must be >= 0");
  require(c.outer.divergence_window > 0, "outer.divergence_window", "must be positive");
  require(c.outer.divergence_factor > 0.0, "outer.divergence_factor", "must be positive");

  const auto& h = c.hyperclean;
  require(h.n_train > 0, "hyperclean.n_train", "must be positive");
  require(h.n_validation > 0, "hyperclean.n_validation", "must be positive");
  require(h.n_test > 0, "hyperclean.n_test", "must be positive");
  require(h.features > 0, "hyperclean.features", "must be positive");
  require(h.classes >= 2, "hyperclean.classes", "must be >= 2");
  require(h.corruption >= 0.0 && h.corruption < 1.0, "hyperclean.corruption",
          "must be in [0, 1)");
  require(c.hyperclean_l2 >= 0.0, "hyperclean.l2", "must be >= 0");

  const auto& r = c.regression;
  require(r.n_train > 0, "ridge.n_train", "must be positive");
  require(r.n_validation > 0, "ridge.n_validation", "must be positive");
  require(r.features > 0, "ridge.features", "must be positive");
  require(r.noise >= 0.0, "ridge.noise", "must be >= 0");
  require(c.ridge_l2 >= 1e-8, "ridge.l2", "must be >= 1e-8");

  const auto& s = c.subspace;
  require(s.tasks > 0, "hyperrepr.tasks", "must be positive");
  require(c.heldout_tasks > 0, "hyperrepr.heldout_tasks", "must be positive");
  require(s.features > 0, "hyperrepr.features", "must be positive");
  require(s.true_rank > 0 && s.true_rank <= s.features, "hyperrepr.true_rank",
          "must be in [1, features]");
  require(s.classes >= 2, "hyperrepr.classes", "must be >= 2");
  require(s.shots > 0, "hyperrepr.shots", "must be positive");
  require(s.validation_shots > 0, "hyperrepr.validation_shots", "must be positive");
  require(c.repr.k > 0 && c.repr.k <= s.features, "hyperrepr.k", "must be in [1, features]");

  const auto& k = c.checks;
  require(k.lambda_samples > 0, "checks.lambda_samples", "must be positive");
  require(std::all_of(k.unroll_lengths.begin(), k.unroll_lengths.end(),
                      [](int t) { return t >= 0; }),
          "checks.unroll_lengths", "entries must be >= 0");
  require(k.transpose_probes > 0, "checks.transpose_probes", "must be positive");
  require(k.oracle_T > 0, "checks.oracle_T", "must be positive");
  require(k.convergence_T_max >= 2, "checks.convergence_T_max", "must be >= 2");

  const bool ridge_like = c.kind == ExperimentKind::RidgeVerify ||
                          c.kind == ExperimentKind::Convergence ||
                          (c.kind == ExperimentKind::GradCheck && c.problem == ProblemKind::Ridge);
  require(!c.eta_auto || ridge_like, "dynamics.eta", "'auto' is only available for ridge runs");
  const bool repr = c.kind == ExperimentKind::HyperRepr ||
                    (c.kind == ExperimentKind::GradCheck && c.problem == ProblemKind::HyperRepr);
  if (repr) {
    require(!c.outer.warm_restart, "outer.warm_restart",
            "heads are episode-local, warm restarts are not supported");
    require(c.outer.meta_batch <= s.tasks, "outer.meta_batch", "must not exceed hyperrepr.tasks");
    require(c.inner_batch == 0, "dynamics.inner_batch", "not supported for hyperrepr");
  }
  if (c.kind == ExperimentKind::HyperClean) {
    require(c.inner_batch <= h.n_train, "dynamics.inner_batch", "must not exceed n_train");
  }
  if (c.kind == ExperimentKind::Convergence) {
    require(c.dynamics.kind != DynamicsKind::Momentum, "dynamics.kind",
            "convergence needs gd or hyper_lr_gd");
  }
}

}  // namespace

RunConfig parse_config_text(const std::string& text) {
  pt::ptree tree;
  try {
    std::istringstream in(text);
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    config_error("line " + std::to_string(e.line()) + ": " + e.message());
  }
  check_structure(tree);
  const Fields f(tree);
  RunConfig c;

  const auto kind = f.raw("experiment", "kind");
  if (!kind) config_error("experiment.kind is required");
  c.kind = parse_experiment_kind(*kind);
  if (!f.raw("experiment", "seed")) config_error("experiment.seed is required");
  f.read("experiment", "seed", c.seed);
  c.output_dir = std::filesystem::path("runs") / std::string(to_string(c.kind));
  if (auto dir = f.raw("experiment", "output_dir")) c.output_dir = *dir;
  f.read("experiment", "write_data", c.write_data);
  if (auto p = f.raw("experiment", "problem")) {
    if (*p == "hyperclean") c.problem = ProblemKind::HyperClean;
    else if (*p == "ridge") c.problem = ProblemKind::Ridge;
    else if (*p == "hyperrepr") c.problem = ProblemKind::HyperRepr;
    else config_error("experiment.problem: unknown problem '" + *p + "'");
  }

  // Kind-dependent defaults, overridden below by explicit fields.
  if (c.kind == ExperimentKind::RidgeVerify || c.kind == ExperimentKind::Convergence) {
    c.eta_auto = true;
  }
  if (c.kind == ExperimentKind::GradCheck) c.hyperclean.n_train = 50;
  if (c.kind == ExperimentKind::HyperRepr) c.init = InitKind::Gaussian;

  f.read("hyperclean", "n_train", c.hyperclean.n_train);
  f.read("hyperclean", "n_validation", c.hyperclean.n_validation);
  f.read("hyperclean", "n_test", c.hyperclean.n_test);
  f.read("hyperclean", "features", c.hyperclean.features);
  f.read("hyperclean", "classes", c.hyperclean.classes);
  f.read("hyperclean", "separation", c.hyperclean.separation);
  f.read("hyperclean", "corruption", c.hyperclean.corruption);
  f.read("hyperclean", "l2", c.hyperclean_l2);

  f.read("ridge", "n_train", c.regression.n_train);
  f.read("ridge", "n_validation", c.regression.n_validation);
  f.read("ridge", "features", c.regression.features);
  f.read("ridge", "noise", c.regression.noise);
  f.read("ridge", "l2", c.ridge_l2);

  f.read("hyperrepr", "tasks", c.subspace.tasks);
  f.read("hyperrepr", "heldout_tasks", c.heldout_tasks);
  f.read("hyperrepr", "features", c.subspace.features);
  f.read("hyperrepr", "true_rank", c.subspace.true_rank);
  f.read("hyperrepr", "classes", c.subspace.classes);
  f.read("hyperrepr", "shots", c.subspace.shots);
  f.read("hyperrepr", "validation_shots", c.subspace.validation_shots);
  f.read("hyperrepr", "k", c.repr.k);
  f.read("hyperrepr", "repr_init_scale", c.repr.repr_init_scale);

  if (auto k = f.raw("dynamics", "kind")) {
    try {
      c.dynamics.kind = parse_dynamics_kind(*k);
    } catch (const Error&) {
      config_error("dynamics.kind: unknown dynamics '" + *k + "' (expected gd, hyper_lr_gd or momentum)");
    }
  }
  if (auto eta = f.raw("dynamics", "eta")) {
    c.eta_auto = *eta == "auto";
    if (!c.eta_auto) c.dynamics.eta = Fields::convert<Scalar>(*eta, "dynamics.eta");
  }
  f.read("dynamics", "mu", c.dynamics.mu);
  f.read("dynamics", "T", c.T);
  if (auto init = f.raw("dynamics", "init")) {
    if (*init == "zero") c.init = InitKind::Zero;
    else if (*init == "gaussian") c.init = InitKind::Gaussian;
    else config_error("dynamics.init: expected zero or gaussian, got '" + *init + "'");
  }
  f.read("dynamics", "init_scale", c.init_scale);
  f.read("dynamics", "inner_batch", c.inner_batch);

  f.read("outer", "beta", c.outer.beta);
  f.read("outer", "max_steps", c.outer.max_steps);
  if (auto mode = f.raw("outer", "mode")) {
    if (*mode == "reverse") c.outer.mode = HypergradMode::Reverse;
    else if (*mode == "forward") c.outer.mode = HypergradMode::Forward;
    else config_error("outer.mode: expected reverse or forward, got '" + *mode + "'");
  }
  f.read("outer", "warm_restart", c.outer.warm_restart);
  f.read("outer", "meta_batch", c.outer.meta_batch);
  f.read("outer", "tolerance", c.outer.tolerance);
  f.read("outer", "divergence_window", c.outer.divergence_window);
  f.read("outer", "divergence_factor", c.outer.divergence_factor);
  c.outer.seed = c.seed;

  f.read("checks", "lambda_samples", c.checks.lambda_samples);
  if (auto list = f.raw("checks", "unroll_lengths")) {
    c.checks.unroll_lengths = parse_int_list(*list, "checks.unroll_lengths");
  }
  f.read("checks", "mode_tolerance", c.checks.mode_tolerance);
  f.read("checks", "fd_tolerance", c.checks.fd_tolerance);
  f.read("checks", "transpose_probes", c.checks.transpose_probes);
  f.read("checks", "oracle_T", c.checks.oracle_T);
  f.read("checks", "oracle_tolerance", c.checks.oracle_tolerance);
  f.read("checks", "convergence_T_max", c.checks.convergence_T_max);
  f.read("checks", "ratio_tolerance", c.checks.ratio_tolerance);
  f.read("checks", "weight_gap", c.checks.weight_gap);
  f.read("checks", "stationarity_tolerance", c.checks.stationarity_tolerance);

  validate_config(c);
  return c;
}

RunConfig parse_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const Error& e) {
    config_error("cannot read config '" + path.string() + "': " + e.what());
  }
  return parse_config_text(text);
}

std::string resolved_config_json(const RunConfig& c) {
  json j;
  j["experiment"] = {{"kind", to_string(c.kind)},
                     {"seed", c.seed},
                     {"output_dir", c.output_dir.generic_string()},
                     {"write_data", c.write_data},
                     {"problem", to_string(c.problem)}};
  j["hyperclean"] = {{"n_train", c.hyperclean.n_train},
                     {"n_validation", c.hyperclean.n_validation},
                     {"n_test", c.hyperclean.n_test},
                     {"features", c.hyperclean.features},
                     {"classes", c.hyperclean.classes},
                     {"separation", c.hyperclean.separation},
                     {"corruption", c.hyperclean.corruption},
                     {"l2", c.hyperclean_l2}};
  j["ridge"] = {{"n_train", c.regression.n_train},
                {"n_validation", c.regression.n_validation},
                {"features", c.regression.features},
                {"noise", c.regression.noise},
                {"l2", c.ridge_l2}};
  j["hyperrepr"] = {{"tasks", c.subspace.tasks},
                    {"heldout_tasks", c.heldout_tasks},
                    {"features", c.subspace.features},
                    {"true_rank", c.subspace.true_rank},
                    {"classes", c.subspace.classes},
                    {"shots", c.subspace.shots},
                    {"validation_shots", c.subspace.validation_shots},
                    {"k", c.repr.k},
                    {"repr_init_scale", c.repr.repr_init_scale}};
  j["dynamics"] = {{"kind", to_string(c.dynamics.kind)},
                   {"eta", c.eta_auto ? json("auto") : json(c.dynamics.eta)},
                   {"mu", c.dynamics.mu},
                   {"T", c.T},
                   {"init", c.init == InitKind::Zero ? "zero" : "gaussian"},
                   {"init_scale", c.init_scale},
                   {"inner_batch", c.inner_batch}};
  j["outer"] = {{"beta", c.outer.beta},
                {"max_steps", c.outer.max_steps},
                {"mode", to_string(c.outer.mode)},
                {"warm_restart", c.outer.warm_restart},
                {"meta_batch", c.outer.meta_batch},
                {"tolerance", c.outer.tolerance},
                {"divergence_window", c.outer.divergence_window},
                {"divergence_factor", c.outer.divergence_factor}};
  j["checks"] = {{"lambda_samples", c.checks.lambda_samples},
                 {"unroll_lengths", c.checks.unroll_lengths},
                 {"mode_tolerance", c.checks.mode_tolerance},
                 {"fd_tolerance", c.checks.fd_tolerance},
                 {"transpose_probes", c.checks.transpose_probes},
                 {"oracle_T", c.checks.oracle_T},
                 {"oracle_tolerance", c.checks.oracle_tolerance},
                 {"convergence_T_max", c.checks.convergence_T_max},
                 {"ratio_tolerance", c.checks.ratio_tolerance},
                 {"weight_gap", c.checks.weight_gap},
                 {"stationarity_tolerance", c.checks.stationarity_tolerance}};
  return j.dump(2) + "\n";
}

std::filesystem::path resolve_output_dir(const RunConfig& config) {
  if (const char* env = std::getenv("BILEVEL_OUTPUT_DIR"); env && *env) return env;
  return config.output_dir;
}

bool RunReport::all_pass() const {
  return std::all_of(verdicts.begin(), verdicts.end(), [](const Verdict& v) { return v.pass; });
}

// ---------------------------------------------------------------------------
// Experiments

namespace {

constexpr std::uint64_t kInitSeed = 0x1001;
constexpr std::uint64_t kBatchSeed = 0x2002;
constexpr std::uint64_t kSampleSeed = 0x3003;
constexpr std::uint64_t kReprSeed = 0x4004;
constexpr std::uint64_t kProbeSeed = 0x5005;

struct Built {
  ProblemInstance instance;
  std::optional<QuadraticInner> quadratic;  // ridge only
  std::optional<HyperCleanData> hyperclean;
  std::shared_ptr<const MetaDataset> meta;
  std::shared_ptr<const MetaDataset> heldout;
  ProblemOptions options;
};

ProblemOptions problem_options(const RunConfig& c) {
  ProblemOptions o;
  o.dynamics = c.dynamics;
  o.T = c.T;
  o.init = c.init;
  o.init_seed = c.seed + kInitSeed;
  o.init_scale = c.init_scale;
  if (c.inner_batch > 0) o.inner_batch = InnerMiniBatch{c.inner_batch, c.seed + kBatchSeed};
  return o;
}

Built build_ridge(const RunConfig& c) {
  Built b;
  auto [train, val] = generate_regression(c.regression, c.seed);
  b.quadratic = QuadraticInner::ridge(train.inputs, train.targets);
  b.options = problem_options(c);
  if (c.eta_auto) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(2.0 * b.quadratic->A(Vector::Constant(1, c.ridge_l2)),
                                             Eigen::EigenvaluesOnly);
    b.options.dynamics.eta = 1.0 / es.eigenvalues().maxCoeff();
  }
  b.instance = ridge_problem(train, val, b.options, c.ridge_l2);
  return b;
}

Built build_hyperclean(const RunConfig& c) {
  Built b;
  b.hyperclean = generate_hyperclean(c.hyperclean, c.seed);
  b.options = problem_options(c);
  HyperCleanOptions opt;
  opt.base = b.options;
  opt.l2 = c.hyperclean_l2;
  b.instance = hyperclean_problem(*b.hyperclean, opt);
  return b;
}

Built build_hyperrepr(const RunConfig& c) {
  Built b;
  SharedSubspaceParams all = c.subspace;
  all.tasks = c.subspace.tasks + c.heldout_tasks;
  MetaDataset meta = generate_shared_subspace(all, c.seed);
  MetaDataset train = meta;
  MetaDataset heldout = meta;
  train.episodes.assign(meta.episodes.begin(), meta.episodes.begin() + c.subspace.tasks);
  heldout.episodes.assign(meta.episodes.begin() + c.subspace.tasks, meta.episodes.end());
  b.meta = std::make_shared<const MetaDataset>(std::move(train));
  b.heldout = std::make_shared<const MetaDataset>(std::move(heldout));
  b.options = problem_options(c);
  HyperReprSpec spec = c.repr;
  spec.repr_seed = c.seed + kReprSeed;
  b.instance = hyperrepr_problem(b.meta->episodes, spec, b.options);
  return b;
}

Built build(const RunConfig& c, ProblemKind kind) {
  switch (kind) {
    case ProblemKind::Ridge: return build_ridge(c);
    case ProblemKind::HyperClean: return build_hyperclean(c);
    case ProblemKind::HyperRepr: return build_hyperrepr(c);
  }
  throw Error(ErrorCode::BadParams, "unknown problem");
}

/// Random lambda strictly inside the box: uniform on the inner 90% of finite
/// boxes, log-uniform around the start for one-sided ones, Gaussian otherwise.
/// Learning-rate segments only shrink, keeping the unroll stable.
HyperVector sample_lambda(const HyperVector& base, std::uint64_t seed,
                          const std::string& lr_segment) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<Scalar> unit(0.0, 1.0);
  std::normal_distribution<Scalar> normal(0.0, 1.0);
  Vector v = base.values();
  for (Index i = 0; i < v.size(); ++i) {
    const Scalar lo = base.lower()[i], hi = base.upper()[i];
    if (std::isfinite(lo) && std::isfinite(hi)) {
      v[i] = lo + (hi - lo) * (0.05 + 0.9 * unit(rng));
    } else if (std::isfinite(lo)) {
      v[i] = lo + (v[i] - lo) * std::exp(2.0 * unit(rng) - 1.0);
    } else {
      v[i] += 0.3 * (1.0 + std::abs(v[i])) * normal(rng);
    }
  }
  if (auto seg = base.find_segment(lr_segment)) {
    v[seg->offset] = base.values()[seg->offset] - 0.7 * unit(rng);
  }
  return base.with_values(v);
}

json segments_json(const HyperVector& h) {
  json out = json::object();
  for (const Segment& s : h.segments()) {
    const Vector v = h.values().segment(s.offset, s.length);
    out[s.name] = std::vector<Scalar>(v.data(), v.data() + v.size());
  }
  return out;
}

json outer_json(const OuterResult& r) {
  const auto& rec = r.trace.records;
  return {{"stop_reason", to_string(r.stop)},
          {"steps", rec.size()},
          {"f_initial", rec.empty() ? 0.0 : rec.front().f_value},
          {"f_final", rec.empty() ? 0.0 : rec.back().f_value},
          {"hypergrad_inf_norm_final", rec.empty() ? 0.0 : rec.back().hypergrad_inf_norm},
          {"lambda_hash_final", r.hyper.hash()},
          {"lambda_final", segments_json(r.hyper)}};
}

struct Context {
  const RunConfig& config;
  std::vector<Verdict> verdicts;
  json summary;
  std::optional<OuterResult> outer;
  std::vector<std::pair<std::string, std::string>> extra_files;

  void verdict(std::string name, bool pass, Scalar measured, Scalar threshold) {
    verdicts.push_back({std::move(name), pass, measured, threshold});
  }
  void at_most(std::string name, Scalar measured, Scalar threshold) {
    verdict(std::move(name), measured <= threshold, measured, threshold);
  }
};

OuterResult run_outer_for(const Built& b, const RunConfig& c, const OuterConfig& cfg) {
  if (b.meta) {
    const MetaSource source(b.meta, b.options, cfg.meta_batch, c.seed + kBatchSeed);
    return run_outer(source, cfg, b.instance.hyper);
  }
  return run_outer(b.instance.problem, cfg, b.instance.hyper);
}

/// Transpose consistency, reverse/forward agreement and finite-difference
/// agreement over the configured unroll lengths and random lambdas.
void derivative_checks(Context& ctx, const Built& b) {
  const RunConfig& c = ctx.config;
  const BilevelProblem& base = b.instance.problem;
  Scalar transpose = 0.0;
  for (int s = 0; s < 3; ++s) {
    const HyperVector h = sample_lambda(b.instance.hyper, c.seed + kProbeSeed + s,
                                        c.dynamics.lr_segment);
    transpose = std::max(transpose, check_transpose_consistency(base, h, c.checks.transpose_probes,
                                                                c.seed + kProbeSeed + s)
                                        .max_defect);
  }
  ctx.at_most("transpose_consistency", transpose, TransposeReport::kThreshold);

  Scalar mode_err = 0.0, fd_err = 0.0;
  int evaluations = 0;
  for (int T : c.checks.unroll_lengths) {
    const BilevelProblem p = base.with_unroll(T);
    for (int s = 0; s < c.checks.lambda_samples; ++s) {
      const HyperVector h = sample_lambda(b.instance.hyper, c.seed + kSampleSeed + 1000 * T + s,
                                          c.dynamics.lr_segment);
      const Vector rev = reverse_hypergrad(p, unroll(p, h)).grad;
      mode_err = std::max(mode_err, relative_inf_error(forward_hypergrad(p, h).grad, rev));
      fd_err = std::max(fd_err, relative_inf_error(fd_hypergrad(p, h).grad, rev));
      ++evaluations;
    }
  }
  ctx.at_most("mode_agreement", mode_err, c.checks.mode_tolerance);
  ctx.at_most("fd_agreement", fd_err, c.checks.fd_tolerance);
  ctx.summary["checks"] = {{"hypergradient_evaluations", evaluations},
                           {"transpose_max_defect", transpose},
                           {"mode_max_relative_error", mode_err},
                           {"fd_max_relative_error", fd_err}};
}

Scalar projected_residual(const HyperVector& h, const Vector& grad, Scalar beta) {
  const HyperVector next = project_box(h.with_values(h.values() - beta * grad));
  return (h.values() - next.values()).lpNorm<Eigen::Infinity>() / beta;
}

void run_ridge_verify(Context& ctx) {
  const RunConfig& c = ctx.config;
  const Built b = build_ridge(c);
  const QuadraticInner& q = *b.quadratic;
  const BilevelProblem& p = b.instance.problem;
  const HyperVector& h0 = b.instance.hyper;
  const DataView val = p.validation_view();

  const BilevelProblem long_run = p.with_unroll(c.checks.oracle_T);
  const Trajectory tr = unroll(long_run, h0);
  const Vector w_star = exact_minimizer(q, h0.segment_values("l2"));
  const Scalar endpoint = (tr.final_state() - w_star).lpNorm<Eigen::Infinity>();
  ctx.at_most("closed_form_endpoint", endpoint, 1e-8);
  const Vector exact = exact_hypergrad(q, *p.outer, h0, "l2", val);
  const Vector rev = reverse_hypergrad(long_run, tr).grad;
  const Scalar oracle_err = relative_inf_error(rev, exact);
  ctx.at_most("oracle_equivalence", oracle_err, c.checks.oracle_tolerance);

  derivative_checks(ctx, b);

  ctx.outer = run_outer_for(b, c, c.outer);
  const Vector g = reverse_hypergrad(p, unroll(p, ctx.outer->hyper)).grad;
  const Scalar residual = projected_residual(ctx.outer->hyper, g, c.outer.beta);
  ctx.at_most("outer_stationarity", residual, c.checks.stationarity_tolerance);

  ctx.summary["ridge"] = {{"eta", b.options.dynamics.eta},
                          {"closed_form_endpoint_error", endpoint},
                          {"oracle_T", c.checks.oracle_T},
                          {"oracle_relative_error", oracle_err},
                          {"exact_hypergradient", exact[0]},
                          {"projected_gradient_residual", residual}};
}

void run_gradcheck(Context& ctx) {
  const RunConfig& c = ctx.config;
  const Built b = build(c, c.problem);
  derivative_checks(ctx, b);

  OuterConfig rev_cfg = c.outer;
  rev_cfg.mode = HypergradMode::Reverse;
  OuterConfig fwd_cfg = c.outer;
  fwd_cfg.mode = HypergradMode::Forward;
  OuterResult rev = run_outer_for(b, c, rev_cfg);
  const OuterResult fwd = run_outer_for(b, c, fwd_cfg);
  Scalar worst = 0.0;
  const std::size_t n = std::min(rev.trace.records.size(), fwd.trace.records.size());
  for (std::size_t s = 0; s < n; ++s) {
    const Scalar x = rev.trace.records[s].f_value, y = fwd.trace.records[s].f_value;
    worst = std::max(worst, std::abs(x - y) / (std::abs(x) + 1e-12));
  }
  if (rev.trace.records.size() != fwd.trace.records.size()) worst = HyperVector::kInf;
  ctx.at_most("outer_mode_agreement", worst, c.checks.mode_tolerance);
  ctx.summary["problem"] = {{"kind", to_string(c.problem)},
                            {"param_dim", b.instance.problem.param_dim()},
                            {"hyper_dim", b.instance.hyper.size()},
                            {"T", c.T}};
  ctx.outer = c.outer.mode == HypergradMode::Reverse ? std::move(rev) : fwd;
}

void run_convergence(Context& ctx) {
  const RunConfig& c = ctx.config;
  const Built b = build_ridge(c);
  std::vector<int> Ts(static_cast<std::size_t>(c.checks.convergence_T_max));
  std::iota(Ts.begin(), Ts.end(), 1);
  const ConvergenceTable table =
      convergence_harness(b.instance.problem, *b.quadratic, b.instance.hyper, "l2", Ts);
  std::ostringstream csv;
  csv << "T,error,below_floor,fitted_ratio,theory_ratio\n";
  for (const auto& row : table.rows) {
    csv << row.T << ',' << format_scalar(row.error) << ',' << (row.below_floor ? 1 : 0) << ','
        << format_scalar(table.fitted_ratio) << ',' << format_scalar(table.theory_ratio) << '\n';
  }
  ctx.extra_files.emplace_back("convergence.csv", csv.str());
  const Scalar rel = table.ratio_relative_error();
  ctx.verdict("fitted_ratio", std::isfinite(rel) && rel <= c.checks.ratio_tolerance, rel,
              c.checks.ratio_tolerance);
  ctx.verdict("monotone_after_T0", table.monotone_after_T0, table.monotone_after_T0 ? 1.0 : 0.0,
              1.0);
  ctx.summary["convergence"] = {{"eta", table.step_size},
                                {"strong_convexity", table.mu},
                                {"fitted_ratio", table.fitted_ratio},
                                {"theory_ratio", table.theory_ratio},
                                {"T0", table.T0},
                                {"fit_points", table.fit_points}};
  ctx.outer = run_outer_for(b, c, c.outer);
}

Scalar accuracy(const Dataset& d, const Vector& w, Index classes) {
  const Eigen::Map<const Matrix> W(w.data(), classes, d.features());
  const Matrix logits = d.inputs * W.transpose();
  Index hits = 0;
  for (Index i = 0; i < d.rows(); ++i) {
    Index label = 0;
    logits.row(i).maxCoeff(&label);
    hits += static_cast<Scalar>(label) == d.targets[i];
  }
  return static_cast<Scalar>(hits) / static_cast<Scalar>(d.rows());
}

void run_hyperclean(Context& ctx) {
  const RunConfig& c = ctx.config;
  const Built b = build_hyperclean(c);
  const HyperCleanData& data = *b.hyperclean;
  const BilevelProblem& p = b.instance.problem;
  ctx.outer = run_outer_for(b, c, c.outer);
  const HyperVector& h = ctx.outer->hyper;

  const Vector weights = h.segment_values("weights");
  Scalar corrupted = 0.0, clean = 0.0;
  Index n_corrupted = 0;
  for (Index i = 0; i < weights.size(); ++i) {
    if (data.corrupted[static_cast<std::size_t>(i)]) {
      corrupted += weights[i];
      ++n_corrupted;
    } else {
      clean += weights[i];
    }
  }
  const Index n_clean = weights.size() - n_corrupted;
  const Scalar mean_corrupted = n_corrupted ? corrupted / static_cast<Scalar>(n_corrupted) : 0.0;
  const Scalar mean_clean = n_clean ? clean / static_cast<Scalar>(n_clean) : 0.0;
  const Scalar gap = mean_clean - mean_corrupted;

  HyperVector baseline = b.instance.hyper;
  baseline.set_segment_values("weights", Vector::Ones(weights.size()));
  const Trajectory learned = unroll(p, h);
  const Trajectory plain = unroll(p, baseline);
  const DataView val = p.validation_view();
  const Scalar val_learned = p.outer->value(learned.final_state(), h, val);
  const Scalar val_plain = p.outer->value(plain.final_state(), baseline, val);

  ctx.verdict("weight_gap", gap >= c.checks.weight_gap, gap, c.checks.weight_gap);
  ctx.verdict("validation_loss_below_baseline", val_learned < val_plain, val_learned, val_plain);
  json hc = {{"mean_weight_corrupted", mean_corrupted},
             {"mean_weight_clean", mean_clean},
             {"weight_gap", gap},
             {"corrupted_examples", n_corrupted},
             {"validation_loss", val_learned},
             {"validation_loss_all_ones", val_plain},
             {"test_accuracy", accuracy(data.test, learned.final_state(), data.classes)},
             {"test_accuracy_all_ones", accuracy(data.test, plain.final_state(), data.classes)}};
  if (c.dynamics.kind == DynamicsKind::HyperLRGradientDescent) {
    hc["learned_eta"] = p.dynamics->step_size(h);
    hc["initial_eta"] = c.dynamics.eta;
  }
  ctx.summary["hyperclean"] = hc;
}

Scalar largest_angle(const HyperVector& h, Index features, const Matrix& truth) {
  const Vector r = h.segment_values("repr");
  const Eigen::Map<const Matrix> R(r.data(), r.size() / features, features);
  return principal_angles(R, truth.transpose()).maxCoeff();
}

void run_hyperrepr(Context& ctx) {
  const RunConfig& c = ctx.config;
  const Built b = build_hyperrepr(c);
  ctx.outer = run_outer_for(b, c, c.outer);
  const HyperVector& h0 = b.instance.hyper;
  const HyperVector& h = ctx.outer->hyper;
  const MetaSource heldout(b.heldout, b.options, 0, 0);
  const MetaSource train(b.meta, b.options, 0, 0);
  const Scalar loss_learned = heldout.mean_objective(h);
  const Scalar loss_frozen = heldout.mean_objective(h0);
  const Index p = c.subspace.features;
  const Scalar angle0 = largest_angle(h0, p, b.meta->true_subspace);
  const Scalar angle = largest_angle(h, p, b.meta->true_subspace);
  ctx.verdict("heldout_loss_below_frozen", loss_learned < loss_frozen, loss_learned, loss_frozen);
  ctx.verdict("principal_angle_decreased", angle < angle0, angle, angle0);
  ctx.summary["hyperrepr"] = {{"heldout_loss", loss_learned},
                              {"heldout_loss_frozen", loss_frozen},
                              {"train_meta_loss", train.mean_objective(h)},
                              {"train_meta_loss_frozen", train.mean_objective(h0)},
                              {"largest_principal_angle", angle},
                              {"largest_principal_angle_initial", angle0}};
}

std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_data_files(const RunConfig& c, const std::filesystem::path& dir) {
  if (!c.write_data) return;
  const auto data_dir = dir / "data";
  switch (c.kind) {
    case ExperimentKind::HyperClean: {
      const HyperCleanData d = generate_hyperclean(c.hyperclean, c.seed);
      write_dataset_csv(data_dir / "train.csv", d.train);
      write_dataset_csv(data_dir / "validation.csv", d.validation);
      write_dataset_csv(data_dir / "test.csv", d.test);
      write_mask_csv(data_dir / "mask.csv", d.corrupted);
      break;
    }
    case ExperimentKind::RidgeVerify:
    case ExperimentKind::Convergence: {
      const auto [train, val] = generate_regression(c.regression, c.seed);
      write_dataset_csv(data_dir / "train.csv", train);
      write_dataset_csv(data_dir / "validation.csv", val);
      break;
    }
    case ExperimentKind::HyperRepr: {
      SharedSubspaceParams all = c.subspace;
      all.tasks += c.heldout_tasks;
      const MetaDataset meta = generate_shared_subspace(all, c.seed);
      for (const Episode& e : meta.episodes) {
        const std::string id = std::to_string(e.task_id);
        write_dataset_csv(data_dir / ("episode_" + id + "_train.csv"), e.train);
        write_dataset_csv(data_dir / ("episode_" + id + "_validation.csv"), e.validation);
      }
      break;
    }
    case ExperimentKind::GradCheck: break;
  }
}

}  // namespace

RunReport run_experiment(const RunConfig& config) {
  const auto started = std::chrono::steady_clock::now();
  const std::string started_at = utc_timestamp();
  Context ctx{config, {}, json::object(), std::nullopt, {}};
  ctx.summary["experiment"] = to_string(config.kind);
  ctx.summary["seed"] = config.seed;

  switch (config.kind) {
    case ExperimentKind::HyperClean: run_hyperclean(ctx); break;
    case ExperimentKind::HyperRepr: run_hyperrepr(ctx); break;
    case ExperimentKind::RidgeVerify: run_ridge_verify(ctx); break;
    case ExperimentKind::GradCheck: run_gradcheck(ctx); break;
    case ExperimentKind::Convergence: run_convergence(ctx); break;
  }

  RunReport report;
  report.output_dir = resolve_output_dir(config);
  report.verdicts = ctx.verdicts;
  const auto& dir = report.output_dir;
  auto emit = [&](const std::string& name, const std::string& content) {
    write_file_atomic(dir / name, content);
    report.artifacts.push_back(name);
  };

  ctx.summary["outer"] = outer_json(*ctx.outer);
  json verdicts = json::object();
  for (const Verdict& v : ctx.verdicts) {
    verdicts[v.name] = {{"pass", v.pass}, {"measured", v.measured}, {"threshold", v.threshold}};
  }
  ctx.summary["all_pass"] = report.all_pass();

  emit("config.json", resolved_config_json(config));
  emit("trace.csv", trace_csv(ctx.outer->trace));
  emit("timing.csv", timing_csv(ctx.outer->trace));
  emit("summary.json", ctx.summary.dump(2) + "\n");
  if (!ctx.verdicts.empty()) emit("verdict.json", verdicts.dump(2) + "\n");
  for (const auto& [name, content] : ctx.extra_files) emit(name, content);
  write_data_files(config, dir);

  double outer_ms = 0.0;
  for (const auto& r : ctx.outer->trace.records) outer_ms += r.wall_ms;
  const json meta = {
      {"started_at", started_at},
      {"finished_at", utc_timestamp()},
      {"wall_ms", std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                            started)
                      .count()},
      {"outer_wall_ms", outer_ms}};
  emit("meta.json", meta.dump(2) + "\n");
  return report;
}

}  // namespace bilevel::cli
