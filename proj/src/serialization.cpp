#include "autogpc/serialization.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "autogpc/error.hpp"

namespace autogpc {

namespace {

constexpr const char* kCheckpointFormat = "autogpc-checkpoint";
constexpr int kCheckpointVersion = 1;

Json vec_to_json(const Eigen::VectorXd& v) {
  Json a = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

Eigen::VectorXd vec_from_json(const Json& j, const char* what) {
  if (!j.is_array()) throw ConfigError(std::string(what) + ": expected an array");
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  return v;
}

Json finite_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

double number_or_neg_inf(const Json& j) {
  return j.is_null() ? -std::numeric_limits<double>::infinity() : j.get<double>();
}

void reject_unknown(const Json& j, std::initializer_list<const char*> keys, const char* where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + ": expected a JSON object");
  const std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [key, _] : j.items())
    if (!allowed.contains(key)) throw ConfigError(std::string(where) + ": unknown key '" + key + "'");
}

template <class T>
void read_if(const Json& j, const char* key, T& out) {
  if (j.contains(key)) {
    try {
      out = j.at(key).get<T>();
    } catch (const Json::exception& e) {
      throw ConfigError(std::string("config key '") + key + "': " + e.what());
    }
  }
}

}  // namespace

std::string to_string(Sigmoid s) { return s == Sigmoid::Probit ? "probit" : "logistic"; }

Sigmoid sigmoid_from_string(const std::string& s) {
  if (s == "probit") return Sigmoid::Probit;
  if (s == "logistic") return Sigmoid::Logistic;
  throw ConfigError("unknown sigmoid '" + s + "' (expected probit or logistic)");
}

std::string to_string(Execution e) { return e == Execution::Serial ? "serial" : "openmp"; }

Execution execution_from_string(const std::string& s) {
  if (s == "serial") return Execution::Serial;
  if (s == "openmp") return Execution::OpenMP;
  throw ConfigError("unknown execution '" + s + "' (expected serial or openmp)");
}

Json kernel_to_json(const KernelExpression& k, const Eigen::VectorXd& theta_u, const PcfgConfig& pcfg) {
  const auto layout = param_layout(k);
  const ConstrainedParams c = transform_params(k, theta_u);
  Json params = Json::array();
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto idx = static_cast<Eigen::Index>(i);
    params.push_back({{"leaf", layout[i].leaf_index},
                      {"kernel", std::string(tag(layout[i].owner))},
                      {"name", std::string(layout[i].name)},
                      {"value", c.values[idx]},
                      {"unconstrained", theta_u[idx]}});
  }
  return {{"structure", k.to_string()}, {"params", params}, {"log_prior", finite_or_null(kernel_log_prior(k, pcfg))}};
}

Json particle_to_json(const Particle& p) {
  return {{"structure", p.kernel.to_string()},
          {"theta_u", vec_to_json(p.theta_u)},
          {"eps_u", p.eps_u},
          {"beta", p.beta},
          {"eta", vec_to_json(p.eta)},
          {"log_weight", finite_or_null(p.log_weight)}};
}

Particle particle_from_json(const Json& j) {
  Particle p;
  try {
    p.kernel = KernelExpression::parse(j.at("structure").get<std::string>());
    p.theta_u = vec_from_json(j.at("theta_u"), "theta_u");
    p.eps_u = j.at("eps_u").get<double>();
    p.beta = j.at("beta").get<double>();
    p.eta = vec_from_json(j.at("eta"), "eta");
    p.log_weight = number_or_neg_inf(j.at("log_weight"));
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("particle: ") + e.what());
  }
  if (static_cast<std::size_t>(p.theta_u.size()) != param_dim(p.kernel))
    throw ConfigError("particle: " + std::to_string(p.theta_u.size()) + " parameters for " + p.kernel.to_string());
  return p;
}

Json particle_summary(const Particle& p, const PcfgConfig& pcfg, double normalized_weight) {
  Json j = kernel_to_json(p.kernel, p.theta_u, pcfg);
  j["noise"] = p.noise();
  j["beta"] = p.beta;
  j["log_weight"] = finite_or_null(p.log_weight);
  j["weight"] = normalized_weight;
  return j;
}

Json to_json(const PcfgConfig& c) {
  return {{"p_leaf", c.p_leaf},
          {"p_sum", c.p_sum},
          {"p_product", c.p_product},
          {"base_weights", {{"LIN", c.base_weights[0]}, {"SE", c.base_weights[1]}, {"GE", c.base_weights[2]}}},
          {"max_depth", c.max_depth}};
}

PcfgConfig pcfg_from_json(const Json& j, PcfgConfig c) {
  reject_unknown(j, {"p_leaf", "p_sum", "p_product", "base_weights", "max_depth"}, "pcfg");
  read_if(j, "p_leaf", c.p_leaf);
  read_if(j, "p_sum", c.p_sum);
  read_if(j, "p_product", c.p_product);
  read_if(j, "max_depth", c.max_depth);
  if (j.contains("base_weights")) {
    const Json& b = j.at("base_weights");
    reject_unknown(b, {"LIN", "SE", "GE"}, "pcfg.base_weights");
    read_if(b, "LIN", c.base_weights[0]);
    read_if(b, "SE", c.base_weights[1]);
    read_if(b, "GE", c.base_weights[2]);
  }
  return c;
}

Json to_json(const ModelConfig& c) {
  return {{"pcfg", to_json(c.pcfg)},
          {"sigmoid", to_string(c.sigmoid)},
          {"noise_prior", {{"shape", c.noise.shape}, {"scale", c.noise.scale}}},
          {"fixed_kernel", c.fixed_kernel ? Json(c.fixed_kernel->to_string()) : Json(nullptr)}};
}

ModelConfig model_from_json(const Json& j, ModelConfig c) {
  reject_unknown(j, {"pcfg", "sigmoid", "noise_prior", "fixed_kernel"}, "model");
  if (j.contains("pcfg")) c.pcfg = pcfg_from_json(j.at("pcfg"), c.pcfg);
  if (j.contains("sigmoid")) c.sigmoid = sigmoid_from_string(j.at("sigmoid").get<std::string>());
  if (j.contains("noise_prior")) {
    const Json& n = j.at("noise_prior");
    reject_unknown(n, {"shape", "scale"}, "model.noise_prior");
    read_if(n, "shape", c.noise.shape);
    read_if(n, "scale", c.noise.scale);
  }
  if (j.contains("fixed_kernel")) {
    const Json& f = j.at("fixed_kernel");
    if (f.is_null())
      c.fixed_kernel.reset();
    else
      c.fixed_kernel = KernelExpression::parse(f.get<std::string>());
  }
  return c;
}

Json to_json(const SmcConfig& c) {
  return {{"num_particles", c.num_particles},
          {"n_reju", c.n_reju},
          {"ess_threshold_frac", c.ess_threshold_frac},
          {"batch_size", c.batch_size},
          {"hmc", {{"step_size", c.hmc.step_size}, {"leapfrog_steps", c.hmc.leapfrog_steps}, {"mass", c.hmc.mass}}},
          {"structure_move_probs",
           {{"subtree_replace", c.structure_move_probs.subtree_replace},
            {"detach_attach", c.structure_move_probs.detach_attach}}},
          {"rng_seed", c.rng_seed},
          {"execution", to_string(c.execution)}};
}

SmcConfig smc_from_json(const Json& j, SmcConfig c) {
  reject_unknown(j,
                 {"num_particles", "n_reju", "ess_threshold_frac", "batch_size", "hmc", "structure_move_probs",
                  "rng_seed", "execution"},
                 "smc");
  read_if(j, "num_particles", c.num_particles);
  read_if(j, "n_reju", c.n_reju);
  read_if(j, "ess_threshold_frac", c.ess_threshold_frac);
  read_if(j, "batch_size", c.batch_size);
  read_if(j, "rng_seed", c.rng_seed);
  if (j.contains("hmc")) {
    const Json& h = j.at("hmc");
    reject_unknown(h, {"step_size", "leapfrog_steps", "mass"}, "smc.hmc");
    read_if(h, "step_size", c.hmc.step_size);
    read_if(h, "leapfrog_steps", c.hmc.leapfrog_steps);
    read_if(h, "mass", c.hmc.mass);
  }
  if (j.contains("structure_move_probs")) {
    const Json& m = j.at("structure_move_probs");
    reject_unknown(m, {"subtree_replace", "detach_attach"}, "smc.structure_move_probs");
    read_if(m, "subtree_replace", c.structure_move_probs.subtree_replace);
    read_if(m, "detach_attach", c.structure_move_probs.detach_attach);
  }
  if (j.contains("execution")) c.execution = execution_from_string(j.at("execution").get<std::string>());
  return c;
}

Json to_json(const StepDiagnostics& d) {
  Json lw = Json::array();
  for (double v : d.log_weights) lw.push_back(finite_or_null(v));
  return {{"step", d.step},
          {"absorbed", d.absorbed},
          {"batch_points", d.batch_points},
          {"ess", d.ess},
          {"resampled", d.resampled},
          {"log_marginal_estimate", finite_or_null(d.log_marginal_estimate)},
          {"moves",
           {{"structure_proposed", d.moves.structure_proposed},
            {"structure_accepted", d.moves.structure_accepted},
            {"hmc_proposed", d.moves.hmc_proposed},
            {"hmc_accepted", d.moves.hmc_accepted},
            {"divergences", d.moves.divergences}}},
          {"dead_particles", d.dead_particles},
          {"structures", d.structures},
          {"log_weights", lw}};
}

Json to_json(const Standardizer& s) { return {{"mean", s.mean}, {"scale", s.scale}}; }

Standardizer standardizer_from_json(const Json& j) {
  Standardizer s;
  try {
    s.mean = j.at("mean").get<std::vector<double>>();
    s.scale = j.at("scale").get<std::vector<double>>();
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("standardizer: ") + e.what());
  }
  if (s.mean.size() != s.scale.size()) throw ConfigError("standardizer: mean and scale lengths differ");
  return s;
}

Json checkpoint_to_json(const Checkpoint& c) {
  Json particles = Json::array();
  for (const auto& p : c.particles.particles) particles.push_back(particle_to_json(p));
  Json X = Json::array();
  for (Eigen::Index i = 0; i < c.training.X.rows(); ++i) X.push_back(vec_to_json(c.training.X.row(i).transpose()));
  return {{"format", kCheckpointFormat},
          {"version", kCheckpointVersion},
          {"model", to_json(c.model)},
          {"smc", to_json(c.smc)},
          {"absorbed", c.particles.absorbed},
          {"log_marginal_estimate", finite_or_null(c.particles.log_marginal_estimate)},
          {"steps_taken", c.steps_taken},
          {"particles", particles},
          {"training",
           {{"dim", c.training.dim()}, {"feature_names", c.training.feature_names}, {"X", X}, {"y", c.training.y}}},
          {"standardizer", to_json(c.standardizer)}};
}

Checkpoint checkpoint_from_json(const Json& j) {
  if (!j.is_object() || j.value("format", "") != kCheckpointFormat)
    throw ConfigError("not an autogpc checkpoint");
  if (j.value("version", 0) != kCheckpointVersion)
    throw ConfigError("unsupported checkpoint version " + j.value("version", Json(0)).dump());
  Checkpoint c;
  try {
    c.model = model_from_json(j.at("model"));
    c.smc = smc_from_json(j.at("smc"));
    c.particles.absorbed = j.at("absorbed").get<std::size_t>();
    c.particles.log_marginal_estimate = number_or_neg_inf(j.at("log_marginal_estimate"));
    c.steps_taken = j.at("steps_taken").get<std::size_t>();
    for (const auto& p : j.at("particles")) c.particles.particles.push_back(particle_from_json(p));
    const Json& t = j.at("training");
    const auto dim = t.at("dim").get<std::size_t>();
    const Json& X = t.at("X");
    c.training.X.resize(static_cast<Eigen::Index>(X.size()), static_cast<Eigen::Index>(dim));
    for (std::size_t i = 0; i < X.size(); ++i) {
      const Eigen::VectorXd row = vec_from_json(X[i], "training.X row");
      if (static_cast<std::size_t>(row.size()) != dim) throw ConfigError("checkpoint: ragged training matrix");
      c.training.X.row(static_cast<Eigen::Index>(i)) = row.transpose();
    }
    c.training.y = t.at("y").get<std::vector<int>>();
    c.training.feature_names = t.at("feature_names").get<std::vector<std::string>>();
    c.standardizer = standardizer_from_json(j.at("standardizer"));
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("checkpoint: ") + e.what());
  }
  c.training.validate();
  if (c.particles.absorbed != c.training.size())
    throw ConfigError("checkpoint: absorbed count does not match the stored training data");
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& c) {
  atomic_write(path, checkpoint_to_json(c).dump(1) + "\n");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open checkpoint " + path);
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace autogpc
