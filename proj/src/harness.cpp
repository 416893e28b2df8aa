#include "autogpc/harness.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <sstream>

#include "autogpc/error.hpp"

namespace autogpc {

namespace {

std::vector<Dataset> chunk(const Dataset& d, std::size_t size) {
  std::vector<Dataset> out;
  for (std::size_t b = 0; b < d.size(); b += size) out.push_back(d.slice(b, std::min(d.size(), b + size)));
  return out;
}

std::vector<Dataset> split_even(const Dataset& d, std::size_t parts) {
  std::vector<Dataset> out;
  if (parts == 0) return out;
  const std::size_t size = (d.size() + parts - 1) / parts;
  return size == 0 ? out : chunk(d, size);
}

std::vector<double> test_probs(const PosteriorPredictive& pp, const Dataset& d) {
  return d.size() == 0 ? std::vector<double>{} : pp.predict_probs(d.X);
}

double accuracy_or_nan(const PosteriorPredictive& pp, const Dataset& d) {
  return d.size() == 0 ? std::nan("") : accuracy(pp, d.X, d.y);
}

Json nan_to_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

std::string output_path(const ExperimentConfig& cfg, const char* name) {
  return cfg.output_dir.empty() ? std::string() : (std::filesystem::path(cfg.output_dir) / name).string();
}

Json particles_json(const ParticleSet& ps, const PcfgConfig& pcfg) {
  const auto lw = ps.log_weights();
  const double total = log_sum_exp(lw);
  Json out = Json::array();
  for (std::size_t i = 0; i < ps.particles.size(); ++i)
    out.push_back(particle_summary(ps.particles[i], pcfg, std::isfinite(total) ? std::exp(lw[i] - total) : 0.0));
  return out;
}

class Run {
 public:
  explicit Run(const ExperimentConfig& cfg) : cfg_(cfg), start_(std::chrono::steady_clock::now()) {
    cfg_.validate();
    prepared_ = prepare_data(cfg_);
  }

  const Dataset& train() const { return prepared_.split.train; }
  const Dataset& test() const { return prepared_.split.test; }

  SmcSampler make_sampler(const SmcConfig& smc) const { return SmcSampler(cfg_.model, smc, train().dim()); }

  void absorb(SmcSampler& sampler, const Dataset& batch, bool final_step) {
    try {
      sampler.absorb(batch, final_step);
    } catch (const Error& e) {
      std::string path = output_path(cfg_, "checkpoint_failed.json");
      if (!path.empty()) save_checkpoint(path, checkpoint(sampler));
      throw RunFailure(std::string("step ") + std::to_string(sampler.steps_taken() + 1) + ": " + e.what(), path);
    }
  }

  Checkpoint checkpoint(const SmcSampler& sampler) const {
    return {cfg_.model, sampler.config(), sampler.particles(), sampler.absorbed_data(), sampler.steps_taken(),
            prepared_.standardizer};
  }

  PosteriorPredictive predictive(const SmcSampler& sampler) const {
    return PosteriorPredictive(sampler.particles(), sampler.absorbed_data().X, cfg_.model.sigmoid, cfg_.predict);
  }

  ExperimentResult finish(const SmcSampler& sampler, Json steps, Json metrics) {
    ExperimentResult r;
    const PosteriorPredictive pp = predictive(sampler);
    const auto probs = test_probs(pp, test());
    std::vector<int> labels(probs.size());
    std::transform(probs.begin(), probs.end(), labels.begin(), decide);
    r.accuracy = test().size() == 0 ? std::nan("") : label_accuracy(labels, test().y);
    r.train_accuracy = accuracy_or_nan(pp, train());
    metrics["accuracy"] = nan_to_null(r.accuracy);
    metrics["train_accuracy"] = nan_to_null(r.train_accuracy);

    Json config = to_json(cfg_);
    config["resolved"] = {{"n_train", train().size()},
                          {"n_test", test().size()},
                          {"dim", train().dim()},
                          {"batch_size", sampler.config().batch_size},
                          {"batches", sampler.steps_taken()},
                          {"threads", cfg_.smc.execution == Execution::OpenMP ? max_threads() : 1},
                          {"warnings", prepared_.warnings}};
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    r.report = {{"config", config},
                {"steps", std::move(steps)},
                {"particles", particles_json(sampler.particles(), cfg_.model.pcfg)},
                {"metrics", metrics},
                {"runtime_seconds", seconds}};
    r.particles = sampler.particles();
    r.train = train();
    r.test = test();
    r.standardizer = prepared_.standardizer;
    r.steps = sampler.history();

    r.report_path = output_path(cfg_, "report.json");
    if (!r.report_path.empty()) {
      atomic_write(r.report_path, r.report.dump(2) + "\n");
      atomic_write(output_path(cfg_, "predictions.csv"), predictions_csv(probs, test().y));
      r.checkpoint_path = output_path(cfg_, "checkpoint.json");
      save_checkpoint(r.checkpoint_path, checkpoint(sampler));
    }
    return r;
  }

  const ExperimentConfig& cfg() const { return cfg_; }

 private:
  ExperimentConfig cfg_;
  PreparedData prepared_;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace

std::string to_string(RunMode m) { return m == RunMode::Offline ? "offline" : "online"; }

std::string to_string(OnlineProtocol p) {
  return p == OnlineProtocol::NaturalOrder ? "natural_order" : "class_biased_first_batch";
}

OnlineProtocol protocol_from_string(const std::string& s) {
  if (s == "natural_order") return OnlineProtocol::NaturalOrder;
  if (s == "class_biased_first_batch") return OnlineProtocol::ClassBiasedFirstBatch;
  throw ConfigError("unknown online protocol '" + s + "' (expected natural_order or class_biased_first_batch)");
}

void ExperimentConfig::validate() const {
  if (csv_path.has_value() == toy.has_value()) throw ConfigError("give exactly one of a CSV path or a toy spec");
  if (toy) toy->validate();
  if (batch_count.has_value() == batch_size.has_value())
    throw ConfigError("give exactly one of batch_count or batch_size");
  if (batch_count && *batch_count < 1) throw ConfigError("batch_count must be >= 1");
  if (batch_size && *batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train fraction must lie in (0, 1)");
  if (predict.mc_samples < 1) throw ConfigError("mc_samples must be >= 1");
  model.validate();
  smc.validate();
}

Json to_json(const ExperimentConfig& c) {
  Json data;
  if (c.csv_path) data["csv"] = *c.csv_path;
  if (c.toy)
    data["toy"] = {{"kind", to_string(c.toy->kind)}, {"n", c.toy->n}, {"noise", c.toy->noise}, {"seed", c.toy->seed}};
  const Json model = to_json(c.model);
  return {{"mode", to_string(c.mode)},
          {"data", data},
          {"batch_count", c.batch_count ? Json(*c.batch_count) : Json(nullptr)},
          {"batch_size", c.batch_size ? Json(*c.batch_size) : Json(nullptr)},
          {"train_fraction", c.train_fraction},
          {"split_seed", c.split_seed},
          {"standardize", c.standardize},
          {"online_protocol", to_string(c.protocol)},
          {"biased_holdback", c.biased_holdback},
          {"prequential", c.prequential},
          {"fixed_kernel", model["fixed_kernel"]},
          {"pcfg", model["pcfg"]},
          {"sigmoid", model["sigmoid"]},
          {"noise_prior", model["noise_prior"]},
          {"smc", to_json(c.smc)},
          {"predict",
           {{"include_noise", c.predict.include_noise},
            {"mc_samples", c.predict.mc_samples},
            {"mc_seed", c.predict.mc_seed}}},
          {"output_dir", c.output_dir}};
}

ExperimentConfig experiment_from_json(const Json& j, ExperimentConfig c) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  Json model_keys = Json::object();
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "mode") {
        const auto m = v.get<std::string>();
        if (m != "offline" && m != "online") throw ConfigError("config: mode must be offline or online");
        c.mode = m == "offline" ? RunMode::Offline : RunMode::Online;
      } else if (key == "data") {
        if (!v.is_object()) throw ConfigError("config: data must be an object");
        for (const auto& [dk, dv] : v.items()) {
          if (dk == "csv") {
            c.csv_path = dv.get<std::string>();
            c.toy.reset();
          } else if (dk == "toy") {
            ToySpec t = c.toy.value_or(ToySpec{});
            for (const auto& [tk, tv] : dv.items()) {
              if (tk == "kind") t.kind = toy_kind_from_string(tv.get<std::string>());
              else if (tk == "n") t.n = tv.get<std::size_t>();
              else if (tk == "noise") t.noise = tv.get<double>();
              else if (tk == "seed") t.seed = tv.get<std::uint64_t>();
              else throw ConfigError("config: unknown key 'data.toy." + tk + "'");
            }
            c.toy = t;
            c.csv_path.reset();
          } else {
            throw ConfigError("config: unknown key 'data." + dk + "'");
          }
        }
      } else if (key == "batch_count") {
        if (v.is_null()) c.batch_count.reset();
        else {
          c.batch_count = v.get<std::size_t>();
          if (!j.contains("batch_size")) c.batch_size.reset();
        }
      } else if (key == "batch_size") {
        if (v.is_null()) c.batch_size.reset();
        else {
          c.batch_size = v.get<std::size_t>();
          if (!j.contains("batch_count")) c.batch_count.reset();
        }
      } else if (key == "train_fraction") {
        c.train_fraction = v.get<double>();
      } else if (key == "split_seed") {
        c.split_seed = v.get<std::uint64_t>();
      } else if (key == "standardize") {
        c.standardize = v.get<bool>();
      } else if (key == "online_protocol") {
        c.protocol = protocol_from_string(v.get<std::string>());
      } else if (key == "biased_holdback") {
        c.biased_holdback = v.get<std::size_t>();
      } else if (key == "prequential") {
        c.prequential = v.get<bool>();
      } else if (key == "fixed_kernel" || key == "pcfg" || key == "sigmoid" || key == "noise_prior") {
        model_keys[key] = v;
      } else if (key == "smc") {
        c.smc = smc_from_json(v, c.smc);
      } else if (key == "predict") {
        for (const auto& [pk, pv] : v.items()) {
          if (pk == "include_noise") c.predict.include_noise = pv.get<bool>();
          else if (pk == "mc_samples") c.predict.mc_samples = pv.get<std::size_t>();
          else if (pk == "mc_seed") c.predict.mc_seed = pv.get<std::uint64_t>();
          else throw ConfigError("config: unknown key 'predict." + pk + "'");
        }
      } else if (key == "output_dir") {
        c.output_dir = v.get<std::string>();
      } else {
        throw ConfigError("config: unknown key '" + key + "'");
      }
    }
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.model = model_from_json(model_keys, c.model);
  return c;
}

PreparedData prepare_data(const ExperimentConfig& cfg) {
  const Dataset raw = cfg.csv_path ? read_csv(*cfg.csv_path, true) : gen_toy(*cfg.toy);
  PreparedData p;
  const Split split = stratified_split(raw, cfg.train_fraction, cfg.split_seed);
  p.standardizer = cfg.standardize ? Standardizer::fit(split.train.X, &p.warnings, raw.feature_names)
                                   : Standardizer::identity(raw.dim());
  p.split = split;
  p.split.train = p.standardizer.apply(split.train);
  p.split.test = p.standardizer.apply(split.test);
  return p;
}

std::size_t resolve_batch_size(const ExperimentConfig& cfg, std::size_t n_train) {
  if (cfg.batch_size) return *cfg.batch_size;
  const std::size_t T = cfg.batch_count.value_or(1);
  return std::max<std::size_t>(1, (n_train + T - 1) / T);
}

std::vector<Dataset> online_batches(const ExperimentConfig& cfg, const Dataset& train) {
  if (cfg.protocol == OnlineProtocol::NaturalOrder) {
    return cfg.batch_size ? chunk(train, *cfg.batch_size) : split_even(train, *cfg.batch_count);
  }
  std::vector<std::size_t> first, rest;
  std::size_t class0_seen = 0;
  std::size_t class0_total = 0;
  for (int label : train.y) class0_total += label == 0 ? 1 : 0;
  const std::size_t class0_first = class0_total - std::min(cfg.biased_holdback, class0_total);
  for (std::size_t i = 0; i < train.size(); ++i) {
    if (train.y[i] == 0 && class0_seen < class0_first) {
      first.push_back(i);
      ++class0_seen;
    } else {
      rest.push_back(i);
    }
  }
  std::vector<Dataset> out;
  out.push_back(train.subset(first));
  const Dataset remainder = train.subset(rest);
  auto tail = cfg.batch_size ? chunk(remainder, *cfg.batch_size)
                             : split_even(remainder, std::max<std::size_t>(1, *cfg.batch_count - 1));
  out.insert(out.end(), tail.begin(), tail.end());
  return out;
}

ExperimentResult run_offline(const ExperimentConfig& cfg) {
  Run run(cfg);
  SmcConfig smc = cfg.smc;
  smc.batch_size = resolve_batch_size(cfg, run.train().size());
  SmcSampler sampler = run.make_sampler(smc);
  const auto batches = chunk(run.train(), smc.batch_size);
  for (std::size_t b = 0; b < batches.size(); ++b) run.absorb(sampler, batches[b], b + 1 == batches.size());
  Json steps = Json::array();
  for (const auto& d : sampler.history()) steps.push_back(to_json(d));
  return run.finish(sampler, steps, Json::object());
}

ExperimentResult run_online(const ExperimentConfig& cfg) {
  Run run(cfg);
  const auto batches = online_batches(cfg, run.train());
  SmcConfig smc = cfg.smc;
  smc.batch_size = std::max<std::size_t>(1, batches.empty() ? 1 : batches.front().size());
  SmcSampler sampler = run.make_sampler(smc);
  std::vector<double> per_batch;
  Json steps = Json::array();
  for (std::size_t b = 0; b < batches.size(); ++b) {
    double acc = std::nan("");
    if (cfg.prequential) acc = accuracy_or_nan(run.predictive(sampler), batches[b]);
    run.absorb(sampler, batches[b], b + 1 == batches.size());
    if (!cfg.prequential) acc = accuracy_or_nan(run.predictive(sampler), run.test());
    per_batch.push_back(acc);
    Json step = to_json(sampler.history().back());
    step["accuracy"] = nan_to_null(acc);
    step["class_counts"] = {std::count(batches[b].y.begin(), batches[b].y.end(), 0),
                            std::count(batches[b].y.begin(), batches[b].y.end(), 1)};
    steps.push_back(step);
  }
  Json metrics = Json::object();
  Json pba = Json::array();
  for (double a : per_batch) pba.push_back(nan_to_null(a));
  metrics["per_batch_accuracy"] = pba;
  std::optional<double> average;
  if (!per_batch.empty()) average = online_average_accuracy(per_batch);
  metrics["average_accuracy"] = average ? nan_to_null(*average) : Json(nullptr);
  ExperimentResult r = run.finish(sampler, steps, metrics);
  r.per_batch_accuracy = per_batch;
  r.average_accuracy = average;
  return r;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  return cfg.mode == RunMode::Offline ? run_offline(cfg) : run_online(cfg);
}

std::string predictions_csv(const std::vector<double>& probs, const std::vector<int>& y_true) {
  std::ostringstream out;
  out.precision(17);
  out << "row,y_true,prob_class1,label\n";
  for (std::size_t i = 0; i < probs.size(); ++i) {
    out << i << ',';
    if (i < y_true.size()) out << y_true[i];
    out << ',' << probs[i] << ',' << decide(probs[i]) << '\n';
  }
  return out.str();
}

std::string grid_csv(const ProbabilityGrid& grid, const Standardizer& standardizer) {
  std::ostringstream out;
  out.precision(17);
  out << "x1,x2,prob\n";
  for (std::size_t i = 0; i < grid.resolution; ++i)
    for (std::size_t j = 0; j < grid.resolution; ++j)
      out << standardizer.invert(0, grid.x1[i]) << ',' << standardizer.invert(1, grid.x2[j]) << ','
          << grid.prob[i * grid.resolution + j] << '\n';
  return out.str();
}

}  // namespace autogpc
