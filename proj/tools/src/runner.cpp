#include "chguide/runner.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"

namespace chg {

using json = nlohmann::json;

ConfigError::ConfigError(const std::string& message, int line, std::string key)
    : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + message : message),
      line_(line),
      key_(std::move(key)) {}

std::string_view to_string(Experiment e) {
  switch (e) {
    case Experiment::gaussian: return "gaussian";
    case Experiment::mixture: return "mixture";
    case Experiment::magnet: return "magnet";
    case Experiment::diagnose: return "diagnose";
    case Experiment::iterstudy: return "iterstudy";
    case Experiment::mh: return "mh";
  }
  return "?";
}

Experiment parse_experiment(std::string_view text) {
  for (auto e : {Experiment::gaussian, Experiment::mixture, Experiment::magnet, Experiment::diagnose,
                 Experiment::iterstudy, Experiment::mh}) {
    if (text == to_string(e)) return e;
  }
  throw std::invalid_argument("unknown experiment '" + std::string(text) + "'");
}

namespace {

// Value parsing ------------------------------------------------------------------

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

double parse_double(const std::string& v) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || !std::isfinite(out)) {
    throw std::invalid_argument("expected a finite number, got '" + v + "'");
  }
  return out;
}

template <class Int>
Int parse_int(const std::string& v) {
  Int out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw std::invalid_argument("expected an integer, got '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::invalid_argument("expected true or false, got '" + v + "'");
}

std::vector<double> parse_list(const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_double(trim(item)));
  if (out.empty()) throw std::invalid_argument("expected a comma-separated list");
  return out;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::string fmt_list(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ", ";
    out += fmt(v[i]);
  }
  return out;
}

// Key table ----------------------------------------------------------------------

struct Field {
  std::string section;
  std::string key;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

std::vector<Field> fields_of(ExperimentConfig& c) {
  auto dbl = [](double& ref) {
    return std::pair{std::function<void(const std::string&)>([&ref](const std::string& v) { ref = parse_double(v); }),
                     std::function<std::string()>([&ref] { return fmt(ref); })};
  };
  auto integer = [](int& ref) {
    return std::pair{std::function<void(const std::string&)>([&ref](const std::string& v) { ref = parse_int<int>(v); }),
                     std::function<std::string()>([&ref] { return std::to_string(ref); })};
  };
  auto lng = [](long& ref) {
    return std::pair{
        std::function<void(const std::string&)>([&ref](const std::string& v) { ref = parse_int<long>(v); }),
        std::function<std::string()>([&ref] { return std::to_string(ref); })};
  };
  auto boolean = [](bool& ref) {
    return std::pair{std::function<void(const std::string&)>([&ref](const std::string& v) { ref = parse_bool(v); }),
                     std::function<std::string()>([&ref] { return std::string(ref ? "true" : "false"); })};
  };
  auto str = [](std::string& ref) {
    return std::pair{std::function<void(const std::string&)>([&ref](const std::string& v) { ref = v; }),
                     std::function<std::string()>([&ref] { return ref; })};
  };
  auto list = [](std::vector<double>& ref) {
    return std::pair{std::function<void(const std::string&)>([&ref](const std::string& v) { ref = parse_list(v); }),
                     std::function<std::string()>([&ref] { return fmt_list(ref); })};
  };
  std::vector<Field> f;
  auto add = [&f](std::string section, std::string key, auto accessors) {
    f.push_back({std::move(section), std::move(key), std::move(accessors.first), std::move(accessors.second)});
  };
  GuidanceSpec& g = c.guidance;

  add("schedule", "n", integer(c.n));
  add("schedule", "b1", dbl(c.b1));
  add("schedule", "b2", dbl(c.b2));

  add("sampler", "kind",
      std::pair{std::function<void(const std::string&)>([&c](const std::string& v) { c.sampler.kind = parse_sampler(v); }),
                std::function<std::string()>([&c] { return std::string(to_string(c.sampler.kind)); })});
  add("sampler", "steps", integer(c.sampler.steps));

  add("guidance", "method",
      std::pair{
          std::function<void(const std::string&)>([&c](const std::string& v) { c.method = parse_guidance_method(v); }),
          std::function<std::string()>([&c] { return std::string(to_string(c.method)); })});
  add("guidance", "omega", dbl(g.omega));
  add("guidance", "solver",
      std::pair{std::function<void(const std::string&)>([&g](const std::string& v) { g.solver = parse_solver(v); }),
                std::function<std::string()>([&g] { return std::string(to_string(g.solver)); })});
  add("guidance", "projection",
      std::pair{
          std::function<void(const std::string&)>([&g](const std::string& v) { g.projection = parse_projection(v); }),
          std::function<std::string()>([&g] { return std::string(to_string(g.projection)); })});
  add("guidance", "channels", integer(g.channels));
  add("guidance", "gamma", dbl(g.params.gamma));
  add("guidance", "alpha", dbl(g.params.alpha));
  add("guidance", "epsilon_rms", dbl(g.params.epsilon_rms));
  add("guidance", "decay_d", dbl(g.params.decay_D));
  add("guidance", "anderson_m", integer(g.params.anderson_m));
  add("guidance", "tolerance", dbl(g.tolerance));
  add("guidance", "max_iters", integer(g.max_iters));
  add("guidance", "warm_start", boolean(g.warm_start));

  add("run", "batch", integer(c.batch));
  add("run", "seed",
      std::pair{std::function<void(const std::string&)>([&c](const std::string& v) { c.seed = parse_int<std::uint64_t>(v); }),
                std::function<std::string()>([&c] { return std::to_string(c.seed); })});
  add("run", "threads", integer(c.threads));
  add("run", "out", str(c.out));
  add("run", "paired", boolean(c.paired));

  add("gaussian", "c", list(c.c));

  add("mixture", "component", integer(c.component));
  add("mixture", "kl_draws", lng(c.kl_draws));
  add("mixture", "partition_draws", lng(c.partition_draws));

  add("magnet", "temperature", dbl(c.temperature));
  add("magnet", "t1", dbl(c.t1));
  add("magnet", "t0", dbl(c.t0));
  add("magnet", "lattice", integer(c.lattice));
  add("magnet", "dataset_size", integer(c.dataset_size));
  add("magnet", "mh_samples", integer(c.mh_samples));
  add("magnet", "reference_samples", integer(c.reference_samples));
  add("magnet", "m2", dbl(c.magnet.m2));
  add("magnet", "lambda", dbl(c.magnet.lambda));
  add("magnet", "k", dbl(c.magnet.K));
  add("magnet", "tc", dbl(c.magnet.Tc));
  add("magnet", "mh_step_width", dbl(c.mh_step_width));
  add("magnet", "mh_burn_in", integer(c.mh_burn_in));
  add("magnet", "mh_thin", integer(c.mh_thin));
  add("magnet", "mh_chains", integer(c.mh_chains));
  add("magnet", "dataset_t1", str(c.dataset_t1));
  add("magnet", "dataset_t0", str(c.dataset_t0));
  add("magnet", "mh_temperatures", list(c.mh_temperatures));

  add("diagnose", "probes", integer(c.probes));
  add("diagnose", "times", list(c.times));
  add("diagnose", "omegas", list(c.omegas));
  add("diagnose", "fd_space", dbl(c.fd_space));
  add("diagnose", "fd_time", dbl(c.fd_time));

  add("iterstudy", "tolerances", list(c.tolerances));
  return f;
}

}  // namespace

ExperimentConfig default_config(Experiment e) {
  ExperimentConfig c;
  c.experiment = e;
  GuidanceSpec& g = c.guidance;
  g.solver = SolverKind::rmsprop;
  g.max_iters = 10;
  switch (e) {
    case Experiment::gaussian:
      c.n = 1000;
      c.b2 = 0.015;
      c.batch = 50000;
      g.omega = 4.0;
      g.params.gamma = 0.01;
      g.tolerance = 0.01;
      g.params.alpha = 0.9999;
      break;
    case Experiment::mixture:
      c.n = 500;
      c.b2 = 0.02;
      c.batch = 20000;
      g.omega = 6.0;
      g.params.gamma = 0.05;
      g.tolerance = 0.02;
      g.params.alpha = 0.99;
      break;
    case Experiment::iterstudy:
      c.n = 500;
      c.b2 = 0.02;
      c.batch = 2000;
      c.sampler = {SamplerType::dpmpp2m, 50};
      g.omega = 6.0;
      g.params.gamma = 0.05;
      g.tolerance = 1e-3;
      g.params.alpha = 0.99;
      break;
    case Experiment::magnet:
    case Experiment::mh:
      c.n = 1000;
      c.b2 = 0.015;
      c.batch = 8192;
      g.projection = Projection::channel_mean;
      g.params.gamma = 0.01;
      g.tolerance = 0.1;
      g.params.alpha = 0.999;
      g.omega = omega_for_temperature(c.temperature, c.t1, c.t0);
      break;
    case Experiment::diagnose:
      c.batch = 1;
      g.omega = 4.0;
      g.solver = SolverKind::anderson;
      g.params.gamma = 0.01;
      g.tolerance = 1e-10;
      g.max_iters = 50;
      break;
  }
  return c;
}

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& msg) { throw ConfigError(key + ": " + msg, 0, key); };
  if (n < 2) fail("schedule.n", "must be at least 2");
  if (!(b1 > 0.0 && b1 <= b2 && b2 < 1.0)) fail("schedule.b1", "need 0 < b1 <= b2 < 1");
  if (sampler.steps < 1) fail("sampler.steps", "must be at least 1");
  if (sampler.kind == SamplerType::dpmpp2m && sampler.steps < 2) fail("sampler.steps", "dpmpp2m needs at least 2");
  if ((sampler.kind == SamplerType::ddim || sampler.kind == SamplerType::dpmpp2m) && sampler.steps > n) {
    fail("sampler.steps", "exceeds schedule.n");
  }
  try {
    guidance.validate();
  } catch (const std::invalid_argument& e) {
    fail("guidance", e.what());
  }
  if (batch < 1) fail("run.batch", "must be at least 1");
  if (threads < 0) fail("run.threads", "must be non-negative");
  if (out.empty()) fail("run.out", "must not be empty");
  if (c.size() != 2) fail("gaussian.c", "needs two values");
  if (component < 0 || component > 2) fail("mixture.component", "must be 0, 1 or 2");
  if (kl_draws < 100000) fail("mixture.kl_draws", "must be at least 100000");
  if (partition_draws < 2) fail("mixture.partition_draws", "must be at least 2");
  if (lattice < 2 || lattice * lattice > kMaxDim) fail("magnet.lattice", "side must be in [2, 16]");
  if (t0 == t1) fail("magnet.t0", "must differ from t1");
  if (dataset_size < 1) fail("magnet.dataset_size", "must be at least 1");
  if (mh_samples < 1) fail("magnet.mh_samples", "must be at least 1");
  if (reference_samples < 1) fail("magnet.reference_samples", "must be at least 1");
  if (!(mh_step_width > 0.0)) fail("magnet.mh_step_width", "must be positive");
  if (mh_burn_in < 0) fail("magnet.mh_burn_in", "must be non-negative");
  if (mh_thin < 1) fail("magnet.mh_thin", "must be at least 1");
  if (mh_chains < 1) fail("magnet.mh_chains", "must be at least 1");
  if (experiment == Experiment::magnet &&
      std::abs(guidance.omega - omega_for_temperature(temperature, t1, t0)) > 1e-9) {
    fail("guidance.omega", "inconsistent with magnet.temperature; omega = (t1 - T) / (t0 - t1)");
  }
  if (probes < 1) fail("diagnose.probes", "must be at least 1");
  for (double t : times) {
    if (!(sigma_of_time(t) >= 1e-3)) fail("diagnose.times", "sigma(t) must be at least 1e-3");
  }
  if (!(fd_space > 0.0) || !(fd_time > 0.0)) fail("diagnose.fd_space", "steps must be positive");
  for (double t : times) {
    if (!(t - fd_time > 0.0)) fail("diagnose.fd_time", "time stencil reaches t <= 0");
  }
  for (double tol : tolerances) {
    if (!(tol > 0.0)) fail("iterstudy.tolerances", "must be positive");
  }
}

ExperimentConfig parse_config(const std::string& text) {
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  std::string section;
  std::optional<ExperimentConfig> config;
  std::vector<Field> fields;
  std::set<std::string> seen;

  auto ensure_config = [&](int line) {
    if (!config) {
      throw ConfigError("'experiment = ...' must come before any other key", line, "experiment");
    }
  };

  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = raw;
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("malformed section header '" + line + "'", line_no);
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key = value, got '" + line + "'", line_no);
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const std::string full = section.empty() ? key : section + "." + key;
    if (key.empty()) throw ConfigError("empty key", line_no);
    if (!seen.insert(full).second) throw ConfigError("duplicate key '" + full + "'", line_no, full);

    if (full == "experiment" || full == "experiment.name" || full == "experiment.experiment") {
      if (config) throw ConfigError("experiment may only be set once", line_no, full);
      try {
        config = default_config(parse_experiment(value));
      } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what(), line_no, full);
      }
      fields = fields_of(*config);
      continue;
    }
    ensure_config(line_no);
    auto it = std::find_if(fields.begin(), fields.end(),
                           [&](const Field& f) { return f.section == section && f.key == key; });
    if (it == fields.end()) {
      throw ConfigError("unknown key '" + key + "'" + (section.empty() ? "" : " in [" + section + "]"), line_no, full);
    }
    try {
      it->set(value);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(full + ": " + e.what(), line_no, full);
    }
  }
  if (!config) throw ConfigError("missing 'experiment = ...'", 0, "experiment");
  if (config->experiment == Experiment::magnet && !seen.count("guidance.omega")) {
    config->guidance.omega = omega_for_temperature(config->temperature, config->t1, config->t0);
  }
  config->validate();
  return *config;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string to_config_text(const ExperimentConfig& config) {
  ExperimentConfig copy = config;
  std::ostringstream out;
  out << "[experiment]\nname = " << to_string(config.experiment) << '\n';
  std::string section;
  for (const Field& f : fields_of(copy)) {
    if (f.section != section) {
      section = f.section;
      out << "\n[" << section << "]\n";
    }
    out << f.key << " = " << f.get() << '\n';
  }
  return out.str();
}

// Output helpers -------------------------------------------------------------------

void write_atomic(const std::filesystem::path& path, const std::string& content) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out << content;
    out.flush();
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw std::runtime_error("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
  }
}

std::string samples_csv(const RowMatrix& samples, std::uint64_t seed) {
  std::ostringstream out;
  out << samples.cols() << ',' << seed << ',' << samples.rows() << '\n';
  out << std::setprecision(17);
  for (Eigen::Index r = 0; r < samples.rows(); ++r) {
    for (Eigen::Index c = 0; c < samples.cols(); ++c) {
      if (c) out << ',';
      out << samples(r, c);
    }
    out << '\n';
  }
  return out.str();
}

RowMatrix parse_samples_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("samples csv: empty");
  std::stringstream head(line);
  std::string dim_s, seed_s, count_s;
  std::getline(head, dim_s, ',');
  std::getline(head, seed_s, ',');
  std::getline(head, count_s, ',');
  const int dim = parse_int<int>(trim(dim_s));
  const long count = parse_int<long>(trim(count_s));
  RowMatrix out(count, dim);
  for (long r = 0; r < count; ++r) {
    if (!std::getline(in, line)) throw std::runtime_error("samples csv: missing row " + std::to_string(r + 1));
    std::stringstream row(line);
    std::string cell;
    for (int c = 0; c < dim; ++c) {
      if (!std::getline(row, cell, ',')) throw std::runtime_error("samples csv: short row " + std::to_string(r + 1));
      out(r, c) = parse_double(trim(cell));
    }
  }
  return out;
}

namespace {

json step_json(const StepTraceSummary& s) {
  return json{{"step", s.step},
              {"calls", s.calls},
              {"iterations", s.iterations},
              {"mean_iterations", s.mean_iterations()},
              {"max_iterations", s.max_iterations},
              {"non_converged", s.non_converged},
              {"model_evals", s.model_evals},
              {"degenerate_projections", s.degenerate_projections},
              {"mean_final_residual", s.calls ? s.residual_sum / static_cast<double>(s.calls) : 0.0}};
}

json vec_json(const Eigen::VectorXd& v) { return json(std::vector<double>(v.data(), v.data() + v.size())); }

json mat_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) rows.push_back(vec_json(m.row(r).transpose()));
  return rows;
}

struct TraceTotals {
  long calls = 0;
  long iterations = 0;
  long non_converged = 0;
  long model_evals = 0;
};

TraceTotals totals(const std::vector<StepTraceSummary>& steps) {
  TraceTotals t;
  for (const auto& s : steps) {
    t.calls += s.calls;
    t.iterations += s.iterations;
    t.non_converged += s.non_converged;
    t.model_evals += s.model_evals;
  }
  return t;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint32_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), tag};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

std::vector<GuidanceMethod> methods_for(const ExperimentConfig& config) {
  if (!config.paired) return {config.method};
  return {GuidanceMethod::cf, GuidanceMethod::ch};
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct MethodRun {
  GuidanceMethod method;
  SampleBatch batch;
  double seconds = 0.0;
};

std::vector<MethodRun> run_methods(const ScoreModel& model, const Condition& cond, const Condition& uncond,
                                   const ExperimentConfig& config) {
  std::vector<MethodRun> runs;
  RunOptions options;
  options.batch = config.batch;
  options.seed = config.seed;
  options.threads = config.threads;
  for (GuidanceMethod m : methods_for(config)) {
    const auto t0 = std::chrono::steady_clock::now();
    SampleBatch b = run_sampler(model, cond, uncond, guidance_for(config, m), config.sampler, options);
    runs.push_back({m, std::move(b), seconds_since(t0)});
  }
  return runs;
}

void add_run_common(json& metrics, RunArtifacts& art, const ExperimentConfig& config, std::vector<MethodRun>& runs) {
  metrics["sampler"] = std::string(to_string(config.sampler.kind));
  metrics["steps"] = config.sampler.kind == SamplerType::sde || config.sampler.kind == SamplerType::ode
                         ? config.n
                         : config.sampler.steps;
  metrics["omega"] = config.guidance.omega;
  metrics["seed"] = config.seed;
  metrics["batch"] = config.batch;
  metrics["paired"] = config.paired;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const std::string m(to_string(runs[i].method));
    const TraceTotals t = totals(runs[i].batch.traces);
    metrics["seconds_" + m] = runs[i].seconds;
    metrics["mean_iterations_" + m] = t.calls ? static_cast<double>(t.iterations) / t.calls : 0.0;
    metrics["non_converged_" + m] = t.non_converged;
    metrics["model_evals_" + m] = t.model_evals;
    art.traces.push_back({m, runs[i].batch.traces});
    if (runs[i].method == config.method) art.samples[""] = runs[i].batch.samples;
    if (config.paired) art.samples["_" + m] = runs[i].batch.samples;
  }
  if (!art.samples.count("") && !runs.empty()) art.samples[""] = runs.front().batch.samples;
}

// Experiments ----------------------------------------------------------------------

RunArtifacts run_gaussian(const ExperimentConfig& config) {
  RunArtifacts art;
  auto schedule = schedule_for(config);
  GaussianScoreModel model(schedule);
  const Condition cond = Condition::of(config.c);
  const Condition uncond = Condition::none();
  auto runs = run_methods(model, cond, uncond, config);

  const GaussianTarget target = gaussian_guided_target(Eigen::Vector2d(config.c[0], config.c[1]), config.guidance.omega);
  json metrics{{"experiment", "gaussian"},
               {"c", config.c},
               {"target_mean", vec_json(target.mean)},
               {"target_cov_trace", target.cov.trace()}};
  for (const auto& r : runs) {
    const std::string m(to_string(r.method));
    const GaussianKlResult kl = fit_gaussian_kl(r.batch.samples, target.mean, target.cov);
    metrics["kl_" + m] = std::isfinite(kl.kl) ? json(kl.kl) : json("inf");
    metrics["degenerate_" + m] = kl.degenerate;
    metrics["mean_" + m] = vec_json(kl.fit.mean);
    metrics["cov_" + m] = mat_json(kl.fit.cov);
    metrics["cov_trace_" + m] = kl.fit.cov.trace();
  }
  add_run_common(metrics, art, config, runs);
  art.seed = config.seed;
  art.metrics_json = metrics.dump(2);
  return art;
}

RunArtifacts run_mixture(const ExperimentConfig& config) {
  RunArtifacts art;
  auto schedule = schedule_for(config);
  MixtureScoreModel model(schedule);
  const Condition cond = MixtureScoreModel::one_hot(config.component);
  auto runs = run_methods(model, cond, Condition::none(), config);

  MixtureTarget target{config.component, config.guidance.omega};
  MixtureKlOptions options;
  options.kl_draws = config.kl_draws;
  options.partition_draws = config.partition_draws;
  options.seed = derive_seed(config.seed, 0x6b6cU);
  json metrics{{"experiment", "mixture"}, {"component", config.component}};
  for (const auto& r : runs) {
    const std::string m(to_string(r.method));
    const MixtureKlReport rep = mixture_kl(r.batch.samples, target, options);
    metrics["kl_" + m] = rep.kl;
    metrics["kl_stderr_" + m] = rep.kl_stderr;
    metrics["weights_" + m] = std::vector<double>(rep.weights.begin(), rep.weights.end());
    metrics["empty_components_" + m] = std::vector<bool>(rep.empty.begin(), rep.empty.end());
    metrics["partition_z"] = rep.partition.z;
    metrics["partition_stderr"] = rep.partition.stderr_z;
    metrics["log_z_stderr"] = rep.log_z_stderr;
    metrics["kl_draws"] = rep.draws;
  }
  add_run_common(metrics, art, config, runs);
  art.seed = config.seed;
  art.metrics_json = metrics.dump(2);
  return art;
}

std::string magnetization_csv(const std::vector<double>& m) {
  std::ostringstream out;
  out << "magnetization\n" << std::setprecision(17);
  for (double v : m) out << v << '\n';
  return out.str();
}

json bimodality_json(const std::vector<double>& values) {
  if (values.size() < 1000) return json{{"skipped", "fewer than 1000 values"}};
  const BimodalityReport rep = bimodality_check(values);
  return json{{"peak_count", rep.peak_count},
              {"peak_to_valley_ratio",
               std::isfinite(rep.peak_to_valley_ratio) ? json(rep.peak_to_valley_ratio) : json("inf")},
              {"peak_locations", rep.peak_locations}};
}

RunArtifacts run_magnet(const ExperimentConfig& config) {
  RunArtifacts art;
  const auto t0 = std::chrono::steady_clock::now();
  const MagnetData data = generate_magnet_data(config);
  const double mh_seconds = seconds_since(t0);
  KernelScoreModel model = make_magnet_model(config, data);
  auto runs = run_methods(model, Condition::of({config.t1}), Condition::of({config.t0}), config);

  json metrics{{"experiment", "magnet"},
               {"temperature", config.temperature},
               {"t1", config.t1},
               {"t0", config.t0},
               {"mh_seconds", mh_seconds},
               {"mh_acceptance_t1", data.acceptance_t1},
               {"mh_acceptance_t0", data.acceptance_t0},
               {"mh_acceptance_reference", data.acceptance_reference}};
  const auto ref_m = mean_magnetization(data.reference);
  metrics["bimodality_reference"] = bimodality_json(ref_m);
  art.extra_files.emplace_back("magnetization_reference.csv", magnetization_csv(ref_m));
  for (const auto& r : runs) {
    const std::string m(to_string(r.method));
    const auto fields = rows_to_fields(r.batch.samples, config.lattice, config.temperature);
    metrics["nll_" + m] = magnet_nll(fields, config.temperature, data.reference, config.magnet);
    const auto mags = mean_magnetization(r.batch.samples);
    metrics["bimodality_" + m] = bimodality_json(mags);
    art.extra_files.emplace_back("magnetization_" + m + ".csv", magnetization_csv(mags));
  }
  add_run_common(metrics, art, config, runs);
  art.seed = config.seed;
  art.metrics_json = metrics.dump(2);
  return art;
}

RunArtifacts run_diagnose(const ExperimentConfig& config) {
  RunArtifacts art;
  auto schedule = schedule_for(config);
  GaussianScoreModel model(schedule);
  const Condition cond = Condition::of(config.c);
  const Condition uncond = Condition::none();
  const Eigen::Vector2d c(config.c[0], config.c[1]);
  const FdSteps fd{config.fd_space, config.fd_time};

  json entries = json::array();
  json probes_out = json::array();
  std::mt19937_64 rng(derive_seed(config.seed, 0x6469U));
  std::normal_distribution<double> normal(0.0, 1.0);
  const GaussianTarget reference = gaussian_guided_target(c, config.guidance.omega);

  for (double t : config.times) {
    const NoiseLevel level = NoiseLevel::at_time(t);
    const double sd = std::sqrt(level.alpha_bar * reference.cov(0, 0) + level.sigma * level.sigma);
    std::vector<Vec> probes;
    for (int k = 0; k < config.probes; ++k) {
      Vec p(2);
      p << std::sqrt(level.alpha_bar) * reference.mean(0) + sd * normal(rng),
          std::sqrt(level.alpha_bar) * reference.mean(1) + sd * normal(rng);
      probes.push_back(p);
    }
    json pts = json::array();
    for (const auto& p : probes) pts.push_back({p(0), p(1)});
    probes_out.push_back({{"t", t}, {"sigma", level.sigma}, {"points", pts}});

    for (double omega : config.omegas) {
      for (GuidanceMethod m : {GuidanceMethod::cf, GuidanceMethod::ch}) {
        Guidance g = guidance_for(config, m);
        g.spec.omega = omega;
        GuidedDenoiser denoiser(model, cond, uncond, g);
        TrajectoryState state;
        EpsField field = [&](const Vec& x, double time) {
          return denoiser.eps_at(x, NoiseLevel::at_time(time), state);
        };
        const MixingErrorReport rep = mixing_error_report(field, probes, t, fd);
        entries.push_back({{"t", t},
                           {"sigma", level.sigma},
                           {"omega", omega},
                           {"method", std::string(to_string(m))},
                           {"e_m_norms", rep.e_m_norms},
                           {"max", rep.max_norm()},
                           {"mean", rep.mean_norm()}});
      }
    }
  }
  json metrics{{"experiment", "diagnose"},
               {"c", config.c},
               {"fd_steps", {{"space", fd.space}, {"time", fd.time}}},
               {"probes", probes_out},
               {"entries", entries}};
  art.seed = config.seed;
  art.metrics_json = metrics.dump(2);
  return art;
}

RunArtifacts run_iterstudy(const ExperimentConfig& config) {
  RunArtifacts art;
  auto schedule = schedule_for(config);
  MixtureScoreModel model(schedule);
  const Condition cond = MixtureScoreModel::one_hot(config.component);
  RunOptions options;
  options.batch = config.batch;
  options.seed = config.seed;
  options.threads = config.threads;

  json studies = json::array();
  for (std::size_t i = 0; i < config.tolerances.size(); ++i) {
    Guidance g = guidance_for(config, GuidanceMethod::ch);
    g.spec.tolerance = config.tolerances[i];
    const auto t0 = std::chrono::steady_clock::now();
    SampleBatch b = run_sampler(model, cond, Condition::none(), g, config.sampler, options);
    const double secs = seconds_since(t0);
    const LocalityReport loc = iteration_locality(b.traces, config.n);
    const TraceTotals t = totals(b.traces);
    json per_step = json::array();
    for (const auto& s : b.traces) per_step.push_back({{"step", s.step}, {"mean_iterations", s.mean_iterations()}});
    studies.push_back({{"tolerance", config.tolerances[i]},
                       {"seconds", secs},
                       {"total_iterations", t.iterations},
                       {"mean_iterations", t.calls ? static_cast<double>(t.iterations) / t.calls : 0.0},
                       {"non_converged", t.non_converged},
                       {"top_decile_steps", loc.top_steps},
                       {"top_decile_threshold", loc.threshold},
                       {"middle_half", {loc.range_lo, loc.range_hi}},
                       {"top_decile_in_middle_half", loc.confined},
                       {"per_step", per_step}});
    art.traces.push_back({"tol=" + fmt(config.tolerances[i]), b.traces});
    art.samples[i == 0 ? std::string() : "_tol" + std::to_string(i)] = std::move(b.samples);
  }
  json metrics{{"experiment", "iterstudy"},
               {"sampler", std::string(to_string(config.sampler.kind))},
               {"steps", config.sampler.steps},
               {"omega", config.guidance.omega},
               {"seed", config.seed},
               {"batch", config.batch},
               {"studies", studies}};
  art.seed = config.seed;
  art.metrics_json = metrics.dump(2);
  return art;
}

RunArtifacts run_mh(const ExperimentConfig& config) {
  RunArtifacts art;
  json temps = json::array();
  for (std::size_t i = 0; i < config.mh_temperatures.size(); ++i) {
    const double T = config.mh_temperatures[i];
    MhConfig mc;
    mc.temperature = T;
    mc.L = config.lattice;
    mc.n_samples = config.mh_samples;
    mc.thin = config.mh_thin;
    mc.burn_in = config.mh_burn_in;
    mc.step_width = config.mh_step_width;
    mc.chains = config.mh_chains;
    mc.seed = derive_seed(config.seed, 0x6d680000U + static_cast<std::uint32_t>(i));
    const MhResult res = mh_chain(mc, config.magnet);
    const auto mags = mean_magnetization(res.fields);
    std::ostringstream name;
    name << "T" << T;
    const KernelDataset ds = fields_to_dataset(res.fields, 0, mc.seed);
    std::ostringstream csv;
    ds.write_csv(csv);
    art.extra_files.emplace_back("dataset_" + name.str() + ".csv", csv.str());
    art.extra_files.emplace_back("magnetization_" + name.str() + ".csv", magnetization_csv(mags));
    temps.push_back({{"temperature", T},
                     {"samples", res.fields.size()},
                     {"acceptance_rate", res.acceptance_rate},
                     {"positive_chains", res.positive_chains},
                     {"negative_chains", res.negative_chains},
                     {"bimodality", bimodality_json(mags)}});
  }
  json metrics{{"experiment", "mh"}, {"seed", config.seed}, {"temperatures", temps}};
  art.seed = config.seed;
  art.metrics_json = metrics.dump(2);
  return art;
}

}  // namespace

std::string traces_json(const std::vector<TraceRecord>& traces) {
  json out = json::array();
  for (const auto& t : traces) {
    json steps = json::array();
    for (const auto& s : t.steps) steps.push_back(step_json(s));
    out.push_back({{"label", t.label}, {"steps", steps}});
  }
  return out.dump(2) + "\n";
}

void emit_outputs(const RunArtifacts& artifacts, const ExperimentConfig& config, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory " + dir.string() + ": " + ec.message());
  for (const auto& [suffix, samples] : artifacts.samples) {
    write_atomic(dir / ("samples" + suffix + ".csv"), samples_csv(samples, artifacts.seed));
  }
  write_atomic(dir / "metrics.json", artifacts.metrics_json + "\n");
  write_atomic(dir / "traces.json", traces_json(artifacts.traces));
  write_atomic(dir / "config_echo.ini", to_config_text(config));
  for (const auto& [name, content] : artifacts.extra_files) write_atomic(dir / name, content);
}

RunArtifacts run_experiment(const ExperimentConfig& config) {
  config.validate();
  switch (config.experiment) {
    case Experiment::gaussian: return run_gaussian(config);
    case Experiment::mixture: return run_mixture(config);
    case Experiment::magnet: return run_magnet(config);
    case Experiment::diagnose: return run_diagnose(config);
    case Experiment::iterstudy: return run_iterstudy(config);
    case Experiment::mh: return run_mh(config);
  }
  throw std::logic_error("unhandled experiment");
}

void run_and_emit(const ExperimentConfig& config, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory " + dir.string() + ": " + ec.message());
  const auto marker = dir / "FAILED";
  write_atomic(marker, "run did not complete\n");
  try {
    emit_outputs(run_experiment(config), config, dir);
  } catch (const std::exception& e) {
    write_atomic(marker, std::string("run failed: ") + e.what() + "\n");
    throw;
  }
  std::filesystem::remove(marker);
}

// Shared pieces ------------------------------------------------------------------

SchedulePtr schedule_for(const ExperimentConfig& config) { return make_linear_schedule(config.n, config.b1, config.b2); }

Guidance guidance_for(const ExperimentConfig& config, GuidanceMethod method) {
  Guidance g;
  g.method = method;
  g.spec = config.guidance;
  return g;
}

MagnetData generate_magnet_data(const ExperimentConfig& config) {
  MagnetData data;
  auto chain = [&](double T, int samples, std::uint32_t tag, double& acceptance) {
    MhConfig mc;
    mc.temperature = T;
    mc.L = config.lattice;
    mc.n_samples = samples;
    mc.thin = config.mh_thin;
    mc.burn_in = config.mh_burn_in;
    mc.step_width = config.mh_step_width;
    mc.chains = config.mh_chains;
    mc.seed = derive_seed(config.seed, tag);
    MhResult r = mh_chain(mc, config.magnet);
    acceptance = r.acceptance_rate;
    return std::move(r.fields);
  };
  if (config.dataset_t1.empty()) {
    data.t1_fields = chain(config.t1, config.mh_samples, 0x7431U, data.acceptance_t1);
  }
  if (config.dataset_t0.empty()) {
    data.t0_fields = chain(config.t0, config.mh_samples, 0x7430U, data.acceptance_t0);
  }
  data.reference = chain(config.temperature, config.reference_samples, 0x7266U, data.acceptance_reference);
  return data;
}

KernelScoreModel make_magnet_model(const ExperimentConfig& config, const MagnetData& data) {
  auto dataset = [&](const std::string& path, const std::vector<LatticeField>& fields, std::uint32_t tag) {
    if (!path.empty()) {
      KernelDataset loaded = KernelDataset::load_csv(path);
      if (loaded.dim() != config.lattice * config.lattice) {
        throw std::runtime_error(path + ": dataset dimension does not match magnet.lattice");
      }
      return loaded;
    }
    return fields_to_dataset(fields, config.dataset_size, derive_seed(config.seed, tag));
  };
  std::vector<LabeledDataset> sets;
  sets.push_back({config.t1, dataset(config.dataset_t1, data.t1_fields, 0x73310000U)});
  sets.push_back({config.t0, dataset(config.dataset_t0, data.t0_fields, 0x73300000U)});
  return KernelScoreModel(schedule_for(config), std::move(sets));
}

std::vector<LatticeField> rows_to_fields(const RowMatrix& samples, int side, double T) {
  if (samples.cols() != side * side) {
    throw std::invalid_argument("rows_to_fields: row length does not match the lattice");
  }
  std::vector<LatticeField> out;
  out.reserve(static_cast<std::size_t>(samples.rows()));
  for (Eigen::Index r = 0; r < samples.rows(); ++r) {
    out.emplace_back(side, std::vector<double>(samples.row(r).data(), samples.row(r).data() + samples.cols()), T);
  }
  return out;
}

LocalityReport iteration_locality(const std::vector<StepTraceSummary>& steps, int n) {
  LocalityReport rep;
  rep.range_lo = static_cast<int>(std::ceil(0.25 * n));
  rep.range_hi = static_cast<int>(std::floor(0.75 * n));
  std::vector<const StepTraceSummary*> active;
  for (const auto& s : steps) {
    if (s.calls > 0) active.push_back(&s);
  }
  if (active.empty()) return rep;
  std::vector<double> means;
  for (const auto* s : active) means.push_back(s->mean_iterations());
  std::sort(means.begin(), means.end(), std::greater<>());
  const std::size_t k = std::max<std::size_t>(1, (active.size() + 9) / 10);
  rep.threshold = means[k - 1];
  rep.confined = true;
  for (const auto* s : active) {
    if (s->mean_iterations() >= rep.threshold) {
      rep.top_steps.push_back(s->step);
      if (s->step < rep.range_lo || s->step > rep.range_hi) rep.confined = false;
    }
  }
  return rep;
}

}  // namespace chg
