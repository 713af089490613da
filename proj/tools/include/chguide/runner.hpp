#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "chguide/guidance.hpp"
#include "chguide/magnet.hpp"
#include "chguide/metrics.hpp"
#include "chguide/samplers.hpp"

namespace chg {

/// Invalid configuration; `line` is 0 when the problem is not tied to a line.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& message, int line = 0, std::string key = {});
  int line() const { return line_; }
  const std::string& key() const { return key_; }

 private:
  int line_;
  std::string key_;
};

enum class Experiment { gaussian, mixture, magnet, diagnose, iterstudy, mh };

std::string_view to_string(Experiment e);
Experiment parse_experiment(std::string_view text);

struct ExperimentConfig {
  Experiment experiment = Experiment::gaussian;

  // [schedule]
  int n = 1000;
  double b1 = 1e-4;
  double b2 = 0.015;

  // [sampler]
  SamplerKind sampler{SamplerType::ddim, 20};

  // [guidance]
  GuidanceMethod method = GuidanceMethod::ch;
  GuidanceSpec guidance;

  // [run]
  int batch = 1000;
  std::uint64_t seed = 0;
  int threads = 0;
  std::string out = "out";
  bool paired = false;

  // [gaussian]
  std::vector<double> c{-5.0, 5.0};

  // [mixture]
  int component = 0;
  long kl_draws = 200000;
  long partition_draws = 400000;

  // [magnet]
  double temperature = 196.0;
  double t1 = 200.0;
  double t0 = 201.0;
  int lattice = 8;
  int dataset_size = 4096;
  int mh_samples = 60000;
  int reference_samples = 8192;
  MagnetParams magnet;
  double mh_step_width = 0.5;
  int mh_burn_in = 2000;
  int mh_thin = 10;
  int mh_chains = 16;
  std::string dataset_t1;  // optional CSV paths; generated by MH when empty
  std::string dataset_t0;
  std::vector<double> mh_temperatures{200.0, 201.0};

  // [diagnose]
  int probes = 10;
  std::vector<double> times{0.1, 0.5, 1.5};
  std::vector<double> omegas{0.0, 1.0, 2.0, 4.0};
  double fd_space = 1e-4;
  double fd_time = 1e-4;

  // [iterstudy]
  std::vector<double> tolerances{1e-2, 1e-3, 1e-4};

  /// Throws ConfigError on values outside the module preconditions.
  void validate() const;
  bool operator==(const ExperimentConfig&) const = default;
};

/// Experiment-specific defaults applied before the file is read.
ExperimentConfig default_config(Experiment e);

/// Flat `key = value` text with `[section]` headers. `#` and `;` start
/// comments. The experiment is chosen by `experiment = ...` in the
/// `[experiment]` section (or before any section), which must come first.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Full text form; parse_config(to_config_text(c)) == c.
std::string to_config_text(const ExperimentConfig& config);

/// Writes `content` to `path` through a temporary file and a rename.
void write_atomic(const std::filesystem::path& path, const std::string& content);

std::string samples_csv(const RowMatrix& samples, std::uint64_t seed);
RowMatrix parse_samples_csv(const std::string& text);

struct TraceRecord {
  std::string label;  // e.g. "ch" or "tol=0.001"
  std::vector<StepTraceSummary> steps;
};

/// Everything an experiment produces; emit_outputs turns it into files.
struct RunArtifacts {
  std::map<std::string, RowMatrix> samples;  // "" for the primary batch, else a suffix
  std::uint64_t seed = 0;
  std::string metrics_json = "{}";
  std::vector<TraceRecord> traces;
  std::vector<std::pair<std::string, std::string>> extra_files;  // name, content
};

std::string traces_json(const std::vector<TraceRecord>& traces);

/// samples*.csv, metrics.json, traces.json, config_echo.ini and extra files.
void emit_outputs(const RunArtifacts& artifacts, const ExperimentConfig& config, const std::filesystem::path& dir);

RunArtifacts run_experiment(const ExperimentConfig& config);

/// Runs and emits; leaves a FAILED marker in the output directory unless the
/// run completes.
void run_and_emit(const ExperimentConfig& config, const std::filesystem::path& dir);

// Pieces shared with the tests ----------------------------------------------------

SchedulePtr schedule_for(const ExperimentConfig& config);
Guidance guidance_for(const ExperimentConfig& config, GuidanceMethod method);

struct MagnetData {
  std::vector<LatticeField> t1_fields;
  std::vector<LatticeField> t0_fields;
  std::vector<LatticeField> reference;
  double acceptance_t1 = 0.0;
  double acceptance_t0 = 0.0;
  double acceptance_reference = 0.0;
};

/// MH datasets at T1 and T0 plus the reference chain at the target temperature.
MagnetData generate_magnet_data(const ExperimentConfig& config);

/// Kernel model over the two temperature datasets (labels T1 and T0).
KernelScoreModel make_magnet_model(const ExperimentConfig& config, const MagnetData& data);

std::vector<LatticeField> rows_to_fields(const RowMatrix& samples, int side, double T);

/// Per-step iteration profile analysis.
struct LocalityReport {
  std::vector<int> top_steps;   // steps whose mean iteration count is in the top decile
  int range_lo = 0;             // middle half of [0, n]
  int range_hi = 0;
  bool confined = false;        // every top-decile step lies in [range_lo, range_hi]
  double threshold = 0.0;       // mean-iteration cut-off
};

LocalityReport iteration_locality(const std::vector<StepTraceSummary>& steps, int n);

}  // namespace chg
