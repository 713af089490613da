#pragma once

#include <cstdint>
#include <vector>

#include "chguide/linalg.hpp"
#include "chguide/score_models.hpp"

namespace chg {

/// Landau-Ginzburg couplings; beta H is affine in the temperature.
struct MagnetParams {
  double m2 = 0.1;
  double lambda = 1.0;
  double K = 1.0;
  double Tc = 200.0;

  bool operator==(const MagnetParams&) const = default;
};

/// Periodic L x L single-channel magnetization field, row-major.
struct LatticeField {
  int L = 8;
  std::vector<double> phi;
  double temperature = 0.0;

  LatticeField() = default;
  LatticeField(int side, double T);
  LatticeField(int side, std::vector<double> values, double T);

  int sites() const { return L * L; }
  double& at(int r, int c) { return phi[static_cast<std::size_t>(wrap(r) * L + wrap(c))]; }
  double at(int r, int c) const { return phi[static_cast<std::size_t>(wrap(r) * L + wrap(c))]; }
  int wrap(int k) const { return ((k % L) + L) % L; }

  Vec to_vec() const;
  static LatticeField from_vec(const Vec& v, int side, double T);
  void validate() const;
};

/// beta H = K ( 1/2 sum_<ij> (phi_i - phi_j)^2 + sum_i ( m2/2 (T - Tc) phi_i^2 + lambda/4! phi_i^4 ) ),
/// with each right and down bond of the torus counted once (2 L^2 bonds).
double hamiltonian(const LatticeField& field, double T, const MagnetParams& params = {});

/// Change of beta H when site `site` takes `new_value`; touches the site and its four neighbors.
double hamiltonian_delta(const LatticeField& field, int site, double new_value, double T,
                         const MagnetParams& params = {});

struct MhConfig {
  double temperature = 201.0;
  int L = 8;
  int n_samples = 1000;
  int thin = 10;          // sweeps between recorded samples
  int burn_in = 2000;     // sweeps discarded per chain
  double step_width = 0.5;
  int chains = 16;        // independent chains, random +/- initialization
  double init_magnitude = 1.5;
  std::uint64_t seed = 0;
};

struct MhResult {
  std::vector<LatticeField> fields;
  double acceptance_rate = 0.0;
  long positive_chains = 0;  // chains started in the + mode
  long negative_chains = 0;
};

/// Metropolis-Hastings with single-site Gaussian random-walk proposals;
/// one sweep visits every site once in order. Deterministic given the seed.
MhResult mh_chain(const MhConfig& config, const MagnetParams& params = {});

/// omega with T = (1 + omega) T1 - omega T0.
double omega_for_temperature(double T, double T1 = 200.0, double T0 = 201.0);

std::vector<double> mean_magnetization(const std::vector<LatticeField>& fields);
std::vector<double> mean_magnetization(const RowMatrix& fields);

/// Uniform subsample without replacement, as a kernel dataset.
KernelDataset fields_to_dataset(const std::vector<LatticeField>& fields, int max_points, std::uint64_t seed);

}  // namespace chg
