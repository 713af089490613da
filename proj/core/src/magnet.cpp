#include "chguide/magnet.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace chg {

LatticeField::LatticeField(int side, double T)
    : L(side), phi(static_cast<std::size_t>(side) * static_cast<std::size_t>(side), 0.0), temperature(T) {
  validate();
}

LatticeField::LatticeField(int side, std::vector<double> values, double T)
    : L(side), phi(std::move(values)), temperature(T) {
  validate();
}

void LatticeField::validate() const {
  if (L < 2) {
    throw std::invalid_argument("LatticeField: side must be at least 2");
  }
  if (phi.size() != static_cast<std::size_t>(L) * static_cast<std::size_t>(L)) {
    throw std::invalid_argument("LatticeField: expected " + std::to_string(L * L) + " values");
  }
  for (double v : phi) {
    if (!std::isfinite(v)) throw std::invalid_argument("LatticeField: non-finite entry");
  }
}

Vec LatticeField::to_vec() const {
  if (sites() > kMaxDim) {
    throw std::invalid_argument("LatticeField: too many sites for a state vector");
  }
  Vec v(sites());
  for (int k = 0; k < sites(); ++k) v(k) = phi[static_cast<std::size_t>(k)];
  return v;
}

LatticeField LatticeField::from_vec(const Vec& v, int side, double T) {
  return LatticeField(side, std::vector<double>(v.data(), v.data() + v.size()), T);
}

double hamiltonian(const LatticeField& field, double T, const MagnetParams& params) {
  field.validate();
  const double quad = 0.5 * params.m2 * (T - params.Tc);
  const double quart = params.lambda / 24.0;
  double bonds = 0.0;
  double local = 0.0;
  for (int r = 0; r < field.L; ++r) {
    for (int c = 0; c < field.L; ++c) {
      const double p = field.at(r, c);
      const double right = p - field.at(r, c + 1);
      const double down = p - field.at(r + 1, c);
      bonds += right * right + down * down;
      const double p2 = p * p;
      local += quad * p2 + quart * p2 * p2;
    }
  }
  return params.K * (0.5 * bonds + local);
}

double hamiltonian_delta(const LatticeField& field, int site, double new_value, double T,
                         const MagnetParams& params) {
  if (site < 0 || site >= field.sites()) {
    throw std::out_of_range("hamiltonian_delta: site out of range");
  }
  const int r = site / field.L;
  const int c = site % field.L;
  const double old_value = field.phi[static_cast<std::size_t>(site)];
  const double nbrs[4] = {field.at(r, c + 1), field.at(r, c - 1), field.at(r + 1, c), field.at(r - 1, c)};
  double bonds = 0.0;
  for (double q : nbrs) {
    const double a = new_value - q;
    const double b = old_value - q;
    bonds += a * a - b * b;
  }
  const double n2 = new_value * new_value;
  const double o2 = old_value * old_value;
  const double local = 0.5 * params.m2 * (T - params.Tc) * (n2 - o2) + params.lambda / 24.0 * (n2 * n2 - o2 * o2);
  return params.K * (0.5 * bonds + local);
}

MhResult mh_chain(const MhConfig& config, const MagnetParams& params) {
  if (config.n_samples < 1) throw std::invalid_argument("mh_chain: n_samples must be at least 1");
  if (config.thin < 1) throw std::invalid_argument("mh_chain: thin must be at least 1");
  if (config.burn_in < 0) throw std::invalid_argument("mh_chain: burn_in must be non-negative");
  if (!(config.step_width > 0.0)) throw std::invalid_argument("mh_chain: step_width must be positive");
  if (config.chains < 1) throw std::invalid_argument("mh_chain: chains must be at least 1");

  MhResult result;
  result.fields.reserve(static_cast<std::size_t>(config.n_samples));
  long accepted = 0;
  long proposed = 0;
  const int chains = std::min(config.chains, config.n_samples);
  const double T = config.temperature;

  for (int ch = 0; ch < chains; ++ch) {
    // Samples are dealt out so that the totals add up to n_samples.
    const int quota = config.n_samples / chains + (ch < config.n_samples % chains ? 1 : 0);
    std::seed_seq seq{static_cast<std::uint32_t>(config.seed), static_cast<std::uint32_t>(config.seed >> 32),
                      static_cast<std::uint32_t>(ch), 0x6d61676eU};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);

    LatticeField field(config.L, T);
    const double sign = uniform(rng) < 0.5 ? -1.0 : 1.0;
    (sign > 0 ? result.positive_chains : result.negative_chains) += 1;
    for (double& v : field.phi) v = sign * config.init_magnitude + 0.1 * normal(rng);

    auto sweep = [&] {
      for (int s = 0; s < field.sites(); ++s) {
        const double proposal = field.phi[static_cast<std::size_t>(s)] + config.step_width * normal(rng);
        const double d = hamiltonian_delta(field, s, proposal, T, params);
        ++proposed;
        if (d <= 0.0 || uniform(rng) < std::exp(-d)) {
          field.phi[static_cast<std::size_t>(s)] = proposal;
          ++accepted;
        }
      }
    };

    for (int b = 0; b < config.burn_in; ++b) sweep();
    for (int k = 0; k < quota; ++k) {
      for (int t = 0; t < config.thin; ++t) sweep();
      result.fields.push_back(field);
    }
  }
  result.acceptance_rate = proposed ? static_cast<double>(accepted) / static_cast<double>(proposed) : 0.0;
  return result;
}

double omega_for_temperature(double T, double T1, double T0) {
  if (T0 == T1) {
    throw std::invalid_argument("omega_for_temperature: T0 and T1 must differ");
  }
  return (T1 - T) / (T0 - T1);
}

std::vector<double> mean_magnetization(const std::vector<LatticeField>& fields) {
  std::vector<double> out;
  out.reserve(fields.size());
  for (const auto& f : fields) {
    out.push_back(std::accumulate(f.phi.begin(), f.phi.end(), 0.0) / static_cast<double>(f.phi.size()));
  }
  return out;
}

std::vector<double> mean_magnetization(const RowMatrix& fields) {
  std::vector<double> out(static_cast<std::size_t>(fields.rows()));
  for (Eigen::Index r = 0; r < fields.rows(); ++r) out[static_cast<std::size_t>(r)] = fields.row(r).mean();
  return out;
}

KernelDataset fields_to_dataset(const std::vector<LatticeField>& fields, int max_points, std::uint64_t seed) {
  if (fields.empty()) {
    throw std::invalid_argument("fields_to_dataset: no fields");
  }
  std::vector<std::size_t> idx(fields.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (max_points > 0 && static_cast<std::size_t>(max_points) < fields.size()) {
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(static_cast<std::size_t>(max_points));
    std::sort(idx.begin(), idx.end());
  }
  const int dim = fields.front().sites();
  RowMatrix pts(static_cast<Eigen::Index>(idx.size()), dim);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const auto& f = fields[idx[r]];
    if (f.sites() != dim) throw std::invalid_argument("fields_to_dataset: lattice sizes differ");
    for (int k = 0; k < dim; ++k) pts(static_cast<Eigen::Index>(r), k) = f.phi[static_cast<std::size_t>(k)];
  }
  return KernelDataset(std::move(pts));
}

}  // namespace chg
