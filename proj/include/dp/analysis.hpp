#pragma once
#include <json.hpp>

#include "dp/config.hpp"
#include "dp/datasets.hpp"
#include "dp/posterior.hpp"

namespace dp {

struct GridSpec {
  double lo = -3.0;
  double hi = 3.0;
  int64_t res = 200;
};

struct Mode {
  int64_t i = 0, j = 0;      // omega / b cell indices
  double omega = 0.0, b = 0.0;
  double density = 0.0;
};

// Normalized posterior density of the single-sine problem on a regular grid.
// density[i,j] is the density at the cell center (omega_i, b_j); the
// cell-weighted sum equals 1.
struct PosteriorGrid {
  GridSpec spec;
  Tensor density;     // [res, res]
  double cell = 0.0;  // axis step
  double log_norm = 0.0;  // log of the normalization constant over the grid
  std::vector<Mode> modes;

  double omega_at(int64_t i) const { return spec.lo + (static_cast<double>(i) + 0.5) * cell; }
  double b_at(int64_t j) const { return spec.lo + (static_cast<double>(j) + 0.5) * cell; }
};

// log N(omega) + log N(b) + sum_i log N(y_i; sin(5(omega x_i + b)), sigma^2)
double sine_log_unnorm_posterior(const Task& task, double omega, double b, double sigma_y);
// likelihood term alone; periodic in b with period 2*pi/5
double sine_loglik(const Task& task, double omega, double b, double sigma_y);

PosteriorGrid grid_posterior(const Task& task, const GridSpec& spec, double sigma_y = 0.1);

// Strict local maxima over 8-neighborhoods with density >= min_rel_height
// times the global maximum. Relative threshold, so the output is invariant
// to an overall positive rescaling of the density matrix.
std::vector<Mode> detect_modes(const PosteriorGrid& grid, double min_rel_height);

struct FitDiagnostics {
  Tensor samples;           // [n, 2]
  Tensor log_q;             // [n, 1]
  double mean_true_logdensity = 0.0;        // mean normalized log-posterior of samples
  double prior_mean_true_logdensity = 0.0;  // same for prior samples
  TaskPosteriorParams posterior;
  std::vector<double> loss_curve;
};

// Minimizes the single-task negative ELBO against the fixed analytic sine
// likelihood (no network); the flow spec comes from the analysis.* keys.
FitDiagnostics fit_iaf_to_likelihood(const Task& task, const Config& cfg, uint64_t seed,
                                     const PosteriorGrid& grid);

struct CoverageReport {
  int64_t n_modes = 0;
  int64_t covered = 0;      // modes holding >= min_frac of the samples
  double coverage = 0.0;    // covered / n_modes
  double bridge_mass = 0.0; // samples assigned to no mode basin
  bool empty_samples = false;
  std::vector<double> mode_sample_frac;
  std::vector<double> mode_grid_mass;  // reference basin masses of the grid itself
  double grid_bridge_mass = 0.0;
};

// Assigns samples to the nearest detected mode within basin_radius grid
// cells; everything else counts as bridge mass.
CoverageReport mode_coverage(const Tensor& samples, const PosteriorGrid& grid,
                             double basin_radius_cells, double min_frac = 0.01);

void export_grid_csv(const PosteriorGrid& grid, const std::string& path);
nlohmann::json modes_to_json(const PosteriorGrid& grid);
nlohmann::json coverage_to_json(const CoverageReport& report);

}  // namespace dp
