#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "structgp/data.hpp"
#include "structgp/kernel.hpp"
#include "structgp/latent.hpp"
#include "structgp/structure.hpp"

namespace structgp {

struct SimConfig {
  int k = 10;
  int r = 100;
  int obs_per_task = 25;
  double mean_degree = 2.0;
  double weight_lo = 0.5;  // magnitudes drawn from [lo, hi] with a random sign
  double weight_hi = 1.5;
  double logl_lo = 0.0;
  double logl_hi = 1.0;
  double t_lo = 0.0;
  double t_hi = 10.0;
  double noise_var = 1e-2;
  int p = 0;                       // pathways; 0 simulates plain StructGP
  double latent_weight = 0.3;      // covariance share of the shared pathway
  double individual_weight = 0.7;  // covariance share of the subject process
  double tau_range = 1.0;          // shifts drawn from [-tau_range, tau_range]
  double logl_sub_lo = 0.0;
  double logl_sub_hi = 1.0;
  int exact_latent_max = 2500;  // larger pathway draws use basis features
  int latent_basis = 256;
  std::uint64_t seed = 0;
  int repetitions = 30;

  void validate() const;
  nlohmann::json to_json() const;
  static SimConfig from_json(const nlohmann::json &j);
};

struct SampledDag {
  Adjacency adjacency;
  Eigen::MatrixXd weights;  // off-diagonal amplitudes, zero diagonal
  std::vector<int> order;
};

/// Undirected G(k, mean_degree / (k - 1)) oriented along a random
/// permutation, with weights drawn from [-hi, -lo] U [lo, hi].
SampledDag sample_dag(int k, double mean_degree, std::mt19937_64 &rng, double weight_lo = 0.5,
                      double weight_hi = 1.5);

struct GroundTruth {
  GraphParams params;
  Adjacency adjacency;
  std::optional<PathwayParams> pathways;  // one-hot logits
  std::vector<int> assignment;

  nlohmann::json to_json() const;
  static GroundTruth from_json(const nlohmann::json &j);
};

GroundTruth sample_ground_truth(const SimConfig &cfg, std::mt19937_64 &rng);

/// Observation times and values drawn from the model prior with N(0, noise_var)
/// measurement noise.
ObservationSet sample_trajectories(const GroundTruth &truth, const SimConfig &cfg,
                                   std::mt19937_64 &rng);

/// Independent RNG stream for one repetition.
std::mt19937_64 repetition_rng(std::uint64_t seed, std::uint64_t repetition);

int shd(const Adjacency &truth, const Adjacency &estimate);

struct EdgeScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};
EdgeScores edge_scores(const Adjacency &truth, const Adjacency &estimate);
double edge_f1(const Adjacency &truth, const Adjacency &estimate);

double ari(const std::vector<int> &truth, const std::vector<int> &estimate);
/// Mutual information over the arithmetic mean of the entropies; 0 when both
/// entropies vanish.
double nmi(const std::vector<int> &truth, const std::vector<int> &estimate);
inline constexpr const char *kNmiNormalization = "arithmetic";

struct Summary {
  double median = 0.0;
  double q25 = 0.0;
  double q75 = 0.0;
  int count = 0;
};
/// Linear-interpolation quantiles.
Summary summarize(std::vector<double> values);

}  // namespace structgp
