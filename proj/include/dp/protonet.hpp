#pragma once
#include <vector>

#include "dp/tape.hpp"

namespace dp {

// Prototypes are class means of embedded support examples. Distances are
// unsquared Euclidean norms as the default; the squared flag switches both
// the distance and the leave-one-out rescale factor (which becomes the
// square of |K|/(|K|-1)).
struct PrototypeSet {
  Tensor protos;                // [K, d_gamma]
  std::vector<int64_t> counts;  // per-class example counts
};

// Indices per class; labels must be 0..K-1 with every class nonempty.
std::vector<std::vector<int64_t>> class_indices(const std::vector<int64_t>& labels);

PrototypeSet compute_prototypes(const Tensor& gammas, const std::vector<int64_t>& labels);

// Class log-probabilities of query embeddings against fixed prototypes:
// log softmax over negative distances. [m, K]
Tensor proto_predict(const Tensor& queries, const PrototypeSet& protos, bool squared = false);

// Leave-one-out class log-probabilities for every support example, using the
// closed-form rescale of the own-class distance. [n, K]
Tensor loo_logprob(const Tensor& gammas, const std::vector<int64_t>& labels,
                   bool squared = false);

// Sum over examples of the leave-one-out log-probability at the true label.
double loo_marginal_loglik(const Tensor& gammas, const std::vector<int64_t>& labels,
                           bool squared = false);

// Reference implementation that literally recomputes prototypes without each
// example, O(n^2 d). Must equal loo_logprob; kept as the cross-check oracle.
Tensor brute_force_loo(const Tensor& gammas, const std::vector<int64_t>& labels,
                       bool squared = false);

// Differentiable versions on a tape.
Value loo_logprob_rows(Tape& tape, Value gammas, const std::vector<int64_t>& labels,
                       bool squared = false);
Value loo_marginal_loglik_rows(Tape& tape, Value gammas, const std::vector<int64_t>& labels,
                               bool squared = false);
// Query scoring with prototypes built on-tape from support embeddings. [m, K]
Value proto_query_logprob_rows(Tape& tape, Value support, const std::vector<int64_t>& labels,
                               Value queries, bool squared = false);

}  // namespace dp
