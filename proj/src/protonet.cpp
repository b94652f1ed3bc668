#include "dp/protonet.hpp"

#include <cmath>

namespace dp {

std::vector<std::vector<int64_t>> class_indices(const std::vector<int64_t>& labels) {
  if (labels.empty()) throw ContractError("class_indices: no labels");
  int64_t k = 0;
  for (int64_t y : labels) {
    if (y < 0) throw ContractError("class_indices: negative label");
    k = std::max(k, y + 1);
  }
  std::vector<std::vector<int64_t>> idx(static_cast<size_t>(k));
  for (size_t i = 0; i < labels.size(); ++i)
    idx[static_cast<size_t>(labels[i])].push_back(static_cast<int64_t>(i));
  for (size_t c = 0; c < idx.size(); ++c)
    if (idx[c].empty()) throw ContractError("class " + std::to_string(c) + " has no examples");
  return idx;
}

namespace {

// prototypes as a [K,d] tape value
Value prototypes_rows(Value gammas, const std::vector<std::vector<int64_t>>& idx) {
  Value protos = mean_axis(gather_rows(gammas, idx[0]), 0);
  for (size_t c = 1; c < idx.size(); ++c)
    protos = concat(protos, mean_axis(gather_rows(gammas, idx[c]), 0), 0);
  return protos;
}

Value distance_columns(Value points, Value protos, bool squared) {
  int64_t n = points.rows();
  int64_t k = protos.rows();
  Value dist{nullptr, -1};
  for (int64_t c = 0; c < k; ++c) {
    Value diff =
        points - broadcast_to(slice(protos, c, c + 1, 0, protos.cols()), {n, points.cols()});
    Value col = squared ? sum_axis(square(diff), 1) : l2_norm_rows(diff);
    dist = c == 0 ? col : concat(dist, col, 1);
  }
  return dist;
}

}  // namespace

Value proto_query_logprob_rows(Tape& tape, Value support, const std::vector<int64_t>& labels,
                               Value queries, bool squared) {
  auto idx = class_indices(labels);
  Value protos = prototypes_rows(support, idx);
  Value dist = distance_columns(queries, protos, squared);
  (void)tape;
  return log_softmax_rows(0.0 - dist);
}

Value loo_logprob_rows(Tape& tape, Value gammas, const std::vector<int64_t>& labels,
                       bool squared) {
  auto idx = class_indices(labels);
  int64_t n = gammas.rows();
  int64_t k = static_cast<int64_t>(idx.size());
  for (size_t c = 0; c < idx.size(); ++c)
    if (idx[c].size() < 2)
      throw ContractError("leave-one-out undefined: class " + std::to_string(c) +
                          " has a single example");
  Value protos = prototypes_rows(gammas, idx);
  Value dist = distance_columns(gammas, protos, squared);
  // own-class distances rescale by |K|/(|K|-1); other classes are unchanged
  Tensor factors = Tensor::full({n, k}, 1.0);
  for (int64_t i = 0; i < n; ++i) {
    int64_t y = labels[static_cast<size_t>(i)];
    double count = static_cast<double>(idx[static_cast<size_t>(y)].size());
    double f = count / (count - 1.0);
    factors.at(i, y) = squared ? f * f : f;
  }
  return log_softmax_rows(0.0 - mul(dist, tape.constant(factors)));
}

Value loo_marginal_loglik_rows(Tape& tape, Value gammas, const std::vector<int64_t>& labels,
                               bool squared) {
  Value logp = loo_logprob_rows(tape, gammas, labels, squared);
  Tensor onehot = Tensor::zeros(logp.val().shape());
  for (size_t i = 0; i < labels.size(); ++i) onehot.at(static_cast<int64_t>(i), labels[i]) = 1.0;
  return sum(mul(logp, tape.constant(onehot)));
}

PrototypeSet compute_prototypes(const Tensor& gammas, const std::vector<int64_t>& labels) {
  if (gammas.rows() != static_cast<int64_t>(labels.size()))
    throw ShapeError("compute_prototypes: rows != labels");
  auto idx = class_indices(labels);
  PrototypeSet out;
  out.protos = Tensor::zeros({static_cast<int64_t>(idx.size()), gammas.cols()});
  for (size_t c = 0; c < idx.size(); ++c) {
    out.counts.push_back(static_cast<int64_t>(idx[c].size()));
    for (int64_t i : idx[c])
      for (int64_t j = 0; j < gammas.cols(); ++j)
        out.protos.at(static_cast<int64_t>(c), j) +=
            gammas.at(i, j) / static_cast<double>(idx[c].size());
  }
  return out;
}

Tensor proto_predict(const Tensor& queries, const PrototypeSet& protos, bool squared) {
  Tape tape;
  Value logp = log_softmax_rows(
      0.0 -
      distance_columns(tape.constant(queries), tape.constant(protos.protos), squared));
  return logp.val();
}

Tensor loo_logprob(const Tensor& gammas, const std::vector<int64_t>& labels, bool squared) {
  Tape tape;
  return loo_logprob_rows(tape, tape.constant(gammas), labels, squared).val();
}

double loo_marginal_loglik(const Tensor& gammas, const std::vector<int64_t>& labels,
                           bool squared) {
  Tape tape;
  return loo_marginal_loglik_rows(tape, tape.constant(gammas), labels, squared).val().item();
}

Tensor brute_force_loo(const Tensor& gammas, const std::vector<int64_t>& labels, bool squared) {
  auto idx = class_indices(labels);
  int64_t n = gammas.rows();
  int64_t d = gammas.cols();
  int64_t k = static_cast<int64_t>(idx.size());
  for (size_t c = 0; c < idx.size(); ++c)
    if (idx[c].size() < 2)
      throw ContractError("leave-one-out undefined: class " + std::to_string(c) +
                          " has a single example");
  Tensor logp = Tensor::zeros({n, k});
  std::vector<double> logits(static_cast<size_t>(k));
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t c = 0; c < k; ++c) {
      double dist2 = 0.0;
      // prototype of class c recomputed without example i
      for (int64_t j = 0; j < d; ++j) {
        double proto = 0.0;
        int64_t count = 0;
        for (int64_t m : idx[static_cast<size_t>(c)]) {
          if (m == i) continue;
          proto += gammas.at(m, j);
          ++count;
        }
        proto /= static_cast<double>(count);
        double diff = proto - gammas.at(i, j);
        dist2 += diff * diff;
      }
      logits[static_cast<size_t>(c)] = squared ? -dist2 : -std::sqrt(dist2);
    }
    double mx = logits[0];
    for (double l : logits) mx = std::max(mx, l);
    double z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    double lz = std::log(z);
    for (int64_t c = 0; c < k; ++c) logp.at(i, c) = logits[static_cast<size_t>(c)] - mx - lz;
  }
  return logp;
}

}  // namespace dp
