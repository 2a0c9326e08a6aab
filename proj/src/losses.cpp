#include "cfirn/losses.hpp"

#include <atomic>
#include <cmath>
#include <limits>
#include <set>

#include "cfirn/error.hpp"

namespace cfirn {

namespace {
std::atomic<std::size_t> g_mining_warnings{0};
}

LossBreakdown total_loss(double cel, double kl, double tl, double alpha, double margin) {
  const std::pair<const char*, double> parts[] = {{"cel", cel}, {"kl", kl}, {"tl", tl}};
  for (const auto& [name, v] : parts) {
    if (!std::isfinite(v)) throw NumericError("losses", std::string(name) + " is not finite");
  }
  LossBreakdown b;
  b.cel = cel;
  b.kl = kl;
  b.tl = tl;
  b.alpha = alpha;
  b.margin = margin;
  b.total = cel + kl + alpha * tl;
  return b;
}

double triplet_loss(std::span<const double> anchor, std::span<const double> positive,
                    std::span<const double> negative, double margin) {
  if (anchor.size() != positive.size() || anchor.size() != negative.size()) {
    throw ContractViolation("triplet_loss: dimension mismatch");
  }
  double ap = 0.0, an = 0.0;
  for (std::size_t i = 0; i < anchor.size(); ++i) {
    ap += (anchor[i] - positive[i]) * (anchor[i] - positive[i]);
    an += (anchor[i] - negative[i]) * (anchor[i] - negative[i]);
  }
  return std::max(std::sqrt(ap) - std::sqrt(an) + margin, 0.0);
}

std::vector<ops::TripletIndex> mine_triplets(const Tensor& embeddings, std::span<const int> labels,
                                             std::span<const int> branch_tags) {
  if (embeddings.rank() != 2) throw ContractViolation("mine_triplets expects a (B, D) matrix");
  const int b = embeddings.dim(0);
  const int d = embeddings.dim(1);
  if (static_cast<int>(labels.size()) != b || static_cast<int>(branch_tags.size()) != b) {
    throw ContractViolation("mine_triplets: labels/branch tags do not match the batch");
  }
  std::vector<ops::TripletIndex> out;
  if (std::set<int>(labels.begin(), labels.end()).size() < 2) {
    ++g_mining_warnings;
    return out;
  }
  const double* e = embeddings.data();
  auto dist = [&](int i, int j) {
    double s = 0.0;
    for (int c = 0; c < d; ++c) {
      const double t = e[static_cast<std::size_t>(i) * d + c] - e[static_cast<std::size_t>(j) * d + c];
      s += t * t;
    }
    return std::sqrt(s);
  };
  for (int a = 0; a < b; ++a) {
    int pos = -1, neg = -1;
    double pos_d = -1.0, neg_d = std::numeric_limits<double>::infinity();
    for (int j = 0; j < b; ++j) {
      if (branch_tags[j] == branch_tags[a]) continue;
      const double dj = dist(a, j);
      if (labels[j] == labels[a]) {
        if (dj > pos_d) pos_d = dj, pos = j;
      } else if (dj < neg_d) {
        neg_d = dj, neg = j;
      }
    }
    if (pos >= 0 && neg >= 0) out.push_back({a, pos, neg});
  }
  return out;
}

std::size_t mining_warning_count() { return g_mining_warnings.load(); }

LossTerms compute_losses(const ModelOutput& out, std::span<const int> targets, const TrainConfig& config) {
  const int b = static_cast<int>(targets.size());
  if (out.feature->value.dim(0) != 2 * b) {
    throw ContractViolation("compute_losses: expected " + std::to_string(2 * b) + " feature rows");
  }
  LossTerms terms;
  const Var zero = constant(Tensor({1}, 0.0));
  terms.cel = zero;
  terms.kl = zero;
  terms.tl = zero;
  if (out.logits) {
    const Var q = ops::slice_rows(out.logits, 0, b);
    const Var g = ops::slice_rows(out.logits, b, 2 * b);
    if (config.ce_enabled) terms.cel = ops::add(ops::cross_entropy(q, targets), ops::cross_entropy(g, targets));
    if (config.kl_enabled) terms.kl = ops::symmetric_kl(q, g);
  }
  if (config.triplet_enabled) {
    std::vector<int> labels(targets.begin(), targets.end());
    labels.insert(labels.end(), targets.begin(), targets.end());
    std::vector<int> tags(2 * b, 0);
    std::fill(tags.begin() + b, tags.end(), 1);
    const auto triplets = mine_triplets(out.feature->value, labels, tags);
    terms.triplets = triplets.size();
    terms.tl = ops::triplet_margin(out.feature, triplets, config.margin);
  }
  terms.total = ops::add(ops::add(terms.cel, terms.kl), ops::scale(terms.tl, config.alpha));
  terms.breakdown = total_loss(terms.cel->value[0], terms.kl->value[0], terms.tl->value[0], config.alpha, config.margin);
  return terms;
}

}  // namespace cfirn
