#include <cmath>
#include <map>
#include <random>
#include <string>

#include "doctest.h"
#include "draft/ctc.hpp"
#include "draft/optim.hpp"

using namespace draft;

namespace {

// Random log-softmax rows, T x V.
Tensor random_log_probs(std::size_t T, std::size_t V, std::mt19937_64& rng, double spread = 2.0) {
  std::normal_distribution<double> n(0.0, spread);
  std::vector<double> v(T * V);
  for (std::size_t t = 0; t < T; ++t) {
    double z = 0.0;
    for (std::size_t k = 0; k < V; ++k) z += std::exp(v[t * V + k] = n(rng));
    for (std::size_t k = 0; k < V; ++k) v[t * V + k] -= std::log(z);
  }
  return Tensor::from({T, V}, std::move(v), DType::f64);
}

std::vector<std::size_t> collapse(const std::vector<std::size_t>& path) {
  std::vector<std::size_t> out;
  std::size_t prev = 0;
  for (auto p : path) {
    if (p != 0 && p != prev) out.push_back(p);
    prev = p;
  }
  return out;
}

// Probability mass of every collapsed label sequence, by enumerating all V^T paths.
std::map<std::vector<std::size_t>, double> brute_force(const Tensor& lp, std::size_t T, std::size_t V) {
  std::map<std::vector<std::size_t>, double> mass;
  std::vector<std::size_t> path(T, 0);
  std::size_t total = 1;
  for (std::size_t t = 0; t < T; ++t) total *= V;
  for (std::size_t code = 0; code < total; ++code) {
    std::size_t c = code;
    double logp = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      path[t] = c % V;
      c /= V;
      logp += lp[t * V + path[t]];
    }
    mass[collapse(path)] += std::exp(logp);
  }
  return mass;
}

std::vector<std::size_t> chars(const std::string& s) { return {s.begin(), s.end()}; }

}  // namespace

TEST_CASE("ctc_loss closed forms") {
  const double h = std::log(0.5);
  CHECK(ctc_loss(Tensor::from({1, 2}, {h, h}, DType::f64), {1}, 1).item() == doctest::Approx(-std::log(0.5)));
  CHECK(ctc_loss(Tensor::from({2, 2}, {h, h, h, h}, DType::f64), {1}, 2).item() ==
        doctest::Approx(-std::log(0.75)).epsilon(1e-14));
  std::mt19937_64 rng(1);
  const Tensor lp = random_log_probs(4, 3, rng);
  double blanks = 0.0;
  for (std::size_t t = 0; t < 4; ++t) blanks -= lp[t * 3];
  CHECK(ctc_loss(lp, {}, 4).item() == doctest::Approx(blanks).epsilon(1e-14));
}

TEST_CASE("ctc_loss matches brute-force path enumeration") {
  std::mt19937_64 rng(2);
  for (std::size_t T = 1; T <= 4; ++T)
    for (std::size_t V = 2; V <= 3; ++V) {
      const Tensor lp = random_log_probs(T, V, rng);
      const auto mass = brute_force(lp, T, V);
      double total = 0.0;
      for (const auto& [target, p] : mass) {
        total += p;
        if (target.size() <= 2) CHECK(ctc_loss(lp, target, T).item() == doctest::Approx(-std::log(p)).epsilon(1e-9));
      }
      CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("exp(-loss) over all targets sums to one") {
  std::mt19937_64 rng(3);
  for (std::size_t T = 1; T <= 3; ++T) {
    const std::size_t V = 3;
    const Tensor lp = random_log_probs(T, V, rng);
    double total = 0.0;
    // Every target of length <= T over tokens {1, 2}.
    std::vector<std::vector<std::size_t>> targets{{}};
    for (std::size_t len = 1; len <= T; ++len) {
      std::vector<std::vector<std::size_t>> next;
      for (const auto& t : targets)
        if (t.size() == len - 1)
          for (std::size_t k = 1; k < V; ++k) {
            auto e = t;
            e.push_back(k);
            next.push_back(e);
          }
      targets.insert(targets.end(), next.begin(), next.end());
    }
    for (const auto& t : targets) total += std::exp(-ctc_loss(lp, t, T).item());
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("ctc_loss ignores frames beyond input_len") {
  std::mt19937_64 rng(4);
  const Tensor lp = random_log_probs(6, 4, rng);
  const Tensor cut = slice(lp, 0, 0, 4);
  CHECK(ctc_loss(lp, {1, 3}, 4).item() == ctc_loss(cut, {1, 3}, 4).item());
}

TEST_CASE("ctc_loss gradient matches finite differences") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    // Mild logits keep every occupancy well above the difference noise.
    const Tensor lp = random_log_probs(5, 4, rng, 0.3);
    const std::vector<std::size_t> target{1, 1, 3};
    const double err = finite_diff_gradcheck(
        [&](const std::vector<Tensor>& in) { return ctc_loss(in[0], target, 5); }, {lp.clone()});
    CHECK(err < 1e-6);
  }
}

TEST_CASE("ctc_loss errors and infeasible targets") {
  std::mt19937_64 rng(6);
  const Tensor lp = random_log_probs(3, 3, rng);
  CHECK_THROWS_AS(ctc_loss(lp, {0}, 3), std::invalid_argument);
  CHECK_THROWS_AS(ctc_loss(lp, {3}, 3), std::out_of_range);
  CHECK(std::isinf(ctc_loss(lp, {1, 1}, 2).item()));
  CHECK(std::isinf(ctc_loss(lp, {1, 2, 1, 2}, 3).item()));
  CHECK(std::isfinite(ctc_loss(lp, {1, 1}, 3).item()));

  Tape tape;
  Tape::Scope scope(tape);
  Tensor x = lp.clone();
  x.set_requires_grad(true);
  const CtcBatchLoss b = ctc_batch_loss(reshape(x, {1, 3, 3}), {{1, 2, 1, 2}}, {3});
  CHECK(b.infeasible == 1);
  CHECK(b.normalized.item() == 0.0);
}

TEST_CASE("ctc_batch_loss normalizes by target length") {
  std::mt19937_64 rng(7);
  const Tensor a = random_log_probs(5, 4, rng), b = random_log_probs(5, 4, rng);
  const Tensor batch = reshape(concat({a, b}, 0), {2, 5, 4});
  const CtcBatchLoss l = ctc_batch_loss(batch, {{1, 2}, {3}}, {5, 3});
  const double la = ctc_loss(a, {1, 2}, 5).item(), lb = ctc_loss(b, {3}, 3).item();
  CHECK(l.sum.item() == doctest::Approx(la + lb).epsilon(1e-14));
  CHECK(l.normalized.item() == doctest::Approx((la / 2 + lb) / 2).epsilon(1e-14));
}

TEST_CASE("greedy decoding") {
  auto onehot = [](std::vector<std::size_t> path, std::size_t V) {
    std::vector<double> v(path.size() * V, -5.0);
    for (std::size_t t = 0; t < path.size(); ++t) v[t * V + path[t]] = -0.1;
    return Tensor::from({path.size(), V}, v, DType::f64);
  };
  CHECK(ctc_greedy_decode(onehot({1, 1, 0, 2}, 3), 4).tokens == std::vector<std::size_t>{1, 2});
  CHECK(ctc_greedy_decode(onehot({0, 0, 0}, 3), 3).tokens.empty());
  CHECK(ctc_greedy_decode(onehot({1, 0, 1}, 3), 3).tokens == std::vector<std::size_t>{1, 1});
  CHECK(ctc_greedy_decode(onehot({1, 0, 1}, 3), 3).score == doctest::Approx(-0.3));
  CHECK(ctc_greedy_decode(onehot({1, 2, 2}, 3), 2).tokens == std::vector<std::size_t>{1, 2});
  // Ties go to the lowest id.
  CHECK(ctc_greedy_decode(Tensor::from({1, 3}, {-2, -1, -1}, DType::f64), 1).tokens == std::vector<std::size_t>{1});
}

TEST_CASE("edit distance and error rate") {
  CHECK(edit_distance({1, 2, 3}, {1, 2, 3}) == 0);
  CHECK(edit_distance(chars("kitten"), chars("sitting")) == 3);
  CHECK(edit_distance({}, {4, 5, 6}) == 3);
  CHECK(edit_distance({4, 5}, {}) == 2);
  CHECK(error_rate({{1, 2}, {3}}, {{1, 2}, {3}}) == 0.0);
  CHECK(error_rate({{1, 2, 3, 4, 5}, {1, 2, 3, 4, 5}}, {{1, 2, 3, 4, 5}, {1, 2, 9, 4, 5}}) == doctest::Approx(0.1));
  CHECK(error_rate({{1, 2}, {3}}, {{}, {}}) == 1.0);
  CHECK_THROWS_AS(error_rate({{1}}, {}), std::invalid_argument);
  CHECK_THROWS_AS(error_rate({{}}, {{1}}), std::invalid_argument);
}

TEST_CASE("vocabulary") {
  const Vocab v = numeric_vocab(4);
  CHECK(v.size() == 5);
  CHECK(v.tokens[0] == "<blank>");
  CHECK_NOTHROW(validate_vocab(v));
  CHECK_THROWS_AS(validate_vocab(Vocab{{"<blank>", "a", "a"}}), std::invalid_argument);
}

TEST_CASE("ctc_loss gradient equals brute-force frame occupancy") {
  std::mt19937_64 rng(8);
  const std::size_t T = 4, V = 3;
  const std::vector<std::size_t> target{1, 2};
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor lp = random_log_probs(T, V, rng);
    // -d log Z / d lp[t][k] = P(path[t] = k | target).
    std::vector<double> occ(T * V, 0.0);
    double z = 0.0;
    std::vector<std::size_t> path(T);
    for (std::size_t code = 0; code < 81; ++code) {
      std::size_t c = code;
      double logp = 0.0;
      for (std::size_t t = 0; t < T; ++t) {
        path[t] = c % V;
        c /= V;
        logp += lp[t * V + path[t]];
      }
      if (collapse(path) != target) continue;
      z += std::exp(logp);
      for (std::size_t t = 0; t < T; ++t) occ[t * V + path[t]] += std::exp(logp);
    }
    Tape tape;
    Tensor x = lp.clone();
    x.set_requires_grad(true);
    {
      Tape::Scope scope(tape);
      backward(ctc_loss(x, target, T), tape);
    }
    for (std::size_t i = 0; i < T * V; ++i) CHECK(x.grad()[i] == doctest::Approx(-occ[i] / z).epsilon(1e-10));
  }
}
