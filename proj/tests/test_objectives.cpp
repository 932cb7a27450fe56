#include <cmath>
#include <numbers>

#include "doctest.h"
#include "gradient_cases.hpp"
#include "hicl/error.hpp"
#include "hicl/objectives.hpp"

using namespace hicl;
using hicl::test::random_tensor;
using hicl::test::small_model;

namespace {

double value(const Var& v) { return v.value()[0]; }

Tensor unit(double angle) { return Tensor::matrix(1, 2, {std::cos(angle), std::sin(angle)}); }

Prototype warm(std::size_t id, Tensor v) { return Prototype{id, std::move(v), 1, 0.01}; }

}  // namespace

TEST_SUITE("objectives") {
  TEST_CASE("operation gradients match finite differences") {
    for (const auto& c : hicl::test::op_cases()) {
      for (std::uint64_t seed = 0; seed < 3; ++seed) {
        CAPTURE(c.name);
        CAPTURE(seed);
        CHECK(c.run(seed).max_rel_error <= c.tolerance);
      }
    }
  }

  TEST_CASE("loss gradients match finite differences") {
    for (const auto& c : hicl::test::loss_cases()) {
      for (std::uint64_t seed = 0; seed < 3; ++seed) {
        CAPTURE(c.name);
        CAPTURE(seed);
        const GradCheckResult r = c.run(seed);
        CAPTURE(r.worst_parameter);
        CHECK(r.entries_checked > 0);
        CHECK(r.max_rel_error <= c.tolerance);
      }
    }
  }

  TEST_CASE("classification loss examples") {
    Tape t;
    const std::vector<std::size_t> zero{0};
    CHECK(value(loss_cls(t.constant(Tensor(Shape{1, 7})), zero)) == doctest::Approx(std::log(7.0)).epsilon(1e-14));
    CHECK(value(loss_cls(t.constant(Tensor::matrix(1, 3, {80, 0, 0})), zero)) < 1e-30);

    // rows [1,2] label 1 and [0,0] label 0: ((log(e + e^2) - 2) + ln 2) / 2
    const double expected = (std::log(std::exp(1.0) + std::exp(2.0)) - 2.0 + std::log(2.0)) / 2.0;
    CHECK(value(loss_cls(t.constant(Tensor::matrix(2, 2, {1, 2, 0, 0})), std::vector<std::size_t>{1, 0})) ==
          doctest::Approx(expected).epsilon(1e-14));
    CHECK_THROWS_AS(loss_cls(t.constant(Tensor(Shape{1, 2})), std::vector<std::size_t>{2}), DataError);
  }

  TEST_CASE("intra-batch loss examples") {
    Tape t;
    CHECK(value(loss_intra(t.constant(Tensor::matrix(1, 2, {1, 2})), std::vector<std::size_t>{0}, 1, 1, true)) == 0.0);
    CHECK(value(loss_intra(t.constant(Tensor::matrix(2, 2, {1, 2, 1, 2})), std::vector<std::size_t>{3, 3}, 1, 1,
                           true)) == 0.0);
    // different labels at distance 2 >= margin 1.5: the hinge is saturated
    CHECK(value(loss_intra(t.constant(Tensor::matrix(2, 2, {0, 0, 2, 0})), std::vector<std::size_t>{0, 1}, 1, 1.5,
                           true)) == 0.0);
    // distance 0.5 < margin 1: push = -(0.5)^2 times lambda 2
    CHECK(value(loss_intra(t.constant(Tensor::matrix(2, 2, {0, 0, 0.5, 0})), std::vector<std::size_t>{0, 1}, 2, 1,
                           false)) == doctest::Approx(-0.5).epsilon(1e-14));
    // same label at squared distance 4 plus one saturated cross pair, three pairs in total
    const Tensor codes = Tensor::matrix(3, 2, {0, 0, 2, 0, 0, 5});
    const std::vector<std::size_t> labels{0, 0, 1};
    CHECK(value(loss_intra(t.constant(codes), labels, 1, 1, false)) == doctest::Approx(4.0).epsilon(1e-14));
    CHECK(value(loss_intra(t.constant(codes), labels, 1, 1, true)) == doctest::Approx(4.0 / 3.0).epsilon(1e-14));
  }

  TEST_CASE("replay loss examples") {
    HiclModel model(small_model(2), 3);
    Tape t;
    const PerSampleLoss empty = loss_replay(t, model, {});
    CHECK(value(empty.loss) == 0.0);
    CHECK(!empty.loss.requires_grad());

    Rng rng(4);
    const Tensor x = random_tensor({4, model.config().encoder.input_dim}, rng, 0, 1);
    const std::vector<std::size_t> labels{0, 1, 1, 0};
    std::vector<ReplayItem> batch;
    for (std::size_t r = 0; r < 4; ++r) batch.push_back({{x.row(r).begin(), x.row(r).end()}, labels[r], 0, 1.0, 0.0});
    const double direct = value(loss_cls(model.forward_expert(t, model.features(t, x), 0).logits, labels));
    CHECK(value(loss_replay(t, model, batch).loss) == doctest::Approx(direct).epsilon(1e-14));

    // tasks 0, 1, 2, 3 map to experts 0, 1, 0, 1
    for (std::size_t r = 0; r < 4; ++r) batch[r].task_id = r;
    const PerSampleLoss mixed = loss_replay(t, model, batch);
    double hand = 0.0;
    for (std::size_t r = 0; r < 4; ++r) {
      const Tensor logits = model.expert_logits(x.gather_rows(std::vector<std::size_t>{r}), r % 2);
      const double m = std::max(logits[0], logits[1]);
      const double lse = m + std::log(std::exp(logits[0] - m) + std::exp(logits[1] - m));
      const double ce = lse - logits[labels[r]];
      CHECK(mixed.per_sample[r] == doctest::Approx(ce).epsilon(1e-12));
      hand += ce / 4.0;
    }
    CHECK(value(mixed.loss) == doctest::Approx(hand).epsilon(1e-12));
  }

  TEST_CASE("distillation examples") {
    Tape t;
    const Tensor f = Tensor::matrix(1, 2, {1, 1});
    CHECK(value(loss_distill(t.constant(f), f)) == 0.0);
    CHECK(value(loss_distill(t.constant(f), Tensor(Shape{1, 2}))) == 1.0);

    Parameter current(f);
    Parameter snapshot(Tensor::matrix(1, 2, {0.5, -1}));
    Tape g;
    g.backward(loss_distill(g.parameter(current), snapshot.value));
    CHECK(current.grad[0] == doctest::Approx(0.5));
    CHECK(current.grad[1] == doctest::Approx(2.0));
    for (double v : snapshot.grad.data()) CHECK(v == 0.0);
  }

  TEST_CASE("ewc examples") {
    Parameter theta(Tensor::vector({3}));
    const std::vector<NamedParameter> params{{"theta", &theta}};
    const std::vector<FisherInfo> fisher{{0, {{"theta", Tensor::vector({2}), Tensor::vector({1})}}}};
    const std::vector<double> w{1.0};
    Tape t;
    CHECK(value(loss_ewc(t, params, fisher, w)) == 8.0);
    CHECK(value(loss_ewc(t, params, {}, {})) == 0.0);

    const std::vector<FisherInfo> zero{{0, {{"theta", Tensor::vector({0}), Tensor::vector({1})}}}};
    CHECK(value(loss_ewc(t, params, zero, w)) == 0.0);
    const std::vector<FisherInfo> at_anchor{{0, {{"theta", Tensor::vector({5}), Tensor::vector({3})}}}};
    CHECK(value(loss_ewc(t, params, at_anchor, w)) == 0.0);

    const std::vector<FisherInfo> bad{{0, {{"theta", Tensor::vector({1, 1}), Tensor::vector({1, 1})}}}};
    CHECK_THROWS_AS(loss_ewc(t, params, bad, w), CheckpointError);
    const std::vector<FisherInfo> missing{{0, {{"other", Tensor::vector({1}), Tensor::vector({1})}}}};
    CHECK_THROWS_AS(loss_ewc(t, params, missing, w), CheckpointError);
  }

  TEST_CASE("ewc grows with distance from the anchor") {
    Rng rng(9);
    Parameter theta(random_tensor({6}, rng));
    const Tensor anchor = random_tensor({6}, rng);
    const Tensor f = random_tensor({6}, rng, 0, 2);
    const std::vector<NamedParameter> params{{"theta", &theta}};
    const std::vector<FisherInfo> fisher{{0, {{"theta", f, anchor}}}};
    const std::vector<double> w{0.7};
    double previous = -1.0;
    const Tensor start = theta.value;
    for (double s = 0.0; s <= 3.0; s += 0.25) {
      for (std::size_t i = 0; i < 6; ++i) theta.value[i] = anchor[i] + s * (start[i] - anchor[i]);
      Tape t;
      const double v = value(loss_ewc(t, params, fisher, w));
      CHECK(v >= previous);
      previous = v;
    }
  }

  TEST_CASE("ewc task weights") {
    const Prototype a = warm(0, Tensor::vector({1, 0}));
    const Prototype b = warm(1, Tensor::vector({1, 1}));
    const Prototype c = warm(2, Tensor::vector({-1, 0}));
    CHECK(ewc_task_weight(a, b, 0.05) == doctest::Approx(1.0 / std::sqrt(2.0) + 0.05));
    CHECK(ewc_task_weight(a, c, 0.05) == doctest::Approx(0.05));
  }

  TEST_CASE("sparsity surrogate examples") {
    Tape t;
    CHECK(value(loss_sparsity(t.constant(Tensor(Shape{2, 8})), 0.05, 0.01)) == doctest::Approx(0.45).epsilon(1e-14));
    CHECK(value(loss_sparsity(t.constant(Tensor(Shape{2, 8})), 0.5, 0.01)) == 0.0);
    const Tensor half = Tensor::matrix(1, 4, {5, 5, -5, -5});
    CHECK(value(loss_sparsity(t.constant(half), 0.5, 0.01)) <= 1e-12);

    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      Rng rng(seed);
      Parameter z(random_tensor({3, 8}, rng, -0.03, 0.03));
      const auto r = check_gradients({{"z", &z}}, [&](Tape& g) { return loss_sparsity(g.parameter(z), 0.05, 0.01); });
      CHECK(r.max_rel_error <= 1e-4);
    }
  }

  TEST_CASE("phase two contrastive examples") {
    const double margin = 0.2;
    std::vector<Prototype> protos{warm(0, Tensor::vector({1, 0})), warm(1, Tensor::vector({1, 0})),
                                  warm(2, Tensor::vector({1, 0}))};
    const std::vector<std::size_t> target{0};
    Tape t;
    auto run = [&](double c0, double c1, double c2) {
      const std::vector<Var> codes{t.constant(unit(std::acos(c0))), t.constant(unit(std::acos(c1))),
                                   t.constant(unit(std::acos(c2)))};
      return value(loss_contrastive(codes, target, protos, margin, false).loss);
    };
    CHECK(run(1.0, 0.5, 0.1) == doctest::Approx(0.3).epsilon(1e-12));
    CHECK(run(1.0, 0.1, -0.4) == doctest::Approx(0.0).epsilon(1e-14));

    // boundary: cosine exactly at the margin
    const std::vector<Var> edge{t.constant(Tensor::matrix(1, 2, {1, 0})), t.constant(Tensor::matrix(1, 2, {1, 0})),
                                t.constant(Tensor::matrix(1, 2, {0, 1}))};
    std::vector<Prototype> at_margin = protos;
    at_margin[1].vector = Tensor::vector({margin, std::sqrt(1 - margin * margin)});
    CHECK(value(loss_contrastive(edge, target, at_margin, margin, false).loss) == doctest::Approx(0.0).epsilon(1e-15));

    // cold experts are skipped; a cold target raises
    protos[2].update_count = 0;
    CHECK(run(1.0, 0.5, 0.9) == doctest::Approx(0.3).epsilon(1e-12));
    const std::vector<std::size_t> cold_target{2};
    const std::vector<Var> codes{t.constant(unit(0)), t.constant(unit(0)), t.constant(unit(0))};
    CHECK_THROWS_AS(loss_contrastive(codes, cold_target, protos, margin, false), RoutingError);
  }

  TEST_CASE("cross form uses the target expert's code") {
    const std::vector<Prototype> protos{warm(0, Tensor::vector({1, 0})), warm(1, Tensor::vector({0, 1}))};
    Tape t;
    // p^(0) = [1,0], p^(1) = [0,1]: as written the off term is cos(p^(1), u_1) = 1,
    // crossed it is cos(p^(0), u_1) = 0
    const std::vector<Var> codes{t.constant(Tensor::matrix(1, 2, {1, 0})), t.constant(Tensor::matrix(1, 2, {0, 1}))};
    const std::vector<std::size_t> target{0};
    CHECK(value(loss_contrastive(codes, target, protos, 0.2, false).loss) == doctest::Approx(0.8).epsilon(1e-14));
    CHECK(value(loss_contrastive(codes, target, protos, 0.2, true).loss) == doctest::Approx(0.0).epsilon(1e-14));
  }

  TEST_CASE("compositions") {
    Tape t;
    Phase1Terms terms{t.constant(Tensor::scalar(0.7)), t.constant(Tensor::scalar(-0.2)),
                      t.constant(Tensor::scalar(1.5)), t.constant(Tensor::scalar(0.4)),
                      t.constant(Tensor::scalar(2.0)), t.constant(Tensor::scalar(0.1))};
    LossWeights w;
    w.alpha_intra = w.alpha_rep = w.alpha_dist = w.alpha_ewc = w.alpha_s = 0.0;
    CHECK(value(compose_phase1(w, terms)) == 0.7);

    w = LossWeights{};
    const double p1 = 0.7 + 0.1 * -0.2 + 1.0 * 1.5 + 0.1 * 0.4 + 0.1 * 2.0 + 0.01 * 0.1;
    CHECK(value(compose_phase1(w, terms)) == doctest::Approx(p1).epsilon(1e-15));

    const Var phase1 = compose_phase1(w, terms);
    const Var contrast = t.constant(Tensor::scalar(0.3));
    LossWeights only1 = w;
    only1.lambda2 = 0.0;
    CHECK(value(compose_full(only1, phase1, compose_phase2(only1, contrast), terms.ewc, terms.replay)) ==
          doctest::Approx(p1).epsilon(1e-15));

    // hand-weighted full sum
    LossWeights h = w;
    h.lambda1 = 2.0;
    h.lambda2 = 0.5;
    h.lambda3 = 0.25;
    h.alpha_contrastive = 3.0;
    const double full = 2.0 * p1 + 0.5 * 3.0 * 0.3 + 0.25 * 2.0;
    CHECK(value(compose_full(h, phase1, compose_phase2(h, contrast), terms.ewc, terms.replay)) ==
          doctest::Approx(full).epsilon(1e-15));

    // linear in each weight
    for (double s : {0.5, 2.0, 7.0}) {
      LossWeights scaled = w;
      scaled.alpha_rep *= s;
      const double delta = value(compose_phase1(scaled, terms)) - value(compose_phase1(w, terms));
      CHECK(delta == doctest::Approx((s - 1.0) * 1.5).epsilon(1e-13));
    }
  }

  TEST_CASE("phase two gradients reach only the separation layers") {
    Rng rng(11);
    HiclModel model(small_model(3), 11);
    for (Prototype& p : model.prototypes) {
      p.vector = random_tensor({model.config().encoder.dg_dim}, rng, 0, 1);
      p.update_count = 1;
    }
    model.freeze_non_dg();
    auto params = model.named_parameters();
    for (const NamedParameter& np : params) np.param->zero_grad();
    const Tensor x = random_tensor({6, model.config().encoder.input_dim}, rng, 0, 1);
    Tape t;
    const Var f = model.features(t, x);
    std::vector<Var> codes;
    for (std::size_t e = 0; e < 3; ++e) codes.push_back(model.forward_expert(t, f, e).dg.code);
    const std::vector<std::size_t> targets{0, 1, 2, 0, 1, 2};
    t.backward(compose_phase2(LossWeights{}, loss_contrastive(codes, targets, model.prototypes, 0.2, false).loss));

    std::size_t dg_with_grad = 0;
    for (const NamedParameter& np : params) {
      const bool is_dg = np.name.find(".dg.") != std::string::npos || np.name.find(".dg_norm.") != std::string::npos;
      double norm = 0.0;
      for (double g : np.param->grad.data()) norm += g * g;
      CAPTURE(np.name);
      if (is_dg) {
        dg_with_grad += norm > 0.0;
      } else {
        CHECK(norm == 0.0);
      }
    }
    CHECK(dg_with_grad > 0);
    model.unfreeze_all();
  }

  TEST_CASE("fisher estimate") {
    HiclModel model(small_model(2), 5);
    Rng rng(5);
    LabeledData data{random_tensor({8, model.config().encoder.input_dim}, rng, 0, 1), {0, 1, 0, 1, 1, 0, 0, 1}};
    model.freeze_non_dg();
    const FisherInfo info = estimate_fisher(model, data, 1, 3);
    CHECK(info.task_id == 1);
    REQUIRE(!info.entries.empty());
    bool saw_backbone = false;
    for (const FisherEntry& e : info.entries) {
      CAPTURE(e.name);
      CHECK(e.name.rfind("expert0.", 0) != 0);
      saw_backbone = saw_backbone || e.name.rfind("backbone.", 0) == 0;
      for (double v : e.fisher.data()) CHECK(v >= 0.0);
    }
    CHECK(saw_backbone);
    // trainability is restored
    for (const NamedParameter& np : model.named_parameters()) {
      const bool is_dg = np.name.find(".dg.") != std::string::npos || np.name.find(".dg_norm.") != std::string::npos;
      CHECK(np.param->requires_grad == is_dg);
    }

    // hand check of one entry: the mean of squared per-row gradients over the last 3 rows
    model.unfreeze_all();
    const FisherInfo again = estimate_fisher(model, data, 1, 3);
    const std::string name = "expert1.head.bias";
    const FisherEntry* entry = nullptr;
    for (const FisherEntry& e : again.entries) entry = e.name == name ? &e : entry;
    REQUIRE(entry != nullptr);
    Parameter* head = nullptr;
    for (const NamedParameter& np : model.named_parameters()) head = np.name == name ? np.param : head;
    Tensor expected(head->value.shape());
    for (std::size_t r = 5; r < 8; ++r) {
      const Tensor logits = model.expert_logits(data.inputs.gather_rows(std::vector<std::size_t>{r}), 1);
      const double m = std::max(logits[0], logits[1]);
      const double z = std::exp(logits[0] - m) + std::exp(logits[1] - m);
      for (std::size_t c = 0; c < 2; ++c) {
        const double g = std::exp(logits[c] - m) / z - (c == data.labels[r] ? 1.0 : 0.0);
        expected[c] += g * g / 3.0;
      }
    }
    CHECK(hicl::test::max_abs_diff(entry->fisher, expected) <= 1e-12);
    CHECK(entry->anchor == head->value);
  }

  TEST_CASE("weights validation") {
    LossWeights w;
    CHECK_NOTHROW(w.validate());
    w.alpha_ewc = -1.0;
    CHECK_THROWS_AS(w.validate(), ConfigError);
    w = LossWeights{};
    w.sparsity_temperature = 0.0;
    CHECK_THROWS_AS(w.validate(), ConfigError);
  }
}
