#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "dicap/config.hpp"
#include "dicap/trainer.hpp"

using namespace dicap;
using Catch::Approx;

namespace {

gen_config tiny_gen() {
    gen_config g;
    g.samples = 400;
    g.test_samples = 200;
    g.input_dim = 8;
    g.num_classes = 3;
    g.latent_dim = 3;
    g.seed = 5;
    return g;
}

train_config tiny_train() {
    train_config c;
    c.warmup_epochs = 2;
    c.main_epochs = 2;
    c.finetune_epochs = 3;
    c.batch_size = 32;
    c.finetune_batch_size = 8;
    c.model.hidden_dim = 8;
    c.model.embedding_dim = 4;
    c.model.hidden_layers = 1;
    c.contrastive_cap = 32;
    c.seed = 3;
    return c;
}

struct fixture {
    dataset train = generate_synthetic(tiny_gen());
    dataset test = generate_test_set(tiny_gen());
    ssmll_data data{train, split_ssmll(train, 0.2, 0.25, 2)};
};

}  // namespace

TEST_CASE("steps per epoch covers the larger of the two pools") {
    CHECK(detail::steps_per_epoch(40, 960, 64) == 15);
    CHECK(detail::steps_per_epoch(800, 19200, 64) == 300);
    CHECK(detail::steps_per_epoch(100, 0, 64) == 2);
    CHECK(detail::steps_per_epoch(0, 0, 64) == 1);
}

TEST_CASE("weight policy names round-trip") {
    for (auto p : all_policies) CHECK(parse_weight_policy(to_string(p)) == p);
    CHECK_THROWS_AS(parse_weight_policy("best"), std::invalid_argument);
}

TEST_CASE("train_config validation") {
    auto c = tiny_train();
    c.bins = 1;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = tiny_train();
    c.batch_size = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = tiny_train();
    c.temperature = 0.0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("zero warm-up epochs leave the initial model") {
    fixture f;
    auto c = tiny_train();
    c.warmup_epochs = 0;
    const auto init = make_model(f.data, c);
    CHECK(warmup(f.data, init, c) == init);
}

TEST_CASE("warm-up without contrastive term is supervised ASL only") {
    fixture f;
    auto c = tiny_train();
    c.warmup_contrastive = false;
    std::vector<epoch_report> reps;
    warmup(f.data, make_model(f.data, c), c, [&](const epoch_report& r, const model_state&) { reps.push_back(r); });
    REQUIRE(reps.size() == 2);
    for (const auto& r : reps) {
        CHECK(r.stage == "warmup");
        CHECK(r.l_uncer == 0.0);
        CHECK(r.l_total == r.l_sup);
    }
}

TEST_CASE("warm-up with contrastive term adds a positive InfoNCE value") {
    fixture f;
    auto c = tiny_train();
    std::vector<epoch_report> reps;
    warmup(f.data, make_model(f.data, c), c, [&](const epoch_report& r, const model_state&) { reps.push_back(r); });
    for (const auto& r : reps) {
        CHECK(r.l_uncer > 0.0);
        CHECK(r.l_total == Approx(r.l_sup + r.l_uncer).margin(1e-12));
    }
}

TEST_CASE("warm-up lowers the supervised loss") {
    fixture f;
    auto c = tiny_train();
    c.warmup_epochs = 8;
    c.optim.lr = 1e-2;
    std::vector<epoch_report> reps;
    warmup(f.data, make_model(f.data, c), c, [&](const epoch_report& r, const model_state&) { reps.push_back(r); });
    CHECK(reps.back().l_sup < reps.front().l_sup);
}

TEST_CASE("epoch counts cover every D_unsup entry") {
    fixture f;
    const auto c = tiny_train();
    auto m = warmup(f.data, make_model(f.data, c), c);
    const auto r = train_epoch(m, f.data, c, 0);
    CHECK(r.confident + r.uncertain == f.data.unsup_features().rows * f.data.num_classes());
    CHECK(r.positive + r.negative == r.confident);
    CHECK(r.tau_pos.size() == 3);
    CHECK(r.weight_pos.size() == c.bins);
    CHECK(r.steps == detail::steps_per_epoch(f.data.sup_features().rows, f.data.unsup_features().rows, c.batch_size));
    CHECK(r.l_total == Approx(r.l_sup + r.l_pseudo + r.l_uncer).margin(1e-12));
}

TEST_CASE("sentinel thresholds make every entry uncertain and zero the pseudo loss") {
    fixture f;
    const auto c = tiny_train();
    auto m = make_model(f.data, c);
    epoch_overrides o;
    o.thresholds = class_thresholds::constant(3, 1.0, 0.0);
    const auto r = train_epoch(m, f.data, c, 0, nullptr, o);
    CHECK(r.confident == 0);
    CHECK(r.uncertain == f.data.unsup_features().rows * 3);
    CHECK(r.l_pseudo == 0.0);
    CHECK(r.l_uncer > 0.0);
}

TEST_CASE("pseudo-labeling off reduces the epoch to supervised training") {
    fixture f;
    auto c = tiny_train();
    c.pseudo_labeling = false;
    auto m = make_model(f.data, c);
    const auto r = train_epoch(m, f.data, c, 0);
    CHECK(r.l_pseudo == 0.0);
    CHECK(r.l_uncer == 0.0);
    CHECK(r.confident == 0);
    CHECK(r.l_total == r.l_sup);
}

TEST_CASE("an unusable weight table fails with the epoch number") {
    fixture f;
    auto c = tiny_train();
    c.policy = weight_policy::optimal;
    auto m = make_model(f.data, c);
    epoch_overrides o;
    // No confident pseudo-label anywhere leaves the oracle table without a single occupied bin.
    o.thresholds = class_thresholds::constant(3, 1.0, 0.0);
    CHECK_THROWS_WITH(train_epoch(m, f.data, c, 7, nullptr, o), Catch::Matchers::StartsWith("epoch 7: ") &&
                                                                    Catch::Matchers::ContainsSubstring("empty"));
}

TEST_CASE("uniform policy equals any policy with the table forced to one") {
    fixture f;
    auto c = tiny_train();
    const auto start = warmup(f.data, make_model(f.data, c), c);

    auto a = start;
    c.policy = weight_policy::uniform;
    const auto ra = train_epoch(a, f.data, c, 0);

    auto b = start;
    c.policy = weight_policy::ours;
    epoch_overrides o;
    o.table = weight_table::uniform(c.bins);
    const auto rb = train_epoch(b, f.data, c, 0, nullptr, o);
    CHECK(ra == rb);
    CHECK(a == b);
}

TEST_CASE("each policy builds its table from the documented source") {
    fixture f;
    auto c = tiny_train();
    const auto m = warmup(f.data, make_model(f.data, c), c);
    const matrix sup_scores = predict_scores(m, f.data.sup_features(), true);
    const matrix est_scores = predict_scores(m, f.data.est_features(), true);
    const matrix unsup_scores = predict_scores(m, f.data.unsup_features(), true);
    const auto thresholds = derive_thresholds(sup_scores, gather_rows(f.train.labels, f.data.splits().sup));
    const auto pseudo = assign_pseudo_labels(unsup_scores, thresholds);

    c.policy = weight_policy::ours;
    auto plan = plan_epoch(m, f.data, c);
    CHECK(plan.unsup_scores == unsup_scores);
    CHECK(plan.pseudo.values == pseudo.values);
    const auto ours = estimate_weight_table(est_scores, gather_rows(f.train.labels, f.data.splits().est), c.bins);
    CHECK(plan.table.resolved_pos() == ours.resolved_pos());
    CHECK(plan.table.source() == table_source::estimated_from_est);

    c.policy = weight_policy::labeled;
    plan = plan_epoch(m, f.data, c);
    const auto labeled = estimate_weight_table(sup_scores, gather_rows(f.train.labels, f.data.splits().sup), c.bins);
    CHECK(plan.table.resolved_pos() == labeled.resolved_pos());

    c.policy = weight_policy::optimal;
    plan = plan_epoch(m, f.data, c);
    const std::size_t nu = f.data.splits().unlabeled.size();
    matrix u_scores(nu, 3);
    std::copy_n(unsup_scores.data.begin(), u_scores.size(), u_scores.data.begin());
    const std::vector<std::int8_t> u_pseudo(pseudo.values.begin(), pseudo.values.begin() + u_scores.size());
    const auto oracle = oracle_weight_table(u_scores, gather_rows(f.train.labels, f.data.splits().unlabeled), u_pseudo, c.bins);
    CHECK(plan.table.resolved_pos() == oracle.resolved_pos());
    CHECK(plan.table.resolved_neg() == oracle.resolved_neg());
    CHECK(plan.table.stats().n_pos == oracle.stats().n_pos);

    c.policy = weight_policy::confidence;
    CHECK(plan_epoch(m, f.data, c).table.mode() == weight_mode::confidence);
    c.policy = weight_policy::uniform;
    CHECK(plan_epoch(m, f.data, c).table.mode() == weight_mode::uniform);
}

TEST_CASE("fine-tuning trains the head only") {
    fixture f;
    auto c = tiny_train();
    c.finetune_epochs = 20;
    c.optim.lr = 1e-2;
    auto m = warmup(f.data, make_model(f.data, c), c);
    const auto before = m;
    const matrix est_y = gather_rows(f.train.labels, f.data.splits().est);
    const double obj_before = finetune_objective(m, f.data.est_features(), est_y, c.asl);

    std::vector<double> losses;
    const auto after = finetune_head(f.data, m, c, [&](const epoch_report& r, const model_state& s) {
        losses.push_back(r.l_sup);
        CHECK(r.stage == "finetune");
        for (std::size_t i = 0; i < s.params.size(); ++i) CHECK(s.ema.shadow[i] == s.params[i].value);
    });
    REQUIRE(losses.size() == 20);
    bool head_changed = false;
    for (std::size_t i = 0; i < after.params.size(); ++i) {
        if (after.params[i].role == param_role::backbone)
            CHECK(after.params[i].value == before.params[i].value);
        else
            head_changed = head_changed || !(after.params[i].value == before.params[i].value);
        CHECK(after.params[i].trainable);
    }
    CHECK(head_changed);
    CHECK(finetune_objective(after, f.data.est_features(), est_y, c.asl) < obj_before);
    CHECK(losses.back() < losses.front());
}

TEST_CASE("zero fine-tune epochs leave the model unchanged") {
    fixture f;
    auto c = tiny_train();
    c.finetune_epochs = 0;
    const auto m = warmup(f.data, make_model(f.data, c), c);
    CHECK(finetune_head(f.data, m, c) == m);
}

TEST_CASE("D_est labels supervise gradients only inside fine-tuning") {
    fixture f;
    const auto c = tiny_train();
    run_pipeline(f.data, f.test, c);
    CHECK(f.data.est_supervision_confined_to("finetune"));
    bool est_supervised = false, est_counted = false;
    for (const auto& a : f.data.access_log()) {
        if (a.subset == label_subset::est && a.purpose == label_purpose::supervision) est_supervised = true;
        if (a.subset == label_subset::est && a.purpose == label_purpose::weight_estimation) {
            est_counted = true;
            CHECK(a.stage == "main");
        }
        // D_u ground truth is read only by the oracle snapshot.
        if (a.subset == label_subset::unlabeled) CHECK(a.purpose == label_purpose::oracle);
    }
    CHECK(est_supervised);
    CHECK(est_counted);
}

TEST_CASE("the pipeline is deterministic") {
    const auto c = tiny_train();
    fixture f1, f2;
    const auto a = run_pipeline(f1.data, f1.test, c, {true, {}});
    const auto b = run_pipeline(f2.data, f2.test, c, {true, {}});
    CHECK(a.reports == b.reports);
    CHECK(a.model == b.model);
    CHECK(a.test_map == b.test_map);
    auto c2 = c;
    c2.seed = 4;
    fixture f3;
    CHECK_FALSE(run_pipeline(f3.data, f3.test, c2).test_map == a.test_map);
}

TEST_CASE("pipeline stages run in order and report once per epoch") {
    fixture f;
    const auto c = tiny_train();
    std::vector<std::string> stages;
    const auto r = run_pipeline(f.data, f.test, c, {true, [&](const epoch_report& e, const model_state&) {
                                                        stages.push_back(e.stage);
                                                    }});
    const std::vector<std::string> expected{"warmup", "warmup", "main", "main", "finetune", "finetune", "finetune"};
    CHECK(stages == expected);
    REQUIRE(r.reports.size() == expected.size());
    for (const auto& e : r.reports) REQUIRE(e.test_map.has_value());
    CHECK(r.reports.back().test_map.value() == r.test_map);
    REQUIRE(r.calibration.has_value());
    CHECK(r.calibration->estimated.source() == table_source::estimated_from_est);
    CHECK(r.calibration->oracle.source() == table_source::oracle);
    CHECK(r.test_map > 0.0);
    CHECK(r.test_map <= 1.0);
}

TEST_CASE("the supervised baseline skips pseudo-labels, contrast and fine-tuning") {
    fixture f;
    auto c = tiny_train();
    c.pseudo_labeling = false;
    const auto r = run_pipeline(f.data, f.test, c);
    CHECK(r.reports.size() == c.warmup_epochs + c.main_epochs);
    for (const auto& e : r.reports) {
        CHECK(e.l_uncer == 0.0);
        CHECK(e.l_pseudo == 0.0);
        CHECK(e.stage != "finetune");
    }
    CHECK_FALSE(r.calibration.has_value());
    for (const auto& a : f.data.access_log()) CHECK(a.subset == label_subset::sup);
}

TEST_CASE("epoch report json carries every field") {
    epoch_report r;
    r.epoch = 3;
    r.stage = "main";
    r.confident = 10;
    r.tau_pos = {0.6};
    const auto j = to_json(r);
    for (const char* k : {"epoch", "stage", "l_sup", "l_pseudo", "l_uncer", "l_total", "steps", "confident", "uncertain",
                          "positive", "negative", "weight_pos", "weight_neg", "tau_pos", "tau_neg", "test_map"})
        CHECK(j.contains(k));
    CHECK(j["test_map"].is_null());
    CHECK(j["epoch"] == 3);
}

TEST_CASE("reference benchmark: warm-up, confident counts and fine-tuning behave", "[reference]") {
    auto rc = reference_run_config();
    rc.train.main_epochs = 10;
    const dataset train = generate_synthetic(rc.data);
    const ssmll_data data(train, split_ssmll(train, rc.rho, rc.est_fraction, rc.split_seed));
    const auto& c = rc.train;

    std::vector<epoch_report> warm;
    auto m = warmup(data, make_model(data, c), c, [&](const epoch_report& r, const model_state&) { warm.push_back(r); });
    REQUIRE(warm.size() == 5);
    CHECK(warm.back().l_sup < warm.front().l_sup);

    std::vector<std::size_t> confident;
    for (std::size_t e = 0; e < c.main_epochs; ++e) confident.push_back(train_epoch(m, data, c, e).confident);
    int non_decreasing = 0;
    for (std::size_t e = 1; e < confident.size(); ++e) non_decreasing += confident[e] >= confident[e - 1];
    CHECK(non_decreasing >= 8);

    adopt_ema(m);
    const matrix est_y = gather_rows(train.labels, data.splits().est);
    std::vector<double> objective{finetune_objective(m, data.est_features(), est_y, c.asl)};
    const auto before = m;
    const auto tuned = finetune_head(data, m, c, [&](const epoch_report&, const model_state& s) {
        objective.push_back(finetune_objective(s, data.est_features(), est_y, c.asl));
    });
    REQUIRE(objective.size() == 21);
    for (std::size_t e = 1; e < objective.size(); ++e) CHECK(objective[e] < objective[e - 1]);
    for (std::size_t i = 0; i < tuned.params.size(); ++i)
        if (tuned.params[i].role == param_role::backbone) CHECK(tuned.params[i].value == before.params[i].value);
}
