import dataclasses
import math

import numpy as np
import pytest

from kdrank.data import DatasetSpec, Split, class_means, generate_dataset, read_split, write_split
from kdrank.distill import (
    METRICS_HEADER,
    MetricsRow,
    RunConfig,
    apply_axis,
    distill_student,
    evaluate,
    format_metrics,
    read_metrics,
    sweep,
    train_teacher,
    write_metrics,
)
from kdrank.errors import ConfigError, SweepError, TrainingError
from kdrank.losses import LossWeights, RankingConfig, Subset, kl_gradient, ranking_gradient
from kdrank.nn import SgdConfig, backward, forward, init_mlp, sgd_step
from kdrank.numeric import zscore_normalize

from conftest import STUDENT_SEEDS

SMALL = RunConfig(
    dataset=DatasetSpec(num_classes=5, input_dim=8, samples_per_class=40, seed=3),
    teacher_hidden=(32,),
    student_hidden=(8,),
    teacher_sgd=SgdConfig(learning_rate=0.1, weight_decay=0.0, epochs=15, batch_size=32, seed=0),
    student_sgd=SgdConfig(learning_rate=0.05, epochs=10, batch_size=32, seed=1),
)


@pytest.fixture(scope="module")
def small_data():
    return generate_dataset(SMALL.dataset)


@pytest.fixture(scope="module")
def small_teacher(small_data):
    return train_teacher(SMALL, small_data)[0]


def final_split(rows, split):
    return [r for r in rows if r.split == split][-1]


def with_weights(cfg, **kw):
    return dataclasses.replace(cfg, weights=dataclasses.replace(cfg.weights, **kw))


# --- dataset --------------------------------------------------------------


def test_dataset_deterministic():
    a = generate_dataset(SMALL.dataset)
    b = generate_dataset(SMALL.dataset)
    for s, t in zip(a, b):
        assert np.array_equal(s.x, t.x) and np.array_equal(s.y, t.y)


def test_dataset_seed_matters():
    a, _ = generate_dataset(SMALL.dataset)
    b, _ = generate_dataset(dataclasses.replace(SMALL.dataset, seed=4))
    assert not np.array_equal(a.x, b.x)


def test_dataset_balanced_and_split_80_20():
    train, test = generate_dataset(DatasetSpec())
    assert len(train) == 20 * 160 and len(test) == 20 * 40
    assert np.all(np.bincount(train.y) == 160) and np.all(np.bincount(test.y) == 40)
    assert train.x.shape[1] == 32


def test_nearest_centroid_separates_tight_clusters():
    spec = DatasetSpec(num_classes=10, input_dim=16, samples_per_class=30, cluster_spread=1e-3, seed=5)
    train, test = generate_dataset(spec)
    centroids = np.stack([train.x[train.y == c].mean(axis=0) for c in range(10)])
    dist = ((test.x[:, None, :] - centroids[None]) ** 2).sum(axis=2)
    assert np.mean(dist.argmin(axis=1) == test.y) == 1.0


def test_correlation_brings_group_means_closer():
    near = class_means(DatasetSpec(inter_class_correlation=0.9))
    far = class_means(DatasetSpec(inter_class_correlation=0.0))

    def within_group(m):
        return np.linalg.norm(m[0] - m[1])

    assert within_group(near) < within_group(far)


@pytest.mark.parametrize(
    "kw",
    [{"num_classes": 1}, {"input_dim": 0}, {"samples_per_class": 0}, {"cluster_spread": 0}, {"inter_class_correlation": 1.0}],
)
def test_dataset_spec_validation(kw):
    with pytest.raises(ConfigError):
        DatasetSpec(**kw)


def test_split_csv_round_trip(tmp_path, small_data):
    train, _ = small_data
    write_split(train, tmp_path / "train.csv")
    back = read_split(tmp_path / "train.csv")
    assert np.array_equal(back.x, train.x) and np.array_equal(back.y, train.y)


# --- metrics file ---------------------------------------------------------


def test_metrics_round_trip(tmp_path):
    rows = [
        MetricsRow(0, "train", 1.5, 0.0, 1.5, 0.0, 0.25),
        MetricsRow(3, "test", 0.123456789123, 0.1, 0.2, -0.6, 0.75, 0.5),
    ]
    path = tmp_path / "m.csv"
    write_metrics(rows, path)
    text = path.read_text()
    assert text.splitlines()[0] == METRICS_HEADER
    assert text.splitlines()[1].endswith(",nan")
    assert "0.123456789," in text
    back = read_metrics(path)
    assert back[0] == rows[0] and back[1].mean_exact_tau == 0.5


@pytest.mark.parametrize(
    "row",
    [
        MetricsRow(0, "val", 0, 0, 0, 0, 0.5),
        MetricsRow(0, "test", math.inf, 0, 0, 0, 0.5),
        MetricsRow(0, "test", 0, 0, 0, 0, 1.5),
        MetricsRow(0, "test", 0, 0, 0, 0, 0.5, -1.5),
    ],
)
def test_metrics_writer_checks_invariants(row):
    with pytest.raises(ValueError):
        format_metrics([row])


# --- evaluation -----------------------------------------------------------


def test_empty_split_is_an_error(small_teacher):
    with pytest.raises(ValueError):
        evaluate(small_teacher, Split(np.zeros((0, 8)), np.zeros(0, dtype=int)))


def test_teacher_against_itself(small_teacher, small_data):
    row = evaluate(small_teacher, small_data[1], teacher=small_teacher)
    assert row.mean_exact_tau == 1.0
    assert abs(row.kl_loss) <= 1e-12


def test_evaluate_shape_mismatch(small_teacher):
    with pytest.raises(ConfigError):
        evaluate(small_teacher, Split(np.zeros((3, 9)), np.zeros(3, dtype=int)))


def test_random_student_near_chance():
    cfg = RunConfig()
    _, test = generate_dataset(cfg.dataset)
    accs = [evaluate(init_mlp(cfg.student_arch(), seed), test).accuracy for seed in range(5)]
    # binomial std at n=800, p=0.05 is ~0.008; the band is +-0.05
    assert abs(np.mean(accs) - 1 / 20) <= 0.05


# --- training -------------------------------------------------------------


def test_zero_epoch_teacher_equals_initialization(small_data):
    cfg = dataclasses.replace(SMALL, teacher_sgd=dataclasses.replace(SMALL.teacher_sgd, epochs=0))
    model, rows = train_teacher(cfg, small_data)
    init = init_mlp(cfg.teacher_arch(), cfg.teacher_sgd.seed)
    for p, q in zip(model.parameters(), init.parameters()):
        assert np.array_equal(p, q)
    assert [r.epoch for r in rows] == [0, 0]


def test_teacher_training_deterministic(small_data):
    a, rows_a = train_teacher(SMALL, small_data)
    b, rows_b = train_teacher(SMALL, small_data)
    assert rows_a == rows_b
    for p, q in zip(a.parameters(), b.parameters()):
        assert np.array_equal(p, q)


def test_teacher_learns(small_data):
    _, rows = train_teacher(SMALL, small_data)
    assert rows[-1].accuracy > rows[1].accuracy + 0.3
    assert all(r.mean_exact_tau is None for r in rows)


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_teacher_divergence_names_epoch(small_data):
    cfg = dataclasses.replace(SMALL, teacher_sgd=dataclasses.replace(SMALL.teacher_sgd, learning_rate=1e6))
    with pytest.raises(TrainingError) as info:
        train_teacher(cfg, small_data)
    assert info.value.epoch >= 1
    assert f"epoch {info.value.epoch}" in str(info.value)


def test_eval_every_thins_rows(small_data):
    cfg = dataclasses.replace(SMALL, eval_every=4)
    _, rows = train_teacher(cfg, small_data)
    assert sorted({r.epoch for r in rows}) == [0, 4, 8, 12, 15]


def test_plain_kd_matches_reference_loop(small_data, small_teacher):
    """gamma=0, beta=0 is vanilla KD; a hand-rolled KL-only loop lands on the same weights."""
    kd = with_weights(SMALL, beta=0.0, gamma=0.0)
    student, rows = distill_student(kd, small_teacher, small_data)

    train, _ = small_data
    ref = init_mlp(kd.student_arch(), kd.student_sgd.seed)
    z_t = small_teacher.predict(train.x)
    rng = np.random.default_rng([kd.student_sgd.seed, 3])
    state = None
    bs, T, alpha = kd.student_sgd.batch_size, kd.weights.temperature, kd.weights.alpha
    for _ in range(kd.student_sgd.epochs):
        perm = rng.permutation(len(train))
        for start in range(0, len(train), bs):
            idx = perm[start : start + bs]
            z, cache = forward(ref, train.x[idx])
            g = alpha * kl_gradient(z_t[idx], z, T) / len(idx)
            state = sgd_step(ref, backward(ref, cache, g), kd.student_sgd, state)
    for p, q in zip(student.parameters(), ref.parameters()):
        assert np.array_equal(p, q)
    assert all(r.total_loss == pytest.approx(alpha * r.kl_loss, rel=1e-12) for r in rows)


def test_gamma_zero_ignores_ranking_settings(small_data, small_teacher):
    a = with_weights(SMALL, gamma=0.0)
    b = dataclasses.replace(a, ranking=RankingConfig(steepness=7.0, form="form3", subset=Subset.parse("top:60")))
    sa, _ = distill_student(a, small_teacher, small_data)
    sb, _ = distill_student(b, small_teacher, small_data)
    for p, q in zip(sa.parameters(), sb.parameters()):
        assert np.array_equal(p, q)


def test_distill_does_not_touch_teacher(small_data, small_teacher):
    before = [p.copy() for p in small_teacher.parameters()]
    distill_student(SMALL, small_teacher, small_data)
    for p, q in zip(small_teacher.parameters(), before):
        assert np.array_equal(p, q)


def _self_distill(teacher, data, gamma):
    cfg = dataclasses.replace(
        SMALL,
        weights=LossWeights(alpha=1.0, beta=0.0, gamma=gamma, temperature=4.0),
        student_sgd=dataclasses.replace(SMALL.student_sgd, learning_rate=1e-3, epochs=10, weight_decay=0.0),
    )
    return distill_student(cfg, teacher, data, student=teacher.copy())[1]


def test_self_distillation_starts_at_minimum(small_data, small_teacher):
    first = _self_distill(small_teacher, small_data, gamma=1.0)[1]
    assert first.epoch == 0 and first.kl_loss <= 1e-10
    # rank loss sits at the matched-student bound: mean of -tanh(k * smallest normalized gap)^2
    zt = zscore_normalize(small_teacher.predict(small_data[1].x))
    bound = -np.mean(np.tanh(np.diff(np.sort(zt, axis=1), axis=1).min(axis=1)) ** 2)
    assert first.rk_loss <= bound + 1e-12
    assert first.mean_exact_tau == 1.0


def test_self_distillation_kl_only_is_stationary(small_data, small_teacher):
    rows = _self_distill(small_teacher, small_data, gamma=0.0)
    assert all(r.kl_loss <= 1e-10 for r in rows)


def test_rank_gradient_nonzero_at_matched_student(small_teacher, small_data):
    z = small_teacher.predict(small_data[1].x[:8])
    grad = ranking_gradient(z, z, RankingConfig())
    assert np.abs(grad).max() > 1e-3


@pytest.mark.xfail(strict=True, reason="ranking term is not stationary at the teacher; see decisions ledger")
def test_self_distillation_fixed_point_with_rank_term(small_data, small_teacher):
    rows = _self_distill(small_teacher, small_data, gamma=1.0)
    assert all(r.kl_loss <= 1e-6 for r in rows)


def test_rank_agreement_improves(small_data, small_teacher):
    _, rows = distill_student(SMALL, small_teacher, small_data)
    test_rows = [r for r in rows if r.split == "test"]
    assert test_rows[-1].mean_exact_tau > test_rows[0].mean_exact_tau
    assert test_rows[-1].rk_loss < test_rows[0].rk_loss


def test_distill_rejects_mismatched_teacher(small_data):
    wrong = init_mlp(RunConfig().teacher_arch(), 0)
    with pytest.raises(ConfigError):
        distill_student(SMALL, wrong, small_data)


def test_distill_metrics_bytes_deterministic(tmp_path, small_data, small_teacher):
    for name in ("a.csv", "b.csv"):
        _, rows = distill_student(SMALL, small_teacher, small_data)
        write_metrics(rows, tmp_path / name)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


# --- sweeps ---------------------------------------------------------------


def test_apply_axis():
    assert apply_axis(SMALL, "gamma", 2).weights.gamma == 2.0
    assert apply_axis(SMALL, "k", 3).ranking.steepness == 3.0
    assert apply_axis(SMALL, "temperature", 2).weights.temperature == 2.0
    assert str(apply_axis(SMALL, "subset", "min:30").ranking.subset) == "min:30"
    with pytest.raises(ConfigError):
        apply_axis(SMALL, "alpha", 1)


def test_single_value_sweep_equals_direct_run(small_data, small_teacher):
    (point,) = sweep(SMALL, "k", [2.0], teacher=small_teacher, data=small_data)
    _, rows = distill_student(apply_axis(SMALL, "k", 2.0), small_teacher, small_data)
    assert point.rows == rows
    assert point.final == [r for r in rows if r.split == "test"][-1]


def test_sweep_failure_names_value(small_data, small_teacher):
    # a 10% subset of 5 channels keeps one channel, which cannot form a pair
    with pytest.raises(SweepError) as info:
        sweep(SMALL, "subset", ["top:50", "top:10"], teacher=small_teacher, data=small_data)
    assert info.value.value == "top:10"
    assert "top:10" in str(info.value)


def test_sweep_rejects_empty_and_unknown(small_data, small_teacher):
    with pytest.raises(ConfigError):
        sweep(SMALL, "gamma", [], teacher=small_teacher, data=small_data)
    with pytest.raises(ConfigError):
        sweep(SMALL, "beta", [1.0], teacher=small_teacher, data=small_data)


# --- desk scale (shared teacher and cached runs from conftest) -----------------


@pytest.mark.slow
def test_default_teacher_reaches_train_accuracy(desk_teacher):
    _, rows = desk_teacher.value
    assert max(r.epoch for r in rows) <= 100
    assert final_split(rows, "train").accuracy >= 0.90


@pytest.mark.slow
def test_no_norm_runs_stay_finite(desk_run):
    for seed in STUDENT_SEEDS:
        rows = desk_run(seed, normalize=False).value
        format_metrics(rows)  # checks every row is finite and in range
        assert max(r.epoch for r in rows) == 80


GAMMAS = (0.1, 0.5, 0.9, 2.0, 4.0, 6.0)


def _sweep_means(desk_run, gamma):
    finals = [final_split(desk_run(s, gamma).value, "test") for s in STUDENT_SEEDS]
    return np.mean([f.accuracy for f in finals]), np.mean([f.mean_exact_tau for f in finals])


@pytest.mark.slow
def test_gamma_sweep_tau_beats_kd(desk_run):
    _, base_tau = _sweep_means(desk_run, 0.0)
    for gamma in GAMMAS:
        assert _sweep_means(desk_run, gamma)[1] > base_tau, gamma


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="gamma=2 mean accuracy lands 0.2 points under KD; see decisions ledger")
def test_gamma_sweep_accuracy_beats_kd(desk_run):
    base_acc, _ = _sweep_means(desk_run, 0.0)
    for gamma in GAMMAS:
        assert _sweep_means(desk_run, gamma)[0] > base_acc, gamma
