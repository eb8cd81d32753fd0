import math
import re

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from rotadapt.core import ConfigError, DatasetSplit, InputError, LossWeights, NumericFault, Pool, TrainConfig
from rotadapt.models import ModelSpec, build_model
from rotadapt.trainer import PoolCycler, evaluate, lr_at, sgd_step, train_stage1

from conftest import random_pool

SPEC8 = ModelSpec(num_classes=3, image_size=8, width=4)


def test_lr_schedule_endpoints():
    assert lr_at(0.0, 0.01) == 0.01
    oracle = mpmath.mpf("0.01") / mpmath.power(11, mpmath.mpf("0.75"))
    assert abs(lr_at(1.0, 0.01) - float(oracle)) < 1e-9
    # the commonly quoted 0.165559 is a truncation of 0.1655600...
    assert abs(lr_at(1.0, 1.0) - 0.165559) < 2e-6
    with pytest.raises(InputError):
        lr_at(1.5, 0.01)
    with pytest.raises(InputError):
        lr_at(0.5, 0.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_lr_strictly_decreasing(p1, p2):
    if p2 - p1 > 1e-9:
        assert lr_at(p1, 0.01) > lr_at(p2, 0.01)


class Scalar(torch.nn.Module):
    def __init__(self, value):
        super().__init__()
        self.w = torch.nn.Parameter(torch.tensor([value], dtype=torch.float64))

    def is_trunk_param(self, name):
        return False


def test_sgd_plain_step_and_zero_grad():
    m = Scalar(1.0)
    sgd_step(m, {"w": torch.tensor([1.0], dtype=torch.float64)}, 0.1, 0.1, 0.0, 0.0, {})
    assert m.w.item() == pytest.approx(0.9, abs=1e-15)
    m = Scalar(1.0)
    sgd_step(m, {"w": torch.zeros(1, dtype=torch.float64)}, 0.1, 0.1, 0.9, 0.0, {})
    assert m.w.item() == 1.0


def test_sgd_two_step_momentum_unrolled():
    m, buf = Scalar(0.0), {}
    g = {"w": torch.tensor([1.0], dtype=torch.float64)}
    sgd_step(m, g, 0.1, 0.1, 0.9, 0.0, buf)
    sgd_step(m, g, 0.1, 0.1, 0.9, 0.0, buf)
    # v1 = 1, v2 = 0.9 + 1 = 1.9; theta = -0.1 - 0.19
    assert m.w.item() == -0.1 * 1.0 - 0.1 * 1.9
    assert m.w.item() == pytest.approx(-0.29, abs=1e-15)


def test_sgd_weight_decay_and_missing_grad():
    m, buf = Scalar(2.0), {}
    sgd_step(m, {}, 0.1, 0.1, 0.0, 0.5, buf)
    assert m.w.item() == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_sgd_nonfinite_names_parameter():
    m = Scalar(1.0)
    with pytest.raises(NumericFault, match="w"):
        sgd_step(m, {"w": torch.tensor([float("inf")], dtype=torch.float64)}, 0.1, 0.1, 0.0, 0.0, {})
    with pytest.raises(InputError):
        sgd_step(m, {"w": torch.zeros(2, dtype=torch.float64)}, 0.1, 0.1, 0.0, 0.0, {})


def test_sgd_separate_trunk_and_head_rates():
    m = build_model(SPEC8, seed=0)
    before = {n: p.detach().clone() for n, p in m.named_parameters()}
    grads = {n: torch.ones_like(p) for n, p in m.named_parameters()}
    sgd_step(m, grads, 0.001, 0.01, 0.0, 0.0, {})
    for n, p in m.named_parameters():
        lr = 0.001 if m.is_trunk_param(n) else 0.01
        assert torch.allclose(before[n] - p.detach(), torch.full_like(p, lr))


def test_pool_cycler_covers_each_epoch():
    c = PoolCycler(10, 4, np.random.default_rng(0))
    seen = np.concatenate([c.next_indices() for _ in range(5)])
    assert sorted(seen[:10].tolist()) == list(range(10))
    assert sorted(seen[10:20].tolist()) == list(range(10))
    with pytest.raises(ConfigError):
        PoolCycler(0, 4, np.random.default_rng(0))


class ConstantClass(torch.nn.Module):
    def __init__(self, width, winner=0):
        super().__init__()
        self.width, self.winner = width, winner

    def forward(self, f):
        out = torch.zeros(f.shape[0], self.width, dtype=f.dtype)
        out[:, self.winner] = 1.0
        return out


def test_evaluate_examples():
    m = build_model(SPEC8, seed=0)
    m.class_head = ConstantClass(3)
    pool = random_pool(20, size=8)
    pool.labels[:] = 0
    assert evaluate(m, pool) == 1.0
    pool = random_pool(30, size=8, seed=3)
    doubled = Pool(np.concatenate([pool.images] * 2), np.concatenate([pool.labels] * 2),
                   [f"{i}" for i in range(60)], "t")
    assert evaluate(m, pool) == evaluate(m, doubled)
    with pytest.raises(InputError):
        evaluate(m, pool.stripped())
    with pytest.raises(InputError):
        evaluate(m, pool.subset([]))


def test_evaluate_constant_model_random_labels():
    spec = ModelSpec(arch="tiny", num_classes=4, image_size=1, channels=1, width=2)
    m = build_model(spec, seed=0)
    m.class_head = ConstantClass(4, winner=2)
    rng = np.random.default_rng(0)
    n = 100_000
    pool = Pool(np.zeros((n, 1, 1, 1), np.float32), rng.integers(0, 4, n), [str(i) for i in range(n)], "t")
    acc = evaluate(m, pool, batch_size=20_000)
    assert 0.245 <= acc <= 0.255


def test_evaluate_restores_mode():
    m = build_model(SPEC8, seed=0).train()
    evaluate(m, random_pool(5, size=8))
    assert m.training


# ----------------------------------------------------------------- training loop

def small_split(seed=0):
    return DatasetSplit(random_pool(24, size=8, seed=seed, domain="source"),
                        random_pool(6, size=8, seed=seed + 1, domain="lab"),
                        random_pool(30, size=8, seed=seed + 2, domain="unl", labeled=False),
                        random_pool(9, size=8, seed=seed + 3, domain="val"),
                        random_pool(9, size=8, seed=seed + 4, domain="test"))


def cfg(**kw):
    base = dict(total_iterations=6, eval_every=2, batch_source=8, batch_labeled=4, batch_unlabeled=8,
                lr_trunk=0.05, lr_heads=0.05, seed=0)
    weights = kw.pop("weights", LossWeights(1, 1, 1, 0.01, 0.01))
    return TrainConfig(weights=weights, **{**base, **kw})


def test_uda_source_only_never_reads_target_pools():
    split = small_split()
    train_stage1(cfg(weights=LossWeights(1, 0, 0, 0, 0)), split, build_model(SPEC8, 0), log=lambda s: None)
    assert split.unlabeled_target.image_reads == 0 and split.unlabeled_target.label_reads == 0
    assert split.labeled_target.image_reads == 0 and split.labeled_target.label_reads == 0
    assert split.test_target.image_reads == 0
    assert split.labeled_source.image_reads == 6


def test_unlabeled_labels_never_read():
    split = small_split()
    split.unlabeled_target = random_pool(30, size=8, seed=7, domain="unl")  # labels present but hidden
    train_stage1(cfg(), split, build_model(SPEC8, 0), log=lambda s: None)
    assert split.unlabeled_target.image_reads == 6 and split.unlabeled_target.label_reads == 0


def test_zero_iterations_returns_initial_model():
    model = build_model(SPEC8, 0)
    lines = []
    ck = train_stage1(cfg(total_iterations=0), small_split(), model, log=lines.append)
    assert ck.iteration == 0 and lines == [f"val iter=0 acc={ck.val_accuracy:.6g}"]
    for k, v in model.state_dict().items():
        assert np.array_equal(ck.state[k], v.numpy())


def test_best_checkpoint_and_final_evaluation(tmp_path):
    lines = []
    ck = train_stage1(cfg(total_iterations=5, eval_every=2), small_split(), build_model(SPEC8, 0),
                      out=tmp_path / "best", log=lines.append)
    vals = [(int(m.group(1)), float(m.group(2))) for m in
            (re.match(r"val iter=(\d+) acc=(\S+)", ln) for ln in lines) if m]
    assert [t for t, _ in vals] == [2, 4, 5]
    assert ck.val_accuracy == max(a for _, a in ck.extra["val_history"])
    first_best = next(t for t, a in ck.extra["val_history"] if a == ck.val_accuracy)
    assert ck.iteration == first_best
    assert (tmp_path / "best.ckpt").is_file() and (tmp_path / "best.meta.json").is_file()
    loss_lines = [ln for ln in lines if ln.startswith("iter=")]
    assert len(loss_lines) == 5


def test_training_is_deterministic():
    runs = [train_stage1(cfg(), small_split(), build_model(SPEC8, 0), log=lambda s: None) for _ in range(2)]
    assert runs[0].weights_blob() == runs[1].weights_blob()
    assert runs[0].extra == runs[1].extra


def test_empty_required_pool_is_config_error():
    split = small_split()
    split.labeled_target = split.labeled_target.subset([])
    model = build_model(SPEC8, 0)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    with pytest.raises(ConfigError):
        train_stage1(cfg(), split, model, log=lambda s: None)
    assert all(torch.equal(v, before[k]) for k, v in model.state_dict().items())
    split = small_split()
    split.unlabeled_target = split.unlabeled_target.subset([])
    with pytest.raises(ConfigError):
        train_stage1(cfg(), split, build_model(SPEC8, 0), log=lambda s: None)
    # UDA with an empty labeled target pool is fine
    split = small_split()
    split.labeled_target = split.labeled_target.subset([])
    train_stage1(cfg(weights=LossWeights(0.5, 0, 1, 0.01, 0.01)), split, build_model(SPEC8, 0), log=lambda s: None)


def test_pretext_head_size_checked():
    with pytest.raises(ConfigError):
        train_stage1(cfg(), small_split(), build_model(ModelSpec(num_classes=3, image_size=8, width=4,
                                                                pretext_classes=5), 0), log=lambda s: None)
    with pytest.raises(ConfigError):
        train_stage1(cfg(pretext="jigsaw", jigsaw_grid=3), small_split(), build_model(SPEC8, 0), log=lambda s: None)


def test_jigsaw_training_runs():
    spec = ModelSpec(num_classes=3, image_size=8, width=4, pretext_classes=6)
    ck = train_stage1(cfg(pretext="jigsaw", jigsaw_grid=2, jigsaw_permutations=6), small_split(),
                      build_model(spec, 0), log=lambda s: None)
    assert ck.extra["final_iteration"] == 6


def test_iteration_one_loss_sanity_anchor():
    model = build_model(SPEC8, 0)
    with torch.no_grad():
        for head in (model.class_head, model.pretext_head):
            head.weight.zero_()
            head.bias.zero_()
    lines = []
    w = LossWeights(1.0, 1.0, 1.0, 0.01, 0.0)
    train_stage1(cfg(weights=w, total_iterations=2), small_split(), model, log=lines.append)
    total = float(re.search(r"total=(\S+)", lines[0]).group(1))
    C = 3
    expected = w.lambda_s * math.log(C) + w.lambda_t * math.log(C) + w.lambda_ssl * math.log(4) + \
        w.lambda_ent * math.log(C)
    assert abs(total - expected) / expected < 0.02


class NaNAfter(torch.nn.Module):
    def __init__(self, inner, calls):
        super().__init__()
        self.inner, self.calls = inner, calls

    def forward(self, x):
        self.calls -= 1
        out = self.inner(x)
        return out * float("nan") if self.calls < 0 else out


def test_numeric_fault_keeps_last_good_checkpoint():
    model = build_model(SPEC8, 0)
    # a training step does 1 class forward with these weights; validation does 1 more
    model.class_head = NaNAfter(model.class_head, calls=4)
    with pytest.raises(NumericFault) as info:
        train_stage1(cfg(weights=LossWeights(1, 0, 0, 0, 0), eval_every=1), small_split(), model,
                     log=lambda s: None)
    assert info.value.checkpoint is not None and info.value.checkpoint.iteration >= 1
    assert "iteration" in str(info.value)
