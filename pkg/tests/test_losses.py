import math

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from rotadapt.core import InputError, LossWeights, NumericFault, TrainConfig, softmax_probs
from rotadapt.losses import (Batches, COMPONENTS, combined_objective, cross_entropy_loss, entropy_loss,
                             entropy_of_probs, kd_loss, pretext_loss, rotation_loss, supervised_losses,
                             vat_direction, vat_divergence, vat_loss)

from conftest import tiny_model

mpmath.mp.dps = 50


def val(t):
    return float(t.detach())


def mp_log_softmax(logits, k):
    logits = [mpmath.mpf(v) for v in logits]
    return logits[k] - mpmath.log(mpmath.fsum(mpmath.exp(v) for v in logits))


def test_softmax_probs_rows_and_stability():
    p = softmax_probs(np.array([[1000.0, 0.0], [0.0, 0.0]]))
    assert np.allclose(p.sum(1), 1)
    assert p[0, 0] == pytest.approx(1.0) and p[1].tolist() == [0.5, 0.5]
    with pytest.raises(NumericFault):
        softmax_probs(np.array([[np.nan, 0.0]]))


def test_ce_closed_forms():
    assert float(cross_entropy_loss(torch.zeros(3, 4), [0, 1, 2])) == pytest.approx(math.log(4), abs=1e-6)
    logits = torch.tensor([[1000.0, 0.0, 0.0]])
    assert float(cross_entropy_loss(logits, [0])) == pytest.approx(0.0, abs=1e-6)


def test_ce_high_precision_oracle():
    oracle = -mp_log_softmax([1, 2, 3], 2)
    got = float(cross_entropy_loss(torch.tensor([[1.0, 2.0, 3.0]], dtype=torch.float64), [2]))
    assert abs(got - float(oracle)) < 1e-9


def test_ce_errors():
    with pytest.raises(InputError):
        cross_entropy_loss(torch.zeros(2, 3), [0, 3])
    with pytest.raises(InputError):
        cross_entropy_loss(torch.zeros(2, 3), [0, -1])
    with pytest.raises(InputError):
        cross_entropy_loss(torch.zeros(0, 3), [])


def test_supervised_losses_hand_computed(tiny):
    x = torch.rand(4, 3, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    y = torch.tensor([0, 1, 2, 1])
    l_s, l_t = supervised_losses(tiny, x, y)
    assert float(l_t) == 0.0
    logits = tiny.forward_class(x).detach().numpy()
    oracle = -mpmath.fsum(mp_log_softmax(logits[i], int(y[i])) for i in range(4)) / 4
    assert abs(float(l_s.detach()) - float(oracle)) < 1e-9
    dup, _ = supervised_losses(tiny, torch.cat([x, x]), torch.cat([y, y]))
    assert float(dup.detach()) == pytest.approx(float(l_s.detach()), abs=1e-12)
    _, l_t2 = supervised_losses(tiny, x, y, x[:2], y[:2])
    assert float(l_t2.detach()) > 0


class ConstantHead(torch.nn.Module):
    def __init__(self, width):
        super().__init__()
        self.bias = torch.nn.Parameter(torch.zeros(width, dtype=torch.float64))

    def forward(self, f):
        return self.bias.expand(f.shape[0], -1)


def constant_model(num_classes=3):
    m = tiny_model(num_classes=num_classes)
    m.class_head = ConstantHead(num_classes)
    m.pretext_head = ConstantHead(4)
    return m


def test_rotation_loss_constant_head_is_ln4():
    m = constant_model()
    x = torch.rand(8, 3, 4, 4, dtype=torch.float64)
    assert abs(val(rotation_loss(m, x, np.random.default_rng(0)).detach()) - math.log(4)) < 1e-12


def test_rotation_loss_oracle_head_is_zero():
    m = tiny_model()
    x = torch.rand(8, 3, 4, 4, dtype=torch.float64)
    _, labels = __import__("rotadapt.pretext", fromlist=["x"]).make_rotation_batch(x, np.random.default_rng(1))

    class Cheat(torch.nn.Module):
        def forward(self, f):
            return 1000.0 * torch.nn.functional.one_hot(labels, 4).to(f.dtype)

    m.pretext_head = Cheat()
    assert val(rotation_loss(m, x, np.random.default_rng(1))) < 1e-9


def test_rotation_loss_deterministic(tiny):
    x = torch.rand(8, 3, 4, 4, dtype=torch.float64)
    a = rotation_loss(tiny, x, np.random.default_rng(3))
    b = rotation_loss(tiny, x, np.random.default_rng(3))
    assert float(a.detach()) == float(b.detach())


def test_entropy_closed_forms():
    assert float(entropy_of_probs(torch.full((1, 126), 1 / 126, dtype=torch.float64))) == pytest.approx(
        math.log(126), abs=1e-9)
    assert float(entropy_of_probs(torch.tensor([[0.0, 1.0, 0.0]]))) == 0.0
    assert float(entropy_of_probs(torch.tensor([[0.5, 0.5, 0.0, 0.0]], dtype=torch.float64))) == pytest.approx(
        math.log(2), abs=1e-12)
    m = constant_model(num_classes=126)
    x = torch.rand(2, 3, 4, 4, dtype=torch.float64)
    assert val(entropy_loss(m, x)) == pytest.approx(math.log(126), abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**31), st.floats(0.01, 50))
def test_entropy_bounds_property(C, seed, scale):
    logits = torch.from_numpy(np.random.default_rng(seed).normal(0, scale, (5, C)))
    h = entropy_of_probs(softmax_probs(logits))
    assert (h >= -1e-12).all() and (h <= math.log(C) + 1e-9).all()


def test_kd_closed_forms():
    p = torch.tensor([[0.2, 0.3, 0.5]], dtype=torch.float64)
    assert float(kd_loss(p, torch.log(p))) == pytest.approx(0.0, abs=1e-12)
    assert float(kd_loss(torch.tensor([[1.0, 0.0]]), torch.zeros(1, 2))) == pytest.approx(math.log(2), abs=1e-6)
    oracle = mpmath.mpf("0.7") * mpmath.log(mpmath.mpf("1.4")) + mpmath.mpf("0.3") * mpmath.log(mpmath.mpf("0.6"))
    got = float(kd_loss(torch.tensor([[0.7, 0.3]], dtype=torch.float64), torch.zeros(1, 2, dtype=torch.float64)))
    assert abs(got - float(oracle)) < 1e-9
    assert abs(float(oracle) - 0.082282) < 1e-6


def test_kd_rejects_bad_teacher():
    with pytest.raises(InputError):
        kd_loss(torch.tensor([[0.7, 0.2]]), torch.zeros(1, 2))
    with pytest.raises(InputError):
        kd_loss(torch.tensor([[0.5, 0.5]]), torch.zeros(1, 3))


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**31))
def test_kd_nonnegative_and_zero_iff_equal(C, seed):
    rng = np.random.default_rng(seed)
    t = softmax_probs(torch.from_numpy(rng.normal(0, 3, (4, C))))
    s = torch.from_numpy(rng.normal(0, 3, (4, C)))
    assert float(kd_loss(t, s)) >= -1e-12
    assert abs(float(kd_loss(t, torch.log(t)))) < 1e-8


def test_losses_invariant_to_batch_order(tiny):
    x = torch.rand(6, 3, 4, 4, dtype=torch.float64)
    y = torch.tensor([0, 1, 2, 0, 1, 2])
    perm = torch.tensor([5, 3, 1, 0, 2, 4])
    assert val(cross_entropy_loss(tiny.forward_class(x), y)) == pytest.approx(
        val(cross_entropy_loss(tiny.forward_class(x[perm]), y[perm])), abs=1e-12)
    assert val(entropy_loss(tiny, x)) == pytest.approx(val(entropy_loss(tiny, x[perm])), abs=1e-12)


# ----------------------------------------------------------------- VAT

class Constant(torch.nn.Module):
    def forward(self, x):
        return torch.ones(x.shape[0], 6, dtype=x.dtype) * 0.3


def test_vat_constant_output_model_is_zero():
    m = tiny_model()
    m.trunk = Constant()
    x = torch.rand(8, 3, 4, 4, dtype=torch.float64)
    assert val(vat_loss(m, x, 2.0, 1e-6, 1, np.random.default_rng(0))) < 1e-8


def test_vat_small_epsilon_limit(tiny):
    x = torch.rand(8, 3, 4, 4, dtype=torch.float64)
    assert val(vat_loss(tiny, x, 1e-6, 1e-6, 1, np.random.default_rng(0))) < 1e-6


def test_vat_perturbation_norm_and_params_untouched(tiny):
    x = torch.rand(5, 3, 4, 4, dtype=torch.float64)
    before = {k: v.clone() for k, v in tiny.state_dict().items()}
    clean = softmax_probs(tiny.forward_class(x)).detach()
    r = vat_direction(tiny, x, clean, 2.0, 1e-6, 1, np.random.default_rng(0))
    norms = r.flatten(1).norm(dim=1)
    assert torch.allclose(norms, torch.full_like(norms, 2.0), atol=1e-5)
    for k, v in tiny.state_dict().items():
        assert torch.equal(v, before[k])
    assert all(p.grad is None for p in tiny.parameters())


def test_vat_nonnegative_random_cases():
    rng = np.random.default_rng(0)
    for case in range(100):
        m = tiny_model(seed=case)
        x = torch.from_numpy(rng.random((3, 3, 4, 4)))
        eps = float(rng.uniform(0.01, 5.0))
        assert val(vat_loss(m, x, eps, 1e-6, 1, np.random.default_rng(case))) >= 0.0


def test_vat_rejects_bad_params(tiny):
    x = torch.rand(2, 3, 4, 4, dtype=torch.float64)
    with pytest.raises(InputError):
        vat_loss(tiny, x, 0.0, 1e-6, 1, np.random.default_rng(0))
    with pytest.raises(InputError):
        vat_loss(tiny, x, 1.0, 1e-6, 0, np.random.default_rng(0))


def test_vat_increases_with_epsilon(tiny):
    x = torch.rand(8, 3, 4, 4, dtype=torch.float64)
    small = val(vat_loss(tiny, x, 0.1, 1e-6, 1, np.random.default_rng(0)))
    big = val(vat_loss(tiny, x, 3.0, 1e-6, 1, np.random.default_rng(0)))
    assert big > small > 0


# ----------------------------------------------------------------- combined objective

def make_batches(seed=0, n=4):
    g = torch.Generator().manual_seed(seed)
    return Batches(torch.rand(n, 3, 4, 4, dtype=torch.float64, generator=g), torch.tensor([0, 1, 2, 0][:n]),
                   torch.rand(n, 3, 4, 4, dtype=torch.float64, generator=g), torch.tensor([2, 1, 0, 1][:n]),
                   torch.rand(n, 3, 4, 4, dtype=torch.float64, generator=g))


ALL_ON = LossWeights(1.0, 1.0, 1.0, 0.1, 0.1)
CFG = TrainConfig(total_iterations=0)


def test_report_total_matches_components(tiny):
    rep = combined_objective(tiny, make_batches(), ALL_ON, CFG, np.random.default_rng(0))
    lam = dict(zip(COMPONENTS, (1.0, 1.0, 1.0, 0.1, 0.1)))
    assert rep.total == pytest.approx(sum(lam[k] * rep.components[k] for k in COMPONENTS), abs=1e-6)
    assert all(v >= 0 for v in rep.components.values())
    line = rep.format_line(7)
    assert line.split()[0] == "iter=7"
    assert [t.split("=")[0] for t in line.split()] == ["iter", "total", "sup_s", "sup_t", "ssl", "ent", "vat"]


def test_linear_combination_example():
    from rotadapt.losses import LossReport
    comps = dict(zip(COMPONENTS, (0.5, 0.3, 0.2, 0.0, 0.0)))
    lam = dict(zip(COMPONENTS, (1, 1, 1, 0, 0)))
    assert sum(lam[k] * comps[k] for k in COMPONENTS) == pytest.approx(1.0)
    rep = LossReport(total=1.0, components=comps, weights=LossWeights(1, 1, 1, 0, 0))
    assert rep.format_line(1) == "iter=1 total=1 sup_s=0.5 sup_t=0.3 ssl=0.2 ent=0 vat=0"


def test_supervised_only_equals_st(tiny):
    b = make_batches()
    rep = combined_objective(tiny, b, LossWeights(1, 1, 0, 0, 0), CFG, np.random.default_rng(0))
    l_s, l_t = supervised_losses(tiny, b.source_x, b.source_y, b.target_x, b.target_y)
    assert rep.total == pytest.approx(val(l_s + l_t), abs=1e-12)
    assert rep.components["ssl"] == rep.components["ent"] == rep.components["vat"] == 0.0


@pytest.mark.parametrize("name", ["lambda_s", "lambda_t", "lambda_ssl", "lambda_ent", "lambda_vat"])
def test_exactly_linear_in_each_weight(tiny, name):
    b = make_batches()
    base = dict(lambda_s=1.0, lambda_t=1.0, lambda_ssl=1.0, lambda_ent=0.1, lambda_vat=0.1)
    r1 = combined_objective(tiny, b, LossWeights(**base), CFG, np.random.default_rng(4))
    r2 = combined_objective(tiny, b, LossWeights(**dict(base, **{name: 2 * base[name]})), CFG,
                            np.random.default_rng(4))
    assert r1.components == r2.components
    key = dict(zip(("lambda_s", "lambda_t", "lambda_ssl", "lambda_ent", "lambda_vat"), COMPONENTS))[name]
    assert r2.total - r1.total == pytest.approx(base[name] * r1.components[key], abs=1e-12)


def test_missing_unlabeled_batch_and_component_naming(tiny):
    b = make_batches()
    b.unlabeled_x = None
    with pytest.raises(InputError):
        combined_objective(tiny, b, ALL_ON, CFG, np.random.default_rng(0))
    b = make_batches()
    b.source_y = torch.tensor([0, 1, 2, 9])
    with pytest.raises(InputError, match="sup_source"):
        combined_objective(tiny, b, ALL_ON, CFG, np.random.default_rng(0))


def test_source_and_target_pretext_uses_source_images(tiny):
    b = make_batches()
    w = LossWeights(0, 0, 1, 0, 0)
    a = combined_objective(tiny, b, w, CFG, np.random.default_rng(0)).components["ssl"]
    c = combined_objective(tiny, b, w, CFG.replace(pretext_domains="source_and_target"),
                           np.random.default_rng(0)).components["ssl"]
    assert a != c


# ----------------------------------------------------------------- gradient checks

def _flat_grad(model):
    return torch.cat([(p.grad if p.grad is not None else torch.zeros_like(p)).flatten()
                      for p in model.parameters()])


def _fd_grad(model, fn, h=1e-6):
    out = []
    with torch.no_grad():
        for p in model.parameters():
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = float(fn())
                flat[i] = orig - h
                down = float(fn())
                flat[i] = orig
                out.append((up - down) / (2 * h))
    return torch.tensor(out, dtype=torch.float64)


def _rel_err(a, b):
    return float((a - b).norm() / max(a.norm(), b.norm(), 1e-30))


def _frozen_vat(model, x):
    with torch.no_grad():
        clean = softmax_probs(model.forward_class(x))
    r = vat_direction(model, x, clean, 2.0, 1e-6, 1, np.random.default_rng(11))
    return clean, r


@pytest.mark.parametrize("component", list(COMPONENTS) + ["total"])
def test_gradient_matches_finite_differences(component):
    model = tiny_model(seed=3)
    assert sum(p.numel() for p in model.parameters()) <= 500
    b = make_batches(seed=1)
    clean, r_adv = _frozen_vat(model, b.unlabeled_x)

    def objective():
        if component == "sup_source":
            return cross_entropy_loss(model.forward_class(b.source_x), b.source_y)
        if component == "sup_target":
            return cross_entropy_loss(model.forward_class(b.target_x), b.target_y)
        if component == "ssl":
            return pretext_loss(model, b.unlabeled_x, np.random.default_rng(5))
        if component == "ent":
            return entropy_loss(model, b.unlabeled_x)
        if component == "vat":
            return vat_divergence(model, b.unlabeled_x, clean, r_adv)
        rep = combined_objective(model, b, LossWeights(1.0, 1.0, 1.0, 0.1, 0.0), CFG, np.random.default_rng(5))
        return rep.total_tensor + 0.1 * vat_divergence(model, b.unlabeled_x, clean, r_adv)

    model.zero_grad(set_to_none=True)
    if component == "total":
        # the library objective itself, with VAT on; its VAT term treats clean probs and r_adv as constants
        rep = combined_objective(model, b, ALL_ON, CFG, np.random.default_rng(5))
        # recompute r_adv with the rng stream the objective used for VAT
        ssl_seed, vat_seed = np.random.default_rng(5).integers(0, 2**63 - 1, size=2)
        r_adv.copy_(vat_direction(model, b.unlabeled_x, clean, 2.0, 1e-6, 1, np.random.default_rng(vat_seed)))
        model.zero_grad(set_to_none=True)
        rep.total_tensor.backward()
    else:
        objective().backward()
    analytic = _flat_grad(model)
    numeric = _fd_grad(model, objective)
    assert analytic.norm() > 0
    assert _rel_err(analytic, numeric) < 1e-4
