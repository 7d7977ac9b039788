import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_batch, make_model
from drm.batching import concat_batches
from drm.losses import LossWeights, NonFiniteLossError, contrastive_loss, loss_terms, total_loss
from drm.training import TrainConfig, split_views, two_view_augment
from oracles import gradient_rel_error


def _unit(x):
    return F.normalize(torch.as_tensor(x, dtype=torch.float64), dim=-1)


def _reference_contrastive(reps, labels, tau):
    """Plain loop over anchors and positives."""
    reps = np.asarray(reps)
    n = len(labels)
    anchors = []
    for a in range(n):
        pos = [b for b in range(n) if b != a and labels[b] == labels[a]]
        if not pos:
            continue
        denom = sum(math.exp(reps[a] @ reps[b] / tau) for b in range(n) if b != a)
        anchors.append(np.mean([-math.log(math.exp(reps[a] @ reps[p] / tau) / denom) for p in pos]))
    return float(np.mean(anchors))


def test_two_identical_reps_give_zero():
    x = _unit([[1.0, 0.0, 0.0]] * 2)
    assert float(contrastive_loss(x, torch.tensor([0, 0]), 1.0)) == pytest.approx(0.0, abs=1e-15)


def test_three_point_example():
    x = _unit([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
    labels = torch.tensor([0, 0, 1])
    # anchors 0 and 1 each see their twin at +1 and the negative at -1; anchor 2 has no positive
    expected = math.log(1 + math.exp(-2))
    assert expected == pytest.approx(0.1269, abs=1e-4)
    assert float(contrastive_loss(x, labels, 1.0)) == pytest.approx(expected, abs=1e-12)


def test_no_positive_rejected():
    with pytest.raises(ValueError):
        contrastive_loss(_unit(np.eye(3)), torch.tensor([0, 1, 2]), 0.5)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000), n=st.integers(2, 12), tau=st.floats(0.05, 2.0))
def test_matches_reference_nonnegative_and_invariant(seed, n, tau):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, size=n)
    labels[1] = labels[0]  # at least one positive pair
    x = _unit(rng.standard_normal((n, 5)))
    lab = torch.as_tensor(labels)
    loss = float(contrastive_loss(x, lab, tau))
    assert loss >= 0
    assert loss == pytest.approx(_reference_contrastive(x.numpy(), labels.tolist(), tau), rel=1e-9, abs=1e-12)
    perm = torch.as_tensor(rng.permutation(n))
    assert float(contrastive_loss(x[perm], lab[perm], tau)) == pytest.approx(loss, rel=1e-9, abs=1e-12)
    q, _ = torch.linalg.qr(torch.as_tensor(rng.standard_normal((5, 5))))
    assert float(contrastive_loss(x @ q, lab, tau)) == pytest.approx(loss, rel=1e-9, abs=1e-12)


def test_lower_temperature_widens_hard_easy_gap():
    a = _unit([[1.0, 0.0], [0.9, 0.1]])
    hard = torch.cat([a, _unit([[0.95, 0.05]])])
    easy = torch.cat([a, _unit([[-1.0, 0.0]])])
    labels = torch.tensor([0, 0, 1])
    gaps = [float(contrastive_loss(hard, labels, t) - contrastive_loss(easy, labels, t)) for t in (1.0, 0.5, 0.2)]
    assert gaps[0] < gaps[1] < gaps[2]


def test_contrastive_gradient(rng):
    raw = torch.randn(6, 4, dtype=torch.float64, requires_grad=True)
    labels = torch.tensor([0, 0, 1, 1, 2, 0])
    err = gradient_rel_error(lambda: contrastive_loss(F.normalize(raw, dim=-1), labels, 0.2), [raw], rng, 12)
    assert err < 1e-3


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(relation=-1)
    with pytest.raises(ValueError):
        LossWeights(tau_p=0)
    assert LossWeights().to_json() == {"relation": 3.0, "entity": 0.5, "predicate": 0.1, "triplet": 0.1,
                                       "tau_p": 0.2, "tau_t": 0.1}


def _terms():
    return {k: torch.tensor(v, dtype=torch.float64) for k, v in
            {"L_e": 1.3, "L_r": 0.7, "L_p": 2.2, "L_t": 1.9}.items()}


def test_all_zero_weights_give_zero():
    loss, parts = total_loss(_terms(), LossWeights(0, 0, 0, 0))
    assert float(loss) == 0.0 and parts["L"] == 0.0


def test_relation_only_equals_relation_term():
    loss, _ = total_loss(_terms(), LossWeights(1, 0, 0, 0))
    assert float(loss) == pytest.approx(0.7, abs=0)


def test_default_weights_weighted_sum():
    loss, parts = total_loss(_terms(), LossWeights())
    expected = 3 * 0.7 + 0.5 * 1.3 + 0.1 * 2.2 + 0.1 * 1.9
    assert float(loss) == pytest.approx(expected, abs=1e-6)
    assert parts["L_r"] == pytest.approx(0.7)


def test_nan_term_named():
    terms = _terms()
    terms["L_t"] = torch.tensor(float("nan"))
    with pytest.raises(NonFiniteLossError, match="L_t") as exc:
        total_loss(terms, LossWeights())
    assert exc.value.term == "L_t"


def test_terms_match_independent_computation(tiny_model_cfg, tiny_tables, tiny_dataset):
    model = make_model(tiny_model_cfg, tiny_tables)
    batch = make_batch(tiny_dataset, tiny_tables, n=4)
    a, b = two_view_augment(batch, 3)
    out_a, out_b = split_views(model(concat_batches(a, b), triplet_labels=None), batch)
    w = LossWeights()
    terms = loss_terms(model, out_a, out_b, batch, w)
    rel = batch.rel_pos
    l_r = (F.cross_entropy(out_a["rel_logits"][rel], batch.rel_labels)
           + F.cross_entropy(out_b["rel_logits"][rel], batch.rel_labels)) / 2
    torch.testing.assert_close(terms["L_r"], l_r)
    pa, ta = model.project(out_a["p_prime"][rel], out_a["t_prime"][rel])
    pb, tb = model.project(out_b["p_prime"][rel], out_b["t_prime"][rel])
    ref_p = _reference_contrastive(torch.cat([pa, pb]).detach().numpy(),
                                   batch.rel_labels.repeat(2).tolist(), w.tau_p)
    assert float(terms["L_p"].detach()) == pytest.approx(ref_p, rel=1e-9)
    ref_t = _reference_contrastive(torch.cat([ta, tb]).detach().numpy(),
                                   batch.triplet_labels.repeat(2).tolist(), w.tau_t)
    assert float(terms["L_t"].detach()) == pytest.approx(ref_t, rel=1e-9)


def test_total_loss_gradient_end_to_end(tiny_model_cfg, tiny_tables, tiny_dataset, rng):
    model = make_model(tiny_model_cfg, tiny_tables, seed=7)
    batch = make_batch(tiny_dataset, tiny_tables, n=3)
    a, b = two_view_augment(batch, 1, noise_std=0.05, drop_p=0.0)
    both = concat_batches(a, b)
    w = TrainConfig().weights

    def f():
        out_a, out_b = split_views(model(both, triplet_labels=both.labels), batch)
        return total_loss(loss_terms(model, out_a, out_b, batch, w), w)[0]

    params = [model.entity_encoder.in_x.weight, model.predicate_encoder.stack.layers[0].ca_x.attn.q_proj.weight,
              model.triplet_encoder.in_y.weight, model.predicate_proj.fc1.weight, model.triplet_proj.fc2.weight,
              model.relation_classifier.fc1.weight, model.entity_classifier.weight]
    assert gradient_rel_error(f, params, rng, per_tensor=3) < 1e-3
