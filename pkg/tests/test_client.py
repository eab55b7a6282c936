"""Local training: pseudo labels, losses, MixUp batches, EDD counting."""

import math

import numpy as np
import pytest

from fedlsm import nn
from fedlsm.client import (ClientConfig, PseudoLabelDecision,
                           compute_class_weights, local_train,
                           loss_identified, loss_ude, loss_unknown, mixup,
                           pseudo_multi, pseudo_single, ude_batch)
from fedlsm.data import (AugmentConfig, ClientSpec, FederationConfig,
                         LabelRecord, Sample, gen_federation)
from fedlsm.errors import ConfigError
from fedlsm.uncertainty import UncertaintyPartition

LN2 = math.log(2.0)


def probe_net(m: int, scale: float = 10.0) -> nn.ModelParams:
    """Net whose logits equal scale * tanh(x), coordinate by coordinate.

    Feeding arctanh(L / scale) produces exactly the logits L, which makes
    teacher confidence controllable in tests.
    """
    return nn.ModelParams(layers=[(np.eye(m), np.zeros(m))],
                          proxies=scale * np.eye(m), proxy_bias=np.zeros(m))


def inputs_for_logits(logits, scale: float = 10.0) -> np.ndarray:
    return np.arctanh(np.asarray(logits, dtype=np.float64) / scale)


def unit_label(m, c):
    values = np.zeros(m)
    values[c] = 1.0
    return LabelRecord(values=values, known_mask=np.ones(m, dtype=bool))


def unlabeled(m):
    return LabelRecord(values=np.zeros(m), known_mask=np.zeros(m, dtype=bool))


# ------------------------------------------------------------- pseudo labels

def test_pseudo_single_confidence_gate():
    teacher = probe_net(4)
    # logits (5,0,0,0): max prob ~0.980; (2.5,0,0,0): ~0.802
    x = inputs_for_logits([[5.0, 0, 0, 0],
                           [2.5, 0, 0, 0],
                           [0, 0, 5.0, 0]])
    dec = pseudo_single(teacher, x, unknown=(0, 2), threshold=0.95)
    assert dec.kept.tolist() == [True, False, True]
    assert dec.klass.tolist() == [0, 0, 2]


def test_pseudo_single_rejects_identified_argmax():
    teacher = probe_net(4)
    x = inputs_for_logits([[5.0, 0, 0, 0]])
    dec = pseudo_single(teacher, x, unknown=(1, 2), threshold=0.95)
    assert not dec.kept[0]


def test_pseudo_multi_three_way_verdicts():
    teacher = probe_net(4)
    # sigmoids: 3 -> 0.953, -6 -> 0.0025, 0 -> 0.5
    x = inputs_for_logits([[3.0, -6.0, 0.0, 3.0]])
    dec = pseudo_multi(teacher, x, unknown=(0, 1, 2), tau_p=0.85, tau_n=5e-3)
    assert dec.state[0].tolist() == [1, -1, 0, 0]  # class 3 is identified


def test_pseudo_multi_threshold_order_checked():
    with pytest.raises(ConfigError):
        pseudo_multi(probe_net(2), np.zeros((1, 2)), (0,), tau_p=0.2,
                     tau_n=0.3)


# ------------------------------------------------------------------- losses

def test_loss_identified_single_oracle():
    logits = np.array([[0.0, 0.0]])
    loss, dlogits = loss_identified(logits, [unit_label(2, 0)], "single")
    assert loss == pytest.approx(LN2)
    assert np.allclose(dlogits, [[-0.5, 0.5]])


def test_loss_identified_single_skips_unlabeled_rows():
    logits = np.array([[3.0, -1.0], [0.0, 0.0]])
    loss, dlogits = loss_identified(logits, [unlabeled(2), unit_label(2, 1)],
                                    "single")
    assert (dlogits[0] == 0).all()
    assert loss == pytest.approx(LN2)
    loss0, dl0 = loss_identified(logits, [unlabeled(2), unlabeled(2)],
                                 "single")
    assert loss0 == 0.0 and (dl0 == 0).all()


def test_loss_identified_multi_oracle_and_weights():
    logits = np.zeros((1, 2))
    rec = LabelRecord(values=np.array([1.0, 0.0]),
                      known_mask=np.array([True, False]))
    loss, dlogits = loss_identified(logits, [rec], "multi")
    assert loss == pytest.approx(LN2)
    assert np.allclose(dlogits, [[-0.5, 0.0]])
    loss_w, dl_w = loss_identified(logits, [rec], "multi",
                                   class_weights=np.array([3.0, 1.0]))
    assert loss_w == pytest.approx(3 * LN2)
    assert np.allclose(dl_w, [[-1.5, 0.0]])


def test_loss_unknown_single_oracle_and_denominator():
    logits = np.zeros((2, 2))
    dec = PseudoLabelDecision(kept=np.array([True, False]),
                              klass=np.array([1, 0]))
    loss, dlogits = loss_unknown(logits, dec, "single")
    assert loss == pytest.approx(LN2)
    assert np.allclose(dlogits, [[0.5, -0.5], [0.0, 0.0]])
    loss2, dl2 = loss_unknown(logits, dec, "single", denom=2)
    assert loss2 == pytest.approx(LN2 / 2)
    assert np.allclose(dl2, np.asarray(dlogits) / 2)


def test_loss_unknown_single_no_kept_is_zero():
    dec = PseudoLabelDecision(kept=np.array([False]), klass=np.array([0]))
    loss, dlogits = loss_unknown(np.zeros((1, 2)), dec, "single")
    assert loss == 0.0 and (dlogits == 0).all()


def test_loss_unknown_multi_oracle():
    dec = PseudoLabelDecision(state=np.array([[1, -1, 0]], dtype=np.int8))
    loss, dlogits = loss_unknown(np.zeros((1, 3)), dec, "multi")
    assert loss == pytest.approx(2 * LN2)
    assert np.allclose(dlogits, [[-0.5, 0.5, 0.0]])


def test_loss_ude_single_oracle():
    targets = np.array([[0.3, 0.7]])
    loss, dlogits = loss_ude(np.zeros((1, 2)), targets, "single")
    assert loss == pytest.approx(LN2)
    assert np.allclose(dlogits, [[0.2, -0.2]])


def test_loss_ude_multi_respects_validity():
    targets = np.array([[0.4, 0.9]])
    valid = np.array([[True, False]])
    loss, dlogits = loss_ude(np.zeros((1, 2)), targets, "multi", valid)
    assert loss == pytest.approx(LN2)
    assert np.allclose(dlogits, [[0.1, 0.0]])


@pytest.mark.parametrize("task", ["single", "multi"])
def test_loss_gradients_match_finite_differences(task):
    rng = np.random.default_rng(5)
    params = nn.init_params([3, 6], 4, seed=1)
    batch = rng.normal(size=(3, 3))
    if task == "single":
        labels = [unit_label(4, 1), unlabeled(4), unit_label(4, 3)]
    else:
        labels = [LabelRecord(values=(rng.random(4) < 0.5).astype(float),
                              known_mask=rng.random(4) < 0.7)
                  for _ in range(3)]
        labels = [LabelRecord(values=np.where(l.known_mask, l.values, 0.0),
                              known_mask=l.known_mask) for l in labels]
    err = nn.gradcheck(params, batch,
                       lambda z: loss_identified(z, labels, task))
    assert err < 1e-5


def test_pseudo_and_mix_gradients_match_finite_differences():
    rng = np.random.default_rng(6)
    params = nn.init_params([3, 5], 3, seed=2)
    batch = rng.normal(size=(2, 3))
    dec = PseudoLabelDecision(kept=np.array([True, True]),
                              klass=np.array([2, 0]))
    assert nn.gradcheck(params, batch,
                        lambda z: loss_unknown(z, dec, "single")) < 1e-5
    state = np.array([[1, -1, 0], [0, 1, -1]], dtype=np.int8)
    dec_m = PseudoLabelDecision(state=state)
    assert nn.gradcheck(params, batch,
                        lambda z: loss_unknown(z, dec_m, "multi")) < 1e-5
    targets = rng.dirichlet(np.ones(3), size=2)
    assert nn.gradcheck(params, batch,
                        lambda z: loss_ude(z, targets, "single")) < 1e-5


# -------------------------------------------------------------------- mixup

def test_mixup_algebra():
    x, y = mixup(np.array([1.0, 0.0]), np.array([1.0, 0.0]),
                 np.array([0.0, 1.0]), np.array([0.0, 1.0]), 0.3)
    assert np.allclose(x, [0.3, 0.7])
    assert np.allclose(y, [0.3, 0.7])


def _mix_setup(task, confident_high):
    m = 3
    teacher = probe_net(m)
    if task == "single":
        high_logits = [6.0, 0.0, 0.0] if confident_high else [0.0, 0.0, 0.0]
    else:
        # class 0 known on the low member; teacher: positive class 1,
        # abstain class 2 on both members
        high_logits = [0.0, 6.0, 0.0]
    samples = [
        Sample(x=inputs_for_logits([0.0, 6.0, 0.0]),
               true_label=np.eye(m)[1],
               label=unit_label(m, 1) if task == "single" else
               LabelRecord(values=np.array([1.0, 0.0, 0.0]),
                           known_mask=np.array([True, False, False]))),
        Sample(x=inputs_for_logits(high_logits),
               true_label=np.eye(m)[0],
               label=unlabeled(m)),
    ]
    part = UncertaintyPartition(low=np.array([0]), mid=np.array([]),
                                high=np.array([1]),
                                entropy=np.zeros(2))
    spec = ClientSpec(client_id=0, identified=(0,), unknown=(1, 2),
                      n_samples=2)
    cfg = ClientConfig(task=task, ude_batch_size=3, mixup_alpha=0.4,
                       augment=AugmentConfig(sigma_weak=1e-4))
    return samples, part, teacher, spec, cfg


def test_ude_batch_single_builds_convex_pairs():
    samples, part, teacher, spec, cfg = _mix_setup("single", True)
    xs, ys, valid = ude_batch(samples, part, teacher, spec, cfg,
                              np.random.default_rng(0))
    assert xs.shape[0] == 3 and valid is None
    for y in ys:
        assert y.sum() == pytest.approx(1.0)
        # mix of one-hot class 1 (labeled low) and pseudo class 0 (high)
        assert y[2] == 0.0
        assert 0.0 <= y[0] <= 1.0


def test_ude_batch_single_rejects_unconfident_members():
    samples, part, teacher, spec, cfg = _mix_setup("single", False)
    xs, ys, valid = ude_batch(samples, part, teacher, spec, cfg,
                              np.random.default_rng(0))
    assert xs.shape[0] == 0


def test_ude_batch_multi_validity_mask():
    samples, part, teacher, spec, cfg = _mix_setup("multi", True)
    xs, ys, valid = ude_batch(samples, part, teacher, spec, cfg,
                              np.random.default_rng(0))
    assert xs.shape[0] == 3
    # known class 0 only on the low member; the high member must earn it
    # from the teacher, which says positive class 1 and abstain class 2
    assert valid[:, 1].all()
    assert not valid[:, 2].any()


def test_ude_batch_deterministic():
    samples, part, teacher, spec, cfg = _mix_setup("single", True)
    a = ude_batch(samples, part, teacher, spec, cfg, np.random.default_rng(7))
    b = ude_batch(samples, part, teacher, spec, cfg, np.random.default_rng(7))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


# ------------------------------------------------------------- local rounds

def small_federation(task="single", seed=3):
    cfg = FederationConfig(n_clients=2, n_classes=3, classes_per_client=2,
                           feature_dim=4, samples_per_client=30, n_val=10,
                           n_test=20, task=task, seed=seed)
    return gen_federation(cfg)


def fast_cfg(task="single", **kw):
    base = dict(task=task, local_iters=4, batch_size=8, lr=3e-3,
                ude_batch_size=2)
    base.update(kw)
    return ClientConfig(**base)


def test_local_train_zero_iters_keeps_params_and_counts_labels():
    fed = small_federation()
    params = nn.init_params([4, 6], 3, seed=0)
    upd = local_train(params, fed.clients[0], fed.specs[0],
                      fast_cfg(local_iters=0), round_idx=0, seed=11)
    assert np.array_equal(upd.params.proxies, params.proxies)
    labeled = [s for s in fed.clients[0] if s.label.known_mask.any()]
    for c in fed.specs[0].identified:
        expected = sum(1 for s in labeled if np.argmax(s.label.values) == c)
        assert upd.edd[c] == expected
    for c in fed.specs[0].unknown:
        assert upd.edd[c] == 0.0


def test_local_train_deterministic():
    fed = small_federation()
    params = nn.init_params([4, 6], 3, seed=0)
    a = local_train(params, fed.clients[0], fed.specs[0], fast_cfg(),
                    round_idx=2, seed=5)
    b = local_train(params, fed.clients[0], fed.specs[0], fast_cfg(),
                    round_idx=2, seed=5)
    c = local_train(params, fed.clients[0], fed.specs[0], fast_cfg(),
                    round_idx=3, seed=5)
    assert np.array_equal(a.params.proxies, b.params.proxies)
    assert np.array_equal(a.edd, b.edd)
    assert not np.array_equal(a.params.proxies, c.params.proxies)


def test_local_train_never_reads_ground_truth():
    fed = small_federation()
    params = nn.init_params([4, 6], 3, seed=0)
    scrambled = [Sample(x=s.x, true_label=np.roll(s.true_label, 1),
                        label=s.label) for s in fed.clients[0]]
    a = local_train(params, fed.clients[0], fed.specs[0], fast_cfg(),
                    round_idx=0, seed=9)
    b = local_train(params, scrambled, fed.specs[0], fast_cfg(),
                    round_idx=0, seed=9)
    assert np.array_equal(a.params.proxies, b.params.proxies)
    assert np.array_equal(a.params.layers[0][0], b.params.layers[0][0])
    assert np.array_equal(a.edd, b.edd)


def test_local_train_counts_confident_pseudo_labels():
    fed = small_federation()
    spec, dataset = fed.specs[0], fed.clients[0]
    params = nn.init_params([4, 6], 3, seed=0)
    # threshold low enough that the untrained teacher clears it
    cfg = fast_cfg(tau=0.4, tau_l=0.05, local_iters=4, batch_size=16)
    upd = local_train(params, dataset, spec, cfg, round_idx=0, seed=1)
    unknown_counts = upd.edd[list(spec.unknown)]
    assert unknown_counts.sum() > 0
    # distinct samples only: cannot exceed the trainable pool
    assert unknown_counts.sum() <= len(dataset)
    for c in spec.identified:
        labeled = sum(1 for s in dataset if s.label.known_mask.any()
                      and np.argmax(s.label.values) == c)
        assert upd.edd[c] == labeled


def test_supervised_branch_ignores_unlabeled_samples():
    fed = small_federation()
    spec, dataset = fed.specs[0], fed.clients[0]
    params = nn.init_params([4, 6], 3, seed=0)
    poked = [s if s.label.known_mask.any() else
             Sample(x=s.x + 1e6, true_label=s.true_label, label=s.label)
             for s in dataset]
    cfg = fast_cfg(use_pseudo=False)
    a = local_train(params, dataset, spec, cfg, round_idx=0, seed=2)
    b = local_train(params, poked, spec, cfg, round_idx=0, seed=2)
    assert np.array_equal(a.params.proxies, b.params.proxies)
    assert a.stats["kept_pseudo"] == 0


def test_local_train_rejects_empty_dataset():
    params = nn.init_params([4, 6], 3, seed=0)
    spec = ClientSpec(client_id=0, identified=(0,), unknown=(1, 2),
                      n_samples=0)
    with pytest.raises(ConfigError, match="empty"):
        local_train(params, [], spec, fast_cfg(), round_idx=0, seed=0)


def test_client_config_validation():
    with pytest.raises(ConfigError, match="tau_l"):
        ClientConfig(tau=0.5, tau_l=0.6).validate()
    with pytest.raises(ConfigError, match="tau_n"):
        ClientConfig(tau_n=0.9, tau_p=0.8).validate()
    with pytest.raises(ConfigError, match="ude_batch_size"):
        ClientConfig(ude_batch_size=128, batch_size=64).validate()
    with pytest.raises(ConfigError, match="frac"):
        ClientConfig(frac_l=0.8, frac_h=0.3).validate()
    with pytest.raises(ConfigError, match="pseudo_loss_norm"):
        ClientConfig(pseudo_loss_norm="mean").validate()


def test_compute_class_weights_multi():
    m = 3
    spec = ClientSpec(client_id=0, identified=(0, 1), unknown=(2,),
                      n_samples=4)
    # class 0: 1 pos / 3 neg -> 3.0; class 1: 3 pos / 1 neg -> clip at 1.0
    samples = []
    for vals in ([1, 1, 0], [0, 1, 0], [0, 1, 0], [0, 0, 0]):
        values = np.array(vals, dtype=np.float64)
        samples.append(Sample(x=np.zeros(2), true_label=values,
                              label=LabelRecord(
                                  values=np.where([1, 1, 0], values, 0.0),
                                  known_mask=np.array([True, True, False]))))
    w = compute_class_weights(samples, spec)
    assert w[0] == pytest.approx(3.0)
    assert w[1] == pytest.approx(1.0)
    assert w[2] == 1.0
