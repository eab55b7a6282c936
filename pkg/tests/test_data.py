"""Synthetic federations, label masking, augmentation, CSV round trips."""

import numpy as np
import pytest

from fedlsm.data import (AugmentConfig, ClientSpec, FederationConfig,
                         LabelRecord, Sample, augment_strong, augment_weak,
                         gen_federation, load_csv, mask_labels, save_csv,
                         unmask_labels)
from fedlsm.errors import ConfigError, ParseError


def tiny_cfg(**kw):
    base = dict(n_clients=3, n_classes=5, classes_per_client=3, feature_dim=8,
                samples_per_client=40, n_val=20, n_test=30, seed=1)
    base.update(kw)
    return FederationConfig(**base)


def test_federation_shapes_and_coverage():
    cfg = tiny_cfg()
    fed = gen_federation(cfg)
    assert len(fed.clients) == 3
    assert all(len(c) == 40 for c in fed.clients)
    assert len(fed.val) == 20 and len(fed.test) == 30
    covered = set()
    for spec in fed.specs:
        assert len(spec.identified) == 3
        assert set(spec.identified) | set(spec.unknown) == set(range(5))
        assert not set(spec.identified) & set(spec.unknown)
        covered.update(spec.identified)
    assert covered == set(range(5))


def test_federation_deterministic_per_seed():
    a = gen_federation(tiny_cfg(seed=5))
    b = gen_federation(tiny_cfg(seed=5))
    c = gen_federation(tiny_cfg(seed=6))
    assert np.array_equal(a.clients[0][0].x, b.clients[0][0].x)
    assert np.array_equal(a.test[3].true_label, b.test[3].true_label)
    assert not np.array_equal(a.clients[0][0].x, c.clients[0][0].x)


def test_coverage_unsatisfiable():
    with pytest.raises(ConfigError, match="coverage"):
        gen_federation(tiny_cfg(n_clients=2, classes_per_client=2,
                                n_classes=5))


def test_single_label_masking_rules():
    fed = gen_federation(tiny_cfg())
    for spec, dataset in zip(fed.specs, fed.clients):
        for s in dataset:
            true_class = int(np.argmax(s.true_label))
            if true_class in spec.identified:
                assert s.label.known_mask.all()
                assert np.array_equal(s.label.values, s.true_label)
            else:
                assert not s.label.known_mask.any()
                assert (s.label.values == 0).all()


def test_multi_label_masking_rules():
    fed = gen_federation(tiny_cfg(task="multi"))
    for spec, dataset in zip(fed.specs, fed.clients):
        ident = np.zeros(5, dtype=bool)
        ident[list(spec.identified)] = True
        for s in dataset:
            assert np.array_equal(s.label.known_mask, ident)
            assert np.array_equal(s.label.values[ident], s.true_label[ident])
            assert (s.label.values[~ident] == 0).all()


def test_mask_oracle_case():
    spec = ClientSpec(client_id=0, identified=(0, 2), unknown=(1, 3),
                      n_samples=1)
    truth = np.array([1.0, 1.0, 0.0, 1.0])
    sample = Sample(x=np.zeros(2), true_label=truth,
                    label=LabelRecord(values=truth.copy(),
                                      known_mask=np.ones(4, dtype=bool)))
    out = mask_labels([sample], spec, "multi")[0]
    assert np.array_equal(out.label.values, [1.0, 0.0, 0.0, 0.0])
    assert np.array_equal(out.label.known_mask, [True, False, True, False])


def test_mask_labels_does_not_mutate_input():
    spec = ClientSpec(client_id=0, identified=(0,), unknown=(1,), n_samples=1)
    truth = np.array([0.0, 1.0])
    sample = Sample(x=np.zeros(2), true_label=truth,
                    label=LabelRecord(values=truth.copy(),
                                      known_mask=np.ones(2, dtype=bool)))
    masked = mask_labels([sample], spec, "multi")[0]
    assert sample.label.known_mask.all()
    assert np.array_equal(sample.label.values, truth)
    masked.label.values[0] = 7.0
    assert sample.label.values[0] == 0.0


def test_unmask_restores_full_labels():
    fed = gen_federation(tiny_cfg())
    restored = unmask_labels(fed.clients[0])
    for s in restored:
        assert s.label.known_mask.all()
        assert np.array_equal(s.label.values, s.true_label)


def test_single_label_cluster_separation():
    cfg = tiny_cfg(n_classes=3, classes_per_client=2, cluster_sep=6.0,
                   n_test=1500, feature_dim=8)
    fed = gen_federation(cfg)
    xs = np.stack([s.x for s in fed.test])
    classes = np.array([int(np.argmax(s.true_label)) for s in fed.test])
    means = np.stack([xs[classes == c].mean(axis=0) for c in range(3)])
    for a in range(3):
        for b in range(a + 1, 3):
            dist = np.linalg.norm(means[a] - means[b])
            assert dist == pytest.approx(6.0, abs=0.5)


def test_multi_label_positive_rate():
    cfg = tiny_cfg(task="multi", positive_rate=0.3, n_test=2000)
    fed = gen_federation(cfg)
    truths = np.stack([s.true_label for s in fed.test])
    rate = truths.mean()
    assert 0.2 < rate < 0.4


def test_augment_determinism_and_scale():
    x = np.linspace(-1, 1, 10)
    cfg = AugmentConfig()
    w1 = augment_weak(x, seed=3, cfg=cfg)
    w2 = augment_weak(x, seed=3, cfg=cfg)
    assert np.array_equal(w1, w2)
    assert np.linalg.norm(w1 - x) < 0.5
    s1 = augment_strong(x, seed=3, cfg=cfg)
    s2 = augment_strong(x, seed=4, cfg=cfg)
    assert not np.array_equal(s1, s2)
    assert np.linalg.norm(s1 - x) > np.linalg.norm(w1 - x)


def test_csv_roundtrip(tmp_path):
    fed = gen_federation(tiny_cfg())
    path = tmp_path / "client0.csv"
    save_csv(fed.clients[0], str(path))
    loaded = load_csv(str(path))
    assert len(loaded) == len(fed.clients[0])
    for a, b in zip(fed.clients[0], loaded):
        assert np.array_equal(a.x, b.x)  # repr round-trips floats exactly
        assert np.array_equal(a.label.values, b.label.values)
        assert np.array_equal(a.label.known_mask, b.label.known_mask)
        assert np.array_equal(a.true_label, b.true_label)


def test_csv_errors_name_the_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("x0,y0,mask0,true0\n0.5,1,1,1\n0.5,1,1\n")
    with pytest.raises(ParseError, match=r"bad\.csv:3"):
        load_csv(str(path))
    path.write_text("x0,y0,mask0,true0\nnotafloat,1,1,1\n")
    with pytest.raises(ParseError, match=r"bad\.csv:2"):
        load_csv(str(path))
    path.write_text("a,b\n")
    with pytest.raises(ParseError, match="header"):
        load_csv(str(path))


def test_csv_empty_file(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    assert load_csv(str(path)) == []


def test_federation_config_validation():
    with pytest.raises(ConfigError, match="n_clients"):
        tiny_cfg(n_clients=1).validate()
    with pytest.raises(ConfigError, match="task"):
        tiny_cfg(task="triple").validate()
    with pytest.raises(ConfigError, match="classes_per_client"):
        tiny_cfg(classes_per_client=9).validate()
