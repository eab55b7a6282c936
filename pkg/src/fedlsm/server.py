"""Server side: aggregation and the round loop.

Feature-extractor layers aggregate by sample-count-weighted averaging.
Classification proxies aggregate per class, weighted by each client's
estimated class distribution, so clients that actually saw (or
confidently pseudo-labeled) a class dominate its proxy.  Classes nobody
counted fall back to sample-count weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .client import ClientConfig, ClientUpdate, local_train
from .data import Federation, unmask_labels
from .errors import AggregationError, ConfigError
from .metrics import EvalResult, macro_metrics

MODES = ("fedlsm", "fedavg_masked", "fedavg_full")
PROXY_MODES = ("awpa", "fedavg")


@dataclass
class RoundReport:
    round: int
    metrics: EvalResult
    lr: float
    client_stats: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"round": self.round, "lr": self.lr,
                **self.metrics.as_dict(),
                "client_stats": self.client_stats}


@dataclass
class FederationResult:
    params: nn.ModelParams
    reports: list


def _check_updates(updates: list[ClientUpdate]) -> list[ClientUpdate]:
    if not updates:
        raise AggregationError("no client updates to aggregate")
    updates = sorted(updates, key=lambda u: u.client_id)
    ref = updates[0].params
    for u in updates:
        if u.params.layer_dims != ref.layer_dims \
                or u.params.num_classes != ref.num_classes:
            raise AggregationError(
                f"client {u.client_id}: model shape "
                f"{u.params.layer_dims}/{u.params.num_classes} does not match "
                f"{ref.layer_dims}/{ref.num_classes}")
        if u.n_samples <= 0:
            raise AggregationError(
                f"client {u.client_id}: non-positive sample count "
                f"{u.n_samples}")
        edd = np.asarray(u.edd, dtype=np.float64)
        if edd.shape != (ref.num_classes,):
            raise AggregationError(
                f"client {u.client_id}: class-count vector has shape "
                f"{edd.shape}, expected ({ref.num_classes},)")
        if not np.all(np.isfinite(edd)) or np.any(edd < 0):
            raise AggregationError(
                f"client {u.client_id}: class counts must be finite and "
                "non-negative")
    return updates


def sample_weights(updates: list[ClientUpdate]) -> np.ndarray:
    counts = np.array([u.n_samples for u in updates], dtype=np.float64)
    return counts / counts.sum()


def aggregate_features(updates: list[ClientUpdate]) -> list:
    """Sample-count-weighted average of the hidden layers."""
    updates = _check_updates(updates)
    w = sample_weights(updates)
    layers = []
    for li in range(len(updates[0].params.layers)):
        w_sum = sum(wk * u.params.layers[li][0] for wk, u in zip(w, updates))
        b_sum = sum(wk * u.params.layers[li][1] for wk, u in zip(w, updates))
        layers.append((w_sum, b_sum))
    return layers


def aggregate_proxies(updates: list[ClientUpdate], mode: str = "awpa"):
    """Per-class weighted average of proxies -> (proxies, proxy_bias).

    "awpa" weights client k's row for class c by its count for c over the
    total count for c; a class with total count zero falls back to
    sample-count weights.  "fedavg" uses sample-count weights throughout.
    """
    if mode not in PROXY_MODES:
        raise ConfigError(f"unknown proxy aggregation '{mode}'")
    updates = _check_updates(updates)
    w_samples = sample_weights(updates)
    m = updates[0].params.num_classes
    proxy_stack = np.stack([u.params.proxies for u in updates])  # (K, M, F)
    bias_stack = np.stack([u.params.proxy_bias for u in updates])  # (K, M)
    if mode == "fedavg":
        weights = np.tile(w_samples[:, None], (1, m))  # (K, M)
    else:
        q = np.stack([np.asarray(u.edd, dtype=np.float64) for u in updates])
        totals = q.sum(axis=0)  # (M,)
        weights = np.empty_like(q)
        for c in range(m):
            if totals[c] > 0:
                weights[:, c] = q[:, c] / totals[c]
            else:
                weights[:, c] = w_samples
    proxies = np.einsum("km,kmf->mf", weights, proxy_stack)
    proxy_bias = (weights * bias_stack).sum(axis=0)
    return proxies, proxy_bias


def aggregate(updates: list[ClientUpdate],
              proxy_mode: str = "awpa") -> nn.ModelParams:
    layers = aggregate_features(updates)
    proxies, proxy_bias = aggregate_proxies(updates, proxy_mode)
    return nn.ModelParams(layers=layers, proxies=proxies,
                          proxy_bias=proxy_bias)


def evaluate(params: nn.ModelParams, dataset, task: str) -> EvalResult:
    if not dataset:
        raise ConfigError("empty evaluation set")
    xs = np.stack([s.x for s in dataset])
    logits = nn.forward(params, xs).logits
    probs = nn.softmax(logits) if task == "single" else nn.sigmoid(logits)
    true = np.stack([s.true_label for s in dataset])
    return macro_metrics(probs, true, task)


def run_round(params: nn.ModelParams, fed: Federation, datasets: list,
              cfg: ClientConfig, round_idx: int, seed: int,
              proxy_mode: str) -> tuple[nn.ModelParams, list[ClientUpdate]]:
    """Broadcast, train every client, aggregate.  Returns the new global
    model and the raw updates (for reporting)."""
    updates = []
    for spec, dataset in zip(fed.specs, datasets):
        updates.append(local_train(params, dataset, spec, cfg, round_idx,
                                   seed))
    return aggregate(updates, proxy_mode), updates


def run_federation(fed: Federation, client_cfg: ClientConfig, *, rounds: int,
                   mode: str, seed: int, hidden_dims=(32, 32),
                   proxy_mode: str | None = None,
                   on_round=None) -> FederationResult:
    """Full training run in one of three modes.

    fedlsm        pseudo-label training, class-weighted proxy aggregation
    fedavg_masked supervised on the masked labels only, plain averaging
    fedavg_full   supervised with all masking removed (upper reference)

    All modes consume the same federation object, so data is identical
    and results are comparable.  `on_round` is called with each
    RoundReport as it is produced.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode '{mode}', expected one of {MODES}")
    if rounds < 1:
        raise ConfigError("rounds must be >= 1")
    task = fed.config.task
    if client_cfg.task != task:
        client_cfg = replace(client_cfg, task=task)

    if mode == "fedlsm":
        datasets = fed.clients
        cfg = replace(client_cfg, use_pseudo=True)
        default_proxy = "awpa"
    elif mode == "fedavg_masked":
        datasets = fed.clients
        cfg = replace(client_cfg, use_pseudo=False)
        default_proxy = "fedavg"
    else:
        datasets = [unmask_labels(c) for c in fed.clients]
        cfg = replace(client_cfg, use_pseudo=False)
        default_proxy = "fedavg"
    proxy = proxy_mode or default_proxy

    dims = [fed.config.feature_dim, *hidden_dims]
    params = nn.init_params(dims, fed.config.n_classes, seed=seed)
    reports = []
    for r in range(rounds):
        params, updates = run_round(params, fed, datasets, cfg, r, seed,
                                    proxy)
        ev = evaluate(params, fed.test, task)
        lr_t = cfg.lr / (1.0 + cfg.lr_decay * r)
        report = RoundReport(round=r, metrics=ev, lr=lr_t,
                             client_stats=[dict(u.stats,
                                                client_id=u.client_id,
                                                n_samples=u.n_samples)
                                           for u in updates])
        reports.append(report)
        if on_round is not None:
            on_round(report, params)
    return FederationResult(params=params, reports=reports)
