"""One client's local round.

Training follows the teacher/student recipe: both start from the global
model, the student takes Adam steps on

    L = L_identified + L_unknown + ude_weight * L_ude

and the teacher tracks the student by exponential moving average.  The
teacher labels weakly augmented views; the student is penalized on
strongly augmented views.  Uncertain samples that the confidence filter
would otherwise ignore enter through MixUp pairs against confident ones.

All losses return (value, dloss/dlogits) so parameter gradients come from
a single backward() call per forward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import (AugmentConfig, ClientSpec, Sample, augment_strong_batch,
                   augment_weak_batch)
from .errors import ConfigError, NumericError
from .uncertainty import UncertaintyPartition, partition

UDE_RETRY_ROUNDS = 4


@dataclass
class ClientConfig:
    task: str = "single"
    # Confidence thresholds: tau/tau_l drive the single-label task,
    # tau_p/tau_n/tau_lp/tau_ln the multi-label task.  The *_l* variants
    # are the relaxed thresholds used when labeling MixUp members.
    tau: float = 0.95
    tau_l: float = 0.85
    tau_p: float = 0.85
    tau_n: float = 5e-3
    tau_lp: float = 0.7
    tau_ln: float = 1e-2
    ude_weight: float = 0.1
    ema_decay: float = 0.999
    mixup_alpha: float = 0.2
    lr: float = 1e-4
    lr_decay: float = 5e-4
    local_iters: int = 30
    batch_size: int = 64
    ude_batch_size: int = 4
    frac_l: float = 0.5
    frac_h: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    # How the single-label pseudo loss is normalized: by the number of
    # kept samples ("kept") or by all unlabeled samples in the batch
    # ("unlabeled").
    pseudo_loss_norm: str = "kept"
    # Optional per-class positive weights for the multi-label BCE; when
    # None they are derived from the client's known label counts.
    class_weights: np.ndarray | None = None
    use_pseudo: bool = True  # False: plain supervised training on known labels
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self, path: str = "client") -> None:
        if not 0.0 < self.tau_n < self.tau_p < 1.0:
            raise ConfigError(f"{path}: need 0 < tau_n < tau_p < 1")
        if not 0.0 < self.tau_ln < self.tau_lp < 1.0:
            raise ConfigError(f"{path}: need 0 < tau_ln < tau_lp < 1")
        if not self.tau_l < self.tau:
            raise ConfigError(f"{path}: need tau_l < tau")
        if not 0.0 < self.tau < 1.0:
            raise ConfigError(f"{path}: need tau in (0, 1)")
        if self.ude_batch_size > self.batch_size:
            raise ConfigError(f"{path}: need ude_batch_size <= batch_size")
        if self.ude_weight < 0:
            raise ConfigError(f"{path}: ude_weight must be >= 0")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError(f"{path}: ema_decay must be in [0, 1]")
        if self.lr <= 0:
            raise ConfigError(f"{path}: lr must be positive")
        if self.local_iters < 0 or self.batch_size < 1:
            raise ConfigError(f"{path}: bad local_iters/batch_size")
        if self.frac_l < 0 or self.frac_h < 0 or self.frac_l + self.frac_h > 1:
            raise ConfigError(f"{path}: need frac_l + frac_h <= 1")
        if self.pseudo_loss_norm not in ("kept", "unlabeled"):
            raise ConfigError(f"{path}: pseudo_loss_norm must be "
                              "'kept' or 'unlabeled'")
        if self.task not in ("single", "multi"):
            raise ConfigError(f"{path}: task must be 'single' or 'multi'")


@dataclass
class PseudoLabelDecision:
    """Teacher verdicts for a batch of weakly augmented samples.

    Single-label: kept[i] says the max teacher probability cleared the
    threshold AND the argmax class is locally unknown; klass[i] is that
    argmax.  Multi-label: state[i, c] is +1 (confident positive),
    -1 (confident negative) or 0 (abstain) for unknown classes, always 0
    for identified ones.
    """

    kept: np.ndarray | None = None
    klass: np.ndarray | None = None
    state: np.ndarray | None = None


@dataclass
class ClientUpdate:
    client_id: int
    params: nn.ModelParams
    n_samples: int
    edd: np.ndarray  # per-class count vector: labels for identified classes,
    #                  confident pseudo labels for unknown ones
    stats: dict = field(default_factory=dict)


def pseudo_single(teacher: nn.ModelParams, x_weak: np.ndarray, unknown,
                  threshold: float) -> PseudoLabelDecision:
    """Hard pseudo labels from teacher softmax on weak views.

    Accepts one vector or a (batch, d) matrix.
    """
    x = np.atleast_2d(np.asarray(x_weak, dtype=np.float64))
    probs = nn.softmax(nn.forward(teacher, x).logits)
    klass = probs.argmax(axis=1)
    in_unknown = np.isin(klass, list(unknown))
    kept = (probs.max(axis=1) >= threshold) & in_unknown
    return PseudoLabelDecision(kept=kept, klass=klass)


def pseudo_multi(teacher: nn.ModelParams, x_weak: np.ndarray, unknown,
                 tau_p: float, tau_n: float) -> PseudoLabelDecision:
    """Per-class positive/negative/abstain verdicts from teacher sigmoids."""
    if not tau_n < tau_p:
        raise ConfigError(f"need tau_n < tau_p, got {tau_n} >= {tau_p}")
    x = np.atleast_2d(np.asarray(x_weak, dtype=np.float64))
    probs = nn.sigmoid(nn.forward(teacher, x).logits)
    state = np.zeros_like(probs, dtype=np.int8)
    cols = list(unknown)
    p = probs[:, cols]
    sub = np.zeros_like(p, dtype=np.int8)
    sub[p >= tau_p] = 1
    sub[p <= tau_n] = -1
    state[:, cols] = sub
    return PseudoLabelDecision(state=state)


def loss_identified(logits: np.ndarray, labels, task: str,
                    class_weights: np.ndarray | None = None):
    """Supervised loss on known labels -> (loss, dloss/dlogits).

    Single-label: mean cross-entropy over the labeled samples; unlabeled
    rows contribute exactly zero.  Multi-label: mean weighted BCE over the
    known (sample, class) pairs; unknown pairs carry exactly zero gradient.
    """
    logits = np.asarray(logits, dtype=np.float64)
    n, m = logits.shape
    if task == "single":
        labeled = np.array([rec.known_mask.any() for rec in labels])
        count = int(labeled.sum())
        if count == 0:
            return 0.0, np.zeros_like(logits)
        log_p = nn.log_softmax(logits)
        probs = np.exp(log_p)
        dlogits = np.zeros_like(logits)
        loss = 0.0
        for i in np.flatnonzero(labeled):
            y = int(np.argmax(labels[i].values))
            loss -= log_p[i, y]
            dlogits[i] = probs[i]
            dlogits[i, y] -= 1.0
        return float(loss / count), dlogits / count

    mask = np.stack([rec.known_mask for rec in labels]).astype(np.float64)
    values = np.stack([rec.values for rec in labels])
    count = mask.sum()
    if count == 0:
        return 0.0, np.zeros_like(logits)
    w = np.ones(m) if class_weights is None else np.asarray(class_weights,
                                                            dtype=np.float64)
    sig = nn.sigmoid(logits)
    # Stable log sigma and log(1 - sigma) via softplus.
    log_sig = -np.logaddexp(0.0, -logits)
    log_one_minus = -np.logaddexp(0.0, logits)
    per_entry = -(w * values * log_sig + (1.0 - values) * log_one_minus)
    loss = float((mask * per_entry).sum() / count)
    dlogits = mask * (-w * values * (1.0 - sig) + (1.0 - values) * sig) / count
    return loss, dlogits


def loss_unknown(logits: np.ndarray, decisions: PseudoLabelDecision, task: str,
                 denom: int | None = None):
    """Pseudo-label loss on strong views -> (loss, dloss/dlogits).

    Single-label: cross-entropy against the kept hard pseudo labels,
    normalized by `denom` (kept count by default).  Multi-label: positive
    verdicts pull log(sigma) up, negative verdicts pull log(1 - sigma),
    normalized by the batch size.  Abstaining entries contribute nothing.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if task == "single":
        kept_idx = np.flatnonzero(decisions.kept)
        if denom is None:
            denom = len(kept_idx)
        if denom == 0 or len(kept_idx) == 0:
            return 0.0, np.zeros_like(logits)
        log_p = nn.log_softmax(logits)
        probs = np.exp(log_p)
        dlogits = np.zeros_like(logits)
        loss = 0.0
        for i in kept_idx:
            y = int(decisions.klass[i])
            loss -= log_p[i, y]
            dlogits[i] = probs[i]
            dlogits[i, y] -= 1.0
        return float(loss / denom), dlogits / denom

    n = logits.shape[0]
    state = decisions.state
    pos = (state == 1).astype(np.float64)
    neg = (state == -1).astype(np.float64)
    if pos.sum() + neg.sum() == 0:
        return 0.0, np.zeros_like(logits)
    sig = nn.sigmoid(logits)
    log_sig = -np.logaddexp(0.0, -logits)
    log_one_minus = -np.logaddexp(0.0, logits)
    loss = float(-(pos * log_sig + neg * log_one_minus).sum() / n)
    dlogits = (pos * (sig - 1.0) + neg * sig) / n
    return loss, dlogits


def loss_ude(logits: np.ndarray, targets: np.ndarray, task: str,
             valid: np.ndarray | None = None):
    """Cross-entropy against soft MixUp labels -> (loss, dloss/dlogits).

    Multi-label entries where either MixUp member abstained are excluded
    via `valid`.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    n = logits.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(logits)
    if task == "single":
        log_p = nn.log_softmax(logits)
        probs = np.exp(log_p)
        loss = float(-(targets * log_p).sum() / n)
        row_mass = targets.sum(axis=1, keepdims=True)
        dlogits = (probs * row_mass - targets) / n
        return loss, dlogits

    if valid is None:
        valid = np.ones_like(targets)
    valid = valid.astype(np.float64)
    count = valid.sum()
    if count == 0:
        return 0.0, np.zeros_like(logits)
    sig = nn.sigmoid(logits)
    log_sig = -np.logaddexp(0.0, -logits)
    log_one_minus = -np.logaddexp(0.0, logits)
    per_entry = -(targets * log_sig + (1.0 - targets) * log_one_minus)
    loss = float((valid * per_entry).sum() / count)
    dlogits = valid * (sig - targets) / count
    return loss, dlogits


def mixup(x_l: np.ndarray, y_l: np.ndarray, x_h: np.ndarray, y_h: np.ndarray,
          lambda_mix: float):
    """Convex combination of two samples and their label vectors."""
    x = lambda_mix * np.asarray(x_l) + (1.0 - lambda_mix) * np.asarray(x_h)
    y = lambda_mix * np.asarray(y_l) + (1.0 - lambda_mix) * np.asarray(y_h)
    return x, y


def _ude_member_labels(dataset: list[Sample], indices: np.ndarray,
                       teacher: nn.ModelParams, spec: ClientSpec,
                       cfg: ClientConfig, rng: np.random.Generator):
    """Label vectors and usability masks for prospective MixUp members.

    Single-label members use their known one-hot label when they have one,
    otherwise a relaxed-threshold teacher pseudo label; a member with
    neither is unusable.  Multi-label members get true values on known
    classes and relaxed pseudo verdicts on unknown ones; classes where the
    teacher abstains are unusable for that member.
    """
    xs = np.stack([dataset[i].x for i in indices])
    x_weak = augment_weak_batch(xs, rng, cfg.augment)
    m = teacher.num_classes
    labels = np.zeros((len(indices), m))
    if cfg.task == "single":
        probs = nn.softmax(nn.forward(teacher, x_weak).logits)
        usable = np.zeros(len(indices), dtype=bool)
        for j, i in enumerate(indices):
            rec = dataset[i].label
            if rec.known_mask.any():
                labels[j] = rec.values
                usable[j] = True
            elif probs[j].max() >= cfg.tau_l:
                labels[j, int(probs[j].argmax())] = 1.0
                usable[j] = True
        return labels, usable
    probs = nn.sigmoid(nn.forward(teacher, x_weak).logits)
    valid = np.zeros((len(indices), m), dtype=bool)
    for j, i in enumerate(indices):
        rec = dataset[i].label
        labels[j] = np.where(rec.known_mask, rec.values, 0.0)
        valid[j] = rec.known_mask.copy()
        for c in spec.unknown:
            if probs[j, c] >= cfg.tau_lp:
                labels[j, c] = 1.0
                valid[j, c] = True
            elif probs[j, c] <= cfg.tau_ln:
                valid[j, c] = True
    return labels, valid


def ude_batch(dataset: list[Sample], part: UncertaintyPartition,
              teacher: nn.ModelParams, spec: ClientSpec, cfg: ClientConfig,
              rng: np.random.Generator):
    """Sample up to ude_batch_size MixUp pairs of (confident, uncertain).

    Uncertain members always take relaxed-threshold pseudo labels;
    confident members take their own label when present.  Pairs whose
    uncertain member (single-label: either member) has no usable label are
    dropped and redrawn a bounded number of times, so fewer than
    ude_batch_size pairs may come back.  Returns (inputs, soft labels,
    valid-entry mask or None).
    """
    m = teacher.num_classes
    empty = (np.zeros((0, dataset[0].x.shape[0])), np.zeros((0, m)), None)
    if len(part.high) == 0 or len(part.low) == 0 or cfg.ude_batch_size == 0:
        return empty
    xs_mix, ys_mix, valids = [], [], []
    need = cfg.ude_batch_size
    for _ in range(UDE_RETRY_ROUNDS):
        if need == 0:
            break
        low_idx = rng.choice(part.low, size=need, replace=True)
        high_idx = rng.choice(part.high, size=need, replace=True)
        y_low, ok_low = _ude_member_labels(dataset, low_idx, teacher, spec,
                                           cfg, rng)
        y_high, ok_high = _ude_member_labels(dataset, high_idx, teacher, spec,
                                             cfg, rng)
        lams = rng.beta(cfg.mixup_alpha, cfg.mixup_alpha, size=need)
        kept = 0
        for j in range(need):
            if cfg.task == "single":
                if not (ok_low[j] and ok_high[j]):
                    continue
                pair_valid = None
            else:
                pair_valid = ok_low[j] & ok_high[j]
                if not pair_valid.any():
                    continue
            x_mix, y_mix = mixup(dataset[low_idx[j]].x, y_low[j],
                                 dataset[high_idx[j]].x, y_high[j],
                                 float(lams[j]))
            xs_mix.append(x_mix)
            ys_mix.append(y_mix)
            valids.append(pair_valid)
            kept += 1
        need -= kept
    if not xs_mix:
        return empty
    valid_arr = None if cfg.task == "single" else np.stack(valids)
    return np.stack(xs_mix), np.stack(ys_mix), valid_arr


def compute_class_weights(dataset: list[Sample], spec: ClientSpec,
                          clip_max: float = 100.0) -> np.ndarray:
    """Positive-term BCE weights n_neg/n_pos from known labels, in [1, clip]."""
    m = len(dataset[0].true_label)
    weights = np.ones(m)
    for c in spec.identified:
        n_pos = sum(float(s.label.values[c]) for s in dataset
                    if s.label.known_mask[c])
        n_known = sum(1 for s in dataset if s.label.known_mask[c])
        n_neg = n_known - n_pos
        weights[c] = min(max(n_neg / max(n_pos, 1.0), 1.0), clip_max)
    return weights


def _label_counts(dataset: list[Sample], spec: ClientSpec, task: str,
                  m: int) -> np.ndarray:
    counts = np.zeros(m)
    for s in dataset:
        if task == "single":
            if s.label.known_mask.any():
                counts[int(np.argmax(s.label.values))] += 1
        else:
            counts += np.where(s.label.known_mask, s.label.values, 0.0)
    # Unknown-class entries stay zero; pseudo counts are added separately.
    for c in spec.unknown:
        counts[c] = 0.0
    return counts


def _single_decisions(teacher: nn.ModelParams, x_weak: np.ndarray,
                      labels, unknown, tau: float) -> PseudoLabelDecision:
    dec = pseudo_single(teacher, x_weak, unknown, tau)
    # Labeled samples belong to the supervised loss, never the pseudo loss.
    unlabeled = np.array([not rec.known_mask.any() for rec in labels])
    dec.kept = dec.kept & unlabeled
    return dec


def local_train(global_params: nn.ModelParams, dataset: list[Sample],
                spec: ClientSpec, cfg: ClientConfig, round_idx: int,
                seed: int) -> ClientUpdate:
    """Run one client round and emit the update for the server.

    The estimated class distribution counts true labels for identified
    classes and, for unknown classes, the distinct samples that received a
    confident pseudo label during the last epoch-equivalent window of
    training iterations (so zero local iterations means zero pseudo
    counts).
    """
    if not dataset:
        raise ConfigError(f"client {spec.client_id}: empty dataset")
    cfg.validate()
    m = global_params.num_classes
    rng = np.random.default_rng([seed, round_idx, spec.client_id])
    lr_t = cfg.lr / (1.0 + cfg.lr_decay * round_idx)

    student = global_params
    adam = nn.AdamState.init(student, beta1=cfg.adam_beta1,
                             beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    edd = _label_counts(dataset, spec, cfg.task, m)

    if not cfg.use_pseudo:
        student, stats = _supervised_rounds(student, adam, dataset, spec, cfg,
                                            lr_t, rng, round_idx)
        return ClientUpdate(client_id=spec.client_id, params=student,
                            n_samples=len(dataset), edd=edd, stats=stats)

    teacher = global_params
    part = partition(dataset, global_params, cfg.task, spec.unknown,
                     cfg.frac_l, cfg.frac_h)
    pool = np.sort(np.concatenate([part.low, part.mid]))
    if pool.size == 0 and cfg.local_iters > 0:
        raise ConfigError(f"client {spec.client_id}: no trainable samples "
                          "(frac_h leaves nothing below high uncertainty)")

    class_weights = cfg.class_weights
    if cfg.task == "multi" and class_weights is None:
        class_weights = compute_class_weights(dataset, spec)

    epoch_iters = max(1, math.ceil(pool.size / cfg.batch_size))
    edd_window_start = max(0, cfg.local_iters - epoch_iters)
    # sample index -> last confident pseudo verdict inside the window
    tracked_single: dict[int, int] = {}
    tracked_multi: dict[int, np.ndarray] = {}

    loss_sums = np.zeros(3)
    kept_total = 0
    for it in range(cfg.local_iters):
        batch_idx = rng.choice(pool, size=cfg.batch_size,
                               replace=pool.size < cfg.batch_size)
        xs = np.stack([dataset[i].x for i in batch_idx])
        labels = [dataset[i].label for i in batch_idx]
        x_weak = augment_weak_batch(xs, rng, cfg.augment)
        x_strong = augment_strong_batch(xs, rng, cfg.augment)

        if cfg.task == "single":
            dec = _single_decisions(teacher, x_weak, labels, spec.unknown,
                                    cfg.tau)
            if cfg.pseudo_loss_norm == "kept":
                denom = int(dec.kept.sum())
            else:
                denom = sum(1 for rec in labels if not rec.known_mask.any())
        else:
            dec = pseudo_multi(teacher, x_weak, spec.unknown, cfg.tau_p,
                               cfg.tau_n)
            denom = cfg.batch_size

        cache_w = nn.forward(student, x_weak)
        l_i, dl_w = loss_identified(cache_w.logits, labels, cfg.task,
                                    class_weights)
        grads = nn.backward(student, cache_w, dl_w)

        cache_s = nn.forward(student, x_strong)
        l_u, dl_s = loss_unknown(cache_s.logits, dec, cfg.task, denom)
        grads = nn.add_params(grads, nn.backward(student, cache_s, dl_s))

        l_ude = 0.0
        if cfg.ude_weight > 0:
            x_mix, y_mix, valid = ude_batch(dataset, part, teacher, spec, cfg,
                                            rng)
            if x_mix.shape[0] > 0:
                cache_u = nn.forward(student, x_mix)
                l_ude, dl_u = loss_ude(cache_u.logits, y_mix, cfg.task, valid)
                grads = nn.add_params(grads,
                                      nn.backward(student, cache_u, dl_u),
                                      scale=cfg.ude_weight)

        total = l_i + l_u + cfg.ude_weight * l_ude
        if not np.isfinite(total):
            raise NumericError(
                f"client {spec.client_id}: non-finite loss at round "
                f"{round_idx} iter {it} (L_I={l_i}, L_U={l_u}, L_UDE={l_ude})")
        student, adam = nn.adam_step(student, grads, adam, lr_t)
        teacher = nn.ema_update(teacher, student, cfg.ema_decay)

        loss_sums += (l_i, l_u, l_ude)
        if cfg.task == "single":
            kept_total += int(dec.kept.sum())
            if it >= edd_window_start:
                for j in np.flatnonzero(dec.kept):
                    tracked_single[int(batch_idx[j])] = int(dec.klass[j])
        else:
            kept_total += int((dec.state == 1).sum())
            if it >= edd_window_start:
                for j in range(len(batch_idx)):
                    pos = dec.state[j] == 1
                    if pos.any():
                        tracked_multi[int(batch_idx[j])] = pos

    if cfg.task == "single":
        for klass in tracked_single.values():
            edd[klass] += 1
    else:
        for pos in tracked_multi.values():
            edd += pos.astype(np.float64)

    iters = max(cfg.local_iters, 1)
    stats = {
        "loss_identified": float(loss_sums[0] / iters),
        "loss_unknown": float(loss_sums[1] / iters),
        "loss_ude": float(loss_sums[2] / iters),
        "kept_pseudo": kept_total,
    }
    return ClientUpdate(client_id=spec.client_id, params=student,
                        n_samples=len(dataset), edd=edd, stats=stats)


def _supervised_rounds(student, adam, dataset, spec, cfg, lr_t, rng,
                       round_idx):
    """Plain FedAvg-style local training: supervised loss on known labels."""
    if cfg.task == "single":
        pool = np.array([i for i, s in enumerate(dataset)
                         if s.label.known_mask.any()], dtype=np.int64)
    else:
        pool = np.arange(len(dataset), dtype=np.int64)
    class_weights = cfg.class_weights
    if cfg.task == "multi" and class_weights is None:
        class_weights = compute_class_weights(dataset, spec)
    loss_sum = 0.0
    ran = 0
    for it in range(cfg.local_iters):
        if pool.size == 0:
            break
        batch_idx = rng.choice(pool, size=cfg.batch_size,
                               replace=pool.size < cfg.batch_size)
        xs = np.stack([dataset[i].x for i in batch_idx])
        labels = [dataset[i].label for i in batch_idx]
        x_weak = augment_weak_batch(xs, rng, cfg.augment)
        cache = nn.forward(student, x_weak)
        loss, dlogits = loss_identified(cache.logits, labels, cfg.task,
                                        class_weights)
        if not np.isfinite(loss):
            raise NumericError(f"client {spec.client_id}: non-finite "
                               f"supervised loss at round {round_idx} iter {it}")
        grads = nn.backward(student, cache, dlogits)
        student, adam = nn.adam_step(student, grads, adam, lr_t)
        loss_sum += loss
        ran += 1
    stats = {"loss_identified": loss_sum / max(ran, 1), "loss_unknown": 0.0,
             "loss_ude": 0.0, "kept_pseudo": 0}
    return student, stats
