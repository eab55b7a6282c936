"""Command line front end.

Verbs:
  run        train one mode across seeds; JSONL per seed plus a summary CSV
  compare    diff two finished runs that trained on identical data
  gen-data   materialize a federation as CSV files
  gradcheck  finite-difference audit of the backward pass

Report files are deterministic byte for byte given the config: anything
wall-clock-dependent goes to meta.json, which carries no results.
Exit codes: 0 success, 1 config or input problem, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import nn
from .client import PseudoLabelDecision, loss_identified, loss_ude, \
    loss_unknown
from .config import (ExperimentConfig, apply_overrides, config_from_dict,
                     config_to_dict, data_fingerprint, load_config)
from .data import LabelRecord, gen_federation, save_csv
from .errors import ConfigError, NumericError, ParseError
from .server import run_federation

SUMMARY_METRICS = ("macro_auc", "accuracy", "macro_f1", "macro_precision",
                   "macro_recall")
CURVE_METRICS = ("macro_auc", "accuracy", "macro_f1")
GRADCHECK_TOL = 1e-4


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems through the exit-code contract."""

    def error(self, message):
        raise ConfigError(message)


def _dumps(obj) -> str:
    try:
        return json.dumps(obj, sort_keys=True, separators=(",", ":"),
                          allow_nan=False)
    except ValueError as e:
        raise NumericError(f"non-finite value in report: {e}") from e


def _out_root(explicit: str | None) -> Path:
    if explicit:
        return Path(explicit)
    return Path(os.environ.get("FEDLSM_OUTPUT_DIR", "runs"))


def _resolve_config(args) -> ExperimentConfig:
    raw = load_config(args.config)
    apply_overrides(raw, args.set)
    return config_from_dict(raw)


# ---------------------------------------------------------------- run

def cmd_run(args) -> int:
    cfg = _resolve_config(args)
    if args.output_dir:
        outdir = Path(args.output_dir)
    else:
        outdir = _out_root(None) / (args.name or cfg.mode)
    outdir.mkdir(parents=True, exist_ok=True)

    record = {"config": config_to_dict(cfg),
              "data_fingerprint": data_fingerprint(cfg)}
    (outdir / "run.json").write_text(_dumps(record) + "\n", encoding="utf-8")

    finals = []
    for s in cfg.seeds:
        fed = gen_federation(replace(cfg.federation, seed=s))
        lines = [_dumps({"schema": 1, "mode": cfg.mode, "seed": s,
                         "data_fingerprint": record["data_fingerprint"]})]

        def on_round(rep, params, _seed=s):
            lines.append(_dumps(rep.as_dict()))
            if not args.quiet:
                print(f"seed {_seed} round {rep.round + 1}/{cfg.rounds} "
                      f"macro_auc={rep.metrics.macro_auc:.4f} "
                      f"accuracy={rep.metrics.accuracy:.4f}")

        result = run_federation(
            fed, cfg.client, rounds=cfg.rounds, mode=cfg.mode, seed=s,
            hidden_dims=tuple(cfg.hidden_dims),
            proxy_mode=cfg.proxy_aggregation, on_round=on_round)
        (outdir / f"seed{s}.jsonl").write_text("\n".join(lines) + "\n",
                                               encoding="utf-8")
        if args.checkpoint:
            ckpt_dir = outdir / "checkpoints"
            ckpt_dir.mkdir(exist_ok=True)
            nn.save_params(result.params, str(ckpt_dir / f"seed{s}.ckpt"))
        finals.append(result.reports[-1].metrics.as_dict())

    rows = ["metric,mean,std"]
    for metric in SUMMARY_METRICS:
        vals = np.array([f[metric] for f in finals])
        rows.append(f"{metric},{float(vals.mean())!r},{float(vals.std())!r}")
    (outdir / "summary.csv").write_text("\n".join(rows) + "\n",
                                        encoding="utf-8")

    meta = {"command": "run", "config_path": args.config,
            "completed": datetime.datetime.now().isoformat()}
    (outdir / "meta.json").write_text(json.dumps(meta, indent=2) + "\n",
                                      encoding="utf-8")
    if not args.quiet:
        print(f"wrote {outdir}")
    return 0


# ---------------------------------------------------------------- compare

def _load_run(path: Path):
    run_file = path / "run.json"
    if not run_file.is_file():
        raise ConfigError(f"{path}: not a run directory (missing run.json)")
    record = json.loads(run_file.read_text(encoding="utf-8"))
    seeds = record["config"]["seeds"]
    curves = {}
    for s in seeds:
        seed_file = path / f"seed{s}.jsonl"
        if not seed_file.is_file():
            raise ConfigError(f"{path}: missing report for seed {s}")
        reports = [json.loads(line) for line in
                   seed_file.read_text(encoding="utf-8").splitlines()][1:]
        if not reports:
            raise ConfigError(f"{seed_file}: no round reports")
        curves[s] = reports
    return record, curves


def cmd_compare(args) -> int:
    path_a, path_b = Path(args.run_a), Path(args.run_b)
    rec_a, curves_a = _load_run(path_a)
    rec_b, curves_b = _load_run(path_b)
    if rec_a["data_fingerprint"] != rec_b["data_fingerprint"]:
        raise ConfigError(
            "runs are not comparable: they trained on different data "
            f"({rec_a['data_fingerprint'][:12]} vs "
            f"{rec_b['data_fingerprint'][:12]})")
    label_a = rec_a["config"]["mode"]
    label_b = rec_b["config"]["mode"]
    if label_a == label_b:
        label_a, label_b = f"{label_a}_a", f"{label_b}_b"

    if args.output_dir:
        outdir = Path(args.output_dir)
    else:
        outdir = _out_root(None) / f"compare-{label_a}-vs-{label_b}"
    outdir.mkdir(parents=True, exist_ok=True)

    rows = ["metric,mean_a,std_a,mean_b,std_b,delta"]
    deltas = {}
    for metric in SUMMARY_METRICS:
        va = np.array([c[-1][metric] for c in curves_a.values()])
        vb = np.array([c[-1][metric] for c in curves_b.values()])
        delta = float(vb.mean() - va.mean())
        deltas[metric] = (float(va.mean()), float(vb.mean()), delta)
        rows.append(f"{metric},{float(va.mean())!r},{float(va.std())!r},"
                    f"{float(vb.mean())!r},{float(vb.std())!r},{delta!r}")
    (outdir / "compare.csv").write_text("\n".join(rows) + "\n",
                                        encoding="utf-8")

    n_rounds = min(min(len(c) for c in curves_a.values()),
                   min(len(c) for c in curves_b.values()))
    header = ["round"]
    for metric in CURVE_METRICS:
        header += [f"{metric}_{label_a}", f"{metric}_{label_b}"]
    curve_rows = [",".join(header)]
    for r in range(n_rounds):
        cells = [str(r)]
        for metric in CURVE_METRICS:
            ma = float(np.mean([c[r][metric] for c in curves_a.values()]))
            mb = float(np.mean([c[r][metric] for c in curves_b.values()]))
            cells += [repr(ma), repr(mb)]
        curve_rows.append(",".join(cells))
    (outdir / "curves.csv").write_text("\n".join(curve_rows) + "\n",
                                       encoding="utf-8")

    print(f"{'metric':<16} {label_a:>12} {label_b:>12} {'delta':>9}")
    for metric, (ma, mb, delta) in deltas.items():
        print(f"{metric:<16} {ma:>12.4f} {mb:>12.4f} {delta:>+9.4f}")
    print(f"wrote {outdir}")
    return 0


# ---------------------------------------------------------------- gen-data

def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    outdir = Path(args.output_dir) if args.output_dir \
        else _out_root(None) / "data"
    outdir.mkdir(parents=True, exist_ok=True)
    fed = gen_federation(cfg.federation)
    files = {}
    for spec, dataset in zip(fed.specs, fed.clients):
        name = f"client{spec.client_id}.csv"
        save_csv(dataset, str(outdir / name))
        files[name] = {"client_id": spec.client_id,
                       "identified": list(spec.identified),
                       "n_samples": spec.n_samples}
    save_csv(fed.val, str(outdir / "val.csv"))
    save_csv(fed.test, str(outdir / "test.csv"))
    manifest = {"federation": config_to_dict(cfg)["federation"],
                "clients": files, "n_val": len(fed.val),
                "n_test": len(fed.test)}
    (outdir / "manifest.json").write_text(_dumps(manifest) + "\n",
                                          encoding="utf-8")
    print(f"wrote {outdir}")
    return 0


# ---------------------------------------------------------------- gradcheck

def _gradcheck_cases(rng: np.random.Generator, m: int):
    """Loss closures covering every term that produces gradients."""
    def supervised_single(batch_n):
        labels = []
        for _ in range(batch_n):
            values = np.zeros(m)
            values[rng.integers(m)] = 1.0
            mask = np.ones(m, dtype=bool) if rng.random() < 0.7 \
                else np.zeros(m, dtype=bool)
            labels.append(LabelRecord(values=values, known_mask=mask))
        return lambda logits: loss_identified(logits, labels, "single")

    def supervised_multi(batch_n):
        labels = []
        for _ in range(batch_n):
            values = (rng.random(m) < 0.4).astype(np.float64)
            mask = rng.random(m) < 0.6
            values = np.where(mask, values, 0.0)
            labels.append(LabelRecord(values=values, known_mask=mask))
        weights = 1.0 + 3.0 * rng.random(m)
        return lambda logits: loss_identified(logits, labels, "multi",
                                              weights)

    def pseudo_single(batch_n):
        kept = rng.random(batch_n) < 0.6
        klass = rng.integers(m, size=batch_n)
        dec = PseudoLabelDecision(kept=kept, klass=klass)
        return lambda logits: loss_unknown(logits, dec, "single")

    def pseudo_multi(batch_n):
        state = rng.integers(-1, 2, size=(batch_n, m)).astype(np.int8)
        dec = PseudoLabelDecision(state=state)
        return lambda logits: loss_unknown(logits, dec, "multi")

    def mix_single(batch_n):
        targets = rng.dirichlet(np.ones(m), size=batch_n)
        return lambda logits: loss_ude(logits, targets, "single")

    def mix_multi(batch_n):
        targets = rng.random((batch_n, m))
        valid = rng.random((batch_n, m)) < 0.7
        return lambda logits: loss_ude(logits, targets, "multi", valid)

    return [supervised_single, supervised_multi, pseudo_single, pseudo_multi,
            mix_single, mix_multi]


def run_gradcheck(nets: int, eps: float, seed: int, report=None) -> float:
    """Finite-difference audit across random nets and all loss terms.

    Returns the worst relative error seen.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(nets):
        d = int(rng.integers(3, 9))
        hidden = [int(rng.integers(4, 9))
                  for _ in range(int(rng.integers(1, 3)))]
        m = int(rng.integers(2, 6))
        params = nn.init_params([d, *hidden], m,
                                seed=int(rng.integers(2 ** 31)))
        batch = rng.normal(size=(int(rng.integers(2, 5)), d))
        case = _gradcheck_cases(rng, m)[i % 6]
        err = nn.gradcheck(params, batch, case(batch.shape[0]), eps=eps)
        worst = max(worst, err)
        if report:
            report(i, err)
    return worst


def cmd_gradcheck(args) -> int:
    def report(i, err):
        if not args.quiet:
            print(f"net {i:3d}: max rel err {err:.3e}")

    worst = run_gradcheck(args.nets, args.eps, args.seed, report)
    print(f"gradcheck: worst relative error {worst:.3e} "
          f"over {args.nets} nets (tolerance {GRADCHECK_TOL:.0e})")
    if worst >= GRADCHECK_TOL:
        raise NumericError(f"gradient check failed: {worst:.3e} >= "
                           f"{GRADCHECK_TOL:.0e}")
    return 0


# ---------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedlsm",
                     description="Federated learning simulator for clients "
                                 "whose label sets only partially overlap.")
    sub = parser.add_subparsers(dest="verb", required=True)

    p_run = sub.add_parser("run", help="train one mode across seeds")
    p_run.add_argument("--config", required=True, help="JSON config file")
    p_run.add_argument("--set", action="append", default=[], metavar="K=V",
                       help="override a config key, e.g. client.lr=0.001")
    p_run.add_argument("--output-dir", help="exact output directory "
                       "(default: $FEDLSM_OUTPUT_DIR or ./runs, plus name)")
    p_run.add_argument("--name", help="run name under the output root "
                                      "(default: the mode)")
    p_run.add_argument("--checkpoint", action="store_true",
                       help="save final model parameters per seed")
    p_run.add_argument("--quiet", action="store_true")
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare",
                           help="diff two runs trained on identical data")
    p_cmp.add_argument("run_a", help="baseline run directory")
    p_cmp.add_argument("run_b", help="candidate run directory")
    p_cmp.add_argument("--output-dir")
    p_cmp.set_defaults(func=cmd_compare)

    p_gen = sub.add_parser("gen-data", help="write a federation as CSV")
    p_gen.add_argument("--config", required=True)
    p_gen.add_argument("--set", action="append", default=[], metavar="K=V")
    p_gen.add_argument("--output-dir")
    p_gen.set_defaults(func=cmd_gen_data)

    p_gc = sub.add_parser("gradcheck",
                          help="audit analytic gradients numerically")
    p_gc.add_argument("--nets", type=int, default=12)
    p_gc.add_argument("--eps", type=float, default=1e-5)
    p_gc.add_argument("--seed", type=int, default=0)
    p_gc.add_argument("--quiet", action="store_true")
    p_gc.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (ConfigError, ParseError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
