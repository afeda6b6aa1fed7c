"""End-to-end runs: data, partition, T rounds, metrics, checkpoints, summary."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import (
    Dataset,
    PartitionSpec,
    add_context_marker,
    gen_gaussian_mixture,
    load_csv,
    partition,
    write_manifest,
)
from .errors import FleaError
from .federation import FedConfig, init_state, run_round, save_checkpoint
from .local import LocalConfig
from .metrics import (
    MetricsRecord,
    MetricsSink,
    accuracy,
    db_score,
    exposure_eps,
    mean_dcor,
    write_metrics,
)
from .nn import forward_front, init_model, load_model
from .probe import context_attack, group_averages, reconstruction_attack, samples_to_reach

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = ["seed", "status", "final_accuracy", "best_accuracy", "final_mean_dcor", "rounds", "error"]


def build_data(cfg: RunConfig, seed: int) -> tuple[Dataset, Dataset]:
    """(train, test) for one seed; CSV sources are split only when no test file is given."""
    if cfg.csv:
        train = load_csv(cfg.csv, cfg.csv_label)
        if cfg.csv_test:
            return train, load_csv(cfg.csv_test, cfg.csv_label)
        return _holdout(train, cfg.test_fraction, seed)
    kw = dict(scale=cfg.scale, modes=cfg.modes, nuisance_dims=cfg.nuisance_dims, nuisance_scale=cfg.nuisance_scale)
    train = gen_gaussian_mixture(cfg.num_classes, cfg.dims, cfg.per_class, cfg.spread, [seed, 11], **kw)
    test = gen_gaussian_mixture(cfg.num_classes, cfg.dims, cfg.test_per_class, cfg.spread, [seed, 12], **kw)
    return train, test


def _holdout(data: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    rng = np.random.default_rng([seed, 14])
    test_idx = []
    for c in range(data.num_classes):
        rows = np.flatnonzero(data.labels == c)
        take = int(round(fraction * len(rows)))
        test_idx.extend(rng.choice(rows, size=take, replace=False).tolist())
    mask = np.zeros(len(data), dtype=bool)
    mask[test_idx] = True
    return data.subset(np.flatnonzero(~mask)), data.subset(np.flatnonzero(mask))


def partition_spec(cfg: RunConfig, seed: int) -> PartitionSpec:
    return PartitionSpec(cfg.partition, cfg.num_clients, cfg.mean_size, q=cfg.q, mu=cfg.mu, seed=seed)


def fed_config(cfg: RunConfig, seed: int) -> FedConfig:
    local = LocalConfig(
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        beta_a=cfg.beta_a,
        lambda1=cfg.lambda1,
        lambda2=cfg.lambda2,
        lr=cfg.lr,
        lr_decay=cfg.lr_decay,
        lr_floor=cfg.lr_floor,
        prox_rho=cfg.prox_rho,
    )
    return FedConfig(
        cfg.strategy,
        cfg.client_fraction,
        cfg.alpha,
        local,
        seed=seed,
        threads=cfg.threads,
        exposure_symmetric=cfg.exposure_symmetric,
    )


@dataclass
class SeedResult:
    seed: int
    status: str
    final_accuracy: float = float("nan")
    best_accuracy: float = float("nan")
    final_mean_dcor: float = float("nan")
    rounds: int = 0
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def run_seed(cfg: RunConfig, seed: int, directory: Path) -> SeedResult:
    directory.mkdir(parents=True, exist_ok=True)
    train, test = build_data(cfg, seed)
    clients = partition(train, partition_spec(cfg, seed))
    write_manifest(directory / "partition.json", clients, partition_spec(cfg, seed))
    widths = [train.dims, *cfg.widths, train.num_classes]
    model = init_model(widths, cfg.split_index, activation=cfg.activation, seed=[seed, 13])
    fcfg = fed_config(cfg, seed)
    state = init_state(model, clients, train, fcfg)
    assigned = np.sort(np.concatenate([c.indices for c in clients]))
    best = -np.inf
    result = SeedResult(seed, "ok")
    with MetricsSink(directory) as sink:
        for t in range(1, cfg.rounds + 1):
            start = time.perf_counter()
            state, outcome = run_round(state, clients, train, fcfg)
            elapsed = (time.perf_counter() - start) * 1000.0 if cfg.timing else 0.0
            acc = accuracy(state.model, test)
            best = max(best, acc)
            dcor = mean_dcor(state.model, test, cfg.eval_batch, seed=seed)
            record = MetricsRecord(
                round=t,
                strategy=cfg.strategy,
                seed=seed,
                accuracy=acc,
                best_accuracy=best,
                loss_clf=outcome.losses["clf"],
                loss_dis=outcome.losses["dis"],
                loss_dec=outcome.losses["dec"],
                db_train=db_score(forward_front(state.model, train.inputs[assigned]), train.labels[assigned]),
                db_test=db_score(forward_front(state.model, test.inputs), test.labels),
                mean_dcor=dcor,
                exposure_eps=exposure_eps(state.exposure),
                wallclock_ms=elapsed,
            )
            write_metrics(sink, record)
            if t == cfg.rounds or (cfg.checkpoint_every and t % cfg.checkpoint_every == 0):
                save_checkpoint(state, directory / "checkpoints" / f"round_{t:04d}")
            result.final_accuracy, result.best_accuracy, result.final_mean_dcor = acc, best, dcor
            result.rounds = t
    return result


def _stats(values: list[float]) -> dict:
    arr = np.asarray(values, dtype=float)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return {"mean": float(arr.mean()) if len(arr) else float("nan"), "std": std, "values": arr.tolist()}


def summarize(cfg: RunConfig, results: list[SeedResult]) -> dict:
    ok = [r for r in results if r.ok]
    return {
        "name": cfg.name,
        "strategy": cfg.strategy,
        "setting": cfg.setting_key(),
        "lambda2": cfg.lambda2,
        "alpha": cfg.alpha,
        "rounds": cfg.rounds,
        "seeds": [r.seed for r in results],
        "n_ok": len(ok),
        "n_failed": len(results) - len(ok),
        "final_accuracy": _stats([r.final_accuracy for r in ok]),
        "best_accuracy": _stats([r.best_accuracy for r in ok]),
        "mean_dcor": _stats([r.final_mean_dcor for r in ok]),
        "failures": [{"seed": r.seed, "error": r.error} for r in results if not r.ok],
    }


def write_summary(directory: Path, cfg: RunConfig, results: list[SeedResult]) -> dict:
    summary = summarize(cfg, results)
    with (directory / "summary.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in results:
            w.writerow([r.seed, r.status, repr(r.final_accuracy), repr(r.best_accuracy),
                        repr(r.final_mean_dcor), r.rounds, r.error])
        for stat in ("mean", "std"):
            w.writerow([stat, "", repr(summary["final_accuracy"][stat]), repr(summary["best_accuracy"][stat]),
                        repr(summary["mean_dcor"][stat]), "", ""])
    (directory / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def run_experiment(cfg: RunConfig) -> int:
    """Run every seed of ``cfg``; returns 0 iff all seeds finished."""
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    echo = cfg.to_dict()
    echo["out"] = str(out)
    (out / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True))
    results = []
    for seed in cfg.seeds:
        log.info("%s seed %d -> %s", cfg.strategy, seed, out)
        try:
            results.append(run_seed(cfg, seed, out / f"seed_{seed}"))
        except (FleaError, ValueError, ArithmeticError, OSError) as exc:
            log.error("seed %d failed: %s", seed, exc)
            results.append(SeedResult(seed, "failed", error=f"{type(exc).__name__}: {exc}"))
    write_summary(out, cfg, results)
    return 0 if all(r.ok for r in results) else 1


# -- attacks on a finished run -------------------------------------------------

CONTEXT_SIZES = (16, 32, 64, 128, 256, 512, 1024)


def attack_data(cfg: RunConfig, seed: int, *, width: int = 6, amplitude: float = 1.0) -> Dataset:
    """Fresh rows from the run's distribution with a marker on half of them.

    The marker is a constant added to the last ``width`` input coordinates.
    """
    if cfg.csv:
        source = build_data(cfg, seed)[1]
    else:
        kw = dict(scale=cfg.scale, modes=cfg.modes, nuisance_dims=cfg.nuisance_dims, nuisance_scale=cfg.nuisance_scale)
        source = gen_gaussian_mixture(cfg.num_classes, cfg.dims, 2000, cfg.spread, [seed, 21], **kw)
    return add_context_marker(source, [amplitude] * width, 0.5, seed, offset=source.dims - width)


def probe_run(
    run_dir: str | Path,
    seed: int,
    *,
    round_t: int | None = None,
    recon_size: int = 1000,
    context_sizes=CONTEXT_SIZES,
    marker_width: int = 6,
    marker_amplitude: float = 1.0,
) -> dict:
    """Reconstruction and context attacks on one seed's checkpointed global model.

    Writes ``probe.json`` next to the seed's metrics and returns the reports.
    """
    run_dir = Path(run_dir)
    cfg = RunConfig(**json.loads((run_dir / "config.json").read_text()))
    seed_dir = run_dir / f"seed_{seed}"
    ckpts = sorted((seed_dir / "checkpoints").glob("round_*"))
    if round_t is not None:
        ckpts = [p for p in ckpts if p.name == f"round_{round_t:04d}"]
    if not ckpts:
        raise FileNotFoundError(f"no checkpoint under {seed_dir / 'checkpoints'}")
    model = load_model(ckpts[-1] / "model")
    train, test = build_data(cfg, seed)
    dcor = mean_dcor(model, test, cfg.eval_batch, seed=seed)

    size = min(recon_size, len(train))
    rec = reconstruction_attack(
        (forward_front(model, train.inputs), train.inputs),
        (forward_front(model, test.inputs), test.inputs),
        [size],
        seed,
    )
    marked = attack_data(cfg, seed, width=marker_width, amplitude=marker_amplitude)
    sizes = [s for s in context_sizes if s <= 0.7 * len(marked)]
    ctx = context_attack(forward_front(model, marked.inputs), marked.context_flags, sizes, seed)
    avg, avg_flags = group_averages(marked.inputs, marked.context_flags, 10, seed)
    avg_sizes = [s for s in sizes if s <= 0.7 * len(avg)]
    ctx_avg = context_attack(avg, avg_flags, avg_sizes, seed)
    for r in (rec, ctx, ctx_avg):
        r.lambda2 = cfg.lambda2 if r is not ctx_avg else None
        r.mean_dcor = dcor if r is not ctx_avg else None
    ctx_avg.extra["target"] = "group_averages"
    ctx.extra["target"] = "activations"
    reports = {"reconstruction": rec, "context": ctx, "context_averages": ctx_avg}
    payload = {
        "checkpoint": ckpts[-1].name,
        "mean_dcor": dcor,
        "samples_to_90": {k: samples_to_reach(v) for k, v in reports.items() if v.kind == "context"},
        "reports": {k: json.loads(v.to_json()) for k, v in reports.items()},
    }
    (seed_dir / "probe.json").write_text(json.dumps(payload, indent=2))
    return reports
