"""Batch evaluation: per-(image, target) attack tasks, artifacts and best/average/worst aggregation."""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..homotopy import AttackReport, homotopy_attack
from ..oracle import AttackGoal, SyntheticDataset, load_model, train_model
from ..tensor_core import load_tensor, save_tensor
from .config import RunConfig
from .imaging import build_tile_partition, render_position_map

__all__ = [
    "BatchSummary",
    "CASES",
    "METRICS",
    "load_or_train_model",
    "load_images",
    "run_batch",
    "summarize",
    "read_reports",
    "task_name",
]

CASES = ("best", "average", "worst")
METRICS = ("l0", "l1", "l2", "linf")


def load_or_train_model(cfg: RunConfig):
    if cfg.model:
        return load_model(cfg.model)
    ds = SyntheticDataset(seed=cfg.dataset_seed)
    return train_model(ds, arch=cfg.arch, seed=cfg.train_seed, epochs=cfg.epochs).model


def load_images(cfg: RunConfig, model):
    """First ``num_images`` test images the model classifies correctly, with their indices.

    ``cfg.dataset`` may name a directory holding ``x.tsr`` (N, H, W, C) and
    ``y.tsr`` (N,); otherwise the built-in test split for ``dataset_seed`` is used.
    """
    if cfg.dataset:
        x = load_tensor(Path(cfg.dataset) / "x.tsr")
        y = load_tensor(Path(cfg.dataset) / "y.tsr").astype(np.int64)
    else:
        ds = SyntheticDataset(seed=cfg.dataset_seed)
        x, y = ds.x_test, ds.y_test
    picked = []
    for i in range(len(x)):
        if model.predict(x[i]) == y[i]:
            picked.append((i, x[i], int(y[i])))
            if len(picked) == cfg.num_images:
                break
    return picked


def task_name(image: int, target: int | None) -> str:
    return f"img{image:05d}_" + ("nt" if target is None else f"t{target:02d}")


# per-process state, set once by the pool initializer
_WORKER: dict = {}


def _init_worker(model, cfg_dict: dict, out_dir: str):
    cfg = RunConfig.from_dict(cfg_dict)
    _WORKER.update(
        model=model,
        cfg=cfg,
        out=Path(out_dir),
        hp=cfg.homotopy_params(),
        np=cfg.nmapg_params(),
        pp=cfg.post_attack_params(),
    )


def _run_task(task) -> dict:
    image, x0, label, target = task
    w = _WORKER
    cfg: RunConfig = w["cfg"]
    name = task_name(image, target)
    base = {"image": image, "label": label, "target": target, "task": name}
    try:
        goal = (
            AttackGoal.nontargeted(label, cfg.kappa)
            if target is None
            else AttackGoal.targeted(target)
        )
        partition = None if cfg.tile is None else build_tile_partition(x0.shape, cfg.tile)
        rep: AttackReport = homotopy_attack(
            w["model"], x0, goal, cfg.epsilon, w["hp"], w["np"], w["pp"],
            mode=cfg.mode, partition=partition,
        )
    except Exception as exc:  # recorded; the batch keeps going
        rec = dict(base, success=False, error=f"{type(exc).__name__}: {exc}")
        timing = 0.0
    else:
        rec = dict(base, **rep.to_record())
        timing = rep.wall_time
        save_tensor(w["out"] / "deltas" / f"{name}.tsr", rep.delta)
        if cfg.render_maps and rep.delta.ndim == 3 and rep.delta.shape[2] == 3:
            render_position_map(rep.delta, w["out"] / "maps" / f"{name}.png")
    line = json.dumps(rec, sort_keys=True)
    (w["out"] / "reports" / f"{name}.json").write_text(line + "\n")
    return {"task": name, "wall_time": timing}


@dataclass
class BatchSummary:
    """Aggregated batch results.

    ``cases[case]`` holds ``asr`` (percent) and mean ``l0/l1/l2/linf``. Per
    image, best/worst take the min/max of each metric over that image's
    successful targets and average takes the mean, so best <= average <= worst
    holds per metric. Best-case ASR counts images with at least one successful
    target, worst-case ASR images where every target succeeded, and average-case
    ASR the fraction of successful (image, target) runs. Norm means are taken
    over images with at least one success.
    """

    cases: dict
    per_image: list
    records: list = field(repr=False, default_factory=list)
    num_images: int = 0
    num_runs: int = 0
    failures: int = 0
    errors: int = 0
    wall_time: float = 0.0

    def to_dict(self, include_records: bool = False, include_timing: bool = False) -> dict:
        d = {
            "cases": self.cases,
            "per_image": self.per_image,
            "num_images": self.num_images,
            "num_runs": self.num_runs,
            "failures": self.failures,
            "errors": self.errors,
        }
        if include_records:
            d["records"] = self.records
        if include_timing:
            d["wall_time"] = self.wall_time
        return d

    def table(self) -> str:
        head = ["case", "ASR%", "l0", "l1", "l2", "linf"]
        rows = [head]
        for case in CASES:
            c = self.cases[case]
            rows.append([case, f"{c['asr']:.1f}"] + [_fmt(c[m]) for m in METRICS])
        widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
        lines = ["  ".join(cell.rjust(wd) for cell, wd in zip(r, widths)) for r in rows]
        lines.append(
            f"images {self.num_images}  runs {self.num_runs}  failed {self.failures}"
            f"  errors {self.errors}"
        )
        return "\n".join(lines)


def _fmt(v):
    return "-" if v is None else f"{v:.4g}"


def _mean_or_none(values):
    return float(np.mean(values)) if values else None


def summarize(records: list, wall_time: float = 0.0) -> BatchSummary:
    """Aggregate per-run records (as written to ``reports.jsonl``) into a :class:`BatchSummary`."""
    by_image: dict[int, list] = {}
    for rec in records:
        by_image.setdefault(rec["image"], []).append(rec)
    per_image = []
    succ_any = succ_all = succ_runs = 0
    collected = {case: {m: [] for m in METRICS} for case in CASES}
    for image in sorted(by_image):
        recs = by_image[image]
        ok = [r for r in recs if r.get("success")]
        entry = {"image": image, "runs": len(recs), "successes": len(ok)}
        succ_runs += len(ok)
        succ_any += bool(ok)
        succ_all += len(ok) == len(recs)
        if ok:
            for m in METRICS:
                vals = np.array([r["norms"][m] for r in ok], dtype=np.float64)
                stats = {"best": float(vals.min()), "average": float(vals.mean()), "worst": float(vals.max())}
                entry[m] = stats
                for case in CASES:
                    collected[case][m].append(stats[case])
        per_image.append(entry)
    n_img = len(by_image)
    n_runs = len(records)
    asr = {
        "best": 100.0 * succ_any / n_img if n_img else 0.0,
        "average": 100.0 * succ_runs / n_runs if n_runs else 0.0,
        "worst": 100.0 * succ_all / n_img if n_img else 0.0,
    }
    cases = {
        case: dict({"asr": asr[case]}, **{m: _mean_or_none(collected[case][m]) for m in METRICS})
        for case in CASES
    }
    return BatchSummary(
        cases=cases,
        per_image=per_image,
        records=list(records),
        num_images=n_img,
        num_runs=n_runs,
        failures=n_runs - succ_runs,
        errors=sum(1 for r in records if "error" in r),
        wall_time=wall_time,
    )


def read_reports(out_dir) -> list:
    path = Path(out_dir) / "reports.jsonl"
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def run_batch(cfg: RunConfig, model=None) -> BatchSummary:
    """Attack every selected image (with every non-true target, or nontargeted).

    Writes into ``cfg.out_dir``: ``config.json`` (resolved), ``reports/`` (one
    file per task), ``reports.jsonl`` (merged, sorted by task name),
    ``deltas/*.tsr``, optional ``maps/*.png``, ``summary.json``,
    ``summary.txt`` and ``timing.json``. Everything except ``timing.json`` is a
    deterministic function of the config.
    """
    cfg.validate()
    t0 = time.perf_counter()
    out = Path(cfg.out_dir)
    for sub in ("reports", "deltas", "maps") if cfg.render_maps else ("reports", "deltas"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.resolved(), indent=2, sort_keys=True) + "\n")

    if model is None:
        model = load_or_train_model(cfg)
    images = load_images(cfg, model)
    tasks = []
    for image, x0, label in images:
        if cfg.targets == "nontargeted":
            targets = [None]
        elif cfg.targets == "all":
            targets = [t for t in range(model.num_classes) if t != label]
        else:
            targets = [t for t in cfg.targets if t != label]
        tasks.extend((image, x0, label, t) for t in targets)

    init_args = (model, cfg.to_dict(), str(out))
    if cfg.parallelism == 1 or len(tasks) <= 1:
        _init_worker(*init_args)
        timings = [_run_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(cfg.parallelism, initializer=_init_worker, initargs=init_args) as pool:
            timings = list(pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (4 * cfg.parallelism))))

    names = sorted(task_name(t[0], t[3]) for t in tasks)
    lines = [(out / "reports" / f"{n}.json").read_text() for n in names]
    (out / "reports.jsonl").write_text("".join(lines))
    records = [json.loads(line) for line in lines]

    wall = time.perf_counter() - t0
    summary = summarize(records, wall)
    (out / "summary.json").write_text(json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "summary.txt").write_text(summary.table() + "\n")
    timing = {"total": wall, "tasks": {t["task"]: t["wall_time"] for t in sorted(timings, key=lambda d: d["task"])}}
    (out / "timing.json").write_text(json.dumps(timing, indent=2) + "\n")
    return summary
