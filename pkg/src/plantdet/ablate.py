"""Attention-mechanism and C3/ST combination ablation grids."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import RunConfig
from .data import Dataset, DatasetIndex
from .errors import ConfigError
from .model import STRATEGIES
from .train import evaluate, train

log = logging.getLogger(__name__)

GRIDS = ("attention", "combination")


@dataclass(frozen=True)
class AblationArm:
    name: str
    c3: int
    st: int
    attention: str

    @property
    def slug(self) -> str:
        return self.name.lower().replace("+", "-")


@dataclass
class AblationRow:
    name: str
    c3: int
    st: int
    attention: str
    parameters: int
    precision: float
    recall: float
    map50: float
    first_batch_hash: str
    seconds: float


def grid_arms(grid: str) -> list[AblationArm]:
    if grid == "attention":
        return [AblationArm("Baseline", 4, 0, "window"),
                AblationArm("Baseline+MSA", 2, 2, "global"),
                AblationArm("Baseline+W-MSA", 2, 2, "window")]
    if grid == "combination":
        return [AblationArm(f"C3x{c}+STx{s}", c, s, "window") for c, s in STRATEGIES]
    raise ConfigError(f"unknown ablation grid {grid!r} (choose from {GRIDS})")


def run_ablation(cfg: RunConfig, index: DatasetIndex, grid: str, out_dir) -> list[AblationRow]:
    """Train and evaluate every arm of ``grid`` with the shared seed in ``cfg``."""
    arms = grid_arms(grid)
    # validate every arm before any training starts
    arm_cfgs = [cfg.with_updates(model={"strategy": f"{a.c3}:{a.st}", "attention": a.attention})
                for a in arms]
    out = Path(out_dir)
    eval_ds = Dataset(index, cfg.eval.split, cfg.train.img_size, cfg.data.resize)
    rows = []
    for arm, acfg in zip(arms, arm_cfgs):
        log.info("ablation %s: %s", grid, arm.name)
        res = train(acfg, index, out / arm.slug)
        best = load_checkpoint(out / arm.slug / "best.pdet")
        ev, _ = evaluate(best, eval_ds, acfg)
        rows.append(AblationRow(arm.name, arm.c3, arm.st, arm.attention, res.parameters,
                                ev.mean_precision, ev.mean_recall, ev.map50, res.first_batch_hash,
                                round(res.seconds, 2)))
    write_ablation(rows, grid, out)
    return rows


def format_table(rows: list[AblationRow], grid: str) -> str:
    if grid == "combination":
        head = f"{'C3':>3} {'ST':>3}  {'params':>10}  {'P':>5}  {'R':>5}  {'mAP50':>5}"
        body = [f"{r.c3:>3d} {r.st:>3d}  {r.parameters:>10,d}  {100 * r.precision:5.1f}  "
                f"{100 * r.recall:5.1f}  {100 * r.map50:5.1f}" for r in rows]
    else:
        width = max(len("self-attention"), *(len(r.name) for r in rows))
        head = f"{'self-attention':<{width}}  {'params':>10}  {'P':>5}  {'R':>5}  {'mAP50':>5}"
        body = [f"{r.name:<{width}}  {r.parameters:>10,d}  {100 * r.precision:5.1f}  "
                f"{100 * r.recall:5.1f}  {100 * r.map50:5.1f}" for r in rows]
    ranked = sorted(rows, key=lambda r: -r.map50)
    order = " > ".join(r.name for r in ranked)
    return "\n".join([head, "-" * len(head), *body, "", f"ordering by mAP50: {order}"]) + "\n"


def write_ablation(rows: list[AblationRow], grid: str, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"text": out / f"ablation_{grid}.txt", "csv": out / f"ablation_{grid}.csv",
             "json": out / f"ablation_{grid}.json"}
    paths["text"].write_text(format_table(rows, grid), encoding="utf-8")
    fields = list(AblationRow.__dataclass_fields__)
    with open(paths["csv"], "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow(asdict(r))
    with open(paths["json"], "w", encoding="utf-8") as fh:
        json.dump({"grid": grid, "rows": [asdict(r) for r in rows]}, fh, indent=2)
        fh.write("\n")
    return paths
