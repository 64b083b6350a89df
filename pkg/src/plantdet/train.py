"""Training loop and split evaluation."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .config import RunConfig
from .data import Dataset, DatasetIndex
from .errors import ConfigError, NumericError
from .loss import assign_targets, detection_loss
from .metrics import EvalResult, GroundTruth, evaluate_detections
from .model import DetectorModel, count_parameters
from .optim import SGD
from .postprocess import DetectionArrays, postprocess
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "lr", "loss", "box", "obj", "cls", "precision", "recall", "map50")


def decay_weights_only(name: str, data: np.ndarray) -> bool:
    # conv/linear weights decay; biases and norm affine parameters do not
    return data.ndim > 1


def lr_factor(epoch: float, epochs: int, final: float) -> float:
    """Cosine from 1 at epoch 0 down to ``final`` at ``epochs``."""
    return ((1 - math.cos(math.pi * epoch / epochs)) / 2) * (final - 1) + 1


def batch_hash(images: np.ndarray, indices) -> str:
    h = hashlib.sha256(np.ascontiguousarray(images).tobytes())
    h.update(np.asarray(indices, dtype=np.int64).tobytes())
    return h.hexdigest()[:16]


def build_model(cfg: RunConfig, class_names) -> DetectorModel:
    return DetectorModel(cfg.model.backbone(), len(class_names), cfg.model.anchor_set(),
                         cfg.train.seed, list(class_names))


def check_model_data(model: DetectorModel, index: DatasetIndex) -> None:
    if model.nc != index.nc:
        raise ConfigError(f"model has {model.nc} classes but dataset {index.root} has {index.nc}")


def predict(model: DetectorModel, images: np.ndarray, conf: float, iou: float,
            max_det: int) -> list[DetectionArrays]:
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            raw = model(Tensor(images))
        return postprocess([r.data for r in raw], model.anchors, conf, iou, max_det, model.strides)
    finally:
        model.train(was_training)


def evaluate(model: DetectorModel, dataset: Dataset, cfg: RunConfig,
             batch_size: int | None = None) -> tuple[EvalResult, list[DetectionArrays]]:
    """Run eval-mode inference over ``dataset`` and score it at the network resolution."""
    e = cfg.eval
    dets, gts = [], []
    size = dataset.img_size
    for batch in dataset.batches(batch_size or cfg.train.batch):
        dets.extend(predict(model, batch.images, e.conf, e.iou, e.max_det))
        gts.extend(GroundTruth.from_normalized(a, size, size) for a in batch.annotations)
    result = evaluate_detections(dets, gts, model.nc, model.class_names, e.match_iou, e.ap_method,
                                 (size, size))
    return result, dets


@dataclass
class TrainResult:
    run_dir: Path
    history: list[dict]
    best_map: float
    best_epoch: int
    first_batch_hash: str
    parameters: int
    steps: int
    seconds: float
    final_eval: EvalResult | None = None
    epoch_losses: list[float] = field(default_factory=list)

    def summary(self) -> dict:
        return {"run_dir": str(self.run_dir), "best_map50": self.best_map, "best_epoch": self.best_epoch,
                "first_batch_hash": self.first_batch_hash, "parameters": self.parameters,
                "steps": self.steps, "seconds": round(self.seconds, 2)}


def _fmt(v) -> str:
    if v is None:
        return ""
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def train(cfg: RunConfig, index: DatasetIndex, run_dir, eval_dataset: Dataset | None = None) -> TrainResult:
    """Seeded SGD training; writes ``metrics.csv``, ``best.pdet`` and ``last.pdet`` into ``run_dir``."""
    t = cfg.train
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()

    train_ds = Dataset(index, t.train_split, t.img_size, cfg.data.resize)
    val_ds = eval_dataset or Dataset(index, t.val_split, t.img_size, cfg.data.resize)
    model = build_model(cfg, index.class_names)
    model.checkpoint_meta = {"config": cfg.to_dict()}
    params = model.param_store()
    opt = SGD(params, t.lr, t.momentum, t.weight_decay, decay_weights_only)
    weights = cfg.loss.weights()
    shuffle_rng = np.random.default_rng([t.seed, 1])

    nb = math.ceil(len(train_ds) / t.batch)
    warmup = round(t.warmup_epochs * nb)
    history, epoch_losses = [], []
    best_map, best_epoch, first_hash, step = -1.0, 0, "", 0
    final_eval = None
    log.info("training %d parameters on %d images, %d epochs x %d batches",
             count_parameters(model), len(train_ds), t.epochs, nb)

    with open(run_dir / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_FIELDS)
        for epoch in range(t.epochs):
            model.train()
            base = t.lr * lr_factor(epoch, t.epochs, t.lr_final)
            sums = np.zeros(4)
            for batch in train_ds.batches(t.batch, shuffle=True, rng=shuffle_rng):
                if not first_hash:
                    first_hash = batch_hash(batch.images, batch.indices)
                if step < warmup:
                    frac = (step + 1) / warmup
                    opt.lr = base * frac
                    opt.momentum = t.warmup_momentum + frac * (t.momentum - t.warmup_momentum)
                else:
                    opt.lr, opt.momentum = base, t.momentum
                preds = model(Tensor(batch.images))
                shapes = [p.shape[2:4] for p in preds]
                assignment = assign_targets(batch.annotations, model.anchors, shapes, model.strides,
                                            batch.sources)
                loss, comp = detection_loss(preds, assignment, weights, model.anchors, model.strides)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError(f"non-finite loss {value} at epoch {epoch} step {step}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                step += 1
                sums += (value, comp["box"], comp["obj"], comp["cls"])
            avg = sums / nb
            epoch_losses.append(float(avg[0]))
            row = {"epoch": epoch, "lr": opt.lr, "loss": float(avg[0]), "box": float(avg[1]),
                   "obj": float(avg[2]), "cls": float(avg[3]),
                   "precision": None, "recall": None, "map50": None}
            last = epoch == t.epochs - 1
            if last or (epoch + 1) % t.eval_interval == 0:
                res, _ = evaluate(model, val_ds, cfg)
                row.update(precision=res.mean_precision, recall=res.mean_recall, map50=res.map50)
                if res.map50 > best_map:
                    best_map, best_epoch = res.map50, epoch
                    model.checkpoint_meta = {"config": cfg.to_dict(), "epoch": epoch, "map50": res.map50}
                    save_checkpoint(model, run_dir / "best.pdet")
                if last:
                    final_eval = res
                log.info("epoch %d loss %.4f P %.3f R %.3f mAP@0.5 %.3f", epoch, avg[0],
                         res.mean_precision, res.mean_recall, res.map50)
            else:
                log.debug("epoch %d loss %.4f", epoch, avg[0])
            history.append(row)
            writer.writerow([_fmt(row[k]) for k in LOG_FIELDS])
            fh.flush()

    model.checkpoint_meta = {"config": cfg.to_dict(), "epoch": t.epochs - 1,
                             "map50": final_eval.map50 if final_eval else None}
    save_checkpoint(model, run_dir / "last.pdet")
    return TrainResult(run_dir, history, best_map, best_epoch, first_hash, count_parameters(model),
                       step, time.perf_counter() - start, final_eval, epoch_losses)


def window_means(values, windows: int = 10) -> list[float]:
    """Means of ``values`` over ``windows`` consecutive equal-ish chunks."""
    chunks = np.array_split(np.asarray(values, dtype=np.float64), windows)
    return [float(c.mean()) for c in chunks if len(c)]
