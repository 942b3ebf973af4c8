"""AdamW training with warmup + linear decay, evaluation and gradient checks."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from bussam import ops
from bussam.autodiff import Tensor, detect_anomaly, no_grad
from bussam.checkpoint import load_checkpoint, save_checkpoint
from bussam.config import ModelConfig, TrainConfig
from bussam.data import (
    SamplePair,
    augment,
    load_pair,
    preprocess,
    read_manifest,
    resize_bilinear,
    resize_nearest,
    save_pgm,
    synth_sample,
)
from bussam.errors import CheckFailure, ConfigError, DataError, NonFiniteError
from bussam.losses import total_loss
from bussam.metrics import MetricsReport, binarize, segmentation_metrics
from bussam.model import BussamModel, build_model, forward
from bussam.params import ParameterStore

log = logging.getLogger(__name__)


@dataclass
class LrSchedule:
    peak: float
    warmup_steps: int
    total_steps: int

    def __call__(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.peak * step / self.warmup_steps
        if self.total_steps <= self.warmup_steps:
            return self.peak
        return self.peak * max(0, self.total_steps - step) / (self.total_steps - self.warmup_steps)


class AdamW:
    """Adam with decoupled weight decay over a fixed set of named tensors."""

    def __init__(self, params: dict[str, Tensor], weight_decay: float = 0.1,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            v = self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data * (1.0 - lr * self.weight_decay) - lr * upd).astype(p.data.dtype, copy=False)


def _stack(pairs: Sequence[SamplePair], dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([p.image for p in pairs])[:, None].astype(dtype)
    masks = np.stack([p.mask for p in pairs])[:, None].astype(dtype)
    return images, masks


def _resized(pair: SamplePair, target: int) -> SamplePair:
    if pair.image.shape == (target, target):
        return pair
    return SamplePair(
        image=resize_bilinear(pair.image, target, target),
        mask=resize_nearest(pair.mask, target, target),
        id=pair.id,
        spacing_mm=pair.spacing_mm,
    )


def predict(model: BussamModel, images: np.ndarray, batch: int = 8) -> np.ndarray:
    """Probability maps for a stack of preprocessed images ``N x 1 x S x S``."""
    dtype = model.vit.patch_weight.dtype
    outs = []
    with no_grad():
        for i in range(0, len(images), batch):
            outs.append(forward(model, Tensor(images[i:i + batch].astype(dtype))).prob_map.data)
    return np.concatenate(outs)


def evaluate_model(
    model: BussamModel,
    pairs: Sequence[SamplePair],
    spacing_mm: float | None = None,
    batch: int = 8,
    save_masks: str | Path | None = None,
) -> MetricsReport:
    """Threshold predictions at 0.5 and score every (preprocessed) pair."""
    report = MetricsReport()
    if not pairs:
        return report
    images, _ = _stack(pairs)
    probs = predict(model, images, batch)
    if save_masks is not None:
        Path(save_masks).mkdir(parents=True, exist_ok=True)
    for pair, prob in zip(pairs, probs):
        pred = binarize(prob[0])
        sp = pair.spacing_mm if spacing_mm is None else spacing_mm
        report.add(segmentation_metrics(pred, pair.mask, sp, image=pair.id))
        if save_masks is not None:
            save_pgm(pred * np.uint8(255), Path(save_masks) / f"{pair.id}.pgm")
    return report


@dataclass
class TrainResult:
    model: BussamModel
    store: ParameterStore
    epoch_losses: list[float] = field(default_factory=list)
    val_dice: list[float] = field(default_factory=list)
    initial_snapshot: dict[str, np.ndarray] = field(default_factory=dict)
    seconds: float = 0.0


def _diagnose_nonfinite(model, images, masks, beta) -> str:
    try:
        with no_grad(), detect_anomaly():
            total_loss(forward(model, Tensor(images)).prob_map, masks, beta)
    except NonFiniteError as exc:
        return exc.op or "unknown"
    return "loss"


def load_split(data_dir: str | Path, target: int, spacing_mm: float = 1.0) -> tuple[list[SamplePair], list[SamplePair]]:
    """Load the manifest's train and test pairs resized to ``target`` (not standardised)."""
    train_ids, test_ids = read_manifest(data_dir)
    if not train_ids:
        raise DataError(f"split manifest in {data_dir} lists no training samples")
    train = [_resized(load_pair(data_dir, i, spacing_mm), target) for i in train_ids]
    test = [_resized(load_pair(data_dir, i, spacing_mm), target) for i in test_ids]
    return train, test


def train(
    cfg: TrainConfig,
    data_dir: str | Path,
    ckpt_out: str | Path | None = None,
    log_csv: str | Path | None = None,
    on_epoch: Callable[[int, float, float], None] | None = None,
) -> TrainResult:
    """Fine-tune the trainable partition of a freshly built model.

    Writes the final checkpoint to ``ckpt_out`` and the best-validation-Dice
    checkpoint to ``ckpt_out + '.best'``.
    """
    cfg.validate()
    start = time.perf_counter()
    s = cfg.model.input_size
    pairs, _ = load_split(data_dir, s, cfg.spacing_mm)

    rng = np.random.default_rng([cfg.seed, 1])
    order = rng.permutation(len(pairs))
    n_val = int(round(len(pairs) * cfg.val_fraction))
    if cfg.val_fraction > 0 and n_val == 0 and len(pairs) > 1:
        n_val = 1
    val_pairs = [preprocess(pairs[i], s) for i in sorted(order[:n_val])]
    train_pairs = [pairs[i] for i in sorted(order[n_val:])]

    model, store = build_model(cfg.model, seed=cfg.seed)
    snapshot = store.snapshot()
    trainable = {k: store[k] for k in store.trainable_names()}
    opt = AdamW(trainable, weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(train_pairs) / cfg.batch)
    total_steps = cfg.epochs * steps_per_epoch
    warmup = cfg.warmup_steps if cfg.warmup_steps >= 0 else int(round(cfg.warmup_frac * total_steps))
    sched = LrSchedule(cfg.lr, warmup, total_steps)

    result = TrainResult(model=model, store=store, initial_snapshot=snapshot)
    rows = []
    best = -1.0
    step = 0
    for epoch in range(cfg.epochs):
        perm = np.random.default_rng([cfg.seed, 2, epoch]).permutation(len(train_pairs))
        losses = []
        for b in range(steps_per_epoch):
            idx = perm[b * cfg.batch:(b + 1) * cfg.batch]
            batch = []
            for i in idx:
                p = train_pairs[i]
                if cfg.augment:
                    p = augment(p, [cfg.seed, 3, epoch, int(i)])
                batch.append(preprocess(p, s))
            images, masks = _stack(batch)
            store.zero_grad()
            loss = total_loss(forward(model, Tensor(images)).prob_map, masks, cfg.beta)
            value = loss.item()
            if not math.isfinite(value):
                op = _diagnose_nonfinite(model, images, masks, cfg.beta)
                raise NonFiniteError(
                    f"non-finite loss at epoch {epoch + 1}, step {step}; first non-finite op: {op}", op=op
                )
            loss.backward()
            opt.step(sched(step))
            step += 1
            losses.append(value)
        epoch_loss = float(np.mean(losses))
        vd = evaluate_model(model, val_pairs, batch=cfg.batch).mean().dice if val_pairs else float("nan")
        result.epoch_losses.append(epoch_loss)
        result.val_dice.append(vd)
        rows.append((epoch + 1, epoch_loss, vd, sched(step)))
        log.info("epoch %d loss %.5f val_dice %.2f", epoch + 1, epoch_loss, vd)
        if on_epoch is not None:
            on_epoch(epoch + 1, epoch_loss, vd)
        if ckpt_out is not None and val_pairs and vd > best:
            best = vd
            save_checkpoint(f"{ckpt_out}.best", store, cfg)

    if ckpt_out is not None:
        save_checkpoint(ckpt_out, store, cfg)
    if log_csv is not None:
        with open(log_csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss", "val_dice", "lr"])
            for e, lo, vd, lr in rows:
                w.writerow([e, f"{lo:.10g}", f"{vd:.6g}", f"{lr:.6g}"])
    result.seconds = time.perf_counter() - start
    return result


def evaluate(
    ckpt: str | Path,
    data_dir: str | Path,
    csv_out: str | Path | None = None,
    save_masks: str | Path | None = None,
) -> MetricsReport:
    model, _, cfg = load_checkpoint(ckpt)
    s = cfg.model.input_size
    _, test = load_split(data_dir, s, cfg.spacing_mm)
    if not test:
        raise DataError(f"split manifest in {data_dir} lists no test samples")
    report = evaluate_model(model, [preprocess(p, s) for p in test], batch=cfg.batch, save_masks=save_masks)
    if csv_out is not None:
        report.to_csv(csv_out)
    return report


# --------------------------------------------------------------------------
# gradient check

GROUPS = ("cnn", "pos_adapter", "feat_adapter", "cba", "decoder")


@dataclass
class GradcheckReport:
    max_rel_err: dict[str, float]
    tolerance: float
    checked: dict[str, int]
    skipped: dict[str, int] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(v < self.tolerance for v in self.max_rel_err.values())

    def failing(self) -> list[str]:
        return [k for k, v in self.max_rel_err.items() if not v < self.tolerance]

    def lines(self) -> list[str]:
        return [
            f"{k:<13s} max_rel_err={v:.3e} entries={self.checked[k]} "
            f"kinks_skipped={self.skipped.get(k, 0)} {'ok' if v < self.tolerance else 'FAIL'}"
            for k, v in self.max_rel_err.items()
        ]


def relative_error(analytic: float, numeric: float, floor: float = 1e-7) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(
    model_cfg: ModelConfig,
    tolerance: float = 1e-4,
    seed: int = 0,
    step: float = 1e-4,
    per_tensor: int = 4,
    batch: int = 2,
) -> GradcheckReport:
    """Central finite differences of the total loss vs. backward, per trainable group.

    Runs at 64-bit precision. Zero-initialised adapter outputs are first
    replaced by small random values so every path carries gradient. A probe
    whose +step and -step evaluations route some max-pool differently
    straddles a kink, where central differences are not a valid oracle; such
    coordinates are skipped (and counted) in favour of another random entry.
    """
    model_cfg.validate()
    if model_cfg.input_size > 64 or model_cfg.embed_dim > 32:
        raise ConfigError("gradcheck requires a tiny config (input_size <= 64, embed_dim <= 32)")
    model, store = build_model(model_cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng([seed, 99])
    for name in store.trainable_names():
        t = store[name]
        if not np.any(t.data):
            t.data = rng.standard_normal(t.shape) * 0.05

    s = model_cfg.input_size
    pairs = []
    for i in range(batch):
        img, mask = synth_sample(s, np.random.default_rng([seed, 7, i]))
        pairs.append(preprocess(SamplePair(img, mask), s))
    images, masks = _stack(pairs, np.float64)

    def probe() -> tuple[float, list[np.ndarray]]:
        with no_grad(), ops.record_routing() as routing:
            value = total_loss(forward(model, Tensor(images)).prob_map, masks, model_cfg.loss_beta).item()
        return value, routing

    store.zero_grad()
    loss = total_loss(forward(model, Tensor(images)).prob_map, masks, model_cfg.loss_beta)
    grads = store.gradients(loss.backward())

    errs = {g: 0.0 for g in GROUPS}
    counts = {g: 0 for g in GROUPS}
    skipped = {g: 0 for g in GROUPS}
    for name in store.trainable_names():
        group = name.split(".", 1)[0]
        flat = store[name].data.reshape(-1)
        done = 0
        for j in rng.permutation(flat.size)[: 4 * per_tensor]:
            if done == per_tensor:
                break
            orig = flat[j]
            flat[j] = orig + step
            up, r_up = probe()
            flat[j] = orig - step
            down, r_down = probe()
            flat[j] = orig
            if any(not np.array_equal(a, b) for a, b in zip(r_up, r_down)):
                skipped[group] += 1
                continue
            numeric = (up - down) / (2 * step)
            analytic = float(grads[name].reshape(-1)[j])
            errs[group] = max(errs[group], relative_error(analytic, numeric))
            counts[group] += 1
            done += 1
    present = [g for g in GROUPS if counts[g] or skipped[g]]
    return GradcheckReport(
        max_rel_err={g: errs[g] for g in present},
        tolerance=tolerance,
        checked={g: counts[g] for g in present},
        skipped={g: skipped[g] for g in present},
    )


def require_gradcheck(report: GradcheckReport) -> None:
    if not report.passed:
        raise CheckFailure("gradient check failed for: " + ", ".join(report.failing()))
