"""Semi-supervised training loop, evaluation and checkpoint I/O."""

from __future__ import annotations

import contextlib
import csv
import logging
import math
import os
import re
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt_io
from .data import (AnnotatedImage, DatasetSplit, augment, downsample_density,
                   generate_density_map)
from .decoder import parse_order
from .losses import LossReport, LossSwitches, LossWeights, total_loss
from .metrics import MetricsReport, aggregate
from .model import ModelConfig, TreeCounter, preset

log = logging.getLogger(__name__)

OUTPUT_STRIDE = 4
PIXEL_MEAN = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
PIXEL_STD = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 16
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    crop: int = 256
    lam: float = 1.0
    crops: int = 4
    sigma: float = 4.0
    perturb_order: str = "P1,P2,P3"
    caff_variant: str = "ca"
    taus: str = "1,2,3"
    seed: int = 0
    labeled_fraction: float = 1.0
    preset: str = "full"
    max_steps: int = 0  # > 0 caps the run regardless of epochs
    unlabeled_ratio: float = 1.0
    ot_reg: float = 10.0
    ot_iters: int = 100
    ot_unroll: int = 10
    val_fraction: float = 0.1
    eval_every: int = 1
    perturb_labeled: bool = True
    clip_norm: float = 0.0
    freeze_unlabeled_norm: bool = True
    dropout_rate: float = 0.3
    switches: str = ""  # comma-separated ablation switch names

    def __post_init__(self):
        for name in ("epochs", "batch_size", "learning_rate", "crop", "sigma", "crops"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.lam < 0:
            raise ValueError("weight_decay and lam must be non-negative")
        if not 0 < self.labeled_fraction <= 1:
            raise ValueError("labeled_fraction must be in (0, 1]")
        parse_order(self.perturb_order)
        for s in split_switches(self.switches):
            canonical_switch(s)

    def model_config(self) -> ModelConfig:
        return preset(self.preset, perturb_order=tuple(parse_order(self.perturb_order)),
                      caff_variant=self.caff_variant,
                      taus=tuple(int(t) for t in str(self.taus).split(",")),
                      dropout_rate=self.dropout_rate, ref_size=self.crop)

    def loss_weights(self) -> LossWeights:
        return LossWeights(lam=self.lam, ot_reg=self.ot_reg, ot_iters=self.ot_iters,
                           ot_unroll=self.ot_unroll, crops=self.crops)

    def loss_switches(self) -> LossSwitches:
        sw = LossSwitches()
        for s in split_switches(self.switches):
            name = canonical_switch(s)
            if name in LOSS_SWITCHES:
                sw = replace(sw, **LOSS_SWITCHES[name])
        return sw


# -- ablation switches --------------------------------------------------------

LOSS_SWITCHES = {
    "w/o LTC": {"consistency": False},
    "w/o LTR": {"ranking": False},
    "w/o GTC": {"global_count": False},
    "w/ L2": {"l2_pixel": True},
    "w/ LTC-JS": {"divergence": "js"},
    "w/ STC": {"single_crop_consistency": True},
    "w/ STR": {"single_scale_ranking": True},
}
CONFIG_SWITCHES = {
    "w/o CAFF": {"caff_variant": "off"},
    "CAFF w/o CA": {"caff_variant": "none"},
    "CAFF w/ SA": {"caff_variant": "sa"},
    "CAFF w/ SA+CA": {"caff_variant": "sa+ca"},
    "tau=1": {"taus": "1,1,1"},
    "tau=2": {"taus": "2,2,2"},
    "tau=3": {"taus": "3,3,3"},
    "tau=1,2,3": {"taus": "1,2,3"},
    "supervised": {"lam": 0.0},
}
_ORDER_RE = re.compile(r"^order=(P[123]),(P[123]),(P[123])$")


def _norm(s: str) -> str:
    return re.sub(r"[\s_\-]+", "", s).lower()


def valid_switches() -> list[str]:
    return list(LOSS_SWITCHES) + list(CONFIG_SWITCHES) + ["order=Pa,Pb,Pc"]


def split_switches(spec: str | Sequence[str]) -> list[str]:
    if isinstance(spec, str):
        return [s.strip() for s in spec.split(";") if s.strip()]
    return [s.strip() for s in spec if s.strip()]


def canonical_switch(name: str) -> str:
    m = _ORDER_RE.match(name.replace(" ", "").upper().replace("ORDER", "order"))
    if m:
        parse_order(m.groups())
        return "order=" + ",".join(m.groups())
    for known in list(LOSS_SWITCHES) + list(CONFIG_SWITCHES):
        if _norm(known) == _norm(name):
            return known
    raise ValueError(f"unknown switch {name!r}; valid switches: {', '.join(valid_switches())}")


def apply_switches(config: TrainConfig, switches: Sequence[str]) -> TrainConfig:
    """Config for one ablation variant (switches joined with ';')."""
    names = [canonical_switch(s) for s in switches]
    updates: dict = {}
    for n in names:
        if n in CONFIG_SWITCHES:
            updates.update(CONFIG_SWITCHES[n])
        elif n.startswith("order="):
            updates["perturb_order"] = n[len("order="):]
    existing = split_switches(config.switches)
    return replace(config, switches=";".join(existing + names), **updates)


# -- config files ---------------------------------------------------------------

def _coerce(f, raw: str):
    if f.type in (bool, "bool"):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if f.type in (int, "int"):
        return int(raw)
    if f.type in (float, "float"):
        return float(raw)
    return raw.strip()


def read_config(path: str | os.PathLike, **overrides) -> TrainConfig:
    known = {f.name: f for f in fields(TrainConfig)}
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in known:
                raise ValueError(f"{path}:{lineno}: unknown key {k!r}")
            values[k] = _coerce(known[k], v)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def write_config(path: str | os.PathLike, config: TrainConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in asdict(config).items():
            fh.write(f"{k}={v}\n")


# -- batching -----------------------------------------------------------------

def to_input(pixels: np.ndarray | Sequence[np.ndarray]) -> torch.Tensor:
    arr = np.stack(pixels) if isinstance(pixels, (list, tuple)) else np.asarray(pixels)
    if arr.ndim == 3:
        arr = arr[None]
    x = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(0, 3, 1, 2)
    return (x - PIXEL_MEAN) / PIXEL_STD


def gt_map(points, h: int, w: int, sigma: float) -> np.ndarray:
    """Ground truth at output resolution; pads to a multiple of the stride with zeros."""
    hp = -(-h // OUTPUT_STRIDE) * OUTPUT_STRIDE
    wp = -(-w // OUTPUT_STRIDE) * OUTPUT_STRIDE
    d = generate_density_map(points, h, w, sigma)
    if (hp, wp) != (h, w):
        d.values = np.pad(d.values, ((0, hp - h), (0, wp - w)))
    return downsample_density(d, OUTPUT_STRIDE).values


@dataclass
class Batch:
    images: torch.Tensor
    maps: torch.Tensor | None = None
    counts: torch.Tensor | None = None
    ids: list[str] = field(default_factory=list)

    def __len__(self):
        return self.images.shape[0]


def make_batch(images: Sequence[AnnotatedImage], crop: int, sigma: float,
               rng: np.random.Generator, labeled: bool = True) -> Batch:
    crops = [augment(im, min(crop, im.height, im.width), int(rng.integers(2 ** 31)))
             for im in images]
    x = to_input([c.pixels for c in crops])
    if not labeled:
        return Batch(x, ids=[c.id for c in crops])
    maps = np.stack([gt_map(c.points, c.height, c.width, sigma) for c in crops])
    counts = torch.tensor([float(c.count) for c in crops])
    return Batch(x, torch.from_numpy(maps).float(), counts, [c.id for c in crops])


# -- training -------------------------------------------------------------------

@contextlib.contextmanager
def frozen_norm_stats(model: torch.nn.Module):
    """Batch statistics still normalize, but running estimates stay put."""
    bns = [m for m in model.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
    saved = [m.momentum for m in bns]
    for m in bns:
        m.momentum = 0.0
    try:
        yield
    finally:
        for m, mom in zip(bns, saved):
            m.momentum = mom


def train_step(model: TreeCounter, optimizer: torch.optim.Optimizer,
               labeled: Batch | None, unlabeled: Batch | None,
               weights: LossWeights | None = None, switches: LossSwitches | None = None,
               perturb_labeled: bool = True, clip_norm: float = 0.0,
               freeze_unlabeled_norm: bool = True) -> LossReport:
    weights = weights or LossWeights()
    labeled = labeled if labeled is not None and len(labeled) else None
    unlabeled = unlabeled if unlabeled is not None and len(unlabeled) and weights.lam > 0 else None
    if labeled is None and unlabeled is None:
        raise ValueError("train_step needs a non-empty batch")
    model.train()
    lab_pred = unl_pred = None
    if labeled is not None:
        model.set_perturbation(perturb_labeled)
        try:
            lab_pred = tuple(model(labeled.images))
        finally:
            model.set_perturbation(True)
    if unlabeled is not None:
        # perturbed unlabeled features would skew the eval-time norm statistics
        with frozen_norm_stats(model) if freeze_unlabeled_norm else contextlib.nullcontext():
            unl_pred = tuple(model(unlabeled.images))
    total, report = total_loss(lab_pred, labeled.maps if labeled else None,
                               labeled.counts if labeled else None, unl_pred, weights, switches)
    for k in LossReport.FIELDS:
        if not math.isfinite(getattr(report, k)):
            raise TrainingDiverged(f"non-finite loss term {k} = {getattr(report, k)}")
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    if clip_norm > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), clip_norm)
    optimizer.step()
    return report


def make_optimizer(model: TreeCounter, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=config.learning_rate,
                            weight_decay=config.weight_decay)


@dataclass
class Checkpoint:
    path: Path
    model: TreeCounter
    config: TrainConfig
    epoch: int
    best_val_mae: float | None
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, model: TreeCounter, optimizer: torch.optim.Optimizer | None,
                    config: TrainConfig, epoch: int, best_val_mae: float | None = None,
                    extra: dict | None = None) -> None:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    opt_meta = None
    if optimizer is not None:
        sd = optimizer.state_dict()
        for idx, st in sd["state"].items():
            for k, v in st.items():
                tensors[f"optim.{idx}.{k}"] = torch.as_tensor(v)
        opt_meta = {"param_groups": sd["param_groups"]}
    meta = {
        "train_config": asdict(config),
        "model_config": model.config.to_dict(),
        "phases": ckpt_io.phase_header(model.config),
        "epoch": epoch,
        "best_val_mae": best_val_mae,
        "optimizer": opt_meta,
        **(extra or {}),
    }
    ckpt_io.save(path, tensors, meta)


def load_checkpoint(path, with_optimizer: bool = False):
    """Model (eval mode) plus metadata; optionally a restored Adam optimizer."""
    tensors, meta = ckpt_io.load(path)
    model = TreeCounter(ModelConfig.from_dict(meta["model_config"]))
    state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    model.load_state_dict(state)
    model.eval()
    config = TrainConfig(**meta["train_config"])
    ck = Checkpoint(Path(path), model, config, meta["epoch"], meta.get("best_val_mae"), meta)
    if not with_optimizer:
        return ck
    opt = make_optimizer(model, config)
    if meta.get("optimizer"):
        st: dict = {}
        for k, v in tensors.items():
            if k.startswith("optim."):
                _, idx, name = k.split(".", 2)
                st.setdefault(int(idx), {})[name] = v.float() if name == "step" else v
        opt.load_state_dict({"state": st, "param_groups": meta["optimizer"]["param_groups"]})
    return ck, opt


def _pick(images: Sequence[AnnotatedImage], ids: Sequence[str]) -> list[AnnotatedImage]:
    by_id = {im.id: im for im in images}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise ValueError(f"split references unknown ids: {missing[:5]}")
    return [by_id[i] for i in ids]


def seed_everything(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def fit(config: TrainConfig, images: Sequence[AnnotatedImage], split: DatasetSplit,
        out_dir: str | os.PathLike, val_images: Sequence[AnnotatedImage] | None = None,
        final_eval: Sequence[AnnotatedImage] | None = None) -> Checkpoint:
    """Train from scratch; returns the best (or last, without validation) checkpoint.

    ``final_eval`` images are evaluated with the returned weights and the
    report is stored in the checkpoint metadata under ``final_eval``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = seed_everything(config.seed)
    labeled = _pick(images, split.labeled)
    unlabeled = [replace(im, points=np.zeros((0, 2)), is_labeled=False)
                 for im in _pick(images, split.unlabeled)]
    if val_images is None and config.val_fraction > 0:
        n_val = int(math.floor(config.val_fraction * len(labeled) + 1e-9))
        if n_val >= 1 and len(labeled) - n_val >= 1:
            order = np.random.default_rng(config.seed + 1).permutation(len(labeled))
            val_images = [labeled[i] for i in order[:n_val]]
            labeled = [labeled[i] for i in sorted(order[n_val:])]
    if not labeled:
        raise ValueError("no labeled images to train on")

    model = TreeCounter(config.model_config())
    optimizer = make_optimizer(model, config)
    weights, switches = config.loss_weights(), config.loss_switches()
    use_unlabeled = bool(unlabeled) and config.lam > 0
    B = config.batch_size
    steps_per_epoch = math.ceil(len(labeled) / B)
    total_steps = config.max_steps or config.epochs * steps_per_epoch
    n_epochs = math.ceil(total_steps / steps_per_epoch)
    n_unl = max(1, int(round(config.unlabeled_ratio * B)))
    unl_order: list[int] = []

    best = None
    best_path = out_dir / "best.ckpt"
    log_path = out_dir / "train_log.csv"
    step = 0
    with open(log_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "epoch", *LossReport.FIELDS],
                                lineterminator="\n")
        writer.writeheader()
        for epoch in range(n_epochs):
            perm = rng.permutation(len(labeled))
            for start in range(0, len(labeled), B):
                if step >= total_steps:
                    break
                lab = make_batch([labeled[i] for i in perm[start:start + B]], config.crop,
                                 config.sigma, rng)
                unl = None
                if use_unlabeled:
                    idx = []
                    while len(idx) < n_unl:
                        if not unl_order:
                            unl_order = list(rng.permutation(len(unlabeled)))
                        idx.append(unl_order.pop(0))
                    unl = make_batch([unlabeled[i] for i in idx], config.crop, config.sigma,
                                     rng, labeled=False)
                rep = train_step(model, optimizer, lab, unl, weights, switches,
                                 config.perturb_labeled, config.clip_norm,
                                 config.freeze_unlabeled_norm)
                writer.writerow({"step": step, "epoch": epoch, **rep.row()})
                for flag in rep.flags:
                    log.debug("step %d: %s", step, flag)
                step += 1
            fh.flush()
            last = epoch == n_epochs - 1
            if val_images and ((epoch + 1) % config.eval_every == 0 or last):
                mae = evaluate(model, val_images, config.sigma).E_MAE
                log.info("epoch %d val E_MAE %.4f", epoch, mae)
                if best is None or mae < best:
                    best = mae
                    save_checkpoint(best_path, model, optimizer, config, epoch, best)

    last_path = out_dir / "last.ckpt"
    save_checkpoint(last_path, model, optimizer, config, n_epochs - 1, best)
    path = best_path if best is not None else last_path
    ck = load_checkpoint(path)
    if final_eval is not None:
        ck.meta["final_eval"] = evaluate(ck.model, final_eval, config.sigma).summary()
        tensors, meta = ckpt_io.load(path)
        ckpt_io.save(path, tensors, {**meta, "final_eval": ck.meta["final_eval"]})
    return ck


# -- inference / evaluation -------------------------------------------------------

@torch.no_grad()
def predict_image(model: TreeCounter, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Eval-mode D1 map cropped to ceil(H/4) x ceil(W/4), all three maps, token counts.

    Inputs whose sides are not multiples of 32 are reflection-padded; the
    padded margin is cropped from the output.
    """
    model.eval()
    h, w = pixels.shape[:2]
    x = to_input(pixels)
    m = model.encoder.total_stride
    ph, pw = (-h) % m, (-w) % m
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "replicate"
        x = F.pad(x, (0, pw, 0, ph), mode=mode)
    pred = model(x)
    oh, ow = -(-h // OUTPUT_STRIDE), -(-w // OUTPUT_STRIDE)
    maps = pred.maps[0, :, :oh, :ow].numpy()
    return maps[0], maps, pred.counts[0].numpy()


def evaluate(model_or_ckpt, images: Sequence[AnnotatedImage], sigma: float | None = None,
             peak_threshold: float | None = None, match_radius: float | None = None) -> MetricsReport:
    if isinstance(model_or_ckpt, (str, os.PathLike)):
        model_or_ckpt = load_checkpoint(model_or_ckpt)
    if isinstance(model_or_ckpt, Checkpoint):
        sigma = sigma or model_or_ckpt.config.sigma
        model = model_or_ckpt.model
    else:
        model = model_or_ckpt
    sigma = sigma or 4.0
    if len(images) == 0:
        raise ValueError("empty evaluation set")
    est, gts, pts = [], [], []
    for im in images:
        d1, _, _ = predict_image(model, im.pixels)
        g = gt_map(im.points, im.height, im.width, sigma)
        # GAME needs sides divisible by 8
        ph, pw = (-d1.shape[0]) % 8, (-d1.shape[1]) % 8
        est.append(np.pad(d1.astype(np.float64), ((0, ph), (0, pw))))
        gts.append(np.pad(g, ((0, ph), (0, pw))))
        pts.append(im.points)
    return aggregate(est, gts, pts, OUTPUT_STRIDE, sigma, peak_threshold, match_radius,
                     ids=[im.id for im in images])
