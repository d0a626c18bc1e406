"""Training loop, evaluation pipelines, uncertainty/latent exports, and
model accounting. Everything here is seed-reproducible on CPU."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from . import metrics
from .data import SegmentationCase, gaussian_blur, load_cases, preprocess, random_patch
from .losses import LossConfig, elbo_loss
from .network import (
    ModelConfig,
    SegmentationModel,
    load_checkpoint,
    save_checkpoint,
)

VAL_FRACTION = 0.2


@dataclass
class TrainConfig:
    batch_size: int = 24
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 150
    lr_decay: float = 1e-4
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "lr", "momentum", "weight_decay", "epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr_decay < 0:
            raise ValueError("lr_decay must be >= 0")


@dataclass
class EvalReport:
    """Per-case, per-class (and per-sample) records plus aggregates."""

    mode: str
    records: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)

    def recompute_aggregates(self) -> dict:
        agg = {}
        keys = set()
        for r in self.records:
            keys.update(k for k, v in r.items() if isinstance(v, float))
        for key in sorted(keys):
            vals = [r[key] for r in self.records if key in r and not math.isnan(r[key])]
            n_undef = sum(1 for r in self.records if key in r and math.isnan(r[key]))
            if vals:
                agg[key] = {
                    "mean": float(np.mean(vals)),
                    "variance": float(np.var(vals)),
                    "count": len(vals),
                    "undefined": n_undef,
                }
        return agg

    def write(self, path) -> None:
        path = Path(path)
        with path.open("w") as f:
            f.write(json.dumps({"mode": self.mode, "aggregates": self.aggregates}) + "\n")
            for r in self.records:
                f.write(json.dumps(r, sort_keys=True) + "\n")


def _onehot(ann: np.ndarray, class_count: int) -> torch.Tensor:
    t = torch.from_numpy(ann).long()
    return torch.nn.functional.one_hot(t, class_count).movedim(-1, 0).float()


def _split(cases):
    cases = sorted(cases, key=lambda c: c.case_id)
    n_val = max(1, int(round(VAL_FRACTION * len(cases)))) if len(cases) > 1 else 0
    n_train = len(cases) - n_val
    return cases[:n_train], cases[n_train:]


def _mean_dice(model: SegmentationModel, prepared) -> float:
    """Prior-mode Dice against every annotation, averaged over foreground
    classes, annotations and cases."""
    scores = []
    for img, anns in prepared:
        pred = model.predict_prior(img)
        for ann in anns:
            for c in range(1, model.config.class_count):
                scores.append(metrics.dice_coefficient(pred, ann, c))
    return float(np.mean(scores)) if scores else float("nan")


def default_lr_schedule(lr0: float, decay: float):
    """Inverse-time decay: lr0 / (1 + decay * step)."""

    def schedule(step: int) -> float:
        return lr0 / (1.0 + decay * step)

    return schedule


def train(cfg: TrainConfig, dataset, out_dir, lr_schedule=None):
    """Train on a list of cases; returns (best checkpoint path, history).

    One annotation is sampled uniformly per case per step. Writes
    `checkpoint_best.pt`, `checkpoint_final.pt` and `history.json` into
    out_dir. Aborts on a non-finite loss.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = list(dataset)
    if not dataset:
        raise ValueError("dataset is empty")

    torch.manual_seed(cfg.seed)
    model = SegmentationModel(cfg.model)
    generator = torch.Generator().manual_seed(cfg.seed)
    optimizer = torch.optim.SGD(
        model.parameters(), lr=cfg.lr, momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )
    schedule = lr_schedule or default_lr_schedule(cfg.lr, cfg.lr_decay)

    train_cases, val_cases = _split(dataset)
    K = cfg.model.class_count

    def prepare(cases):
        out = []
        for case in cases:
            img, anns = preprocess(case, cfg.model.input_size, cfg.model.output_size)
            out.append((img, anns))
        return out

    train_prep = prepare(train_cases)
    val_prep = prepare(val_cases)

    history = []
    best_dice = -1.0
    best_path = out_dir / "checkpoint_best.pt"
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        order = torch.randperm(len(train_prep), generator=generator).tolist()
        sums = {}
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xs, ys = [], []
            for i in idx:
                img, anns = train_prep[i]
                k = int(torch.randint(len(anns), (1,), generator=generator))
                xs.append(torch.from_numpy(img))
                ys.append(_onehot(anns[k], K))
            x = torch.stack(xs)
            y = torch.stack(ys)

            for group in optimizer.param_groups:
                group["lr"] = schedule(step)
            optimizer.zero_grad()
            try:
                trace = model.forward_train(x, y, generator)
                total, breakdown = elbo_loss(trace, y, cfg.loss)
                finite = bool(torch.isfinite(total))
            except ValueError as err:
                if "non-finite" not in str(err):
                    raise
                finite = False
            if not finite:
                raise RuntimeError(
                    f"training diverged: non-finite loss at step {step} "
                    f"(epoch {epoch})"
                )
            total.backward()
            optimizer.step()
            step += 1
            n_batches += 1
            sums["total"] = sums.get("total", 0.0) + float(total.detach())
            for k_, v in breakdown.items():
                sums[k_] = sums.get(k_, 0.0) + float(v.detach())

        entry = {k: v / n_batches for k, v in sums.items()}
        entry["epoch"] = epoch
        if val_prep:
            val_dice = _mean_dice(model, val_prep)
            entry["val_dice"] = val_dice
            if val_dice > best_dice:
                best_dice = val_dice
                save_checkpoint(model, best_path)
        history.append(entry)

    save_checkpoint(model, out_dir / "checkpoint_final.pt")
    if best_dice < 0:
        save_checkpoint(model, best_path)
    (out_dir / "history.json").write_text(json.dumps(history, indent=2))
    return best_path, history


def _as_model(checkpoint) -> SegmentationModel:
    if isinstance(checkpoint, SegmentationModel):
        return checkpoint
    return load_checkpoint(checkpoint)


def evaluate(
    checkpoint, dataset, mode: str = "prior", n_samples: int = 10, seed: int = 0
) -> EvalReport:
    """Prior mode: one deterministic prediction per case; sample mode:
    n_samples draws with per-sample metrics plus GED^2 / NCC against all
    annotations."""
    if mode not in ("prior", "sample"):
        raise ValueError(f"unknown mode {mode!r}")
    model = _as_model(checkpoint)
    K = model.config.class_count
    records = []
    for case_index, case in enumerate(sorted(dataset, key=lambda c: c.case_id)):
        labels = {int(v) for ann in case.annotations for v in np.unique(ann)}
        if max(labels) >= K:
            raise ValueError(
                f"case {case.case_id}: label ids {sorted(labels)} exceed model "
                f"class count {K}"
            )
        img, anns = preprocess(case, model.config.input_size, model.config.output_size)
        spacing = case.spacing
        if mode == "prior":
            preds = model.predict_prior(img)[None]
        else:
            preds = model.predict_samples(img, n_samples, seed=seed + case_index)
        for s_idx, pred in enumerate(preds):
            for c in range(1, K):
                rec = {
                    "case_id": case.case_id,
                    "class_id": c,
                    "dice": float(
                        np.mean([metrics.dice_coefficient(pred, a, c) for a in anns])
                    ),
                    "hd": _mean_hd(pred, anns, c, 100.0, spacing),
                    "hd95": _mean_hd(pred, anns, c, 95.0, spacing),
                }
                if mode == "sample":
                    rec["sample_index"] = s_idx
                records.append(rec)
        if mode == "sample":
            pred_set = metrics.SampleSet(preds)
            truth_set = metrics.SampleSet(np.stack(anns))
            for c in range(1, K):
                records.append(
                    {
                        "case_id": case.case_id,
                        "class_id": c,
                        "ged2": metrics.ged_squared(pred_set, truth_set, classes=[c]),
                        "ncc": metrics.ncc_score(pred_set, truth_set, classes=[c]),
                        "diversity": metrics.sample_diversity(pred_set, classes=[c]),
                    }
                )
    report = EvalReport(mode=mode if mode == "prior" else f"sample({n_samples})")
    report.records = records
    report.aggregates = report.recompute_aggregates()
    return report


def _mean_hd(pred, anns, c, percentile, spacing) -> float:
    vals = [
        metrics.hausdorff_distance(pred, a, c, percentile=percentile, spacing=spacing)
        for a in anns
    ]
    defined = [v for v in vals if not math.isnan(v)]
    return float(np.mean(defined)) if defined else float("nan")


def _save_heatmap(values: np.ndarray, path, cmap: str = "magma") -> None:
    import matplotlib
    from PIL import Image

    lo, hi = float(values.min()), float(values.max())
    norm = (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)
    rgba = (matplotlib.colormaps[cmap](norm) * 255).astype(np.uint8)
    Image.fromarray(rgba[..., :3]).save(path)


def export_uncertainty(checkpoint, case, n_samples, seed, out_path):
    """Sample n_samples segmentations and write the normalized variance map
    as <out_path>.npy plus a magma-colormapped <out_path>.png."""
    if n_samples < 2:
        raise ValueError(f"need >= 2 samples, got {n_samples}")
    model = _as_model(checkpoint)
    img, _ = preprocess(case, model.config.input_size, model.config.output_size)
    preds = model.predict_samples(img, n_samples, seed=seed)
    umap = metrics.variance_map(
        metrics.SampleSet(preds), class_count=model.config.class_count
    )
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    # explicit concatenation: out_path stems may contain dots (e.g. "blur_0.5")
    np.save(out_path.parent / (out_path.name + ".npy"), umap.values)
    _save_heatmap(umap.values, out_path.parent / (out_path.name + ".png"))
    return umap


def ood_battery(checkpoint, case, kinds, params, seed, out_dir):
    """Run the out-of-distribution perturbations and report mean
    uncertainties; the patch kind additionally reports the inside/outside
    disagreement over its own mask."""
    model = _as_model(checkpoint)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_samples = int(params.get("n_samples", 10))
    report = {}
    for kind in kinds:
        if kind == "blur":
            entries = []
            for sigma in params.get("sigmas", (0.0, 1.0, 2.0, 4.0)):
                blurred = SegmentationCase(
                    image=gaussian_blur(case.image, sigma),
                    annotations=case.annotations,
                    case_id=f"{case.case_id}_blur{sigma}",
                    spacing=case.spacing,
                )
                umap = export_uncertainty(
                    model, blurred, n_samples, seed, out_dir / f"blur_{sigma}"
                )
                entries.append(
                    {"sigma": float(sigma), "mean_uncertainty": float(umap.values.mean())}
                )
            report["blur"] = entries
        elif kind == "patch":
            rng = np.random.default_rng(seed)
            patched_img, mask = random_patch(
                case.image, params.get("ratio", 0.1), rng
            )
            patched = SegmentationCase(
                image=patched_img,
                annotations=case.annotations,
                case_id=f"{case.case_id}_patch",
                spacing=case.spacing,
            )
            umap = export_uncertainty(model, patched, n_samples, seed, out_dir / "patch")
            mask_t = _resize_mask(mask, umap.values.shape)
            inside, outside = metrics.region_disagreement(umap, mask_t)
            report["patch"] = {
                "ratio": float(params.get("ratio", 0.1)),
                "inside_mean": inside,
                "outside_mean": outside,
            }
        elif kind == "external":
            ext = list(load_cases(params["external_root"]))
            entries = []
            for ext_case in ext:
                umap = export_uncertainty(
                    model, ext_case, n_samples, seed,
                    out_dir / f"external_{ext_case.case_id}",
                )
                entries.append(
                    {
                        "case_id": ext_case.case_id,
                        "mean_uncertainty": float(umap.values.mean()),
                    }
                )
            report["external"] = entries
        else:
            raise ValueError(f"unknown perturbation kind {kind!r}")
    (out_dir / "ood_report.json").write_text(json.dumps(report, indent=2))
    return report


def _resize_mask(mask: np.ndarray, shape) -> np.ndarray:
    if mask.shape == tuple(shape):
        return mask
    import cv2

    out = cv2.resize(
        mask.astype(np.uint8), (shape[1], shape[0]), interpolation=cv2.INTER_NEAREST
    )
    return out.astype(bool)


def count_parameters(model_or_config):
    """(total trainable scalar count, per-module breakdown)."""
    if isinstance(model_or_config, ModelConfig):
        model = SegmentationModel(model_or_config)
    else:
        model = _as_model(model_or_config)
    table = {}
    total = 0
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        module = name.split(".")[0]
        table[module] = table.get(module, 0) + p.numel()
        total += p.numel()
    return total, table


def export_latent_stats(checkpoint, case, out_dir):
    """Write channel-averaged mean and log-variance maps per level as raw
    arrays plus grayscale images; returns the list of written image paths."""
    model = _as_model(checkpoint)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    img, _ = preprocess(case, model.config.input_size, model.config.output_size)
    _, q_levels, _ = model.prior_trace(img)
    written = []
    for i, g in enumerate(q_levels):
        for tag, tensor in (("mean", g.mean), ("log_var", g.log_var)):
            values = tensor[0].mean(dim=0).cpu().numpy()
            np.save(out_dir / f"level{i}_{tag}.npy", values)
            png = out_dir / f"level{i}_{tag}.png"
            _save_heatmap(values, png, cmap="viridis")
            written.append(png)
    return written
