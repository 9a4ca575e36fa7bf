"""Filter-normalized random directions and retrieval-metric surfaces.

A direction is one Gaussian draw per model parameter, rescaled so that every
filter (dim-0 slice of a tensor with 2 or more dimensions) has the same norm
as the matching model filter; 1-D parameters (batch-norm scales and shifts,
biases) are rescaled as whole vectors. The surface evaluates the retrieval
metric at theta + alpha * delta + beta * eta over a grid, restoring the
model exactly afterwards. Batch-norm running statistics are buffers, never
perturbed.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from matplotlib.figure import Figure

from .data import AugmentConfig, Dataset, Sample
from .evaluation import cosine_distance, evaluate
from .features import extract_all

METRIC_TAGS = ("mAP", "rank1")


@dataclass
class Direction:
    """Per-parameter perturbation tensors, keyed by parameter name."""

    arrays: dict[str, torch.Tensor]
    seed: int


@dataclass
class EvalBundle:
    """Fixed query/gallery subset a surface is measured on."""

    query: list[Sample]
    gallery: list[Sample]
    augment: AugmentConfig
    batch_size: int = 32

    def __post_init__(self):
        if not self.query or not self.gallery:
            raise ValueError("evaluation bundle needs at least one query and one gallery sample")


@dataclass
class LandscapeGrid:
    alphas: np.ndarray
    betas: np.ndarray
    values: np.ndarray
    metric_tag: str

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=np.float64)
        self.betas = np.asarray(self.betas, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.alphas.size, self.betas.size):
            raise ValueError(f"values shape {self.values.shape} does not match grid "
                             f"({self.alphas.size}, {self.betas.size})")
        if self.metric_tag not in METRIC_TAGS:
            raise ValueError(f"metric_tag must be one of {METRIC_TAGS}, got {self.metric_tag!r}")


def make_eval_bundle(dataset: Dataset, augment: AugmentConfig, max_query: int = 200,
                     max_gallery: int = 500, batch_size: int = 32) -> EvalBundle:
    """First max_query/max_gallery samples of the evaluation splits."""
    if max_query < 1 or max_gallery < 1:
        raise ValueError("subset caps must be >= 1")
    return EvalBundle(query=dataset.query[:max_query], gallery=dataset.gallery[:max_gallery],
                      augment=augment, batch_size=batch_size)


def random_direction(model, seed: int) -> Direction:
    """Seeded Gaussian direction, filter-normalized against the model."""
    gen = torch.Generator().manual_seed(seed)
    arrays = {}
    for name, param in model.named_parameters():
        p = param.detach()
        d = torch.empty_like(p).normal_(0.0, 1.0, generator=gen)
        if p.dim() >= 2:
            d_flat = d.flatten(1)
            p_flat = p.flatten(1)
            d_norm = d_flat.norm(dim=1, keepdim=True)
            p_norm = p_flat.norm(dim=1, keepdim=True)
            scale = torch.where(d_norm > 0, p_norm / d_norm.clamp_min(1e-30),
                                torch.zeros_like(d_norm))
            arrays[name] = (d_flat * scale).reshape(p.shape)
        else:
            d_norm = d.norm()
            p_norm = p.norm()
            if d_norm > 0 and p_norm > 0:
                arrays[name] = d * (p_norm / d_norm)
            else:
                arrays[name] = torch.zeros_like(p)
    return Direction(arrays=arrays, seed=seed)


def _check_direction(model, direction: Direction, label: str) -> None:
    params = dict(model.named_parameters())
    if set(direction.arrays) != set(params):
        missing = sorted(set(params) - set(direction.arrays))
        extra = sorted(set(direction.arrays) - set(params))
        raise ValueError(f"direction {label} does not align with the model "
                         f"(missing {missing}, extra {extra})")
    for name, param in params.items():
        if direction.arrays[name].shape != param.shape:
            raise ValueError(f"direction {label} entry {name!r} has shape "
                             f"{tuple(direction.arrays[name].shape)}, parameter has "
                             f"{tuple(param.shape)}")


def _grid_metrics(model, bundle: EvalBundle) -> dict[str, float]:
    query = extract_all(model, bundle.query, bundle.augment, bundle.batch_size, "landscape")
    gallery = extract_all(model, bundle.gallery, bundle.augment, bundle.batch_size, "landscape")
    dist = cosine_distance(query, gallery)
    report = evaluate(dist, query.person_ids, query.camera_ids,
                      gallery.person_ids, gallery.camera_ids, ranks=(1,))
    return {"mAP": report.mAP, "rank1": report.cmc[1]}


def performance_surfaces(model, delta: Direction, eta: Direction, alphas, betas,
                         bundle: EvalBundle,
                         metrics: tuple[str, ...] = ("mAP", "rank1"),
                         ) -> dict[str, LandscapeGrid]:
    """Metric grids over theta + alpha*delta + beta*eta, one model sweep.

    Parameters are rebuilt from the snapshot at every grid point (no drift)
    and restored bitwise at the end. Non-finite or unevaluable points are
    recorded as 0 with a warning.
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    betas = np.asarray(betas, dtype=np.float64)
    if alphas.ndim != 1 or betas.ndim != 1 or alphas.size == 0 or betas.size == 0:
        raise ValueError("alphas and betas must be non-empty 1-D sequences")
    if not metrics or any(m not in METRIC_TAGS for m in metrics):
        raise ValueError(f"metrics must be a non-empty subset of {METRIC_TAGS}, got {metrics}")
    _check_direction(model, delta, "delta")
    _check_direction(model, eta, "eta")

    params = dict(model.named_parameters())
    base = {name: p.detach().clone() for name, p in params.items()}
    values = {m: np.zeros((alphas.size, betas.size)) for m in metrics}
    model.eval()
    try:
        for ai, alpha in enumerate(alphas):
            for bi, beta in enumerate(betas):
                with torch.no_grad():
                    for name, p in params.items():
                        p.copy_(base[name] + float(alpha) * delta.arrays[name]
                                + float(beta) * eta.arrays[name])
                try:
                    point = _grid_metrics(model, bundle)
                except ValueError as exc:
                    warnings.warn(f"grid point ({alpha}, {beta}) not evaluable ({exc}); "
                                  "recording 0")
                    point = {m: 0.0 for m in metrics}
                for m in metrics:
                    v = point[m]
                    if not math.isfinite(v):
                        warnings.warn(f"non-finite {m} at grid point ({alpha}, {beta}); "
                                      "recording 0")
                        v = 0.0
                    values[m][ai, bi] = v
    finally:
        with torch.no_grad():
            for name, p in params.items():
                p.copy_(base[name])
    return {m: LandscapeGrid(alphas.copy(), betas.copy(), values[m], m) for m in metrics}


def performance_surface(model, delta: Direction, eta: Direction, alphas, betas,
                        bundle: EvalBundle, metric: str = "mAP") -> LandscapeGrid:
    """Single-metric convenience wrapper around performance_surfaces."""
    return performance_surfaces(model, delta, eta, alphas, betas, bundle,
                                metrics=(metric,))[metric]


def near_center_area(grid: LandscapeGrid, threshold: float = 0.9) -> float:
    """Fraction of grid cells at or above threshold times the center value.

    The center is the grid point nearest (alpha, beta) = (0, 0). Returns 0
    when the center value is not positive.
    """
    ai = int(np.argmin(np.abs(grid.alphas)))
    bi = int(np.argmin(np.abs(grid.betas)))
    center = grid.values[ai, bi]
    if not math.isfinite(center) or center <= 0:
        return 0.0
    return float(np.mean(grid.values >= threshold * center))


def grid_to_csv(grid: LandscapeGrid, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["alpha", "beta", grid.metric_tag])
        for ai, alpha in enumerate(grid.alphas):
            for bi, beta in enumerate(grid.betas):
                writer.writerow([repr(float(alpha)), repr(float(beta)),
                                 repr(float(grid.values[ai, bi]))])


def grid_from_csv(path) -> LandscapeGrid:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) != 3 or header[:2] != ["alpha", "beta"]:
            raise ValueError(f"{path} is not a landscape grid (header {header})")
        metric = header[2]
        entries = [(float(a), float(b), float(v)) for a, b, v in reader]
    alphas = sorted({a for a, _, _ in entries})
    betas = sorted({b for _, b, _ in entries})
    values = np.full((len(alphas), len(betas)), np.nan)
    a_index = {a: i for i, a in enumerate(alphas)}
    b_index = {b: i for i, b in enumerate(betas)}
    for a, b, v in entries:
        values[a_index[a], b_index[b]] = v
    if np.isnan(values).any():
        raise ValueError(f"{path} does not cover a full grid")
    return LandscapeGrid(np.array(alphas), np.array(betas), values, metric)


def save_heatmap(grid: LandscapeGrid, path, title: str | None = None) -> None:
    """Render the grid as a static PNG heatmap."""
    fig = Figure(figsize=(5.0, 4.2))
    ax = fig.add_subplot()
    mesh = ax.pcolormesh(grid.betas, grid.alphas, grid.values, shading="nearest",
                         cmap="viridis")
    fig.colorbar(mesh, ax=ax, label=grid.metric_tag)
    ax.set_xlabel("beta")
    ax.set_ylabel("alpha")
    ax.set_title(title or f"{grid.metric_tag} surface")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
