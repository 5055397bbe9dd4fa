"""Pointmap metrics and the two analysis experiments at desk scale.

Covers nearest-neighbor accuracy/completeness with grid-normal consistency,
pose errors, latent perturbation, the noise-robustness comparison of the
stitched decoder against the decode-then-reconstruct path, and the
layer-scan study correlating closed-form stitching error with downstream
reconstruction quality.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from . import tensor as T
from .networks import Feedforward3D, VideoAE
from .stitching import (StitchFinetuneConfig, assemble, collect_activations,
                        default_ridge, finetune_stitched, fit_stitch)
from .worldgen import Dataset, Pointmap, Pose, SceneRecord

_PERTURB_SALT = 53
_TRIAL_SALT = 59

_NORMAL_EPS = 1e-12


# ---------------------------------------------------------------------------
# pointmap and pose metrics


@dataclass(frozen=True)
class PointmapMetrics:
    """Nearest-neighbor distances (lower is better) plus normal agreement."""

    acc_mean: float
    acc_median: float
    comp_mean: float
    comp_median: float
    nc_mean: float


def _valid_points(pm: Pointmap) -> np.ndarray:
    coords = np.asarray(pm.coords, dtype=np.float64)
    return coords[np.asarray(pm.valid, dtype=bool)]


def _nearest_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each row of ``a`` to its nearest row of ``b`` (O(n^2))."""
    sq = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    return np.sqrt(sq.min(axis=1))


def grid_normals(coords: np.ndarray, valid: np.ndarray):
    """Unit normals from +x/+y grid-neighbor cross products.

    Returns (normals, defined) of shapes (H, W, 3) and (H, W); a normal is
    defined where the pixel and both neighbors are valid and the cross
    product is nonzero. Boundary rows/columns are never defined.
    """
    H, W = valid.shape
    normals = np.zeros((H, W, 3))
    defined = np.zeros((H, W), dtype=bool)
    if H < 2 or W < 2:
        return normals, defined
    dx = coords[:-1, 1:] - coords[:-1, :-1]
    dy = coords[1:, :-1] - coords[:-1, :-1]
    cross = np.cross(dx, dy)
    norms = np.linalg.norm(cross, axis=-1)
    ok = valid[:-1, :-1] & valid[:-1, 1:] & valid[1:, :-1] & (norms > _NORMAL_EPS)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = cross / norms[..., None]
    normals[:-1, :-1][ok] = unit[ok]
    defined[:-1, :-1] = ok
    return normals, defined


def pointmap_metrics(pred: Pointmap, gt: Pointmap) -> PointmapMetrics:
    """Compare predicted and reference pointmaps over their valid pixels.

    Accuracy is the prediction-to-reference nearest-point distance,
    completeness the reverse; both report mean and median over the pooled
    views. Normal consistency is the mean cosine between grid normals where
    both sides define one (0.0 when no pixel qualifies).
    """
    pred_pts = _valid_points(pred)
    gt_pts = _valid_points(gt)
    if pred_pts.size == 0:
        raise ValueError("pointmap_metrics: no valid points in the prediction")
    if gt_pts.size == 0:
        raise ValueError("pointmap_metrics: no valid points in the reference")
    acc = _nearest_distances(pred_pts, gt_pts)
    comp = _nearest_distances(gt_pts, pred_pts)

    cos_terms = []
    pred_valid = np.asarray(pred.valid, dtype=bool)
    gt_valid = np.asarray(gt.valid, dtype=bool)
    for v in range(pred_valid.shape[0]):
        n_p, def_p = grid_normals(np.asarray(pred.coords)[v], pred_valid[v])
        n_g, def_g = grid_normals(np.asarray(gt.coords)[v], gt_valid[v])
        both = def_p & def_g
        if both.any():
            cos_terms.append(np.sum(n_p[both] * n_g[both], axis=-1))
    nc_mean = float(np.concatenate(cos_terms).mean()) if cos_terms else 0.0
    return PointmapMetrics(float(acc.mean()), float(np.median(acc)),
                           float(comp.mean()), float(np.median(comp)), nc_mean)


def pose_error(pred: Pose, gt: Pose) -> tuple[float, float]:
    """(geodesic rotation error in degrees, absolute radius difference)."""
    rel = pred.rotation() @ gt.rotation().T
    cos_angle = np.clip((np.trace(rel) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(cos_angle))), float(abs(pred.radius - gt.radius))


# ---------------------------------------------------------------------------
# latent perturbation


def perturb_latent(z: np.ndarray, alpha: float, seed: int) -> np.ndarray:
    """z + alpha * ||z||_F * eps with a per-sample Frobenius norm.

    ``eps`` is elementwise standard normal from the seed; the norm is taken
    over each leading-axis sample separately. alpha = 0 returns an untouched
    copy.
    """
    z = np.asarray(z, dtype=np.float64)
    if alpha < 0:
        raise ValueError(f"perturb_latent: alpha must be >= 0, got {alpha}")
    if alpha == 0.0:
        return z.copy()
    rng = np.random.default_rng([_PERTURB_SALT, seed])
    eps = rng.normal(size=z.shape)
    norms = np.linalg.norm(z.reshape(z.shape[0], -1), axis=1)
    norms = norms.reshape((z.shape[0],) + (1,) * (z.ndim - 1))
    return z + alpha * norms * eps


# ---------------------------------------------------------------------------
# noise-robustness experiment


@dataclass(frozen=True)
class RobustnessConfig:
    alphas: tuple[float, ...] = (0.0, 0.005, 0.01, 0.02, 0.05)
    trials: int = 16
    seed: int = 0

    def __post_init__(self):
        if not self.alphas:
            raise ValueError("robustness config: needs at least one alpha")
        if any(a < 0 for a in self.alphas):
            raise ValueError("robustness config: alphas must be >= 0")
        if list(self.alphas) != sorted(self.alphas):
            raise ValueError("robustness config: alphas must be sorted ascending")
        if self.trials < 1:
            raise ValueError("robustness config: trials must be >= 1")


@dataclass(frozen=True)
class RobustnessRow:
    alpha: float
    trial: int
    path: str  # "A" (stitched) | "B" (decode + original F)
    acc_mean: float
    comp_mean: float
    nc_mean: float
    status: str  # "ok" or the failure's exception type


def _record_pointmap(rec: SceneRecord) -> Pointmap:
    return Pointmap(rec.coords, rec.valid, rec.confidence)


def _prediction_pointmap(out: dict) -> Pointmap:
    conf = out["confidence"].data
    return Pointmap(out["pointmap"].data, conf >= 0.5, conf)


def _mean_metrics(per_record: list[PointmapMetrics]) -> tuple[float, float, float]:
    return (float(np.mean([m.acc_mean for m in per_record])),
            float(np.mean([m.comp_mean for m in per_record])),
            float(np.mean([m.nc_mean for m in per_record])))


def robustness_experiment(stitched, ae: VideoAE, f_original: Feedforward3D,
                          dataset: Dataset, cfg: RobustnessConfig | None = None,
                          csv_path=None, json_path=None):
    """Compare the stitched path against decode-then-reconstruct under noise.

    For every (alpha, trial): perturb each scene's latents, score path A
    (stitched decoder on the perturbed latents) and path B (decoded frames
    fed to the original reconstruction net) against ground truth, and
    average over scenes. A failing path yields a row flagged with the
    exception type instead of aborting the sweep. Returns (rows, summary).
    """
    cfg = cfg or RobustnessConfig()
    with T.no_grad():
        latents = [ae.encode(rec.frames).data for rec in dataset.records]

    def path_a(z):
        with T.no_grad():
            return _prediction_pointmap(stitched.decode_latent(z))

    def path_b(z):
        with T.no_grad():
            frames = ae.decode(z).data
            return _prediction_pointmap(f_original.forward(frames))

    rows = []
    for a_idx, alpha in enumerate(cfg.alphas):
        for trial in range(cfg.trials):
            perturbed = [
                perturb_latent(z, alpha,
                               seed=_trial_seed(cfg.seed, a_idx, trial, i))
                for i, z in enumerate(latents)
            ]
            for path, run in (("A", path_a), ("B", path_b)):
                try:
                    metrics = [
                        pointmap_metrics(run(z), _record_pointmap(rec))
                        for z, rec in zip(perturbed, dataset.records)
                    ]
                    acc, comp, nc = _mean_metrics(metrics)
                    rows.append(RobustnessRow(alpha, trial, path, acc, comp, nc, "ok"))
                except Exception as exc:  # flagged, sweep continues
                    rows.append(RobustnessRow(alpha, trial, path, float("nan"),
                                              float("nan"), float("nan"),
                                              type(exc).__name__))
    summary = _robustness_summary(cfg, rows)
    if csv_path is not None:
        _write_rows(csv_path, ["alpha", "trial", "path", "acc_mean", "comp_mean",
                               "nc_mean", "status"],
                    [[repr(r.alpha), r.trial, r.path, repr(r.acc_mean),
                      repr(r.comp_mean), repr(r.nc_mean), r.status] for r in rows])
    if json_path is not None:
        _write_json(json_path, summary)
    return rows, summary


def _trial_seed(seed: int, alpha_index: int, trial: int, record_index: int) -> int:
    key = [_TRIAL_SALT, seed, alpha_index, trial, record_index]
    return int(np.random.default_rng(key).integers(2**31 - 1))


def _robustness_summary(cfg: RobustnessConfig, rows: list[RobustnessRow]) -> dict:
    per_alpha = {}
    for alpha in cfg.alphas:
        entry = {}
        for path in ("A", "B"):
            ok = [r for r in rows if r.alpha == alpha and r.path == path
                  and r.status == "ok"]
            entry[path] = {
                "acc_mean": float(np.mean([r.acc_mean for r in ok])) if ok else None,
                "comp_mean": float(np.mean([r.comp_mean for r in ok])) if ok else None,
                "nc_mean": float(np.mean([r.nc_mean for r in ok])) if ok else None,
                "trials_ok": len(ok),
            }
        per_alpha[repr(float(alpha))] = entry
    largest = per_alpha[repr(float(cfg.alphas[-1]))]
    comparison = None
    if largest["A"]["acc_mean"] is not None and largest["B"]["acc_mean"] is not None:
        comparison = bool(largest["A"]["acc_mean"] < largest["B"]["acc_mean"])
    return {
        "alphas": [float(a) for a in cfg.alphas],
        "trials": cfg.trials,
        "per_alpha": per_alpha,
        "stitched_beats_sequential_at_largest_alpha": comparison,
    }


# ---------------------------------------------------------------------------
# layer-scan study


@dataclass(frozen=True)
class ScanRow:
    layer: int
    lsq_mse: float
    acc_mean: float
    comp_mean: float
    nc_mean: float


def scan_study(ae: VideoAE, f3d: Feedforward3D, dataset: Dataset,
               layer_set=None, finetune_cfg: StitchFinetuneConfig | None = None,
               holdout_fraction: float = 0.25, adapter_rank: int = 8,
               adapter_alpha: float = 16.0, csv_path=None, json_path=None):
    """Stitch, finetune, and score every candidate layer; returns (rows, summary).

    The leading ``holdout_fraction`` of scenes is held out. Each scanned
    layer gets its closed-form fit error on the training split and its
    held-out pointmap metrics after the full finetune. The summary records
    the Spearman rank correlation between fit error and accuracy, the layer
    the fit selects, and the layers ranked by accuracy.
    """
    if layer_set is None:
        layer_set = list(range(1, f3d.layers))
    layer_set = sorted(int(k) for k in layer_set)
    if len(layer_set) < 3:
        raise ValueError(f"scan_study: needs at least 3 layers, got {layer_set}")
    n_hold = max(1, int(len(dataset.records) * holdout_fraction))
    hold = Dataset(dataset.records[:n_hold], dataset.n_classes,
                   dataset.V, dataset.H, dataset.W)
    train = Dataset(dataset.records[n_hold:], dataset.n_classes,
                    dataset.V, dataset.H, dataset.W)

    acts = collect_activations(ae, f3d, train, layer_set)
    ridge = default_ridge(acts.B)
    rows = []
    for k in layer_set:
        s, mse = fit_stitch(acts.B, acts.A[k], ridge_lambda=ridge)
        model = assemble(ae, s, f3d, k, adapter_rank=adapter_rank,
                         adapter_alpha=adapter_alpha)
        finetune_stitched(model, train, finetune_cfg)
        metrics = []
        with T.no_grad():
            for rec in hold.records:
                out = model.forward_frames(rec.frames)
                metrics.append(pointmap_metrics(_prediction_pointmap(out),
                                                _record_pointmap(rec)))
        acc, comp, nc = _mean_metrics(metrics)
        rows.append(ScanRow(k, float(mse), acc, comp, nc))

    by_acc = sorted(rows, key=lambda r: (r.acc_mean, r.layer))
    correlation = spearmanr([r.lsq_mse for r in rows], [r.acc_mean for r in rows])
    summary = {
        "layers": layer_set,
        "spearman_mse_acc": float(correlation.statistic),
        "selected_layer": min(rows, key=lambda r: (r.lsq_mse, r.layer)).layer,
        "layers_by_acc": [r.layer for r in by_acc],
    }
    if csv_path is not None:
        _write_rows(csv_path, ["layer", "lsq_mse", "acc_mean", "comp_mean", "nc_mean"],
                    [[r.layer, repr(r.lsq_mse), repr(r.acc_mean), repr(r.comp_mean),
                      repr(r.nc_mean)] for r in rows])
    if json_path is not None:
        _write_json(json_path, summary)
    return rows, summary


# ---------------------------------------------------------------------------
# report files


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
