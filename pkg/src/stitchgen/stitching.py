"""Closed-form stitching of the 3D net onto the autoencoder latent space.

The stitch map is one affine over latent channels, shared across every cell
of the tap's token grid: latents are bilinearly resampled to the grid, each
cell's channel vector goes through S, and the result feeds the remaining
blocks of the 3D net. S comes from ridge least squares between collected
latent rows and tap activations; the scanned layer with the lowest fit MSE
wins. Finetuning then trains S fully and the tail through low-rank adapters
against pseudo-targets from the original net.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import NumericError
from .nn import AdamW, LowRankAdapter, cosine_warmup_lr
from .networks import Feedforward3D, VideoAE
from .tensor import Tensor
from .worldgen import Dataset


@dataclass
class ActivationDataset:
    B: np.ndarray  # (N, D_E + 1): latent channels per grid cell + ones column
    A: dict[int, np.ndarray]  # layer index -> (N, D_F) tap activations


@dataclass
class StitchFit:
    per_layer_mse: dict[int, float]
    k_star: int
    S: np.ndarray  # (D_E + 1, D_F) for layer k_star; bias row last
    ridge: float


def collect_activations(ae: VideoAE, f3d: Feedforward3D, dataset: Dataset,
                        layer_set) -> ActivationDataset:
    """Row-aligned design matrix and tap activations.

    B holds the bilinearly resampled latent channels of every grid cell with
    a trailing constant-1 column; each A entry holds the matching tap rows.
    Rows run scene-major, then view, then grid row-major, identically on
    both sides.
    """
    layer_set = sorted(set(int(k) for k in layer_set))
    for k in layer_set:
        if not 1 <= k <= f3d.layers - 1:
            raise ValueError(f"layer {k} outside scannable range [1, {f3d.layers - 1}]")
    if not dataset.records:
        raise ValueError("collect_activations: dataset is empty")
    b_rows, a_rows = [], {k: [] for k in layer_set}
    with T.no_grad():
        for rec in dataset.records:
            z = ae.encode(rec.frames).data  # (V, c, h, w)
            zg = T.resample(Tensor(z), f3d.grid, mode="bilinear").data
            b_rows.append(zg.transpose(0, 2, 3, 1).reshape(-1, ae.latent_channels))
            out = f3d.forward(rec.frames, with_taps=True)
            for k in layer_set:
                a_rows[k].append(out["taps"][k - 1].data)
    b = np.concatenate(b_rows)
    b = np.concatenate([b, np.ones((b.shape[0], 1))], axis=1)
    if b.shape[0] < b.shape[1]:
        raise ValueError(
            f"collect_activations: {b.shape[0]} rows underdetermine "
            f"{b.shape[1]} columns; add samples"
        )
    return ActivationDataset(B=b, A={k: np.concatenate(a_rows[k]) for k in layer_set})


def default_ridge(b: np.ndarray, scale: float = 1e-6) -> float:
    """The default ridge: ``scale`` times the mean diagonal of B^T B."""
    return float(scale * np.mean(np.einsum("ij,ij->j", b, b)))


def fit_stitch(b: np.ndarray, a: np.ndarray,
               ridge_lambda: float = 0.0) -> tuple[np.ndarray, float]:
    """Least-squares S minimizing ||B S - A||^2 + ridge, plus its fit MSE.

    Solves the normal equations S = (B^T B + lambda I)^-1 B^T A and returns
    (S, mse) with mse = ||B S - A||_F^2 / (N * D_F). ``ridge_lambda`` is the
    absolute ridge coefficient; 0 raises if B^T B is singular.
    """
    b = np.asarray(b, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if b.ndim != 2 or a.ndim != 2 or b.shape[0] != a.shape[0]:
        raise ValueError(f"fit_stitch: incompatible shapes B{b.shape} A{a.shape}")
    if ridge_lambda < 0:
        raise ValueError("fit_stitch: ridge_lambda must be >= 0")
    gram = b.T @ b + ridge_lambda * np.eye(b.shape[1])
    # LAPACK will happily "solve" a rank-deficient system, so check rank
    if np.linalg.matrix_rank(gram) < gram.shape[0]:
        raise ValueError("fit_stitch: singular normal matrix; pass ridge_lambda > 0")
    s = np.linalg.solve(gram, b.T @ a)
    resid = b @ s - a
    mse = float((resid * resid).sum() / (a.shape[0] * a.shape[1]))
    return s, mse


def select_layer(per_layer_mse: dict[int, float]) -> int:
    """Layer with the lowest MSE; ties go to the smallest index."""
    if not per_layer_mse:
        raise ValueError("select_layer: no scanned layers")
    return min(per_layer_mse, key=lambda k: (per_layer_mse[k], k))


def scan_layers(ae: VideoAE, f3d: Feedforward3D, dataset: Dataset,
                layer_set=None, ridge_scale: float = 1e-6) -> StitchFit:
    """Fit every candidate layer and pick the best.

    ``layer_set`` defaults to every scannable layer 1..l-1. The returned fit
    carries the full MSE map, the winning index, its S, and the absolute
    ridge used (``ridge_scale`` times the mean diagonal of B^T B).
    """
    if layer_set is None:
        layer_set = range(1, f3d.layers)
    acts = collect_activations(ae, f3d, dataset, layer_set)
    lam = default_ridge(acts.B, ridge_scale)
    per_layer = {}
    s_by_layer = {}
    for k in sorted(acts.A):
        s_by_layer[k], per_layer[k] = fit_stitch(acts.B, acts.A[k], lam)
    k_star = select_layer(per_layer)
    return StitchFit(per_layer_mse=per_layer, k_star=k_star, S=s_by_layer[k_star],
                     ridge=lam)


# ---------------------------------------------------------------------------
# stitched model


class StitchedModel:
    """Autoencoder latents -> stitch affine -> tail of the 3D net.

    The encoder and tail bases stay frozen; the trainable set is the stitch
    affine (fully) and the tail's low-rank adapters. With freshly assembled
    (zero) adapters the model reproduces the closed-form stitched outputs
    exactly.
    """

    def __init__(self, ae: VideoAE, s: np.ndarray, f3d: Feedforward3D, k_star: int,
                 adapter_rank: int = 8, adapter_alpha: float = 16.0,
                 seed: int = 0):
        s = np.asarray(s, dtype=np.float64)
        if s.shape != (ae.latent_channels + 1, f3d.width):
            raise ValueError(
                f"assemble: S shape {s.shape} does not match "
                f"latents+bias ({ae.latent_channels + 1}) x width ({f3d.width})"
            )
        if not 1 <= k_star <= f3d.layers - 1:
            raise ValueError(f"assemble: k_star {k_star} outside [1, {f3d.layers - 1}]")
        self.ae = ae
        self.f3d = f3d
        self.k_star = k_star
        self.stitch_w = Tensor(s[:-1].copy(), requires_grad=True)
        self.stitch_b = Tensor(s[-1].copy(), requires_grad=True)
        rng = np.random.default_rng(seed)
        self.adapters = {}
        for name in f3d.adaptable(k_star + 1):
            base = f3d.params[name]
            bias = f3d.params[name.replace(".w", ".b")]
            # skinny head matrices cap the usable rank
            rank = min(adapter_rank, min(base.shape))
            self.adapters[name] = LowRankAdapter(
                base, bias, rank=rank, alpha=adapter_alpha, rng=rng
            )
        self.adapter_rank = adapter_rank
        self.adapter_alpha = adapter_alpha

    def trainable_params(self) -> dict[str, Tensor]:
        params = {"stitch.w": self.stitch_w, "stitch.b": self.stitch_b}
        for name, ad in self.adapters.items():
            params.update(ad.params(f"adapter.{name}"))
        return params

    def stitch_map(self, z) -> Tensor:
        """Latents (n, c, h, w) -> tap-k* activations (n * T, D_F)."""
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float64))
        zg = T.resample(z, self.f3d.grid, mode="bilinear")
        n, c = z.shape[0], z.shape[1]
        rows = T.reshape(T.transpose(zg, (0, 2, 3, 1)), (n * self.f3d.tokens_per_view, c))
        return T.affine(rows, self.stitch_w, self.stitch_b)

    def decode_latent(self, z, n_scenes: int = 1) -> dict:
        """Standardized latents (n_scenes * V, c, h, w) -> 3D predictions."""
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float64))
        n_views = z.shape[0] // n_scenes
        h = self.stitch_map(z)
        return self.f3d.tail_forward(h, self.k_star, n_views, n_scenes,
                                     adapters=self.adapters)

    def forward_frames(self, frames, n_scenes: int = 1) -> dict:
        """Full stitched path: encode (frozen, severed) then decode latents."""
        with T.no_grad():
            z = self.ae.encode(frames)
        return self.decode_latent(Tensor(z.data), n_scenes)


def assemble(ae: VideoAE, s: np.ndarray, f3d: Feedforward3D, k_star: int,
             adapter_rank: int = 8, adapter_alpha: float = 16.0,
             seed: int = 0) -> StitchedModel:
    return StitchedModel(ae, s, f3d, k_star, adapter_rank, adapter_alpha, seed)


@dataclass
class StitchFinetuneConfig:
    epochs: int = 12
    batch: int = 8
    lr: float = 2e-4
    warmup_steps: int = 20
    clip: float = 1.0
    w_pointmap: float = 1.0
    w_confidence: float = 1e-2
    w_pose: float = 5.0
    seed: int = 0


def finetune_stitched(model: StitchedModel, dataset: Dataset,
                      cfg: StitchFinetuneConfig | None = None,
                      f_original=None):
    """Train stitch affine + adapters on pseudo-targets from ``f_original``.

    ``f_original`` is anything with forward(frames) -> predictions; it
    defaults to the stitched model's own 3D net, the usual case of
    distilling the original net's outputs through the stitched path. Only
    raw frames are consumed; no ground truth is needed. Returns the
    per-epoch loss curve; the model is updated in place.
    """
    cfg = cfg or StitchFinetuneConfig()
    f_original = f_original or model.f3d
    rng = np.random.default_rng(cfg.seed)

    latents, targets = [], []
    with T.no_grad():
        for rec in dataset.records:
            latents.append(model.ae.encode(rec.frames).data)
            out = f_original.forward(rec.frames)
            targets.append(
                (out["pointmap"].data, out["confidence"].data, out["pose_params"].data)
            )

    opt = AdamW(model.trainable_params(), lr=cfg.lr, clip_norm=cfg.clip)
    steps_per_epoch = max(1, int(np.ceil(len(dataset.records) / cfg.batch)))
    total_steps = cfg.epochs * steps_per_epoch
    losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset.records))
        epoch_losses = []
        for lo in range(0, len(order), cfg.batch):
            idx = order[lo : lo + cfg.batch]
            z = np.concatenate([latents[i] for i in idx])
            pm_t = np.concatenate([targets[i][0] for i in idx])
            cf_t = np.concatenate([targets[i][1] for i in idx])
            pp_t = np.concatenate([targets[i][2] for i in idx])
            out = model.decode_latent(z, n_scenes=len(idx))
            loss = (
                cfg.w_pointmap * T.l1(out["pointmap"], Tensor(pm_t))
                + cfg.w_confidence * T.l1(out["confidence"], Tensor(cf_t))
                + cfg.w_pose * T.l1(out["pose_params"], Tensor(pp_t))
            )
            if not np.isfinite(loss.item()):
                raise NumericError(
                    f"stitched finetuning diverged at step {opt.step_count}"
                )
            lr = cosine_warmup_lr(cfg.lr, opt.step_count, total_steps, cfg.warmup_steps)
            opt.zero_grad()
            T.backward(loss)
            opt.step(lr=lr)
            epoch_losses.append(loss.item())
        losses.append(float(np.mean(epoch_losses)))
    return losses
