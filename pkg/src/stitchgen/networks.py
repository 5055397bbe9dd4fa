"""The network zoo: per-frame autoencoder, multi-view 3D reconstruction net
with activation taps, conditional flow-matching generator, and a frozen
critic used as the quality-reward proxy.

All nets are token/MLP based (no convolutions) and sized for 16x16 frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import NumericError, TrainingError
from .nn import AdamW, cosine_warmup_lr, glorot, freeze, zeros
from .tensor import Tensor
from .worldgen import Dataset, ORBIT_FOCAL, ORBIT_RADIUS, Pose


def patchify(x, p: int):
    """(n, h, w, c) -> (n * (h/p) * (w/p), p * p * c) row-major in (n, gy, gx)."""
    n, h, w, c = x.shape
    hp, wp = h // p, w // p
    t = T.reshape(x, (n, hp, p, wp, p, c))
    t = T.transpose(t, (0, 1, 3, 2, 4, 5))
    return T.reshape(t, (n * hp * wp, p * p * c))


def unpatchify(tokens, n: int, h: int, w: int, p: int, c: int):
    hp, wp = h // p, w // p
    t = T.reshape(tokens, (n, hp, wp, p, p, c))
    t = T.transpose(t, (0, 1, 3, 2, 4, 5))
    return T.reshape(t, (n, h, w, c))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _check_finite(value: float, what: str) -> None:
    if not np.isfinite(value):
        raise NumericError(f"non-finite {what}")


# ---------------------------------------------------------------------------
# per-frame autoencoder


@dataclass
class AETrainConfig:
    hidden: int = 96
    latent_channels: int = 8
    patch: int = 4
    epochs: int = 40
    batch: int = 64
    lr: float = 2e-3
    seed: int = 0


class VideoAE:
    """Per-frame patch autoencoder; latents are standardized per channel.

    Latent spatial shape is (H/patch, W/patch) with ``latent_channels``
    channels. ``encode`` returns standardized latents (the convention shared
    by the generator and the stitch fit); ``decode`` undoes the
    standardization and maps back through a sigmoid, so decoded frames live
    in (0, 1).
    """

    def __init__(self, H: int, W: int, cfg: AETrainConfig, rng: np.random.Generator):
        self.H, self.W = H, W
        self.cfg = cfg
        self.patch = cfg.patch
        self.latent_channels = cfg.latent_channels
        self.latent_hw = (H // cfg.patch, W // cfg.patch)
        d_in = cfg.patch * cfg.patch * 3
        c = cfg.latent_channels
        self.params = {
            "enc.w1": glorot(rng, d_in, cfg.hidden),
            "enc.b1": zeros(cfg.hidden),
            "enc.w2": glorot(rng, cfg.hidden, c),
            "enc.b2": zeros(c),
            "dec.w1": glorot(rng, c, cfg.hidden),
            "dec.b1": zeros(cfg.hidden),
            "dec.w2": glorot(rng, cfg.hidden, d_in),
            "dec.b2": zeros(d_in),
        }
        self.mu = np.zeros(c)
        self.sigma = np.ones(c)

    def raw_encode(self, frames) -> Tensor:
        """(n, H, W, 3) -> unstandardized (n, c, h, w)."""
        frames = _as_tensor(frames)
        n = frames.shape[0]
        h, w = self.latent_hw
        p = self.params
        tok = patchify(frames, self.patch)
        z = T.affine(T.gelu(T.affine(tok, p["enc.w1"], p["enc.b1"])), p["enc.w2"], p["enc.b2"])
        z = T.reshape(z, (n, h, w, self.latent_channels))
        return T.transpose(z, (0, 3, 1, 2))

    def encode(self, frames) -> Tensor:
        z = self.raw_encode(frames)
        shape = z.shape
        mu = T.broadcast_to(Tensor(self.mu.reshape(1, -1, 1, 1)), shape)
        sig = T.broadcast_to(Tensor(self.sigma.reshape(1, -1, 1, 1)), shape)
        return T.div(T.sub(z, mu), sig)

    def decode(self, z: Tensor) -> Tensor:
        """Standardized (n, c, h, w) -> frames (n, H, W, 3) in (0, 1)."""
        z = _as_tensor(z)
        n = z.shape[0]
        shape = z.shape
        mu = T.broadcast_to(Tensor(self.mu.reshape(1, -1, 1, 1)), shape)
        sig = T.broadcast_to(Tensor(self.sigma.reshape(1, -1, 1, 1)), shape)
        raw = T.add(T.mul(z, sig), mu)
        tok = T.reshape(T.transpose(raw, (0, 2, 3, 1)), (n * shape[2] * shape[3], self.latent_channels))
        p = self.params
        out = T.affine(T.gelu(T.affine(tok, p["dec.w1"], p["dec.b1"])), p["dec.w2"], p["dec.b2"])
        out = T.sigmoid(out)
        return unpatchify(out, n, self.H, self.W, self.patch, 3)


def _all_frames(dataset: Dataset) -> np.ndarray:
    return np.concatenate([rec.frames for rec in dataset.records], axis=0)


def _capture_state(params: dict, opt: AdamW, rng: np.random.Generator,
                   done: int, losses: list) -> dict:
    """Snapshot everything a later run needs to continue training exactly."""
    return {
        "params": {k: p.data.copy() for k, p in params.items()},
        "opt": opt.state_arrays(),
        "rng": rng.bit_generator.state,
        "done": int(done),
        "losses": [float(x) for x in losses],
    }


def _apply_resume(resume: dict, params: dict, opt: AdamW,
                  rng: np.random.Generator) -> tuple[int, list]:
    """Restore a _capture_state snapshot; returns (start counter, losses)."""
    for name, p in params.items():
        p.data[:] = resume["params"][name]
    opt.load_state_arrays(resume["opt"])
    rng.bit_generator.state = resume["rng"]
    return int(resume["done"]), [float(x) for x in resume["losses"]]


def train_autoencoder(dataset: Dataset, cfg: AETrainConfig | None = None,
                      resume: dict | None = None):
    """Train the frame autoencoder; returns (model, per-epoch loss list).

    ``resume`` is a prior run's ``train_state``; continuing from it yields
    the same model an uninterrupted run would have produced.
    """
    cfg = cfg or AETrainConfig()
    rng = np.random.default_rng(cfg.seed)
    model = VideoAE(dataset.H, dataset.W, cfg, rng)
    frames = _all_frames(dataset)
    opt = AdamW(model.params, lr=cfg.lr)
    start, losses = 0, []
    if resume is not None:
        start, losses = _apply_resume(resume, model.params, opt, rng)
    for epoch in range(start, cfg.epochs):
        order = rng.permutation(len(frames))
        epoch_losses = []
        for lo in range(0, len(order), cfg.batch):
            batch = frames[order[lo : lo + cfg.batch]]
            loss = T.l2(model.decode(model.raw_encode(batch)), Tensor(batch))
            if not np.isfinite(loss.item()):
                raise NumericError(f"autoencoder training diverged at epoch {epoch}")
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            epoch_losses.append(loss.item())
        losses.append(float(np.mean(epoch_losses)))
    model.train_state = _capture_state(model.params, opt, rng, cfg.epochs, losses)
    # freeze, then fix the latent standardization from the training set
    freeze(model.params)
    with T.no_grad():
        lat = model.raw_encode(frames).data
    model.mu = lat.mean(axis=(0, 2, 3))
    model.sigma = np.maximum(lat.std(axis=(0, 2, 3)), 1e-6)
    return model, losses


# ---------------------------------------------------------------------------
# multi-view 3D reconstruction net


@dataclass
class F3DTrainConfig:
    layers: int = 6
    width: int = 64
    hidden: int = 128
    patch: int = 2
    epochs: int = 60
    batch: int = 8
    lr: float = 1e-3
    clip: float = 1.0
    w_pointmap: float = 1.0
    w_confidence: float = 0.1
    w_pose: float = 1.0
    seed: int = 0


class Feedforward3D:
    """Residual token-grid net predicting pointmap, confidence, camera pose.

    Frames are patch-embedded into a token grid; each residual block mixes a
    per-token MLP with a per-view pooled context and a scene context built
    by concatenating every view's pooled features in orbit order. The
    ordered concatenation matters: depth (apparent size against
    triangulated distance) and azimuth (parallax since the fixed-angle
    first view) are cross-view quantities, and a slot per view gives the
    heads direct access to each view's summary where a mean over views
    would superimpose them. Pixel-position and view-fraction features are
    injected at every block input and at the heads (not in the stem), so
    any tail of the network keeps access to them when its early layers are
    replaced by a stitch map. Activation taps are the per-block residual
    states.
    """

    def __init__(self, H: int, W: int, V: int, cfg: F3DTrainConfig,
                 rng: np.random.Generator):
        self.H, self.W = H, W
        self.V = V
        self.cfg = cfg
        self.layers = cfg.layers
        self.width = cfg.width
        self.patch = cfg.patch
        self.grid = (H // cfg.patch, W // cfg.patch)
        self.tokens_per_view = self.grid[0] * self.grid[1]
        d, dh, p = cfg.width, cfg.hidden, cfg.patch
        d_in = p * p * 3
        params = {"stem.w": glorot(rng, d_in, d), "stem.b": zeros(d)}
        for i in range(1, cfg.layers + 1):
            params[f"f{i}.w1"] = glorot(rng, d + 3, dh)
            params[f"f{i}.b1"] = zeros(dh)
            params[f"f{i}.w2"] = glorot(rng, dh, d)
            params[f"f{i}.b2"] = zeros(d)
            params[f"f{i}.wv"] = glorot(rng, dh, d)
            params[f"f{i}.bv"] = zeros(d)
            params[f"f{i}.wg"] = glorot(rng, V * dh, d)
            params[f"f{i}.bg"] = zeros(d)
        params["head_depth.w"] = glorot(rng, d + 3, p * p)
        params["head_depth.b"] = zeros(p * p)
        params["head_conf.w"] = glorot(rng, d + 3, p * p)
        params["head_conf.b"] = zeros(p * p)
        params["head_pose.w"] = glorot(rng, d + 1, 5)
        pose_b = zeros(5)
        # unit sin/cos pairs; raw radius chosen so softplus + 0.5 = orbit radius
        pose_b.data[:] = [0.0, 1.0, 0.0, 1.0, np.log(np.expm1(ORBIT_RADIUS - 0.5))]
        params["head_pose.b"] = pose_b
        self.params = params

        gy, gx = self.grid
        ys = (np.arange(gy) + 0.5) / gy * 2.0 - 1.0
        xs = (np.arange(gx) + 0.5) / gx * 2.0 - 1.0
        pos = np.stack(np.meshgrid(ys, xs, indexing="ij"), axis=-1).reshape(-1, 2)
        self._pos_one = pos  # (T, 2)
        self._pos_cache: dict[tuple[int, int], np.ndarray] = {}

        # camera-frame ray directions per pixel, z component 1 so depth = z
        f = ORBIT_FOCAL * W
        cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
        jj, ii = np.meshgrid(np.arange(W), np.arange(H))
        self._dcam = np.stack(
            [(jj - cx) / f, (ii - cy) / f, np.ones((H, W))], axis=-1
        ).reshape(-1, 3)

    # matrices an adapter set may override
    def adaptable(self, start_layer: int) -> list[str]:
        names = []
        for i in range(start_layer, self.layers + 1):
            names += [f"f{i}.w1", f"f{i}.w2", f"f{i}.wv", f"f{i}.wg"]
        names += ["head_depth.w", "head_conf.w", "head_pose.w"]
        return names

    def view_fractions(self, n_views: int) -> np.ndarray:
        """Per-view orbit coordinate in [-1, 1], one value per view."""
        return (np.arange(n_views) + 0.5) / n_views * 2.0 - 1.0

    def _pos(self, n_views: int, n_scenes: int) -> Tensor:
        """(n_scenes * n_views * T, 3) grid-position + view-fraction features."""
        key = (n_views, n_scenes)
        if key not in self._pos_cache:
            base = np.tile(self._pos_one, (n_scenes * n_views, 1))
            vf = np.tile(np.repeat(self.view_fractions(n_views), self.tokens_per_view),
                         n_scenes)
            self._pos_cache[key] = np.concatenate([base, vf[:, None]], axis=1)
        return Tensor(self._pos_cache[key])

    def _apply(self, name: str, x: Tensor, adapters) -> Tensor:
        if adapters is not None and name in adapters:
            return adapters[name].apply(x)
        return T.affine(x, self.params[f"{name}"], self.params[name.replace(".w", ".b")])

    def _block(self, i: int, h: Tensor, n_views: int, n_scenes: int, adapters) -> Tensor:
        if n_views != self.V:
            raise ValueError(
                f"forward: built for {self.V} views per scene, got {n_views}")
        tpv = self.tokens_per_view
        pos = self._pos(n_views, n_scenes)
        u = T.gelu(self._apply(f"f{i}.w1", T.concat([h, pos], axis=1), adapters))
        token_out = self._apply(f"f{i}.w2", u, adapters)
        u_views = T.reshape(u, (n_scenes * n_views, tpv, self.cfg.hidden))
        view_mean = T.tmean(u_views, axis=1)  # (s*v, hidden)
        view_ctx = self._apply(f"f{i}.wv", view_mean, adapters)  # (s*v, d)
        stacked = T.reshape(view_mean, (n_scenes, n_views * self.cfg.hidden))
        scene_ctx = self._apply(f"f{i}.wg", stacked, adapters)  # (s, d)
        ctx = T.add(
            T.reshape(
                T.broadcast_to(T.reshape(view_ctx, (n_scenes * n_views, 1, self.width)),
                               (n_scenes * n_views, tpv, self.width)),
                h.shape,
            ),
            T.reshape(
                T.broadcast_to(T.reshape(scene_ctx, (n_scenes, 1, self.width)),
                               (n_scenes, n_views * tpv, self.width)),
                h.shape,
            ),
        )
        return T.add(h, T.add(token_out, ctx))

    def compose_pointmap(self, pose_params: Tensor, depth_offsets: Tensor) -> Tensor:
        """World coordinates from per-pixel depth along predicted-pose rays.

        ``depth_offsets`` is (n_seq, H*W); per-pixel depth is the predicted
        camera radius plus 1.5 * tanh(offset), which covers the unit scene
        box with margin. Points are camera position + depth * ray direction,
        so pointmaps and poses are consistent by construction.
        """
        n_seq = depth_offsets.shape[0]
        npix = self.H * self.W
        rot = rotation_rows(pose_params)  # (n_seq, 9)
        sa, ca = pose_params[:, 0:1], pose_params[:, 1:2]
        se, ce = pose_params[:, 2:3], pose_params[:, 3:4]
        radius = pose_params[:, 4:5]
        campos = T.concat(
            [T.mul(radius, T.mul(ce, sa)), T.mul(radius, se),
             T.mul(radius, T.mul(ce, ca))], axis=1)  # (n_seq, 3)
        dcam = Tensor(self._dcam)
        views = []
        for v in range(n_seq):
            d_world = T.matmul(dcam, T.reshape(rot[v], (3, 3)))  # (npix, 3)
            t = T.reshape(radius[v], (1, 1)) + 1.5 * T.tanh(
                T.reshape(depth_offsets[v], (npix, 1)))
            point = T.mul(d_world, T.broadcast_to(t, (npix, 3)))
            views.append(point + T.broadcast_to(T.reshape(campos[v], (1, 3)),
                                                (npix, 3)))
        return T.reshape(T.concat(views, axis=0), (n_seq, self.H, self.W, 3))

    def _heads(self, h: Tensor, n_views: int, n_scenes: int, adapters) -> dict:
        pos = self._pos(n_views, n_scenes)
        hp = T.concat([h, pos], axis=1)
        p = self.patch
        n_seq = n_scenes * n_views
        conf_tok = T.sigmoid(self._apply("head_conf.w", hp, adapters))
        conf = T.reshape(unpatchify(conf_tok, n_seq, self.H, self.W, p, 1),
                         (n_seq, self.H, self.W))
        h_views = T.reshape(h, (n_seq, self.tokens_per_view, self.width))
        pooled = T.tmean(h_views, axis=1)
        vf = Tensor(np.tile(self.view_fractions(n_views), n_scenes)[:, None])
        raw = self._apply("head_pose.w", T.concat([pooled, vf], axis=1), adapters)
        pose_params = normalize_pose_params(raw)
        depth_tok = self._apply("head_depth.w", hp, adapters)
        depth = T.reshape(unpatchify(depth_tok, n_seq, self.H, self.W, p, 1),
                          (n_seq, self.H * self.W))
        pointmap = self.compose_pointmap(pose_params, depth)
        return {"pointmap": pointmap, "confidence": conf, "pose_params": pose_params}

    def stem_out(self, frames) -> Tensor:
        """Frames (n, H, W, 3) -> token activations (n * T, width)."""
        frames = _as_tensor(frames)
        tok = patchify(frames, self.patch)
        return T.affine(tok, self.params["stem.w"], self.params["stem.b"])

    def tail_forward(self, h: Tensor, k: int, n_views: int, n_scenes: int = 1,
                     adapters=None, with_taps: bool = False) -> dict:
        """Run blocks k+1..l and the heads from activation ``h`` (tap k)."""
        taps = []
        for i in range(k + 1, self.layers + 1):
            h = self._block(i, h, n_views, n_scenes, adapters)
            taps.append(h)
        out = self._heads(h, n_views, n_scenes, adapters)
        if with_taps:
            out["taps"] = taps
        return out

    def forward(self, frames, with_taps: bool = False, n_scenes: int = 1) -> dict:
        """Sequence (V, H, W, 3) -> predictions; leading dims flatten scenes.

        Batched input is (n_scenes * V, H, W, 3); outputs then carry
        n_scenes * V in their leading axis.
        """
        frames = _as_tensor(frames)
        n_views = frames.shape[0] // n_scenes
        h0 = self.stem_out(frames)
        return self.tail_forward(h0, 0, n_views, n_scenes, with_taps=with_taps)


def normalize_pose_params(raw: Tensor) -> Tensor:
    """(v, 5) raw head output -> unit sin/cos pairs + positive radius.

    The documented orthogonalization: each (sin, cos) pair is scaled to unit
    norm (1e-12 inside the sqrt for stability), radius is softplus + 0.5.
    """
    eps = Tensor(np.array(1e-12))
    cols = []
    for a, b in ((0, 1), (2, 3)):
        sa = raw[:, a : a + 1]
        ca = raw[:, b : b + 1]
        norm = T.sqrt(sa * sa + ca * ca + T.broadcast_to(T.reshape(eps, (1, 1)), sa.shape))
        cols += [T.div(sa, norm), T.div(ca, norm)]
    radius = T.softplus(raw[:, 4:5]) + 0.5
    return T.concat(cols + [radius], axis=1)


def pose_params_of(poses: list[Pose]) -> np.ndarray:
    return np.array(
        [[np.sin(p.azimuth), np.cos(p.azimuth), np.sin(p.elevation), np.cos(p.elevation), p.radius]
         for p in poses]
    )


def pose_from_params(row: np.ndarray) -> Pose:
    """(5,) normalized params row -> look-at Pose (focal fixed by the orbit)."""
    az = float(np.arctan2(row[0], row[1]))
    el = float(np.arctan2(row[2], row[3]))
    return Pose(az, el, float(row[4]), ORBIT_FOCAL)


def rotation_rows(pose_params: Tensor) -> Tensor:
    """(v, 5) normalized params -> (v, 9) row-major world-to-camera rotation."""
    sa, ca = pose_params[:, 0:1], pose_params[:, 1:2]
    se, ce = pose_params[:, 2:3], pose_params[:, 3:4]
    zero = T.mul(sa, 0.0)
    entries = [
        T.neg(ca), zero, sa,
        T.neg(T.mul(se, sa)), ce, T.neg(T.mul(se, ca)),
        T.neg(T.mul(ce, sa)), T.neg(se), T.neg(T.mul(ce, ca)),
    ]
    return T.concat(entries, axis=1)


def geodesic_loss(pose_params: Tensor, gt_poses: list[Pose]) -> Tensor:
    """Mean geodesic rotation angle (radians) between predicted and true poses."""
    pred_rows = rotation_rows(pose_params)
    gt_rows = Tensor(np.stack([p.rotation().reshape(-1) for p in gt_poses]))
    tr = T.tsum(T.mul(pred_rows, gt_rows), axis=1)
    cos_angle = T.clip((tr - 1.0) * 0.5, -1.0 + 1e-7, 1.0 - 1e-7)
    return T.tmean(T.arccos(cos_angle))


def _masked_l1(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean |pred - target| over elements where mask is 1 (mask is 0/1)."""
    n_on = float(mask.sum())
    if n_on == 0.0:
        return T.tsum(T.mul(pred, 0.0))
    scale = pred.data.size / n_on
    return T.l1(T.mul(pred, Tensor(mask)), Tensor(target * mask)) * scale


def f3d_loss(model: Feedforward3D, records: list, cfg: F3DTrainConfig) -> Tensor:
    """Weighted pointmap/confidence/pose loss over a batch of scene records.

    The pointmap L1 covers valid pixels only (miss pixels carry the far
    sentinel, which lies outside the ray-composed output range and would
    drown the surface signal); the confidence head learns the mask itself.
    """
    frames = np.concatenate([r.frames for r in records])
    out = model.forward(frames, n_scenes=len(records))
    coords = np.concatenate([r.coords for r in records])
    valid = np.concatenate([r.valid for r in records])
    confs = np.concatenate([r.confidence for r in records])
    poses = [p for r in records for p in r.poses]
    vmask = np.repeat(valid[..., None], 3, axis=-1).astype(np.float64)
    loss = cfg.w_pointmap * _masked_l1(out["pointmap"], coords, vmask)
    loss = loss + cfg.w_confidence * T.l1(out["confidence"], Tensor(confs))
    gt_params = pose_params_of(poses)
    pose_loss = geodesic_loss(out["pose_params"], poses) + T.l1(
        out["pose_params"][:, 4], Tensor(gt_params[:, 4])
    )
    return loss + cfg.w_pose * pose_loss


def train_feedforward3d(dataset: Dataset, cfg: F3DTrainConfig | None = None,
                        resume: dict | None = None):
    """Train the reconstruction net on rendered sequences; returns (model, losses)."""
    cfg = cfg or F3DTrainConfig()
    rng = np.random.default_rng(cfg.seed)
    model = Feedforward3D(dataset.H, dataset.W, dataset.V, cfg, rng)
    opt = AdamW(model.params, lr=cfg.lr, clip_norm=cfg.clip)
    steps_per_epoch = max(1, int(np.ceil(len(dataset.records) / cfg.batch)))
    total_steps = cfg.epochs * steps_per_epoch
    warmup = max(1, total_steps // 20)
    start, losses = 0, []
    if resume is not None:
        start, losses = _apply_resume(resume, model.params, opt, rng)
    for epoch in range(start, cfg.epochs):
        order = rng.permutation(len(dataset.records))
        epoch_losses = []
        for lo in range(0, len(order), cfg.batch):
            recs = [dataset.records[i] for i in order[lo : lo + cfg.batch]]
            loss = f3d_loss(model, recs, cfg)
            if not np.isfinite(loss.item()):
                raise NumericError(f"3D-net training diverged at epoch {epoch}")
            lr = cosine_warmup_lr(cfg.lr, opt.step_count, total_steps, warmup)
            opt.zero_grad()
            T.backward(loss)
            opt.step(lr=lr)
            epoch_losses.append(loss.item())
        losses.append(float(np.mean(epoch_losses)))
    model.train_state = _capture_state(model.params, opt, rng, cfg.epochs, losses)
    freeze(model.params)
    return model, losses


# ---------------------------------------------------------------------------
# conditional flow-matching generator


@dataclass
class GenTrainConfig:
    width: int = 256
    steps: int = 1500
    batch: int = 8
    lr: float = 1e-3
    clip: float = 1.0
    seed: int = 0


_TIME_FREQS = np.exp(np.linspace(np.log(1.0), np.log(100.0), 8))


def time_embedding(t: float) -> np.ndarray:
    return np.concatenate([np.sin(t * _TIME_FREQS), np.cos(t * _TIME_FREQS)])


class FlowGenerator:
    """Velocity field over flattened latent sequences, conditioned on class.

    Convention: data sits at t=0, noise at t=1; z_t = (1-t) z_data + t noise
    and the regression target is (noise - z_data). Euler sampling walks t
    from 1 down to 0 with z <- z - dt * v.
    """

    def __init__(self, latent_shape, n_classes: int, cfg: GenTrainConfig,
                 rng: np.random.Generator):
        self.latent_shape = tuple(latent_shape)
        self.n_classes = n_classes
        self.cfg = cfg
        self.d_z = int(np.prod(self.latent_shape))
        d_in = self.d_z + 16 + 16
        w = cfg.width
        self.params = {
            "emb.class": Tensor(0.1 * rng.normal(size=(n_classes, 16)), requires_grad=True),
            "g.w1": glorot(rng, d_in, w),
            "g.b1": zeros(w),
            "g.w2": glorot(rng, w, w),
            "g.b2": zeros(w),
            "g.w3": glorot(rng, w, self.d_z),
            "g.b3": zeros(self.d_z),
        }

    def v(self, z, t: float, prompt_class: int, adapters=None) -> Tensor:
        """Velocity at (z, t) for the given class; same shape as z."""
        if not 0 <= prompt_class < self.n_classes:
            raise ValueError(f"prompt_class {prompt_class} not in [0, {self.n_classes})")
        z = _as_tensor(z)
        z_flat = T.reshape(z, (1, self.d_z))
        temb = Tensor(time_embedding(float(t)).reshape(1, 16))
        cemb = T.reshape(self.params["emb.class"][prompt_class], (1, 16))
        x = T.concat([z_flat, temb, cemb], axis=1)

        def apply(name, xx):
            if adapters is not None and name in adapters:
                return adapters[name].apply(xx)
            return T.affine(xx, self.params[name], self.params[name.replace(".w", ".b")])

        h = T.gelu(apply("g.w1", x))
        h = T.gelu(apply("g.w2", h))
        out = apply("g.w3", h)
        return T.reshape(out, self.latent_shape)


def flow_loss(gen: FlowGenerator, z_data, prompt_class: int, noise, t: float,
              adapters=None) -> Tensor:
    """Mean squared error of the velocity field at interpolation time t."""
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"flow_loss: t={t} outside [0, 1]")
    z_data = _as_tensor(z_data)
    noise = _as_tensor(noise)
    z_t = T.add(T.mul(z_data, 1.0 - t), T.mul(noise, t))
    target = T.sub(noise, z_data)
    return T.l2(gen.v(z_t, t, prompt_class, adapters=adapters), target)


def sample(gen: FlowGenerator, prompt_class: int, seed: int, steps: int = 50,
           adapters=None) -> np.ndarray:
    """Euler integration from seeded noise at t=1 down to t=0."""
    if steps < 1:
        raise ValueError("sample: steps must be >= 1")
    rng = np.random.default_rng(seed)
    z = rng.normal(size=gen.latent_shape)
    dt = 1.0 / steps
    with T.no_grad():
        for j in range(steps):
            t_cur = 1.0 - j * dt
            v = gen.v(Tensor(z), t_cur, prompt_class, adapters=adapters)
            z = z - dt * v.data
    return z


def train_generator(dataset: Dataset, ae: VideoAE, cfg: GenTrainConfig | None = None,
                    resume: dict | None = None):
    """Flow-matching pretraining on encoded dataset latents; returns (gen, losses)."""
    cfg = cfg or GenTrainConfig()
    rng = np.random.default_rng(cfg.seed)
    with T.no_grad():
        latents = [ae.encode(rec.frames).data for rec in dataset.records]
    classes = [rec.prompt_class for rec in dataset.records]
    gen = FlowGenerator(latents[0].shape, dataset.n_classes, cfg, rng)
    opt = AdamW(gen.params, lr=cfg.lr, clip_norm=cfg.clip)
    start, losses = 0, []
    if resume is not None:
        start, losses = _apply_resume(resume, gen.params, opt, rng)
    for step in range(start, cfg.steps):
        idx = rng.integers(0, len(latents), size=cfg.batch)
        loss = None
        for i in idx:
            t = float(rng.uniform())
            noise = rng.normal(size=latents[i].shape)
            li = flow_loss(gen, latents[i], classes[i], noise, t)
            loss = li if loss is None else loss + li
        loss = loss * (1.0 / cfg.batch)
        val = loss.item()
        if not np.isfinite(val):
            raise NumericError(f"generator training diverged at step {step}")
        opt.zero_grad()
        T.backward(loss)
        opt.step()
        losses.append(val)
    gen.train_state = _capture_state(gen.params, opt, rng, cfg.steps, losses)
    freeze(gen.params)
    return gen, losses


# ---------------------------------------------------------------------------
# frozen critic


@dataclass
class CriticTrainConfig:
    width: int = 64
    epochs: int = 12
    batch: int = 64
    lr: float = 2e-3
    noise_aug: float = 0.03
    holdout_fraction: float = 0.2
    seed: int = 0


class Critic:
    """Class scorer over single frames; frozen after training."""

    def __init__(self, H: int, W: int, n_classes: int, cfg: CriticTrainConfig,
                 rng: np.random.Generator):
        self.H, self.W = H, W
        self.n_classes = n_classes
        d_in = H * W * 3
        w = cfg.width
        self.params = {
            "c.w1": glorot(rng, d_in, w),
            "c.b1": zeros(w),
            "c.w2": glorot(rng, w, w),
            "c.b2": zeros(w),
            "c.w3": glorot(rng, w, n_classes),
            "c.b3": zeros(n_classes),
        }

    def logits(self, images) -> Tensor:
        """(n, H, W, 3) or (H, W, 3) -> (n, n_classes)."""
        images = _as_tensor(images)
        if images.ndim == 3:
            images = T.reshape(images, (1,) + images.shape)
        n = images.shape[0]
        x = T.reshape(images, (n, self.H * self.W * 3))
        p = self.params
        h = T.gelu(T.affine(x, p["c.w1"], p["c.b1"]))
        h = T.gelu(T.affine(h, p["c.w2"], p["c.b2"]))
        return T.affine(h, p["c.w3"], p["c.b3"])


def train_critic(dataset: Dataset, cfg: CriticTrainConfig | None = None,
                 resume: dict | None = None):
    """Train and freeze the critic; returns (critic, losses, holdout_accuracy).

    Raises TrainingError when held-out accuracy fails to beat chance by 0.1.
    """
    cfg = cfg or CriticTrainConfig()
    rng = np.random.default_rng(cfg.seed)
    critic = Critic(dataset.H, dataset.W, dataset.n_classes, cfg, rng)

    n_hold = max(1, int(len(dataset.records) * cfg.holdout_fraction))
    hold, train = dataset.records[:n_hold], dataset.records[n_hold:]
    x_train = np.concatenate([r.frames for r in train])
    y_train = np.concatenate([[r.prompt_class] * dataset.V for r in train])
    x_hold = np.concatenate([r.frames for r in hold])
    y_hold = np.concatenate([[r.prompt_class] * dataset.V for r in hold])

    opt = AdamW(critic.params, lr=cfg.lr)
    start, losses = 0, []
    if resume is not None:
        start, losses = _apply_resume(resume, critic.params, opt, rng)
    for epoch in range(start, cfg.epochs):
        order = rng.permutation(len(x_train))
        epoch_losses = []
        for lo in range(0, len(order), cfg.batch):
            idx = order[lo : lo + cfg.batch]
            batch = x_train[idx] + cfg.noise_aug * rng.normal(size=x_train[idx].shape)
            loss = T.softmax_ce(critic.logits(batch), y_train[idx])
            if not np.isfinite(loss.item()):
                raise NumericError(f"critic training diverged at epoch {epoch}")
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            epoch_losses.append(loss.item())
        losses.append(float(np.mean(epoch_losses)))

    critic.train_state = _capture_state(critic.params, opt, rng, cfg.epochs, losses)
    with T.no_grad():
        pred = critic.logits(x_hold).data.argmax(axis=1)
    accuracy = float((pred == y_hold).mean())
    chance = 1.0 / dataset.n_classes
    if accuracy < chance + 0.1:
        raise TrainingError(
            f"critic held-out accuracy {accuracy:.3f} does not beat chance {chance:.3f} by 0.1"
        )
    freeze(critic.params)
    return critic, losses, accuracy
