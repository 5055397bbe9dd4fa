"""Synthetic multi-view scene generation.

Scenes hold 1-3 flat-shaded primitives (spheres, axis-aligned boxes) inside
the unit box. The prompt class fixes primitive kinds and colors through a
lookup, so the class is recoverable from any render; the seed fixes
placements and sizes. Cameras orbit the origin on monotone azimuth
trajectories and rendering is exact per-pixel ray casting, which keeps every
view of a surface point the same color (consistency checks then measure
geometry, not shading).
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np

from .checkpoint import read_sidecar, read_tensors, sidecar_path, write_sidecar, write_tensors

FAR_SENTINEL = np.array([0.0, 0.0, 10.0])
MAX_AZ_GAP = 0.45  # documented bound on the azimuth gap between views
DATASET_VERSION = 1

_SCENE_SALT = 11
_TRAJ_SALT = 23
_RAY_EPS = 1e-9
_KIND_PATTERNS = (("sphere",), ("box",), ("sphere", "box"), ("box", "sphere"))


@dataclass(frozen=True)
class Primitive:
    kind: str  # "sphere" | "box"
    center: np.ndarray  # (3,)
    size: float  # sphere radius / box half-extent
    color: np.ndarray  # (3,) in [0.08, 0.92]


@dataclass(frozen=True)
class Scene:
    primitives: tuple[Primitive, ...]
    prompt_class: int
    background: np.ndarray  # (3,)


@dataclass(frozen=True)
class Pose:
    """Look-at-origin camera: azimuth/elevation/radius, focal in image widths."""

    azimuth: float
    elevation: float
    radius: float
    focal: float

    def position(self) -> np.ndarray:
        ca, sa = np.cos(self.azimuth), np.sin(self.azimuth)
        ce, se = np.cos(self.elevation), np.sin(self.elevation)
        return self.radius * np.array([ce * sa, se, ce * ca])

    def rotation(self) -> np.ndarray:
        """World-to-camera rotation; right-handed, camera looks down +z."""
        ca, sa = np.cos(self.azimuth), np.sin(self.azimuth)
        ce, se = np.cos(self.elevation), np.sin(self.elevation)
        return np.array(
            [
                [-ca, 0.0, sa],
                [-se * sa, ce, -se * ca],
                [-ce * sa, -se, -ce * ca],
            ]
        )

    def params(self) -> np.ndarray:
        return np.array([self.azimuth, self.elevation, self.radius, self.focal])


@dataclass
class ViewSequence:
    frames: np.ndarray  # (V, H, W, 3)
    poses: list[Pose]


@dataclass
class Pointmap:
    coords: np.ndarray  # (V, H, W, 3); invalid pixels carry FAR_SENTINEL
    valid: np.ndarray  # (V, H, W) bool
    confidence: np.ndarray  # (V, H, W); 1 where valid else 0


def class_palette(prompt_class: int):
    """Deterministic (kinds, colors, background) lookup for a class."""
    hue = (0.13 + 0.61803398875 * prompt_class) % 1.0
    pattern = _KIND_PATTERNS[prompt_class % len(_KIND_PATTERNS)]
    colors = []
    for i in range(3):
        rgb = colorsys.hsv_to_rgb(hue, 0.45 + 0.18 * (i % 3), 0.85 - 0.12 * (i % 3))
        colors.append(0.08 + 0.84 * np.array(rgb))
    background = 0.08 + 0.84 * np.array(colorsys.hsv_to_rgb(hue, 0.5, 0.18))
    return pattern, colors, background


def sample_scene(seed: int, prompt_class: int, n_classes: int = 4) -> Scene:
    if not 0 <= prompt_class < n_classes:
        raise ValueError(f"prompt_class {prompt_class} not in [0, {n_classes})")
    pattern, colors, background = class_palette(prompt_class)
    rng = np.random.default_rng([_SCENE_SALT, seed, prompt_class])
    count = int(rng.integers(1, 4))
    prims = []
    for i in range(count):
        center = rng.uniform(-0.6, 0.6, size=3)
        size_cap = min(0.45, 1.0 - float(np.abs(center).max()))
        size = float(rng.uniform(0.15, size_cap))
        prims.append(
            Primitive(
                kind=pattern[i % len(pattern)],
                center=center,
                size=size,
                color=colors[i],
            )
        )
    return Scene(tuple(prims), prompt_class, background)


ORBIT_START_AZIMUTH = 0.0
ORBIT_RADIUS = 3.0
ORBIT_FOCAL = 2.0


AZ_STEP = 0.4


def make_trajectory(seed: int, n_views: int) -> list[Pose]:
    """Constant-step azimuth orbit at a seed-dependent elevation.

    Start azimuth, angular step, orbit radius, and focal length are fixed
    constants. With flat-shaded scenes and look-at-origin cameras,
    randomizing start azimuth or radius would leave a rotation and scale
    gauge that no network could recover from images, making dense
    world-coordinate supervision ill-posed; a fixed step additionally
    keeps the cross-view geometry identifiable at small image sizes.
    Elevation varies per scene and holds through the orbit, like a steady
    handheld arc. The gap bound MAX_AZ_GAP sits just above the step to
    absorb floating-point accumulation along the orbit.
    """
    if n_views < 1:
        raise ValueError("make_trajectory: need at least one view")
    rng = np.random.default_rng([_TRAJ_SALT, seed])
    elevation = float(rng.uniform(0.15, 0.65))
    return [
        Pose(ORBIT_START_AZIMUTH + AZ_STEP * i, elevation, ORBIT_RADIUS,
             ORBIT_FOCAL)
        for i in range(n_views)
    ]


# ---------------------------------------------------------------------------
# ray casting


def _pixel_rays(pose: Pose, H: int, W: int):
    """Ray origins/dirs for all pixel centers; dirs scaled so t equals depth."""
    f = pose.focal * W
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    jj, ii = np.meshgrid(np.arange(W), np.arange(H))
    d_cam = np.stack(
        [(jj - cx) / f, (ii - cy) / f, np.ones((H, W))], axis=-1
    ).reshape(-1, 3)
    d_world = d_cam @ pose.rotation()  # R^T applied to rows
    return pose.position(), d_world


def _intersect_sphere(origin, dirs, center, radius):
    oc = origin - center
    a = (dirs * dirs).sum(axis=1)
    b = 2.0 * dirs @ oc
    c = oc @ oc - radius * radius
    disc = b * b - 4.0 * a * c
    t = np.full(dirs.shape[0], np.inf)
    ok = disc >= 0.0
    if ok.any():
        root = np.sqrt(disc[ok])
        t0 = (-b[ok] - root) / (2.0 * a[ok])
        t1 = (-b[ok] + root) / (2.0 * a[ok])
        tt = np.where(t0 > _RAY_EPS, t0, np.where(t1 > _RAY_EPS, t1, np.inf))
        t[ok] = tt
    return t


def _intersect_box(origin, dirs, center, half):
    lo, hi = center - half, center + half
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origin) / dirs
        t2 = (hi - origin) / dirs
    # rays parallel to a slab: inside -> (-inf, inf), outside -> empty
    par = dirs == 0.0
    if par.any():
        inside = (origin >= lo) & (origin <= hi)
        t1 = np.where(par, np.where(inside, -np.inf, np.inf), t1)
        t2 = np.where(par, np.where(inside, np.inf, -np.inf), t2)
    tmin = np.minimum(t1, t2).max(axis=1)
    tmax = np.maximum(t1, t2).min(axis=1)
    hit = (tmax >= tmin) & (tmax > _RAY_EPS)
    t = np.where(tmin > _RAY_EPS, tmin, tmax)
    return np.where(hit, t, np.inf)


def render_view(scene: Scene, pose: Pose, H: int, W: int):
    """Render one view; returns (frame, coords, valid, confidence)."""
    origin, dirs = _pixel_rays(pose, H, W)
    n_px = dirs.shape[0]
    if scene.primitives:
        ts = np.full((len(scene.primitives), n_px), np.inf)
        for k, prim in enumerate(scene.primitives):
            if prim.kind == "sphere":
                ts[k] = _intersect_sphere(origin, dirs, prim.center, prim.size)
            elif prim.kind == "box":
                ts[k] = _intersect_box(origin, dirs, prim.center, prim.size)
            else:
                raise ValueError(f"unknown primitive kind {prim.kind!r}")
        nearest = ts.argmin(axis=0)
        t_hit = ts[nearest, np.arange(n_px)]
    else:
        nearest = np.zeros(n_px, dtype=np.int64)
        t_hit = np.full(n_px, np.inf)
    valid = np.isfinite(t_hit)

    frame = np.tile(scene.background, (n_px, 1))
    coords = np.tile(FAR_SENTINEL, (n_px, 1))
    if valid.any():
        prim_colors = np.stack([p.color for p in scene.primitives])
        frame[valid] = prim_colors[nearest[valid]]
        coords[valid] = origin + t_hit[valid, None] * dirs[valid]
    confidence = valid.astype(np.float64)
    return (
        frame.reshape(H, W, 3),
        coords.reshape(H, W, 3),
        valid.reshape(H, W),
        confidence.reshape(H, W),
    )


def render_sequence(scene: Scene, poses: list[Pose], H: int, W: int):
    frames, coords, valids, confs = [], [], [], []
    for pose in poses:
        f, c, v, cf = render_view(scene, pose, H, W)
        frames.append(f)
        coords.append(c)
        valids.append(v)
        confs.append(cf)
    return (
        ViewSequence(np.stack(frames), list(poses)),
        Pointmap(np.stack(coords), np.stack(valids), np.stack(confs)),
    )


def project(pose: Pose, points: np.ndarray, H: int, W: int):
    """World points (n, 3) -> pixel columns u, rows v, camera depth."""
    q = (points - pose.position()) @ pose.rotation().T
    f = pose.focal * W
    depth = q[:, 2]
    u = f * q[:, 0] / depth + (W - 1) / 2.0
    v = f * q[:, 1] / depth + (H - 1) / 2.0
    return u, v, depth


# ---------------------------------------------------------------------------
# datasets


@dataclass
class SceneRecord:
    frames: np.ndarray  # (V, H, W, 3)
    coords: np.ndarray  # (V, H, W, 3)
    valid: np.ndarray  # (V, H, W) bool
    confidence: np.ndarray  # (V, H, W)
    poses: list[Pose]
    prompt_class: int
    seed: int


@dataclass
class Dataset:
    records: list[SceneRecord]
    n_classes: int
    V: int
    H: int
    W: int

    def __len__(self) -> int:
        return len(self.records)


def build_record(seed: int, prompt_class: int, n_classes: int, V: int, H: int, W: int) -> SceneRecord:
    scene = sample_scene(seed, prompt_class, n_classes)
    poses = make_trajectory(seed, V)
    seq, pm = render_sequence(scene, poses, H, W)
    return SceneRecord(seq.frames, pm.coords, pm.valid, pm.confidence, poses, prompt_class, seed)


def generate_dataset(n_scenes: int, V: int, H: int, W: int, seed: int, n_classes: int) -> Dataset:
    """Scene seeds drawn from one root seed; classes cycle so all are covered."""
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_scenes):
        scene_seed = int(rng.integers(0, 2**31 - 1))
        records.append(build_record(scene_seed, i % n_classes, n_classes, V, H, W))
    return Dataset(records, n_classes, V, H, W)


def emit_dataset(path, n_scenes: int, V: int, H: int, W: int, seed: int, n_classes: int = 4) -> Dataset:
    ds = generate_dataset(n_scenes, V, H, W, seed, n_classes)
    table = {}
    for i, rec in enumerate(ds.records):
        key = f"scene{i:04d}"
        table[f"{key}/frames"] = rec.frames
        table[f"{key}/coords"] = rec.coords
        table[f"{key}/valid"] = rec.valid.astype(np.float64)
        table[f"{key}/confidence"] = rec.confidence
        table[f"{key}/poses"] = np.stack([p.params() for p in rec.poses])
    write_tensors(path, table)
    write_sidecar(
        sidecar_path(path),
        {
            "version": DATASET_VERSION,
            "C": n_classes,
            "V": V,
            "H": H,
            "W": W,
            "seeds": [rec.seed for rec in ds.records],
            "prompt_classes": [rec.prompt_class for rec in ds.records],
        },
    )
    return ds


def load_dataset(path) -> Dataset:
    meta = read_sidecar(sidecar_path(path))
    if meta.get("version") != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {meta.get('version')}")
    table = read_tensors(path)
    C, V, H, W = meta["C"], meta["V"], meta["H"], meta["W"]
    records = []
    for i, (seed, cls) in enumerate(zip(meta["seeds"], meta["prompt_classes"])):
        key = f"scene{i:04d}"
        frames = table[f"{key}/frames"]
        if frames.shape != (V, H, W, 3):
            raise ValueError(
                f"dataset {key}: frames shape {frames.shape} does not match sidecar dims {(V, H, W, 3)}"
            )
        pose_arr = table[f"{key}/poses"]
        poses = [Pose(*row) for row in pose_arr]
        records.append(
            SceneRecord(
                frames,
                table[f"{key}/coords"],
                table[f"{key}/valid"] > 0.5,
                table[f"{key}/confidence"],
                poses,
                int(cls),
                int(seed),
            )
        )
    return Dataset(records, C, V, H, W)
