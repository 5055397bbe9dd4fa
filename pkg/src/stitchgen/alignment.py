"""Reward finetuning of the latent generator against the stitched decoder.

A training step simulates a full denoising rollout with a randomized step
count, keeps gradients alive at K randomly chosen steps while detaching the
model input at every step, scores the final latent with a three-component
reward (decoded-frame quality, rendered-pointmap quality, cross-view
consistency), and minimizes the flow-matching loss minus that reward.
Updates go through low-rank adapters on the generator's three affine maps;
the base weights stay frozen.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import NumericError
from .networks import Critic, FlowGenerator, VideoAE, flow_loss, pose_from_params
from .nn import AdamW, LowRankAdapter
from .stitching import StitchedModel
from .tensor import Tensor
from .worldgen import project

_ROLLOUT_SALT = 31
_VIEW_SALT = 37
_STEP_SALT = 41
_ADAPTER_SALT = 43
_RUN_SALT = 47

REWARD_WEIGHTS = (1.0 / 16.0, 1.0 / 16.0, 0.05)
GENERATOR_ADAPTED = ("g.w1", "g.w2", "g.w3")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# denoising rollouts with partial gradients


@dataclass(frozen=True)
class RolloutConfig:
    """Step-count range [T1, T2] and the number K of gradient-enabled steps."""

    T1: int = 10
    T2: int = 50
    K: int = 2
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.T1 <= self.T2:
            raise ValueError(
                f"rollout config: need 1 <= T1 <= T2, got T1={self.T1} T2={self.T2}"
            )
        if not 0 <= self.K <= self.T1:
            raise ValueError(
                f"rollout config: need 0 <= K <= T1, got K={self.K} T1={self.T1}"
            )


@dataclass
class RolloutTrace:
    """One simulated denoising run.

    ``schedule`` holds the times 1 = tau_0 > ... > tau_t = 0; step j
    evaluates the velocity at tau_{j-1}. ``t_train`` lists the steps whose
    evaluations stayed on the tape. ``z_init`` is the noise leaf, so its
    gradient is readable after a backward pass through ``z_0``.
    """

    t: int
    schedule: np.ndarray
    t_train: tuple[int, ...]
    z_init: Tensor
    z_0: Tensor


def rollout(gen: FlowGenerator, prompt_class: int, cfg: RolloutConfig,
            adapters=None, z_init=None, t_train=None) -> RolloutTrace:
    """Euler-integrate the generator from noise to a final latent.

    The step count t is uniform on {T1..T2} and t_train is a uniform draw of
    K distinct steps from {1..t} (both overridable for targeted tests; the
    draw order is t, then t_train, then the initial noise, and an override
    skips its draw). Every model input is detached, and steps outside
    t_train run off the tape entirely, so the state update z <- z - (1/t) v
    reaches z_0 with unit coefficients: z_0 is z_init minus the sum of step
    increments, and only the t_train increments carry parameter gradients.
    """
    rng = np.random.default_rng([_ROLLOUT_SALT, cfg.seed])
    t = int(rng.integers(cfg.T1, cfg.T2 + 1))
    if cfg.K > t:
        raise ValueError(f"rollout: K={cfg.K} exceeds the sampled step count t={t}")
    if t_train is None:
        if cfg.K > 0:
            draw = rng.choice(np.arange(1, t + 1), size=cfg.K, replace=False)
            t_train = tuple(sorted(int(j) for j in draw))
        else:
            t_train = ()
    else:
        t_train = tuple(sorted(int(j) for j in t_train))
        if len(t_train) != cfg.K:
            raise ValueError(f"rollout: t_train override has {len(t_train)} steps, K={cfg.K}")
        if len(set(t_train)) != len(t_train) or any(not 1 <= j <= t for j in t_train):
            raise ValueError(f"rollout: t_train {t_train} not distinct steps in [1, {t}]")
    if z_init is None:
        noise = rng.normal(size=gen.latent_shape)
    else:
        noise = np.array(z_init.data if isinstance(z_init, Tensor) else z_init,
                         dtype=np.float64, copy=True)

    leaf = Tensor(noise, requires_grad=True)
    schedule = 1.0 - np.arange(t + 1) / t
    schedule[-1] = 0.0
    enabled = set(t_train)
    dt = 1.0 / t
    z = leaf
    for j in range(1, t + 1):
        tau = float(schedule[j - 1])
        z_in = T.stop_grad(z)
        if j in enabled:
            v = gen.v(z_in, tau, prompt_class, adapters=adapters)
        else:
            with T.no_grad():
                v = gen.v(z_in, tau, prompt_class, adapters=adapters)
        z = T.sub(z, T.mul(v, dt))
    return RolloutTrace(t, schedule, t_train, leaf, z)


# ---------------------------------------------------------------------------
# reward components


def reward_quality(images, prompt_class: int, critic: Critic) -> Tensor:
    """Mean critic log-probability of the prompt class over the given views."""
    images = _as_tensor(images)
    logp = T.log_softmax(critic.logits(images))
    return T.tmean(T.getitem(logp, (slice(None), prompt_class)))


def _shift_diff(x: Tensor, s: int, axis: int) -> Tensor:
    """Finite-difference image gradient with pixel offset ``s`` along an axis."""
    n = x.shape[axis]
    if axis == 0:
        hi, lo = (slice(s, None),), (slice(0, n - s),)
    else:
        hi, lo = (slice(None), slice(s, None)), (slice(None), slice(0, n - s))
    return T.sub(T.getitem(x, hi), T.getitem(x, lo))


def reward_consistency(a, b) -> Tensor:
    """Negated pixel L1 plus a structural term; 0 exactly for identical images.

    The structural term compares finite-difference image gradients at pixel
    offsets 1 and 2 (both axes, four mean-L1 terms averaged) and enters with
    weight 0.25. Both terms are absolute differences, so the reward is
    symmetric and always <= 0.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"reward_consistency: shapes {a.shape} vs {b.shape}")
    if a.ndim != 3 or a.shape[0] <= 2 or a.shape[1] <= 2:
        raise ValueError(f"reward_consistency: expects (H, W, 3) with H, W > 2, got {a.shape}")
    pix = T.l1(a, b)
    terms = []
    for s in (1, 2):
        for axis in (0, 1):
            terms.append(T.l1(_shift_diff(a, s, axis), _shift_diff(b, s, axis)))
    structural = T.mul(T.add(T.add(terms[0], terms[1]), T.add(terms[2], terms[3])), 0.25)
    return T.neg(T.add(pix, T.mul(structural, 0.25)))


def splat_render(points: np.ndarray, colors: Tensor, keep: np.ndarray, pose,
                 H: int, W: int, base: Tensor) -> Tensor:
    """Project points onto a view and z-buffer them as one-pixel splats.

    ``points`` and ``keep`` are plain arrays (positions do not carry
    gradients); ``colors`` is differentiable, and pixels no splat reaches
    keep their ``base`` value. Nearer points win ties per pixel.
    """
    u, v, depth = project(pose, points, H, W)
    iu = np.rint(u).astype(np.int64)
    iv = np.rint(v).astype(np.int64)
    ok = keep & (depth > 0) & (iu >= 0) & (iu < W) & (iv >= 0) & (iv < H)
    rows = np.flatnonzero(ok)
    flat = base
    if rows.size:
        pix = iv[rows] * W + iu[rows]
        order = np.lexsort((depth[rows], pix))
        sorted_pix = pix[order]
        first = np.concatenate([[True], sorted_pix[1:] != sorted_pix[:-1]])
        winners = rows[order[first]]
        flat = T.scatter_rows(T.reshape(base, (H * W, 3)), sorted_pix[first],
                              T.getitem(colors, winners))
        flat = T.reshape(flat, (H, W, 3))
    return flat


def combine_reward(q_mv: float, q_3d: float, cons: float,
                   weights=REWARD_WEIGHTS) -> float:
    """The documented aggregation; mirrors the tensor-side arithmetic exactly."""
    return (weights[0] * q_mv + weights[1] * q_3d) + weights[2] * cons


@dataclass
class RewardBreakdown:
    q_mv: float
    q_3d: float
    cons: float
    total: float
    sampled_views: tuple[int, int]


def total_reward(z_0, prompt_class: int, stitched: StitchedModel, ae: VideoAE,
                 critic: Critic, seed: int, weights=REWARD_WEIGHTS):
    """Score a final latent; returns (total as a tensor, breakdown record).

    Two distinct views are drawn from the seed. Frame quality scores the
    decoded frames of those views; pointmap quality scores one-pixel splat
    renders of the stitched decoder's pointmap (colored by the decoded
    frames, gated by predicted confidence >= 0.5, projected to the two
    predicted poses); consistency compares each decoded view against its
    render. The total is the weighted sum, default weights
    (1/16, 1/16, 0.05).
    """
    z = _as_tensor(z_0)
    n_views = z.shape[0]
    if n_views < 2:
        raise ValueError(f"total_reward: needs at least two views, got {n_views}")
    rng = np.random.default_rng([_VIEW_SALT, seed])
    va, vb = (int(i) for i in rng.choice(n_views, size=2, replace=False))

    decoded = ae.decode(z)  # (V, H, W, 3)
    out = stitched.decode_latent(z)
    H, W = ae.H, ae.W
    points = out["pointmap"].data.reshape(-1, 3)
    keep = out["confidence"].data.reshape(-1) >= 0.5
    colors = T.reshape(decoded, (n_views * H * W, 3))

    q_mv = reward_quality(T.getitem(decoded, np.array([va, vb])), prompt_class, critic)
    renders, cons_terms = [], []
    for view in (va, vb):
        pose = pose_from_params(out["pose_params"].data[view])
        base = Tensor(decoded.data[view].copy())  # uncovered pixels, off the tape
        render = splat_render(points, colors, keep, pose, H, W, base)
        renders.append(T.reshape(render, (1, H, W, 3)))
        cons_terms.append(reward_consistency(T.getitem(decoded, view), render))
    q_3d = reward_quality(T.concat(renders, axis=0), prompt_class, critic)
    cons = T.mul(T.add(cons_terms[0], cons_terms[1]), 0.5)

    for name, value in (("q_mv", q_mv.item()), ("q_3d", q_3d.item()), ("cons", cons.item())):
        if not np.isfinite(value):
            raise NumericError(f"total_reward: non-finite {name} ({value})")
    total = T.add(T.add(T.mul(q_mv, weights[0]), T.mul(q_3d, weights[1])),
                  T.mul(cons, weights[2]))
    breakdown = RewardBreakdown(q_mv.item(), q_3d.item(), cons.item(), total.item(),
                                (va, vb))
    return total, breakdown


# ---------------------------------------------------------------------------
# the finetuning loop


@dataclass
class AlignConfig:
    T1: int = 10
    T2: int = 50
    K: int = 2
    steps: int = 60
    batch: int = 4
    lr: float = 1e-4
    clip: float = 0.1
    adapter_rank: int = 8
    adapter_alpha: float = 16.0
    w_mv: float = REWARD_WEIGHTS[0]
    w_3d: float = REWARD_WEIGHTS[1]
    w_cons: float = REWARD_WEIGHTS[2]
    seed: int = 0

    @property
    def weights(self) -> tuple[float, float, float]:
        return (self.w_mv, self.w_3d, self.w_cons)


@dataclass
class AlignStepResult:
    """One row of the training log."""

    step: int
    t: int
    t_train: tuple[int, ...]
    L_gen: float
    q_mv: float
    q_3d: float
    cons: float
    total: float
    L_total: float
    grad_norm: float


def make_generator_adapters(gen: FlowGenerator, rank: int = 8, alpha: float = 16.0,
                            seed: int = 0) -> dict[str, LowRankAdapter]:
    """Zero-initialized low-rank adapters over the generator's affine maps."""
    rng = np.random.default_rng([_ADAPTER_SALT, seed])
    adapters = {}
    for name in GENERATOR_ADAPTED:
        base = gen.params[name]
        bias = gen.params[name.replace(".w", ".b")]
        r = min(rank, min(base.shape))  # tiny test generators cap the usable rank
        adapters[name] = LowRankAdapter(base, bias, r, alpha, rng)
    return adapters


def adapter_trainables(adapters: dict[str, LowRankAdapter]) -> dict[str, Tensor]:
    params = {}
    for name, adapter in adapters.items():
        params.update(adapter.params(f"adapter.{name}"))
    return params


def _rollout_seed(seed: int, step: int) -> int:
    """Per-step rollout seed, decorrelated from the batch-sampling stream."""
    return int(np.random.default_rng([_RUN_SALT, seed, step]).integers(2**31 - 1))


def flow_batch_loss(gen: FlowGenerator, latents, classes, rng, adapters=None) -> Tensor:
    """Mean flow-matching loss over a batch; draws (t, noise) per sample."""
    if not latents:
        raise ValueError("flow_batch_loss: empty batch")
    loss = None
    for z, c in zip(latents, classes):
        t = float(rng.uniform())
        noise = rng.normal(size=np.shape(z))
        term = flow_loss(gen, z, c, noise, t, adapters=adapters)
        loss = term if loss is None else T.add(loss, term)
    return T.mul(loss, 1.0 / len(latents))


def align_step(gen: FlowGenerator, batch, prompts, stitched: StitchedModel,
               ae: VideoAE, critic: Critic, cfg: AlignConfig,
               adapters: dict[str, LowRankAdapter], opt: AdamW,
               step: int) -> AlignStepResult:
    """One combined update: flow-matching loss minus the rollout reward.

    ``batch``/``prompts`` feed the flow-matching term; the first prompt
    drives the reward rollout. Both losses share one optimizer step. With
    every reward weight zero the rollout still runs for the log but stays
    off the tape, so the update is exactly a flow-matching step.
    """
    rng = np.random.default_rng([_STEP_SALT, cfg.seed, step])
    l_gen = flow_batch_loss(gen, batch, prompts, rng, adapters=adapters)
    rollout_cfg = RolloutConfig(cfg.T1, cfg.T2, cfg.K, seed=_rollout_seed(cfg.seed, step))
    reward_off = all(w == 0.0 for w in cfg.weights)
    if reward_off:
        with T.no_grad():
            trace = rollout(gen, prompts[0], rollout_cfg, adapters=adapters)
            total_t, breakdown = total_reward(trace.z_0, prompts[0], stitched, ae,
                                              critic, rollout_cfg.seed, cfg.weights)
        l_total = l_gen
    else:
        trace = rollout(gen, prompts[0], rollout_cfg, adapters=adapters)
        total_t, breakdown = total_reward(trace.z_0, prompts[0], stitched, ae,
                                          critic, rollout_cfg.seed, cfg.weights)
        l_total = T.sub(l_gen, total_t)

    l_total_val = l_gen.item() - breakdown.total
    if not np.isfinite(l_total_val):
        raise NumericError(
            f"alignment diverged at step {step}: L_gen={l_gen.item()} "
            f"q_mv={breakdown.q_mv} q_3d={breakdown.q_3d} cons={breakdown.cons}"
        )
    opt.zero_grad()
    T.backward(l_total)
    try:
        grad_norm = opt.step()
    except FloatingPointError as exc:
        raise NumericError(
            f"alignment diverged at step {step}: {exc}; L_gen={l_gen.item()} "
            f"q_mv={breakdown.q_mv} q_3d={breakdown.q_3d} cons={breakdown.cons}"
        ) from exc
    return AlignStepResult(step, trace.t, trace.t_train, l_gen.item(),
                           breakdown.q_mv, breakdown.q_3d, breakdown.cons,
                           breakdown.total, l_total_val, float(grad_norm))


def align_run(gen: FlowGenerator, dataset, ae: VideoAE, stitched: StitchedModel,
              critic: Critic, cfg: AlignConfig | None = None, log_path=None):
    """Run the alignment schedule; returns (adapters, step results).

    Latents are encoded once up front. Each step samples a flow-matching
    batch and a rollout prompt from the run seed, so the whole run is
    reproducible from (models, dataset, config).
    """
    cfg = cfg or AlignConfig()
    adapters = make_generator_adapters(gen, cfg.adapter_rank, cfg.adapter_alpha, cfg.seed)
    opt = AdamW(adapter_trainables(adapters), lr=cfg.lr, clip_norm=cfg.clip)
    with T.no_grad():
        latents = [ae.encode(rec.frames).data for rec in dataset.records]
    classes = [rec.prompt_class for rec in dataset.records]
    rng = np.random.default_rng([_RUN_SALT, cfg.seed])
    rows = []
    for step in range(cfg.steps):
        idx = rng.integers(0, len(latents), size=cfg.batch)
        batch = [latents[i] for i in idx]
        prompts = [classes[i] for i in idx]
        rows.append(align_step(gen, batch, prompts, stitched, ae, critic, cfg,
                               adapters, opt, step))
    if log_path is not None:
        write_align_log(log_path, rows)
    return adapters, rows


# ---------------------------------------------------------------------------
# training log


_LOG_HEADER = ["step", "t", "t_train", "L_gen", "q_mv", "q_3d", "cons", "total",
               "L_total", "grad_norm"]


def write_align_log(path, rows: list[AlignStepResult]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_LOG_HEADER)
        for r in rows:
            floats = (r.L_gen, r.q_mv, r.q_3d, r.cons, r.total, r.L_total, r.grad_norm)
            writer.writerow([r.step, r.t, "|".join(str(j) for j in r.t_train)]
                            + [repr(float(x)) for x in floats])


def read_align_log(path, weights=REWARD_WEIGHTS) -> list[AlignStepResult]:
    """Parse a training log, re-checking the reward aggregation per row."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != _LOG_HEADER:
            raise ValueError(f"align log: unexpected header {header}")
        for rec in reader:
            t_train = tuple(int(j) for j in rec[2].split("|")) if rec[2] else ()
            row = AlignStepResult(int(rec[0]), int(rec[1]), t_train,
                                  *(float(x) for x in rec[3:]))
            expect = combine_reward(row.q_mv, row.q_3d, row.cons, weights)
            if abs(row.total - expect) > 1e-12:
                raise NumericError(
                    f"align log step {row.step}: total {row.total} does not match "
                    f"aggregated components ({expect})"
                )
            rows.append(row)
    return rows
