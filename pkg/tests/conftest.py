"""Session fixtures: the default-schedule reference models, built once.

The quality-bar tests and the acceptance suite both score models trained
with the library defaults on the default world. Training them is the
slowest part of the suite, so one session-scoped fixture builds them and
records how long that took; tests with their own runtime budgets subtract
the shared build time they did not cause.
"""

import time
from types import SimpleNamespace

import pytest

from stitchgen.config import RunConfig
from stitchgen.networks import (
    AETrainConfig,
    CriticTrainConfig,
    F3DTrainConfig,
    train_autoencoder,
    train_critic,
    train_feedforward3d,
)
from stitchgen.worldgen import generate_dataset

HELDOUT_SEED = 1009
HELDOUT_SCENES = 32


@pytest.fixture(scope="session")
def desk():
    """Dataset, autoencoder, 3D net, and critic at the default desk scale."""
    cfg = RunConfig()
    w, m = cfg.world, cfg.models
    t0 = time.time()
    train = generate_dataset(w.n_scenes, w.n_views, w.H, w.W, w.seed, w.n_classes)
    held = generate_dataset(HELDOUT_SCENES, w.n_views, w.H, w.W, HELDOUT_SEED,
                            w.n_classes)
    ae, ae_losses = train_autoencoder(
        train, AETrainConfig(latent_channels=m.latent_channels,
                             epochs=m.vae_epochs, seed=w.seed))
    f3d, f3d_losses = train_feedforward3d(
        train, F3DTrainConfig(layers=m.f_layers, epochs=m.f3d_epochs,
                              seed=w.seed))
    critic, critic_losses, critic_acc = train_critic(
        train, CriticTrainConfig(width=m.critic_width, epochs=m.critic_epochs,
                                 seed=w.seed))
    return SimpleNamespace(
        cfg=cfg, train=train, held=held,
        ae=ae, ae_losses=ae_losses,
        f3d=f3d, f3d_losses=f3d_losses,
        critic=critic, critic_losses=critic_losses, critic_acc=critic_acc,
        build_seconds=time.time() - t0,
    )
