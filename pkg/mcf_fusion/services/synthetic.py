"""Deterministic synthetic feature bundles with planted per-stream latents."""

import math

import numpy as np
import structlog

from mcf_fusion.api.dto import AVD_DIMS, SynthMode, SyntheticSpec
from mcf_fusion.nn.tensor import RngState
from mcf_fusion.services.bundle import FeatureBundle

logger = structlog.get_logger(__name__)

# Seed offsets; each concern draws from its own stream.
_SIGNAL, _LATENT, _NOISE, _MASK, _LABELS = 1, 2, 3, 4, 5

CONT_SLOPE = 0.15
CONT_CENTER = (0.35, 0.65)
DISC_BIAS_SCALE = 0.5


def signal_rows(tokens: int) -> int:
    """Number of leading tokens that carry the planted signal: ⌈t/4⌉."""
    return max(1, math.ceil(tokens / 4))


def _unit(gen: np.random.Generator, d: int) -> np.ndarray:
    v = gen.standard_normal(d)
    return v / np.linalg.norm(v)


def gen_synthetic(spec: SyntheticSpec) -> FeatureBundle:
    """Build a bundle that is a pure function of `spec`.

    Each sample draws z_FG, z_VS ∈ {−1, +1}; the FG and VS streams get
    signal_strength · z · u added to their first ⌈t/4⌉ tokens, where u is a
    fixed unit vector per stream. The person stream is noise only.
    xor mode labels class 1 iff z_FG = z_VS; linear mode thresholds a seeded
    linear map of (z_FG, z_VS, ξ) for the discrete labels and keeps AVD an
    affine map of the latents inside [0, 1].
    """
    g, n = spec.geometry, spec.n_samples
    n_disc = spec.n_disc or 2
    root = RngState(spec.seed)

    signal_gen = root.derive(_SIGNAL).generator()
    u_fg = _unit(signal_gen, g.d_fg)
    u_vs = _unit(signal_gen, g.d_vs)

    latent_gen = root.derive(_LATENT).generator()
    z_fg = latent_gen.choice([-1.0, 1.0], size=n)
    z_vs = latent_gen.choice([-1.0, 1.0], size=n)

    noise_gen = root.derive(_NOISE).generator()
    sigma = spec.noise_sigma
    e_pe = sigma * noise_gen.standard_normal((n, g.t_pe, g.d_pe))
    e_fg = sigma * noise_gen.standard_normal((n, g.t_fg, g.d_fg))
    e_vs = sigma * noise_gen.standard_normal((n, g.t_vs, g.d_vs))

    k_fg, k_vs = signal_rows(g.t_fg), signal_rows(g.t_vs)
    e_fg[:, :k_fg] += spec.signal_strength * z_fg[:, None, None] * u_fg
    e_vs[:, :k_vs] += spec.signal_strength * z_vs[:, None, None] * u_vs

    mask_gen = root.derive(_MASK).generator()
    lengths = mask_gen.integers(k_fg, g.t_fg + 1, size=n)
    fg_mask = np.arange(g.t_fg)[None, :] < lengths[:, None]
    e_fg[~fg_mask] = 0.0

    bundle = FeatureBundle(
        task=spec.task,
        n_disc=n_disc,
        geometry=g,
        e_pe=e_pe.astype(np.float32),
        e_fg=e_fg.astype(np.float32),
        e_vs=e_vs.astype(np.float32),
        fg_mask=fg_mask,
    )

    if spec.mode is SynthMode.XOR:
        bundle.y_class = (z_fg == z_vs).astype(np.uint16)
    else:
        label_gen = root.derive(_LABELS).generator()
        A = label_gen.standard_normal((n_disc, 3))
        A[:, 2] *= spec.label_noise
        b = label_gen.normal(0.0, DISC_BIAS_SCALE, size=n_disc)
        xi = label_gen.standard_normal(n)
        feats = np.stack([z_fg, z_vs, xi], axis=1)
        bundle.y_disc = (feats @ A.T + b > 0).astype(np.uint8)

        C = label_gen.uniform(-CONT_SLOPE, CONT_SLOPE, size=(AVD_DIMS, 2))
        c = label_gen.uniform(*CONT_CENTER, size=AVD_DIMS)
        latents = np.stack([z_fg, z_vs], axis=1)
        bundle.y_cont = np.clip(latents @ C.T + c, 0.0, 1.0).astype(np.float32)

    if n == 0:
        logger.warning("Generated an empty synthetic bundle", mode=spec.mode.value)
    else:
        logger.info(
            "Generated synthetic bundle",
            mode=spec.mode.value,
            samples=n,
            seed=spec.seed,
            task=spec.task.value,
        )
    return bundle
