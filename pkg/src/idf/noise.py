"""Seeded synthetic noise for training corpora and out-of-distribution tests.

Every synthesizer takes a ``(C, H, W)`` image in [0, 1] and a numpy
``Generator`` and returns a new clamped image. Gaussian-family levels are in
0-255 units; all other parameters are in [0, 1] units.
"""

from dataclasses import dataclass

import numpy as np

from . import core

KINDS = ("gaussian", "spatial_gaussian", "poisson", "salt_pepper", "speckle", "mixture")

# (gaussian var, speckle var 1, poisson alpha, s&p density, speckle var 2)
MIXTURE_LEVELS = {
    1: (0.003, 0.003, 1.0, 0.002, 0.003),
    2: (0.004, 0.004, 1.0, 0.002, 0.003),
    3: (0.006, 0.006, 1.0, 0.003, 0.006),
    4: (0.008, 0.008, 1.0, 0.004, 0.008),
}


def make_rng(seed, stream=0):
    """Counter-based (Philox) generator for ``(seed, stream)``.

    Distinct streams of one seed are independent, so corpora can be
    synthesized in any order or in parallel and still be reproducible.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


def _clamp01(a):
    return np.clip(a, 0.0, 1.0)


def _check(name, value, lo=0.0, hi=None):
    if not value >= lo or (hi is not None and value > hi):
        raise ValueError(f"{name} out of range: {value}")


def add_gaussian(img, sigma255, rng):
    _check("sigma", sigma255)
    img = np.asarray(img, dtype=np.float64)
    if sigma255 == 0:
        return img.copy()
    return _clamp01(img + rng.normal(0.0, sigma255 / 255.0, img.shape))


def spatial_gaussian_field(shape, sigma255, rng):
    """i.i.d. N(0, (sigma/255)^2) noise smoothed by a 3x3 box filter."""
    n = rng.normal(0.0, sigma255 / 255.0, shape)
    return core.unfold(n, 3, 1).data.mean(axis=1).reshape(shape)


def add_spatial_gaussian(img, sigma255, rng):
    _check("sigma", sigma255)
    img = np.asarray(img, dtype=np.float64)
    if sigma255 == 0:
        return img.copy()
    return _clamp01(img + spatial_gaussian_field(img.shape, sigma255, rng))


def add_poisson(img, alpha, rng):
    # shot noise at 8-bit photon scale, zero-mean, scaled by alpha
    _check("alpha", alpha)
    img = np.asarray(img, dtype=np.float64)
    if alpha == 0:
        return img.copy()
    n = rng.poisson(np.clip(img, 0.0, None) * 255.0) / 255.0 - img
    return _clamp01(img + n * alpha)


def add_salt_pepper(img, d, rng):
    """imnoise-style impulses; a hit pixel is set to 0 or 1 in every channel."""
    _check("density", d, 0.0, 1.0)
    img = np.asarray(img, dtype=np.float64)
    out = img.copy()
    if d == 0:
        return out
    u = rng.random(img.shape[1:])
    out[:, u < d / 2] = 0.0
    out[:, (u >= d / 2) & (u < d)] = 1.0
    return out


def add_speckle(img, v, rng):
    """Multiplicative noise J = I + n*I with n uniform, zero mean, variance v."""
    _check("variance", v)
    img = np.asarray(img, dtype=np.float64)
    if v == 0:
        return img.copy()
    half = np.sqrt(3.0 * v)
    return _clamp01(img + rng.uniform(-half, half, img.shape) * img)


def add_mixture(img, level, rng):
    if level not in MIXTURE_LEVELS:
        raise ValueError(f"mixture level must be 1-4, got {level}")
    var_g, var_s1, alpha, d, var_s2 = MIXTURE_LEVELS[level]
    out = add_gaussian(img, np.sqrt(var_g) * 255.0, rng)
    out = add_speckle(out, var_s1, rng)
    out = add_poisson(out, alpha, rng)
    out = add_salt_pepper(out, d, rng)
    return add_speckle(out, var_s2, rng)


_APPLY = {
    "gaussian": add_gaussian,
    "spatial_gaussian": add_spatial_gaussian,
    "poisson": add_poisson,
    "salt_pepper": add_salt_pepper,
    "speckle": add_speckle,
    "mixture": lambda img, level, rng: add_mixture(img, int(level), rng),
}


@dataclass(frozen=True)
class NoiseSpec:
    """One noise family with its single level parameter.

    Written as ``kind:value`` in configs and on the command line, e.g.
    ``gaussian:25``, ``salt_pepper:0.02`` or ``mixture:4``.
    """

    kind: str
    value: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "mixture":
            if self.value not in MIXTURE_LEVELS:
                raise ValueError(f"mixture level must be 1-4, got {self.value}")
        elif self.kind == "salt_pepper":
            _check("density", self.value, 0.0, 1.0)
        else:
            _check(self.kind, self.value)

    @classmethod
    def parse(cls, text, seed=0):
        kind, sep, value = text.strip().partition(":")
        if not sep:
            raise ValueError(f"noise spec must look like kind:value, got {text!r}")
        return cls(kind.strip(), float(value), seed)

    def __str__(self):
        v = self.value
        return f"{self.kind}:{int(v)}" if float(v).is_integer() else f"{self.kind}:{v!r}"

    def apply(self, img, rng=None, stream=0):
        if rng is None:
            rng = make_rng(self.seed, stream)
        return _APPLY[self.kind](img, self.value, rng)
