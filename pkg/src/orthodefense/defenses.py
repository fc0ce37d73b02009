"""Input-transformation defenses: bit-depth reduction, total-variation
smoothing, bilateral filtering and a JPEG-like DCT quantization round trip.

All defenses take a batch (N, C, H, W) or a single image (C, H, W) / (H, W)
with values in [0, 1], act per channel, and return an array of the same
shape in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DEFENSES",
    "DefenseSpec",
    "bit_reduce",
    "tv_energy",
    "tv_minimize",
    "bilateral",
    "jpeg_quant_table",
    "jpeg_like",
    "jpeg_coefficients",
    "apply_defense",
]

DEFENSES = ("jpeg", "tvm", "bit", "bilateral")

# ITU T.81 Annex K luminance table
LUMINANCE_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None, None], x.shape
    if x.ndim == 3:
        return x[None], x.shape
    if x.ndim == 4:
        return x, x.shape
    raise ValueError(f"expected an image or a batch of images, got shape {x.shape}")


# ---------------------------------------------------------------------------
# bit-depth reduction


def bit_reduce(x, depth: int) -> np.ndarray:
    """Quantize to ``2**depth`` levels, rounding halves up."""
    if not 1 <= depth <= 8:
        raise ValueError(f"depth must lie in [1, 8], got {depth}")
    levels = 2 ** depth - 1
    x = np.asarray(x, dtype=np.float64)
    return np.floor(x * levels + 0.5) / levels


# ---------------------------------------------------------------------------
# total variation

TV_EPS = 1e-6


def _forward_diff(u):
    dx = np.zeros_like(u)
    dy = np.zeros_like(u)
    dx[..., :, :-1] = u[..., :, 1:] - u[..., :, :-1]
    dy[..., :-1, :] = u[..., 1:, :] - u[..., :-1, :]
    return dx, dy


def tv_energy(u, x, weight: float) -> np.ndarray:
    """Per-image ``||u - x||^2 + weight * TV(u)`` with smoothed isotropic TV."""
    u, _ = _as_batch(u)
    x, _ = _as_batch(x)
    dx, dy = _forward_diff(u)
    tv = np.sqrt(dx ** 2 + dy ** 2 + TV_EPS ** 2).sum(axis=(1, 2, 3))
    return ((u - x) ** 2).sum(axis=(1, 2, 3)) + weight * tv


def _tv_energy_grad(u, x, weight):
    dx, dy = _forward_diff(u)
    mag = np.sqrt(dx ** 2 + dy ** 2 + TV_EPS ** 2)
    px, py = dx / mag, dy / mag
    # negative divergence of (px, py), the adjoint of the forward difference
    div = px.copy()
    div[..., :, 1:] -= px[..., :, :-1]
    div = div + py
    div[..., 1:, :] -= py[..., :-1, :]
    # pixels on the last column/row have no forward difference
    div[..., :, -1] -= px[..., :, -1]
    div[..., -1, :] -= py[..., -1, :]
    return 2 * (u - x) - weight * div


def tv_minimize(x, weight: float, iters: int = 20, step: float = 0.01, return_energy: bool = False):
    """Projected gradient descent on ``||u - x||^2 + weight * TV(u)``.

    Each iteration tries a step of size ``step`` and halves it (per image)
    until the energy does not increase, so the energy sequence is monotone.
    Iterates are kept in [0, 1].  With ``return_energy`` the per-iteration
    energies, shape (iters + 1, N), are returned as well.
    """
    if not weight > 0:
        raise ValueError("TV weight must be positive")
    xb, shape = _as_batch(x)
    u = xb.copy()
    energy = tv_energy(u, xb, weight)
    history = [energy]
    for _ in range(iters):
        g = _tv_energy_grad(u, xb, weight)
        s = np.full(len(u), float(step))
        cand = u
        new_energy = energy
        pending = np.ones(len(u), dtype=bool)
        for _ in range(50):
            trial = np.clip(u - s[:, None, None, None] * g, 0.0, 1.0)
            e = tv_energy(trial, xb, weight)
            accept = pending & (e <= energy)
            cand = np.where(accept[:, None, None, None], trial, cand)
            new_energy = np.where(accept, e, new_energy)
            pending &= ~accept
            if not pending.any():
                break
            s = np.where(pending, s / 2, s)
        u, energy = cand, new_energy
        if not np.all(np.isfinite(energy)):
            raise FloatingPointError("total-variation energy became non-finite")
        history.append(energy)
    out = u.reshape(shape)
    if return_energy:
        return out, np.stack(history)
    return out


# ---------------------------------------------------------------------------
# bilateral filter


def bilateral(x, window: int = 5, sigma_spatial: float | None = None, sigma_range: float = 0.1) -> np.ndarray:
    """Edge-preserving average over a ``window`` x ``window`` neighbourhood.

    Weights are ``exp(-d^2 / 2 sigma_s^2) * exp(-(I_p - I_q)^2 / 2 sigma_r^2)``;
    coordinates outside the image are clamped to the border.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    sigma_spatial = window / 3 if sigma_spatial is None else sigma_spatial
    if sigma_spatial <= 0 or sigma_range <= 0:
        raise ValueError("sigmas must be positive")
    xb, shape = _as_batch(x)
    r = window // 2
    _, _, h, w = xb.shape
    padded = np.pad(xb, ((0, 0), (0, 0), (r, r), (r, r)), mode="edge")
    num = np.zeros_like(xb)
    den = np.zeros_like(xb)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            q = padded[:, :, r + dy : r + dy + h, r + dx : r + dx + w]
            wgt = np.exp(-(dx * dx + dy * dy) / (2 * sigma_spatial ** 2)) * np.exp(
                -((q - xb) ** 2) / (2 * sigma_range ** 2)
            )
            num += wgt * q
            den += wgt
    return (num / den).reshape(shape)


# ---------------------------------------------------------------------------
# JPEG-like compression


def _dct_matrix(n=8):
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    return m


_DCT = _dct_matrix()


def jpeg_quant_table(quality: int) -> np.ndarray:
    """Luminance table scaled by the usual IJG quality mapping."""
    if not 1 <= quality <= 100:
        raise ValueError(f"quality must lie in [1, 100], got {quality}")
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    return np.maximum(1.0, np.round(LUMINANCE_TABLE * scale / 100))


def _blocks(x):
    """(N, C, H, W) -> padded (N, C, H8/8, 8, W8/8, 8) blocks, level-shifted to [-128, 127]."""
    n, c, h, w = x.shape
    ph, pw = (-h) % 8, (-w) % 8
    xp = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge") * 255.0 - 128.0
    return xp.reshape(n, c, (h + ph) // 8, 8, (w + pw) // 8, 8)


def jpeg_coefficients(x, quality: int) -> np.ndarray:
    """Dequantized DCT coefficients, shape (N, C, by, bx, 8, 8)."""
    xb, _ = _as_batch(x)
    blocks = _blocks(xb).transpose(0, 1, 2, 4, 3, 5)
    coef = _DCT @ blocks @ _DCT.T
    q = jpeg_quant_table(quality)
    return np.round(coef / q) * q


def jpeg_like(x, quality: int = 90) -> np.ndarray:
    """Blockwise DCT quantization round trip (no chroma subsampling or entropy coding)."""
    xb, shape = _as_batch(x)
    n, c, h, w = xb.shape
    coef = jpeg_coefficients(xb, quality)
    blocks = _DCT.T @ coef @ _DCT
    img = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, blocks.shape[2] * 8, blocks.shape[3] * 8)
    img = (img[:, :, :h, :w] + 128.0) / 255.0
    return np.clip(img, 0.0, 1.0).reshape(shape)


# ---------------------------------------------------------------------------
# declarative specs


@dataclass(frozen=True)
class DefenseSpec:
    """A defense kind and its hyperparameters.

    Text form: ``jpeg:quality=90``, ``tvm:weight=3``, ``bit:depth=4``,
    ``bilateral:window=5`` (extra ``key=value`` pairs separated by commas).
    A bare value after the colon sets the primary parameter.
    """

    kind: str
    params: tuple[tuple[str, float], ...] = field(default=())

    _PRIMARY = {"jpeg": "quality", "tvm": "weight", "bit": "depth", "bilateral": "window"}
    _ALLOWED = {
        "jpeg": {"quality"},
        "tvm": {"weight", "iters", "step"},
        "bit": {"depth"},
        "bilateral": {"window", "sigma_spatial", "sigma_range"},
    }

    def __post_init__(self):
        if self.kind not in DEFENSES:
            raise ValueError(f"unknown defense {self.kind!r}; expected one of {DEFENSES}")
        extra = {k for k, _ in self.params} - self._ALLOWED[self.kind]
        if extra:
            raise ValueError(f"{self.kind}: unknown parameters {sorted(extra)}")
        p = self.kwargs()
        if self.kind == "jpeg" and not 1 <= p.get("quality", 90) <= 100:
            raise ValueError("jpeg quality must lie in [1, 100]")
        if self.kind == "bit" and not 1 <= p.get("depth", 4) <= 8:
            raise ValueError("bit depth must lie in [1, 8]")
        if self.kind == "tvm" and not p.get("weight", 3) > 0:
            raise ValueError("tvm weight must be positive")
        if self.kind == "bilateral":
            win = p.get("window", 5)
            if win < 3 or win % 2 == 0:
                raise ValueError("bilateral window must be odd and >= 3")

    def kwargs(self) -> dict:
        out = dict(self.params)
        for key in ("quality", "depth", "window", "iters"):
            if key in out:
                out[key] = int(out[key])
        return out

    @property
    def name(self) -> str:
        if not self.params:
            return self.kind
        return self.kind + ":" + ",".join(f"{k}={_fmt(v)}" for k, v in self.params)

    @classmethod
    def parse(cls, text: str) -> "DefenseSpec":
        kind, _, rest = text.strip().partition(":")
        params = []
        for item in filter(None, (s.strip() for s in rest.split(","))):
            key, sep, value = item.partition("=")
            if not sep:
                key, value = cls._PRIMARY.get(kind, "value"), item
            params.append((key.strip(), float(value)))
        return cls(kind, tuple(params))

    def __call__(self, x):
        return apply_defense(x, self)


def _fmt(v):
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def apply_defense(x, spec: DefenseSpec | None) -> np.ndarray:
    if spec is None:
        return np.asarray(x, dtype=np.float64)
    p = spec.kwargs()
    if spec.kind == "jpeg":
        return jpeg_like(x, **p)
    if spec.kind == "tvm":
        return tv_minimize(x, **p)
    if spec.kind == "bit":
        return bit_reduce(x, **p)
    return bilateral(x, **p)
