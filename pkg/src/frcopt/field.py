"""Coordinate network producing the design fields at arbitrary points.

Input coordinates pass through a frozen Fourier feature projection, a
stack of Swish-activated common layers, then fork into a density branch
and an orientation branch. Sigmoid heads bound every output: the matrix
density in (0, 1), the fiber density in (rho_f_low, rho_f_high), and the
orientation in (-pi/2, pi/2). In multi-material mode the density branch
emits one softmax-normalized column per phase (void last) plus the fiber
density.

The representation is mesh independent: the same weights answer queries
at element centers during optimization and at arbitrary sub-element
points during fiber extraction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture and output-head configuration.

    n_freq frequencies give 2*n_freq input features. l_min / l_max bound
    the representable wavelengths in element units. branch_width = None
    removes the fork (heads attach to the last common layer). phase_count
    switches the density head to multi-material mode with that many
    softmax phases (matrix materials + void).
    """

    n_freq: int = 150
    l_min: float = 4.0
    l_max: float = 80.0
    common_widths: tuple[int, ...] = (40, 40)
    branch_width: int | None = 20
    rho_f_bounds: tuple[float, float] = (0.0, 1.0)
    phase_count: int | None = None

    def __post_init__(self):
        if self.n_freq < 1 or any(w < 1 for w in self.common_widths):
            raise ValueError("layer widths and frequency count must be >= 1")
        if self.branch_width is not None and self.branch_width < 1:
            raise ValueError("branch width must be >= 1 or None")
        lo, hi = self.rho_f_bounds
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"fiber density bounds out of order: {self.rho_f_bounds}")
        if self.phase_count is not None and self.phase_count < 2:
            raise ValueError("multi-material mode needs at least 2 phases")

    @property
    def density_outputs(self) -> int:
        """Neurons in the density head: (rho_m | phases) + rho_f."""
        return 2 if self.phase_count is None else self.phase_count + 1

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per dense layer, in weight-list order:
        common layers, density branch?, orientation branch?, density head,
        orientation head."""
        shapes = []
        prev = 2 * self.n_freq
        for w in self.common_widths:
            shapes.append((prev, w))
            prev = w
        if self.branch_width is not None:
            shapes.append((prev, self.branch_width))   # density branch
            shapes.append((prev, self.branch_width))   # orientation branch
            head_in = self.branch_width
        else:
            head_in = prev
        shapes.append((head_in, self.density_outputs))
        shapes.append((head_in, 1))
        return shapes


def parameter_count(cfg: NetworkConfig) -> int:
    """Exact number of trainable scalars; independent of the mesh."""
    return sum(fi * fo + fo for fi, fo in cfg.layer_shapes())


@dataclass(frozen=True)
class FourierEmbedding:
    """Frozen frequency matrix (2, n_freq) in 1/mm; not trained."""

    freq: np.ndarray

    def features(self, points: np.ndarray) -> np.ndarray:
        """[cos(2 pi x F), sin(2 pi x F)] feature rows for (n, 2) points."""
        phase = 2.0 * np.pi * np.atleast_2d(points) @ self.freq
        return np.concatenate([np.cos(phase), np.sin(phase)], axis=1)


def init_embedding(cfg: NetworkConfig, h: float,
                   rng: np.random.Generator) -> FourierEmbedding:
    """Sample |F| ~ U(h/l_max, h/l_min) with random per-entry signs.

    Signs keep the two axis directions equally represented; without them
    all frequencies point into one quadrant and bias the orientation
    field.
    """
    if cfg.l_min >= cfg.l_max:
        raise ValueError(f"need l_min < l_max, got {cfg.l_min} >= {cfg.l_max}")
    mag = rng.uniform(h / cfg.l_max, h / cfg.l_min, size=(2, cfg.n_freq))
    signs = np.where(rng.random((2, cfg.n_freq)) < 0.5, -1.0, 1.0)
    return FourierEmbedding(mag * signs)


@dataclass
class MlpWeights:
    """Dense layer parameters plus flat-vector views for the optimizer."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def flatten(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, cfg: NetworkConfig, flat: np.ndarray) -> "MlpWeights":
        weights, biases = [], []
        pos = 0
        for fi, fo in cfg.layer_shapes():
            weights.append(flat[pos:pos + fi * fo].reshape(fi, fo).copy())
            pos += fi * fo
            biases.append(flat[pos:pos + fo].copy())
            pos += fo
        if pos != flat.size:
            raise ValueError(f"flat vector length {flat.size}, expected {pos}")
        return cls(weights, biases)


def init_weights(cfg: NetworkConfig, rng: np.random.Generator) -> MlpWeights:
    """Xavier-normal weights, zero biases."""
    weights, biases = [], []
    for fi, fo in cfg.layer_shapes():
        std = np.sqrt(2.0 / (fi + fo))
        weights.append(rng.normal(0.0, std, size=(fi, fo)))
        biases.append(np.zeros(fo))
    return MlpWeights(weights, biases)


@dataclass
class FieldBatch:
    """Network outputs at a batch of points (Vars on the active tape).

    Standard mode: rho_m, rho_f, theta, phases=None.
    Multi-material: phases (n, phase_count) softmax columns (void last),
    rho_m aliases the fiber-bearing column phases[:, 0].
    """

    rho_m: object
    rho_f: object
    theta: object
    phases: object = None


def _check_finite(name: str, var) -> None:
    if not np.all(np.isfinite(ad.value_of(var))):
        raise FloatingPointError(f"non-finite activations after layer {name!r}")


def forward(params, embedding: FourierEmbedding, cfg: NetworkConfig,
            points: np.ndarray, features: np.ndarray | None = None) -> FieldBatch:
    """Evaluate the field at (n, 2) points.

    `params` is a list of leaf Vars alternating [W0, b0, W1, b1, ...]
    (tape mode) or an `MlpWeights` (untracked query mode). Results are
    identical point-for-point regardless of batching. `features` may
    carry precomputed embedding rows for the same points (they are
    constant across epochs).
    """
    if isinstance(params, MlpWeights):
        layers = list(zip(params.weights, params.biases))
    else:
        layers = [(params[2 * i], params[2 * i + 1]) for i in range(len(params) // 2)]

    feats = embedding.features(points) if features is None else features
    n_common = len(cfg.common_widths)
    z = feats
    for i in range(n_common):
        w, b = layers[i]
        z = ad.swish(ad.add(ad.matmul(z, w), b))
        _check_finite(f"common{i}", z)

    if cfg.branch_width is not None:
        wd, bd = layers[n_common]
        wo, bo = layers[n_common + 1]
        zd = ad.swish(ad.add(ad.matmul(z, wd), bd))
        _check_finite("density_branch", zd)
        zo = ad.swish(ad.add(ad.matmul(z, wo), bo))
        _check_finite("orientation_branch", zo)
        head_at = n_common + 2
    else:
        zd = zo = z
        head_at = n_common

    wdh, bdh = layers[head_at]
    woh, boh = layers[head_at + 1]
    raw_d = ad.add(ad.matmul(zd, wdh), bdh)
    _check_finite("density_head", raw_d)
    raw_o = ad.add(ad.matmul(zo, woh), boh)
    _check_finite("orientation_head", raw_o)

    lo, hi = cfg.rho_f_bounds
    theta = ad.add(-np.pi / 2.0, ad.mul(np.pi, ad.sigmoid(ad.take_columns(raw_o, 0))))
    if cfg.phase_count is None:
        rho_m = ad.sigmoid(ad.take_columns(raw_d, 0))
        rho_f = ad.add(lo, ad.mul(hi - lo, ad.sigmoid(ad.take_columns(raw_d, 1))))
        return FieldBatch(rho_m, rho_f, theta)
    phases = ad.softmax(ad.take_columns(raw_d, slice(0, cfg.phase_count)), axis=1)
    rho_f = ad.add(lo, ad.mul(hi - lo,
                              ad.sigmoid(ad.take_columns(raw_d, cfg.phase_count))))
    rho_m = ad.take_columns(phases, 0)
    return FieldBatch(rho_m, rho_f, theta, phases=phases)


def query(weights: MlpWeights, embedding: FourierEmbedding, cfg: NetworkConfig,
          points: np.ndarray) -> dict[str, np.ndarray]:
    """Untracked field evaluation returning plain arrays."""
    out = forward(weights, embedding, cfg, points)
    result = {"rho_m": ad.value_of(out.rho_m),
              "rho_f": ad.value_of(out.rho_f),
              "theta": ad.value_of(out.theta)}
    if out.phases is not None:
        result["phases"] = ad.value_of(out.phases)
    return result


def leaf_params(tape: ad.Tape, weights: MlpWeights) -> list[ad.Var]:
    """Wrap every parameter array as a trainable leaf on `tape`."""
    params = []
    for w, b in zip(weights.weights, weights.biases):
        params.append(tape.leaf(w))
        params.append(tape.leaf(b))
    return params


def grads_flat(cfg: NetworkConfig, params: list[ad.Var]) -> np.ndarray:
    """Gradient vector aligned with `MlpWeights.flatten` ordering."""
    parts = []
    for i in range(0, len(params), 2):
        gw = params[i].grad
        gb = params[i + 1].grad
        parts.append((np.zeros_like(params[i].value) if gw is None else gw).ravel())
        parts.append(np.zeros_like(params[i + 1].value) if gb is None else gb)
    return np.concatenate(parts)


def checkpoint_config(cfg: NetworkConfig) -> dict:
    """JSON-serializable view of the architecture (for checkpoints)."""
    return {
        "n_freq": cfg.n_freq,
        "l_min": cfg.l_min,
        "l_max": cfg.l_max,
        "common_widths": list(cfg.common_widths),
        "branch_width": cfg.branch_width,
        "rho_f_bounds": list(cfg.rho_f_bounds),
        "phase_count": cfg.phase_count,
    }


def config_from_dict(d: dict) -> NetworkConfig:
    cfg = NetworkConfig(
        n_freq=int(d["n_freq"]),
        l_min=float(d["l_min"]),
        l_max=float(d["l_max"]),
        common_widths=tuple(int(w) for w in d["common_widths"]),
        branch_width=None if d["branch_width"] is None else int(d["branch_width"]),
        rho_f_bounds=(float(d["rho_f_bounds"][0]), float(d["rho_f_bounds"][1])),
        phase_count=None if d.get("phase_count") is None else int(d["phase_count"]),
    )
    return cfg
