"""Velocity-field representations.

The default representation is an MLP over normalized coordinates whose
hidden layers have the form  x_{i+1} = W_i * sin(x_i) + b_i ; only the
first (affine) layer's output is scaled by the frequency constant omega0.
Ablation variants replace sin with ReLU, optionally with a fixed
positional encoding of the input, and a dense learnable grid bypasses the
network entirely.

Parameters flatten to a single float64 vector (weights row-major, then
bias, per layer) which is also the checkpoint blob layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, FormatError, ShapeError, ValidationError
from .field import VectorField

ACTIVATIONS = ("sine", "relu", "relu_pe")
REPRESENTATIONS = ("mlp", "grid")


@dataclass
class ArchConfig:
    """Architecture choices for the velocity model."""

    depth: int = 5          # number of weight layers
    hidden: int = 512
    activation: str = "sine"
    omega0: float = 30.0
    representation: str = "mlp"
    pe_octaves: int = 6     # used by relu_pe only

    def validate(self):
        if self.depth < 2:
            raise ConfigurationError("arch.depth must be >= 2")
        if self.hidden < 1:
            raise ConfigurationError("arch.hidden must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"arch.activation must be one of {ACTIVATIONS}")
        if self.omega0 <= 0:
            raise ConfigurationError("arch.omega0 must be positive")
        if self.representation not in REPRESENTATIONS:
            raise ConfigurationError(f"arch.representation must be one of {REPRESENTATIONS}")
        if self.pe_octaves < 0:
            raise ConfigurationError("arch.pe_octaves must be >= 0")

    @property
    def input_dim(self) -> int:
        if self.activation == "relu_pe":
            return 3 + 6 * self.pe_octaves
        return 3


@dataclass
class CoordGrid:
    """Normalized coordinates of the coarse lattice, shape (Xc, Yc, Zc, 3).

    Each component lies in [-1, 1]; the normalization is per-axis linear
    from full-resolution voxel range [0, D-1].
    """

    coords: np.ndarray
    full_dims: tuple[int, int, int]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.coords.shape[:3]

    @property
    def flat(self) -> np.ndarray:
        return self.coords.reshape(-1, 3)


@dataclass
class MlpParams:
    """Weights and biases of the coordinate MLP, plus its architecture."""

    arch: ArchConfig
    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)

    def to_flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def from_flat(self, flat: np.ndarray) -> "MlpParams":
        ws, bs, off = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(flat[off : off + w.size].reshape(w.shape).copy())
            off += w.size
            bs.append(flat[off : off + b.size].copy())
            off += b.size
        if off != flat.size:
            raise ShapeError(f"flat vector has {flat.size} entries, expected {off}")
        return MlpParams(arch=self.arch, weights=ws, biases=bs)

    @property
    def size(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


@dataclass
class GridParams:
    """Dense learnable velocity values on the coarse lattice."""

    values: np.ndarray  # (Xc, Yc, Zc, 3)

    def to_flat(self) -> np.ndarray:
        return self.values.ravel().copy()

    def from_flat(self, flat: np.ndarray) -> "GridParams":
        if flat.size != self.values.size:
            raise ShapeError(f"flat vector has {flat.size} entries, expected {self.values.size}")
        return GridParams(values=flat.reshape(self.values.shape).copy())

    @property
    def size(self) -> int:
        return self.values.size


def layer_shapes(arch: ArchConfig) -> list[tuple[int, int]]:
    """(fan_out, fan_in) per weight layer."""
    dims = [arch.input_dim] + [arch.hidden] * (arch.depth - 1) + [3]
    return [(dims[i + 1], dims[i]) for i in range(arch.depth)]


def init_siren(seed: int, arch: ArchConfig) -> MlpParams:
    """Sinusoidal-network initialization, deterministic in the seed.

    First layer: U(-1/fan_in, 1/fan_in). Deeper layers:
    U(+-sqrt(6/fan_in)/omega0). Biases start at zero. Weights are drawn
    layer by layer from PCG64(seed), each matrix in one row-major draw.
    """
    arch.validate()
    if arch.representation != "mlp":
        raise ConfigurationError("init_siren applies to the mlp representation")
    rng = np.random.Generator(np.random.PCG64(seed))
    weights, biases = [], []
    for li, (fan_out, fan_in) in enumerate(layer_shapes(arch)):
        bound = 1.0 / fan_in if li == 0 else np.sqrt(6.0 / fan_in) / arch.omega0
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(arch=arch, weights=weights, biases=biases)


def init_grid(coarse_dims) -> GridParams:
    return GridParams(values=np.zeros(tuple(coarse_dims) + (3,)))


def positional_encoding(pts: np.ndarray, octaves: int) -> np.ndarray:
    """[p, sin(2^f pi p), cos(2^f pi p) for f < octaves], concatenated per axis.

    With octaves = 0 this is the identity, so the relu_pe variant reduces
    exactly to plain relu.
    """
    feats = [pts]
    for f in range(octaves):
        w = (2.0**f) * np.pi
        feats.append(np.sin(w * pts))
        feats.append(np.cos(w * pts))
    return np.concatenate(feats, axis=-1)


def _act(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "sine":
        return np.sin(x)
    return np.maximum(x, 0.0)


def _act_deriv(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "sine":
        return np.cos(x)
    return (x > 0.0).astype(np.float64)


def _features(arch: ArchConfig, flat_coords: np.ndarray) -> np.ndarray:
    if arch.activation == "relu_pe":
        return positional_encoding(flat_coords, arch.pe_octaves)
    return flat_coords


def mlp_forward(params: MlpParams, flat_coords: np.ndarray):
    """Forward pass; returns (output (N, 3), saved buffers for the backward pass)."""
    arch = params.arch
    feats = _features(arch, flat_coords)
    if feats.shape[1] != params.weights[0].shape[1]:
        raise ShapeError(
            f"input feature dim {feats.shape[1]} does not match first-layer fan-in "
            f"{params.weights[0].shape[1]}"
        )
    act_kind = "sine" if arch.activation == "sine" else "relu"
    pre = arch.omega0 * (feats @ params.weights[0].T + params.biases[0])
    pres = [pre]
    for w, b in zip(params.weights[1:], params.biases[1:]):
        pre = _act(pre, act_kind) @ w.T + b
        pres.append(pre)
    return pres[-1], (feats, pres, act_kind)


def mlp_backward(params: MlpParams, buffers, cot: np.ndarray) -> np.ndarray:
    """Reverse pass: cotangent of the output (N, 3) -> flat parameter gradient."""
    feats, pres, act_kind = buffers
    arch = params.arch
    n_layers = arch.depth
    grads_w = [None] * n_layers
    grads_b = [None] * n_layers
    g = cot
    for li in range(n_layers - 1, 0, -1):
        s = _act(pres[li - 1], act_kind)
        grads_w[li] = g.T @ s
        grads_b[li] = g.sum(axis=0)
        g = (g @ params.weights[li]) * _act_deriv(pres[li - 1], act_kind)
    grads_w[0] = arch.omega0 * (g.T @ feats)
    grads_b[0] = arch.omega0 * g.sum(axis=0)
    parts = []
    for w, b in zip(grads_w, grads_b):
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts)


def mlp_jvp(params: MlpParams, flat_coords: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """Directional derivative of the forward pass along a flat parameter direction."""
    arch = params.arch
    d = params.from_flat(direction)
    feats = _features(arch, flat_coords)
    act_kind = "sine" if arch.activation == "sine" else "relu"
    pre = arch.omega0 * (feats @ params.weights[0].T + params.biases[0])
    dpre = arch.omega0 * (feats @ d.weights[0].T + d.biases[0])
    for w, b, dw, db in zip(params.weights[1:], params.biases[1:], d.weights[1:], d.biases[1:]):
        s = _act(pre, act_kind)
        ds = _act_deriv(pre, act_kind) * dpre
        dpre = ds @ w.T + s @ dw.T + db
        pre = s @ w.T + b
    return dpre


def eval_velocity(params, grid: CoordGrid) -> VectorField:
    """Evaluate the velocity representation on the coarse lattice."""
    if isinstance(params, GridParams):
        if params.values.shape[:3] != grid.dims:
            raise ShapeError(
                f"grid parameter dims {params.values.shape[:3]} do not match "
                f"coarse dims {grid.dims}"
            )
        return VectorField(params.values.copy())
    out, _ = mlp_forward(params, grid.flat)
    return VectorField(out.reshape(grid.dims + (3,)))


def velocity_jvp_check(params, grid: CoordGrid, direction: np.ndarray) -> float:
    """Relative error between the analytic directional derivative and a
    central finite difference with step 1e-5."""
    h = 1e-5
    flat = params.to_flat()
    if isinstance(params, GridParams):
        analytic = direction.reshape(params.values.shape)
    else:
        analytic = mlp_jvp(params, grid.flat, direction).reshape(grid.dims + (3,))
    plus = eval_velocity(params.from_flat(flat + h * direction), grid).data
    minus = eval_velocity(params.from_flat(flat - h * direction), grid).data
    fd = (plus - minus) / (2.0 * h)
    denom = max(np.linalg.norm(fd), np.linalg.norm(analytic))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - fd) / denom)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"NVFCKPT1\n"
_BLOB_MARKER = b"blob =\n"


def save_checkpoint(params, path) -> None:
    """Text architecture descriptor followed by the flat float64 blob."""
    lines = []
    if isinstance(params, GridParams):
        lines.append("representation = grid")
        lines.append("coarse_dims = {},{},{}".format(*params.values.shape[:3]))
    else:
        a = params.arch
        lines.append("representation = mlp")
        lines.append(f"depth = {a.depth}")
        lines.append(f"hidden = {a.hidden}")
        lines.append(f"activation = {a.activation}")
        lines.append(f"omega0 = {a.omega0!r}")
        lines.append(f"pe_octaves = {a.pe_octaves}")
    flat = params.to_flat()
    lines.append(f"param_count = {flat.size}")
    text = "\n".join(lines) + "\n"
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(text.encode("ascii"))
        f.write(_BLOB_MARKER)
        f.write(flat.astype("<f8").tobytes())


def load_checkpoint(path):
    """Inverse of save_checkpoint; returns MlpParams or GridParams."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(_CKPT_MAGIC):
        raise FormatError("not a model checkpoint (bad magic)")
    split = raw.find(_BLOB_MARKER, len(_CKPT_MAGIC))
    if split < 0:
        raise FormatError("checkpoint is missing the blob marker")
    fields = {}
    for line in raw[len(_CKPT_MAGIC) : split].decode("ascii").splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    flat = np.frombuffer(raw[split + len(_BLOB_MARKER) :], dtype="<f8").astype(np.float64)
    count = int(fields["param_count"])
    if flat.size != count:
        raise FormatError(f"checkpoint blob has {flat.size} values, header says {count}")
    if fields["representation"] == "grid":
        dims = tuple(int(t) for t in fields["coarse_dims"].split(","))
        template = GridParams(values=np.zeros(dims + (3,)))
        return template.from_flat(flat)
    arch = ArchConfig(
        depth=int(fields["depth"]),
        hidden=int(fields["hidden"]),
        activation=fields["activation"],
        omega0=float(fields["omega0"]),
        representation="mlp",
        pe_octaves=int(fields["pe_octaves"]),
    )
    template = init_siren(0, arch)
    return template.from_flat(flat)
