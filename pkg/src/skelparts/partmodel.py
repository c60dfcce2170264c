"""Neural part surfaces.

Each part is a unit icosphere template deformed by a sine-encoded MLP whose
layers see increasing input frequencies, so truncating the network at depth k
yields a band-limited (low-frequency) version of the surface. Shallow layers
are shared across the ensemble, deep layers are instance-specific. A second
small MLP maps surface coordinates to unit-norm semantic features.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import struct

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor

__all__ = [
    "icosphere", "PartTemplate", "PartDeformMLP", "FeatureMLP",
    "positional_encoding",
]

CHECKPOINT_MAGIC = b"HLPM1"


def icosphere(level=3):
    """Subdivided icosahedron on the unit sphere.

    Returns (vertices (m, 3), faces (f, 3)); level 3 gives m = 642.
    """
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)

    for _ in range(level):
        verts = list(map(np.asarray, verts))
        midpoint = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in midpoint:
                m = verts[a] + verts[b]
                m = m / np.linalg.norm(m)
                midpoint[key] = len(verts)
                verts.append(m)
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = np.array(new_faces, dtype=np.int64)
        verts = np.array(verts)
    return verts, faces


@dataclass(frozen=True)
class PartTemplate:
    samples: np.ndarray  # (m, 3) unit-sphere points
    faces: np.ndarray    # (f, 3) triangle indices

    @classmethod
    def make(cls, level=3):
        v, f = icosphere(level)
        return cls(samples=v, faces=f)


def positional_encoding(x, lift, omega, phases):
    """sin(omega * (x @ unit-lift) + phase), elementwise.

    ``lift`` rows are unit directions; scaling them by ``omega`` sets the
    layer's input frequency.
    """
    x = as_tensor(x)
    return ad.sin(x @ Tensor(omega * lift.T) + Tensor(phases))


@dataclass
class PartDeformMLP:
    """Structure (frequencies, lifts, sizes) of one part's deformation MLP.

    Weights live externally in a name -> array dict so the optimizer can
    decide which subsets are trainable/shared. Layer i uses input frequency
    omegas[i]; layers <= shared_depth are ensemble-shared.
    """
    omegas: np.ndarray            # (L + 1,), strictly increasing
    width: int = 64
    in_dim: int = 3
    out_dim: int = 3
    shared_depth: int = 4
    lifts: list = field(default_factory=list)    # per layer (width, in_dim)
    phases: list = field(default_factory=list)   # per layer (width,)

    @property
    def n_layers(self):
        return len(self.omegas) - 1

    @classmethod
    def create(cls, omegas, width=64, in_dim=3, out_dim=3, shared_depth=4,
               rng=None):
        rng = rng or np.random.default_rng(0)
        omegas = np.asarray(omegas, dtype=np.float64)
        lifts, phases = [], []
        for _ in range(len(omegas)):
            u = rng.normal(size=(width, in_dim))
            u /= np.linalg.norm(u, axis=1, keepdims=True)
            lifts.append(u)
            # alternating 0 / pi/2 rows give sine and cosine components
            ph = np.where(np.arange(width) % 2 == 0, 0.0, np.pi / 2)
            phases.append(ph)
        return cls(omegas=omegas, width=width, in_dim=in_dim, out_dim=out_dim,
                   shared_depth=shared_depth, lifts=lifts, phases=phases)

    def init_params(self, rng, prefix=""):
        """Hidden layers uniform +/- 1/sqrt(fan-in); output layers zeroed so
        the surface starts at the undeformed template."""
        params = {}
        for i in range(1, self.n_layers + 1):
            bound = 1.0 / np.sqrt(self.width)
            params[f"{prefix}l{i}.Wh"] = rng.uniform(
                -bound, bound, size=(self.width, self.width))
            params[f"{prefix}l{i}.bh"] = np.zeros(self.width)
            params[f"{prefix}l{i}.Wo"] = np.zeros((self.out_dim, self.width))
            params[f"{prefix}l{i}.bo"] = np.zeros(self.out_dim)
        return params

    def pe(self, x, layer):
        return positional_encoding(x, self.lifts[layer],
                                   float(self.omegas[layer]),
                                   self.phases[layer])

    def deform(self, params, x, depth=None, prefix=""):
        """Offset y_depth for points ``x`` (n, in_dim) -> (n, out_dim).

        z_i = PE_i(x) * (Wh_i z_{i-1} + bh_i), z_0 = PE_0(x)
        y_i = y_{i-1} + Wo_i z_i + bo_i,      y_0 = 0
        """
        depth = self.n_layers if depth is None else depth
        if not (1 <= depth <= self.n_layers):
            raise ValueError(f"depth must be in [1, {self.n_layers}]")
        x = as_tensor(x)
        z = self.pe(x, 0)
        y = None
        for i in range(1, depth + 1):
            wh = as_tensor(params[f"{prefix}l{i}.Wh"])
            bh = as_tensor(params[f"{prefix}l{i}.bh"])
            wo = as_tensor(params[f"{prefix}l{i}.Wo"])
            bo = as_tensor(params[f"{prefix}l{i}.bo"])
            z = self.pe(x, i) * (z @ wh.T + bh)
            term = z @ wo.T + bo
            y = term if y is None else y + term
        return y


def assemble_part(template, mlp, params, transform, depth=None, prefix=""):
    """Final surface points: s * R * (X + deform(X)) + t  (per-part frame).

    ``transform`` is (s, R, t); each element may be an ndarray or a Tensor so
    gradients can flow into pose parameters.
    """
    s, r, t = transform
    s_v = s.value if isinstance(s, Tensor) else s
    if np.any(np.asarray(s_v) <= 0):
        raise ValueError("assemble_part: scale must be positive")
    x = as_tensor(template.samples)
    deformed = x + mlp.deform(params, x, depth=depth, prefix=prefix)
    return as_tensor(s) * (deformed @ as_tensor(r).T) + as_tensor(t)


@dataclass
class FeatureMLP:
    """Smooth map from surface coordinate to unit-norm d-dim feature."""
    out_dim: int
    width: int = 64
    omega: float = 1.0
    lift: np.ndarray | None = None
    phases: np.ndarray | None = None

    @classmethod
    def create(cls, out_dim, width=64, omega=1.0, rng=None):
        rng = rng or np.random.default_rng(0)
        u = rng.normal(size=(width, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        ph = np.where(np.arange(width) % 2 == 0, 0.0, np.pi / 2)
        return cls(out_dim=out_dim, width=width, omega=omega, lift=u, phases=ph)

    def init_params(self, rng, prefix=""):
        b1 = 1.0 / np.sqrt(self.width)
        return {
            f"{prefix}f1.W": rng.uniform(-b1, b1, (self.width, self.width)),
            f"{prefix}f1.b": np.zeros(self.width),
            f"{prefix}f2.W": rng.uniform(-b1, b1, (self.out_dim, self.width)),
            f"{prefix}f2.b": np.zeros(self.out_dim),
        }

    def query(self, params, x, prefix=""):
        """Unit-norm feature Q(x) for points (n, 3) -> (n, d)."""
        x = as_tensor(x)
        h = ad.sin(x @ Tensor(self.omega * self.lift.T) + Tensor(self.phases))
        h = ad.sin(h @ as_tensor(params[f"{prefix}f1.W"]).T
                   + as_tensor(params[f"{prefix}f1.b"]))
        q = h @ as_tensor(params[f"{prefix}f2.W"]).T \
            + as_tensor(params[f"{prefix}f2.b"])
        nrm = ((q * q).sum(axis=1) + 1e-9) ** 0.5
        return q / nrm.reshape(-1, 1)


def save_checkpoint(path, params):
    """Binary dump of a name -> float64 array dict (versioned header)."""
    names = sorted(params)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            arr = np.ascontiguousarray(params[name], dtype="<f8")
            enc = name.encode()
            fh.write(struct.pack("<I", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(5) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic")
        (count,) = struct.unpack("<I", fh.read(4))
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode()
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape)
            params[name] = arr.astype(np.float64)
    return params
