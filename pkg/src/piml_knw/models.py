"""Network architectures whose final features act as a learned basis.

Every model exposes the same small surface used by the losses and by the
n-width machinery:

``basis(p, points)``            -> (n_points, n_basis)
``basis_jets(p, points)``       -> basis plus its second derivative per axis
``coefficient_matrix(p, batch)``-> (n_basis, n_tasks)

so a task prediction is always ``basis @ coefficients``.  ``p`` is the flat
parameter vector, either a numpy array or a tape node.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Jet2, ParameterVector, activate_jet, unpack
from .problems import TaskBatch, TaskFamily

ACTIVATIONS = ("sine", "tanh")


@dataclass(frozen=True)
class MLPSpec:
    input_dim: int
    hidden_widths: tuple[int, ...] = (20, 20)
    activation: str = "sine"
    output_dim: int = 1
    output_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.input_dim < 1 or self.output_dim < 1 or not self.hidden_widths:
            raise ContractError("MLPSpec needs positive dimensions and at least one hidden layer")
        if min(self.hidden_widths) < 1:
            raise ContractError("hidden widths must be positive")

    @property
    def n_hidden(self) -> int:
        return self.hidden_widths[-1]

    def layout(self, prefix: str = "") -> list[tuple[str, tuple[int, ...]]]:
        dims = (self.input_dim, *self.hidden_widths, self.output_dim)
        out = []
        last = len(dims) - 2
        for i in range(len(dims) - 1):
            out.append((f"{prefix}{i}.W", (dims[i], dims[i + 1])))
            if i < last or self.output_bias:
                out.append((f"{prefix}{i}.b", (dims[i + 1],)))
        return out

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layout())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MLPSpec":
        return cls(**{**d, "hidden_widths": tuple(d["hidden_widths"])})


BIAS_INITS = ("zeros", "glorot")


def init_mlp(spec: MLPSpec, rng: np.random.Generator, first_layer_omega: float | None = None, prefix: str = "",
             bias_init: str = "zeros") -> ParameterVector:
    """Glorot-uniform weights; biases zero or drawn with the layer's Glorot limit.

    ``first_layer_omega`` multiplies the first-layer weights, the usual
    frequency scaling for sine networks; off by default.
    """
    if bias_init not in BIAS_INITS:
        raise ContractError(f"bias_init must be one of {BIAS_INITS}")
    chunks = []
    layout = spec.layout(prefix)
    limit = 0.0
    for name, shape in layout:
        if name.endswith(".W"):
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            w = rng.uniform(-limit, limit, size=shape)
            if first_layer_omega is not None and name == f"{prefix}0.W":
                w = w * first_layer_omega
            chunks.append(w.ravel())
        elif bias_init == "glorot":
            chunks.append(rng.uniform(-limit, limit, size=shape))
        else:
            chunks.append(np.zeros(shape))
    return ParameterVector(np.concatenate(chunks), layout)


def _layers(spec: MLPSpec, params, prefix: str = ""):
    pieces = unpack(params, spec.layout(prefix))
    n = len(spec.hidden_widths) + 1
    return [(pieces[f"{prefix}{i}.W"], pieces.get(f"{prefix}{i}.b")) for i in range(n)]


def _params_array(params):
    if isinstance(params, ParameterVector):
        return params.values
    return params


def mlp_forward(spec: MLPSpec, params, point):
    """Return ``(hidden, output)`` for one point or a batch of rows."""
    x = np.asarray(point, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != spec.input_dim:
        raise ContractError(f"point dimension {x.shape[1]} does not match input_dim {spec.input_dim}")
    layers = _layers(spec, _params_array(params))
    h = x
    for W, b in layers[:-1]:
        h = _activation(ad.matmul(h, W) + b, spec.activation)
    W, b = layers[-1]
    out = ad.matmul(h, W)
    if b is not None:
        out = out + b
    if single:
        return h[0], out[0]
    return h, out


def _activation(z, fn):
    if fn == "sine":
        return ad.sin(z)
    return ad.tanh(z)


@dataclass
class MLPJets:
    hidden: object
    hidden_jets: list
    output: object
    output_jets: list


def mlp_jets(spec: MLPSpec, params, points, directions, with_output: bool = True):
    """Forward pass carrying a 2-jet per direction through every layer.

    Returns ``(hidden_jets_bundle, output_value, output_jets)`` when called
    through :func:`jet2_forward`; use :func:`mlp_jet_bundle` for the full
    structure.
    """
    bundle = mlp_jet_bundle(spec, params, points, directions, with_output)
    return bundle.hidden_jets, bundle.output, bundle.output_jets


def mlp_jet_bundle(spec: MLPSpec, params, points, directions, with_output: bool = True) -> MLPJets:
    x = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if x.shape[1] != spec.input_dim:
        raise ContractError(f"point dimension {x.shape[1]} does not match input_dim {spec.input_dim}")
    layers = _layers(spec, _params_array(params))
    dirs = [ad.check_direction(d)[None, :] for d in directions]
    h = x
    jets = [Jet2(None, d, None) for d in dirs]
    for W, b in layers[:-1]:
        z = ad.matmul(h, W) + b
        a, s1, s2 = ad.activation_with_derivatives(z, spec.activation)
        new = []
        for j in jets:
            z1 = ad.matmul(j.d1, W)
            d1 = s1 * z1
            d2 = s2 * ad.square(z1)
            if j.d2 is not None:
                d2 = d2 + s1 * ad.matmul(j.d2, W)
            new.append(Jet2(a, d1, d2))
        h, jets = a, new
    out = out_jets = None
    if with_output:
        W, b = layers[-1]
        out = ad.matmul(h, W)
        if b is not None:
            out = out + b
        out_jets = [Jet2(out, ad.matmul(j.d1, W), ad.matmul(j.d2, W)) for j in jets]
    return MLPJets(h, jets, out, out_jets)


def axis_directions(dim: int) -> list[np.ndarray]:
    return [np.eye(dim)[i] for i in range(dim)]


# ---------------------------------------------------------------------------
# basis matrices


@dataclass
class BasisMatrix:
    """Learned basis sampled on a grid: row i is phi_i at every grid point."""

    values: np.ndarray
    grid_shape: tuple[int, ...]
    points: np.ndarray | None = None

    @property
    def n_basis(self) -> int:
        return self.values.shape[0]

    @property
    def n_points(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape


def extract_basis(model_or_spec, params=None, grid=None, grid_shape=None) -> BasisMatrix:
    """Evaluate the frozen basis of a model (or a bare MLP body) on a grid."""
    pts = np.atleast_2d(np.asarray(grid, dtype=np.float64))
    if pts.size == 0:
        raise ContractError("grid is empty")
    if isinstance(model_or_spec, MLPSpec):
        hidden, _ = mlp_forward(model_or_spec, params, pts)
        vals = hidden
    else:
        p = model_or_spec.params.values if params is None else _params_array(params)
        vals = model_or_spec.basis(p, pts)
    return BasisMatrix(np.ascontiguousarray(np.asarray(vals).T), tuple(grid_shape or (pts.shape[0],)), pts)


# ---------------------------------------------------------------------------
# architectures


@dataclass
class MHPinnModel:
    """Shared body producing basis functions, one bias-free linear head per task.

    The heads are stored as the body's output layer (``hidden -> n_tasks``,
    no bias), so head i is column i of that weight matrix.
    """

    body: MLPSpec
    params: ParameterVector
    tag: str = field(default="mh_pinn", init=False)

    @classmethod
    def create(cls, input_dim: int, n_tasks: int, hidden_widths=(20, 20), activation="sine", rng=None,
               first_layer_omega=None, bias_init="zeros"):
        spec = MLPSpec(input_dim, tuple(hidden_widths), activation, n_tasks, output_bias=False)
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(spec, init_mlp(spec, rng, first_layer_omega, bias_init=bias_init))

    @property
    def n_tasks(self) -> int:
        return self.body.output_dim

    @property
    def n_basis(self) -> int:
        return self.body.n_hidden

    @property
    def activation(self) -> str:
        return self.body.activation

    def with_params(self, values) -> "MHPinnModel":
        return replace(self, params=self.params.replace(values))

    def heads(self, p=None) -> np.ndarray:
        p = self.params.values if p is None else p
        pieces = unpack(p, self.body.layout())
        return pieces[f"{len(self.body.hidden_widths)}.W"]

    def basis(self, p, points):
        layers = _layers(self.body, p)
        h = np.atleast_2d(points)
        for W, b in layers[:-1]:
            h = _activation(ad.matmul(h, W) + b, self.body.activation)
        return h

    def basis_jets(self, p, points):
        bundle = mlp_jet_bundle(self.body, p, points, axis_directions(self.body.input_dim), with_output=False)
        return bundle.hidden, [j.d2 for j in bundle.hidden_jets]

    def coefficient_matrix(self, p, batch=None):
        return self.heads(p)

    def descriptor(self) -> dict:
        return {"architecture": self.tag, "body": self.body.to_dict()}


def mh_predict(model: MHPinnModel, task_index: int, point) -> float:
    """Prediction of head ``task_index`` (1-based) at ``point``."""
    if not 1 <= task_index <= model.n_tasks:
        raise ContractError(f"task index {task_index} outside 1..{model.n_tasks}")
    hidden, _ = mlp_forward(model.body, model.params, point)
    head = np.asarray(model.heads())[:, task_index - 1]
    return float(np.dot(hidden, head))


@dataclass
class PiDonModel:
    """Branch net maps sampled forcing to coefficients; trunk net gives the basis.

    Branch inputs are divided by ``input_scale`` (fixed at construction) to
    keep sensor values O(1).
    """

    branch: MLPSpec
    trunk: MLPSpec
    params: ParameterVector
    input_scale: float = 1.0
    tag: str = field(default="pi_don", init=False)

    @classmethod
    def create(cls, input_dim: int, n_sensors: int, n_basis=20, hidden_widths=(20, 20), activation="sine",
               rng=None, input_scale: float = 1.0, first_layer_omega=None, bias_init="zeros"):
        rng = rng if rng is not None else np.random.default_rng(0)
        branch = MLPSpec(n_sensors, tuple(hidden_widths), activation, n_basis)
        trunk = MLPSpec(input_dim, tuple(hidden_widths), activation, n_basis)
        pb = init_mlp(branch, rng, None, prefix="branch.", bias_init=bias_init)
        pt = init_mlp(trunk, rng, first_layer_omega, prefix="trunk.", bias_init=bias_init)
        params = ParameterVector(np.concatenate([pb.values, pt.values]), pb.layout + pt.layout)
        return cls(branch, trunk, params, float(input_scale))

    @property
    def n_basis(self) -> int:
        return self.trunk.output_dim

    @property
    def activation(self) -> str:
        return self.trunk.activation

    @property
    def n_branch_params(self) -> int:
        return self.branch.n_params

    def with_params(self, values) -> "PiDonModel":
        return replace(self, params=self.params.replace(values))

    def _split(self, p):
        nb = self.n_branch_params
        return p[:nb], p[nb:]

    def branch_output(self, p, sensor_values):
        pb, _ = self._split(p)
        layers = _layers(self.branch, pb, "branch.")
        h = np.atleast_2d(np.asarray(sensor_values, dtype=np.float64)) / self.input_scale
        if h.shape[1] != self.branch.input_dim:
            raise ContractError(f"expected {self.branch.input_dim} forcing samples, got {h.shape[1]}")
        for W, b in layers[:-1]:
            h = _activation(ad.matmul(h, W) + b, self.branch.activation)
        W, b = layers[-1]
        return ad.matmul(h, W) + b

    def basis(self, p, points):
        _, pt = self._split(p)
        layers = _layers(self.trunk, pt, "trunk.")
        h = np.atleast_2d(points)
        for W, b in layers[:-1]:
            h = _activation(ad.matmul(h, W) + b, self.trunk.activation)
        W, b = layers[-1]
        return ad.matmul(h, W) + b

    def basis_jets(self, p, points):
        _, pt = self._split(p)
        bundle = mlp_jet_bundle(self.trunk, pt, points, axis_directions(self.trunk.input_dim), with_output=False)
        W, b = _layers(self.trunk, pt, "trunk.")[-1]
        phi = ad.matmul(bundle.hidden, W) + b
        return phi, [ad.matmul(j.d2, W) for j in bundle.hidden_jets]

    def coefficient_matrix(self, p, batch: TaskBatch):
        return ad.transpose(self.branch_output(p, batch.sensor_values))

    def descriptor(self) -> dict:
        return {
            "architecture": self.tag,
            "branch": self.branch.to_dict(),
            "trunk": self.trunk.to_dict(),
            "input_scale": self.input_scale,
        }


def pidon_predict(model: PiDonModel, forcing_samples, point) -> float:
    p = model.params.values
    coeffs = model.branch_output(p, np.asarray(forcing_samples, dtype=np.float64)[None, :])[0]
    phi = model.basis(p, np.atleast_2d(point))[0]
    return float(np.dot(coeffs, phi))


@dataclass
class FixedBasisModel:
    """Exact sine-mode basis of a family with free per-task coefficients.

    Serves as a verification double: with coefficients equal to the task
    coefficients it reproduces the manufactured solutions exactly.
    """

    family: TaskFamily
    params: ParameterVector
    tag: str = field(default="fixed_basis", init=False)

    @classmethod
    def create(cls, family: TaskFamily, coefficients) -> "FixedBasisModel":
        c = np.atleast_2d(np.asarray(coefficients, dtype=np.float64))
        if c.shape[1] != family.n_modes:
            raise ContractError(f"need {family.n_modes} coefficients per task")
        return cls(family, ParameterVector(c.ravel(), [("coefficients", c.shape)]))

    @property
    def n_basis(self) -> int:
        return self.family.n_modes

    @property
    def n_tasks(self) -> int:
        return self.params.layout[0][1][0]

    @property
    def activation(self) -> str:
        return "sine"

    def with_params(self, values) -> "FixedBasisModel":
        return replace(self, params=self.params.replace(values))

    def basis(self, p, points):
        return self.family.mode_values(points)

    def basis_jets(self, p, points):
        return self.family.mode_values(points), self.family.mode_second_derivatives(points)

    def coefficient_matrix(self, p, batch=None):
        return ad.transpose(ad.reshape(p, (self.n_tasks, self.n_basis)))

    def descriptor(self) -> dict:
        fam = asdict(self.family)
        fam["coeff_bounds"] = list(fam["coeff_bounds"])
        return {"architecture": self.tag, "family": fam}


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (all integers little-endian):
#   8 bytes   magic  b"PIMLKNW\x00"
#   u32       format version
#   u32       descriptor length L
#   L bytes   descriptor, UTF-8 JSON (architecture + specs + layout)
#   u64       number of parameters n
#   8n bytes  float64 parameters in layout order
#   8 bytes   BLAKE2b-64 digest of everything above

MAGIC = b"PIMLKNW\x00"
FORMAT_VERSION = 1


class CheckpointError(IOError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class ArchitectureMismatchError(CheckpointError):
    pass


def _digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def save_checkpoint(model, path) -> Path:
    desc = model.descriptor()
    desc["layout"] = [[name, list(shape)] for name, shape in model.params.layout]
    blob = json.dumps(desc, sort_keys=True).encode("utf-8")
    body = b"".join(
        [
            MAGIC,
            struct.pack("<II", FORMAT_VERSION, len(blob)),
            blob,
            struct.pack("<Q", len(model.params)),
            model.params.to_bytes(),
        ]
    )
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(body + _digest(body))
    tmp.replace(path)
    return path


def _strip(desc: dict) -> dict:
    return {k: v for k, v in desc.items() if k != "layout"}


def load_checkpoint(path, expect: dict | None = None):
    """Read a checkpoint; ``expect`` (a model descriptor) guards the architecture."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 8:
        raise CheckpointFormatError("file too short to be a checkpoint")
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError("bad magic bytes")
    pos = len(MAGIC)
    version, dlen = struct.unpack_from("<II", data, pos)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    pos += 8
    if len(data) < pos + dlen + 8:
        raise CheckpointFormatError("truncated checkpoint (descriptor)")
    desc = json.loads(data[pos : pos + dlen].decode("utf-8"))
    pos += dlen
    (n,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    end = pos + 8 * n
    if len(data) != end + 8:
        raise CheckpointFormatError("truncated checkpoint (parameters)")
    if _digest(data[:end]) != data[end:]:
        raise CheckpointChecksumError("checksum mismatch")
    layout = [(name, tuple(shape)) for name, shape in desc["layout"]]
    params = ParameterVector.from_bytes(data[pos:end], layout)
    model = model_from_descriptor(desc, params)
    if expect is not None:
        check_architecture(model, expect)
    return model


def check_architecture(model, expect: dict) -> None:
    got = _strip(model.descriptor())
    if got != _strip(expect):
        raise ArchitectureMismatchError(f"checkpoint architecture {got} does not match {_strip(expect)}")


def model_from_descriptor(desc: dict, params: ParameterVector):
    arch = desc["architecture"]
    if arch == "mh_pinn":
        return MHPinnModel(MLPSpec.from_dict(desc["body"]), params)
    if arch == "pi_don":
        return PiDonModel(MLPSpec.from_dict(desc["branch"]), MLPSpec.from_dict(desc["trunk"]), params, desc["input_scale"])
    if arch == "fixed_basis":
        fam = dict(desc["family"])
        fam["coeff_bounds"] = tuple(fam["coeff_bounds"])
        return FixedBasisModel(TaskFamily(**fam), params)
    raise CheckpointFormatError(f"unknown architecture {arch!r}")
