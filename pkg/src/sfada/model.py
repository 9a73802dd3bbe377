"""Feature extractor + linear classifier, SGD with momentum, checkpoints."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .numcore import ShapeError, Tensor

ACTIVATIONS = {"tanh": nc.tanh, "relu": nc.relu, "linear": nc.identity}
_ACT_CODES = {"tanh": 0, "relu": 1, "linear": 2}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}

CKPT_MAGIC = b"SFADACKP"
CKPT_VERSION = 1


class MlpModel:
    """Model M = g(f(x)).

    The extractor ``f`` is a stack of affine layers
    ``input_dim -> hidden... -> bottleneck``, each followed by ``activation``.
    The classifier ``g`` is a single affine map ``bottleneck -> n_classes``.
    Parameters are float64 :class:`Tensor` leaves that require gradients.
    """

    def __init__(self, input_dim, n_classes, hidden=(32,), bottleneck=16,
                 activation="tanh", seed=0):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if input_dim < 1 or n_classes < 2 or bottleneck < 1:
            raise ValueError("input_dim, bottleneck must be >= 1 and n_classes >= 2")
        self.input_dim = int(input_dim)
        self.n_classes = int(n_classes)
        self.hidden = tuple(int(h) for h in hidden)
        self.bottleneck = int(bottleneck)
        self.activation = activation
        self.seed = int(seed)

        rng = np.random.default_rng(self.seed)
        widths = [self.input_dim, *self.hidden, self.bottleneck]
        self.layers: list[tuple[Tensor, Tensor]] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            s = 1.0 / np.sqrt(fan_in)
            W = rng.uniform(-s, s, size=(fan_in, fan_out))
            b = rng.uniform(-s, s, size=(1, fan_out))
            self.layers.append((Tensor(W, requires_grad=True), Tensor(b, requires_grad=True)))
        s = 1.0 / np.sqrt(self.bottleneck)
        self.W_cls = Tensor(rng.uniform(-s, s, size=(self.bottleneck, self.n_classes)), requires_grad=True)
        self.b_cls = Tensor(rng.uniform(-s, s, size=(1, self.n_classes)), requires_grad=True)
        self.freeze_classifier = False

    @property
    def dims(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "bottleneck": self.bottleneck,
            "n_classes": self.n_classes,
            "activation": self.activation,
        }

    def parameters(self) -> list[Tensor]:
        """All parameters in declaration order (extractor layers, then classifier)."""
        params = [p for layer in self.layers for p in layer]
        return params + [self.W_cls, self.b_cls]

    def trainable_parameters(self) -> list[Tensor]:
        if self.freeze_classifier:
            return [p for layer in self.layers for p in layer]
        return self.parameters()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def copy(self) -> "MlpModel":
        clone = MlpModel.__new__(MlpModel)
        clone.__dict__.update(self.__dict__)
        clone.layers = [(Tensor(W.data.copy(), True), Tensor(b.data.copy(), True)) for W, b in self.layers]
        clone.W_cls = Tensor(self.W_cls.data.copy(), True)
        clone.b_cls = Tensor(self.b_cls.data.copy(), True)
        return clone

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.parameters()])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        expected = sum(p.data.size for p in self.parameters())
        if flat.size != expected:
            raise ShapeError(f"expected {expected} parameters, got {flat.size}")
        offset = 0
        for p in self.parameters():
            n = p.data.size
            p.data = flat[offset:offset + n].reshape(p.shape).copy()
            offset += n

    # -- forward passes, all on-tape -------------------------------------

    def _as_input(self, x) -> Tensor:
        t = x if isinstance(x, Tensor) else Tensor(x)
        if t.shape[1] != self.input_dim:
            raise ShapeError(f"input width {t.shape[1]} != input_dim {self.input_dim}")
        return t

    def features_t(self, x) -> Tensor:
        h = self._as_input(x)
        act = ACTIVATIONS[self.activation]
        for W, b in self.layers:
            h = act(nc.add(nc.matmul(h, W), b))
        return h

    def logits_from_features(self, f: Tensor) -> Tensor:
        return nc.add(nc.matmul(f, self.W_cls), self.b_cls)

    def logits_t(self, x) -> Tensor:
        return self.logits_from_features(self.features_t(x))

    def probs_t(self, x) -> Tensor:
        return nc.softmax_rows(self.logits_t(x))

    # -- numpy conveniences (results detached from any tape) -------------

    def features(self, x) -> np.ndarray:
        return self.features_t(x).data

    def logits(self, x) -> np.ndarray:
        return self.logits_t(x).data

    def probs(self, x) -> np.ndarray:
        return self.probs_t(x).data

    def predict(self, x) -> np.ndarray:
        # np.argmax returns the first maximum, i.e. the lowest class index on ties
        return np.argmax(self.logits(x), axis=1)


def features(model: MlpModel, x) -> np.ndarray:
    return model.features(x)


def probs(model: MlpModel, x) -> np.ndarray:
    return model.probs(x)


def lr_at(eta0: float, p: float) -> float:
    """Annealed learning rate ``eta0 * (1 + 10 p) ** -0.75`` for progress p in [0, 1]."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"progress must lie in [0, 1], got {p}")
    return eta0 * (1.0 + 10.0 * p) ** -0.75


@dataclass
class OptimizerState:
    momentum: float = 0.9
    weight_decay: float = 1e-3
    buffers: dict = field(default_factory=dict)

    def buffer_for(self, param: Tensor) -> np.ndarray:
        buf = self.buffers.get(id(param))
        if buf is None or buf.shape != param.shape:
            buf = np.zeros(param.shape)
            self.buffers[id(param)] = buf
        return buf


class OptimizerStateError(RuntimeError):
    pass


def sgd_step(model: MlpModel, state: OptimizerState, lr: float, params=None) -> MlpModel:
    """One classic momentum step, weight decay folded into the gradient.

    v <- momentum * v + grad + weight_decay * theta
    theta <- theta - lr * v
    """
    params = model.trainable_parameters() if params is None else params
    for p in params:
        if p.grad is None:
            raise OptimizerStateError("sgd_step called before gradients were populated")
    for p in params:
        v = state.buffer_for(p)
        v *= state.momentum
        v += p.grad + state.weight_decay * p.data
        p.data = p.data - lr * v
    return model


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (little endian):
#   magic[8] | u32 version | u32 input_dim | u32 n_hidden | u32 hidden[n_hidden]
#   | u32 bottleneck | u32 n_classes | u32 activation | u64 seed | u64 n_params
#   | f64 payload[n_params]


class CheckpointError(ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointDimensionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


def checkpoint_bytes(model: MlpModel) -> bytes:
    header = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, model.input_dim),
              struct.pack("<I", len(model.hidden))]
    header += [struct.pack("<I", h) for h in model.hidden]
    flat = model.get_flat()
    header.append(struct.pack("<IIIQQ", model.bottleneck, model.n_classes,
                              _ACT_CODES[model.activation], model.seed & (2**64 - 1), flat.size))
    return b"".join(header) + flat.astype("<f8").tobytes()


def save_checkpoint(model: MlpModel, path) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(model))
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise CheckpointTruncatedError("checkpoint ends inside the header")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals


def checkpoint_from_bytes(buf: bytes, n_classes=None, input_dim=None) -> MlpModel:
    if len(buf) < len(CKPT_MAGIC) or buf[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointFormatError("bad checkpoint magic")
    r = _Reader(buf)
    r.pos = len(CKPT_MAGIC)
    (version,) = r.take("<I")
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    in_dim, n_hidden = r.take("<II")
    hidden = r.take(f"<{n_hidden}I") if n_hidden else ()
    bottleneck, n_cls, act, seed, n_params = r.take("<IIIQQ")
    if act not in _ACT_NAMES:
        raise CheckpointFormatError(f"unknown activation code {act}")
    if n_classes is not None and n_cls != n_classes:
        raise CheckpointDimensionError(f"checkpoint has {n_cls} classes, expected {n_classes}")
    if input_dim is not None and in_dim != input_dim:
        raise CheckpointDimensionError(f"checkpoint has input_dim {in_dim}, expected {input_dim}")
    model = MlpModel(in_dim, n_cls, hidden=hidden, bottleneck=bottleneck,
                     activation=_ACT_NAMES[act], seed=seed)
    expected = model.get_flat().size
    if n_params != expected:
        raise CheckpointDimensionError(f"payload declares {n_params} values, dims imply {expected}")
    payload = buf[r.pos:]
    if len(payload) < 8 * n_params:
        raise CheckpointTruncatedError(f"payload has {len(payload)} bytes, need {8 * n_params}")
    if len(payload) > 8 * n_params:
        raise CheckpointFormatError("trailing bytes after payload")
    model.set_flat(np.frombuffer(payload, dtype="<f8").astype(np.float64))
    return model


def load_checkpoint(path, n_classes=None, input_dim=None) -> MlpModel:
    return checkpoint_from_bytes(Path(path).read_bytes(), n_classes=n_classes, input_dim=input_dim)
