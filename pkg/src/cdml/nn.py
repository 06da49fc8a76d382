"""Layer-list networks: the three embedding architectures and the classifier head."""
from __future__ import annotations

import copy
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cdml import tensor as T
from cdml.errors import ContractError, DimensionError, FormatError

EMBEDDING_DIM = 64
INPUT_SHAPE = (28, 28)
N_CLASSES = 3

KINDS = (
    "conv1d", "conv2d", "maxpool1d", "maxpool2d", "flatten",
    "dense", "relu", "sigmoid", "dropout", "softmax", "l2norm",
)
ARCHITECTURES = ("facenet", "conv2dnet", "conv1dnet")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int = 0  # input channels (conv) or input features (dense)
    size: int = 0  # filters (conv) or units (dense)
    kernel: int = 0
    pool: int = 0
    p: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv1d", "conv2d") and min(self.in_dim, self.size, self.kernel) < 1:
            raise ContractError(f"{self.kind}: channels and kernel must be positive")
        if self.kind == "dense" and min(self.in_dim, self.size) < 1:
            raise ContractError("dense: sizes must be positive")
        if self.kind in ("maxpool1d", "maxpool2d") and self.pool < 1:
            raise ContractError(f"{self.kind}: pool must be positive")
        if self.kind == "dropout" and not 0.0 <= self.p < 1.0:
            raise ContractError("dropout: probability must be in [0, 1)")


@dataclass
class NetworkModel:
    specs: list[LayerSpec]
    params: list[dict] = field(default_factory=list)
    input_shape: tuple = INPUT_SHAPE

    def __post_init__(self):
        if not self.params:
            self.params = [_zero_params(s) for s in self.specs]
        shape_trace(self.specs, self.input_shape)

    @property
    def output_dim(self) -> int:
        return int(np.prod(shape_trace(self.specs, self.input_shape)[-1]))

    def copy(self) -> "NetworkModel":
        return copy.deepcopy(self)


def _zero_params(spec: LayerSpec) -> dict:
    if spec.kind == "conv1d":
        return {"W": np.zeros((spec.size, spec.in_dim, spec.kernel)), "b": np.zeros(spec.size)}
    if spec.kind == "conv2d":
        return {"W": np.zeros((spec.size, spec.in_dim, spec.kernel, spec.kernel)), "b": np.zeros(spec.size)}
    if spec.kind == "dense":
        return {"W": np.zeros((spec.size, spec.in_dim)), "b": np.zeros(spec.size)}
    return {}


def _adapted_shape(specs, input_shape) -> tuple:
    # sensor windows are (time, features); conv1d slides along time with
    # features as channels, conv2d sees a one-channel image
    if specs and specs[0].kind == "conv1d" and len(input_shape) == 2:
        return (input_shape[1], input_shape[0])
    if specs and specs[0].kind == "conv2d" and len(input_shape) == 2:
        return (1,) + tuple(input_shape)
    return tuple(input_shape)


def shape_trace(specs, input_shape=INPUT_SHAPE) -> list[tuple]:
    """Per-sample output shape of every layer; index 0 is the adapted input."""
    shape = _adapted_shape(specs, input_shape)
    trace = [shape]
    for i, s in enumerate(specs):
        k = s.kind
        if k == "conv1d":
            if len(shape) != 2 or shape[0] != s.in_dim or shape[1] < s.kernel:
                raise DimensionError(f"layer {i} conv1d cannot take input {shape}")
            shape = (s.size, shape[1] - s.kernel + 1)
        elif k == "conv2d":
            if len(shape) != 3 or shape[0] != s.in_dim or min(shape[1:]) < s.kernel:
                raise DimensionError(f"layer {i} conv2d cannot take input {shape}")
            shape = (s.size, shape[1] - s.kernel + 1, shape[2] - s.kernel + 1)
        elif k == "maxpool1d":
            if len(shape) != 2 or shape[1] < s.pool:
                raise DimensionError(f"layer {i} maxpool1d cannot take input {shape}")
            shape = (shape[0], shape[1] // s.pool)
        elif k == "maxpool2d":
            if len(shape) != 3 or min(shape[1:]) < s.pool:
                raise DimensionError(f"layer {i} maxpool2d cannot take input {shape}")
            shape = (shape[0], shape[1] // s.pool, shape[2] // s.pool)
        elif k == "flatten":
            shape = (int(np.prod(shape)),)
        elif k == "dense":
            if shape != (s.in_dim,):
                raise DimensionError(f"layer {i} dense expects ({s.in_dim},), got {shape}")
            shape = (s.size,)
        trace.append(shape)
    return trace


def param_count(model: NetworkModel) -> int:
    return sum(a.size for p in model.params for a in p.values())


# ------------------------------------------------------------------ builders


def _conv(kind, in_dim, filters, kernel):
    return LayerSpec(kind, in_dim=in_dim, size=filters, kernel=kernel)


def _dense(in_dim, units):
    return LayerSpec("dense", in_dim=in_dim, size=units)


def build_facenet(normalize: bool = False, dropout: float = 0.1) -> NetworkModel:
    specs = [
        LayerSpec("flatten"),
        _dense(784, 128), LayerSpec("relu"), LayerSpec("dropout", p=dropout),
        _dense(128, 128), LayerSpec("relu"), LayerSpec("dropout", p=dropout),
        _dense(128, EMBEDDING_DIM),
    ]
    if normalize:
        specs.append(LayerSpec("l2norm"))
    return NetworkModel(specs)


def build_conv2dnet(normalize: bool = False) -> NetworkModel:
    specs = [
        _conv("conv2d", 1, 64, 4), LayerSpec("relu"), LayerSpec("maxpool2d", pool=2),
        _conv("conv2d", 64, 128, 4), LayerSpec("relu"), LayerSpec("maxpool2d", pool=2),
        LayerSpec("flatten"),
        _dense(2048, 400), LayerSpec("relu"),
        _dense(400, 128), LayerSpec("relu"),
        _dense(128, EMBEDDING_DIM),
    ]
    if normalize:
        specs.append(LayerSpec("l2norm"))
    return NetworkModel(specs)


def build_conv1dnet(normalize: bool = False) -> NetworkModel:
    specs = [
        _conv("conv1d", 28, 256, 3), LayerSpec("relu"), LayerSpec("maxpool1d", pool=2),
        _conv("conv1d", 256, 128, 4), LayerSpec("relu"), LayerSpec("maxpool1d", pool=2),
        LayerSpec("flatten"),
        _dense(640, 256), LayerSpec("relu"),
        _dense(256, EMBEDDING_DIM),
    ]
    if normalize:
        specs.append(LayerSpec("l2norm"))
    return NetworkModel(specs)


def build_classifier(in_dim: int = EMBEDDING_DIM) -> NetworkModel:
    specs = [_dense(in_dim, 32), LayerSpec("relu"), _dense(32, N_CLASSES), LayerSpec("softmax")]
    return NetworkModel(specs, input_shape=(in_dim,))


BUILDERS = {"facenet": build_facenet, "conv2dnet": build_conv2dnet, "conv1dnet": build_conv1dnet}


def build_embedding(arch: str, normalize: bool = False) -> NetworkModel:
    try:
        return BUILDERS[arch](normalize=normalize)
    except KeyError:
        raise ContractError(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}") from None


HEAD_LAYERS = 4


def compose(embedding: NetworkModel, classifier: NetworkModel) -> NetworkModel:
    """Embedding followed by classifier as a single network."""
    m = NetworkModel(
        list(embedding.specs) + list(classifier.specs),
        [dict(p) for p in embedding.params] + [dict(p) for p in classifier.params],
        embedding.input_shape,
    )
    return m.copy()


def split_head(model: NetworkModel) -> tuple[NetworkModel, NetworkModel]:
    """Inverse of `compose` for a model ending in the classifier head."""
    if len(model.specs) <= HEAD_LAYERS or model.specs[-1].kind != "softmax":
        raise ContractError("model does not end with a classifier head")
    cut = len(model.specs) - HEAD_LAYERS
    emb = NetworkModel(model.specs[:cut], model.params[:cut], model.input_shape)
    head_in = model.specs[cut].in_dim
    head = NetworkModel(model.specs[cut:], model.params[cut:], (head_in,))
    return emb.copy(), head.copy()


def init_params(model: NetworkModel, seed: int) -> NetworkModel:
    """Fan-in scaled uniform weights (bound sqrt(6/fan_in)), zero biases.

    A dense layer feeding a softmax starts at zero, so an untrained classifier
    outputs the uniform distribution.
    """
    rng = np.random.default_rng(seed)
    out = model.copy()
    for i, (spec, p) in enumerate(zip(out.specs, out.params)):
        if "W" in p:
            if i + 1 < len(out.specs) and out.specs[i + 1].kind == "softmax":
                p["W"] = np.zeros_like(p["W"])
                p["b"] = np.zeros_like(p["b"])
                continue
            fan_in = int(np.prod(p["W"].shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            p["W"] = rng.uniform(-bound, bound, size=p["W"].shape)
            p["b"] = np.zeros_like(p["b"])
    return out


# ------------------------------------------------------------ forward/backward


def forward(model: NetworkModel, x, mode: str = "infer", rng=None, cache: list | None = None) -> np.ndarray:
    """Run the network on one sample or a batch.

    Dropout is inverted and only active when ``mode == "train"``. Pass a list
    as `cache` to collect what `backward` needs.
    """
    if mode not in ("train", "infer"):
        raise ContractError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = T.as_tensor(x)
    ishape = tuple(model.input_shape)
    if x.shape == ishape:
        single = True
        x = x[None]
    elif x.shape[1:] == ishape:
        single = False
    else:
        raise DimensionError(f"input shape {x.shape} does not match model input {ishape}")
    if model.specs and model.specs[0].kind == "conv1d" and len(ishape) == 2:
        x = x.transpose(0, 2, 1)
    elif model.specs and model.specs[0].kind == "conv2d" and len(ishape) == 2:
        x = x[:, None]
    if mode == "train" and rng is None:
        rng = np.random.default_rng(0)
    for spec, p in zip(model.specs, model.params):
        k = spec.kind
        c = None
        if k == "conv1d":
            c, x = x, T.conv1d(x, p["W"], p["b"])
        elif k == "conv2d":
            c, x = x, T.conv2d(x, p["W"], p["b"])
        elif k in ("maxpool1d", "maxpool2d"):
            shape = x.shape
            x, arg = T.maxpool(x, spec.pool, spatial=1 if k == "maxpool1d" else 2)
            c = (shape, arg)
        elif k == "flatten":
            c, x = x.shape, x.reshape(x.shape[0], -1)
        elif k == "dense":
            c, x = x, T.dense(x, p["W"], p["b"])
        elif k == "relu":
            c, x = x, T.relu(x)
        elif k == "sigmoid":
            x = T.sigmoid(x)
            c = x
        elif k == "softmax":
            x = T.softmax(x)
            c = x
        elif k == "dropout":
            if mode == "train" and spec.p > 0:
                mask = (rng.random(x.shape) >= spec.p) / (1.0 - spec.p)
                x = x * mask
                c = mask
        elif k == "l2norm":
            norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
            norm = np.maximum(norm, 1e-12)
            c = (x, norm)
            x = x / norm
        if cache is not None:
            cache.append(c)
    return x[0] if single else x


def backward(model: NetworkModel, cache: list, grad, from_logits: bool = False):
    """Backpropagate `grad` through a forward pass recorded in `cache`.

    Returns ``(param_grads, input_grad)``; `param_grads` parallels
    ``model.params``. With `from_logits`, `grad` is taken with respect to the
    input of a final softmax layer, which is then skipped.
    """
    if len(cache) != len(model.specs):
        raise ContractError("cache does not match model; run forward with cache first")
    g = T.as_tensor(grad)
    n_layers = len(model.specs)
    if from_logits:
        if model.specs[-1].kind != "softmax":
            raise ContractError("from_logits requires a final softmax layer")
        n_layers -= 1
    out_rank = len(shape_trace(model.specs, model.input_shape)[n_layers])
    single = g.ndim == out_rank
    if single:
        g = g[None]
    grads: list[dict] = [{} for _ in model.specs]
    for i in range(n_layers - 1, -1, -1):
        spec, p, c = model.specs[i], model.params[i], cache[i]
        k = spec.kind
        if k == "conv1d":
            g, dw, db = T.conv1d_backward(c, p["W"], g)
            grads[i] = {"W": dw, "b": db}
        elif k == "conv2d":
            g, dw, db = T.conv2d_backward(c, p["W"], g)
            grads[i] = {"W": dw, "b": db}
        elif k in ("maxpool1d", "maxpool2d"):
            g = T.maxpool_backward(g, c[1], c[0])
        elif k == "flatten":
            g = g.reshape(c)
        elif k == "dense":
            g, dw, db = T.dense_backward(c, p["W"], g)
            grads[i] = {"W": dw, "b": db}
        elif k == "relu":
            g = T.relu_backward(c, g)
        elif k == "sigmoid":
            g = T.sigmoid_backward(c, g)
        elif k == "softmax":
            g = T.softmax_backward(c, g)
        elif k == "dropout":
            if c is not None:
                g = g * c
        elif k == "l2norm":
            x, norm = c
            y = x / norm
            g = (g - y * (g * y).sum(axis=-1, keepdims=True)) / norm
    ishape = tuple(model.input_shape)
    if model.specs and model.specs[0].kind == "conv1d" and len(ishape) == 2:
        g = g.transpose(0, 2, 1)
    elif model.specs and model.specs[0].kind == "conv2d" and len(ishape) == 2:
        g = g[:, 0]
    return grads, (g[0] if single else g)


def flat_params(model: NetworkModel) -> list[np.ndarray]:
    """Parameter arrays in a fixed order (layer, then W before b)."""
    return [p[key] for p in model.params for key in ("W", "b") if key in p]


def flat_grads(model: NetworkModel, grads: list[dict]) -> list[np.ndarray]:
    return [g[key] for p, g in zip(model.params, grads) for key in ("W", "b") if key in p]


# ------------------------------------------------------------- serialization

MAGIC = b"CDML"
VERSION = 1
_KIND_TAG = {k: i for i, k in enumerate(KINDS)}


def to_bytes(model: NetworkModel) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<HH", VERSION, len(model.specs))
    out += struct.pack("<B", len(model.input_shape))
    out += struct.pack(f"<{len(model.input_shape)}I", *model.input_shape)
    for spec, p in zip(model.specs, model.params):
        out += struct.pack("<B", _KIND_TAG[spec.kind])
        if spec.kind in ("conv1d", "conv2d"):
            out += struct.pack("<III", spec.in_dim, spec.size, spec.kernel)
        elif spec.kind == "dense":
            out += struct.pack("<II", spec.in_dim, spec.size)
        elif spec.kind in ("maxpool1d", "maxpool2d"):
            out += struct.pack("<I", spec.pool)
        elif spec.kind == "dropout":
            out += struct.pack("<d", spec.p)
        arrays = [p[key] for key in ("W", "b") if key in p]
        out += struct.pack("<B", len(arrays))
        for a in arrays:
            out += struct.pack("<B", a.ndim)
            out += struct.pack(f"<{a.ndim}I", *a.shape)
            out += np.ascontiguousarray(a, dtype="<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise FormatError("truncated checkpoint", self.pos)
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals


def from_bytes(buf: bytes) -> NetworkModel:
    if len(buf) < 4:
        raise FormatError("truncated checkpoint: missing magic", 0)
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", 0)
    if len(buf) < 12:
        raise FormatError("truncated checkpoint header", len(buf))
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) != crc:
        raise FormatError("CRC mismatch", len(buf) - 4)
    r = _Reader(buf[:-4])
    r.pos = 4
    version, n_layers = r.take("<HH")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    (rank,) = r.take("<B")
    input_shape = r.take(f"<{rank}I")
    specs, params = [], []
    for _ in range(n_layers):
        at = r.pos
        (tag,) = r.take("<B")
        if tag >= len(KINDS):
            raise FormatError(f"unknown layer tag {tag}", at)
        kind = KINDS[tag]
        if kind in ("conv1d", "conv2d"):
            i, s, k = r.take("<III")
            spec = LayerSpec(kind, in_dim=i, size=s, kernel=k)
        elif kind == "dense":
            i, s = r.take("<II")
            spec = LayerSpec(kind, in_dim=i, size=s)
        elif kind in ("maxpool1d", "maxpool2d"):
            (pool,) = r.take("<I")
            spec = LayerSpec(kind, pool=pool)
        elif kind == "dropout":
            (p,) = r.take("<d")
            spec = LayerSpec(kind, p=p)
        else:
            spec = LayerSpec(kind)
        (count,) = r.take("<B")
        arrays = []
        for _ in range(count):
            (nd,) = r.take("<B")
            shape = r.take(f"<{nd}I")
            n = int(np.prod(shape))
            if r.pos + 4 * n > len(r.buf):
                raise FormatError("truncated tensor data", r.pos)
            a = np.frombuffer(r.buf, dtype="<f4", count=n, offset=r.pos).astype(np.float64)
            r.pos += 4 * n
            arrays.append(a.reshape(shape))
        expected = _zero_params(spec)
        if len(arrays) != len(expected):
            raise FormatError(f"layer {kind} carries {len(arrays)} tensors, expected {len(expected)}", at)
        p = dict(zip(("W", "b"), arrays))
        for key, a in expected.items():
            if p[key].shape != a.shape:
                raise FormatError(f"layer {kind} tensor {key} has shape {p[key].shape}, expected {a.shape}", at)
        specs.append(spec)
        params.append(p)
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after last layer", r.pos)
    try:
        return NetworkModel(specs, params, tuple(input_shape))
    except DimensionError as e:
        raise FormatError(f"inconsistent layer shapes: {e}", 0) from e


def save(model: NetworkModel, path) -> None:
    Path(path).write_bytes(to_bytes(model))


def load(path) -> NetworkModel:
    return from_bytes(Path(path).read_bytes())
