"""Layer composition, backpropagation and SGD training for graph CNNs.

An architecture string such as ``"C20 P C50 P R F"`` is read left to right:

* ``C<k>``  spectral graph convolution producing k feature maps
* ``P``     aggregation pooling (``pool_levels`` levels composed)
* ``R``     rectified linear unit
* ``F<k>``  fully connected layer with k outputs; a bare ``F`` produces
  the class logits and must come last
"""

from __future__ import annotations

import logging
import math
import re
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from gcnn.coarsen import CoarseningHierarchy, amg_coarsen
from gcnn.conv import (
    Interpolator,
    build_interpolator,
    interpolate_filters,
    naive_backward_data,
    naive_backward_filters,
    spectral_mix,
    spectral_outer,
)
from gcnn.errors import ConfigError, FormatError, InvalidArgument, NumericalFailure
from gcnn.graph import Graph, laplacian
from gcnn.spectral import BasisCache, SpectralBasis

log = logging.getLogger(__name__)

GRADIENT_VARIANTS = ("proposed", "naive")
_TOKEN = re.compile(r"\s*(C\d+|P|R|F\d*)\s*")


@dataclass
class NetworkConfig:
    architecture: str = "C20 P C50 P R F"
    tracked_weights: int = 60
    beta: float = 0.05
    pool_levels: int = 2
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 100
    epochs: int = 500
    seed: int = 0
    relu_after_conv: bool = False
    knot_domain: str = "rank"
    n_classes: int = 10
    gradient: str = "proposed"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def parse_architecture(text: str) -> list[tuple[str, int | None]]:
    """Tokenise an architecture string into ``(kind, width)`` pairs."""
    pos, out = 0, []
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise ConfigError(f"cannot parse architecture {text!r} at position {pos}")
        tok = m.group(1)
        width = int(tok[1:]) if len(tok) > 1 else None
        if width is not None and width < 1:
            raise ConfigError(f"layer {tok} must have a positive width")
        out.append((tok[0], width))
        pos = m.end()
    if not out:
        raise ConfigError("empty architecture")
    return out


# ---------------------------------------------------------------- layers


def _lastdim(x: np.ndarray, mat: np.ndarray) -> np.ndarray:
    """``x @ mat`` over the last axis as a single 2-D product."""
    lead = x.shape[:-1]
    return (x.reshape(-1, x.shape[-1]) @ mat).reshape(*lead, mat.shape[1])


class GraphConv:
    kind = "conv"

    def __init__(self, basis: SpectralBasis, interp: Interpolator, in_ch: int, out_ch: int, graph: Graph, variant="proposed"):
        self.basis = basis
        self.interp = interp
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.graph = graph
        self.variant = variant
        self.pool = None
        self.pooled_U = None

    def attach_pool(self, hierarchy: CoarseningHierarchy):
        """Precompute R·U so a pool right after this layer can be folded into
        the inverse transform, skipping the full-resolution output."""
        self.pool = hierarchy
        self.pooled_U = hierarchy.composed_R @ self.basis.U

    def param_shapes(self):
        return {"k_hat": (self.in_ch, self.out_ch, self.interp.m), "bias": (self.out_ch,)}

    def init_params(self, rng):
        # each tracked weight feeds its own band of bins, so only the input
        # channels add up in an output bin
        std = 1.0 / math.sqrt(self.in_ch)
        return {"k_hat": rng.normal(0.0, std, self.param_shapes()["k_hat"]), "bias": np.zeros(self.out_ch)}

    def forward(self, x, p, pooled=False):
        # with pooled=True the output is already restricted to the coarse
        # graph; rows of R sum to one so the bias passes through unchanged
        k = interpolate_filters(self.interp, p["k_hat"])
        coeffs = _lastdim(x, self.basis.U)
        out_U = self.pooled_U if pooled else self.basis.U
        y = _lastdim(spectral_mix(coeffs, k), out_U.T)
        y += p["bias"][None, :, None]
        return y, (x, coeffs, k, pooled)

    def backward(self, dy, cache, p, need_input=True):
        x, coeffs, k, pooled = cache
        U = self.basis.U
        if pooled and self.variant == "naive":
            dy, pooled = _lastdim(dy, self.pool.composed_R), False
        if self.variant == "naive":
            dk = naive_backward_filters(self.basis, dy, x)
            dx = naive_backward_data(self.basis, dy, k) if need_input else None
        else:
            dcoeffs = _lastdim(dy, self.pooled_U if pooled else U)
            dk = spectral_outer(dcoeffs, coeffs)
            dx = _lastdim(spectral_mix(dcoeffs, k.transpose(1, 0, 2)), U.T) if need_input else None
        grads = {"k_hat": dk @ self.interp.phi, "bias": dy.sum(axis=(0, 2))}
        return dx, grads


class GraphPool:
    kind = "pool"

    def __init__(self, hierarchy: CoarseningHierarchy):
        self.hierarchy = hierarchy

    def param_shapes(self):
        return {}

    def init_params(self, rng):
        return {}

    def forward(self, x, p):
        return _lastdim(x, self.hierarchy.composed_R.T), None

    def backward(self, dy, cache, p, need_input=True):
        return _lastdim(dy, self.hierarchy.composed_R), {}


class ReLU:
    kind = "relu"

    def param_shapes(self):
        return {}

    def init_params(self, rng):
        return {}

    def forward(self, x, p):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, mask, p, need_input=True):
        return dy * mask, {}


class Dense:
    kind = "fc"

    def __init__(self, fan_in: int, fan_out: int):
        self.fan_in = fan_in
        self.fan_out = fan_out

    def param_shapes(self):
        return {"W": (self.fan_in, self.fan_out), "b": (self.fan_out,)}

    def init_params(self, rng):
        return {"W": rng.normal(0.0, 1.0 / math.sqrt(self.fan_in), (self.fan_in, self.fan_out)), "b": np.zeros(self.fan_out)}

    def forward(self, x, p):
        flat = x.reshape(x.shape[0], -1)
        return flat @ p["W"] + p["b"], (x.shape, flat)

    def backward(self, dy, cache, p, need_input=True):
        shape, flat = cache
        grads = {"W": flat.T @ dy, "b": dy.sum(axis=0)}
        dx = (dy @ p["W"].T).reshape(shape) if need_input else None
        return dx, grads


# ---------------------------------------------------------------- network


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy, class probabilities and d(loss)/d(logits)."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    probs = np.exp(logp)
    s = logits.shape[0]
    loss = -logp[np.arange(s), labels].mean()
    dlogits = probs.copy()
    dlogits[np.arange(s), labels] -= 1.0
    return loss, probs, dlogits / s


# marks a pool whose work was done by the conv layer in front of it
_FUSED = object()


class Network:
    def __init__(self, cfg: NetworkConfig, graph: Graph, layers: list, names: list[str], params: dict):
        self.cfg = cfg
        self.graph = graph
        self.layers = layers
        self.names = names
        self.params = params

    @property
    def input_n(self) -> int:
        return self.graph.n

    def layer_params(self, idx):
        prefix = self.names[idx] + "."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def param_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def describe(self) -> list[str]:
        out = []
        for name, layer in zip(self.names, self.layers):
            if layer.kind == "conv":
                out.append(f"{name}: conv({layer.in_ch}->{layer.out_ch}, N={layer.basis.n}, M={layer.interp.m})")
            elif layer.kind == "pool":
                sizes = [layer.hierarchy.fine_n] + [lv.coarse_graph.n for lv in layer.hierarchy.levels]
                out.append(f"{name}: pool({' -> '.join(map(str, sizes))})")
            elif layer.kind == "fc":
                out.append(f"{name}: fc({layer.fan_in}->{layer.fan_out})")
            else:
                out.append(f"{name}: relu")
        return out

    def forward(self, batch, labels=None, keep_maps=False):
        """Run the batch through every layer.

        Returns ``(loss, probs, acts)``; ``loss`` is None when no labels are
        given.  ``acts`` is a list of ``(output, cache)`` per layer.  A conv
        layer directly followed by a pool writes its coarse output straight
        away and records ``None`` as its own output, unless ``keep_maps`` asks
        for every intermediate map.
        """
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim == 2:
            x = x[:, None, :]
        if x.ndim != 3 or x.shape[-1] != self.input_n:
            raise InvalidArgument(f"batch must be (S, C, {self.input_n}), got {x.shape}")
        acts = []
        fused = False
        for idx, layer in enumerate(self.layers):
            if fused:
                acts.append((x, _FUSED))
                fused = False
                continue
            if layer.kind == "conv" and layer.pool is not None and not keep_maps:
                x, cache = layer.forward(x, self.layer_params(idx), pooled=True)
                fused = True
            else:
                x, cache = layer.forward(x, self.layer_params(idx))
            if not np.all(np.isfinite(x)):
                raise NumericalFailure(f"non-finite activation in layer {idx} ({self.names[idx]})", layer=idx)
            acts.append((None if fused else x, cache))
        if labels is None:
            z = x - x.max(axis=1, keepdims=True)
            probs = np.exp(z)
            return None, probs / probs.sum(axis=1, keepdims=True), acts
        labels = np.asarray(labels)
        loss, probs, _ = softmax_cross_entropy(x, labels)
        return loss, probs, acts

    def backward(self, acts, labels, input_grad=False) -> dict:
        """Gradients of the mean cross-entropy for every parameter.

        With ``input_grad`` the result also holds ``"input"``, the gradient
        with respect to the batch fed to ``forward``.
        """
        if len(acts) != len(self.layers):
            raise InvalidArgument("activations do not match this network")
        logits = acts[-1][0]
        _, _, d = softmax_cross_entropy(logits, np.asarray(labels))
        grads = {}
        for idx in range(len(self.layers) - 1, -1, -1):
            if acts[idx][1] is _FUSED:
                continue
            need = idx > 0 or input_grad
            d, g = self.layers[idx].backward(d, acts[idx][1], self.layer_params(idx), need_input=need)
            for k, v in g.items():
                grads[f"{self.names[idx]}.{k}"] = v
        if input_grad:
            grads["input"] = d
        return grads

    def predict(self, images, batch_size=1000) -> np.ndarray:
        out = []
        for start in range(0, len(images), batch_size):
            _, probs, _ = self.forward(images[start:start + batch_size])
            out.append(probs.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def accuracy(self, images, labels, batch_size=1000) -> float:
        return float(np.mean(self.predict(images, batch_size) == np.asarray(labels)))

    def load_params(self, params: dict):
        missing = set(self.params) - set(params)
        extra = set(params) - set(self.params)
        if missing or extra:
            raise ConfigError(f"checkpoint does not match network: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in params.items():
            if v.shape != self.params[k].shape:
                raise ConfigError(f"parameter {k} has shape {v.shape}, network expects {self.params[k].shape}")
        self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}


def build_network(cfg: NetworkConfig, graph: Graph, seed=None, cache: BasisCache | None = None) -> Network:
    """Construct layers, coarsening hierarchies, eigenbases and initial weights."""
    if cfg.gradient not in GRADIENT_VARIANTS:
        raise ConfigError(f"unknown gradient variant {cfg.gradient!r}")
    if cfg.tracked_weights < 1:
        raise ConfigError("tracked_weights must be positive")
    tokens = parse_architecture(cfg.architecture)
    if tokens[-1] != ("F", None):
        raise ConfigError("architecture must end with a bare 'F' producing the class logits")
    if cfg.relu_after_conv:
        expanded = []
        for tok in tokens:
            expanded.append(tok)
            if tok[0] == "C":
                expanded.append(("R", None))
        tokens = expanded

    cache = cache if cache is not None else BasisCache()
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    layers, names = [], []
    g, channels, flat = graph, 1, None
    for idx, (kind, width) in enumerate(tokens):
        if kind == "C":
            if flat is not None:
                raise ConfigError("convolution cannot follow a fully connected layer")
            basis = cache.get(laplacian(g))
            m = min(cfg.tracked_weights, g.n)
            interp = build_interpolator(m, g.n, cfg.knot_domain, basis.lam)
            layers.append(GraphConv(basis, interp, channels, width, g, cfg.gradient))
            names.append(f"conv{idx}")
            channels = width
        elif kind == "P":
            if flat is not None:
                raise ConfigError("pooling cannot follow a fully connected layer")
            try:
                hier = amg_coarsen(g, cfg.beta, cfg.pool_levels)
            except InvalidArgument as exc:
                raise ConfigError(f"pool layer {idx}: {exc}") from exc
            layers.append(GraphPool(hier))
            names.append(f"pool{idx}")
            g = hier.coarse_graph
        elif kind == "R":
            layers.append(ReLU())
            names.append(f"relu{idx}")
        else:
            fan_in = flat if flat is not None else channels * g.n
            fan_out = width if width is not None else cfg.n_classes
            layers.append(Dense(fan_in, fan_out))
            names.append(f"fc{idx}")
            flat = fan_out

    for layer, nxt in zip(layers, layers[1:]):
        if layer.kind == "conv" and nxt.kind == "pool":
            layer.attach_pool(nxt.hierarchy)

    params = {}
    for name, layer in zip(names, layers):
        for k, v in layer.init_params(rng).items():
            params[f"{name}.{k}"] = v
    return Network(cfg, graph, layers, names, params)


def forward(net: Network, batch, labels=None, keep_maps=False):
    return net.forward(batch, labels, keep_maps)


def backward(net: Network, acts, labels, input_grad=False):
    return net.backward(acts, labels, input_grad)


# ---------------------------------------------------------------- optimisation


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float) -> dict:
    """Momentum SGD, in place: ``v = momentum * v - lr * g``; ``p += v``."""
    for name, g in grads.items():
        if name not in params:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericalFailure(f"non-finite gradient for {name} (max |g| = {np.nanmax(np.abs(g))})")
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(params[name])
        v = momentum * v - lr * g
        velocity[name] = v
        params[name] += v
    return params


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    test_accuracy: float
    seconds: float


@dataclass
class TrainResult:
    history: list[EpochMetrics] = field(default_factory=list)
    best_accuracy: float = -1.0
    best_epoch: int = 0
    failure: str | None = None


def train(net: Network, train_images, train_labels, test_images, test_labels, cfg: NetworkConfig | None = None,
          on_epoch=None, checkpoint_path=None, record_time=True) -> TrainResult:
    """Mini-batch momentum SGD with per-epoch test evaluation.

    ``on_epoch`` is called with each EpochMetrics as soon as it exists.
    The parameters of the best test-accuracy epoch are written to
    ``checkpoint_path``.  A numerical failure stops training; the partial
    history is returned with ``failure`` set.
    """
    cfg = cfg or net.cfg
    rng = np.random.default_rng(cfg.seed)
    s = len(train_images)
    velocity: dict = {}
    result = TrainResult()
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(s)
        total = 0.0
        try:
            for start in range(0, s, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                loss, _, acts = net.forward(train_images[idx], train_labels[idx])
                grads = net.backward(acts, train_labels[idx])
                sgd_step(net.params, grads, velocity, cfg.lr, cfg.momentum)
                total += loss * len(idx)
            acc = net.accuracy(test_images, test_labels)
        except NumericalFailure as exc:
            log.error("epoch %d: %s", epoch, exc)
            result.failure = str(exc)
            break
        seconds = time.perf_counter() - t0
        row = EpochMetrics(epoch, float(total / s), acc, seconds if record_time else 0.0)
        result.history.append(row)
        if acc > result.best_accuracy:
            result.best_accuracy, result.best_epoch = acc, epoch
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, net.params)
        if on_epoch is not None:
            on_epoch(row)
    return result


def write_metrics(path, history: list[EpochMetrics]) -> None:
    lines = ["epoch,train_loss,test_accuracy,seconds"]
    lines += [f"{m.epoch},{m.train_loss!r},{m.test_accuracy!r},{m.seconds!r}" for m in history]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"GCNN"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict) -> None:
    """Binary container: magic, u32 version, then one record per parameter.

    Record layout: u32 name length, UTF-8 name, u64 rank, u64 dims, then
    the little-endian f64 payload in C order.
    """
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<Q", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)", offset=0)
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}", offset=4)
    pos, out = 8, {}

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"{path}: truncated record", offset=pos)
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    while pos < len(raw):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        if rank > 8:
            raise FormatError(f"{path}: implausible rank {rank} for {name}", offset=pos - 8)
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    return out
