"""Tiny 3D convolutional probability scorer trained with Adam.

conv 3^3 x C1 -> ReLU -> maxpool 2^3 -> conv 3^3 x C2 -> ReLU -> maxpool 2^3
-> global average pool -> dense C2 -> 1 -> sigmoid.  Float64 throughout.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels as K
from .volume import Volume

PARAM_ORDER = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "dense_w", "dense_b")
MIN_DIM = 4  # two floor 2x pools leave at least one voxel
_WEIGHTS_MAGIC = b"CSW1"
# outputs stay strictly inside (0, 1) even when the logistic saturates in float64
_P_LO, _P_HI = np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0)


def _prob(z: np.ndarray) -> np.ndarray:
    return np.clip(K.sigmoid(z), _P_LO, _P_HI)


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def init_params(c1: int, c2: int, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    return {
        "conv1_w": rng.normal(0.0, np.sqrt(2.0 / 27), size=(3, 3, 3, 1, c1)),
        "conv1_b": np.zeros(c1),
        "conv2_w": rng.normal(0.0, np.sqrt(2.0 / (27 * c1)), size=(3, 3, 3, c1, c2)),
        "conv2_b": np.zeros(c2),
        "dense_w": rng.normal(0.0, np.sqrt(1.0 / c2), size=c2),
        "dense_b": np.zeros(1),
    }


class UndersizedVolumeError(ValueError):
    pass


def _as_batch(volumes) -> np.ndarray:
    if isinstance(volumes, Volume):
        volumes = [volumes]
    if isinstance(volumes, np.ndarray):
        x = np.asarray(volumes, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
    else:
        x = np.stack([v.data if isinstance(v, Volume) else np.asarray(v) for v in volumes])
    if x.ndim != 4:
        raise ValueError("expected a batch of 3D volumes")
    if min(x.shape[1:]) < MIN_DIM:
        raise UndersizedVolumeError(
            f"volume dims {x.shape[1:]} below the scorer minimum of {MIN_DIM} per axis")
    return x


def _pad(x: np.ndarray) -> np.ndarray:
    """(B, D, H, K) -> (B, D+2, H+2, K+2, 1) zero padded."""
    return np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))[..., None]


class ConvScorer:
    def __init__(self, c1: int = 8, c2: int = 16, seed: int = 0,
                 params: dict[str, np.ndarray] | None = None):
        self.c1 = c1
        self.c2 = c2
        self.seed = seed
        self.params = params if params is not None else init_params(c1, c2, seed)

    def copy(self) -> "ConvScorer":
        return ConvScorer(self.c1, self.c2, self.seed,
                          {k: v.copy() for k, v in self.params.items()})

    # -- forward / backward ----------------------------------------------
    def _forward(self, x: np.ndarray, keep: bool = False):
        P = self.params
        xp = _pad(x)
        a1 = K.conv_relu_forward(xp, P["conv1_w"], P["conv1_b"])
        p1p, arg1 = K.maxpool_forward(a1, 1)
        a2 = K.conv_relu_forward(p1p, P["conv2_w"], P["conv2_b"])
        p2, arg2 = K.maxpool_forward(a2, 0)
        logits = K.gap_logits(p2, P["dense_w"], P["dense_b"][0])
        if not keep:
            return logits, None
        return logits, (xp, a1, p1p, arg1, a2, p2, arg2)

    def logits(self, volumes) -> np.ndarray:
        return self._forward(_as_batch(volumes))[0]

    def predict(self, volumes, batch_size: int = 32) -> np.ndarray:
        x = _as_batch(volumes)
        out = [_prob(self._forward(x[i:i + batch_size])[0])
               for i in range(0, x.shape[0], batch_size)]
        return np.concatenate(out)

    def forward(self, v: Volume) -> float:
        return float(self.predict(v)[0])

    __call__ = forward

    def _backward(self, cache, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        P = self.params
        xp, a1, p1p, arg1, a2, p2, arg2 = cache
        count = p2.shape[1] * p2.shape[2] * p2.shape[3]
        gap = p2.sum(axis=(1, 2, 3)) / count
        grads = {
            "dense_w": dlogits @ gap,
            "dense_b": np.array([dlogits.sum()]),
        }
        g_p2 = np.broadcast_to((dlogits[:, None] * P["dense_w"][None, :] / count)[:, None, None, None, :],
                               p2.shape).copy()
        g_a2 = K.maxpool_backward(g_p2, arg2, a2.shape) * (a2 > 0)
        gw2, gb2, g_p1p = K.conv_backward(p1p, P["conv2_w"], g_a2, True)
        g_p1 = np.ascontiguousarray(g_p1p[:, 1:-1, 1:-1, 1:-1, :])
        g_a1 = K.maxpool_backward(g_p1, arg1, a1.shape) * (a1 > 0)
        gw1, gb1, _ = K.conv_backward(xp, P["conv1_w"], g_a1, False)
        grads.update(conv1_w=gw1, conv1_b=gb1, conv2_w=gw2, conv2_b=gb2)
        return grads

    def loss_and_grads(self, volumes, labels, class_weights=(1.0, 1.0)):
        x = _as_batch(volumes)
        y = np.asarray(labels, dtype=np.float64)
        z, cache = self._forward(x, keep=True)
        p = K.sigmoid(z)
        loss = class_balanced_bce(p, y, class_weights)
        w0, w1 = class_weights
        dz = (w1 * y * (p - 1.0) + w0 * (1.0 - y) * p) / y.size
        return loss, self._backward(cache, dz)

    # -- occlusion fast path ----------------------------------------------
    def occlusion_probabilities(self, v: Volume, origins: np.ndarray, size: Sequence[int],
                                fill: float = 0.0) -> np.ndarray:
        """Scorer output for each copy of ``v`` with the patch at ``origins[i]`` set to ``fill``."""
        _as_batch(v)
        P = self.params
        z = K.occlusion_logits(np.ascontiguousarray(v.data), P["conv1_w"], P["conv1_b"],
                               P["conv2_w"], P["conv2_b"], P["dense_w"], float(P["dense_b"][0]),
                               np.asarray(origins, dtype=np.int64).reshape(-1, 3),
                               np.asarray(size, dtype=np.int64), float(fill))
        return _prob(z)

    # -- serialization -----------------------------------------------------
    def save(self, path: str | Path) -> None:
        """Write ``<path>.json`` (descriptor) and ``<path>.bin`` (little-endian float64)."""
        path = Path(path)
        entries, blobs, offset = [], [], 0
        for name in PARAM_ORDER:
            arr = np.ascontiguousarray(self.params[name], dtype="<f8")
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.size
        header = _WEIGHTS_MAGIC + struct.pack("<I", offset)
        path.with_suffix(".bin").write_bytes(header + b"".join(blobs))
        desc = {"format": "dlebm.convscorer", "version": 1, "c1": self.c1, "c2": self.c2,
                "seed": self.seed, "params": entries}
        path.with_suffix(".json").write_text(json.dumps(desc, indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "ConvScorer":
        path = Path(path)
        desc = json.loads(path.with_suffix(".json").read_text())
        if desc.get("format") != "dlebm.convscorer" or desc.get("version") != 1:
            raise ValueError("unsupported scorer descriptor")
        raw = path.with_suffix(".bin").read_bytes()
        if raw[:4] != _WEIGHTS_MAGIC:
            raise ValueError("bad weight file magic")
        (n,) = struct.unpack_from("<I", raw, 4)
        flat = np.frombuffer(raw[8:], dtype="<f8")
        if flat.size != n:
            raise ValueError("weight file length mismatch")
        params = {}
        for e in desc["params"]:
            size = int(np.prod(e["shape"]))
            params[e["name"]] = flat[e["offset"]:e["offset"] + size].reshape(e["shape"]).astype(np.float64)
        return cls(desc["c1"], desc["c2"], desc["seed"], params)


def balanced_class_weights(labels) -> tuple[float, float]:
    """(w0, w1) = (N / (2 N_neg), N / (2 N_pos))."""
    y = np.asarray(labels)
    n = y.size
    n_pos = int(np.sum(y == 1))
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes are needed for class weights")
    return n / (2.0 * n_neg), n / (2.0 * n_pos)


def class_balanced_bce(p, y, class_weights=(1.0, 1.0)) -> float:
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-12, 1.0 - 1e-12)
    y = np.asarray(y, dtype=np.float64)
    w0, w1 = class_weights
    return float(np.mean(-(w1 * y * np.log(p) + w0 * (1.0 - y) * np.log1p(-p))))


@dataclass
class TrainResult:
    scorer: ConvScorer
    loss_trace: list[float]


def train(scorer: ConvScorer, volumes, labels, cfg: TrainConfig | None = None) -> TrainResult:
    """Mini-batch Adam on the class-balanced BCE; inputs are left untouched.

    ``loss_trace[e]`` is the mean batch loss seen during epoch ``e``.
    """
    cfg = cfg or TrainConfig()
    x = _as_batch(volumes)
    y = np.asarray(labels, dtype=np.float64)
    if y.size != x.shape[0]:
        raise ValueError("one label per volume required")
    weights = balanced_class_weights(y)
    out = scorer.copy()
    rng = np.random.default_rng(cfg.seed)
    m = {k: np.zeros_like(v) for k, v in out.params.items()}
    s = {k: np.zeros_like(v) for k, v in out.params.items()}
    step = 0
    trace = []
    for _ in range(cfg.epochs):
        order = rng.permutation(y.size)
        losses, sizes = [], []
        for start in range(0, y.size, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = out.loss_and_grads(x[idx], y[idx], weights)
            step += 1
            c1 = 1.0 - cfg.beta1 ** step
            c2 = 1.0 - cfg.beta2 ** step
            for k, g in grads.items():
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g
                s[k] = cfg.beta2 * s[k] + (1.0 - cfg.beta2) * g * g
                out.params[k] = out.params[k] - cfg.learning_rate * (m[k] / c1) / (np.sqrt(s[k] / c2) + cfg.eps)
            losses.append(loss)
            sizes.append(idx.size)
        trace.append(float(np.average(losses, weights=sizes)))
    return TrainResult(out, trace)


def gradient_check(scorer: ConvScorer, v: Volume, y: int, h: float = 1e-5,
                   class_weights=(1.0, 1.0), floor: float = 1e-6,
                   params: Sequence[str] = PARAM_ORDER) -> float:
    """Max relative error between backprop and central differences over every
    weight of the tensors named in ``params`` (all of them by default).

    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    _, grads = scorer.loss_and_grads(v, [y], class_weights)
    probe = scorer.copy()
    worst = 0.0
    for name in params:
        arr = probe.params[name]
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = class_balanced_bce(probe.predict(v), [y], class_weights)
            flat[i] = orig - h
            lm = class_balanced_bce(probe.predict(v), [y], class_weights)
            flat[i] = orig
            numeric = (lp - lm) / (2 * h)
            analytic = grads[name].reshape(-1)[i]
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            worst = max(worst, err)
    return worst
