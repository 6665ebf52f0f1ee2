"""Five-block convolutional backbone with an exchangeable linear head.

Each block is conv3x3 (no bias) -> batchnorm -> relu -> optional 2x2 max
pool. ``forward_features(model, x, k)`` returns the output of block ``k``,
which is the feature map the attack losses operate on.
"""

from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .datagen import decode_tensor, encode_tensor

NUM_BLOCKS = 5
DEFAULT_CHANNELS = (8, 16, 32, 64, 64)
DEFAULT_POOLS = (True, True, True, True, False)

CHECKPOINT_MAGIC = b"PAPF"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ArchitectureMismatch(ValueError):
    pass


@dataclass
class Block:
    weight: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    pool: bool

    PARAMS = ("weight", "gamma", "beta")
    BUFFERS = ("running_mean", "running_var")


@dataclass
class BlockCache:
    x: np.ndarray
    pre_bn: np.ndarray
    bn: T.BatchNormCache
    pre_relu: np.ndarray
    pre_pool: np.ndarray


@dataclass
class FeatureTrace:
    """Block outputs and the intermediates needed to backpropagate through them."""

    features: list[np.ndarray]
    caches: list[BlockCache]
    pooled: np.ndarray | None = None

    def __getitem__(self, k: int) -> np.ndarray:
        return self.features[k - 1]


@dataclass
class ParamSnapshot:
    arch: dict
    blocks: list[np.ndarray]


def _check_block(k: int) -> None:
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= NUM_BLOCKS:
        raise ValueError(f"block index must be in 1..{NUM_BLOCKS}, got {k!r}")


@dataclass
class Model:
    blocks: list[Block]
    head_weight: np.ndarray
    head_bias: np.ndarray
    in_channels: int = 3
    image_size: int = 32
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    extra: dict = field(default_factory=dict)

    @classmethod
    def init(
        cls,
        num_classes: int,
        channels=DEFAULT_CHANNELS,
        in_channels: int = 3,
        image_size: int = 32,
        pools=DEFAULT_POOLS,
        seed: int = 0,
        dtype=np.float32,
        bn_momentum: float = 0.1,
    ) -> "Model":
        if len(channels) != NUM_BLOCKS or len(pools) != NUM_BLOCKS:
            raise ValueError(f"backbone needs exactly {NUM_BLOCKS} blocks")
        rng = np.random.default_rng(seed)
        blocks = []
        c_in = in_channels
        for c_out, pool in zip(channels, pools):
            fan_in = c_in * 9
            w = rng.standard_normal((c_out, c_in, 3, 3)) * np.sqrt(2.0 / fan_in)
            blocks.append(
                Block(
                    weight=w.astype(dtype),
                    gamma=np.ones(c_out, dtype),
                    beta=np.zeros(c_out, dtype),
                    running_mean=np.zeros(c_out, dtype),
                    running_var=np.ones(c_out, dtype),
                    pool=bool(pool),
                )
            )
            c_in = c_out
        model = cls(
            blocks,
            np.zeros((num_classes, c_in), dtype),
            np.zeros(num_classes, dtype),
            in_channels=in_channels,
            image_size=image_size,
            bn_momentum=bn_momentum,
        )
        model.reset_head(num_classes, seed=int(rng.integers(2**32)))
        return model

    # -- structure -------------------------------------------------------

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(b.weight.shape[0] for b in self.blocks)

    @property
    def num_classes(self) -> int:
        return self.head_weight.shape[0]

    @property
    def dtype(self):
        return self.blocks[0].weight.dtype

    def arch(self) -> dict:
        return {
            "channels": list(self.channels),
            "pools": [b.pool for b in self.blocks],
            "in_channels": self.in_channels,
            "image_size": self.image_size,
            "num_classes": self.num_classes,
            "bn_momentum": self.bn_momentum,
            "bn_eps": self.bn_eps,
        }

    def feature_shape(self, k: int) -> tuple[int, int, int]:
        _check_block(k)
        size = self.image_size
        for b in self.blocks[:k]:
            if b.pool:
                size //= 2
        return (self.channels[k - 1], size, size)

    def reset_head(self, num_classes: int, seed: int = 0) -> None:
        rng = np.random.default_rng(seed)
        width = self.blocks[-1].weight.shape[0]
        dtype = self.dtype
        self.head_weight = (rng.standard_normal((num_classes, width)) * np.sqrt(1.0 / width)).astype(dtype)
        self.head_bias = np.zeros(num_classes, dtype)

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Model":
        m = self.copy()
        for name, arr in m.state_items():
            m.set_state(name, arr.astype(dtype))
        return m

    # -- parameter access -------------------------------------------------

    def state_items(self, buffers: bool = True):
        """Yield ``(name, array)`` for every parameter (and buffer)."""
        for k, b in enumerate(self.blocks, start=1):
            for attr in Block.PARAMS + (Block.BUFFERS if buffers else ()):
                yield f"block{k}.{attr}", getattr(b, attr)
        yield "head.weight", self.head_weight
        yield "head.bias", self.head_bias

    def params(self) -> dict[str, np.ndarray]:
        return dict(self.state_items(buffers=False))

    def set_state(self, name: str, value: np.ndarray) -> None:
        owner, attr = name.split(".")
        if owner == "head":
            setattr(self, f"head_{attr}", value)
        else:
            setattr(self.blocks[int(owner[5:]) - 1], attr, value)

    def snapshot(self) -> ParamSnapshot:
        blocks = [
            np.concatenate([getattr(b, a).astype(np.float64).ravel() for a in Block.PARAMS])
            for b in self.blocks
        ]
        arch = self.arch()
        arch.pop("num_classes")
        return ParamSnapshot(arch, blocks)

    # -- forward / backward -----------------------------------------------

    def features(self, x: np.ndarray, upto: int = NUM_BLOCKS, train: bool = False) -> FeatureTrace:
        _check_block(upto)
        expected = (self.in_channels, self.image_size, self.image_size)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise T.DimensionError(f"model expects input [B,{expected}], got {x.shape}")
        feats, caches = [], []
        h = x
        for b in self.blocks[:upto]:
            pre_bn = T.conv2d(h, b.weight, padding=1)
            pre_relu, bn_cache, rm, rv = T.batchnorm2d(
                pre_bn, b.gamma, b.beta, b.running_mean, b.running_var,
                train=train, momentum=self.bn_momentum, eps=self.bn_eps,
            )
            if train:
                b.running_mean, b.running_var = rm.astype(b.running_mean.dtype), rv.astype(b.running_var.dtype)
            pre_pool = T.relu(pre_relu)
            out = T.maxpool2d(pre_pool) if b.pool else pre_pool
            caches.append(BlockCache(h, pre_bn, bn_cache, pre_relu, pre_pool))
            feats.append(out)
            h = out
        return FeatureTrace(feats, caches)

    def backward_features(
        self,
        trace: FeatureTrace,
        feature_grads: dict[int, np.ndarray],
        need_param_grads: bool = False,
    ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        """Backpropagate gradients injected at one or more block outputs.

        Only blocks up to the highest key of ``feature_grads`` are visited.
        """
        top = max(feature_grads)
        if top > len(trace.features):
            raise ValueError(f"trace only reaches block {len(trace.features)}, gradient given at {top}")
        grads: dict[str, np.ndarray] = {}
        d = None
        for k in range(top, 0, -1):
            if k in feature_grads:
                d = feature_grads[k] if d is None else d + feature_grads[k]
            b, c = self.blocks[k - 1], trace.caches[k - 1]
            if b.pool:
                d = T.maxpool2d_backward(d, c.pre_pool)
            d = T.relu_backward(d, c.pre_relu)
            bn = T.batchnorm2d_backward(d, c.bn)
            conv = T.conv2d_backward(bn.input_grad, c.x, b.weight, padding=1, need_kernel_grad=need_param_grads)
            if need_param_grads:
                grads[f"block{k}.weight"] = conv.param_grads["weight"]
                grads[f"block{k}.gamma"] = bn.param_grads["gamma"]
                grads[f"block{k}.beta"] = bn.param_grads["beta"]
            d = conv.input_grad
        return d, grads

    def forward(self, x: np.ndarray, train: bool = False) -> tuple[np.ndarray, FeatureTrace]:
        trace = self.features(x, NUM_BLOCKS, train=train)
        trace.pooled = T.global_avgpool(trace.features[-1])
        return T.linear(trace.pooled, self.head_weight, self.head_bias), trace

    def backward(
        self, trace: FeatureTrace, logits_grad: np.ndarray, need_param_grads: bool = False
    ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        lin = T.linear_backward(logits_grad, trace.pooled, self.head_weight)
        dfeat = T.global_avgpool_backward(lin.input_grad, trace.features[-1].shape)
        dx, grads = self.backward_features(trace, {NUM_BLOCKS: dfeat}, need_param_grads)
        if need_param_grads:
            grads["head.weight"] = lin.param_grads["weight"]
            grads["head.bias"] = lin.param_grads["bias"]
        return dx, grads

    # classifier protocol used by the decision-boundary attack
    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def input_grad(self, x: np.ndarray, logits_grad: np.ndarray) -> np.ndarray:
        _, trace = self.forward(x)
        return self.backward(trace, logits_grad)[0]

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = [self.logits(x[i : i + batch_size]).argmax(axis=1) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def forward_features(model: Model, x: np.ndarray, upto_block: int) -> np.ndarray:
    """Eval-mode output of block ``upto_block``."""
    _check_block(upto_block)
    return model.features(x, upto_block)[upto_block]


def forward_logits(model: Model, x: np.ndarray) -> np.ndarray:
    return model.forward(x)[0]


def logits_backward(model: Model, x: np.ndarray, logits_grad: np.ndarray, need_param_grads: bool = False):
    _, trace = model.forward(x)
    return model.backward(trace, logits_grad, need_param_grads)


def block_param_drift(before: ParamSnapshot, after: ParamSnapshot) -> np.ndarray:
    """Per-block Frobenius distance between two snapshots, scaled by the max.

    An all-zero drift vector stays all zeros.
    """
    if before.arch != after.arch or [b.shape for b in before.blocks] != [a.shape for a in after.blocks]:
        raise ArchitectureMismatch("snapshots come from different architectures")
    d = np.array([np.linalg.norm(a - b) for a, b in zip(after.blocks, before.blocks)])
    top = d.max()
    return d / top if top > 0 else d


# -- checkpoint container ----------------------------------------------------


def encode_checkpoint(model: Model) -> bytes:
    arch = json.dumps(model.arch(), sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(arch)), arch]
    items = list(model.state_items())
    parts.append(struct.pack("<I", len(items)))
    for name, arr in items:
        blob = encode_tensor(arr)
        raw = name.encode()
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<Q", len(blob)), blob]
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> Model:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a PAPF checkpoint (bad magic)")
    try:
        version, alen = struct.unpack_from("<II", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        arch = json.loads(buf[pos : pos + alen])
        pos += alen
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + nlen].decode()
            pos += nlen
            (blen,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            if pos + blen > len(buf):
                raise CheckpointError("truncated checkpoint")
            tensors[name], _ = decode_tensor(buf[pos : pos + blen])
            pos += blen
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    model = Model.init(
        arch["num_classes"], arch["channels"], arch["in_channels"], arch["image_size"], arch["pools"],
        bn_momentum=arch["bn_momentum"],
    )
    model.bn_eps = arch["bn_eps"]
    for name, arr in tensors.items():
        model.set_state(name, arr)
    return model


def save_checkpoint(path, model: Model) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(model))


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def model_hash(model: Model) -> str:
    """Short content hash of the serialized checkpoint."""
    return hashlib.sha256(encode_checkpoint(model)).hexdigest()[:16]
