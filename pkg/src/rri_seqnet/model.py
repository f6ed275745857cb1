"""TCN -> MaxPool -> selective-SSM -> GAP/GMP -> FC head classifier and its checkpoint format."""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Tuple

import numpy as np

from .layers import BatchNorm1d, Conv1d, Dropout, Linear, MaxPool1d, Module, global_pools
from .ssm import MambaWrapper, SsmConfig
from .tensor import Tensor, as_tensor, no_grad, relu, softmax

CKPT_VERSION = "rri-seqnet/ckpt/1"
CLASSES = ("NSR", "AF")


@dataclass
class ModelConfig:
    input_len: int = 1800
    tcn_channels: int = 32
    tcn_kernel: int = 3
    tcn_dilations: Tuple[int, ...] = (1, 2, 4)
    tcn_dropout: float = 0.2
    pool: Tuple[int, int] = (2, 2)
    ssm: SsmConfig = field(default_factory=SsmConfig)
    n_mamba_layers: int = 1
    ffn_kernel: int = 3
    ffn_expand: int = 4
    mamba_dropout: float = 0.2
    head_dims: Tuple[int, ...] = (64, 32, 2)
    head_final_relu: bool = True
    skip_projection_always: bool = True
    parallel_scan: bool = False
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.ssm, dict):
            self.ssm = SsmConfig(**self.ssm)
        self.tcn_dilations = tuple(self.tcn_dilations)
        self.pool = tuple(self.pool)
        self.head_dims = tuple(self.head_dims)
        # the SSM operates on the TCN's channel width
        self.ssm.d_model = self.tcn_channels

    def validate(self) -> None:
        problems = []
        if self.input_len < 1:
            problems.append(f"input_len must be positive (got {self.input_len})")
        if self.pool[0] != self.pool[1]:
            problems.append(f"pool kernel and stride must match (got {self.pool})")
        elif self.input_len % self.pool[1]:
            problems.append(f"input_len {self.input_len} not divisible by pool stride {self.pool[1]}")
        if not self.head_dims or self.head_dims[0] != 2 * self.tcn_channels:
            problems.append(f"head_dims[0] must equal 2*tcn_channels={2 * self.tcn_channels} (got {self.head_dims})")
        if self.head_dims and self.head_dims[-1] != len(CLASSES):
            problems.append(f"head_dims must end in {len(CLASSES)} classes (got {self.head_dims})")
        if self.tcn_channels < 1 or self.tcn_kernel < 1 or not self.tcn_dilations:
            problems.append("tcn_channels, tcn_kernel and tcn_dilations must be positive/non-empty")
        if self.n_mamba_layers < 1:
            problems.append(f"n_mamba_layers must be >= 1 (got {self.n_mamba_layers})")
        if self.dtype not in ("float32", "float64"):
            problems.append(f"dtype must be float32 or float64 (got {self.dtype})")
        try:
            self.ssm.validate()
        except ValueError as e:
            problems.append(str(e))
        if problems:
            raise ValueError("invalid ModelConfig: " + "; ".join(problems))

    def to_dict(self) -> Dict[str, Any]:
        d = dataclasses.asdict(self)
        for k in ("tcn_dilations", "pool", "head_dims"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ModelConfig":
        d = dict(d)
        d["ssm"] = SsmConfig(**d.get("ssm", {}))
        return cls(**d)


def reduced_config(**overrides) -> ModelConfig:
    """Narrow variant used for desk-scale training runs."""
    base = dict(tcn_channels=8, head_dims=(16, 8, 2), ffn_expand=2,
                ssm=SsmConfig(d_state=4, d_conv=4, expand=2))
    base.update(overrides)
    return ModelConfig(**base)


class TcnBlock(Module):
    """Conv-BN-ReLU-Dropout-Conv-BN plus a (1x1 conv, BN) skip, then ReLU."""

    def __init__(self, c_in: int, c_out: int, kernel: int, dilation: int, dropout: float, project_skip: bool,
                 rng, dtype, layer_id: int, seed: int):
        super().__init__()
        self.conv1 = Conv1d(c_in, c_out, kernel, dilation, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm1d(c_out, dtype=dtype)
        self.drop = Dropout(dropout, layer_id=layer_id, seed=seed)
        self.conv2 = Conv1d(c_out, c_out, kernel, dilation, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm1d(c_out, dtype=dtype)
        if project_skip or c_in != c_out:
            self.skip_conv = Conv1d(c_in, c_out, 1, rng=rng, dtype=dtype)
            self.skip_bn = BatchNorm1d(c_out, dtype=dtype)
        else:
            self.skip_conv = self.skip_bn = None

    def forward(self, x: Tensor) -> Tensor:
        main = self.bn2(self.conv2(self.drop(relu(self.bn1(self.conv1(x))))))
        skip = x if self.skip_conv is None else self.skip_bn(self.skip_conv(x))
        return relu(main + skip)


class FcBlock(Module):
    def __init__(self, d_in: int, d_out: int, final_relu: bool, rng, dtype):
        super().__init__()
        self.fc = Linear(d_in, d_out, rng=rng, dtype=dtype)
        self.bn = BatchNorm1d(d_out, dtype=dtype)
        self.final_relu = final_relu

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.fc(x))
        return relu(y) if self.final_relu else y


class TcnMambaModel(Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(config.seed)
        c = config.tcn_channels
        layer_id = 0
        self.tcn: List[TcnBlock] = []
        c_in = 1
        for d in config.tcn_dilations:
            self.tcn.append(TcnBlock(c_in, c, config.tcn_kernel, d, config.tcn_dropout, config.skip_projection_always,
                                     rng, dtype, layer_id, config.seed))
            layer_id += 1
            c_in = c
        self.pool = MaxPool1d(*config.pool)
        self.mamba: List[MambaWrapper] = []
        for _ in range(config.n_mamba_layers):
            self.mamba.append(MambaWrapper(config.ssm, config.ffn_kernel, config.ffn_expand, config.mamba_dropout,
                                           rng=rng, dtype=dtype, layer_id=layer_id, seed=config.seed,
                                           parallel_scan=config.parallel_scan))
            layer_id += 1
        dims = config.head_dims
        self.head: List[FcBlock] = [
            FcBlock(dims[i], dims[i + 1], config.head_final_relu or i < len(dims) - 2, rng, dtype)
            for i in range(len(dims) - 1)
        ]

    def dropouts(self) -> List[Dropout]:
        return [b.drop for b in self.tcn] + [m.drop for m in self.mamba]

    def set_rng_context(self, epoch: int, batch: int) -> None:
        for d in self.dropouts():
            d.set_context(epoch, batch)

    def _as_batch(self, x) -> Tensor:
        x = as_tensor(x, dtype=np.dtype(self.config.dtype))
        if x.ndim == 1:
            x = x.reshape(1, 1, x.shape[0])
        elif x.ndim == 2:
            x = x.reshape(x.shape[0], 1, x.shape[1])
        if x.ndim != 3 or x.shape[1] != 1:
            raise ValueError(f"expected input of shape [N, 1, L], got {x.shape}")
        if x.shape[2] != self.config.input_len:
            raise ValueError(f"input length {x.shape[2]} does not match configured input_len {self.config.input_len}")
        return x

    def features(self, x) -> Tensor:
        """Feature map after the SSM stage: [N, C, L / pool]."""
        h = self._as_batch(x)
        for block in self.tcn:
            h = block(h)
        h = self.pool(h)
        for layer in self.mamba:
            h = layer(h)
        return h

    def logits(self, x) -> Tensor:
        h = global_pools(self.features(x))
        for block in self.head:
            h = block(h)
        return h

    def forward(self, x) -> Tensor:
        """Class probabilities [N, 2]; column 1 is the AF probability."""
        return softmax(self.logits(x), axis=-1)

    def trace_shapes(self, x) -> List[Tuple[str, Tuple[int, ...]]]:
        """Per-stage output shapes for one input (batch axis dropped); runs in eval mode."""
        trace = []
        was = self.training
        self.eval()
        with no_grad():
            h = self._as_batch(x)
            trace.append(("input", h.shape[1:]))
            for i, block in enumerate(self.tcn):
                h = block(h)
                trace.append((f"tcn{i}", h.shape[1:]))
            h = self.pool(h)
            trace.append(("pool", h.shape[1:]))
            for i, layer in enumerate(self.mamba):
                h = layer(h)
                trace.append((f"mamba{i}", h.shape[1:]))
            h = global_pools(h)
            trace.append(("gap_gmp", h.shape[1:]))
            for i, block in enumerate(self.head):
                h = block(h)
                trace.append((f"fc{i}", h.shape[1:]))
        self.train(was)
        return trace

    def predict_proba(self, x) -> np.ndarray:
        """AF probability per segment, eval mode, no tape."""
        was = self.training
        self.eval()
        try:
            with no_grad():
                return self.forward(x).data[:, 1].copy()
        finally:
            self.train(was)

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def first_affected_feature(t: int, config: ModelConfig) -> int:
    """Earliest index of the post-SSM feature map that an input change at time ``t`` can reach.

    Every stage before global pooling is causal and max-pooling maps time
    ``t`` to ``t // stride``, so earlier feature positions are untouched.
    """
    return t // config.pool[1]


def build_model(config: ModelConfig, seed: int | None = None) -> TcnMambaModel:
    if seed is not None:
        config = dataclasses.replace(config, seed=seed, ssm=dataclasses.replace(config.ssm))
    return TcnMambaModel(config)


# -- checkpoint ---------------------------------------------------------------
# layout: magic line, u64 header length, JSON header, raw little-endian payload

class CheckpointError(ValueError):
    pass


def _state_items(model: TcnMambaModel) -> List[Tuple[str, np.ndarray]]:
    items = [(n, p.data) for n, p in model.named_parameters()]
    items += model.named_buffers()
    return items


def save_checkpoint(model: TcnMambaModel, path, metadata: Dict[str, Any] | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, metadata))


def checkpoint_bytes(model: TcnMambaModel, metadata: Dict[str, Any] | None = None) -> bytes:
    tensors, chunks, offset = [], [], 0
    for name, arr in _state_items(model):
        a = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = a.tobytes()
        tensors.append({"name": name, "shape": list(a.shape), "dtype": a.dtype.name, "offset": offset,
                        "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {"version": CKPT_VERSION, "config": model.config.to_dict(), "tensors": tensors,
              "metadata": metadata or {}}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return CKPT_VERSION.encode() + b"\n" + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(chunks)


def load_checkpoint(path) -> Tuple[TcnMambaModel, Dict[str, Any]]:
    """Return the model (eval mode) and the stored training metadata."""
    return checkpoint_from_bytes(Path(path).read_bytes())


def checkpoint_from_bytes(blob: bytes) -> Tuple[TcnMambaModel, Dict[str, Any]]:
    magic = CKPT_VERSION.encode() + b"\n"
    if not blob.startswith(magic):
        first = blob.split(b"\n", 1)[0][:64]
        raise CheckpointError(f"not a {CKPT_VERSION} checkpoint (found {first!r})")
    pos = len(magic)
    if len(blob) < pos + 8:
        raise CheckpointError(f"{CKPT_VERSION}: truncated before header length")
    (hlen,) = struct.unpack("<Q", blob[pos:pos + 8])
    pos += 8
    if len(blob) < pos + hlen:
        raise CheckpointError(f"{CKPT_VERSION}: truncated header")
    try:
        header = json.loads(blob[pos:pos + hlen])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{CKPT_VERSION}: malformed header ({e})") from None
    if header.get("version") != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {header.get('version')!r} != {CKPT_VERSION}")
    payload = blob[pos + hlen:]
    expected = sum(t["nbytes"] for t in header["tensors"])
    if len(payload) != expected:
        raise CheckpointError(f"{CKPT_VERSION}: payload has {len(payload)} bytes, header declares {expected}")
    model = TcnMambaModel(ModelConfig.from_dict(header["config"]))
    arrays = {}
    for t in header["tensors"]:
        raw = payload[t["offset"]:t["offset"] + t["nbytes"]]
        arrays[t["name"]] = np.frombuffer(raw, dtype=np.dtype(t["dtype"]).newbyteorder("<")).reshape(t["shape"])
    _assign_state(model, arrays)
    model.eval()
    return model, header.get("metadata", {})


def _assign_state(model: TcnMambaModel, arrays: Dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    missing = (set(params) | set(buffers)) - set(arrays)
    extra = set(arrays) - set(params) - set(buffers)
    if missing or extra:
        raise CheckpointError(f"{CKPT_VERSION}: state mismatch (missing {sorted(missing)}, unexpected {sorted(extra)})")
    for name, p in params.items():
        if arrays[name].shape != p.shape:
            raise CheckpointError(f"{CKPT_VERSION}: {name} has shape {arrays[name].shape}, model expects {p.shape}")
        p.data = arrays[name].astype(p.dtype, copy=True)
    for name, buf in buffers.items():
        owner = model
        *path, attr = name.split(".")
        for part in path:
            owner = owner[int(part)] if isinstance(owner, list) else getattr(owner, part)
        setattr(owner, attr, arrays[name].astype(buf.dtype, copy=True))


def copy_state(model: TcnMambaModel) -> Dict[str, np.ndarray]:
    return {n: a.copy() for n, a in _state_items(model)}


def load_state(model: TcnMambaModel, state: Dict[str, np.ndarray]) -> None:
    _assign_state(model, state)
