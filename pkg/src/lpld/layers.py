"""Feedforward network assembly: layer specs, parameters, forward pass, checkpoints.

Supported layers are conv / dense / bn / relu / pool / flatten, which is
enough for a small BN-bearing convolutional classifier. The graph is strictly
feedforward.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from lpld import tensor as T
from lpld.bn import GLOBAL, BNLayerState, bn_apply, update_running
from lpld.errors import LabelStoreError, ShapeError
from lpld.util import derive_rng

CKPT_MAGIC = b"LPLDCKPT"
CKPT_VERSION = 1


@dataclass
class LayerSpec:
    type: str
    out_channels: int = 0
    kernel: int = 3
    stride: int = 1
    pad: int = 1
    out_features: int = 0
    kind: str = "avg"
    size: int = 2

    def to_dict(self) -> dict:
        base = {"type": self.type}
        if self.type == "conv":
            base.update(out_channels=self.out_channels, kernel=self.kernel,
                        stride=self.stride, pad=self.pad)
        elif self.type == "dense":
            base.update(out_features=self.out_features)
        elif self.type == "pool":
            base.update(kind=self.kind, size=self.size)
        return base


@dataclass
class NetworkSpec:
    """Ordered layer descriptors plus input geometry and class count."""

    input_shape: tuple[int, int, int]
    num_classes: int
    layers: list[LayerSpec]

    def to_json(self) -> str:
        return json.dumps({
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [l.to_dict() for l in self.layers],
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        obj = json.loads(text)
        layers = [LayerSpec(**d) for d in obj["layers"]]
        return cls(tuple(obj["input_shape"]), int(obj["num_classes"]), layers)

    def shapes(self) -> list[tuple]:
        """Per-layer output shapes (excluding the batch axis); validates compatibility."""
        shape = tuple(self.input_shape)
        out = []
        saw_bn = False
        for i, layer in enumerate(self.layers):
            name = f"layer{i}:{layer.type}"
            if layer.type == "conv":
                if len(shape) != 3:
                    raise ShapeError(f"{name}: conv needs [C,H,W] input, got {shape}")
                c, h, w = shape
                oh = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
                ow = (w + 2 * layer.pad - layer.kernel) // layer.stride + 1
                if oh < 1 or ow < 1:
                    raise ShapeError(f"{name}: kernel {layer.kernel} too large for {h}x{w}")
                shape = (layer.out_channels, oh, ow)
            elif layer.type == "bn":
                if len(shape) not in (1, 3):
                    raise ShapeError(f"{name}: bn needs [C,H,W] or [F] input, got {shape}")
                saw_bn = True
            elif layer.type == "relu":
                pass
            elif layer.type == "pool":
                if len(shape) != 3:
                    raise ShapeError(f"{name}: pool needs [C,H,W] input, got {shape}")
                c, h, w = shape
                if h % layer.size or w % layer.size:
                    raise ShapeError(f"{name}: pool size {layer.size} does not divide {h}x{w}")
                shape = (c, h // layer.size, w // layer.size)
            elif layer.type == "flatten":
                shape = (int(np.prod(shape)),)
            elif layer.type == "dense":
                if len(shape) != 1:
                    raise ShapeError(f"{name}: dense needs flat input, got {shape}")
                shape = (layer.out_features,)
            else:
                raise ShapeError(f"{name}: unknown layer type")
            out.append(shape)
        if not saw_bn:
            raise ShapeError("network must contain at least one bn layer")
        if out[-1] != (self.num_classes,):
            raise ShapeError(f"final layer produces {out[-1]}, expected ({self.num_classes},)")
        return out


def small_cnn_spec(input_shape=(3, 32, 32), num_classes: int = 10,
                   widths=(8, 16)) -> NetworkSpec:
    """Default two-stage conv/bn/relu/pool classifier used by the toy pipeline."""
    layers = []
    for w in widths:
        layers += [
            LayerSpec("conv", out_channels=w, kernel=3, stride=1, pad=1),
            LayerSpec("bn"),
            LayerSpec("relu"),
            LayerSpec("pool", kind="avg", size=2),
        ]
    layers += [LayerSpec("flatten"), LayerSpec("dense", out_features=num_classes)]
    return NetworkSpec(tuple(input_shape), num_classes, layers)


class ParameterSet:
    """Named parameter tensors with their gradients."""

    def __init__(self):
        self.tensors: dict[str, T.Tensor] = {}

    def add(self, name: str, tensor: T.Tensor):
        self.tensors[name] = tensor

    def __getitem__(self, name) -> T.Tensor:
        return self.tensors[name]

    def __contains__(self, name) -> bool:
        return name in self.tensors

    def items(self):
        return self.tensors.items()

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def check_grad_shapes(self):
        for name, t in self.tensors.items():
            if t.grad is not None and t.grad.shape != t.data.shape:
                raise ShapeError(f"{name}: grad shape {t.grad.shape} != param {t.data.shape}")


@dataclass
class BNActivation:
    """Batch moments observed at one BN layer during a forward pass."""

    layer_id: str
    mean: T.Tensor
    var: T.Tensor


class Network:
    """NetworkSpec bound to parameters and BN states."""

    def __init__(self, spec: NetworkSpec, params: ParameterSet,
                 bn_states: dict[str, BNLayerState], dtype=np.float32):
        self.spec = spec
        self.params = params
        self.bn_states = bn_states
        self.dtype = dtype
        self.norm_mean = np.zeros(spec.input_shape[0], dtype=dtype)
        self.norm_std = np.ones(spec.input_shape[0], dtype=dtype)
        spec.shapes()

    @classmethod
    def create(cls, spec: NetworkSpec, seed: int = 0, dtype=np.float32,
               bn_momentum: float = 0.1) -> "Network":
        """Kaiming-uniform fan-in init for conv/dense; BN gamma=1, beta=0."""
        rng = derive_rng(seed, "init")
        shapes = spec.shapes()
        params = ParameterSet()
        bn_states: dict[str, BNLayerState] = {}
        in_shape = tuple(spec.input_shape)
        for i, layer in enumerate(spec.layers):
            lid = f"layer{i}"
            if layer.type == "conv":
                cin = in_shape[0]
                fan_in = cin * layer.kernel * layer.kernel
                bound = np.sqrt(6.0 / fan_in)
                w = rng.uniform(-bound, bound, size=(layer.out_channels, cin, layer.kernel, layer.kernel))
                b = rng.uniform(-1.0, 1.0, size=layer.out_channels) / np.sqrt(fan_in)
                params.add(f"{lid}.weight", T.Tensor(w, requires_grad=True, dtype=dtype, name=f"{lid}.weight"))
                params.add(f"{lid}.bias", T.Tensor(b, requires_grad=True, dtype=dtype, name=f"{lid}.bias"))
            elif layer.type == "dense":
                fan_in = in_shape[0]
                bound = np.sqrt(6.0 / fan_in)
                w = rng.uniform(-bound, bound, size=(fan_in, layer.out_features))
                b = rng.uniform(-1.0, 1.0, size=layer.out_features) / np.sqrt(fan_in)
                params.add(f"{lid}.weight", T.Tensor(w, requires_grad=True, dtype=dtype, name=f"{lid}.weight"))
                params.add(f"{lid}.bias", T.Tensor(b, requires_grad=True, dtype=dtype, name=f"{lid}.bias"))
            elif layer.type == "bn":
                channels = in_shape[0]
                state = BNLayerState.create(channels, spec.num_classes, eps_mom=bn_momentum, dtype=dtype)
                bn_states[lid] = state
                # parameter tensors share the state buffers so optimizer steps land in both
                params.add(f"{lid}.gamma", T.Tensor(state.gamma, requires_grad=True, name=f"{lid}.gamma"))
                params.add(f"{lid}.beta", T.Tensor(state.beta, requires_grad=True, name=f"{lid}.beta"))
            in_shape = shapes[i]
        return cls(spec, params, bn_states, dtype=dtype)

    def bn_layer_ids(self) -> list[str]:
        return [f"layer{i}" for i, l in enumerate(self.spec.layers) if l.type == "bn"]

    def trainable(self) -> dict[str, T.Tensor]:
        return dict(self.params.items())

    def set_requires_grad(self, flag: bool):
        for _, t in self.params.items():
            t.requires_grad = flag

    def normalize(self, images: np.ndarray) -> np.ndarray:
        """Map raw [0,1] images into the network's input space."""
        mean = self.norm_mean.reshape(1, -1, 1, 1)
        std = self.norm_std.reshape(1, -1, 1, 1)
        return ((images - mean) / std).astype(self.dtype)

    def denormalize(self, batch: np.ndarray) -> np.ndarray:
        mean = self.norm_mean.reshape(1, -1, 1, 1)
        std = self.norm_std.reshape(1, -1, 1, 1)
        return batch * std + mean

    def forward(self, batch, mode: str = "eval", stats: str = "global",
                class_id=None, collect_bn: bool = False, collect_inputs: bool = False,
                update_stats: bool = None, stop_at: str = None):
        """Run the network.

        mode: "train" normalizes BN by batch moments (and by default updates
        the global running stats); "eval" uses running stats selected by
        ``stats`` ("global", or "classwise" with ``class_id``).
        collect_bn: also return differentiable batch mean/var at each BN layer.
        collect_inputs: also return the raw BN input arrays (no grad).
        stop_at: return activations just before the named layer id.
        Returns (logits, bn_activations, bn_inputs).
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        if stats not in ("global", "classwise"):
            raise ValueError(f"unknown stats mode {stats!r}")
        if stats == "classwise" and class_id is None:
            raise ValueError("classwise stats need a class_id")
        if update_stats is None:
            update_stats = mode == "train"
        x = batch if isinstance(batch, T.Tensor) else T.Tensor(np.asarray(batch, dtype=self.dtype))
        expected = (x.data.shape[0],) + tuple(self.spec.input_shape)
        if x.data.shape != expected:
            raise ShapeError(f"input: batch shape {x.data.shape}, network expects {expected}")
        bn_acts: list[BNActivation] = []
        bn_inputs: dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.spec.layers):
            lid = f"layer{i}"
            if stop_at is not None and lid == stop_at:
                return x, bn_acts, bn_inputs
            try:
                if layer.type == "conv":
                    x = T.conv2d(x, self.params[f"{lid}.weight"], self.params[f"{lid}.bias"],
                                 stride=layer.stride, pad=layer.pad)
                elif layer.type == "dense":
                    x = T.matmul(x, self.params[f"{lid}.weight"]) + self.params[f"{lid}.bias"]
                elif layer.type == "relu":
                    x = T.relu(x)
                elif layer.type == "pool":
                    x = T.avg_pool2d(x, layer.size) if layer.kind == "avg" else T.max_pool2d(x, layer.size)
                elif layer.type == "flatten":
                    x = T.reshape(x, (x.data.shape[0], -1))
                elif layer.type == "bn":
                    state = self.bn_states[lid]
                    gamma = self.params[f"{lid}.gamma"]
                    beta = self.params[f"{lid}.beta"]
                    if collect_inputs:
                        bn_inputs[lid] = x.data.copy()
                    if mode == "train":
                        x, mu, var = bn_apply(state, x, mode="train", gamma=gamma, beta=beta)
                        if update_stats:
                            update_running(state, GLOBAL, mu, var)
                        if collect_bn:
                            bn_acts.append(BNActivation(lid, T.Tensor(mu), T.Tensor(var)))
                    else:
                        cid = class_id if stats == "classwise" else GLOBAL
                        if collect_bn:
                            bn_acts.append(BNActivation(lid, T.channel_mean(x), T.channel_var(x)))
                        x = bn_apply(state, x, mode="eval", class_id=cid, gamma=gamma, beta=beta)
            except ShapeError as e:
                raise ShapeError(f"{lid} ({layer.type}): {e}") from e
            if stop_at is not None and stop_at == f"after:{lid}":
                return x, bn_acts, bn_inputs
        return x, bn_acts, bn_inputs

    def logits(self, batch, **kw) -> np.ndarray:
        """Convenience eval forward without graph recording."""
        with T.no_grad():
            out, _, _ = self.forward(batch, mode="eval", **kw)
        return out.data

    def penultimate_features(self, batch) -> np.ndarray:
        """Activations feeding the final dense layer, eval-global mode."""
        last_dense = max(i for i, l in enumerate(self.spec.layers) if l.type == "dense")
        with T.no_grad():
            x, _, _ = self.forward(batch, mode="eval", stop_at=f"layer{last_dense}")
        return x.data

    # ---- checkpoint -------------------------------------------------------
    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {name: t.data for name, t in self.params.items()}
        for lid, st in self.bn_states.items():
            out[f"{lid}.running_mean"] = st.global_rm
            out[f"{lid}.running_var"] = st.global_rv
        out["meta.norm_mean"] = self.norm_mean
        out["meta.norm_std"] = self.norm_std
        return out

    def save(self, path, extra: dict[str, np.ndarray] | None = None) -> bytes:
        tensors = self.state_tensors()
        spec_bytes = self.spec.to_json().encode("utf-8")
        tensors["meta.spec_json"] = np.frombuffer(spec_bytes, dtype=np.uint8).astype(np.float32)
        if extra:
            tensors.update(extra)
        blob = serialize_checkpoint(tensors)
        with open(path, "wb") as f:
            f.write(blob)
        return blob

    @classmethod
    def load(cls, path, bn_momentum: float = 0.1) -> tuple["Network", dict[str, np.ndarray]]:
        tensors = load_checkpoint(path)
        if "meta.spec_json" not in tensors:
            raise LabelStoreError(f"{path}: checkpoint has no embedded network spec")
        spec_json = bytes(tensors["meta.spec_json"].astype(np.uint8)).decode("utf-8")
        spec = NetworkSpec.from_json(spec_json)
        net = cls.create(spec, seed=0, dtype=np.float32, bn_momentum=bn_momentum)
        for name, t in net.params.items():
            if name not in tensors:
                raise LabelStoreError(f"{path}: missing tensor {name}")
            if tensors[name].shape != t.data.shape:
                raise LabelStoreError(f"{path}: {name} has shape {tensors[name].shape}, expected {t.data.shape}")
            t.data[...] = tensors[name]
        for lid, st in net.bn_states.items():
            st.global_rm[...] = tensors[f"{lid}.running_mean"]
            st.global_rv[...] = tensors[f"{lid}.running_var"]
        net.norm_mean = tensors["meta.norm_mean"].astype(net.dtype)
        net.norm_std = tensors["meta.norm_std"].astype(net.dtype)
        extras = {k: v for k, v in tensors.items()
                  if k not in net.params.tensors and not k.endswith((".running_mean", ".running_var"))
                  and k not in ("meta.spec_json", "meta.norm_mean", "meta.norm_std")}
        return net, extras


def serialize_checkpoint(tensors: dict[str, np.ndarray]) -> bytes:
    """Pack named tensors: magic, version u16, then per tensor
    (name_len u16, name, rank u8, dims u32[], real32 data), little-endian."""
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<H", CKPT_VERSION))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 10 or data[:8] != CKPT_MAGIC:
        raise LabelStoreError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<H", data, 8)
    if version != CKPT_VERSION:
        raise LabelStoreError(f"{path}: unsupported checkpoint version {version}")
    offset = 10
    out: dict[str, np.ndarray] = {}
    while offset < len(data):
        if offset + 2 > len(data):
            raise LabelStoreError(f"{path}: truncated tensor header")
        (nlen,) = struct.unpack_from("<H", data, offset)
        offset += 2
        if offset + nlen + 1 > len(data):
            raise LabelStoreError(f"{path}: truncated tensor name")
        name = data[offset:offset + nlen].decode("utf-8", errors="replace")
        offset += nlen
        rank = data[offset]
        offset += 1
        if offset + 4 * rank > len(data):
            raise LabelStoreError(f"{path}: truncated dims for {name}")
        dims = struct.unpack_from(f"<{rank}I", data, offset)
        offset += 4 * rank
        count = 1
        for d in dims:
            count *= d
        nbytes = 4 * count
        if offset + nbytes > len(data):
            raise LabelStoreError(f"{path}: truncated data for {name}")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(dims)
        out[name] = arr.copy()
        offset += nbytes
    return out
