"""Convolutional laser-power estimator.

Three blocks of (conv 3x3 -> batch norm -> ReLU) x2 followed by adaptive
average pooling to 100x100, 10x10 and 3x3, then a 1x1 convolution to a single
channel. The 3x3 output map is read as the F x P power matrix (rows =
subframes, columns = primaries). Inputs smaller than a stage size skip that
reduction rather than upsampling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..optim import AdamState
from . import layers

STAGES = (100, 10, 3)


def _conv_names(block: int, convs: int):
    return [f"block{block}.conv{i}" for i in range(convs)]


@dataclass
class EstimatorModel:
    params: dict
    buffers: dict
    in_channels: int = 3
    channels: int = 24
    convs_per_block: int = 2
    stages: tuple = STAGES
    training: bool = False
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, seed=0, in_channels=3, channels=24, convs_per_block=2,
               stages=STAGES, dtype=np.float32) -> "EstimatorModel":
        """Fresh model with He-uniform conv weights, zero biases, unit BN scale."""
        rng = np.random.default_rng(seed)
        params, buffers = {}, {}
        cin = in_channels
        for b in range(len(stages)):
            for name in _conv_names(b, convs_per_block):
                bound = np.sqrt(6.0 / (cin * 9))
                params[f"{name}.w"] = rng.uniform(-bound, bound, (channels, cin, 3, 3)).astype(dtype)
                params[f"{name}.b"] = np.zeros(channels, dtype=dtype)
                params[f"{name}.bn.gamma"] = np.ones(channels, dtype=dtype)
                params[f"{name}.bn.beta"] = np.zeros(channels, dtype=dtype)
                buffers[f"{name}.bn.mean"] = np.zeros(channels, dtype=dtype)
                buffers[f"{name}.bn.var"] = np.ones(channels, dtype=dtype)
                cin = channels
        bound = np.sqrt(6.0 / channels)
        params["head.w"] = rng.uniform(-bound, bound, (1, channels, 1, 1)).astype(dtype)
        params["head.b"] = np.zeros(1, dtype=dtype)
        return cls(params, buffers, in_channels, channels, convs_per_block, tuple(stages))

    @property
    def dtype(self):
        return self.params["head.w"].dtype

    def copy(self, dtype=None) -> "EstimatorModel":
        dtype = dtype or self.dtype
        return EstimatorModel(
            {k: v.astype(dtype, copy=True) for k, v in self.params.items()},
            {k: v.astype(dtype, copy=True) for k, v in self.buffers.items()},
            self.in_channels, self.channels, self.convs_per_block, self.stages,
            self.training, dict(self.meta),
        )

    def train(self, mode=True) -> "EstimatorModel":
        self.training = mode
        return self

    def eval(self) -> "EstimatorModel":
        return self.train(False)

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def _forward(model: EstimatorModel, x, train):
    caches = []
    stats = {}
    h = np.asarray(x, dtype=model.dtype)
    layers._check4(h)
    if h.shape[1] != model.in_channels:
        raise layers.ShapeError(f"expected {model.in_channels} input channels, got {h.shape[1]}")
    for b, size in enumerate(model.stages):
        for name in _conv_names(b, model.convs_per_block):
            p = model.params
            h, c_conv = layers.conv2d_forward(h, p[f"{name}.w"], p[f"{name}.b"], padding=1)
            h, c_bn, new = layers.batchnorm_forward(
                h, p[f"{name}.bn.gamma"], p[f"{name}.bn.beta"],
                model.buffers[f"{name}.bn.mean"], model.buffers[f"{name}.bn.var"], train,
            )
            stats[f"{name}.bn.mean"], stats[f"{name}.bn.var"] = new
            h, c_relu = layers.relu_forward(h)
            caches.append(("conv", name, c_conv, c_bn, c_relu))
        th, tw = min(size, h.shape[2]), min(size, h.shape[3])
        h, c_pool = layers.downsample_forward(h, th, tw)
        caches.append(("pool", None, c_pool))
    h, c_head = layers.conv2d_forward(h, model.params["head.w"], model.params["head.b"], padding=0)
    caches.append(("head", None, c_head))
    return h[:, 0], caches, stats


def _backward(model: EstimatorModel, dout, caches):
    grads = {}
    d = np.asarray(dout, dtype=model.dtype)[:, None]
    for entry in reversed(caches):
        kind = entry[0]
        if kind == "head":
            d, grads["head.w"], grads["head.b"] = layers.conv2d_backward(d, entry[2])
        elif kind == "pool":
            d = layers.downsample_backward(d, entry[2])
        else:
            _, name, c_conv, c_bn, c_relu = entry
            d = layers.relu_backward(d, c_relu)
            d, grads[f"{name}.bn.gamma"], grads[f"{name}.bn.beta"] = layers.batchnorm_backward(d, c_bn)
            d, grads[f"{name}.w"], grads[f"{name}.b"] = layers.conv2d_backward(d, c_conv)
    return {k: v.astype(model.dtype, copy=False) for k, v in grads.items()}


def forward(model: EstimatorModel, images) -> np.ndarray:
    """Raw (unclamped) power predictions, shape ``(N, 3, 3)``.

    In training mode the batch-norm running statistics are updated in place.
    Eval mode runs each item on its own so results are bitwise independent of
    batch composition (BLAS blocking otherwise perturbs the last bits).
    """
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if not model.training:
        return np.stack([_forward(model, img[None], False)[0][0] for img in images])
    out, _, stats = _forward(model, images, True)
    model.buffers.update(stats)
    return out


def forward_backward(model: EstimatorModel, images, upstream):
    """Forward pass plus gradients of ``sum(upstream * output)`` w.r.t. every parameter.

    ``upstream`` may also be a callable ``outputs -> (value, d_outputs)``.
    Returns ``(outputs, value, grads)``; running statistics are updated when
    the model is in training mode.
    """
    out, caches, stats = _forward(model, images, model.training)
    if callable(upstream):
        value, dout = upstream(out)
    else:
        dout = np.asarray(upstream)
        value = float(np.sum(dout * out, dtype=np.float64))
    grads = _backward(model, dout, caches)
    if model.training:
        model.buffers.update(stats)
    return out, value, grads


def clamp_powers(raw) -> np.ndarray:
    return np.clip(raw, 0.0, 1.0)


# -- checkpoints -------------------------------------------------------------

def _write_tensor(path: Path, array):
    path.write_bytes(np.ascontiguousarray(array, dtype="<f4").tobytes())


def _read_tensor(path: Path, shape):
    raw = path.read_bytes()
    expected = 4 * int(np.prod(shape))
    if len(raw) != expected:
        raise ValueError(f"{path}: shape mismatch, expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def save_checkpoint(model: EstimatorModel, path, *, epoch=0, seed=0, hyperparameters=None,
                    adam: AdamState | None = None, extra=None) -> Path:
    """Write ``manifest.json`` plus one raw f32le blob per tensor into ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = []

    def add(group, name, array):
        fname = f"{group}.{name}.f32"
        _write_tensor(path / fname, array)
        tensors.append({"group": group, "name": name, "shape": list(array.shape), "file": fname})

    for k in sorted(model.params):
        add("param", k, model.params[k])
    for k in sorted(model.buffers):
        add("buffer", k, model.buffers[k])
    if adam is not None:
        for k in sorted(adam.m):
            add("adam_m", k, adam.m[k])
            add("adam_v", k, adam.v[k])
    layer_list = []
    for b, size in enumerate(model.stages):
        for name in _conv_names(b, model.convs_per_block):
            layer_list += [f"{name}:conv3x3", f"{name}:batchnorm", f"{name}:relu"]
        layer_list.append(f"block{b}:adaptive_avg_pool:{size}x{size}")
    layer_list.append("head:conv1x1")
    manifest = {
        "format": "holopower-estimator/1",
        "architecture": {
            "in_channels": model.in_channels,
            "channels": model.channels,
            "convs_per_block": model.convs_per_block,
            "stages": list(model.stages),
            "layers": layer_list,
        },
        "hyperparameters": hyperparameters or {},
        "seed": int(seed),
        "epoch": int(epoch),
        "adam_step": adam.step if adam is not None else None,
        "tensors": tensors,
        **(extra or {}),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path):
    """Return ``(model, manifest, adam_state_or_None)``."""
    path = Path(path)
    manifest_path = path / "manifest.json" if path.is_dir() else path
    path = manifest_path.parent
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{manifest_path}: invalid JSON ({exc})") from exc
    arch = manifest["architecture"]
    groups = {"param": {}, "buffer": {}, "adam_m": {}, "adam_v": {}}
    for t in manifest["tensors"]:
        groups[t["group"]][t["name"]] = _read_tensor(path / t["file"], tuple(t["shape"]))
    model = EstimatorModel(
        groups["param"], groups["buffer"], arch["in_channels"], arch["channels"],
        arch["convs_per_block"], tuple(arch["stages"]),
    )
    model.meta = {"epoch": manifest["epoch"], "seed": manifest["seed"]}
    adam = None
    if groups["adam_m"]:
        adam = AdamState(groups["adam_m"], groups["adam_v"], manifest.get("adam_step") or 0)
    return model, manifest, adam
