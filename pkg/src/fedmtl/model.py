"""DeepConvLSTM-style network with per-task heads and layer-group tagging.

Layout: shared 1-D conv trunk (ReLU) -> LSTM stack -> last hidden state ->
one dense head per task.  LSTM layers tagged task-specific or personalized are
instantiated once per task, so every task owns a private recurrent branch on
top of the shared trunk.
"""

from __future__ import annotations

import enum
import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from fedmtl import nn
from fedmtl.nn import LayerSpec, ShapeError

ACTIVITY = "activity"
POSITION = "position"


class LayerGroup(enum.IntEnum):
    PRETRAINED = 0
    COMMON = 1
    TASK_SPECIFIC = 2
    PERSONALIZED = 3

    @classmethod
    def parse(cls, text: str) -> "LayerGroup":
        try:
            return cls[text.upper()]
        except KeyError:
            raise ValueError(f"unknown layer group {text!r}") from None


BRANCH_GROUPS = (LayerGroup.TASK_SPECIFIC, LayerGroup.PERSONALIZED)


def default_partition(n_conv: int = 4, n_lstm: int = 2) -> dict[str, str]:
    half = n_conv // 2
    part = {f"conv{i + 1}": ("pretrained" if i < half else "common") for i in range(n_conv)}
    part.update({f"lstm{i + 1}": "task_specific" for i in range(n_lstm)})
    part["head"] = "personalized"
    return part


@dataclass
class ModelConfig:
    heads: dict[str, int]
    conv_layers: list[LayerSpec] = field(
        default_factory=lambda: [LayerSpec("conv1d", out_channels=16, kernel_size=5) for _ in range(4)]
    )
    lstm_layers: list[LayerSpec] = field(
        default_factory=lambda: [LayerSpec("lstm", hidden_size=32) for _ in range(2)]
    )
    group_partition: dict[str, str] | None = None
    window_length: int = 24
    input_channels: int = 3

    def __post_init__(self):
        if self.group_partition is None:
            self.group_partition = default_partition(len(self.conv_layers), len(self.lstm_layers))
        self.validate()

    @property
    def tasks(self) -> list[str]:
        return list(self.heads)

    def layer_names(self) -> list[str]:
        return ([f"conv{i + 1}" for i in range(len(self.conv_layers))]
                + [f"lstm{i + 1}" for i in range(len(self.lstm_layers))] + ["head"])

    def group_of(self, layer: str) -> LayerGroup:
        return LayerGroup.parse(self.group_partition[layer])

    def validate(self) -> None:
        if not self.heads:
            raise ValueError("at least one task head is required")
        for task, n in self.heads.items():
            if n < 2:
                raise ValueError(f"task {task!r} needs >= 2 classes, got {n}")
        if not self.lstm_layers:
            raise ValueError("at least one LSTM layer is required")
        for spec in self.conv_layers:
            if spec.kind != "conv1d":
                raise ValueError("conv_layers must be conv1d specs")
        for spec in self.lstm_layers:
            if spec.kind != "lstm":
                raise ValueError("lstm_layers must be lstm specs")
        names = self.layer_names()
        missing = [n for n in names if n not in self.group_partition]
        extra = [n for n in self.group_partition if n not in names]
        if missing or extra:
            raise ValueError(f"group partition must cover every layer exactly once "
                             f"(missing {missing}, unknown {extra})")
        groups = [self.group_of(n) for n in names]
        for name, g in zip(names, groups):
            if name.startswith("conv") and g in BRANCH_GROUPS:
                raise ValueError(f"{name}: conv trunk layers must be pretrained or common")
        if self.group_of("head") not in BRANCH_GROUPS:
            raise ValueError("heads must be task_specific or personalized")
        in_branch = False
        for name, g in zip(names, groups):
            if g in BRANCH_GROUPS:
                in_branch = True
            elif in_branch:
                raise ValueError(f"{name}: shared layer after a per-task branch layer")
        span = sum(s.kernel_size - 1 for s in self.conv_layers)
        if self.window_length <= span:
            raise ValueError(f"window_length {self.window_length} too short for conv span {span}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_layers"] = [{"out_channels": s.out_channels, "kernel_size": s.kernel_size}
                            for s in self.conv_layers]
        d["lstm_layers"] = [{"hidden_size": s.hidden_size} for s in self.lstm_layers]
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class TensorInfo:
    layer: str
    group: LayerGroup
    task: str | None  # owning task for per-task branch tensors
    fan_in: int

    @property
    def tag(self) -> str:
        if self.group is LayerGroup.TASK_SPECIFIC:
            return f"task_specific:{self.task}"
        return self.group.name.lower()


def tensor_layout(config: ModelConfig) -> dict[str, tuple[tuple[int, ...], TensorInfo]]:
    """Ordered ``name -> (shape, info)`` for every parameter tensor."""
    layout: dict[str, tuple[tuple[int, ...], TensorInfo]] = {}
    c = config.input_channels
    for i, spec in enumerate(config.conv_layers):
        name = f"conv{i + 1}"
        info = TensorInfo(name, config.group_of(name), None, c * spec.kernel_size)
        layout[f"{name}.W"] = ((spec.out_channels, c, spec.kernel_size), info)
        layout[f"{name}.b"] = ((spec.out_channels,), info)
        c = spec.out_channels
    shared_in = c
    branch_start = None
    for i, spec in enumerate(config.lstm_layers):
        name = f"lstm{i + 1}"
        g = config.group_of(name)
        if g in BRANCH_GROUPS:
            branch_start = i
            break
        _add_lstm(layout, name, name, g, None, c, spec.hidden_size)
        c = spec.hidden_size
        shared_in = c
    for task in config.tasks:
        c = shared_in
        if branch_start is not None:
            for i in range(branch_start, len(config.lstm_layers)):
                spec = config.lstm_layers[i]
                name = f"lstm{i + 1}"
                _add_lstm(layout, f"{task}.{name}", name, config.group_of(name), task, c, spec.hidden_size)
                c = spec.hidden_size
        info = TensorInfo("head", config.group_of("head"), task, c)
        layout[f"{task}.head.W"] = ((config.heads[task], c), info)
        layout[f"{task}.head.b"] = ((config.heads[task],), info)
    return layout


def _add_lstm(layout, prefix, layer, group, task, d, h):
    layout[f"{prefix}.W"] = ((4 * h, d), TensorInfo(layer, group, task, d))
    layout[f"{prefix}.U"] = ((4 * h, h), TensorInfo(layer, group, task, h))
    layout[f"{prefix}.b"] = ((4 * h,), TensorInfo(layer, group, task, h))


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray]

    def __post_init__(self):
        self.layout = tensor_layout(self.config)
        if list(self.params) != list(self.layout):
            raise ShapeError("parameter names do not match the model layout")
        for name, (shape, _) in self.layout.items():
            if self.params[name].shape != shape:
                raise ShapeError(f"{name}: shape {self.params[name].shape} != {shape}")

    def info(self, name: str) -> TensorInfo:
        return self.layout[name][1]

    def with_params(self, params: dict[str, np.ndarray]) -> "Model":
        return Model(self.config, {k: params[k] for k in self.layout})


def _tensor_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def init_bound(info: TensorInfo) -> float:
    # ReLU conv stack: He-uniform keeps activations from dying out over 4 layers
    if info.layer.startswith("conv"):
        return float(np.sqrt(6.0 / info.fan_in))
    return float(1.0 / np.sqrt(info.fan_in))


def build_model(config: ModelConfig, seed: int) -> Model:
    """Uniform(-s, s) init, one RNG stream per tensor (see :func:`init_bound`)."""
    config.validate()
    params = {}
    for name, (shape, info) in tensor_layout(config).items():
        s = init_bound(info)
        params[name] = _tensor_rng(seed, name).uniform(-s, s, size=shape)
    return Model(config, params)


def trainable_mask(model: Model | ModelConfig, group: LayerGroup, task: str | None = None) -> dict[str, bool]:
    """Tensors below ``group`` are frozen; so are other tasks' task-specific tensors."""
    layout = model.layout if isinstance(model, Model) else tensor_layout(model)
    mask = {}
    for name, (_, info) in layout.items():
        ok = info.group >= group
        if (ok and group is LayerGroup.TASK_SPECIFIC and task is not None
                and info.group is LayerGroup.TASK_SPECIFIC and info.task != task):
            ok = False
        mask[name] = ok
    return mask


# --- forward / backward -------------------------------------------------------

def _trunk_lstm_names(config: ModelConfig, task: str) -> list[tuple[str, str]]:
    """(param prefix, layer name) for the LSTM path feeding ``task``'s head."""
    out = []
    for i in range(len(config.lstm_layers)):
        name = f"lstm{i + 1}"
        prefix = f"{task}.{name}" if config.group_of(name) in BRANCH_GROUPS else name
        out.append((prefix, name))
    return out


def _check_windows(config: ModelConfig, windows: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(windows, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (config.window_length, config.input_channels):
        raise ShapeError(f"window shape {x.shape[1:] if x.ndim == 3 else x.shape} != "
                         f"({config.window_length}, {config.input_channels})")
    return x, squeeze


def _run(config, params, x, keep):
    """Forward pass; with ``keep`` stores what backward needs."""
    cache = {"conv": [], "lstm": {}, "feat": {}}
    h = x
    for i in range(len(config.conv_layers)):
        pre = nn.conv1d_forward(h, params[f"conv{i + 1}.W"], params[f"conv{i + 1}.b"])
        if keep:
            cache["conv"].append((h, pre))
        h = nn.relu(pre)
    trunk = h
    shared_out: dict[str, np.ndarray] = {}
    logits = {}
    for task in config.tasks:
        h = trunk
        for prefix, _ in _trunk_lstm_names(config, task):
            if prefix in shared_out:
                h = shared_out[prefix]
                continue
            p = params
            if keep:
                h, lc = nn.lstm_forward(h, p[f"{prefix}.W"], p[f"{prefix}.U"], p[f"{prefix}.b"], True)
                cache["lstm"][prefix] = lc
            else:
                h = nn.lstm_forward(h, p[f"{prefix}.W"], p[f"{prefix}.U"], p[f"{prefix}.b"])
            if not prefix.startswith(f"{task}."):
                shared_out[prefix] = h
        feat = h[:, -1, :]
        cache["feat"][task] = (feat, h.shape)
        logits[task] = nn.dense_forward(feat, params[f"{task}.head.W"], params[f"{task}.head.b"])
    return logits, cache


def forward(model: Model, window: np.ndarray) -> dict[str, np.ndarray]:
    """Logits per task for one window ``(L, C)`` or a batch ``(B, L, C)``."""
    x, squeeze = _check_windows(model.config, window)
    logits, _ = _run(model.config, model.params, x, keep=False)
    if squeeze:
        return {t: v[0] for t, v in logits.items()}
    return logits


def loss_and_grads(config: ModelConfig, params: dict[str, np.ndarray], windows: np.ndarray,
                   labels: dict[str, np.ndarray], tasks=None):
    """Mean over the batch of the per-sample summed cross-entropy.

    ``labels[task]`` holds class indices with -1 for samples not labelled for
    that task; such (sample, task) pairs contribute no loss and no gradient.
    ``tasks`` restricts which heads contribute at all.
    """
    x, _ = _check_windows(config, windows)
    bsz = x.shape[0]
    active = config.tasks if tasks is None else [t for t in config.tasks if t in tasks]
    logits, cache = _run(config, params, x, keep=True)
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    total = 0.0
    d_lstm_out: dict[str, np.ndarray] = {}
    for task in config.tasks:
        y = np.asarray(labels.get(task, np.full(bsz, -1)))
        sel = y >= 0 if task in active else np.zeros(bsz, dtype=bool)
        dlogits = np.zeros_like(logits[task])
        if sel.any():
            loss, g = nn.softmax_cross_entropy(logits[task][sel], y[sel])
            total += float(loss.sum())
            dlogits[sel] = g
        dlogits /= bsz
        feat, hshape = cache["feat"][task]
        dfeat, gW, gb = nn.dense_backward(feat, params[f"{task}.head.W"], dlogits)
        grads[f"{task}.head.W"] += gW
        grads[f"{task}.head.b"] += gb
        dh = np.zeros(hshape)
        dh[:, -1, :] = dfeat
        chain = _trunk_lstm_names(config, task)
        # walk this task's branch down to the first shared LSTM output
        for prefix, _ in reversed(chain):
            if not prefix.startswith(f"{task}."):
                d_lstm_out[prefix] = d_lstm_out.get(prefix, 0) + dh
                dh = None
                break
            dh = _lstm_back(prefix, dh, cache, grads)
        if dh is not None:
            d_lstm_out["__trunk__"] = d_lstm_out.get("__trunk__", 0) + dh
    shared = [p for p, _ in _trunk_lstm_names(config, config.tasks[0])
              if not p.startswith(f"{config.tasks[0]}.")]
    dh = None
    for prefix in reversed(shared):
        if prefix in d_lstm_out:
            dh = d_lstm_out[prefix] if dh is None else dh + d_lstm_out[prefix]
        dh = _lstm_back(prefix, dh, cache, grads)
    if dh is None:
        dh = d_lstm_out.get("__trunk__", 0)
    elif "__trunk__" in d_lstm_out:
        dh = dh + d_lstm_out["__trunk__"]
    for i in reversed(range(len(config.conv_layers))):
        h_in, pre = cache["conv"][i]
        dpre = dh * (pre > 0)
        dx, gW, gb = nn.conv1d_backward(h_in, params[f"conv{i + 1}.W"], dpre)
        grads[f"conv{i + 1}.W"] += gW
        grads[f"conv{i + 1}.b"] += gb
        dh = dx
    return total / bsz, grads


def _lstm_back(prefix, dh, cache, grads):
    dx, gW, gU, gb = nn.lstm_backward(dh, cache["lstm"][prefix])
    grads[f"{prefix}.W"] += gW
    grads[f"{prefix}.U"] += gU
    grads[f"{prefix}.b"] += gb
    return dx


def predict(model: Model, window: np.ndarray, task: str):
    """Argmax class; ties go to the lowest index (``np.argmax`` semantics)."""
    if task not in model.config.heads:
        raise KeyError(f"task {task!r} not configured")
    return np.argmax(forward(model, window)[task], axis=-1)
