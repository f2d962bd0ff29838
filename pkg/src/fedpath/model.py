"""Dual-stream encoder with feature concatenation and a softmax grading head.

The coarse stream reads the 320x320 view, the fine stream the 224x224 view.
Their pooled feature vectors are concatenated coarse-first and passed through
``dense -> ReLU -> dropout -> dense`` to three logits.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .nn import ParamVector

COARSE_SIZE = 320
FINE_SIZE = 224
N_CLASSES = 3


@dataclass(frozen=True)
class BackboneSpec:
    widths: tuple[int, ...]
    kernel: int = 3
    stride: int = 2


BACKBONES: dict[str, BackboneSpec] = {
    "tiny": BackboneSpec(widths=(8, 16, 32)),
}


@dataclass
class ModelConfig:
    backbone: str = "tiny"
    head_hidden: int = 32
    dropout: float = 0.3
    n_classes: int = N_CLASSES

    def validate(self) -> None:
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; known: {sorted(BACKBONES)}")
        if self.head_hidden < 1:
            raise ValueError("head_hidden must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


def _stream_layout(prefix: str, spec: BackboneSpec, in_ch: int = 3):
    layout, c = [], in_ch
    for i, f in enumerate(spec.widths):
        layout.append((f"{prefix}.conv{i}.w", (spec.kernel, spec.kernel, c, f)))
        layout.append((f"{prefix}.conv{i}.b", (f,)))
        c = f
    return layout


class DualStreamModel:
    """Holds the layer structure; parameters live in one :class:`ParamVector`."""

    def __init__(self, config: ModelConfig, params: ParamVector | None = None):
        config.validate()
        self.config = config
        self.spec = BACKBONES[config.backbone]
        self.feature_dim = self.spec.widths[-1]
        layout = (_stream_layout("coarse", self.spec)
                  + _stream_layout("fine", self.spec)
                  + [("head.fc0.w", (2 * self.feature_dim, config.head_hidden)),
                     ("head.fc0.b", (config.head_hidden,)),
                     ("head.fc1.w", (config.head_hidden, config.n_classes)),
                     ("head.fc1.b", (config.n_classes,))])
        if params is None:
            params = ParamVector(layout)
        elif params.layout != layout:
            raise nn.ShapeError("parameter layout does not match model definition")
        self.params = params

    @property
    def head_input_dim(self) -> int:
        return 2 * self.feature_dim

    def n_layers(self) -> int:
        return len(self.spec.widths)

    # -- forward / backward --------------------------------------------------

    def _encode(self, prefix: str, x: np.ndarray):
        acts = []
        h = x
        for i in range(self.n_layers()):
            inp = h
            pre, cols = nn.conv2d_forward(inp, self.params[f"{prefix}.conv{i}.w"],
                                          self.params[f"{prefix}.conv{i}.b"],
                                          self.spec.stride, return_cols=True)
            h = nn.relu(pre)
            acts.append((inp, cols, pre))
        return nn.global_avg_pool(h), acts, h.shape

    def _encode_backward(self, prefix: str, acts, pooled_shape, grad_feat, grads: ParamVector):
        g = nn.global_avg_pool_backward(pooled_shape, grad_feat)
        for i in reversed(range(self.n_layers())):
            inp, cols, pre = acts[i]
            g = nn.relu_backward(pre, g)
            gx, gk, gb = nn.conv2d_backward(inp, self.params[f"{prefix}.conv{i}.w"], g,
                                            self.spec.stride, cols=cols, need_grad_x=i > 0)
            grads[f"{prefix}.conv{i}.w"][...] = gk
            grads[f"{prefix}.conv{i}.b"][...] = gb
            g = gx

    def forward(self, x224: np.ndarray, x320: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None):
        """Return ``(logits, cache)``. ``rng`` is only used for dropout in train mode."""
        if x320.ndim != 4 or x320.shape[1:] != (COARSE_SIZE, COARSE_SIZE, 3):
            raise nn.ShapeError(f"coarse input must be [B,{COARSE_SIZE},{COARSE_SIZE},3], got {x320.shape}")
        if x224.ndim != 4 or x224.shape[1:] != (FINE_SIZE, FINE_SIZE, 3):
            raise nn.ShapeError(f"fine input must be [B,{FINE_SIZE},{FINE_SIZE},3], got {x224.shape}")
        if x224.shape[0] != x320.shape[0]:
            raise nn.ShapeError("streams received different batch sizes")
        f_c, acts_c, shape_c = self._encode("coarse", x320)
        f_f, acts_f, shape_f = self._encode("fine", x224)
        f = np.concatenate([f_c, f_f], axis=1)
        p = self.params
        h_pre = nn.dense_forward(f, p["head.fc0.w"], p["head.fc0.b"])
        h = nn.relu(h_pre)
        h_drop, mask = nn.dropout(h, self.config.dropout, rng, train=train)
        logits = nn.dense_forward(h_drop, p["head.fc1.w"], p["head.fc1.b"])
        cache = {
            "crc": zlib.crc32(p.data),
            "coarse": (acts_c, shape_c), "fine": (acts_f, shape_f),
            "f": f, "h_pre": h_pre, "h_drop": h_drop, "mask": mask, "train": train,
        }
        return logits, cache

    def backward(self, cache: dict, grad_logits: np.ndarray) -> ParamVector:
        if cache.get("crc") != zlib.crc32(self.params.data):
            raise RuntimeError("stale forward cache: parameters changed since forward()")
        p = self.params
        grads = p.zeros_like()
        g_hdrop, gW1, gb1 = nn.dense_backward(cache["h_drop"], p["head.fc1.w"], grad_logits)
        grads["head.fc1.w"][...] = gW1
        grads["head.fc1.b"][...] = gb1
        p_drop = self.config.dropout if cache["train"] else 0.0
        g_h = nn.dropout_backward(g_hdrop, cache["mask"], p_drop)
        g_hpre = nn.relu_backward(cache["h_pre"], g_h)
        g_f, gW0, gb0 = nn.dense_backward(cache["f"], p["head.fc0.w"], g_hpre)
        grads["head.fc0.w"][...] = gW0
        grads["head.fc0.b"][...] = gb0
        d = self.feature_dim
        g_fc, g_ff = g_f[:, :d], g_f[:, d:]
        self._encode_backward("coarse", *cache["coarse"], g_fc, grads)
        self._encode_backward("fine", *cache["fine"], g_ff, grads)
        return grads

    def predict_proba(self, x224: np.ndarray, x320: np.ndarray) -> np.ndarray:
        logits, _ = self.forward(x224, x320, train=False)
        return nn.softmax(logits.astype(np.float64))


def analytic_param_count(config: ModelConfig) -> int:
    spec = BACKBONES[config.backbone]
    total, c = 0, 3
    for f in spec.widths:
        total += spec.kernel * spec.kernel * c * f + f
        c = f
    total *= 2
    total += 2 * c * config.head_hidden + config.head_hidden
    total += config.head_hidden * config.n_classes + config.n_classes
    return total


OUTPUT_INIT_SCALE = 0.1


def build_model(config: ModelConfig | None = None, seed: int = 0) -> DualStreamModel:
    """Build with He-uniform weights (fan-in scaling) and zero biases.

    The output layer is scaled down by ``OUTPUT_INIT_SCALE``: pooled ReLU
    features share a large common component, so a full-scale random output
    layer adds an input-independent logit offset of several nats that the
    first rounds would have to unlearn.
    """
    config = config or ModelConfig()
    model = DualStreamModel(config)
    rng = np.random.default_rng(seed)
    for name, arr in model.params.items():
        if name.endswith(".b"):
            continue
        fan_in = int(np.prod(arr.shape[:-1]))
        bound = np.sqrt(6.0 / fan_in) * (OUTPUT_INIT_SCALE if name == "head.fc1.w" else 1.0)
        arr[...] = rng.uniform(-bound, bound, size=arr.shape).astype(np.float32)
    return model


def model_config_dict(config: ModelConfig) -> dict:
    return asdict(config)
