"""Parametric small CNNs standing in for the WRN family.

A network is a 3x3 stem followed by ``num_blocks`` stages.  Stage ``s`` has
``base_width * width_multiplier * 2**s`` channels, opens with a stride-2
convolution (except stage 0) and ends at a feature tap.  The head is global
average pooling plus a linear layer.  There is no batch normalisation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError, ParameterError
from .tensor import Tensor


@dataclass(frozen=True)
class NetSpec:
    input_shape: tuple[int, int, int] = (32, 32, 3)  # (h, w, channels)
    num_blocks: int = 3
    base_width: int = 8
    width_multiplier: int = 1
    num_classes: int = 10
    convs_per_block: int = 2
    stem_stride: int = 1

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ParameterError(f"input_shape must be (h, w, channels), got {self.input_shape}")
        if self.num_blocks < 1:
            raise ParameterError("a network needs at least one block")
        if self.base_width < 1 or self.width_multiplier < 1 or self.convs_per_block < 1:
            raise ParameterError("widths and convs_per_block must be positive")
        if self.stem_stride not in (1, 2):
            raise ParameterError("stem_stride must be 1 or 2")
        if self.num_classes < 2:
            raise ParameterError("num_classes must be at least 2")

    def widths(self) -> list[int]:
        return [self.base_width * self.width_multiplier * 2**s for s in range(self.num_blocks)]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardRecord:
    logits: Tensor
    block_features: list[Tensor] = field(default_factory=list)


class Net:
    def __init__(self, spec: NetSpec, params: dict[str, Tensor]):
        self.spec = spec
        self.params = params

    def __repr__(self):
        return f"Net({self.spec}, params={self.num_parameters()})"

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state):
        T.assign_params(self.params, state)

    def freeze(self) -> Net:
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def forward(self, batch) -> ForwardRecord:
        """Logits and stage-end features for an ``(N, H, W, C)`` batch."""
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        if x.ndim != 4 or x.shape[1:] != self.spec.input_shape:
            raise DimensionError(f"batch shape {x.shape} does not match network input (N, *{self.spec.input_shape})")
        p = self.params
        x = T.relu(T.conv2d(x, p["stem.weight"], p["stem.bias"], stride=self.spec.stem_stride, padding=1))
        feats = []
        for s in range(self.spec.num_blocks):
            for j in range(self.spec.convs_per_block):
                stride = 2 if (s > 0 and j == 0) else 1
                pre = f"stage{s}.conv{j}"
                x = T.relu(T.conv2d(x, p[pre + ".weight"], p[pre + ".bias"], stride=stride, padding=1))
            feats.append(x)
        pooled = T.global_avg_pool(x)
        logits = T.matmul(pooled, p["fc.weight"]) + p["fc.bias"]
        return ForwardRecord(logits=logits, block_features=feats)

    __call__ = forward


def _conv_shapes(spec: NetSpec):
    widths = spec.widths()
    c_in = spec.input_shape[2]
    yield "stem", (3, 3, c_in, widths[0])
    prev = widths[0]
    for s, w in enumerate(widths):
        for j in range(spec.convs_per_block):
            yield f"stage{s}.conv{j}", (3, 3, prev, w)
            prev = w


def build(spec: NetSpec, seed: int = 0, dtype=np.float32) -> Net:
    """Seeded He-initialised network; biases start at zero."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in _conv_shapes(spec):
        fan_in = shape[0] * shape[1] * shape[2]
        params[name + ".weight"] = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), shape).astype(dtype), requires_grad=True, name=name + ".weight")
        params[name + ".bias"] = Tensor(np.zeros(shape[3], dtype=dtype), requires_grad=True, name=name + ".bias")
    last = spec.widths()[-1]
    params["fc.weight"] = Tensor(rng.normal(0.0, np.sqrt(1.0 / last), (last, spec.num_classes)).astype(dtype), requires_grad=True, name="fc.weight")
    params["fc.bias"] = Tensor(np.zeros(spec.num_classes, dtype=dtype), requires_grad=True, name="fc.bias")
    return Net(spec, params)


def predict_logits(net: Net, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Inference-only logits for a whole array, in fixed-size chunks."""
    out = []
    with T.no_grad():
        for start in range(0, len(inputs), batch_size):
            out.append(net.forward(Tensor(inputs[start : start + batch_size])).logits.data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, net.spec.num_classes))
