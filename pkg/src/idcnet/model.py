"""The four-branch Inception block with batch norm and the full network.

Block layout: four parallel branches, each ending in F channels, whose
outputs are concatenated into 4F channels.

  a: 1x1 conv (F)
  b: 1x1 conv (alpha) -> 3x3 conv (F)
  c: 1x1 conv (beta)  -> 5x5 conv (F)
  d: 3x3 maxpool, stride 1, same-padded -> 1x1 conv (F)

Every convolution is followed by batch normalization and then ReLU, and
same-padding keeps spatial size unchanged; only the dedicated 2x2/stride-2
pool stages shrink it. The default network stacks blocks of per-branch
widths 64,64 | pool | 128,128 | pool | 256,256 | pool | 512,512 and ends in
two dense+BN+ReLU+dropout(0.4) layers and a 2-way output.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .layers import BatchNormState, LayerMode, batch_norm, dropout, relu, softmax
from .tensor import ShapeError, Tensor, concat_channels, conv2d, dense, maxpool2d, reshape

MAXPOOL = "maxpool"


@dataclass(frozen=True)
class InceptionBlockSpec:
    """Per-block widths: F per branch, 1x1 reduction widths alpha and beta."""

    features: int
    alpha: int
    beta: int

    def __post_init__(self):
        if self.features <= 0 or self.alpha <= 0 or self.beta <= 0:
            raise ValueError(f"block widths must be positive, got {self}")

    @property
    def out_channels(self) -> int:
        return 4 * self.features

    @classmethod
    def balanced(cls, features: int) -> "InceptionBlockSpec":
        # Reduction widths default to half the branch width.
        r = max(features // 2, 1)
        return cls(features=features, alpha=r, beta=r)


@dataclass
class ModelConfig:
    """Ordered stage list plus classifier-head knobs."""

    blocks: tuple = ()
    dense_width: int = 512
    dropout_rate: float = 0.4
    num_classes: int = 2
    in_channels: int = 3
    input_size: int = 50

    DEFAULT_WIDTHS = (64, 64, MAXPOOL, 128, 128, MAXPOOL, 256, 256, MAXPOOL, 512, 512)

    @classmethod
    def default(cls, dense_width: int = 512) -> "ModelConfig":
        blocks = tuple(
            w if w == MAXPOOL else InceptionBlockSpec.balanced(w) for w in cls.DEFAULT_WIDTHS
        )
        return cls(blocks=blocks, dense_width=dense_width)

    def validate(self) -> None:
        if not self.blocks:
            raise ValueError("model config: block list is empty")
        for b in self.blocks:
            if b != MAXPOOL and not isinstance(b, InceptionBlockSpec):
                raise ValueError(f"model config: bad stage entry {b!r}")
        if self.dense_width <= 0:
            raise ValueError(f"model config: dense_width must be positive, got {self.dense_width}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"model config: dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.num_classes < 2:
            raise ValueError(f"model config: num_classes must be >= 2, got {self.num_classes}")
        if self.in_channels < 1 or self.input_size < 5:
            raise ValueError("model config: input must be at least 1 channel and 5x5 pixels")
        if min(self.spatial_trace()) < 1:
            raise ValueError("model config: pooling shrinks the input to nothing")

    def spatial_trace(self) -> list[int]:
        """Spatial size after the input and after each stage."""
        s = self.input_size
        trace = [s]
        for b in self.blocks:
            if b == MAXPOOL:
                s = (s - 2) // 2 + 1
            trace.append(s)
        return trace

    def flatten_width(self) -> int:
        channels = self.in_channels
        for b in self.blocks:
            if b != MAXPOOL:
                channels = b.out_channels
        side = self.spatial_trace()[-1]
        return channels * side * side

    def to_json_dict(self) -> dict:
        return {
            "blocks": [
                b if b == MAXPOOL else
                {"features": b.features, "alpha": b.alpha, "beta": b.beta}
                for b in self.blocks
            ],
            "dense_width": self.dense_width,
            "dropout_rate": self.dropout_rate,
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
            "input_size": self.input_size,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ModelConfig":
        blocks = tuple(
            b if b == MAXPOOL else InceptionBlockSpec(**b) for b in d["blocks"]
        )
        return cls(
            blocks=blocks,
            dense_width=int(d["dense_width"]),
            dropout_rate=float(d["dropout_rate"]),
            num_classes=int(d["num_classes"]),
            in_channels=int(d["in_channels"]),
            input_size=int(d["input_size"]),
        )


def _uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), dtype=dtype, requires_grad=True)


class ConvBNUnit:
    """conv -> batch norm -> ReLU, with same-padding."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.kernel = kernel
        self.padding = kernel // 2
        fan_in = in_channels * kernel * kernel
        self.w = _uniform_init(rng, (out_channels, in_channels, kernel, kernel), fan_in, dtype)
        self.b = Tensor(np.zeros(out_channels), dtype=dtype, requires_grad=True)
        self.bn = BatchNormState.create(out_channels, dtype=dtype)

    def forward(self, x: Tensor, mode: LayerMode) -> Tensor:
        return relu(batch_norm(conv2d(x, self.w, self.b, stride=1, padding=self.padding),
                               self.bn, mode))

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.conv.w", self.w
        yield f"{prefix}.conv.b", self.b
        yield f"{prefix}.bn.gamma", self.bn.gamma
        yield f"{prefix}.bn.beta", self.bn.beta_shift

    def named_buffers(self, prefix: str) -> Iterator[tuple[str, np.ndarray]]:
        yield f"{prefix}.bn.running_mean", self.bn.running_mean
        yield f"{prefix}.bn.running_var", self.bn.running_var


class InceptionBlock:
    def __init__(self, in_channels: int, spec: InceptionBlockSpec,
                 rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        f = spec.features
        self.branch_a = ConvBNUnit(in_channels, f, 1, rng, dtype)
        self.branch_b_reduce = ConvBNUnit(in_channels, spec.alpha, 1, rng, dtype)
        self.branch_b = ConvBNUnit(spec.alpha, f, 3, rng, dtype)
        self.branch_c_reduce = ConvBNUnit(in_channels, spec.beta, 1, rng, dtype)
        self.branch_c = ConvBNUnit(spec.beta, f, 5, rng, dtype)
        self.branch_d_proj = ConvBNUnit(in_channels, f, 1, rng, dtype)

    @property
    def out_channels(self) -> int:
        return self.spec.out_channels

    def forward(self, x: Tensor, mode: LayerMode) -> Tensor:
        if x.shape[2] < 5 or x.shape[3] < 5:
            raise ShapeError(f"inception block needs spatial size >= 5, got {x.shape}")
        a = self.branch_a.forward(x, mode)
        b = self.branch_b.forward(self.branch_b_reduce.forward(x, mode), mode)
        c = self.branch_c.forward(self.branch_c_reduce.forward(x, mode), mode)
        d = self.branch_d_proj.forward(maxpool2d(x, 3, 1, padding=1), mode)
        return concat_channels([a, b, c, d])

    _UNITS = ("branch_a", "branch_b_reduce", "branch_b", "branch_c_reduce",
              "branch_c", "branch_d_proj")

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for unit in self._UNITS:
            yield from getattr(self, unit).named_params(f"{prefix}.{unit}")

    def named_buffers(self, prefix: str) -> Iterator[tuple[str, np.ndarray]]:
        for unit in self._UNITS:
            yield from getattr(self, unit).named_buffers(f"{prefix}.{unit}")


class PoolStage:
    """2x2 max pooling with stride 2 (floor sizing)."""

    def forward(self, x: Tensor, mode: LayerMode) -> Tensor:
        return maxpool2d(x, 2, 2)


class DenseBNUnit:
    """dense -> batch norm -> ReLU."""

    def __init__(self, in_width: int, out_width: int, rng: np.random.Generator, dtype=np.float32):
        self.w = _uniform_init(rng, (in_width, out_width), in_width, dtype)
        self.b = Tensor(np.zeros(out_width), dtype=dtype, requires_grad=True)
        self.bn = BatchNormState.create(out_width, dtype=dtype)

    def forward(self, x: Tensor, mode: LayerMode) -> Tensor:
        return relu(batch_norm(dense(x, self.w, self.b), self.bn, mode))

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b
        yield f"{prefix}.bn.gamma", self.bn.gamma
        yield f"{prefix}.bn.beta", self.bn.beta_shift

    def named_buffers(self, prefix: str) -> Iterator[tuple[str, np.ndarray]]:
        yield f"{prefix}.bn.running_mean", self.bn.running_mean
        yield f"{prefix}.bn.running_var", self.bn.running_var


class ClassifierHead:
    def __init__(self, in_width: int, width: int, num_classes: int, dropout_rate: float,
                 rng: np.random.Generator, dtype=np.float32):
        self.dropout_rate = dropout_rate
        self.fc1 = DenseBNUnit(in_width, width, rng, dtype)
        self.fc2 = DenseBNUnit(width, width, rng, dtype)
        self.out_w = _uniform_init(rng, (width, num_classes), width, dtype)
        self.out_b = Tensor(np.zeros(num_classes), dtype=dtype, requires_grad=True)

    def forward(self, x: Tensor, mode: LayerMode, rng: np.random.Generator | None) -> Tensor:
        h = dropout(self.fc1.forward(x, mode), self.dropout_rate, mode, rng)
        h = dropout(self.fc2.forward(h, mode), self.dropout_rate, mode, rng)
        return dense(h, self.out_w, self.out_b)

    def named_params(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.fc1.named_params("head.fc1")
        yield from self.fc2.named_params("head.fc2")
        yield "head.out.w", self.out_w
        yield "head.out.b", self.out_b

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        yield from self.fc1.named_buffers("head.fc1")
        yield from self.fc2.named_buffers("head.fc2")


class Model:
    """Built network: stage list, classifier head, and a parameter registry."""

    def __init__(self, config: ModelConfig, seed: int, dtype=np.float32):
        config.validate()
        self.config = config
        self.seed = seed
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.stages: list = []
        channels = config.in_channels
        for b in config.blocks:
            if b == MAXPOOL:
                self.stages.append(PoolStage())
            else:
                self.stages.append(InceptionBlock(channels, b, rng, dtype))
                channels = b.out_channels
        self.head = ClassifierHead(config.flatten_width(), config.dense_width,
                                   config.num_classes, config.dropout_rate, rng, dtype)

    def forward(self, x: Tensor, mode: LayerMode = LayerMode.INFERENCE,
                rng: np.random.Generator | None = None) -> Tensor:
        expected = (self.config.in_channels, self.config.input_size, self.config.input_size)
        if x.data.ndim != 4 or x.shape[1:] != expected:
            raise ShapeError(f"model input must be (N, {expected[0]}, {expected[1]}, "
                             f"{expected[2]}), got {x.shape}")
        h = x
        for stage in self.stages:
            h = stage.forward(h, mode)
        flat = reshape(h, (h.shape[0], -1))
        return self.head.forward(flat, mode, rng)

    def predict_proba(self, batch) -> np.ndarray:
        """Class probabilities for a batch, inference mode; rows sum to 1."""
        x = batch if isinstance(batch, Tensor) else Tensor(batch, dtype=self.dtype)
        logits = self.forward(x, LayerMode.INFERENCE)
        return softmax(logits.data)

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, stage in enumerate(self.stages):
            if isinstance(stage, InceptionBlock):
                out.update(stage.named_params(f"stage{i}"))
        out.update(self.head.named_params())
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, stage in enumerate(self.stages):
            if isinstance(stage, InceptionBlock):
                out.update(stage.named_buffers(f"stage{i}"))
        out.update(self.head.named_buffers())
        return out

    def param_count(self) -> int:
        return sum(t.size for t in self.named_params().values())

    def state_snapshot(self) -> dict[str, np.ndarray]:
        """Copies of all parameters and running statistics, by name."""
        state = {name: t.data.copy() for name, t in self.named_params().items()}
        state.update({name: a.copy() for name, a in self.named_buffers().items()})
        return state

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        """Write a snapshot back into the live tensors, in place."""
        own = dict(self.named_params())
        buffers = self.named_buffers()
        for name, arr in state.items():
            if name in own:
                target = own[name].data
            elif name in buffers:
                target = buffers[name]
            else:
                raise KeyError(f"unknown entry {name!r} for this architecture")
            if target.shape != arr.shape:
                raise ShapeError(f"entry {name!r}: stored shape {arr.shape} != model "
                                 f"shape {target.shape}")
            target[:] = arr


def build_model(config: ModelConfig, seed: int, dtype=np.float32) -> Model:
    """Deterministically initialized network; same seed, same bits."""
    return Model(config, seed, dtype=dtype)
