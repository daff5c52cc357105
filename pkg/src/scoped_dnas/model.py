"""Runtime networks instantiated from an :class:`ArchDescription`.

A search-unit block holds six independent bottleneck paths. The network's
forward pass takes a per-block routing decision: a single candidate id for
weight training, or a pair of candidates with mixing weights for
architecture updates.
"""

from __future__ import annotations

from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .searchspace import ArchDescription, BlockSpec
from .tensor import Tensor, get_default_dtype
from .tensor import functional as F


class BatchNorm:
    def __init__(self, channels: int, dtype):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x: Tensor, training: bool, update_stats: bool = True) -> Tensor:
        return F.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, training, update_stats=update_stats
        )

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]

    def buffers(self) -> list[np.ndarray]:
        return [self.running_mean, self.running_var]


class ConvBN:
    """Bias-free convolution followed by batch norm."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int, rng: np.random.Generator, dtype):
        fan_in = in_ch * kernel * kernel
        w = rng.standard_normal((out_ch, in_ch, kernel, kernel)) * np.sqrt(2.0 / fan_in)
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.stride = stride
        self.padding = kernel // 2
        self.bn = BatchNorm(out_ch, dtype)

    def __call__(self, x: Tensor, training: bool, update_stats: bool = True) -> Tensor:
        y = F.conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        return self.bn(y, training, update_stats)

    def parameters(self) -> list[Tensor]:
        return [self.weight, *self.bn.parameters()]

    def buffers(self) -> list[np.ndarray]:
        return self.bn.buffers()


class BottleneckPath:
    """1x1 reduce -> kxk (strided) -> 1x1 expand, plus shortcut, with one
    activation kind used after every conv and after the residual add."""

    def __init__(self, spec: BlockSpec, kernel: int, act: str, rng: np.random.Generator, dtype):
        self.kernel = kernel
        self.act = act
        self.reduce = ConvBN(spec.in_channels, spec.mid_channels, 1, 1, rng, dtype)
        self.spatial = ConvBN(spec.mid_channels, spec.mid_channels, kernel, spec.stride, rng, dtype)
        self.expand = ConvBN(spec.mid_channels, spec.out_channels, 1, 1, rng, dtype)
        self.shortcut = (
            ConvBN(spec.in_channels, spec.out_channels, 1, spec.stride, rng, dtype)
            if spec.has_projection_shortcut
            else None
        )

    def _layers(self) -> list[ConvBN]:
        layers = [self.reduce, self.spatial, self.expand]
        if self.shortcut is not None:
            layers.append(self.shortcut)
        return layers

    def __call__(self, x: Tensor, training: bool, update_stats: bool = True) -> Tensor:
        a = self.act
        y = F.activation(a, self.reduce(x, training, update_stats))
        y = F.activation(a, self.spatial(y, training, update_stats))
        y = self.expand(y, training, update_stats)
        skip = x if self.shortcut is None else self.shortcut(x, training, update_stats)
        return F.activation(a, y + skip)

    def parameters(self) -> list[Tensor]:
        return [p for layer in self._layers() for p in layer.parameters()]

    def buffers(self) -> list[np.ndarray]:
        return [b for layer in self._layers() for b in layer.buffers()]


class SearchBlock:
    def __init__(self, spec: BlockSpec, rng: np.random.Generator, dtype):
        self.spec = spec
        self.paths = [BottleneckPath(spec, c.kernel, c.activation, rng, dtype) for c in spec.candidates]

    def parameters(self) -> list[Tensor]:
        return [p for path in self.paths for p in path.parameters()]

    def buffers(self) -> list[np.ndarray]:
        return [b for path in self.paths for b in path.buffers()]


# A route for one search block: a candidate id, or (ids, mixing weights).
Route = Union[int, tuple[Sequence[int], Sequence[Tensor]]]


class Network:
    """Concrete network or supernet built from a description.

    ``sabotage`` maps search-block positions (0-based among search blocks) to
    a candidate id whose activations are replaced by zeros; it exists to plant
    a provably useless candidate in tests.
    """

    def __init__(
        self,
        desc: ArchDescription,
        rng: np.random.Generator,
        dtype=None,
        sabotage: Optional[Mapping[int, int]] = None,
    ):
        dtype = np.dtype(dtype or get_default_dtype())
        self.desc = desc
        self.dtype = dtype
        stem_k = 7 if desc.stem.kind == "standard" else 3
        stem_stride = 2 if desc.stem.kind == "standard" else 1
        self.stem = ConvBN(3, desc.stem.channels, stem_k, stem_stride, rng, dtype)
        self.blocks: list[Union[BottleneckPath, SearchBlock]] = []
        for spec in desc.blocks:
            if spec.is_search:
                self.blocks.append(SearchBlock(spec, rng, dtype))
            else:
                self.blocks.append(BottleneckPath(spec, spec.kernel, spec.activation, rng, dtype))
        feat = desc.feature_dim
        bound = 1.0 / np.sqrt(feat)
        self.fc_weight = Tensor(rng.uniform(-bound, bound, (feat, desc.num_classes)).astype(dtype), requires_grad=True)
        self.fc_bias = Tensor(rng.uniform(-bound, bound, desc.num_classes).astype(dtype), requires_grad=True)
        self.search_blocks: list[SearchBlock] = [b for b in self.blocks if isinstance(b, SearchBlock)]
        for pos, cid in (sabotage or {}).items():
            self.search_blocks[pos].paths[cid].act = "zero"

    # parameter views -----------------------------------------------------------

    def shared_parameters(self) -> list[Tensor]:
        """Parameters outside search blocks."""
        params = self.stem.parameters()
        for b in self.blocks:
            if isinstance(b, BottleneckPath):
                params += b.parameters()
        return params + [self.fc_weight, self.fc_bias]

    def parameters(self) -> list[Tensor]:
        params = self.shared_parameters()
        for b in self.search_blocks:
            params += b.parameters()
        return params

    def active_parameters(self, choices: Sequence[int]) -> list[Tensor]:
        params = self.shared_parameters()
        for block, cid in zip(self.search_blocks, choices):
            params += block.paths[cid].parameters()
        return params

    def buffers(self) -> list[np.ndarray]:
        bufs = self.stem.buffers()
        for b in self.blocks:
            bufs += b.buffers()
        return bufs

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    # forward -------------------------------------------------------------------

    def forward(
        self,
        x: Tensor,
        routes: Sequence[Route] = (),
        training: bool = True,
        update_stats: bool = True,
    ) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected an N x 3 x H x W batch, got shape {x.shape}")
        if len(routes) != len(self.search_blocks):
            raise ValueError(f"{len(routes)} routes for {len(self.search_blocks)} search blocks")
        y = F.relu(self.stem(x, training, update_stats))
        if self.desc.stem.kind == "standard":
            y = F.max_pool2d(y, 3, 2, 1)
        route_iter = iter(routes)
        for block in self.blocks:
            if isinstance(block, BottleneckPath):
                y = block(y, training, update_stats)
                continue
            route = next(route_iter)
            if isinstance(route, (int, np.integer)):
                y = block.paths[int(route)](y, training, update_stats)
            else:
                ids, weights = route
                mixed = None
                for cid, w in zip(ids, weights):
                    term = block.paths[cid](y, training, update_stats) * w
                    mixed = term if mixed is None else mixed + term
                y = mixed
        feats = F.global_avg_pool(y)
        return F.linear(feats, self.fc_weight, self.fc_bias)

    __call__ = forward
