"""ResNet-50 descriptions, search scopes, supernet construction and cost
accounting.

Descriptions are plain frozen dataclasses; nothing here allocates weights.
The runtime network built from a description lives in :mod:`scoped_dnas.model`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

KERNELS = (3, 5)
ACTIVATIONS = ("relu", "leaky_relu", "mish")
SCOPES = ("s", "m", "l", "f")

RESNET50_STAGE_BLOCKS = (3, 4, 6, 3)
RESNET50_STAGE_WIDTHS = (64, 128, 256, 512)
EXPANSION = 4


@dataclass(frozen=True)
class CandidateOp:
    kernel: int
    activation: str

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise ValueError(f"candidate kernel must be one of {KERNELS}, got {self.kernel}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"candidate activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def candidate_id(self) -> int:
        return 3 * KERNELS.index(self.kernel) + ACTIVATIONS.index(self.activation)

    @property
    def label(self) -> str:
        return f"k{self.kernel}-{self.activation}"

    @classmethod
    def from_id(cls, candidate_id: int) -> "CandidateOp":
        if not 0 <= candidate_id < 6:
            raise ValueError(f"candidate_id must be in 0..5, got {candidate_id}")
        return cls(KERNELS[candidate_id // 3], ACTIVATIONS[candidate_id % 3])


CANDIDATES: tuple[CandidateOp, ...] = tuple(CandidateOp.from_id(i) for i in range(6))


@dataclass(frozen=True)
class StemSpec:
    kind: str  # "standard" (7x7/2 + max-pool) or "small" (3x3/1, no pool)
    channels: int = 64

    def __post_init__(self):
        if self.kind not in ("standard", "small"):
            raise ValueError(f"unknown stem kind {self.kind!r}")
        if self.channels < 1:
            raise ValueError("stem channels must be positive")


@dataclass(frozen=True)
class BlockSpec:
    kind: str  # "bottleneck" or "search-unit"
    stage: int
    in_channels: int
    mid_channels: int
    out_channels: int
    stride: int
    has_projection_shortcut: bool
    kernel: int = 3
    activation: str = "relu"
    candidates: tuple[CandidateOp, ...] = ()
    choice: Optional[int] = None  # candidate_id picked for a former search block

    def __post_init__(self):
        if self.kind not in ("bottleneck", "search-unit"):
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.stride not in (1, 2):
            raise ValueError(f"block stride must be 1 or 2, got {self.stride}")
        if self.out_channels != EXPANSION * self.mid_channels:
            raise ValueError("bottleneck output width must be 4x the middle width")
        if self.kind == "search-unit" and len(self.candidates) != 6:
            raise ValueError("search-unit blocks carry exactly 6 candidates")
        if self.kind == "bottleneck" and self.candidates:
            raise ValueError("concrete bottleneck blocks carry no candidates")

    @property
    def is_search(self) -> bool:
        return self.kind == "search-unit"

    def concrete(self, op: CandidateOp) -> "BlockSpec":
        return replace(
            self,
            kind="bottleneck",
            kernel=op.kernel,
            activation=op.activation,
            candidates=(),
            choice=op.candidate_id,
        )


@dataclass(frozen=True)
class ArchDescription:
    num_classes: int
    stem: StemSpec
    blocks: tuple[BlockSpec, ...]
    scope: str = "none"
    stage_blocks: tuple[int, ...] = RESNET50_STAGE_BLOCKS

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be at least 2, got {self.num_classes}")
        if self.scope not in ("none",) + SCOPES:
            raise ValueError(f"unknown scope {self.scope!r}")
        if len(self.blocks) != sum(self.stage_blocks):
            raise ValueError(f"{len(self.blocks)} blocks do not match stage sizes {self.stage_blocks}")
        expected = set(scope_blocks(self.scope, self.stage_blocks)) if self.scope != "none" else set()
        marked = {i for i, b in enumerate(self.blocks) if b.is_search}
        if marked != expected:
            raise ValueError(f"search-unit blocks {sorted(marked)} do not match scope {self.scope!r}")

    @property
    def search_indices(self) -> tuple[int, ...]:
        return tuple(i for i, b in enumerate(self.blocks) if b.is_search)

    @property
    def feature_dim(self) -> int:
        return self.blocks[-1].out_channels

    # serialization -----------------------------------------------------------

    def to_dict(self) -> dict:
        blocks = []
        for b in self.blocks:
            entry = {
                "kind": b.kind,
                "stage": b.stage,
                "channels": {"in": b.in_channels, "mid": b.mid_channels, "out": b.out_channels},
                "stride": b.stride,
                "projection": b.has_projection_shortcut,
            }
            if b.is_search:
                entry["candidates"] = [
                    {"candidate_id": c.candidate_id, "kernel": c.kernel, "activation": c.activation}
                    for c in b.candidates
                ]
            else:
                entry["kernel"] = b.kernel
                entry["activation"] = b.activation
                if b.choice is not None:
                    entry["choice"] = b.choice
            blocks.append(entry)
        return {
            "num_classes": self.num_classes,
            "stem": {"kind": self.stem.kind, "channels": self.stem.channels},
            "blocks": blocks,
            "scope": self.scope,
            "stage_blocks": list(self.stage_blocks),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ArchDescription":
        blocks = []
        for entry in doc["blocks"]:
            ch = entry["channels"]
            common = dict(
                stage=entry["stage"],
                in_channels=ch["in"],
                mid_channels=ch["mid"],
                out_channels=ch["out"],
                stride=entry["stride"],
                has_projection_shortcut=entry["projection"],
            )
            if entry["kind"] == "search-unit":
                cands = tuple(CandidateOp(c["kernel"], c["activation"]) for c in entry["candidates"])
                for pos, c in enumerate(entry["candidates"]):
                    if c["candidate_id"] != pos or cands[pos].candidate_id != pos:
                        raise ValueError("search-unit candidates must be listed in candidate_id order")
                blocks.append(BlockSpec(kind="search-unit", candidates=cands, **common))
            else:
                blocks.append(
                    BlockSpec(
                        kind="bottleneck",
                        kernel=entry["kernel"],
                        activation=entry["activation"],
                        choice=entry.get("choice"),
                        **common,
                    )
                )
        return cls(
            num_classes=doc["num_classes"],
            stem=StemSpec(doc["stem"]["kind"], doc["stem"]["channels"]),
            blocks=tuple(blocks),
            scope=doc["scope"],
            stage_blocks=tuple(doc.get("stage_blocks", RESNET50_STAGE_BLOCKS)),
        )

    def to_json(self) -> str:
        return dumps_canonical(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "ArchDescription":
        return cls.from_dict(json.loads(text))


def dumps_canonical(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


@dataclass(frozen=True)
class FinalArchitecture:
    choices: tuple[CandidateOp, ...]
    description: ArchDescription
    search_indices: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if any(b.is_search for b in self.description.blocks):
            raise ValueError("a final architecture contains no search-unit blocks")
        if len(self.choices) != len(self.search_indices):
            raise ValueError("one choice per former search block is required")

    def to_dict(self) -> dict:
        doc = self.description.to_dict()
        doc["choices"] = [
            {"block": i, "candidate_id": c.candidate_id, "kernel": c.kernel, "activation": c.activation}
            for i, c in zip(self.search_indices, self.choices)
        ]
        return doc

    def to_json(self) -> str:
        return dumps_canonical(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "FinalArchitecture":
        doc = json.loads(text)
        choices = doc.pop("choices", [])
        desc = ArchDescription.from_dict(doc)
        return cls(
            choices=tuple(CandidateOp.from_id(c["candidate_id"]) for c in choices),
            description=desc,
            search_indices=tuple(c["block"] for c in choices),
        )


# construction ----------------------------------------------------------------


def build_resnet(
    num_classes: int = 10,
    small_input_stem: bool = False,
    stage_blocks: Sequence[int] = RESNET50_STAGE_BLOCKS,
    width_divisor: int = 1,
) -> ArchDescription:
    """Bottleneck ResNet with the ResNet-50 stage widths.

    ``stage_blocks`` and ``width_divisor`` shrink the network for desk-scale
    runs; the defaults give torchvision's ResNet-50 (stride on the 3x3 conv).
    """
    if width_divisor < 1 or any(w % width_divisor for w in RESNET50_STAGE_WIDTHS):
        raise ValueError(f"width_divisor must divide 64, got {width_divisor}")
    if len(stage_blocks) != 4 or any(n < 1 for n in stage_blocks):
        raise ValueError(f"need four stages with at least one block each, got {tuple(stage_blocks)}")
    stem = StemSpec("small" if small_input_stem else "standard", 64 // width_divisor)
    blocks = []
    in_ch = stem.channels
    for stage, (count, width) in enumerate(zip(stage_blocks, RESNET50_STAGE_WIDTHS), start=1):
        mid = width // width_divisor
        for b in range(count):
            first = b == 0
            blocks.append(
                BlockSpec(
                    kind="bottleneck",
                    stage=stage,
                    in_channels=in_ch,
                    mid_channels=mid,
                    out_channels=EXPANSION * mid,
                    stride=2 if first and stage > 1 else 1,
                    has_projection_shortcut=first,
                )
            )
            in_ch = EXPANSION * mid
    return ArchDescription(num_classes, stem, tuple(blocks), "none", tuple(stage_blocks))


def build_base_resnet50(num_classes: int = 10, small_input_stem: bool = False) -> ArchDescription:
    return build_resnet(num_classes, small_input_stem)


def scope_blocks(scope: str, stage_blocks: Sequence[int] = RESNET50_STAGE_BLOCKS) -> tuple[int, ...]:
    """Block indices covered by a scope: the deepest 1, 2, 3 or 4 stages."""
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}; expected one of {SCOPES}")
    depth = SCOPES.index(scope) + 1
    start = sum(stage_blocks[: len(stage_blocks) - depth])
    return tuple(range(start, sum(stage_blocks)))


def build_supernet(base: ArchDescription, scope: str) -> ArchDescription:
    if base.scope != "none" or base.search_indices:
        raise ValueError("base description already contains search units")
    targets = set(scope_blocks(scope, base.stage_blocks))
    blocks = tuple(
        replace(b, kind="search-unit", candidates=CANDIDATES, kernel=3, activation="relu", choice=None)
        if i in targets
        else b
        for i, b in enumerate(base.blocks)
    )
    return replace(base, blocks=blocks, scope=scope)


def search_space_size(desc: ArchDescription) -> int:
    return 6 ** len(desc.search_indices)


# cost accounting -------------------------------------------------------------


def _bn(c: int) -> int:
    return 2 * c


def block_params(b: BlockSpec, kernel: int) -> int:
    """Parameters of one concrete bottleneck path with the given middle kernel."""
    n = b.in_channels * b.mid_channels + _bn(b.mid_channels)
    n += kernel * kernel * b.mid_channels * b.mid_channels + _bn(b.mid_channels)
    n += b.mid_channels * b.out_channels + _bn(b.out_channels)
    if b.has_projection_shortcut:
        n += b.in_channels * b.out_channels + _bn(b.out_channels)
    return n


def count_params(desc: ArchDescription, mode: str = "single-path-max") -> int:
    """Learnable parameters: bias-free convs, batch-norm affine pairs and the
    linear head. Search blocks count their largest candidate
    (``single-path-max``) or all six independent candidates (``all-paths``)."""
    if mode not in ("single-path-max", "all-paths"):
        raise ValueError(f"unknown counting mode {mode!r}")
    k_stem = 7 if desc.stem.kind == "standard" else 3
    total = 3 * desc.stem.channels * k_stem * k_stem + _bn(desc.stem.channels)
    for b in desc.blocks:
        if not b.is_search:
            total += block_params(b, b.kernel)
        elif mode == "all-paths":
            total += sum(block_params(b, c.kernel) for c in b.candidates)
        else:
            total += max(block_params(b, c.kernel) for c in b.candidates)
    total += desc.feature_dim * desc.num_classes + desc.num_classes
    return total


def format_millions(n: int) -> str:
    return f"{n / 1e6:.2f}M"


def _check_hw(desc: ArchDescription, input_hw: int) -> None:
    reduction = 32 if desc.stem.kind == "standard" else 8
    if input_hw < reduction or input_hw % reduction:
        raise ValueError(f"input size {input_hw} incompatible with {desc.stem.kind} stem (multiple of {reduction} required)")


def block_macs(b: BlockSpec, hw: int, kernel: Optional[int] = None) -> int:
    """Multiply-accumulates of one bottleneck path on an ``hw`` x ``hw`` input."""
    k = b.kernel if kernel is None else kernel
    out_hw = hw // b.stride
    macs = hw * hw * b.in_channels * b.mid_channels
    macs += out_hw * out_hw * k * k * b.mid_channels * b.mid_channels
    macs += out_hw * out_hw * b.mid_channels * b.out_channels
    if b.has_projection_shortcut:
        macs += out_hw * out_hw * b.in_channels * b.out_channels
    return macs


def count_macs(desc: ArchDescription, input_hw: int) -> float:
    """MACs of one forward pass of a single image (convs and the linear head).

    Search blocks contribute their expected cost under uniform candidate
    probabilities, so the result may be fractional for supernets.
    """
    _check_hw(desc, input_hw)
    if desc.stem.kind == "standard":
        hw = input_hw // 2
        macs = hw * hw * 3 * desc.stem.channels * 49
        hw //= 2
    else:
        hw = input_hw
        macs = hw * hw * 3 * desc.stem.channels * 9
    total = float(macs)
    for b in desc.blocks:
        if b.is_search:
            total += sum(block_macs(b, hw, c.kernel) for c in b.candidates) / len(b.candidates)
        else:
            total += block_macs(b, hw)
        hw //= b.stride
    total += desc.feature_dim * desc.num_classes
    return total


# final architecture ----------------------------------------------------------


def argmax_lowest(alpha: Sequence[float]) -> int:
    """Index of the largest entry; ties resolve to the lowest index."""
    alpha = np.asarray(alpha, dtype=float)
    return int(np.flatnonzero(alpha == alpha.max())[0])


def derive_final_architecture(supernet: ArchDescription, alphas: Sequence[Sequence[float]]) -> FinalArchitecture:
    """Replace every search block by its highest-scoring candidate."""
    indices = supernet.search_indices
    alphas = [np.asarray(a, dtype=float).reshape(-1) for a in alphas]
    if len(alphas) != len(indices):
        raise ValueError(f"{len(alphas)} architecture vectors for {len(indices)} search blocks")
    choices = []
    blocks = list(supernet.blocks)
    for idx, alpha in zip(indices, alphas):
        if alpha.shape != (6,):
            raise ValueError(f"architecture vector for block {idx} has length {alpha.size}, expected 6")
        op = supernet.blocks[idx].candidates[argmax_lowest(alpha)]
        choices.append(op)
        blocks[idx] = blocks[idx].concrete(op)
    desc = replace(supernet, blocks=tuple(blocks), scope="none")
    return FinalArchitecture(tuple(choices), desc, indices)
