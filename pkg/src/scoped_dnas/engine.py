"""Bilevel search with binarized path gates.

Weight steps sample one active candidate per search block from
softmax(alpha) and update only the weights on that single-path network.
Architecture steps sample two distinct candidates per block, mix their
outputs with the pair-renormalized probabilities, turn the gate gradients
into alpha gradients for the pair, take an Adam step on those two entries and
shift them so that every other candidate keeps its probability.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .data import BatchStream, ImageBatch
from .model import Network
from .searchspace import (
    CANDIDATES,
    ArchDescription,
    FinalArchitecture,
    build_resnet,
    build_supernet,
    count_macs,
    derive_final_architecture,
)
from .tensor import Adam, SGDNesterov, Tensor, no_grad
from .tensor import functional as F

log = logging.getLogger(__name__)

NUM_CANDIDATES = len(CANDIDATES)


class DivergenceError(RuntimeError):
    """A training loss became NaN or infinite."""


def arch_probabilities(alpha) -> np.ndarray:
    a = np.asarray(alpha.data if isinstance(alpha, Tensor) else alpha, dtype=np.float64)
    if np.isnan(a).any():
        raise ValueError("architecture parameters contain NaN")
    e = np.exp(a - a.max())
    return e / e.sum()


def _logsumexp(a: np.ndarray) -> float:
    m = a.max()
    return float(m + np.log(np.exp(a - m).sum()))


def sample_active_path(alpha, rng: np.random.Generator) -> int:
    """Draw one candidate id with probability softmax(alpha)."""
    p = arch_probabilities(alpha)
    return int(rng.choice(len(p), p=p))


def sample_path_pair(alpha, rng: np.random.Generator) -> tuple[int, int]:
    """Two distinct candidates: the first from softmax(alpha), the second from
    the same distribution with the first masked out and renormalized."""
    p = arch_probabilities(alpha)
    if len(p) < 2:
        raise ValueError("an architecture step needs at least two candidates")
    first = int(rng.choice(len(p), p=p))
    rest = p.copy()
    rest[first] = 0.0
    total = rest.sum()
    rest = rest / total if total > 0 else np.where(np.arange(len(p)) == first, 0.0, 1.0 / (len(p) - 1))
    second = int(rng.choice(len(p), p=rest))
    return first, second


@dataclass
class ArchState:
    alphas: list[Tensor]
    gates: list[np.ndarray]
    optimizer: Adam
    rng: np.random.Generator
    sampled: list[tuple[int, ...]] = field(default_factory=list)

    @classmethod
    def initial(
        cls,
        num_blocks: int,
        rng: np.random.Generator,
        lr: float = 0.001,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ) -> "ArchState":
        return cls(
            alphas=[Tensor(np.zeros(NUM_CANDIDATES, dtype=np.float64)) for _ in range(num_blocks)],
            gates=[np.zeros(NUM_CANDIDATES, dtype=np.int8) for _ in range(num_blocks)],
            optimizer=Adam(lr, beta1, beta2, eps, weight_decay),
            rng=rng,
        )

    def probabilities(self) -> np.ndarray:
        return np.stack([arch_probabilities(a) for a in self.alphas]) if self.alphas else np.zeros((0, NUM_CANDIDATES))

    def alpha_values(self) -> list[np.ndarray]:
        return [a.data.copy() for a in self.alphas]

    def _set_gates(self, block: int, ids: Iterable[int]) -> None:
        g = self.gates[block]
        g[:] = 0
        g[list(ids)] = 1


def _check_loss(value: float, phase: str) -> float:
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite {phase} loss {value}")
    return value


def _as_input(batch: ImageBatch, net: Network) -> Tensor:
    if len(batch) == 0:
        raise ValueError("empty batch")
    return Tensor(batch.images.astype(net.dtype, copy=False))


def weight_update_step(net: Network, state: ArchState, batch: ImageBatch, opt: SGDNesterov) -> float:
    """One single-path weight update on a training batch; returns the loss."""
    x = _as_input(batch, net)
    choices = []
    for b, alpha in enumerate(state.alphas):
        cid = sample_active_path(alpha, state.rng)
        state._set_gates(b, [cid])
        choices.append(cid)
    state.sampled = [(c,) for c in choices]
    net.zero_grad()
    loss = F.softmax_cross_entropy(net(x, choices, training=True), batch.labels)
    _check_loss(loss.item(), "weight")
    loss.backward()
    opt.step(net.active_parameters(choices))
    net.zero_grad()
    return loss.item()


def pair_alpha_gradient(gate_grads: Sequence[float], pair_probs: Sequence[float]) -> np.ndarray:
    """dL/dalpha_k = sum_m dL/dg_m * p'_m * (delta_mk - p'_k) over the pair."""
    g = np.asarray(gate_grads, dtype=np.float64)
    p = np.asarray(pair_probs, dtype=np.float64)
    jac = np.diag(p) - np.outer(p, p)  # jac[m, k] = p_m (delta_mk - p_k)
    return g @ jac


def conserving_shift(alpha_before: np.ndarray, alpha_after: np.ndarray, pair: Sequence[int]) -> float:
    """Constant to add to the pair so its total exp-mass, and hence every
    other candidate's softmax probability, is what it was before the update.

    Equals ln(s0 * R / (E * (1 - s0))) with s0 the pair's prior probability
    mass, R the others' exp-mass and E the pair's updated exp-mass.
    """
    idx = list(pair)
    return _logsumexp(alpha_before[idx]) - _logsumexp(alpha_after[idx])


def arch_update_step(net: Network, state: ArchState, batch: ImageBatch) -> float:
    """One two-path architecture update on a validation batch; returns the loss.

    Model weights and batch-norm running statistics are left untouched.
    """
    x = _as_input(batch, net)
    pairs, gate_tensors, pair_probs = [], [], []
    for b, alpha in enumerate(state.alphas):
        pair = sample_path_pair(alpha, state.rng)
        state._set_gates(b, pair)
        p = arch_probabilities(alpha.data[list(pair)])
        pairs.append(pair)
        pair_probs.append(p)
        gate_tensors.append([Tensor(np.asarray(v, dtype=net.dtype), requires_grad=True) for v in p])
    state.sampled = pairs

    net.set_requires_grad(False)
    try:
        routes = [(pair, gates) for pair, gates in zip(pairs, gate_tensors)]
        loss = F.softmax_cross_entropy(net(x, routes, training=True, update_stats=False), batch.labels)
        _check_loss(loss.item(), "architecture")
        loss.backward()
    finally:
        net.set_requires_grad(True)

    before = state.alpha_values()
    masks = []
    for alpha, pair, gates, p in zip(state.alphas, pairs, gate_tensors, pair_probs):
        gate_grads = [g.grad.item() for g in gates]
        grad = np.zeros(NUM_CANDIDATES)
        grad[list(pair)] = pair_alpha_gradient(gate_grads, p)
        alpha.grad = grad
        mask = np.zeros(NUM_CANDIDATES, dtype=bool)
        mask[list(pair)] = True
        masks.append(mask)
    state.optimizer.step(state.alphas, masks)
    for alpha, old, pair in zip(state.alphas, before, pairs):
        alpha.data[list(pair)] += conserving_shift(old, alpha.data, pair)
        alpha.grad = None
    return loss.item()


# trajectory ------------------------------------------------------------------


TRAJECTORY_HEADER = ("epoch", "block_id", "candidate_id", "kernel", "activation", "probability")


def _round9(p: float) -> float:
    return float(f"{p:.9g}")


@dataclass
class Trajectory:
    """Per-epoch softmax probabilities of every search block.

    ``block_id`` counts search blocks from the deepest one (0 = deepest).
    Probabilities are stored rounded to 9 significant digits so the CSV form
    round-trips exactly.
    """

    rows: list[tuple[int, int, int, float]] = field(default_factory=list)

    def record(self, epoch: int, probs: np.ndarray) -> None:
        expected = self.num_epochs
        if epoch != expected:
            raise ValueError(f"trajectory epochs must be contiguous: expected {expected}, got {epoch}")
        for block_id, row in enumerate(probs[::-1]):
            for cid, p in enumerate(row):
                self.rows.append((epoch, block_id, cid, _round9(p)))

    @property
    def num_epochs(self) -> int:
        return self.rows[-1][0] + 1 if self.rows else 0

    @property
    def block_ids(self) -> list[int]:
        return sorted({r[1] for r in self.rows})

    def epoch_matrix(self, epoch: int) -> np.ndarray:
        """(blocks, 6) probabilities of one epoch, indexed by block_id."""
        sel = [r for r in self.rows if r[0] == epoch]
        n = max(r[1] for r in sel) + 1
        out = np.zeros((n, NUM_CANDIDATES))
        for _, b, c, p in sel:
            out[b, c] = p
        return out

    def for_block(self, block_id: int) -> list[tuple[int, int, int, float]]:
        return [r for r in self.rows if r[1] == block_id]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(TRAJECTORY_HEADER) + "\n")
        for epoch, block_id, cid, p in self.rows:
            op = CANDIDATES[cid]
            buf.write(f"{epoch},{block_id},{cid},{op.kernel},{op.activation},{p:.9g}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Trajectory":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if tuple(header or ()) != TRAJECTORY_HEADER:
            raise ValueError(f"unexpected trajectory header {header}")
        rows = []
        for line in reader:
            if not line:
                continue
            epoch, block_id, cid, kernel, act, p = line
            cid = int(cid)
            op = CANDIDATES[cid]
            if int(kernel) != op.kernel or act != op.activation:
                raise ValueError(f"candidate {cid} is {op.label}, row says k{kernel}-{act}")
            rows.append((int(epoch), int(block_id), cid, float(p)))
        return cls(rows)


def stop_criterion(
    trajectory: Trajectory,
    patience: int = 20,
    threshold: float = 0.9,
    max_epochs: Optional[int] = None,
) -> str:
    """``"stop"`` once every block's largest probability has stayed at or
    above ``threshold`` for ``patience`` consecutive epochs, or the epoch
    budget is spent; ``"continue"`` otherwise."""
    epochs = trajectory.num_epochs
    if epochs < 1:
        raise ValueError("stop criterion needs at least one recorded epoch")
    if max_epochs is not None and epochs >= max_epochs:
        return "stop"
    if patience <= 0:
        return "stop"
    if epochs < patience:
        return "continue"
    for epoch in range(epochs - patience, epochs):
        if trajectory.epoch_matrix(epoch).max(axis=1).min() < threshold:
            return "continue"
    return "stop"


# search loop -------------------------------------------------------------------


@dataclass
class SearchConfig:
    scope: str = "s"
    epochs: int = 500
    batch_size: int = 64
    weight_lr: float = 0.05
    weight_momentum: float = 0.9
    weight_decay: float = 4e-5
    arch_lr: float = 0.001
    arch_beta1: float = 0.9
    arch_beta2: float = 0.999
    arch_eps: float = 1e-8
    arch_weight_decay: float = 0.0
    weight_batches: int = 1
    arch_batches: int = 1
    warmup_epochs: int = 0
    stop_patience: int = 20
    stop_threshold: float = 0.9
    early_stop: bool = True
    seed: int = 0
    num_classes: int = 10
    image_size: int = 224
    small_stem: bool = False
    width_divisor: int = 1
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("weight_lr", "arch_lr", "arch_eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1 or self.weight_batches < 1 or self.arch_batches < 1:
            raise ValueError("batch size and alternation counts must be positive")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be nonnegative")

    def supernet(self) -> ArchDescription:
        base = build_resnet(self.num_classes, self.small_stem, width_divisor=self.width_divisor)
        return build_supernet(base, self.scope)


def _seeds(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


@dataclass
class SearchResult:
    trajectory: Trajectory
    final: FinalArchitecture
    metrics: list[dict]
    state: ArchState
    network: Network
    timing: list[dict]


def run_search(
    config: SearchConfig,
    train: BatchStream,
    val: BatchStream,
    desc: Optional[ArchDescription] = None,
    sabotage: Optional[Mapping[int, int]] = None,
    verify: bool = False,
) -> SearchResult:
    """Alternate weight and architecture steps for up to ``config.epochs``.

    An epoch is one pass of weight batches over ``train``; after every
    ``weight_batches`` weight steps come ``arch_batches`` architecture steps
    drawn from the cycling ``val`` stream. With ``verify`` each step asserts
    phase separation and probability conservation bit-for-bit.
    """
    desc = desc or config.supernet()
    init_rng, sample_rng = _seeds(config.seed, 2)
    net = Network(desc, init_rng, dtype=config.dtype, sabotage=sabotage)
    state = ArchState.initial(
        len(net.search_blocks),
        sample_rng,
        config.arch_lr,
        config.arch_beta1,
        config.arch_beta2,
        config.arch_eps,
        config.arch_weight_decay,
    )
    opt = SGDNesterov(config.weight_lr, config.weight_momentum, config.weight_decay)
    trajectory = Trajectory()
    metrics, timing = [], []
    macs = count_macs(desc, config.image_size) if config.image_size else 0.0

    for epoch in range(config.epochs):
        started = time.perf_counter()
        w_losses, a_losses = [], []
        remaining = train.batches_per_epoch
        while remaining > 0:
            for _ in range(min(config.weight_batches, remaining)):
                batch = train.next_batch()
                if verify:
                    alphas = state.alpha_values()
                w_losses.append(weight_update_step(net, state, batch, opt))
                remaining -= 1
                if verify:
                    _verify_weight_step(state, alphas)
            for _ in range(config.arch_batches if epoch >= config.warmup_epochs else 0):
                batch = val.next_batch()
                if verify:
                    weights = [p.data.copy() for p in net.parameters()]
                    probs = state.probabilities()
                a_losses.append(arch_update_step(net, state, batch))
                if verify:
                    _verify_arch_step(net, state, weights, probs)
        trajectory.record(epoch, state.probabilities())
        elapsed = time.perf_counter() - started
        row = {
            "epoch": epoch,
            "weight_loss": float(np.mean(w_losses)),
            "arch_loss": float(np.mean(a_losses)) if a_losses else float("nan"),
            "weight_steps": len(w_losses),
            "arch_steps": len(a_losses),
            "min_max_prob": float(state.probabilities().max(axis=1).min()) if state.alphas else 1.0,
            "macs_per_image": macs,
        }
        metrics.append(row)
        timing.append({"epoch": epoch, "seconds": elapsed})
        log.info("epoch %d weight_loss %.4f arch_loss %.4f (%.1fs)", epoch, row["weight_loss"], row["arch_loss"], elapsed)
        if config.early_stop and stop_criterion(trajectory, config.stop_patience, config.stop_threshold) == "stop":
            log.info("stop criterion met after epoch %d", epoch)
            break

    final = derive_final_architecture(desc, state.alpha_values())
    return SearchResult(trajectory, final, metrics, state, net, timing)


def _verify_weight_step(state: ArchState, alphas_before: list[np.ndarray]) -> None:
    for gate in state.gates:
        if int(gate.sum()) != 1:
            raise AssertionError(f"weight step activated {int(gate.sum())} paths in a block")
    for old, new in zip(alphas_before, state.alphas):
        if not np.array_equal(old, new.data):
            raise AssertionError("weight step modified architecture parameters")


def _verify_arch_step(net: Network, state: ArchState, weights: list[np.ndarray], probs_before: np.ndarray) -> None:
    for old, p in zip(weights, net.parameters()):
        if not np.array_equal(old, p.data):
            raise AssertionError("architecture step modified model weights")
    probs = state.probabilities()
    for b, (gate, pair) in enumerate(zip(state.gates, state.sampled)):
        if int(gate.sum()) != 2 or len(set(pair)) != 2:
            raise AssertionError("architecture step must sample exactly two distinct paths per block")
        others = [k for k in range(NUM_CANDIDATES) if k not in pair]
        if np.max(np.abs(probs[b, others] - probs_before[b, others])) > 1e-9:
            raise AssertionError("unsampled candidate probabilities drifted")


# evaluation and retraining ---------------------------------------------------


def evaluate(net: Network, batches: Iterable[ImageBatch], routes: Sequence = ()) -> float:
    correct = total = 0
    with no_grad():
        for batch in batches:
            logits = net(_as_input(batch, net), routes, training=False)
            correct += int((logits.data.argmax(axis=1) == batch.labels).sum())
            total += len(batch)
    return correct / total if total else float("nan")


def train_concrete(
    net: Network,
    config: SearchConfig,
    train: BatchStream,
    evaluation: BatchStream,
    epochs: int,
) -> list[dict]:
    """SGD-Nesterov training of a network without search blocks."""
    if net.search_blocks:
        raise ValueError("retraining requires an architecture without search units")
    opt = SGDNesterov(config.weight_lr, config.weight_momentum, config.weight_decay)
    metrics = []
    for epoch in range(epochs):
        losses = []
        for _ in range(train.batches_per_epoch):
            batch = train.next_batch()
            net.zero_grad()
            loss = F.softmax_cross_entropy(net(_as_input(batch, net), (), training=True), batch.labels)
            losses.append(_check_loss(loss.item(), "training"))
            loss.backward()
            opt.step(net.parameters())
        net.zero_grad()
        acc = evaluate(net, evaluation.full_pass())
        metrics.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "eval_accuracy": acc})
        log.info("retrain epoch %d loss %.4f acc %.4f", epoch, metrics[-1]["train_loss"], acc)
    return metrics


def retrain(
    final: FinalArchitecture,
    config: SearchConfig,
    train: BatchStream,
    evaluation: BatchStream,
    epochs: Optional[int] = None,
) -> tuple[list[dict], Network]:
    """Train the chosen architecture from a fresh initialization."""
    if any(b.is_search for b in final.description.blocks):
        raise ValueError("retraining requires an architecture without search units")
    init_rng = np.random.default_rng([config.seed, 1])
    net = Network(final.description, init_rng, dtype=config.dtype)
    metrics = train_concrete(net, config, train, evaluation, epochs or config.epochs)
    return metrics, net


def config_dict(config: SearchConfig) -> dict:
    return asdict(config)
