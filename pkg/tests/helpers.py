"""Shared tiny-scale fixtures for engine, CLI and acceptance tests."""

import numpy as np

from scoped_dnas.data import BatchStream, split_train_val, synthetic_dataset
from scoped_dnas.engine import SearchConfig
from scoped_dnas.searchspace import build_resnet, build_supernet

TINY_STAGES = (1, 1, 1, 2)


def resnet50_layer_oracle(num_classes, big_kernels=()):
    """Parameter count by walking torchvision's ResNet-50 layer list.

    ``big_kernels`` lists global block indices whose middle conv is 5x5.
    """
    layers = [("conv", 3, 64, 7), ("bn", 64)]
    inplanes, idx = 64, 0
    for planes, blocks in ((64, 3), (128, 4), (256, 6), (512, 3)):
        for b in range(blocks):
            k = 5 if idx in big_kernels else 3
            layers += [("conv", inplanes, planes, 1), ("bn", planes)]
            layers += [("conv", planes, planes, k), ("bn", planes)]
            layers += [("conv", planes, planes * 4, 1), ("bn", planes * 4)]
            if b == 0:
                layers += [("conv", inplanes, planes * 4, 1), ("bn", planes * 4)]
            inplanes = planes * 4
            idx += 1
    layers.append(("fc", 2048, num_classes))
    total = 0
    for layer in layers:
        if layer[0] == "conv":
            _, cin, cout, k = layer
            total += cin * cout * k * k
        elif layer[0] == "bn":
            total += 2 * layer[1]
        else:
            total += layer[1] * layer[2] + layer[2]
    return total


def tiny_supernet(classes=3, scope="s"):
    return build_supernet(build_resnet(classes, True, TINY_STAGES, 16), scope)


def tiny_streams(seed=0, classes=3, size=96, hw=8, batch=16, noise=0.5):
    data = synthetic_dataset(classes, size, hw, seed=seed, noise=noise)
    tr, va = split_train_val(len(data), 0.8, seed)
    return BatchStream(data, tr, batch, seed), BatchStream(data, va, batch, seed + 1000)


def tiny_config(seed=0, classes=3, hw=8, batch=16, **kw):
    kw.setdefault("early_stop", False)
    return SearchConfig(
        scope="s",
        batch_size=batch,
        seed=seed,
        num_classes=classes,
        image_size=hw,
        small_stem=True,
        width_divisor=16,
        **kw,
    )


def planted_winner_run(seed):
    """Search with one zeroed-out candidate per block; returns (probs of the
    sabotaged candidates, chosen ids, sabotage map)."""
    from scoped_dnas.engine import run_search

    sabotage = {0: seed % 6, 1: (seed * 5 + 3) % 6}
    train, val = tiny_streams(seed, size=960, batch=32)
    cfg = tiny_config(seed, batch=32, epochs=30, warmup_epochs=5, arch_lr=0.03)
    result = run_search(cfg, train, val, desc=tiny_supernet(), sabotage=sabotage)
    probs = result.state.probabilities()
    planted = np.array([probs[pos, cid] for pos, cid in sabotage.items()])
    chosen = [op.candidate_id for op in result.final.choices]
    return planted, chosen, sabotage
