import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import resnet50_layer_oracle
from scoped_dnas.model import Network
from scoped_dnas.searchspace import (
    CANDIDATES,
    ArchDescription,
    BlockSpec,
    CandidateOp,
    FinalArchitecture,
    argmax_lowest,
    block_macs,
    build_base_resnet50,
    build_resnet,
    build_supernet,
    count_macs,
    count_params,
    derive_final_architecture,
    format_millions,
    scope_blocks,
    search_space_size,
)


def test_candidate_ids_and_labels():
    assert [c.candidate_id for c in CANDIDATES] == list(range(6))
    assert CANDIDATES[0].label == "k3-relu"
    assert CandidateOp(5, "mish").candidate_id == 5
    assert CandidateOp.from_id(4) == CandidateOp(5, "leaky_relu")
    with pytest.raises(ValueError):
        CandidateOp(7, "relu")
    with pytest.raises(ValueError):
        CandidateOp.from_id(6)


@pytest.mark.parametrize("classes,expected", [(10, 23_528_522), (1000, 25_557_032)])
def test_resnet50_parameter_count(classes, expected):
    n = count_params(build_base_resnet50(classes))
    assert n == expected == resnet50_layer_oracle(classes)


def test_resnet50_formats_to_table_value():
    assert format_millions(count_params(build_base_resnet50(10))) == "23.53M"


@pytest.mark.parametrize("scope,n", [("s", 3), ("m", 9), ("l", 13), ("f", 16)])
def test_scope_sizes(scope, n):
    blocks = scope_blocks(scope)
    assert len(blocks) == n
    assert blocks == tuple(range(16 - n, 16))


def test_scopes_are_nested():
    sets = [set(scope_blocks(s)) for s in "smlf"]
    assert all(a < b for a, b in zip(sets, sets[1:]))


def test_unknown_scope():
    with pytest.raises(ValueError):
        scope_blocks("xl")


@pytest.mark.parametrize("scope", "smlf")
def test_single_path_max_matches_all_big_kernel_oracle(scope):
    sup = build_supernet(build_base_resnet50(10), scope)
    assert count_params(sup) == resnet50_layer_oracle(10, set(scope_blocks(scope)))


@pytest.mark.parametrize(
    "scope,single,every",
    [
        ("s", 36_111_434, 136_100_938),
        ("m", 42_402_890, 190_467_146),
        ("l", 43_451_466, 199_710_794),
        ("f", 43_648_074, 201_379_658),
    ],
)
def test_supernet_counts(scope, single, every):
    sup = build_supernet(build_base_resnet50(10), scope)
    assert count_params(sup, "single-path-max") == single
    assert count_params(sup, "all-paths") == every
    blocks = scope_blocks(scope)
    # three activations share each kernel size, so each scoped block holds 3 * (k3 + k5)
    oracle = resnet50_layer_oracle(10) + sum(
        3 * (_block_oracle(i, 3) + _block_oracle(i, 5)) - _block_oracle(i, 3) for i in blocks
    )
    assert every == oracle
    assert search_space_size(sup) == 6 ** len(scope_blocks(scope))


def _block_oracle(idx, k):
    widths = [64] * 3 + [128] * 4 + [256] * 6 + [512] * 3
    firsts = {0, 3, 7, 13}
    planes = widths[idx]
    inplanes = 64 if idx == 0 else widths[idx - 1] * 4
    n = inplanes * planes + 2 * planes + k * k * planes * planes + 2 * planes + planes * planes * 4 + 8 * planes
    if idx in firsts:
        n += inplanes * planes * 4 + 8 * planes
    return n


def test_table_values_inside_bounds():
    base = count_params(build_base_resnet50(10))
    table = {"s": 23.53e6, "m": 24.58e6, "l": 23.79e6, "f": 25.23e6}
    for scope, value in table.items():
        upper = count_params(build_supernet(build_base_resnet50(10), scope))
        assert base <= value <= upper


def test_supernet_marks_only_scope():
    sup = build_supernet(build_base_resnet50(10), "m")
    assert sup.search_indices == scope_blocks("m")
    assert all(len(sup.blocks[i].candidates) == 6 for i in sup.search_indices)
    assert all(not b.is_search for i, b in enumerate(sup.blocks) if i not in sup.search_indices)
    with pytest.raises(ValueError):
        build_supernet(sup, "s")


def test_description_rejects_bad_search_marking():
    sup = build_supernet(build_base_resnet50(10), "s")
    with pytest.raises(ValueError):
        ArchDescription(10, sup.stem, sup.blocks, "m")


def test_block_spec_validation():
    with pytest.raises(ValueError):
        BlockSpec("bottleneck", 1, 64, 64, 200, 1, False)
    with pytest.raises(ValueError):
        BlockSpec("search-unit", 1, 64, 64, 256, 1, False)


# serialization ---------------------------------------------------------------


@pytest.mark.parametrize("scope", ["none", "s", "f"])
def test_json_round_trip_is_byte_identical(scope):
    desc = build_base_resnet50(10)
    if scope != "none":
        desc = build_supernet(desc, scope)
    text = desc.to_json()
    again = ArchDescription.from_json(text)
    assert again == desc
    assert again.to_json() == text
    assert text.endswith("\n")
    assert json.loads(text)["num_classes"] == 10


def test_final_architecture_round_trip():
    sup = build_supernet(build_base_resnet50(10), "s")
    final = derive_final_architecture(sup, [np.eye(6)[1], np.eye(6)[4], np.eye(6)[5]])
    text = final.to_json()
    assert FinalArchitecture.from_json(text).to_json() == text
    assert [c.candidate_id for c in final.choices] == [1, 4, 5]


# derivation --------------------------------------------------------------------


def test_derive_example_and_tie_break():
    sup = build_supernet(build_base_resnet50(10), "s")
    alphas = [[0.1, 0.5, 0.2, 0.0, 0.0, 0.0], [0.0] * 6, [0.3, 0.3, 0.3, 0.3, 0.3, 0.3]]
    final = derive_final_architecture(sup, alphas)
    assert [c.candidate_id for c in final.choices] == [1, 0, 0]
    assert final.description.blocks[13].kernel == 3
    assert final.description.blocks[13].activation == "leaky_relu"
    assert not any(b.is_search for b in final.description.blocks)


def test_derive_agrees_with_linear_scan_oracle():
    sup = build_supernet(build_base_resnet50(10), "s")
    for seed in range(100):
        rng = np.random.default_rng(seed)
        # a coarse grid makes ties common
        alphas = rng.integers(-2, 3, size=(3, 6)).astype(float)
        expected = []
        for row in alphas:
            best = 0
            for k in range(1, 6):
                if row[k] > row[best]:
                    best = k
            expected.append(best)
        got = [c.candidate_id for c in derive_final_architecture(sup, alphas).choices]
        assert got == expected


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(-50, 50, allow_nan=False), min_size=6, max_size=6),
    st.floats(-20, 20, allow_nan=False),
    st.floats(0.1, 10),
)
def test_argmax_invariant_under_monotone_maps(alpha, shift, scale):
    alpha = np.array(alpha)
    mapped = np.floor(alpha) * scale + shift  # floor keeps ties exact after the affine map
    assert argmax_lowest(np.floor(alpha)) == argmax_lowest(mapped)


def test_derive_wrong_arity():
    sup = build_supernet(build_base_resnet50(10), "s")
    with pytest.raises(ValueError):
        derive_final_architecture(sup, [np.zeros(6)] * 2)
    with pytest.raises(ValueError):
        derive_final_architecture(sup, [np.zeros(5)] * 3)


@pytest.mark.parametrize("cid", range(6))
def test_choice_equals_direct_concrete_build(cid):
    base = build_resnet(3, True, (1, 1, 1, 2), 16)
    sup = build_supernet(base, "s")
    final = derive_final_architecture(sup, [np.eye(6)[cid]] * 2)
    op = CandidateOp.from_id(cid)
    blocks = list(base.blocks)
    for i in sup.search_indices:
        blocks[i] = base.blocks[i].concrete(op)
    direct = ArchDescription(3, base.stem, tuple(blocks), "none", base.stage_blocks)
    assert final.description == direct
    net_a = Network(final.description, np.random.default_rng(0), dtype="float64")
    net_b = Network(direct, np.random.default_rng(0), dtype="float64")
    assert net_a.num_parameters() == net_b.num_parameters() == count_params(direct)


# cost ------------------------------------------------------------------------------


def test_bottleneck_macs_formula():
    b = BlockSpec("bottleneck", 2, 256, 64, 256, 1, False)
    hw = 14
    expected = hw * hw * (256 * 64 + 9 * 64 * 64 + 64 * 256)
    assert block_macs(b, hw) == expected
    assert block_macs(b, hw, kernel=5) == expected + hw * hw * 16 * 64 * 64


def test_resnet50_macs():
    assert count_macs(build_base_resnet50(10), 224) == 4_087_156_736


def test_macs_strictly_increase_with_scope():
    base = build_base_resnet50(10)
    costs = [count_macs(build_supernet(base, s), 224) for s in "smlf"]
    assert count_macs(base, 224) < costs[0]
    assert all(a < b for a, b in zip(costs, costs[1:]))


def test_macs_rejects_bad_input_size():
    with pytest.raises(ValueError):
        count_macs(build_base_resnet50(10), 100)
