import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import block_table, symbolic_block_params, symbolic_fixed_params
from tamnas.errors import GenomeFormatError, GenomeLegalityError, GenomeLengthError, TamNasError
from tamnas.network import build_network
from tamnas.space import (
    FULL,
    MINI,
    Genome,
    build_param_table,
    cardinality,
    channel_ratio,
    count_params,
    decode,
    decode_block,
    encode,
    legal_blocks,
    random_genome,
)

TABLE_FULL = build_param_table(FULL)
TABLE_MINI = build_param_table(MINI)


def test_channel_ratio_examples():
    assert channel_ratio(0) == 0.2 and channel_ratio(9) == 2.0 and channel_ratio(4) == 1.0
    ratios = [channel_ratio(i) for i in range(10)]
    assert all(a < b for a, b in zip(ratios, ratios[1:]))
    with pytest.raises(TamNasError):
        channel_ratio(10)


def test_decode_block_examples():
    s0 = decode_block(0)
    assert (s0.base, s0.kernel, s0.nonlocal_kind, s0.has_se) == ("shufflev2", 3, None, True)
    s15 = decode_block(15)
    assert (s15.base, s15.kernel, s15.nonlocal_kind, s15.has_se) == ("xception", 3, "gaussian", True)
    s18 = decode_block(18)
    assert (s18.base, s18.nonlocal_kind, s18.trailing_bn) == ("robust", "embedded", True)
    with pytest.raises(TamNasError):
        decode_block(22)


def test_decode_block_matches_independent_table():
    names = {"S": "shufflev2", "SX": "xception", "R": "robust"}
    for bid, (base, k, nl, tbn) in enumerate(block_table()):
        s = decode_block(bid)
        assert (s.base, s.kernel, s.nonlocal_kind, s.trailing_bn) == (names[base], k, nl, tbn)


def test_full_preset_layout():
    layers = FULL.layers
    assert len(layers) == 16
    assert [l.index for l in layers if l.stride == 2] == [0, 4, 12]
    assert sorted({l.out_channels for l in layers}) == [48, 96, 192]
    for a, b in zip(layers, layers[1:]):
        assert a.out_channels == b.in_channels


def test_mini_preset_layout():
    layers = MINI.layers
    assert len(layers) == 6 and [l.index for l in layers if l.stride == 2] == [0, 3]


def test_legal_blocks():
    assert set(legal_blocks(FULL.layers[0])) == set(range(18))
    assert set(legal_blocks(FULL.layers[1])) == set(range(22))
    assert not set(legal_blocks(MINI.layers[3])) & {18, 19, 20, 21}


def test_cardinality_symbolic():
    assert cardinality(FULL) == 18**3 * 22**13 * 10**16


def test_fixed_part_includes_stem():
    # stem conv 672 + stem BN 48 are part of the fixed count
    assert TABLE_FULL.fixed == symbolic_fixed_params(24, 192, (176, 920, 1024), 10)
    assert TABLE_FULL.fixed >= 672 + 48


def test_table_matches_symbolic_oracle_on_audited_triples():
    rng = np.random.default_rng(2024)
    for _ in range(20):
        layer = FULL.layers[rng.integers(16)]
        b = int(rng.choice(legal_blocks(layer)))
        c = int(rng.integers(10))
        expected = symbolic_block_params(b, layer.in_channels, layer.out_channels, layer.stride, 0.2 * (c + 1))
        assert TABLE_FULL.entry(layer.index, b, c) == expected


def test_table_monotone_in_width():
    for table in (TABLE_FULL, TABLE_MINI):
        for layer in table.preset.layers:
            for b in legal_blocks(layer):
                row = table.table[layer.index, b]
                assert all(x <= y for x, y in zip(row, row[1:]))


def test_count_params_additive():
    rng = np.random.default_rng(5)
    g = random_genome(FULL, rng)
    blocks = list(g.blocks)
    blocks[7] = (blocks[7] + 1) % 22
    h = Genome(blocks, g.channels)
    diff = TABLE_FULL.entry(7, h.blocks[7], g.channels[7]) - TABLE_FULL.entry(7, g.blocks[7], g.channels[7])
    assert count_params(h, TABLE_FULL) - count_params(g, TABLE_FULL) == diff


def test_all_minimum_genome_matches_oracle():
    g = Genome((0,) * 16, (0,) * 16)
    expected = symbolic_fixed_params(24, 192, (176, 920, 1024), 10) + sum(
        symbolic_block_params(0, l.in_channels, l.out_channels, l.stride, 0.2) for l in FULL.layers
    )
    assert count_params(g, TABLE_FULL) == expected


def test_count_params_matches_instantiation_mini():
    rng = np.random.default_rng(6)
    for _ in range(10):
        g = random_genome(MINI, rng)
        assert count_params(g, TABLE_MINI) == build_network(MINI, g, rng).param_count()


def test_count_params_illegal_names_layer():
    g = Genome((19,) + (0,) * 15, (0,) * 16)
    with pytest.raises(GenomeLegalityError) as info:
        count_params(g, TABLE_FULL)
    assert info.value.layer == 0


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=200)
def test_roundtrip_random_genomes(seed):
    rng = np.random.default_rng(seed)
    for preset, table in ((FULL, TABLE_FULL), (MINI, TABLE_MINI)):
        g = random_genome(preset, rng)
        back = decode(encode(g), preset)
        assert back == g
        assert count_params(back, table) == count_params(g, table)


def test_text_format():
    g = Genome((0, 6, 13, 4, 12, 3), (6, 5, 4, 4, 3, 3))
    assert encode(g) == "0 6 13 4 12 3 / 6 5 4 4 3 3"


def test_decode_error_kinds():
    good = encode(random_genome(FULL, np.random.default_rng(0)))
    blocks, channels = good.split("/")
    with pytest.raises(GenomeLegalityError):
        decode("19 " + " ".join(blocks.split()[1:]) + " /" + channels, FULL)
    with pytest.raises(GenomeLengthError):
        decode(" ".join(blocks.split()[:15]) + " / " + " ".join(channels.split()[:15]), FULL)
    with pytest.raises(GenomeFormatError):
        decode("0 1 2", FULL)
    with pytest.raises(GenomeFormatError):
        decode(blocks + "/ x" + channels, FULL)
    with pytest.raises(GenomeFormatError):
        decode(blocks + "/ " + "12 " * 16, FULL)


def test_param_table_csv():
    text = TABLE_MINI.to_csv().splitlines()
    assert text[0] == "layer,block,channel,count"
    assert text[1] == f"fixed,,,{TABLE_MINI.fixed}"
    # 2 stride-2 layers x 18 + 4 stride-1 layers x 22, times 10 channels
    assert len(text) - 2 == (2 * 18 + 4 * 22) * 10
