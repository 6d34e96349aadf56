import json

import numpy as np
import pytest

from siamsearch.autograd import Tensor, default_dtype, softmax
from siamsearch.backbone import TinyBackbone
from siamsearch.errors import ConfigError, CorruptedSearchError, GenotypeError
from siamsearch.ops import OperationKind, block_forward
from siamsearch.supernet import (
    CellDims,
    CellRole,
    Genotype,
    alpha_snapshot,
    build_cell,
    build_supernet,
    cell_forward,
    composition,
    genotype_from_json,
    genotype_to_json,
    load_genotype,
    materialize,
    mixed_forward,
    parse_genotype,
    reference_genotype,
    save_genotype,
    skip_fraction,
)

RELU = OperationKind.LIN_BN_RELU
SKIP = OperationKind.IDENTITY
MAXP = OperationKind.MAX_POOL_3_BN


def test_cell_layer_widths_and_alpha_init():
    cell = build_cell("encoder", 3, CellDims(10, 8, 6), "S", seed=0)
    assert [(l.dim_in, l.dim_out) for l in cell.layers] == [(10, 8), (8, 8), (8, 6)]
    for layer in cell.layers:
        assert layer.alpha.shape == (7,)
        assert np.abs(layer.alpha.data).max() < 0.01
    assert cell.layers[0].adapter is not None
    assert cell.layers[1].adapter is None


def test_alphas_are_not_model_weights():
    cell = build_cell("predictor", 2, CellDims(6, 8, 6), "S_prime", seed=0)
    weight_ids = {id(p) for p in cell.parameters()}
    assert not weight_ids & {id(a) for a in cell.alphas()}
    assert all(a.shape == (5,) for a in cell.alphas())


def test_depth_bounds():
    with pytest.raises(ConfigError):
        build_cell("encoder", 7, CellDims(4, 4, 4))
    with pytest.raises(ConfigError):
        build_cell("predictor", 5, CellDims(4, 4, 4))
    with pytest.raises(ConfigError):
        build_cell("encoder", 0, CellDims(4, 4, 4))


def test_mixed_forward_is_the_softmax_weighted_sum(rng):
    with default_dtype(np.float64):
        cell = build_cell("encoder", 1, CellDims(4, 4, 5), "S", seed=2)
        layer = cell.layers[0]
        layer.alpha.data = rng.normal(size=7)
        x = Tensor(rng.normal(size=(6, 4)))
        weights = softmax(layer.alpha).data
        expected = sum(w * layer.block_output(b, x, "eval").data for w, b in zip(weights, layer.blocks))
        np.testing.assert_allclose(mixed_forward(layer, x, "eval").data, expected, rtol=1e-10)


def test_uniform_alphas_average_the_candidates(rng):
    with default_dtype(np.float64):
        layer = build_cell("encoder", 1, CellDims(4, 4, 4), "S", seed=4).layers[0]
        layer.alpha.data = np.zeros(7)
        x = Tensor(rng.normal(size=(6, 4)))
        expected = np.mean([layer.block_output(b, x, "eval").data for b in layer.blocks], axis=0)
        np.testing.assert_allclose(mixed_forward(layer, x, "eval").data, expected, atol=1e-5)


@pytest.mark.parametrize("index", range(7))
def test_a_wide_alpha_margin_selects_one_block(rng, index):
    layer = build_cell("encoder", 1, CellDims(4, 4, 4), "S", seed=5).layers[0]
    alpha = np.zeros(7, dtype=np.float32)
    alpha[index] = 40.0
    layer.alpha.data = alpha
    x = Tensor(rng.normal(size=(6, 4)))
    np.testing.assert_allclose(
        mixed_forward(layer, x, "eval").data, block_forward(layer.blocks[index], x, "eval").data, atol=1e-4
    )


def test_alpha_gradient_matches_finite_differences(rng, numeric):
    with default_dtype(np.float64):
        layer = build_cell("encoder", 1, CellDims(4, 4, 3), "S", seed=6).layers[0]
        layer.alpha.data = rng.normal(size=7)
        x = Tensor(rng.normal(size=(5, 4)))
        weights = Tensor(rng.normal(size=(5, 3)))

        def loss():
            return (mixed_forward(layer, x, "eval") * weights).sum()

        loss().backward()
        np.testing.assert_allclose(
            layer.alpha.grad, numeric(lambda: loss().item(), layer.alpha.data), rtol=1e-5, atol=1e-8
        )


def test_cell_saturated_on_identity_passes_the_input_through(rng):
    with default_dtype(np.float64):
        cell = build_cell("encoder", 3, CellDims(4, 4, 4), "S", seed=7)
        for layer in cell.layers:
            alpha = np.zeros(7)
            alpha[layer.kinds.index(SKIP)] = 40.0
            layer.alpha.data = alpha
        x = rng.normal(size=(5, 4))
        np.testing.assert_allclose(cell_forward(cell, Tensor(x), "eval").data, x, atol=1e-8)


def test_parsing_ignores_a_constant_alpha_shift(rng):
    with default_dtype(np.float64):
        cell = build_cell("encoder", 4, CellDims(4, 4, 4), "S", seed=8)
        for layer in cell.layers:
            layer.alpha.data = rng.normal(size=7)
        before = parse_genotype(cell)
        for shift in (5.0, -2.5):
            for layer in cell.layers:
                layer.alpha.data = layer.alpha.data + shift
            assert parse_genotype(cell) == before


def test_nan_alpha_cannot_be_parsed():
    cell = build_cell("encoder", 2, CellDims(4, 4, 4), "S", seed=0)
    cell.layers[1].alpha.data = np.array([0.0, np.nan, 0.0, 0.0, 0.0, 0.0, 0.0], dtype=np.float32)
    with pytest.raises(CorruptedSearchError) as info:
        parse_genotype(cell)
    assert info.value.diagnostic["layer"] == 1


def test_all_identity_heads_are_the_identity_map(rng):
    g = Genotype((SKIP,) * 3, (SKIP,) * 2, "S")
    encoder, predictor = materialize(g, CellDims(4, 4, 4), CellDims(4, 4, 4), seed=0)
    assert encoder.layers == [] and predictor.layers == []
    assert encoder.parameters() == []
    x = Tensor(rng.normal(size=(3, 4)))
    np.testing.assert_array_equal(predictor.forward(encoder.forward(x)).data, x.data)


def test_one_hot_alpha_reduces_to_the_chosen_block(rng):
    with default_dtype(np.float64):
        cell = build_cell("encoder", 1, CellDims(4, 4, 4), "S", seed=3)
        layer = cell.layers[0]
        alpha = np.full(7, -1e4)
        alpha[2] = 0.0
        layer.alpha.data = alpha
        x = Tensor(rng.normal(size=(5, 4)))
        np.testing.assert_allclose(
            mixed_forward(layer, x, "eval").data, block_forward(layer.blocks[2], x, "eval").data, atol=1e-12
        )


def test_alpha_gradients_flow_through_the_mixture(rng):
    cell = build_cell("encoder", 2, CellDims(4, 6, 3), "S", seed=1)
    y = cell.forward(Tensor(rng.normal(size=(5, 4))))
    (y * y).sum().backward()
    assert all(a.grad is not None and np.isfinite(a.grad).all() for a in cell.alphas())


def test_alpha_snapshot_rows_sum_to_one():
    cell = build_cell("encoder", 3, CellDims(4, 4, 4), "S", seed=0)
    for row in alpha_snapshot(cell):
        assert sum(row) == pytest.approx(1.0, abs=1e-9)


def test_argmax_ties_go_to_the_lowest_index():
    cell = build_cell("encoder", 2, CellDims(4, 4, 4), "S", seed=0)
    cell.layers[0].alpha.data = np.zeros(7, dtype=np.float32)
    alpha = np.zeros(7, dtype=np.float32)
    alpha[[4, 6]] = 1.0
    cell.layers[1].alpha.data = alpha
    g = parse_genotype(cell, seed=5, search_epochs=3)
    assert g.encoder == (RELU, MAXP)
    assert g.predictor is None
    assert (g.seed, g.search_epochs) == (5, 3)


def test_genotype_json_has_exactly_the_documented_fields(tmp_path):
    g = Genotype((RELU, SKIP), (RELU,), "S", seed=2, search_epochs=10)
    data = genotype_to_json(g)
    assert set(data) == {"encoder", "predictor", "space", "seed", "search_epochs"}
    assert data["encoder"] == ["lin_bn_relu", "identity"]

    path = save_genotype(g, tmp_path / "genotype.json")
    assert load_genotype(path) == g
    assert json.loads(path.read_text()) == data


def test_genotype_rejects_extra_fields_and_foreign_kinds():
    data = genotype_to_json(reference_genotype())
    with pytest.raises(GenotypeError):
        genotype_from_json(data | {"notes": "x"})
    with pytest.raises(GenotypeError):
        genotype_from_json(data | {"encoder": ["lin_bn_relu", "conv"]})
    with pytest.raises(GenotypeError):
        genotype_from_json(data | {"space": "S_prime", "encoder": ["max_pool_3_bn"]})
    with pytest.raises(GenotypeError):
        genotype_from_json(data | {"encoder": ["identity"] * 7})


def test_unreadable_genotype_file(tmp_path):
    path = tmp_path / "g.json"
    path.write_text("{not json")
    with pytest.raises(GenotypeError):
        load_genotype(path)


def test_skip_fraction_and_composition():
    g = Genotype((RELU, SKIP, SKIP, MAXP), (SKIP, RELU), "S")
    assert skip_fraction(g) == pytest.approx(0.5)
    counts = composition(g)
    assert counts["encoder"]["identity"] == 2
    assert counts["predictor"]["lin_bn_relu"] == 1
    assert sum(counts["encoder"].values()) == 4


def test_reference_genotype():
    g = reference_genotype()
    assert g.encoder == (RELU,) * 3
    assert g.predictor == (RELU,) * 2
    assert skip_fraction(g) == 0.0


def test_materialize_drops_width_preserving_identity(rng):
    g = Genotype((RELU, SKIP, RELU), (RELU, RELU), "S")
    encoder, predictor = materialize(g, CellDims(8, 6, 4), CellDims(4, 6, 4), seed=0)
    assert encoder.depth == 3
    assert encoder.effective_depth == 2
    assert len(encoder.layers) == 2
    final = predictor.layers[-1].block
    assert not final.bn_enabled and not final.activation_enabled
    y = predictor.forward(encoder.forward(Tensor(rng.normal(size=(3, 8)))))
    assert y.shape == (3, 4)


def test_materialize_keeps_an_adapter_for_identity_that_changes_width():
    g = Genotype((SKIP,), None, "S")
    encoder, predictor = materialize(g, CellDims(8, 6, 4), seed=0)
    assert predictor is None
    assert len(encoder.layers) == 1
    assert encoder.layers[0].adapter is not None
    assert encoder.forward(Tensor(np.ones((2, 8)))).shape == (2, 4)


def test_materialize_checks_predictor_dims():
    with pytest.raises(GenotypeError):
        materialize(reference_genotype(), CellDims(8, 6, 4))
    with pytest.raises(GenotypeError):
        materialize(reference_genotype(), CellDims(8, 6, 4), CellDims(5, 6, 4))


def test_supernet_separates_weights_and_alphas():
    net = build_supernet(TinyBackbone.create((2, 2, 4), 0), 2, 2, 6, 3, "S", seed=0)
    weights, alphas = net.weights(), net.alphas()
    assert len(alphas) == 4
    assert not {id(p) for p in weights} & {id(a) for a in alphas}
    assert net.genotype().space == "S"
    assert len(net.genotype().encoder) == 2


def test_supernet_without_predictor():
    net = build_supernet(TinyBackbone.create((2, 2, 4), 0), 3, None, 6, 3, "S_prime", seed=0)
    assert net.predictor is None
    assert net.genotype().predictor is None
    assert [c.role for c in net.cells()] == [CellRole.ENCODER]
