import itertools

import numpy as np
import pytest

from dcdl.binarize import BitPlane
from dcdl.bnn import (
    BnnArchitecture,
    Conv,
    Dense,
    MaxPool,
    Sign,
    build_model,
    maxpool_forward,
    predict_classes,
)
from dcdl.boolcore import (
    BitDataset,
    BitInstance,
    DnfFormula,
    Term,
    eval_formula,
    eval_formula_batch,
    format_formula,
)
from dcdl.convrules import ConvRule
from dcdl.errors import ContractError, RuleParseError
from dcdl.extraction import (
    ConvLayerApprox,
    DcdlModel,
    DenseApprox,
    PoolApprox,
    _derived_seeds,
    blackbox_train,
    dcdl_predict,
    dcdl_predict_batch,
    dcdl_train,
    load_dcdl,
    or_pool,
    parse_dcdl,
    save_dcdl,
    serialize_dcdl,
)
from dcdl.sls import SlsParams


def planes_from_bits(bits):
    return [BitPlane.from_bool_array(b) for b in bits]


# --- or_pool -----------------------------------------------------------------------

def test_or_pool_windows():
    plane = BitPlane.from_bool_array(np.zeros((1, 2, 2), dtype=bool))
    assert not or_pool(plane, 2, 2).to_bool_array().any()
    one = np.zeros((1, 2, 2), dtype=bool)
    one[0, 1, 0] = True
    assert or_pool(BitPlane.from_bool_array(one), 2, 2).to_bool_array().all()


def test_or_pool_indivisible():
    with pytest.raises(ContractError):
        or_pool(BitPlane.from_bool_array(np.zeros((1, 3, 4), dtype=bool)), 2, 2)


def test_or_pool_matches_maxpool_on_random_planes():
    rng = np.random.default_rng(0)
    for _ in range(30):
        vals = rng.random((2, 6, 4)) < 0.4
        plane = BitPlane.from_bool_array(vals)
        ored = or_pool(plane, 2, 2).to_bool_array()
        pooled = maxpool_forward(vals.astype(np.float64) * 2 - 1, 2, 2) > 0
        assert np.array_equal(ored, pooled)


# --- exact recovery of a hand-weighted filter -----------------------------------------

def exact_filter_network():
    """Input 5x5 -> conv 2x2 (window(0,0) AND NOT window(1,1)) -> pool 2x2 ->
    sign -> dense that fires class 1 when any pooled position matched."""
    arch = BnnArchitecture(
        layers=(Conv(1, 2, 2), MaxPool(2, 2), Sign(), Dense(2, 0.0)),
        input_shape=(1, 5, 5),
    )
    model = build_model(arch, seed=0)
    w = np.zeros((1, 1, 2, 2))
    w[0, 0, 0, 0] = 1.0
    w[0, 0, 1, 1] = -1.0
    model.weights[0]["w"] = w
    model.weights[0]["b"] = np.array([-1.0])
    d = np.zeros((4, 2))
    d[:, 1] = 1.0  # class 1 logit = sum of the four pooled signs, in {-4,-2,0,2,4}
    model.weights[-1]["w"] = d
    model.weights[-1]["b"] = np.array([-3.0, 0.0])  # class 1 iff any pooled bit is set
    return model


def test_dcdl_recovers_exact_filter_rule():
    rng = np.random.default_rng(1)
    model = exact_filter_network()
    bits = rng.random((750, 1, 5, 5)) < 0.5
    train_planes = planes_from_bits(bits[:600])
    hold_planes = planes_from_bits(bits[600:])
    dcdl = dcdl_train(model, train_planes, hold_planes,
                      SlsParams(k=4, max_iteration=8000, seed=0))
    rule = dcdl.layers[0].rules[0]
    # the filter's boolean function: window bit 0 true and window bit 3 false
    target = DnfFormula([Term.from_literals(4, pos=(0,), neg=(3,))], 4)
    for pattern in itertools.product([False, True], repeat=4):
        inst = BitInstance.from_bools(pattern)
        assert eval_formula(rule.formula, inst) == eval_formula(target, inst)


def test_dcdl_exactness_transfers_to_predictions():
    rng = np.random.default_rng(2)
    model = exact_filter_network()
    bits = rng.random((750, 1, 5, 5)) < 0.5
    dcdl = dcdl_train(model, planes_from_bits(bits[:600]), planes_from_bits(bits[600:]),
                      SlsParams(k=4, max_iteration=8000, seed=0))
    fresh = rng.random((300, 1, 5, 5)) < 0.5
    got = dcdl_predict_batch(dcdl, planes_from_bits(fresh))
    want = predict_classes(model, planes_from_bits(fresh)) == 1
    assert np.array_equal(got, want)


# --- dcdl_predict on a hand-built model --------------------------------------------

def hand_model():
    rule = ConvRule(DnfFormula([Term.from_literals(4, pos=(0,), neg=(3,))], 4), 2, 2, 1, 1)
    dense = DenseApprox(DnfFormula([Term.from_literals(4, pos=(0,))], 4))
    return DcdlModel([ConvLayerApprox([rule]), PoolApprox(2, 2), dense], (1, 5, 5))


def test_dcdl_predict_matches_manual_evaluation():
    rng = np.random.default_rng(3)
    model = hand_model()
    for _ in range(50):
        vals = rng.random((1, 5, 5)) < 0.5
        plane = BitPlane.from_bool_array(vals)
        # manual: rule plane 4x4, or-pool to 2x2, dense = bit 0 of the flattened pool
        rule_out = np.zeros((4, 4), dtype=bool)
        for i in range(4):
            for j in range(4):
                rule_out[i, j] = vals[0, i, j] and not vals[0, i + 1, j + 1]
        pooled = rule_out.reshape(2, 2, 2, 2).any(axis=(1, 3))
        want = bool(pooled.reshape(-1)[0])
        assert dcdl_predict(model, plane) == want


def test_all_vacuous_rules_feed_all_true_planes():
    rule = ConvRule(DnfFormula([Term.empty(4)], 4), 2, 2, 1, 1)
    dense = DenseApprox(DnfFormula([Term.from_literals(4, pos=(0, 1, 2, 3))], 4))
    model = DcdlModel([ConvLayerApprox([rule]), PoolApprox(2, 2), dense], (1, 5, 5))
    rng = np.random.default_rng(4)
    planes = planes_from_bits(rng.random((10, 1, 5, 5)) < 0.5)
    assert dcdl_predict_batch(model, planes).all()


# --- degenerate dense-only network ---------------------------------------------------

def test_dense_only_network_equals_blackbox():
    rng = np.random.default_rng(5)
    bits = rng.random((120, 1, 3, 3)) < 0.5
    planes = planes_from_bits(bits)
    arch = BnnArchitecture(layers=(Dense(2, 0.0),), input_shape=(1, 3, 3))
    model = build_model(arch, seed=6)
    params = SlsParams(k=2, max_iteration=400, seed=7)
    dcdl = dcdl_train(model, planes[:90], planes[90:], params)
    assert len(dcdl.layers) == 1 and isinstance(dcdl.layers[0], DenseApprox)

    nn_train = predict_classes(model, planes[:90]) == 1
    nn_hold = predict_classes(model, planes[90:]) == 1
    dense_seed = _derived_seeds(params.seed, 0, 0)[0]
    bb = blackbox_train(planes[:90], nn_train, "nn_prediction",
                        SlsParams(k=2, max_iteration=400, seed=dense_seed),
                        validation_images=planes[90:], validation_labels=nn_hold)
    assert format_formula(bb) == format_formula(dcdl.layers[0].formula)


# --- structure of the default pipeline -----------------------------------------------

def test_dcdl_structure_default_architecture():
    from dcdl.bnn import default_architecture

    rng = np.random.default_rng(6)
    bits = rng.random((40, 1, 10, 10)) < 0.5
    planes = planes_from_bits(bits)
    arch = default_architecture((1, 10, 10), filters1=3, filters2=4, pool=2)
    model = build_model(arch, seed=8)
    dcdl = dcdl_train(model, planes[:30], planes[30:],
                      SlsParams(k=2, max_iteration=50, seed=9))
    assert isinstance(dcdl.layers[0], ConvLayerApprox) and len(dcdl.layers[0].rules) == 3
    assert isinstance(dcdl.layers[1], ConvLayerApprox) and len(dcdl.layers[1].rules) == 4
    assert isinstance(dcdl.layers[2], PoolApprox)
    assert isinstance(dcdl.layers[3], DenseApprox)
    # 10x10 -> conv 8x8 -> conv 6x6 -> pool 3x3, 4 channels
    assert dcdl.layers[3].formula.n == 4 * 3 * 3


def test_dcdl_train_deterministic():
    rng = np.random.default_rng(7)
    bits = rng.random((30, 1, 6, 6)) < 0.5
    planes = planes_from_bits(bits)
    from dcdl.bnn import default_architecture

    arch = default_architecture((1, 6, 6), filters1=2, filters2=2, pool=1)
    model = build_model(arch, seed=1)
    params = SlsParams(k=2, max_iteration=60, seed=11)
    a = serialize_dcdl(dcdl_train(model, planes[:20], planes[20:], params))
    b = serialize_dcdl(dcdl_train(model, planes[:20], planes[20:], params))
    assert a == b


# --- black-box extraction -------------------------------------------------------------

def test_blackbox_planted_single_pixel_concept():
    rng = np.random.default_rng(8)
    bits = rng.random((300, 1, 4, 4)) < 0.5
    planes = planes_from_bits(bits)
    labels = bits[:, 0, 1, 2]  # flat variable index 6
    formula = blackbox_train(planes, labels, "true_label",
                             SlsParams(k=1, max_iteration=2000, seed=9))
    packed = np.stack([p.as_instance().bits for p in planes])
    assert np.array_equal(eval_formula_batch(formula, packed), labels)
    fresh = rng.random((500, 1, 4, 4)) < 0.5
    fresh_packed = np.stack([p.as_instance().bits for p in planes_from_bits(fresh)])
    assert np.array_equal(eval_formula_batch(formula, fresh_packed), fresh[:, 0, 1, 2])


def test_blackbox_mode_validation():
    rng = np.random.default_rng(9)
    planes = planes_from_bits(rng.random((10, 1, 2, 2)) < 0.5)
    with pytest.raises(ContractError):
        blackbox_train(planes, np.zeros(10, dtype=bool), "bogus",
                       SlsParams(k=1, max_iteration=10))


# --- serialization ---------------------------------------------------------------------

def test_dcdl_serialization_roundtrip(tmp_path):
    model = hand_model()
    text = serialize_dcdl(model)
    back = parse_dcdl(text)
    assert serialize_dcdl(back) == text
    path = tmp_path / "model.dcdl.txt"
    save_dcdl(model, path)
    loaded = load_dcdl(path)
    rng = np.random.default_rng(10)
    planes = planes_from_bits(rng.random((20, 1, 5, 5)) < 0.5)
    assert np.array_equal(dcdl_predict_batch(model, planes),
                          dcdl_predict_batch(loaded, planes))


def test_dcdl_parse_errors():
    with pytest.raises(RuleParseError):
        parse_dcdl("garbage")
    with pytest.raises(RuleParseError):
        parse_dcdl("dcdl-model v1\ninput 1 4 4\nconv 1 2 2 1 1\n(x0)\n")  # no end


def test_dcdl_geometry_validation():
    rule = ConvRule(DnfFormula([Term.empty(4)], 4), 2, 2, 1, 1)
    with pytest.raises(ContractError):
        DcdlModel([ConvLayerApprox([rule]), DenseApprox(DnfFormula([Term.empty(3)], 3))],
                  (1, 5, 5))
    with pytest.raises(ContractError):
        DcdlModel([ConvLayerApprox([rule])], (2, 5, 5))  # channel mismatch


def test_derived_seeds_are_stable_and_distinct():
    a = _derived_seeds(42, 1, 0)
    b = _derived_seeds(42, 1, 0)
    c = _derived_seeds(42, 1, 1)
    assert a == b
    assert a != c
