import math
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from circuitsyn.sim import (
    IncompleteDeck,
    Singular,
    SimulationResult,
    UnknownSenseBranch,
    build_mna,
    check_valid,
    lu_factor,
    lu_solve,
    simulate,
    solve_linear,
)
from circuitsyn.spice import parse_spice

from conftest import DIVIDER, close, sampled_decks
from oracle import probe_values

LOOP = "* loop\nV1 a 0 10\nR1 a 0 5\n.OP\n.PRINT I(V1)\n.END\n"


def test_loop_mna_shape_and_sign():
    system = build_mna(parse_spice(LOOP))
    assert system.size == 2
    assert list(system.node_index) == ["a"] and list(system.aux_index) == ["V1"]
    res = simulate(LOOP)
    assert res.values == {"I(V1)": -2.0}
    assert res.raw_node_voltages["a"] == 10.0


def test_divider():
    res = simulate(DIVIDER)
    assert res.status == "Ok"
    assert res.values["U1"] == pytest.approx(5.0, rel=1e-12)
    assert res.values["Im1"] == pytest.approx(-1.0, rel=1e-12)


def test_unlabeled_probe_key():
    res = simulate("* d\nV1 in 0 10\nR1 in mid 1k\nR2 mid 0 1k\n.OP\n.PRINT V(mid)\n.END\n")
    assert res.values == {"V(mid)": 5.0}


def test_no_probes_reports_all_nodes():
    res = simulate("V1 in 0 10\nR1 in mid 1k\nR2 mid 0 1k\n.OP\n.END\n")
    assert res.values == {"V(in)": 10.0, "V(mid)": 5.0}


def test_parallel_sources_singular():
    res = simulate("V1 a 0 10\nV2 a 0 5\n.OP\n.PRINT V(a)\n.END\n")
    assert res.status == "Singular"
    assert res.values == {}
    assert not check_valid(res)


def test_floating_node_singular():
    res = simulate("V1 a 0 10\nR1 a 0 1\nI1 b c 1\n.OP\n.PRINT V(a)\n.END\n")
    assert res.status == "Singular"


def test_incomplete():
    deck = parse_spice("V1 a 0 <Empty>\nR1 a 0 1\n.OP\n.END\n")
    with pytest.raises(IncompleteDeck):
        build_mna(deck)
    res = simulate(deck)
    assert res.status == "Incomplete" and res.values == {}


def test_parse_failed_status():
    assert simulate("garbage here\n").status == "ParseFailed"


def test_cccs_sensing_resistor():
    deck = parse_spice("V1 a 0 1\nR1 a 0 1\nF1 b 0 R1 2\nR2 b 0 1\n.OP\n.END\n")
    with pytest.raises(UnknownSenseBranch):
        build_mna(deck)
    assert simulate(deck).status == "ParseFailed"


def test_balanced_bridge():
    res = simulate(
        "V1 top 0 12\nR1 top l 100\nR2 top r 100\nR3 l 0 100\nR4 r 0 100\n"
        "V_Im1 l r 0\n.OP\n.PRINT Im1=I(V_Im1)\n.END\n"
    )
    assert res.values["Im1"] == 0.0


def test_check_valid_nan_guard():
    assert check_valid(SimulationResult("Ok", {"U1": 1.0}))
    assert not check_valid(SimulationResult("Ok", {"U1": float("nan")}))
    assert not check_valid(SimulationResult("Ok", {}))


def test_result_json_roundtrip():
    res = simulate(DIVIDER)
    back = SimulationResult.from_dict(res.to_dict())
    assert back.values == res.values and back.status == res.status
    assert res.meta["temperature_c"] == 27.0


# -- LU ---------------------------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_lu_matches_numpy(n, seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, n))
    assume(np.linalg.cond(A) < 1e8)
    b = rng.normal(size=n)
    lu, perm = lu_factor(A)
    x = lu_solve(lu, perm, b)
    np.testing.assert_allclose(np.asarray(x, dtype=float), np.linalg.solve(A, b), rtol=1e-7, atol=1e-9)


def test_lu_singular():
    with pytest.raises(Singular):
        lu_factor(np.array([[1.0, 2.0], [2.0, 4.0]]))
    with pytest.raises(Singular):
        lu_factor(np.zeros((2, 2)))


def test_equilibrated_solve_handles_wide_scales():
    A = np.array([[1e-6, 1.0], [1.0, 3e5]])
    b = np.array([1.0, 2.0])
    x = np.asarray(solve_linear(A, b), dtype=float)
    np.testing.assert_allclose(A @ x, b, rtol=1e-9)


# -- properties over sampled circuits ------------------------------------------------

_INDEPENDENT = ("VSource", "ISource")


def _kcl_ok(deck, res):
    currents = res.branch_currents
    nodes = deck.node_set() - {"0"}
    scale = 1 + max(abs(i) for i in currents.values())
    for n in nodes:
        total = sum(i for name, i in currents.items()
                    if deck.element(name).n_plus == n) - sum(
            i for name, i in currents.items() if deck.element(name).n_minus == n)
        if abs(total) > 1e-9 * scale:
            return False
    return True


def _scale_sources(deck, alpha, keep=None):
    elements = []
    for e in deck.elements:
        if e.kind in _INDEPENDENT:
            factor = alpha if keep is None or e.name == keep else 0
            e = replace(e, value=e.value * factor)
        elements.append(e)
    return replace(deck, elements=elements)


def _agree(a, b, rel=1e-9):
    scale = 1 + max(abs(v) for v in b.values())
    return set(a) == set(b) and all(math.isclose(a[k], b[k], rel_tol=rel, abs_tol=rel * scale) for k in b)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**31))
def test_kcl_residual_property(seed):
    (_, deck), = sampled_decks(1, seed=seed)
    res = simulate(deck)
    assume(res.ok)
    assert _kcl_ok(deck, res)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([Fraction(-3), Fraction(1, 2), Fraction(7, 3), Fraction(10)]))
def test_linearity_property(seed, alpha):
    (_, deck), = sampled_decks(1, seed=seed)
    base = simulate(deck)
    assume(base.ok)
    scaled = simulate(_scale_sources(deck, alpha))
    assert scaled.ok
    expect = {k: float(alpha) * v for k, v in base.values.items()}
    assert _agree(scaled.values, expect)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_superposition_property(seed):
    (_, deck), = sampled_decks(
        1, seed=seed,
        component_type_dist={"Resistor": 0.5, "VSource": 0.1, "ISource": 0.1, "VCVS": 0.0, "VCCS": 0.0,
                             "CCVS": 0.0, "CCCS": 0.0, "Short": 0.15, "Open": 0.15},
    )
    sources = [e.name for e in deck.elements if e.kind in _INDEPENDENT]
    assume(len(sources) >= 2)
    full = simulate(deck)
    assume(full.ok)
    parts = [simulate(_scale_sources(deck, 1, keep=s)) for s in sources]
    assert all(p.ok for p in parts)
    total = {k: sum(p.values[k] for p in parts) for k in full.values}
    assert _agree(full.values, total)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_matches_exact_oracle(seed):
    (_, deck), = sampled_decks(1, seed=seed)
    res = simulate(deck)
    assume(res.ok)
    exact = probe_values(deck)
    assert all(close(res.values[k], v) for k, v in exact.items())
