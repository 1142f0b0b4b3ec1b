from dataclasses import replace
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from circuitsyn.layout import DiagramLayout, EdgeSpec, Measurement, grid_edges
from circuitsyn.netlist import (
    REF,
    Branch,
    Disconnected,
    DanglingControl,
    Netlist,
    UnionFind,
    equipotential_node_count,
    extract_netlist,
    netlist_equal,
)

from conftest import sampled_decks
from test_layout import square


def test_union_find():
    uf = UnionFind(range(6))
    uf.union(0, 1)
    uf.union(2, 3)
    uf.union(1, 3)
    assert uf.find(0) == uf.find(2)
    assert uf.find(4) != uf.find(0)
    assert uf.union(0, 0) == uf.find(0)


def test_top_wire_square():
    # bottom V, top wire, left and right resistors
    layout = square(["VSource", "Short", "Resistor", "Resistor"])
    net = extract_netlist(layout)
    assert equipotential_node_count(net) == 3
    assert len(net.branches) == 3
    assert REF in net.nodes


def test_lone_resistor_disconnected():
    layout = square(["Open", "Resistor", "Open", "Open"])
    with pytest.raises(Disconnected):
        extract_netlist(layout).validate()


def test_short_with_current_obs_is_ammeter():
    edges = []
    kinds = ["VSource", "Short", "Resistor", "Resistor"]
    for i, ((a, b), kind) in enumerate(zip(grid_edges(2, 2), kinds)):
        if kind == "Short":
            edges.append(EdgeSpec((a, b), kind, measurement=Measurement("CurrentObs", "I1")))
        else:
            edges.append(EdgeSpec((a, b), kind, value=(5, "V") if kind == "VSource" else (10, "Ohm"), label=f"X{i}"))
    net = extract_netlist(DiagramLayout(2, 2, [1.0], [1.0], edges))
    amm = net.branch("V_I1")
    assert amm.kind == "Ammeter" and amm.value == 0
    (meas,) = net.measurements
    assert meas.label == "I1" and meas.kind == "CurrentObs" and meas.branch == "V_I1"
    assert equipotential_node_count(net) == 4


def test_current_obs_on_component_adds_series_ammeter():
    edges = []
    kinds = ["VSource", "Resistor", "Resistor", "Resistor"]
    for i, ((a, b), kind) in enumerate(zip(grid_edges(2, 2), kinds)):
        meas = Measurement("CurrentObs", "Im1") if i == 1 else None
        value = (5, "V") if kind == "VSource" else (10, "Ohm")
        edges.append(EdgeSpec((a, b), kind, value=value, label=f"{kind[0]}{i}", measurement=meas))
    net = extract_netlist(DiagramLayout(2, 2, [1.0], [1.0], edges))
    assert net.internal_nodes
    assert equipotential_node_count(net) == 4
    assert len(net.nodes) == 5
    assert net.branch("V_Im1").kind == "Ammeter"


def _divider_net():
    return Netlist(
        {"0", "1", "2"},
        [
            Branch("V1", "VSource", "1", "0", Fraction(10)),
            Branch("R1", "Resistor", "1", "2", Fraction(5)),
            Branch("R2", "Resistor", "2", "0", Fraction(5)),
        ],
    )


def test_equal_under_renaming():
    a = _divider_net()
    ren = {"1": "2", "2": "1", "0": "0"}
    b = Netlist(
        {ren[n] for n in a.nodes},
        [replace(x, n_plus=ren[x.n_plus], n_minus=ren[x.n_minus]) for x in a.branches],
    )
    assert netlist_equal(a, b)


def test_value_difference_detected():
    a = _divider_net()
    b = _divider_net()
    b.branches[1] = replace(b.branches[1], value=Fraction(6))
    assert not netlist_equal(a, b)


def test_polarity_free_only_for_resistors():
    a = _divider_net()
    b = _divider_net()
    b.branches[1] = replace(b.branches[1], n_plus="2", n_minus="1")
    assert netlist_equal(a, b)
    c = _divider_net()
    c.branches[0] = replace(c.branches[0], n_plus="0", n_minus="1")
    assert not netlist_equal(a, c)


def test_dangling_control():
    net = Netlist({"0", "1"}, [
        Branch("V1", "VSource", "1", "0", Fraction(1)),
        Branch("F1", "CCCS", "1", "0", Fraction(2), "V_nope"),
    ])
    with pytest.raises(DanglingControl):
        net.validate()


def test_dict_roundtrip():
    (layout, _), = sampled_decks(1, seed=77)
    net = extract_netlist(layout)
    assert Netlist.from_dict(net.to_dict()) == net


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_extraction_properties(seed):
    (layout, _), = sampled_decks(1, seed=seed)
    net = extract_netlist(layout)
    net.validate()
    assert netlist_equal(net, extract_netlist(layout))
    assert equipotential_node_count(net) <= layout.m * layout.n
    live = sum(1 for e in layout.edges if e.is_component)
    ammeters = sum(1 for b in net.branches if b.kind == "Ammeter")
    assert len(net.branches) == live + ammeters
    wires = any(e.kind == "Short" and e.measurement is None for e in layout.edges)
    if wires:
        assert equipotential_node_count(net) < layout.m * layout.n
