from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from circuitsyn.netlist import extract_netlist, netlist_equal
from circuitsyn.spice import (
    EMPTY,
    DanglingReference,
    SpiceSyntaxError,
    UnknownElementKind,
    deck_to_netlist,
    emit_spice,
    extract_value_map,
    format_value,
    parse_spice,
    parse_value,
    refine_deck,
    strip_code_fences,
    unit_scale,
)

from conftest import DIVIDER, sampled_decks


@pytest.mark.parametrize(
    "token, expected",
    [
        ("5", Fraction(5)),
        ("5k", Fraction(5000)),
        ("5K", Fraction(5000)),
        ("10m", Fraction(1, 100)),
        ("2.2meg", Fraction(2200000)),
        ("1MEG", Fraction(10**6)),
        ("3u", Fraction(3, 10**6)),
        ("4.7kohm", Fraction(4700)),
        ("1e3", Fraction(1000)),
        ("-2", Fraction(-2)),
        ("10V", Fraction(10)),
    ],
)
def test_parse_value(token, expected):
    assert parse_value(token) == expected


@pytest.mark.parametrize("token", ["abc", "", "5x", "k5"])
def test_parse_value_rejects(token):
    with pytest.raises(ValueError):
        parse_value(token)


@pytest.mark.parametrize(
    "value, text",
    [(Fraction(5000), "5k"), (Fraction(3, 1000), "3m"), (Fraction(7), "7"), (Fraction(0), "0"),
     (Fraction(2 * 10**6), "2meg"), (Fraction(1500), "1500"), (Fraction(1, 4), "250m")],
)
def test_format_value(value, text):
    assert format_value(value) == text


@given(st.integers(-10**9, 10**9), st.sampled_from([1, 1000, 10**6, Fraction(1, 1000), Fraction(1, 10**6)]))
def test_value_text_roundtrip(mag, scale):
    v = Fraction(mag) * scale
    assert parse_value(format_value(v)) == v


def test_parse_divider():
    deck = parse_spice(DIVIDER)
    assert deck.title == "divider"
    assert [e.name for e in deck.elements] == ["V1", "R1", "R2"]
    assert deck.element("R1").value == 5
    assert [p.key for p in deck.probes] == ["U1", "Im1"]
    assert deck.end_marker


def test_emit_is_parse_fixed_point():
    text = parse_spice(DIVIDER).to_text()
    assert parse_spice(text).to_text() == text


def test_unlabeled_probe_keys_on_expression():
    deck = parse_spice("* t\nV1 a 0 1\nR1 a 0 1\n.OP\n.PRINT V(a,0) I(R1)\n.END\n")
    assert [p.key for p in deck.probes] == ["V(a)", "I(R1)"]
    assert ".PRINT V(a) I(R1)" in deck.to_text()


def test_dc_keyword_and_gnd_alias():
    deck = parse_spice("V1 a gnd DC 5\nR1 a 0 1\n.op\n.print dc V(a)\n.end\n")
    assert deck.element("V1").n_minus == "0"
    assert deck.element("V1").value == 5


def test_controlled_cards():
    deck = parse_spice(
        "* c\nV1 1 0 1\nR1 1 2 1\nV_Im1 2 0 0\nE1 3 0 1 2 2\nR2 3 0 1\nG1 4 0 1 0 3\nR3 4 0 1\n"
        "H1 5 0 V_Im1 4\nR4 5 0 1\nF1 6 0 V_Im1 5\nR5 6 0 1\n.OP\n.END\n"
    )
    kinds = {e.name: e.kind for e in deck.elements}
    assert kinds["V_Im1"] == "Ammeter"
    assert kinds["E1"] == "VCVS" and deck.element("E1").control == ("1", "2")
    assert kinds["H1"] == "CCVS" and deck.element("H1").control == "V_Im1"
    assert kinds["F1"] == "CCCS"


def test_empty_token():
    deck = parse_spice(f"V1 a 0 {EMPTY}\nR1 a 0 {EMPTY}\n.OP\n.END\n")
    assert not deck.is_complete
    assert deck.empty_names == ["V1", "R1"]
    assert EMPTY in deck.to_text()


@pytest.mark.parametrize(
    "text, exc",
    [
        ("X1 a 0 1\n.OP\n.END\n", UnknownElementKind),
        ("R1 a 0\n.OP\n.END\n", SpiceSyntaxError),
        ("R1 a 0 1\n.END\n", SpiceSyntaxError),
        ("R1 a 0 1\n.OP\n.OP\n.END\n", SpiceSyntaxError),
        ("R1 a 0 1\nR1 a 0 2\n.OP\n.END\n", SpiceSyntaxError),
        ("R1 a 0 -1\n.OP\n.END\n", SpiceSyntaxError),
        ("R1 a 0 1\nF1 a 0 V9 2\n.OP\n.END\n", DanglingReference),
        ("R1 a 0 1\nE1 a 0 b 0 2\n.OP\n.END\n", DanglingReference),
        ("R1 a 0 1\n.OP\n.PRINT V(zz)\n.END\n", DanglingReference),
        ("R1 a 0 1\n.OP\n.TRAN 1 2\n.END\n", SpiceSyntaxError),
        ("R1 a 0 1\n.OP\n.END\nR2 a 0 1\n", SpiceSyntaxError),
    ],
)
def test_parse_errors(text, exc):
    with pytest.raises(exc) as info:
        parse_spice(text)
    assert info.value.line >= 1


def test_error_reports_line_number():
    with pytest.raises(UnknownElementKind) as info:
        parse_spice("* t\nR1 a 0 1\nQ1 a b c\n.OP\n.END\n")
    assert info.value.line == 3


def test_roundtrip_on_samples():
    for layout, _ in sampled_decks(150, seed=11):
        net = extract_netlist(layout)
        text = emit_spice(net).to_text()
        back = parse_spice(text)
        assert back.to_text() == text
        assert netlist_equal(deck_to_netlist(back), net)


def test_label_decks_carry_empty():
    for layout, _ in sampled_decks(40, seed=5, circuit_kind={"Label": 1.0}):
        deck = emit_spice(extract_netlist(layout))
        comps = [e for e in deck.elements if e.kind != "Ammeter"]
        assert all(e.value is None for e in comps)


# -- refine / value map -------------------------------------------------------


def test_extract_value_map():
    vm = extract_value_map("In the circuit, R1 = 10 Ω, R2 = 2 kΩ, V1 = 5 V, I1 = 3 mA and E1 = 4. Find U1.")
    assert vm["R1"] == (10, "Ω")
    assert vm["R2"] == (2, "kΩ")
    assert vm["V1"] == (5, "V")
    assert vm["I1"] == (3, "mA")
    assert vm["E1"] == (4, "")


@pytest.mark.parametrize("unit, scale", [("kΩ", 1000), ("Ohm", 1), ("kOhm", 1000), ("mA", Fraction(1, 1000)), ("", 1), ("gain", 1)])
def test_unit_scale(unit, scale):
    assert unit_scale(unit) == scale


def test_refine_from_value_map():
    deck = parse_spice(f"V1 a 0 {EMPTY}\nR1 a 0 {EMPTY}\n.OP\n.END\n")
    out = refine_deck(deck, {"V1": (5, "V"), "R1": (2, "kΩ")})
    assert out.is_complete
    assert out.element("R1").value == 2000


def test_refine_without_client_leaves_incomplete():
    deck = parse_spice(f"V1 a 0 {EMPTY}\nR1 a 0 {EMPTY}\n.OP\n.END\n")
    out = refine_deck(deck, {"V1": (5, "V")})
    assert not out.is_complete and out.empty_names == ["R1"]


def test_refine_is_noop_on_complete_deck():
    class Boom:
        def complete(self, prompt, image=None):
            raise AssertionError("client must not be called")

    deck = parse_spice(DIVIDER)
    assert refine_deck(deck, {}, Boom()) is deck


def test_refine_asks_client_for_leftovers():
    class Filler:
        prompts = []

        def complete(self, prompt, image=None):
            self.prompts.append(prompt)
            return "```spice\nV1 a 0 5\nR1 a 0 7\n.OP\n.END\n```"

    deck = parse_spice(f"V1 a 0 {EMPTY}\nR1 a 0 {EMPTY}\n.OP\n.END\n")
    transcript = []
    client = Filler()
    out = refine_deck(deck, {"V1": (9, "V")}, client, "q", transcript)
    assert out.element("V1").value == 9  # text wins over the model
    assert out.element("R1").value == 7
    assert len(client.prompts) == 1 and "{" not in client.prompts[0].replace("{}", "")
    assert transcript[0]["step"] == "refine"


def test_strip_code_fences():
    assert strip_code_fences("x\n```spice\nR1 a 0 1\n```\n") == "R1 a 0 1\n"
    assert strip_code_fences("R1 a 0 1") == "R1 a 0 1"


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_emit_roundtrip_property(index):
    (layout, _), = sampled_decks(1, seed=index)
    text = emit_spice(extract_netlist(layout)).to_text()
    assert parse_spice(text).to_text() == text
