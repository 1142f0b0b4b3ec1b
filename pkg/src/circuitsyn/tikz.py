"""CircuiTikZ rendering of diagram layouts.

Each non-Open edge becomes one ``\\draw`` statement. Coordinates put grid
node (0, 0) at the origin, x growing right by ``h_spacing`` and y growing
up by ``v_spacing``.
"""
from __future__ import annotations

import os
import re
import shutil
import subprocess
import tempfile
from dataclasses import dataclass
from itertools import accumulate
from pathlib import Path

from .layout import CC_KINDS, VC_KINDS, DiagramLayout, EdgeSpec

COMPILER_ENV = "CIRCUITSYN_LATEX"
DEFAULT_COMPILER = "pdflatex"

SHAPES = {
    "Resistor": "R",
    "VSource": "V",
    "ISource": "I",
    "VCVS": "cV",
    "VCCS": "cI",
    "CCVS": "cV",
    "CCCS": "cI",
    "Short": "short",
}
UNIT_TEX = {
    "Ohm": r"\Omega",
    "kOhm": r"\mathrm{k}\Omega",
    "V": r"\mathrm{V}",
    "A": r"\mathrm{A}",
    "mA": r"\mathrm{mA}",
    "gain": "",
}

_PREAMBLE = r"""\documentclass[border=6pt]{standalone}
\usepackage[american]{circuitikz}
\begin{document}
\begin{circuitikz}
"""
_POSTAMBLE = r"""\end{circuitikz}
\end{document}
"""


class CompilerMissing(RuntimeError):
    pass


class CompileFailed(RuntimeError):
    def __init__(self, message: str, log: str):
        super().__init__(message)
        self.log = log


@dataclass(frozen=True)
class PlotProgram:
    source_text: str
    compiler_hint: str = "latex+circuitikz"


def tex_label(label: str) -> str:
    """``R12`` -> ``R_{12}``; labels without a numeric tail pass through."""
    m = re.fullmatch(r"([A-Za-z]+)(\d+)", label)
    return f"{m.group(1)}_{{{m.group(2)}}}" if m else label


def _annotation(edge: EdgeSpec, numeric: bool) -> str | None:
    if edge.kind == "Short":
        return None
    if edge.kind in VC_KINDS or edge.kind in CC_KINDS:
        ctrl = tex_label(edge.control_ref)
        if numeric:
            return f"{edge.value[0]}\\,{ctrl}"
        return f"{tex_label(edge.label)}\\,{ctrl}"
    if numeric:
        magnitude, unit = edge.value
        return f"{magnitude}\\,{UNIT_TEX[unit]}"
    return tex_label(edge.label)


def edge_statement(edge: EdgeSpec, xs: list[float], ys: list[float], numeric: bool) -> str:
    (r0, c0), (r1, c1) = edge.endpoints
    start, end = (xs[c0], ys[r0]), (xs[c1], ys[r1])
    if edge.is_component and edge.direction == 1:
        start, end = end, start
    opts = [SHAPES[edge.kind]]
    note = _annotation(edge, numeric)
    if note is not None:
        opts.append(f"l=${note}$")
    if edge.measurement is not None:
        meas = edge.measurement
        # measurement polarity is relative to the layout endpoint order, not the drawn direction
        forward = (meas.polarity == 0) != (edge.is_component and edge.direction == 1)
        key = "i" if meas.kind == "CurrentObs" else "v"
        arrow = ">" if forward else "<"
        opts.append(f"{key}{arrow}=${tex_label(meas.label)}$")
    return f"\\draw ({start[0]:.2f},{start[1]:.2f}) to[{', '.join(opts)}] ({end[0]:.2f},{end[1]:.2f});"


def render_tikz(layout: DiagramLayout) -> PlotProgram:
    xs = [0.0, *accumulate(layout.h_spacing)]
    ys = [0.0, *accumulate(layout.v_spacing)]
    numeric = layout.circuit_kind == "Numerical"
    body = [edge_statement(e, xs, ys, numeric) for e in layout.edges if e.kind != "Open"]
    return PlotProgram(_PREAMBLE + "\n".join(body) + "\n" + _POSTAMBLE)


def compile_tikz(program: PlotProgram, out_path: str | Path, timeout: float = 120.0) -> Path:
    """Compile with ``$CIRCUITSYN_LATEX`` (default ``pdflatex``) and copy the PDF to ``out_path``."""
    compiler = os.environ.get(COMPILER_ENV, DEFAULT_COMPILER)
    exe = shutil.which(compiler)
    if exe is None:
        raise CompilerMissing(f"LaTeX compiler {compiler!r} not found on PATH (set {COMPILER_ENV})")
    out_path = Path(out_path)
    with tempfile.TemporaryDirectory(prefix="circuitsyn-tex-") as tmp:
        tex = Path(tmp) / "diagram.tex"
        tex.write_text(program.source_text)
        proc = subprocess.run(
            [exe, "-interaction=nonstopmode", "-halt-on-error", tex.name],
            cwd=tmp,
            capture_output=True,
            text=True,
            timeout=timeout,
        )
        produced = Path(tmp) / "diagram.pdf"
        if proc.returncode != 0 or not produced.exists():
            raise CompileFailed(f"{compiler} exited with status {proc.returncode}", proc.stdout + proc.stderr)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(produced, out_path)
    return out_path
