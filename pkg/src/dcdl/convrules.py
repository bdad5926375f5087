"""Convolutional rules: a DNF over filter-window variables slid across a plane.

The rule text is fixed to one grid of relative positions, so the same
formula fires wherever its pattern appears; evaluating it at every valid
position yields an output plane, one bit per position.  Window variables
are numbered (channel*fh + row)*fw + col, matching the packed flat order.

Terms render as ternary images (positive literal white, negative black,
unused gray); whole rules reduce to one grayscale image by summing the
per-pixel literal balance over all k terms and rescaling to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .binarize import BitPlane
from .boolcore import (
    BitInstance,
    DnfFormula,
    Term,
    eval_formula_batch,
    format_formula,
    n_words,
    pack_bool_matrix,
    pack_bools,
    parse_formula,
    unpack_words,
)
from .errors import ContractError, RuleParseError


@dataclass
class ConvRule:
    formula: DnfFormula
    fh: int
    fw: int
    fc: int
    stride: int = 1

    def __post_init__(self):
        if self.formula.n != self.fh * self.fw * self.fc:
            raise ContractError(
                f"formula over {self.formula.n} variables does not match "
                f"filter {self.fc}x{self.fh}x{self.fw}")
        if self.stride < 1:
            raise ContractError("stride must be >= 1")


@dataclass
class WindowSet:
    """All valid filter windows of a plane, one packed instance per position,
    positions in row-major order."""

    bits: np.ndarray  # (P, W) uint64
    n: int
    out_h: int
    out_w: int

    def instance(self, i: int) -> BitInstance:
        return BitInstance(self.bits[i].copy(), self.n)

    def __len__(self) -> int:
        return self.bits.shape[0]


def _window_bool_matrix(values: np.ndarray, fh: int, fw: int, stride: int) -> np.ndarray:
    """(C, H, W) bools -> (P, C*fh*fw) window rows in row-major position order."""
    c, h, w = values.shape
    if fh > h or fw > w:
        raise ContractError(f"filter {fh}x{fw} exceeds plane {h}x{w}")
    win = sliding_window_view(values, (fh, fw), axis=(1, 2))[:, ::stride, ::stride]
    oh, ow = win.shape[1], win.shape[2]
    rows = win.transpose(1, 2, 0, 3, 4).reshape(oh * ow, c * fh * fw)
    return np.ascontiguousarray(rows), oh, ow


def extract_windows(plane: BitPlane, fh: int, fw: int, stride: int = 1) -> WindowSet:
    """Slide a fh x fw window over every channel of the plane (VALID, no pad)."""
    rows, oh, ow = _window_bool_matrix(plane.to_bool_array(), fh, fw, stride)
    return WindowSet(bits=pack_bool_matrix(rows), n=rows.shape[1], out_h=oh, out_w=ow)


def eval_conv_rule(rule: ConvRule, plane: BitPlane) -> BitPlane:
    """One output bit per position: the formula applied to that window."""
    if plane.channels != rule.fc:
        raise ContractError(f"rule expects {rule.fc} channels, plane has {plane.channels}")
    ws = extract_windows(plane, rule.fh, rule.fw, rule.stride)
    vals = eval_formula_batch(rule.formula, ws.bits)
    return BitPlane(width=ws.out_w, height=ws.out_h, channels=1,
                    bits=pack_bools(vals))


GRAY, BLACK, WHITE = 0.5, 0.0, 1.0


@dataclass
class RuleImage:
    """Grayscale raster in [0, 1]; ternary term views use {0, 0.5, 1} only."""

    width: int
    height: int
    pixels: np.ndarray  # (height, width) float

    def __post_init__(self):
        if self.pixels.shape != (self.height, self.width):
            raise ContractError(f"pixel shape {self.pixels.shape} != ({self.height}, {self.width})")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ContractError("pixels must lie in [0, 1]")


def term_to_image(term: Term, fh: int, fw: int) -> RuleImage:
    """Single-channel ternary rendering: white = required true, black = required
    false, gray = no influence."""
    if term.n != fh * fw:
        raise ContractError(
            f"term over {term.n} variables is not single-channel {fh}x{fw}; "
            "use term_to_images for multi-channel terms")
    pixels = np.full(fh * fw, GRAY)
    pixels[unpack_words(term.pos, term.n)] = WHITE
    pixels[unpack_words(term.neg, term.n)] = BLACK
    return RuleImage(width=fw, height=fh, pixels=pixels.reshape(fh, fw))


def term_to_images(term: Term, fh: int, fw: int, fc: int) -> list[RuleImage]:
    """One ternary image per channel."""
    if term.n != fh * fw * fc:
        raise ContractError(f"term over {term.n} variables does not match {fc}x{fh}x{fw}")
    pixels = np.full(term.n, GRAY)
    pixels[unpack_words(term.pos, term.n)] = WHITE
    pixels[unpack_words(term.neg, term.n)] = BLACK
    per_channel = pixels.reshape(fc, fh, fw)
    return [RuleImage(width=fw, height=fh, pixels=per_channel[c]) for c in range(fc)]


def image_to_term(img: RuleImage) -> Term:
    """Read a ternary image back into the term it renders (round-trip)."""
    flat = img.pixels.reshape(-1)
    pos = flat == WHITE
    neg = flat == BLACK
    if not np.all(pos | neg | (flat == GRAY)):
        raise ContractError("image is not ternary")
    n = flat.size
    return Term(pack_bool_matrix(pos[None, :])[0], pack_bool_matrix(neg[None, :])[0], n)


def _literal_balance(rule: ConvRule) -> np.ndarray:
    """(fc, fh, fw) sum over terms of +1 per positive, -1 per negative literal."""
    balance = np.zeros(rule.formula.n, dtype=np.int64)
    for t in rule.formula.terms:
        balance += unpack_words(t.pos, rule.formula.n)
        balance -= unpack_words(t.neg, rule.formula.n)
    return balance.reshape(rule.fc, rule.fh, rule.fw)


def _rescale_unit(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.full(values.shape, 0.5)
    return (values - lo) / (hi - lo)


def reduce_visualization(rule: ConvRule) -> RuleImage:
    """Sum literal contributions over all k terms and min-max rescale to [0, 1].
    A constant balance renders mid-gray."""
    if rule.fc != 1:
        raise ContractError("rule has multiple channels; use reduce_visualization_channels")
    values = _rescale_unit(_literal_balance(rule)[0].astype(np.float64))
    return RuleImage(width=rule.fw, height=rule.fh, pixels=values)


def reduce_visualization_channels(rule: ConvRule) -> list[RuleImage]:
    balance = _literal_balance(rule).astype(np.float64)
    return [RuleImage(width=rule.fw, height=rule.fh, pixels=_rescale_unit(balance[c]))
            for c in range(rule.fc)]


# --- image export ----------------------------------------------------------

def image_to_uint8(img: RuleImage) -> np.ndarray:
    """8-bit view: black 0, gray 128, white 255."""
    return np.rint(img.pixels * 255.0).astype(np.uint8)


def write_pgm(img: RuleImage, path) -> None:
    data = image_to_uint8(img)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.width} {img.height}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> RuleImage:
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise RuleParseError(f"{path}: not a binary PGM file")
    w, h = map(int, parts[1].split())
    if parts[2] != b"255":
        raise RuleParseError(f"{path}: unsupported maxval {parts[2]!r}")
    pixels = np.frombuffer(parts[3][: w * h], dtype=np.uint8).astype(np.float64) / 255.0
    return RuleImage(width=w, height=h, pixels=pixels.reshape(h, w))


def write_png(img: RuleImage, path) -> None:
    from PIL import Image

    Image.fromarray(image_to_uint8(img), mode="L").save(path, format="PNG")


# --- serialization -----------------------------------------------------------

def serialize_rule(rule: ConvRule) -> str:
    return f"conv {rule.fh} {rule.fw} {rule.fc} {rule.stride}\n{format_formula(rule.formula)}\n"


def parse_rule(text: str) -> ConvRule:
    lines = [line for line in text.strip().splitlines() if line.strip()]
    if len(lines) != 2 or not lines[0].startswith("conv "):
        raise RuleParseError("rule text must be a 'conv fh fw fc stride' header plus one formula line")
    try:
        fh, fw, fc, stride = map(int, lines[0].split()[1:])
    except ValueError as exc:
        raise RuleParseError(f"bad geometry header {lines[0]!r}") from exc
    formula = parse_formula(lines[1], fh * fw * fc)
    return ConvRule(formula=formula, fh=fh, fw=fw, fc=fc, stride=stride)
