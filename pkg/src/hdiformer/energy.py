"""Analytic operation counts and energy estimates for both branches.

Counting conventions:

* Dense products (linear, matmul, conv) cost one op per multiply-add. They
  are MAC when the activation operand is real-valued and AC when it holds
  spikes or integer spike sums (every product becomes a gated addition).
* Bias, residual, mask and injection additions are AC in both branches.
* Softmax costs ``SOFTMAX_MAC`` MAC per element.
* Normalization (folded into the adjacent linear map at inference),
  activations, scalar scaling, pooling and LIF state updates are not counted.

Per block the energy is ``T * (f * E_A * OP_A + E_M * OP_M)`` in pJ.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Union

from .ann_attention import layout_for
from .errors import ParameterError, ReportingError, StateError
from .lif import FiringMeter

SOFTMAX_MAC = 4
CSV_COLUMNS = ("block", "T", "f", "OP_A", "OP_M", "pJ")


@dataclass(frozen=True)
class EnergyConstants:
    e_ac: float = 0.9  # pJ per accumulate
    e_mac: float = 4.6  # pJ per multiply-accumulate

    def __post_init__(self):
        if not (self.e_ac > 0 and self.e_mac > 0):
            raise ParameterError(f"energy constants must be > 0, got {self.e_ac}, {self.e_mac}")


@dataclass(frozen=True)
class BlockOps:
    """Per-timestep op counts of one named block, itemized by term."""

    name: str
    branch: str  # ann | snn | interaction | head
    steps: int
    terms: tuple = ()  # (term, "AC" | "MAC", count)

    @property
    def op_a(self) -> int:
        return sum(n for _, kind, n in self.terms if kind == "AC")

    @property
    def op_m(self) -> int:
        return sum(n for _, kind, n in self.terms if kind == "MAC")

    def term(self, name: str) -> int:
        return sum(n for t, _, n in self.terms if t == name)


@dataclass
class OpCount:
    blocks: list = field(default_factory=list)

    def __getitem__(self, name: str) -> BlockOps:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    def names(self) -> list:
        return [b.name for b in self.blocks]

    def totals(self, branch: Optional[str] = None) -> tuple[int, int]:
        """(AC, MAC) summed over blocks and timesteps."""
        sel = [b for b in self.blocks if branch is None or b.branch == branch]
        return sum(b.steps * b.op_a for b in sel), sum(b.steps * b.op_m for b in sel)


class _Terms:
    def __init__(self):
        self.items = []

    def ac(self, term: str, n: int) -> None:
        if n:
            self.items.append((term, "AC", int(n)))

    def mac(self, term: str, n: int) -> None:
        if n:
            self.items.append((term, "MAC", int(n)))


def _pairs(n: int) -> int:
    return n * (n + 1) // 2


def _ann_block(c, hw, heads, window, shifted, mlp_ratio, use_rse, paired) -> tuple:
    h, w = hw
    lay, _ = layout_for(h, w, window, shifted)
    nw, n = lay.n_windows, lay.tokens
    tok, real, d = nw * n, h * w, c // heads
    attn = nw * heads * n * n
    t = _Terms()
    t.mac("qkv", tok * c * 3 * c)
    t.mac("qk", attn * d)
    if use_rse:
        hid = max(c // 4, 1)
        t.ac("rse.diff", nw * _pairs(n) * c)
        t.mac("rse.inner", nw * _pairs(n) * c * hid)
        t.mac("rse.outer", nw * _pairs(n) * hid)
        t.ac("sem_bias", attn)
    t.ac("pos_bias", attn)
    if lay.mask is not None:
        t.ac("mask", attn)
    # a paired block exposes its own softmax map and then renormalizes the injected logits
    t.mac("softmax", SOFTMAX_MAC * attn * (2 if paired else 1))
    t.mac("av", attn * d)
    t.mac("proj", tok * c * c)
    t.mac("mlp", 2 * real * c * mlp_ratio * c)
    t.ac("residual", 2 * real * c)
    return tuple(t.items)


def _snn_block(c, hw, heads, window, shifted, kind, mlp_ratio, use_rse) -> tuple:
    h, w = hw
    real = h * w
    t = _Terms()
    if kind == "ssa":
        lay, _ = layout_for(h, w, window, shifted)
        nw, n = lay.n_windows, lay.tokens
        attn, d = nw * heads * n * n, c // heads
        t.ac("qkv", 3 * real * c * c)
        t.ac("qk", attn * d)
        if use_rse:
            hid = max(c // 4, 1)
            t.ac("rse.diff", nw * _pairs(n) * c)
            t.ac("rse.inner", nw * _pairs(n) * c * hid)  # integer spike differences
            t.mac("rse.outer", nw * _pairs(n) * hid)  # real-valued hidden features
            t.ac("sem_bias", attn)
        t.ac("pos_bias", attn)
        if lay.mask is not None:
            t.ac("mask", attn)
        t.ac("rv", attn * d)
    else:
        t.ac("qk", 2 * real * c * c)
        t.ac("token_sum", real * c)
        t.ac("gate", real * c)
    t.ac("proj", real * c * c)
    t.ac("mlp", 2 * real * c * mlp_ratio * c)
    t.ac("residual", 2 * real * c)
    return tuple(t.items)


def _interaction(hw, window, shifted, ann_heads, snn_heads, steps) -> tuple:
    h, w = hw
    lay, _ = layout_for(h, w, window, shifted)
    nn = lay.n_windows * lay.tokens ** 2
    t = _Terms()
    t.ac("event_kernel", steps * snn_heads * nn)  # mean over time and heads
    t.ac("frame_kernel", ann_heads * nn)
    t.ac("inject_frame", ann_heads * nn)
    t.ac("inject_event", steps * snn_heads * nn)
    if lay.mask is not None:
        t.ac("mask_event", steps * snn_heads * nn)
    return tuple(t.items)


def count_ops(model, input_hw: Optional[tuple] = None) -> OpCount:
    """Analytic per-block counts for one image (batch 1) of size ``input_hw``.

    SNN rows hold per-timestep counts with ``steps = T``; the interaction
    rows already include their time factor and use ``steps = 1``.
    """
    c = model.config
    h, w = input_hw or c.image_hw
    stages = model.stage_hw(h, w)
    paired = set(model.schedule)
    out = OpCount()

    def add(name, branch, steps, terms):
        out.blocks.append(BlockOps(name, branch, steps, terms))

    p = c.patch
    gh, gw = stages[0]
    add("ann.embed", "ann", 1, (("patch_proj", "MAC", gh * gw * p * p * 3 * c.ann_dims[0]),))
    if c.use_snn:
        c0 = max(c.snn_dims[0] // 2, 1)
        add("snn.embed", "snn", c.steps, (
            ("convert", "MAC", h * w * 9 * 2 * c0),  # real-valued voxels
            ("conv", "AC", h * w * 9 * c0 * c.snn_dims[0]),
            ("shortcut", "AC", gh * gw * c0 * c.snn_dims[0]),
            ("residual", "AC", gh * gw * c.snn_dims[0])))
    for s, depth in enumerate(c.depths):
        hw = stages[s]
        for b in range(depth):
            shifted = b % 2 == 1
            add(f"ann.stage{s + 1}.block{b}", "ann", 1,
                _ann_block(c.ann_dims[s], hw, c.ann_heads[s], c.window, shifted, c.mlp_ratio, c.use_rse,
                           (s, b) in paired))
            if c.use_snn:
                add(f"snn.stage{s + 1}.block{b}", "snn", c.steps,
                    _snn_block(c.snn_dims[s], hw, c.snn_heads[s], c.window, shifted, c.snn_kinds[s],
                               c.mlp_ratio, c.use_rse))
            if (s, b) in paired:
                add(f"interaction.stage{s + 1}.block{b}", "interaction", 1,
                    _interaction(hw, c.window, shifted, c.ann_heads[s], c.snn_heads[s], c.steps))
        if s < len(c.depths) - 1:
            (mh, mw), ca, cb = stages[s + 1], c.ann_dims[s], c.ann_dims[s + 1]
            add(f"ann.merge{s + 1}", "ann", 1, (("reduction", "MAC", mh * mw * 4 * ca * cb),))
            if c.use_snn:
                sa, sb = c.snn_dims[s], c.snn_dims[s + 1]
                add(f"snn.merge{s + 1}", "snn", c.steps, (
                    ("conv", "AC", hw[0] * hw[1] * 9 * sa * sb),
                    ("shortcut", "AC", mh * mw * sa * sb),
                    ("residual", "AC", mh * mw * sb)))
    gh, gw = stages[-1]
    fused_in = c.ann_dims[-1] + (c.snn_dims[-1] if c.use_snn else 0)
    head = [("time_mean", "AC", c.steps * gh * gw * c.snn_dims[-1])] if c.use_snn else []
    head += [("fuse", "MAC", gh * gw * fused_in * c.fused_dim), ("head", "MAC", gh * gw * c.fused_dim * 5)]
    add("head", "head", 1, tuple(head))
    return out


# -- energy ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnergyRow:
    block: str
    steps: int
    rate: float
    op_a: int
    op_m: int
    pj: float


def block_energy(steps: int, rate: float, op_a: float, op_m: float,
                 consts: EnergyConstants = EnergyConstants()) -> float:
    return steps * (rate * op_a * consts.e_ac + consts.e_mac * op_m)


@dataclass
class EnergyReport:
    rows: list
    consts: EnergyConstants
    branches: dict  # block name -> branch

    @property
    def total_pj(self) -> float:
        return math.fsum(r.pj for r in self.rows)

    def branch_pj(self, branch: str) -> float:
        return math.fsum(r.pj for r in self.rows if self.branches[r.block] == branch)

    @property
    def ac_gops(self) -> float:
        return sum(r.steps * r.op_a for r in self.rows) / 1e9

    @property
    def mac_gops(self) -> float:
        return sum(r.steps * r.op_m for r in self.rows) / 1e9

    def firing_rates(self) -> dict:
        return {r.block: r.rate for r in self.rows if self.branches[r.block] == "snn"}

    def dense_equivalent_pj(self, branch: str = "snn") -> float:
        """Energy of the same ops run once as dense MACs (the non-spiking counterpart)."""
        return math.fsum(self.consts.e_mac * (r.op_a + r.op_m) for r in self.rows
                         if self.branches[r.block] == branch)

    def to_csv(self, echo: str = "") -> str:
        buf = io.StringIO()
        for line in self.header_lines(echo):
            buf.write(f"# {line}\n")
        out = csv.writer(buf, lineterminator="\n")
        out.writerow(CSV_COLUMNS)
        for r in self.rows:
            out.writerow([r.block, r.steps, repr(r.rate), r.op_a, r.op_m, repr(r.pj)])
        return buf.getvalue()

    def header_lines(self, echo: str = "") -> list:
        lines = [f"E_A={self.consts.e_ac} pJ", f"E_M={self.consts.e_mac} pJ"]
        return lines + [ln for ln in echo.splitlines() if ln.strip()]

    def summary(self, echo: str = "") -> str:
        lines = self.header_lines(echo)
        lines.append(f"total: {self.total_pj:.6g} pJ ({self.ac_gops:.6g} G AC, {self.mac_gops:.6g} G MAC)")
        for branch in ("ann", "snn", "interaction", "head"):
            if branch in self.branches.values():
                lines.append(f"{branch}: {self.branch_pj(branch):.6g} pJ")
        snn = self.branch_pj("snn")
        if snn > 0:
            lines.append(f"frame/event branch ratio: {compare_ratio(self.branch_pj('ann'), snn):.2f}")
            lines.append(f"event branch dense-equivalent ratio: "
                         f"{compare_ratio(self.dense_equivalent_pj('snn'), snn):.2f}")
        return "\n".join(lines) + "\n"


def _rate_of(rates, name: str) -> float:
    if isinstance(rates, FiringMeter):
        return rates.rate(name)
    return rates[name]


def estimate(counts: OpCount, rates: Union[FiringMeter, Mapping, None] = None,
             consts: EnergyConstants = EnergyConstants()) -> EnergyReport:
    """Apply ``T * (f * E_A * OP_A + E_M * OP_M)`` to every block.

    Spiking blocks with AC work need a firing rate: from a
    :class:`FiringMeter` (matched by block-name prefix) or a mapping. Dense
    rows use f = 1.
    """
    rows, branches = [], {}
    for b in counts.blocks:
        rate = 1.0
        if b.branch == "snn" and b.op_a:
            try:
                if rates is None:
                    raise KeyError(b.name)
                rate = float(_rate_of(rates, b.name))
            except (KeyError, StateError):
                raise ReportingError(f"no firing rate for spiking block {b.name}") from None
            if not 0.0 <= rate <= 1.0:
                raise ReportingError(f"firing rate {rate} of {b.name} outside [0, 1]")
        rows.append(EnergyRow(b.name, b.steps, rate, b.op_a, b.op_m,
                              block_energy(b.steps, rate, b.op_a, b.op_m, consts)))
        branches[b.name] = b.branch
    return EnergyReport(rows, consts, branches)


def compare_ratio(e_ann: float, e_snn: float) -> float:
    """``e_ann / e_snn`` rounded to two decimals."""
    if e_snn == 0:
        raise ParameterError("energy ratio with a zero denominator")
    if e_ann < 0 or e_snn < 0:
        raise ParameterError("energies must be positive")
    return round(e_ann / e_snn, 2)


def read_report_csv(text: str) -> list:
    """Parse rows written by :meth:`EnergyReport.to_csv` (comment lines skipped)."""
    body = [ln for ln in text.splitlines() if not ln.startswith("#")]
    reader = csv.DictReader(body)
    return [{"block": r["block"], "T": int(r["T"]), "f": float(r["f"]), "OP_A": int(r["OP_A"]),
             "OP_M": int(r["OP_M"]), "pJ": float(r["pJ"])} for r in reader]
