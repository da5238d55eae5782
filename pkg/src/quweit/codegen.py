"""Structural netlists for trained weightless blocks.

A netlist has three cell kinds wired by single-driver nets:

* comparators: ``x_f >= threshold`` on 16-bit signed inputs with 8 fraction bits
* LUTs: ``fan_in`` input nets, a 2^n-bit INIT vector (address 0 = LSB),
  input 0 is the most significant address bit
* sum units: a 2:1 mux per input bit selecting an int8 constant or zero,
  a single add chain, and a register stage

:func:`interpret` evaluates the netlist in topological order (vectorised over
a batch of input rows) and is the oracle for the emitted HDL.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .weightless import MAX_FAN_IN, WeightlessBlock, unpack_init

FRAC_BITS = 8
INPUT_BITS = 16
INPUT_MIN = -(1 << (INPUT_BITS - 1))
INPUT_MAX = (1 << (INPUT_BITS - 1)) - 1


class NetlistError(Exception):
    pass


@dataclass
class ComparatorCell:
    name: str
    input: str
    threshold: int
    output: str

    @property
    def inputs(self) -> list[str]:
        return [self.input]


@dataclass
class LutCell:
    name: str
    fan_in: int
    init: int
    inputs: list[str]
    output: str

    def __post_init__(self):
        if len(self.inputs) != self.fan_in:
            raise NetlistError(f"{self.name}: {len(self.inputs)} inputs for fan-in {self.fan_in}")
        if not 0 <= self.init < (1 << (1 << self.fan_in)):
            raise NetlistError(f"{self.name}: INIT wider than 2^{self.fan_in} bits")


@dataclass
class SumUnit:
    name: str
    inputs: list[str]
    constants: list[int]
    acc_width: int
    output: str

    def __post_init__(self):
        need = sum(abs(c) for c in self.constants)
        if need > (1 << (self.acc_width - 1)) - 1:
            raise NetlistError(f"{self.name}: accumulator of {self.acc_width} bits overflows for sum {need}")


@dataclass
class Netlist:
    name: str
    inputs: list[str]
    outputs: list[str]
    cells: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def drivers(self) -> dict[str, object]:
        drv: dict[str, object] = {}
        for port in self.inputs:
            if port in drv:
                raise NetlistError(f"net {port} has more than one driver")
            drv[port] = "port"
        for cell in self.cells:
            if cell.output in drv:
                raise NetlistError(f"net {cell.output} has more than one driver")
            drv[cell.output] = cell
        return drv

    def topological_cells(self) -> list:
        """Cells ordered so every input net is driven earlier; raises on cycles or dangling nets."""
        drv = self.drivers()
        for cell in self.cells:
            for net in cell.inputs:
                if net not in drv:
                    raise NetlistError(f"{cell.name}: input net {net} is unconnected")
        for out in self.outputs:
            if out not in drv:
                raise NetlistError(f"output port {out} is unconnected")
        ready = set(self.inputs)
        pending = list(self.cells)
        order = []
        while pending:
            rest = [c for c in pending if not all(n in ready for n in c.inputs)]
            done = [c for c in pending if all(n in ready for n in c.inputs)]
            if not done:
                raise NetlistError(f"combinational cycle through {rest[0].name}")
            order += done
            ready.update(c.output for c in done)
            pending = rest
        return order

    def validate(self) -> None:
        self.topological_cells()

    def census(self) -> dict[str, int]:
        return {
            "comparators": sum(isinstance(c, ComparatorCell) for c in self.cells),
            "luts": sum(isinstance(c, LutCell) for c in self.cells),
            "sum_units": sum(isinstance(c, SumUnit) for c in self.cells),
        }


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def to_fixed(x) -> np.ndarray:
    """Reals -> saturated 16-bit signed fixed point with 8 fraction bits (round to nearest)."""
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * (1 << FRAC_BITS)), INPUT_MIN, INPUT_MAX).astype(np.int64)


def from_fixed(q) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) / (1 << FRAC_BITS)


def threshold_to_fixed(t: float) -> int:
    """Smallest fixed-point code q with q/256 >= t, so comparisons agree exactly on the grid."""
    q = math.ceil(t * (1 << FRAC_BITS))
    if q > INPUT_MAX:
        raise NetlistError(f"threshold {t} is not representable in Q{INPUT_BITS - FRAC_BITS}.{FRAC_BITS}")
    return max(q, INPUT_MIN)


def acc_width_for(constants) -> int:
    need = sum(abs(int(c)) for c in constants)
    return max(8, need.bit_length() + 1)


def block_netlist(block: WeightlessBlock, name: str = "quweit_block", metadata=None) -> Netlist:
    enc = block.encoder
    if enc is None:
        raise NetlistError("block has no fitted thermometer encoder")
    cs = block.summation
    if not cs.quantized:
        raise NetlistError("encoded values are not quantized; run quantize_encodings() before export")
    F, T = enc.thresholds.shape
    nl = Netlist(name, [f"x_{f}" for f in range(F)], [f"y_{d}" for d in range(cs.output_dim)],
                 metadata=dict(metadata or {}))
    prev = []
    for f in range(F):
        for t in range(T):
            out = f"t_{f}_{t}"
            nl.cells.append(ComparatorCell(f"cmp_{f}_{t}", f"x_{f}", threshold_to_fixed(enc.thresholds[f, t]), out))
            prev.append(out)
    for i, layer in enumerate(block.layers):
        if layer.fan_in > MAX_FAN_IN:
            raise NetlistError(f"fan-in {layer.fan_in} exceeds the {MAX_FAN_IN}-input fabric LUT")
        nets = []
        for l, (row, srcs) in enumerate(zip(layer.init_hex(), layer.mapping)):
            out = f"l{i}_{l}"
            nl.cells.append(LutCell(f"lut{i}_{l}", layer.fan_in, int(row, 16), [prev[s] for s in srcs], out))
            nets.append(out)
        prev = nets
    G = cs.group_size
    for d in range(cs.output_dim):
        consts = [int(v) for v in cs.levels[d]]
        nl.cells.append(SumUnit(f"sum_{d}", prev[d * G:(d + 1) * G], consts, acc_width_for(consts), f"y_{d}"))
    nl.metadata.setdefault("scale", cs.scale)
    nl.validate()
    return nl


def build_netlist(ckpt: Checkpoint, block_index: int) -> Netlist:
    """Netlist for one weightless block of a checkpoint (encodings must be quantized)."""
    frag = ckpt.fragment(block_index)
    for lf in frag["layers"]:
        if lf["fan_in"] > MAX_FAN_IN:
            raise NetlistError(f"fan-in {lf['fan_in']} exceeds the {MAX_FAN_IN}-input fabric LUT")
    if frag["encodings"]["levels"] is None:
        raise NetlistError(
            f"block {block_index} has float encodings; quantize them first "
            "(quantize_encodings / `export-netlist --quantize`)")
    block = WeightlessBlock.from_fragment(frag)
    return block_netlist(block, f"quweit_block_{block_index}",
                         {"checkpoint_digest": ckpt.digest, "block_index": block_index})


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def interpret(nl: Netlist, rows) -> np.ndarray:
    """Evaluate on fixed-point input codes [F] or [V x F]; returns integer sums [D] or [V x D]."""
    rows = np.asarray(rows, dtype=np.int64)
    single = rows.ndim == 1
    if single:
        rows = rows[None, :]
    if rows.shape[1] != len(nl.inputs):
        raise NetlistError(f"netlist has {len(nl.inputs)} inputs, got {rows.shape[1]}")
    nets: dict[str, np.ndarray] = {p: rows[:, i] for i, p in enumerate(nl.inputs)}
    for cell in nl.topological_cells():
        if isinstance(cell, ComparatorCell):
            nets[cell.output] = nets[cell.input] >= cell.threshold
        elif isinstance(cell, LutCell):
            addr = np.zeros(rows.shape[0], dtype=np.int64)
            for net in cell.inputs:
                addr = (addr << 1) | nets[net]
            table = unpack_init(format(cell.init, "x"), cell.fan_in)
            nets[cell.output] = table[addr]
        elif isinstance(cell, SumUnit):
            acc = np.zeros(rows.shape[0], dtype=np.int64)
            for net, c in zip(cell.inputs, cell.constants):
                acc = acc + np.where(nets[net], c, 0)
            nets[cell.output] = acc
        else:
            raise NetlistError(f"unknown cell {cell!r}")
    out = np.stack([nets[o].astype(np.int64) for o in nl.outputs], axis=1)
    return out[0] if single else out


def corner_vectors(block: WeightlessBlock) -> np.ndarray:
    """All-min, all-max and, per threshold, the codes just at and just below it."""
    F = block.encoder.num_features
    vecs = [np.full(F, INPUT_MIN), np.full(F, INPUT_MAX), np.zeros(F, dtype=np.int64)]
    q = np.vectorize(threshold_to_fixed)(block.encoder.thresholds)  # [F, T]
    for t in range(q.shape[1]):
        vecs.append(np.clip(q[:, t], INPUT_MIN, INPUT_MAX))
        vecs.append(np.clip(q[:, t] - 1, INPUT_MIN, INPUT_MAX))
    return np.stack(vecs).astype(np.int64)


def random_vectors(block: WeightlessBlock, num: int, seed: int) -> np.ndarray:
    """Seeded codes spread around the thresholds (uniform over the outer threshold range +/- one span)."""
    rng = np.random.default_rng(seed)
    thr = block.encoder.thresholds
    lo, hi = thr[:, 0], thr[:, -1]
    span = np.maximum(hi - lo, 1.0)
    x = rng.uniform(lo - span, hi + span, size=(num, thr.shape[0]))
    return to_fixed(x)


def verify_equivalence(ckpt: Checkpoint, block_index: int, num_vectors: int = 10_000,
                       seed: int = 0, netlist: Netlist | None = None) -> dict:
    """Compare the netlist interpreter with the integer inference path on random and corner vectors."""
    nl = netlist if netlist is not None else build_netlist(ckpt, block_index)
    block = WeightlessBlock.from_fragment(ckpt.fragment(block_index))
    vecs = np.concatenate([corner_vectors(block), random_vectors(block, num_vectors, seed)])
    got = interpret(nl, vecs)
    want = block.infer_int(from_fixed(vecs))
    bad = np.nonzero(np.any(got != want, axis=1))[0]
    report = {
        "checkpoint_digest": ckpt.digest,
        "block_index": block_index,
        "vectors_tested": int(len(vecs)),
        "mismatches": int(len(bad)),
        "census": nl.census(),
        "first_mismatch": None,
    }
    if len(bad):
        i = int(bad[0])
        report["first_mismatch"] = {"vector": vecs[i].tolist(), "netlist": got[i].tolist(),
                                    "reference": want[i].tolist()}
    return report


# ---------------------------------------------------------------------------
# HDL emission
# ---------------------------------------------------------------------------

def _sv(value: int, width: int) -> str:
    return f"-{width}'sd{-value}" if value < 0 else f"{width}'sd{value}"


def emit_hdl(nl: Netlist) -> str:
    """Deterministic Verilog-2001 text: one module per netlist."""
    order = nl.topological_cells()
    out_w = {c.output: c.acc_width for c in nl.cells if isinstance(c, SumUnit)}
    meta = nl.metadata
    lines = [
        f"// {nl.name}: generated weightless block",
        f"// source checkpoint digest: {meta.get('checkpoint_digest', 'n/a')}",
        f"// block index: {meta.get('block_index', 'n/a')}; output scale: {meta.get('scale', 'n/a')!r}",
        f"// inputs: signed Q{INPUT_BITS - FRAC_BITS}.{FRAC_BITS}; LUT address bit order: input 0 = MSB,"
        " INIT bit a = entry at address a",
        f"// cells: {nl.census()}",
        f"module {nl.name} (",
        "    input wire clk,",
    ]
    ports = [f"    input wire signed [{INPUT_BITS - 1}:0] {p}" for p in nl.inputs]
    ports += [f"    output reg signed [{out_w[o] - 1}:0] {o}" for o in nl.outputs]
    lines.append(",\n".join(ports))
    lines.append(");")
    for cell in order:
        if isinstance(cell, ComparatorCell):
            lines.append(f"    wire {cell.output} = ({cell.input} >= {_sv(cell.threshold, INPUT_BITS)});")
        elif isinstance(cell, LutCell):
            size = 1 << cell.fan_in
            digits = max(1, size // 4)
            param = f"INIT_{cell.name.upper()}"
            lines.append(f"    localparam [{size - 1}:0] {param} = {size}'h{cell.init:0{digits}x};")
            addr = ", ".join(cell.inputs)
            lines.append(f"    wire {cell.output} = {param}[{{{addr}}}];")
        elif isinstance(cell, SumUnit):
            w = cell.acc_width
            terms = [f"({net} ? {_sv(c, w)} : {w}'sd0)" for net, c in zip(cell.inputs, cell.constants)]
            lines.append(f"    wire signed [{w - 1}:0] {cell.name}_acc = " + " + ".join(terms) + ";")
    lines.append("    always @(posedge clk) begin")
    for cell in order:
        if isinstance(cell, SumUnit):
            lines.append(f"        {cell.output} <= {cell.name}_acc;")
    lines.append("    end")
    lines.append("endmodule")
    return "\n".join(lines) + "\n"
