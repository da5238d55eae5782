"""Analytical cycle and energy model for a systolic-array baseline and the weightless PE.

Systolic GEMM cycles assume a steady-state pipelined a x a array working through
ceil(M/a) * ceil(K/a) * ceil(N/a) tiles, each occupying the array for ``a``
cycles (fill and drain ignored).  The weightless PE handles one activation row
per cycle times an accumulation factor.  Energy is cycles / clock * power.

Only GEMM stages are modelled; softmax, GELU and layer-norm units are left out.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

from .transformer import ModelConfig


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True)
class GemmShape:
    M: int
    K: int
    N: int

    def __post_init__(self):
        if min(self.M, self.K, self.N) < 1:
            raise ValueError(f"GEMM dimensions must be positive: {self}")

    @property
    def macs(self) -> int:
        return self.M * self.K * self.N


@dataclass
class HardwareProfile:
    label: str
    array_dim: int
    clock_hz: float
    power_w: dict
    derived_from: str = ""

    def __post_init__(self):
        if self.array_dim < 1:
            raise ValueError("array_dim must be >= 1")
        if self.clock_hz <= 0:
            raise ValueError("clock must be positive")
        if any(p <= 0 for p in self.power_w.values()):
            raise ValueError("powers must be positive")


def load_profiles(path=None) -> dict[str, HardwareProfile]:
    """Calibrated profiles shipped with the package, or from a JSON file of the same shape."""
    if path is None:
        text = resources.files("quweit").joinpath("data/profiles.json").read_text()
    else:
        text = Path(path).read_text()
    doc = json.loads(text)
    return {k: HardwareProfile(label=k, **v) for k, v in doc["profiles"].items()}


def systolic_cycles(g: GemmShape, a: int) -> int:
    if a < 1:
        raise ValueError("array dimension must be >= 1")
    return _ceil_div(g.M, a) * _ceil_div(g.K, a) * _ceil_div(g.N, a) * a


def pe_cycles(rows: int, accumulation_factor: int = 1) -> int:
    if rows < 1 or accumulation_factor < 1:
        raise ValueError("rows and accumulation factor must be >= 1")
    return rows * accumulation_factor


def energy(cycles: int, profile: HardwareProfile, unit: str) -> float:
    """Joules spent by ``unit`` running for ``cycles`` at the profile clock."""
    if unit not in profile.power_w:
        raise KeyError(f"profile {profile.label!r} has no power entry for unit {unit!r}")
    return cycles / profile.clock_hz * profile.power_w[unit]


@dataclass
class StageReport:
    stage: str
    cycles: int
    energy_j: float
    unit: str

    @property
    def energy_uj(self) -> float:
        return self.energy_j * 1e6


def _stage(name, cycles, profile, unit) -> StageReport:
    return StageReport(name, cycles, energy(cycles, profile, unit), unit)


MLP_STAGES = ("MLP Dense 1", "MLP Dense 2")
PE_STAGE = "Weightless PE"


def encoder_layer_report(cfg: ModelConfig, profile: HardwareProfile, use_weightless: bool,
                         accumulation_factor: int = 1) -> list[StageReport]:
    """Per-stage cycles and energy of one encoder layer for one sample (``cfg.context`` rows)."""
    N, D, H = cfg.context, cfg.d_model, cfg.n_heads
    hd, hidden = cfg.head_dim, cfg.hidden_dim
    a = profile.array_dim
    proj = systolic_cycles(GemmShape(N, D, D), a)
    stages = [_stage(s, proj, profile, "systolic") for s in ("Q", "K", "V")]
    stages.append(_stage("QK^T", H * systolic_cycles(GemmShape(N, hd, N), a), profile, "systolic"))
    stages.append(_stage("S.V", H * systolic_cycles(GemmShape(N, N, hd), a), profile, "systolic"))
    stages.append(_stage("Multi-Head Concat", proj, profile, "systolic"))
    if use_weightless:
        stages.append(_stage(PE_STAGE, pe_cycles(N, accumulation_factor), profile, "pe"))
    else:
        stages.append(_stage("MLP Dense 1", systolic_cycles(GemmShape(N, D, hidden), a), profile, "systolic"))
        stages.append(_stage("MLP Dense 2", systolic_cycles(GemmShape(N, hidden, D), a), profile, "systolic"))
    return stages


@dataclass
class ComparisonReport:
    baseline_total_j: float
    quweit_total_j: float
    ratio: float
    deltas_j: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "baseline_total_uj": self.baseline_total_j * 1e6,
            "quweit_total_uj": self.quweit_total_j * 1e6,
            "ratio": self.ratio,
            "deltas_uj": {k: v * 1e6 for k, v in self.deltas_j.items()},
        }


def compare(baseline: list[StageReport], quweit: list[StageReport]) -> ComparisonReport:
    """Totals and ratio; the attention stages of both reports must line up."""
    replaced = set(MLP_STAGES) | {PE_STAGE}
    shared_b = [s.stage for s in baseline if s.stage not in replaced]
    shared_q = [s.stage for s in quweit if s.stage not in replaced]
    if shared_b != shared_q:
        raise ValueError(f"stage structure mismatch: {shared_b} vs {shared_q}")
    tb = sum(s.energy_j for s in baseline)
    tq = sum(s.energy_j for s in quweit)
    eb = {s.stage: s.energy_j for s in baseline}
    eq = {s.stage: s.energy_j for s in quweit}
    names = list(dict.fromkeys([s.stage for s in baseline] + [s.stage for s in quweit]))
    deltas = {n: eq.get(n, 0.0) - eb.get(n, 0.0) for n in names}
    return ComparisonReport(tb, tq, tb / tq, deltas)


def mlp_vs_pe_table(profiles: dict[str, HardwareProfile], cfg: ModelConfig,
                    fpga_prefix: str = "fpga", asic_prefix: str = "asic",
                    accumulation_factor: int = 1) -> list[dict]:
    """MLP GEMM pair on each systolic array size vs the weightless PE (cycles, FPGA and ASIC energy)."""
    N, D, hidden = cfg.context, cfg.d_model, cfg.hidden_dim
    pair = (GemmShape(N, D, hidden), GemmShape(N, hidden, D))
    dims = sorted({p.array_dim for p in profiles.values()})
    rows = []
    for a in dims:
        cycles = sum(systolic_cycles(g, a) for g in pair)
        row = {"method": f"{a}x{a} Systolic", "cycles": cycles}
        for prefix in (fpga_prefix, asic_prefix):
            prof = profiles.get(f"{prefix}-{a}x{a}")
            row[f"{prefix}_energy_uj"] = None if prof is None else energy(cycles, prof, "systolic") * 1e6
        rows.append(row)
    cycles = pe_cycles(N, accumulation_factor)
    row = {"method": "QuWeiT", "cycles": cycles}
    for prefix in (fpga_prefix, asic_prefix):
        prof = next((p for k, p in sorted(profiles.items()) if k.startswith(prefix)), None)
        row[f"{prefix}_energy_uj"] = None if prof is None else energy(cycles, prof, "pe") * 1e6
    rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def format_table(rows: list[dict], columns: list[str]) -> str:
    def cell(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:,.3f}"
        if isinstance(v, int):
            return f"{v:,}"
        return str(v)

    body = [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) for i, c in enumerate(columns)]
    out = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(columns, widths)))]
    out.append("-" * len(out[0]))
    for b in body:
        out.append("  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(b, widths))))
    return "\n".join(out)


def stages_to_rows(stages: list[StageReport]) -> list[dict]:
    rows = [{"stage": s.stage, "unit": s.unit, "cycles": s.cycles, "energy_uj": s.energy_uj} for s in stages]
    rows.append({"stage": "Total", "unit": "", "cycles": sum(s.cycles for s in stages),
                 "energy_uj": sum(s.energy_uj for s in stages)})
    return rows


def to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def report_json(stages: list[StageReport]) -> dict:
    return {"stages": [dict(asdict(s), energy_uj=s.energy_uj) for s in stages],
            "total_uj": sum(s.energy_uj for s in stages)}
