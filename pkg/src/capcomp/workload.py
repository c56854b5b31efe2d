"""Workload modeling: scenario traversal, switching-cost estimation, and the
single-switch latency breakdown.

A scenario is a static call-graph description (which function lives in which
compartment, who calls whom how often).  Traversing it yields exact totals:
instructions executed, compartment transitions (a cross-compartment call and
its return each count one), and promoted allocations.  The cost model then
turns totals into a cycle overhead relative to an uncompartmentalized run of
the same instruction stream at a given baseline CPI.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace

from .isa import Op
from .layout import boot_init, compute_layout, install_function, parse_config
from .machine import step


class ScenarioError(ValueError):
    """Scenario text rejected; message carries the 1-based line."""


@dataclass(frozen=True, slots=True)
class ScenarioFn:
    name: str
    comp: str
    instr: int          # body instructions per execution, callees excluded


@dataclass(frozen=True, slots=True)
class ScenarioCall:
    caller: str
    callee: str
    count: int          # calls per single caller execution
    promote: int = 0    # allocations promoted per individual call


@dataclass(frozen=True, slots=True)
class Scenario:
    name: str
    fns: tuple[ScenarioFn, ...]
    calls: tuple[ScenarioCall, ...]
    iterations: int = 1
    cpi: float = 1.0

    @property
    def root(self) -> str:
        return self.fns[0].name

    def fn(self, name: str) -> ScenarioFn:
        for f in self.fns:
            if f.name == name:
                return f
        raise KeyError(name)


def parse_scenario(text: str, name: str = "scenario") -> Scenario:
    """Parse the scenario description language.

    Lines: `scenario <name>`, `fn <name> comp=<c> instr=<n>`,
    `call <from> <to> count=<k> [promote=<n>]`, `iterations <n>`, `cpi <x>`.
    The first declared fn is the entry point, executed once per iteration.
    """
    fns: list[ScenarioFn] = []
    calls: list[ScenarioCall] = []
    iterations = 1
    cpi = 1.0
    seen: set[str] = set()

    def attr(tok: str, key: str, line_no: int) -> str:
        if not tok.startswith(key + "="):
            raise ScenarioError(f"line {line_no}: expected {key}=..., got {tok!r}")
        return tok[len(key) + 1:]

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#")[0].strip()
        if not line:
            continue
        toks = line.split()
        kind = toks[0]
        if kind == "scenario":
            if len(toks) != 2:
                raise ScenarioError(f"line {line_no}: scenario takes one name")
            name = toks[1]
        elif kind == "fn":
            if len(toks) != 4:
                raise ScenarioError(f"line {line_no}: expected fn <name> comp=<c> instr=<n>")
            if toks[1] in seen:
                raise ScenarioError(f"line {line_no}: duplicate fn {toks[1]!r}")
            seen.add(toks[1])
            comp = attr(toks[2], "comp", line_no)
            try:
                instr = int(attr(toks[3], "instr", line_no), 0)
            except ValueError:
                raise ScenarioError(f"line {line_no}: bad instruction count") from None
            if instr < 0:
                raise ScenarioError(f"line {line_no}: negative instruction count")
            fns.append(ScenarioFn(toks[1], comp, instr))
        elif kind == "call":
            if len(toks) not in (4, 5):
                raise ScenarioError(
                    f"line {line_no}: expected call <from> <to> count=<k> [promote=<n>]")
            try:
                count = int(attr(toks[3], "count", line_no), 0)
                promote = int(attr(toks[4], "promote", line_no), 0) if len(toks) == 5 else 0
            except ValueError:
                raise ScenarioError(f"line {line_no}: bad integer") from None
            if count < 1:
                raise ScenarioError(f"line {line_no}: count must be positive")
            if promote < 0:
                raise ScenarioError(f"line {line_no}: promote must be non-negative")
            calls.append(ScenarioCall(toks[1], toks[2], count, promote))
        elif kind == "iterations":
            if len(toks) != 2:
                raise ScenarioError(f"line {line_no}: iterations takes one integer")
            try:
                iterations = int(toks[1], 0)
            except ValueError:
                raise ScenarioError(f"line {line_no}: bad integer {toks[1]!r}") from None
            if iterations < 1:
                raise ScenarioError(f"line {line_no}: iterations must be positive")
        elif kind == "cpi":
            if len(toks) != 2:
                raise ScenarioError(f"line {line_no}: cpi takes one number")
            try:
                cpi = float(toks[1])
            except ValueError:
                raise ScenarioError(f"line {line_no}: bad number {toks[1]!r}") from None
            if not cpi > 0:
                raise ScenarioError(f"line {line_no}: cpi must be positive")
        else:
            raise ScenarioError(f"line {line_no}: unknown directive {kind!r}")

    if not fns:
        raise ScenarioError("line 1: scenario declares no functions")
    names = {f.name for f in fns}
    for c in calls:
        if c.caller not in names:
            raise ScenarioError(f"call references unknown fn {c.caller!r}")
        if c.callee not in names:
            raise ScenarioError(f"call references unknown fn {c.callee!r}")

    sc = Scenario(name, tuple(fns), tuple(calls), iterations, cpi)
    _check_acyclic(sc)
    return sc


def _check_acyclic(sc: Scenario) -> None:
    out: dict[str, list[str]] = {f.name: [] for f in sc.fns}
    for c in sc.calls:
        out[c.caller].append(c.callee)
    WHITE, GREY, BLACK = 0, 1, 2
    color = {n: WHITE for n in out}

    def visit(n: str, trail: list[str]) -> None:
        color[n] = GREY
        trail.append(n)
        for m in out[n]:
            if color[m] == GREY:
                cyc = trail[trail.index(m):] + [m]
                raise ScenarioError("call graph has a cycle: " + " -> ".join(cyc))
            if color[m] == WHITE:
                visit(m, trail)
        trail.pop()
        color[n] = BLACK

    for n in out:
        if color[n] == WHITE:
            visit(n, [])


@dataclass(frozen=True, slots=True)
class ScenarioSummary:
    name: str
    iterations: int
    cpi: float
    instructions: int
    transitions: int                      # boundary crossings; call and return each count
    promotions: int
    edge_crossings: tuple[tuple[str, str, int], ...]   # (from, to, crossings)

    @property
    def switches_per_1k(self) -> float:
        if self.instructions == 0:
            raise ZeroDivisionError("scenario executes no instructions")
        return 1000.0 * self.transitions / self.instructions


def run_scenario(sc: Scenario) -> ScenarioSummary:
    """Traverse the call graph once per iteration and total everything up.

    Memoized over functions, so repeated subtrees cost nothing to analyze;
    correctness of the memoization is what the naive-traversal oracle in the
    test suite checks.
    """
    by_caller: dict[str, list[ScenarioCall]] = {}
    for c in sc.calls:
        by_caller.setdefault(c.caller, []).append(c)
    comp = {f.name: f.comp for f in sc.fns}
    instr = {f.name: f.instr for f in sc.fns}

    # per single execution of fn: (instructions, transitions, promotions,
    # edge crossing counts)
    memo: dict[str, tuple[int, int, int, dict[tuple[str, str], int]]] = {}

    def total(fn: str) -> tuple[int, int, int, dict[tuple[str, str], int]]:
        if fn in memo:
            return memo[fn]
        t_i, t_s, t_p = instr[fn], 0, 0
        edges: dict[tuple[str, str], int] = {}
        for c in by_caller.get(fn, ()):
            s_i, s_s, s_p, s_e = total(c.callee)
            t_i += c.count * s_i
            t_s += c.count * s_s
            t_p += c.count * (s_p + c.promote)
            for k, v in s_e.items():
                edges[k] = edges.get(k, 0) + c.count * v
            if comp[fn] != comp[c.callee]:
                t_s += 2 * c.count
                k = (fn, c.callee)
                edges[k] = edges.get(k, 0) + 2 * c.count
        memo[fn] = (t_i, t_s, t_p, edges)
        return memo[fn]

    i1, s1, p1, e1 = total(sc.root)
    n = sc.iterations
    edge_list = tuple(sorted((f, g, n * v) for (f, g), v in e1.items()))
    return ScenarioSummary(sc.name, n, sc.cpi, n * i1, n * s1, n * p1, edge_list)


# ---------------------------------------------------------------------------
# Cost model


@dataclass(frozen=True, slots=True)
class CostModel:
    """Cycle costs of domain transitions.

    A hot switch finds the capability table entries and switcher lines
    resident; a cold one pays the misses.  hot_fraction is the long-run share
    of hot switches.  promotion is the one-time cost of lifting an allocation
    into a shared window (derive, bound, bookkeeping).
    """

    hot: float = 400.0
    cold: float = 950.0
    hot_fraction: float = 0.999
    promotion: float = 250.0

    def effective_switch(self) -> float:
        return self.hot_fraction * self.hot + (1.0 - self.hot_fraction) * self.cold


@dataclass(frozen=True, slots=True)
class OverheadEstimate:
    switches: int
    switches_per_1k: float
    extra_cycles: float
    baseline_cycles: float
    percent: float


def estimate_overhead(summary: ScenarioSummary, cm: CostModel | None = None,
                      cpi: float | None = None) -> OverheadEstimate:
    """Switching overhead relative to the same instruction stream without
    compartment boundaries, at the scenario's baseline CPI."""
    cm = cm or CostModel()
    cpi = summary.cpi if cpi is None else cpi
    if summary.instructions == 0:
        raise ScenarioError("scenario executes no instructions; overhead undefined")
    if not cpi > 0:
        raise ScenarioError("baseline cpi must be positive")
    extra = summary.transitions * cm.effective_switch() + summary.promotions * cm.promotion
    baseline = summary.instructions * cpi
    return OverheadEstimate(
        switches=summary.transitions,
        switches_per_1k=summary.switches_per_1k,
        extra_cycles=extra,
        baseline_cycles=baseline,
        percent=100.0 * extra / baseline,
    )


# ---------------------------------------------------------------------------
# Single-switch latency breakdown

# Per-op cycle weights for one retired instruction inside a switch sequence.
# The capability-pair invoke, the ddc installs, the frame seal and the ddc
# read carry the pipeline and permission-check costs; everything else is
# near-free ALU/memory work.  Cold weights add the table and pair misses.
HOT_WEIGHTS = {
    Op.LOAD_PAIR_BRANCH: 45.0,
    Op.INSTALL_DDC: 40.0,
    Op.SEAL: 25.0,
    Op.READ_DDC: 15.0,
}
HOT_DEFAULT = 0.7
COLD_WEIGHTS = {
    Op.LOAD_PAIR_BRANCH: 120.0,
    Op.INSTALL_DDC: 110.0,
    Op.SEAL: 70.0,
    Op.READ_DDC: 40.0,
}
COLD_DEFAULT = 1.6

PHASES = ("gate_prologue", "switcher", "trampoline_enter",
          "callee_body", "trampoline_return", "gate_epilogue")
SWITCH_PHASES = tuple(p for p in PHASES if p != "callee_body")

_BREAKDOWN_CONFIG = """
compartment origin code=256 data=256 stack=4096 heap=256
compartment target code=256 data=256 stack=4096 heap=256
"""


@dataclass(frozen=True, slots=True)
class SwitchBreakdown:
    """Cycle attribution of one full cross-compartment round trip."""

    phase_cycles: dict[str, float]
    phase_instructions: dict[str, int]
    total: float                 # switch phases only, callee body excluded
    callee_cycles: float
    instructions: int            # every retired instruction in the round trip

    def largest_phase(self) -> str:
        return max(SWITCH_PHASES, key=lambda p: self.phase_cycles[p])


def _weigh(op: Op, cold: bool) -> float:
    if cold:
        return COLD_WEIGHTS.get(op, COLD_DEFAULT)
    return HOT_WEIGHTS.get(op, HOT_DEFAULT)


def switch_breakdown(cold: bool = False) -> SwitchBreakdown:
    """Execute one instrumented round trip on a canonical two-compartment
    image and attribute every retired instruction's cycles to its phase."""
    from .isa import retl
    from .runtime import (GateDescriptor, TRAMP_ENTER_SLOTS, emit_gate_sequence)
    from .isa import halt as _halt
    from .capability import set_address

    plan = compute_layout(parse_config(_BREAKDOWN_CONFIG), memory_size=1 << 16)
    img = boot_init(plan)
    st = img.machine
    entry = install_function(img, "target", [retl()])
    gate = GateDescriptor("origin", "target", entry, dest=0)
    code = emit_gate_sequence(plan, gate, [0])
    site = install_function(img, "origin", list(code.instructions) + [_halt()])
    st.pcc = set_address(st.pcc, site)

    sw_lo, sw_hi = plan.switcher_code
    tramp = img.tramp_entries["target"]
    pro_lo, pro_hi = site, site + code.prologue_len
    epi_lo, epi_hi = pro_hi, site + len(code.instructions)

    def phase_of(pc: int) -> str:
        if pro_lo <= pc < pro_hi:
            return "gate_prologue"
        if sw_lo <= pc < sw_hi:
            return "switcher"
        if tramp <= pc < tramp + TRAMP_ENTER_SLOTS:
            return "trampoline_enter"
        if tramp + TRAMP_ENTER_SLOTS <= pc < tramp + 8:
            return "trampoline_return"
        if epi_lo <= pc < epi_hi:
            return "gate_epilogue"
        return "callee_body"

    cycles = {p: 0.0 for p in PHASES}
    counts = {p: 0 for p in PHASES}
    steps = 0
    while not st.halted and st.fault is None and steps < 10_000:
        pc = st.pcc.address
        op = img.program[pc].op
        step(st, img.mem, img.program)
        steps += 1
        if op is Op.HALT:
            break
        p = phase_of(pc)
        cycles[p] += _weigh(op, cold)
        counts[p] += 1
    if st.fault is not None:
        raise RuntimeError(f"breakdown round trip faulted: {st.fault}")

    total = sum(cycles[p] for p in SWITCH_PHASES)
    return SwitchBreakdown(cycles, counts, total, cycles["callee_body"],
                           sum(counts.values()))


def format_breakdown(bd: SwitchBreakdown, label: str) -> str:
    rows = [("phase", "instructions", "cycles")]
    for p in PHASES:
        rows.append((p, str(bd.phase_instructions[p]), f"{bd.phase_cycles[p]:.1f}"))
    rows.append(("switch total (callee excluded)", "", f"{bd.total:.1f}"))
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    out = [f"single-switch latency, {label}:"]
    for i, r in enumerate(rows):
        out.append("  " + "  ".join(c.ljust(widths[j]) for j, c in enumerate(r)).rstrip())
        if i == 0:
            out.append("  " + "  ".join("-" * w for w in widths))
    return "\n".join(out)


# ---------------------------------------------------------------------------
# Reports


def emit_report(summary: ScenarioSummary, est: OverheadEstimate,
                cm: CostModel) -> str:
    """Machine-parseable one-line-per-fact report; parse_report inverts it."""
    lines = [
        f"scenario name={summary.name} iterations={summary.iterations}",
        f"totals instructions={summary.instructions} transitions={summary.transitions} "
        f"promotions={summary.promotions}",
        f"rate switches_per_1k={est.switches_per_1k:.3f}",
        f"cost hot={cm.hot} cold={cm.cold} hot_fraction={cm.hot_fraction} "
        f"promotion={cm.promotion} cpi={summary.cpi}",
        f"overhead extra_cycles={est.extra_cycles:.3f} "
        f"baseline_cycles={est.baseline_cycles:.3f} percent={est.percent:.3f}",
    ]
    for f, g, n in summary.edge_crossings:
        lines.append(f"edge from={f} to={g} crossings={n}")
    return "\n".join(lines)


_KV_RE = re.compile(r"(\w+)=(\S+)")


def parse_report(text: str) -> dict:
    """Parse an emitted report back into nested dictionaries."""
    out: dict = {"edges": []}
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        kind, _, rest = line.partition(" ")
        kv = {m.group(1): m.group(2) for m in _KV_RE.finditer(rest)}
        if kind == "edge":
            out["edges"].append((kv["from"], kv["to"], int(kv["crossings"])))
        else:
            out[kind] = kv
    return out


def format_report_table(summary: ScenarioSummary, est: OverheadEstimate,
                        cm: CostModel) -> str:
    """Human-facing summary table."""
    rows = [
        ("scenario", summary.name),
        ("iterations", str(summary.iterations)),
        ("instructions", str(summary.instructions)),
        ("transitions", str(summary.transitions)),
        ("promotions", str(summary.promotions)),
        ("switches per 1k instr", f"{est.switches_per_1k:.3f}"),
        ("effective switch cost", f"{cm.effective_switch():.2f} cycles"),
        ("baseline cpi", f"{summary.cpi}"),
        ("extra cycles", f"{est.extra_cycles:.1f}"),
        ("baseline cycles", f"{est.baseline_cycles:.1f}"),
        ("overhead", f"{est.percent:.3f} %"),
    ]
    w = max(len(r[0]) for r in rows)
    lines = [f"{k.ljust(w)}  {v}" for k, v in rows]
    if summary.edge_crossings:
        lines.append("")
        lines.append("crossings by call edge:")
        for f, g, n in summary.edge_crossings:
            lines.append(f"  {f} -> {g}: {n}")
    return "\n".join(lines)
