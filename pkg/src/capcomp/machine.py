"""The compartment micro-machine.

Execution model: instructions live outside the simulated byte memory in a
plain list indexed by the program counter, which is the cursor of the
program-counter capability (pcc).  Every legacy load/store is checked against
the installed default data capability (ddc); capability-operand accesses are
checked against the operand itself.  A step either retires completely or
faults without touching any register, memory byte, or tag.

Privileged operations (seal, install-ddc, read-ddc) only execute while the
pcc lies inside the switcher/boot code region.  The one exception is the
gate-return path: a successful load-pair-branch arms a one-shot grant that
lets exactly the next instruction install the ddc from the pair's second
register.  Since load-pair-branch always transfers control, untrusted code
cannot place itself inside that window.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .capability import (
    ADDR_MASK,
    Capability,
    FaultKind,
    NULL_CAP,
    Perm,
    check_access,
    int_cap,
    seal as seal_cap,
    set_address,
    set_bounds,
    unseal,
)
from .isa import (
    INT_WIDTH,
    Ins,
    NUM_REGS,
    Op,
    REG_LINK,
    REG_SHARED,
    REG_ZERO,
    format_ins,
)
from .memory import AddressError, AlignmentError, CAP_SLOT, TaggedMemory

PAIR_BYTES = 2 * CAP_SLOT      # a (pcc, ddc) capability pair in memory


class MachineError(Exception):
    """Harness misuse (stepping a faulted or halted machine, bad setup)."""


@dataclass(frozen=True, slots=True)
class Fault:
    """A recorded machine fault: what went wrong, where, and at which pc."""

    kind: FaultKind
    addr: int
    pc: int
    length: int = 1
    ddc_access: bool = False   # true only for legacy data accesses checked against ddc

    def __str__(self) -> str:
        return f"{self.kind}@{self.addr:#x} pc={self.pc}"


@dataclass(slots=True)
class MachineState:
    """Full architectural state plus the counters the cost model reads.

    The register file holds capability values; plain integers travel as
    untagged capabilities whose cursor is the integer.  Register 16 is
    hardwired to zero.  `step` mutates the state in place and returns it.
    """

    regs: list[Capability] = field(default_factory=lambda: [NULL_CAP] * NUM_REGS)
    pcc: Capability = NULL_CAP
    ddc: Capability = NULL_CAP
    current_compartment: int | None = None
    fault: Fault | None = None
    halted: bool = False

    instructions_retired: int = 0
    memory_accesses: int = 0
    switches_hot: int = 0
    switches_cold: int = 0
    ddc_swap_events: int = 0

    # Exception-based sharing: when enabled, `run` lets a bounds fault on a
    # legacy access swap ddc with the shared-region capability in r18.
    exception_sharing: bool = False

    # Privileged-code window in instruction-index space; None means the whole
    # program is boot context (bare-machine tests).
    switcher_bounds: tuple[int, int] | None = None
    # Object types load-pair-branch accepts; None accepts any sealed value.
    lpb_otypes: frozenset[int] | None = None
    # (base, top, compartment) in instruction-index space, most specific first.
    code_regions: list[tuple[int, int, int]] = field(default_factory=list)

    # One-shot install-ddc window armed by load-pair-branch.
    ddc_grant: int | None = None

    # Hot/cold classification of switch events.
    hot_fraction: float = 1.0
    rng: random.Random = field(default_factory=lambda: random.Random(0))

    # When a list is installed here, every successful data access appends
    # (pc, addr, length, is_write).  Used by the isolation fuzzer.
    access_log: list | None = None

    def fork_registers(self) -> list[Capability]:
        return list(self.regs)


def _privileged(st: MachineState, pc: int) -> bool:
    if st.switcher_bounds is None:
        return True
    lo, hi = st.switcher_bounds
    return lo <= pc < hi


def _blocked_entry(st: MachineState, target: int, pc: int) -> bool:
    """Ordinary branches may not land inside the privileged region; invoking
    a sealed capability is the only way in.  Without this, a leaked switcher
    code capability would turn mid-sequence instructions into gadgets."""
    return _privileged(st, target) and not _privileged(st, pc)


def _owner_of(st: MachineState, pc: int) -> int | None:
    for base, top, comp in st.code_regions:
        if base <= pc < top:
            return comp
    return None


def _fault(st: MachineState, kind: FaultKind, addr: int, pc: int,
           length: int = 1, ddc_access: bool = False) -> MachineState:
    st.fault = Fault(kind, addr, pc, length, ddc_access)
    return st


def _setreg(st: MachineState, idx: int, value: Capability) -> None:
    if idx != REG_ZERO:
        st.regs[idx] = value


def _retire(st: MachineState, new_pc: int) -> MachineState:
    st.instructions_retired += 1
    st.pcc = set_address(st.pcc, new_pc)
    comp = _owner_of(st, new_pc)
    if comp is not None:
        st.current_compartment = comp
    return st


def _retire_branch(st: MachineState, new_pcc: Capability) -> MachineState:
    st.instructions_retired += 1
    st.pcc = new_pcc
    comp = _owner_of(st, new_pcc.address)
    if comp is not None:
        st.current_compartment = comp
    return st


def _count_switch(st: MachineState) -> None:
    if st.hot_fraction >= 1.0 or st.rng.random() < st.hot_fraction:
        st.switches_hot += 1
    else:
        st.switches_cold += 1


def _lpb_commit(st: MachineState, mem: TaggedMemory, sealed_reg: int,
                second_reg: int, pc: int) -> MachineState:
    """Shared semantics of load-pair-branch / invoke-sealed.

    Unseals the operand, loads the (branch target, data) capability pair at
    its cursor, branches to the first element, leaves the second in
    `second_reg`, the unsealed operand back in `sealed_reg`, and a return
    capability (old pcc advanced past this instruction) in the link register.
    Arms the one-shot install-ddc window for `second_reg`.
    """
    sc = st.regs[sealed_reg]
    if not sc.tag:
        return _fault(st, FaultKind.TAG, sc.address, pc)
    if not sc.sealed:
        return _fault(st, FaultKind.SEAL, sc.address, pc)
    if st.lpb_otypes is not None and sc.otype not in st.lpb_otypes:
        return _fault(st, FaultKind.SEAL, sc.address, pc)
    u = unseal(sc)
    addr = u.address
    f = check_access(u, addr, PAIR_BYTES, Perm.LOAD_CAP)
    if f is not None:
        return _fault(st, f, addr, pc, PAIR_BYTES)
    if addr % CAP_SLOT != 0:
        return _fault(st, FaultKind.ALIGNMENT, addr, pc, PAIR_BYTES)
    if addr + PAIR_BYTES > mem.size:
        return _fault(st, FaultKind.ADDRESS, addr, pc, PAIR_BYTES)
    first = mem.load_cap(addr)
    second = mem.load_cap(addr + CAP_SLOT)
    if not first.tag:
        return _fault(st, FaultKind.TAG, addr, pc, CAP_SLOT)
    if not second.tag:
        return _fault(st, FaultKind.TAG, addr + CAP_SLOT, pc, CAP_SLOT)
    bf = check_access(first, first.address, 1, Perm.EXECUTE)
    if bf is not None:
        return _fault(st, bf, first.address, pc)

    ret_cap = set_address(st.pcc, pc + 1)
    _setreg(st, second_reg, second)
    _setreg(st, sealed_reg, u)
    _setreg(st, REG_LINK, ret_cap)
    st.ddc_grant = second_reg
    # The pair read is architectural, like a fetch: it is not an explicit
    # data access by the running compartment, so it stays out of access_log.
    st.memory_accesses += 1
    _count_switch(st)
    return _retire_branch(st, first)


def invoke_sealed(st: MachineState, mem: TaggedMemory, sealed_reg: int,
                  second_reg: int = 19) -> MachineState:
    """Invoke a sealed capability: the only road into the switcher.

    Equivalent to executing a load-pair-branch on `sealed_reg`.  On success
    the pcc points at the loaded branch target, the pair's second element is
    in `second_reg`, and the link register holds the return capability.  The
    ddc is not switched here; the landing code does that itself.
    """
    if st.fault is not None:
        raise MachineError("invoke_sealed with a pending fault")
    st.ddc_grant = None
    return _lpb_commit(st, mem, sealed_reg, second_reg, st.pcc.address)


def step(st: MachineState, mem: TaggedMemory, program: list[Ins]) -> MachineState:
    """Execute exactly one instruction (or record exactly one fault)."""
    if st.fault is not None:
        raise MachineError("step with a pending fault; clear or handle it first")
    if st.halted:
        raise MachineError("step after halt")

    pc = st.pcc.address
    grant = st.ddc_grant
    st.ddc_grant = None            # the window is exactly one instruction wide

    ff = check_access(st.pcc, pc, 1, Perm.EXECUTE)
    if ff is not None:
        return _fault(st, ff, pc, pc)
    if pc >= len(program):
        return _fault(st, FaultKind.ADDRESS, pc, pc)

    ins = program[pc]
    op = ins.op
    regs = st.regs

    if op is Op.NOP:
        return _retire(st, pc + 1)

    if op is Op.HALT:
        st.halted = True
        st.instructions_retired += 1
        return st

    if op is Op.LOAD_INT or op is Op.STORE_INT:
        is_store = op is Op.STORE_INT
        if ins.cap:
            auth = regs[ins.b]
            addr = (auth.address + ins.imm) & ADDR_MASK
        else:
            auth = st.ddc
            addr = (regs[ins.b].address + ins.imm) & ADDR_MASK
        need = Perm.STORE if is_store else Perm.LOAD
        # Legacy accesses from inside the privileged region are physical: the
        # switcher return leg must reach the table while the caller's ddc is
        # already installed.  Explicit capability operands stay checked.
        if ins.cap or not _privileged(st, pc):
            f = check_access(auth, addr, INT_WIDTH, need)
            if f is not None:
                return _fault(st, f, addr, pc, INT_WIDTH, ddc_access=not ins.cap)
        if addr + INT_WIDTH > mem.size:
            return _fault(st, FaultKind.ADDRESS, addr, pc, INT_WIDTH)
        if is_store:
            mem.write_bytes(addr, (regs[ins.a].address & ADDR_MASK).to_bytes(INT_WIDTH, "little"))
        else:
            val = int.from_bytes(mem.read_bytes(addr, INT_WIDTH), "little")
            _setreg(st, ins.a, int_cap(val))
        st.memory_accesses += 1
        if st.access_log is not None:
            st.access_log.append((pc, addr, INT_WIDTH, is_store))
        return _retire(st, pc + 1)

    if op is Op.LOAD_CAP or op is Op.STORE_CAP:
        is_store = op is Op.STORE_CAP
        if ins.cap:
            auth = regs[ins.b]
            addr = (auth.address + ins.imm) & ADDR_MASK
        else:
            auth = st.ddc
            addr = (regs[ins.b].address + ins.imm) & ADDR_MASK
        need = Perm.STORE_CAP if is_store else Perm.LOAD_CAP
        if ins.cap or not _privileged(st, pc):
            f = check_access(auth, addr, CAP_SLOT, need)
            if f is not None:
                return _fault(st, f, addr, pc, CAP_SLOT, ddc_access=not ins.cap)
        if addr % CAP_SLOT != 0:
            return _fault(st, FaultKind.ALIGNMENT, addr, pc, CAP_SLOT)
        if addr + CAP_SLOT > mem.size:
            return _fault(st, FaultKind.ADDRESS, addr, pc, CAP_SLOT)
        if is_store:
            mem.store_cap(addr, regs[ins.a])
        else:
            _setreg(st, ins.a, mem.load_cap(addr))
        st.memory_accesses += 1
        if st.access_log is not None:
            st.access_log.append((pc, addr, CAP_SLOT, is_store))
        return _retire(st, pc + 1)

    if op is Op.SET_BOUNDS:
        _setreg(st, ins.a, set_bounds(regs[ins.b], regs[ins.c].address, regs[ins.d].address))
        return _retire(st, pc + 1)

    if op is Op.SET_ADDRESS:
        _setreg(st, ins.a, set_address(regs[ins.b], regs[ins.c].address))
        return _retire(st, pc + 1)

    if op is Op.RESTRICT_PERMS:
        src = regs[ins.b]
        tag = src.tag and not src.sealed
        _setreg(st, ins.a, Capability(src.base, src.top, src.address,
                                      src.perms & Perm(ins.imm), src.otype, tag))
        return _retire(st, pc + 1)

    if op is Op.SEAL:
        if not _privileged(st, pc):
            return _fault(st, FaultKind.PERMISSION, pc, pc)
        if not 0 < ins.imm <= 0xFFFF:
            return _fault(st, FaultKind.PERMISSION, pc, pc)
        _setreg(st, ins.a, seal_cap(regs[ins.b], ins.imm))
        return _retire(st, pc + 1)

    if op is Op.MOVE:
        _setreg(st, ins.a, regs[ins.b])
        return _retire(st, pc + 1)

    if op is Op.ADD_IMM:
        src = regs[ins.b]
        _setreg(st, ins.a, set_address(src, src.address + ins.imm))
        return _retire(st, pc + 1)

    if op is Op.BRANCH_CAP:
        target = regs[ins.a]
        f = check_access(target, target.address, 1, Perm.EXECUTE)
        if f is not None:
            return _fault(st, f, target.address, pc)
        if _blocked_entry(st, target.address, pc):
            return _fault(st, FaultKind.PERMISSION, target.address, pc)
        return _retire_branch(st, target)

    if op is Op.CALL_LOCAL:
        target = regs[ins.a].address
        new_pcc = set_address(st.pcc, target)
        f = check_access(new_pcc, target, 1, Perm.EXECUTE)
        if f is not None:
            return _fault(st, f, target, pc)
        if _blocked_entry(st, target, pc):
            return _fault(st, FaultKind.PERMISSION, target, pc)
        _setreg(st, REG_LINK, set_address(st.pcc, pc + 1))
        return _retire_branch(st, new_pcc)

    if op is Op.RETURN_LOCAL:
        target = regs[REG_LINK]
        f = check_access(target, target.address, 1, Perm.EXECUTE)
        if f is not None:
            return _fault(st, f, target.address, pc)
        if _blocked_entry(st, target.address, pc):
            return _fault(st, FaultKind.PERMISSION, target.address, pc)
        return _retire_branch(st, target)

    if op is Op.LOAD_PAIR_BRANCH:
        return _lpb_commit(st, mem, ins.a, ins.b, pc)

    if op is Op.INSTALL_DDC:
        if not (_privileged(st, pc) or grant == ins.a):
            return _fault(st, FaultKind.PERMISSION, pc, pc)
        cap = regs[ins.a]
        if not cap.tag:
            return _fault(st, FaultKind.TAG, cap.address, pc)
        if cap.sealed:
            return _fault(st, FaultKind.SEAL, cap.address, pc)
        st.ddc = cap
        return _retire(st, pc + 1)

    if op is Op.READ_DDC:
        if not _privileged(st, pc):
            return _fault(st, FaultKind.PERMISSION, pc, pc)
        _setreg(st, ins.a, st.ddc)
        return _retire(st, pc + 1)

    if op is Op.DERIVE_DDC:
        _setreg(st, ins.a, set_bounds(st.ddc, regs[ins.b].address, regs[ins.c].address))
        return _retire(st, pc + 1)

    raise MachineError(f"unhandled opcode {op}")


def handle_fault_ddc_swap(st: MachineState, mem: TaggedMemory) -> bool:
    """Exception-based sharing handler.

    If the pending fault is a bounds miss on a legacy (ddc-checked) data
    access and the faulting range lies inside the shared-region capability in
    r18, swap ddc and r18, clear the fault, and report True; execution then
    resumes at the faulting instruction.  The swap is symmetric, so the next
    private access swaps straight back.
    """
    f = st.fault
    if f is None:
        raise MachineError("no pending fault to handle")
    if f.kind is not FaultKind.BOUNDS or not f.ddc_access:
        return False
    shared = st.regs[REG_SHARED]
    if not shared.tag or shared.sealed:
        return False
    if not (shared.base <= f.addr and f.addr + f.length <= shared.top):
        return False
    st.regs[REG_SHARED] = st.ddc
    st.ddc = shared
    st.fault = None
    st.ddc_swap_events += 1
    return True


def run(st: MachineState, mem: TaggedMemory, program: list[Ins],
        max_steps: int = 100_000, trace: list[str] | None = None) -> MachineState:
    """Run until halt, an unhandled fault, or the step budget is exhausted.

    With exception sharing enabled, eligible bounds faults are transparently
    swapped and retried (each retry consumes budget).  When `trace` is given,
    one formatted line is appended per attempted step:
    `idx | pc | op | compartment | fault?`.
    """
    steps = 0
    while steps < max_steps:
        if st.halted:
            break
        if st.fault is not None:
            if st.exception_sharing and handle_fault_ddc_swap(st, mem):
                continue
            break
        pc = st.pcc.address
        comp = st.current_compartment
        step(st, mem, program)
        if trace is not None:
            opname = format_ins(program[pc]) if pc < len(program) else "??"
            who = f"c{comp}" if comp is not None else "-"
            tail = f" | {st.fault}" if st.fault is not None else ""
            trace.append(f"{steps} | {pc} | {opname} | {who}{tail}")
        steps += 1
    return st
