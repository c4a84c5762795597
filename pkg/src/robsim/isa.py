"""Toy macro-instruction set: parsing, printing, and micro-op expansion.

A program is a flat list of macro instructions plus a label table and an
initial-memory map. Macro instructions decode into micro-ops; every opcode
expands to exactly one micro-op except the string-repeat opcodes, whose
expansion count is a function of the runtime counter value:

    rep_movs  -> 2*n micro-ops
    rep_lods  -> 5*n + 12 micro-ops

Expansion happens at decode time in the core, so the counter value may be a
speculative (bypassed) one. This module only supplies the mechanics; timing
lives in robsim.core.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

ADDRESS_SPACE = 1 << 20  # valid data addresses are [0, ADDRESS_SPACE)
DEFAULT_EXPANSION_CAP = 4096  # max micro-ops emitted per rep instruction


class Opcode(enum.Enum):
    LOAD = "load"
    STORE = "store"
    ALU = "alu"
    SETSHIFT = "setshift"
    BRANCH = "branch"
    JUMP = "jump"
    REP_MOVS = "rep_movs"
    REP_LODS = "rep_lods"
    FENCE = "fence"
    NOP = "nop"


class UopKind(enum.Enum):
    MEM_READ = "mem_read"
    MEM_WRITE = "mem_write"
    ALU = "alu"
    BRANCH_RESOLVE = "branch_resolve"
    NOP = "nop"


#: symbolic latency class per micro-op kind; the core config maps these to cycles
LATENCY_CLASS = {
    UopKind.MEM_READ: "mem",
    UopKind.MEM_WRITE: "mem",
    UopKind.ALU: "alu",
    UopKind.BRANCH_RESOLVE: "alu",
    UopKind.NOP: "nop",
}

REP_OPCODES = (Opcode.REP_MOVS, Opcode.REP_LODS)


class ParseError(ValueError):
    """Program text rejected; carries the 1-based source line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class ExpansionError(ValueError):
    pass


@dataclass(frozen=True)
class Reg:
    index: int

    def __str__(self) -> str:
        return f"r{self.index}"


@dataclass(frozen=True)
class Imm:
    value: int

    def __str__(self) -> str:
        return str(self.value)


@dataclass(frozen=True)
class Mem:
    """Address expression: absolute immediate, or register plus offset."""

    base: Reg | None
    offset: int

    def __str__(self) -> str:
        if self.base is None:
            return f"[{self.offset}]"
        if self.offset:
            sign = "+" if self.offset > 0 else "-"
            return f"[{self.base}{sign}{abs(self.offset)}]"
        return f"[{self.base}]"


@dataclass(frozen=True)
class Label:
    name: str

    def __str__(self) -> str:
        return self.name


Operand = Reg | Imm | Mem | Label


@dataclass(frozen=True)
class MacroInstruction:
    id: int
    opcode: Opcode
    operands: tuple[Operand, ...]
    label: str | None = None

    def dest_reg(self) -> Reg | None:
        if self.opcode in (Opcode.LOAD, Opcode.ALU, Opcode.SETSHIFT):
            return self.operands[0]  # type: ignore[return-value]
        return None

    def source_regs(self) -> tuple[Reg, ...]:
        """Registers read by this instruction, in operand order."""
        out: list[Reg] = []
        if self.opcode == Opcode.LOAD:
            mem = self.operands[1]
            if isinstance(mem, Mem) and mem.base is not None:
                out.append(mem.base)
        elif self.opcode == Opcode.STORE:
            out.append(self.operands[0])  # type: ignore[arg-type]
            mem = self.operands[1]
            if isinstance(mem, Mem) and mem.base is not None:
                out.append(mem.base)
        elif self.opcode == Opcode.ALU:
            for op in self.operands[1:]:
                if isinstance(op, Reg):
                    out.append(op)
        elif self.opcode == Opcode.SETSHIFT:
            out.append(self.operands[1])  # type: ignore[arg-type]
        elif self.opcode == Opcode.BRANCH:
            out.append(self.operands[0])  # type: ignore[arg-type]
        elif self.opcode in REP_OPCODES:
            out.append(self.operands[0])  # type: ignore[arg-type]
        return tuple(out)

    def target_label(self) -> str | None:
        if self.opcode == Opcode.BRANCH:
            return self.operands[1].name  # type: ignore[union-attr]
        if self.opcode == Opcode.JUMP:
            return self.operands[0].name  # type: ignore[union-attr]
        return None


@dataclass(frozen=True)
class MicroOp:
    parent: int  # id of the owning macro instruction
    seq: int  # position within the expansion
    kind: UopKind

    @property
    def latency_class(self) -> str:
        return LATENCY_CLASS[self.kind]


@dataclass
class Program:
    instructions: list[MacroInstruction]
    labels: dict[str, int] = field(default_factory=dict)
    data_init: dict[int, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.instructions)

    def target_of(self, instr: MacroInstruction) -> int | None:
        name = instr.target_label()
        return None if name is None else self.labels[name]

    def validate(self) -> None:
        for i, instr in enumerate(self.instructions):
            if instr.id != i:
                raise ValueError(f"instruction ids not dense at {instr.id}")
            name = instr.target_label()
            if name is not None and name not in self.labels:
                raise ValueError(f"unresolved label {name!r} in instruction {i}")
        for addr in self.data_init:
            if not 0 <= addr < ADDRESS_SPACE:
                raise ValueError(f"data address {addr:#x} outside address space")


_ARITY = {
    Opcode.LOAD: 2,
    Opcode.STORE: 2,
    Opcode.SETSHIFT: 3,
    Opcode.BRANCH: 2,
    Opcode.JUMP: 1,
    Opcode.REP_MOVS: 1,
    Opcode.REP_LODS: 1,
    Opcode.FENCE: 0,
    Opcode.NOP: 0,
}


def _parse_int(text: str, line_no: int) -> int:
    try:
        return int(text, 0)
    except ValueError:
        raise ParseError(line_no, f"expected integer, got {text!r}") from None


def _parse_reg(text: str, line_no: int) -> Reg:
    t = text.strip().lower()
    if not t.startswith("r") or not t[1:].isdigit():
        raise ParseError(line_no, f"expected register, got {text!r}")
    return Reg(int(t[1:]))


def _parse_operand(text: str, line_no: int) -> Operand:
    t = text.strip()
    if not t:
        raise ParseError(line_no, "empty operand")
    if t.startswith("["):
        if not t.endswith("]"):
            raise ParseError(line_no, f"unterminated address {t!r}")
        inner = t[1:-1].strip()
        for sign in ("+", "-"):
            if sign in inner[1:]:
                base_txt, off_txt = inner.split(sign, 1)
                base = _parse_reg(base_txt, line_no)
                off = _parse_int(off_txt.strip(), line_no)
                return Mem(base, off if sign == "+" else -off)
        if inner.lower().startswith("r") and inner[1:].isdigit():
            return Mem(_parse_reg(inner, line_no), 0)
        return Mem(None, _parse_int(inner, line_no))
    if t.lower().startswith("r") and t[1:].isdigit():
        return Reg(int(t[1:]))
    if t[0].isdigit() or t[0] in "+-":
        return Imm(_parse_int(t, line_no))
    return Label(t)


def _check_operands(op: Opcode, operands: tuple[Operand, ...], line_no: int) -> None:
    if op == Opcode.ALU:
        if len(operands) not in (2, 3):
            raise ParseError(line_no, "alu takes 2 or 3 operands")
        if not isinstance(operands[0], Reg):
            raise ParseError(line_no, "alu destination must be a register")
        for src in operands[1:]:
            if not isinstance(src, (Reg, Imm)):
                raise ParseError(line_no, "alu sources must be registers or immediates")
        return
    if len(operands) != _ARITY[op]:
        raise ParseError(line_no, f"{op.value} takes {_ARITY[op]} operand(s)")
    shapes: dict[Opcode, tuple[type, ...]] = {
        Opcode.LOAD: (Reg, Mem),
        Opcode.STORE: (Reg, Mem),
        Opcode.SETSHIFT: (Reg, Reg, Imm),
        Opcode.BRANCH: (Reg, Label),
        Opcode.JUMP: (Label,),
        Opcode.REP_MOVS: (Reg,),
        Opcode.REP_LODS: (Reg,),
        Opcode.FENCE: (),
        Opcode.NOP: (),
    }
    for got, want in zip(operands, shapes[op]):
        if not isinstance(got, want):
            raise ParseError(line_no, f"bad operand {got} for {op.value}")


def parse_program(text: str) -> Program:
    """Parse assembly text into a Program.

    Grammar (see docs/program_format.md for the full EBNF): one statement per
    line; `#` starts a comment; `.data ADDR VALUE` seeds initial memory;
    `label:` may prefix an instruction or stand alone, attaching to the next
    instruction.
    """
    instructions: list[MacroInstruction] = []
    labels: dict[str, int] = {}
    data_init: dict[int, int] = {}
    pending_label: str | None = None
    pending_line = 0

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith(".data"):
            parts = line.split()
            if len(parts) != 3:
                raise ParseError(line_no, ".data takes an address and a value")
            addr = _parse_int(parts[1], line_no)
            data_init[addr] = _parse_int(parts[2], line_no)
            continue
        label: str | None = None
        if ":" in line:
            label_txt, rest = line.split(":", 1)
            label = label_txt.strip()
            if not label or any(c.isspace() for c in label):
                raise ParseError(line_no, f"bad label {label_txt!r}")
            line = rest.strip()
        if label is not None:
            if label in labels or label == pending_label:
                raise ParseError(line_no, f"duplicate label {label!r}")
            if pending_label is not None:
                raise ParseError(line_no, f"label {pending_label!r} already pending")
            if not line:
                pending_label = label
                pending_line = line_no
                continue
        if pending_label is not None:
            label = pending_label
            pending_label = None
        fields = line.split(None, 1)
        mnemonic = fields[0].lower()
        try:
            opcode = Opcode(mnemonic)
        except ValueError:
            raise ParseError(line_no, f"unknown opcode {mnemonic!r}") from None
        operand_txt = fields[1] if len(fields) > 1 else ""
        operands = tuple(
            _parse_operand(piece, line_no)
            for piece in operand_txt.split(",")
            if piece.strip()
        ) if operand_txt.strip() else ()
        _check_operands(opcode, operands, line_no)
        idx = len(instructions)
        if label is not None:
            labels[label] = idx
        instructions.append(MacroInstruction(idx, opcode, operands, label))

    if pending_label is not None:
        raise ParseError(pending_line, f"label {pending_label!r} has no instruction")

    program = Program(instructions, labels, data_init)
    for instr in instructions:
        name = instr.target_label()
        if name is not None and name not in labels:
            raise ParseError(0, f"unresolved label {name!r} in instruction {instr.id}")
    program.validate()
    return program


def print_program(program: Program) -> str:
    """Canonical text form; parse_program(print_program(p)) reproduces p."""
    lines = [f".data {addr} {val}" for addr, val in sorted(program.data_init.items())]
    for instr in program.instructions:
        body = instr.opcode.value
        if instr.operands:
            body += " " + ", ".join(str(op) for op in instr.operands)
        if instr.label is not None:
            lines.append(f"{instr.label}: {body}")
        else:
            lines.append(f"    {body}")
    return "\n".join(lines) + "\n"


def rep_expansion_count(opcode: Opcode, counter_value: int) -> int:
    """Requested micro-op count for a rep opcode at counter value n (uncapped)."""
    n = max(counter_value, 0)
    if opcode == Opcode.REP_MOVS:
        return 2 * n
    if opcode == Opcode.REP_LODS:
        return 5 * n + 12
    raise ExpansionError(f"{opcode.value} is not a rep opcode")


_KIND_BY_OPCODE = {
    Opcode.LOAD: UopKind.MEM_READ,
    Opcode.STORE: UopKind.MEM_WRITE,
    Opcode.ALU: UopKind.ALU,
    Opcode.SETSHIFT: UopKind.ALU,
    Opcode.BRANCH: UopKind.BRANCH_RESOLVE,
    Opcode.JUMP: UopKind.NOP,
    Opcode.FENCE: UopKind.NOP,
    Opcode.NOP: UopKind.NOP,
}


def expand_macro(
    instr: MacroInstruction,
    counter_value: int | None = None,
    cap: int = DEFAULT_EXPANSION_CAP,
) -> list[MicroOp]:
    """Decode one macro instruction into its micro-ops.

    Rep opcodes require the runtime counter value; the emitted count is capped
    at `cap` (callers surface a trace warning when the cap bites). Every other
    opcode yields exactly one micro-op.
    """
    if instr.opcode in REP_OPCODES:
        if counter_value is None:
            raise ExpansionError(f"instruction {instr.id}: rep expansion needs a counter value")
        requested = rep_expansion_count(instr.opcode, counter_value)
        emitted = min(requested, cap)
        return [MicroOp(instr.id, i, UopKind.NOP) for i in range(emitted)]
    return [MicroOp(instr.id, 0, _KIND_BY_OPCODE[instr.opcode])]
