//! AVR8 instruction subset: decoding, encoding and textual assembly.
//!
//! The subset covers everything the gadget scanner, the chain synthesizer
//! and the node emulator need: stack operations, register moves, Z-based
//! loads/stores, direct loads/stores, I/O accesses, SPM/LPM, and minimal
//! control flow for fixture firmware. Program memory is addressed in
//! 16-bit words throughout; displacements for branches and relative
//! jumps are word displacements relative to the following instruction.
//!
//! Every word that does not match a supported encoding decodes to
//! [`Instruction::Unknown`] so that callers sweeping real firmware (which
//! contains data words) can skip instead of abort.

mod decode;
mod encode;
mod text;

pub use decode::decode_instruction;
pub use encode::{assemble, encode, EncodedWords};
pub use text::{disassemble_range, format_listing, parse_line, parse_program, ListedInstruction};

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IsaError {
    /// A two-word opcode started at the last word of the input.
    #[error("two-word opcode 0x{low_word:04x} is missing its trailing word")]
    MissingTrailingWord { low_word: u16 },
    #[error("operand out of range in `{context}`: {value}")]
    OperandOutOfRange { context: &'static str, value: i64 },
    #[error("unsupported mnemonic `{0}`")]
    UnsupportedMnemonic(String),
    #[error("cannot parse `{line}`: {reason}")]
    ParseError { line: String, reason: String },
    #[error("range out of bounds: {start:#06x}..{end:#06x} (image is {size:#06x} words)")]
    RangeOutOfBounds { start: u32, end: u32, size: u32 },
}

/// Z-pointer addressing mode for `ld`/`st`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ZMode {
    /// `Z` — no displacement, pointer unchanged.
    Plain,
    /// `Z+` — post-increment.
    PostInc,
    /// `Z+q` — fixed displacement 0..=63 (`ldd`/`std`).
    Disp(u8),
}

/// Destination form of `lpm`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LpmDest {
    /// Plain `lpm` — implied r0 destination.
    R0Implied,
    /// `lpm Rd, Z`.
    Reg(u8),
    /// `lpm Rd, Z+`.
    RegPostInc(u8),
}

/// One decoded AVR instruction with its operands.
///
/// Register operands are 0–31, I/O addresses 0–63 (0–31 for `sbi`/`cbi`),
/// data addresses 0–65535 and program addresses are 16-bit word addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Instruction {
    Nop,
    Pop { rd: u8 },
    Push { rr: u8 },
    Ret,
    Reti,
    Movw { rd: u8, rr: u8 },
    Mov { rd: u8, rr: u8 },
    Ldi { rd: u8, k: u8 },
    In { rd: u8, io: u8 },
    Out { io: u8, rr: u8 },
    St { mode: ZMode, rr: u8 },
    Ld { rd: u8, mode: ZMode },
    Sts { addr: u16, rr: u8 },
    Lds { rd: u8, addr: u16 },
    Spm,
    Lpm { dest: LpmDest },
    Cli,
    Sei,
    Sbi { io: u8, bit: u8 },
    Cbi { io: u8, bit: u8 },
    Call { addr: u16 },
    Rcall { disp: i16 },
    Icall,
    Jmp { addr: u16 },
    Rjmp { disp: i16 },
    Ijmp,
    Cpi { rd: u8, k: u8 },
    Brne { disp: i8 },
    Breq { disp: i8 },
    Add { rd: u8, rr: u8 },
    Adiw { rd: u8, k: u8 },
    Sbiw { rd: u8, k: u8 },
    Subi { rd: u8, k: u8 },
    Sbci { rd: u8, k: u8 },
    Eor { rd: u8, rr: u8 },
    /// Unrecognized encoding; carries the raw word.
    Unknown { word: u16 },
}

impl Instruction {
    /// Size in 16-bit program words. `jmp`, `call`, `lds` and `sts` are 2,
    /// everything else (including `Unknown`) is 1.
    pub fn width(&self) -> u16 {
        match self {
            Instruction::Jmp { .. }
            | Instruction::Call { .. }
            | Instruction::Lds { .. }
            | Instruction::Sts { .. } => 2,
            _ => 1,
        }
    }

    /// True for `ret`/`reti`.
    pub fn is_return(&self) -> bool {
        matches!(self, Instruction::Ret | Instruction::Reti)
    }

    /// True for anything that diverts the program counter other than the
    /// gadget terminators: calls, jumps and conditional branches.
    pub fn is_control_flow(&self) -> bool {
        matches!(
            self,
            Instruction::Call { .. }
                | Instruction::Rcall { .. }
                | Instruction::Icall
                | Instruction::Jmp { .. }
                | Instruction::Rjmp { .. }
                | Instruction::Ijmp
                | Instruction::Brne { .. }
                | Instruction::Breq { .. }
        )
    }

    pub fn is_unknown(&self) -> bool {
        matches!(self, Instruction::Unknown { .. })
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Instruction::*;
        match *self {
            Nop => write!(f, "nop"),
            Pop { rd } => write!(f, "pop r{rd}"),
            Push { rr } => write!(f, "push r{rr}"),
            Ret => write!(f, "ret"),
            Reti => write!(f, "reti"),
            Movw { rd, rr } => write!(f, "movw r{rd}, r{rr}"),
            Mov { rd, rr } => write!(f, "mov r{rd}, r{rr}"),
            Ldi { rd, k } => write!(f, "ldi r{rd}, 0x{k:02x}"),
            In { rd, io } => write!(f, "in r{rd}, 0x{io:02x}"),
            Out { io, rr } => write!(f, "out 0x{io:02x}, r{rr}"),
            St { mode: ZMode::Plain, rr } => write!(f, "st Z, r{rr}"),
            St { mode: ZMode::PostInc, rr } => write!(f, "st Z+, r{rr}"),
            St { mode: ZMode::Disp(q), rr } => write!(f, "std Z+{q}, r{rr}"),
            Ld { rd, mode: ZMode::Plain } => write!(f, "ld r{rd}, Z"),
            Ld { rd, mode: ZMode::PostInc } => write!(f, "ld r{rd}, Z+"),
            Ld { rd, mode: ZMode::Disp(q) } => write!(f, "ldd r{rd}, Z+{q}"),
            Sts { addr, rr } => write!(f, "sts 0x{addr:04x}, r{rr}"),
            Lds { rd, addr } => write!(f, "lds r{rd}, 0x{addr:04x}"),
            Spm => write!(f, "spm"),
            Lpm { dest: LpmDest::R0Implied } => write!(f, "lpm"),
            Lpm { dest: LpmDest::Reg(rd) } => write!(f, "lpm r{rd}, Z"),
            Lpm { dest: LpmDest::RegPostInc(rd) } => write!(f, "lpm r{rd}, Z+"),
            Cli => write!(f, "cli"),
            Sei => write!(f, "sei"),
            Sbi { io, bit } => write!(f, "sbi 0x{io:02x}, {bit}"),
            Cbi { io, bit } => write!(f, "cbi 0x{io:02x}, {bit}"),
            Call { addr } => write!(f, "call 0x{addr:04x}"),
            Rcall { disp } => write!(f, "rcall .{disp:+}"),
            Icall => write!(f, "icall"),
            Jmp { addr } => write!(f, "jmp 0x{addr:04x}"),
            Rjmp { disp } => write!(f, "rjmp .{disp:+}"),
            Ijmp => write!(f, "ijmp"),
            Cpi { rd, k } => write!(f, "cpi r{rd}, 0x{k:02x}"),
            Brne { disp } => write!(f, "brne .{disp:+}"),
            Breq { disp } => write!(f, "breq .{disp:+}"),
            Add { rd, rr } => write!(f, "add r{rd}, r{rr}"),
            Adiw { rd, k } => write!(f, "adiw r{rd}, 0x{k:02x}"),
            Sbiw { rd, k } => write!(f, "sbiw r{rd}, 0x{k:02x}"),
            Subi { rd, k } => write!(f, "subi r{rd}, 0x{k:02x}"),
            Sbci { rd, k } => write!(f, "sbci r{rd}, 0x{k:02x}"),
            Eor { rd, rr } => write!(f, "eor r{rd}, r{rr}"),
            Unknown { word } => write!(f, ".word 0x{word:04x}"),
        }
    }
}
