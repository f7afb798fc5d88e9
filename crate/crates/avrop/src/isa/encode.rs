//! Instruction encoding, the inverse of [`super::decode_instruction`].

use super::{Instruction, IsaError, LpmDest, ZMode};

/// One or two encoded program words.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodedWords {
    One(u16),
    Two(u16, u16),
}

impl EncodedWords {
    pub fn push_into(self, out: &mut Vec<u16>) {
        match self {
            EncodedWords::One(w) => out.push(w),
            EncodedWords::Two(a, b) => {
                out.push(a);
                out.push(b);
            }
        }
    }
}

fn check(cond: bool, context: &'static str, value: i64) -> Result<(), IsaError> {
    if cond {
        Ok(())
    } else {
        Err(IsaError::OperandOutOfRange { context, value })
    }
}

fn reg5(context: &'static str, r: u8) -> Result<u16, IsaError> {
    check(r < 32, context, r as i64)?;
    Ok((r as u16) << 4)
}

fn reg5_low(context: &'static str, r: u8) -> Result<u16, IsaError> {
    check(r < 32, context, r as i64)?;
    let r = r as u16;
    Ok(((r & 0x10) << 5) | (r & 0x0f))
}

fn reg4_high(context: &'static str, r: u8) -> Result<u16, IsaError> {
    check((16..32).contains(&r), context, r as i64)?;
    Ok(((r as u16) & 0x0f) << 4)
}

fn imm8(k: u8) -> u16 {
    let k = k as u16;
    ((k & 0xf0) << 4) | (k & 0x0f)
}

fn branch(base: u16, context: &'static str, disp: i8) -> Result<u16, IsaError> {
    check((-64..64).contains(&disp), context, disp as i64)?;
    Ok(base | (((disp as u16) & 0x7f) << 3))
}

fn rel12(base: u16, context: &'static str, disp: i16) -> Result<u16, IsaError> {
    check((-2048..2048).contains(&disp), context, disp as i64)?;
    Ok(base | ((disp as u16) & 0x0fff))
}

/// Encode one instruction. Fails with [`IsaError::OperandOutOfRange`] on
/// invalid operands and [`IsaError::UnsupportedMnemonic`] for `Unknown`.
pub fn encode(inst: &Instruction) -> Result<EncodedWords, IsaError> {
    use EncodedWords::{One, Two};
    use Instruction::*;

    let words = match *inst {
        Nop => One(0x0000),
        Ret => One(0x9508),
        Reti => One(0x9518),
        Spm => One(0x95e8),
        Ijmp => One(0x9409),
        Icall => One(0x9509),
        Cli => One(0x94f8),
        Sei => One(0x9478),
        Pop { rd } => One(0x900f | reg5("pop", rd)?),
        Push { rr } => One(0x920f | reg5("push", rr)?),
        Movw { rd, rr } => {
            check(rd < 32 && rd % 2 == 0, "movw rd", rd as i64)?;
            check(rr < 32 && rr % 2 == 0, "movw rr", rr as i64)?;
            One(0x0100 | ((rd as u16 / 2) << 4) | (rr as u16 / 2))
        }
        Mov { rd, rr } => One(0x2c00 | reg5("mov rd", rd)? | reg5_low("mov rr", rr)?),
        Add { rd, rr } => One(0x0c00 | reg5("add rd", rd)? | reg5_low("add rr", rr)?),
        Eor { rd, rr } => One(0x2400 | reg5("eor rd", rd)? | reg5_low("eor rr", rr)?),
        Ldi { rd, k } => One(0xe000 | reg4_high("ldi", rd)? | imm8(k)),
        Cpi { rd, k } => One(0x3000 | reg4_high("cpi", rd)? | imm8(k)),
        Subi { rd, k } => One(0x5000 | reg4_high("subi", rd)? | imm8(k)),
        Sbci { rd, k } => One(0x4000 | reg4_high("sbci", rd)? | imm8(k)),
        In { rd, io } => {
            check(io < 64, "in io", io as i64)?;
            let io = io as u16;
            One(0xb000 | reg5("in rd", rd)? | ((io & 0x30) << 5) | (io & 0x0f))
        }
        Out { io, rr } => {
            check(io < 64, "out io", io as i64)?;
            let io = io as u16;
            One(0xb800 | reg5("out rr", rr)? | ((io & 0x30) << 5) | (io & 0x0f))
        }
        Sbi { io, bit } => {
            check(io < 32, "sbi io", io as i64)?;
            check(bit < 8, "sbi bit", bit as i64)?;
            One(0x9a00 | ((io as u16) << 3) | bit as u16)
        }
        Cbi { io, bit } => {
            check(io < 32, "cbi io", io as i64)?;
            check(bit < 8, "cbi bit", bit as i64)?;
            One(0x9800 | ((io as u16) << 3) | bit as u16)
        }
        St { mode, rr } => match mode {
            ZMode::Plain => One(0x8200 | reg5("st", rr)?),
            ZMode::PostInc => One(0x9201 | reg5("st", rr)?),
            ZMode::Disp(q) => {
                check(q < 64, "std displacement", q as i64)?;
                let q = q as u16;
                One(0x8200
                    | reg5("std", rr)?
                    | ((q & 0x20) << 8)
                    | ((q & 0x18) << 7)
                    | (q & 0x07))
            }
        },
        Ld { rd, mode } => match mode {
            ZMode::Plain => One(0x8000 | reg5("ld", rd)?),
            ZMode::PostInc => One(0x9001 | reg5("ld", rd)?),
            ZMode::Disp(q) => {
                check(q < 64, "ldd displacement", q as i64)?;
                let q = q as u16;
                One(0x8000
                    | reg5("ldd", rd)?
                    | ((q & 0x20) << 8)
                    | ((q & 0x18) << 7)
                    | (q & 0x07))
            }
        },
        Sts { addr, rr } => Two(0x9200 | reg5("sts", rr)?, addr),
        Lds { rd, addr } => Two(0x9000 | reg5("lds", rd)?, addr),
        Lpm { dest } => match dest {
            LpmDest::R0Implied => One(0x95c8),
            LpmDest::Reg(rd) => One(0x9004 | reg5("lpm", rd)?),
            LpmDest::RegPostInc(rd) => One(0x9005 | reg5("lpm", rd)?),
        },
        Jmp { addr } => Two(0x940c, addr),
        Call { addr } => Two(0x940e, addr),
        Rjmp { disp } => One(rel12(0xc000, "rjmp", disp)?),
        Rcall { disp } => One(rel12(0xd000, "rcall", disp)?),
        Brne { disp } => One(branch(0xf401, "brne", disp)?),
        Breq { disp } => One(branch(0xf001, "breq", disp)?),
        Adiw { rd, k } => {
            check(matches!(rd, 24 | 26 | 28 | 30), "adiw rd", rd as i64)?;
            check(k < 64, "adiw k", k as i64)?;
            let k = k as u16;
            One(0x9600 | (((rd as u16 - 24) / 2) << 4) | ((k & 0x30) << 2) | (k & 0x0f))
        }
        Sbiw { rd, k } => {
            check(matches!(rd, 24 | 26 | 28 | 30), "sbiw rd", rd as i64)?;
            check(k < 64, "sbiw k", k as i64)?;
            let k = k as u16;
            One(0x9700 | (((rd as u16 - 24) / 2) << 4) | ((k & 0x30) << 2) | (k & 0x0f))
        }
        Unknown { word } => {
            return Err(IsaError::UnsupportedMnemonic(format!(".word 0x{word:04x}")))
        }
    };
    Ok(words)
}

/// Encode a whole program into its program-word sequence.
///
/// Decoding the output with [`super::decode_instruction`] reproduces the
/// input exactly.
pub fn assemble(program: &[Instruction]) -> Result<Vec<u16>, IsaError> {
    let mut out = Vec::with_capacity(program.len());
    for inst in program {
        encode(inst)?.push_into(&mut out);
    }
    Ok(out)
}
