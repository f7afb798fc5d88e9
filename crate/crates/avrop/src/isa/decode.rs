//! Word-level instruction decoding.

use super::{Instruction, IsaError, LpmDest, ZMode};

#[inline]
fn reg5(word: u16) -> u8 {
    ((word >> 4) & 0x1f) as u8
}

#[inline]
fn reg5_low(word: u16) -> u8 {
    // Second register operand of two-register ALU forms: bit 9 is the
    // high bit, bits 3..0 the low nibble.
    (((word >> 5) & 0x10) | (word & 0x0f)) as u8
}

#[inline]
fn imm8(word: u16) -> u8 {
    (((word >> 4) & 0xf0) | (word & 0x0f)) as u8
}

#[inline]
fn reg4_high(word: u16) -> u8 {
    // 4-bit destination field of the immediate forms, registers 16..31.
    (((word >> 4) & 0x0f) + 16) as u8
}

/// Sign-extend the 7-bit branch displacement (bits 9..3).
#[inline]
fn branch_disp(word: u16) -> i8 {
    let raw = ((word >> 3) & 0x7f) as u8;
    ((raw << 1) as i8) >> 1
}

/// Sign-extend the 12-bit relative jump/call displacement.
#[inline]
fn rel12(word: u16) -> i16 {
    let raw = word & 0x0fff;
    ((raw << 4) as i16) >> 4
}

/// Decode one instruction from its first word. `trailing_word` must carry
/// the following program word when `low_word` begins a two-word encoding;
/// decoding never aborts otherwise — unrecognized encodings come back as
/// [`Instruction::Unknown`].
pub fn decode_instruction(low_word: u16, trailing_word: Option<u16>) -> Result<Instruction, IsaError> {
    use Instruction::*;

    let two_word = |inst: fn(u16, u16) -> Instruction| -> Result<Instruction, IsaError> {
        match trailing_word {
            Some(t) => Ok(inst(low_word, t)),
            None => Err(IsaError::MissingTrailingWord { low_word }),
        }
    };

    let w = low_word;
    let inst = match w {
        0x0000 => Nop,
        0x9508 => Ret,
        0x9518 => Reti,
        0x95e8 => Spm,
        0x95c8 => Lpm { dest: LpmDest::R0Implied },
        0x9409 => Ijmp,
        0x9509 => Icall,
        0x94f8 => Cli,
        0x9478 => Sei,
        _ => match w & 0xff00 {
            0x0100 => Movw { rd: ((w >> 4) & 0x0f) as u8 * 2, rr: (w & 0x0f) as u8 * 2 },
            0x9600 => Adiw {
                rd: 24 + ((w >> 4) & 0x03) as u8 * 2,
                k: (((w >> 2) & 0x30) | (w & 0x0f)) as u8,
            },
            0x9700 => Sbiw {
                rd: 24 + ((w >> 4) & 0x03) as u8 * 2,
                k: (((w >> 2) & 0x30) | (w & 0x0f)) as u8,
            },
            0x9800 => Cbi { io: ((w >> 3) & 0x1f) as u8, bit: (w & 0x07) as u8 },
            0x9a00 => Sbi { io: ((w >> 3) & 0x1f) as u8, bit: (w & 0x07) as u8 },
            _ => match w & 0xfc00 {
                0x0c00 => Add { rd: reg5(w), rr: reg5_low(w) },
                0x2400 => Eor { rd: reg5(w), rr: reg5_low(w) },
                0x2c00 => Mov { rd: reg5(w), rr: reg5_low(w) },
                _ => match w & 0xf000 {
                    0x3000 => Cpi { rd: reg4_high(w), k: imm8(w) },
                    0x4000 => Sbci { rd: reg4_high(w), k: imm8(w) },
                    0x5000 => Subi { rd: reg4_high(w), k: imm8(w) },
                    0xe000 => Ldi { rd: reg4_high(w), k: imm8(w) },
                    0xc000 => Rjmp { disp: rel12(w) },
                    0xd000 => Rcall { disp: rel12(w) },
                    _ => match w & 0xfe0f {
                        0x9000 => return two_word(|lw, t| Lds { rd: reg5(lw), addr: t }),
                        0x9200 => return two_word(|lw, t| Sts { addr: t, rr: reg5(lw) }),
                        0x9001 => Ld { rd: reg5(w), mode: ZMode::PostInc },
                        0x9201 => St { mode: ZMode::PostInc, rr: reg5(w) },
                        0x9004 => Lpm { dest: LpmDest::Reg(reg5(w)) },
                        0x9005 => Lpm { dest: LpmDest::RegPostInc(reg5(w)) },
                        0x900f => Pop { rd: reg5(w) },
                        0x920f => Push { rr: reg5(w) },
                        _ => match w & 0xfe0e {
                            0x940c => return two_word(|_, t| Jmp { addr: t }),
                            0x940e => return two_word(|_, t| Call { addr: t }),
                            _ => match w & 0xf800 {
                                0xb000 => In {
                                    rd: reg5(w),
                                    io: (((w >> 5) & 0x30) | (w & 0x0f)) as u8,
                                },
                                0xb800 => Out {
                                    io: (((w >> 5) & 0x30) | (w & 0x0f)) as u8,
                                    rr: reg5(w),
                                },
                                _ => match w & 0xfc07 {
                                    0xf001 => Breq { disp: branch_disp(w) },
                                    0xf401 => Brne { disp: branch_disp(w) },
                                    // Z-based ld/st with displacement (ldd/std);
                                    // bit 3 set would select Y, which the subset
                                    // does not cover.
                                    _ => match w & 0xd008 {
                                        0x8000 => {
                                            let q = (((w >> 8) & 0x20)
                                                | ((w >> 7) & 0x18)
                                                | (w & 0x07))
                                                as u8;
                                            let mode = if q == 0 { ZMode::Plain } else { ZMode::Disp(q) };
                                            if w & 0x0200 != 0 {
                                                St { mode, rr: reg5(w) }
                                            } else {
                                                Ld { rd: reg5(w), mode }
                                            }
                                        }
                                        _ => Unknown { word: w },
                                    },
                                },
                            },
                        },
                    },
                },
            },
        },
    };
    Ok(inst)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Expected words below are frozen from the published AVR instruction
    // set encodings.
    #[test]
    fn decodes_reference_encodings() {
        let cases: &[(u16, Instruction)] = &[
            (0x9508, Instruction::Ret),
            (0x0000, Instruction::Nop),
            (0x01fc, Instruction::Movw { rd: 30, rr: 24 }),
            (0x912f, Instruction::Pop { rd: 18 }),
            (0x919f, Instruction::Pop { rd: 25 }),
            (0x8320, Instruction::St { mode: ZMode::Plain, rr: 18 }),
            (0x8762, Instruction::St { mode: ZMode::Disp(10), rr: 22 }),
            (0xbe0f, Instruction::Out { io: 0x3f, rr: 0 }),
            (0xb60f, Instruction::In { rd: 0, io: 0x3f }),
            (0xbfcd, Instruction::Out { io: 0x3d, rr: 28 }),
            (0xbfde, Instruction::Out { io: 0x3e, rr: 29 }),
            (0xb7cd, Instruction::In { rd: 28, io: 0x3d }),
            (0xe083, Instruction::Ldi { rd: 24, k: 0x03 }),
            (0x9518, Instruction::Reti),
            (0x95e8, Instruction::Spm),
            (0x94f8, Instruction::Cli),
            (0x2411, Instruction::Eor { rd: 1, rr: 1 }),
            (0x0f88, Instruction::Add { rd: 24, rr: 24 }),
            (0x9ad2, Instruction::Sbi { io: 0x1a, bit: 2 }),
            (0x9141, Instruction::Ld { rd: 20, mode: ZMode::PostInc }),
            (0x9621, Instruction::Adiw { rd: 28, k: 1 }),
        ];
        for &(word, expected) in cases {
            assert_eq!(decode_instruction(word, None).unwrap(), expected, "word {word:#06x}");
        }
    }

    #[test]
    fn decodes_two_word_encodings() {
        assert_eq!(
            decode_instruction(0x9380, Some(0x0068)).unwrap(),
            Instruction::Sts { addr: 0x0068, rr: 24 }
        );
        assert_eq!(
            decode_instruction(0x9300, Some(0x005b)).unwrap(),
            Instruction::Sts { addr: 0x005b, rr: 16 }
        );
        assert_eq!(
            decode_instruction(0x940c, Some(0x3820)).unwrap(),
            Instruction::Jmp { addr: 0x3820 }
        );
        assert_eq!(
            decode_instruction(0x9180, Some(0x0100)).unwrap(),
            Instruction::Lds { rd: 24, addr: 0x0100 }
        );
    }

    #[test]
    fn missing_trailing_word_is_reported() {
        assert_eq!(
            decode_instruction(0x940c, None),
            Err(IsaError::MissingTrailingWord { low_word: 0x940c })
        );
    }

    #[test]
    fn unknown_words_do_not_abort() {
        for word in [0xffffu16, 0x9fffu16, 0x0001u16, 0x7812u16] {
            let inst = decode_instruction(word, None).unwrap();
            assert!(inst.is_unknown(), "{word:#06x} decoded to {inst:?}");
        }
    }

    #[test]
    fn branch_displacements_sign_extend() {
        // brne .-12 == 0xf7a1, breq .+8 == 0xf041
        assert_eq!(decode_instruction(0xf7a1, None).unwrap(), Instruction::Brne { disp: -12 });
        assert_eq!(decode_instruction(0xf041, None).unwrap(), Instruction::Breq { disp: 8 });
        // rjmp .-10 == 0xcff6, rjmp .-1 (self loop) == 0xcfff
        assert_eq!(decode_instruction(0xcff6, None).unwrap(), Instruction::Rjmp { disp: -10 });
        assert_eq!(decode_instruction(0xcfff, None).unwrap(), Instruction::Rjmp { disp: -1 });
    }
}
