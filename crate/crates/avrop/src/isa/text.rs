//! Textual assembly parsing and linear-sweep disassembly listings.

use super::{decode_instruction, Instruction, IsaError, LpmDest, ZMode};

/// An instruction paired with the word address it was decoded from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ListedInstruction {
    pub addr: u16,
    pub inst: Instruction,
}

/// Linear sweep over `words[start..end)` (indices are word addresses).
///
/// Consecutive addresses advance by the previous instruction's width and
/// the widths sum to `end - start`; a two-word opcode whose trailing word
/// falls outside the range is listed as `Unknown` (width 1), mirroring an
/// image that ends mid-instruction.
pub fn disassemble_range(words: &[u16], start: u16, end: u32) -> Result<Vec<ListedInstruction>, IsaError> {
    let size = words.len() as u32;
    if (start as u32) > end || end > size {
        return Err(IsaError::RangeOutOfBounds { start: start as u32, end, size });
    }
    let mut out = Vec::new();
    let mut addr = start as u32;
    while addr < end {
        let low = words[addr as usize];
        let trailing = if addr + 1 < end { Some(words[addr as usize + 1]) } else { None };
        let inst = match decode_instruction(low, trailing) {
            Ok(inst) => inst,
            Err(IsaError::MissingTrailingWord { .. }) => Instruction::Unknown { word: low },
            Err(other) => return Err(other),
        };
        out.push(ListedInstruction { addr: addr as u16, inst });
        addr += inst.width() as u32;
    }
    Ok(out)
}

/// Render a listing in the `"<hex word addr>: <mnemonic> <operands>"` form,
/// one instruction per line, lower-case hex.
pub fn format_listing(listing: &[ListedInstruction]) -> String {
    let mut out = String::new();
    for li in listing {
        out.push_str(&format!("{:04x}: {}\n", li.addr, li.inst));
    }
    out
}

fn parse_reg(tok: &str, line: &str) -> Result<u8, IsaError> {
    let err = || IsaError::ParseError {
        line: line.to_string(),
        reason: format!("expected register, got `{tok}`"),
    };
    let rest = tok.strip_prefix(['r', 'R']).ok_or_else(err)?;
    let n: u8 = rest.parse().map_err(|_| err())?;
    if n < 32 {
        Ok(n)
    } else {
        Err(err())
    }
}

fn parse_num(tok: &str, line: &str) -> Result<i64, IsaError> {
    let err = || IsaError::ParseError {
        line: line.to_string(),
        reason: format!("expected number, got `{tok}`"),
    };
    let (neg, tok) = match tok.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, tok.strip_prefix('+').unwrap_or(tok)),
    };
    let value = if let Some(hexpart) = tok.strip_prefix("0x").or_else(|| tok.strip_prefix("0X")) {
        i64::from_str_radix(hexpart, 16).map_err(|_| err())?
    } else {
        tok.parse::<i64>().map_err(|_| err())?
    };
    Ok(if neg { -value } else { value })
}

fn parse_disp(tok: &str, line: &str) -> Result<i64, IsaError> {
    // Accept `.+3`, `.-12`, `+3`, `-12` and bare numbers; word displacement
    // relative to the next instruction.
    parse_num(tok.strip_prefix('.').unwrap_or(tok), line)
}

fn parse_u8(tok: &str, line: &str, max: i64) -> Result<u8, IsaError> {
    let v = parse_num(tok, line)?;
    if (0..=max).contains(&v) {
        Ok(v as u8)
    } else {
        Err(IsaError::ParseError {
            line: line.to_string(),
            reason: format!("value {v} out of range 0..={max}"),
        })
    }
}

fn parse_zmode(tok: &str, line: &str) -> Result<ZMode, IsaError> {
    match tok {
        "Z" | "z" => Ok(ZMode::Plain),
        "Z+" | "z+" => Ok(ZMode::PostInc),
        _ => {
            let q = tok
                .strip_prefix("Z+")
                .or_else(|| tok.strip_prefix("z+"))
                .ok_or_else(|| IsaError::ParseError {
                    line: line.to_string(),
                    reason: format!("expected Z operand, got `{tok}`"),
                })?;
            Ok(ZMode::Disp(parse_u8(q, line, 63)?))
        }
    }
}

/// Parse one line of assembly text, e.g. `"pop r18"` or `"st Z, r18"`.
pub fn parse_line(line: &str) -> Result<Instruction, IsaError> {
    use Instruction::*;

    let cleaned = match line.find(';') {
        Some(pos) => &line[..pos],
        None => line,
    };
    let toks: Vec<&str> = cleaned
        .split([' ', '\t', ','])
        .filter(|t| !t.is_empty())
        .collect();
    let bad = |reason: &str| IsaError::ParseError { line: line.to_string(), reason: reason.to_string() };
    if toks.is_empty() {
        return Err(bad("empty line"));
    }
    let mnemonic = toks[0].to_ascii_lowercase();
    let operands = &toks[1..];
    let want = |n: usize| -> Result<(), IsaError> {
        if operands.len() == n {
            Ok(())
        } else {
            Err(bad(&format!("expected {n} operand(s), got {}", operands.len())))
        }
    };

    let inst = match mnemonic.as_str() {
        "nop" => { want(0)?; Nop }
        "ret" => { want(0)?; Ret }
        "reti" => { want(0)?; Reti }
        "spm" => { want(0)?; Spm }
        "cli" => { want(0)?; Cli }
        "sei" => { want(0)?; Sei }
        "ijmp" => { want(0)?; Ijmp }
        "icall" => { want(0)?; Icall }
        "pop" => { want(1)?; Pop { rd: parse_reg(operands[0], line)? } }
        "push" => { want(1)?; Push { rr: parse_reg(operands[0], line)? } }
        "movw" => { want(2)?; Movw { rd: parse_reg(operands[0], line)?, rr: parse_reg(operands[1], line)? } }
        "mov" => { want(2)?; Mov { rd: parse_reg(operands[0], line)?, rr: parse_reg(operands[1], line)? } }
        "add" => { want(2)?; Add { rd: parse_reg(operands[0], line)?, rr: parse_reg(operands[1], line)? } }
        "eor" => { want(2)?; Eor { rd: parse_reg(operands[0], line)?, rr: parse_reg(operands[1], line)? } }
        "ldi" => { want(2)?; Ldi { rd: parse_reg(operands[0], line)?, k: parse_u8(operands[1], line, 255)? } }
        "cpi" => { want(2)?; Cpi { rd: parse_reg(operands[0], line)?, k: parse_u8(operands[1], line, 255)? } }
        "subi" => { want(2)?; Subi { rd: parse_reg(operands[0], line)?, k: parse_u8(operands[1], line, 255)? } }
        "sbci" => { want(2)?; Sbci { rd: parse_reg(operands[0], line)?, k: parse_u8(operands[1], line, 255)? } }
        "adiw" => { want(2)?; Adiw { rd: parse_reg(operands[0], line)?, k: parse_u8(operands[1], line, 63)? } }
        "sbiw" => { want(2)?; Sbiw { rd: parse_reg(operands[0], line)?, k: parse_u8(operands[1], line, 63)? } }
        "in" => { want(2)?; In { rd: parse_reg(operands[0], line)?, io: parse_u8(operands[1], line, 63)? } }
        "out" => { want(2)?; Out { io: parse_u8(operands[0], line, 63)?, rr: parse_reg(operands[1], line)? } }
        "sbi" => { want(2)?; Sbi { io: parse_u8(operands[0], line, 31)?, bit: parse_u8(operands[1], line, 7)? } }
        "cbi" => { want(2)?; Cbi { io: parse_u8(operands[0], line, 31)?, bit: parse_u8(operands[1], line, 7)? } }
        "st" | "std" => {
            want(2)?;
            St { mode: parse_zmode(operands[0], line)?, rr: parse_reg(operands[1], line)? }
        }
        "ld" | "ldd" => {
            want(2)?;
            Ld { rd: parse_reg(operands[0], line)?, mode: parse_zmode(operands[1], line)? }
        }
        "sts" => {
            want(2)?;
            let addr = parse_num(operands[0], line)?;
            if !(0..=0xffff).contains(&addr) {
                return Err(bad("sts address out of range"));
            }
            Sts { addr: addr as u16, rr: parse_reg(operands[1], line)? }
        }
        "lds" => {
            want(2)?;
            let addr = parse_num(operands[1], line)?;
            if !(0..=0xffff).contains(&addr) {
                return Err(bad("lds address out of range"));
            }
            Lds { rd: parse_reg(operands[0], line)?, addr: addr as u16 }
        }
        "lpm" => match operands.len() {
            0 => Lpm { dest: LpmDest::R0Implied },
            2 => {
                let rd = parse_reg(operands[0], line)?;
                match parse_zmode(operands[1], line)? {
                    ZMode::Plain => Lpm { dest: LpmDest::Reg(rd) },
                    ZMode::PostInc => Lpm { dest: LpmDest::RegPostInc(rd) },
                    ZMode::Disp(_) => return Err(bad("lpm takes Z or Z+")),
                }
            }
            _ => return Err(bad("lpm takes no operands or `rd, Z[+]`")),
        },
        "jmp" => {
            want(1)?;
            let addr = parse_num(operands[0], line)?;
            if !(0..=0xffff).contains(&addr) {
                return Err(bad("jmp address out of range"));
            }
            Jmp { addr: addr as u16 }
        }
        "call" => {
            want(1)?;
            let addr = parse_num(operands[0], line)?;
            if !(0..=0xffff).contains(&addr) {
                return Err(bad("call address out of range"));
            }
            Call { addr: addr as u16 }
        }
        "rjmp" => {
            want(1)?;
            Rjmp { disp: parse_disp(operands[0], line)? as i16 }
        }
        "rcall" => {
            want(1)?;
            Rcall { disp: parse_disp(operands[0], line)? as i16 }
        }
        "brne" => {
            want(1)?;
            Brne { disp: parse_disp(operands[0], line)? as i8 }
        }
        "breq" => {
            want(1)?;
            Breq { disp: parse_disp(operands[0], line)? as i8 }
        }
        _ => return Err(IsaError::UnsupportedMnemonic(mnemonic)),
    };
    Ok(inst)
}

/// Parse one instruction per line; blank and comment-only lines are skipped.
pub fn parse_program(lines: &[&str]) -> Result<Vec<Instruction>, IsaError> {
    lines
        .iter()
        .filter(|l| {
            let trimmed = l.trim();
            !trimmed.is_empty() && !trimmed.starts_with(';')
        })
        .map(|l| parse_line(l))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::assemble;
    use super::*;

    #[test]
    fn parses_and_assembles_spec_examples() {
        let prog = parse_program(&["pop r18", "ret"]).unwrap();
        assert_eq!(assemble(&prog).unwrap(), vec![0x912f, 0x9508]);

        let prog = parse_program(&["st Z, r18", "ret"]).unwrap();
        assert_eq!(assemble(&prog).unwrap(), vec![0x8320, 0x9508]);

        assert_eq!(parse_line("movw r30, r24").unwrap(), Instruction::Movw { rd: 30, rr: 24 });
        assert_eq!(parse_line("out 0x3f, r0").unwrap(), Instruction::Out { io: 0x3f, rr: 0 });
        assert_eq!(
            parse_line("std Z+10, r22").unwrap(),
            Instruction::St { mode: ZMode::Disp(10), rr: 22 }
        );
        assert_eq!(
            parse_line("sts 0x0068, r24").unwrap(),
            Instruction::Sts { addr: 0x0068, rr: 24 }
        );
        assert_eq!(parse_line("rjmp .-1").unwrap(), Instruction::Rjmp { disp: -1 });
        assert_eq!(parse_line("brne .-12 ; loop").unwrap(), Instruction::Brne { disp: -12 });
    }

    #[test]
    fn listing_addresses_advance_by_width() {
        // pop r25 / pop r24 / ret placed at 0x2b58
        let mut words = vec![0xffff; 0x2b58];
        words.extend_from_slice(&[0x919f, 0x918f, 0x9508]);
        let listing = disassemble_range(&words, 0x2b58, 0x2b5b).unwrap();
        let addrs: Vec<u16> = listing.iter().map(|li| li.addr).collect();
        assert_eq!(addrs, vec![0x2b58, 0x2b59, 0x2b5a]);
        assert_eq!(
            format_listing(&listing),
            "2b58: pop r25\n2b59: pop r24\n2b5a: ret\n"
        );
    }

    #[test]
    fn empty_range_gives_empty_listing() {
        let words = vec![0x9508u16; 8];
        assert_eq!(disassemble_range(&words, 3, 3).unwrap(), Vec::new());
    }

    #[test]
    fn two_word_jmp_advances_by_two() {
        // jmp 0x0123 ; ret, starting at 0x0100
        let mut words = vec![0x0000u16; 0x100];
        words.extend_from_slice(&[0x940c, 0x0123, 0x9508]);
        let listing = disassemble_range(&words, 0x0100, 0x0103).unwrap();
        assert_eq!(listing.len(), 2);
        assert_eq!(listing[0].addr, 0x0100);
        assert_eq!(listing[0].inst, Instruction::Jmp { addr: 0x0123 });
        assert_eq!(listing[1].addr, 0x0102);
        assert_eq!(listing[1].inst, Instruction::Ret);
    }

    #[test]
    fn widths_sum_to_range_even_when_cut_mid_instruction() {
        // jmp's trailing word is outside the range: listed as Unknown.
        let words = vec![0x940c, 0x0123, 0x9508];
        let listing = disassemble_range(&words, 0, 1).unwrap();
        assert_eq!(listing.len(), 1);
        assert!(listing[0].inst.is_unknown());
    }

    #[test]
    fn out_of_bounds_range_is_rejected() {
        let words = vec![0x9508u16; 4];
        assert!(matches!(
            disassemble_range(&words, 0, 5),
            Err(IsaError::RangeOutOfBounds { .. })
        ));
        assert!(matches!(
            disassemble_range(&words, 3, 2),
            Err(IsaError::RangeOutOfBounds { .. })
        ));
    }
}
