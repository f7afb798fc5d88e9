//! Gadget scanning: find every `ret`/`reti`-terminated straight-line
//! instruction suffix in an image and model what it does to the stack,
//! the registers and memory.
//!
//! AVR instructions are word-aligned, so every word offset is a candidate
//! gadget entry; there are no unaligned-byte gadgets as on variable-length
//! ISAs. A candidate survives when a linear decode from its entry reaches
//! `ret`/`reti` within the configured length without meeting an unknown
//! word or any other control-flow instruction.

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::firmware::{FirmwareImage, FLASH_WORDS};
use crate::isa::{decode_instruction, Instruction, IsaError, LpmDest, ZMode};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GadgetError {
    #[error("instruction `{inst}` at {addr:#06x} is outside the effect algebra")]
    UnmodeledInstruction { addr: u16, inst: String },
}

/// Gadget terminator kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Terminator {
    Ret,
    /// Treated like `ret` for chaining; additionally sets the I flag.
    Reti,
}

/// A register set as a 32-bit mask.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RegSet(pub u32);

impl RegSet {
    pub fn insert(&mut self, r: u8) {
        self.0 |= 1 << (r & 0x1f);
    }

    pub fn contains(&self, r: u8) -> bool {
        self.0 & (1 << (r & 0x1f)) != 0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = u8> + '_ {
        (0u8..32).filter(|&r| self.contains(r))
    }
}

impl Serialize for RegSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.iter())
    }
}

/// One `pop` into a register, with the payload byte offset it consumes.
/// Offsets count the stack bytes the gadget pops, in execution order,
/// starting at 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PopEffect {
    pub reg: u8,
    pub offset: u8,
}

/// Address source of a store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StoreAddr {
    /// Through the Z pair (covers plain and post-increment forms).
    Z,
    /// Through Z with a fixed displacement.
    ZDisp(u8),
    /// Direct data address (`sts`).
    Direct(u16),
}

/// One memory store performed by the gadget body.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StoreEffect {
    pub addr: StoreAddr,
    pub data_reg: u8,
    /// Number of pops executed before this store.
    pub pops_before: u8,
}

/// Stack-pointer writes via `out 0x3d`/`out 0x3e`, with source registers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SpWrites {
    pub low: Option<u8>,
    pub high: Option<u8>,
}

impl SpWrites {
    pub fn both(&self) -> bool {
        self.low.is_some() && self.high.is_some()
    }
}

/// What a gadget does, abstracted for synthesis and reporting.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct EffectSummary {
    pub pops: Vec<PopEffect>,
    pub stores: Vec<StoreEffect>,
    pub sp_writes: SpWrites,
    pub sreg_write: bool,
    pub spm_present: bool,
    pub clobbers: RegSet,
}

/// A scanned gadget: entry address, body (terminator included) and its
/// modeled effects. `effects` is `None` when the body contains an
/// instruction outside the effect algebra; such gadgets stay in the
/// catalog but are never used by synthesis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gadget {
    pub entry: u16,
    pub body: Vec<Instruction>,
    pub terminator: Terminator,
    /// Bytes popped from the stack including the terminator's 2-byte
    /// return address: pop count + 2.
    pub stack_consumed: u16,
    pub effects: Option<EffectSummary>,
}

impl Gadget {
    pub fn pop_count(&self) -> usize {
        self.body
            .iter()
            .filter(|i| matches!(i, Instruction::Pop { .. }))
            .count()
    }

    pub fn disasm(&self) -> String {
        self.body
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join("; ")
    }
}

/// Which image section entry addresses are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SectionFilter {
    All,
    Application,
    Bootloader,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ScanConfig {
    /// Maximum body length in instructions, terminator included.
    pub max_body_len: usize,
    pub section: SectionFilter,
}

impl Default for ScanConfig {
    fn default() -> Self {
        // The stack-pivot gadget of the reprogramming chain runs 24
        // instructions (5 setup + 18 pops + ret), so the default must
        // clear that comfortably.
        ScanConfig { max_body_len: 32, section: SectionFilter::All }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GadgetCatalog {
    pub gadgets: Vec<Gadget>,
    pub image_digest: String,
    pub config: ScanConfig,
    /// First word address of the bootloader section of the scanned image;
    /// SPM-bearing gadgets only count for reprogramming when they live
    /// at or above it.
    pub bootloader_start: u32,
}

impl GadgetCatalog {
    pub fn len(&self) -> usize {
        self.gadgets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gadgets.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Gadget> {
        self.gadgets.iter()
    }

    /// Gadgets with modeled effects, the synthesis input.
    pub fn modeled(&self) -> impl Iterator<Item = &Gadget> {
        self.gadgets.iter().filter(|g| g.effects.is_some())
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct GadgetDto<'a> {
            entry: String,
            disasm: String,
            terminator: Terminator,
            stack_consumed: u16,
            effects: &'a Option<EffectSummary>,
        }
        #[derive(Serialize)]
        struct CatalogDto<'a> {
            image_digest: &'a str,
            max_body_len: usize,
            section: SectionFilter,
            gadget_count: usize,
            gadgets: Vec<GadgetDto<'a>>,
        }
        let dto = CatalogDto {
            image_digest: &self.image_digest,
            max_body_len: self.config.max_body_len,
            section: self.config.section,
            gadget_count: self.gadgets.len(),
            gadgets: self
                .gadgets
                .iter()
                .map(|g| GadgetDto {
                    entry: format!("{:#06x}", g.entry),
                    disasm: g.disasm(),
                    terminator: g.terminator,
                    stack_consumed: g.stack_consumed,
                    effects: &g.effects,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&dto).expect("catalog serializes")
    }
}

pub fn image_digest(image: &FirmwareImage) -> String {
    let mut hasher = Sha256::new();
    for w in image.words() {
        hasher.update(w.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

fn decode_at(image: &FirmwareImage, addr: u32) -> Instruction {
    let low = match image.read_program_word(addr) {
        Ok(w) => w,
        Err(_) => return Instruction::Unknown { word: 0xffff },
    };
    let trailing = image.read_program_word(addr + 1).ok();
    match decode_instruction(low, trailing) {
        Ok(inst) => inst,
        Err(IsaError::MissingTrailingWord { .. }) => Instruction::Unknown { word: low },
        Err(_) => Instruction::Unknown { word: low },
    }
}

/// Scan an image for gadgets.
///
/// The catalog contains exactly every entry address from which a linear
/// decode yields at most `max_body_len` instructions, none unknown, none
/// control flow except the final `ret`/`reti`. Entries come back sorted
/// ascending; each entry appears once.
pub fn scan_gadgets(image: &FirmwareImage, config: ScanConfig) -> GadgetCatalog {
    let len = image.len_words().min(FLASH_WORDS);
    // Backward pass: steps_to_ret[a] = instructions from a to the
    // terminator inclusive, or 0 when decode from a is blocked.
    let mut steps_to_ret = vec![0u32; len as usize + 2];
    for a in (0..len).rev() {
        let inst = decode_at(image, a);
        if inst.is_unknown() || inst.is_control_flow() {
            continue;
        }
        if inst.is_return() {
            steps_to_ret[a as usize] = 1;
            continue;
        }
        let next = a + inst.width() as u32;
        if next < len && steps_to_ret[next as usize] > 0 {
            steps_to_ret[a as usize] = 1 + steps_to_ret[next as usize];
        }
    }

    let (lo, hi) = match config.section {
        SectionFilter::All => (0u32, len),
        SectionFilter::Application => (0, len.min(image.bootloader_start())),
        SectionFilter::Bootloader => (image.bootloader_start().min(len), len),
    };

    let mut gadgets = Vec::new();
    for entry in lo..hi {
        let steps = steps_to_ret[entry as usize];
        if steps == 0 || steps as usize > config.max_body_len {
            continue;
        }
        let mut body = Vec::with_capacity(steps as usize);
        let mut addr = entry;
        loop {
            let inst = decode_at(image, addr);
            addr += inst.width() as u32;
            let done = inst.is_return();
            body.push(inst);
            if done {
                break;
            }
        }
        let terminator = match body.last() {
            Some(Instruction::Reti) => Terminator::Reti,
            _ => Terminator::Ret,
        };
        let pops = body
            .iter()
            .filter(|i| matches!(i, Instruction::Pop { .. }))
            .count() as u16;
        let effects = summarize_body(&body).ok();
        gadgets.push(Gadget {
            entry: entry as u16,
            body,
            terminator,
            stack_consumed: pops + 2,
            effects,
        });
    }

    GadgetCatalog {
        gadgets,
        image_digest: image_digest(image),
        config,
        bootloader_start: image.bootloader_start(),
    }
}

/// Model the effect of a gadget body on stack, registers and memory.
pub fn summarize_effects(gadget: &Gadget) -> Result<EffectSummary, GadgetError> {
    summarize_body(&gadget.body).map_err(|inst| GadgetError::UnmodeledInstruction {
        addr: gadget.entry,
        inst: inst.to_string(),
    })
}

fn summarize_body(body: &[Instruction]) -> Result<EffectSummary, Instruction> {
    use Instruction::*;

    let mut fx = EffectSummary::default();
    let mut offset = 0u8;
    // The final ret/reti is the terminator, not part of the effect walk.
    let inner = &body[..body.len().saturating_sub(1)];
    for inst in inner {
        match *inst {
            Nop | Cli | Sei | Cpi { .. } => {}
            Pop { rd } => {
                fx.pops.push(PopEffect { reg: rd, offset });
                offset += 1;
            }
            Movw { rd, .. } => {
                fx.clobbers.insert(rd);
                fx.clobbers.insert(rd + 1);
            }
            Mov { rd, .. } | Ldi { rd, .. } | In { rd, .. } | Lds { rd, .. } => {
                fx.clobbers.insert(rd);
            }
            Ld { rd, mode } => {
                fx.clobbers.insert(rd);
                if mode == ZMode::PostInc {
                    fx.clobbers.insert(30);
                    fx.clobbers.insert(31);
                }
            }
            Lpm { dest } => match dest {
                LpmDest::R0Implied => fx.clobbers.insert(0),
                LpmDest::Reg(rd) => fx.clobbers.insert(rd),
                LpmDest::RegPostInc(rd) => {
                    fx.clobbers.insert(rd);
                    fx.clobbers.insert(30);
                    fx.clobbers.insert(31);
                }
            },
            Out { io, rr } => match io {
                0x3d => fx.sp_writes.low = Some(rr),
                0x3e => fx.sp_writes.high = Some(rr),
                0x3f => fx.sreg_write = true,
                _ => {}
            },
            St { mode, rr } => {
                let addr = match mode {
                    ZMode::Plain | ZMode::PostInc => StoreAddr::Z,
                    ZMode::Disp(q) => StoreAddr::ZDisp(q),
                };
                fx.stores.push(StoreEffect { addr, data_reg: rr, pops_before: offset });
                if mode == ZMode::PostInc {
                    fx.clobbers.insert(30);
                    fx.clobbers.insert(31);
                }
            }
            Sts { addr, rr } => {
                fx.stores.push(StoreEffect {
                    addr: StoreAddr::Direct(addr),
                    data_reg: rr,
                    pops_before: offset,
                });
            }
            Spm => fx.spm_present = true,
            Add { rd, .. } | Subi { rd, .. } | Sbci { rd, .. } | Eor { rd, .. } => {
                fx.clobbers.insert(rd);
            }
            Adiw { rd, .. } | Sbiw { rd, .. } => {
                fx.clobbers.insert(rd);
                fx.clobbers.insert(rd + 1);
            }
            Sbi { .. } | Cbi { .. } => {}
            // Pushes shift every later stack offset and control flow
            // cannot appear mid-body; both fall outside the algebra.
            Push { .. } | Ret | Reti | Call { .. } | Rcall { .. } | Icall | Jmp { .. }
            | Rjmp { .. } | Ijmp | Brne { .. } | Breq { .. } | Unknown { .. } => {
                return Err(*inst);
            }
        }
    }
    Ok(fx)
}
