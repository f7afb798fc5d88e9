//! Instruction-level emulation of an ATmega128-class sensor node.
//!
//! The machine models a modified-Harvard core: the program counter only
//! ever addresses flash, data accesses go through a unified 4352-byte
//! data space (registers at 0x00–0x1f, I/O at 0x20–0xff, SRAM above)
//! with silent wraparound instead of address checks, and flash is only
//! writable through the SPM sequence executed from the bootloader
//! section. Soft reboots (control transfer to word address 0) re-run
//! the section initializers while leaving the rest of SRAM alone, which
//! is exactly the persistence the injection campaign relies on.
//!
//! Timing is not modeled; `cycle_count` counts retired instructions.

use serde::Serialize;
use thiserror::Error;

use crate::firmware::{FirmwareImage, MemoryLayout, ERASED_WORD, FLASH_WORDS, PAGE_WORDS, RAM_END};
use crate::isa::{decode_instruction, Instruction, LpmDest, ZMode};

/// Data-space address of the stack pointer low byte (I/O 0x3d).
pub const SP_LOW_ADDR: u16 = 0x5d;
/// Data-space address of the stack pointer high byte (I/O 0x3e).
pub const SP_HIGH_ADDR: u16 = 0x5e;
/// Data-space address of the status register (I/O 0x3f).
pub const SREG_ADDR: u16 = 0x5f;
/// Data-space address of RAMPZ.
pub const RAMPZ_ADDR: u16 = 0x5b;
/// Data-space address of the SPM control/status register.
pub const SPMCSR_ADDR: u16 = 0x68;

/// SPMCSR command values armed before an `spm` instruction.
pub const SPM_CMD_ERASE: u8 = 0x03;
pub const SPM_CMD_FILL: u8 = 0x01;
pub const SPM_CMD_WRITE: u8 = 0x05;

const SREG_C: u8 = 1 << 0;
const SREG_Z: u8 = 1 << 1;
const SREG_I: u8 = 1 << 7;

const DATA_SPACE: usize = RAM_END as usize;
const PAGE_BYTES: usize = PAGE_WORDS as usize * 2;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EmulatorError {
    #[error("packet payload of {len} bytes exceeds the {max}-byte limit")]
    PacketTooLarge { len: usize, max: usize },
    #[error("range out of bounds: start {start:#x} len {len:#x} in a space of {size:#x}")]
    RangeOutOfBounds { start: u32, len: u32, size: u32 },
}

/// Why a run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OutcomeKind {
    /// Control transferred to word address 0 via `ret`/`reti`/`ijmp`.
    SoftReboot,
    /// The self-loop halt idiom (`rjmp .-1`) was reached.
    Halted,
    FuelExhausted,
    Fault(FaultReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FaultReason {
    UnknownInstruction { word: u16 },
    SpmOutsideBootloader,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RunOutcome {
    pub kind: OutcomeKind,
    pub executed: u64,
    pub stop_pc: u16,
}

/// SPM sequencing state derived from the armed SPMCSR value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpmMode {
    Idle,
    Erase,
    Fill,
    Write,
}

/// Boot-time configuration: section layout, the `.data` initializer
/// location in flash, the memory-cleanup countermeasure toggle and the
/// default instruction budget per run.
#[derive(Debug, Clone)]
pub struct BootOptions {
    pub layout: MemoryLayout,
    pub data_load: Option<u32>,
    pub cleanup_enabled: bool,
    pub fuel: u64,
}

impl Default for BootOptions {
    fn default() -> Self {
        BootOptions {
            layout: MemoryLayout::default(),
            data_load: None,
            cleanup_enabled: false,
            fuel: 1_000_000,
        }
    }
}

/// Harness-level packet delivery into the vulnerable receive path.
#[derive(Debug, Clone)]
pub struct DeliveryOptions {
    /// Word address of the receive routine.
    pub receive_entry: u16,
    /// Data address of the packet buffer (`[len, payload...]`).
    pub packet_buf: u16,
    /// Return address pushed for the simulated call (the caller's halt).
    pub return_addr: u16,
    /// Stack pointer value just before the simulated call.
    pub call_sp: u16,
    /// Maximum accepted payload length (radio stack limit).
    pub max_payload: usize,
    pub fuel: u64,
}

/// One line of an execution trace.
#[derive(Debug, Clone)]
pub struct TraceStep {
    pub cycle: u64,
    pub pc: u16,
    pub inst: Instruction,
    pub sp: u16,
}

/// Full machine state of one emulated node.
#[derive(Debug, Clone)]
pub struct MachineState {
    /// Unified data space: registers 0x00–0x1f, I/O 0x20–0xff, SRAM above.
    data: Vec<u8>,
    /// Mutable copy of program memory, 64 K words.
    flash: Vec<u16>,
    pc: u16,
    spm_page_buffer: Vec<u8>,
    bootloader_start: u32,
    pub reboot_count: u64,
    pub cycle_count: u64,
    pub halted: bool,
    opts: BootOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    Continue,
    Stop(OutcomeKind),
}

impl MachineState {
    /// Boot a fresh machine: registers and I/O cleared, `sp = 0x10ff`,
    /// `pc = 0`, SRAM zero-filled, `.data` initialized from the image,
    /// `.bss` zeroed, and the cleanup countermeasure applied if enabled.
    pub fn boot(image: &FirmwareImage, opts: BootOptions) -> MachineState {
        let mut flash = vec![ERASED_WORD; FLASH_WORDS as usize];
        flash[..image.words().len()].copy_from_slice(image.words());
        let mut m = MachineState {
            data: vec![0; DATA_SPACE],
            flash,
            pc: 0,
            spm_page_buffer: vec![0xff; PAGE_BYTES],
            bootloader_start: image.bootloader_start(),
            reboot_count: 0,
            cycle_count: 0,
            halted: false,
            opts,
        };
        m.reset_core();
        m.init_sections();
        m
    }

    /// Soft reboot: same initialization as [`MachineState::boot`], but SRAM
    /// outside `.data`/`.bss` keeps its content (unless cleanup is on).
    pub fn soft_reboot(&mut self) {
        self.reboot_count += 1;
        self.reset_core();
        self.init_sections();
    }

    fn reset_core(&mut self) {
        // Registers and the whole I/O window reset; SRAM content above
        // 0x100 is deliberately left alone.
        for b in &mut self.data[..0x100] {
            *b = 0;
        }
        self.set_sp(RAM_END - 1);
        self.pc = 0;
        self.halted = false;
        self.spm_page_buffer.fill(0xff);
    }

    fn init_sections(&mut self) {
        let layout = self.opts.layout.clone();
        // .data: copied from its flash load address, zero when absent.
        for addr in layout.data_section.clone() {
            self.data[addr as usize] = 0;
        }
        if let Some(load) = self.opts.data_load {
            let len = (layout.data_section.end - layout.data_section.start) as u32;
            for i in 0..len {
                let byte_addr = load * 2 + i;
                let word = self
                    .flash
                    .get((byte_addr / 2) as usize)
                    .copied()
                    .unwrap_or(ERASED_WORD);
                let b = if byte_addr % 2 == 0 { word as u8 } else { (word >> 8) as u8 };
                self.data[(layout.data_section.start as u32 + i) as usize] = b;
            }
        }
        // .bss: zeroed.
        for addr in layout.bss_section.clone() {
            self.data[addr as usize] = 0;
        }
        // Optional countermeasure: wipe everything from the end of .bss
        // up to (not including) the initial stack pointer.
        if self.opts.cleanup_enabled {
            for addr in layout.bss_section.end..RAM_END - 1 {
                self.data[addr as usize] = 0;
            }
        }
    }

    pub fn pc(&self) -> u16 {
        self.pc
    }

    pub fn set_pc(&mut self, pc: u16) {
        self.pc = pc;
        self.halted = false;
    }

    pub fn sp(&self) -> u16 {
        u16::from_le_bytes([self.data[SP_LOW_ADDR as usize], self.data[SP_HIGH_ADDR as usize]])
    }

    pub fn set_sp(&mut self, sp: u16) {
        self.data[SP_LOW_ADDR as usize] = sp as u8;
        self.data[SP_HIGH_ADDR as usize] = (sp >> 8) as u8;
    }

    pub fn sreg(&self) -> u8 {
        self.data[SREG_ADDR as usize]
    }

    pub fn reg(&self, r: u8) -> u8 {
        self.data[(r & 0x1f) as usize]
    }

    pub fn set_reg(&mut self, r: u8, v: u8) {
        self.data[(r & 0x1f) as usize] = v;
    }

    pub fn regs(&self) -> [u8; 32] {
        let mut out = [0u8; 32];
        out.copy_from_slice(&self.data[..32]);
        out
    }

    fn z_pair(&self) -> u16 {
        u16::from_le_bytes([self.reg(30), self.reg(31)])
    }

    pub fn set_z(&mut self, v: u16) {
        self.set_reg(30, v as u8);
        self.set_reg(31, (v >> 8) as u8);
    }

    pub fn bootloader_start(&self) -> u32 {
        self.bootloader_start
    }

    pub fn options(&self) -> &BootOptions {
        &self.opts
    }

    pub fn spmcsr_mode(&self) -> SpmMode {
        match self.data[SPMCSR_ADDR as usize] {
            SPM_CMD_ERASE => SpmMode::Erase,
            SPM_CMD_FILL => SpmMode::Fill,
            SPM_CMD_WRITE => SpmMode::Write,
            _ => SpmMode::Idle,
        }
    }

    /// Data-space read with silent wraparound, never a bounds fault.
    pub fn data_read(&self, addr: u16) -> u8 {
        self.data[addr as usize % DATA_SPACE]
    }

    /// Data-space write with silent wraparound.
    pub fn data_write(&mut self, addr: u16, value: u8) {
        self.data[addr as usize % DATA_SPACE] = value;
    }

    /// Host-level poke used by harnesses and tests.
    pub fn write_data_bytes(&mut self, addr: u16, bytes: &[u8]) {
        for (i, &b) in bytes.iter().enumerate() {
            self.data_write(addr.wrapping_add(i as u16), b);
        }
    }

    pub fn flash_word(&self, addr: u16) -> u16 {
        self.flash[addr as usize]
    }

    /// Flash content as bytes, little-endian within each word.
    pub fn flash_bytes(&self, word_addr: u16, len: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(len);
        for i in 0..len {
            let byte_addr = word_addr as usize * 2 + i;
            let word = self.flash[byte_addr / 2];
            out.push(if byte_addr % 2 == 0 { word as u8 } else { (word >> 8) as u8 });
        }
        out
    }

    pub fn flash_words(&self) -> &[u16] {
        &self.flash
    }

    /// Read-only snapshot of a range of one address space. Flash ranges
    /// are in words and come back as little-endian bytes.
    pub fn inspect(&self, space: Space, start: u32, len: u32) -> Result<Vec<u8>, EmulatorError> {
        let oob = |size: u32| EmulatorError::RangeOutOfBounds { start, len, size };
        match space {
            Space::Regs => {
                if start + len > 32 {
                    return Err(oob(32));
                }
                Ok(self.data[start as usize..(start + len) as usize].to_vec())
            }
            Space::Sram => {
                if start + len > DATA_SPACE as u32 {
                    return Err(oob(DATA_SPACE as u32));
                }
                Ok(self.data[start as usize..(start + len) as usize].to_vec())
            }
            Space::Flash => {
                if start + len > FLASH_WORDS {
                    return Err(oob(FLASH_WORDS));
                }
                Ok(self.flash_bytes(start as u16, len as usize * 2))
            }
        }
    }

    fn push(&mut self, value: u8) {
        let sp = self.sp();
        self.data_write(sp, value);
        self.set_sp(sp.wrapping_sub(1));
    }

    fn pop(&mut self) -> u8 {
        let sp = self.sp().wrapping_add(1);
        self.set_sp(sp);
        self.data_read(sp)
    }

    /// Pop a 16-bit word address: low byte sits at the lower address.
    fn pop_word_addr(&mut self) -> u16 {
        let lo = self.pop();
        let hi = self.pop();
        u16::from_le_bytes([lo, hi])
    }

    fn push_word_addr(&mut self, addr: u16) {
        self.push((addr >> 8) as u8);
        self.push(addr as u8);
    }

    fn set_flag(&mut self, flag: u8, on: bool) {
        let sreg = &mut self.data[SREG_ADDR as usize];
        if on {
            *sreg |= flag;
        } else {
            *sreg &= !flag;
        }
    }

    fn flag(&self, flag: u8) -> bool {
        self.sreg() & flag != 0
    }

    fn spm_execute(&mut self) {
        let mode = self.spmcsr_mode();
        // SPMEN self-clears once the operation runs.
        self.data[SPMCSR_ADDR as usize] = 0;
        let z = self.z_pair();
        let rampz = self.data[RAMPZ_ADDR as usize];
        let byte_addr = ((rampz as u32) << 16) | z as u32;
        let page_word = ((byte_addr / 2) & !(PAGE_WORDS as u32 - 1)) % FLASH_WORDS;
        match mode {
            SpmMode::Idle => {}
            SpmMode::Fill => {
                let offset = (z as usize & 0xff) & !1;
                self.spm_page_buffer[offset] = self.reg(0);
                self.spm_page_buffer[offset + 1] = self.reg(1);
            }
            SpmMode::Erase | SpmMode::Write => {
                // Lock-bit behavior: self-programming never touches the
                // bootloader's own pages; the operation is dropped.
                if page_word >= self.bootloader_start {
                    return;
                }
                match mode {
                    SpmMode::Erase => {
                        for i in 0..PAGE_WORDS as u32 {
                            self.flash[(page_word + i) as usize] = ERASED_WORD;
                        }
                    }
                    _ => {
                        for i in 0..PAGE_WORDS as usize {
                            let lo = self.spm_page_buffer[i * 2];
                            let hi = self.spm_page_buffer[i * 2 + 1];
                            self.flash[page_word as usize + i] = u16::from_le_bytes([lo, hi]);
                        }
                        self.spm_page_buffer.fill(0xff);
                    }
                }
            }
        }
    }

    /// Fetch and decode the instruction at the current pc. Fetches only
    /// ever read flash: the Harvard separation is structural.
    pub fn current_instruction(&self) -> Instruction {
        let low = self.flash[self.pc as usize];
        let trailing = self.flash.get(self.pc as usize + 1).copied();
        match decode_instruction(low, trailing) {
            Ok(inst) => inst,
            Err(_) => Instruction::Unknown { word: low },
        }
    }

    /// Execute one instruction; `Stop` carries the run-ending event.
    fn step_inner(&mut self) -> Step {
        use Instruction::*;

        let inst = self.current_instruction();
        let entry_pc = self.pc;
        self.cycle_count += 1;
        let width = inst.width();

        match inst {
            Nop => {}
            Pop { rd } => {
                let v = self.pop();
                self.set_reg(rd, v);
            }
            Push { rr } => {
                let v = self.reg(rr);
                self.push(v);
            }
            Ret => {
                let target = self.pop_word_addr();
                self.pc = target;
                return if target == 0 { Step::Stop(OutcomeKind::SoftReboot) } else { Step::Continue };
            }
            Reti => {
                let target = self.pop_word_addr();
                self.set_flag(SREG_I, true);
                self.pc = target;
                return if target == 0 { Step::Stop(OutcomeKind::SoftReboot) } else { Step::Continue };
            }
            Movw { rd, rr } => {
                let lo = self.reg(rr);
                let hi = self.reg(rr + 1);
                self.set_reg(rd, lo);
                self.set_reg(rd + 1, hi);
            }
            Mov { rd, rr } => {
                let v = self.reg(rr);
                self.set_reg(rd, v);
            }
            Ldi { rd, k } => self.set_reg(rd, k),
            In { rd, io } => {
                let v = self.data_read(io as u16 + 0x20);
                self.set_reg(rd, v);
            }
            Out { io, rr } => {
                let v = self.reg(rr);
                self.data_write(io as u16 + 0x20, v);
            }
            St { mode, rr } => {
                let v = self.reg(rr);
                match mode {
                    ZMode::Plain => {
                        let z = self.z_pair();
                        self.data_write(z, v);
                    }
                    ZMode::PostInc => {
                        let z = self.z_pair();
                        self.data_write(z, v);
                        self.set_z(z.wrapping_add(1));
                    }
                    ZMode::Disp(q) => {
                        let z = self.z_pair().wrapping_add(q as u16);
                        self.data_write(z, v);
                    }
                }
            }
            Ld { rd, mode } => match mode {
                ZMode::Plain => {
                    let v = self.data_read(self.z_pair());
                    self.set_reg(rd, v);
                }
                ZMode::PostInc => {
                    let z = self.z_pair();
                    let v = self.data_read(z);
                    self.set_reg(rd, v);
                    self.set_z(z.wrapping_add(1));
                }
                ZMode::Disp(q) => {
                    let v = self.data_read(self.z_pair().wrapping_add(q as u16));
                    self.set_reg(rd, v);
                }
            },
            Sts { addr, rr } => {
                let v = self.reg(rr);
                self.data_write(addr, v);
            }
            Lds { rd, addr } => {
                let v = self.data_read(addr);
                self.set_reg(rd, v);
            }
            Spm => {
                if (entry_pc as u32) < self.bootloader_start {
                    return Step::Stop(OutcomeKind::Fault(FaultReason::SpmOutsideBootloader));
                }
                self.spm_execute();
            }
            Lpm { dest } => {
                let z = self.z_pair();
                let word = self.flash[(z / 2) as usize];
                let byte = if z % 2 == 0 { word as u8 } else { (word >> 8) as u8 };
                match dest {
                    LpmDest::R0Implied => self.set_reg(0, byte),
                    LpmDest::Reg(rd) => self.set_reg(rd, byte),
                    LpmDest::RegPostInc(rd) => {
                        self.set_reg(rd, byte);
                        self.set_z(z.wrapping_add(1));
                    }
                }
            }
            Cli => self.set_flag(SREG_I, false),
            Sei => self.set_flag(SREG_I, true),
            Sbi { io, bit } => {
                let addr = io as u16 + 0x20;
                let v = self.data_read(addr) | (1 << bit);
                self.data_write(addr, v);
            }
            Cbi { io, bit } => {
                let addr = io as u16 + 0x20;
                let v = self.data_read(addr) & !(1 << bit);
                self.data_write(addr, v);
            }
            Call { addr } => {
                self.push_word_addr(entry_pc.wrapping_add(2));
                self.pc = addr;
                return Step::Continue;
            }
            Rcall { disp } => {
                self.push_word_addr(entry_pc.wrapping_add(1));
                self.pc = entry_pc.wrapping_add(1).wrapping_add(disp as u16);
                return Step::Continue;
            }
            Icall => {
                self.push_word_addr(entry_pc.wrapping_add(1));
                self.pc = self.z_pair();
                return Step::Continue;
            }
            Jmp { addr } => {
                self.pc = addr;
                return Step::Continue;
            }
            Rjmp { disp } => {
                if disp == -1 {
                    // Self-loop: the fixture halt idiom.
                    self.pc = entry_pc;
                    self.halted = true;
                    return Step::Stop(OutcomeKind::Halted);
                }
                self.pc = entry_pc.wrapping_add(1).wrapping_add(disp as u16);
                return Step::Continue;
            }
            Ijmp => {
                let target = self.z_pair();
                self.pc = target;
                return if target == 0 { Step::Stop(OutcomeKind::SoftReboot) } else { Step::Continue };
            }
            Cpi { rd, k } => {
                let v = self.reg(rd);
                let res = v.wrapping_sub(k);
                self.set_flag(SREG_Z, res == 0);
                self.set_flag(SREG_C, k > v);
            }
            Brne { disp } => {
                if !self.flag(SREG_Z) {
                    self.pc = entry_pc.wrapping_add(1).wrapping_add(disp as u16);
                    return Step::Continue;
                }
            }
            Breq { disp } => {
                if self.flag(SREG_Z) {
                    self.pc = entry_pc.wrapping_add(1).wrapping_add(disp as u16);
                    return Step::Continue;
                }
            }
            Add { rd, rr } => {
                let (res, carry) = self.reg(rd).overflowing_add(self.reg(rr));
                self.set_reg(rd, res);
                self.set_flag(SREG_Z, res == 0);
                self.set_flag(SREG_C, carry);
            }
            Adiw { rd, k } => {
                let pair = u16::from_le_bytes([self.reg(rd), self.reg(rd + 1)]);
                let (res, carry) = pair.overflowing_add(k as u16);
                self.set_reg(rd, res as u8);
                self.set_reg(rd + 1, (res >> 8) as u8);
                self.set_flag(SREG_Z, res == 0);
                self.set_flag(SREG_C, carry);
            }
            Sbiw { rd, k } => {
                let pair = u16::from_le_bytes([self.reg(rd), self.reg(rd + 1)]);
                let (res, borrow) = pair.overflowing_sub(k as u16);
                self.set_reg(rd, res as u8);
                self.set_reg(rd + 1, (res >> 8) as u8);
                self.set_flag(SREG_Z, res == 0);
                self.set_flag(SREG_C, borrow);
            }
            Subi { rd, k } => {
                let v = self.reg(rd);
                let res = v.wrapping_sub(k);
                self.set_reg(rd, res);
                self.set_flag(SREG_Z, res == 0);
                self.set_flag(SREG_C, k > v);
            }
            Sbci { rd, k } => {
                let v = self.reg(rd);
                let carry_in = self.flag(SREG_C) as u16;
                let res = v.wrapping_sub(k).wrapping_sub(carry_in as u8);
                self.set_reg(rd, res);
                // Z accumulates across the multi-byte subtract sequence.
                if res != 0 {
                    self.set_flag(SREG_Z, false);
                }
                self.set_flag(SREG_C, (k as u16 + carry_in) > v as u16);
            }
            Eor { rd, rr } => {
                let res = self.reg(rd) ^ self.reg(rr);
                self.set_reg(rd, res);
                self.set_flag(SREG_Z, res == 0);
            }
            Unknown { word } => {
                return Step::Stop(OutcomeKind::Fault(FaultReason::UnknownInstruction { word }));
            }
        }
        self.pc = entry_pc.wrapping_add(width);
        Step::Continue
    }

    /// Execute a single instruction. `None` means the machine keeps
    /// running; `Some` carries the stop event.
    pub fn step(&mut self) -> Option<OutcomeKind> {
        match self.step_inner() {
            Step::Continue => None,
            Step::Stop(kind) => Some(kind),
        }
    }

    /// Run until a stop event or the fuel budget is exhausted.
    pub fn run(&mut self, fuel: u64) -> RunOutcome {
        self.run_traced(fuel, &mut |_| {})
    }

    /// Like [`MachineState::run`], invoking `sink` before each instruction.
    pub fn run_traced(&mut self, fuel: u64, sink: &mut dyn FnMut(&TraceStep)) -> RunOutcome {
        let mut executed = 0u64;
        while executed < fuel {
            sink(&TraceStep {
                cycle: self.cycle_count,
                pc: self.pc,
                inst: self.current_instruction(),
                sp: self.sp(),
            });
            executed += 1;
            if let Some(kind) = self.step() {
                return RunOutcome { kind, executed, stop_pc: self.pc };
            }
        }
        RunOutcome { kind: OutcomeKind::FuelExhausted, executed, stop_pc: self.pc }
    }

    /// Place `[len, payload...]` in the packet buffer, simulate the call
    /// into the receive routine and run to completion.
    pub fn deliver_packet(
        &mut self,
        payload: &[u8],
        delivery: &DeliveryOptions,
    ) -> Result<RunOutcome, EmulatorError> {
        if payload.len() > delivery.max_payload || payload.len() > 255 {
            return Err(EmulatorError::PacketTooLarge {
                len: payload.len(),
                max: delivery.max_payload.min(255),
            });
        }
        self.data_write(delivery.packet_buf, payload.len() as u8);
        self.write_data_bytes(delivery.packet_buf.wrapping_add(1), payload);
        self.set_sp(delivery.call_sp);
        self.push_word_addr(delivery.return_addr);
        self.pc = delivery.receive_entry;
        self.halted = false;
        Ok(self.run(delivery.fuel))
    }

    /// JSON snapshot of the architectural state.
    pub fn snapshot_json(&self) -> String {
        #[derive(Serialize)]
        struct Snapshot {
            pc: String,
            sp: String,
            sreg: String,
            regs: Vec<String>,
            reboot_count: u64,
            cycle_count: u64,
            halted: bool,
            sram_hex: String,
        }
        let snap = Snapshot {
            pc: format!("{:#06x}", self.pc),
            sp: format!("{:#06x}", self.sp()),
            sreg: format!("{:#04x}", self.sreg()),
            regs: self.regs().iter().map(|r| format!("{r:#04x}")).collect(),
            reboot_count: self.reboot_count,
            cycle_count: self.cycle_count,
            halted: self.halted,
            sram_hex: hex::encode(&self.data),
        };
        serde_json::to_string_pretty(&snap).expect("snapshot serializes")
    }
}

/// Address spaces visible to [`MachineState::inspect`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    Flash,
    Sram,
    Regs,
}

/// Format one trace step in the `<cycle> <pc> <disasm> sp=<sp>` layout.
pub fn format_trace_step(step: &TraceStep) -> String {
    format!("{:>8} {:04x} {:<24} sp={:04x}", step.cycle, step.pc, step.inst.to_string(), step.sp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::parse_program;

    fn image_from_asm(lines: &[&str]) -> FirmwareImage {
        let program = parse_program(lines).unwrap();
        let words = crate::isa::assemble(&program).unwrap();
        FirmwareImage::new(words, "test").unwrap()
    }

    #[test]
    fn fresh_boot_state() {
        let image = image_from_asm(&["nop"]);
        let m = MachineState::boot(&image, BootOptions::default());
        assert_eq!(m.sp(), 0x10ff);
        assert_eq!(m.pc(), 0);
        assert_eq!(m.reboot_count, 0);
        assert_eq!(m.regs(), [0u8; 32]);
        assert_eq!(m.inspect(Space::Regs, 0, 32).unwrap(), vec![0u8; 32]);
    }

    #[test]
    fn bss_zeroed_and_unused_preserved_across_soft_reboot() {
        let image = image_from_asm(&["nop"]);
        let mut m = MachineState::boot(&image, BootOptions::default());
        m.write_data_bytes(0x0350, &[0x77]);
        m.write_data_bytes(0x0400, &[0xab]);
        m.soft_reboot();
        assert_eq!(m.data_read(0x0350), 0, "bss byte is re-zeroed");
        assert_eq!(m.data_read(0x0400), 0xab, "unused byte survives");
        assert_eq!(m.reboot_count, 1);
    }

    #[test]
    fn cleanup_zeroes_the_unused_region() {
        let image = image_from_asm(&["nop"]);
        let mut m = MachineState::boot(
            &image,
            BootOptions { cleanup_enabled: true, ..BootOptions::default() },
        );
        m.write_data_bytes(0x0400, &[0xab]);
        m.soft_reboot();
        assert_eq!(m.data_read(0x0400), 0);
    }

    #[test]
    fn push_and_ret_follow_the_stack_layout() {
        let image = image_from_asm(&["push r0", "nop"]);
        let mut m = MachineState::boot(&image, BootOptions::default());
        m.set_reg(0, 0x42);
        m.set_sp(0x1060);
        m.step();
        assert_eq!(m.data_read(0x1060), 0x42);
        assert_eq!(m.sp(), 0x105f);

        // ret with the overflow values: low byte at 0x105f, high at 0x1060.
        let image = image_from_asm(&["ret"]);
        let mut m = MachineState::boot(&image, BootOptions::default());
        m.write_data_bytes(0x105f, &[0x58, 0x2b]);
        m.set_sp(0x105e);
        let stop = m.step();
        assert_eq!(stop, None);
        assert_eq!(m.pc(), 0x2b58);
        assert_eq!(m.sp(), 0x1060);
    }

    #[test]
    fn ret_to_zero_is_a_soft_reboot_event() {
        let image = image_from_asm(&["ret"]);
        let mut m = MachineState::boot(&image, BootOptions::default());
        m.set_sp(0x10fd); // stack bytes are zero -> target 0
        assert_eq!(m.step(), Some(OutcomeKind::SoftReboot));
    }

    #[test]
    fn call_pushes_high_byte_at_higher_address() {
        // call 0x0004 from address 0: return address 2.
        let image = image_from_asm(&["call 0x0004", "nop", "nop", "rjmp .-1"]);
        let mut m = MachineState::boot(&image, BootOptions::default());
        m.set_sp(0x1060);
        m.step();
        assert_eq!(m.pc(), 0x0004);
        assert_eq!(m.sp(), 0x105e);
        assert_eq!(m.data_read(0x1060), 0x00, "high byte of 0x0002");
        assert_eq!(m.data_read(0x105f), 0x02, "low byte of 0x0002");
    }

    #[test]
    fn spm_outside_bootloader_faults() {
        let image = image_from_asm(&["spm"]);
        let mut m = MachineState::boot(&image, BootOptions::default());
        assert_eq!(
            m.step(),
            Some(OutcomeKind::Fault(FaultReason::SpmOutsideBootloader))
        );
    }

    #[test]
    fn spm_erase_fill_write_sequence_commits_one_page() {
        // Bootloader-resident routine flashing one page at word 0x0080.
        let mut image = image_from_asm(&["nop"]);
        let routine = parse_program(&[
            "ldi r30, 0x00", // Z = byte address 0x0100 (word 0x0080)
            "ldi r31, 0x01",
            "ldi r24, 0x03",
            "sts 0x0068, r24",
            "spm", // erase
            "ldi r30, 0x00", // fill word 0 of the buffer
            "ldi r31, 0x00",
            "ldi r24, 0x01",
            "sts 0x0068, r24",
            "spm",
            "ldi r30, 0x00",
            "ldi r31, 0x01",
            "ldi r24, 0x05",
            "sts 0x0068, r24",
            "spm", // write
            "rjmp .-1",
        ])
        .unwrap();
        let words = crate::isa::assemble(&routine).unwrap();
        image.place_words(0xf800, &words).unwrap();
        let mut m = MachineState::boot(&image, BootOptions::default());
        m.set_pc(0xf800);
        m.set_reg(0, 0x34);
        m.set_reg(1, 0x12);
        let outcome = m.run(200);
        assert_eq!(outcome.kind, OutcomeKind::Halted);
        assert_eq!(m.flash_word(0x0080), 0x1234);
        // The rest of the page is erased, and the next page is untouched.
        assert_eq!(m.flash_word(0x0081), 0xffff);
        assert_eq!(m.flash_word(0x0100), 0xffff);
    }

    #[test]
    fn spm_refuses_bootloader_targets() {
        let mut image = image_from_asm(&["nop"]);
        let routine = parse_program(&[
            "ldi r24, 0x05",
            "sts 0x0068, r24",
            "spm",
            "rjmp .-1",
        ])
        .unwrap();
        let words = crate::isa::assemble(&routine).unwrap();
        image.place_words(0xf800, &words).unwrap();
        let mut m = MachineState::boot(&image, BootOptions::default());
        // Target the bootloader itself: byte address 0x1f000 -> word 0xf800.
        m.data_write(RAMPZ_ADDR, 0x01);
        m.set_z(0xf000);
        m.set_pc(0xf800);
        let before = m.flash_words().to_vec();
        let outcome = m.run(100);
        assert_eq!(outcome.kind, OutcomeKind::Halted);
        assert_eq!(m.flash_words(), &before[..], "bootloader pages are locked");
    }

    #[test]
    fn out_to_sp_updates_the_stack_pointer() {
        let image = image_from_asm(&["out 0x3e, r29", "out 0x3d, r28", "rjmp .-1"]);
        let mut m = MachineState::boot(&image, BootOptions::default());
        m.set_reg(28, 0xff);
        m.set_reg(29, 0x03);
        m.run(10);
        assert_eq!(m.sp(), 0x03ff);
    }

    #[test]
    fn benign_call_ret_restores_sp() {
        let image = image_from_asm(&[
            "call 0x0003", // 2 words
            "rjmp .-1",    // halt after return
            "ldi r24, 0x07",
            "ret",
        ]);
        let mut m = MachineState::boot(&image, BootOptions::default());
        let sp0 = m.sp();
        let outcome = m.run(100);
        assert_eq!(outcome.kind, OutcomeKind::Halted);
        assert_eq!(m.sp(), sp0);
        assert_eq!(m.reg(24), 0x07);
    }

    #[test]
    fn instruction_fetch_ignores_sram_content() {
        // SRAM holds what would decode as `ldi r20, 0xff` at the pc-aliased
        // address; the fetch must read flash (a nop) instead.
        let image = image_from_asm(&["nop", "rjmp .-1"]);
        let mut m = MachineState::boot(&image, BootOptions::default());
        m.write_data_bytes(0x0100, &[0x4f, 0xe4]);
        m.set_reg(20, 0);
        m.run(5);
        assert_eq!(m.reg(20), 0, "execution never left flash");
    }

    #[test]
    fn packet_too_large_is_rejected() {
        let image = image_from_asm(&["nop"]);
        let mut m = MachineState::boot(&image, BootOptions::default());
        let delivery = DeliveryOptions {
            receive_entry: 0,
            packet_buf: 0x0300,
            return_addr: 0x0001,
            call_sp: 0x1060,
            max_payload: 28,
            fuel: 100,
        };
        let err = m.deliver_packet(&[0u8; 29], &delivery).unwrap_err();
        assert_eq!(err, EmulatorError::PacketTooLarge { len: 29, max: 28 });
    }

    #[test]
    fn determinism_same_inputs_same_state() {
        let image = image_from_asm(&[
            "ldi r24, 0x05",
            "ldi r30, 0x00",
            "ldi r31, 0x02",
            "st Z+, r24",
            "st Z+, r24",
            "rjmp .-1",
        ]);
        let run = || {
            let mut m = MachineState::boot(&image, BootOptions::default());
            let out = m.run(100);
            (out, m.cycle_count, m.inspect(Space::Sram, 0, 0x1100).unwrap())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn inspect_bounds_are_checked() {
        let image = image_from_asm(&["nop"]);
        let m = MachineState::boot(&image, BootOptions::default());
        assert!(matches!(
            m.inspect(Space::Sram, 0x10f0, 0x20),
            Err(EmulatorError::RangeOutOfBounds { .. })
        ));
        assert!(matches!(
            m.inspect(Space::Regs, 30, 4),
            Err(EmulatorError::RangeOutOfBounds { .. })
        ));
    }
}
