//! Firmware images: Intel HEX loading/serialization, the word-addressed
//! program space, section boundaries and the JSON metadata sidecar.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::{self, IsaError, ListedInstruction};

/// Total addressable program memory: 64 K words = 128 KB.
pub const FLASH_WORDS: u32 = 0x1_0000;
/// Flash page size in words (256 bytes).
pub const PAGE_WORDS: u16 = 128;
/// Default first word address of the bootloader section.
pub const DEFAULT_BOOTLOADER_START: u32 = 0xf800;
/// One past the last data-space address (4 KB SRAM above registers + I/O).
pub const RAM_END: u16 = 0x1100;
/// Erased-flash fill word; decodes to `Unknown`, so sweeps skip it.
pub const ERASED_WORD: u16 = 0xffff;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FirmwareError {
    #[error("checksum mismatch on record line {line}: computed 0x{computed:02x}, stored 0x{stored:02x}")]
    ChecksumMismatch { line: usize, computed: u8, stored: u8 },
    #[error("malformed record on line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("address overflow: byte address 0x{addr:06x} exceeds 128 KB of flash")]
    AddressOverflow { addr: u32 },
    #[error("invalid memory layout: {0}")]
    InvalidLayout(String),
    #[error("bootloader start 0x{0:05x} must be page-aligned and at most 0x10000")]
    InvalidBootloaderStart(u32),
}

/// The data-address-space layout of the node.
///
/// Registers end at 0x20, I/O at 0x100; `.data` and `.bss` are link-time
/// ranges supplied by the image's metadata sidecar; RAM ends at 0x1100.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryLayout {
    pub register_file_end: u16,
    pub io_end: u16,
    pub data_section: Range<u16>,
    pub bss_section: Range<u16>,
    pub ram_end: u16,
}

impl MemoryLayout {
    pub fn new(data_section: Range<u16>, bss_section: Range<u16>) -> Result<Self, FirmwareError> {
        let layout = MemoryLayout {
            register_file_end: 0x20,
            io_end: 0x100,
            data_section,
            bss_section,
            ram_end: RAM_END,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<(), FirmwareError> {
        let ok = self.register_file_end <= self.io_end
            && self.io_end <= self.data_section.start
            && self.data_section.start <= self.data_section.end
            && self.data_section.end <= self.bss_section.start
            && self.bss_section.start <= self.bss_section.end
            && self.bss_section.end <= self.ram_end
            && self.ram_end == RAM_END;
        if ok {
            Ok(())
        } else {
            Err(FirmwareError::InvalidLayout(format!(
                "data {:#06x}..{:#06x}, bss {:#06x}..{:#06x}",
                self.data_section.start, self.data_section.end,
                self.bss_section.start, self.bss_section.end
            )))
        }
    }
}

impl Default for MemoryLayout {
    fn default() -> Self {
        MemoryLayout::new(0x0200..0x0300, 0x0300..0x0400).unwrap()
    }
}

/// An immutable firmware image over word-addressed program memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FirmwareImage {
    program: Vec<u16>,
    bootloader_start: u32,
    pub symbols: BTreeMap<String, u16>,
    pub source: String,
}

impl FirmwareImage {
    pub fn new(program: Vec<u16>, source: impl Into<String>) -> Result<Self, FirmwareError> {
        if program.len() as u32 > FLASH_WORDS {
            return Err(FirmwareError::AddressOverflow { addr: program.len() as u32 * 2 });
        }
        Ok(FirmwareImage {
            program,
            bootloader_start: DEFAULT_BOOTLOADER_START,
            symbols: BTreeMap::new(),
            source: source.into(),
        })
    }

    pub fn empty(source: impl Into<String>) -> Self {
        FirmwareImage::new(Vec::new(), source).unwrap()
    }

    /// Stored program words; words beyond this length read as erased.
    pub fn words(&self) -> &[u16] {
        &self.program
    }

    pub fn len_words(&self) -> u32 {
        self.program.len() as u32
    }

    pub fn bootloader_start(&self) -> u32 {
        self.bootloader_start
    }

    pub fn set_bootloader_start(&mut self, start: u32) -> Result<(), FirmwareError> {
        if start > FLASH_WORDS || start % PAGE_WORDS as u32 != 0 {
            return Err(FirmwareError::InvalidBootloaderStart(start));
        }
        self.bootloader_start = start;
        Ok(())
    }

    /// Read the word at `addr`, or the erased fill value past the stored
    /// length. Addresses beyond the 64 K-word space are an error.
    pub fn read_program_word(&self, addr: u32) -> Result<u16, FirmwareError> {
        if addr >= FLASH_WORDS {
            return Err(FirmwareError::AddressOverflow { addr: addr * 2 });
        }
        Ok(self.program.get(addr as usize).copied().unwrap_or(ERASED_WORD))
    }

    /// Write one word, growing the stored image as needed (fixture and
    /// loader plumbing; images are immutable once handed out).
    pub fn write_program_word(&mut self, addr: u32, word: u16) -> Result<(), FirmwareError> {
        if addr >= FLASH_WORDS {
            return Err(FirmwareError::AddressOverflow { addr: addr * 2 });
        }
        if addr as usize >= self.program.len() {
            self.program.resize(addr as usize + 1, ERASED_WORD);
        }
        self.program[addr as usize] = word;
        Ok(())
    }

    pub fn place_words(&mut self, addr: u32, words: &[u16]) -> Result<(), FirmwareError> {
        for (i, &w) in words.iter().enumerate() {
            self.write_program_word(addr + i as u32, w)?;
        }
        Ok(())
    }

    pub fn symbol(&self, name: &str) -> Option<u16> {
        self.symbols.get(name).copied()
    }

    /// Linear-sweep disassembly of `[start, end)` word addresses.
    pub fn disassemble_range(&self, start: u16, end: u32) -> Result<Vec<ListedInstruction>, IsaError> {
        isa::disassemble_range(&self.program, start, end)
    }

    /// Serialize to Intel HEX, skipping erased words. Loading the output
    /// yields an identical word array (modulo trailing erased words, which
    /// read back identically).
    pub fn to_intel_hex(&self) -> String {
        let mut out = String::new();
        let mut upper = 0u16;
        let bytes: Vec<u8> = self
            .program
            .iter()
            .flat_map(|w| w.to_le_bytes())
            .collect();
        let mut i = 0usize;
        while i < bytes.len() {
            // Skip erased words (both bytes 0xff at an even offset).
            if bytes[i] == 0xff && bytes.get(i + 1) == Some(&0xff) && i % 2 == 0 {
                i += 2;
                continue;
            }
            let addr = i as u32;
            if (addr >> 16) as u16 != upper {
                upper = (addr >> 16) as u16;
                out.push_str(&format_record(0x04, 0, &upper.to_be_bytes()));
            }
            // Up to 16 data bytes, not crossing a 64 KB boundary.
            let mut end = (i + 16).min(bytes.len());
            end = end.min(((addr as usize) & !0xffff) + 0x1_0000);
            // Stop at the next erased word.
            let mut j = i;
            while j + 1 < end {
                if bytes[j] == 0xff && bytes[j + 1] == 0xff && j % 2 == 0 {
                    break;
                }
                j += 2;
            }
            let chunk_end = if j > i { j } else { end };
            let chunk_end = chunk_end.min(end);
            out.push_str(&format_record(0x00, (addr & 0xffff) as u16, &bytes[i..chunk_end]));
            i = chunk_end;
        }
        out.push_str(":00000001FF\n");
        out
    }
}

impl fmt::Display for FirmwareImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} ({} words, bootloader at {:#06x}, {} symbols)",
            self.source,
            self.program.len(),
            self.bootloader_start,
            self.symbols.len()
        )
    }
}

fn format_record(record_type: u8, addr: u16, data: &[u8]) -> String {
    let mut sum = data.len() as u8;
    sum = sum
        .wrapping_add((addr >> 8) as u8)
        .wrapping_add(addr as u8)
        .wrapping_add(record_type);
    for &b in data {
        sum = sum.wrapping_add(b);
    }
    let checksum = sum.wrapping_neg();
    let mut line = format!(":{:02X}{:04X}{:02X}", data.len(), addr, record_type);
    for &b in data {
        line.push_str(&format!("{b:02X}"));
    }
    line.push_str(&format!("{checksum:02X}\n"));
    line
}

/// Parse Intel HEX text into an image. Supports record types 00 (data),
/// 01 (EOF), 02 (extended segment) and 04 (extended linear). Bytes land
/// little-endian in program words; unwritten words stay erased (0xffff).
pub fn load_intel_hex(text: &str) -> Result<FirmwareImage, FirmwareError> {
    let mut bytes: BTreeMap<u32, u8> = BTreeMap::new();
    let mut base = 0u32;
    let mut saw_eof = false;

    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim();
        if line.is_empty() {
            continue;
        }
        if saw_eof {
            return Err(FirmwareError::MalformedRecord {
                line: line_no,
                reason: "data after EOF record".into(),
            });
        }
        let body = line.strip_prefix(':').ok_or_else(|| FirmwareError::MalformedRecord {
            line: line_no,
            reason: "missing `:` start code".into(),
        })?;
        if body.len() < 10 || body.len() % 2 != 0 {
            return Err(FirmwareError::MalformedRecord {
                line: line_no,
                reason: format!("record length {} is not a valid hex record", body.len()),
            });
        }
        let raw = hex::decode(body).map_err(|e| FirmwareError::MalformedRecord {
            line: line_no,
            reason: format!("invalid hex: {e}"),
        })?;
        let count = raw[0] as usize;
        if raw.len() != count + 5 {
            return Err(FirmwareError::MalformedRecord {
                line: line_no,
                reason: format!("length field {count} does not match record size"),
            });
        }
        let sum: u8 = raw[..raw.len() - 1]
            .iter()
            .fold(0u8, |acc, &b| acc.wrapping_add(b));
        let computed = sum.wrapping_neg();
        let stored = raw[raw.len() - 1];
        if computed != stored {
            return Err(FirmwareError::ChecksumMismatch { line: line_no, computed, stored });
        }
        let addr = u16::from_be_bytes([raw[1], raw[2]]) as u32;
        let record_type = raw[3];
        let data = &raw[4..4 + count];
        match record_type {
            0x00 => {
                for (i, &b) in data.iter().enumerate() {
                    let byte_addr = base + addr + i as u32;
                    if byte_addr >= FLASH_WORDS * 2 {
                        return Err(FirmwareError::AddressOverflow { addr: byte_addr });
                    }
                    bytes.insert(byte_addr, b);
                }
            }
            0x01 => saw_eof = true,
            0x02 => {
                if data.len() != 2 {
                    return Err(FirmwareError::MalformedRecord {
                        line: line_no,
                        reason: "type-02 record must carry 2 bytes".into(),
                    });
                }
                base = (u16::from_be_bytes([data[0], data[1]]) as u32) << 4;
            }
            0x04 => {
                if data.len() != 2 {
                    return Err(FirmwareError::MalformedRecord {
                        line: line_no,
                        reason: "type-04 record must carry 2 bytes".into(),
                    });
                }
                base = (u16::from_be_bytes([data[0], data[1]]) as u32) << 16;
            }
            other => {
                return Err(FirmwareError::MalformedRecord {
                    line: line_no,
                    reason: format!("unsupported record type 0x{other:02x}"),
                });
            }
        }
    }

    let mut program = Vec::new();
    if let Some((&last, _)) = bytes.iter().next_back() {
        program = vec![ERASED_WORD; (last / 2 + 1) as usize];
        for (&addr, &b) in &bytes {
            let word = &mut program[(addr / 2) as usize];
            if addr % 2 == 0 {
                *word = (*word & 0xff00) | b as u16;
            } else {
                *word = (*word & 0x00ff) | ((b as u16) << 8);
            }
        }
    }
    FirmwareImage::new(program, "intel-hex")
}

mod hexaddr {
    //! Serde helpers storing addresses as `0x`-prefixed strings.
    use serde::{self, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u32, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:#x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u32, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u32),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(n) => Ok(n),
            Raw::Str(s) => {
                let t = s.trim();
                let parsed = match t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
                    Some(hexpart) => u32::from_str_radix(hexpart, 16),
                    None => t.parse(),
                };
                parsed.map_err(serde::de::Error::custom)
            }
        }
    }
}

/// JSON sidecar carried next to a HEX image: section boundaries, the
/// `.data` initializer location in flash and the symbol table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sidecar {
    #[serde(with = "hexaddr")]
    pub bootloader_start: u32,
    pub layout: MemoryLayout,
    /// Word address of the `.data` initializer block in flash, if any.
    pub data_load: Option<u32>,
    pub symbols: BTreeMap<String, u16>,
}

impl Sidecar {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sidecar serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let sidecar: Sidecar = serde_json::from_str(text)?;
        Ok(sidecar)
    }

    /// Copy bootloader start and symbols onto a freshly loaded image.
    pub fn apply(&self, image: &mut FirmwareImage) -> Result<(), FirmwareError> {
        image.set_bootloader_start(self.bootloader_start)?;
        image.symbols = self.symbols.clone();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eof_only_file_is_an_empty_image() {
        let image = load_intel_hex(":00000001FF\n").unwrap();
        assert_eq!(image.len_words(), 0);
        assert_eq!(image.read_program_word(0).unwrap(), 0xffff);
    }

    #[test]
    fn data_record_stores_little_endian_words() {
        // Two data bytes 08 95 at address 0: word 0 = 0x9508 (ret).
        // Checksum: -(0x02 + 0x00 + 0x00 + 0x00 + 0x08 + 0x95) = 0x61.
        let image = load_intel_hex(":02000000089561\n:00000001FF\n").unwrap();
        assert_eq!(image.read_program_word(0).unwrap(), 0x9508);
    }

    #[test]
    fn corrupted_checksum_is_rejected() {
        let err = load_intel_hex(":02000000089562\n:00000001FF\n").unwrap_err();
        assert!(matches!(err, FirmwareError::ChecksumMismatch { line: 1, .. }));
    }

    #[test]
    fn malformed_records_are_rejected() {
        assert!(matches!(
            load_intel_hex("020000000895\n"),
            Err(FirmwareError::MalformedRecord { .. })
        ));
        assert!(matches!(
            load_intel_hex(":0200000008956\n"),
            Err(FirmwareError::MalformedRecord { .. })
        ));
        assert!(matches!(
            load_intel_hex(":020000000895\n"),
            Err(FirmwareError::MalformedRecord { .. })
        ));
    }

    #[test]
    fn address_overflow_is_rejected() {
        let mut image = FirmwareImage::empty("test");
        assert!(matches!(
            image.write_program_word(0x1_0000, 0),
            Err(FirmwareError::AddressOverflow { .. })
        ));
        assert!(matches!(
            image.read_program_word(0x1_0000),
            Err(FirmwareError::AddressOverflow { .. })
        ));
    }

    #[test]
    fn read_past_written_length_is_erased() {
        let image = FirmwareImage::new(vec![0x9508], "test").unwrap();
        assert_eq!(image.read_program_word(0).unwrap(), 0x9508);
        assert_eq!(image.read_program_word(1).unwrap(), 0xffff);
        assert_eq!(image.read_program_word(0xffff).unwrap(), 0xffff);
    }

    #[test]
    fn hex_round_trip_preserves_words() {
        let mut image = FirmwareImage::empty("test");
        image.place_words(0, &[0x940c, 0x3820]).unwrap();
        image.place_words(0x2b58, &[0x919f, 0x918f, 0x9508]).unwrap();
        image.place_words(0xf93d, &[0x91df, 0x91cf, 0x9508]).unwrap();
        let hex = image.to_intel_hex();
        let reloaded = load_intel_hex(&hex).unwrap();
        for addr in 0..0x1_0000u32 {
            assert_eq!(
                image.read_program_word(addr).unwrap(),
                reloaded.read_program_word(addr).unwrap(),
                "word {addr:#06x}"
            );
        }
    }

    #[test]
    fn images_above_64k_words_round_trip_through_type04_records() {
        let mut image = FirmwareImage::empty("test");
        image.place_words(0x8000, &[0x1234]).unwrap();
        image.place_words(0x9000, &[0xbeef]).unwrap();
        let hex = image.to_intel_hex();
        assert!(hex.contains(":02000004"), "needs an extended linear record:\n{hex}");
        let reloaded = load_intel_hex(&hex).unwrap();
        assert_eq!(reloaded.read_program_word(0x8000).unwrap(), 0x1234);
        assert_eq!(reloaded.read_program_word(0x9000).unwrap(), 0xbeef);
    }

    #[test]
    fn sections_partition_the_flash() {
        let image = FirmwareImage::empty("test");
        let split = image.bootloader_start();
        assert_eq!(split, DEFAULT_BOOTLOADER_START);
        assert_eq!(split % PAGE_WORDS as u32, 0);
        // Application region and bootloader region are disjoint and cover
        // the full space.
        assert_eq!(split + (FLASH_WORDS - split), FLASH_WORDS);
    }

    #[test]
    fn bootloader_start_must_be_page_aligned() {
        let mut image = FirmwareImage::empty("test");
        assert!(image.set_bootloader_start(0xf801).is_err());
        assert!(image.set_bootloader_start(0x1_0080).is_err());
        assert!(image.set_bootloader_start(0xf000).is_ok());
    }

    #[test]
    fn layout_ordering_is_validated() {
        assert!(MemoryLayout::new(0x0200..0x0300, 0x0280..0x0400).is_err());
        assert!(MemoryLayout::new(0x0080..0x0100, 0x0100..0x0200).is_err());
        assert!(MemoryLayout::new(0x0200..0x0300, 0x0300..0x0400).is_ok());
    }

    #[test]
    fn sidecar_round_trips_with_hex_addresses() {
        let mut symbols = BTreeMap::new();
        symbols.insert("receive".to_string(), 0x0100u16);
        let sidecar = Sidecar {
            bootloader_start: 0xf800,
            layout: MemoryLayout::default(),
            data_load: Some(0x3900),
            symbols,
        };
        let json = sidecar.to_json();
        assert!(json.contains("\"0xf800\""), "{json}");
        let back = Sidecar::from_json(&json).unwrap();
        assert_eq!(back, sidecar);
    }
}
