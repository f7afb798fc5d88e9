//! Return-oriented programming toolkit for AVR sensor-node firmware.
//!
//! The crate covers the whole pipeline needed to mount (and study) a
//! code-injection attack against a modified-Harvard AVR node:
//!
//! * [`isa`] — decode/encode the AVR8 instruction subset used by gadgets
//!   and the emulator, plus a text assembler for fixture firmware.
//! * [`firmware`] — Intel HEX images, word-addressed program space,
//!   section layout and symbol sidecar files.
//! * [`gadgets`] — scan an image for `ret`/`reti`-terminated straight-line
//!   instruction suffixes and model their stack/register/memory effects.
//! * [`chains`] — synthesize injection and reprogramming meta-gadgets and
//!   emit byte-exact stack payloads under packet-size constraints.
//! * [`fakestack`] — build the fake-stack structure around a malware page
//!   and compute the byte-by-byte injection schedule.
//! * [`emulator`] — instruction-level ATmega128-class machine with
//!   bootloader-gated SPM self-programming and soft-reboot semantics.
//! * [`campaign`] — end-to-end attack orchestration, the memory-cleanup
//!   countermeasure evaluation and desk-scale worm propagation.
//! * [`fixture`] — a self-contained vulnerable demo node used by tests,
//!   the CLI and the simulator.

pub mod campaign;
pub mod chains;
pub mod emulator;
pub mod fakestack;
pub mod firmware;
pub mod fixture;
pub mod gadgets;
pub mod isa;

pub use firmware::FirmwareImage;
