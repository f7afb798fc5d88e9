//! The built-in demo node: a small vulnerable firmware image with known
//! gadget addresses, a packet-receive routine that overflows a 4-byte
//! stack buffer, and a bootloader whose tail sequences can be chained
//! into a flash-reprogramming meta-gadget.
//!
//! Addresses are deliberately stable: tests, the CLI walkthrough and the
//! payload-format reproduction all resolve them through the symbol table
//! written into the metadata sidecar.

use crate::emulator::DeliveryOptions;
use crate::firmware::{FirmwareImage, MemoryLayout, Sidecar};
use crate::isa::{assemble, parse_program};

/// Word address of the vulnerable receive routine.
pub const RECEIVE: u16 = 0x0100;
/// Data address of the radio packet buffer (`[len, payload...]`).
pub const PACKET_BUF: u16 = 0x0300;
/// Word address the receive call returns to (the main loop's halt).
pub const HALT: u16 = 0x3822;
/// Stack pointer value just before the receive call; the saved return
/// address lands at 0x105f/0x1060 and the local buffer at 0x105b.
pub const CALL_SP: u16 = 0x1060;
/// Data address of the overflowed 4-byte buffer.
pub const BUFFER_START: u16 = 0x105b;

/// Injection chain gadgets in the application section.
pub const GADGET1: u16 = 0x2b58;
pub const GADGET2: u16 = 0x0185;
pub const GADGET3: u16 = 0x073a;

/// Reprogramming gadgets in the bootloader section.
pub const BL_LOAD: u16 = 0xf93d;
pub const BL_PIVOT: u16 = 0xfba9;
/// Entry of the full erase/fill/write reprogramming routine.
pub const REPROGRAM: u16 = 0xfb4d;

/// Word address of the `.data` initializer block in flash.
pub const DATA_LOAD: u32 = 0x3900;

/// I/O register the demo malware raises its sentinel bits in.
pub const SENTINEL_IO: u8 = 0x1a;

fn place(image: &mut FirmwareImage, addr: u32, asm: &[&str]) {
    let words = assemble(&parse_program(asm).expect("fixture asm parses")).expect("fixture asm encodes");
    image.place_words(addr, &words).expect("fixture fits in flash");
}

/// Build the demo firmware image and its metadata sidecar.
pub fn demo_image() -> (FirmwareImage, Sidecar) {
    let mut image = FirmwareImage::empty("demo-node");

    // Reset vector.
    place(&mut image, 0x0000, &["jmp 0x3820"]);

    // receive(): copies len-prefixed packet bytes into a 4-byte stack
    // buffer without a bounds check.
    place(
        &mut image,
        RECEIVE as u32,
        &[
            "in r28, 0x3d",
            "in r29, 0x3e",
            "sbiw r28, 4",
            "out 0x3e, r29",
            "out 0x3d, r28",   // allocate tmp_buff[4]
            "movw r24, r28",
            "adiw r24, 1",     // dest = SP + 1
            "ldi r30, 0x00",
            "ldi r31, 0x03",   // Z = packet_buf
            "ld r20, Z+",      // r20 = buff_len
            "movw r26, r30",   // src pointer
            "cpi r20, 0x00",   // copy_loop
            "breq .+8",
            "movw r30, r26",
            "ld r18, Z+",
            "movw r26, r30",
            "movw r30, r24",
            "st Z+, r18",      // *dest++ = byte (no bounds check)
            "movw r24, r30",
            "subi r20, 0x01",
            "rjmp .-10",
            "in r28, 0x3d",    // copy_done: epilogue
            "in r29, 0x3e",
            "adiw r28, 4",
            "out 0x3e, r29",
            "out 0x3d, r28",
            "ret",
        ],
    );

    // gadget2: bridges r24:r25 into Z; the std writes a stale r22 ten
    // bytes past the target, which the injection campaign tolerates.
    place(&mut image, GADGET2 as u32, &["movw r30, r24", "std Z+10, r22", "ret"]);

    // gadget3: the store primitive.
    place(&mut image, GADGET3 as u32, &["st Z, r18", "ret"]);

    // gadget1: loads address and data registers from the stack.
    place(
        &mut image,
        GADGET1 as u32,
        &[
            "pop r25",
            "pop r24",
            "pop r19",
            "pop r18",
            "pop r0",
            "out 0x3f, r0",
            "pop r0",
            "pop r1",
            "reti",
        ],
    );

    // Main loop: call receive, then halt. The halt doubles as the normal
    // return address 0x3822 seen on the stack before an overflow.
    place(&mut image, 0x3820, &["call 0x0100", "rjmp .-1"]);

    // .data initializers: a few recognizable bytes, the rest zero.
    let mut data_init = vec![0u8; 256];
    data_init[..8].copy_from_slice(&[0xc0, 0xff, 0xee, 0x00, 0x11, 0x22, 0x33, 0x44]);
    let data_words: Vec<u16> = data_init
        .chunks(2)
        .map(|p| u16::from_le_bytes([p[0], p[1]]))
        .collect();
    image.place_words(DATA_LOAD, &data_words).expect("data block fits");

    // Bootloader idle stub.
    place(&mut image, 0xf800, &["rjmp .-1"]);

    // bl_load: pulls the fake stack pointer into r28:r29 plus three
    // padding pops (r17, r15, r14).
    place(
        &mut image,
        BL_LOAD as u32,
        &["pop r29", "pop r28", "pop r17", "pop r15", "pop r14", "ret"],
    );

    // Reprogramming routine: erase the target page, fill the hardware
    // page buffer from the frame's data pointer, commit the page, then
    // run the epilogue. The frame pointer (Y) arrives via the pivot
    // gadget's pops; the data pointer lives at Y+264.
    place(
        &mut image,
        REPROGRAM as u32,
        &[
            "ldi r24, 0x03",
            "movw r30, r14",
            "sts 0x005b, r16",
            "sts 0x0068, r24",
            "spm",             // page erase at DEST
            "movw r30, r28",
            "subi r30, 0xf8",
            "sbci r31, 0xfe",  // Z = Y + 264
            "ld r26, Z+",
            "ld r27, Z",       // X = *(Y+264): the page data pointer
            "ldi r24, 0x00",
            "ldi r25, 0x00",
            "movw r30, r26",   // fill_loop
            "ld r0, Z+",
            "ld r1, Z+",
            "movw r26, r30",
            "movw r30, r24",
            "ldi r18, 0x01",
            "sts 0x0068, r18",
            "spm",             // buffer fill
            "adiw r24, 0x02",
            "cpi r25, 0x01",
            "brne .-12",
            "mov r24, r6",     // remaining-page counter (zero exits)
            "cpi r24, 0x00",
            "breq .+3",
            "subi r24, 0x01",
            "mov r6, r24",
            "rjmp .-32",
            "movw r30, r14",   // commit: page write at DEST
            "sts 0x005b, r16",
            "ldi r24, 0x05",
            "sts 0x0068, r24",
            "spm",
            "pop r29",         // epilogue
            "pop r28",
            "pop r17",
            "pop r16",
            "pop r15",
            "pop r14",
            "pop r13",
            "pop r12",
            "pop r11",
            "pop r10",
            "pop r9",
            "pop r8",
            "pop r7",
            "pop r6",
            "pop r5",
            "pop r4",
            "pop r3",
            "pop r2",
            "ret",
        ],
    );

    // bl_pivot: saves SREG, moves the fake stack pointer into SP, then
    // consumes the head of the fake stack.
    place(
        &mut image,
        BL_PIVOT as u32,
        &[
            "in r0, 0x3f",
            "cli",
            "out 0x3e, r29",
            "out 0x3f, r0",
            "out 0x3d, r28",
            "pop r29",
            "pop r28",
            "pop r17",
            "pop r16",
            "pop r15",
            "pop r14",
            "pop r13",
            "pop r12",
            "pop r11",
            "pop r10",
            "pop r9",
            "pop r8",
            "pop r7",
            "pop r6",
            "pop r5",
            "pop r4",
            "pop r3",
            "pop r2",
            "ret",
        ],
    );

    let sidecar = demo_sidecar();
    sidecar.apply(&mut image).expect("sidecar applies");
    (image, sidecar)
}

pub fn demo_sidecar() -> Sidecar {
    let mut symbols = std::collections::BTreeMap::new();
    symbols.insert("main".to_string(), 0x3820u16);
    symbols.insert("halt".to_string(), HALT);
    symbols.insert("receive".to_string(), RECEIVE);
    symbols.insert("packet_buf".to_string(), PACKET_BUF);
    symbols.insert("call_sp".to_string(), CALL_SP);
    symbols.insert("buffer_start".to_string(), BUFFER_START);
    symbols.insert("gadget1".to_string(), GADGET1);
    symbols.insert("gadget2".to_string(), GADGET2);
    symbols.insert("gadget3".to_string(), GADGET3);
    symbols.insert("bl_load".to_string(), BL_LOAD);
    symbols.insert("bl_pivot".to_string(), BL_PIVOT);
    symbols.insert("reprogram".to_string(), REPROGRAM);
    Sidecar {
        bootloader_start: 0xf800,
        layout: MemoryLayout::default(),
        data_load: Some(DATA_LOAD),
        symbols,
    }
}

/// A gadget-free image: reset vector straight into a halt loop.
pub fn null_image() -> (FirmwareImage, Sidecar) {
    let mut image = FirmwareImage::empty("null-node");
    place(&mut image, 0x0000, &["jmp 0x0046"]);
    place(&mut image, 0x0046, &["rjmp .-1"]);
    let sidecar = Sidecar {
        bootloader_start: 0xf800,
        layout: MemoryLayout::default(),
        data_load: None,
        symbols: std::collections::BTreeMap::new(),
    };
    (image, sidecar)
}

/// Packet delivery parameters for an image carrying the fixture symbols;
/// falls back to the demo constants when symbols are missing.
pub fn delivery_options(image: &FirmwareImage) -> DeliveryOptions {
    DeliveryOptions {
        receive_entry: image.symbol("receive").unwrap_or(RECEIVE),
        packet_buf: image.symbol("packet_buf").unwrap_or(PACKET_BUF),
        return_addr: image.symbol("halt").unwrap_or(HALT),
        call_sp: image.symbol("call_sp").unwrap_or(CALL_SP),
        max_payload: 28,
        fuel: 1_000_000,
    }
}

/// The demo malware: raise two sentinel bits, then return. The return
/// address comes from the zero bytes beyond the fake stack, so the node
/// soft-reboots right after the sentinel fires. Zero-padded to `len`.
pub fn sentinel_malware(len: usize) -> Vec<u8> {
    let words = assemble(
        &parse_program(&["sbi 0x1a, 2", "sbi 0x1a, 1", "ret"]).unwrap(),
    )
    .unwrap();
    let mut bytes: Vec<u8> = words.iter().flat_map(|w| w.to_le_bytes()).collect();
    assert!(len >= bytes.len() && len <= 256);
    bytes.resize(len, 0x00);
    bytes
}
