//! Minimal stderr logger gated by the PMMOE_LOG environment variable:
//! `off`, `info` (default), or `debug`.

use std::sync::OnceLock;

static LEVEL: OnceLock<u8> = OnceLock::new();

fn level() -> u8 {
    *LEVEL.get_or_init(|| match std::env::var("PMMOE_LOG").as_deref() {
        Ok("off") | Ok("0") => 0,
        Ok("debug") | Ok("2") => 2,
        _ => 1,
    })
}

pub fn info(msg: &str) {
    if level() >= 1 {
        eprintln!("[pmmoe] {msg}");
    }
}

pub fn debug(msg: &str) {
    if level() >= 2 {
        eprintln!("[pmmoe:debug] {msg}");
    }
}
