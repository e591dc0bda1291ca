//! Symbol-level processing shared by the base station and the terminals.

pub mod ofdm;
pub mod pss;
pub mod qam;

pub use ofdm::{modulate_symbols, ofdm_demodulate, ofdm_modulate, CpLayout};
pub use pss::{detect_pss, generate_pss, PssSequence, DETECTION_THRESHOLD};
pub use qam::{qam_demap, qam_map};
