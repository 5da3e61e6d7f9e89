pub mod ablate;
pub mod evaluate;
pub mod import;
pub mod sample;
pub mod synth;
pub mod train;
