pub mod afc;
pub mod choice;
pub mod clock;
pub mod delay;
pub mod eval;
pub mod impact;
pub mod io;
pub mod llm;
pub mod network;
pub mod patterns;
pub mod pipeline;
pub mod predictor;
pub mod synth;
