pub mod encoder;
pub mod eval;
pub mod ingest;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vocab;
