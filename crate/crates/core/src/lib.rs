pub mod numerics;
pub mod dataio;
pub mod quantizer;
pub mod sidspace;
pub mod corpusgen;
pub mod policy;
pub mod grpo;
pub mod evalharness;
