pub mod channel;
pub mod harness;
pub mod imdd;
pub mod mlp;
pub mod seqgen;
