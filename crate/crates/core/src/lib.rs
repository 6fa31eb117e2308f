//! Dead-store oracle, program graphs and a hybrid graph-neural classifier
//! that predicts which MiniASM procedures contain dead stores.

pub mod isa;
pub mod model;
pub mod nn;
pub mod selfcheck;
pub mod cnn;
pub mod corpus;
pub mod dataset;
pub mod embedding;
pub mod ggnn;
pub mod graph;
pub mod vm;
