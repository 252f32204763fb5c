//! Desk-scale model of a parallelized fiber QKD receiver chain: a
//! coherent-one-way transmitter/receiver simulator, the time-tagger record
//! path (FIFOs, merging, T2/T3 framing), and the per-second key evaluation
//! that turns detection records into sifted- and secret-key metrics.

pub mod analysis;
pub mod config;
pub mod cowsim;
pub mod keyeval;
pub mod run;
pub mod streams;
pub mod ttrecords;
