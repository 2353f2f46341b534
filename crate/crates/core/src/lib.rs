pub mod error;
pub mod ident;
pub mod numerics;
pub mod plant;
pub mod lifted;
pub mod sensitivity;
pub mod mpc;
pub mod bench;
pub mod config;
pub mod cli;
