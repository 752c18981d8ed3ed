//! Command line front end and HTTP explorer service for `idlat`.

pub mod commands;
pub mod render;
pub mod service;
