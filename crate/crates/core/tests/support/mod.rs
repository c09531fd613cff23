#![allow(dead_code)]

pub mod evaloracle;
pub mod fixtures;
pub mod gradsuite;
