#![allow(dead_code)]

pub mod full_model;
pub mod ops;
