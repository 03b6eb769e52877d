#![allow(dead_code)]

pub mod bankref;
pub mod gradsuite;
pub mod models;
pub mod oracle;
pub mod protocol;
pub mod stubs;
