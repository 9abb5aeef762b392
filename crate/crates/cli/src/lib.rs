//! Library surface of the `hopmp` binary: the spec-file loader, shared by
//! the command-line front end and the acceptance suite.

pub mod spec_file;
