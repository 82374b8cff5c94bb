// benchmark-only crate; see benches/kernels.rs
