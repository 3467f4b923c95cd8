//! Holds the `acceptance` test target, which exercises every other crate in
//! the workspace. See `tests/acceptance.rs`.
