//! File formats, experiment orchestration, and verification suites for the
//! `piwo` command-line front end.
//!
//! Everything on-disk is plain text or a small versioned binary container:
//!
//! * tabular fixture models (`.tab`, documented in [`formats`]),
//! * golden value files frozen from the enumeration oracle,
//! * parameter checkpoints with a config fingerprint,
//! * dataset caches with an integrity checksum,
//! * per-run metrics/trace CSVs and the results tables.
//!
//! Outputs are written atomically (temp file + rename) and are byte-for-byte
//! reproducible from `(manifest, seed)`.

pub mod formats;
pub mod manifest;
pub mod plot;
pub mod runner;
pub mod verify;

/// Process exit codes: success, verification/assertion failure, usage or
/// configuration error.
pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
