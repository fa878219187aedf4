//! Holds the `acceptance` test target. Run it with
//! `cargo test -p ocrm-validation --test acceptance`.
