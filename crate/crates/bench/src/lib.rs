//! Holds the criterion benches under `benches/`; run with `cargo bench -p bshare-bench`.
