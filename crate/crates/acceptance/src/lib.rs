//! Holds the `acceptance` test target; run it with
//! `cargo test -p nimbus-acceptance --test acceptance`.
