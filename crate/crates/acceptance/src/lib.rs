//! Holds the `acceptance` test target; run it with
//! `cargo test -p crystalbox-acceptance --test acceptance`.
