//! Holds the `acceptance` test target. Kept in its own package so it runs
//! after the unit and integration tests of the other crates.
