// ndarray-linalg is used with default-features = false (no bundled/static BLAS
// providers); the system OpenBLAS carries the full LAPACK symbol set, so linking
// it directly is all the backend wiring this crate needs.
fn main() {
    println!("cargo:rustc-link-lib=dylib=openblas");
}
