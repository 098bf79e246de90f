use std::env;
use std::path::PathBuf;

fn main() {
    let crate_dir = PathBuf::from(env::var("CARGO_MANIFEST_DIR").expect("set by cargo"));
    cbindgen::generate(&crate_dir)
        .expect("cbindgen config is valid")
        .write_to_file(crate_dir.join("include").join("fairfed.h"));
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");
}
