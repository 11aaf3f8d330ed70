// Embeds a content hash of the library and CLI sources so run manifests can
// name the exact code that produced them.
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

fn main() {
    let root = PathBuf::from(std::env::var("CARGO_MANIFEST_DIR").unwrap());
    let dirs = [root.join("src"), root.join("../core/src")];
    let manifests = [root.join("Cargo.toml"), root.join("../core/Cargo.toml")];

    let mut files: Vec<PathBuf> = manifests.to_vec();
    for d in &dirs {
        println!("cargo:rerun-if-changed={}", d.display());
        for e in walkdir::WalkDir::new(d).sort_by_file_name() {
            let e = e.unwrap();
            if e.file_type().is_file() && e.path().extension().is_some_and(|x| x == "rs") {
                files.push(e.into_path());
            }
        }
    }
    for m in &manifests {
        println!("cargo:rerun-if-changed={}", m.display());
    }

    let mut h = Sha256::new();
    for f in &files {
        let rel = f.strip_prefix(&root).unwrap_or(f);
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(std::fs::read(Path::new(f)).unwrap());
        h.update([0]);
    }
    let digest = h.finalize();
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    println!("cargo:rustc-env=LORPMAN_CODE_HASH={hex}");
}
