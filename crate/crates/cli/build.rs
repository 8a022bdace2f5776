// Embeds a content hash of the core and cli sources as CKD_CODE_HASH.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

fn collect(dir: &Path, out: &mut Vec<PathBuf>) {
    let Ok(entries) = fs::read_dir(dir) else { return };
    for e in entries.flatten() {
        let p = e.path();
        if p.is_dir() {
            collect(&p, out);
        } else if p.extension().is_some_and(|x| x == "rs") {
            out.push(p);
        }
    }
}

fn main() {
    let here = PathBuf::from(std::env::var("CARGO_MANIFEST_DIR").unwrap());
    let roots = [here.join("src"), here.join("../core/src")];
    let mut files = Vec::new();
    for r in &roots {
        println!("cargo:rerun-if-changed={}", r.display());
        collect(r, &mut files);
    }
    let mut keyed: Vec<(String, PathBuf)> = files
        .into_iter()
        .map(|p| (p.strip_prefix(here.parent().unwrap()).unwrap_or(&p).to_string_lossy().replace('\\', "/"), p))
        .collect();
    keyed.sort();
    let mut h = Sha256::new();
    for (name, path) in keyed {
        let body = fs::read(&path).unwrap();
        h.update(format!("{name}\0{}\0", body.len()).as_bytes());
        h.update(&body);
    }
    println!("cargo:rustc-env=CKD_CODE_HASH={}", hex::encode(h.finalize()));
}
