//! Compiles `tests/c/smoke.c` against the generated header and the static
//! library, then runs it.

use std::path::{Path, PathBuf};
use std::process::Command;

use latte::{Catalog, SemanticId};

fn static_lib() -> PathBuf {
    // target/<profile>/deps/<test binary>
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    profile_dir.join("liblatte_ffi.a")
}

#[test]
fn c_program_links_and_runs() {
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let lib = static_lib();
    assert!(lib.exists(), "missing {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let catalog = Catalog::from_sids(
        2,
        3,
        [("a", [0, 0]), ("b", [0, 1]), ("c", [2, 1])].map(|(id, s)| (id.to_string(), SemanticId::new(s.to_vec()))),
    )
    .unwrap();
    let cat_path = dir.path().join("catalog.json");
    catalog.save(&cat_path).unwrap();

    let exe = dir.path().join("smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Wextra", "-Werror", "-o"])
        .arg(&exe)
        .arg(crate_dir.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .status()
        .expect("run C compiler");
    assert!(status.success());
    let out = Command::new(&exe).arg(&cat_path).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        String::from_utf8(out.stdout).unwrap().trim(),
        "items=3 depth=2 d01=2 missing=3 ndcg3=0.500"
    );
}
