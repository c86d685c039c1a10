use std::path::{Path, PathBuf};
use std::process::Command;

use mltr::config::RunConfig;
use mltr::model::{Mltr, ModelConfig};
use mltr::{train, Tensor};

/// Directory holding the library artifacts of the current profile.
fn artifact_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_static_library() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let lib = artifact_dir().join("libmltr_ffi.a");
    assert!(lib.is_file(), "{} missing", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(&cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests").join("c_program.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap_or_else(|e| panic!("running {cc}: {e}"));
    assert!(status.success(), "C compilation failed");

    let cfg = RunConfig { model: ModelConfig::tiny(), ..RunConfig::overfit() };
    let model = Mltr::<f32>::new(cfg.model.clone(), 6).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    train::to_checkpoint(&cfg, &model, None).unwrap().write(&ckpt).unwrap();

    let out = Command::new(&exe).arg(&ckpt).output().unwrap();
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let mut fields = stdout.split_whitespace();
    assert_eq!(fields.next(), Some(env!("CARGO_PKG_VERSION")));
    let got: Vec<f32> = fields.map(|f| f.parse().unwrap()).collect();
    let pixels: Vec<f32> = (0..64).map(|i| (i % 9) as f32 / 9.0).collect();
    let want = model.predict(&Tensor::new(vec![1, 8, 8], pixels).unwrap()).unwrap();
    assert_eq!(got, want);
}
