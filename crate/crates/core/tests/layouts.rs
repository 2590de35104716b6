use std::path::PathBuf;

use mace_core::grid::{Layout, TaskName};

fn shipped(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../layouts").join(name)
}

#[test]
fn shipped_files_match_the_builtins() {
    for (task, stem) in [
        (TaskName::Pass, "pass"),
        (TaskName::SecretRoom, "secret_room"),
        (TaskName::MultiRoom, "multi_room"),
    ] {
        for size in [15, 30] {
            let path = shipped(&format!("{stem}_{size}.txt"));
            let loaded = Layout::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert_eq!(loaded, Layout::builtin(task, size).unwrap(), "{}", path.display());
        }
    }
}
