use std::path::Path;

use crate::commands;
use crate::error::CliError;
use crate::provenance::{read_provenance, sha256_file};

/// Recomputes every recorded digest under `dir`. With `regenerate`, the
/// recorded command is replayed into a scratch directory and its outputs
/// compared as well; files holding run-time measurements are compared with
/// the measurements removed.
pub fn verify(dir: &Path, regenerate: bool) -> Result<(), CliError> {
    let prov = read_provenance(dir)?;
    let mut checked = 0;
    let mut failed = Vec::new();
    for (rel, entry) in &prov.outputs {
        checked += 1;
        match sha256_file(&dir.join(rel)) {
            Ok(h) if h == entry.sha256 => println!("ok       {rel}"),
            Ok(_) => {
                println!("MODIFIED {rel}");
                failed.push(rel.clone());
            }
            Err(_) => {
                println!("MISSING  {rel}");
                failed.push(rel.clone());
            }
        }
    }
    for (path, recorded) in &prov.inputs {
        checked += 1;
        match sha256_file(Path::new(path)) {
            Ok(h) if &h == recorded => println!("ok       input {path}"),
            _ => {
                println!("CHANGED  input {path}");
                failed.push(path.clone());
            }
        }
    }
    if regenerate && failed.is_empty() {
        let scratch = std::env::temp_dir().join(format!("plmap-verify-{}", std::process::id()));
        let replay = commands::run(&prov.invocation, &prov.config, &scratch);
        let _ = std::fs::remove_dir_all(&scratch);
        let replay = replay?;
        for (rel, entry) in &prov.outputs {
            checked += 1;
            let Some(again) = replay.outputs.get(rel) else {
                println!("ABSENT   regenerated {rel}");
                failed.push(rel.clone());
                continue;
            };
            let same = if entry.timing {
                match (&entry.stable_sha256, &again.stable_sha256) {
                    (Some(a), Some(b)) => a == b,
                    _ => {
                        println!("skipped  regenerated {rel} (measurements only)");
                        continue;
                    }
                }
            } else {
                entry.sha256 == again.sha256
            };
            if same {
                println!("ok       regenerated {rel}");
            } else {
                println!("DIFFERS  regenerated {rel}");
                failed.push(rel.clone());
            }
        }
    }
    if failed.is_empty() {
        println!("{checked} checks passed ({} command)", prov.invocation.name());
        Ok(())
    } else {
        Err(CliError::new(
            "verify",
            format!("{} of {checked} checks failed, first: {}", failed.len(), failed[0]),
        ))
    }
}
