//! On-disk perturbation artifacts: `uap.mmt` (base patch), `prompt_delta.mmt`
//! (`1 x d_t x 1`) and an `artifact.txt` metadata sidecar.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::parse_real;
use crate::error::{Error, Result};
use crate::numerics::{read_mmt, write_mmt, ImageTensor, ScaleMask};
use crate::perturbation::{PromptDelta, TextureUAP, PATCH_SIZE};

pub const UAP_FILE: &str = "uap.mmt";
pub const DELTA_FILE: &str = "prompt_delta.mmt";
pub const META_FILE: &str = "artifact.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactMeta {
    pub seed: u64,
    pub victim_seed: u64,
    pub queries_used: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub uap: TextureUAP,
    pub delta: PromptDelta,
    pub meta: ArtifactMeta,
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn save_artifact(dir: &Path, artifact: &Artifact) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_mmt(dir.join(UAP_FILE), &artifact.uap.base_patch)?;
    let d = &artifact.delta.vector;
    write_mmt(dir.join(DELTA_FILE), &ImageTensor::new(1, d.len(), 1, d.clone())?)?;
    let (u, m) = (&artifact.uap, &artifact.meta);
    let mut s = String::from("# perturbation artifact\n");
    let _ = writeln!(s, "eps_v={}", u.eps_v);
    let _ = writeln!(s, "s_k={}", u.tile_scale);
    let _ = writeln!(s, "mask_keep_approx={}", u.mask.keep_approx);
    let _ = writeln!(s, "mask_keep_detail={}", join(&u.mask.keep_detail));
    let _ = writeln!(s, "mask_weights={}", join(&u.mask.level_weights));
    let _ = writeln!(s, "eps_t={}", artifact.delta.eps_t);
    let _ = writeln!(s, "seed={}", m.seed);
    let _ = writeln!(s, "victim_seed={}", m.victim_seed);
    let _ = writeln!(s, "queries_used={}", m.queries_used);
    let _ = writeln!(s, "config_hash={}", m.config_hash);
    std::fs::write(dir.join(META_FILE), s)?;
    Ok(())
}

fn meta_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "artifact metadata",
        detail: detail.into(),
    }
}

pub fn load_artifact(dir: &Path) -> Result<Artifact> {
    for f in [UAP_FILE, DELTA_FILE, META_FILE] {
        if !dir.join(f).is_file() {
            return Err(Error::MissingFile(dir.join(f)));
        }
    }
    let patch = read_mmt(dir.join(UAP_FILE))?;
    let delta_t = read_mmt(dir.join(DELTA_FILE))?;
    let text = std::fs::read_to_string(dir.join(META_FILE))?;

    let mut fields = std::collections::BTreeMap::new();
    for line in text.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| meta_err(format!("bad line {line:?}")))?;
        fields.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| fields.get(k).ok_or_else(|| meta_err(format!("missing {k}")));
    let real = |k: &str| get(k).and_then(|v| parse_real(v).map_err(meta_err));
    let uint = |k: &str| get(k).and_then(|v| v.parse::<u64>().map_err(|e| meta_err(format!("{k}: {e}"))));
    let bools = |k: &str| -> Result<Vec<bool>> {
        let v = get(k)?;
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|b| b.trim().parse::<bool>().map_err(|e| meta_err(format!("{k}: {e}"))))
            .collect()
    };
    let weights: Vec<f64> = {
        let v = get("mask_weights")?;
        if v.is_empty() {
            Vec::new()
        } else {
            v.split(',').map(|w| parse_real(w.trim()).map_err(meta_err)).collect::<Result<_>>()?
        }
    };
    let keep_approx = get("mask_keep_approx")?
        .parse::<bool>()
        .map_err(|e| meta_err(format!("mask_keep_approx: {e}")))?;
    let mask = ScaleMask::new(keep_approx, bools("mask_keep_detail")?, weights)?;

    if patch.height() != PATCH_SIZE || patch.width() != PATCH_SIZE {
        return Err(Error::Format {
            what: "artifact",
            detail: format!("base patch is {:?}, expected {PATCH_SIZE}x{PATCH_SIZE}", patch.shape()),
        });
    }
    if delta_t.height() != 1 || delta_t.channels() != 1 {
        return Err(Error::Format {
            what: "artifact",
            detail: format!("prompt delta must be 1 x d x 1, got {:?}", delta_t.shape()),
        });
    }
    let tile_scale = uint("s_k")? as usize;
    crate::perturbation::check_tile_scale(tile_scale)?;
    Ok(Artifact {
        uap: TextureUAP {
            base_patch: patch,
            tile_scale,
            eps_v: real("eps_v")?,
            mask,
        },
        delta: PromptDelta {
            vector: delta_t.into_data(),
            eps_t: real("eps_t")?,
        },
        meta: ArtifactMeta {
            seed: uint("seed")?,
            victim_seed: uint("victim_seed")?,
            queries_used: uint("queries_used")?,
            config_hash: get("config_hash")?.clone(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use crate::perturbation::{init_prompt_delta, init_uap};

    fn sample() -> Artifact {
        let mut rng = RngStream::new(5, "art");
        Artifact {
            uap: init_uap(&mut rng, 8.0 / 255.0, 4, ScaleMask::default(), 3).unwrap(),
            delta: init_prompt_delta(&mut rng, 0.5, 64).unwrap(),
            meta: ArtifactMeta {
                seed: 5,
                victim_seed: 1,
                queries_used: 19712,
                config_hash: "ab".repeat(32),
            },
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let a = sample();
        save_artifact(dir.path(), &a).unwrap();
        assert_eq!(load_artifact(dir.path()).unwrap(), a);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_artifact(dir.path(), &sample()).unwrap();
        let p = dir.path().join(UAP_FILE);
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(load_artifact(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn truncated_delta_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_artifact(dir.path(), &sample()).unwrap();
        let p = dir.path().join(DELTA_FILE);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_artifact(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_artifact(dir.path()), Err(Error::MissingFile(p)) if p.ends_with(UAP_FILE)));
    }
}
