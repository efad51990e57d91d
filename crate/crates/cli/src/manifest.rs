//! Stage manifests and chain verification.
//!
//! Every stage writes `out_root/<stage>/manifest.json` recording its
//! parameters, a summary, the SHA-256 of each artifact it wrote, and the
//! digest of its predecessor's manifest file. Downstream stages refuse to
//! run unless the whole chain back to `ingest` re-verifies, so an artifact
//! can always be traced to the exact inputs and settings that produced it.
//! Manifests carry no timestamps; re-running a stage on unchanged inputs
//! reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::errors::CliError;
use uasim_core::jsonl::atomic_write;

/// Pipeline stages in execution order. Each requires the previous one.
pub const STAGES: [&str; 8] = [
    "ingest", "distill", "cluster", "index", "datasets", "simulate", "evaluate", "report",
];

pub fn predecessor_of(stage: &str) -> Option<&'static str> {
    let idx = STAGES.iter().position(|s| *s == stage)?;
    if idx == 0 {
        None
    } else {
        Some(STAGES[idx - 1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredecessorRef {
    pub stage: String,
    /// SHA-256 of the predecessor's manifest file bytes.
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    /// `None` only for `ingest`.
    pub predecessor: Option<PredecessorRef>,
    /// Digest of the ingest manifest this chain descends from; `None` on
    /// the ingest manifest itself (its own digest is the root).
    pub chain_root: Option<String>,
    /// Parameters the stage ran with.
    pub params: serde_json::Value,
    /// Dotted keys in `params` that differ from the shipped defaults.
    pub non_default_params: Vec<String>,
    /// Stage-specific result counts and digests.
    pub summary: serde_json::Value,
    /// Artifact path (relative to the stage directory) to SHA-256.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| {
        CliError::Internal(format!("cannot read {}: {e}", path.display()))
    })?;
    Ok(sha256_hex(&bytes))
}

pub fn stage_dir(out_root: &Path, stage: &str) -> PathBuf {
    out_root.join(stage)
}

pub fn manifest_path(out_root: &Path, stage: &str) -> PathBuf {
    stage_dir(out_root, stage).join("manifest.json")
}

pub fn load_manifest(out_root: &Path, stage: &str) -> Result<StageManifest, CliError> {
    let path = manifest_path(out_root, stage);
    let bytes = std::fs::read(&path).map_err(|_| {
        CliError::Upstream(format!(
            "missing manifest for stage {stage} at {}; run `uasim {stage}` first",
            path.display()
        ))
    })?;
    let manifest: StageManifest = serde_json::from_slice(&bytes).map_err(|e| {
        CliError::Upstream(format!("corrupt manifest {}: {e}", path.display()))
    })?;
    if manifest.stage != stage {
        return Err(CliError::Upstream(format!(
            "manifest {} claims stage {} but sits under {stage}",
            path.display(),
            manifest.stage
        )));
    }
    Ok(manifest)
}

pub fn manifest_file_digest(out_root: &Path, stage: &str) -> Result<String, CliError> {
    hash_file(&manifest_path(out_root, stage))
}

/// Serializes and writes a manifest atomically; returns the file digest
/// downstream stages will record.
pub fn write_stage_manifest(
    out_root: &Path,
    manifest: &StageManifest,
) -> Result<String, CliError> {
    let mut bytes = serde_json::to_vec_pretty(manifest)
        .map_err(|e| CliError::Internal(format!("manifest serialization failed: {e}")))?;
    bytes.push(b'\n');
    let path = manifest_path(out_root, &manifest.stage);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::Internal(format!("cannot create {}: {e}", parent.display())))?;
    }
    atomic_write(&path, &bytes)
        .map_err(|e| CliError::Internal(format!("cannot write {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// Re-hashes every artifact a manifest claims.
pub fn verify_outputs(out_root: &Path, manifest: &StageManifest) -> Result<(), CliError> {
    let dir = stage_dir(out_root, &manifest.stage);
    for (rel, recorded) in &manifest.outputs {
        let path = dir.join(rel);
        let actual = hash_file(&path).map_err(|_| {
            CliError::Upstream(format!(
                "stage {} output {} is missing; re-run `uasim {}`",
                manifest.stage,
                path.display(),
                manifest.stage
            ))
        })?;
        if actual != *recorded {
            return Err(CliError::Upstream(format!(
                "stage {} output {} changed since the stage ran; re-run `uasim {}`",
                manifest.stage,
                path.display(),
                manifest.stage
            )));
        }
    }
    Ok(())
}

/// A verified chain from some stage back to ingest.
#[derive(Debug)]
pub struct ChainInfo {
    /// Digest of the ingest manifest file.
    pub root: String,
    pub manifests: BTreeMap<String, StageManifest>,
}

/// Walks predecessors from `stage` to `ingest`, re-hashing artifacts and
/// manifest links. Any missing stage, stale digest, or disagreement about
/// the chain root fails with an upstream error naming the stage to re-run.
pub fn verify_chain(out_root: &Path, stage: &str) -> Result<ChainInfo, CliError> {
    let mut manifests = BTreeMap::new();
    let mut claimed_roots: Vec<(String, String)> = Vec::new();
    let mut current = stage.to_string();
    loop {
        let manifest = load_manifest(out_root, &current)?;
        verify_outputs(out_root, &manifest)?;
        let expected_pred = predecessor_of(&current);
        match (&manifest.predecessor, expected_pred) {
            (None, None) => {
                manifests.insert(current.clone(), manifest);
                break;
            }
            (Some(link), Some(pred)) => {
                if link.stage != pred {
                    return Err(CliError::Upstream(format!(
                        "manifest for stage {current} names predecessor {}, expected {pred}",
                        link.stage
                    )));
                }
                let actual = manifest_file_digest(out_root, pred)?;
                if actual != link.digest {
                    return Err(CliError::Upstream(format!(
                        "stage {current} was built against a different {pred} run; \
                         re-run `uasim {current}` (and later stages) after {pred}"
                    )));
                }
                if let Some(root) = &manifest.chain_root {
                    claimed_roots.push((current.clone(), root.clone()));
                } else {
                    return Err(CliError::Upstream(format!(
                        "manifest for stage {current} records no chain root; re-run `uasim {current}`"
                    )));
                }
                manifests.insert(current.clone(), manifest);
                current = pred.to_string();
            }
            (None, Some(pred)) => {
                return Err(CliError::Upstream(format!(
                    "manifest for stage {current} records no predecessor, expected {pred}"
                )));
            }
            (Some(link), None) => {
                return Err(CliError::Upstream(format!(
                    "ingest manifest unexpectedly records predecessor {}",
                    link.stage
                )));
            }
        }
    }
    let root = manifest_file_digest(out_root, "ingest")?;
    for (claimant, claimed) in &claimed_roots {
        if claimed != &root {
            return Err(CliError::Upstream(format!(
                "stage {claimant} descends from a different ingest run than the current one; \
                 artifacts from mixed runs cannot be combined. Re-run the stages in order."
            )));
        }
    }
    Ok(ChainInfo { root, manifests })
}

/// Predecessor link and chain root for a stage about to write its manifest.
pub fn chain_link(out_root: &Path, stage: &str) -> Result<(PredecessorRef, String), CliError> {
    let pred = predecessor_of(stage)
        .unwrap_or_else(|| panic!("stage {stage} has no predecessor"));
    let manifest = load_manifest(out_root, pred)?;
    let digest = manifest_file_digest(out_root, pred)?;
    let root = if pred == "ingest" {
        digest.clone()
    } else {
        manifest.chain_root.clone().ok_or_else(|| {
            CliError::Upstream(format!(
                "manifest for stage {pred} records no chain root; re-run `uasim {pred}`"
            ))
        })?
    };
    Ok((
        PredecessorRef {
            stage: pred.to_string(),
            digest,
        },
        root,
    ))
}

/// Flattens a JSON value to dotted-path keys. Arrays index as `key.0`.
pub fn flatten_json(value: &serde_json::Value) -> BTreeMap<String, serde_json::Value> {
    fn walk(prefix: &str, value: &serde_json::Value, out: &mut BTreeMap<String, serde_json::Value>) {
        match value {
            serde_json::Value::Object(map) => {
                for (k, v) in map {
                    let key = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    walk(&key, v, out);
                }
            }
            serde_json::Value::Array(items) => {
                for (i, v) in items.iter().enumerate() {
                    walk(&format!("{prefix}.{i}"), v, out);
                }
            }
            leaf => {
                out.insert(prefix.to_string(), leaf.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", value, &mut out);
    out
}

/// Dotted keys where `actual` differs from `default` (including keys
/// present on only one side).
pub fn non_default_keys(
    actual: &serde_json::Value,
    default: &serde_json::Value,
) -> Vec<String> {
    let actual = flatten_json(actual);
    let default = flatten_json(default);
    let mut keys: Vec<String> = Vec::new();
    for (key, value) in &actual {
        if default.get(key) != Some(value) {
            keys.push(key.clone());
        }
    }
    for key in default.keys() {
        if !actual.contains_key(key) {
            keys.push(key.clone());
        }
    }
    keys.sort();
    keys.dedup();
    keys
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn write_fixture_chain(out_root: &Path) -> (String, String) {
        std::fs::create_dir_all(stage_dir(out_root, "ingest")).unwrap();
        let train = stage_dir(out_root, "ingest").join("train.jsonl");
        std::fs::write(&train, b"{\"row\":1}\n").unwrap();
        let mut outputs = BTreeMap::new();
        outputs.insert("train.jsonl".to_string(), hash_file(&train).unwrap());
        let ingest = StageManifest {
            stage: "ingest".into(),
            predecessor: None,
            chain_root: None,
            params: json!({"seed": 17}),
            non_default_params: vec![],
            summary: json!({"rows": 1}),
            outputs,
        };
        let ingest_digest = write_stage_manifest(out_root, &ingest).unwrap();

        let (link, root) = chain_link(out_root, "distill").unwrap();
        assert_eq!(link.digest, ingest_digest);
        assert_eq!(root, ingest_digest);
        let distill = StageManifest {
            stage: "distill".into(),
            predecessor: Some(link),
            chain_root: Some(root.clone()),
            params: json!({"batch_cap": 10}),
            non_default_params: vec![],
            summary: json!({"users": 0}),
            outputs: BTreeMap::new(),
        };
        let distill_digest = write_stage_manifest(out_root, &distill).unwrap();
        (ingest_digest, distill_digest)
    }

    #[test]
    fn chain_round_trips_and_verifies() {
        let dir = tempfile::tempdir().unwrap();
        let (ingest_digest, _) = write_fixture_chain(dir.path());
        let chain = verify_chain(dir.path(), "distill").unwrap();
        assert_eq!(chain.root, ingest_digest);
        assert_eq!(chain.manifests.len(), 2);
        assert_eq!(chain.manifests["distill"].predecessor.as_ref().unwrap().stage, "ingest");
    }

    #[test]
    fn missing_stage_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let err = verify_chain(dir.path(), "cluster").unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("stage cluster"), "{err}");
        assert!(err.to_string().contains("`uasim cluster`"), "{err}");
    }

    #[test]
    fn tampered_artifact_fails_the_chain() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture_chain(dir.path());
        let train = stage_dir(dir.path(), "ingest").join("train.jsonl");
        std::fs::write(&train, b"{\"row\":2}\n").unwrap();
        let err = verify_chain(dir.path(), "distill").unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("train.jsonl"), "{err}");
    }

    #[test]
    fn rewritten_predecessor_breaks_the_link() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture_chain(dir.path());
        // Re-run ingest with different params: new manifest digest.
        let mut ingest = load_manifest(dir.path(), "ingest").unwrap();
        ingest.params = json!({"seed": 18});
        ingest.outputs.clear();
        write_stage_manifest(dir.path(), &ingest).unwrap();
        let err = verify_chain(dir.path(), "distill").unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("different ingest run"), "{err}");
    }

    #[test]
    fn stage_order_is_linear() {
        assert_eq!(predecessor_of("ingest"), None);
        assert_eq!(predecessor_of("distill"), Some("ingest"));
        assert_eq!(predecessor_of("report"), Some("evaluate"));
        assert_eq!(predecessor_of("nonsense"), None);
        for pair in STAGES.windows(2) {
            assert_eq!(predecessor_of(pair[1]), Some(pair[0]));
        }
    }

    #[test]
    fn non_default_keys_diffs_dotted_paths() {
        let actual = json!({"clustering": {"k": 2, "seed": 17}, "split": {"train_fraction": 0.6}});
        let default = json!({"clustering": {"k": 4, "seed": 17}, "split": {"train_fraction": 0.6}});
        assert_eq!(non_default_keys(&actual, &default), vec!["clustering.k".to_string()]);
        assert!(non_default_keys(&actual, &actual).is_empty());
    }
}
