use std::fs;
use std::path::{Path, PathBuf};

use super::{LanguageArtifact, TaskArtifact, TrainingManifest, TransferError};
use crate::model::{HeadSpec, ModelSpec};
use crate::param::{
    deserialize_checkpoint, deserialize_diff, serialize_checkpoint, serialize_diff, Fingerprint,
    Mask, Metadata, ParamError, ParameterSnapshot, SparseDiff,
};

/// Artifact layout of one experiment directory.
///
/// ```text
/// base.ckpt
/// langs/<tag>.sft   langs/<tag>.mask
/// tasks/<tag>.sft   tasks/<tag>.mask   tasks/<tag>.head
/// composed/<name>.ckpt   composed/<name>.head
/// manifests/<name>.json
/// metrics/<name>.tsv
/// data/...
/// ```
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunDir {
    root: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TransferError + '_ {
    move |source| TransferError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads a whole file, mapping errors to the path.
pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, TransferError> {
    fs::read(path).map_err(io_err(path))
}

/// Writes via a temporary sibling and a rename so readers never see a partial file.
pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), TransferError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn meta(pairs: &[(&str, String)]) -> Metadata {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect()
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable value")
}

fn field<'a>(m: &'a Metadata, key: &str, path: &Path) -> Result<&'a str, TransferError> {
    m.get(key).map(String::as_str).ok_or_else(|| {
        TransferError::Config(format!(
            "{}: missing metadata field {:?}",
            path.display(),
            key
        ))
    })
}

fn parse<T: serde::de::DeserializeOwned>(s: &str, path: &Path) -> Result<T, TransferError> {
    serde_json::from_str(s).map_err(|e| TransferError::Config(format!("{}: {}", path.display(), e)))
}

fn check_fingerprint(found: Fingerprint, expected: Fingerprint) -> Result<(), TransferError> {
    if found != expected {
        return Err(ParamError::FingerprintMismatch {
            expected: expected.to_hex(),
            found: found.to_hex(),
        }
        .into());
    }
    Ok(())
}

/// Loads a sparse diff and checks it belongs to `expected`.
pub fn load_diff(
    path: &Path,
    expected: Fingerprint,
) -> Result<(SparseDiff, Metadata), TransferError> {
    let c = deserialize_diff(&read_file(path)?)?;
    check_fingerprint(c.diff.fingerprint(), expected)?;
    Ok((c.diff, c.metadata))
}

fn load_mask(
    path: &Path,
    expected: Fingerprint,
    fallback: &SparseDiff,
) -> Result<Mask, TransferError> {
    if path.exists() {
        Ok(load_diff(path, expected)?.0.support())
    } else {
        Ok(fallback.support())
    }
}

fn save_mask(path: &Path, mask: &Mask) -> Result<(), TransferError> {
    write_file(
        path,
        &serialize_diff(&mask.to_unit_diff(), &meta(&[("kind", "mask".into())])),
    )
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn base_checkpoint(&self) -> PathBuf {
        self.root.join("base.ckpt")
    }

    pub fn lang_sft(&self, name: &str) -> PathBuf {
        self.root.join("langs").join(format!("{name}.sft"))
    }

    pub fn task_sft(&self, name: &str) -> PathBuf {
        self.root.join("tasks").join(format!("{name}.sft"))
    }

    pub fn composed(&self, name: &str) -> PathBuf {
        self.root.join("composed").join(format!("{name}.ckpt"))
    }

    pub fn manifest(&self, name: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{name}.json"))
    }

    pub fn metrics(&self, name: &str) -> PathBuf {
        self.root.join("metrics").join(format!("{name}.tsv"))
    }

    pub fn data(&self, file: &str) -> PathBuf {
        self.root.join("data").join(file)
    }

    pub fn write(&self, path: &Path, bytes: &[u8]) -> Result<(), TransferError> {
        write_file(path, bytes)
    }

    pub fn save_base(
        &self,
        spec: &ModelSpec,
        params: &ParameterSnapshot,
    ) -> Result<PathBuf, TransferError> {
        let path = self.base_checkpoint();
        let m = meta(&[("kind", "base".into()), ("model_spec", json(spec))]);
        write_file(&path, &serialize_checkpoint(params, &m))?;
        Ok(path)
    }

    pub fn load_base(path: &Path) -> Result<(ModelSpec, ParameterSnapshot), TransferError> {
        let c = deserialize_checkpoint(&read_file(path)?)?;
        let spec: ModelSpec = parse(field(&c.metadata, "model_spec", path)?, path)?;
        Ok((spec, c.snapshot))
    }

    /// Writes `langs/<name>.sft` and its mask.
    pub fn save_language(
        &self,
        name: &str,
        art: &LanguageArtifact,
    ) -> Result<PathBuf, TransferError> {
        let path = self.lang_sft(name);
        let m = meta(&[
            ("kind", "language".into()),
            ("language", art.tag.clone()),
            ("training", json(&art.manifest)),
        ]);
        write_file(&path, &serialize_diff(&art.diff, &m))?;
        save_mask(&path.with_extension("mask"), &art.mask)?;
        Ok(path)
    }

    pub fn load_language(
        path: &Path,
        expected: Fingerprint,
    ) -> Result<LanguageArtifact, TransferError> {
        let (diff, m) = load_diff(path, expected)?;
        if field(&m, "kind", path)? != "language" {
            return Err(TransferError::Config(format!(
                "{} is not a language SFT",
                path.display()
            )));
        }
        let manifest: TrainingManifest = parse(field(&m, "training", path)?, path)?;
        let mask = load_mask(&path.with_extension("mask"), expected, &diff)?;
        Ok(LanguageArtifact {
            tag: field(&m, "language", path)?.to_string(),
            diff,
            mask,
            manifest,
        })
    }

    /// Writes `tasks/<name>.sft`, its mask and its head.
    pub fn save_task(&self, name: &str, art: &TaskArtifact) -> Result<PathBuf, TransferError> {
        let path = self.task_sft(name);
        let m = meta(&[
            ("kind", "task".into()),
            ("task", art.tag.clone()),
            ("sources", art.sources.join(",")),
            ("head_spec", json(&art.head_spec)),
            ("training", json(&art.manifest)),
        ]);
        write_file(&path, &serialize_diff(&art.diff, &m))?;
        save_mask(&path.with_extension("mask"), &art.mask)?;
        let hm = meta(&[("kind", "head".into()), ("head_spec", json(&art.head_spec))]);
        write_file(
            &path.with_extension("head"),
            &serialize_checkpoint(&art.head, &hm),
        )?;
        Ok(path)
    }

    /// Loads `tasks/<tag>.sft` and the sibling `.head`.
    pub fn load_task(path: &Path, expected: Fingerprint) -> Result<TaskArtifact, TransferError> {
        let (diff, m) = load_diff(path, expected)?;
        if field(&m, "kind", path)? != "task" {
            return Err(TransferError::Config(format!(
                "{} is not a task SFT",
                path.display()
            )));
        }
        let head_spec: HeadSpec = parse(field(&m, "head_spec", path)?, path)?;
        let head = load_head(&path.with_extension("head"), &head_spec)?;
        let sources = field(&m, "sources", path)?;
        Ok(TaskArtifact {
            tag: field(&m, "task", path)?.to_string(),
            sources: if sources.is_empty() {
                Vec::new()
            } else {
                sources.split(',').map(str::to_string).collect()
            },
            mask: load_mask(&path.with_extension("mask"), expected, &diff)?,
            diff,
            head_spec,
            head,
            manifest: parse(field(&m, "training", path)?, path)?,
        })
    }

    /// Writes a composed body as `composed/<name>.ckpt` with the task head beside it.
    pub fn save_composed(
        &self,
        name: &str,
        params: &ParameterSnapshot,
        task: &TaskArtifact,
        parts: &[String],
    ) -> Result<PathBuf, TransferError> {
        let path = self.composed(name);
        let m = meta(&[
            ("kind", "composed".into()),
            ("task", task.tag.clone()),
            ("parts", parts.join(",")),
            ("head_spec", json(&task.head_spec)),
        ]);
        write_file(&path, &serialize_checkpoint(params, &m))?;
        let hm = meta(&[
            ("kind", "head".into()),
            ("head_spec", json(&task.head_spec)),
        ]);
        write_file(
            &path.with_extension("head"),
            &serialize_checkpoint(&task.head, &hm),
        )?;
        Ok(path)
    }

    /// Loads a composed body and its head, checking the body against `expected`.
    pub fn load_composed(
        path: &Path,
        expected: Fingerprint,
    ) -> Result<(ParameterSnapshot, HeadSpec, ParameterSnapshot), TransferError> {
        let c = deserialize_checkpoint(&read_file(path)?)?;
        check_fingerprint(c.snapshot.fingerprint(), expected)?;
        if field(&c.metadata, "kind", path)? != "composed" {
            return Err(TransferError::Config(format!(
                "{} is not a composed checkpoint",
                path.display()
            )));
        }
        let head_spec: HeadSpec = parse(field(&c.metadata, "head_spec", path)?, path)?;
        let head = load_head(&path.with_extension("head"), &head_spec)?;
        Ok((c.snapshot, head_spec, head))
    }
}

fn load_head(path: &Path, spec: &HeadSpec) -> Result<ParameterSnapshot, TransferError> {
    let head = deserialize_checkpoint(&read_file(path)?)?;
    let stored: HeadSpec = parse(field(&head.metadata, "head_spec", path)?, path)?;
    if stored != *spec {
        return Err(TransferError::Config(format!(
            "{}: head does not match its task",
            path.display()
        )));
    }
    Ok(head.snapshot)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::MaskStrategy;
    use crate::model::{init_head, TransformerModel};
    use crate::transfer::zero_shot_apply;

    fn manifest() -> TrainingManifest {
        TrainingManifest {
            strategy: MaskStrategy::LotteryTicket,
            k: 2,
            lambda: 0.1,
            seed: 1,
            phase1_steps: 3,
            phase2_steps: 4,
            final_loss: Some(1.5),
            dev_loss: None,
        }
    }

    #[test]
    fn artifacts_round_trip_and_check_fingerprints() {
        let dir = std::env::temp_dir().join(format!("rundir-test-{}", std::process::id()));
        let run = RunDir::new(&dir);
        let spec = ModelSpec {
            vocab_size: 16,
            hidden_size: 8,
            layers: 1,
            heads: 2,
            ffn_size: 8,
            max_seq_len: 8,
            tie_output_embedding: false,
        };
        let model = TransformerModel::new(spec.clone()).unwrap();
        let base = model.init(0);
        let fp = base.fingerprint();
        run.save_base(&spec, &base).unwrap();
        let (s2, b2) = RunDir::load_base(&run.base_checkpoint()).unwrap();
        assert_eq!(s2, spec);
        assert!(b2.bitwise_eq(&base));

        let diff =
            SparseDiff::from_entries(base.layout().clone(), vec![3, 40], vec![0.5, -0.25]).unwrap();
        let lang = LanguageArtifact {
            tag: "src0".into(),
            mask: diff.support(),
            diff: diff.clone(),
            manifest: manifest(),
        };
        let p = run.save_language("src0", &lang).unwrap();
        let back = RunDir::load_language(&p, fp).unwrap();
        assert!(back.diff.bitwise_eq(&diff));
        assert_eq!(back.mask, lang.mask);
        assert_eq!(back.manifest, lang.manifest);

        let head_spec = HeadSpec::tokens(4);
        let task = TaskArtifact {
            tag: "tagging-src0".into(),
            sources: vec!["src0".into()],
            diff: diff.clone(),
            head_spec,
            head: init_head(&head_spec, 8, 1).unwrap(),
            mask: diff.support(),
            manifest: manifest(),
        };
        let p = run.save_task("tagging-src0", &task).unwrap();
        let back = RunDir::load_task(&p, fp).unwrap();
        assert!(back.head.bitwise_eq(&task.head));
        assert_eq!(back.sources, task.sources);

        let composed = zero_shot_apply(&base, &task, Some(&lang)).unwrap();
        let p = run
            .save_composed(
                "c",
                &composed,
                &task,
                &["tagging-src0".into(), "src0".into()],
            )
            .unwrap();
        let (body, hs, head) = RunDir::load_composed(&p, fp).unwrap();
        assert!(body.bitwise_eq(&composed));
        assert_eq!(hs, head_spec);
        assert!(head.bitwise_eq(&task.head));

        let other = TransformerModel::new(ModelSpec {
            ffn_size: 12,
            ..spec
        })
        .unwrap()
        .init(0);
        let err = RunDir::load_language(&run.lang_sft("src0"), other.fingerprint()).unwrap_err();
        assert!(err.is_fingerprint_mismatch());
        fs::remove_dir_all(&dir).unwrap();
    }
}
