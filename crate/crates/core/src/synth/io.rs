use std::fmt::Write as _;
use std::io::{BufRead, Write};

use super::{Corpus, Dataset, Example, ExampleLabel, SynthError, TaskKind};

fn ids(line: usize, field: &str) -> Result<Vec<u32>, SynthError> {
    field
        .split_whitespace()
        .map(|t| {
            t.parse::<u32>().map_err(|_| SynthError::Parse {
                line,
                message: format!("bad token {:?}", t),
            })
        })
        .collect()
}

fn join(xs: &[u32]) -> String {
    let mut s = String::new();
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{}", x).expect("write to string");
    }
    s
}

/// One sentence per line, space-separated ids.
pub fn write_corpus<W: Write>(mut w: W, corpus: &Corpus) -> Result<(), SynthError> {
    for s in &corpus.sentences {
        writeln!(w, "{}", join(s))?;
    }
    Ok(())
}

pub fn read_corpus<R: BufRead>(r: R, language: &str) -> Result<Corpus, SynthError> {
    let mut sentences = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        sentences.push(ids(n + 1, &line)?);
    }
    Ok(Corpus {
        language: language.to_string(),
        sentences,
    })
}

/// `ids<TAB>labels`: one label per token for tagging, a single label otherwise.
pub fn write_dataset<W: Write>(mut w: W, data: &Dataset) -> Result<(), SynthError> {
    for e in &data.examples {
        let label = match &e.label {
            ExampleLabel::Tokens(l) => join(l),
            ExampleLabel::Sequence(l) => l.to_string(),
        };
        writeln!(w, "{}\t{}", join(&e.tokens), label)?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(
    r: R,
    language: &str,
    task: TaskKind,
) -> Result<Dataset, SynthError> {
    let mut examples = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (toks, labels) = line.split_once('\t').ok_or_else(|| SynthError::Parse {
            line: n + 1,
            message: "missing label column".into(),
        })?;
        let tokens = ids(n + 1, toks)?;
        let labels = ids(n + 1, labels)?;
        let bound = task.classes() as u32;
        if let Some(bad) = labels.iter().find(|&&l| l >= bound) {
            return Err(SynthError::Parse {
                line: n + 1,
                message: format!("unknown label {}", bad),
            });
        }
        let label = match task {
            TaskKind::CategoryTagging if labels.len() == tokens.len() => {
                ExampleLabel::Tokens(labels)
            }
            TaskKind::AgreementDetection if labels.len() == 1 => ExampleLabel::Sequence(labels[0]),
            _ => {
                return Err(SynthError::Parse {
                    line: n + 1,
                    message: format!("{} labels for {} tokens", labels.len(), tokens.len()),
                })
            }
        };
        examples.push(Example { tokens, label });
    }
    Ok(Dataset {
        language: language.to_string(),
        task,
        examples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_corpus, generate_task_data, SuiteConfig};

    #[test]
    fn round_trips() {
        let l = &SuiteConfig::default().build(512).unwrap()[0];
        let c = generate_corpus(l, 20).unwrap();
        let mut buf = Vec::new();
        write_corpus(&mut buf, &c).unwrap();
        assert_eq!(read_corpus(&buf[..], &c.language).unwrap(), c);
        for task in [TaskKind::CategoryTagging, TaskKind::AgreementDetection] {
            let d = generate_task_data(l, task, 30).unwrap();
            let mut buf = Vec::new();
            write_dataset(&mut buf, &d).unwrap();
            assert_eq!(read_dataset(&buf[..], &d.language, task).unwrap(), d);
        }
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(read_dataset(&b"3 4 5\t0 1\n"[..], "x", TaskKind::CategoryTagging).is_err());
        assert!(read_dataset(&b"3 4 5\t7\n"[..], "x", TaskKind::AgreementDetection).is_err());
        assert!(read_dataset(&b"3 4 5\n"[..], "x", TaskKind::AgreementDetection).is_err());
        assert!(read_corpus(&b"3 x\n"[..], "x").is_err());
    }
}
