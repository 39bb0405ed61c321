//! FewRel JSON layout: `{relation-id: [{"tokens": [...], "h": [name, kb-id, [[idx...], ...]], "t": ...}]}`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{DataError, Dataset, Sample, Span};

#[derive(Debug, Deserialize, Serialize)]
struct RawInstance {
    tokens: Vec<String>,
    h: (String, Value, Vec<Vec<usize>>),
    t: (String, Value, Vec<Vec<usize>>),
}

/// Span covering the first mention: `min(first) .. max(first) + 1`.
fn first_mention(mentions: &[Vec<usize>]) -> Result<Span, String> {
    let first = mentions
        .first()
        .filter(|m| !m.is_empty())
        .ok_or("entity has no mention indices")?;
    let start = *first.iter().min().expect("nonempty");
    let end = *first.iter().max().expect("nonempty") + 1;
    Ok(Span::new(start, end))
}

pub fn load_fewrel(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_fewrel(&text, path)
}

/// Parses FewRel JSON text; `origin` is used in diagnostics.
pub fn parse_fewrel(text: &str, origin: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let origin = origin.as_ref();
    let raw: BTreeMap<String, Vec<RawInstance>> = serde_json::from_str(text).map_err(|source| DataError::Json {
        path: origin.to_path_buf(),
        source,
    })?;
    let mut relations = BTreeMap::new();
    for (relation, instances) in raw {
        let mut samples = Vec::with_capacity(instances.len());
        for (index, inst) in instances.into_iter().enumerate() {
            let record_err = |reason: String| DataError::Record {
                path: origin.to_path_buf(),
                relation: relation.clone(),
                index,
                reason,
            };
            let head = first_mention(&inst.h.2).map_err(|r| record_err(format!("head: {r}")))?;
            let tail = first_mention(&inst.t.2).map_err(|r| record_err(format!("tail: {r}")))?;
            let sample =
                Sample::new(inst.tokens, head, tail, relation.clone()).map_err(|e| record_err(e.to_string()))?;
            samples.push(sample);
        }
        if samples.is_empty() {
            return Err(DataError::InvalidDataset(format!(
                "{}: relation {relation} has no instances",
                origin.display()
            )));
        }
        relations.insert(relation, samples);
    }
    Dataset::new(relations)
}

/// Serializes a dataset in the FewRel layout (entity names are the joined span tokens).
pub fn to_fewrel_json(dataset: &Dataset) -> String {
    let mut out = BTreeMap::new();
    for (relation, samples) in dataset.relations() {
        let instances: Vec<RawInstance> = samples
            .iter()
            .map(|s| {
                let entity = |span: Span| {
                    (
                        s.tokens[span.start..span.end].join(" "),
                        Value::String(String::new()),
                        vec![(span.start..span.end).collect::<Vec<_>>()],
                    )
                };
                RawInstance {
                    tokens: s.tokens.clone(),
                    h: entity(s.head),
                    t: entity(s.tail),
                }
            })
            .collect();
        out.insert(relation.clone(), instances);
    }
    serde_json::to_string(&out).expect("dataset serializes")
}

pub fn write_fewrel(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, to_fewrel_json(dataset)).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_relation_single_instance() {
        let text = r#"{"P17": [{"tokens": ["Paris", "is", "in", "France"],
            "h": ["paris", "Q90", [[0]]], "t": ["france", "Q142", [[3]]]}]}"#;
        let ds = parse_fewrel(text, "mem.json").unwrap();
        assert_eq!(ds.num_relations(), 1);
        assert_eq!(ds.num_samples(), 1);
        let s = &ds.get("P17").unwrap()[0];
        assert_eq!(s.head, Span::new(0, 1));
        assert_eq!(s.tail, Span::new(3, 4));
    }

    #[test]
    fn multi_token_span_uses_first_mention() {
        let text = r#"{"P1": [{"tokens": ["a", "b", "c", "d", "e"],
            "h": ["b c", null, [[2, 1], [4]]], "t": ["e", "Q1", [[4]]]}]}"#;
        let ds = parse_fewrel(text, "mem.json").unwrap();
        assert_eq!(ds.get("P1").unwrap()[0].head, Span::new(1, 3));
    }

    #[test]
    fn head_beyond_tokens_is_a_record_error() {
        let text = r#"{"P9": [{"tokens": ["a", "b"], "h": ["x", "Q", [[5]]], "t": ["a", "Q", [[0]]]}]}"#;
        let err = parse_fewrel(text, "bad.json").unwrap_err();
        match &err {
            DataError::Record { relation, index, .. } => {
                assert_eq!(relation, "P9");
                assert_eq!(*index, 0);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("bad.json"));
    }

    #[test]
    fn malformed_json_reports_position() {
        let err = parse_fewrel("{\"P1\": [\n{\"tokens\": }", "broken.json").unwrap_err();
        assert!(matches!(err, DataError::Json { .. }));
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
