use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::exact_match;
use super::EvalError;
use crate::synthesizer::FinalAnswer;
use crate::task::{ImageRef, TaskInput};

/// One line of a JSONL benchmark file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageRef>,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    pub gold: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
}

impl Example {
    pub fn task(&self) -> TaskInput {
        TaskInput {
            id: self.id.clone(),
            image: self.image.clone(),
            question: self.question.clone(),
            options: self.options.clone(),
        }
    }

    /// Label of the gold option, for option tasks.
    pub fn gold_label(&self) -> Option<String> {
        let task = self.task();
        let labelled = task.labelled_options();
        if let Some((l, _)) = labelled.iter().find(|(l, _)| *l == self.gold.trim()) {
            return Some(l.clone());
        }
        labelled
            .iter()
            .find(|(_, v)| exact_match(v, &self.gold))
            .map(|(l, _)| l.clone())
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("id is empty".into());
        }
        if self.gold.trim().is_empty() {
            return Err(format!("example '{}': gold is empty", self.id));
        }
        if self.options.is_some() && self.gold_label().is_none() {
            return Err(format!("example '{}': gold matches neither an option nor its label", self.id));
        }
        Ok(())
    }

    /// Option tasks compare labels; free-form tasks use exact match.
    pub fn score(&self, answer: &FinalAnswer) -> bool {
        match (self.gold_label(), &answer.chosen_option) {
            (Some(gold), Some(chosen)) => gold == *chosen,
            _ => exact_match(&answer.text, &self.gold),
        }
    }
}

pub fn load_dataset(path: &Path) -> Result<Vec<Example>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| EvalError::Dataset {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let ex: Example = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        ex.validate().map_err(bad)?;
        if !seen.insert(ex.id.clone()) {
            return Err(bad(format!("duplicate id '{}'", ex.id)));
        }
        out.push(ex);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn answer(text: &str, opt: Option<&str>) -> FinalAnswer {
        FinalAnswer {
            text: text.into(),
            chosen_option: opt.map(Into::into),
            trace_digest: String::new(),
            warning: None,
        }
    }

    fn ex(gold: &str, options: Option<Vec<&str>>) -> Example {
        Example {
            id: "e".into(),
            image: None,
            question: "q".into(),
            options: options.map(|o| o.into_iter().map(Into::into).collect()),
            gold: gold.into(),
            split: None,
            tags: vec![],
        }
    }

    #[test]
    fn scoring() {
        assert!(ex("Paris", None).score(&answer("paris.", None)));
        let mc = ex("green", Some(vec!["red", "green"]));
        assert_eq!(mc.gold_label().as_deref(), Some("B"));
        assert!(mc.score(&answer("B", Some("B"))));
        assert!(!mc.score(&answer("A", Some("A"))));
        assert!(mc.score(&answer("Green", None)));
        assert!(ex("B", Some(vec!["red", "green"])).score(&answer("B", Some("B"))));
    }

    #[test]
    fn validation() {
        assert!(ex(" ", None).validate().is_err());
        assert!(ex("blue", Some(vec!["red", "green"])).validate().is_err());
        assert!(ex("A", Some(vec!["red", "green"])).validate().is_ok());
    }

    #[test]
    fn loading_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        std::fs::write(&p, "{\"id\":\"a\",\"question\":\"q\",\"gold\":\"x\"}\n\n{\"id\":\"b\",\"question\":\"q\"}\n").unwrap();
        match load_dataset(&p) {
            Err(EvalError::Dataset { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "{\"id\":\"a\",\"question\":\"q\",\"gold\":\"x\",\"tags\":[\"t\"]}\n").unwrap();
        assert_eq!(load_dataset(&p).unwrap()[0].tags, vec!["t"]);
    }
}
