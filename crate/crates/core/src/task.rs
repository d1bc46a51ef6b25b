use std::fmt;

use serde::{Deserialize, Serialize};

/// Opaque image reference: a local path, an http(s) URL, or a data URL.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageRef(pub String);

impl ImageRef {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_remote(&self) -> bool {
        let s = self.0.as_str();
        s.starts_with("http://") || s.starts_with("https://") || s.starts_with("data:")
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One question instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInput {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageRef>,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
}

impl TaskInput {
    pub fn new(id: impl Into<String>, question: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            image: None,
            question: question.into(),
            options: None,
        }
    }

    pub fn with_image(mut self, image: impl Into<String>) -> Self {
        self.image = Some(ImageRef::new(image));
        self
    }

    pub fn with_options<S: Into<String>>(mut self, options: impl IntoIterator<Item = S>) -> Self {
        self.options = Some(options.into_iter().map(Into::into).collect());
        self
    }

    /// `(label, value)` pairs, labelled A, B, C, ...
    pub fn labelled_options(&self) -> Vec<(String, &str)> {
        self.options
            .iter()
            .flatten()
            .enumerate()
            .map(|(i, v)| (option_label(i), v.as_str()))
            .collect()
    }

    /// Question text as it is shown to the model, options appended.
    pub fn question_block(&self) -> String {
        let opts = self.labelled_options();
        if opts.is_empty() {
            return self.question.clone();
        }
        let mut out = self.question.clone();
        out.push_str("\nOptions:");
        for (label, value) in opts {
            out.push_str(&format!("\n{label}. {value}"));
        }
        out
    }
}

pub fn option_label(index: usize) -> String {
    let mut n = index;
    let mut label = Vec::new();
    loop {
        label.push(b'A' + (n % 26) as u8);
        if n < 26 {
            break;
        }
        n = n / 26 - 1;
    }
    label.reverse();
    String::from_utf8(label).expect("ascii")
}
