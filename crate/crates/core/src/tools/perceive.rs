use std::sync::Arc;

use super::{Tool, ToolContext, ToolOutput, EMPTY_QUERY};
use crate::gateway::{ChatModel, DecodingConfig, Message};
use crate::prompts::PromptAssets;
use crate::protocol::ToolKind;
use crate::task::ImageRef;
use crate::util::render_template;

pub const NO_IMAGE: &str = "perceive requires an image";

/// Low-temperature, short decoding for visual sub-questions.
pub fn perception_decoding(base: &DecodingConfig) -> DecodingConfig {
    DecodingConfig {
        temperature: 0.1,
        top_p: 0.9,
        max_new_tokens: 256,
        stop_sequences: Vec::new(),
        ..base.clone()
    }
}

/// Ask the backbone a focused question about the task image. Exactly one
/// model call, nothing else.
pub fn perceive(
    image: Option<&ImageRef>,
    subquestion: &str,
    model: &dyn ChatModel,
    prompts: &PromptAssets,
    decoding: &DecodingConfig,
) -> ToolOutput {
    let subquestion = subquestion.trim();
    if subquestion.is_empty() {
        return ToolOutput::error(EMPTY_QUERY);
    }
    let Some(image) = image else {
        return ToolOutput::error(NO_IMAGE);
    };
    let template = match prompts.get("perceive") {
        Ok(t) => t,
        Err(e) => return ToolOutput::error(e.to_string()),
    };
    let text = render_template(template, &[("question", subquestion)]);
    match model.complete(&[Message::user_with_image(Some(image), text)], decoding) {
        Ok(c) if !c.text.trim().is_empty() => ToolOutput::ok(c.text.trim()),
        Ok(_) => ToolOutput::error("perceive returned an empty answer"),
        Err(e) => ToolOutput::error(format!("perceive failed: {e}")),
    }
}

pub struct PerceiveTool {
    prompts: Arc<PromptAssets>,
    decoding: DecodingConfig,
}

impl PerceiveTool {
    pub fn new(prompts: Arc<PromptAssets>, base: &DecodingConfig) -> Self {
        Self {
            prompts,
            decoding: perception_decoding(base),
        }
    }
}

impl Tool for PerceiveTool {
    fn kind(&self) -> ToolKind {
        ToolKind::Perceive
    }

    fn invoke(&self, payload: &str, ctx: &ToolContext<'_>) -> ToolOutput {
        perceive(
            ctx.task.image.as_ref(),
            payload,
            ctx.model,
            &self.prompts,
            &self.decoding,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Completion, GatewayError, Part, ScriptedModel};
    use std::sync::Mutex;

    struct Recorder {
        seen: Mutex<Vec<(Vec<Message>, DecodingConfig)>>,
    }

    impl ChatModel for Recorder {
        fn complete(&self, m: &[Message], c: &DecodingConfig) -> Result<Completion, GatewayError> {
            self.seen.lock().unwrap().push((m.to_vec(), c.clone()));
            ScriptedModel::from_replies(["There are 3 dogs."]).unwrap().complete(m, c)
        }
    }

    #[test]
    fn answers_with_the_task_image() {
        let rec = Recorder { seen: Mutex::new(vec![]) };
        let img = ImageRef::new("/data/dogs.jpg");
        let out = perceive(
            Some(&img),
            "How many dogs are there?",
            &rec,
            &PromptAssets::builtin(),
            &perception_decoding(&DecodingConfig::default()),
        );
        assert_eq!(out, ToolOutput::ok("There are 3 dogs."));
        let seen = rec.seen.lock().unwrap();
        assert_eq!(seen.len(), 1);
        let (msgs, cfg) = &seen[0];
        assert_eq!(msgs[0].parts[0], Part::Image(img.clone()));
        assert!(msgs[0].text().contains("How many dogs are there?"));
        assert_eq!((cfg.temperature, cfg.top_p, cfg.max_new_tokens), (0.1, 0.9, 256));
    }

    #[test]
    fn rejects_before_calling_the_model() {
        let rec = Recorder { seen: Mutex::new(vec![]) };
        let p = PromptAssets::builtin();
        let d = DecodingConfig::default();
        assert_eq!(perceive(None, "What color?", &rec, &p, &d), ToolOutput::error(NO_IMAGE));
        let img = ImageRef::new("x.png");
        assert_eq!(perceive(Some(&img), "  ", &rec, &p, &d), ToolOutput::error(EMPTY_QUERY));
        assert!(rec.seen.lock().unwrap().is_empty());
    }

    #[test]
    fn gateway_failure_is_a_tool_error() {
        let m = ScriptedModel::from_replies(["a"]).unwrap();
        let img = ImageRef::new("x.png");
        let p = PromptAssets::builtin();
        let d = DecodingConfig::default();
        perceive(Some(&img), "q", &m, &p, &d);
        let out = perceive(Some(&img), "q", &m, &p, &d);
        assert!(!out.ok);
        assert!(out.content.contains("exhausted"));
    }
}
