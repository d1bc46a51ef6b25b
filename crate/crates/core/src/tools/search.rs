use std::sync::Arc;

use super::{Tool, ToolContext, ToolOutput, EMPTY_QUERY};
use crate::gateway::{ChatModel, DecodingConfig, GatewayError, Message};
use crate::prompts::PromptAssets;
use crate::protocol::ToolKind;
use crate::retrieval::{Bm25Index, CrossModalIndex, Passage, RetrievalConfig};
use crate::util::render_template;

pub const NO_DOCUMENTS: &str = "no relevant documents found";

/// Payload that routes a search to the cross-modal path.
const IMAGE_QUERY: &str = "image";

fn format_passages<'a>(docs: impl IntoIterator<Item = &'a Passage>) -> String {
    docs.into_iter()
        .enumerate()
        .map(|(i, p)| format!("Passage {}: \n{}", i + 1, p.text))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Rewrite retrieved passages into a snippet that reads as part of the
/// reasoning chain. No documents means no model call.
pub fn refine(
    question: &str,
    prior_reasoning: &str,
    query: &str,
    docs: &[&Passage],
    model: &dyn ChatModel,
    prompts: &PromptAssets,
    decoding: &DecodingConfig,
) -> Result<String, GatewayError> {
    if docs.is_empty() {
        return Ok(NO_DOCUMENTS.to_string());
    }
    let template = prompts
        .get("refiner")
        .map_err(|e| GatewayError::InvalidRequest(e.to_string()))?;
    let prompt = render_template(
        template,
        &[
            ("question", question),
            ("previous_reasoning", prior_reasoning.trim()),
            ("calling", query),
            ("raw_result", &format_passages(docs.iter().copied())),
        ],
    );
    let reply = model.complete(&[Message::user_text(prompt)], decoding)?;
    Ok(reply.text.trim().to_string())
}

pub struct SearchTool {
    text_index: Option<Arc<Bm25Index>>,
    image_index: Option<Arc<CrossModalIndex>>,
    config: RetrievalConfig,
    prompts: Arc<PromptAssets>,
    decoding: DecodingConfig,
}

impl SearchTool {
    pub fn new(
        text_index: Option<Arc<Bm25Index>>,
        image_index: Option<Arc<CrossModalIndex>>,
        config: RetrievalConfig,
        prompts: Arc<PromptAssets>,
        decoding: &DecodingConfig,
    ) -> Self {
        Self {
            text_index,
            image_index,
            config,
            prompts,
            decoding: decoding.clone().with_stops(Vec::new()),
        }
    }

    fn image_path(&self, ctx: &ToolContext<'_>) -> ToolOutput {
        let Some(image) = ctx.task.image.as_ref() else {
            return ToolOutput::error("image search requires an image");
        };
        let Some(index) = &self.image_index else {
            return ToolOutput::error("image search unavailable: no embedding provider configured");
        };
        match index.image_search(image, self.config.top_k, self.config.tau) {
            Ok(hits) if hits.is_empty() => ToolOutput::ok(NO_DOCUMENTS),
            Ok(hits) => ToolOutput::ok(format_passages(hits.into_iter().map(|(p, _)| p))),
            Err(e) => ToolOutput::error(format!("image search failed: {e}")),
        }
    }

    fn text_path(&self, query: &str, ctx: &ToolContext<'_>) -> ToolOutput {
        let Some(index) = &self.text_index else {
            return ToolOutput::error("text search unavailable: no index loaded");
        };
        let hits: Vec<&Passage> = index
            .search(query, self.config.top_k)
            .into_iter()
            .map(|(p, _)| p)
            .collect();
        if hits.is_empty() {
            return ToolOutput::ok(NO_DOCUMENTS);
        }
        match refine(
            &ctx.task.question_block(),
            ctx.prior_reasoning,
            query,
            &hits,
            ctx.model,
            &self.prompts,
            &self.decoding,
        ) {
            Ok(text) if !text.is_empty() => ToolOutput::ok(text),
            Ok(_) => ToolOutput::error("refiner returned an empty snippet"),
            Err(e) => ToolOutput::error(format!("refiner failed: {e}")),
        }
    }
}

impl Tool for SearchTool {
    fn kind(&self) -> ToolKind {
        ToolKind::Search
    }

    fn invoke(&self, payload: &str, ctx: &ToolContext<'_>) -> ToolOutput {
        let query = payload.trim();
        if query.is_empty() {
            return ToolOutput::error(EMPTY_QUERY);
        }
        if query.eq_ignore_ascii_case(IMAGE_QUERY) {
            self.image_path(ctx)
        } else {
            self.text_path(query, ctx)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ScriptedModel;
    use crate::retrieval::{Bm25Params, PassageId, StaticEmbeddings};
    use crate::task::TaskInput;

    const QUAD: &str = "A simple (non-self-intersecting) quadrilateral is a parallelogram if and only if \
        two pairs of opposite sides are equal in length.";

    fn passage(id: u64, text: &str, emb: Option<Vec<f32>>) -> Passage {
        Passage {
            id: PassageId(id),
            source_doc: format!("d{id}"),
            token_span: (0, text.split_whitespace().count()),
            text: text.into(),
            embedding: emb,
        }
    }

    fn tool(model_images: bool) -> SearchTool {
        let text = Bm25Index::build(
            vec![passage(0, QUAD, None), passage(1, "Rome is the capital of Italy.", None)],
            2,
            Bm25Params::default(),
        );
        let image = model_images.then(|| {
            let stub = StaticEmbeddings::new().image("cat.jpg", vec![1.0, 0.0]);
            Arc::new(CrossModalIndex::new(
                vec![
                    passage(10, "A tabby cat.", Some(vec![0.99, 0.141])),
                    passage(11, "A truck.", Some(vec![0.0, 1.0])),
                ],
                Some(Arc::new(stub)),
            ))
        });
        SearchTool::new(
            Some(Arc::new(text)),
            image,
            RetrievalConfig::default(),
            Arc::new(PromptAssets::builtin()),
            &DecodingConfig::default(),
        )
    }

    #[test]
    fn text_query_is_refined() {
        let m = ScriptedModel::from_replies(["In a parallelogram, opposite sides are equal."]).unwrap();
        let task = TaskInput::new("t", "Find $x$ so that each quadrilateral is a parallelogram.");
        let ctx = ToolContext {
            task: &task,
            prior_reasoning: "The left side is 2x-5.",
            model: &m,
        };
        let out = tool(false).invoke("Properties of parallelograms", &ctx);
        assert_eq!(out, ToolOutput::ok("In a parallelogram, opposite sides are equal."));
    }

    #[test]
    fn refiner_prompt_slots() {
        let m = ScriptedModel::new(vec![crate::gateway::ScriptEntry::expecting(
            "Current Search Query:\nProperties of parallelograms\n\nSearched Documents:\nPassage 1: \nA simple",
            "ok",
        )])
        .unwrap();
        let p = passage(0, QUAD, None);
        let out = refine("Q", "prior", "Properties of parallelograms", &[&p], &m,
            &PromptAssets::builtin(), &DecodingConfig::default()).unwrap();
        assert_eq!(out, "ok");
    }

    #[test]
    fn no_docs_means_no_model_call() {
        let m = ScriptedModel::from_replies(["unused"]).unwrap();
        let out = refine("q", "", "x", &[], &m, &PromptAssets::builtin(), &DecodingConfig::default()).unwrap();
        assert_eq!(out, NO_DOCUMENTS);
        assert_eq!(m.calls_made(), 0);
    }

    #[test]
    fn unmatched_query_proceeds() {
        let m = ScriptedModel::from_replies(["unused"]).unwrap();
        let task = TaskInput::new("t", "q");
        let ctx = ToolContext { task: &task, prior_reasoning: "", model: &m };
        assert_eq!(tool(false).invoke("zebra migration", &ctx), ToolOutput::ok(NO_DOCUMENTS));
        assert_eq!(m.calls_made(), 0);
    }

    #[test]
    fn image_query_uses_task_image() {
        let m = ScriptedModel::from_replies(["unused"]).unwrap();
        let task = TaskInput::new("t", "What animal?").with_image("cat.jpg");
        let ctx = ToolContext { task: &task, prior_reasoning: "", model: &m };
        let out = tool(true).invoke(" IMAGE ", &ctx);
        assert_eq!(out, ToolOutput::ok("Passage 1: \nA tabby cat."));
        assert_eq!(m.calls_made(), 0);

        let out = tool(false).invoke("image", &ctx);
        assert!(!out.ok);
        let no_img = TaskInput::new("t", "q");
        let ctx = ToolContext { task: &no_img, prior_reasoning: "", model: &m };
        assert!(!tool(true).invoke("image", &ctx).ok);
    }
}
