//! Temporal-aware video context and the masked answer prompt.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_PROMPT_WORD: &str = "Hints:";

/// Placeholder stored in [`AnswerPrompt::rendered`] wherever the scorer's
/// mask token goes. Substituted by [`AnswerPrompt::render_with`].
pub const MASK_SENTINEL: &str = "\u{27e6}MASK\u{27e7}";

/// Connective placed before captions of frame `position` out of `total`.
pub fn temporal_connective(position: usize, total: usize) -> Result<&'static str> {
    if position == 0 || position > total {
        return Err(Error::arg(format!(
            "frame position {position} outside 1..={total}"
        )));
    }
    Ok(match position {
        1 => "Firstly,",
        p if p == total => "Finally,",
        p if total >= 3 && p == total - 1 => "After that,",
        _ => "Then,",
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    /// 1-based frame where the caption first appeared.
    pub frame: usize,
    pub connective: String,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoContext {
    pub total_frames: usize,
    pub segments: Vec<Segment>,
    pub rendered: String,
}

fn terminate_sentence(caption: &str) -> String {
    let caption = caption.trim();
    if caption.ends_with(['.', '!', '?']) {
        caption.to_owned()
    } else {
        format!("{caption}.")
    }
}

/// Prefixes each caption with its frame's connective and joins them.
pub fn build_context(captions: &[(usize, String)], total_frames: usize) -> Result<VideoContext> {
    let mut segments = Vec::with_capacity(captions.len());
    let mut prev = 0;
    for (frame, caption) in captions {
        if *frame < prev {
            return Err(Error::arg(format!(
                "caption frames must be non-decreasing, got {frame} after {prev}"
            )));
        }
        prev = *frame;
        segments.push(Segment {
            frame: *frame,
            connective: temporal_connective(*frame, total_frames)?.to_owned(),
            caption: terminate_sentence(caption),
        });
    }
    let rendered = segments
        .iter()
        .map(|s| format!("{} {}", s.connective, s.caption))
        .collect::<Vec<_>>()
        .join(" ");
    Ok(VideoContext {
        total_frames,
        segments,
        rendered,
    })
}

impl VideoContext {
    pub fn empty(total_frames: usize) -> Self {
        Self {
            total_frames,
            segments: Vec::new(),
            rendered: String::new(),
        }
    }

    /// Re-renders from the first `n` segments.
    fn prefix(&self, n: usize) -> Result<Self> {
        let captions: Vec<(usize, String)> = self.segments[..n]
            .iter()
            .map(|s| (s.frame, s.caption.clone()))
            .collect();
        build_context(&captions, self.total_frames)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerPrompt {
    pub question: String,
    pub prompt_word: String,
    pub context: VideoContext,
    pub mask_count: usize,
    /// Prompt text with [`MASK_SENTINEL`] standing in for each mask.
    pub rendered: String,
}

fn render(question: &str, context: &VideoContext, prompt_word: &str, mask_count: usize) -> String {
    let masks = vec![MASK_SENTINEL; mask_count].join(" ");
    let mut s = format!("Question: {question} Answer: {masks}. {prompt_word}");
    if !context.rendered.is_empty() {
        s.push(' ');
        s.push_str(&context.rendered);
    }
    s
}

/// Assembles `Question: {q} Answer: {masks}. {prompt_word} {context}`.
pub fn build_answer_prompt(
    question: &str,
    context: VideoContext,
    prompt_word: &str,
    mask_count: usize,
) -> Result<AnswerPrompt> {
    let question = question.trim();
    if question.is_empty() {
        return Err(Error::arg("question is empty"));
    }
    if mask_count == 0 {
        return Err(Error::arg("mask_count must be at least 1"));
    }
    if question.contains(MASK_SENTINEL) || context.rendered.contains(MASK_SENTINEL) {
        return Err(Error::arg("prompt inputs contain the reserved mask sentinel"));
    }
    let rendered = render(question, &context, prompt_word, mask_count);
    Ok(AnswerPrompt {
        question: question.to_owned(),
        prompt_word: prompt_word.to_owned(),
        context,
        mask_count,
        rendered,
    })
}

impl AnswerPrompt {
    /// Rendered prompt with each mask written as `mask`.
    pub fn render_with(&self, mask: &str) -> String {
        self.rendered.replace(MASK_SENTINEL, mask)
    }

    /// Same prompt with a different number of mask slots.
    pub fn with_mask_count(&self, mask_count: usize) -> Result<Self> {
        build_answer_prompt(&self.question, self.context.clone(), &self.prompt_word, mask_count)
    }

    fn with_context(&self, context: VideoContext) -> Self {
        let rendered = render(&self.question, &context, &self.prompt_word, self.mask_count);
        Self {
            context,
            rendered,
            ..self.clone()
        }
    }
}

/// Whitespace token count; the default counter for mock backends.
pub fn whitespace_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Drops whole captions from the end of the context until the rendered
/// prompt fits in `budget` tokens as measured by `count_tokens`.
pub fn truncate_to_budget<F>(prompt: &AnswerPrompt, budget: usize, mut count_tokens: F) -> Result<AnswerPrompt>
where
    F: FnMut(&str) -> Result<usize>,
{
    if count_tokens(&prompt.rendered)? <= budget {
        return Ok(prompt.clone());
    }
    let bare = prompt.with_context(VideoContext::empty(prompt.context.total_frames));
    let needed = count_tokens(&bare.rendered)?;
    if needed > budget {
        return Err(Error::Budget { needed, budget });
    }
    for keep in (1..prompt.context.segments.len()).rev() {
        let candidate = prompt.with_context(prompt.context.prefix(keep)?);
        if count_tokens(&candidate.rendered)? <= budget {
            return Ok(candidate);
        }
    }
    Ok(bare)
}
