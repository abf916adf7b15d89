//! Action protocol: parsing model output, prompt rendering and error grounding.

pub mod ground;
pub mod parse;
pub mod prompt;

pub use ground::{ground_error, ErrorGrounder, GroundedError, RuleGrounder};
pub use parse::{has_code_fence, last_code_fence, parse_action, parse_info_query, ParseOutcome};
pub use prompt::{
    flatten, full_conversation, render_prompt, render_task_prompt, task_vars, ChatMessage, Prompt, PromptError, PromptTemplate, Role,
    ACTION_PROTOCOL,
};
