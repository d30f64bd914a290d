//! Advisory checks for replies produced by a live model.
//!
//! The prompts ask for 50-100 words, and for a few emojis from the
//! personified persona. Neither is enforceable on a generative model, so
//! these checks only report; nothing in the turn loop calls them.

use super::prompt::PersonaKind;
use super::tags::ReplyTags;

pub const MIN_WORDS: usize = 50;
pub const MAX_WORDS: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LintWarning {
    TooShort(usize),
    TooLong(usize),
    NoEmoji,
    TooManyEmoji(usize),
}

fn is_emoji(c: char) -> bool {
    matches!(c as u32,
        0x1F300..=0x1FAFF | 0x2600..=0x27BF | 0x1F000..=0x1F2FF)
}

pub fn lint_reply(text: &str, persona: PersonaKind) -> Vec<LintWarning> {
    let (_, body) = ReplyTags::parse(text);
    let words = body
        .split_whitespace()
        .filter(|w| w.chars().any(char::is_alphanumeric))
        .count();
    let emoji = body.chars().filter(|c| is_emoji(*c)).count();

    let mut out = Vec::new();
    if words < MIN_WORDS {
        out.push(LintWarning::TooShort(words));
    } else if words > MAX_WORDS {
        out.push(LintWarning::TooLong(words));
    }
    if persona == PersonaKind::Personified {
        if emoji == 0 {
            out.push(LintWarning::NoEmoji);
        } else if emoji > 5 {
            out.push(LintWarning::TooManyEmoji(emoji));
        }
    }
    out
}
