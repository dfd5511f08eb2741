//! The tagged-text interchange form: plain text where each annotated noun
//! phrase is bracketed and immediately followed by its instance IDs, e.g.
//!
//! ```text
//! put [the clothes](4,5) in [the washing machine](9)
//! ```
//!
//! Brackets make phrase boundaries explicit, so no NLP is needed to recover
//! spans. The four delimiter characters `[ ] ( )` are reserved and may not
//! appear outside tag structure.

use std::collections::BTreeSet;

use thiserror::Error;

use super::{AnnotatedDescription, PhraseTarget};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("unbalanced or misplaced delimiter at byte {offset}")]
    UnbalancedDelimiters { offset: usize },
    #[error("empty id list at byte {offset}")]
    EmptyIdList { offset: usize },
    #[error("non-integer id {text:?} at byte {offset}")]
    NonIntegerId { offset: usize, text: String },
    #[error("empty phrase at byte {offset}")]
    EmptyPhrase { offset: usize },
}

/// Deterministic tokenization: lowercase, then split into maximal runs of
/// alphanumeric characters (apostrophes and hyphens stay inside words);
/// every other non-whitespace character becomes its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() || ch == '\'' || ch == '-' {
            word.push(ch);
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Parse the tagged interchange form into tokens and phrase targets.
///
/// Returned phrases are inline only (no sentence-level sentinel), ordered by
/// span start, with `head_index` at the last token of each span.
pub fn parse_tagged_text(raw: &str) -> Result<(Vec<String>, Vec<PhraseTarget>), ParseError> {
    let mut tokens: Vec<String> = Vec::new();
    let mut phrases: Vec<PhraseTarget> = Vec::new();
    let bytes_len = raw.len();

    let mut chars = raw.char_indices().peekable();
    let mut plain = String::new();

    while let Some((offset, ch)) = chars.next() {
        match ch {
            '[' => {
                tokens.extend(tokenize(&plain));
                plain.clear();

                // Phrase text runs to the matching ']'.
                let mut phrase_text = String::new();
                let mut closed = false;
                for (inner_offset, inner) in chars.by_ref() {
                    match inner {
                        ']' => {
                            closed = true;
                            break;
                        }
                        '[' | '(' | ')' => {
                            return Err(ParseError::UnbalancedDelimiters {
                                offset: inner_offset,
                            })
                        }
                        _ => phrase_text.push(inner),
                    }
                }
                if !closed {
                    return Err(ParseError::UnbalancedDelimiters { offset });
                }
                let phrase_tokens = tokenize(&phrase_text);
                if phrase_tokens.is_empty() {
                    return Err(ParseError::EmptyPhrase { offset });
                }

                // The id group must follow the bracket immediately.
                let group_offset = match chars.next() {
                    Some((o, '(')) => o,
                    Some((o, _)) => return Err(ParseError::UnbalancedDelimiters { offset: o }),
                    None => return Err(ParseError::UnbalancedDelimiters { offset: bytes_len }),
                };
                let mut ids_text = String::new();
                let mut closed = false;
                for (inner_offset, inner) in chars.by_ref() {
                    match inner {
                        ')' => {
                            closed = true;
                            break;
                        }
                        '[' | ']' | '(' => {
                            return Err(ParseError::UnbalancedDelimiters {
                                offset: inner_offset,
                            })
                        }
                        _ => ids_text.push(inner),
                    }
                }
                if !closed {
                    return Err(ParseError::UnbalancedDelimiters { offset: group_offset });
                }
                let target_ids = parse_id_list(&ids_text, group_offset)?;

                let start = tokens.len();
                tokens.extend(phrase_tokens);
                let end = tokens.len() - 1;
                phrases.push(PhraseTarget::new((start, end), target_ids));
            }
            ']' | '(' | ')' => return Err(ParseError::UnbalancedDelimiters { offset }),
            _ => plain.push(ch),
        }
    }
    tokens.extend(tokenize(&plain));
    Ok((tokens, phrases))
}

fn parse_id_list(text: &str, group_offset: usize) -> Result<BTreeSet<u32>, ParseError> {
    if text.trim().is_empty() {
        return Err(ParseError::EmptyIdList {
            offset: group_offset,
        });
    }
    let mut ids = BTreeSet::new();
    // group_offset points at '('; ids start one byte later.
    let mut piece_offset = group_offset + 1;
    for piece in text.split(',') {
        let trimmed = piece.trim();
        match trimmed.parse::<u32>() {
            Ok(id) => {
                ids.insert(id);
            }
            Err(_) => {
                return Err(ParseError::NonIntegerId {
                    offset: piece_offset,
                    text: trimmed.to_string(),
                })
            }
        }
        piece_offset += piece.len() + 1;
    }
    Ok(ids)
}

/// Serialize a description back to canonical tagged text: tokens joined by
/// single spaces, each inline phrase bracketed with its IDs ascending.
/// Sentence-level sentinels are carried by the record file, not the text.
pub fn serialize_tagged_text(desc: &AnnotatedDescription) -> String {
    let mut spans = desc
        .inline_phrases()
        .map(|p| (p.span, &p.target_ids))
        .collect::<Vec<_>>();
    spans.sort_by_key(|(span, _)| *span);

    let mut out = String::new();
    let mut span_iter = spans.iter().peekable();
    for (i, token) in desc.tokens.iter().enumerate() {
        if !out.is_empty() && !out.ends_with('[') {
            out.push(' ');
        }
        if let Some(((start, _), _)) = span_iter.peek() {
            if i == *start {
                out.push('[');
            }
        }
        out.push_str(token);
        if let Some(((_, end), ids)) = span_iter.peek() {
            if i == *end {
                let id_list = ids
                    .iter()
                    .map(u32::to_string)
                    .collect::<Vec<_>>()
                    .join(",");
                out.push_str(&format!("]({id_list})"));
                span_iter.next();
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_the_two_phrase_example() {
        let (tokens, phrases) =
            parse_tagged_text("put [the clothes](4,5) in [the washing machine](9)").unwrap();
        assert_eq!(
            tokens,
            ["put", "the", "clothes", "in", "the", "washing", "machine"]
        );
        assert_eq!(phrases.len(), 2);
        assert_eq!(phrases[0].span, (1, 2));
        assert_eq!(phrases[0].head_index, 2);
        assert_eq!(phrases[0].target_ids, [4, 5].into());
        assert_eq!(phrases[1].span, (4, 6));
        assert_eq!(phrases[1].head_index, 6);
        assert_eq!(phrases[1].target_ids, [9].into());
    }

    #[test]
    fn untagged_text_has_no_phrases() {
        let (tokens, phrases) = parse_tagged_text("hello world").unwrap();
        assert_eq!(tokens, ["hello", "world"]);
        assert!(phrases.is_empty());
    }

    #[test]
    fn empty_id_list_is_an_error() {
        assert_eq!(
            parse_tagged_text("[chair]()").unwrap_err(),
            ParseError::EmptyIdList { offset: 7 }
        );
    }

    #[test]
    fn non_integer_id_reports_offset() {
        let err = parse_tagged_text("[chair](3,x)").unwrap_err();
        assert_eq!(
            err,
            ParseError::NonIntegerId {
                offset: 10,
                text: "x".into()
            }
        );
    }

    #[test]
    fn unterminated_bracket_is_unbalanced() {
        assert!(matches!(
            parse_tagged_text("see [the chair").unwrap_err(),
            ParseError::UnbalancedDelimiters { offset: 4 }
        ));
    }

    #[test]
    fn stray_delimiters_are_rejected() {
        for (text, offset) in [("a ] b", 2), ("a (3) b", 2), ("a ) b", 2)] {
            assert_eq!(
                parse_tagged_text(text).unwrap_err(),
                ParseError::UnbalancedDelimiters { offset },
                "input: {text}"
            );
        }
    }

    #[test]
    fn bracket_without_id_group_is_unbalanced() {
        assert_eq!(
            parse_tagged_text("[chair] sits").unwrap_err(),
            ParseError::UnbalancedDelimiters { offset: 7 }
        );
    }

    #[test]
    fn empty_phrase_is_rejected() {
        assert_eq!(
            parse_tagged_text("a [](3)").unwrap_err(),
            ParseError::EmptyPhrase { offset: 2 }
        );
    }

    #[test]
    fn tokenizer_lowercases_and_detaches_punctuation() {
        assert_eq!(
            tokenize("Put the Clothes, please!"),
            ["put", "the", "clothes", ",", "please", "!"]
        );
        assert_eq!(tokenize("it's left-of x"), ["it's", "left-of", "x"]);
    }

    #[test]
    fn serialization_is_canonical() {
        let raw = "put [the clothes](4,5) in [the washing machine](9)";
        let (tokens, phrases) = parse_tagged_text(raw).unwrap();
        let desc = AnnotatedDescription {
            description_id: "d".into(),
            scene_id: "s".into(),
            tokens,
            phrases,
        };
        assert_eq!(serialize_tagged_text(&desc), raw);
    }

    #[test]
    fn ids_serialize_ascending() {
        let (tokens, phrases) = parse_tagged_text("[chair](7,3)").unwrap();
        let desc = AnnotatedDescription {
            description_id: "d".into(),
            scene_id: "s".into(),
            tokens,
            phrases,
        };
        assert_eq!(serialize_tagged_text(&desc), "[chair](3,7)");
    }

    #[test]
    fn phrase_free_description_serializes_plainly() {
        let desc = AnnotatedDescription {
            description_id: "d".into(),
            scene_id: "s".into(),
            tokens: vec!["hello".into(), "world".into()],
            phrases: vec![],
        };
        assert_eq!(serialize_tagged_text(&desc), "hello world");
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        prop_compose! {
            fn arb_token()(s in "[a-z][a-z0-9']{0,6}") -> String { s }
        }

        /// Random valid description: tokens plus non-overlapping spans.
        fn arb_description() -> impl Strategy<Value = AnnotatedDescription> {
            (1usize..20, prop::collection::vec(arb_token(), 1..60)).prop_flat_map(
                |(phrase_budget, tokens)| {
                    let len = tokens.len();
                    let spans = prop::collection::vec((0usize..len, 1usize..4, prop::collection::btree_set(0u32..30, 1..4)), 0..=phrase_budget)
                        .prop_map(move |raw| {
                            let mut picked: Vec<(usize, usize, BTreeSet<u32>)> = Vec::new();
                            let mut next_free = 0usize;
                            let mut sorted = raw;
                            sorted.sort_by_key(|(s, _, _)| *s);
                            for (start, width, ids) in sorted {
                                let start = start.max(next_free);
                                let end = (start + width - 1).min(len - 1);
                                if start >= len || end < start {
                                    continue;
                                }
                                picked.push((start, end, ids));
                                next_free = end + 1;
                            }
                            picked
                        });
                    (Just(tokens), spans)
                },
            )
            .prop_map(|(tokens, spans)| AnnotatedDescription {
                description_id: "d".into(),
                scene_id: "s".into(),
                phrases: spans
                    .into_iter()
                    .map(|(start, end, ids)| PhraseTarget::new((start, end), ids))
                    .collect(),
                tokens,
            })
        }

        proptest! {
            #[test]
            fn parse_serialize_roundtrip(desc in arb_description()) {
                let raw = serialize_tagged_text(&desc);
                let (tokens, phrases) = parse_tagged_text(&raw).unwrap();
                prop_assert_eq!(tokens, desc.tokens);
                prop_assert_eq!(phrases, desc.phrases);
            }
        }
    }
}
