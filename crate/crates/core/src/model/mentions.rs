use std::collections::BTreeSet;

use super::{is_id_char, AgentId, MAX_AGENT_ID_LEN};

/// Resolves the mention list of a message: explicit mentions first, then
/// every `@<id>` token in `body` naming a registered agent, in order of
/// first occurrence and without duplicates. `@` tokens that do not name a
/// registered agent are left as prose.
pub fn parse_mentions(
    body: &str,
    explicit: &[AgentId],
    registry: &BTreeSet<AgentId>,
) -> Vec<AgentId> {
    let mut out: Vec<AgentId> = Vec::with_capacity(explicit.len());
    for id in explicit {
        if !out.contains(id) {
            out.push(id.clone());
        }
    }
    let mut rest = body;
    while let Some(at) = rest.find('@') {
        let after = &rest[at + 1..];
        let end = after
            .char_indices()
            .find(|&(_, c)| !is_id_char(c))
            .map_or(after.len(), |(i, _)| i);
        let token = &after[..end];
        let starts_with_letter = token.chars().next().is_some_and(|c| c.is_ascii_lowercase());
        if starts_with_letter && token.len() <= MAX_AGENT_ID_LEN {
            if let Some(id) = registry.iter().find(|id| id.as_str() == token) {
                if !out.contains(id) {
                    out.push(id.clone());
                }
            }
        }
        rest = &after[end..];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(names: &[&str]) -> Vec<AgentId> {
        names.iter().map(|n| AgentId::new(n).unwrap()).collect()
    }

    fn registry(names: &[&str]) -> BTreeSet<AgentId> {
        ids(names).into_iter().collect()
    }

    /// Position-by-position oracle: at every `@`, read the maximal grammar run.
    fn oracle(body: &str, explicit: &[AgentId], reg: &BTreeSet<AgentId>) -> Vec<AgentId> {
        let chars: Vec<char> = body.chars().collect();
        let mut out: Vec<AgentId> = Vec::new();
        for id in explicit {
            if !out.iter().any(|o| o == id) {
                out.push(id.clone());
            }
        }
        for i in 0..chars.len() {
            if chars[i] != '@' {
                continue;
            }
            let mut token = String::new();
            let mut j = i + 1;
            while j < chars.len()
                && (chars[j].is_ascii_lowercase()
                    || chars[j].is_ascii_digit()
                    || chars[j] == '_'
                    || chars[j] == '-')
            {
                token.push(chars[j]);
                j += 1;
            }
            for id in reg {
                if id.as_str() == token && !out.iter().any(|o| o == id) {
                    out.push(id.clone());
                }
            }
        }
        out
    }

    #[test]
    fn transcript_style_mention() {
        let got = parse_mentions(
            "@web, we have not yet received the data",
            &[],
            &registry(&["web", "planner"]),
        );
        assert_eq!(got, ids(&["web"]));
    }

    #[test]
    fn explicit_only_passthrough() {
        let got = parse_mentions(
            "no tags here",
            &ids(&["critique"]),
            &registry(&["critique"]),
        );
        assert_eq!(got, ids(&["critique"]));
    }

    #[test]
    fn dedup_and_unknown_skip() {
        let reg = registry(&["web"]);
        let explicit = ids(&["web"]);
        let body = "@web and @web and @unknown";
        let expected = oracle(body, &explicit, &reg);
        assert_eq!(expected, ids(&["web"]));
        assert_eq!(parse_mentions(body, &explicit, &reg), expected);
    }

    #[test]
    fn grammar_terminates_tokens() {
        let reg = registry(&["web", "web-2", "reasoning_coding"]);
        assert_eq!(
            parse_mentions("hi @web-2. and @reasoning_coding!", &[], &reg),
            ids(&["web-2", "reasoning_coding"])
        );
        // Uppercase is outside the grammar, so `@Web` is prose.
        assert!(parse_mentions("@Web please", &[], &reg).is_empty());
        assert!(parse_mentions("trailing @", &[], &reg).is_empty());
        assert_eq!(parse_mentions("mail@web", &[], &reg), ids(&["web"]));
    }

    fn arb_body() -> impl Strategy<Value = String> {
        let piece = prop_oneof![
            Just("@web".to_string()),
            Just("@planner".to_string()),
            Just("@critique,".to_string()),
            Just("@ghost".to_string()),
            Just("@".to_string()),
            Just("@@web".to_string()),
            "[a-z ,.!]{0,6}",
            Just("@Web".to_string()),
        ];
        prop::collection::vec(piece, 0..10).prop_map(|v| v.concat())
    }

    proptest! {
        #[test]
        fn matches_positional_oracle(body in arb_body(), explicit_mask in 0u8..8) {
            let reg = registry(&["web", "planner", "critique"]);
            let all = ids(&["critique", "web", "planner"]);
            let explicit: Vec<AgentId> = all
                .iter()
                .enumerate()
                .filter(|(i, _)| explicit_mask & (1 << i) != 0)
                .map(|(_, a)| a.clone())
                .collect();
            prop_assert_eq!(parse_mentions(&body, &explicit, &reg), oracle(&body, &explicit, &reg));
        }

        #[test]
        fn idempotent_over_parsed_set(body in arb_body()) {
            let reg = registry(&["web", "planner", "critique"]);
            let once = parse_mentions(&body, &[], &reg);
            let twice = parse_mentions(&body, &once, &reg);
            prop_assert_eq!(once, twice);
        }
    }
}
