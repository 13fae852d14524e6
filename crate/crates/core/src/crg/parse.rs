//! Tolerant parser for the structured relation format.

use super::{RelationRecord, RelationType, Strength};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParseOutcome {
    pub records: Vec<RelationRecord>,
    /// Blocks dropped for an unknown type, strength or missing field.
    pub skipped: usize,
}

impl ParseOutcome {
    pub fn warnings(&self) -> usize {
        self.skipped + usize::from(self.records.is_empty())
    }

    pub fn status(&self) -> String {
        format!("parsed {} skipped {}", self.records.len(), self.skipped)
    }
}

#[derive(Default)]
struct Block {
    name: String,
    rel_type: Option<String>,
    strength: Option<String>,
    explanation: String,
}

/// Strips list bullets and emphasis markers from a line.
fn clean(line: &str) -> String {
    line.replace("**", "")
        .replace("__", "")
        .trim()
        .trim_start_matches(['-', '*', '•', '+'])
        .trim()
        .to_string()
}

/// Value after `key:` when the line starts with `key` (case-insensitive).
fn field<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    let head = line.get(..key.len())?;
    if !head.eq_ignore_ascii_case(key) {
        return None;
    }
    let rest = &line[key.len()..];
    let colon = rest.find(':')?;
    Some(rest[colon + 1..].trim())
}

fn strip_quotes(s: &str) -> String {
    s.trim()
        .trim_matches(|c: char| c == '"' || c == '\'' || c == '`' || c == '“' || c == '”')
        .trim()
        .to_string()
}

pub fn parse_rel_type(s: &str) -> Option<RelationType> {
    let t: String = s
        .trim()
        .trim_end_matches('.')
        .to_ascii_lowercase()
        .chars()
        .filter(|c| !c.is_whitespace())
        .collect();
    match t.as_str() {
        "synonymy" | "similarity" | "synonymy/similarity" | "synonym" => Some(RelationType::Synonymy),
        "is-a" | "isa" | "hypernym" | "hyponym" | "hypernymy" | "hyponymy" | "is-a/hypernym"
        | "is-a/hypernymy" | "is-a/hypernymy/hyponymy" | "is-a/hyponym" => Some(RelationType::IsA),
        "functional" | "functionalrelationship" | "function" => Some(RelationType::Functional),
        "co-occurrence" | "cooccurrence" => Some(RelationType::Cooccurrence),
        "part-whole" | "part-wholerelationship" | "partwhole" | "part-of" => Some(RelationType::PartWhole),
        _ => None,
    }
}

pub fn parse_strength(s: &str) -> Option<Strength> {
    match s.trim().to_ascii_lowercase().as_str() {
        "high" => Some(Strength::High),
        "medium" => Some(Strength::Medium),
        "low" => Some(Strength::Low),
        _ => None,
    }
}

/// Parses every `Related Category N: name` block of a response.
pub fn parse_response(raw: &str, target: &str, query_index: usize) -> ParseOutcome {
    let mut out = ParseOutcome::default();
    let mut current: Option<Block> = None;
    let mut in_explanation = false;
    let finish = |b: Option<Block>, out: &mut ParseOutcome| {
        let Some(b) = b else { return };
        let rel = b.rel_type.as_deref().and_then(parse_rel_type);
        let strength = b.strength.as_deref().and_then(parse_strength);
        match (rel, strength) {
            (Some(rel_type), Some(strength))
                if !b.name.is_empty() && !b.name.eq_ignore_ascii_case(target.trim()) =>
            {
                out.records.push(RelationRecord {
                    target: target.to_string(),
                    related: b.name,
                    rel_type,
                    strength,
                    explanation: b.explanation.trim().to_string(),
                    query_index,
                })
            }
            _ => out.skipped += 1,
        }
    };
    for raw_line in raw.lines() {
        let line = clean(raw_line);
        if let Some(rest) = field(&line, "Related Category") {
            finish(current.take(), &mut out);
            current = Some(Block {
                name: strip_quotes(rest),
                ..Block::default()
            });
            in_explanation = false;
            continue;
        }
        let Some(block) = current.as_mut() else {
            continue;
        };
        if let Some(v) = field(&line, "Type of Relationship") {
            block.rel_type = Some(v.to_string());
            in_explanation = false;
        } else if let Some(v) = field(&line, "Association Strength") {
            block.strength = Some(v.to_string());
            in_explanation = false;
        } else if let Some(v) = field(&line, "Explanation") {
            block.explanation = v.to_string();
            in_explanation = true;
        } else if in_explanation && !line.is_empty() {
            block.explanation.push(' ');
            block.explanation.push_str(&line);
        } else if line.is_empty() {
            in_explanation = false;
        }
    }
    finish(current.take(), &mut out);
    if out.records.is_empty() {
        log::warn!("no relations parsed for {target:?} (query {query_index})");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = "\
**Related Category 1: natural**
- **Type of Relationship**: Synonymy/Similarity
- **Association Strength**: High
- **Explanation**: \"Natural\" is conceptually very similar to \"nature\".

**Related Category 2: fauna**
- **Type of Relationship**: Is-a/Hypernym
- **Association Strength**: High
- **Explanation**: \"Fauna\" represents the animal life of a region,
  which is a fundamental part of \"nature\".
";

    #[test]
    fn parses_example_output() {
        let out = parse_response(EXAMPLE, "Nature", 0);
        assert_eq!(out.skipped, 0);
        assert_eq!(out.records.len(), 2);
        let r = &out.records[0];
        assert_eq!((r.related.as_str(), r.rel_type, r.strength), ("natural", RelationType::Synonymy, Strength::High));
        let r = &out.records[1];
        assert_eq!((r.related.as_str(), r.rel_type, r.strength), ("fauna", RelationType::IsA, Strength::High));
        assert!(r.explanation.ends_with("fundamental part of \"nature\"."));
    }

    #[test]
    fn empty_and_malformed() {
        let out = parse_response("", "x", 0);
        assert!(out.records.is_empty());
        assert_eq!(out.skipped, 0);
        let bad = EXAMPLE.replacen("Association Strength**: High", "Association Strength**: HIGH!!", 1);
        let out = parse_response(&bad, "Nature", 2);
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.skipped, 1);
        assert_eq!(out.warnings(), 1);
        assert_eq!(out.records[0].query_index, 2);
        let odd = EXAMPLE.replace("Is-a/Hypernym", "Friendship");
        assert_eq!(parse_response(&odd, "Nature", 0).skipped, 1);
    }

    #[test]
    fn self_relation_is_skipped() {
        let text = "Related Category 1: Nature\nType of Relationship: Synonymy\nAssociation Strength: Low\n";
        let out = parse_response(text, "nature", 0);
        assert!(out.records.is_empty());
        assert_eq!(out.skipped, 1);
    }
}
