use super::SidVocab;

/// Outcome of extracting a SID from generated text. Parsing never fails
/// loudly; an unusable text maps to [`ParsedSid::Failure`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParsedSid {
    Codes { codes: Vec<u32>, suffix: Option<u32> },
    Failure,
}

impl ParsedSid {
    pub fn is_failure(&self) -> bool {
        matches!(self, ParsedSid::Failure)
    }

    /// Semantic codes followed by the suffix, if present.
    pub fn path(&self) -> Option<Vec<u32>> {
        match self {
            ParsedSid::Codes { codes, suffix } => {
                let mut p = codes.clone();
                p.extend(suffix);
                Some(p)
            }
            ParsedSid::Failure => None,
        }
    }
}

/// Scans `text` for `<x_N>` tokens, returning `(start, end, level, code)`.
fn scan_tokens(text: &str) -> Vec<(usize, usize, usize, u32)> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'<' {
            if let Some(rel) = text[i..].find('>') {
                let end = i + rel + 1;
                if let Some((level, code)) = SidVocab::parse_token(&text[i..end]) {
                    out.push((i, end, level, code));
                    i = end;
                    continue;
                }
            }
        }
        i += 1;
    }
    out
}

/// Extracts the last complete run of level-ordered SID tokens.
///
/// A run starts at a level-0 token and continues through levels
/// `1..levels` in order; tokens in a run may be separated by whitespace
/// only. A level-`levels` token directly after a complete run is taken as
/// the disambiguation suffix.
pub fn parse_sid_text(text: &str, levels: usize) -> ParsedSid {
    let toks = scan_tokens(text);
    let gap_ok = |a: usize, b: usize| text[a..b].chars().all(char::is_whitespace);
    let mut best = ParsedSid::Failure;
    let mut i = 0;
    while i < toks.len() {
        if toks[i].2 != 0 {
            i += 1;
            continue;
        }
        let mut codes = vec![toks[i].3];
        let mut j = i + 1;
        while j < toks.len() && codes.len() < levels && toks[j].2 == codes.len() && gap_ok(toks[j - 1].1, toks[j].0) {
            codes.push(toks[j].3);
            j += 1;
        }
        if codes.len() == levels {
            let mut suffix = None;
            if j < toks.len() && toks[j].2 == levels && gap_ok(toks[j - 1].1, toks[j].0) {
                suffix = Some(toks[j].3);
                j += 1;
            }
            best = ParsedSid::Codes { codes, suffix };
            i = j;
        } else {
            i = j.max(i + 1);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn codes(c: &[u32]) -> ParsedSid {
        ParsedSid::Codes {
            codes: c.to_vec(),
            suffix: None,
        }
    }

    #[test]
    fn plain_sid() {
        assert_eq!(parse_sid_text("<a_5><b_2><c_7>", 3), codes(&[5, 2, 7]));
    }

    #[test]
    fn level_order_enforced() {
        assert_eq!(parse_sid_text("<b_2><a_5><c_7>", 3), ParsedSid::Failure);
    }

    #[test]
    fn last_complete_run_wins() {
        let t = "reasoning text about taste, answer: <a_1><b_1><c_1> <a_2><b_3><c_4>";
        assert_eq!(parse_sid_text(t, 3), codes(&[2, 3, 4]));
        let t = "<a_1><b_1><c_1> then <a_9><b_9>";
        assert_eq!(parse_sid_text(t, 3), codes(&[1, 1, 1]));
    }

    #[test]
    fn space_separated_tokens_and_suffix() {
        assert_eq!(
            parse_sid_text("so <a_3> <b_4> <c_5> <d_1>", 3),
            ParsedSid::Codes {
                codes: vec![3, 4, 5],
                suffix: Some(1)
            }
        );
        assert_eq!(parse_sid_text("<a_3> x <b_4><c_5>", 3), ParsedSid::Failure);
    }

    #[test]
    fn empty_and_garbage() {
        assert!(parse_sid_text("", 3).is_failure());
        assert!(parse_sid_text("<<<a_<b_>>", 3).is_failure());
    }

    proptest! {
        #[test]
        fn never_panics(s in "\\PC{0,80}") {
            let _ = parse_sid_text(&s, 3);
        }

        #[test]
        fn finds_embedded_sid(prefix in "[a-z ,.]{0,30}", a in 0u32..300, b in 0u32..300, c in 0u32..300) {
            let text = format!("{prefix} <a_{a}><b_{b}><c_{c}>");
            prop_assert_eq!(parse_sid_text(&text, 3), codes(&[a, b, c]));
        }
    }
}
