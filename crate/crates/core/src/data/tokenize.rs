/// A token with its byte span in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Lowercases and splits on every maximal run of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_with_offsets(text)
        .into_iter()
        .map(|t| t.text)
        .collect()
}

pub fn tokenize_with_offsets(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        match (c.is_alphanumeric(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push(make_token(text, s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(make_token(text, s, text.len()));
    }
    out
}

fn make_token(text: &str, start: usize, end: usize) -> Token {
    Token {
        text: text[start..end].to_lowercase(),
        start,
        end,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn splits_and_lowercases() {
        assert_eq!(tokenize("The Mist (2007)"), vec!["the", "mist", "2007"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("Sang-Wook Cheong"), vec!["sang", "wook", "cheong"]);
        assert!(tokenize(" -- !! ").is_empty());
    }

    #[test]
    fn offsets_point_into_source() {
        let s = "Rutgers University, New Jersey";
        let toks = tokenize_with_offsets(s);
        assert_eq!(&s[toks[0].start..toks[1].end], "Rutgers University");
        assert_eq!(&s[toks[2].start..toks[3].end], "New Jersey");
    }

    proptest! {
        #[test]
        fn tokenization_is_idempotent(s in "[a-zA-Z0-9éüßÀ ,.!?()'-]{0,40}") {
            let once = tokenize(&s);
            let twice = tokenize(&once.join(" "));
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn joining_with_space_concatenates_token_lists(a in "[a-zA-Z0-9 ,.-]{0,20}", b in "[a-zA-Z0-9 ,.-]{0,20}") {
            let mut expected = tokenize(&a);
            expected.extend(tokenize(&b));
            prop_assert_eq!(tokenize(&format!("{a} {b}")), expected);
        }
    }
}
