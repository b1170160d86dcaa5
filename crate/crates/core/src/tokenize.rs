//! Tokenization for metrics and prompt budgeting.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenScheme {
    /// Every CJK character is its own token; other runs split at whitespace.
    #[default]
    CharCjkWordLatin,
    Whitespace,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence {
    tokens: Vec<String>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<String>) -> Self {
        Self { tokens }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, String> {
        self.tokens.iter()
    }
}

impl<S: Into<String>> FromIterator<S> for TokenSequence {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Self::new(iter.into_iter().map(Into::into).collect())
    }
}

impl AsRef<[String]> for TokenSequence {
    fn as_ref(&self) -> &[String] {
        &self.tokens
    }
}

/// Han ideographs, kana, hangul, CJK punctuation and full-width forms.
pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3000..=0x303F
        | 0x3040..=0x30FF
        | 0x3400..=0x4DBF
        | 0x4E00..=0x9FFF
        | 0xAC00..=0xD7AF
        | 0xF900..=0xFAFF
        | 0xFE30..=0xFE4F
        | 0xFF00..=0xFFEF
        | 0x20000..=0x2FA1F)
}

pub fn tokenize(text: &str, scheme: TokenScheme) -> TokenSequence {
    match scheme {
        TokenScheme::Whitespace => text.split_whitespace().collect(),
        TokenScheme::CharCjkWordLatin => {
            let mut tokens = Vec::new();
            let mut word = String::new();
            for c in text.chars() {
                if c.is_whitespace() || is_cjk(c) {
                    if !word.is_empty() {
                        tokens.push(std::mem::take(&mut word));
                    }
                    if is_cjk(c) && !c.is_whitespace() {
                        tokens.push(c.to_string());
                    }
                } else {
                    word.push(c);
                }
            }
            if !word.is_empty() {
                tokens.push(word);
            }
            TokenSequence::new(tokens)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(text: &str, scheme: TokenScheme) -> Vec<String> {
        tokenize(text, scheme).tokens().to_vec()
    }

    #[test]
    fn whitespace_scheme() {
        assert_eq!(toks("a b c", TokenScheme::Whitespace), ["a", "b", "c"]);
        assert_eq!(toks("  a\tb\n", TokenScheme::Whitespace), ["a", "b"]);
    }

    #[test]
    fn empty_input_gives_empty_sequence() {
        assert!(tokenize("", TokenScheme::Whitespace).is_empty());
        assert!(tokenize("", TokenScheme::CharCjkWordLatin).is_empty());
    }

    #[test]
    fn cjk_characters_split_latin_words_kept() {
        assert_eq!(
            toks("你好 world", TokenScheme::CharCjkWordLatin),
            ["你", "好", "world"]
        );
        assert_eq!(
            toks("GLM模型2022年，很好", TokenScheme::CharCjkWordLatin),
            ["GLM", "模", "型", "2022", "年", "，", "很", "好"]
        );
    }

    #[test]
    fn ideographic_space_is_a_separator() {
        assert_eq!(toks("你\u{3000}好", TokenScheme::CharCjkWordLatin), ["你", "好"]);
    }

    proptest! {
        #[test]
        fn single_latin_words_are_fixed_points(word in "[a-zA-Z0-9]{1,12}") {
            for scheme in [TokenScheme::CharCjkWordLatin, TokenScheme::Whitespace] {
                let once = toks(&word, scheme);
                prop_assert_eq!(&once, &vec![word.clone()]);
                prop_assert_eq!(toks(&once.join(" "), scheme), once);
            }
        }

        #[test]
        fn retokenizing_joined_tokens_is_stable(text in "[a-z 你好世界，]{0,30}") {
            let once = toks(&text, TokenScheme::CharCjkWordLatin);
            let again = toks(&once.join(" "), TokenScheme::CharCjkWordLatin);
            prop_assert_eq!(once, again);
        }
    }
}
