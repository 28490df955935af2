const SPLIT: [char; 5] = ['.', ',', '!', '?', '\''];

/// Lowercases, isolates `. , ! ? '` and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(text.len() + 8);
    for c in text.chars().flat_map(char::to_lowercase) {
        if SPLIT.contains(&c) {
            spaced.push(' ');
            spaced.push(c);
            spaced.push(' ');
        } else {
            spaced.push(c);
        }
    }
    spaced.split_whitespace().map(str::to_string).collect()
}

pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(tokenize("I don't like it!"), ["i", "don", "'", "t", "like", "it", "!"]);
        assert!(tokenize("").is_empty());
        assert!(tokenize("  \t\n").is_empty());
        assert_eq!(tokenize("Wait...what?"), ["wait", ".", ".", ".", "what", "?"]);
    }

    proptest! {
        #[test]
        fn joined_output_is_a_fixpoint(text in "[A-Za-z .,!?' ]{0,40}") {
            let once = tokenize(&text);
            prop_assert_eq!(tokenize(&detokenize(&once)), once);
        }

        #[test]
        fn round_trip_changes_only_case_and_spacing(text in "[A-Za-z .,!?']{0,40}") {
            let back = detokenize(&tokenize(&text));
            let squash = |s: &str| s.chars().filter(|c| !c.is_whitespace()).collect::<String>().to_lowercase();
            prop_assert_eq!(squash(&back), squash(&text));
        }
    }
}
