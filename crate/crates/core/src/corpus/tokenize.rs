/// Lowercases, treats every non-alphanumeric character as a separator and
/// splits on the resulting gaps.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(tokenize("A Red dog."), ["a", "red", "dog"]);
        assert_eq!(tokenize("dog  dog"), ["dog", "dog"]);
        assert_eq!(tokenize("Santa-hat!"), ["santa", "hat"]);
        assert!(tokenize(" ,.! ").is_empty());
    }

    proptest! {
        #[test]
        fn idempotent_on_own_output(s in "\\PC{0,40}") {
            let once = tokenize(&s);
            prop_assert_eq!(tokenize(&once.join(" ")), once);
        }
    }
}
