use super::EvalError;

const ARTICLES: [&str; 3] = ["a ", "an ", "the "];

/// Lowercases, trims, collapses whitespace, strips leading articles and
/// trailing punctuation. Idempotent.
pub fn normalize_answer(text: &str) -> String {
    let mut s = text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ");
    loop {
        let before = s.len();
        s = s.trim_end_matches(|c: char| c.is_ascii_punctuation()).trim_end().to_string();
        while let Some(rest) = ARTICLES.iter().find_map(|a| s.strip_prefix(a)) {
            s = rest.trim_start().to_string();
        }
        if s.len() == before {
            return s;
        }
    }
}

/// Multi-annotator accuracy `min(matches / 3, 1)`; with fewer than three
/// gold answers, any match scores 1.
pub fn vqa_accuracy(predicted: &str, gold_answers: &[String]) -> Result<f64, EvalError> {
    if gold_answers.is_empty() {
        return Err(EvalError::EmptyGold);
    }
    let p = normalize_answer(predicted);
    let m = gold_answers.iter().filter(|g| normalize_answer(g) == p).count();
    Ok(if gold_answers.len() >= 3 {
        (m as f64 / 3.0).min(1.0)
    } else if m >= 1 {
        1.0
    } else {
        0.0
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn golds(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_answer("The Eiffel Tower."), "eiffel tower");
        assert_eq!(normalize_answer("  GOTHIC "), "gothic");
        assert_eq!(normalize_answer(""), "");
        assert_eq!(normalize_answer("an   apple!?"), "apple");
        assert_eq!(normalize_answer("the"), "the");
        assert_eq!(normalize_answer("theatre"), "theatre");
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(vqa_accuracy("gothic", &golds(&["gothic"; 10])).unwrap(), 1.0);
        let mut g = golds(&["baroque"; 8]);
        g.extend(golds(&["Gothic", "gothic."]));
        assert!((vqa_accuracy("gothic", &g).unwrap() - 2.0 / 3.0).abs() < 1e-9);
        assert_eq!(vqa_accuracy("baroque", &golds(&["gothic"; 10])).unwrap(), 0.0);
        assert_eq!(vqa_accuracy("x", &golds(&["x", "y"])).unwrap(), 1.0);
        assert_eq!(vqa_accuracy("z", &golds(&["x"])).unwrap(), 0.0);
        assert!(vqa_accuracy("x", &[]).is_err());
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "[ a-zA-Z.,!?]{0,24}") {
            let once = normalize_answer(&s);
            prop_assert_eq!(normalize_answer(&once), once);
        }

        #[test]
        fn accuracy_invariant_under_rewrites(
            word in "[a-z]{1,8}",
            upper in any::<bool>(),
            article in prop::sample::select(vec!["", "the ", "a ", "An "]),
            pad in " {0,3}",
            punct in prop::sample::select(vec!["", ".", "!", "?."]),
        ) {
            let gold = golds(&[&word, "other", &word, "x"]);
            let base = vqa_accuracy(&word, &gold).unwrap();
            let w = if upper { word.to_uppercase() } else { word.clone() };
            let rewritten = format!("{pad}{article}{w}{punct}{pad}");
            prop_assert_eq!(vqa_accuracy(&rewritten, &gold).unwrap(), base);
        }
    }
}
