//! Answer metrics: containment accuracy and token-level F1.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

/// Lowercases, replaces punctuation with spaces and collapses whitespace.
pub fn normalize(text: &str) -> String {
    let cleaned: String = text
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// 1 if any normalized gold answer occurs in the normalized prediction.
pub fn accuracy(prediction: &str, answers: &[String]) -> f64 {
    let p = normalize(prediction);
    if p.is_empty() {
        return 0.0;
    }
    let hit = answers.iter().any(|a| {
        let a = normalize(a);
        !a.is_empty() && p.contains(&a)
    });
    if hit {
        1.0
    } else {
        0.0
    }
}

fn token_f1(prediction: &str, answer: &str) -> f64 {
    let p = normalize(prediction);
    let a = normalize(answer);
    let mut counts: BTreeMap<&str, i64> = BTreeMap::new();
    for t in a.split_whitespace() {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0;
    for t in p.split_whitespace() {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.split_whitespace().count() as f64;
    let recall = common as f64 / a.split_whitespace().count() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Best token-overlap F1 against any gold answer.
pub fn f1(prediction: &str, answers: &[String]) -> f64 {
    answers.iter().map(|a| token_f1(prediction, a)).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;
    use proptest::prelude::*;

    fn gold(a: &[&str]) -> Vec<String> {
        a.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy("the answer is paris", &gold(&["Paris"])), 1.0);
        assert_eq!(accuracy("london", &gold(&["Paris"])), 0.0);
        assert_eq!(accuracy("", &gold(&["Paris"])), 0.0);
        assert_eq!(accuracy("Paris!", &gold(&["paris"])), 1.0);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1("new york city", &gold(&["New York City"])), 1.0);
        assert_eq!(f1("x y", &gold(&["a b"])), 0.0);
        assert!((f1("a b", &gold(&["a c"])) - 0.5).abs() < 1e-12);
        assert_eq!(f1("a", &gold(&["b", "a"])), 1.0);
        assert_eq!(f1("", &gold(&["a"])), 0.0);
    }

    #[test]
    fn normalize_strips_punctuation() {
        assert_eq!(normalize("  Hello,   World. "), "hello world");
        assert_eq!(normalize(&vec!["A"; 3].join("-")), "a a a");
    }

    proptest! {
        #[test]
        fn scores_stay_in_unit_range(p in "[a-c ,.]{0,12}", a in "[a-c ]{1,8}") {
            let gold = vec![a];
            let (acc, f) = (accuracy(&p, &gold), f1(&p, &gold));
            prop_assert!(acc == 0.0 || acc == 1.0);
            prop_assert!((0.0..=1.0).contains(&f));
        }

        #[test]
        fn an_answer_matches_itself(a in "[a-z]{1,5}( [a-z]{1,5}){0,3}") {
            let gold = vec![a.clone()];
            prop_assert_eq!(accuracy(&a, &gold), 1.0);
            prop_assert!((f1(&a, &gold) - 1.0).abs() < 1e-12);
        }
    }
}
