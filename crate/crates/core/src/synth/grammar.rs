use super::{Category, LanguageSpec, WordOrder};

/// Whether `tokens` is a sentence of `spec`'s grammar. Unknown tokens reject.
pub fn is_grammatical(spec: &LanguageSpec, tokens: &[u32]) -> bool {
    let cats: Option<Vec<Category>> = tokens.iter().map(|&t| spec.category_of(t)).collect();
    cats.is_some_and(|c| accepts(spec, &c))
}

/// Recognizer over category sequences.
pub(super) fn accepts(spec: &LanguageSpec, cats: &[Category]) -> bool {
    if clause(spec, cats) {
        return true;
    }
    cats.iter().enumerate().any(|(i, c)| {
        *c == Category::Function && clause(spec, &cats[..i]) && clause(spec, &cats[i + 1..])
    })
}

fn clause(spec: &LanguageSpec, c: &[Category]) -> bool {
    let n = c.len();
    if n < 3 {
        return false;
    }
    match spec.order {
        WordOrder::Svo => {
            (1..n - 1).any(|v| c[v] == Category::Verb && np(spec, &c[..v]) && np(spec, &c[v + 1..]))
        }
        WordOrder::Sov => c[n - 1] == Category::Verb && two_nps(spec, &c[..n - 1]),
        WordOrder::Vso => c[0] == Category::Verb && two_nps(spec, &c[1..]),
    }
}

fn two_nps(spec: &LanguageSpec, c: &[Category]) -> bool {
    (1..c.len()).any(|k| np(spec, &c[..k]) && np(spec, &c[k..]))
}

fn np(spec: &LanguageSpec, c: &[Category]) -> bool {
    use Category::*;
    let c = match c.first() {
        Some(Function) => &c[1..],
        _ => c,
    };
    match c {
        [Noun] => true,
        [Modifier, Noun] => spec.modifier_before_noun,
        [Noun, Modifier] => !spec.modifier_before_noun,
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Category::*;

    fn spec(order: WordOrder, before: bool) -> LanguageSpec {
        LanguageSpec {
            tag: "x".into(),
            vocab: [vec![3], vec![4], vec![5], vec![6]],
            order,
            modifier_before_noun: before,
            zipf_exponent: 1.0,
            vocab_limit: 10,
            seed: 0,
        }
    }

    #[test]
    fn word_orders() {
        let svo = spec(WordOrder::Svo, true);
        assert!(accepts(&svo, &[Noun, Verb, Noun]));
        assert!(accepts(&svo, &[Function, Modifier, Noun, Verb, Noun]));
        assert!(!accepts(&svo, &[Noun, Noun, Verb]));
        assert!(!accepts(&svo, &[Noun, Modifier, Verb, Noun]));
        let sov = spec(WordOrder::Sov, false);
        assert!(accepts(&sov, &[Noun, Modifier, Noun, Verb]));
        assert!(!accepts(&sov, &[Modifier, Noun, Noun, Verb]));
        let vso = spec(WordOrder::Vso, true);
        assert!(accepts(
            &vso,
            &[Verb, Noun, Noun, Function, Verb, Function, Noun, Noun]
        ));
        assert!(!accepts(&vso, &[Verb, Noun, Noun, Function]));
    }

    #[test]
    fn unknown_token_rejects() {
        let s = spec(WordOrder::Svo, true);
        assert!(is_grammatical(&s, &[3, 4, 3]));
        assert!(!is_grammatical(&s, &[3, 4, 9]));
    }
}
