//! Recovery of Python-style lists from free-form model output.

/// A `[...]` span and its comma-separated items, quotes stripped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BracketList {
    pub start: usize,
    pub items: Vec<String>,
}

fn split_items(inner: &str) -> Vec<String> {
    let mut items = Vec::new();
    let mut current = String::new();
    let mut quote: Option<char> = None;
    for c in inner.chars() {
        match (quote, c) {
            (Some(q), c) if c == q => quote = None,
            (Some(_), c) => current.push(c),
            (None, '\'' | '"' | '`') => quote = Some(c),
            (None, ',') => {
                items.push(std::mem::take(&mut current));
            }
            (None, c) => current.push(c),
        }
    }
    items.push(current);
    let items: Vec<String> = items
        .into_iter()
        .map(|s| {
            s.trim()
                .trim_matches(|c: char| matches!(c, '\'' | '"' | '`' | '\u{2018}' | '\u{2019}' | '\u{201c}' | '\u{201d}'))
                .trim()
                .to_string()
        })
        .collect();
    if items.len() == 1 && items[0].is_empty() {
        Vec::new()
    } else {
        items
    }
}

/// All innermost bracketed spans in order of appearance.
pub fn bracket_lists(text: &str) -> Vec<BracketList> {
    let mut out = Vec::new();
    let mut open: Option<usize> = None;
    for (i, c) in text.char_indices() {
        match c {
            '[' => open = Some(i),
            ']' => {
                if let Some(start) = open.take() {
                    out.push(BracketList {
                        start,
                        items: split_items(&text[start + 1..i]),
                    });
                }
            }
            _ => {}
        }
    }
    out
}

/// The last list satisfying `accept` that follows the last `Answer:` marker;
/// failing that, the last acceptable list anywhere.
pub fn answer_list(text: &str, accept: impl Fn(&BracketList) -> bool) -> Option<Vec<String>> {
    let lists: Vec<BracketList> = bracket_lists(text).into_iter().filter(|l| accept(l)).collect();
    let marker = text.to_ascii_lowercase().rfind("answer:");
    if let Some(m) = marker {
        if let Some(l) = lists.iter().rev().find(|l| l.start > m) {
            return Some(l.items.clone());
        }
    }
    lists.last().map(|l| l.items.clone())
}
