//! Interaction records and their rendering into prompt text.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_HISTORY: usize = 2;

/// One (domain, user, item, label) sample with its textual features.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    #[serde(rename = "domain")]
    pub domain_name: String,
    pub user_id: String,
    /// Titles of recently clicked items, most recent last.
    pub history: Vec<String>,
    pub item_id: String,
    pub title: String,
    pub brand: String,
    pub price: String,
    pub label: u8,
}

impl InteractionRecord {
    pub fn validate(&self) -> Result<()> {
        for (field, value) in [
            ("domain", &self.domain_name),
            ("user_id", &self.user_id),
            ("item_id", &self.item_id),
            ("title", &self.title),
        ] {
            if value.trim().is_empty() {
                return Err(Error::Validation(format!("missing field `{field}`")));
            }
        }
        if self.label > 1 {
            return Err(Error::Validation(format!("label {} is not 0 or 1", self.label)));
        }
        Ok(())
    }

    /// Keeps only the `max` most recent history entries.
    pub fn truncate_history(&mut self, max: usize) {
        if self.history.len() > max {
            self.history.drain(..self.history.len() - max);
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// Every field, in the sentence template.
    #[default]
    Full,
    /// Domain, user and item identifiers plus the item title.
    IdName,
    /// Domain, user and item identifiers only.
    IdOnly,
}

impl std::str::FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(PromptMode::Full),
            "id_name" | "id+name" => Ok(PromptMode::IdName),
            "id_only" | "id-only" => Ok(PromptMode::IdOnly),
            _ => Err(Error::Config(format!("unknown prompt_mode `{s}`"))),
        }
    }
}

pub fn render_prompt(rec: &InteractionRecord, mode: PromptMode) -> Result<String> {
    rec.validate()?;
    let mut out = String::new();
    match mode {
        PromptMode::Full => {
            write!(out, "{}: The user ID is user_{}, ", rec.domain_name, rec.user_id).unwrap();
            if rec.history.is_empty() {
                out.push_str("who has no recent clicks.");
            } else {
                out.push_str("who clicked ");
                let n = rec.history.len();
                for (i, title) in rec.history.iter().enumerate() {
                    if i > 0 {
                        out.push_str(if i + 1 == n { " and " } else { ", " });
                    }
                    write!(out, "product '{title}'").unwrap();
                }
                out.push_str(" recently.");
            }
            write!(
                out,
                " The ID of the current product is product_{}, the title is {}, the brand is {}, the price is {}.",
                rec.item_id, rec.title, rec.brand, rec.price
            )
            .unwrap();
        }
        PromptMode::IdName => {
            write!(
                out,
                "{}: user_{} product_{} {}",
                rec.domain_name, rec.user_id, rec.item_id, rec.title
            )
            .unwrap();
        }
        PromptMode::IdOnly => {
            write!(out, "{}: user_{} product_{}", rec.domain_name, rec.user_id, rec.item_id).unwrap();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gift_card() -> InteractionRecord {
        InteractionRecord {
            domain_name: "Gift Cards".into(),
            user_id: "u1".into(),
            history: vec!["Harmonicas (12 ct)".into()],
            item_id: "p9".into(),
            title: "Gift Card $25".into(),
            brand: "Fun Express".into(),
            price: "25.00".into(),
            label: 1,
        }
    }

    #[test]
    fn full_template_single_history_item() {
        let text = render_prompt(&gift_card(), PromptMode::Full).unwrap();
        assert!(text.starts_with(
            "Gift Cards: The user ID is user_u1, who clicked product 'Harmonicas (12 ct)' recently. \
             The ID of the current product is product_p9, "
        ));
        assert_eq!(
            text,
            "Gift Cards: The user ID is user_u1, who clicked product 'Harmonicas (12 ct)' recently. \
             The ID of the current product is product_p9, the title is Gift Card $25, \
             the brand is Fun Express, the price is 25.00."
        );
    }

    #[test]
    fn full_template_two_history_items() {
        let mut r = gift_card();
        r.history = vec!["A".into(), "B".into()];
        let text = render_prompt(&r, PromptMode::Full).unwrap();
        assert!(text.contains("who clicked product 'A' and product 'B' recently."));
    }

    #[test]
    fn empty_history_clause() {
        let mut r = gift_card();
        r.history.clear();
        let text = render_prompt(&r, PromptMode::Full).unwrap();
        assert!(text.contains("who has no recent clicks"));
        assert!(!text.contains("clicked product"));
    }

    #[test]
    fn distinct_fields_give_distinct_texts() {
        let base = gift_card();
        let mut variants = vec![base.clone()];
        for f in 0..3 {
            let mut r = base.clone();
            match f {
                0 => r.domain_name.push('x'),
                1 => r.user_id.push('x'),
                _ => r.item_id.push('x'),
            }
            variants.push(r);
        }
        let texts: std::collections::HashSet<_> = variants
            .iter()
            .map(|r| render_prompt(r, PromptMode::Full).unwrap())
            .collect();
        assert_eq!(texts.len(), variants.len());
    }

    #[test]
    fn missing_field_is_named() {
        let mut r = gift_card();
        r.title.clear();
        let err = render_prompt(&r, PromptMode::Full).unwrap_err();
        assert!(err.to_string().contains("title"));
    }

    #[test]
    fn ablation_modes_shrink() {
        let r = gift_card();
        let full = render_prompt(&r, PromptMode::Full).unwrap();
        let id_name = render_prompt(&r, PromptMode::IdName).unwrap();
        let id_only = render_prompt(&r, PromptMode::IdOnly).unwrap();
        assert_eq!(id_only, "Gift Cards: user_u1 product_p9");
        assert!(full.len() > id_name.len() && id_name.len() > id_only.len());
        assert_eq!(render_prompt(&r, PromptMode::IdName).unwrap(), id_name);
    }

    #[test]
    fn history_keeps_most_recent() {
        let mut r = gift_card();
        r.history = vec!["a".into(), "b".into(), "c".into()];
        r.truncate_history(2);
        assert_eq!(r.history, vec!["b".to_string(), "c".to_string()]);
    }
}
