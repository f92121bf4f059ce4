//! Seeded synthesis of invoice contents.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::docmodel::FieldLabel;

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("lexicon `{0}` is empty")]
    Empty(&'static str),
    #[error("lexicon `{name}` line {line}: {reason}")]
    BadEntry {
        name: &'static str,
        line: usize,
        reason: String,
    },
    #[error("reading lexicon {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Amount of money in cents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Cents(pub i64);

impl Cents {
    /// `"{units},{cents:02} {symbol}"`, comma decimal separator, no grouping.
    pub fn render(self, symbol: char) -> String {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        format!("{sign}{},{:02} {symbol}", abs / 100, abs % 100)
    }
}

impl fmt::Display for Cents {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}", self.0 / 100, (self.0 % 100).abs())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineItem {
    pub name: String,
    pub quantity: u32,
    pub unit_price: Cents,
    pub amount: Cents,
}

mod date_format {
    use chrono::NaiveDate;
    use serde::{Deserialize, Deserializer, Serializer};

    pub const FORMAT: &str = "%d.%m.%Y";

    pub fn serialize<S: Serializer>(d: &NaiveDate, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(&d.format(FORMAT))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<NaiveDate, D::Error> {
        let s = String::deserialize(d)?;
        NaiveDate::parse_from_str(&s, FORMAT).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvoiceRecord {
    pub company_name: String,
    pub company_address: Vec<String>,
    pub invoice_number: String,
    #[serde(with = "date_format")]
    pub invoice_date: NaiveDate,
    pub line_items: Vec<LineItem>,
    pub invoice_amount: Cents,
    pub currency_symbol: char,
}

pub const MAX_LINE_ITEMS: usize = 8;
pub const DEFAULT_CURRENCY: char = '€';

impl InvoiceRecord {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("record serializes");
        s.push('\n');
        s
    }

    pub fn formatted_date(&self) -> String {
        self.invoice_date.format(date_format::FORMAT).to_string()
    }

    /// Lists every broken record invariant.
    pub fn check(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if !(2..=3).contains(&self.company_address.len()) {
            bad.push(format!("address has {} lines", self.company_address.len()));
        }
        if !(1..=MAX_LINE_ITEMS).contains(&self.line_items.len()) {
            bad.push(format!("{} line items", self.line_items.len()));
        }
        let num_ok = self
            .invoice_number
            .strip_prefix("INV-")
            .is_some_and(|d| d.len() == 6 && d.bytes().all(|c| c.is_ascii_digit()));
        if !num_ok {
            bad.push(format!("invoice number {:?}", self.invoice_number));
        }
        for (i, item) in self.line_items.iter().enumerate() {
            if item.quantity == 0 {
                bad.push(format!("item {i}: zero quantity"));
            }
            if item.amount.0 != item.unit_price.0 * i64::from(item.quantity) {
                bad.push(format!("item {i}: amount != quantity x unit price"));
            }
        }
        let total: i64 = self.line_items.iter().map(|i| i.amount.0).sum();
        if total != self.invoice_amount.0 {
            bad.push(format!(
                "invoice amount {} != item sum {}",
                self.invoice_amount.0, total
            ));
        }
        bad
    }
}

/// Word lists the generator draws from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicons {
    pub company_names: Vec<String>,
    pub street_names: Vec<String>,
    pub cities: Vec<String>,
    pub products: Vec<String>,
}

const LEXICON_FILES: [&str; 4] = ["companies", "streets", "cities", "products"];

impl Lexicons {
    /// The word lists shipped with the crate.
    pub fn builtin() -> Lexicons {
        Lexicons::from_sources([
            include_str!("../lexicons/companies.txt"),
            include_str!("../lexicons/streets.txt"),
            include_str!("../lexicons/cities.txt"),
            include_str!("../lexicons/products.txt"),
        ])
        .expect("shipped lexicons are valid")
    }

    /// Reads `companies.txt`, `streets.txt`, `cities.txt` and `products.txt`
    /// from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Lexicons, LexiconError> {
        let mut texts = Vec::with_capacity(4);
        for name in LEXICON_FILES {
            let path = dir.join(format!("{name}.txt"));
            let text = fs::read_to_string(&path).map_err(|source| LexiconError::Io {
                path: path.display().to_string(),
                source,
            })?;
            texts.push(text);
        }
        Lexicons::from_sources([&texts[0], &texts[1], &texts[2], &texts[3]])
    }

    fn from_sources(texts: [&str; 4]) -> Result<Lexicons, LexiconError> {
        let mut lists = Vec::with_capacity(4);
        for (name, text) in LEXICON_FILES.into_iter().zip(texts) {
            lists.push(parse_lexicon(name, text)?);
        }
        let products = lists.pop().unwrap();
        let cities = lists.pop().unwrap();
        let street_names = lists.pop().unwrap();
        let company_names = lists.pop().unwrap();
        Ok(Lexicons {
            company_names,
            street_names,
            cities,
            products,
        })
    }

    pub fn validate(&self) -> Result<(), LexiconError> {
        for (name, list) in LEXICON_FILES.into_iter().zip([
            &self.company_names,
            &self.street_names,
            &self.cities,
            &self.products,
        ]) {
            if list.is_empty() {
                return Err(LexiconError::Empty(name));
            }
        }
        Ok(())
    }

    /// SHA-256 over all entries, for corpus provenance.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for list in [
            &self.company_names,
            &self.street_names,
            &self.cities,
            &self.products,
        ] {
            for entry in list {
                h.update(entry.as_bytes());
                h.update(b"\n");
            }
            h.update(b"\x00");
        }
        hex::encode(h.finalize())
    }
}

fn parse_lexicon(name: &'static str, text: &str) -> Result<Vec<String>, LexiconError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: &str| LexiconError::BadEntry {
            name,
            line: i + 1,
            reason: reason.to_string(),
        };
        if line.chars().any(char::is_control) {
            return Err(bad("control character"));
        }
        if line.contains("  ") {
            return Err(bad("repeated space"));
        }
        out.push(line.to_string());
    }
    if out.is_empty() {
        return Err(LexiconError::Empty(name));
    }
    Ok(out)
}

fn pick<'a>(rng: &mut ChaCha8Rng, list: &'a [String]) -> &'a str {
    &list[rng.random_range(0..list.len())]
}

/// Draws one invoice. Identical `(seed, lexicons)` give identical records.
pub fn synth_record(seed: u64, lexicons: &Lexicons) -> Result<InvoiceRecord, LexiconError> {
    lexicons.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let company_name = pick(&mut rng, &lexicons.company_names).to_string();

    let mut company_address = vec![
        format!(
            "{} {}",
            pick(&mut rng, &lexicons.street_names),
            rng.random_range(1..=199u32)
        ),
        format!(
            "{:05} {}",
            rng.random_range(1000..=99999u32),
            pick(&mut rng, &lexicons.cities)
        ),
    ];
    if rng.random_bool(0.4) {
        company_address.push(format!("PO Box {}", rng.random_range(100..=9999u32)));
    }

    let invoice_number = format!("INV-{:06}", rng.random_range(0..=999_999u32));

    let epoch = NaiveDate::from_ymd_opt(2015, 1, 1).unwrap();
    let invoice_date = epoch + Days::new(rng.random_range(0..3653u64));

    let n_items = rng.random_range(1..=MAX_LINE_ITEMS);
    let line_items: Vec<LineItem> = (0..n_items)
        .map(|_| {
            let name = pick(&mut rng, &lexicons.products).to_string();
            let quantity = rng.random_range(1..=99u32);
            let unit_price = Cents(rng.random_range(50..=49_999i64));
            LineItem {
                name,
                quantity,
                unit_price,
                amount: Cents(unit_price.0 * i64::from(quantity)),
            }
        })
        .collect();
    let invoice_amount = Cents(line_items.iter().map(|i| i.amount.0).sum());

    Ok(InvoiceRecord {
        company_name,
        company_address,
        invoice_number,
        invoice_date,
        line_items,
        invoice_amount,
        currency_symbol: DEFAULT_CURRENCY,
    })
}

/// Ground-truth strings per label. Header labels map to one value, item
/// labels to one value per line item. Multi-line values are space-joined.
pub fn record_to_field_values(record: &InvoiceRecord) -> BTreeMap<FieldLabel, Vec<String>> {
    let sym = record.currency_symbol;
    let mut m = BTreeMap::new();
    m.insert(FieldLabel::CompanyName, vec![record.company_name.clone()]);
    m.insert(
        FieldLabel::CompanyAddress,
        vec![record.company_address.join(" ")],
    );
    m.insert(
        FieldLabel::InvoiceNumber,
        vec![record.invoice_number.clone()],
    );
    m.insert(
        FieldLabel::InvoiceAmount,
        vec![record.invoice_amount.render(sym)],
    );
    m.insert(FieldLabel::InvoiceDate, vec![record.formatted_date()]);
    m.insert(
        FieldLabel::ItemName,
        record.line_items.iter().map(|i| i.name.clone()).collect(),
    );
    m.insert(
        FieldLabel::ItemQuantity,
        record
            .line_items
            .iter()
            .map(|i| i.quantity.to_string())
            .collect(),
    );
    m.insert(
        FieldLabel::ItemAmount,
        record
            .line_items
            .iter()
            .map(|i| i.amount.render(sym))
            .collect(),
    );
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cents_rendering() {
        assert_eq!(Cents(1250).render('€'), "12,50 €");
        assert_eq!(Cents(5).render('€'), "0,05 €");
        assert_eq!(Cents(123_456_700).render('$'), "1234567,00 $");
    }

    #[test]
    fn deterministic() {
        let lex = Lexicons::builtin();
        let a = synth_record(7, &lex).unwrap().to_json();
        let b = synth_record(7, &lex).unwrap().to_json();
        assert_eq!(a, b);
        assert_ne!(a, synth_record(8, &lex).unwrap().to_json());
    }

    #[test]
    fn empty_lexicon_rejected() {
        let mut lex = Lexicons::builtin();
        lex.cities.clear();
        assert!(matches!(
            synth_record(1, &lex),
            Err(LexiconError::Empty("cities"))
        ));
        assert!(matches!(
            parse_lexicon("products", "# only a comment\n\n"),
            Err(LexiconError::Empty("products"))
        ));
    }

    #[test]
    fn lexicon_comments_and_bad_lines() {
        let v = parse_lexicon("cities", "# c\n Berlin \n\nKiel\n").unwrap();
        assert_eq!(v, vec!["Berlin", "Kiel"]);
        assert!(matches!(
            parse_lexicon("cities", "Bad  City\n"),
            Err(LexiconError::BadEntry { line: 1, .. })
        ));
    }

    #[test]
    fn field_values_shape() {
        let lex = Lexicons::builtin();
        let mut rec = synth_record(3, &lex).unwrap();
        rec.line_items.truncate(1);
        let item = rec.line_items[0].clone();
        rec.line_items = vec![item.clone(), item.clone(), item];
        rec.invoice_amount = Cents(rec.line_items.iter().map(|i| i.amount.0).sum());
        rec.invoice_date = NaiveDate::from_ymd_opt(2021, 3, 7).unwrap();
        let m = record_to_field_values(&rec);
        assert_eq!(m[&FieldLabel::ItemName].len(), 3);
        assert_eq!(m[&FieldLabel::CompanyName].len(), 1);
        assert_eq!(m[&FieldLabel::InvoiceDate], vec!["07.03.2021"]);
        assert!(m[&FieldLabel::InvoiceAmount][0].ends_with(" €"));
    }

    #[test]
    fn record_json_round_trip() {
        let rec = synth_record(99, &Lexicons::builtin()).unwrap();
        let back: InvoiceRecord = serde_json::from_str(&rec.to_json()).unwrap();
        assert_eq!(back, rec);
    }
}
