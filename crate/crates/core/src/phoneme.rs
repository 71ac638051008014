//! Phoneme inventory, entity database and posteriorgram files.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::neural::Tensor;

pub const PAD: usize = 0;
pub const BLANK: usize = 1;
pub const PAD_SYMBOL: &str = "[PAD]";
pub const BLANK_SYMBOL: &str = "[BLANK]";

pub const DEFAULT_MAX_SLOT_LEN: usize = 10;
pub const DEFAULT_MAX_SPEECH_LEN: usize = 40;

/// Ordered phoneme symbols. Index 0 is `[PAD]`, index 1 is `[BLANK]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhonemeInventory {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl PhonemeInventory {
    /// Builds an inventory from the non-reserved symbols, prepending `[PAD]` and `[BLANK]`.
    pub fn new<S: AsRef<str>>(symbols: &[S]) -> Result<Self> {
        let mut all = vec![PAD_SYMBOL.to_string(), BLANK_SYMBOL.to_string()];
        all.extend(symbols.iter().map(|s| s.as_ref().to_string()));
        Self::from_full(all)
    }

    fn from_full(symbols: Vec<String>) -> Result<Self> {
        if symbols.len() < 3 {
            return Err(Error::Data(
                "inventory needs at least one phoneme besides [PAD] and [BLANK]".into(),
            ));
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("invalid phoneme symbol {s:?}")));
            }
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate phoneme '{s}'")));
            }
        }
        Ok(PhonemeInventory { symbols, index })
    }

    /// `n` synthetic symbols `p00`, `p01`, ...
    pub fn synthetic(n: usize) -> Result<Self> {
        let width = (n.max(2) - 1).to_string().len().max(2);
        let syms: Vec<String> = (0..n).map(|i| format!("p{i:0width$}")).collect();
        Self::new(&syms)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn symbol(&self, idx: usize) -> Option<&str> {
        self.symbols.get(idx).map(String::as_str)
    }

    pub fn lookup(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    /// Indices of real phonemes (everything except PAD and BLANK).
    pub fn phoneme_ids(&self) -> std::ops::Range<usize> {
        2..self.symbols.len()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for sym in &self.symbols {
            s.push_str(sym);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut symbols: Vec<String> = Vec::new();
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let tok = line.trim();
            if tok.is_empty() {
                continue;
            }
            if let Some(first) = seen.insert(tok, n + 1) {
                return Err(Error::Data(format!(
                    "duplicate phoneme '{tok}' at line {} (first seen at line {first})",
                    n + 1
                )));
            }
            symbols.push(tok.to_string());
        }
        let has_pad = seen.contains_key(PAD_SYMBOL);
        let has_blank = seen.contains_key(BLANK_SYMBOL);
        match (has_pad, has_blank) {
            (false, false) => {
                let mut all = vec![PAD_SYMBOL.to_string(), BLANK_SYMBOL.to_string()];
                all.extend(symbols);
                Self::from_full(all)
            }
            (true, false) if symbols[0] == PAD_SYMBOL => {
                symbols.insert(1, BLANK_SYMBOL.to_string());
                Self::from_full(symbols)
            }
            _ if symbols.first().map(String::as_str) == Some(PAD_SYMBOL)
                && symbols.get(1).map(String::as_str) == Some(BLANK_SYMBOL) =>
            {
                Self::from_full(symbols)
            }
            _ => Err(Error::Data(format!(
                "{PAD_SYMBOL} and {BLANK_SYMBOL} must be the first two symbols when present"
            ))),
        }
    }
}

pub fn load_inventory(path: &Path) -> Result<PhonemeInventory> {
    let text = read_text(path)?;
    PhonemeInventory::parse(&text).map_err(|e| with_path(e, path))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    String::from_utf8(bytes).map_err(|_| Error::Data(format!("{} is not UTF-8", path.display())))
}

pub(crate) fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entity {
    pub id: String,
    pub phonemes: Vec<usize>,
    pub surface: Option<String>,
}

/// Closed set of candidate slot values, in file order.
#[derive(Debug, Clone, Default)]
pub struct EntityDb {
    entities: Vec<Entity>,
    index: HashMap<String, usize>,
}

impl EntityDb {
    pub fn new(entities: Vec<Entity>, inv: &PhonemeInventory, max_slot_len: usize) -> Result<Self> {
        let mut index = HashMap::with_capacity(entities.len());
        for (pos, e) in entities.iter().enumerate() {
            validate_entity(e, inv, max_slot_len)?;
            if index.insert(e.id.clone(), pos).is_some() {
                return Err(Error::Data(format!("duplicate entity id '{}'", e.id)));
            }
        }
        Ok(EntityDb { entities, index })
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn get(&self, id: &str) -> Option<&Entity> {
        self.index.get(id).map(|&i| &self.entities[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Entity> {
        self.entities.iter()
    }

    pub fn max_len(&self) -> usize {
        self.entities.iter().map(|e| e.phonemes.len()).max().unwrap_or(0)
    }

    pub fn to_text(&self, inv: &PhonemeInventory) -> String {
        let mut s = String::new();
        for e in &self.entities {
            let toks: Vec<&str> = e.phonemes.iter().map(|&p| inv.symbol(p).expect("validated")).collect();
            let _ = write!(s, "{}\t{}", e.id, toks.join(" "));
            if let Some(surface) = &e.surface {
                let _ = write!(s, "\t{surface}");
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, inv: &PhonemeInventory, max_slot_len: usize) -> Result<Self> {
        let mut entities = Vec::new();
        let mut seen: HashMap<String, usize> = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let lineno = n + 1;
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let mut fields = line.split('\t');
            let id = fields.next().unwrap_or("").trim();
            let toks = fields
                .next()
                .ok_or_else(|| Error::Data(format!("missing tab separator at line {lineno}")))?;
            let surface = fields.next().map(|s| s.to_string());
            if id.is_empty() {
                return Err(Error::Data(format!("empty entity id at line {lineno}")));
            }
            let phonemes = parse_tokens(toks, inv, lineno)?;
            if let Some(prev) = seen.insert(id.to_string(), lineno) {
                return Err(Error::Data(format!(
                    "duplicate entity id '{id}' at line {lineno} (first at line {prev})"
                )));
            }
            let e = Entity {
                id: id.to_string(),
                phonemes,
                surface,
            };
            validate_entity(&e, inv, max_slot_len).map_err(|err| Error::Data(format!("{err} at line {lineno}")))?;
            entities.push(e);
        }
        EntityDb::new(entities, inv, max_slot_len)
    }
}

/// Space-separated phoneme tokens to indices. PAD and BLANK are not allowed.
pub(crate) fn parse_tokens(text: &str, inv: &PhonemeInventory, lineno: usize) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|tok| match inv.lookup(tok) {
            Some(PAD) | Some(BLANK) => Err(Error::Data(format!("reserved symbol '{tok}' line {lineno}"))),
            Some(i) => Ok(i),
            None => Err(Error::Data(format!("unknown phoneme '{tok}' line {lineno}"))),
        })
        .collect()
}

fn validate_entity(e: &Entity, inv: &PhonemeInventory, max_slot_len: usize) -> Result<()> {
    if e.phonemes.is_empty() || e.phonemes.len() > max_slot_len {
        return Err(Error::Data(format!(
            "entity '{}' has {} phonemes (allowed 1..={max_slot_len})",
            e.id,
            e.phonemes.len()
        )));
    }
    if let Some(&bad) = e.phonemes.iter().find(|&&p| p <= BLANK || p >= inv.len()) {
        return Err(Error::Data(format!(
            "entity '{}' uses invalid phoneme index {bad}",
            e.id
        )));
    }
    Ok(())
}

pub fn load_entity_db(path: &Path, inv: &PhonemeInventory, max_slot_len: usize) -> Result<EntityDb> {
    let text = read_text(path)?;
    EntityDb::parse(&text, inv, max_slot_len).map_err(|e| with_path(e, path))
}

/// `T×P` matrix of per-frame phoneme distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct Posteriorgram {
    frames: Tensor<f32>,
}

pub const ROW_SUM_TOL: f32 = 1e-5;

impl Posteriorgram {
    pub fn new(frames: Tensor<f32>) -> Result<Self> {
        if frames.shape().len() != 2 {
            return Err(Error::Data(format!(
                "posteriorgram must be 2-D, got shape {:?}",
                frames.shape()
            )));
        }
        for t in 0..frames.rows() {
            let row = frames.row(t);
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Data(format!("frame {t} has entries outside [0, 1]")));
            }
            let s: f32 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Data(format!("frame {t} sums to {s}")));
            }
        }
        Ok(Posteriorgram { frames })
    }

    pub fn frames(&self) -> &Tensor<f32> {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn num_phonemes(&self) -> usize {
        self.frames.cols()
    }

    pub fn row(&self, t: usize) -> &[f32] {
        self.frames.row(t)
    }

    /// Index of the most probable phoneme in frame `t`; ties go to the lower index.
    pub fn argmax(&self, t: usize) -> usize {
        let row = self.row(t);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        best
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + 4 * self.frames.len());
        out.extend_from_slice(PG_MAGIC);
        out.push(PG_VERSION);
        out.extend_from_slice(&(self.num_frames() as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_phonemes() as u32).to_le_bytes());
        for v in self.frames.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], inv: &PhonemeInventory) -> Result<Self> {
        let eof = || Error::Data("unexpected end of file".into());
        if bytes.len() < 13 {
            return Err(eof());
        }
        if &bytes[..4] != PG_MAGIC {
            return Err(Error::Data("bad posteriorgram magic".into()));
        }
        if bytes[4] != PG_VERSION {
            return Err(Error::Data(format!("unsupported posteriorgram version {}", bytes[4])));
        }
        let t = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let p = u32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes")) as usize;
        if p != inv.len() {
            return Err(Error::Data(format!(
                "posteriorgram has {p} phonemes, inventory has {}",
                inv.len()
            )));
        }
        if t == 0 {
            return Err(Error::Data("posteriorgram has no frames".into()));
        }
        let payload = &bytes[13..];
        if payload.len() < 4 * t * p {
            return Err(eof());
        }
        if payload.len() > 4 * t * p {
            return Err(Error::Data("trailing bytes after posteriorgram payload".into()));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Posteriorgram::new(Tensor::new(vec![t, p], data)?)
    }
}

pub const PG_MAGIC: &[u8; 4] = b"S2SP";
pub const PG_VERSION: u8 = 0x01;

pub fn write_posteriorgram(path: &Path, pg: &Posteriorgram) -> Result<()> {
    std::fs::write(path, pg.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_posteriorgram(path: &Path, inv: &PhonemeInventory) -> Result<Posteriorgram> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Posteriorgram::from_bytes(&bytes, inv).map_err(|e| with_path(e, path))
}

/// Noiseless posteriorgram: frame `t` is one-hot at `phonemes[t]`.
pub fn one_hot_sequence(phonemes: &[usize], inv: &PhonemeInventory) -> Result<Posteriorgram> {
    if phonemes.is_empty() {
        return Err(Error::Data(
            "cannot build a posteriorgram from an empty sequence".into(),
        ));
    }
    let p = inv.len();
    let mut data = vec![0.0f32; phonemes.len() * p];
    for (t, &ph) in phonemes.iter().enumerate() {
        if ph >= p {
            return Err(Error::Data(format!("phoneme index {ph} outside inventory of {p}")));
        }
        data[t * p + ph] = 1.0;
    }
    Posteriorgram::new(Tensor::new(vec![phonemes.len(), p], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn inv() -> PhonemeInventory {
        PhonemeInventory::new(&["a", "b", "c", "d"]).unwrap()
    }

    #[test]
    fn inventory_prepends_reserved() {
        let i = PhonemeInventory::parse("a\nb\n").unwrap();
        assert_eq!(i.symbols(), &["[PAD]", "[BLANK]", "a", "b"]);
    }

    #[test]
    fn inventory_with_reserved_first_unchanged() {
        let i = PhonemeInventory::parse("[PAD]\n[BLANK]\nx\n").unwrap();
        assert_eq!(i.symbols(), &["[PAD]", "[BLANK]", "x"]);
        let i = PhonemeInventory::parse("[PAD]\nx\n").unwrap();
        assert_eq!(i.symbols(), &["[PAD]", "[BLANK]", "x"]);
        assert!(PhonemeInventory::parse("x\n[PAD]\n").is_err());
    }

    #[test]
    fn inventory_duplicate_reports_second_line() {
        let err = PhonemeInventory::parse("a\nb\na\n").unwrap_err().to_string();
        assert!(err.contains("'a' at line 3"), "{err}");
    }

    #[test]
    fn synthetic_inventory_names() {
        let i = PhonemeInventory::synthetic(60).unwrap();
        assert_eq!(i.len(), 62);
        assert_eq!(i.symbol(2), Some("p00"));
        assert_eq!(i.symbol(61), Some("p59"));
    }

    #[test]
    fn entity_db_parsing() {
        let db = EntityDb::parse("# places\ne1\ta b c\n", &inv(), 10).unwrap();
        assert_eq!(db.len(), 1);
        assert_eq!(db.get("e1").unwrap().phonemes, vec![2, 3, 4]);
        assert!(EntityDb::parse("# nothing\n", &inv(), 10).unwrap().is_empty());
        let err = EntityDb::parse("e1\ta q\n", &inv(), 10).unwrap_err().to_string();
        assert!(err.contains("unknown phoneme 'q' line 1"), "{err}");
        let err = EntityDb::parse("e1\ta\ne1\tb\n", &inv(), 10).unwrap_err().to_string();
        assert!(err.contains("duplicate entity id 'e1'"), "{err}");
        assert!(EntityDb::parse("e1\t[PAD] a\n", &inv(), 10).is_err());
        assert!(EntityDb::parse("e1\ta a a\n", &inv(), 2).is_err());
        assert!(EntityDb::parse("e1\t\n", &inv(), 10).is_err());
    }

    #[test]
    fn entity_db_text_round_trip() {
        let text = "x\ta b\tfoo\ny\td\n";
        let db = EntityDb::parse(text, &inv(), 10).unwrap();
        assert_eq!(db.to_text(&inv()), text);
    }

    #[test]
    fn one_hot_rows() {
        let i = inv();
        let pg = one_hot_sequence(&[2, 3], &i).unwrap();
        assert_eq!(pg.num_frames(), 2);
        assert_eq!(pg.row(0), &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(pg.row(1), &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        for t in 0..2 {
            assert_eq!(pg.row(t).iter().sum::<f32>(), 1.0);
        }
        assert!(one_hot_sequence(&[], &i).is_err());
    }

    #[test]
    fn posteriorgram_file_errors() {
        let i = inv();
        let bytes = one_hot_sequence(&[2, 5], &i).unwrap().to_bytes();
        let err = Posteriorgram::from_bytes(&bytes[..bytes.len() - 3], &i).unwrap_err();
        assert!(err.to_string().contains("unexpected end of file"));
        let other = PhonemeInventory::new(&["a"]).unwrap();
        assert!(Posteriorgram::from_bytes(&bytes, &other).is_err());
        let mut bad = bytes.clone();
        bad[1] = b'?';
        assert!(Posteriorgram::from_bytes(&bad, &i).is_err());
        let mut bad = bytes;
        bad[4] = 9;
        assert!(Posteriorgram::from_bytes(&bad, &i).is_err());
    }

    #[test]
    fn rows_must_be_distributions() {
        let t = Tensor::new(vec![1, 3], vec![0.5f32, 0.2, 0.2]).unwrap();
        assert!(Posteriorgram::new(t).is_err());
        let t = Tensor::new(vec![1, 3], vec![1.5f32, -0.5, 0.0]).unwrap();
        assert!(Posteriorgram::new(t).is_err());
    }

    proptest! {
        #[test]
        fn posteriorgram_bytes_round_trip(raw in proptest::collection::vec(
            proptest::collection::vec(0.0f32..1.0, 6), 1..12)) {
            let i = inv();
            let mut data = Vec::new();
            for row in &raw {
                let s: f32 = row.iter().sum::<f32>() + 1e-3;
                data.extend(row.iter().map(|v| (v + 1e-3 / 6.0) / s));
            }
            let Ok(pg) = Posteriorgram::new(Tensor::new(vec![raw.len(), 6], data).unwrap()) else {
                return Ok(());
            };
            let bytes = pg.to_bytes();
            let back = Posteriorgram::from_bytes(&bytes, &i).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
