//! On-disk formats: tabular fixtures, golden values, checkpoints, dataset
//! caches, corpus ingestion, and CSV helpers.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use piwo_core::data::{self, Dataset, TokenSequence, Vocab};
use piwo_core::neural::NeuralModel;
use piwo_core::objectives::VariationalModel;
use piwo_core::tabular::TabularModel;
use piwo_core::tape::Role;

#[derive(Debug)]
pub enum FormatError {
    Io(io::Error),
    /// Structural problem in a file, with a human-readable reason.
    Malformed { what: &'static str, reason: String },
    /// A loaded table violates a model invariant (named for diagnostics).
    InvariantViolated { invariant: &'static str, detail: String },
}

impl From<io::Error> for FormatError {
    fn from(e: io::Error) -> Self {
        FormatError::Io(e)
    }
}

impl std::fmt::Display for FormatError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FormatError::Io(e) => write!(f, "io error: {e}"),
            FormatError::Malformed { what, reason } => write!(f, "malformed {what}: {reason}"),
            FormatError::InvariantViolated { invariant, detail } => {
                write!(f, "invariant violated: {invariant}: {detail}")
            }
        }
    }
}

impl std::error::Error for FormatError {}

/// Write a file atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)
}

// ----------------------------------------------------------------------
// Tabular fixture format (.tab)
// ----------------------------------------------------------------------
//
//   piwo-tabular v1
//   dims <nz> <ny> <nx>
//   prior_z
//   <nz probabilities, 17 significant digits, space-separated>
//   gen_y_given_z      (nz rows of ny)
//   gen_x_given_yz     (ny*nz rows of nx)
//   inf_y_given_x      (nx rows of ny)
//   inf_z_given_x      (nx rows of nz)
//
// Rows are probabilities and must sum to 1 within 1e-12.

pub fn tabular_to_string(model: &TabularModel) -> String {
    let t = model.tables();
    let mut out = String::new();
    let _ = writeln!(out, "piwo-tabular v1");
    let _ = writeln!(out, "dims {} {} {}", t.nz, t.ny, t.nx);
    let table = |name: &str, data: &[f64], cols: usize, out: &mut String| {
        let _ = writeln!(out, "{name}");
        for row in data.chunks(cols) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            let _ = writeln!(out, "{}", cells.join(" "));
        }
    };
    table("prior_z", &t.p_z, t.nz, &mut out);
    table("gen_y_given_z", &t.p_y_z, t.ny, &mut out);
    table("gen_x_given_yz", &t.p_x_yz, t.nx, &mut out);
    table("inf_y_given_x", &t.q_y_x, t.ny, &mut out);
    table("inf_z_given_x", &t.q_z_x, t.nz, &mut out);
    out
}

pub fn tabular_from_string(text: &str) -> Result<TabularModel, FormatError> {
    let malformed = |reason: String| FormatError::Malformed {
        what: "tabular fixture",
        reason,
    };
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| malformed("empty file".into()))?;
    if header.trim() != "piwo-tabular v1" {
        return Err(malformed(format!("unknown header {header:?}")));
    }
    let dims_line = lines.next().ok_or_else(|| malformed("missing dims".into()))?;
    let dims: Vec<usize> = dims_line
        .trim()
        .strip_prefix("dims")
        .ok_or_else(|| malformed(format!("expected dims line, got {dims_line:?}")))?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| malformed(format!("bad dim {t:?}"))))
        .collect::<Result<_, _>>()?;
    let [nz, ny, nx]: [usize; 3] = dims
        .try_into()
        .map_err(|_| malformed("dims needs three entries".into()))?;

    let mut read_table = |name: &str, rows: usize, cols: usize| -> Result<Vec<f64>, FormatError> {
        let tag = lines
            .next()
            .ok_or_else(|| malformed(format!("missing table {name}")))?;
        if tag.trim() != name {
            return Err(malformed(format!("expected table {name}, got {tag:?}")));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let line = lines
                .next()
                .ok_or_else(|| malformed(format!("table {name} truncated at row {r}")))?;
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|t| {
                    t.parse()
                        .map_err(|_| malformed(format!("bad probability {t:?} in {name}")))
                })
                .collect::<Result<_, _>>()?;
            if row.len() != cols {
                return Err(malformed(format!(
                    "table {name} row {r} has {} entries, expected {cols}",
                    row.len()
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(FormatError::InvariantViolated {
                    invariant: "row-stochastic: every row sums to 1 within 1e-12",
                    detail: format!("table {name} row {r} sums to {sum}"),
                });
            }
            if row.iter().any(|p| *p < 0.0) {
                return Err(FormatError::InvariantViolated {
                    invariant: "probabilities are non-negative",
                    detail: format!("table {name} row {r}"),
                });
            }
            data.extend(row);
        }
        Ok(data)
    };

    let prior_z = read_table("prior_z", 1, nz)?;
    let gen_y = read_table("gen_y_given_z", nz, ny)?;
    let gen_x = read_table("gen_x_given_yz", ny * nz, nx)?;
    let inf_y = read_table("inf_y_given_x", nx, ny)?;
    let inf_z = read_table("inf_z_given_x", nx, nz)?;
    Ok(TabularModel::from_probs(
        nz, ny, nx, &prior_z, &gen_y, &gen_x, &inf_y, &inf_z,
    ))
}

pub fn save_tabular(path: &Path, model: &TabularModel) -> Result<(), FormatError> {
    write_atomic(path, tabular_to_string(model).as_bytes())?;
    Ok(())
}

pub fn load_tabular(path: &Path) -> Result<TabularModel, FormatError> {
    tabular_from_string(&fs::read_to_string(path)?)
}

// ----------------------------------------------------------------------
// Golden value files: `name value` per line, 17 significant digits.
// ----------------------------------------------------------------------

pub fn golden_to_string(values: &[(String, f64)]) -> String {
    let mut out = String::from("piwo-golden v1\n");
    for (name, v) in values {
        let _ = writeln!(out, "{name} {v:.16e}");
    }
    out
}

pub fn golden_from_string(text: &str) -> Result<Vec<(String, f64)>, FormatError> {
    let malformed = |reason: String| FormatError::Malformed {
        what: "golden file",
        reason,
    };
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| malformed("empty file".into()))?;
    if header.trim() != "piwo-golden v1" {
        return Err(malformed(format!("unknown header {header:?}")));
    }
    lines
        .map(|line| {
            let (name, value) = line
                .rsplit_once(' ')
                .ok_or_else(|| malformed(format!("bad line {line:?}")))?;
            let v: f64 = value
                .parse()
                .map_err(|_| malformed(format!("bad value {value:?}")))?;
            Ok((name.to_string(), v))
        })
        .collect()
}

// ----------------------------------------------------------------------
// Checkpoints: named parameter arrays with shapes and a config fingerprint.
// ----------------------------------------------------------------------

pub fn checkpoint_to_string(model: &NeuralModel) -> String {
    let store = model.params();
    let mut out = String::new();
    let _ = writeln!(out, "piwo-checkpoint v1");
    let _ = writeln!(out, "fingerprint {:016x}", model.config().fingerprint());
    let _ = writeln!(out, "blocks {}", store.n_blocks());
    for id in store.ids() {
        let (rows, cols) = store.dims(id);
        let role = match store.role(id) {
            Role::Theta => "theta",
            Role::Phi => "phi",
            Role::Shared => "shared",
        };
        let _ = writeln!(out, "block {} {role} {rows} {cols}", store.name(id));
        for row in store.slice(id).chunks(cols) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            let _ = writeln!(out, "{}", cells.join(" "));
        }
    }
    out
}

/// Load a checkpoint into an existing model; the architecture fingerprint
/// and every block shape must match.
pub fn checkpoint_into_model(text: &str, model: &mut NeuralModel) -> Result<(), FormatError> {
    let malformed = |reason: String| FormatError::Malformed {
        what: "checkpoint",
        reason,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| malformed("empty file".into()))?;
    if header.trim() != "piwo-checkpoint v1" {
        return Err(malformed(format!("unknown header {header:?}")));
    }
    let fp_line = lines
        .next()
        .ok_or_else(|| malformed("missing fingerprint".into()))?;
    let fp = fp_line
        .trim()
        .strip_prefix("fingerprint ")
        .ok_or_else(|| malformed(format!("expected fingerprint, got {fp_line:?}")))?;
    let fp = u64::from_str_radix(fp, 16).map_err(|_| malformed("bad fingerprint".into()))?;
    if fp != model.config().fingerprint() {
        return Err(FormatError::InvariantViolated {
            invariant: "checkpoint fingerprint matches the model architecture",
            detail: format!(
                "file {fp:016x} vs model {:016x}",
                model.config().fingerprint()
            ),
        });
    }
    let n_line = lines.next().ok_or_else(|| malformed("missing blocks".into()))?;
    let n: usize = n_line
        .trim()
        .strip_prefix("blocks ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| malformed(format!("expected block count, got {n_line:?}")))?;
    let ids: Vec<_> = model.params().ids().collect();
    if n != ids.len() {
        return Err(malformed(format!("{n} blocks in file, model has {}", ids.len())));
    }
    for id in ids {
        let head = lines
            .next()
            .ok_or_else(|| malformed("truncated block header".into()))?;
        let parts: Vec<&str> = head.split_whitespace().collect();
        let (rows, cols) = model.params().dims(id);
        let name = model.params().name(id).to_string();
        if parts.len() != 5 || parts[0] != "block" || parts[1] != name {
            return Err(malformed(format!("expected block {name}, got {head:?}")));
        }
        let frows: usize = parts[3].parse().map_err(|_| malformed("bad rows".into()))?;
        let fcols: usize = parts[4].parse().map_err(|_| malformed("bad cols".into()))?;
        if (frows, fcols) != (rows, cols) {
            return Err(malformed(format!(
                "block {name}: file shape {frows}x{fcols}, model {rows}x{cols}"
            )));
        }
        let mut values = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let line = lines
                .next()
                .ok_or_else(|| malformed(format!("block {name} truncated")))?;
            for tok in line.split_whitespace() {
                values.push(
                    tok.parse::<f64>()
                        .map_err(|_| malformed(format!("bad value {tok:?} in {name}")))?,
                );
            }
        }
        if values.len() != rows * cols {
            return Err(malformed(format!("block {name} has {} values", values.len())));
        }
        model.params_mut().slice_mut(id).copy_from_slice(&values);
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, model: &NeuralModel) -> Result<(), FormatError> {
    write_atomic(path, checkpoint_to_string(model).as_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, model: &mut NeuralModel) -> Result<(), FormatError> {
    checkpoint_into_model(&fs::read_to_string(path)?, model)
}

// ----------------------------------------------------------------------
// Dataset cache: versioned binary container with an FNV-1a checksum.
// ----------------------------------------------------------------------

const CACHE_MAGIC: &[u8; 8] = b"PIWODC01";

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn seq(&mut self, s: &TokenSequence) {
        self.u32(s.len() as u32);
        for &id in s.ids() {
            self.u16(id);
        }
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.pos + n > self.buf.len() {
            return Err(FormatError::Malformed {
                what: "dataset cache",
                reason: "truncated".into(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String, FormatError> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| FormatError::Malformed {
            what: "dataset cache",
            reason: "non-utf8 token".into(),
        })
    }
    fn seq(&mut self) -> Result<TokenSequence, FormatError> {
        let n = self.u32()? as usize;
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            ids.push(self.u16()?);
        }
        Ok(TokenSequence::new(ids))
    }
}

pub fn dataset_to_bytes(d: &Dataset) -> Vec<u8> {
    let mut w = ByteWriter { buf: Vec::new() };
    w.buf.extend_from_slice(CACHE_MAGIC);
    w.u32(d.n_classes as u32);
    w.u32(d.vocab.size() as u32);
    for tok in d.vocab.tokens() {
        w.str(tok);
    }
    w.u32(d.train_labeled.len() as u32);
    for ((x, y), s) in d.train_labeled.iter().zip(&d.split_ids) {
        w.seq(x);
        w.u32(*y as u32);
        w.buf.push(*s);
    }
    w.u32(d.train_unlabeled.len() as u32);
    for x in &d.train_unlabeled {
        w.seq(x);
    }
    w.u32(d.test.len() as u32);
    for (x, y) in &d.test {
        w.seq(x);
        w.u32(*y as u32);
    }
    match d.bayes_accuracy {
        Some(b) => {
            w.buf.push(1);
            w.f64(b);
        }
        None => w.buf.push(0),
    }
    let checksum = fnv1a(&w.buf);
    w.buf.extend_from_slice(&checksum.to_le_bytes());
    w.buf
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset, FormatError> {
    if bytes.len() < CACHE_MAGIC.len() + 8 {
        return Err(FormatError::Malformed {
            what: "dataset cache",
            reason: "too short".into(),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let want = u64::from_le_bytes(tail.try_into().unwrap());
    let got = fnv1a(body);
    if want != got {
        return Err(FormatError::InvariantViolated {
            invariant: "dataset cache checksum",
            detail: format!("stored {want:016x}, computed {got:016x}"),
        });
    }
    if &body[..8] != CACHE_MAGIC {
        return Err(FormatError::Malformed {
            what: "dataset cache",
            reason: "bad magic".into(),
        });
    }
    let mut r = ByteReader { buf: body, pos: 8 };
    let n_classes = r.u32()? as usize;
    let vocab_size = r.u32()? as usize;
    let mut tokens = Vec::with_capacity(vocab_size);
    for _ in 0..vocab_size {
        tokens.push(r.str()?);
    }
    // The first four tokens are the reserved entries added by Vocab.
    let vocab = Vocab::from_tokens(tokens[data::RESERVED as usize..].to_vec());
    let n_lab = r.u32()? as usize;
    let mut train_labeled = Vec::with_capacity(n_lab);
    let mut split_ids = Vec::with_capacity(n_lab);
    for _ in 0..n_lab {
        let x = r.seq()?;
        let y = r.u32()? as usize;
        let s = r.take(1)?[0];
        train_labeled.push((x, y));
        split_ids.push(s);
    }
    let n_unlab = r.u32()? as usize;
    let mut train_unlabeled = Vec::with_capacity(n_unlab);
    for _ in 0..n_unlab {
        train_unlabeled.push(r.seq()?);
    }
    let n_test = r.u32()? as usize;
    let mut test = Vec::with_capacity(n_test);
    for _ in 0..n_test {
        let x = r.seq()?;
        let y = r.u32()? as usize;
        test.push((x, y));
    }
    let bayes_accuracy = if r.take(1)?[0] == 1 {
        Some(r.f64()?)
    } else {
        None
    };
    Ok(Dataset {
        train_labeled,
        split_ids,
        train_unlabeled,
        test,
        vocab,
        n_classes,
        bayes_accuracy,
    })
}

pub fn save_dataset(path: &Path, d: &Dataset) -> Result<(), FormatError> {
    write_atomic(path, &dataset_to_bytes(d))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset, FormatError> {
    dataset_from_bytes(&fs::read(path)?)
}

// ----------------------------------------------------------------------
// Corpus ingestion from files
// ----------------------------------------------------------------------

/// Read a corpus from disk. `labeled` and `test` files hold
/// `label<TAB>text` lines; `unlabeled` holds raw text lines. Paths may be
/// `None` for absent parts.
pub fn ingest_corpus(
    labeled: Option<&Path>,
    unlabeled: Option<&Path>,
    test: Option<&Path>,
    vocab_cap: usize,
    max_len: usize,
) -> Result<Dataset, Box<dyn std::error::Error>> {
    let read = |p: Option<&Path>| -> io::Result<Vec<String>> {
        match p {
            Some(p) => Ok(fs::read_to_string(p)?.lines().map(String::from).collect()),
            None => Ok(Vec::new()),
        }
    };
    let lab = read(labeled)?;
    let unlab = read(unlabeled)?;
    let tst = read(test)?;
    let lab_refs: Vec<&str> = lab.iter().map(String::as_str).collect();
    let unlab_refs: Vec<&str> = unlab.iter().map(String::as_str).collect();
    let tst_refs: Vec<&str> = tst.iter().map(String::as_str).collect();
    Ok(data::build_dataset_from_lines(
        &lab_refs,
        &unlab_refs,
        &tst_refs,
        vocab_cap,
        max_len,
    )?)
}

/// Load a whitespace-separated `vocab x d_emb` embedding matrix file
/// (one row per vocabulary entry, reserved rows included).
pub fn load_embedding_matrix(path: &Path, vocab: usize, d_emb: usize) -> Result<Vec<f64>, FormatError> {
    let text = fs::read_to_string(path)?;
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|t| {
            t.parse().map_err(|_| FormatError::Malformed {
                what: "embedding matrix",
                reason: format!("bad value {t:?}"),
            })
        })
        .collect::<Result<_, _>>()?;
    if values.len() != vocab * d_emb {
        return Err(FormatError::Malformed {
            what: "embedding matrix",
            reason: format!("{} values, expected {}", values.len(), vocab * d_emb),
        });
    }
    Ok(values)
}

// ----------------------------------------------------------------------
// CSV helpers
// ----------------------------------------------------------------------

pub struct Csv {
    out: String,
}

impl Csv {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            out: format!("{}\n", columns.join(",")),
        }
    }

    pub fn row(&mut self, cells: &[String]) {
        self.out.push_str(&cells.join(","));
        self.out.push('\n');
    }

    pub fn finish(self) -> String {
        self.out
    }
}

/// Parse a CSV produced by [`Csv`]: header plus rows.
pub fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>), FormatError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or(FormatError::Malformed {
            what: "csv",
            reason: "empty".into(),
        })?
        .split(',')
        .map(String::from)
        .collect();
    let rows = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    Ok((header, rows))
}
