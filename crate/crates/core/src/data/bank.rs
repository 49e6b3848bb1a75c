//! The FBNK container: feature banks and prompt checkpoints.
//!
//! Little-endian throughout.
//!
//! ```text
//! magic       4 bytes  "FBNK"
//! version     u32      1
//! section     u8       0 = feature bank, 1 = checkpoint
//!
//! feature bank:
//!   n_samples u32, n_regions u32, d_embed u32, n_classes u32, split u8
//!   labels    i32[n_samples]              (-1 marks OOD)
//!   globals   f32[n_samples][d_embed]
//!   regions   f32[n_samples][n_regions][d_embed]
//!
//! checkpoint:
//!   ctx_len u32, d_token u32, d_embed u32, n_classes u32
//!   seed u64, tau f64, strategy u8 (0 coop, 1 locoop, 2 gacoop)
//!   steps_total u64, steps_conflicting u64
//!   params    f64[ctx_len * d_token]
//! ```
//!
//! Checkpoint parameters are stored as f64 so that evaluation sees exactly
//! the trained values.

use std::fs;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};
use crate::model::{EncoderSpec, PromptParams};
use crate::objectives::Sample;
use crate::numerics::norm;
use crate::trainer::Strategy;

pub const MAGIC: [u8; 4] = *b"FBNK";
pub const VERSION: u32 = 1;
pub const SECTION_BANK: u8 = 0;
pub const SECTION_CHECKPOINT: u8 = 1;

/// Row-norm deviation beyond which the loader re-normalizes and warns.
pub const ROW_NORM_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    IdTest,
    Ood,
}

impl Split {
    pub fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::IdTest => 1,
            Split::Ood => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Split::Train),
            1 => Ok(Split::IdTest),
            2 => Ok(Split::Ood),
            t => Err(Error::InvalidBank(format!("unknown split tag {t}"))),
        }
    }
}

/// Frozen global and regional image features with labels.
///
/// Features are stored as f32, as on disk; [`FeatureBank::sample`] promotes
/// to f64.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    pub n_regions: usize,
    pub d_embed: usize,
    pub n_classes: usize,
    pub split: Split,
    pub labels: Vec<i32>,
    pub globals: Vec<f32>,
    pub regions: Vec<f32>,
}

impl FeatureBank {
    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn global(&self, i: usize) -> &[f32] {
        &self.globals[i * self.d_embed..(i + 1) * self.d_embed]
    }

    pub fn region(&self, i: usize, j: usize) -> &[f32] {
        let start = (i * self.n_regions + j) * self.d_embed;
        &self.regions[start..start + self.d_embed]
    }

    pub fn sample(&self, i: usize) -> Sample {
        // Re-normalized in f64: f32 storage alone can miss the unit-norm
        // tolerance the scorer enforces.
        let promote = |v: &[f32]| {
            let w: Vec<f64> = v.iter().map(|&x| f64::from(x)).collect();
            let n = norm(&w);
            if n > 0.0 {
                w.into_iter().map(|x| x / n).collect()
            } else {
                w
            }
        };
        let label = self.labels[i];
        Sample {
            global: promote(self.global(i)),
            regions: (0..self.n_regions).map(|j| promote(self.region(i, j))).collect(),
            label: usize::try_from(label).ok(),
        }
    }

    pub fn samples(&self) -> Vec<Sample> {
        (0..self.n_samples()).map(|i| self.sample(i)).collect()
    }

    /// Checks shape and label invariants and re-normalizes rows whose norm
    /// is off by more than [`ROW_NORM_TOL`]. Returns one warning per
    /// re-normalized row.
    pub fn validate(&mut self) -> Result<Vec<String>> {
        let n = self.n_samples();
        if self.globals.len() != n * self.d_embed {
            return Err(Error::InvalidBank("globals length does not match header".into()));
        }
        if self.regions.len() != n * self.n_regions * self.d_embed {
            return Err(Error::InvalidBank("regions length does not match header".into()));
        }
        if self.d_embed == 0 {
            return Err(Error::InvalidBank("d_embed is zero".into()));
        }
        for (i, &l) in self.labels.iter().enumerate() {
            if l < -1 || l >= self.n_classes as i32 {
                return Err(Error::InvalidBank(format!(
                    "label {l} of sample {i} outside [-1, {})",
                    self.n_classes
                )));
            }
        }
        let d = self.d_embed;
        let mut warnings = Vec::new();
        for (idx, row) in self.globals.chunks_mut(d).enumerate() {
            if let Some(w) = fix_row(row, || format!("global {idx}"))? {
                warnings.push(w);
            }
        }
        let r = self.n_regions.max(1);
        for (idx, row) in self.regions.chunks_mut(d).enumerate() {
            if let Some(w) = fix_row(row, || format!("region {} of sample {}", idx % r, idx / r))? {
                warnings.push(w);
            }
        }
        Ok(warnings)
    }
}

fn fix_row(row: &mut [f32], name: impl Fn() -> String) -> Result<Option<String>> {
    let mut sq = 0.0f64;
    for &x in row.iter() {
        if !x.is_finite() {
            return Err(Error::InvalidBank(format!("{} has a non-finite entry", name())));
        }
        sq += f64::from(x) * f64::from(x);
    }
    let nrm = sq.sqrt();
    if (nrm - 1.0).abs() <= ROW_NORM_TOL {
        return Ok(None);
    }
    if nrm < crate::numerics::EPS_NORM {
        return Err(Error::InvalidBank(format!("{} has zero norm", name())));
    }
    for x in row.iter_mut() {
        *x = (f64::from(*x) / nrm) as f32;
    }
    Ok(Some(format!("{} had norm {nrm:.6}; re-normalized", name())))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(Error::Truncated { needed: n, available });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn ensure(&self, n: usize) -> Result<()> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(Error::Truncated { needed: n, available });
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::InvalidBank(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn read_header(r: &mut Reader<'_>, section: u8) -> Result<()> {
    let magic = r.array::<4>()?;
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let found = r.u8()?;
    if found != section {
        return Err(Error::WrongSection { expected: section, found });
    }
    Ok(())
}

fn write_header(out: &mut Vec<u8>, section: u8) {
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(section);
}

fn as_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidBank(format!("{what} {n} exceeds u32")))
}

pub fn encode_bank(bank: &FeatureBank) -> Result<Vec<u8>> {
    let n = bank.n_samples();
    let mut out = Vec::with_capacity(25 + 4 * (n + bank.globals.len() + bank.regions.len()));
    write_header(&mut out, SECTION_BANK);
    out.extend_from_slice(&as_u32(n, "n_samples")?.to_le_bytes());
    out.extend_from_slice(&as_u32(bank.n_regions, "n_regions")?.to_le_bytes());
    out.extend_from_slice(&as_u32(bank.d_embed, "d_embed")?.to_le_bytes());
    out.extend_from_slice(&as_u32(bank.n_classes, "n_classes")?.to_le_bytes());
    out.push(bank.split.tag());
    for l in &bank.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    for x in bank.globals.iter().chain(&bank.regions) {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

/// Parses and validates a bank; returns it with any re-normalization
/// warnings.
pub fn decode_bank(bytes: &[u8]) -> Result<(FeatureBank, Vec<String>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    read_header(&mut r, SECTION_BANK)?;
    let n = r.u32()? as usize;
    let n_regions = r.u32()? as usize;
    let d_embed = r.u32()? as usize;
    let n_classes = r.u32()? as usize;
    let split = Split::from_tag(r.u8()?)?;
    let n_globals = n * d_embed;
    let n_region_vals = n * n_regions * d_embed;
    r.ensure(4 * (n + n_globals + n_region_vals))?;
    let labels = r
        .take(4 * n)?
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let read_f32s = |raw: &[u8]| -> Vec<f32> {
        raw.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    };
    let globals = read_f32s(r.take(4 * n_globals)?);
    let regions = read_f32s(r.take(4 * n_region_vals)?);
    r.finish()?;
    let mut bank = FeatureBank {
        n_regions,
        d_embed,
        n_classes,
        split,
        labels,
        globals,
        regions,
    };
    let warnings = bank.validate()?;
    Ok((bank, warnings))
}

pub fn write_bank(bank: &FeatureBank, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_bank(bank)?)?;
    Ok(())
}

/// Reads a bank, logging a warning for every re-normalized row.
pub fn read_bank(path: impl AsRef<Path>) -> Result<FeatureBank> {
    let (bank, warnings) = read_bank_with_warnings(path.as_ref())?;
    for w in &warnings {
        warn!("{}: {w}", path.as_ref().display());
    }
    Ok(bank)
}

pub fn read_bank_with_warnings(path: impl AsRef<Path>) -> Result<(FeatureBank, Vec<String>)> {
    decode_bank(&fs::read(path)?)
}

/// Trained prompt plus what is needed to rebuild its frozen encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: PromptParams,
    pub encoder: EncoderSpec,
    pub seed: u64,
    pub strategy: Strategy,
    pub steps_total: u64,
    pub steps_conflicting: u64,
}

impl Checkpoint {
    pub fn conflict_ratio(&self) -> f64 {
        if self.steps_total == 0 {
            0.0
        } else {
            self.steps_conflicting as f64 / self.steps_total as f64
        }
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_header(&mut out, SECTION_CHECKPOINT);
    let e = &ck.encoder;
    for v in [e.ctx_len, e.d_token, e.d_embed, e.n_classes] {
        out.extend_from_slice(&as_u32(v, "checkpoint dimension")?.to_le_bytes());
    }
    out.extend_from_slice(&ck.seed.to_le_bytes());
    out.extend_from_slice(&e.tau.to_le_bytes());
    out.push(ck.strategy.tag());
    out.extend_from_slice(&ck.steps_total.to_le_bytes());
    out.extend_from_slice(&ck.steps_conflicting.to_le_bytes());
    for x in ck.params.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    read_header(&mut r, SECTION_CHECKPOINT)?;
    let ctx_len = r.u32()? as usize;
    let d_token = r.u32()? as usize;
    let d_embed = r.u32()? as usize;
    let n_classes = r.u32()? as usize;
    let seed = r.u64()?;
    let tau = r.f64()?;
    let strategy = Strategy::from_tag(r.u8()?)?;
    let steps_total = r.u64()?;
    let steps_conflicting = r.u64()?;
    let n = ctx_len * d_token;
    r.ensure(8 * n)?;
    let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let params = PromptParams::new(ctx_len, d_token, data)
        .map_err(|e| Error::InvalidBank(format!("checkpoint parameters: {e}")))?;
    if !(tau > 0.0) {
        return Err(Error::InvalidBank(format!("checkpoint temperature {tau}")));
    }
    Ok(Checkpoint {
        params,
        encoder: EncoderSpec {
            n_classes,
            ctx_len,
            d_token,
            d_embed,
            tau,
        },
        seed,
        strategy,
        steps_total,
        steps_conflicting,
    })
}

pub fn write_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(ck)?)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
