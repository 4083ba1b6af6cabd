//! Spectra, energy windows and the on-disk spectrum cache.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hilbert::CompositeSpace;
use crate::linalg::{self, c, hermitian_defect, Op, C64};

/// Default statistical minimum of levels in a window.
pub const DEFAULT_MIN_MEMBERS: usize = 50;

const HERMITIAN_TOL: f64 = 1e-10;

/// Ascending eigenvalues with orthonormal eigenvectors as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub values: Array1<f64>,
    pub vectors: Op,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.len() - 1]
    }

    pub fn span(&self) -> f64 {
        self.max() - self.min()
    }

    /// V diag(E) V†.
    pub fn reconstruct(&self) -> Op {
        let scaled = &self.vectors * &self.values.mapv(|e| c(e, 0.0));
        scaled.dot(&linalg::dagger(&self.vectors.view()))
    }

    /// ‖V†V − 1‖_max.
    pub fn orthonormality_defect(&self) -> f64 {
        let g = linalg::dagger(&self.vectors.view()).dot(&self.vectors);
        linalg::max_abs_diff(&g, &linalg::identity(self.len()))
    }

    /// ⟨k|O|k⟩ for every eigenvector k.
    pub fn expectations(&self, op: &Op) -> Vec<f64> {
        let ov = op.dot(&self.vectors);
        (0..self.len())
            .map(|k| {
                self.vectors
                    .column(k)
                    .iter()
                    .zip(ov.column(k).iter())
                    .map(|(v, w)| (v.conj() * w).re)
                    .sum()
            })
            .collect()
    }
}

/// Diagonalize a Hermitian operator. Eigenvectors follow a fixed phase
/// convention: the largest-magnitude component of each column (first one on
/// ties) is real and positive.
pub fn diagonalize(h: &Op) -> Result<Spectrum> {
    linalg::check_square(h, "operator")?;
    let scale = linalg::max_abs(&h.view()).max(1.0);
    let defect = hermitian_defect(h);
    if defect > HERMITIAN_TOL * scale {
        return Err(Error::Validation(format!("operator is not Hermitian (defect {defect:e})")));
    }
    let (values, mut vectors) = linalg::eigh(h)?;
    fix_phases(&mut vectors);
    Ok(Spectrum { values, vectors })
}

pub(crate) fn fix_phases(v: &mut Op) {
    for mut col in v.columns_mut() {
        let mut best = 0;
        let mut best_abs = -1.0;
        for (i, z) in col.iter().enumerate() {
            let a = z.norm();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if best_abs <= 0.0 {
            continue;
        }
        let z = col[best];
        let phase = z.conj() / z.norm();
        col.mapv_inplace(|x| x * phase);
        col[best] = c(col[best].norm(), 0.0);
    }
}

/// Indices η with E_η in the closed interval [e_lo, e_lo + width].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyWindow {
    pub e_lo: f64,
    pub width: f64,
    pub member_indices: Vec<usize>,
    pub n_members: usize,
    /// Set when `n_members` is below the statistical minimum.
    pub below_minimum: bool,
}

impl EnergyWindow {
    pub fn e_hi(&self) -> f64 {
        self.e_lo + self.width
    }
}

pub fn make_window(spec: &Spectrum, e_lo: f64, width: f64) -> Result<EnergyWindow> {
    make_window_with_min(spec.values.as_slice().unwrap_or(&[]), e_lo, width, DEFAULT_MIN_MEMBERS)
}

/// Window over an ascending list of energies with a custom statistical
/// minimum.
pub fn make_window_with_min(
    values: &[f64],
    e_lo: f64,
    width: f64,
    min_members: usize,
) -> Result<EnergyWindow> {
    if !(width > 0.0) || !e_lo.is_finite() || !width.is_finite() {
        return Err(Error::Validation(format!("window [{e_lo}, +{width}] needs finite positive width")));
    }
    let members = members_sorted(values, e_lo, e_lo + width);
    if members.is_empty() {
        return Err(Error::EmptyWindow { lo: e_lo, hi: e_lo + width, context: None });
    }
    let n = members.len();
    if n < min_members {
        log::warn!("energy window [{e_lo}, {}] holds {n} < {min_members} levels", e_lo + width);
    }
    Ok(EnergyWindow { e_lo, width, member_indices: members, n_members: n, below_minimum: n < min_members })
}

fn members_sorted(values: &[f64], lo: f64, hi: f64) -> Vec<usize> {
    let start = values.partition_point(|&e| e < lo);
    let end = values.partition_point(|&e| e <= hi);
    (start..end.max(start)).collect()
}

/// Environment states with E^E_i in [e_lo − E_α, e_lo − E_α + width].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnvWindow {
    pub level_energy: f64,
    pub lo: f64,
    pub hi: f64,
    pub member_indices: Vec<usize>,
    pub n_members: usize,
}

impl EnvWindow {
    pub fn is_empty(&self) -> bool {
        self.n_members == 0
    }

    pub fn contains(&self, i: usize) -> bool {
        self.member_indices.binary_search(&i).is_ok()
    }

    pub(crate) fn require_nonempty(&self, label: &str) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyWindow {
                lo: self.lo,
                hi: self.hi,
                context: Some(format!("environment window of {label} (E = {})", self.level_energy)),
            });
        }
        Ok(())
    }
}

/// One environment window per system level. Empty windows are returned as
/// such; callers that need to average over them raise the error.
pub fn env_windows(env_spec: &Spectrum, sys_levels: &[f64], e_lo: f64, width: f64) -> Result<Vec<EnvWindow>> {
    env_windows_of(env_spec.values.as_slice().unwrap_or(&[]), sys_levels, e_lo, width)
}

pub fn env_windows_of(env_values: &[f64], sys_levels: &[f64], e_lo: f64, width: f64) -> Result<Vec<EnvWindow>> {
    if !(width > 0.0) {
        return Err(Error::Validation(format!("window width {width} must be positive")));
    }
    Ok(sys_levels
        .iter()
        .map(|&ea| {
            let lo = e_lo - ea;
            let hi = lo + width;
            let m = members_sorted(env_values, lo, hi);
            EnvWindow { level_energy: ea, lo, hi, n_members: m.len(), member_indices: m }
        })
        .collect())
}

/// The product basis of H_d = ⊕_α |E^S_α⟩ ⊗ H^(E)_α, stored as (α, i)
/// labels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirectSumBasis {
    pub members: Vec<(usize, usize)>,
    pub block_dims: Vec<usize>,
}

impl DirectSumBasis {
    pub fn dim(&self) -> usize {
        self.members.len()
    }

    /// Columns |E^S_α⟩ ⊗ |E^E_i⟩ on the total space.
    pub fn vectors(&self, space: &CompositeSpace, sys: &Spectrum, env: &Spectrum) -> Op {
        let ne = space.n_env();
        let mut out = Array2::zeros((space.n_tot(), self.dim()));
        for (k, &(a, i)) in self.members.iter().enumerate() {
            for s in 0..space.n_s() {
                let sa = sys.vectors[[s, a]];
                for e in 0..ne {
                    out[[s * ne + e, k]] = sa * env.vectors[[e, i]];
                }
            }
        }
        out
    }
}

pub fn direct_sum_subspace(sys_spec: &Spectrum, windows: &[EnvWindow]) -> Result<DirectSumBasis> {
    if windows.len() != sys_spec.len() {
        return Err(Error::Shape(format!(
            "{} environment windows for {} system levels",
            windows.len(),
            sys_spec.len()
        )));
    }
    let mut members = Vec::new();
    for (a, w) in windows.iter().enumerate() {
        members.extend(w.member_indices.iter().map(|&i| (a, i)));
    }
    Ok(DirectSumBasis { members, block_dims: windows.iter().map(|w| w.n_members).collect() })
}

/// Place a window at a fraction of a spectral range: the lower edge sits at
/// `min + lower_fraction·span` and the width is `width_fraction·span`.
pub fn place_window(min: f64, span: f64, lower_fraction: f64, width_fraction: f64) -> (f64, f64) {
    (min + lower_fraction * span, width_fraction * span)
}

const MAGIC: &[u8; 8] = b"SHMSPEC\0";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 + 32;

/// SHA-256 of an operator's shape and entries (little-endian f64 pairs,
/// row-major).
pub fn operator_hash(op: &Op) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((op.nrows() as u64).to_le_bytes());
    h.update((op.ncols() as u64).to_le_bytes());
    let mut buf = Vec::with_capacity(op.ncols() * 16);
    for row in op.rows() {
        buf.clear();
        for z in row {
            buf.extend_from_slice(&z.re.to_le_bytes());
            buf.extend_from_slice(&z.im.to_le_bytes());
        }
        h.update(&buf);
    }
    h.finalize().into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Directory of spectra keyed by the content hash of the source operator.
///
/// Files are written to a unique temporary name and renamed into place, so
/// readers never observe a partial record. Two writers racing on the same
/// key produce identical bytes.
#[derive(Debug, Clone)]
pub struct SpectrumCache {
    dir: PathBuf,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl SpectrumCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &[u8; 32]) -> PathBuf {
        self.dir.join(format!("{}.spec", hex(key)))
    }

    /// Cached spectrum of `h`, diagonalizing and storing it on a miss.
    pub fn get_or_compute(&self, h: &Op) -> Result<Spectrum> {
        let key = operator_hash(h);
        if let Some(s) = self.load(&key)? {
            return Ok(s);
        }
        let s = diagonalize(h)?;
        self.store(&key, &s)?;
        Ok(s)
    }

    pub fn load(&self, key: &[u8; 32]) -> Result<Option<Spectrum>> {
        let path = self.path_for(key);
        let mut f = match fs::File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)?;
        decode(&bytes, key).map(Some)
    }

    pub fn store(&self, key: &[u8; 32], s: &Spectrum) -> Result<PathBuf> {
        let path = self.path_for(key);
        let tmp = self.dir.join(format!(
            ".{}.{}.{}.tmp",
            hex(&key[..8]),
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        {
            let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
            f.write_all(&encode(key, s))?;
            f.flush()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(path)
    }

    /// Cache entries as (path, dimension).
    pub fn entries(&self) -> Result<Vec<(PathBuf, u64)>> {
        let mut out = Vec::new();
        for ent in fs::read_dir(&self.dir)? {
            let p = ent?.path();
            if p.extension().and_then(|e| e.to_str()) != Some("spec") {
                continue;
            }
            let mut head = [0u8; HEADER_LEN];
            let mut f = fs::File::open(&p)?;
            if f.read_exact(&mut head).is_ok() && &head[..8] == MAGIC {
                let dim = u64::from_le_bytes(head[12..20].try_into().expect("8 bytes"));
                out.push((p, dim));
            }
        }
        out.sort();
        Ok(out)
    }

    /// Remove every cache entry; returns the number of files deleted.
    pub fn clear(&self) -> Result<usize> {
        let entries = self.entries()?;
        for (p, _) in &entries {
            fs::remove_file(p)?;
        }
        Ok(entries.len())
    }
}

pub fn encode(key: &[u8; 32], s: &Spectrum) -> Vec<u8> {
    let n = s.len();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * n + 16 * n * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(key);
    for v in s.values.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for col in s.vectors.columns() {
        for z in col {
            out.extend_from_slice(&z.re.to_le_bytes());
            out.extend_from_slice(&z.im.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], key: &[u8; 32]) -> Result<Spectrum> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(Error::Cache("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Cache(format!("unsupported format version {version}")));
    }
    let n = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    if &bytes[20..52] != key {
        return Err(Error::Cache("content hash mismatch".into()));
    }
    let want = n
        .checked_mul(n)
        .and_then(|nn| nn.checked_mul(16))
        .and_then(|v| v.checked_add(HEADER_LEN + 8 * n))
        .ok_or_else(|| Error::Cache("dimension overflow".into()))?;
    if bytes.len() != want {
        return Err(Error::Cache(format!("record of {} bytes, expected {want}", bytes.len())));
    }
    let f = |off: usize| f64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes"));
    let values: Array1<f64> = (0..n).map(|k| f(HEADER_LEN + 8 * k)).collect();
    let base = HEADER_LEN + 8 * n;
    let mut vectors = Array2::<C64>::zeros((n, n));
    for col in 0..n {
        for row in 0..n {
            let off = base + 16 * (col * n + row);
            vectors[[row, col]] = c(f(off), f(off + 8));
        }
    }
    Ok(Spectrum { values, vectors })
}
