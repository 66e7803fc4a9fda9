//! Dense scalar volumes, binary masks, the TSV3 container and the synthetic
//! phantom generator used for all training and evaluation data.
//!
//! Voxels are stored row-major with W fastest: `index = (d * H + h) * W + w`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const TSV3_MAGIC: &[u8; 4] = b"TSV3";
pub const TSV3_VERSION: u16 = 1;
pub const TSV3_HEADER_LEN: usize = 4 + 2 + 1 + 1 + 12 + 12;

const DTYPE_F32: u8 = 0;
const DTYPE_MASK: u8 = 1;

/// Spatial extent `(D, H, W)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(d: usize, h: usize, w: usize) -> Self {
        Dims { d, h, w }
    }

    pub const fn cube(n: usize) -> Self {
        Dims { d: n, h: n, w: n }
    }

    pub const fn len(&self) -> usize {
        self.d * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.h + h) * self.w + w
    }

    #[inline]
    pub const fn coord(&self, index: usize) -> (usize, usize, usize) {
        let w = index % self.w;
        let h = (index / self.w) % self.h;
        let d = index / (self.w * self.h);
        (d, h, w)
    }

    pub const fn as_array(&self) -> [usize; 3] {
        [self.d, self.h, self.w]
    }

    pub const fn from_array(a: [usize; 3]) -> Self {
        Dims::new(a[0], a[1], a[2])
    }

    /// Floor-half of every axis.
    pub const fn halved(&self) -> Self {
        Dims::new(self.d / 2, self.h / 2, self.w / 2)
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.d, self.h, self.w)
    }
}

/// Millimetres per voxel along `(D, H, W)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spacing(pub [f32; 3]);

impl Default for Spacing {
    fn default() -> Self {
        Spacing([1.0, 1.0, 1.0])
    }
}

impl Spacing {
    pub fn as_f64(&self) -> [f64; 3] {
        [self.0[0] as f64, self.0[1] as f64, self.0[2] as f64]
    }

    fn validate(&self) -> Result<()> {
        if self.0.iter().all(|s| s.is_finite() && *s > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "spacing must be positive and finite, got {:?}",
                self.0
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    pub dims: Dims,
    pub spacing: Spacing,
    pub voxels: Vec<f32>,
}

impl Volume3D {
    pub fn new(dims: Dims, spacing: Spacing, voxels: Vec<f32>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidArgument(format!("empty dims {dims}")));
        }
        if voxels.len() != dims.len() {
            return Err(Error::Shape(format!(
                "{} voxels for dims {dims} ({} expected)",
                voxels.len(),
                dims.len()
            )));
        }
        spacing.validate()?;
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("voxel {i} is {}", voxels[i])));
        }
        Ok(Volume3D {
            dims,
            spacing,
            voxels,
        })
    }

    pub fn filled(dims: Dims, value: f32) -> Self {
        Volume3D {
            dims,
            spacing: Spacing::default(),
            voxels: vec![value; dims.len()],
        }
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> f32 {
        self.voxels[self.dims.index(d, h, w)]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.voxels.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskVolume {
    pub dims: Dims,
    pub spacing: Spacing,
    pub labels: Vec<u8>,
}

impl MaskVolume {
    pub fn new(dims: Dims, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != dims.len() {
            return Err(Error::Shape(format!(
                "{} labels for dims {dims} ({} expected)",
                labels.len(),
                dims.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l > 1) {
            return Err(Error::Format(format!(
                "label {} at offset {i} is not binary",
                labels[i]
            )));
        }
        Ok(MaskVolume {
            dims,
            spacing: Spacing::default(),
            labels,
        })
    }

    pub fn zeros(dims: Dims) -> Self {
        MaskVolume {
            dims,
            spacing: Spacing::default(),
            labels: vec![0; dims.len()],
        }
    }

    pub fn with_spacing(mut self, spacing: Spacing) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> bool {
        self.labels[self.dims.index(d, h, w)] != 0
    }

    pub fn count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }
}

fn write_header(buf: &mut Vec<u8>, dtype: u8, dims: Dims, spacing: Spacing) {
    buf.extend_from_slice(TSV3_MAGIC);
    buf.extend_from_slice(&TSV3_VERSION.to_le_bytes());
    buf.push(dtype);
    buf.push(0);
    for n in dims.as_array() {
        buf.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for s in spacing.0 {
        buf.extend_from_slice(&s.to_le_bytes());
    }
}

struct Header {
    dtype: u8,
    dims: Dims,
    spacing: Spacing,
}

fn read_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < TSV3_HEADER_LEN {
        return Err(Error::Format(format!(
            "file is {} bytes, shorter than the {TSV3_HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[0..4] != TSV3_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"TSV3\"",
            &bytes[0..4]
        )));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != TSV3_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dtype = bytes[6];
    if dtype != DTYPE_F32 && dtype != DTYPE_MASK {
        return Err(Error::Format(format!("unknown dtype {dtype}")));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let dims = Dims::new(u32_at(8), u32_at(12), u32_at(16));
    if dims.is_empty() {
        return Err(Error::Format(format!("zero-sized dims {dims}")));
    }
    let spacing = Spacing([f32_at(20), f32_at(24), f32_at(28)]);
    spacing
        .validate()
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(Header {
        dtype,
        dims,
        spacing,
    })
}

fn check_payload(header: &Header, payload: usize, scalar: usize) -> Result<()> {
    let expected = header.dims.len() * scalar;
    if payload != expected {
        return Err(Error::Format(format!(
            "payload is {payload} bytes, dims {} require {expected}",
            header.dims
        )));
    }
    Ok(())
}

pub fn encode_volume(v: &Volume3D) -> Vec<u8> {
    let mut buf = Vec::with_capacity(TSV3_HEADER_LEN + 4 * v.voxels.len());
    write_header(&mut buf, DTYPE_F32, v.dims, v.spacing);
    for x in &v.voxels {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume3D> {
    let header = read_header(bytes)?;
    if header.dtype != DTYPE_F32 {
        return Err(Error::Format(format!(
            "dtype {} is not a float volume",
            header.dtype
        )));
    }
    let payload = &bytes[TSV3_HEADER_LEN..];
    check_payload(&header, payload.len(), 4)?;
    let mut voxels = Vec::with_capacity(header.dims.len());
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::NonFinite(format!(
                "voxel {i} (byte offset {}) is {v}",
                TSV3_HEADER_LEN + 4 * i
            )));
        }
        voxels.push(v);
    }
    Ok(Volume3D {
        dims: header.dims,
        spacing: header.spacing,
        voxels,
    })
}

pub fn encode_mask(m: &MaskVolume) -> Vec<u8> {
    let mut buf = Vec::with_capacity(TSV3_HEADER_LEN + m.labels.len());
    write_header(&mut buf, DTYPE_MASK, m.dims, m.spacing);
    buf.extend_from_slice(&m.labels);
    buf
}

pub fn decode_mask(bytes: &[u8]) -> Result<MaskVolume> {
    let header = read_header(bytes)?;
    if header.dtype != DTYPE_MASK {
        return Err(Error::Format(format!("dtype {} is not a mask", header.dtype)));
    }
    let payload = &bytes[TSV3_HEADER_LEN..];
    check_payload(&header, payload.len(), 1)?;
    if let Some(i) = payload.iter().position(|&l| l > 1) {
        return Err(Error::Format(format!(
            "label {} at byte offset {} is not binary",
            payload[i],
            TSV3_HEADER_LEN + i
        )));
    }
    Ok(MaskVolume {
        dims: header.dims,
        spacing: header.spacing,
        labels: payload.to_vec(),
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    decode_volume(&read_file(path)?).map_err(|e| with_path(path, e))
}

pub fn save_volume(v: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_volume(v))
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<MaskVolume> {
    let path = path.as_ref();
    decode_mask(&read_file(path)?).map_err(|e| with_path(path, e))
}

pub fn save_mask(m: &MaskVolume, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_mask(m))
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        Error::NonFinite(msg) => Error::NonFinite(format!("{}: {msg}", path.display())),
        other => other,
    }
}

/// Min-max normalisation into `[0, 1]`.
///
/// Returns the normalised volume and a flag that is set when the input is
/// constant; the output is then all zeros.
pub fn normalize_intensity(v: &Volume3D) -> (Volume3D, bool) {
    let (lo, hi) = v
        .voxels
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    let mut out = v.clone();
    if hi <= lo {
        out.voxels.iter_mut().for_each(|x| *x = 0.0);
        return (out, true);
    }
    let (lo, range) = (lo as f64, hi as f64 - lo as f64);
    for x in out.voxels.iter_mut() {
        *x = ((*x as f64 - lo) / range) as f32;
    }
    (out, false)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    /// Centre in voxel coordinates `(d, h, w)`.
    pub center: [f64; 3],
    /// Semi-axes in voxels.
    pub radii: [f64; 3],
    pub intensity: f32,
}

impl Blob {
    pub fn contains(&self, d: usize, h: usize, w: usize) -> bool {
        let p = [d as f64, h as f64, w as f64];
        let mut acc = 0.0;
        for a in 0..3 {
            let t = (p[a] - self.center[a]) / self.radii[a];
            acc += t * t;
        }
        acc <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub spacing: Spacing,
    pub blobs: Vec<Blob>,
    pub background: f32,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::InvalidArgument(format!("empty dims {}", self.dims)));
        }
        self.spacing.validate()?;
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise sigma {} must be >= 0",
                self.noise_sigma
            )));
        }
        let extent = self.dims.as_array();
        for (i, b) in self.blobs.iter().enumerate() {
            for a in 0..3 {
                if !(b.radii[a] > 0.0 && b.radii[a].is_finite()) {
                    return Err(Error::InvalidArgument(format!(
                        "blob {i} radius {:?} must be positive",
                        b.radii
                    )));
                }
                if !(b.center[a] >= 0.0 && b.center[a] <= (extent[a] - 1) as f64) {
                    return Err(Error::InvalidArgument(format!(
                        "blob {i} centre {:?} outside dims {}",
                        b.center, self.dims
                    )));
                }
            }
            if !b.intensity.is_finite() {
                return Err(Error::InvalidArgument(format!("blob {i} intensity is not finite")));
            }
        }
        Ok(())
    }
}

/// Renders a phantom: labels are exact ellipsoid membership, intensities are
/// background plus every covering blob's foreground plus seeded Gaussian noise.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume3D, MaskVolume)> {
    spec.validate()?;
    let dims = spec.dims;
    let mut labels = vec![0u8; dims.len()];
    let mut voxels = vec![spec.background; dims.len()];
    for d in 0..dims.d {
        for h in 0..dims.h {
            for w in 0..dims.w {
                let i = dims.index(d, h, w);
                for b in &spec.blobs {
                    if b.contains(d, h, w) {
                        labels[i] = 1;
                        voxels[i] += b.intensity;
                    }
                }
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
        let clip = 6.0 * spec.noise_sigma;
        for v in voxels.iter_mut() {
            let n: f64 = normal.sample(&mut rng);
            *v = (*v as f64 + n.clamp(-clip, clip)) as f32;
        }
    }
    let volume = Volume3D {
        dims,
        spacing: spec.spacing,
        voxels,
    };
    let mask = MaskVolume {
        dims,
        spacing: spec.spacing,
        labels,
    };
    Ok((volume, mask))
}

/// Dataset-level recipe that draws one [`PhantomSpec`] per case.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomRecipe {
    pub dims: Dims,
    pub min_blobs: usize,
    pub max_blobs: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    pub min_intensity: f32,
    pub max_intensity: f32,
    pub background: f32,
    pub noise_sigma: f64,
}

impl Default for PhantomRecipe {
    fn default() -> Self {
        PhantomRecipe {
            dims: Dims::cube(32),
            min_blobs: 1,
            max_blobs: 2,
            min_radius: 5.0,
            max_radius: 9.0,
            min_intensity: 0.6,
            max_intensity: 1.0,
            background: 0.1,
            noise_sigma: 0.05,
        }
    }
}

impl PhantomRecipe {
    pub fn validate(&self) -> Result<()> {
        let ok = self.min_blobs <= self.max_blobs
            && self.min_radius > 0.0
            && self.min_radius <= self.max_radius
            && self.min_intensity <= self.max_intensity
            && self.noise_sigma >= 0.0
            && !self.dims.is_empty();
        if !ok {
            return Err(Error::InvalidArgument(format!("inconsistent phantom recipe {self:?}")));
        }
        Ok(())
    }

    /// Draws the spec for one case. Blob centres keep one maximum radius
    /// away from the faces where the volume is large enough.
    pub fn sample(&self, seed: u64) -> Result<PhantomSpec> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = rng.random_range(self.min_blobs..=self.max_blobs);
        let mut blobs = Vec::with_capacity(count);
        for _ in 0..count {
            let mut center = [0.0; 3];
            let mut radii = [0.0; 3];
            for a in 0..3 {
                radii[a] = rng.random_range(self.min_radius..=self.max_radius);
                let n = self.dims.as_array()[a] as f64;
                let margin = self.max_radius.min((n - 1.0) / 2.0);
                center[a] = rng.random_range(margin..=(n - 1.0 - margin));
            }
            let intensity = rng.random_range(self.min_intensity..=self.max_intensity);
            blobs.push(Blob {
                center,
                radii,
                intensity,
            });
        }
        Ok(PhantomSpec {
            dims: self.dims,
            spacing: Spacing::default(),
            blobs,
            background: self.background,
            noise_sigma: self.noise_sigma,
            seed: seed ^ 0x9e37_79b9_7f4a_7c15,
        })
    }
}
