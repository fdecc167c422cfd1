//! Corpus construction: tiling, foreground filtering, manifests and splits,
//! precomputed latent/embedding caches, and procedural toy corpora.
//!
//! The foreground rule is a deliberately simple near-white threshold: a
//! pixel is background when its minimum channel exceeds 0.85, and a tile is
//! kept when at least a quarter of its pixels are foreground. It stands in
//! for external tissue-detection code and is easy to replace.

use crate::adapters::CellMask;
use crate::codec::Codec;
use crate::embedder::Embedder;
use crate::error::{Error, Result};
use crate::imagebuf::ImageTensor;
use crate::io::{bytes_sha256, TensorStore};
use crate::rng::derive_rng_indexed;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

/// Pixel is background when every channel is near white.
const BACKGROUND_MIN_CHANNEL: f32 = 0.85;
/// Keep a tile when at least this fraction of pixels is foreground.
const KEEP_FRACTION: f64 = 0.25;

/// Row-major top-left coordinates of all full tiles of `patch`×`patch`
/// pixels at the given stride. Partial edge tiles are dropped.
pub fn tile_image(
    height: usize,
    width: usize,
    patch: usize,
    stride: usize,
) -> Result<Vec<(usize, usize)>> {
    if patch == 0 || stride == 0 {
        return Err(Error::Config("patch and stride must be positive".into()));
    }
    if patch > height || patch > width {
        return Err(Error::InvalidDims(format!(
            "patch {patch} exceeds image {height}x{width}"
        )));
    }
    let ny = (height - patch) / stride + 1;
    let nx = (width - patch) / stride + 1;
    let mut out = Vec::with_capacity(ny * nx);
    for iy in 0..ny {
        for ix in 0..nx {
            out.push((iy * stride, ix * stride));
        }
    }
    Ok(out)
}

/// Foreground fraction of a tile and whether it passes the keep rule.
pub fn tissue_filter(patch: &ImageTensor) -> (bool, f64) {
    let total = patch.height() * patch.width();
    let mut fg = 0usize;
    for y in 0..patch.height() {
        for x in 0..patch.width() {
            let p = patch.pixel(y, x);
            let min = p[0].min(p[1]).min(p[2]);
            if min <= BACKGROUND_MIN_CHANNEL {
                fg += 1;
            }
        }
    }
    let fraction = fg as f64 / total as f64;
    (fraction >= KEEP_FRACTION, fraction)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub source: String,
    pub x: usize,
    pub y: usize,
    pub size: usize,
    pub split: Split,
    pub tag: String,
}

/// A named source image together with a free-form tag carried into the
/// manifest.
pub struct SourceImage {
    pub name: String,
    pub tag: String,
    pub image: ImageTensor,
}

/// Split assignment for one source: a seeded hash of the source name,
/// mapped to [0,1) and compared against the test fraction. Every tile of a
/// source inherits its split, so no source leaks across splits.
pub fn source_split(name: &str, test_fraction: f64, seed: u64) -> Split {
    let digest = bytes_sha256(format!("split:{seed}:{name}").as_bytes());
    let hi = u64::from_str_radix(&digest[..16], 16).expect("hex digest");
    let u = hi as f64 / (u64::MAX as f64 + 1.0);
    if u < test_fraction {
        Split::Test
    } else {
        Split::Train
    }
}

/// Tile, filter and split every source into a manifest.
pub fn build_manifest(
    sources: &[SourceImage],
    patch: usize,
    stride: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<Vec<ManifestEntry>> {
    if sources.is_empty() {
        return Err(Error::EmptyInput("manifest sources".into()));
    }
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(Error::Config(format!(
            "test fraction must be in [0,1], got {test_fraction}"
        )));
    }
    let mut entries = Vec::new();
    for src in sources {
        let split = source_split(&src.name, test_fraction, seed);
        for (y, x) in tile_image(src.image.height(), src.image.width(), patch, stride)? {
            let tile = src.image.crop(y, x, patch, patch)?;
            let (keep, _) = tissue_filter(&tile);
            if !keep {
                continue;
            }
            entries.push(ManifestEntry {
                id: format!("{}:{y}:{x}:{patch}", src.name),
                source: src.name.clone(),
                x,
                y,
                size: patch,
                split,
                tag: src.tag.clone(),
            });
        }
    }
    if entries.is_empty() {
        return Err(Error::EmptyInput(
            "manifest: no tiles survived filtering".into(),
        ));
    }
    let mut seen = HashSet::new();
    for e in &entries {
        if !seen.insert(e.id.clone()) {
            return Err(Error::Config(format!("duplicate manifest id {}", e.id)));
        }
    }
    Ok(entries)
}

/// One JSON object per line, UTF-8.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[derive(Debug, Default)]
pub struct CacheReport {
    pub written: usize,
    pub skipped: usize,
    /// (manifest id, message) for entries that could not be cached.
    pub errors: Vec<(String, String)>,
}

/// Precompute one latent and one condition grid per manifest entry,
/// content-addressed by the tile bytes plus the codec and embedder
/// configuration. A second run over unchanged inputs writes nothing.
/// Missing sources are reported per entry; the run continues.
pub fn precompute_caches(
    manifest: &[ManifestEntry],
    sources: &HashMap<String, ImageTensor>,
    codec: &Codec,
    embedder: &Embedder,
    grid_dims: (usize, usize),
    dir: &Path,
) -> Result<CacheReport> {
    std::fs::create_dir_all(dir)?;
    let latents_path = dir.join("latents.lftn");
    let grids_path = dir.join("grids.lftn");
    let index_path = dir.join("cache_index.json");
    let mut latents = if latents_path.exists() {
        TensorStore::load(&latents_path)?
    } else {
        TensorStore::new()
    };
    let mut grids = if grids_path.exists() {
        TensorStore::load(&grids_path)?
    } else {
        TensorStore::new()
    };
    let mut index: BTreeMap<String, String> = if index_path.exists() {
        serde_json::from_str(&std::fs::read_to_string(&index_path)?)?
    } else {
        BTreeMap::new()
    };

    let cfg_blob = format!(
        "{}|{}",
        serde_json::to_string(codec.config())?,
        serde_json::to_string(embedder.config())?
    );
    let mut report = CacheReport::default();
    for entry in manifest {
        let Some(img) = sources.get(&entry.source) else {
            report
                .errors
                .push((entry.id.clone(), format!("missing source {}", entry.source)));
            continue;
        };
        let tile = match img.crop(entry.y, entry.x, entry.size, entry.size) {
            Ok(t) => t,
            Err(e) => {
                report.errors.push((entry.id.clone(), e.to_string()));
                continue;
            }
        };
        let mut key_bytes: Vec<u8> = Vec::with_capacity(tile.data().len() * 4 + cfg_blob.len());
        for v in tile.data() {
            key_bytes.extend_from_slice(&v.to_le_bytes());
        }
        key_bytes.extend_from_slice(cfg_blob.as_bytes());
        let hash = bytes_sha256(&key_bytes);
        if index.get(&entry.id) == Some(&hash) && latents.contains(&entry.id) {
            report.skipped += 1;
            continue;
        }
        let lat = match codec.encode(&tile) {
            Ok(l) => l,
            Err(e) => {
                report.errors.push((entry.id.clone(), e.to_string()));
                continue;
            }
        };
        let grid = match embedder.embed_grid(&tile, grid_dims.0, grid_dims.1) {
            Ok(g) => g,
            Err(e) => {
                report.errors.push((entry.id.clone(), e.to_string()));
                continue;
            }
        };
        latents.insert(&entry.id, &lat)?;
        grids.insert(&entry.id, &grid.as_tensor())?;
        index.insert(entry.id.clone(), hash);
        report.written += 1;
    }
    if report.written > 0 {
        latents.save(&latents_path)?;
        grids.save(&grids_path)?;
        std::fs::write(&index_path, serde_json::to_string_pretty(&index)?)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyGenerator {
    Textures,
    TwoDomain,
    MaskedCells,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ToyCorpusSpec {
    pub generator: ToyGenerator,
    pub n: usize,
    pub resolution: usize,
    pub seed: u64,
    /// Target mask fraction for the masked-cells generator.
    #[serde(default = "default_density")]
    pub density: f64,
}

fn default_density() -> f64 {
    0.3
}

pub struct ToyCorpus {
    pub images: Vec<ImageTensor>,
    /// Second-domain renderings, paired index-for-index (two-domain only).
    pub pairs: Option<Vec<ImageTensor>>,
    /// Structural fields before palette mapping (textures and two-domain).
    pub structures: Option<Vec<Vec<f32>>>,
    /// Binary nucleus masks (masked-cells only).
    pub masks: Option<Vec<CellMask>>,
}

/// Multi-octave value noise on [0,1]: random lattices blended bilinearly,
/// amplitudes halving per octave, rescaled to span [0,1].
fn value_noise(res: usize, octaves: usize, rng: &mut impl Rng) -> Vec<f32> {
    let mut field = vec![0.0f32; res * res];
    let mut amp = 1.0f32;
    for o in 0..octaves {
        let cells = 1usize << (o + 1);
        let g = cells + 1;
        let lattice: Vec<f32> = (0..g * g).map(|_| rng.gen_range(0.0..1.0)).collect();
        for y in 0..res {
            for x in 0..res {
                let fy = y as f32 / res as f32 * cells as f32;
                let fx = x as f32 / res as f32 * cells as f32;
                let (iy, ix) = (fy as usize, fx as usize);
                let (ty, tx) = (fy - iy as f32, fx - ix as f32);
                let v00 = lattice[iy * g + ix];
                let v01 = lattice[iy * g + ix + 1];
                let v10 = lattice[(iy + 1) * g + ix];
                let v11 = lattice[(iy + 1) * g + ix + 1];
                let v = v00 * (1.0 - ty) * (1.0 - tx)
                    + v01 * (1.0 - ty) * tx
                    + v10 * ty * (1.0 - tx)
                    + v11 * ty * tx;
                field[y * res + x] += amp * v;
            }
        }
        amp *= 0.5;
    }
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in &field {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = (hi - lo).max(1e-6);
    for v in field.iter_mut() {
        *v = (*v - lo) / span;
    }
    field
}

/// Two-stop palettes, one per texture class. Kept away from near-white so
/// generated tiles always pass the foreground filter.
const PALETTES: [([f32; 3], [f32; 3]); 4] = [
    ([0.55, 0.15, 0.45], [0.80, 0.65, 0.75]),
    ([0.20, 0.30, 0.55], [0.70, 0.75, 0.80]),
    ([0.45, 0.30, 0.15], [0.80, 0.70, 0.55]),
    ([0.15, 0.45, 0.30], [0.65, 0.80, 0.70]),
];

fn render_palette(structure: &[f32], res: usize, palette: ([f32; 3], [f32; 3])) -> ImageTensor {
    let mut img = ImageTensor::zeros(res, res);
    for y in 0..res {
        for x in 0..res {
            let s = structure[y * res + x];
            let rgb = [
                palette.0[0] * (1.0 - s) + palette.1[0] * s,
                palette.0[1] * (1.0 - s) + palette.1[1] * s,
                palette.0[2] * (1.0 - s) + palette.1[2] * s,
            ];
            img.set_pixel(y, x, rgb);
        }
    }
    img
}

fn make_masked_cell(res: usize, density: f64, rng: &mut impl Rng) -> (ImageTensor, CellMask) {
    let mut mask = vec![0u8; res * res];
    let target = (density * (res * res) as f64).round() as usize;
    let mut covered = 0usize;
    let r_max = (res / 8).max(2);
    for _ in 0..10_000 {
        if covered >= target {
            break;
        }
        let r = rng.gen_range(2..=r_max) as i64;
        let cy = rng.gen_range(0..res) as i64;
        let cx = rng.gen_range(0..res) as i64;
        for y in (cy - r).max(0)..(cy + r + 1).min(res as i64) {
            for x in (cx - r).max(0)..(cx + r + 1).min(res as i64) {
                let idx = y as usize * res + x as usize;
                if (y - cy).pow(2) + (x - cx).pow(2) <= r * r && mask[idx] == 0 {
                    mask[idx] = 1;
                    covered += 1;
                }
            }
        }
    }
    // texture frequency follows the nucleus density, so appearance and
    // mask stay correlated
    let octaves = 2 + (density * 3.0) as usize;
    let texture = value_noise(res, octaves, rng);
    let mut img = ImageTensor::zeros(res, res);
    for y in 0..res {
        for x in 0..res {
            let idx = y * res + x;
            let t = texture[idx];
            let rgb = if mask[idx] == 1 {
                // nucleus: dark purple modulated by texture
                [0.30 + 0.10 * t, 0.10 + 0.10 * t, 0.45 + 0.10 * t]
            } else {
                // stroma: light pink, below the background threshold
                [0.80, 0.60 + 0.15 * t, 0.70]
            };
            img.set_pixel(y, x, rgb);
        }
    }
    let cell_mask = CellMask::new(res, res, mask).expect("binary mask by construction");
    (img, cell_mask)
}

/// Bit-reproducible procedural corpora; every image draws its own RNG
/// stream from (seed, index).
pub fn make_toy_corpus(spec: &ToyCorpusSpec) -> Result<ToyCorpus> {
    if spec.resolution == 0 {
        return Err(Error::Config("toy resolution must be positive".into()));
    }
    if !(0.0..=0.8).contains(&spec.density) {
        return Err(Error::Config(format!(
            "toy density must be in [0,0.8], got {}",
            spec.density
        )));
    }
    let res = spec.resolution;
    let mut corpus = ToyCorpus {
        images: Vec::with_capacity(spec.n),
        pairs: None,
        structures: None,
        masks: None,
    };
    match spec.generator {
        ToyGenerator::Textures => {
            let mut structures = Vec::with_capacity(spec.n);
            for i in 0..spec.n {
                let mut rng = derive_rng_indexed(spec.seed, "toy-textures", &[i as u64]);
                let class = rng.gen_range(0..PALETTES.len());
                let s = value_noise(res, 3, &mut rng);
                corpus.images.push(render_palette(&s, res, PALETTES[class]));
                structures.push(s);
            }
            corpus.structures = Some(structures);
        }
        ToyGenerator::TwoDomain => {
            let mut pairs = Vec::with_capacity(spec.n);
            let mut structures = Vec::with_capacity(spec.n);
            for i in 0..spec.n {
                let mut rng = derive_rng_indexed(spec.seed, "toy-two-domain", &[i as u64]);
                let s = value_noise(res, 3, &mut rng);
                corpus.images.push(render_palette(&s, res, PALETTES[0]));
                pairs.push(render_palette(&s, res, PALETTES[1]));
                structures.push(s);
            }
            corpus.pairs = Some(pairs);
            corpus.structures = Some(structures);
        }
        ToyGenerator::MaskedCells => {
            let mut masks = Vec::with_capacity(spec.n);
            for i in 0..spec.n {
                let mut rng = derive_rng_indexed(spec.seed, "toy-masked-cells", &[i as u64]);
                let (img, mask) = make_masked_cell(res, spec.density, &mut rng);
                corpus.images.push(img);
                masks.push(mask);
            }
            corpus.masks = Some(masks);
        }
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{Codec, CodecConfig};
    use crate::embedder::EmbedderConfig;

    fn flat_image(res: usize, rgb: [f32; 3]) -> ImageTensor {
        let mut img = ImageTensor::zeros(res, res);
        for y in 0..res {
            for x in 0..res {
                img.set_pixel(y, x, rgb);
            }
        }
        img
    }

    #[test]
    fn tiling_grid_arithmetic() {
        let t = tile_image(64, 64, 32, 32).unwrap();
        assert_eq!(t, vec![(0, 0), (0, 32), (32, 0), (32, 32)]);
        let t = tile_image(64, 64, 32, 16).unwrap();
        assert_eq!(t.len(), 9);
        assert_eq!(t[0], (0, 0));
        assert_eq!(t[8], (32, 32));
        // partial edge tiles dropped: 65 wide gains nothing at stride 32
        assert_eq!(tile_image(65, 65, 32, 32).unwrap().len(), 4);
        assert!(tile_image(16, 16, 32, 32).is_err());
        assert_eq!(tile_image(64, 64, 32, 16).unwrap(), t);
    }

    #[test]
    fn tissue_filter_rules() {
        let (keep, f) = tissue_filter(&flat_image(8, [1.0, 1.0, 1.0]));
        assert!(!keep);
        assert_eq!(f, 0.0);
        let (keep, f) = tissue_filter(&flat_image(8, [0.5, 0.5, 0.5]));
        assert!(keep);
        assert_eq!(f, 1.0);
        let mut img = flat_image(8, [1.0, 1.0, 1.0]);
        for y in 0..4 {
            for x in 0..8 {
                img.set_pixel(y, x, [0.6, 0.2, 0.4]);
            }
        }
        let (keep, f) = tissue_filter(&img);
        assert!(keep);
        assert_eq!(f, 0.5);
    }

    #[test]
    fn manifest_split_behavior() {
        let sources: Vec<SourceImage> = (0..100)
            .map(|i| SourceImage {
                name: format!("src{i}"),
                tag: "toy".into(),
                image: flat_image(32, [0.5, 0.4, 0.6]),
            })
            .collect();
        let entries = build_manifest(&sources, 16, 16, 0.1, 7).unwrap();
        // 4 tiles per 32x32 source
        assert_eq!(entries.len(), 400);
        let test_sources: HashSet<_> = entries
            .iter()
            .filter(|e| e.split == Split::Test)
            .map(|e| e.source.clone())
            .collect();
        let train_sources: HashSet<_> = entries
            .iter()
            .filter(|e| e.split == Split::Train)
            .map(|e| e.source.clone())
            .collect();
        assert!(test_sources.is_disjoint(&train_sources), "split leakage");
        assert!(
            (5..=15).contains(&test_sources.len()),
            "test sources {} outside binomial window",
            test_sources.len()
        );
        // all tiles of one source share its split
        for e in &entries {
            let split = source_split(&e.source, 0.1, 7);
            assert_eq!(e.split, split);
        }
        let ids: HashSet<_> = entries.iter().map(|e| &e.id).collect();
        assert_eq!(ids.len(), entries.len());
    }

    #[test]
    fn manifest_bytes_stable() {
        let sources = vec![SourceImage {
            name: "only".into(),
            tag: "t".into(),
            image: flat_image(32, [0.5, 0.4, 0.6]),
        }];
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        write_manifest(&a, &build_manifest(&sources, 16, 16, 0.1, 3).unwrap()).unwrap();
        write_manifest(&b, &build_manifest(&sources, 16, 16, 0.1, 3).unwrap()).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let back = read_manifest(&a).unwrap();
        assert_eq!(back, build_manifest(&sources, 16, 16, 0.1, 3).unwrap());
        let splits: HashSet<_> = back.iter().map(|e| e.split).collect();
        assert_eq!(splits.len(), 1, "single source spans one split");
    }

    #[test]
    fn all_white_corpus_rejected() {
        let sources = vec![SourceImage {
            name: "white".into(),
            tag: "t".into(),
            image: flat_image(32, [1.0, 1.0, 1.0]),
        }];
        assert!(matches!(
            build_manifest(&sources, 16, 16, 0.1, 0),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn cache_roundtrip_and_idempotence() {
        let spec = ToyCorpusSpec {
            generator: ToyGenerator::Textures,
            n: 3,
            resolution: 32,
            seed: 11,
            density: 0.3,
        };
        let corpus = make_toy_corpus(&spec).unwrap();
        let sources: Vec<SourceImage> = corpus
            .images
            .iter()
            .enumerate()
            .map(|(i, img)| SourceImage {
                name: format!("toy{i}"),
                tag: "textures".into(),
                image: img.clone(),
            })
            .collect();
        let manifest = build_manifest(&sources, 32, 32, 0.0, 0).unwrap();
        let lookup: HashMap<String, ImageTensor> = sources
            .iter()
            .map(|s| (s.name.clone(), s.image.clone()))
            .collect();
        let codec = Codec::new(CodecConfig::default());
        let embedder = Embedder::new(EmbedderConfig::default());
        let dir = tempfile::tempdir().unwrap();
        let report =
            precompute_caches(&manifest, &lookup, &codec, &embedder, (2, 2), dir.path()).unwrap();
        assert_eq!(report.written, manifest.len());
        assert!(report.errors.is_empty());

        let latents = TensorStore::load(&dir.path().join("latents.lftn")).unwrap();
        assert_eq!(latents.len(), manifest.len());
        for e in &manifest {
            let lat = latents.get(&e.id).unwrap();
            let tile = lookup[&e.source].crop(e.y, e.x, e.size, e.size).unwrap();
            let back = codec.decode(&lat).unwrap();
            let diff = back.as_tensor().max_abs_diff(&tile.as_tensor());
            assert!(diff < 1e-5, "roundtrip diff {diff}");
        }

        // second run over unchanged inputs writes nothing
        let report2 =
            precompute_caches(&manifest, &lookup, &codec, &embedder, (2, 2), dir.path()).unwrap();
        assert_eq!(report2.written, 0);
        assert_eq!(report2.skipped, manifest.len());
    }

    #[test]
    fn cache_reports_missing_source() {
        let manifest = vec![ManifestEntry {
            id: "ghost:0:0:16".into(),
            source: "ghost".into(),
            x: 0,
            y: 0,
            size: 16,
            split: Split::Train,
            tag: "t".into(),
        }];
        let codec = Codec::new(CodecConfig::default());
        let embedder = Embedder::new(EmbedderConfig::default());
        let dir = tempfile::tempdir().unwrap();
        let report = precompute_caches(
            &manifest,
            &HashMap::new(),
            &codec,
            &embedder,
            (2, 2),
            dir.path(),
        )
        .unwrap();
        assert_eq!(report.written, 0);
        assert_eq!(report.errors.len(), 1);
        assert_eq!(report.errors[0].0, "ghost:0:0:16");
    }

    #[test]
    fn toy_empty_and_reproducible() {
        let mut spec = ToyCorpusSpec {
            generator: ToyGenerator::Textures,
            n: 0,
            resolution: 32,
            seed: 5,
            density: 0.3,
        };
        assert!(make_toy_corpus(&spec).unwrap().images.is_empty());
        spec.n = 2;
        let a = make_toy_corpus(&spec).unwrap();
        let b = make_toy_corpus(&spec).unwrap();
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn two_domain_pairs_share_structure() {
        let spec = ToyCorpusSpec {
            generator: ToyGenerator::TwoDomain,
            n: 4,
            resolution: 32,
            seed: 9,
            density: 0.3,
        };
        let corpus = make_toy_corpus(&spec).unwrap();
        let pairs = corpus.pairs.as_ref().unwrap();
        let structures = corpus.structures.as_ref().unwrap();
        assert_eq!(pairs.len(), 4);
        for i in 0..4 {
            // both renderings come from the identical structural field
            let re_a = render_palette(&structures[i], 32, PALETTES[0]);
            let re_b = render_palette(&structures[i], 32, PALETTES[1]);
            assert_eq!(corpus.images[i].data(), re_a.data());
            assert_eq!(pairs[i].data(), re_b.data());
            assert_ne!(corpus.images[i].data(), pairs[i].data());
        }
    }

    #[test]
    fn masked_cells_density() {
        let spec = ToyCorpusSpec {
            generator: ToyGenerator::MaskedCells,
            n: 100,
            resolution: 32,
            seed: 21,
            density: 0.3,
        };
        let corpus = make_toy_corpus(&spec).unwrap();
        let masks = corpus.masks.as_ref().unwrap();
        let mean: f64 =
            masks.iter().map(|m| m.foreground_fraction()).sum::<f64>() / masks.len() as f64;
        assert!(
            (mean - 0.3).abs() < 0.05 * 0.3 + 0.02,
            "mean mask fraction {mean}"
        );
        // every generated tile passes the foreground filter
        for img in &corpus.images {
            assert!(tissue_filter(img).0);
        }
    }
}
