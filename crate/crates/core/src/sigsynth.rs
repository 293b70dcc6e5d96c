//! Synthetic offline signatures: each identity owns a stroke skeleton; genuine
//! samples redraw it with small style jitter, skilled forgeries with larger
//! control-point displacement and a slight tremor.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{Label, Manifest, ManifestRow};
use crate::error::{Error, Result};
use crate::imageprep::GrayImage;
use crate::seeds::stream;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub identities: usize,
    pub genuine_per_identity: usize,
    pub forged_per_identity: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Standard deviation (pixels) of genuine control-point jitter.
    pub style_jitter: f64,
    /// Standard deviation (pixels) of forgery control-point displacement.
    pub forgery_distortion: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            identities: 40,
            genuine_per_identity: 10,
            forged_per_identity: 10,
            height: 90,
            width: 150,
            seed: 0,
            style_jitter: 1.2,
            forgery_distortion: 4.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.identities == 0 || self.genuine_per_identity < 2 || self.forged_per_identity == 0 {
            return Err(Error::Config(format!(
                "need >= 1 identity, >= 2 genuine and >= 1 forged per identity (got {}, {}, {})",
                self.identities, self.genuine_per_identity, self.forged_per_identity
            )));
        }
        if self.height < 32 || self.width < 48 {
            return Err(Error::Config(format!("synthetic image {}x{} is below 32x48", self.height, self.width)));
        }
        if !(self.style_jitter > 0.0) || !(self.forgery_distortion > self.style_jitter) {
            return Err(Error::Config(format!(
                "need 0 < style jitter ({}) < forgery distortion ({})",
                self.style_jitter, self.forgery_distortion
            )));
        }
        Ok(())
    }
}

type Point = (f64, f64);

/// Stroke skeleton and writing style of one synthetic writer.
#[derive(Clone, Debug)]
pub struct IdentitySpec {
    pub identity: String,
    /// Control points in pixel coordinates `(x, y)`.
    pub strokes: Vec<Vec<Point>>,
    pub slant: f64,
    pub thickness: f64,
    /// Multiplier on the configured jitter.
    pub jitter_scale: f64,
}

impl IdentitySpec {
    pub fn random(identity: &str, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let (w, h) = (cfg.width as f64, cfg.height as f64);
        let n = rng.random_range(3..=5);
        let (left, right) = (0.12 * w, 0.88 * w);
        let span = (right - left) / n as f64;
        let strokes = (0..n)
            .map(|i| {
                let x0 = left + span * i as f64 + rng.random_range(-0.1..0.1) * span;
                let x1 = x0 + span * rng.random_range(0.9..1.4);
                let pts = rng.random_range(5..=8);
                let amp = h * rng.random_range(0.15..0.3);
                (0..pts)
                    .map(|j| {
                        let t = j as f64 / (pts - 1) as f64;
                        let x = x0 + t * (x1 - x0) + rng.random_range(-0.15..0.15) * span;
                        let y = 0.5 * h + rng.random_range(-1.0..1.0) * amp;
                        (x, y)
                    })
                    .collect()
            })
            .collect();
        IdentitySpec {
            identity: identity.to_string(),
            strokes,
            slant: rng.random_range(-0.3..0.3),
            thickness: rng.random_range(1.2..2.2),
            jitter_scale: rng.random_range(0.8..1.2),
        }
    }
}

fn gauss(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    Normal::new(0.0, sd).expect("finite sd").sample(rng)
}

/// Per-sample drawing parameters.
struct Style {
    slant: f64,
    scale: (f64, f64),
    shift: Point,
    point_sd: f64,
    tremor: f64,
    thickness: f64,
}

fn genuine_style(spec: &IdentitySpec, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Style {
    // neat, normal, stylish
    let mult = [0.6, 1.0, 1.5][rng.random_range(0..3)];
    Style {
        slant: spec.slant + gauss(rng, 0.04),
        scale: (1.0 + gauss(rng, 0.03), 1.0 + gauss(rng, 0.04)),
        shift: (gauss(rng, 2.0), gauss(rng, 1.5)),
        point_sd: cfg.style_jitter * spec.jitter_scale * mult,
        tremor: 0.0,
        thickness: (spec.thickness + gauss(rng, 0.15)).max(0.8),
    }
}

fn forged_style(spec: &IdentitySpec, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Style {
    Style {
        slant: spec.slant + gauss(rng, 0.12),
        scale: (1.0 + gauss(rng, 0.06), 1.0 + gauss(rng, 0.08)),
        shift: (gauss(rng, 2.0), gauss(rng, 1.5)),
        point_sd: cfg.forgery_distortion,
        tremor: 0.3,
        thickness: (spec.thickness + gauss(rng, 0.15)).max(0.8),
    }
}

fn catmull_rom(pts: &[Point], per_segment: usize) -> Vec<Point> {
    let n = pts.len();
    let at = |i: isize| pts[i.clamp(0, n as isize - 1) as usize];
    let mut out = Vec::with_capacity((n - 1) * per_segment + 1);
    for i in 0..n as isize - 1 {
        let (p0, p1, p2, p3) = (at(i - 1), at(i), at(i + 1), at(i + 2));
        for s in 0..per_segment {
            let t = s as f64 / per_segment as f64;
            let (t2, t3) = (t * t, t * t * t);
            let f = |a: f64, b: f64, c: f64, d: f64| {
                0.5 * (2.0 * b + (-a + c) * t + (2.0 * a - 5.0 * b + 4.0 * c - d) * t2 + (-a + 3.0 * b - 3.0 * c + d) * t3)
            };
            out.push((f(p0.0, p1.0, p2.0, p3.0), f(p0.1, p1.1, p2.1, p3.1)));
        }
    }
    out.push(pts[n - 1]);
    out
}

fn seg_dist(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Anti-aliased polyline rendering: pixel coverage falls off linearly over one
/// pixel around a stroke of the given thickness.
fn render(polylines: &[Vec<Point>], thickness: f64, h: usize, w: usize, rng: &mut ChaCha8Rng) -> GrayImage {
    let mut cover = vec![0.0f64; h * w];
    let reach = thickness / 2.0 + 1.0;
    for line in polylines {
        for seg in line.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let r0 = (a.1.min(b.1) - reach).floor().max(0.0) as usize;
            let r1 = ((a.1.max(b.1) + reach).ceil() as usize).min(h.saturating_sub(1));
            let c0 = (a.0.min(b.0) - reach).floor().max(0.0) as usize;
            let c1 = ((a.0.max(b.0) + reach).ceil() as usize).min(w.saturating_sub(1));
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let d = seg_dist((c as f64 + 0.5, r as f64 + 0.5), a, b);
                    let cov = (thickness / 2.0 + 0.5 - d).clamp(0.0, 1.0);
                    let slot = &mut cover[r * w + c];
                    *slot = slot.max(cov);
                }
            }
        }
    }
    let ink = rng.random_range(25.0..60.0);
    let pixels = cover
        .iter()
        .map(|&cov| {
            let bg = rng.random_range(238.0..=255.0);
            (bg - (bg - ink) * cov).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    GrayImage::new(h, w, pixels).expect("positive dims")
}

/// Draws one sample of `spec`.
fn draw(spec: &IdentitySpec, style: &Style, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> GrayImage {
    let (cx, cy) = (cfg.width as f64 / 2.0, cfg.height as f64 / 2.0);
    let lines: Vec<Vec<Point>> = spec
        .strokes
        .iter()
        .map(|stroke| {
            let moved: Vec<Point> = stroke
                .iter()
                .map(|&(x, y)| {
                    let (x, y) = (x + gauss(rng, style.point_sd), y + gauss(rng, style.point_sd));
                    let (dx, dy) = ((x - cx) * style.scale.0, (y - cy) * style.scale.1);
                    (cx + dx - style.slant * dy + style.shift.0, cy + dy + style.shift.1)
                })
                .collect();
            let mut curve = catmull_rom(&moved, 12);
            if style.tremor > 0.0 {
                for p in &mut curve {
                    p.0 += gauss(rng, style.tremor);
                    p.1 += gauss(rng, style.tremor);
                }
            }
            curve
        })
        .collect();
    render(&lines, style.thickness, cfg.height, cfg.width, rng)
}

pub fn identity_name(i: usize) -> String {
    format!("w{i:03}")
}

/// Renders one identity's samples: genuine first, then forged.
pub fn render_identity(cfg: &SynthConfig, index: usize) -> Vec<(String, Label, GrayImage)> {
    let id = identity_name(index);
    let spec = IdentitySpec::random(&id, cfg, &mut stream(cfg.seed, &format!("synth/{id}")));
    let mut out = Vec::new();
    for g in 0..cfg.genuine_per_identity {
        let mut rng = stream(cfg.seed, &format!("synth/{id}/g{g}"));
        let style = genuine_style(&spec, cfg, &mut rng);
        out.push((format!("{id}_g{g:02}.pgm"), Label::Genuine, draw(&spec, &style, cfg, &mut rng)));
    }
    for f in 0..cfg.forged_per_identity {
        let mut rng = stream(cfg.seed, &format!("synth/{id}/f{f}"));
        let style = forged_style(&spec, cfg, &mut rng);
        out.push((format!("{id}_f{f:02}.pgm"), Label::Forged, draw(&spec, &style, cfg, &mut rng)));
    }
    out
}

/// Writes `images/*.pgm` and `manifest.csv` under `out_dir`.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut rows = Vec::new();
    for i in 0..cfg.identities {
        for (file, label, img) in render_identity(cfg, i) {
            img.save_pgm(&img_dir.join(&file))?;
            rows.push(ManifestRow { path: Path::new("images").join(file), identity: identity_name(i), label });
        }
    }
    let manifest = Manifest { rows };
    manifest.write(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Manifest,
    pub val: Manifest,
    pub test: Manifest,
}

/// Identity counts for `ratios` (train, val, test) of `n` identities.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(*r > 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be positive and sum to 1")));
    }
    let train = (n as f64 * ratios[0]).round() as usize;
    let val = (n as f64 * ratios[1]).round() as usize;
    if train == 0 || val == 0 || train + val >= n {
        return Err(Error::Config(format!("{n} identities are too few for ratios {ratios:?}")));
    }
    Ok([train, val, n - train - val])
}

/// Writer-disjoint split: identities are shuffled and dealt into train/val/test.
pub fn split_writers<R: Rng>(manifest: &Manifest, ratios: [f64; 3], rng: &mut R) -> Result<Splits> {
    let mut ids = manifest.identities();
    let [a, b, _] = split_sizes(ids.len(), ratios)?;
    ids.shuffle(rng);
    let (mut tr, mut va, mut te) = (ids[..a].to_vec(), ids[a..a + b].to_vec(), ids[a + b..].to_vec());
    tr.sort();
    va.sort();
    te.sort();
    Ok(Splits { train: manifest.subset(&tr), val: manifest.subset(&va), test: manifest.subset(&te) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use std::collections::HashSet;

    fn small() -> SynthConfig {
        SynthConfig { identities: 4, genuine_per_identity: 4, forged_per_identity: 3, ..SynthConfig::default() }
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig::default().validate().is_ok());
        assert!(SynthConfig { forgery_distortion: 1.0, ..SynthConfig::default() }.validate().is_err());
        assert!(SynthConfig { genuine_per_identity: 1, ..SynthConfig::default() }.validate().is_err());
    }

    #[test]
    fn counts_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&small(), dir.path()).unwrap();
        assert_eq!(m.rows.len(), 4 * 7);
        assert_eq!(Manifest::read(&dir.path().join("manifest.csv")).unwrap(), m);
        let dir2 = tempfile::tempdir().unwrap();
        generate_dataset(&small(), dir2.path()).unwrap();
        for r in &m.rows {
            assert_eq!(fs::read(dir.path().join(&r.path)).unwrap(), fs::read(dir2.path().join(&r.path)).unwrap());
        }
        let other = render_identity(&SynthConfig { seed: 1, ..small() }, 0);
        assert_ne!(other[0].2, render_identity(&small(), 0)[0].2);
    }

    #[test]
    fn images_have_ink_on_light_paper() {
        for (_, _, img) in render_identity(&small(), 2) {
            let dark = img.pixels().iter().filter(|&&p| p < 128).count();
            assert!(dark > 50, "only {dark} ink pixels");
            assert!(img.pixels().iter().filter(|&&p| p >= 238).count() > img.pixels().len() / 2);
        }
    }

    fn pixel_distance(a: &GrayImage, b: &GrayImage) -> f64 {
        a.pixels().iter().zip(b.pixels()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn genuine_pairs_are_closer_than_forgeries() {
        let cfg = SynthConfig { identities: 12, genuine_per_identity: 5, forged_per_identity: 5, ..SynthConfig::default() };
        let (mut gg, mut gf) = (Vec::new(), Vec::new());
        for i in 0..cfg.identities {
            let samples = render_identity(&cfg, i);
            let (gen, forg) = samples.split_at(cfg.genuine_per_identity);
            for (a, x) in gen.iter().enumerate() {
                for y in &gen[a + 1..] {
                    gg.push(pixel_distance(&x.2, &y.2));
                }
                for y in forg {
                    gf.push(pixel_distance(&x.2, &y.2));
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&gg) < mean(&gf), "genuine {} vs forged {}", mean(&gg), mean(&gf));
    }

    #[test]
    fn splits_are_disjoint_and_complete() {
        let ids: Vec<String> = (0..40).map(identity_name).collect();
        let m = Manifest {
            rows: ids
                .iter()
                .flat_map(|id| {
                    (0..3).map(move |j| ManifestRow { path: format!("{id}_{j}.pgm").into(), identity: id.clone(), label: Label::Genuine })
                })
                .collect(),
        };
        for seed in 0..100 {
            let s = split_writers(&m, [0.75, 0.125, 0.125], &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let sets: Vec<HashSet<String>> = [&s.train, &s.val, &s.test].iter().map(|x| x.identities().into_iter().collect()).collect();
            assert_eq!(sets.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![30, 5, 5]);
            assert!(sets[0].is_disjoint(&sets[1]) && sets[0].is_disjoint(&sets[2]) && sets[1].is_disjoint(&sets[2]));
            let paths: HashSet<_> = [&s.train, &s.val, &s.test].iter().flat_map(|x| x.rows.iter().map(|r| r.path.clone())).collect();
            assert_eq!(paths.len(), m.rows.len());
        }
        let a = split_writers(&m, [0.75, 0.125, 0.125], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = split_writers(&m, [0.75, 0.125, 0.125], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(split_writers(&m.subset(&ids[..2]), [0.75, 0.125, 0.125], &mut ChaCha8Rng::seed_from_u64(1)).is_err());
        assert!(split_sizes(40, [0.5, 0.5, 0.5]).is_err());
    }
}
