//! Seeded synthetic datasets. Every generator is a pure function of its
//! arguments and the RNG state, and every emitted coordinate lies in [0, 1].

use std::collections::BTreeSet;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{EbmError, Result};
use crate::tensor::Tensor;

/// Corners of `[lo, hi]²`, in the order (lo,lo), (hi,lo), (lo,hi), (hi,hi).
pub fn square_corners(lo: f64, hi: f64) -> Vec<Vec<f64>> {
    vec![vec![lo, lo], vec![hi, lo], vec![lo, hi], vec![hi, hi]]
}

/// `n` draws from an equal-weight isotropic Gaussian mixture. Returns the
/// samples and the component each came from.
pub fn gaussian_mixture<R: Rng + ?Sized>(
    centers: &[Vec<f64>],
    sigma: f64,
    n: usize,
    rng: &mut R,
) -> Result<(Tensor, Vec<usize>)> {
    gaussian_mixture_widths(centers, &vec![sigma; centers.len()], n, rng)
}

/// Like [`gaussian_mixture`] with a separate width per component.
pub fn gaussian_mixture_widths<R: Rng + ?Sized>(
    centers: &[Vec<f64>],
    sigmas: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<(Tensor, Vec<usize>)> {
    let d = match centers.first() {
        Some(c) => c.len(),
        None => return Err(EbmError::EmptyInput("mixture centers".into())),
    };
    if sigmas.len() != centers.len() {
        return Err(EbmError::Dimension(format!(
            "{} centers but {} widths",
            centers.len(),
            sigmas.len()
        )));
    }
    for (k, (c, &s)) in centers.iter().zip(sigmas).enumerate() {
        if c.len() != d {
            return Err(EbmError::Dimension(format!(
                "center {k} has dimension {}",
                c.len()
            )));
        }
        if !(s >= 0.0) {
            return Err(EbmError::Contract(format!("width {s} of component {k}")));
        }
        if c.iter().any(|&v| v < 3.0 * s || v > 1.0 - 3.0 * s) {
            return Err(EbmError::Contract(format!(
                "center {k} {c:?} is closer than 3σ = {} to the unit cube boundary",
                3.0 * s
            )));
        }
    }
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.random_range(0..centers.len());
        labels.push(k);
        for &c in &centers[k] {
            let z: f64 = StandardNormal.sample(rng);
            data.push((c + sigmas[k] * z).clamp(0.0, 1.0));
        }
    }
    Ok((Tensor::matrix(n, d, data)?, labels))
}

/// Points on a ring around (0.5, 0.5): uniform angle, Gaussian radial offset.
pub fn ring2d<R: Rng + ?Sized>(
    radius: f64,
    thickness: f64,
    n: usize,
    rng: &mut R,
) -> Result<Tensor> {
    ring2d_at([0.5, 0.5], radius, thickness, n, rng)
}

pub fn ring2d_at<R: Rng + ?Sized>(
    center: [f64; 2],
    radius: f64,
    thickness: f64,
    n: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let reach = radius + 3.0 * thickness;
    if !(radius > 0.0 && thickness >= 0.0)
        || center.iter().any(|&c| c - reach < 0.0 || c + reach > 1.0)
    {
        return Err(EbmError::Contract(format!(
            "ring of radius {radius} and thickness {thickness} at {center:?} does not fit in the unit square"
        )));
    }
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        let z: f64 = StandardNormal.sample(rng);
        let r = radius + thickness * z;
        data.push(center[0] + r * a.cos());
        data.push(center[1] + r * a.sin());
    }
    Tensor::matrix(n, 2, data)
}

pub const SPRITE_SIDE: usize = 16;
const SUPERSAMPLE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Circle,
}

/// Position is in pixel units with pixel `j` covering `[j, j + 1)`; `scale` is
/// the side length (square) or diameter (circle) in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpriteLatent {
    pub shape: Shape,
    pub x: f64,
    pub y: f64,
    pub scale: f64,
}

/// Antialiased rendering of one sprite, row-major, values in [0, 1].
pub fn render_sprite(latent: &SpriteLatent) -> Result<Vec<f64>> {
    let half = latent.scale / 2.0;
    let side = SPRITE_SIDE as f64;
    if !(latent.scale > 0.0)
        || latent.x - half < 0.0
        || latent.y - half < 0.0
        || latent.x + half > side
        || latent.y + half > side
    {
        return Err(EbmError::Contract(format!(
            "sprite {latent:?} leaves the {SPRITE_SIDE}×{SPRITE_SIDE} canvas"
        )));
    }
    let inside = |px: f64, py: f64| match latent.shape {
        Shape::Square => (px - latent.x).abs() < half && (py - latent.y).abs() < half,
        Shape::Circle => (px - latent.x).powi(2) + (py - latent.y).powi(2) < half * half,
    };
    let sub = SUPERSAMPLE as f64;
    let mut img = vec![0.0; SPRITE_SIDE * SPRITE_SIDE];
    for row in 0..SPRITE_SIDE {
        for col in 0..SPRITE_SIDE {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = col as f64 + (sx as f64 + 0.5) / sub;
                    let py = row as f64 + (sy as f64 + 0.5) / sub;
                    hits += usize::from(inside(px, py));
                }
            }
            img[row * SPRITE_SIDE + col] = hits as f64 / (sub * sub);
        }
    }
    Ok(img)
}

/// `per_combo` noisy renderings of each latent. Noise is Gaussian with std
/// `noise`, and pixels are clamped to [0, 1].
pub fn mini_sprites<R: Rng + ?Sized>(
    latents: &[SpriteLatent],
    per_combo: usize,
    noise: f64,
    rng: &mut R,
) -> Result<(Tensor, Vec<SpriteLatent>)> {
    let pixels = SPRITE_SIDE * SPRITE_SIDE;
    let mut data = Vec::with_capacity(latents.len() * per_combo * pixels);
    let mut labels = Vec::with_capacity(latents.len() * per_combo);
    for latent in latents {
        let clean = render_sprite(latent)?;
        for _ in 0..per_combo {
            for &p in &clean {
                let z: f64 = StandardNormal.sample(rng);
                data.push((p + noise * z).clamp(0.0, 1.0));
            }
            labels.push(*latent);
        }
    }
    Ok((Tensor::matrix(labels.len(), pixels, data)?, labels))
}

/// Size and intensity centroid of a square sprite image: `(√mass, x, y)`.
/// Pixels below `floor` are ignored so background noise does not bias the
/// moments.
pub fn measure_sprite(img: &[f64], floor: f64) -> (f64, f64, f64) {
    let (mut mass, mut mx, mut my) = (0.0, 0.0, 0.0);
    for (i, &p) in img.iter().enumerate() {
        let p = if p < floor { 0.0 } else { p };
        let (row, col) = (i / SPRITE_SIDE, i % SPRITE_SIDE);
        mass += p;
        mx += p * (col as f64 + 0.5);
        my += p * (row as f64 + 0.5);
    }
    if mass == 0.0 {
        return (0.0, f64::NAN, f64::NAN);
    }
    (mass.sqrt(), mx / mass, my / mass)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub id: usize,
    pub classes: (usize, usize),
    pub data: Tensor,
    pub labels: Vec<usize>,
}

/// Splits a labelled dataset into one task per class pair, in the given order.
pub fn split_tasks(data: &Tensor, labels: &[usize], pairs: &[(usize, usize)]) -> Result<Vec<Task>> {
    if labels.len() != data.rows() {
        return Err(EbmError::Dimension(format!(
            "{} labels for {} rows",
            labels.len(),
            data.rows()
        )));
    }
    let mut seen = BTreeSet::new();
    for &(a, b) in pairs {
        if a == b || !seen.insert(a) || !seen.insert(b) {
            return Err(EbmError::Contract(format!(
                "class pairs {pairs:?} are not disjoint"
            )));
        }
    }
    if let Some(l) = labels.iter().find(|l| !seen.contains(l)) {
        return Err(EbmError::Contract(format!("class {l} belongs to no task")));
    }
    Ok(pairs
        .iter()
        .enumerate()
        .map(|(id, &(a, b))| {
            let idx: Vec<usize> = (0..labels.len())
                .filter(|&i| labels[i] == a || labels[i] == b)
                .collect();
            Task {
                id,
                classes: (a, b),
                data: data.select_rows(&idx),
                labels: idx.iter().map(|&i| labels[i]).collect(),
            }
        })
        .collect())
}

/// Damped pendulum `θ'' = −g·sin θ − damping·θ'`. Every `kick_period`-th
/// action adds `±kick` to the angular velocity, sign chosen by a fair coin;
/// other actions are zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PendulumConfig {
    pub trajectories: usize,
    pub length: usize,
    pub kick_period: usize,
    pub kick: f64,
    pub dt: f64,
    pub substeps: usize,
    pub gravity: f64,
    pub damping: f64,
    /// Std of Gaussian noise added to the velocity after each step.
    pub process_noise: f64,
    /// Initial angle and velocity are uniform in `±init_angle`, `±init_velocity`.
    pub init_angle: f64,
    pub init_velocity: f64,
    /// Fraction of trajectories in the training split.
    pub train_fraction: f64,
}

impl Default for PendulumConfig {
    fn default() -> Self {
        Self {
            trajectories: 200,
            length: 100,
            kick_period: 4,
            kick: 0.75,
            dt: 0.1,
            substeps: 10,
            gravity: 9.81,
            damping: 0.5,
            process_noise: 0.01,
            init_angle: 1.0,
            init_velocity: 1.0,
            train_fraction: 0.9,
        }
    }
}

/// Raw (θ, ω) pairs are mapped to `(v − lo) / (hi − lo)` per coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl Normalizer {
    pub fn apply(&self, s: [f64; 2]) -> [f64; 2] {
        [0, 1].map(|i| (s[i] - self.lo[i]) / (self.hi[i] - self.lo[i]))
    }

    pub fn invert(&self, s: [f64; 2]) -> [f64; 2] {
        [0, 1].map(|i| self.lo[i] + s[i] * (self.hi[i] - self.lo[i]))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transitions {
    pub states: Tensor,
    pub actions: Vec<f64>,
    pub next: Tensor,
}

impl Transitions {
    /// `[s, s']` rows, the input of a transition energy.
    pub fn pairs(&self) -> Tensor {
        let n = self.states.rows();
        let mut data = Vec::with_capacity(4 * n);
        for r in 0..n {
            data.extend_from_slice(self.states.row_slice(r));
            data.extend_from_slice(self.next.row_slice(r));
        }
        Tensor::matrix(n, 4, data).expect("4 values per row")
    }
}

#[derive(Clone, Debug)]
pub struct TrajectoryData {
    /// Normalized states, `length` per trajectory.
    pub train_paths: Vec<Vec<[f64; 2]>>,
    pub test_paths: Vec<Vec<[f64; 2]>>,
    pub train: Transitions,
    pub test: Transitions,
    pub normalizer: Normalizer,
}

fn pendulum_rhs(cfg: &PendulumConfig, s: [f64; 2]) -> [f64; 2] {
    [s[1], -cfg.gravity * s[0].sin() - cfg.damping * s[1]]
}

/// One RK4-integrated step of length `cfg.dt`, without kicks or noise.
pub fn pendulum_step(cfg: &PendulumConfig, s: [f64; 2]) -> [f64; 2] {
    let h = cfg.dt / cfg.substeps.max(1) as f64;
    let mut s = s;
    for _ in 0..cfg.substeps.max(1) {
        let add = |a: [f64; 2], k: [f64; 2], f: f64| [a[0] + f * k[0], a[1] + f * k[1]];
        let k1 = pendulum_rhs(cfg, s);
        let k2 = pendulum_rhs(cfg, add(s, k1, h / 2.0));
        let k3 = pendulum_rhs(cfg, add(s, k2, h / 2.0));
        let k4 = pendulum_rhs(cfg, add(s, k3, h));
        s = [0, 1].map(|i| s[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
    }
    s
}

/// Mechanical energy per unit mass and length squared.
pub fn pendulum_energy(cfg: &PendulumConfig, s: [f64; 2]) -> f64 {
    0.5 * s[1] * s[1] + cfg.gravity * (1.0 - s[0].cos())
}

/// Raw (unnormalized) trajectories and the action taken before each step.
pub fn simulate_pendulum<R: Rng + ?Sized>(
    cfg: &PendulumConfig,
    rng: &mut R,
) -> Result<Vec<(Vec<[f64; 2]>, Vec<f64>)>> {
    if cfg.length < 2 {
        return Err(EbmError::Contract("trajectory length must be >= 2".into()));
    }
    if cfg.kick_period == 0 || !(cfg.dt > 0.0) {
        return Err(EbmError::Config(
            "kick_period and dt must be positive".into(),
        ));
    }
    let noise = Normal::new(0.0, cfg.process_noise)
        .map_err(|e| EbmError::Config(format!("process_noise: {e}")))?;
    let mut out = Vec::with_capacity(cfg.trajectories);
    for _ in 0..cfg.trajectories {
        let mut s = [
            rng.random_range(-1.0..=1.0) * cfg.init_angle,
            rng.random_range(-1.0..=1.0) * cfg.init_velocity,
        ];
        let mut path = vec![s];
        let mut actions = Vec::with_capacity(cfg.length - 1);
        for t in 0..cfg.length - 1 {
            let a = if (t + 1) % cfg.kick_period == 0 {
                if rng.random_bool(0.5) {
                    cfg.kick
                } else {
                    -cfg.kick
                }
            } else {
                0.0
            };
            s[1] += a;
            s = pendulum_step(cfg, s);
            s[1] += noise.sample(rng);
            actions.push(a);
            path.push(s);
        }
        out.push((path, actions));
    }
    Ok(out)
}

/// Simulates, normalizes to [0, 1] with bounds taken from all generated
/// states, and splits by trajectory into train and test.
pub fn trajectory_sim<R: Rng + ?Sized>(
    cfg: &PendulumConfig,
    rng: &mut R,
) -> Result<TrajectoryData> {
    let raw = simulate_pendulum(cfg, rng)?;
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for s in raw.iter().flat_map(|(p, _)| p) {
        for i in 0..2 {
            lo[i] = lo[i].min(s[i]);
            hi[i] = hi[i].max(s[i]);
        }
    }
    for i in 0..2 {
        if hi[i] - lo[i] < 1e-12 {
            lo[i] -= 0.5;
            hi[i] += 0.5;
        }
    }
    let normalizer = Normalizer { lo, hi };
    let n_train = ((cfg.trajectories as f64) * cfg.train_fraction).round() as usize;
    let (mut train_paths, mut test_paths) = (vec![], vec![]);
    let (mut train_t, mut test_t) = (vec![], vec![]);
    for (k, (path, actions)) in raw.into_iter().enumerate() {
        let norm: Vec<[f64; 2]> = path.iter().map(|&s| normalizer.apply(s)).collect();
        let triples: Vec<_> = (0..actions.len())
            .map(|t| (norm[t], actions[t], norm[t + 1]))
            .collect();
        if k < n_train {
            train_paths.push(norm);
            train_t.extend(triples);
        } else {
            test_paths.push(norm);
            test_t.extend(triples);
        }
    }
    let pack = |t: &[([f64; 2], f64, [f64; 2])]| -> Result<Transitions> {
        Ok(Transitions {
            states: Tensor::matrix(t.len(), 2, t.iter().flat_map(|x| x.0).collect())?,
            actions: t.iter().map(|x| x.1).collect(),
            next: Tensor::matrix(t.len(), 2, t.iter().flat_map(|x| x.2).collect())?,
        })
    };
    Ok(TrajectoryData {
        train: pack(&train_t)?,
        test: pack(&test_t)?,
        train_paths,
        test_paths,
        normalizer,
    })
}

/// CSV with columns `x0..x{d-1}` and an optional trailing `label` column.
pub fn write_csv<W: Write>(out: W, x: &Tensor, labels: Option<&[usize]>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (0..x.cols()).map(|j| format!("x{j}")).collect();
    if labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header).map_err(csv_err)?;
    for r in 0..x.rows() {
        let mut rec: Vec<String> = x.row_slice(r).iter().map(|v| format!("{v:?}")).collect();
        if let Some(l) = labels {
            rec.push(l[r].to_string());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a file written by [`write_csv`]. Values round-trip exactly.
pub fn read_csv<R: Read>(input: R) -> Result<(Tensor, Option<Vec<usize>>)> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let has_label = headers.iter().next_back() == Some("label");
    let d = headers.len() - usize::from(has_label);
    let (mut data, mut labels) = (vec![], vec![]);
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        for j in 0..d {
            data.push(
                rec[j]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| EbmError::Format(format!("{e}: {:?}", &rec[j])))?,
            );
        }
        if has_label {
            labels.push(
                rec[d]
                    .trim()
                    .parse::<usize>()
                    .map_err(|e| EbmError::Format(e.to_string()))?,
            );
        }
    }
    let rows = data.len() / d.max(1);
    Ok((Tensor::matrix(rows, d, data)?, has_label.then_some(labels)))
}

fn csv_err(e: csv::Error) -> EbmError {
    EbmError::Format(e.to_string())
}

/// Binary PGM (P5) of square images of `side` pixels tiled `cols` per row.
pub fn pgm_grid(images: &Tensor, side: usize, cols: usize) -> Result<Vec<u8>> {
    if images.cols() != side * side {
        return Err(EbmError::Dimension(format!(
            "images have {} pixels, expected {}",
            images.cols(),
            side * side
        )));
    }
    let n = images.rows();
    let cols = cols.clamp(1, n.max(1));
    let grid_rows = n.div_ceil(cols);
    let (w, h) = (cols * side, grid_rows * side);
    let mut pix = vec![0u8; w * h];
    for k in 0..n {
        let (gr, gc) = (k / cols, k % cols);
        for (i, &v) in images.row_slice(k).iter().enumerate() {
            let (r, c) = (gr * side + i / side, gc * side + i % side);
            pix[r * w + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(pix);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded;

    #[test]
    fn narrow_mixture_sits_on_its_center() {
        let (x, l) = gaussian_mixture(&[vec![0.3, 0.6]], 1e-9, 20, &mut seeded(0)).unwrap();
        assert!(l.iter().all(|&k| k == 0));
        for r in 0..20 {
            assert!((x.get(r, 0) - 0.3).abs() < 1e-6 && (x.get(r, 1) - 0.6).abs() < 1e-6);
        }
    }

    #[test]
    fn corner_frequencies_are_balanced() {
        let (_, l) =
            gaussian_mixture(&square_corners(0.2, 0.8), 0.02, 10_000, &mut seeded(1)).unwrap();
        for k in 0..4 {
            let f = l.iter().filter(|&&v| v == k).count() as f64 / 1e4;
            assert!((f - 0.25).abs() < 0.02, "component {k}: {f}");
        }
    }

    #[test]
    fn margin_violation() {
        assert!(gaussian_mixture(&[vec![0.05, 0.5]], 0.02, 1, &mut seeded(0)).is_err());
    }

    #[test]
    fn generators_are_seeded() {
        let a = gaussian_mixture(&square_corners(0.2, 0.8), 0.02, 50, &mut seeded(3)).unwrap();
        let b = gaussian_mixture(&square_corners(0.2, 0.8), 0.02, 50, &mut seeded(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            ring2d(0.3, 0.02, 50, &mut seeded(4)).unwrap(),
            ring2d(0.3, 0.02, 50, &mut seeded(4)).unwrap()
        );
    }

    #[test]
    fn ring_radius_and_fit() {
        let x = ring2d(0.3, 0.02, 5000, &mut seeded(2)).unwrap();
        let mean_r = (0..x.rows())
            .map(|r| (x.get(r, 0) - 0.5).hypot(x.get(r, 1) - 0.5))
            .sum::<f64>()
            / 5000.0;
        assert!((mean_r - 0.3).abs() < 2e-3);
        let thin = ring2d(0.3, 0.0, 100, &mut seeded(2)).unwrap();
        for r in 0..100 {
            assert!(((thin.get(r, 0) - 0.5).hypot(thin.get(r, 1) - 0.5) - 0.3).abs() < 1e-12);
        }
        assert!(ring2d(0.45, 0.02, 1, &mut seeded(0)).is_err());
    }

    fn sprite(shape: Shape, x: f64, y: f64, scale: f64) -> SpriteLatent {
        SpriteLatent { shape, x, y, scale }
    }

    #[test]
    fn smallest_square_covers_three_by_three() {
        let img = render_sprite(&sprite(Shape::Square, 4.5, 8.5, 3.0)).unwrap();
        let on: Vec<usize> = (0..256).filter(|&i| img[i] > 0.0).collect();
        let rows: BTreeSet<usize> = on.iter().map(|i| i / 16).collect();
        let cols: BTreeSet<usize> = on.iter().map(|i| i % 16).collect();
        assert_eq!(rows.into_iter().collect::<Vec<_>>(), vec![7, 8, 9]);
        assert_eq!(cols.into_iter().collect::<Vec<_>>(), vec![3, 4, 5]);
    }

    #[test]
    fn square_centroid_matches_latent() {
        for (x, y, s) in [(4.5, 8.5, 3.0), (7.3, 9.1, 5.0), (11.5, 4.5, 7.0)] {
            let img = render_sprite(&sprite(Shape::Square, x, y, s)).unwrap();
            let (size, cx, cy) = measure_sprite(&img, 0.0);
            assert!((cx - x).abs() < 0.5 && (cy - y).abs() < 0.5);
            assert!((size - s).abs() < 0.5);
        }
    }

    #[test]
    fn shapes_differ() {
        let a = render_sprite(&sprite(Shape::Square, 8.5, 8.5, 7.0)).unwrap();
        let b = render_sprite(&sprite(Shape::Circle, 8.5, 8.5, 7.0)).unwrap();
        let differing = a
            .iter()
            .zip(&b)
            .filter(|(p, q)| (*p - *q).abs() > 1e-9)
            .count();
        assert!(
            differing as f64 >= 0.05 * 256.0,
            "{differing} pixels differ"
        );
    }

    #[test]
    fn sprite_off_canvas() {
        assert!(render_sprite(&sprite(Shape::Circle, 1.0, 8.0, 3.0)).is_err());
    }

    #[test]
    fn ten_classes_make_five_disjoint_tasks() {
        let labels: Vec<usize> = (0..40).map(|i| i % 10).collect();
        let x = Tensor::matrix(40, 1, (0..40).map(f64::from).collect()).unwrap();
        let pairs = [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)];
        let tasks = split_tasks(&x, &labels, &pairs).unwrap();
        assert_eq!(tasks.len(), 5);
        let total: usize = tasks.iter().map(|t| t.labels.len()).sum();
        assert_eq!(total, 40);
        for t in &tasks {
            assert!(t
                .labels
                .iter()
                .all(|&l| l == t.classes.0 || l == t.classes.1));
        }
        assert!(split_tasks(&x, &labels, &[(0, 1), (1, 2)]).is_err());
    }

    #[test]
    fn resting_pendulum_stays_put() {
        let cfg = PendulumConfig {
            trajectories: 1,
            kick: 0.0,
            process_noise: 0.0,
            init_angle: 0.0,
            init_velocity: 0.0,
            ..PendulumConfig::default()
        };
        let raw = simulate_pendulum(&cfg, &mut seeded(0)).unwrap();
        assert!(raw[0].0.iter().all(|s| *s == [0.0, 0.0]));
    }

    #[test]
    fn pendulum_energy_decays_between_kicks() {
        let cfg = PendulumConfig {
            trajectories: 5,
            process_noise: 0.0,
            ..PendulumConfig::default()
        };
        for (path, actions) in simulate_pendulum(&cfg, &mut seeded(1)).unwrap() {
            for t in 0..actions.len() {
                if actions[t] == 0.0 {
                    assert!(
                        pendulum_energy(&cfg, path[t + 1]) <= pendulum_energy(&cfg, path[t]) + 1e-9
                    );
                }
            }
        }
    }

    #[test]
    fn kicked_transitions_are_bimodal() {
        let cfg = PendulumConfig {
            trajectories: 400,
            length: 5,
            init_angle: 0.0,
            init_velocity: 0.0,
            ..PendulumConfig::default()
        };
        // The fourth action is the first kick; from rest the pendulum
        // swings one way or the other.
        let angles: Vec<f64> = simulate_pendulum(&cfg, &mut seeded(2))
            .unwrap()
            .iter()
            .map(|(p, _)| p[4][0])
            .collect();
        let pos = angles.iter().filter(|&&a| a > 0.05).count();
        let neg = angles.iter().filter(|&&a| a < -0.05).count();
        assert!(pos > 150 && neg > 150, "{pos} / {neg}");
        assert_eq!(pos + neg, 400);
    }

    #[test]
    fn normalized_states_are_in_the_unit_square() {
        let data = trajectory_sim(&PendulumConfig::default(), &mut seeded(3)).unwrap();
        assert_eq!(data.train_paths.len(), 180);
        assert_eq!(data.test_paths.len(), 20);
        for t in [&data.train, &data.test] {
            assert!(t
                .states
                .data()
                .iter()
                .chain(t.next.data())
                .all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn csv_round_trip() {
        let x = Tensor::uniform(&[5, 3], 0.0, 1.0, &mut seeded(0));
        let labels = vec![0, 1, 2, 1, 0];
        let mut buf = vec![];
        write_csv(&mut buf, &x, Some(&labels)).unwrap();
        let (y, l) = read_csv(&buf[..]).unwrap();
        assert_eq!(x, y);
        assert_eq!(l.unwrap(), labels);
    }

    #[test]
    fn pgm_header_and_size() {
        let imgs = Tensor::zeros(&[3, 4]);
        let bytes = pgm_grid(&imgs, 2, 2).unwrap();
        assert!(bytes.starts_with(b"P5\n4 4\n255\n"));
        assert_eq!(bytes.len(), b"P5\n4 4\n255\n".len() + 16);
    }
}
