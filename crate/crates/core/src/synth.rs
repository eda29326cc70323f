//! Procedural stick-figure poses.
//!
//! Each archetype is a quantized joint-angle tuple: torso direction plus a
//! relative angle for each arm and leg. Left limbs only take angles on one
//! side of the torso axis and right limbs on the other, so no two tuples
//! draw the same set of segments.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::quantize;
use crate::tensor::Tensor;

const TORSO_ANGLES: [f64; 4] = [0.0, 60.0, 120.0, 180.0];
const ARM_ANGLES: [f64; 3] = [30.0, 90.0, 160.0];
const LEG_ANGLES: [f64; 3] = [10.0, 50.0, 100.0];

/// Number of distinct archetypes.
pub const ARCHETYPE_COUNT: usize = TORSO_ANGLES.len()
    * ARM_ANGLES.len()
    * ARM_ANGLES.len()
    * LEG_ANGLES.len()
    * LEG_ANGLES.len();

/// Standard deviation of the per-joint angle jitter, in degrees.
pub const ANGLE_JITTER_DEG: f64 = 5.0;
/// Maximum translation jitter as a fraction of the canvas.
pub const SHIFT_JITTER: f64 = 0.005;

const TORSO_LEN: f64 = 0.28;
const ARM_LEN: f64 = 0.26;
const LEG_LEN: f64 = 0.32;
const HEAD_RADIUS: f64 = 0.07;

/// Joint angles in degrees; 0 points up, positive turns clockwise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseAngles {
    pub torso: f64,
    pub left_arm: f64,
    pub right_arm: f64,
    pub left_leg: f64,
    pub right_leg: f64,
}

impl PoseAngles {
    pub fn for_archetype(archetype: usize) -> Result<Self> {
        if archetype >= ARCHETYPE_COUNT {
            return Err(Error::Config(format!(
                "archetype {archetype} out of range (only {ARCHETYPE_COUNT} defined)"
            )));
        }
        // 97 is coprime with 324, so this permutes the archetype space and
        // neighbouring ids land on dissimilar tuples.
        let mut idx = (archetype * 97 + 13) % ARCHETYPE_COUNT;
        let mut digit = |radix: usize| {
            let d = idx % radix;
            idx /= radix;
            d
        };
        let torso = TORSO_ANGLES[digit(TORSO_ANGLES.len())];
        let la = ARM_ANGLES[digit(ARM_ANGLES.len())];
        let ra = ARM_ANGLES[digit(ARM_ANGLES.len())];
        let ll = LEG_ANGLES[digit(LEG_ANGLES.len())];
        let rl = LEG_ANGLES[digit(LEG_ANGLES.len())];
        Ok(PoseAngles {
            torso,
            left_arm: torso + la,
            right_arm: torso - ra,
            left_leg: torso + 180.0 - ll,
            right_leg: torso + 180.0 + rl,
        })
    }
}

const ORIENTATION_BINS: usize = 36;
const ORIENTATION_SMOOTH_DEG: f64 = 12.0;

/// Length-weighted histogram of undirected segment orientations, smoothed
/// by a Gaussian so nearby angles overlap the way jittered renders do.
fn orientation_profile(p: &PoseAngles) -> [f64; ORIENTATION_BINS] {
    let segments = [
        (p.torso, TORSO_LEN),
        (p.left_arm, ARM_LEN),
        (p.right_arm, ARM_LEN),
        (p.left_leg, LEG_LEN),
        (p.right_leg, LEG_LEN),
    ];
    let width = 180.0 / ORIENTATION_BINS as f64;
    let mut out = [0.0; ORIENTATION_BINS];
    for (b, slot) in out.iter_mut().enumerate() {
        let centre = (b as f64 + 0.5) * width;
        for &(deg, len) in &segments {
            let d = (deg - centre).rem_euclid(180.0);
            let d = d.min(180.0 - d);
            *slot += len * (-0.5 * (d / ORIENTATION_SMOOTH_DEG).powi(2)).exp();
        }
    }
    out
}

/// All archetypes in farthest-first order of orientation-profile distance,
/// starting from archetype 0. Mean-pooled patch features see mostly which
/// stroke orientations occur, so any prefix of this order gives classes that
/// such an encoder can tell apart.
pub fn archetype_order() -> &'static [usize] {
    static ORDER: OnceLock<Vec<usize>> = OnceLock::new();
    ORDER.get_or_init(|| {
        let profiles: Vec<_> = (0..ARCHETYPE_COUNT)
            .map(|a| orientation_profile(&PoseAngles::for_archetype(a).expect("archetype in range")))
            .collect();
        let dist = |a: usize, b: usize| {
            profiles[a]
                .iter()
                .zip(&profiles[b])
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
        };
        let mut order = vec![0];
        let mut nearest: Vec<f64> = (0..ARCHETYPE_COUNT).map(|a| dist(0, a)).collect();
        while order.len() < ARCHETYPE_COUNT {
            let mut best = usize::MAX;
            for a in 0..ARCHETYPE_COUNT {
                if !order.contains(&a) && (best == usize::MAX || nearest[a] > nearest[best]) {
                    best = a;
                }
            }
            order.push(best);
            for a in 0..ARCHETYPE_COUNT {
                nearest[a] = nearest[a].min(dist(best, a));
            }
        }
        order
    })
}

/// Everything needed to render one synthetic raster.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPoseSpec {
    pub archetype: usize,
    pub seed: u64,
    pub noise: f64,
    /// Stroke thickness in pixels; `None` means `side / 16` (min 1).
    pub thickness: Option<f64>,
}

impl SyntheticPoseSpec {
    pub fn new(archetype: usize, seed: u64, noise: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&noise) {
            return Err(Error::Config(format!("noise level {noise} outside [0,1]")));
        }
        if archetype >= ARCHETYPE_COUNT {
            return Err(Error::Config(format!(
                "archetype {archetype} out of range (only {ARCHETYPE_COUNT} defined)"
            )));
        }
        Ok(SyntheticPoseSpec {
            archetype,
            seed,
            noise,
            thickness: None,
        })
    }

    pub fn stroke(&self, side: usize) -> f64 {
        self.thickness.unwrap_or_else(|| (side as f64 / 16.0).max(1.0))
    }
}

impl fmt::Display for SyntheticPoseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "synthetic:{}:{}:{}", self.archetype, self.seed, self.noise)?;
        if let Some(t) = self.thickness {
            write!(f, ":{t}")?;
        }
        Ok(())
    }
}

impl FromStr for SyntheticPoseSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed synthetic source {s:?}"));
        let rest = s.strip_prefix("synthetic:").ok_or_else(bad)?;
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() != 3 && parts.len() != 4 {
            return Err(bad());
        }
        let mut spec = SyntheticPoseSpec::new(
            parts[0].parse().map_err(|_| bad())?,
            parts[1].parse().map_err(|_| bad())?,
            parts[2].parse().map_err(|_| bad())?,
        )?;
        if let Some(t) = parts.get(3) {
            let t: f64 = t.parse().map_err(|_| bad())?;
            if t.is_nan() || t <= 0.0 {
                return Err(bad());
            }
            spec.thickness = Some(t);
        }
        Ok(spec)
    }
}

fn direction(deg: f64) -> (f64, f64) {
    let r = deg.to_radians();
    (r.sin(), -r.cos())
}

fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Renders a spec to a `[side×side]` tensor quantized to 8-bit levels, so a
/// PGM round trip reproduces it exactly.
pub fn render_pose(spec: &SyntheticPoseSpec, side: usize) -> Result<Tensor> {
    let base = PoseAngles::for_archetype(spec.archetype)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut jitter = |deg: f64| deg + ANGLE_JITTER_DEG * standard_normal(&mut rng);
    let angles = PoseAngles {
        torso: jitter(base.torso),
        left_arm: jitter(base.left_arm),
        right_arm: jitter(base.right_arm),
        left_leg: jitter(base.left_leg),
        right_leg: jitter(base.right_leg),
    };
    let scale = rng.gen_range(0.9..1.0);
    let shift = (
        SHIFT_JITTER * (2.0 * rng.gen::<f64>() - 1.0),
        SHIFT_JITTER * (2.0 * rng.gen::<f64>() - 1.0),
    );
    render_with_angles(spec, angles, scale, shift, side, &mut rng)
}

/// Renders the archetype with no jitter, shift or noise.
pub fn render_template(archetype: usize, side: usize) -> Result<Tensor> {
    let spec = SyntheticPoseSpec::new(archetype, 0, 0.0)?;
    let angles = PoseAngles::for_archetype(archetype)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    render_with_angles(&spec, angles, 1.0, (0.0, 0.0), side, &mut rng)
}

fn render_with_angles(
    spec: &SyntheticPoseSpec,
    angles: PoseAngles,
    scale: f64,
    shift: (f64, f64),
    side: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if side == 0 {
        return Err(Error::Config("raster side must be positive".into()));
    }
    let at = |o: (f64, f64), deg: f64, len: f64| {
        let d = direction(deg);
        (o.0 + d.0 * len, o.1 + d.1 * len)
    };
    let hip = (0.0, 0.0);
    let neck = at(hip, angles.torso, TORSO_LEN);
    let head = at(neck, angles.torso, HEAD_RADIUS * 1.6);
    let mut segments = vec![
        (hip, neck),
        (neck, at(neck, angles.left_arm, ARM_LEN)),
        (neck, at(neck, angles.right_arm, ARM_LEN)),
        (hip, at(hip, angles.left_leg, LEG_LEN)),
        (hip, at(hip, angles.right_leg, LEG_LEN)),
    ];

    // Centre the bounding box of the figure, then apply scale and shift.
    let mut xs: Vec<f64> = segments.iter().flat_map(|(a, b)| [a.0, b.0]).collect();
    let mut ys: Vec<f64> = segments.iter().flat_map(|(a, b)| [a.1, b.1]).collect();
    xs.extend([head.0 - HEAD_RADIUS, head.0 + HEAD_RADIUS]);
    ys.extend([head.1 - HEAD_RADIUS, head.1 + HEAD_RADIUS]);
    let span = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    };
    let (x0, x1) = span(&xs);
    let (y0, y1) = span(&ys);
    let fit = (0.84 / (x1 - x0).max(y1 - y0)).min(1.0) * scale;
    let centre = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    let place = |p: (f64, f64)| {
        (
            0.5 + shift.0 + (p.0 - centre.0) * fit,
            0.5 + shift.1 + (p.1 - centre.1) * fit,
        )
    };
    for seg in &mut segments {
        *seg = (place(seg.0), place(seg.1));
    }
    let head = place(head);
    let head_r = HEAD_RADIUS * fit;

    let px = side as f64;
    let half = spec.stroke(side) / 2.0;
    let mut data = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let p = ((x as f64 + 0.5) / px, (y as f64 + 0.5) / px);
            let mut d = segments
                .iter()
                .map(|(a, b)| point_segment_distance(p, *a, *b))
                .fold(f64::INFINITY, f64::min);
            let to_head = ((p.0 - head.0).powi(2) + (p.1 - head.1).powi(2)).sqrt();
            d = d.min((to_head - head_r).max(0.0));
            let stroke = (half + 0.5 - d * px).clamp(0.0, 1.0);
            let background = spec.noise * rng.gen::<f64>();
            data.push(f64::from(quantize(stroke.max(background))) / 255.0);
        }
    }
    Ok(Tensor::from_parts(vec![side, side], data))
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 in (0,1] keeps the log finite.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn archetype_tuples_are_distinct() {
        let mut seen = HashSet::new();
        for a in 0..ARCHETYPE_COUNT {
            let p = PoseAngles::for_archetype(a).unwrap();
            let key = format!("{:?}", p);
            assert!(seen.insert(key), "archetype {a} repeats");
        }
        const { assert!(ARCHETYPE_COUNT >= 82) };
        assert!(PoseAngles::for_archetype(ARCHETYPE_COUNT).is_err());
    }

    #[test]
    fn archetype_order_is_a_permutation() {
        let order = archetype_order();
        let unique: HashSet<_> = order.iter().collect();
        assert_eq!(unique.len(), ARCHETYPE_COUNT);
        assert_eq!(order[0], 0);
    }

    #[test]
    fn spec_string_round_trip() {
        let s = SyntheticPoseSpec::new(12, 99, 0.15).unwrap();
        assert_eq!(s.to_string(), "synthetic:12:99:0.15");
        assert_eq!(s.to_string().parse::<SyntheticPoseSpec>().unwrap(), s);
        let mut t = s;
        t.thickness = Some(3.0);
        assert_eq!(t.to_string().parse::<SyntheticPoseSpec>().unwrap(), t);
        assert!("synthetic:1:2".parse::<SyntheticPoseSpec>().is_err());
        assert!("synthetic:1:2:1.5".parse::<SyntheticPoseSpec>().is_err());
        assert!("file:1:2:0.1".parse::<SyntheticPoseSpec>().is_err());
    }

    #[test]
    fn rendering_is_pure_and_in_range() {
        let s = SyntheticPoseSpec::new(5, 1234, 0.2).unwrap();
        let a = render_pose(&s, 32).unwrap();
        let b = render_pose(&s, 32).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(a.data().contains(&1.0));
    }
}
