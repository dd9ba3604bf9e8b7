//! Procedural stand-in for a fluoroscopy dataset: vessel maps, guidewire
//! ground truth, a grayscale renderer, and stratified train/val/test splits.
//!
//! Geometry lives in normalized [0,1]^2 image coordinates with y growing
//! downward. The vessel map is an aortic-arch analog: one trunk entering from
//! the bottom right, arching over, with two upward branches; the first branch
//! along the arch plays the brachiocephalic target, the second (sharper
//! takeoff) the left-common-carotid target.
//!
//! Guidewire curves are tip-first and chord-consistent: the fit is iterated
//! once so refitting dense samples of the truth reproduces it closely.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bspline::{ctrl_count_for_length, fit_spline, Point2, Polyline, SplineCurve};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::rng::{counter_normal, rng_from, subseed, subseed_n};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchId {
    Bca,
    Lcca,
}

impl BranchId {
    pub fn as_str(&self) -> &'static str {
        match self {
            BranchId::Bca => "bca",
            BranchId::Lcca => "lcca",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bca" => Ok(BranchId::Bca),
            "lcca" => Ok(BranchId::Lcca),
            other => Err(Error::domain(format!("unknown branch label {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TipType {
    Straight,
    Angled,
}

impl TipType {
    pub fn as_str(&self) -> &'static str {
        match self {
            TipType::Straight => "straight",
            TipType::Angled => "angled",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub id: BranchId,
    pub centerline: Polyline,
    pub lumen_radius: f64,
    /// Index into the trunk polyline where the branch attaches; the branch's
    /// first point equals that trunk point exactly.
    pub attach_index: usize,
    /// Arc length along the trunk at the attachment.
    pub attach_arc: f64,
    /// Takeoff angle against the trunk tangent, radians.
    pub takeoff_angle: f64,
}

#[derive(Debug, Clone)]
pub struct VesselMap {
    pub trunk: Polyline,
    pub trunk_radius: f64,
    pub branches: Vec<Branch>,
}

/// Which tube a point was matched to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TubeId {
    Trunk,
    Branch(BranchId),
}

impl VesselMap {
    pub fn branch(&self, id: BranchId) -> Result<&Branch> {
        self.branches
            .iter()
            .find(|b| b.id == id)
            .ok_or_else(|| Error::domain(format!("branch {} missing from map", id.as_str())))
    }

    pub fn tube(&self, id: TubeId) -> (&Polyline, f64) {
        match id {
            TubeId::Trunk => (&self.trunk, self.trunk_radius),
            TubeId::Branch(b) => {
                let br = self.branch(b).expect("branch exists");
                (&br.centerline, br.lumen_radius)
            }
        }
    }

    pub fn tubes(&self) -> Vec<(TubeId, &Polyline, f64)> {
        let mut v = vec![(TubeId::Trunk, &self.trunk, self.trunk_radius)];
        for b in &self.branches {
            v.push((TubeId::Branch(b.id), &b.centerline, b.lumen_radius));
        }
        v
    }

    /// Nearest tube: (id, distance to centerline, arc along it, closest point).
    pub fn nearest_tube(&self, p: Point2) -> (TubeId, f64, f64, Point2) {
        let mut best = (TubeId::Trunk, f64::INFINITY, 0.0, p);
        for (id, line, _r) in self.tubes() {
            let (d, q, arc) = line.closest(p);
            if d < best.1 {
                best = (id, d, arc, q);
            }
        }
        best
    }

    /// True when the point lies inside some lumen.
    pub fn inside_lumen(&self, p: Point2) -> bool {
        self.tubes()
            .iter()
            .any(|(_, line, r)| line.closest(p).0 <= *r)
    }

    /// Pulls a point radially to within `margin * radius` of the nearest
    /// centerline if it is outside every lumen.
    pub fn project_into_lumen(&self, p: Point2, margin: f64) -> Point2 {
        if self.inside_lumen(p) {
            return p;
        }
        let (id, dist, _, q) = self.nearest_tube(p);
        let (_, r) = self.tube(id);
        if dist <= r {
            return p;
        }
        let dir = p.sub(q).normalized();
        q.add(dir.scale(r * margin))
    }

    /// Navigation target: the far end of a branch centerline.
    pub fn branch_target(&self, id: BranchId) -> Result<Point2> {
        Ok(*self.branch(id)?.centerline.points().last().unwrap())
    }
}

fn rotate(v: Point2, angle: f64) -> Point2 {
    let (s, c) = angle.sin_cos();
    Point2::new(c * v.x - s * v.y, s * v.x + c * v.y)
}

/// Densifies waypoints by linear interpolation, then smooths with a cubic fit.
fn smooth_through(waypoints: &[Point2], n_ctrl: usize, n_out: usize) -> Polyline {
    let mut dense = Vec::new();
    for w in waypoints.windows(2) {
        let steps = 40;
        for s in 0..steps {
            let f = s as f64 / steps as f64;
            dense.push(w[0].add(w[1].sub(w[0]).scale(f)));
        }
    }
    dense.push(*waypoints.last().unwrap());
    let poly = Polyline::new(dense).expect("waypoints are distinct");
    let fit = fit_spline(&poly.resample(400), 3, n_ctrl).expect("waypoint fit");
    fit.curve.to_polyline(n_out).expect("smooth centerline")
}

/// Aortic-arch analog with two upward branches. Same seed, same map.
pub fn gen_vessel_map(seed: u64) -> VesselMap {
    let mut rng = rng_from(subseed(seed, "vesselmap"));
    let mut j = |amp: f64| rng.gen_range(-amp..amp);

    // descending-aorta analog entering bottom right, arching over to the left
    let waypoints = [
        Point2::new(0.80 + j(0.02), 0.93 + j(0.01)),
        Point2::new(0.77 + j(0.02), 0.72 + j(0.02)),
        Point2::new(0.72 + j(0.02), 0.52 + j(0.02)),
        Point2::new(0.63 + j(0.02), 0.36 + j(0.02)),
        Point2::new(0.48 + j(0.02), 0.30 + j(0.015)),
        Point2::new(0.34 + j(0.02), 0.36 + j(0.02)),
        Point2::new(0.27 + j(0.015), 0.52 + j(0.02)),
    ];
    let trunk = smooth_through(&waypoints, 7, 300);
    let trunk_radius = 0.034 + j(0.003);
    let trunk_len = trunk.length();
    let cum = trunk.cumulative_lengths();

    let mut branches = Vec::new();
    let specs = [
        (BranchId::Bca, 0.55 + j(0.02), 0.96 + j(0.12)),
        (BranchId::Lcca, 0.70 + j(0.02), 1.45 + j(0.10)),
    ];
    for (id, frac, angle) in specs {
        let arc = frac * trunk_len;
        let attach_index = match cum.binary_search_by(|c| c.partial_cmp(&arc).unwrap()) {
            Ok(i) => i,
            Err(i) => i.min(cum.len() - 1),
        };
        let attach = trunk.points()[attach_index];
        let tangent = trunk.tangent_at_arc(cum[attach_index]);
        // rotate the tangent by the takeoff angle, choosing the upward side
        let a = rotate(tangent, angle);
        let b = rotate(tangent, -angle);
        let dir = if a.y < b.y { a } else { b };
        let len = 0.21 + j(0.02);
        let curl = j(0.35);
        let mid = attach.add(dir.scale(len * 0.5));
        let end = attach.add(rotate(dir, curl).scale(len));
        let mut line = smooth_through(&[attach, mid, end], 4, 90);
        // the attachment must lie on the trunk exactly
        line.0[0] = attach;
        branches.push(Branch {
            id,
            centerline: line,
            lumen_radius: 0.021 + j(0.002),
            attach_index,
            attach_arc: cum[attach_index],
            takeoff_angle: angle,
        });
    }
    VesselMap {
        trunk,
        trunk_radius,
        branches,
    }
}

/// Length of the rigid tip stub appended along the final heading.
pub const TIP_STUB_LEN: f64 = 0.05;

/// Walks the vessel centerlines to the requested depth and returns the wire
/// path from insertion to tip (not yet reversed).
fn centerline_path(map: &VesselMap, insertion: f64, branch: Option<BranchId>) -> Result<Polyline> {
    let trunk_len = map.trunk.length();
    let step = 0.004;
    let mut pts: Vec<Point2> = Vec::new();
    match branch {
        None => {
            let depth = insertion * trunk_len;
            let n = (depth / step).ceil() as usize;
            for i in 0..=n {
                pts.push(map.trunk.point_at_arc(depth * i as f64 / n as f64));
            }
        }
        Some(id) => {
            let br = map.branch(id)?;
            let branch_len = br.centerline.length();
            // insertion measures the full route: trunk to the ostium plus branch
            let total = insertion * (br.attach_arc + branch_len);
            if total <= br.attach_arc {
                let n = (total / step).ceil() as usize;
                for i in 0..=n {
                    pts.push(map.trunk.point_at_arc(total * i as f64 / n as f64));
                }
            } else {
                let n1 = (br.attach_arc / step).ceil() as usize;
                for i in 0..n1 {
                    pts.push(map.trunk.point_at_arc(br.attach_arc * i as f64 / n1 as f64));
                }
                let into = (total - br.attach_arc).min(branch_len);
                let n2 = (into / step).ceil() as usize;
                for i in 0..=n2 {
                    pts.push(br.centerline.point_at_arc(into * i as f64 / n2 as f64));
                }
            }
        }
    }
    Polyline::new(pts)
}

/// Ground-truth guidewire: centerline path with bounded transverse jitter,
/// an optional curled tip, and a straight tip stub projected into the lumen,
/// fitted as a tip-first clamped cubic.
pub fn gen_guidewire(
    map: &VesselMap,
    insertion: f64,
    branch: Option<BranchId>,
    tip: TipType,
    max_ctrl: usize,
    seed: u64,
) -> Result<SplineCurve> {
    if !(insertion > 0.0 && insertion <= 1.0) {
        return Err(Error::domain(format!("insertion {insertion} not in (0,1]")));
    }
    if let Some(id) = branch {
        map.branch(id)?; // validates the label
    }
    let mut rng = rng_from(subseed(seed, "guidewire"));
    let path = centerline_path(map, insertion, branch)?;
    let total = path.length();

    // low-frequency transverse jitter bounded by half the local radius
    let n_modes = 3;
    let modes: Vec<(f64, f64, f64)> = (0..n_modes)
        .map(|_| {
            (
                rng.gen_range(0.2..1.0),
                rng.gen_range(1.0..3.5),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let amp_norm: f64 = modes.iter().map(|m| m.0).sum();
    let tip_curl = match tip {
        TipType::Angled => rng.gen_range(0.6..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
        TipType::Straight => 0.0,
    };
    let stub_angle = rng.gen_range(-1.7..1.7);

    let mut jittered: Vec<Point2> = Vec::with_capacity(path.len() + 12);
    let cum = path.cumulative_lengths();
    for (i, &p) in path.points().iter().enumerate() {
        let s = cum[i] / total;
        let (_, dist_id) = (0, ());
        let _ = dist_id;
        let local_r = match map.nearest_tube(p).0 {
            TubeId::Trunk => map.trunk_radius,
            TubeId::Branch(b) => map.branch(b)?.lumen_radius,
        };
        let tangent = path.tangent_at_arc(cum[i]);
        let normal = Point2::new(-tangent.y, tangent.x);
        let mut off: f64 = modes
            .iter()
            .map(|(a, f, ph)| a * (std::f64::consts::TAU * f * s + ph).sin())
            .sum();
        off *= 0.5 * local_r / amp_norm.max(1e-9);
        // angled tips add an in-lumen curl over the last stretch
        if tip_curl != 0.0 {
            let tail = ((s - 0.88) / 0.12).clamp(0.0, 1.0);
            off += tip_curl * 0.45 * local_r * tail * tail;
        }
        jittered.push(p.add(normal.scale(off)));
    }
    // tip stub: an arc that turns progressively toward the stub angle,
    // pressed back into the lumen where it would poke the wall
    let end = *jittered.last().unwrap();
    let exit_dir = {
        let k = jittered.len();
        jittered[k - 1].sub(jittered[k.saturating_sub(4)]).normalized()
    };
    let stub_steps = 10;
    let mut cur = end;
    for i in 0..stub_steps {
        let a = stub_angle * (i as f64 + 0.5) / stub_steps as f64;
        let raw = cur.add(rotate(exit_dir, a).scale(TIP_STUB_LEN / stub_steps as f64));
        cur = map.project_into_lumen(raw, 0.9);
        jittered.push(cur);
    }
    // light smoothing keeps curvature bounded where the projection bends
    for _ in 0..2 {
        jittered = moving_average(&jittered, 2);
    }

    jittered.reverse(); // tip-first
    let poly = Polyline::new(jittered)?;
    let n_ctrl = ctrl_count_for_length(poly.length(), 3, max_ctrl);
    let mut curve = fit_spline(&poly.resample(512), 3, n_ctrl)?.curve;
    // extra passes make the curve chord-consistent
    for _ in 0..2 {
        curve = fit_spline(&curve.to_polyline(512)?, 3, n_ctrl)?.curve;
    }
    Ok(curve)
}

/// Moving average with window +-`half`, endpoints pinned.
fn moving_average(pts: &[Point2], half: usize) -> Vec<Point2> {
    let n = pts.len();
    (0..n)
        .map(|i| {
            if i == 0 || i + 1 == n {
                return pts[i];
            }
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            let mut acc = Point2::new(0.0, 0.0);
            for p in &pts[lo..=hi] {
                acc = acc.add(*p);
            }
            acc.scale(1.0 / (hi - lo + 1) as f64)
        })
        .collect()
}

fn smoothstep(x: f64) -> f64 {
    let t = x.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Minimum pixel distance to any segment of the point chain, rasterized only
/// near it; cells farther than `reach_px` keep `f64::INFINITY`.
fn distance_field(points: &[Point2], h: usize, w: usize, reach_px: f64, buf: &mut [f64]) {
    let to_px = |p: Point2| (p.x * w as f64 - 0.5, p.y * h as f64 - 0.5);
    for seg in points.windows(2) {
        let (ax, ay) = to_px(seg[0]);
        let (bx, by) = to_px(seg[1]);
        let (lo_x, hi_x) = (ax.min(bx) - reach_px, ax.max(bx) + reach_px);
        let (lo_y, hi_y) = (ay.min(by) - reach_px, ay.max(by) + reach_px);
        let c0 = lo_x.floor().max(0.0) as usize;
        let c1 = (hi_x.ceil() as isize).clamp(-1, w as isize - 1);
        let r0 = lo_y.floor().max(0.0) as usize;
        let r1 = (hi_y.ceil() as isize).clamp(-1, h as isize - 1);
        if c1 < 0 || r1 < 0 {
            continue;
        }
        let (dx, dy) = (bx - ax, by - ay);
        let len_sq = dx * dx + dy * dy;
        for r in r0..=(r1 as usize) {
            for c in c0..=(c1 as usize) {
                let (px, py) = (c as f64, r as f64);
                let t = if len_sq > 0.0 {
                    (((px - ax) * dx + (py - ay) * dy) / len_sq).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (qx, qy) = (ax + t * dx, ay + t * dy);
                let d = ((px - qx) * (px - qx) + (py - qy) * (py - qy)).sqrt();
                let cell = &mut buf[r * w + c];
                if d < *cell {
                    *cell = d;
                }
            }
        }
    }
}

/// Background only: smooth field, vessel tint, pixel noise. Pure in `seed`.
fn render_background(map: &VesselMap, h: usize, w: usize, noise_sigma: f64, seed: u64) -> GrayImage {
    let mut rng = rng_from(subseed(seed, "bgfield"));
    let modes: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.01..0.04),
                rng.gen_range(0.3..2.5),
                rng.gen_range(0.3..2.5),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let mut vessel_dist = vec![f64::INFINITY; h * w];
    let max_r_px = (map.trunk_radius * w as f64).max(1.0) + 2.0;
    for (_, line, _) in map.tubes() {
        distance_field(line.points(), h, w, max_r_px, &mut vessel_dist);
    }
    let noise_seed = subseed(seed, "noise");
    let mut img = GrayImage::new(w, h);
    for r in 0..h {
        for c in 0..w {
            let x = (c as f64 + 0.5) / w as f64;
            let y = (r as f64 + 0.5) / h as f64;
            let mut v = 0.85;
            for (a, fx, fy, ph) in &modes {
                v += a * (std::f64::consts::TAU * (fx * x + fy * y) + ph).cos();
            }
            // vessels read slightly darker, as with contrast medium
            let (id, ..) = map.nearest_tube(Point2::new(x, y));
            let (_, radius) = self_tube_radius(map, id);
            let d_norm = vessel_dist[r * w + c] / w as f64;
            let inside = smoothstep((radius - d_norm) / (1.5 / w as f64) + 0.5);
            v *= 1.0 - 0.15 * inside;
            v += noise_sigma * counter_normal(noise_seed, (r * w + c) as u64);
            img.set(r, c, v.clamp(0.0, 1.0));
        }
    }
    img
}

fn self_tube_radius(map: &VesselMap, id: TubeId) -> (TubeId, f64) {
    let (_, r) = map.tube(id);
    (id, r)
}

/// Full render: background (pure function of map, dims, noise, seed) with the
/// wire multiplied on top as an anti-aliased dark curve. Pixels beyond the
/// wire's reach are bit-identical to the background render.
pub fn render(
    map: &VesselMap,
    wire: &SplineCurve,
    h: usize,
    w: usize,
    contrast: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<GrayImage> {
    if !(contrast > 0.0 && contrast <= 1.0) {
        return Err(Error::domain(format!("contrast {contrast} not in (0,1]")));
    }
    if noise_sigma < 0.0 {
        return Err(Error::domain("noise sigma must be >= 0"));
    }
    let mut img = render_background(map, h, w, noise_sigma, seed);
    let arc = wire.arc_length(1e-4);
    let n = ((arc * 2.0 * w as f64).ceil() as usize).clamp(32, 2048);
    let samples = wire.sample_uniform(n)?;
    let mut wire_dist = vec![f64::INFINITY; h * w];
    distance_field(&samples, h, w, 3.0, &mut wire_dist);
    for (i, d) in wire_dist.iter().enumerate() {
        if *d < 3.0 {
            let coverage = smoothstep((1.4 - d) / 1.0);
            img.pixels[i] *= 1.0 - contrast * coverage;
        }
    }
    img.clamp_in_place();
    Ok(img)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub branch: String,
    pub length_bucket: String,
    pub contrast: f64,
    pub tip_type: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Annotation {
    pub spline: SplineCurve,
    pub polyline: Vec<[f64; 2]>,
    pub meta: SampleMeta,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub image: GrayImage,
    pub truth: SplineCurve,
    pub polyline: Polyline,
    pub meta: SampleMeta,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq, Hash)]
pub struct StrataLabels {
    pub branch: String,
    pub length_bucket: String,
    pub contrast: String,
    pub tip_type: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub annotation: String,
    pub split: String,
    pub strata: StrataLabels,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub image_size: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub max_ctrl: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 128,
            image_size: 64,
            seed: 0,
            noise_sigma: 0.02,
            max_ctrl: 24,
        }
    }
}

pub const CONTRAST_LEVELS: [f64; 3] = [0.3, 0.6, 0.9];
const BRANCH_OPTIONS: [Option<BranchId>; 3] = [None, Some(BranchId::Bca), Some(BranchId::Lcca)];
const BUCKETS: [&str; 3] = ["short", "medium", "long"];
const TIPS: [TipType; 2] = [TipType::Straight, TipType::Angled];

fn branch_label(b: Option<BranchId>) -> &'static str {
    b.map_or("none", |id| id.as_str())
}

/// Generates one sample for a stratum cell.
pub fn gen_sample(
    cfg: &SynthConfig,
    branch: Option<BranchId>,
    bucket: &str,
    contrast: f64,
    tip: TipType,
    sample_seed: u64,
) -> Result<Sample> {
    let map = gen_vessel_map(sample_seed);
    let mut rng = rng_from(subseed(sample_seed, "insertion"));
    // insertion depth tercile within the feasible range for the route
    let (lo, hi) = match (branch, bucket) {
        (None, "short") => (0.15, 0.45),
        (None, "medium") => (0.45, 0.72),
        (None, "long") => (0.72, 1.0),
        (Some(id), b) => {
            let br = map.branch(id)?;
            let route = br.attach_arc + br.centerline.length();
            let min_frac = (br.attach_arc + 0.04) / route;
            let span = (1.0 - min_frac) / 3.0;
            match b {
                "short" => (min_frac, min_frac + span),
                "medium" => (min_frac + span, min_frac + 2.0 * span),
                _ => (min_frac + 2.0 * span, 1.0),
            }
        }
        _ => return Err(Error::domain(format!("unknown length bucket {bucket}"))),
    };
    let insertion = rng.gen_range(lo..hi);
    let truth = gen_guidewire(&map, insertion, branch, tip, cfg.max_ctrl, sample_seed)?;
    let image = render(
        &map,
        &truth,
        cfg.image_size,
        cfg.image_size,
        contrast,
        cfg.noise_sigma,
        sample_seed,
    )?;
    let polyline = truth.to_polyline(768)?;
    Ok(Sample {
        image,
        truth,
        polyline,
        meta: SampleMeta {
            seed: sample_seed,
            branch: branch_label(branch).to_string(),
            length_bucket: bucket.to_string(),
            contrast,
            tip_type: tip.as_str().to_string(),
        },
    })
}

/// Largest-remainder stratified 80/10/10 split. Returns a split tag per entry.
fn stratified_split(strata: &[StrataLabels], seed: u64) -> Vec<&'static str> {
    let n = strata.len();
    let n_val = (n as f64 * 0.1).round() as usize;
    let n_test = n_val;
    let mut groups: Vec<(StrataLabels, Vec<usize>)> = Vec::new();
    for (i, s) in strata.iter().enumerate() {
        match groups.iter_mut().find(|(g, _)| g == s) {
            Some((_, idxs)) => idxs.push(i),
            None => groups.push((s.clone(), vec![i])),
        }
    }
    // per-group quotas: floor(0.1 n_s), remainders ranked to fill the targets
    let mut val_quota: Vec<usize> = groups.iter().map(|(_, g)| g.len() / 10).collect();
    let mut test_quota = val_quota.clone();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = groups[a].1.len() % 10;
        let rb = groups[b].1.len() % 10;
        rb.cmp(&ra).then(a.cmp(&b))
    });
    let mut dv = n_val.saturating_sub(val_quota.iter().sum::<usize>());
    let mut dt = n_test.saturating_sub(test_quota.iter().sum::<usize>());
    for &g in order.iter().cycle().take(order.len() * 2) {
        if dv > 0 && val_quota[g] + test_quota[g] < groups[g].1.len() {
            val_quota[g] += 1;
            dv -= 1;
        } else if dt > 0 && val_quota[g] + test_quota[g] < groups[g].1.len() {
            test_quota[g] += 1;
            dt -= 1;
        }
        if dv == 0 && dt == 0 {
            break;
        }
    }
    let mut tags = vec!["train"; n];
    for (g, (_, idxs)) in groups.iter().enumerate() {
        let mut idxs = idxs.clone();
        // deterministic shuffle inside the stratum
        let mut rng = rng_from(subseed_n(seed, "split", g as u64));
        for i in (1..idxs.len()).rev() {
            let j = rng.gen_range(0..=i);
            idxs.swap(i, j);
        }
        for (k, &i) in idxs.iter().enumerate() {
            if k < val_quota[g] {
                tags[i] = "val";
            } else if k < val_quota[g] + test_quota[g] {
                tags[i] = "test";
            }
        }
    }
    tags
}

/// Generates `n` samples over the full strata grid, writes images (PGM),
/// annotations (JSON), a JSON-lines manifest, and a config mirror.
pub fn make_dataset(out_dir: &Path, cfg: &SynthConfig) -> Result<DatasetManifest> {
    if cfg.n < 10 {
        return Err(Error::domain(format!("n must be >= 10, got {}", cfg.n)));
    }
    fs::create_dir_all(out_dir.join("images"))?;
    fs::create_dir_all(out_dir.join("annotations"))?;

    // round-robin over the strata grid balances cell counts exactly
    let mut cells = Vec::new();
    for &branch in &BRANCH_OPTIONS {
        for bucket in BUCKETS {
            for &contrast in &CONTRAST_LEVELS {
                for &tip in &TIPS {
                    cells.push((branch, bucket, contrast, tip));
                }
            }
        }
    }

    let samples: Vec<Sample> = {
        use rayon::prelude::*;
        (0..cfg.n)
            .into_par_iter()
            .map(|i| {
                let (branch, bucket, contrast, tip) = cells[i % cells.len()];
                let sample_seed = subseed_n(cfg.seed, "sample", i as u64);
                gen_sample(cfg, branch, bucket, contrast, tip, sample_seed)
            })
            .collect::<Result<Vec<_>>>()?
    };

    let strata: Vec<StrataLabels> = samples
        .iter()
        .map(|s| StrataLabels {
            branch: s.meta.branch.clone(),
            length_bucket: s.meta.length_bucket.clone(),
            contrast: format!("{:.1}", s.meta.contrast),
            tip_type: s.meta.tip_type.clone(),
        })
        .collect();
    let tags = stratified_split(&strata, cfg.seed);

    let mut entries = Vec::with_capacity(cfg.n);
    for (i, sample) in samples.iter().enumerate() {
        let image_rel = format!("images/sample_{i:05}.pgm");
        let ann_rel = format!("annotations/sample_{i:05}.json");
        sample.image.save_pgm(&out_dir.join(&image_rel))?;
        let ann = Annotation {
            spline: sample.truth.clone(),
            polyline: sample.polyline.points().iter().map(|p| [p.x, p.y]).collect(),
            meta: sample.meta.clone(),
        };
        fs::write(out_dir.join(&ann_rel), serde_json::to_vec_pretty(&ann)?)?;
        entries.push(ManifestEntry {
            image: image_rel,
            annotation: ann_rel,
            split: tags[i].to_string(),
            strata: strata[i].clone(),
        });
    }
    let mut manifest_lines = String::new();
    for e in &entries {
        manifest_lines.push_str(&serde_json::to_string(e)?);
        manifest_lines.push('\n');
    }
    fs::write(out_dir.join("manifest.jsonl"), manifest_lines)?;
    fs::write(out_dir.join("config.json"), serde_json::to_vec_pretty(cfg)?)?;
    Ok(DatasetManifest { entries })
}

/// A sample loaded back from disk.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub image: GrayImage,
    pub annotation: Annotation,
    pub split: String,
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(dir.join("manifest.jsonl"))?;
    let entries = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<Vec<ManifestEntry>, _>>()?;
    Ok(DatasetManifest { entries })
}

pub fn load_dataset(dir: &Path) -> Result<Vec<LoadedSample>> {
    let manifest = read_manifest(dir)?;
    manifest
        .entries
        .iter()
        .map(|e| {
            let image = GrayImage::load_pgm(&dir.join(&e.image))?;
            let annotation: Annotation =
                serde_json::from_slice(&fs::read(dir.join(&e.annotation))?)?;
            Ok(LoadedSample {
                image,
                annotation,
                split: e.split.clone(),
            })
        })
        .collect()
}

pub fn dataset_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("manifest.jsonl"), dir.join("config.json"))
}
