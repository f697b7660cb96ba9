//! Top-down street scenario: users and bus-sized blockers moving along
//! horizontal lanes, a base station with a linear array, fixed point
//! scatterers, segment/rectangle occlusion and a class-coloured raster.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wireless::{OfdmConfig, Path};

/// Speed of light, m/s.
pub const LIGHT_SPEED: f64 = 299_792_458.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

/// Axis-aligned rectangle given by its corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: Vec2,
    pub max: Vec2,
}

impl Rect {
    pub fn from_center(center: Vec2, half: Vec2) -> Self {
        Self { min: center - half, max: center + half }
    }

    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }

    /// Strict interior test.
    pub fn contains(&self, p: Vec2) -> bool {
        p.x > self.min.x && p.x < self.max.x && p.y > self.min.y && p.y < self.max.y
    }

    fn wrap(&self, p: Vec2) -> Vec2 {
        Vec2::new(
            self.min.x + (p.x - self.min.x).rem_euclid(self.width()),
            self.min.y + (p.y - self.min.y).rem_euclid(self.height()),
        )
    }
}

/// Whether the open segment `a`-`b` passes through the interior of `r`
/// (slab clipping).
pub fn segment_hits_rect(a: Vec2, b: Vec2, r: &Rect) -> bool {
    let d = b - a;
    let (mut enter, mut exit) = (0.0f64, 1.0f64);
    for (origin, dir, lo, hi) in [(a.x, d.x, r.min.x, r.max.x), (a.y, d.y, r.min.y, r.max.y)] {
        if dir == 0.0 {
            if origin <= lo || origin >= hi {
                return false;
            }
            continue;
        }
        let (mut t0, mut t1) = ((lo - origin) / dir, (hi - origin) / dir);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        enter = enter.max(t0);
        exit = exit.min(t1);
        if enter >= exit {
            return false;
        }
    }
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum LinkStatus {
    Los = 0,
    Nlos = 1,
}

impl LinkStatus {
    pub fn from_blocked(blocked: bool) -> Self {
        if blocked {
            LinkStatus::Nlos
        } else {
            LinkStatus::Los
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(LinkStatus::Los),
            1 => Some(LinkStatus::Nlos),
            _ => None,
        }
    }
}

/// Inclusive `[min, max]` range for entity counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRange {
    pub min: usize,
    pub max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    /// Street extent in meters.
    pub bounds: Rect,
    pub bs_position: Vec2,
    /// Array boresight direction, radians from the +x axis.
    pub bs_boresight: f64,
    pub users: CountRange,
    /// y coordinates of the lanes users walk or drive along.
    pub user_lanes: Vec<f64>,
    pub blockers: CountRange,
    pub blocker_lanes: Vec<f64>,
    /// Full blocker extent (length along the lane, width across it), meters.
    pub blocker_size: Vec2,
    pub scatterers: usize,
    /// Speed range in m/s; each entity moves left or right with equal odds.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Simulation step, seconds.
    pub dt: f64,
    /// Raster width and height in pixels.
    pub raster_width: usize,
    pub raster_height: usize,
    pub blockage_penalty_db: f64,
    pub reflection_loss_db: f64,
    /// Common amplitude scale standing in for the carrier-dependent path-loss constant.
    pub gain_scale: f64,
    /// Carrier frequency in Hz, used only for path phases.
    pub carrier_hz: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "street".into(),
            bounds: Rect { min: Vec2::new(0.0, 0.0), max: Vec2::new(60.0, 20.0) },
            bs_position: Vec2::new(30.0, 0.5),
            bs_boresight: PI / 2.0,
            users: CountRange { min: 1, max: 3 },
            user_lanes: vec![17.5],
            blockers: CountRange { min: 1, max: 3 },
            blocker_lanes: vec![7.0, 12.0],
            blocker_size: Vec2::new(8.0, 2.5),
            scatterers: 4,
            speed_min: 5.0,
            speed_max: 15.0,
            dt: 0.1,
            raster_width: 64,
            raster_height: 64,
            blockage_penalty_db: 25.0,
            reflection_loss_db: 10.0,
            gain_scale: 1.0,
            carrier_hz: 28e9,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("scenario `{}`.{f}", self.name);
        let b = &self.bounds;
        if !(b.width() > 0.0 && b.height() > 0.0 && b.width().is_finite() && b.height().is_finite()) {
            return Err(Error::config(field("bounds"), "bounds must have positive finite width and height"));
        }
        if self.users.min == 0 || self.users.max < self.users.min {
            return Err(Error::config(field("users"), "need 1 <= min <= max users"));
        }
        if self.blockers.max < self.blockers.min {
            return Err(Error::config(field("blockers"), "need min <= max blockers"));
        }
        if self.user_lanes.is_empty() {
            return Err(Error::config(field("user_lanes"), "at least one lane is required"));
        }
        if self.blockers.max > 0 && self.blocker_lanes.is_empty() {
            return Err(Error::config(field("blocker_lanes"), "blockers need at least one lane"));
        }
        for (name, lanes) in [("user_lanes", &self.user_lanes), ("blocker_lanes", &self.blocker_lanes)] {
            if let Some(y) = lanes.iter().find(|&&y| !(y > b.min.y && y < b.max.y)) {
                return Err(Error::config(field(name), format!("lane y={y} lies outside the bounds")));
            }
        }
        if !(self.blocker_size.x > 0.0 && self.blocker_size.y > 0.0) {
            return Err(Error::config(field("blocker_size"), "extents must be positive"));
        }
        if !(self.speed_min >= 0.0 && self.speed_max >= self.speed_min && self.speed_max.is_finite()) {
            return Err(Error::config(field("speed_min"), "need 0 <= speed_min <= speed_max"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config(field("dt"), "must be positive"));
        }
        if self.raster_width < 16 || self.raster_height < 16 {
            return Err(Error::config(field("raster_width"), "raster must be at least 16 x 16"));
        }
        if !(self.gain_scale > 0.0 && self.carrier_hz > 0.0) {
            return Err(Error::config(field("gain_scale"), "gain scale and carrier must be positive"));
        }
        if self.user_lanes.iter().any(|&y| (y - self.bs_position.y).abs() < 1e-6) {
            return Err(Error::config(field("user_lanes"), "a user lane passes through the base station"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseStation {
    pub position: Vec2,
    pub boresight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct User {
    pub id: usize,
    pub position: Vec2,
    pub velocity: Vec2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blocker {
    pub center: Vec2,
    pub half_extents: Vec2,
    pub velocity: Vec2,
}

impl Blocker {
    pub fn rect(&self) -> Rect {
        Rect::from_center(self.center, self.half_extents)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub bs: BaseStation,
    pub users: Vec<User>,
    pub blockers: Vec<Blocker>,
    pub scatterers: Vec<Vec2>,
    pub bounds: Rect,
    pub time: f64,
}

fn lane_velocity<R: Rng + ?Sized>(cfg: &ScenarioConfig, rng: &mut R) -> Vec2 {
    let speed = if cfg.speed_max > cfg.speed_min { rng.random_range(cfg.speed_min..cfg.speed_max) } else { cfg.speed_min };
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    Vec2::new(sign * speed, 0.0)
}

fn lane_point<R: Rng + ?Sized>(cfg: &ScenarioConfig, lanes: &[f64], rng: &mut R) -> Vec2 {
    let y = lanes[rng.random_range(0..lanes.len())];
    Vec2::new(cfg.bounds.min.x + rng.random::<f64>() * cfg.bounds.width(), y)
}

/// Draws a fresh scene: entity counts uniformly from their ranges, lane
/// positions uniform along the street, scatterers uniform in the bounds.
pub fn init_scene<R: Rng + ?Sized>(cfg: &ScenarioConfig, rng: &mut R) -> Result<SceneState> {
    cfg.validate()?;
    let n_users = rng.random_range(cfg.users.min..=cfg.users.max);
    let n_blockers = rng.random_range(cfg.blockers.min..=cfg.blockers.max);
    let users = (0..n_users)
        .map(|id| {
            let position = lane_point(cfg, &cfg.user_lanes, rng);
            User { id, position, velocity: lane_velocity(cfg, rng) }
        })
        .collect();
    let blockers = (0..n_blockers)
        .map(|_| {
            let center = lane_point(cfg, &cfg.blocker_lanes, rng);
            Blocker { center, half_extents: cfg.blocker_size * 0.5, velocity: lane_velocity(cfg, rng) }
        })
        .collect();
    let b = cfg.bounds;
    let scatterers = (0..cfg.scatterers)
        .map(|_| {
            Vec2::new(
                b.min.x + rng.random::<f64>() * b.width(),
                b.min.y + rng.random::<f64>() * b.height(),
            )
        })
        .collect();
    Ok(SceneState {
        bs: BaseStation { position: cfg.bs_position, boresight: cfg.bs_boresight },
        users,
        blockers,
        scatterers,
        bounds: b,
        time: 0.0,
    })
}

/// Advances every moving entity by `velocity * dt`, wrapping positions that
/// leave the bounds around to the opposite side.
pub fn step(s: &SceneState, dt: f64) -> SceneState {
    let mut next = s.clone();
    for u in &mut next.users {
        u.position = s.bounds.wrap(u.position + u.velocity * dt);
    }
    for b in &mut next.blockers {
        b.center = s.bounds.wrap(b.center + b.velocity * dt);
    }
    next.time += dt;
    next
}

impl SceneState {
    pub fn user(&self, id: usize) -> Result<&User> {
        self.users.iter().find(|u| u.id == id).ok_or(Error::Lookup { what: "user", id })
    }

    /// Azimuth of `target` seen from the array, measured from boresight.
    pub fn azimuth_to(&self, target: Vec2) -> f64 {
        let axis = Vec2::new(self.bs.boresight.cos(), self.bs.boresight.sin());
        let d = target - self.bs.position;
        axis.cross(d).atan2(axis.dot(d))
    }
}

pub fn los_status(s: &SceneState, user_id: usize) -> Result<LinkStatus> {
    let u = s.user(user_id)?;
    let blocked = s.blockers.iter().any(|b| segment_hits_rect(s.bs.position, u.position, &b.rect()));
    Ok(LinkStatus::from_blocked(blocked))
}

fn db_to_amplitude(db: f64) -> f64 {
    10f64.powf(-db / 20.0)
}

/// Line-of-sight path (attenuated when blocked) followed by one single-bounce
/// path per scatterer.
pub fn paths_for_user(s: &SceneState, user_id: usize, cfg: &ScenarioConfig, ofdm: &OfdmConfig) -> Result<Vec<Path>> {
    let u = s.user(user_id)?;
    let limit = ofdm.max_delay();
    let wavelength = LIGHT_SPEED / cfg.carrier_hz;
    let path = |kind: &'static str, distance: f64, amplitude: f64, azimuth: f64| -> Result<Path> {
        let delay = distance / LIGHT_SPEED;
        if delay >= limit {
            return Err(Error::ScenarioTooLarge {
                kind,
                distance_m: distance,
                delay_ns: delay * 1e9,
                limit_ns: limit * 1e9,
            });
        }
        let phase = -2.0 * PI * (distance / wavelength).fract();
        Ok(Path { gain: Complex64::from_polar(amplitude, phase), delay, azimuth, elevation: 0.0 })
    };
    let d = (u.position - s.bs.position).norm();
    if d < 1e-9 {
        return Err(Error::Validation(format!("user {user_id} sits on the base station")));
    }
    let mut amp = cfg.gain_scale / d;
    if los_status(s, user_id)? == LinkStatus::Nlos {
        amp *= db_to_amplitude(cfg.blockage_penalty_db);
    }
    let mut paths = vec![path("line-of-sight", d, amp, s.azimuth_to(u.position))?];
    let bounce = cfg.gain_scale * db_to_amplitude(cfg.reflection_loss_db);
    for &sc in &s.scatterers {
        let total = (sc - s.bs.position).norm() + (u.position - sc).norm();
        paths.push(path("scattered", total, bounce / total, s.azimuth_to(sc))?);
    }
    Ok(paths)
}

/// Binary raster standing in for a camera image. Pixels are stored
/// channel-planar (`[channel][row][column]`) as 8-bit levels, 0 or 255;
/// [`Frame::value`] maps them onto `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Frame {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

pub const CHANNELS: usize = 3;
const RED: usize = 0;
const GREEN: usize = 1;
const BLUE: usize = 2;

impl Frame {
    pub fn blank(width: usize, height: usize) -> Self {
        Self { width, height, pixels: vec![0; CHANNELS * width * height] }
    }

    pub fn from_levels(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != CHANNELS * width * height {
            return Err(Error::Validation(format!(
                "frame of {width} x {height} needs {} bytes, got {}",
                CHANNELS * width * height,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn levels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn value(&self, channel: usize, row: usize, col: usize) -> f32 {
        f32::from(self.pixels[(channel * self.height + row) * self.width + col]) / 255.0
    }

    /// Appends the `[0, 1]` pixel values in storage order.
    pub fn extend_values(&self, out: &mut Vec<f32>) {
        out.extend(self.pixels.iter().map(|&p| f32::from(p) / 255.0));
    }

    fn fill(&mut self, channel: usize, row: usize, col: usize) {
        self.pixels[(channel * self.height + row) * self.width + col] = 255;
    }
}

/// Orthographic top-down raster of the scene bounds. Row 0 is the far
/// (maximum y) edge. A pixel is lit when its centre lies inside a shape.
/// Users and the base station are discs one pixel-diagonal in radius.
pub fn render(s: &SceneState, width: usize, height: usize) -> Frame {
    let mut f = Frame::blank(width, height);
    let b = s.bounds;
    let (cw, ch) = (b.width() / width as f64, b.height() / height as f64);
    let radius = cw.hypot(ch);
    let center = |row: usize, col: usize| {
        Vec2::new(b.min.x + (col as f64 + 0.5) * cw, b.max.y - (row as f64 + 0.5) * ch)
    };
    // Index range whose pixel centres can fall in `[lo, hi]` (in pixel units).
    let span = |lo: f64, hi: f64, n: usize| {
        let a = lo.ceil().max(0.0) as usize;
        let b = (hi.floor() + 1.0).clamp(0.0, n as f64) as usize;
        a..b.max(a)
    };
    let window = |p: Vec2, reach: Vec2| {
        let cols = span((p.x - reach.x - b.min.x) / cw - 0.5, (p.x + reach.x - b.min.x) / cw - 0.5, width);
        let rows = span((b.max.y - p.y - reach.y) / ch - 0.5, (b.max.y - p.y + reach.y) / ch - 0.5, height);
        (rows, cols)
    };
    let disc = |f: &mut Frame, p: Vec2, channel: usize| {
        let (rows, cols) = window(p, Vec2::new(radius, radius));
        for r in rows {
            for c in cols.clone() {
                if (center(r, c) - p).norm() < radius {
                    f.fill(channel, r, c);
                }
            }
        }
    };
    for blk in &s.blockers {
        let rect = blk.rect();
        let (rows, cols) = window(blk.center, blk.half_extents);
        for r in rows {
            for c in cols.clone() {
                if rect.contains(center(r, c)) {
                    f.fill(BLUE, r, c);
                }
            }
        }
    }
    for u in &s.users {
        disc(&mut f, u.position, RED);
    }
    disc(&mut f, s.bs.position, GREEN);
    f
}
