//! Procedurally textured sprites moving over a translating background.
//!
//! Every layer is a continuous texture seen through an affine map, so flow
//! and instance labels follow from the transforms without approximation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mine_trajectories, DataError, Result, SyntheticSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextureKind {
    Noise,
    Checker,
    Gradient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpriteSceneConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Inclusive range of sprite counts.
    pub sprites: [usize; 2],
    /// Sprite diameter range in pixels.
    pub size: [f64; 2],
    /// Sprite speed range in pixels per frame; direction is uniform.
    pub speed: [f64; 2],
    /// Largest rotation rate, radians per frame.
    pub spin: f64,
    /// Largest relative scale change per frame.
    pub scale_drift: f64,
    /// Largest background speed, pixels per frame.
    pub background_speed: f64,
    /// Probability that nothing in a scene moves.
    pub static_prob: f64,
    pub textures: Vec<TextureKind>,
    /// Occluders pasted onto each training sample.
    pub occluders: usize,
    /// Seed spacing for trajectory mining.
    pub grid_stride: usize,
    /// Forward-backward consistency threshold in pixels.
    pub fb_threshold: f64,
    pub seed: u64,
}

impl Default for SpriteSceneConfig {
    fn default() -> Self {
        Self {
            height: 72,
            width: 104,
            frames: 8,
            sprites: [2, 5],
            size: [14.0, 32.0],
            speed: [1.0, 4.0],
            spin: 0.04,
            scale_drift: 0.02,
            background_speed: 1.0,
            static_prob: 0.1,
            textures: vec![TextureKind::Noise, TextureKind::Checker, TextureKind::Gradient],
            occluders: 2,
            grid_stride: 2,
            fb_threshold: 1.0,
            seed: 0,
        }
    }
}

impl SpriteSceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::Config(m));
        if self.height < 2 || self.width < 2 || self.frames < 2 {
            return bad(format!("need at least 2x2 pixels and 2 frames, got {}x{}x{}", self.frames, self.height, self.width));
        }
        if self.sprites[0] > self.sprites[1] {
            return bad("sprites range is empty".into());
        }
        for (name, r) in [("size", self.size), ("speed", self.speed)] {
            if !(r[0] <= r[1] && r[0] >= 0.0 && r[1].is_finite()) {
                return bad(format!("{name} range {r:?} is empty or negative"));
            }
        }
        if self.size[0] <= 0.0 {
            return bad("sprite size must be positive".into());
        }
        let reach = self.height.max(self.width) as f64;
        let travel = (self.speed[1] + self.background_speed) * (self.frames - 1) as f64;
        if travel > reach {
            return bad(format!("speed allows {travel} px of travel, more than the {reach} px image"));
        }
        if !(self.spin >= 0.0 && self.background_speed >= 0.0) {
            return bad("spin and background_speed must be non-negative".into());
        }
        if !(self.scale_drift >= 0.0 && self.scale_drift * (self.frames as f64) < 0.5) {
            return bad("scale_drift must be non-negative and small enough to keep sprites from collapsing".into());
        }
        if !(0.0..=1.0).contains(&self.static_prob) {
            return bad(format!("static_prob {} is not a probability", self.static_prob));
        }
        if self.textures.is_empty() {
            return bad("textures must list at least one kind".into());
        }
        if self.grid_stride == 0 {
            return bad("grid_stride must be positive".into());
        }
        if !(self.fb_threshold > 0.0) {
            return bad("fb_threshold must be positive".into());
        }
        Ok(())
    }
}

/// Row-major 2x2 linear map plus offset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub m: [[f64; 2]; 2],
    pub o: [f64; 2],
}

impl Affine {
    pub fn apply(&self, u: [f64; 2]) -> [f64; 2] {
        [
            self.m[0][0] * u[0] + self.m[0][1] * u[1] + self.o[0],
            self.m[1][0] * u[0] + self.m[1][1] * u[1] + self.o[1],
        ]
    }

    pub fn invert(&self, p: [f64; 2]) -> [f64; 2] {
        let [[a, b], [c, d]] = self.m;
        let det = a * d - b * c;
        let (x, y) = (p[0] - self.o[0], p[1] - self.o[1]);
        [(d * x - b * y) / det, (a * y - c * x) / det]
    }
}

const LATTICE: usize = 16;

/// Periodic procedural texture over the plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    pub kind: TextureKind,
    /// Lattice spacing in texture units.
    pub cell: f64,
    /// `LATTICE x LATTICE` random colours for value noise.
    pub lattice: Vec<[f64; 3]>,
    pub colors: [[f64; 3]; 2],
    pub direction: [f64; 2],
}

fn smoothstep(x: f64) -> f64 {
    x * x * (3.0 - 2.0 * x)
}

impl Texture {
    pub fn random<R: Rng>(kind: TextureKind, rng: &mut R) -> Self {
        let lattice = (0..LATTICE * LATTICE).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let colors = [[rng.gen(), rng.gen(), rng.gen()], [rng.gen(), rng.gen(), rng.gen()]];
        let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        Self { kind, cell: rng.gen_range(3.0..7.0), lattice, colors, direction: [a.cos(), a.sin()] }
    }

    fn noise(&self, u: [f64; 2], cell: f64) -> [f64; 3] {
        let gx = u[0] / cell;
        let gy = u[1] / cell;
        let (x0, y0) = (gx.floor(), gy.floor());
        let (fx, fy) = (smoothstep(gx - x0), smoothstep(gy - y0));
        let wrap = |v: f64| (v as i64).rem_euclid(LATTICE as i64) as usize;
        let (ix, iy) = (wrap(x0), wrap(y0));
        let (jx, jy) = ((ix + 1) % LATTICE, (iy + 1) % LATTICE);
        let at = |x: usize, y: usize| self.lattice[y * LATTICE + x];
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let top = at(ix, iy)[c] * (1.0 - fx) + at(jx, iy)[c] * fx;
            let bottom = at(ix, jy)[c] * (1.0 - fx) + at(jx, jy)[c] * fx;
            *o = top * (1.0 - fy) + bottom * fy;
        }
        out
    }

    /// RGB in `[0, 1]` at texture coordinate `u`.
    pub fn eval(&self, u: [f64; 2]) -> [f64; 3] {
        let coarse = self.noise(u, self.cell);
        let fine = self.noise([u[0] + 37.0, u[1] + 11.0], self.cell * 0.5);
        let detail = |c: usize| (2.0 * coarse[c] + fine[c]) / 3.0;
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            *o = match self.kind {
                TextureKind::Noise => detail(c),
                TextureKind::Checker => {
                    let cell = 2.0 * self.cell;
                    let parity = ((u[0] / cell).floor() + (u[1] / cell).floor()).rem_euclid(2.0) as usize;
                    0.7 * self.colors[parity][c] + 0.3 * detail(c)
                }
                TextureKind::Gradient => {
                    let s = (self.direction[0] * u[0] + self.direction[1] * u[1]) / (4.0 * self.cell);
                    let w = 0.5 + 0.5 * s.sin();
                    0.6 * (self.colors[0][c] * (1.0 - w) + self.colors[1][c] * w) + 0.4 * detail(c)
                }
            };
        }
        out
    }
}

/// A superellipse `|u/a|^e + |v/b|^e <= 1` in local coordinates, mapped to
/// the image by rotation, scale and translation that change linearly in time.
#[derive(Clone, Debug, PartialEq)]
pub struct Sprite {
    pub center: [f64; 2],
    pub velocity: [f64; 2],
    pub angle: f64,
    pub spin: f64,
    pub scale: f64,
    pub scale_rate: f64,
    pub half_extent: [f64; 2],
    pub exponent: f64,
    pub texture: Texture,
}

impl Sprite {
    /// Local-to-image map at frame `t`.
    pub fn transform(&self, t: f64) -> Affine {
        let a = self.angle + self.spin * t;
        let s = self.scale * (1.0 + self.scale_rate * t);
        let (sin, cos) = a.sin_cos();
        Affine {
            m: [[s * cos, -s * sin], [s * sin, s * cos]],
            o: [self.center[0] + self.velocity[0] * t, self.center[1] + self.velocity[1] * t],
        }
    }

    pub fn contains_local(&self, u: [f64; 2]) -> bool {
        let x = (u[0] / self.half_extent[0]).abs();
        let y = (u[1] / self.half_extent[1]).abs();
        x.powf(self.exponent) + y.powf(self.exponent) <= 1.0
    }
}

/// Infinite texture translating at a constant velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct Background {
    pub velocity: [f64; 2],
    pub texture: Texture,
}

impl Background {
    pub fn transform(&self, t: f64) -> Affine {
        Affine { m: [[1.0, 0.0], [0.0, 1.0]], o: [self.velocity[0] * t, self.velocity[1] * t] }
    }
}

/// Sprites are listed in draw order; sprite `i` carries instance id `i + 1`
/// and covers every sprite before it.
#[derive(Clone, Debug, PartialEq)]
pub struct SpriteScene {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub background: Background,
    pub sprites: Vec<Sprite>,
}

fn uniform<R: Rng>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

impl SpriteScene {
    pub fn random(config: &SpriteSceneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let pick_texture = |rng: &mut ChaCha8Rng| {
            let kind = config.textures[rng.gen_range(0..config.textures.len())];
            Texture::random(kind, rng)
        };
        let bg_angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let bg_speed = uniform(&mut rng, [0.0, config.background_speed]);
        let background = Background {
            velocity: [bg_speed * bg_angle.cos(), bg_speed * bg_angle.sin()],
            texture: pick_texture(&mut rng),
        };
        let count = rng.gen_range(config.sprites[0]..=config.sprites[1]);
        let mid = (config.frames - 1) as f64 / 2.0;
        let sprites = (0..count)
            .map(|_| {
                let diameter = uniform(&mut rng, config.size);
                let aspect = rng.gen_range(0.6..1.0);
                let speed = uniform(&mut rng, config.speed);
                let heading: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let velocity = [speed * heading.cos(), speed * heading.sin()];
                // centred in the image halfway through the clip
                let mid_pos = [
                    rng.gen_range(0.0..config.width as f64),
                    rng.gen_range(0.0..config.height as f64),
                ];
                Sprite {
                    center: [mid_pos[0] - velocity[0] * mid, mid_pos[1] - velocity[1] * mid],
                    velocity,
                    angle: rng.gen_range(0.0..std::f64::consts::TAU),
                    spin: uniform(&mut rng, [-config.spin, config.spin]),
                    scale: 1.0,
                    scale_rate: uniform(&mut rng, [-config.scale_drift, config.scale_drift]),
                    half_extent: [diameter / 2.0, diameter * aspect / 2.0],
                    exponent: if rng.gen_bool(0.5) { 2.0 } else { 4.0 },
                    texture: pick_texture(&mut rng),
                }
            })
            .collect();
        let mut scene = Self { height: config.height, width: config.width, frames: config.frames, background, sprites };
        if rng.gen_bool(config.static_prob) {
            scene.background.velocity = [0.0, 0.0];
            for s in &mut scene.sprites {
                s.center = [s.center[0] + s.velocity[0] * mid, s.center[1] + s.velocity[1] * mid];
                s.velocity = [0.0, 0.0];
                s.spin = 0.0;
                s.scale_rate = 0.0;
            }
        }
        Ok(scene)
    }

    /// Topmost layer at image point `p` on frame `t`: instance id and the
    /// point in that layer's local coordinates.
    pub fn hit(&self, t: usize, p: [f64; 2]) -> (u32, [f64; 2]) {
        let tf = t as f64;
        for (i, s) in self.sprites.iter().enumerate().rev() {
            let u = s.transform(tf).invert(p);
            if s.contains_local(u) {
                return (i as u32 + 1, u);
            }
        }
        (0, self.background.transform(tf).invert(p))
    }

    /// Image position at frame `t` of local point `u` on instance `id`.
    pub fn locate(&self, id: u32, u: [f64; 2], t: usize) -> [f64; 2] {
        let tf = t as f64;
        match id {
            0 => self.background.transform(tf).apply(u),
            k => self.sprites[k as usize - 1].transform(tf).apply(u),
        }
    }

    fn texture(&self, id: u32) -> &Texture {
        match id {
            0 => &self.background.texture,
            k => &self.sprites[k as usize - 1].texture,
        }
    }

    /// Frames quantized to 8 bits, exact flow and instance ids. No trajectories.
    pub fn render(&self) -> SyntheticSample {
        let (h, w, n) = (self.height, self.width, self.frames);
        let px = h * w;
        let mut out = SyntheticSample::empty(n, h, w);
        for t in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let p = [x as f64, y as f64];
                    let (id, u) = self.hit(t, p);
                    let rgb = self.texture(id).eval(u);
                    for (c, v) in rgb.iter().enumerate() {
                        out.frames[(t * 3 + c) * px + y * w + x] = ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32;
                    }
                    out.instance_ids[t * px + y * w + x] = id;
                    // differencing two forward maps keeps pure translations exact
                    let here = self.locate(id, u, t);
                    if t + 1 < n {
                        let q = self.locate(id, u, t + 1);
                        out.fwd_flow[(t * 2) * px + y * w + x] = (q[0] - here[0]) as f32;
                        out.fwd_flow[(t * 2 + 1) * px + y * w + x] = (q[1] - here[1]) as f32;
                    }
                    if t > 0 {
                        let q = self.locate(id, u, t - 1);
                        out.bwd_flow[((t - 1) * 2) * px + y * w + x] = (q[0] - here[0]) as f32;
                        out.bwd_flow[((t - 1) * 2 + 1) * px + y * w + x] = (q[1] - here[1]) as f32;
                    }
                }
            }
        }
        out
    }
}

/// Samples a scene from `config`, renders it and mines its trajectories.
pub fn render_sequence(config: &SpriteSceneConfig) -> Result<SyntheticSample> {
    let scene = SpriteScene::random(config)?;
    let mut sample = scene.render();
    mine_trajectories(&mut sample, config.grid_stride, config.fb_threshold);
    Ok(sample)
}
