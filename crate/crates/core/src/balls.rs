//! Bouncing-ball videos: equal balls at constant speed in a square box,
//! rasterized to small grayscale frames.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{Rng, SeedStream};
use crate::seq::Sequence;

const PLACEMENT_RETRIES: usize = 10_000;
const MAGIC: &[u8; 4] = b"BBL1";
/// A ball pinned against a wall halves the remaining overlap per pass, so
/// this many passes take any overlap far below the penetration tolerance.
const PROJECTION_PASSES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BallWorld {
    pub n_balls: usize,
    pub radius: f64,
    pub box_size: f64,
    pub speed: f64,
    pub dt: f64,
}

impl Default for BallWorld {
    fn default() -> Self {
        Self {
            n_balls: 3,
            radius: 1.2,
            box_size: 10.0,
            speed: 0.5,
            dt: 1.0,
        }
    }
}

impl BallWorld {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.box_size > 0.0 && self.dt > 0.0 && self.speed >= 0.0) {
            return Err(Error::Domain("ball world constants must be positive".into()));
        }
        if 2.0 * self.radius * self.n_balls as f64 >= self.box_size {
            return Err(Error::Domain(format!(
                "{} balls of radius {} do not fit a box of {}",
                self.n_balls, self.radius, self.box_size
            )));
        }
        if self.speed * self.dt >= self.radius {
            return Err(Error::Domain("a step must move less than one radius".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BallState {
    pub positions: Vec<[f64; 2]>,
    pub velocities: Vec<[f64; 2]>,
}

impl BallState {
    pub fn kinetic_energy(&self) -> f64 {
        self.velocities.iter().map(|v| v[0] * v[0] + v[1] * v[1]).sum()
    }
}

/// Non-overlapping uniform positions and uniform headings at `world.speed`.
pub fn initial_state(world: &BallWorld, rng: &mut Rng) -> Result<BallState> {
    world.validate()?;
    let (r, l) = (world.radius, world.box_size);
    let mut positions: Vec<[f64; 2]> = Vec::with_capacity(world.n_balls);
    let mut tries = 0;
    while positions.len() < world.n_balls {
        if tries == PLACEMENT_RETRIES {
            return Err(Error::Placement(tries));
        }
        tries += 1;
        let p = [rng.random_range(r..l - r), rng.random_range(r..l - r)];
        if positions.iter().all(|q| dist(p, *q) >= 2.0 * r) {
            positions.push(p);
        }
    }
    let velocities = (0..world.n_balls)
        .map(|_| {
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            [world.speed * a.cos(), world.speed * a.sin()]
        })
        .collect();
    Ok(BallState { positions, velocities })
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Advances one step: move, reflect off walls, then resolve ball pairs in
/// index order. At contact each ball's velocity component along the line of
/// centres is reflected if it points into the other ball, which keeps every
/// speed fixed and swaps velocities exactly in an equal-speed head-on hit.
/// Overlaps are then projected apart along the normal.
pub fn step(world: &BallWorld, s: &mut BallState) {
    let (r, l) = (world.radius, world.box_size);
    for (p, v) in s.positions.iter_mut().zip(s.velocities.iter_mut()) {
        p[0] += v[0] * world.dt;
        p[1] += v[1] * world.dt;
    }
    for (p, v) in s.positions.iter_mut().zip(s.velocities.iter_mut()) {
        for k in 0..2 {
            if p[k] < r {
                p[k] = 2.0 * r - p[k];
                v[k] = v[k].abs();
            } else if p[k] > l - r {
                p[k] = 2.0 * (l - r) - p[k];
                v[k] = -v[k].abs();
            }
        }
    }
    let n = s.positions.len();
    for i in 0..n {
        for j in i + 1..n {
            let (pi, pj) = (s.positions[i], s.positions[j]);
            let d = dist(pi, pj);
            if d >= 2.0 * r || d == 0.0 {
                continue;
            }
            let nrm = [(pj[0] - pi[0]) / d, (pj[1] - pi[1]) / d];
            let vi = s.velocities[i];
            let toward_j = vi[0] * nrm[0] + vi[1] * nrm[1];
            if toward_j > 0.0 {
                s.velocities[i] = [vi[0] - 2.0 * toward_j * nrm[0], vi[1] - 2.0 * toward_j * nrm[1]];
            }
            let vj = s.velocities[j];
            let toward_i = vj[0] * nrm[0] + vj[1] * nrm[1];
            if toward_i < 0.0 {
                s.velocities[j] = [vj[0] - 2.0 * toward_i * nrm[0], vj[1] - 2.0 * toward_i * nrm[1]];
            }
        }
    }
    // Projection of one pair can push a ball into a third or, before the
    // clamp, through a wall, so repeat.
    for _ in 0..PROJECTION_PASSES {
        let mut moved = false;
        for i in 0..n {
            for j in i + 1..n {
                let (pi, pj) = (s.positions[i], s.positions[j]);
                let d = dist(pi, pj);
                if d >= 2.0 * r || d == 0.0 {
                    continue;
                }
                let nrm = [(pj[0] - pi[0]) / d, (pj[1] - pi[1]) / d];
                let half = 0.5 * (2.0 * r - d);
                let inside = |x: f64| x.clamp(r, l - r);
                s.positions[i] = [inside(pi[0] - half * nrm[0]), inside(pi[1] - half * nrm[1])];
                s.positions[j] = [inside(pj[0] + half * nrm[0]), inside(pj[1] + half * nrm[1])];
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
}

/// `len` states starting from a random initial state.
pub fn simulate_balls(world: &BallWorld, len: usize, rng: &mut Rng) -> Result<Vec<BallState>> {
    if len == 0 {
        return Err(Error::Domain("need at least one step".into()));
    }
    let mut s = initial_state(world, rng)?;
    let mut out = Vec::with_capacity(len);
    out.push(s.clone());
    for _ in 1..len {
        step(world, &mut s);
        out.push(s.clone());
    }
    Ok(out)
}

/// `res x res` row-major frame. Each ball covers a pixel fully within
/// `radius - h` of its centre and not at all beyond `radius + h`, ramping
/// linearly in between (`h` = half a pixel); coverage sums are clipped at 1.
pub fn rasterize(world: &BallWorld, state: &BallState, res: usize) -> Result<Vec<f64>> {
    if res < 8 {
        return Err(Error::Domain(format!("resolution {res} is below 8")));
    }
    let px = world.box_size / res as f64;
    let h = 0.5 * px;
    let mut frame = vec![0.0; res * res];
    for (i, row) in frame.chunks_mut(res).enumerate() {
        let y = (i as f64 + 0.5) * px;
        for (j, cell) in row.iter_mut().enumerate() {
            let x = (j as f64 + 0.5) * px;
            let cover: f64 = state
                .positions
                .iter()
                .map(|p| ((world.radius + h - dist([x, y], *p)) / (2.0 * h)).clamp(0.0, 1.0))
                .sum();
            *cell = cover.min(1.0);
        }
    }
    Ok(frame)
}

/// Mean over steps of the mean squared pixel change between consecutive
/// frames: the error of predicting each frame by its predecessor.
pub fn order0_mse(seqs: &[Sequence]) -> Result<f64> {
    let mut se = 0.0;
    let mut n = 0usize;
    for s in seqs {
        if s.len() < 2 {
            return Err(Error::Domain("order-0 error needs two frames".into()));
        }
        for t in 0..s.len() - 1 {
            se += s
                .frame(t)
                .iter()
                .zip(s.frame(t + 1))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>();
            n += s.dim();
        }
    }
    Ok(se / n.max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BallsConfig {
    pub world: BallWorld,
    pub res: usize,
    pub train_trajectories: usize,
    pub test_trajectories: usize,
    pub steps: usize,
}

impl Default for BallsConfig {
    fn default() -> Self {
        Self {
            world: BallWorld::default(),
            res: 15,
            train_trajectories: 30,
            test_trajectories: 10,
            steps: 100,
        }
    }
}

/// Rendered videos; pixel values are stored at `f32` precision so that a
/// dataset read back from disk equals the one generated in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct BallDataset {
    pub res: usize,
    pub videos: Vec<Sequence>,
}

impl BallDataset {
    /// Trajectory `i` draws from the sub-stream `trajectory/{i}` of `seeds`.
    pub fn generate(world: &BallWorld, res: usize, n: usize, len: usize, seeds: &SeedStream) -> Result<Self> {
        let mut videos = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = seeds.child(&format!("trajectory/{i}")).rng("balls");
            let states = simulate_balls(world, len, &mut rng)?;
            let mut values = Vec::with_capacity(len * res * res);
            for s in &states {
                values.extend(rasterize(world, s, res)?.into_iter().map(|v| v as f32 as f64));
            }
            videos.push(Sequence::new(res * res, values)?);
        }
        Ok(Self { res, videos })
    }

    pub fn steps(&self) -> usize {
        self.videos.first().map_or(0, |v| v.len())
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        for x in [self.steps(), self.res, self.videos.len()] {
            w.write_all(&(x as u32).to_le_bytes())?;
        }
        for v in &self.videos {
            for &x in v.values() {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let fmt = |e: std::io::Error| Error::Format(format!("truncated ball dataset: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a ball dataset".into()));
        }
        let mut word = [0u8; 4];
        let mut header = [0usize; 3];
        for h in &mut header {
            r.read_exact(&mut word).map_err(fmt)?;
            *h = u32::from_le_bytes(word) as usize;
        }
        let [steps, res, n] = header;
        if res == 0 || steps == 0 {
            return Err(Error::Format("empty frames in ball dataset".into()));
        }
        let mut videos = Vec::with_capacity(n);
        let mut buf = vec![0u8; steps * res * res * 4];
        for _ in 0..n {
            r.read_exact(&mut buf).map_err(fmt)?;
            let values = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            videos.push(Sequence::new(res * res, values)?);
        }
        Ok(Self { res, videos })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        Self::read_from(&mut r)
    }
}

/// Binary PGM (`P5`, 8-bit) encoding of a `res x res` frame.
pub fn pgm_bytes(frame: &[f64], res: usize) -> Vec<u8> {
    let mut out = format!("P5\n{res} {res}\n255\n").into_bytes();
    out.extend(frame.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn one(p: [f64; 2], v: [f64; 2]) -> BallState {
        BallState {
            positions: vec![p],
            velocities: vec![v],
        }
    }

    #[test]
    fn wall_reflection_is_specular() {
        let w = BallWorld {
            n_balls: 1,
            ..BallWorld::default()
        };
        let mut s = one([1.3, 5.0], [-0.3, 0.4]);
        step(&w, &mut s);
        assert_eq!(s.velocities[0], [0.3, 0.4]);
        assert!((s.positions[0][0] - (2.4 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn head_on_collision_exchanges_velocities() {
        let w = BallWorld {
            n_balls: 2,
            ..BallWorld::default()
        };
        let mut s = BallState {
            positions: vec![[3.9, 5.0], [6.1, 5.0]],
            velocities: vec![[0.5, 0.0], [-0.5, 0.0]],
        };
        step(&w, &mut s);
        assert_eq!(s.velocities, vec![[-0.5, 0.0], [0.5, 0.0]]);
        assert!(dist(s.positions[0], s.positions[1]) >= 2.4 - 1e-12);
    }

    #[test]
    fn validation_and_placement() {
        let crowded = BallWorld {
            n_balls: 5,
            ..BallWorld::default()
        };
        assert!(crowded.validate().is_err());
        let fast = BallWorld {
            speed: 2.0,
            ..BallWorld::default()
        };
        assert!(fast.validate().is_err());
        assert!(simulate_balls(&BallWorld::default(), 0, &mut rng_from_seed(1)).is_err());
    }

    #[test]
    fn raster_cases() {
        let w = BallWorld::default();
        let s = BallState {
            positions: vec![[5.0, 5.0]],
            velocities: vec![[0.0, 0.0]],
        };
        let f = rasterize(&w, &s, 15).unwrap();
        assert_eq!(f[7 * 15 + 7], 1.0);
        assert_eq!(f[0], 0.0);
        assert!(rasterize(&w, &s, 7).is_err());
    }

    #[test]
    fn static_scene_has_zero_order0() {
        let w = BallWorld {
            speed: 0.0,
            ..BallWorld::default()
        };
        let states = simulate_balls(&w, 5, &mut rng_from_seed(2)).unwrap();
        let frames: Vec<Vec<f64>> = states.iter().map(|s| rasterize(&w, s, 15).unwrap()).collect();
        let seq = Sequence::from_frames(225, &frames).unwrap();
        assert_eq!(order0_mse(&[seq]).unwrap(), 0.0);
    }

    #[test]
    fn dataset_round_trip() {
        let d = BallDataset::generate(&BallWorld::default(), 10, 2, 6, &SeedStream::new(3)).unwrap();
        let mut buf = Vec::new();
        d.write_to(&mut buf).unwrap();
        assert_eq!(BallDataset::read_from(&mut buf.as_slice()).unwrap(), d);
        assert!(BallDataset::read_from(&mut &buf[..buf.len() - 1]).is_err());
        let pgm = pgm_bytes(d.videos[0].frame(0), 10);
        assert!(pgm.starts_with(b"P5\n10 10\n255\n"));
        assert_eq!(pgm.len(), 13 + 100);
    }
}
