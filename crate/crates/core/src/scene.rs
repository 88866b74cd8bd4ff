//! Synthetic multimodal scenes: a sparse multipath MIMO link measured by
//! a DFT beam sweep, plus a noisy position fix and a radar data cube, all
//! driven by one smooth vehicle trajectory per episode.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, ModalityData};
use crate::error::{Error, Result};
use crate::par::{map_indexed, Exec};
use crate::rng::{normal, substream, Purpose};

pub const RF_POWER: &str = "rf-power";
pub const POSITION: &str = "position";
pub const RADAR_CUBE: &str = "radar-cube";
pub const MODALITIES: [&str; 3] = [RF_POWER, POSITION, RADAR_CUBE];

/// Height of the vehicle antenna above the array plane, metres.
const VEHICLE_HEIGHT: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub tx_antennas: usize,
    pub rx_antennas: usize,
    pub beams: usize,
    pub paths: usize,
    /// Receiver noise power per antenna.
    pub noise_power: f64,
    pub symbol_energy: f64,
    /// Symbols averaged per power estimate.
    pub power_window: usize,
    pub steps: usize,
    pub episodes: usize,
    /// Episodes in the held-out set generated by the ablation pipeline.
    pub test_episodes: usize,
    /// Dataset stream; datasets with equal seed and different streams
    /// share no episodes.
    pub stream: u64,
    /// Seconds between steps.
    pub dt: f64,
    pub range_min: f64,
    pub range_max: f64,
    /// Largest initial bearing magnitude, radians from broadside.
    pub angle_max: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub turn_rate_max: f64,
    /// Standard deviation of the per-step heading perturbation, radians.
    pub heading_noise: f64,
    /// Magnitude of the non-line-of-sight path gains.
    pub nlos_gain: f64,
    /// Standard deviation of each position coordinate, metres.
    pub position_noise: f64,
    pub radar_samples: usize,
    pub radar_chirps: usize,
    /// Range mapped to the last range bin.
    pub radar_range_max: f64,
    /// Radial speed mapped to half the Doppler bins.
    pub radar_speed_max: f64,
    pub radar_noise: f64,
    /// Static reflectors per episode that only the radar sees.
    pub radar_clutter: usize,
    pub clutter_gain: f64,
    /// Steps at which a modality is observed, as offsets back from the
    /// final step. Modalities not listed are observed at every step.
    pub availability: BTreeMap<String, Vec<usize>>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            tx_antennas: 1,
            rx_antennas: 4,
            beams: 16,
            paths: 2,
            noise_power: 0.5,
            symbol_energy: 1.0,
            power_window: 4,
            steps: 5,
            episodes: 2000,
            test_episodes: 500,
            stream: 0,
            dt: 0.2,
            range_min: 15.0,
            range_max: 40.0,
            angle_max: 1.05,
            speed_min: 3.0,
            speed_max: 10.0,
            turn_rate_max: 0.3,
            heading_noise: 0.05,
            nlos_gain: 0.3,
            position_noise: 0.5,
            radar_samples: 8,
            radar_chirps: 6,
            radar_range_max: 50.0,
            radar_speed_max: 12.0,
            radar_noise: 0.3,
            radar_clutter: 2,
            clutter_gain: 1.0,
            availability: BTreeMap::from([(POSITION.to_string(), vec![4, 3])]),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scene: {m}")));
        if self.beams < 2 {
            return bad("beams must be at least 2");
        }
        if self.paths < 1 || self.steps < 1 || self.power_window < 1 {
            return bad("paths, steps and power_window must be at least 1");
        }
        if self.tx_antennas < 1 || self.rx_antennas < 1 {
            return bad("antenna counts must be at least 1");
        }
        if self.radar_samples < 1 || self.radar_chirps < 1 {
            return bad("radar dimensions must be at least 1");
        }
        if !(self.symbol_energy > 0.0
            && self.noise_power >= 0.0
            && self.radar_noise >= 0.0
            && self.clutter_gain >= 0.0)
        {
            return bad("symbol_energy must be positive and noise powers nonnegative");
        }
        if !(self.range_min > 0.0 && self.range_min <= self.range_max) {
            return bad("range_min must be positive and not above range_max");
        }
        if !(self.speed_min >= 0.0 && self.speed_min <= self.speed_max) {
            return bad("speed range is empty");
        }
        if !(self.dt > 0.0 && self.radar_range_max > 0.0 && self.radar_speed_max > 0.0) {
            return bad("dt and radar scales must be positive");
        }
        for (name, offsets) in &self.availability {
            if !MODALITIES.contains(&name.as_str()) {
                return Err(Error::UnknownModality(name.clone()));
            }
            if let Some(o) = offsets.iter().find(|&&o| o >= self.steps) {
                return bad(&format!("availability offset {o} of {name} exceeds the sequence"));
            }
        }
        Ok(())
    }

    /// Per-step presence of `modality` under the availability table.
    pub fn availability_mask(&self, modality: &str) -> Vec<bool> {
        match self.availability.get(modality) {
            None => vec![true; self.steps],
            Some(offsets) => (0..self.steps)
                .map(|t| offsets.iter().any(|&o| t + o + 1 == self.steps))
                .collect(),
        }
    }

    /// Feature shape of one step of `modality`.
    pub fn modality_shape(&self, modality: &str) -> Result<Vec<usize>> {
        match modality {
            RF_POWER => Ok(vec![self.beams]),
            POSITION => Ok(vec![3]),
            RADAR_CUBE => Ok(vec![2 * self.rx_antennas, self.radar_samples, self.radar_chirps]),
            other => Err(Error::UnknownModality(other.to_string())),
        }
    }
}

/// Half-wavelength ULA response with unit 2-norm.
pub fn steering_vector(angle: f64, n: usize) -> Vec<Complex64> {
    steering_from_sine(angle.sin(), n)
}

fn steering_from_sine(u: f64, n: usize) -> Vec<Complex64> {
    let scale = 1.0 / (n as f64).sqrt();
    (0..n)
        .map(|k| Complex64::from_polar(scale, PI * k as f64 * u))
        .collect()
}

/// DFT combiners: steering vectors at sines `-1 + (2b + 1) / B`.
pub fn dft_codebook(antennas: usize, beams: usize) -> Vec<Vec<Complex64>> {
    (0..beams)
        .map(|b| steering_from_sine(-1.0 + (2 * b + 1) as f64 / beams as f64, antennas))
        .collect()
}

/// Sine of the centre of beam `b`.
pub fn beam_sine(b: usize, beams: usize) -> f64 {
    -1.0 + (2 * b + 1) as f64 / beams as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct Path {
    pub gain: Complex64,
    pub aoa: f64,
    pub aod: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization {
    pub paths: Vec<Path>,
    pub rx: usize,
    pub tx: usize,
    /// Row-major `rx x tx`.
    pub h: Vec<Complex64>,
}

impl ChannelRealization {
    pub fn new(paths: Vec<Path>, rx: usize, tx: usize) -> Self {
        let mut h = vec![Complex64::new(0.0, 0.0); rx * tx];
        for p in &paths {
            let ar = steering_vector(p.aoa, rx);
            let at = steering_vector(p.aod, tx);
            for i in 0..rx {
                for j in 0..tx {
                    h[i * tx + j] += p.gain * ar[i] * at[j].conj();
                }
            }
        }
        Self { paths, rx, tx, h }
    }

    pub fn zero(rx: usize, tx: usize) -> Self {
        Self {
            paths: Vec::new(),
            rx,
            tx,
            h: vec![Complex64::new(0.0, 0.0); rx * tx],
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            paths: self.paths.clone(),
            rx: self.rx,
            tx: self.tx,
            h: self.h.iter().map(|v| v * c).collect(),
        }
    }

    fn apply(&self, f: &[Complex64]) -> Vec<Complex64> {
        (0..self.rx)
            .map(|i| (0..self.tx).map(|j| self.h[i * self.tx + j] * f[j]).sum())
            .collect()
    }
}

fn inner(g: &[Complex64], x: &[Complex64]) -> Complex64 {
    g.iter().zip(x).map(|(a, b)| a.conj() * b).sum()
}

fn check_unit(what: &str, v: &[Complex64]) -> Result<()> {
    let n: f64 = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    if (n - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("{what} has norm {n}, expected 1")));
    }
    Ok(())
}

/// Measurement settings of a beam sweep.
#[derive(Clone, Copy, Debug)]
pub struct Sweep {
    pub noise_power: f64,
    pub symbol_energy: f64,
    pub window: usize,
}

/// Averaged received power per combiner. The noise vector of each symbol
/// is shared by all combiners.
pub fn measure_power(
    channel: &ChannelRealization,
    precoder: &[Complex64],
    codebook: &[Vec<Complex64>],
    sweep: Sweep,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    check_unit("precoder", precoder)?;
    for g in codebook {
        check_unit("combiner", g)?;
        if g.len() != channel.rx {
            return Err(Error::Dimension(format!(
                "combiner length {} for {} receive antennas",
                g.len(),
                channel.rx
            )));
        }
    }
    if precoder.len() != channel.tx {
        return Err(Error::Dimension(format!(
            "precoder length {} for {} transmit antennas",
            precoder.len(),
            channel.tx
        )));
    }
    if sweep.noise_power == 0.0 {
        return Ok(noiseless_power(channel, precoder, codebook, sweep.symbol_energy));
    }
    let hf = channel.apply(precoder);
    let s = Complex64::new(sweep.symbol_energy.sqrt(), 0.0);
    let signal: Vec<Complex64> = codebook.iter().map(|g| inner(g, &hf) * s).collect();
    let sd = (sweep.noise_power / 2.0).sqrt();
    let mut p = vec![0.0; codebook.len()];
    for _ in 0..sweep.window {
        let v: Vec<Complex64> = (0..channel.rx)
            .map(|_| Complex64::new(sd * normal(rng), sd * normal(rng)))
            .collect();
        for (b, g) in codebook.iter().enumerate() {
            p[b] += (signal[b] + inner(g, &v)).norm_sqr();
        }
    }
    for v in &mut p {
        *v /= sweep.window as f64;
    }
    Ok(p)
}

/// Noiseless power per combiner.
pub fn noiseless_power(
    channel: &ChannelRealization,
    precoder: &[Complex64],
    codebook: &[Vec<Complex64>],
    symbol_energy: f64,
) -> Vec<f64> {
    let hf = channel.apply(precoder);
    let s = Complex64::new(symbol_energy.sqrt(), 0.0);
    codebook
        .iter()
        .map(|g| (inner(g, &hf) * s).norm_sqr())
        .collect()
}

/// Index of the largest value, ties to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn best_beam(channel: &ChannelRealization, precoder: &[Complex64], codebook: &[Vec<Complex64>]) -> usize {
    argmax(&noiseless_power(channel, precoder, codebook, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexCube {
    pub antennas: usize,
    pub samples: usize,
    pub chirps: usize,
    /// `[antenna][sample][chirp]`
    pub data: Vec<Complex64>,
}

impl ComplexCube {
    pub fn zeros(antennas: usize, samples: usize, chirps: usize) -> Self {
        Self {
            antennas,
            samples,
            chirps,
            data: vec![Complex64::new(0.0, 0.0); antennas * samples * chirps],
        }
    }

    pub fn at(&self, a: usize, s: usize, c: usize) -> Complex64 {
        self.data[(a * self.samples + s) * self.chirps + c]
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Real layout `[2 * antennas, samples, chirps]`: real parts of all
    /// antennas, then imaginary parts.
    pub fn to_real_channels(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.data.iter().map(|c| c.re).collect();
        out.extend(self.data.iter().map(|c| c.im));
        out
    }

    pub fn from_real_channels(antennas: usize, samples: usize, chirps: usize, v: &[f64]) -> Result<Self> {
        let n = antennas * samples * chirps;
        if v.len() != 2 * n {
            return Err(Error::Dimension(format!("cube needs {} values, got {}", 2 * n, v.len())));
        }
        Ok(Self {
            antennas,
            samples,
            chirps,
            data: (0..n).map(|i| Complex64::new(v[i], v[n + i])).collect(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadarTarget {
    pub gain: Complex64,
    pub range_bin: f64,
    pub doppler_bin: f64,
    pub angle: f64,
}

/// `B[a, s, c] = sum gain * exp(j 2 pi (r0 s / S + d0 c / C)) * a_rx(angle)[a]`
/// plus circular white noise of power `noise_power` per entry.
pub fn synth_radar_cube(
    targets: &[RadarTarget],
    antennas: usize,
    samples: usize,
    chirps: usize,
    noise_power: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ComplexCube> {
    let mut cube = ComplexCube::zeros(antennas, samples, chirps);
    for t in targets {
        if !(0.0..samples as f64).contains(&t.range_bin) || !(0.0..chirps as f64).contains(&t.doppler_bin) {
            return Err(Error::InvalidArgument(format!(
                "target bins ({}, {}) outside [0, {samples}) x [0, {chirps})",
                t.range_bin, t.doppler_bin
            )));
        }
        let steer = steering_vector(t.angle, antennas);
        for a in 0..antennas {
            for s in 0..samples {
                for c in 0..chirps {
                    let phase = 2.0
                        * PI
                        * (t.range_bin * s as f64 / samples as f64 + t.doppler_bin * c as f64 / chirps as f64);
                    cube.data[(a * samples + s) * chirps + c] += t.gain * Complex64::from_polar(1.0, phase) * steer[a];
                }
            }
        }
    }
    if noise_power > 0.0 {
        let sd = (noise_power / 2.0).sqrt();
        for v in &mut cube.data {
            *v += Complex64::new(sd * normal(rng), sd * normal(rng));
        }
    }
    Ok(cube)
}

/// Ground-truth kinematic state of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

impl VehicleState {
    pub fn range(&self) -> f64 {
        self.x.hypot(self.y)
    }
    /// Bearing from broadside (+y), positive towards +x.
    pub fn bearing(&self) -> f64 {
        self.x.atan2(self.y)
    }
    pub fn radial_speed(&self) -> f64 {
        (self.x * self.vx + self.y * self.vy) / self.range()
    }
}

/// Constant-turn-rate trajectory with heading perturbations.
pub fn trajectory(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<VehicleState> {
    let r0 = rng.gen_range(cfg.range_min..=cfg.range_max);
    let th0 = rng.gen_range(-cfg.angle_max..=cfg.angle_max);
    let mut heading = rng.gen_range(0.0..2.0 * PI);
    let speed = rng.gen_range(cfg.speed_min..=cfg.speed_max);
    let omega = rng.gen_range(-cfg.turn_rate_max..=cfg.turn_rate_max);
    let (mut x, mut y) = (r0 * th0.sin(), r0 * th0.cos());
    let mut out = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let (vx, vy) = (speed * heading.cos(), speed * heading.sin());
        out.push(VehicleState { x, y, vx, vy });
        x += vx * cfg.dt;
        // the array only sees the half-plane in front of it
        y = (y + vy * cfg.dt).max(1.0);
        heading += omega * cfg.dt + cfg.heading_noise * normal(rng);
    }
    out
}

/// Angular offsets of the scattered paths relative to the direct path.
fn scatter_offsets(paths: usize, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    (1..paths)
        .map(|_| {
            let off = rng.gen_range(0.3..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let aod = rng.gen_range(-0.5..0.5);
            (off, aod)
        })
        .collect()
}

fn clamp_angle(a: f64) -> f64 {
    a.clamp(-PI / 2.0, PI / 2.0)
}

/// Channel at a given state; phases are drawn per step.
pub fn channel_at(
    cfg: &SceneConfig,
    state: &VehicleState,
    scatter: &[(f64, f64)],
    rng: &mut ChaCha8Rng,
) -> ChannelRealization {
    let theta = state.bearing();
    let mut paths = vec![Path {
        gain: Complex64::from_polar(1.0, rng.gen_range(0.0..2.0 * PI)),
        aoa: theta,
        aod: 0.0,
    }];
    for &(off, aod) in scatter {
        paths.push(Path {
            gain: Complex64::from_polar(cfg.nlos_gain, rng.gen_range(0.0..2.0 * PI)),
            aoa: clamp_angle(theta + off),
            aod,
        });
    }
    ChannelRealization::new(paths, cfg.rx_antennas, cfg.tx_antennas)
}

pub fn radar_target(cfg: &SceneConfig, state: &VehicleState, rng: &mut ChaCha8Rng) -> RadarTarget {
    let s = cfg.radar_samples as f64;
    let c = cfg.radar_chirps as f64;
    let range_bin = (state.range() / cfg.radar_range_max * s).clamp(0.0, s - 1e-9);
    let d = state.radial_speed() / cfg.radar_speed_max * c / 2.0;
    let doppler_bin = d.rem_euclid(c).min(c - 1e-9);
    RadarTarget {
        gain: Complex64::from_polar(1.0, rng.gen_range(0.0..2.0 * PI)),
        range_bin,
        doppler_bin,
        angle: state.bearing(),
    }
}

/// Stationary reflectors fixed for a whole episode.
pub fn clutter_targets(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<RadarTarget> {
    (0..cfg.radar_clutter)
        .map(|_| RadarTarget {
            gain: Complex64::from_polar(cfg.clutter_gain, rng.gen_range(0.0..2.0 * PI)),
            range_bin: rng.gen_range(0.0..cfg.radar_samples as f64),
            doppler_bin: 0.0,
            angle: rng.gen_range(-cfg.angle_max..cfg.angle_max),
        })
        .collect()
}

/// One generated episode, every modality at every step (before masking).
#[derive(Clone, Debug)]
pub struct Episode {
    pub states: Vec<VehicleState>,
    pub rf: Vec<Vec<f64>>,
    pub position: Vec<[f64; 3]>,
    pub radar: Vec<ComplexCube>,
    pub label: usize,
}

pub fn generate_episode(cfg: &SceneConfig, seed: u64, index: usize) -> Result<Episode> {
    let mut rng = substream(seed, Purpose::Data, &[cfg.stream, index as u64]);
    let states = trajectory(cfg, &mut rng);
    let scatter = scatter_offsets(cfg.paths, &mut rng);
    let clutter = clutter_targets(cfg, &mut rng);
    let codebook = dft_codebook(cfg.rx_antennas, cfg.beams);
    let precoder = steering_vector(0.0, cfg.tx_antennas);
    let sweep = Sweep {
        noise_power: cfg.noise_power,
        symbol_energy: cfg.symbol_energy,
        window: cfg.power_window,
    };
    let mut rf = Vec::with_capacity(cfg.steps);
    let mut position = Vec::with_capacity(cfg.steps);
    let mut radar = Vec::with_capacity(cfg.steps);
    let mut label = 0;
    for (t, st) in states.iter().enumerate() {
        let channel = channel_at(cfg, st, &scatter, &mut rng);
        rf.push(measure_power(&channel, &precoder, &codebook, sweep, &mut rng)?);
        if t + 1 == cfg.steps {
            label = best_beam(&channel, &precoder, &codebook);
        }
        let pn = cfg.position_noise;
        position.push([
            st.x + pn * normal(&mut rng),
            st.y + pn * normal(&mut rng),
            VEHICLE_HEIGHT + pn * normal(&mut rng),
        ]);
        let mut targets = vec![radar_target(cfg, st, &mut rng)];
        targets.extend_from_slice(&clutter);
        radar.push(synth_radar_cube(
            &targets,
            cfg.rx_antennas,
            cfg.radar_samples,
            cfg.radar_chirps,
            cfg.radar_noise,
            &mut rng,
        )?);
    }
    Ok(Episode {
        states,
        rf,
        position,
        radar,
        label,
    })
}

/// Generates `cfg.episodes` episodes of stream `cfg.stream`.
pub fn generate_dataset(cfg: &SceneConfig, seed: u64, exec: Exec) -> Result<Dataset> {
    cfg.validate()?;
    let episodes = map_indexed(exec, cfg.episodes, |e| generate_episode(cfg, seed, e));
    let episodes = episodes.into_iter().collect::<Result<Vec<_>>>()?;
    let (e_n, t_n) = (cfg.episodes, cfg.steps);
    let masks: Vec<Vec<bool>> = MODALITIES.iter().map(|m| cfg.availability_mask(m)).collect();
    let mut modalities = Vec::new();
    for (mi, &name) in MODALITIES.iter().enumerate() {
        let shape = cfg.modality_shape(name)?;
        let dim: usize = shape.iter().product();
        let mut values = Vec::with_capacity(e_n * t_n * dim);
        for ep in &episodes {
            for t in 0..t_n {
                if !masks[mi][t] {
                    values.extend(std::iter::repeat(0.0f32).take(dim));
                    continue;
                }
                match name {
                    RF_POWER => values.extend(ep.rf[t].iter().map(|&v| v as f32)),
                    POSITION => values.extend(ep.position[t].iter().map(|&v| v as f32)),
                    _ => values.extend(ep.radar[t].to_real_channels().into_iter().map(|v| v as f32)),
                }
            }
        }
        modalities.push(ModalityData {
            name: name.to_string(),
            shape,
            values,
        });
    }
    let mut mask = Vec::with_capacity(e_n * t_n * MODALITIES.len());
    for _ in 0..e_n {
        for t in 0..t_n {
            for m in &masks {
                mask.push(m[t] as u8);
            }
        }
    }
    Ok(Dataset {
        episodes: e_n,
        steps: t_n,
        beams: cfg.beams,
        seed,
        stream: cfg.stream,
        modalities,
        labels: episodes.iter().map(|e| e.label as u16).collect(),
        mask,
        mask_modalities: MODALITIES.iter().map(|s| s.to_string()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn close(a: Complex64, b: Complex64) -> bool {
        (a - b).norm() < 1e-12
    }

    #[test]
    fn steering_broadside_and_endfire() {
        let a = steering_vector(0.0, 4);
        assert!(a.iter().all(|&c| close(c, Complex64::new(0.5, 0.0))));
        let b = steering_vector(PI / 2.0, 2);
        let r = 1.0 / 2f64.sqrt();
        assert!(close(b[0], Complex64::new(r, 0.0)));
        assert!(close(b[1], Complex64::new(-r, 0.0)));
        for th in [-1.2, 0.3, 1.5] {
            let n: f64 = steering_vector(th, 7).iter().map(|c| c.norm_sqr()).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_is_sum_of_outer_products() {
        let paths = vec![
            Path { gain: Complex64::new(0.3, -1.0), aoa: 0.4, aod: -0.2 },
            Path { gain: Complex64::new(-0.5, 0.2), aoa: -1.0, aod: 0.7 },
        ];
        let ch = ChannelRealization::new(paths.clone(), 3, 2);
        for i in 0..3 {
            for j in 0..2 {
                let mut want = Complex64::new(0.0, 0.0);
                for p in &paths {
                    let ar = steering_vector(p.aoa, 3)[i];
                    let at = steering_vector(p.aod, 2)[j];
                    want += p.gain * ar * at.conj();
                }
                assert!(close(ch.h[i * 2 + j], want));
            }
        }
    }

    #[test]
    fn noiseless_power_and_best_beam() {
        let cb = dft_codebook(8, 16);
        let f = steering_vector(0.0, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in [0, 5, 11, 15] {
            let aoa = beam_sine(k, 16).asin();
            let ch = ChannelRealization::new(
                vec![Path { gain: Complex64::new(0.8, 0.1), aoa, aod: 0.0 }],
                8,
                1,
            );
            let sweep = Sweep { noise_power: 0.0, symbol_energy: 2.0, window: 3 };
            let p = measure_power(&ch, &f, &cb, sweep, &mut rng).unwrap();
            assert_eq!(p, noiseless_power(&ch, &f, &cb, 2.0));
            assert_eq!(argmax(&p), k);
            assert_eq!(best_beam(&ch, &f, &cb), k);
            assert_eq!(best_beam(&ch.scaled(3.7), &f, &cb), k);
        }
    }

    #[test]
    fn exact_tie_goes_to_lower_index() {
        let g = steering_vector(0.2, 4);
        let cb = vec![steering_vector(-0.9, 4), g.clone(), g];
        let ch = ChannelRealization::new(
            vec![Path { gain: Complex64::new(1.0, 0.0), aoa: 0.2, aod: 0.0 }],
            4,
            1,
        );
        assert_eq!(best_beam(&ch, &steering_vector(0.0, 1), &cb), 1);
    }

    #[test]
    fn rejects_non_unit_combiner() {
        let ch = ChannelRealization::zero(2, 1);
        let cb = vec![vec![Complex64::new(1.0, 0.0), Complex64::new(0.1, 0.0)]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sweep = Sweep { noise_power: 1.0, symbol_energy: 1.0, window: 1 };
        assert!(measure_power(&ch, &[Complex64::new(1.0, 0.0)], &cb, sweep, &mut rng).is_err());
    }

    #[test]
    fn noiseless_power_ignores_symbol_phase() {
        // |g^H H f s|^2 depends on s only through |s|
        let ch = ChannelRealization::new(
            vec![Path { gain: Complex64::new(0.6, 0.4), aoa: 0.3, aod: 0.0 }],
            4,
            1,
        );
        let cb = dft_codebook(4, 8);
        let hf = ch.apply(&[Complex64::new(1.0, 0.0)]);
        let s1 = Complex64::new(1.0, 0.0);
        let s2 = Complex64::from_polar(1.0, 2.1);
        for g in &cb {
            let a = (inner(g, &hf) * s1).norm_sqr();
            let b = (inner(g, &hf) * s2).norm_sqr();
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn radar_rejects_out_of_range_bins() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = RadarTarget { gain: Complex64::new(1.0, 0.0), range_bin: 8.0, doppler_bin: 0.0, angle: 0.0 };
        assert!(synth_radar_cube(&[t], 2, 8, 4, 0.0, &mut rng).is_err());
        let empty = synth_radar_cube(&[], 2, 8, 4, 0.0, &mut rng).unwrap();
        assert_eq!(empty.energy(), 0.0);
    }

    #[test]
    fn availability_offsets_count_back_from_final_step() {
        let cfg = SceneConfig::default();
        assert_eq!(cfg.availability_mask(POSITION), vec![true, true, false, false, false]);
        assert_eq!(cfg.availability_mask(RF_POWER), vec![true; 5]);
    }

    #[test]
    fn real_channel_layout_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = RadarTarget { gain: Complex64::new(0.5, 0.5), range_bin: 1.5, doppler_bin: 2.0, angle: 0.3 };
        let cube = synth_radar_cube(&[t], 2, 4, 3, 0.1, &mut rng).unwrap();
        let v = cube.to_real_channels();
        assert_eq!(v[0], cube.data[0].re);
        assert_eq!(v[24], cube.data[0].im);
        assert_eq!(ComplexCube::from_real_channels(2, 4, 3, &v).unwrap(), cube);
    }
}
