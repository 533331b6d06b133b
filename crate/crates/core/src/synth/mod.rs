//! Seeded multipath CSI simulator.
//!
//! Every (receiver, antenna) link carries a set of static paths plus, when
//! somebody is present, a few body-scattered paths (torso and limbs). Tone
//! `k` (frequency offset `k * 312.5 kHz` from the carrier) of a packet at
//! time `t` is
//!
//! ```text
//! h = g(t) * ( sum_l a_l exp(j(phi_l + 2 pi fD_l t + 2 pi n s cos theta_l - 2 pi f_k tau_l))
//!            + a_b(t) sum_m b_m exp(j(phi_m - 2 pi d_m(t)/lambda + 2 pi n s cos theta_m
//!                                     - 2 pi f_k (tau_m + d_m(t)/c))) )
//!     + noise
//! ```
//!
//! with `n` the antenna index, `s` the antenna spacing in wavelengths,
//! `g(t)` a random per-packet gain (automatic gain control) and complex
//! white Gaussian noise at the configured SNR. Scatterer `m` moves by
//! `d_m(t) = p d(t) + q_m l_m(t)`: the whole-body displacement `d(t)` of the
//! activity projected onto the receiver, plus the scatterer's own limb swing
//! `l_m(t)` (zero for the torso). Antennas of one receiver share their
//! paths; receivers draw independent path sets and projections. The person
//! moves to a new spot every dwell interval.

mod config;

use std::f64::consts::{PI, TAU};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use config::{activities_from_config, environment_from_config, SynthSettings};

use crate::ingest::{Bandwidth, Capture, ComplexSample, CsiRecord, SEQ_MODULUS};

pub const SUBCARRIER_SPACING_HZ: f64 = 312_500.0;
pub const CARRIER_HZ: f64 = 5.18e9;
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Smallest drawn |projection| of the body motion onto a receiver's path.
pub const MIN_PROJECTION: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthesis parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
}

/// One propagation path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSpec {
    pub delay_ns: f64,
    pub gain: f64,
    pub phase: f64,
    /// Constant Doppler shift of the path; 0 for a static reflector.
    pub doppler_hz: f64,
    /// Angle of arrival (radians) used for the per-antenna phase offset.
    pub angle: f64,
}

/// One body scatterer as seen by one receiver while the person stays at
/// one spot. Scatterer 0 is the torso, the others are limbs.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyPath {
    pub delay_ns: f64,
    pub gain: f64,
    pub phase: f64,
    pub angle: f64,
    /// Fraction of the whole-body displacement that changes this path's
    /// length (shared by all scatterers of one receiver).
    pub projection: f64,
    /// Same for the scatterer's own limb swing.
    pub limb_projection: f64,
}

/// Where the person can be: every `dwell_s` seconds the person moves to a
/// new spot and each receiver sees freshly drawn [`BodyPath`]s. The default
/// dwell outlasts a default capture, so the person stays put.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyModel {
    /// Body path gain range (LOS gain is 1).
    pub gain: (f64, f64),
    /// Excess delay of the body path over the LOS path, ns.
    pub excess_delay_ns: (f64, f64),
    pub dwell_s: (f64, f64),
    /// Torso plus limbs.
    pub scatterers: usize,
    /// Limb gain relative to the torso.
    pub limb_gain: f64,
    /// Limb delays exceed the torso delay by up to this much, ns.
    pub limb_spread_ns: f64,
}

impl Default for BodyModel {
    fn default() -> Self {
        BodyModel {
            gain: (0.4, 0.8),
            excess_delay_ns: (3.0, 60.0),
            dwell_s: (600.0, 600.0),
            scatterers: 4,
            limb_gain: 0.5,
            limb_spread_ns: 5.0,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn signed_projection(rng: &mut ChaCha8Rng) -> f64 {
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    sign * rng.gen_range(MIN_PROJECTION..1.0)
}

impl BodyModel {
    fn validate(&self) -> Result<(), SynthError> {
        let ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi;
        if !ok(self.gain) || !ok(self.excess_delay_ns) || !ok(self.dwell_s) || self.dwell_s.0 <= 0.0
        {
            return Err(SynthError::Parameter(
                "body gain, delay and dwell ranges must be finite, >= 0 and ordered (dwell > 0)"
                    .into(),
            ));
        }
        if self.scatterers == 0
            || !ok((self.limb_gain, self.limb_gain))
            || !ok((self.limb_spread_ns, self.limb_spread_ns))
        {
            return Err(SynthError::Parameter(
                "body needs at least one scatterer; limb gain and spread must be finite and >= 0"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Scatterers of one receiver whose LOS delay is `los_ns`.
    pub fn draw(&self, los_ns: f64, rng: &mut ChaCha8Rng) -> Vec<BodyPath> {
        let projection = signed_projection(rng);
        let torso_delay = los_ns + uniform(rng, self.excess_delay_ns);
        let torso_gain = uniform(rng, self.gain);
        (0..self.scatterers)
            .map(|k| BodyPath {
                delay_ns: if k == 0 {
                    torso_delay
                } else {
                    torso_delay + uniform(rng, (0.0, self.limb_spread_ns))
                },
                gain: if k == 0 {
                    torso_gain
                } else {
                    torso_gain * self.limb_gain
                },
                phase: rng.gen_range(0.0..TAU),
                angle: rng.gen_range(0.0..PI),
                projection,
                limb_projection: signed_projection(rng),
            })
            .collect()
    }

    fn mean_power(&self) -> f64 {
        let (lo, hi) = self.gain;
        let limbs = self.scatterers.saturating_sub(1) as f64 * self.limb_gain * self.limb_gain;
        (lo * lo + lo * hi + hi * hi) / 3.0 * (1.0 + limbs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReceiverSpec {
    /// Static paths; the first one is the line of sight.
    pub paths: Vec<PathSpec>,
    /// Offset of the receiver clock, microseconds.
    pub clock_offset_us: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentSpec {
    pub name: String,
    pub bandwidth: Bandwidth,
    pub antennas: usize,
    /// Antenna spacing in carrier wavelengths.
    pub antenna_spacing: f64,
    pub receivers: Vec<ReceiverSpec>,
    pub body: BodyModel,
    pub snr_db: f64,
    /// Per-packet gain is uniform in `[-agc_db, agc_db]` dB.
    pub agc_db: f64,
    pub seed: u64,
}

/// Knobs for [`EnvironmentSpec::random`].
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentParams {
    pub receivers: usize,
    pub antennas: usize,
    pub bandwidth: Bandwidth,
    pub paths: usize,
    /// Largest excess delay of a static path, ns.
    pub max_delay_ns: f64,
    /// Non-LOS static paths drift with a Doppler shift uniform in
    /// `[-static_doppler_hz, static_doppler_hz]` (slowly moving objects).
    pub static_doppler_hz: f64,
    /// Gain range of non-LOS static paths before the delay decay
    /// `exp(-excess / (max_delay_ns / 2))`; the LOS gain is 1.
    pub nlos_gain: (f64, f64),
    pub body: BodyModel,
    pub snr_db: f64,
    pub agc_db: f64,
}

impl Default for EnvironmentParams {
    fn default() -> Self {
        EnvironmentParams {
            receivers: 3,
            antennas: 4,
            bandwidth: Bandwidth::Mhz20,
            paths: 5,
            max_delay_ns: 150.0,
            static_doppler_hz: 0.0,
            nlos_gain: (0.3, 0.9),
            body: BodyModel::default(),
            snr_db: 20.0,
            agc_db: 2.0,
        }
    }
}

impl EnvironmentSpec {
    /// Draws path sets for every receiver from `seed`.
    pub fn random(name: &str, seed: u64, params: &EnvironmentParams) -> Result<Self, SynthError> {
        if params.receivers == 0 || params.antennas == 0 || params.paths == 0 {
            return Err(SynthError::Parameter(
                "receivers, antennas and paths must all be at least 1".into(),
            ));
        }
        if params.receivers > 256 || params.antennas > 256 {
            return Err(SynthError::Parameter(
                "at most 256 receivers and antennas".into(),
            ));
        }
        params.body.validate()?;
        if !(params.max_delay_ns.is_finite() && params.max_delay_ns > 0.0)
            || !(params.static_doppler_hz >= 0.0 && params.static_doppler_hz.is_finite())
        {
            return Err(SynthError::Parameter(
                "delay spread must be positive and static Doppler finite and >= 0".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut receivers = Vec::with_capacity(params.receivers);
        for _ in 0..params.receivers {
            let los = rng.gen_range(10.0..40.0);
            let mut paths = Vec::with_capacity(params.paths);
            for l in 0..params.paths {
                let excess: f64 = if l == 0 {
                    0.0
                } else {
                    rng.gen_range(5.0..params.max_delay_ns)
                };
                let gain = if l == 0 {
                    1.0
                } else {
                    (-excess / (0.5 * params.max_delay_ns)).exp()
                        * uniform(&mut rng, params.nlos_gain)
                };
                paths.push(PathSpec {
                    delay_ns: los + excess,
                    gain,
                    phase: rng.gen_range(0.0..TAU),
                    doppler_hz: if l == 0 || params.static_doppler_hz == 0.0 {
                        0.0
                    } else {
                        rng.gen_range(-params.static_doppler_hz..params.static_doppler_hz)
                    },
                    angle: rng.gen_range(0.0..PI),
                });
            }
            receivers.push(ReceiverSpec {
                paths,
                clock_offset_us: rng.gen_range(0..1_000_000),
            });
        }
        let spec = EnvironmentSpec {
            name: name.to_string(),
            bandwidth: params.bandwidth,
            antennas: params.antennas,
            antenna_spacing: 0.5,
            receivers,
            body: params.body.clone(),
            snr_db: params.snr_db,
            agc_db: params.agc_db,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.receivers.is_empty() || self.antennas == 0 {
            return Err(SynthError::Parameter(
                "need at least one receiver and one antenna".into(),
            ));
        }
        if self.receivers.len() > 256 || self.antennas > 256 {
            return Err(SynthError::Parameter(
                "at most 256 receivers and antennas".into(),
            ));
        }
        for (r, rx) in self.receivers.iter().enumerate() {
            if rx.paths.is_empty() {
                return Err(SynthError::Parameter(format!("receiver {r} has no paths")));
            }
            for p in &rx.paths {
                if !(p.delay_ns.is_finite() && p.delay_ns >= 0.0)
                    || !p.gain.is_finite()
                    || !p.phase.is_finite()
                    || !p.doppler_hz.is_finite()
                {
                    return Err(SynthError::Parameter(format!(
                        "receiver {r}: path delay must be >= 0 and all values finite"
                    )));
                }
            }
        }
        self.body.validate()?;
        if !self.snr_db.is_finite() && self.snr_db != f64::INFINITY {
            return Err(SynthError::Parameter("snr must be a number or inf".into()));
        }
        if !(self.agc_db >= 0.0 && self.agc_db.is_finite()) {
            return Err(SynthError::Parameter(
                "agc spread must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// How the body moves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Motion {
    /// Nobody in the room.
    Absent,
    /// Sinusoidal path-length change.
    Oscillation,
    /// Constant-speed walk that reverses direction every few seconds.
    Drift,
}

/// Activity model: motion pattern, its rate, its amplitude and the body
/// gain modulation.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityClass {
    pub class_id: usize,
    pub name: String,
    pub motion: Motion,
    /// Oscillation frequency, or for a drift the Doppler shift it causes.
    pub rate_hz: f64,
    /// Oscillation amplitude in wavelengths (unused for drifts).
    pub amplitude: f64,
    /// Relative depth of the body gain modulation.
    pub gain_modulation: f64,
    /// Frequency of the body gain modulation.
    pub gain_rate_hz: f64,
    /// Random-walk spread of the body position, wavelengths per sqrt(s).
    pub wander: f64,
    /// Amplitude (wavelengths) of each limb's own sinusoidal swing, with an
    /// independent phase per limb.
    pub limb_amplitude: f64,
    pub limb_rate_hz: f64,
}

impl ActivityClass {
    /// The four built-in activities: empty, standing, walking, jumping.
    pub fn builtin() -> Vec<ActivityClass> {
        vec![
            ActivityClass {
                class_id: 0,
                name: "empty".into(),
                motion: Motion::Absent,
                rate_hz: 0.0,
                amplitude: 0.0,
                gain_modulation: 0.0,
                gain_rate_hz: 0.0,
                wander: 0.0,
                limb_amplitude: 0.0,
                limb_rate_hz: 0.0,
            },
            ActivityClass {
                class_id: 1,
                name: "standing".into(),
                motion: Motion::Oscillation,
                rate_hz: 0.3,
                amplitude: 0.05,
                gain_modulation: 0.05,
                gain_rate_hz: 0.3,
                wander: 0.02,
                limb_amplitude: 0.0,
                limb_rate_hz: 0.0,
            },
            ActivityClass {
                class_id: 2,
                name: "walking".into(),
                motion: Motion::Drift,
                rate_hz: 1.5,
                amplitude: 0.0,
                gain_modulation: 0.1,
                gain_rate_hz: 0.9,
                wander: 0.0,
                limb_amplitude: 0.5,
                limb_rate_hz: 1.0,
            },
            ActivityClass {
                class_id: 3,
                name: "jumping".into(),
                motion: Motion::Oscillation,
                rate_hz: 3.0,
                amplitude: 0.3,
                gain_modulation: 0.6,
                gain_rate_hz: 3.0,
                wander: 0.05,
                limb_amplitude: 0.0,
                limb_rate_hz: 0.0,
            },
        ]
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let values = [
            self.rate_hz,
            self.amplitude,
            self.gain_modulation,
            self.gain_rate_hz,
            self.wander,
            self.limb_amplitude,
            self.limb_rate_hz,
        ];
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SynthError::Parameter(format!(
                "activity '{}': rates, amplitudes and modulation must be finite and >= 0",
                self.name
            )));
        }
        if self.gain_modulation >= 1.0 {
            return Err(SynthError::Parameter(format!(
                "activity '{}': gain modulation must be below 1",
                self.name
            )));
        }
        Ok(())
    }
}

/// Per-capture random realization of an activity.
struct MotionState {
    phase: f64,
    gain_phase: f64,
    rate: f64,
    amplitude: f64,
    /// Seconds between direction reversals of a drift.
    leg_s: f64,
    wander: f64,
    limb_phases: Vec<f64>,
    limb_rate: f64,
}

impl MotionState {
    fn new(activity: &ActivityClass, scatterers: usize, rng: &mut ChaCha8Rng) -> Self {
        MotionState {
            limb_phases: (0..scatterers).map(|_| rng.gen_range(0.0..TAU)).collect(),
            limb_rate: activity.limb_rate_hz * rng.gen_range(0.9..1.1),
            phase: rng.gen_range(0.0..TAU),
            gain_phase: rng.gen_range(0.0..TAU),
            rate: activity.rate_hz * rng.gen_range(0.9..1.1),
            amplitude: activity.amplitude * rng.gen_range(0.8..1.2),
            leg_s: rng.gen_range(4.0..8.0),
            wander: 0.0,
        }
    }

    /// Body displacement (wavelengths) and gain factor at time `t`; advances
    /// the random walk by `dt`.
    fn step(
        &mut self,
        activity: &ActivityClass,
        t: f64,
        dt: f64,
        rng: &mut ChaCha8Rng,
    ) -> (f64, f64) {
        let z: f64 = StandardNormal.sample(rng);
        self.wander += activity.wander * dt.sqrt() * z;
        let d = match activity.motion {
            Motion::Absent => 0.0,
            Motion::Oscillation => self.amplitude * (TAU * self.rate * t + self.phase).sin(),
            Motion::Drift => {
                // Triangle wave: speed `rate` wavelengths per second.
                let leg = self.leg_s;
                let pos = (t + self.phase / TAU * leg).rem_euclid(2.0 * leg);
                let x = if pos < leg { pos } else { 2.0 * leg - pos };
                self.rate * x
            }
        };
        let g = 1.0
            + activity.gain_modulation * (TAU * activity.gain_rate_hz * t + self.gain_phase).sin();
        (d + self.wander, g)
    }

    /// Own swing of scatterer `k` (wavelengths); the torso has none.
    fn limb(&self, activity: &ActivityClass, k: usize, t: f64) -> f64 {
        if k == 0 || activity.limb_amplitude == 0.0 {
            0.0
        } else {
            activity.limb_amplitude * (TAU * self.limb_rate * t + self.limb_phases[k]).sin()
        }
    }
}

/// Raw tone offsets in index order: index `i` is tone `i - fft/2`.
fn tone_offsets(bandwidth: Bandwidth) -> Vec<f64> {
    let n = bandwidth.fft_size() as i64;
    (0..n)
        .map(|i| (i - n / 2) as f64 * SUBCARRIER_SPACING_HZ)
        .collect()
}

/// Packet count for a duration: `ceil(duration * rate)`.
pub fn packet_count(duration_s: f64, rate_hz: f64) -> usize {
    (duration_s * rate_hz - 1e-9).ceil().max(0.0) as usize
}

/// Stable per-activity seed offset.
fn activity_seed(env_seed: u64, activity: &ActivityClass) -> u64 {
    env_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(0xA5A5_0000 + activity.class_id as u64)
}

/// Generates one capture of `activity` in `env`.
pub fn generate(
    env: &EnvironmentSpec,
    activity: &ActivityClass,
    duration_s: f64,
    rate_hz: f64,
) -> Result<Capture, SynthError> {
    generate_with_seed(
        env,
        activity,
        duration_s,
        rate_hz,
        activity_seed(env.seed, activity),
    )
}

/// As [`generate`] with an explicit seed for motion, gain and noise draws.
pub fn generate_with_seed(
    env: &EnvironmentSpec,
    activity: &ActivityClass,
    duration_s: f64,
    rate_hz: f64,
    seed: u64,
) -> Result<Capture, SynthError> {
    env.validate()?;
    activity.validate()?;
    if !(duration_s > 0.0 && duration_s.is_finite()) || !(rate_hz > 0.0 && rate_hz.is_finite()) {
        return Err(SynthError::Parameter(format!(
            "duration ({duration_s} s) and rate ({rate_hz} Hz) must be positive"
        )));
    }
    let packets = packet_count(duration_s, rate_hz);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tones = tone_offsets(env.bandwidth);
    let fft = tones.len();
    let lambda = SPEED_OF_LIGHT / CARRIER_HZ;
    let n_ant = env.antennas;

    // Static contribution of every path, per receiver/antenna/tone.
    let mut static_terms: Vec<Vec<Vec<Vec<Complex64>>>> = Vec::with_capacity(env.receivers.len());
    for rx in &env.receivers {
        let mut per_ant = Vec::with_capacity(n_ant);
        for n in 0..n_ant {
            let per_path = rx
                .paths
                .iter()
                .map(|p| {
                    let base = p.phase + TAU * n as f64 * env.antenna_spacing * p.angle.cos();
                    tones
                        .iter()
                        .map(|f| Complex64::from_polar(p.gain, base - TAU * f * p.delay_ns * 1e-9))
                        .collect()
                })
                .collect();
            per_ant.push(per_path);
        }
        static_terms.push(per_ant);
    }
    let power: Vec<f64> = env
        .receivers
        .iter()
        .map(|rx| {
            rx.paths.iter().map(|p| p.gain * p.gain).sum::<f64>()
                + if activity.motion == Motion::Absent {
                    0.0
                } else {
                    env.body.mean_power()
                }
        })
        .collect();
    let noise_std: Vec<f64> = power
        .iter()
        .map(|p| {
            if env.snr_db.is_infinite() {
                0.0
            } else {
                (p / 10f64.powf(env.snr_db / 10.0) / 2.0).sqrt()
            }
        })
        .collect();

    let mut motion = MotionState::new(activity, env.body.scatterers, &mut rng);
    let mut spot_rng = ChaCha8Rng::seed_from_u64(seed);
    spot_rng.set_stream(1);
    let draw_spots = |rng: &mut ChaCha8Rng| -> Vec<Vec<BodyPath>> {
        env.receivers
            .iter()
            .map(|rx| env.body.draw(rx.paths[0].delay_ns, rng))
            .collect()
    };
    let mut bodies = draw_spots(&mut spot_rng);
    let mut next_move = uniform(&mut spot_rng, env.body.dwell_s);
    let seq0: u16 = rng.gen_range(0..SEQ_MODULUS);
    let interval_us = 1e6 / rate_hz;
    let dt = 1.0 / rate_hz;
    let mut records = Vec::with_capacity(packets * env.receivers.len() * n_ant);
    let mut h = vec![Complex64::new(0.0, 0.0); fft];
    for i in 0..packets {
        let t = i as f64 * dt;
        if t >= next_move {
            bodies = draw_spots(&mut spot_rng);
            next_move += uniform(&mut spot_rng, env.body.dwell_s);
        }
        let (disp, body_gain) = motion.step(activity, t, dt, &mut rng);
        let seq_num = ((u32::from(seq0) + i as u32) % u32::from(SEQ_MODULUS)) as u16;
        let jitter: f64 = rng.gen_range(-50.0..50.0);
        let local_us = (i as f64 * interval_us + jitter).max(0.0) as u64;
        for (r, rx) in env.receivers.iter().enumerate() {
            let agc_db: f64 = if env.agc_db > 0.0 {
                rng.gen_range(-env.agc_db..env.agc_db)
            } else {
                0.0
            };
            let agc = 10f64.powf(agc_db / 20.0);
            for n in 0..n_ant {
                for (hk, _) in h.iter_mut().zip(&tones) {
                    *hk = Complex64::new(0.0, 0.0);
                }
                for (p, terms) in rx.paths.iter().zip(&static_terms[r][n]) {
                    let rot = Complex64::from_polar(1.0, TAU * p.doppler_hz * t);
                    for (hk, c) in h.iter_mut().zip(terms) {
                        *hk += c * rot;
                    }
                }
                if activity.motion != Motion::Absent {
                    for (k, b) in bodies[r].iter().enumerate() {
                        let d = (disp * b.projection
                            + motion.limb(activity, k, t) * b.limb_projection)
                            * lambda;
                        let tau = b.delay_ns * 1e-9 + d / SPEED_OF_LIGHT;
                        let base = b.phase - TAU * d / lambda
                            + TAU * n as f64 * env.antenna_spacing * b.angle.cos();
                        let amp = b.gain * body_gain;
                        for (hk, f) in h.iter_mut().zip(&tones) {
                            *hk += Complex64::from_polar(amp, base - TAU * f * tau);
                        }
                    }
                }
                let csi = h
                    .iter()
                    .map(|hk| {
                        let (nr, ni): (f64, f64) = if noise_std[r] > 0.0 {
                            (
                                StandardNormal.sample(&mut rng),
                                StandardNormal.sample(&mut rng),
                            )
                        } else {
                            (0.0, 0.0)
                        };
                        let v = hk * agc + Complex64::new(nr, ni) * noise_std[r];
                        ComplexSample::new(v.re as f32, v.im as f32)
                    })
                    .collect();
                records.push(CsiRecord {
                    receiver_id: r as u8,
                    antenna_id: n as u8,
                    stream_id: 0,
                    seq_num,
                    timestamp_us: rx.clock_offset_us + local_us,
                    csi,
                });
            }
        }
    }
    Ok(Capture {
        bandwidth: env.bandwidth,
        records,
    })
}

/// Drops every record independently with probability `p`.
pub fn inject_loss(capture: &Capture, p: f64, seed: u64) -> Result<Capture, SynthError> {
    if !(0.0..1.0).contains(&p) {
        return Err(SynthError::Parameter(format!(
            "loss probability {p} outside [0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = capture
        .records
        .iter()
        .filter(|_| !rng.gen_bool(p))
        .cloned()
        .collect();
    Ok(Capture {
        bandwidth: capture.bandwidth,
        records,
    })
}
