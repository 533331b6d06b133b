//! Reading environments and activities from a [`Config`].
//!
//! ```text
//! [synth]
//! duration_s = 120
//! rate_hz = 100
//! environments = A, B
//! bandwidths = 20, 80
//!
//! [env.A]
//! seed = 11
//! receivers = 3
//! antennas = 4
//! paths = 5
//! max_delay_ns = 150
//! body_gain = 0.4, 0.8
//! body_delay_ns = 3, 60
//! dwell_s = 10, 20
//! body_scatterers = 4
//! snr_db = 20
//! agc_db = 2
//!
//! [activity.walking]
//! rate_hz = 1.5
//! limb_amplitude = 0.5
//! ```
//!
//! Every key is optional. An environment without a `seed` gets one derived
//! from the run seed and its position in the list.

use super::{ActivityClass, BodyModel, EnvironmentParams, EnvironmentSpec, SynthError};
use crate::config::{Config, ConfigError};
use crate::ingest::Bandwidth;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSettings {
    pub duration_s: f64,
    pub rate_hz: f64,
    pub bandwidths: Vec<Bandwidth>,
    /// Environments drawn at the first bandwidth; see [`SynthSettings::at`].
    pub environments: Vec<EnvironmentSpec>,
    pub activities: Vec<ActivityClass>,
}

fn bandwidth(mhz: u16, section: &str, key: &str) -> Result<Bandwidth, ConfigError> {
    Bandwidth::from_mhz(mhz).ok_or_else(|| ConfigError::Invalid {
        section: section.into(),
        key: key.into(),
        value: mhz.to_string(),
        reason: "bandwidth must be 20 or 80".into(),
    })
}

impl SynthSettings {
    pub fn from_config(config: &Config, seed: u64) -> Result<Self, SynthError> {
        let duration_s = config.parsed_or("synth", "duration_s", 120.0)?;
        let rate_hz = config.parsed_or("synth", "rate_hz", 100.0)?;
        let names: Vec<String> = config
            .list("synth", "environments")?
            .unwrap_or_else(|| vec!["A".to_string(), "B".to_string()]);
        if names.is_empty() {
            return Err(SynthError::Parameter("no environments configured".into()));
        }
        let bandwidths = match config.list::<u16>("synth", "bandwidths")? {
            Some(list) if !list.is_empty() => list
                .into_iter()
                .map(|m| bandwidth(m, "synth", "bandwidths"))
                .collect::<Result<Vec<_>, _>>()?,
            _ => vec![Bandwidth::Mhz20],
        };
        let mut environments = Vec::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            let default_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64 + 1);
            environments.push(environment_from_config(
                config,
                name,
                default_seed,
                bandwidths[0],
            )?);
        }
        Ok(SynthSettings {
            duration_s,
            rate_hz,
            bandwidths,
            environments,
            activities: activities_from_config(config)?,
        })
    }

    /// The environments re-expressed at another bandwidth (same paths).
    pub fn at(&self, bandwidth: Bandwidth) -> Vec<EnvironmentSpec> {
        self.environments
            .iter()
            .map(|e| EnvironmentSpec {
                bandwidth,
                ..e.clone()
            })
            .collect()
    }
}

/// `key = low, high` (or a single value for both ends).
fn range(
    config: &Config,
    s: &str,
    key: &str,
    default: (f64, f64),
) -> Result<(f64, f64), ConfigError> {
    match config.list::<f64>(s, key)? {
        None => Ok(default),
        Some(v) if v.len() == 1 => Ok((v[0], v[0])),
        Some(v) if v.len() == 2 => Ok((v[0], v[1])),
        Some(_) => Err(ConfigError::Invalid {
            section: s.into(),
            key: key.into(),
            value: config.get(s, key).unwrap_or_default().into(),
            reason: "expected 'low, high'".into(),
        }),
    }
}

/// Draws environment `name` from its `[env.<name>]` section.
pub fn environment_from_config(
    config: &Config,
    name: &str,
    default_seed: u64,
    default_bandwidth: Bandwidth,
) -> Result<EnvironmentSpec, SynthError> {
    let section = format!("env.{name}");
    let s = section.as_str();
    let d = EnvironmentParams::default();
    let bw = match config.parsed::<u16>(s, "bandwidth")? {
        Some(m) => bandwidth(m, s, "bandwidth")?,
        None => default_bandwidth,
    };
    let body = BodyModel {
        gain: range(config, s, "body_gain", d.body.gain)?,
        excess_delay_ns: range(config, s, "body_delay_ns", d.body.excess_delay_ns)?,
        dwell_s: range(config, s, "dwell_s", d.body.dwell_s)?,
        scatterers: config.parsed_or(s, "body_scatterers", d.body.scatterers)?,
        limb_gain: config.parsed_or(s, "limb_gain", d.body.limb_gain)?,
        limb_spread_ns: config.parsed_or(s, "limb_spread_ns", d.body.limb_spread_ns)?,
    };
    let params = EnvironmentParams {
        receivers: config.parsed_or(s, "receivers", d.receivers)?,
        antennas: config.parsed_or(s, "antennas", d.antennas)?,
        bandwidth: bw,
        paths: config.parsed_or(s, "paths", d.paths)?,
        max_delay_ns: config.parsed_or(s, "max_delay_ns", d.max_delay_ns)?,
        static_doppler_hz: config.parsed_or(s, "static_doppler_hz", d.static_doppler_hz)?,
        nlos_gain: range(config, s, "nlos_gain", d.nlos_gain)?,
        body,
        snr_db: config.parsed_or(s, "snr_db", d.snr_db)?,
        agc_db: config.parsed_or(s, "agc_db", d.agc_db)?,
    };
    let seed = config.parsed_or(s, "seed", default_seed)?;
    EnvironmentSpec::random(name, seed, &params)
}

/// Built-in activities with overrides from `[activity.<name>]` sections.
pub fn activities_from_config(config: &Config) -> Result<Vec<ActivityClass>, SynthError> {
    let mut out = ActivityClass::builtin();
    for a in &mut out {
        let s = format!("activity.{}", a.name);
        a.rate_hz = config.parsed_or(&s, "rate_hz", a.rate_hz)?;
        a.amplitude = config.parsed_or(&s, "amplitude", a.amplitude)?;
        a.gain_modulation = config.parsed_or(&s, "gain_modulation", a.gain_modulation)?;
        a.gain_rate_hz = config.parsed_or(&s, "gain_rate_hz", a.gain_rate_hz)?;
        a.wander = config.parsed_or(&s, "wander", a.wander)?;
        a.limb_amplitude = config.parsed_or(&s, "limb_amplitude", a.limb_amplitude)?;
        a.limb_rate_hz = config.parsed_or(&s, "limb_rate_hz", a.limb_rate_hz)?;
        a.validate()?;
    }
    let known: Vec<String> = out.iter().map(|a| format!("activity.{}", a.name)).collect();
    if let Some(unknown) = config
        .section_names()
        .find(|n| n.starts_with("activity.") && !known.iter().any(|k| k == n))
    {
        return Err(SynthError::Parameter(format!(
            "unknown activity section [{unknown}]"
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_without_config() {
        let s = SynthSettings::from_config(&Config::default(), 1).unwrap();
        assert_eq!(s.environments.len(), 2);
        assert_eq!(s.environments[0].receivers.len(), 3);
        assert_eq!(s.activities.len(), 4);
        assert_ne!(s.environments[0].seed, s.environments[1].seed);
    }

    #[test]
    fn overrides_apply() {
        let c = Config::parse(
            "[synth]\nenvironments = X\nbandwidths = 80\n[env.X]\nseed = 4\nreceivers = 2\nbody_gain = 0.3\n[activity.jumping]\nrate_hz = 2.5\n[activity.standing]\nlimb_amplitude = 0.2\n",
        )
        .unwrap();
        let s = SynthSettings::from_config(&c, 0).unwrap();
        assert_eq!(s.environments[0].seed, 4);
        assert_eq!(s.environments[0].receivers.len(), 2);
        assert_eq!(s.environments[0].bandwidth, Bandwidth::Mhz80);
        assert_eq!(s.environments[0].body.gain, (0.3, 0.3));
        assert_eq!(s.activities[3].rate_hz, 2.5);
        assert_eq!(s.activities[1].limb_amplitude, 0.2);
    }

    #[test]
    fn bad_values_rejected() {
        let c = Config::parse("[env.A]\nreceivers = 0\n").unwrap();
        assert!(SynthSettings::from_config(&c, 0).is_err());
        let c = Config::parse("[synth]\nbandwidths = 40\n").unwrap();
        assert!(SynthSettings::from_config(&c, 0).is_err());
        let c = Config::parse("[activity.dancing]\nrate_hz = 1\n").unwrap();
        assert!(SynthSettings::from_config(&c, 0).is_err());
    }
}
