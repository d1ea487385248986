//! Flat `key=value` run configuration covering the network, training,
//! phantom and windowing settings.

use std::collections::BTreeMap;
use std::path::Path;

use mfanet::config::{format_pairs, parse_pairs, reject_unknown, take_parsed};
use mfanet::formats::read_file;
use mfanet::network::NetworkConfig;
use mfanet::preprocessing::{PhantomSpec, WindowParams};
use mfanet::training::TrainConfig;
use mfanet::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    /// `size` always equals `network.input_size`.
    pub phantom: PhantomSpec,
    pub window: WindowParams,
}

impl RunConfig {
    pub const PHANTOM_KEYS: [&'static str; 8] = [
        "phantom_count",
        "phantom_seed",
        "organ_radius_min",
        "organ_radius_max",
        "lesion_radius_min",
        "lesion_radius_max",
        "lesion_contrast",
        "noise_sigma",
    ];
    pub const WINDOW_KEYS: [&'static str; 2] = ["window_center", "window_width"];

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = parse_pairs(text)?;
        let mut cfg = RunConfig::default();
        cfg.network.apply_pairs(&mut pairs)?;
        cfg.train.apply_pairs(&mut pairs)?;
        apply_phantom(&mut cfg.phantom, &mut pairs)?;
        take_parsed(&mut pairs, "window_center", &mut cfg.window.center)?;
        take_parsed(&mut pairs, "window_width", &mut cfg.window.width)?;
        reject_unknown(&pairs)?;
        cfg.phantom.size = cfg.network.input_size;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Invalid(format!("{}: not UTF-8 text", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.phantom.validate()?;
        self.window.validate()
    }

    pub fn to_text(&self) -> String {
        let p = &self.phantom;
        let mut pairs = self.network.to_pairs();
        pairs.extend(self.train.to_pairs());
        pairs.extend([
            ("phantom_count".to_string(), p.count.to_string()),
            ("phantom_seed".to_string(), p.seed.to_string()),
            ("organ_radius_min".to_string(), p.organ_radius.0.to_string()),
            ("organ_radius_max".to_string(), p.organ_radius.1.to_string()),
            ("lesion_radius_min".to_string(), p.lesion_radius.0.to_string()),
            ("lesion_radius_max".to_string(), p.lesion_radius.1.to_string()),
            ("lesion_contrast".to_string(), p.lesion_contrast.to_string()),
            ("noise_sigma".to_string(), p.noise_sigma.to_string()),
            ("window_center".to_string(), self.window.center.to_string()),
            ("window_width".to_string(), self.window.width.to_string()),
        ]);
        format_pairs(&pairs)
    }
}

fn apply_phantom(p: &mut PhantomSpec, pairs: &mut BTreeMap<String, String>) -> Result<()> {
    take_parsed(pairs, "phantom_count", &mut p.count)?;
    take_parsed(pairs, "phantom_seed", &mut p.seed)?;
    take_parsed(pairs, "organ_radius_min", &mut p.organ_radius.0)?;
    take_parsed(pairs, "organ_radius_max", &mut p.organ_radius.1)?;
    take_parsed(pairs, "lesion_radius_min", &mut p.lesion_radius.0)?;
    take_parsed(pairs, "lesion_radius_max", &mut p.lesion_radius.1)?;
    take_parsed(pairs, "lesion_contrast", &mut p.lesion_contrast)?;
    take_parsed(pairs, "noise_sigma", &mut p.noise_sigma)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(err: Error) -> String {
        match err {
            Error::Config { key, .. } => key,
            other => panic!("not a config error: {other}"),
        }
    }

    #[test]
    fn empty_text_gives_defaults_and_round_trips() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.phantom.size, 64);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn keys_are_routed_to_their_owner() {
        let cfg = RunConfig::parse(
            "# overfit\nvariant=csse\nmax_steps=12\nphantom_seed=4\nwindow_width=350\ninput_size=32\norgan_radius_min=8\norgan_radius_max=10\nlesion_radius_max=5\n",
        )
        .unwrap();
        assert_eq!(cfg.network.variant.as_str(), "csse");
        assert_eq!(cfg.train.max_steps, 12);
        assert_eq!(cfg.phantom.seed, 4);
        assert_eq!(cfg.phantom.size, 32);
        assert_eq!(cfg.window.width, 350.0);
    }

    #[test]
    fn bad_keys_are_named() {
        let cases = [
            ("learnin_rate=0.1", "learnin_rate"),
            ("loss_mix=2", "loss_mix"),
            ("batch_size=x", "batch_size"),
            ("variant=unet", "variant"),
            ("window_width=0", "window_width"),
            ("input_size=40", "input_size"),
            ("lesion_radius_max=30", "lesion_radius"),
            ("seed=1\nseed=2", "seed"),
        ];
        for (text, key) in cases {
            assert_eq!(key_of(RunConfig::parse(text).unwrap_err()), key, "{text}");
        }
    }
}
